use std::sync::Arc;

use candle_core::DType;
use proptest::prelude::*;
use skelfree::mocap::dataset::Dataset;
use skelfree::mocap::prepare::synthetic_fixture;
use skelfree::mocap::topologies::{builtin, BODY17};
use skelfree::model::{Model, ModelConfig};
use skelfree::skeleton::{Landmarks, MotionSequence, SkeletonTemplate, SkeletonTopology, Vec3};
use skelfree::tasks::{
    add_noise, denoise, draw_proportion_subset, emit_report, eval_denoising, eval_representation, eval_upsampling,
    mpjpe, mpjpe_on, normalized_mpjpe, retarget, skeleton_height, EvalItem, EvalReport, ReportFormat, RetargetParams,
    REPORT_COLUMNS,
};

fn chain(n: usize) -> Arc<SkeletonTopology> {
    Arc::new(
        SkeletonTopology::new(
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| if i == 0 { None } else { Some(i - 1) }).collect(),
            vec![true; n],
            Landmarks::pelvis_only(0),
        )
        .unwrap(),
    )
}

fn seq_from(j: usize, f: usize, vals: &[f64]) -> MotionSequence {
    MotionSequence::from_fn(chain(j), f, 30.0, |jj, ff| {
        let k = 3 * (ff * j + jj);
        Vec3::new(vals[k], vals[k + 1], vals[k + 2])
    })
    .unwrap()
}

fn tiny() -> Model {
    Model::new(ModelConfig::tiny(), DType::F64, 3).unwrap()
}

fn fixture() -> Dataset {
    synthetic_fixture(0).unwrap()
}

fn items(n: usize) -> Vec<EvalItem> {
    let ds = fixture();
    let all = EvalItem::from_dataset(&ds, None);
    // both topologies
    let mut picked: Vec<EvalItem> = all.iter().take(n / 2).cloned().collect();
    picked.extend(all.iter().rev().take(n - n / 2).cloned());
    picked
}

#[test]
fn mpjpe_identity_and_uniform_offset() {
    let ds = fixture();
    let s = &ds.chunks[0].positions;
    assert_eq!(mpjpe(s, s).unwrap(), 0.0);
    let moved = s.translated(&Vec3::new(0.006, 0.0, 0.008));
    assert!((mpjpe(s, &moved).unwrap() - 1.0).abs() < 1e-9);
    assert!(mpjpe(s, &s.slice_frames(0, 5)).is_err());
}

proptest! {
    #[test]
    fn mpjpe_matches_brute_force(vals in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 4 * 3)) {
        let (a, b) = vals.split_at(3 * 4 * 3);
        let (a, b) = (seq_from(3, 4, a), seq_from(3, 4, b));
        let mut total = 0.0;
        for f in 0..4 {
            for j in 0..3 {
                let d = a.at(j, f) - b.at(j, f);
                total += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
            }
        }
        let oracle = 100.0 * total / 12.0;
        prop_assert!((mpjpe(&a, &b).unwrap() - oracle).abs() < 1e-9);
        prop_assert_eq!(mpjpe(&a, &b).unwrap(), mpjpe(&b, &a).unwrap());
        prop_assert_eq!(mpjpe_on(&a, &b, &[0, 1, 2]).unwrap(), mpjpe(&a, &b).unwrap());
    }

    #[test]
    fn normalized_error_is_unit_free(k in 0.1f64..10.0) {
        let ds = fixture();
        let c = &ds.chunks[3];
        let t = ds.template(&c.template_ref).unwrap();
        let noisy = add_noise(&c.positions, 0.02, 1).unwrap();
        let base = normalized_mpjpe(mpjpe(&noisy, &c.positions).unwrap(), skeleton_height(t).unwrap());
        let scale = |s: &MotionSequence| s.map_positions(|_, _, p| p * k);
        let scaled = normalized_mpjpe(mpjpe(&scale(&noisy), &scale(&c.positions)).unwrap(), skeleton_height(&t.scaled(k)).unwrap());
        prop_assert!((base - scaled).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn proportion_subsets_keep_pelvis(p in 0.05f64..=1.0, seed in any::<u64>()) {
        let (topo, _) = builtin(BODY17).unwrap();
        let kept = draw_proportion_subset(&topo, p, seed).unwrap();
        let j = topo.joint_count();
        prop_assert!(kept.contains(&topo.root()));
        prop_assert_eq!(kept.len(), ((p * j as f64).round() as usize).clamp(2, j));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn raw_retarget_to_same_template_is_reconstruction() {
    let model = tiny();
    let ds = fixture();
    let c = &ds.chunks[0];
    let t = ds.template(&c.template_ref).unwrap();
    let out = retarget(&model, &c.positions, t, t, &RetargetParams::RAW).unwrap();
    assert_eq!(out, model.reconstruct(&c.positions, t).unwrap());
}

#[test]
fn trajectory_follows_leg_ratio() {
    let model = tiny();
    let ds = fixture();
    let c = &ds.chunks[2];
    let t = ds.template(&c.template_ref).unwrap();
    let big = t.scaled(2.0);
    let params = RetargetParams { windowing: None, restore_trajectory: true };
    let d = Vec3::new(0.7, -0.3, 0.2);
    let a = retarget(&model, &c.positions, t, &big, &params).unwrap();
    let b = retarget(&model, &c.positions.translated(&d), t, &big, &params).unwrap();
    for (p, q) in a.positions().iter().zip(b.positions()) {
        assert!((q - p - d * 2.0).norm() < 1e-9);
    }
}

#[test]
fn windowed_denoise_covers_long_sequences() {
    let model = tiny();
    let ds = fixture();
    let t = ds.template(&ds.chunks[0].template_ref).unwrap();
    let long = MotionSequence::from_fn(t.topology().clone(), 47, 30.0, |j, f| {
        ds.chunks[0].positions.at(j, f % 30) + Vec3::new(0.01 * f as f64, 0.0, 0.0)
    })
    .unwrap();
    let out = denoise(&model, &long, t, &RetargetParams::default()).unwrap();
    assert_eq!((out.frame_count(), out.joint_count()), (47, t.joint_count()));
    assert!(out.positions().iter().all(|p| p.iter().all(|x| x.is_finite())));
}

#[test]
fn retarget_rejects_mismatched_template() {
    let model = tiny();
    let ds = fixture();
    let (_, other) = builtin(BODY17).unwrap();
    let c = ds.chunks.iter().find(|c| c.positions.joint_count() != 17).unwrap();
    assert!(retarget(&model, &c.positions, &other, &other, &RetargetParams::RAW).is_err());
}

#[test]
fn noise_input_error_matches_chi_mean() {
    let topo = chain(17);
    let clean = MotionSequence::from_fn(topo, 600, 30.0, |j, f| Vec3::new(j as f64 * 0.1, f as f64 * 0.01, 1.0)).unwrap();
    // E|N(0, s^2 I3)| = s * 2 * sqrt(2 / pi)
    let expected = 2.0 * 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    let noisy = add_noise(&clean, 0.02, 11).unwrap();
    let got = mpjpe(&noisy, &clean).unwrap();
    assert!((got / expected - 1.0).abs() < 0.02, "{got} vs {expected}");
    assert_eq!(add_noise(&clean, 0.0, 11).unwrap(), clean);
}

#[test]
fn zero_noise_and_full_proportion_reduce_to_representation() {
    let model = tiny();
    let it = items(4);
    let rep = eval_representation(&model, &it).unwrap();
    let den = eval_denoising(&model, &it, &[0.0, 2.0], 5).unwrap();
    let up = eval_upsampling(&model, &it, &[1.0, 0.5], 5).unwrap();
    for (k, r) in rep.rows.iter().enumerate() {
        assert_eq!(den.rows[k].mpjpe_cm, r.mpjpe_cm);
        assert_eq!(den.rows[k].input_mpjpe_cm, Some(0.0));
        assert_eq!(up.rows[k].mpjpe_cm, r.mpjpe_cm);
        assert_eq!(up.rows[k].held_out_mpjpe_cm, None);
        assert!(up.rows[it.len() + k].held_out_mpjpe_cm.is_some());
    }
    assert!(den.rows[it.len()..].iter().all(|r| r.input_mpjpe_cm.unwrap() > 2.0));
    assert_eq!(eval_denoising(&model, &it, &[0.0, 2.0], 5).unwrap(), den);
}

#[test]
fn summary_is_recomputable_from_rows() {
    let model = tiny();
    let it = items(6);
    let den = eval_denoising(&model, &it, &[0.0, 3.0], 9).unwrap();
    let topologies: std::collections::BTreeSet<&str> = it.iter().map(|i| i.topology.as_str()).collect();
    for a in den.aggregates() {
        let rows: Vec<f64> = den
            .rows
            .iter()
            .filter(|r| r.axis == a.axis && (a.topology == "all" || r.topology == a.topology))
            .map(|r| r.mpjpe_cm)
            .collect();
        let m = rows.iter().sum::<f64>() / rows.len() as f64;
        let sd = (rows.iter().map(|x| (x - m).powi(2)).sum::<f64>() / rows.len() as f64).sqrt();
        assert_eq!(a.n, rows.len());
        assert!((a.mean_mpjpe_cm - m).abs() < 1e-9 && (a.std_mpjpe_cm - sd).abs() < 1e-9);
    }
    assert_eq!(den.aggregates().len(), 2 * (topologies.len() + 1));
}

#[test]
fn emitted_reports_are_byte_identical() {
    let model = tiny();
    let it = items(4);
    let up = eval_upsampling(&model, &it, &[0.5, 1.0], 2).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let f1 = emit_report(&up, d1.path(), &[ReportFormat::Csv, ReportFormat::Svg]).unwrap();
    let f2 = emit_report(&up, d2.path(), &[ReportFormat::Csv, ReportFormat::Svg]).unwrap();
    assert_eq!(f1.len(), 4);
    for (a, b) in f1.iter().zip(&f2) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let csv = std::fs::read_to_string(d1.path().join("upsampling.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 1 + up.rows.len());
    let svg = std::fs::read_to_string(d1.path().join("upsampling.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let empty = EvalReport::new("representation", None, "0".into(), vec![]);
    let d3 = tempfile::tempdir().unwrap();
    let files = emit_report(&empty, d3.path(), &[ReportFormat::Csv, ReportFormat::Svg]).unwrap();
    assert_eq!(files.len(), 3);
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), format!("{}\n", REPORT_COLUMNS.join(",")));
}

#[test]
fn templates_of_items_match_motion() {
    for it in items(6) {
        assert_eq!(it.template.joint_count(), it.motion.joint_count());
        assert!(!it.unseen);
        let _: &SkeletonTemplate = &it.template;
    }
}
