use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mpjpe, mpjpe_on, normalized_mpjpe, retarget, skeleton_height, EvalReport, EvalRow, RetargetParams, TaskError};
use crate::mocap::dataset::Dataset;
use crate::mocap::Split;
use crate::model::Model;
use crate::skeleton::{MotionSequence, SkeletonTemplate, SkeletonTopology};
use crate::training::derive_seed;

/// Noise levels of the denoising sweep, in centimeters.
pub const DEFAULT_SIGMAS_CM: [f64; 7] = [0.0, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0];
/// Input-joint proportions of the upsampling sweep.
pub const DEFAULT_PROPORTIONS: [f64; 6] = [0.25, 0.4, 0.5, 0.7, 0.85, 1.0];

/// One evaluated sequence with its template.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub topology: String,
    /// The topology has no training chunks.
    pub unseen: bool,
    pub motion: MotionSequence,
    pub template: SkeletonTemplate,
}

impl EvalItem {
    /// Chunks of `ds`, optionally restricted to one split.
    pub fn from_dataset(ds: &Dataset, split: Option<Split>) -> Vec<EvalItem> {
        let seen: BTreeSet<&str> = ds
            .split(Split::Train)
            .filter_map(|c| ds.topology_of_template(&c.template_ref))
            .collect();
        ds.chunks
            .iter()
            .enumerate()
            .filter(|(_, c)| split.is_none_or(|s| c.split == s))
            .filter_map(|(i, c)| {
                let (topo, t) = ds.templates.get(&c.template_ref)?;
                Some(EvalItem {
                    id: format!("{}@{}#{i}", c.source_id, c.start_frame),
                    topology: topo.clone(),
                    unseen: !seen.contains(topo.as_str()),
                    motion: c.positions.clone(),
                    template: t.clone(),
                })
            })
            .collect()
    }
}

/// CRC32 over the model config and every parameter value, as hex.
pub fn config_fingerprint(model: &Model) -> String {
    let mut h = crc32fast::Hasher::new();
    h.update(serde_json::to_string(model.config()).unwrap_or_default().as_bytes());
    for (name, var) in model.params().iter() {
        h.update(name.as_bytes());
        if let Ok(v) = var.as_tensor().flatten_all().and_then(|t| t.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()) {
            for x in v {
                h.update(&x.to_le_bytes());
            }
        }
    }
    format!("{:08x}", h.finalize())
}

fn height(t: &SkeletonTemplate) -> Option<f64> {
    skeleton_height(t).ok().filter(|h| *h > 0.0)
}

fn base_row(item: &EvalItem, axis: Option<f64>, mpjpe_cm: f64) -> EvalRow {
    EvalRow {
        axis,
        item: item.id.clone(),
        topology: item.topology.clone(),
        unseen: item.unseen,
        input_mpjpe_cm: None,
        mpjpe_cm,
        normalized_mpjpe: height(&item.template).map(|h| normalized_mpjpe(mpjpe_cm, h)),
        kept_mpjpe_cm: None,
        held_out_mpjpe_cm: None,
    }
}

/// Encode-decode error of every item under its own template.
pub fn eval_representation(model: &Model, items: &[EvalItem]) -> Result<EvalReport, TaskError> {
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let out = retarget(model, &item.motion, &item.template, &item.template, &RetargetParams::RAW)?;
        rows.push(base_row(item, None, mpjpe(&out, &item.motion)?));
    }
    Ok(EvalReport::new("representation", None, config_fingerprint(model), rows))
}

/// Adds i.i.d. centered Gaussian noise of standard deviation `sigma` (in
/// the sequence's unit) to every coordinate.
pub fn add_noise(seq: &MotionSequence, sigma: f64, seed: u64) -> Result<MotionSequence, TaskError> {
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| TaskError::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(seq.map_positions(|_, _, p| {
        p + crate::skeleton::Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
    }))
}

/// Denoising sweep: for each noise level (centimeters), the error of the
/// noisy input and of its encode-decode against the clean motion.
pub fn eval_denoising(model: &Model, items: &[EvalItem], sigmas_cm: &[f64], seed: u64) -> Result<EvalReport, TaskError> {
    if let Some(s) = sigmas_cm.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(TaskError::Parameter(format!("noise level {s}")));
    }
    let mut rows = Vec::new();
    for (si, &sigma) in sigmas_cm.iter().enumerate() {
        for (k, item) in items.iter().enumerate() {
            let noisy = add_noise(&item.motion, sigma / 100.0, derive_seed(&[seed, si as u64, k as u64]))?;
            let out = retarget(model, &noisy, &item.template, &item.template, &RetargetParams::RAW)?;
            let mut row = base_row(item, Some(sigma), mpjpe(&out, &item.motion)?);
            row.input_mpjpe_cm = Some(mpjpe(&noisy, &item.motion)?);
            rows.push(row);
        }
    }
    Ok(EvalReport::new("denoising", Some("sigma_cm"), config_fingerprint(model), rows))
}

fn is_finger(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    ["finger", "thumb", "index", "pinky"].iter().any(|k| n.contains(k))
}

/// Keeps `round(p * J)` eligible joints (at least two), the pelvis always
/// among them; finger joints are never kept.
pub fn draw_proportion_subset(topo: &SkeletonTopology, proportion: f64, seed: u64) -> Result<Vec<usize>, TaskError> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(TaskError::Parameter(format!("proportion {proportion} outside (0, 1]")));
    }
    let pelvis = topo.root();
    let eligible: Vec<usize> = (0..topo.joint_count()).filter(|&j| !is_finger(&topo.names()[j])).collect();
    let others: Vec<usize> = eligible.iter().copied().filter(|&j| j != pelvis).collect();
    let count = ((proportion * eligible.len() as f64).round() as usize).clamp(2.min(eligible.len()), eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept: Vec<usize> = sample(&mut rng, others.len(), count - 1).into_iter().map(|i| others[i]).collect();
    kept.push(pelvis);
    kept.sort_unstable();
    Ok(kept)
}

/// Upsampling sweep: encode on a random joint subset of each proportion,
/// decode on the full template, score on all non-finger joints and
/// separately on the kept and held-out ones.
pub fn eval_upsampling(model: &Model, items: &[EvalItem], proportions: &[f64], seed: u64) -> Result<EvalReport, TaskError> {
    let mut rows = Vec::new();
    for (pi, &p) in proportions.iter().enumerate() {
        for (k, item) in items.iter().enumerate() {
            let topo = item.template.topology();
            let kept = draw_proportion_subset(topo, p, derive_seed(&[seed, pi as u64, k as u64]))?;
            let scored: Vec<usize> = (0..topo.joint_count()).filter(|&j| !is_finger(&topo.names()[j])).collect();
            let held: Vec<usize> = scored.iter().copied().filter(|j| kept.binary_search(j).is_err()).collect();
            let sub_seq = item.motion.restrict(&kept)?;
            let sub_t = item.template.restrict(&kept)?;
            let out = retarget(model, &sub_seq, &sub_t, &item.template, &RetargetParams::RAW)?;
            let mut row = base_row(item, Some(p), mpjpe_on(&out, &item.motion, &scored)?);
            row.kept_mpjpe_cm = Some(mpjpe_on(&out, &item.motion, &kept)?);
            row.held_out_mpjpe_cm = if held.is_empty() { None } else { Some(mpjpe_on(&out, &item.motion, &held)?) };
            rows.push(row);
        }
    }
    Ok(EvalReport::new("upsampling", Some("proportion"), config_fingerprint(model), rows))
}
