use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use skelfree::mocap::prepare::synthetic_fixture;
use skelfree::model::{decode_checkpoint, encode_checkpoint, Model, ModelConfig, ParamStore};
use skelfree::skeleton::{Landmarks, MotionSequence, SkeletonTemplate, SkeletonTopology, Vec3};
use skelfree::training::{
    batch_loss, loss_blc, loss_rec, lr_at, read_metrics, AdamState, TrainConfig, TrainItem, TrainPair, Trainer,
    TrainingError, METRICS_FILE,
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

fn lcg(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*seed >> 11) as f64 / (1u64 << 53) as f64
}

fn random_seq(j: usize, f: usize, seed: u64) -> MotionSequence {
    let mut s = seed;
    MotionSequence::from_fn(chain(j), f, 30.0, |_, _| Vec3::new(lcg(&mut s), lcg(&mut s), lcg(&mut s))).unwrap()
}

fn fixture_items() -> Vec<TrainItem> {
    let ds = synthetic_fixture(0).unwrap();
    ds.chunks
        .iter()
        .map(|c| TrainItem { motion: c.positions.clone(), template: ds.template(&c.template_ref).unwrap().clone() })
        .collect()
}

/// Five-joint chain posed by a smooth motion, with a matching template.
fn small_item(frames: usize) -> TrainItem {
    let topo = chain(5);
    let motion = MotionSequence::from_fn(topo.clone(), frames, 30.0, |j, f| {
        let t = f as f64 / 30.0;
        let a = 0.3 * (2.0 * t + j as f64).sin();
        Vec3::new(0.2 * j as f64 * a.cos(), 0.05 * j as f64, 0.2 * j as f64 * a.sin() + 0.1 * t)
    })
    .unwrap();
    let template = SkeletonTemplate::new(topo, (0..5).map(|j| Vec3::new(0.0, 0.0, 0.2 * j as f64)).collect()).unwrap();
    TrainItem { motion, template }
}

#[test]
fn rec_loss_identities() {
    let a = random_seq(4, 5, 1);
    assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);
    let d = 0.37;
    let shifted = a.translated(&Vec3::new(d, 0.0, 0.0));
    assert!((loss_rec(&shifted, &a).unwrap() - d * d).abs() < 1e-12);

    let b = random_seq(4, 5, 2);
    let mut sum = 0.0;
    for f in 0..5 {
        for j in 0..4 {
            let (p, q) = (a.at(j, f), b.at(j, f));
            sum += (p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2);
        }
    }
    assert!((loss_rec(&a, &b).unwrap() - sum / 20.0).abs() < 1e-12);
    assert!(matches!(loss_rec(&a, &random_seq(3, 5, 1)), Err(TrainingError::Shape(_))));
}

#[test]
fn blc_loss_identities() {
    // one bone, ratio series [1.0, 1.2]
    let target = MotionSequence::new(chain(2), vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0)], 30.0).unwrap();
    let pred = MotionSequence::new(chain(2), vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::zeros(), Vec3::new(0.0, 1.2, 0.0)], 30.0).unwrap();
    assert!((loss_blc(&pred, &target).unwrap() - 0.01).abs() < 1e-12);

    let varying = random_seq(6, 9, 3);
    assert_eq!(loss_blc(&varying, &varying).unwrap(), 0.0);
    let scaled = varying.map_positions(|_, _, p| p * 2.5);
    let rigid = MotionSequence::from_fn(chain(6), 9, 30.0, |j, f| Vec3::new(0.1 * j as f64 + f as f64, 0.0, 0.0)).unwrap();
    let rigid2 = MotionSequence::from_fn(chain(6), 9, 30.0, |j, f| Vec3::new(0.0, 0.3 * j as f64, f as f64 * 0.1)).unwrap();
    assert!(loss_blc(&rigid, &rigid2).unwrap().abs() < 1e-12);
    assert!(loss_blc(&scaled, &varying).unwrap().abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blc_invariant_to_joint_rescaling(seed in any::<u64>(), s in 0.1f64..10.0) {
        let pred = random_seq(5, 7, seed);
        let target = random_seq(5, 7, seed ^ 0xABCD);
        let a = loss_blc(&pred, &target).unwrap();
        let b = loss_blc(&pred.map_positions(|_, _, p| p * s), &target.map_positions(|_, _, p| p * s)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn rec_nonnegative_and_symmetric(seed in any::<u64>()) {
        let a = random_seq(3, 4, seed);
        let b = random_seq(3, 4, seed.wrapping_add(1));
        let ab = loss_rec(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, loss_rec(&b, &a).unwrap());
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Largest relative deviation between analytical and central-difference
/// gradients over every parameter element.
pub fn gradient_check(model: &Model, pairs: &[TrainPair], lambda: f64, h: f64) -> (f64, usize) {
    let (loss, _, _) = batch_loss(model, pairs, lambda).unwrap();
    let grads = loss.backward().unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in model.params().iter() {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        for i in 0..base.len() {
            let eval = |x: f64| {
                let mut v = base.clone();
                v[i] = x;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                scalar(&batch_loss(model, pairs, lambda).unwrap().0)
            };
            let numeric = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let e = (analytic[i] - numeric).abs() / scale;
            if e > 1e-4 && std::env::var("GC_DEBUG").is_ok() {
                eprintln!("{name}[{i}] analytic {:e} numeric {:e}", analytic[i], numeric);
            }
            worst = worst.max(e);
            checked += 1;
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    (worst, checked)
}

/// Moves every parameter off its initialization so no pre-activation sits
/// exactly on a ReLU kink (zero biases with a pelvis at the origin would).
fn jitter_params(model: &Model, seed: u64) {
    let mut s = seed;
    for (_, var) in model.params().iter() {
        let v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let v: Vec<f64> = v.into_iter().map(|x| x + 0.1 * (lcg(&mut s) - 0.5)).collect();
        var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
}

#[test]
fn gradients_match_finite_differences() {
    let model = Model::new(ModelConfig::tiny(), DType::F64, 3).unwrap();
    jitter_params(&model, 11);
    let item = small_item(8);
    let pairs = vec![TrainPair::identity(&item)];
    let (worst, checked) = gradient_check(&model, &pairs, 0.5, 1e-6);
    assert_eq!(checked, model.parameter_count());
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn zero_lambda_reduces_to_rec() {
    let model = Model::new(ModelConfig::tiny(), DType::F64, 1).unwrap();
    let item = small_item(8);
    let pairs = vec![TrainPair::identity(&item)];
    let (total, rec, blc) = batch_loss(&model, &pairs, 0.0).unwrap();
    assert!(blc > 0.0);
    assert_eq!(scalar(&total), rec);
    let pred = model.reconstruct(&item.motion, &item.template).unwrap();
    assert!((loss_rec(&pred, &item.motion).unwrap() - rec).abs() < 1e-12);
    assert!((loss_blc(&pred, &item.motion).unwrap() - blc).abs() < 1e-9);
}

#[test]
fn adam_update_matches_hand_computation() {
    let cfg = TrainConfig::default();
    let mut store = ParamStore::default();
    let var = Var::from_tensor(&Tensor::new(&[0.5f64], &Device::Cpu).unwrap()).unwrap();
    store.insert("w".into(), var.clone());
    let mut adam = AdamState::new();
    let lr = 1e-3;

    // zero gradient on fresh moments: no movement
    adam.update(&store, &BTreeMap::new(), lr, &cfg).unwrap();
    assert_eq!(var.as_tensor().to_vec1::<f64>().unwrap(), vec![0.5]);

    let g = 0.2;
    let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[g], &Device::Cpu).unwrap())]);
    adam.update(&store, &grads, lr, &cfg).unwrap();
    let (m, v) = ((1.0 - 0.9) * g, (1.0 - 0.999) * g * g);
    let expected = 0.5 - lr * (m / (1.0 - 0.9f64.powi(2))) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
    assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");

    // zero gradient after a real one: moves by the decayed moments only
    adam.update(&store, &BTreeMap::new(), lr, &cfg).unwrap();
    let (m, v) = (0.9 * m, 0.999 * v);
    let expected = expected - lr * (m / (1.0 - 0.9f64.powi(3))) / ((v / (1.0 - 0.999f64.powi(3))).sqrt() + 1e-8);
    let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
    assert!((got - expected).abs() < 1e-15);
    assert_eq!(adam.step(), 3);
}

fn tiny_trainer(items: Vec<TrainItem>, cfg: TrainConfig) -> Trainer {
    Trainer::new(Model::new(ModelConfig::tiny(), DType::F32, cfg.seed).unwrap(), cfg, items).unwrap()
}

fn losses(t: &mut Trainer, n: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| t.step().map(|m| (m.rec, m.blc)).unwrap()).collect()
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let cfg = TrainConfig { batch_size: 4, seed: 9, lr_period: 20, ..TrainConfig::default() };
    let a = losses(&mut tiny_trainer(fixture_items(), cfg.clone()), 10);
    let b = losses(&mut tiny_trainer(fixture_items(), cfg.clone()), 10);
    assert_eq!(a, b);
    let c = losses(&mut tiny_trainer(fixture_items(), TrainConfig { seed: 10, ..cfg }), 10);
    assert_ne!(a, c);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = TrainConfig { batch_size: 3, seed: 4, lr_period: 8, ..TrainConfig::default() };
    let mut straight = tiny_trainer(fixture_items(), cfg.clone());
    let full = losses(&mut straight, 10);

    let mut first = tiny_trainer(fixture_items(), cfg.clone());
    let head = losses(&mut first, 5);
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let ck = decode_checkpoint(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ck, cfg, fixture_items()).unwrap();
    assert_eq!(resumed.step_count(), 5);
    let tail = losses(&mut resumed, 5);
    assert_eq!(full, [head, tail].concat());
    for ((_, a), (_, b)) in straight.model().params().iter().zip(resumed.model().params().iter()) {
        assert_eq!(a.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}

#[test]
fn tiny_model_overfits_one_chunk() {
    let items = fixture_items()[..1].to_vec();
    let cfg = TrainConfig { batch_size: 1, seed: 2, lr_min: 1e-3, lr_max: 1e-2, lr_period: 100, ..TrainConfig::default() };
    let mut t = tiny_trainer(items.clone(), cfg);
    let first = t.step().unwrap().rec;
    let rest = losses(&mut t, 499);
    let last: f64 = rest[rest.len() - 20..].iter().map(|l| l.0).sum::<f64>() / 20.0;
    assert!(first / last >= 10.0, "rec went from {first} to {last}");
}

#[test]
fn run_writes_metrics_and_aborts_on_nan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 2, iterations: 6, checkpoint_every: 3, finetune: true, ..TrainConfig::default() };
    let mut t = tiny_trainer(fixture_items(), cfg.clone());
    t.run(dir.path(), |_, _| false).unwrap();
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.lr == 5e-5));
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());

    let ck_path = skelfree::training::checkpoint_path(dir.path());
    let good = std::fs::read(&ck_path).unwrap();
    let ck = decode_checkpoint(&good).unwrap();
    let more = TrainConfig { iterations: 12, ..cfg };
    let mut t = Trainer::resume(&ck, more, fixture_items()).unwrap();
    for (_, var) in t.model().params().iter() {
        var.set(&(var.as_tensor().ones_like().unwrap() * f64::NAN).unwrap()).unwrap();
    }
    let err = t.run(dir.path(), |_, _| false).unwrap_err();
    assert!(matches!(err, TrainingError::NonFinite { step: 6, .. }), "{err}");
    assert_eq!(std::fs::read(&ck_path).unwrap(), good);
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 6);
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig { lr_period: 40, ..TrainConfig::default() };
    assert_eq!(lr_at(0, &cfg), 1e-5);
    assert!((lr_at(20, &cfg) - 1e-4).abs() < 1e-18);
    assert_eq!(lr_at(40, &cfg), 1e-5);
    for k in 0..20 {
        let closed = 1e-5 + (1e-4 - 1e-5) * k as f64 / 20.0;
        assert!((lr_at(k, &cfg) - closed).abs() < 1e-18);
    }
}
