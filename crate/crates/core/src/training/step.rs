use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};

use super::{derive_seed, lr_at, AdamState, TrainConfig, TrainingError};
use crate::model::{sequence_tensor, template_tensor, Model};
use crate::skeleton::{subsample_joints, MotionSequence, SkeletonTemplate};

const LENGTH_EPS: f64 = 1e-12;

/// A training chunk with the template of its performer.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub motion: MotionSequence,
    pub template: SkeletonTemplate,
}

/// Input and target views of one chunk, each on its own joint subset.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub input: MotionSequence,
    pub input_template: SkeletonTemplate,
    pub target: MotionSequence,
    pub target_template: SkeletonTemplate,
}

impl TrainPair {
    /// Uses the full skeleton on both sides.
    pub fn identity(item: &TrainItem) -> Self {
        TrainPair {
            input: item.motion.clone(),
            input_template: item.template.clone(),
            target: item.motion.clone(),
            target_template: item.template.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Number of completed optimizer steps, this one included.
    pub step: u64,
    pub lr: f64,
    pub rec: f64,
    pub blc: f64,
    pub total: f64,
}

/// Draws the two independent joint subsets for item `index` of `step`.
pub fn prepare_pair(item: &TrainItem, cfg: &TrainConfig, step: u64, index: usize) -> Result<TrainPair, TrainingError> {
    let seed = |stream: u64| derive_seed(&[cfg.seed, step, index as u64, stream]);
    let (input, input_template, _) = subsample_joints(&item.motion, &item.template, seed(1), cfg.p_major, cfg.p_other)?;
    let (target, target_template, _) = subsample_joints(&item.motion, &item.template, seed(2), cfg.p_major, cfg.p_other)?;
    Ok(TrainPair { input, input_template, target, target_template })
}

struct Group {
    loss: Tensor,
    rec: f64,
    blc: f64,
    weight: f64,
}

fn stack(ts: Vec<Tensor>) -> Result<Tensor, TrainingError> {
    Ok(Tensor::stack(&ts, 0)?)
}

/// Loss of the pairs sharing one `(J1, J2, F)` shape, averaged over items.
fn group_loss(model: &Model, pairs: &[&TrainPair], lambda: f64) -> Result<(Tensor, f64, f64), TrainingError> {
    let dtype = model.dtype();
    let b = pairs.len();
    let j2 = pairs[0].target.joint_count();
    let frames = pairs[0].target.frame_count();
    let motion = stack(pairs.iter().map(|p| sequence_tensor(&p.input, dtype)).collect::<Result<_, _>>()?)?;
    let t_in = stack(pairs.iter().map(|p| template_tensor(&p.input_template, dtype)).collect::<Result<_, _>>()?)?;
    let target = stack(pairs.iter().map(|p| sequence_tensor(&p.target, dtype)).collect::<Result<_, _>>()?)?;
    let t_out = stack(pairs.iter().map(|p| template_tensor(&p.target_template, dtype)).collect::<Result<_, _>>()?)?;

    let z = model.encode_tensor(&motion, &t_in)?;
    let pred = model.decode_tensor(&z, &t_out)?;

    let rec = (&pred - &target)?.sqr()?.sum_all()?.affine(1.0 / (b * j2 * frames) as f64, 0.0)?;

    // Bone endpoints as rows of the (B*J2, F, 3) flattening.
    let mut child = Vec::new();
    let mut parent = Vec::new();
    let mut target_len = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let offset = (i * j2) as u32;
        for (bone, &(c, q)) in p.target.topology().bones().iter().enumerate() {
            child.push(offset + c as u32);
            parent.push(offset + q as u32);
            for f in 0..frames {
                let len = (p.target.at(c, f) - p.target.at(q, f)).norm();
                if len == 0.0 {
                    return Err(TrainingError::ZeroBoneLength { bone, frame: f });
                }
                target_len.push(len);
            }
        }
    }
    let blc = if child.is_empty() {
        rec.zeros_like()?
    } else {
        let nb = child.len();
        let flat = pred.reshape((b * j2, frames, 3))?;
        let dev = Device::Cpu;
        let pc = flat.index_select(&Tensor::from_vec(child, nb, &dev)?, 0)?;
        let pp = flat.index_select(&Tensor::from_vec(parent, nb, &dev)?, 0)?;
        let len = ((pc - pp)?.sqr()?.sum(D::Minus1)? + LENGTH_EPS)?.sqrt()?;
        let tl = Tensor::from_vec(target_len, (nb, frames), &dev)?.to_dtype(dtype)?;
        let ratio = (len / tl)?;
        let centered = ratio.broadcast_sub(&ratio.mean_keepdim(D::Minus1)?)?;
        centered.sqr()?.mean(D::Minus1)?.mean_all()?
    };
    let loss = (&rec + blc.affine(lambda, 0.0)?)?;
    let scalar = |t: &Tensor| -> Result<f64, TrainingError> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    Ok((loss, scalar(&rec)?, scalar(&blc)?))
}

fn group_pairs(pairs: &[TrainPair]) -> BTreeMap<(usize, usize, usize), Vec<&TrainPair>> {
    let mut groups: BTreeMap<_, Vec<&TrainPair>> = BTreeMap::new();
    for p in pairs {
        groups
            .entry((p.input.joint_count(), p.target.joint_count(), p.input.frame_count()))
            .or_default()
            .push(p);
    }
    groups
}

fn batch_groups(model: &Model, pairs: &[TrainPair], lambda: f64) -> Result<Vec<Group>, TrainingError> {
    for p in pairs {
        if p.input.frame_count() != p.target.frame_count() {
            return Err(TrainingError::Shape("input and target frame counts differ".into()));
        }
    }
    let n = pairs.len() as f64;
    group_pairs(pairs)
        .values()
        .map(|g| {
            let (loss, rec, blc) = group_loss(model, g, lambda)?;
            Ok(Group { loss, rec, blc, weight: g.len() as f64 / n })
        })
        .collect()
}

/// Batch objective `L_rec + lambda * L_blc`, averaged over items, as a
/// differentiable scalar together with its two terms.
pub fn batch_loss(model: &Model, pairs: &[TrainPair], lambda: f64) -> Result<(Tensor, f64, f64), TrainingError> {
    if pairs.is_empty() {
        return Err(TrainingError::EmptyData);
    }
    let groups = batch_groups(model, pairs, lambda)?;
    let mut total: Option<Tensor> = None;
    let (mut rec, mut blc) = (0.0, 0.0);
    for g in groups {
        let weighted = g.loss.affine(g.weight, 0.0)?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
        rec += g.weight * g.rec;
        blc += g.weight * g.blc;
    }
    Ok((total.expect("non-empty batch"), rec, blc))
}

/// One optimizer step on `pairs`. Parameters are left untouched when the
/// loss is not finite.
pub fn training_step(
    model: &Model,
    adam: &mut AdamState,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainingError> {
    if pairs.is_empty() {
        return Err(TrainingError::EmptyData);
    }
    let step = adam.step();
    let lr = lr_at(step, cfg);
    // Groups are differentiated one at a time to bound activation memory.
    let groups = batch_groups(model, pairs, cfg.lambda_blc)?;
    let rec: f64 = groups.iter().map(|g| g.weight * g.rec).sum();
    let blc: f64 = groups.iter().map(|g| g.weight * g.blc).sum();
    let total = rec + cfg.lambda_blc * blc;
    if !total.is_finite() {
        return Err(TrainingError::NonFinite { step, rec, blc });
    }
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for g in groups {
        let store = g.loss.affine(g.weight, 0.0)?.backward()?;
        for (name, var) in model.params().iter() {
            if let Some(gr) = store.get(var.as_tensor()) {
                let acc = match grads.remove(name) {
                    Some(a) => (a + gr)?,
                    None => gr.clone(),
                };
                grads.insert(name.clone(), acc);
            }
        }
    }
    adam.update(model.params(), &grads, lr, cfg)?;
    Ok(StepMetrics { step: adam.step(), lr, rec, blc, total })
}
