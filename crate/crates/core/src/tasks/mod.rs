//! Application pipelines (retargeting, denoising, joint upsampling),
//! evaluation protocols and report emission.

mod eval;
mod report;

use std::sync::Arc;

use crate::mocap::{masked_mean, CHUNK_FRAMES, CHUNK_STRIDE};
use crate::model::{Model, ModelError};
use crate::skeleton::{MotionSequence, SkeletonError, SkeletonTemplate, Vec3};

pub use eval::{
    add_noise, config_fingerprint, eval_denoising, eval_representation, eval_upsampling, draw_proportion_subset, EvalItem,
    DEFAULT_PROPORTIONS, DEFAULT_SIGMAS_CM,
};
pub use report::{emit_report, Aggregate, EvalReport, EvalRow, ReportFormat, REPORT_COLUMNS, SUMMARY_COLUMNS};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("template lacks landmark `{0}`")]
    MissingLandmark(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("plot: {0}")]
    Plot(String),
}

/// Mean per-joint position error in centimeters.
pub fn mpjpe(a: &MotionSequence, b: &MotionSequence) -> Result<f64, TaskError> {
    if a.joint_count() != b.joint_count() || a.frame_count() != b.frame_count() {
        return Err(TaskError::Shape(format!(
            "{}x{} vs {}x{}",
            a.joint_count(),
            a.frame_count(),
            b.joint_count(),
            b.frame_count()
        )));
    }
    Ok(100.0 * mean_distance(a.positions().iter().zip(b.positions()).map(|(p, q)| (p - q).norm())))
}

/// MPJPE restricted to `joints`, in centimeters.
pub fn mpjpe_on(a: &MotionSequence, b: &MotionSequence, joints: &[usize]) -> Result<f64, TaskError> {
    mpjpe(a, b)?;
    if joints.is_empty() {
        return Err(TaskError::Parameter("empty joint set".into()));
    }
    let pairs = (0..a.frame_count()).flat_map(|f| joints.iter().map(move |&j| (f, j)));
    Ok(100.0 * mean_distance(pairs.map(|(f, j)| (a.at(j, f) - b.at(j, f)).norm())))
}

fn mean_distance(distances: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for d in distances {
        sum += d;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// MPJPE divided by the skeleton height, both in the same unit.
pub fn normalized_mpjpe(mpjpe_cm: f64, height_m: f64) -> f64 {
    mpjpe_cm / (100.0 * height_m)
}

/// Vertical extent of the neutral pose, from the lowest foot joint to the
/// head top.
pub fn skeleton_height(t: &SkeletonTemplate) -> Result<f64, TaskError> {
    let lm = t.topology().landmarks();
    let head = lm.head_top.ok_or(TaskError::MissingLandmark("head_top"))?;
    let feet: Vec<usize> = [lm.left_foot, lm.right_foot].into_iter().flatten().collect();
    if feet.is_empty() {
        return Err(TaskError::MissingLandmark("foot"));
    }
    let low = feet.iter().map(|&f| t.positions()[f].z).fold(f64::INFINITY, f64::min);
    Ok(t.positions()[head].z - low)
}

/// Mean over the available feet of the summed bone lengths from foot to
/// pelvis.
pub fn leg_length(t: &SkeletonTemplate) -> Result<f64, TaskError> {
    let topo = t.topology();
    let lm = topo.landmarks();
    let feet: Vec<usize> = [lm.left_foot, lm.right_foot].into_iter().flatten().collect();
    if feet.is_empty() {
        return Err(TaskError::MissingLandmark("foot"));
    }
    let mut total = 0.0;
    for &foot in &feet {
        let mut j = foot;
        while j != lm.pelvis {
            let p = topo.parents()[j].ok_or(TaskError::MissingLandmark("pelvis ancestor of foot"))?;
            total += (t.positions()[j] - t.positions()[p]).norm();
            j = p;
        }
    }
    Ok(total / feet.len() as f64)
}

/// Overlapping-window inference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Windowing {
    pub length: usize,
    pub stride: usize,
}

impl Default for Windowing {
    fn default() -> Self {
        Windowing { length: CHUNK_FRAMES, stride: CHUNK_STRIDE }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetargetParams {
    /// `None` runs the model once over the whole sequence.
    pub windowing: Option<Windowing>,
    /// Removes each window's major-joint mean before encoding and adds it
    /// back, scaled by the target/source leg-length ratio, after decoding.
    pub restore_trajectory: bool,
}

impl Default for RetargetParams {
    fn default() -> Self {
        RetargetParams { windowing: Some(Windowing::default()), restore_trajectory: true }
    }
}

impl RetargetParams {
    /// Single pass, no trajectory handling: plain decode of the encoding.
    pub const RAW: RetargetParams = RetargetParams { windowing: None, restore_trajectory: false };
}

/// Window start frames covering `frames`, the last window flush with the end.
pub fn window_starts(frames: usize, w: Windowing) -> Vec<usize> {
    if frames <= w.length {
        return vec![0];
    }
    let last = frames - w.length;
    let mut starts: Vec<usize> = (0..=last).step_by(w.stride.max(1)).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Linear cross-fade weight of frame `i` inside a window of `len` frames.
fn fade_weight(i: usize, len: usize) -> f64 {
    (i + 1).min(len - i) as f64
}

/// Encodes `seq` under `src_t` and decodes under `tgt_t`.
pub fn retarget(
    model: &Model,
    seq: &MotionSequence,
    src_t: &SkeletonTemplate,
    tgt_t: &SkeletonTemplate,
    params: &RetargetParams,
) -> Result<MotionSequence, TaskError> {
    if seq.joint_count() != src_t.joint_count() || **seq.topology() != **src_t.topology() {
        return Err(SkeletonError::TopologyMismatch.into());
    }
    let ratio = if params.restore_trajectory { leg_length(tgt_t)? / leg_length(src_t)? } else { 1.0 };
    let major = src_t.topology().major_mask().to_vec();
    let frames = seq.frame_count();
    let starts = match params.windowing {
        Some(w) => window_starts(frames, w),
        None => vec![0],
    };
    let len = match params.windowing {
        Some(w) => w.length.min(frames),
        None => frames,
    };
    let j = tgt_t.joint_count();
    let mut acc = vec![Vec3::zeros(); j * frames];
    let mut weight = vec![0.0; frames];
    for &s in &starts {
        let window = seq.slice_frames(s, len);
        let offset = if params.restore_trajectory { masked_mean(&window, &major) } else { Vec3::zeros() };
        let local = if params.restore_trajectory { window.translated(&-offset) } else { window };
        let z = model.encode(&local, src_t)?;
        let out = model.decode(&z, tgt_t, seq.framerate())?;
        let shift = offset * ratio;
        for i in 0..len {
            let w = if starts.len() == 1 { 1.0 } else { fade_weight(i, len) };
            weight[s + i] += w;
            for (jj, p) in out.frame(i).iter().enumerate() {
                acc[(s + i) * j + jj] += (p + shift) * w;
            }
        }
    }
    let positions = acc.iter().enumerate().map(|(idx, p)| if starts.len() == 1 { *p } else { p / weight[idx / j] }).collect();
    Ok(MotionSequence::new(Arc::clone(tgt_t.topology()), positions, seq.framerate())?)
}

/// Encode/decode under the same template; a noisy input comes out denoised
/// to the extent the model's latent space allows.
pub fn denoise(
    model: &Model,
    seq: &MotionSequence,
    t: &SkeletonTemplate,
    params: &RetargetParams,
) -> Result<MotionSequence, TaskError> {
    retarget(model, seq, t, t, params)
}

/// Encodes motion observed on a joint subset (`sub_t` is the template
/// restricted to those joints) and decodes it on the full template.
pub fn upsample(
    model: &Model,
    seq: &MotionSequence,
    sub_t: &SkeletonTemplate,
    full_t: &SkeletonTemplate,
    params: &RetargetParams,
) -> Result<MotionSequence, TaskError> {
    retarget(model, seq, sub_t, full_t, params)
}
