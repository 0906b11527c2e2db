//! Motion ingestion and preprocessing: resampling, forward kinematics,
//! axis/unit conversion and chunk extraction, plus the on-disk dataset
//! format and a procedural motion generator.

pub mod bvh;
pub mod dataset;
pub mod prepare;
pub mod synth;
pub mod topologies;

use std::sync::Arc;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{MotionSequence, SkeletonError, SkeletonTopology, Vec3};

/// Frames per chunk (one second at the working framerate).
pub const CHUNK_FRAMES: usize = 30;
/// Frames shared by consecutive chunks.
pub const CHUNK_OVERLAP: usize = 24;
pub const CHUNK_STRIDE: usize = CHUNK_FRAMES - CHUNK_OVERLAP;
/// Common framerate all data is resampled to.
pub const WORKING_FPS: f64 = 30.0;

const UNIT_QUAT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MocapError {
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("framerate must be positive, got {0}")]
    BadFramerate(f64),
    #[error("rotation of joint {joint} at frame {frame} is not unit-norm (|q| = {norm})")]
    NonUnitQuaternion { joint: usize, frame: usize, norm: f64 },
    #[error("clip arrays disagree with topology: {0}")]
    Shape(String),
    #[error("unknown motion kind `{0}`")]
    UnknownKind(String),
    #[error("unknown topology `{0}`")]
    UnknownTopology(String),
    #[error("invalid axis convention: {0}")]
    BadAxes(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Local-rotation motion: fixed per-joint offsets, per-frame rotations and
/// a root translation track.
#[derive(Clone, Debug)]
pub struct AngularClip {
    pub topology: Arc<SkeletonTopology>,
    /// Offset of each joint from its parent in the parent's frame (meters).
    pub offsets: Vec<Vec3>,
    /// Frame-major local rotations, `rotations[f * J + j]`.
    pub rotations: Vec<UnitQuaternion<f64>>,
    /// Root translation per frame, added to the root offset.
    pub root_translation: Vec<Vec3>,
    pub framerate: f64,
}

impl AngularClip {
    pub fn frame_count(&self) -> usize {
        self.root_translation.len()
    }

    pub fn validate(&self) -> Result<(), MocapError> {
        let j = self.topology.joint_count();
        let f = self.frame_count();
        if f == 0 {
            return Err(SkeletonError::NoFrames.into());
        }
        if self.offsets.len() != j {
            return Err(MocapError::Shape(format!("{} offsets for {j} joints", self.offsets.len())));
        }
        if self.rotations.len() != j * f {
            return Err(MocapError::Shape(format!(
                "{} rotations for {j} joints x {f} frames",
                self.rotations.len()
            )));
        }
        if !(self.framerate > 0.0 && self.framerate.is_finite()) {
            return Err(MocapError::BadFramerate(self.framerate));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = q.as_ref().norm();
            if !((norm - 1.0).abs() <= UNIT_QUAT_TOL) {
                return Err(MocapError::NonUnitQuaternion {
                    joint: i % j,
                    frame: i / j,
                    norm,
                });
            }
        }
        Ok(())
    }
}

/// Resampling timestamps: output frame `k` sits at source frame index
/// `k * src / dst`, first frames aligned. The output spans the input
/// duration to within one output frame period.
fn resample_grid(frames: usize, src_fps: f64, dst_fps: f64) -> Vec<(usize, usize, f64)> {
    let duration = (frames - 1) as f64 / src_fps;
    let count = (duration * dst_fps + 1e-9).floor() as usize + 1;
    let ratio = src_fps / dst_fps;
    (0..count)
        .map(|k| {
            let s = k as f64 * ratio;
            let i0 = (s.floor() as usize).min(frames - 1);
            let i1 = (i0 + 1).min(frames - 1);
            let frac = if i0 == i1 { 0.0 } else { s - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

fn check_fps(src: f64, dst: f64) -> Result<(), MocapError> {
    for v in [src, dst] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(MocapError::BadFramerate(v));
        }
    }
    Ok(())
}

#[inline]
fn lerp(a: &Vec3, b: &Vec3, t: f64) -> Vec3 {
    if t == 0.0 {
        *a
    } else {
        a + (b - a) * t
    }
}

/// Piecewise-linear resampling of joint positions.
pub fn resample_positions(seq: &MotionSequence, target_fps: f64) -> Result<MotionSequence, MocapError> {
    check_fps(seq.framerate(), target_fps)?;
    let j = seq.joint_count();
    let grid = resample_grid(seq.frame_count(), seq.framerate(), target_fps);
    let mut out = Vec::with_capacity(grid.len() * j);
    for &(i0, i1, t) in &grid {
        let (a, b) = (seq.frame(i0), seq.frame(i1));
        out.extend(a.iter().zip(b).map(|(a, b)| lerp(a, b, t)));
    }
    Ok(MotionSequence::new(seq.topology().clone(), out, target_fps)?)
}

/// Resampling of an angular clip: slerp between bracketing rotations and
/// linear interpolation of the root translation.
pub fn resample_angular(clip: &AngularClip, target_fps: f64) -> Result<AngularClip, MocapError> {
    clip.validate()?;
    check_fps(clip.framerate, target_fps)?;
    let j = clip.topology.joint_count();
    let grid = resample_grid(clip.frame_count(), clip.framerate, target_fps);
    let mut rotations = Vec::with_capacity(grid.len() * j);
    let mut root = Vec::with_capacity(grid.len());
    for &(i0, i1, t) in &grid {
        for jt in 0..j {
            let a = &clip.rotations[i0 * j + jt];
            let b = &clip.rotations[i1 * j + jt];
            rotations.push(if t == 0.0 { *a } else { slerp(a, b, t) });
        }
        root.push(lerp(&clip.root_translation[i0], &clip.root_translation[i1], t));
    }
    Ok(AngularClip {
        topology: clip.topology.clone(),
        offsets: clip.offsets.clone(),
        rotations,
        root_translation: root,
        framerate: target_fps,
    })
}

/// Shortest-arc spherical interpolation; falls back to normalized lerp for
/// nearly identical rotations.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    let qa = a.as_ref();
    let mut qb = *b.as_ref();
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        return UnitQuaternion::new_normalize(qa * (1.0 - t) + qb * t);
    }
    let theta = dot.min(1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    UnitQuaternion::new_normalize(qa * wa + qb * wb)
}

/// Global joint positions from local rotations, composed root-outward:
/// `pos[j] = pos[parent] + R_parent * offset[j]`, `R_j = R_parent * q_j`.
pub fn forward_kinematics(clip: &AngularClip) -> Result<MotionSequence, MocapError> {
    clip.validate()?;
    let topo = &clip.topology;
    let j = topo.joint_count();
    let f = clip.frame_count();
    let mut positions = vec![Vec3::zeros(); j * f];
    let mut global = vec![UnitQuaternion::identity(); j];
    for fr in 0..f {
        let rots = &clip.rotations[fr * j..(fr + 1) * j];
        let pos = &mut positions[fr * j..(fr + 1) * j];
        for &jt in topo.traversal_order() {
            match topo.parents()[jt] {
                None => {
                    pos[jt] = clip.offsets[jt] + clip.root_translation[fr];
                    global[jt] = rots[jt];
                }
                Some(p) => {
                    pos[jt] = pos[p] + global[p] * clip.offsets[jt];
                    global[jt] = global[p] * rots[jt];
                }
            }
        }
    }
    Ok(MotionSequence::new(topo.clone(), positions, clip.framerate)?)
}

/// Signed axis permutation plus unit scale mapping a source coordinate
/// system into the canonical Z-up meter space.
///
/// `axes[i] = (k, s)` means canonical axis `i` takes `s * source[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisConvention {
    pub axes: [(usize, f64); 3],
    /// Meters per source unit.
    pub unit_scale: f64,
}

impl AxisConvention {
    pub const IDENTITY: AxisConvention = AxisConvention {
        axes: [(0, 1.0), (1, 1.0), (2, 1.0)],
        unit_scale: 1.0,
    };

    /// Y-up source (X right, Z toward viewer) into Z-up.
    pub fn y_up(unit_scale: f64) -> AxisConvention {
        AxisConvention {
            axes: [(0, 1.0), (2, -1.0), (1, 1.0)],
            unit_scale,
        }
    }

    pub fn validate(&self) -> Result<(), MocapError> {
        let mut seen = [false; 3];
        for &(k, s) in &self.axes {
            if k > 2 || seen[k] {
                return Err(MocapError::BadAxes(format!("{:?} is not a permutation", self.axes)));
            }
            if s != 1.0 && s != -1.0 {
                return Err(MocapError::BadAxes(format!("sign {s} must be +-1")));
            }
            seen[k] = true;
        }
        if !(self.unit_scale > 0.0 && self.unit_scale.is_finite()) {
            return Err(MocapError::BadAxes(format!("unit scale {}", self.unit_scale)));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            self.axes[0].1 * p[self.axes[0].0] * self.unit_scale,
            self.axes[1].1 * p[self.axes[1].0] * self.unit_scale,
            self.axes[2].1 * p[self.axes[2].0] * self.unit_scale,
        )
    }

    /// The inverse mapping (canonical space back to source units).
    pub fn inverse(&self) -> AxisConvention {
        let mut axes = [(0, 1.0); 3];
        for (i, &(k, s)) in self.axes.iter().enumerate() {
            axes[k] = (i, s);
        }
        AxisConvention {
            axes,
            unit_scale: 1.0 / self.unit_scale,
        }
    }

    pub fn convert(&self, seq: &MotionSequence) -> MotionSequence {
        seq.map_positions(|_, _, p| self.apply(&p))
    }
}

/// A 30-frame training window, translated so that the mean position of the
/// major joints over all its frames is the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub positions: MotionSequence,
    pub template_ref: String,
    pub source_id: String,
    /// Translation removed during normalization; add it back to recover the
    /// original coordinates.
    pub mean_offset: Vec3,
    pub split: Split,
    /// First source frame covered by the chunk.
    pub start_frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Number of chunks [`extract_chunks`] yields for `frames` frames.
pub fn chunk_count(frames: usize) -> usize {
    if frames < CHUNK_FRAMES {
        0
    } else {
        (frames - CHUNK_FRAMES) / CHUNK_STRIDE + 1
    }
}

/// Mean position over the masked joints and all frames. An all-false mask
/// falls back to every joint.
pub fn masked_mean(seq: &MotionSequence, major_mask: &[bool]) -> Vec3 {
    let use_all = !major_mask.iter().any(|&m| m);
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for f in 0..seq.frame_count() {
        for (j, p) in seq.frame(f).iter().enumerate() {
            if use_all || major_mask[j] {
                sum += p;
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Cuts 30-frame chunks every 6 frames and removes each chunk's own
/// major-joint mean position.
pub fn extract_chunks(seq: &MotionSequence, major_mask: &[bool]) -> Vec<Chunk> {
    let n = chunk_count(seq.frame_count());
    if n == 0 {
        log::warn!(
            "sequence of {} frames is shorter than one chunk ({CHUNK_FRAMES})",
            seq.frame_count()
        );
    }
    (0..n)
        .map(|i| {
            let start = i * CHUNK_STRIDE;
            let window = seq.slice_frames(start, CHUNK_FRAMES);
            let mean = masked_mean(&window, major_mask);
            Chunk {
                positions: window.translated(&-mean),
                template_ref: String::new(),
                source_id: String::new(),
                mean_offset: mean,
                split: Split::Train,
                start_frame: start,
            }
        })
        .collect()
}
