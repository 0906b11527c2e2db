//! Procedural motion generator used in place of licensed capture data.
//!
//! Motions are produced as local joint rotations driven by periodic curves
//! and turned into positions with forward kinematics, so bone lengths are
//! constant by construction.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_kinematics, topologies, AngularClip, MocapError};
use crate::skeleton::{MotionSequence, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    IdleSway,
    WalkCycle,
    ArmWave,
    Squat,
    Composite,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] = [
        MotionKind::IdleSway,
        MotionKind::WalkCycle,
        MotionKind::ArmWave,
        MotionKind::Squat,
        MotionKind::Composite,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MotionKind::IdleSway => "idle-sway",
            MotionKind::WalkCycle => "walk-cycle",
            MotionKind::ArmWave => "arm-wave",
            MotionKind::Squat => "squat",
            MotionKind::Composite => "composite",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotionKind {
    type Err = MocapError;
    fn from_str(s: &str) -> Result<Self, MocapError> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MocapError::UnknownKind(s.to_string()))
    }
}

/// Parameters of one generated clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: MotionKind,
    pub topology: String,
    /// Uniform scale applied to the generic skeleton.
    pub morphology_scale: f64,
    /// Relative per-bone length jitter (0 keeps the generic proportions).
    pub proportion_jitter: f64,
    pub duration: f64,
    pub framerate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: MotionKind, topology: &str, duration: f64, seed: u64) -> Self {
        SynthSpec {
            kind,
            topology: topology.to_string(),
            morphology_scale: 1.0,
            proportion_jitter: 0.0,
            duration,
            framerate: super::WORKING_FPS,
            seed,
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.framerate).round() as usize
    }
}

/// Seed-drawn variation of one motion: amplitude, tempo and phase.
#[derive(Clone, Copy)]
struct Style {
    amp: f64,
    tempo: f64,
    phase: f64,
    speed: f64,
}

impl Style {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Style {
            amp: rng.random_range(0.8..1.2),
            tempo: rng.random_range(0.85..1.15),
            phase: rng.random_range(0.0..TAU),
            speed: rng.random_range(0.9..1.4),
        }
    }
}

/// Local rotation angles (about X, Y, Z) per named joint, plus root
/// translation, at time `t`.
#[derive(Default)]
struct Pose {
    angles: Vec<(&'static str, [f64; 3])>,
    root: [f64; 3],
}

impl Pose {
    fn set(&mut self, joint: &'static str, a: [f64; 3]) {
        if let Some(e) = self.angles.iter_mut().find(|(n, _)| *n == joint) {
            e.1 = a;
        } else {
            self.angles.push((joint, a));
        }
    }

    fn add(&mut self, joint: &'static str, a: [f64; 3]) {
        if let Some(e) = self.angles.iter_mut().find(|(n, _)| *n == joint) {
            for i in 0..3 {
                e.1[i] += a[i];
            }
        } else {
            self.angles.push((joint, a));
        }
    }
}

fn walk(t: f64, s: &Style, scale: f64, pose: &mut Pose) {
    let w = TAU * 0.95 * s.tempo * t + s.phase;
    let a = s.amp;
    pose.set("left_hip", [0.45 * a * w.sin(), 0.0, 0.0]);
    pose.set("right_hip", [0.45 * a * (w + PI).sin(), 0.0, 0.0]);
    pose.set("left_knee", [-0.35 * a * (1.0 - (w + 0.6).cos()), 0.0, 0.0]);
    pose.set("right_knee", [-0.35 * a * (1.0 - (w + PI + 0.6).cos()), 0.0, 0.0]);
    pose.set("left_ankle", [0.15 * a * (w - 0.4).sin(), 0.0, 0.0]);
    pose.set("right_ankle", [0.15 * a * (w + PI - 0.4).sin(), 0.0, 0.0]);
    pose.set("left_shoulder", [0.35 * a * (w + PI).sin(), 0.0, 0.0]);
    pose.set("right_shoulder", [0.35 * a * w.sin(), 0.0, 0.0]);
    pose.set("left_elbow", [0.3 + 0.15 * a * (w + PI).sin(), 0.0, 0.0]);
    pose.set("right_elbow", [0.3 + 0.15 * a * w.sin(), 0.0, 0.0]);
    pose.set("pelvis", [0.0, 0.0, 0.08 * a * w.sin()]);
    pose.set("spine", [-0.05, 0.0, -0.06 * a * w.sin()]);
    pose.set("spine2", [-0.03, 0.0, -0.06 * a * w.sin()]);
    let speed = 1.1 * s.speed * s.tempo * scale;
    pose.root = [0.0, speed * t, 0.02 * scale * (2.0 * w).cos()];
}

fn idle(t: f64, s: &Style, scale: f64, pose: &mut Pose) {
    let w = TAU * 0.3 * s.tempo * t + s.phase;
    let a = s.amp;
    pose.add("pelvis", [0.0, 0.04 * a * w.sin(), 0.05 * a * (0.5 * w).sin()]);
    pose.add("spine", [-0.04 * a * (w + 1.0).sin(), -0.03 * a * w.sin(), 0.0]);
    pose.add("spine1", [-0.03 * a * (w + 1.0).sin(), -0.02 * a * w.sin(), 0.0]);
    pose.add("neck", [0.08 * a * (1.3 * w).sin(), 0.0, 0.1 * a * (0.7 * w).sin()]);
    pose.add("left_shoulder", [0.05 * a * (w + 2.0).sin(), 0.04, 0.0]);
    pose.add("right_shoulder", [0.05 * a * (w + 2.5).sin(), -0.04, 0.0]);
    pose.add("left_hip", [0.0, -0.04 * a * w.sin(), 0.0]);
    pose.add("right_hip", [0.0, -0.04 * a * w.sin(), 0.0]);
    pose.root[0] += 0.03 * a * scale * w.sin();
}

fn wave(t: f64, s: &Style, pose: &mut Pose) {
    let w = TAU * 1.4 * s.tempo * t + s.phase;
    let a = s.amp;
    let raise = 2.3 + 0.1 * (0.3 * w).sin();
    pose.set("right_shoulder", [0.2, -raise, 0.0]);
    pose.set("right_elbow", [0.0, -0.6 * a * w.sin() - 0.3, 0.0]);
    pose.set("right_wrist", [0.0, -0.3 * a * (w + 0.5).sin(), 0.0]);
    pose.add("neck", [0.0, 0.0, -0.15]);
}

fn squat(t: f64, s: &Style, scale: f64, pose: &mut Pose) {
    let w = TAU * 0.4 * s.tempo * t + s.phase;
    let depth = 0.5 * (1.0 - w.cos()) * s.amp.min(1.1);
    pose.set("left_hip", [1.2 * depth, 0.0, 0.0]);
    pose.set("right_hip", [1.2 * depth, 0.0, 0.0]);
    pose.set("left_knee", [-2.0 * depth, 0.0, 0.0]);
    pose.set("right_knee", [-2.0 * depth, 0.0, 0.0]);
    pose.set("left_ankle", [0.7 * depth, 0.0, 0.0]);
    pose.set("right_ankle", [0.7 * depth, 0.0, 0.0]);
    pose.set("spine", [-0.5 * depth, 0.0, 0.0]);
    pose.set("spine1", [-0.3 * depth, 0.0, 0.0]);
    pose.set("spine2", [-0.2 * depth, 0.0, 0.0]);
    pose.set("left_shoulder", [1.3 * depth, 0.0, 0.0]);
    pose.set("right_shoulder", [1.3 * depth, 0.0, 0.0]);
    pose.root = [0.0, 0.0, -0.38 * scale * depth];
}

fn pose_at(kind: MotionKind, t: f64, styles: &[Style; 3], scale: f64) -> Pose {
    let mut pose = Pose::default();
    match kind {
        MotionKind::IdleSway => idle(t, &styles[0], scale, &mut pose),
        MotionKind::WalkCycle => walk(t, &styles[0], scale, &mut pose),
        MotionKind::ArmWave => {
            idle(t, &styles[1], scale, &mut pose);
            wave(t, &styles[0], &mut pose);
        }
        MotionKind::Squat => squat(t, &styles[0], scale, &mut pose),
        MotionKind::Composite => {
            walk(t, &styles[0], scale, &mut pose);
            idle(t, &styles[1], scale, &mut pose);
            wave(t, &styles[2], &mut pose);
        }
    }
    pose
}

/// Generates the local-rotation form of a clip.
pub fn generate_angular(spec: &SynthSpec) -> Result<AngularClip, MocapError> {
    if !(spec.framerate > 0.0 && spec.framerate.is_finite()) {
        return Err(MocapError::BadFramerate(spec.framerate));
    }
    let (topo, generic) = topologies::builtin(&spec.topology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles = [Style::draw(&mut rng), Style::draw(&mut rng), Style::draw(&mut rng)];

    let rest = generic.positions();
    let mut offsets: Vec<Vec3> = Vec::with_capacity(rest.len());
    for (j, p) in topo.parents().iter().enumerate() {
        let jitter = 1.0 + spec.proportion_jitter * rng.random_range(-1.0..1.0);
        offsets.push(match p {
            None => rest[j] * spec.morphology_scale,
            Some(p) => (rest[j] - rest[*p]) * spec.morphology_scale * jitter,
        });
    }

    let frames = spec.frame_count().max(1);
    let j = topo.joint_count();
    let mut rotations = vec![UnitQuaternion::identity(); frames * j];
    let mut root = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / spec.framerate;
        let pose = pose_at(spec.kind, t, &styles, spec.morphology_scale);
        for (name, [ax, ay, az]) in pose.angles {
            if let Some(idx) = topo.index_of(name) {
                rotations[f * j + idx] = UnitQuaternion::from_euler_angles(ax, ay, az);
            }
        }
        root.push(Vec3::from(pose.root));
    }
    Ok(AngularClip {
        topology: topo,
        offsets,
        rotations,
        root_translation: root,
        framerate: spec.framerate,
    })
}

/// Generates joint positions for `spec`. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MotionSequence, MocapError> {
    forward_kinematics(&generate_angular(spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::bone_lengths;

    #[test]
    fn frame_count_follows_duration() {
        let seq = generate_synthetic(&SynthSpec::new(MotionKind::WalkCycle, topologies::BODY17, 1.0, 1)).unwrap();
        assert_eq!(seq.frame_count(), 30);
        assert_eq!(seq.joint_count(), 17);
    }

    #[test]
    fn same_seed_same_output() {
        for kind in MotionKind::ALL {
            let spec = SynthSpec::new(kind, topologies::BODY23, 2.0, 77);
            assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        }
        let a = generate_synthetic(&SynthSpec::new(MotionKind::Squat, topologies::BODY23, 2.0, 1)).unwrap();
        let b = generate_synthetic(&SynthSpec::new(MotionKind::Squat, topologies::BODY23, 2.0, 2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bone_lengths_are_constant() {
        for kind in MotionKind::ALL {
            for topo in topologies::builtin_names() {
                let mut spec = SynthSpec::new(kind, topo, 3.0, 5);
                spec.morphology_scale = 1.1;
                spec.proportion_jitter = 0.05;
                let seq = generate_synthetic(&spec).unwrap();
                for series in bone_lengths(&seq) {
                    let mean = series.iter().sum::<f64>() / series.len() as f64;
                    let var = series.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / series.len() as f64;
                    assert!(var < 1e-12, "{kind} {topo}: {var}");
                }
            }
        }
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(matches!("moonwalk".parse::<MotionKind>(), Err(MocapError::UnknownKind(_))));
        assert_eq!("arm-wave".parse::<MotionKind>().unwrap(), MotionKind::ArmWave);
    }

    #[test]
    fn motion_actually_moves() {
        let seq = generate_synthetic(&SynthSpec::new(MotionKind::WalkCycle, topologies::BODY17, 2.0, 3)).unwrap();
        let knee = seq.topology().index_of("left_knee").unwrap();
        let root = seq.topology().root();
        let rel = |f| seq.at(knee, f) - seq.at(root, f);
        let travel: f64 = (1..seq.frame_count()).map(|f| (rel(f) - rel(f - 1)).norm()).sum();
        assert!(travel > 0.2, "{travel}");
    }
}
