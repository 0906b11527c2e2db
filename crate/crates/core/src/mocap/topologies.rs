//! Built-in skeleton topologies with their generic neutral poses.
//!
//! Two fixtures of different structure: a 17-joint body with a single
//! thorax joint and ankles as feet, and a 23-joint body with a three-piece
//! spine, clavicles and toes. Both are authored in canonical space (Z up,
//! +X subject's right, +Y forward) in an N-pose.

use std::sync::Arc;

use crate::skeleton::{Landmarks, SkeletonTemplate, SkeletonTopology, Vec3};

use super::MocapError;

pub const BODY17: &str = "body17";
pub const BODY23: &str = "body23";

/// Names of the built-in topologies.
pub fn builtin_names() -> [&'static str; 2] {
    [BODY17, BODY23]
}

struct JointDef {
    name: &'static str,
    parent: Option<&'static str>,
    major: bool,
    /// Neutral-pose position (meters, canonical frame).
    rest: [f64; 3],
}

const fn jd(name: &'static str, parent: Option<&'static str>, major: bool, rest: [f64; 3]) -> JointDef {
    JointDef { name, parent, major, rest }
}

// Pelvis at the origin; feet roughly 0.93 m below it.
const BODY17_DEF: &[JointDef] = &[
    jd("pelvis", None, false, [0.0, 0.0, 0.0]),
    jd("right_hip", Some("pelvis"), true, [0.10, 0.0, -0.02]),
    jd("right_knee", Some("right_hip"), true, [0.11, 0.01, -0.46]),
    jd("right_ankle", Some("right_knee"), true, [0.11, -0.02, -0.90]),
    jd("left_hip", Some("pelvis"), true, [-0.10, 0.0, -0.02]),
    jd("left_knee", Some("left_hip"), true, [-0.11, 0.01, -0.46]),
    jd("left_ankle", Some("left_knee"), true, [-0.11, -0.02, -0.90]),
    jd("spine", Some("pelvis"), false, [0.0, -0.01, 0.23]),
    jd("thorax", Some("spine"), false, [0.0, 0.0, 0.48]),
    jd("neck", Some("thorax"), false, [0.0, 0.02, 0.58]),
    jd("head_top", Some("neck"), false, [0.0, 0.0, 0.78]),
    jd("left_shoulder", Some("thorax"), true, [-0.18, 0.0, 0.46]),
    jd("left_elbow", Some("left_shoulder"), true, [-0.21, 0.0, 0.18]),
    jd("left_wrist", Some("left_elbow"), true, [-0.23, 0.02, -0.07]),
    jd("right_shoulder", Some("thorax"), true, [0.18, 0.0, 0.46]),
    jd("right_elbow", Some("right_shoulder"), true, [0.21, 0.0, 0.18]),
    jd("right_wrist", Some("right_elbow"), true, [0.23, 0.02, -0.07]),
];

const BODY23_DEF: &[JointDef] = &[
    jd("pelvis", None, false, [0.0, 0.0, 0.0]),
    jd("spine1", Some("pelvis"), false, [0.0, -0.01, 0.12]),
    jd("spine2", Some("spine1"), false, [0.0, -0.015, 0.25]),
    jd("chest", Some("spine2"), false, [0.0, -0.01, 0.38]),
    jd("neck", Some("chest"), false, [0.0, 0.0, 0.55]),
    jd("head", Some("neck"), false, [0.0, 0.03, 0.64]),
    jd("head_top", Some("head"), false, [0.0, 0.01, 0.80]),
    jd("left_clavicle", Some("chest"), false, [-0.05, 0.02, 0.50]),
    jd("left_shoulder", Some("left_clavicle"), true, [-0.19, 0.0, 0.49]),
    jd("left_elbow", Some("left_shoulder"), true, [-0.22, -0.01, 0.21]),
    jd("left_wrist", Some("left_elbow"), true, [-0.24, 0.02, -0.04]),
    jd("right_clavicle", Some("chest"), false, [0.05, 0.02, 0.50]),
    jd("right_shoulder", Some("right_clavicle"), true, [0.19, 0.0, 0.49]),
    jd("right_elbow", Some("right_shoulder"), true, [0.22, -0.01, 0.21]),
    jd("right_wrist", Some("right_elbow"), true, [0.24, 0.02, -0.04]),
    jd("left_hip", Some("pelvis"), true, [-0.09, 0.0, -0.06]),
    jd("left_knee", Some("left_hip"), true, [-0.10, 0.01, -0.49]),
    jd("left_ankle", Some("left_knee"), true, [-0.10, -0.03, -0.90]),
    jd("left_toe", Some("left_ankle"), false, [-0.11, 0.14, -0.96]),
    jd("right_hip", Some("pelvis"), true, [0.09, 0.0, -0.06]),
    jd("right_knee", Some("right_hip"), true, [0.10, 0.01, -0.49]),
    jd("right_ankle", Some("right_knee"), true, [0.10, -0.03, -0.90]),
    jd("right_toe", Some("right_ankle"), false, [0.11, 0.14, -0.96]),
];

fn build(defs: &[JointDef], left_foot: &str, right_foot: &str) -> (Arc<SkeletonTopology>, SkeletonTemplate) {
    let idx = |n: &str| defs.iter().position(|d| d.name == n).expect("joint defined");
    let topo = SkeletonTopology::new(
        defs.iter().map(|d| d.name.to_string()).collect(),
        defs.iter().map(|d| d.parent.map(idx)).collect(),
        defs.iter().map(|d| d.major).collect(),
        Landmarks {
            pelvis: idx("pelvis"),
            left_hip: Some(idx("left_hip")),
            right_hip: Some(idx("right_hip")),
            left_shoulder: Some(idx("left_shoulder")),
            right_shoulder: Some(idx("right_shoulder")),
            head_top: Some(idx("head_top")),
            left_foot: Some(idx(left_foot)),
            right_foot: Some(idx(right_foot)),
        },
    )
    .expect("built-in topology is valid");
    let topo = Arc::new(topo);
    let rest = defs.iter().map(|d| Vec3::from(d.rest)).collect();
    let template = SkeletonTemplate::new(topo.clone(), rest).expect("finite rest pose");
    (topo, template)
}

/// Topology and generic neutral pose of a built-in skeleton.
///
/// The neutral pose is returned exactly as authored (pelvis at the origin,
/// already axis-aligned) and flagged normalized.
pub fn builtin(name: &str) -> Result<(Arc<SkeletonTopology>, SkeletonTemplate), MocapError> {
    let (topo, t) = match name {
        BODY17 => build(BODY17_DEF, "left_ankle", "right_ankle"),
        BODY23 => build(BODY23_DEF, "left_toe", "right_toe"),
        other => return Err(MocapError::UnknownTopology(other.to_string())),
    };
    let t = crate::skeleton::normalize_template(&t).expect("built-in rest pose is well-formed");
    Ok((topo, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_have_expected_sizes() {
        assert_eq!(builtin(BODY17).unwrap().0.joint_count(), 17);
        assert_eq!(builtin(BODY23).unwrap().0.joint_count(), 23);
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn builtin_major_joints() {
        for name in builtin_names() {
            let (topo, _) = builtin(name).unwrap();
            // ankles, hips, knees, shoulders, elbows, wrists on both sides
            assert_eq!(topo.major_mask().iter().filter(|&&m| m).count(), 12, "{name}");
        }
    }

    #[test]
    fn generic_poses_are_normalized() {
        for name in builtin_names() {
            let (_, t) = builtin(name).unwrap();
            assert!(t.is_normalized());
            assert!(t.positions()[t.topology().root()].norm() < 1e-12);
            assert!(t.bone_lengths().iter().all(|&l| l > 0.0));
        }
    }
}
