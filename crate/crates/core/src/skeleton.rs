//! Skeleton topologies, neutral-pose templates and positional motion sequences.
//!
//! Canonical space is Z-up, meters. A normalized template has its pelvis at
//! the origin, the body's up axis on +Z, and the subject's right on +X, which
//! leaves +Y pointing forward.

use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Maximum number of redraws when a subsampling keeps fewer than two joints.
pub const MAX_SUBSAMPLE_RETRIES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("skeleton needs at least 2 joints, got {0}")]
    TooFewJoints(usize),
    #[error("per-joint arrays disagree: {names} names, {parents} parents, {major} major flags")]
    LengthMismatch {
        names: usize,
        parents: usize,
        major: usize,
    },
    #[error("expected exactly one root joint, found {0}")]
    RootCount(usize),
    #[error("joint {joint} has out-of-range parent {parent}")]
    BadParent { joint: usize, parent: usize },
    #[error("joint {0} is not connected to the root (cycle in parent links)")]
    Unlinked(usize),
    #[error("landmark `{name}` index {index} out of range")]
    BadLandmark { name: &'static str, index: usize },
    #[error("root joint {root} is not the pelvis landmark {pelvis}")]
    RootNotPelvis { root: usize, pelvis: usize },
    #[error("missing landmark `{0}`")]
    MissingLandmark(&'static str),
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("sequence must have at least one frame")]
    NoFrames,
    #[error("non-finite value at joint {joint}, frame {frame}")]
    NonFinite { joint: usize, frame: usize },
    #[error("framerate must be positive and finite, got {0}")]
    BadFramerate(f64),
    #[error("topologies differ")]
    TopologyMismatch,
    #[error("degenerate landmark geometry: {0}")]
    Degenerate(&'static str),
    #[error("bone ending at joint {0} has zero length")]
    DegenerateBone(usize),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("could not draw a subset with at least 2 joints after {0} attempts")]
    SubsampleExhausted(usize),
}

/// Named anatomical landmarks. Only the pelvis is mandatory; subsampled
/// topologies may lose the others.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmarks {
    pub pelvis: usize,
    pub left_hip: Option<usize>,
    pub right_hip: Option<usize>,
    pub left_shoulder: Option<usize>,
    pub right_shoulder: Option<usize>,
    pub head_top: Option<usize>,
    pub left_foot: Option<usize>,
    pub right_foot: Option<usize>,
}

impl Landmarks {
    /// Landmarks with only a pelvis.
    pub fn pelvis_only(pelvis: usize) -> Self {
        Landmarks {
            pelvis,
            left_hip: None,
            right_hip: None,
            left_shoulder: None,
            right_shoulder: None,
            head_top: None,
            left_foot: None,
            right_foot: None,
        }
    }

    fn optional(&self) -> [(&'static str, Option<usize>); 7] {
        [
            ("left_hip", self.left_hip),
            ("right_hip", self.right_hip),
            ("left_shoulder", self.left_shoulder),
            ("right_shoulder", self.right_shoulder),
            ("head_top", self.head_top),
            ("left_foot", self.left_foot),
            ("right_foot", self.right_foot),
        ]
    }

    fn map(&self, f: impl Fn(usize) -> Option<usize>) -> Landmarks {
        Landmarks {
            pelvis: f(self.pelvis).expect("pelvis always retained"),
            left_hip: self.left_hip.and_then(&f),
            right_hip: self.right_hip.and_then(&f),
            left_shoulder: self.left_shoulder.and_then(&f),
            right_shoulder: self.right_shoulder.and_then(&f),
            head_top: self.head_top.and_then(&f),
            left_foot: self.left_foot.and_then(&f),
            right_foot: self.right_foot.and_then(&f),
        }
    }
}

/// Joint names, parent links and major-joint flags of a character.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct SkeletonTopology {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    major: Vec<bool>,
    landmarks: Landmarks,
    /// Root-outward traversal order.
    order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    major: Vec<bool>,
    landmarks: Landmarks,
}

impl TryFrom<TopologyRepr> for SkeletonTopology {
    type Error = SkeletonError;
    fn try_from(r: TopologyRepr) -> Result<Self, SkeletonError> {
        SkeletonTopology::new(r.names, r.parents, r.major, r.landmarks)
    }
}

impl From<SkeletonTopology> for TopologyRepr {
    fn from(t: SkeletonTopology) -> Self {
        TopologyRepr {
            names: t.names,
            parents: t.parents,
            major: t.major,
            landmarks: t.landmarks,
        }
    }
}

impl SkeletonTopology {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        major: Vec<bool>,
        landmarks: Landmarks,
    ) -> Result<Self, SkeletonError> {
        let n = names.len();
        if parents.len() != n || major.len() != n {
            return Err(SkeletonError::LengthMismatch {
                names: n,
                parents: parents.len(),
                major: major.len(),
            });
        }
        if n < 2 {
            return Err(SkeletonError::TooFewJoints(n));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(SkeletonError::RootCount(roots.len()));
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == j {
                    return Err(SkeletonError::BadParent { joint: j, parent: p });
                }
            }
        }
        if landmarks.pelvis >= n {
            return Err(SkeletonError::BadLandmark {
                name: "pelvis",
                index: landmarks.pelvis,
            });
        }
        for (name, idx) in landmarks.optional() {
            if let Some(i) = idx {
                if i >= n {
                    return Err(SkeletonError::BadLandmark { name, index: i });
                }
            }
        }
        let root = roots[0];
        if root != landmarks.pelvis {
            return Err(SkeletonError::RootNotPelvis {
                root,
                pelvis: landmarks.pelvis,
            });
        }

        let mut children = vec![Vec::new(); n];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            order.push(j);
            stack.extend(children[j].iter().rev());
        }
        if order.len() != n {
            let mut seen = vec![false; n];
            for &j in &order {
                seen[j] = true;
            }
            let missing = seen.iter().position(|s| !s).unwrap_or(0);
            return Err(SkeletonError::Unlinked(missing));
        }

        Ok(SkeletonTopology {
            names,
            parents,
            major,
            landmarks,
            order,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.names.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn major_mask(&self) -> &[bool] {
        &self.major
    }

    pub fn landmarks(&self) -> &Landmarks {
        &self.landmarks
    }

    pub fn root(&self) -> usize {
        self.landmarks.pelvis
    }

    /// Joints in root-outward order: every parent precedes its children.
    pub fn traversal_order(&self) -> &[usize] {
        &self.order
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Bones as `(child, parent)` pairs, ordered by child joint index.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (j, p)))
            .collect()
    }

    /// Restriction of the topology to `kept` (sorted, must contain the pelvis).
    /// Each kept joint is reattached to its nearest kept ancestor.
    pub fn restrict(&self, kept: &[usize]) -> Result<(SkeletonTopology, Vec<Option<usize>>), SkeletonError> {
        let n = self.joint_count();
        let mut new_index = vec![None; n];
        for (i, &j) in kept.iter().enumerate() {
            new_index[j] = Some(i);
        }
        let mut remapped = Vec::with_capacity(kept.len());
        for &j in kept {
            let mut p = self.parents[j];
            while let Some(pi) = p {
                if new_index[pi].is_some() {
                    break;
                }
                p = self.parents[pi];
            }
            remapped.push(p.and_then(|pi| new_index[pi]));
        }
        let topo = SkeletonTopology::new(
            kept.iter().map(|&j| self.names[j].clone()).collect(),
            remapped.clone(),
            kept.iter().map(|&j| self.major[j]).collect(),
            self.landmarks.map(|j| new_index[j]),
        )?;
        Ok((topo, remapped))
    }
}

fn check_positions(p: &[Vec3]) -> Result<(), (usize, usize)> {
    for (i, v) in p.iter().enumerate() {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err((i, 0));
        }
    }
    Ok(())
}

/// Static neutral pose (N-pose) of a character, one position per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTemplate {
    topology: Arc<SkeletonTopology>,
    positions: Vec<Vec3>,
    normalized: bool,
}

impl SkeletonTemplate {
    /// Wraps raw joint positions. The result is flagged un-normalized.
    pub fn new(topology: Arc<SkeletonTopology>, positions: Vec<Vec3>) -> Result<Self, SkeletonError> {
        if positions.len() != topology.joint_count() {
            return Err(SkeletonError::ShapeMismatch {
                expected: topology.joint_count(),
                got: positions.len(),
            });
        }
        if let Err((joint, frame)) = check_positions(&positions) {
            return Err(SkeletonError::NonFinite { joint, frame });
        }
        Ok(SkeletonTemplate {
            topology,
            positions,
            normalized: false,
        })
    }

    pub fn topology(&self) -> &Arc<SkeletonTopology> {
        &self.topology
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn joint_count(&self) -> usize {
        self.positions.len()
    }

    /// Marks the template as normalized without checking. Used when loading
    /// templates that were normalized before being stored.
    pub fn assume_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        self.topology
            .bones()
            .iter()
            .map(|&(c, p)| (self.positions[c] - self.positions[p]).norm())
            .collect()
    }

    /// Applies `x -> rotation * x + translation` to every joint.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> SkeletonTemplate {
        SkeletonTemplate {
            topology: self.topology.clone(),
            positions: self.positions.iter().map(|p| rotation * p + translation).collect(),
            normalized: false,
        }
    }

    /// Uniformly scales all positions about the origin.
    pub fn scaled(&self, factor: f64) -> SkeletonTemplate {
        SkeletonTemplate {
            topology: self.topology.clone(),
            positions: self.positions.iter().map(|p| p * factor).collect(),
            normalized: self.normalized,
        }
    }

    /// Keeps the joints in `kept` (sorted), re-linking each to its nearest
    /// kept ancestor. Positions are copied untouched.
    pub fn restrict(&self, kept: &[usize]) -> Result<SkeletonTemplate, SkeletonError> {
        let (topo, _) = self.topology.restrict(kept)?;
        Ok(SkeletonTemplate {
            topology: Arc::new(topo),
            positions: kept.iter().map(|&j| self.positions[j]).collect(),
            normalized: self.normalized,
        })
    }

    /// The template as a single-frame sequence.
    pub fn as_sequence(&self, framerate: f64) -> MotionSequence {
        MotionSequence {
            topology: self.topology.clone(),
            positions: self.positions.clone(),
            frames: 1,
            framerate,
        }
    }
}

/// Global joint positions over time. Stored frame-major: joint `j` of frame
/// `f` lives at index `f * J + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    topology: Arc<SkeletonTopology>,
    positions: Vec<Vec3>,
    frames: usize,
    framerate: f64,
}

impl MotionSequence {
    pub fn new(
        topology: Arc<SkeletonTopology>,
        positions: Vec<Vec3>,
        framerate: f64,
    ) -> Result<Self, SkeletonError> {
        let j = topology.joint_count();
        if positions.is_empty() {
            return Err(SkeletonError::NoFrames);
        }
        if positions.len() % j != 0 {
            return Err(SkeletonError::ShapeMismatch {
                expected: j * (positions.len() / j + 1),
                got: positions.len(),
            });
        }
        if !(framerate.is_finite() && framerate > 0.0) {
            return Err(SkeletonError::BadFramerate(framerate));
        }
        if let Err((i, _)) = check_positions(&positions) {
            return Err(SkeletonError::NonFinite {
                joint: i % j,
                frame: i / j,
            });
        }
        let frames = positions.len() / j;
        Ok(MotionSequence {
            topology,
            positions,
            frames,
            framerate,
        })
    }

    /// Builds a sequence from a per-frame closure.
    pub fn from_fn(
        topology: Arc<SkeletonTopology>,
        frames: usize,
        framerate: f64,
        mut f: impl FnMut(usize, usize) -> Vec3,
    ) -> Result<Self, SkeletonError> {
        let j = topology.joint_count();
        let mut positions = Vec::with_capacity(j * frames);
        for fr in 0..frames {
            for jt in 0..j {
                positions.push(f(jt, fr));
            }
        }
        Self::new(topology, positions, framerate)
    }

    pub fn topology(&self) -> &Arc<SkeletonTopology> {
        &self.topology
    }

    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn framerate(&self) -> f64 {
        self.framerate
    }

    pub fn duration(&self) -> f64 {
        (self.frames - 1) as f64 / self.framerate
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<Vec3> {
        self.positions
    }

    #[inline]
    pub fn at(&self, joint: usize, frame: usize) -> Vec3 {
        self.positions[frame * self.joint_count() + joint]
    }

    pub fn frame(&self, frame: usize) -> &[Vec3] {
        let j = self.joint_count();
        &self.positions[frame * j..(frame + 1) * j]
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> MotionSequence {
        let j = self.joint_count();
        MotionSequence {
            topology: self.topology.clone(),
            positions: self.positions[start * j..(start + len) * j].to_vec(),
            frames: len,
            framerate: self.framerate,
        }
    }

    pub fn map_positions(&self, mut f: impl FnMut(usize, usize, Vec3) -> Vec3) -> MotionSequence {
        let j = self.joint_count();
        MotionSequence {
            topology: self.topology.clone(),
            positions: self
                .positions
                .iter()
                .enumerate()
                .map(|(i, p)| f(i % j, i / j, *p))
                .collect(),
            frames: self.frames,
            framerate: self.framerate,
        }
    }

    pub fn translated(&self, offset: &Vec3) -> MotionSequence {
        self.map_positions(|_, _, p| p + offset)
    }

    /// Keeps the joints in `kept` (sorted), bitwise-copying their positions.
    pub fn restrict(&self, kept: &[usize]) -> Result<MotionSequence, SkeletonError> {
        let (topo, _) = self.topology.restrict(kept)?;
        let mut positions = Vec::with_capacity(kept.len() * self.frames);
        for f in 0..self.frames {
            let frame = self.frame(f);
            positions.extend(kept.iter().map(|&j| frame[j]));
        }
        Ok(MotionSequence {
            topology: Arc::new(topo),
            positions,
            frames: self.frames,
            framerate: self.framerate,
        })
    }

    /// Same positions under a structurally identical topology handle.
    pub fn with_topology(&self, topology: Arc<SkeletonTopology>) -> Result<MotionSequence, SkeletonError> {
        if *topology != *self.topology {
            return Err(SkeletonError::TopologyMismatch);
        }
        Ok(MotionSequence {
            topology,
            positions: self.positions.clone(),
            frames: self.frames,
            framerate: self.framerate,
        })
    }
}

/// Joints kept by a stochastic subsampling draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointSubset {
    /// Original joint indices, ascending.
    pub kept: Vec<usize>,
    /// Parent of each kept joint in the new indexing (nearest kept ancestor).
    pub remapped_parents: Vec<Option<usize>>,
    pub pelvis_kept: bool,
}

impl JointSubset {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Per-bone length series, `lengths[b][f]`, bones ordered as
/// [`SkeletonTopology::bones`].
pub fn bone_lengths(seq: &MotionSequence) -> Vec<Vec<f64>> {
    seq.topology
        .bones()
        .iter()
        .map(|&(c, p)| {
            (0..seq.frames)
                .map(|f| (seq.at(c, f) - seq.at(p, f)).norm())
                .collect()
        })
        .collect()
}

/// Median with the lower/upper midpoint average for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn landmark(l: Option<usize>, name: &'static str) -> Result<usize, SkeletonError> {
    l.ok_or(SkeletonError::MissingLandmark(name))
}

/// Rigid transform bringing a pose to the canonical frame, as
/// `(rotation, pelvis position)`; apply `rotation * (x - pelvis)`.
pub fn canonical_frame(topology: &SkeletonTopology, positions: &[Vec3]) -> Result<(Rotation3<f64>, Vec3), SkeletonError> {
    let lm = topology.landmarks();
    let pelvis = positions[lm.pelvis];
    let lh = positions[landmark(lm.left_hip, "left_hip")?];
    let rh = positions[landmark(lm.right_hip, "right_hip")?];
    let ls = positions[landmark(lm.left_shoulder, "left_shoulder")?];
    let rs = positions[landmark(lm.right_shoulder, "right_shoulder")?];

    const EPS: f64 = 1e-9;
    if (rh - lh).norm() < EPS {
        return Err(SkeletonError::Degenerate("coincident hips"));
    }
    if (rs - ls).norm() < EPS {
        return Err(SkeletonError::Degenerate("coincident shoulders"));
    }
    let up = 0.5 * (ls + rs) - pelvis;
    if up.norm() < EPS {
        return Err(SkeletonError::Degenerate("shoulder midpoint at pelvis"));
    }
    let z = up.normalize();
    let lateral = rh - lh;
    let x = lateral - z * lateral.dot(&z);
    if x.norm() < EPS * lateral.norm().max(1.0) {
        return Err(SkeletonError::Degenerate("hip axis collinear with body axis"));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    // Rows are the new basis vectors expressed in the old frame.
    let m = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok((Rotation3::from_matrix_unchecked(m), pelvis))
}

/// Moves the pelvis to the origin, the body axis (pelvis to shoulder
/// midpoint) onto +Z and the left-to-right hip axis into the XZ plane along
/// +X. Rigid, so bone lengths are preserved.
pub fn normalize_template(t: &SkeletonTemplate) -> Result<SkeletonTemplate, SkeletonError> {
    let (rot, pelvis) = canonical_frame(&t.topology, &t.positions)?;
    let mut positions: Vec<Vec3> = t.positions.iter().map(|p| rot * (p - pelvis)).collect();
    positions[t.topology.root()] = Vec3::zeros();
    Ok(SkeletonTemplate {
        topology: t.topology.clone(),
        positions,
        normalized: true,
    })
}

/// Scales the bones of a generic neutral pose to the temporal medians of
/// the bone lengths observed in `seq`, rebuilding root-outward.
pub fn template_from_sequence(
    seq: &MotionSequence,
    generic: &SkeletonTemplate,
) -> Result<SkeletonTemplate, SkeletonError> {
    if *seq.topology != *generic.topology {
        return Err(SkeletonError::TopologyMismatch);
    }
    let topo = &generic.topology;
    let series = bone_lengths(seq);
    let mut target = vec![0.0; topo.joint_count()];
    for ((child, _), s) in topo.bones().iter().zip(&series) {
        let m = median(s);
        if !(m > 0.0) {
            return Err(SkeletonError::DegenerateBone(*child));
        }
        target[*child] = m;
    }
    let mut positions = vec![Vec3::zeros(); topo.joint_count()];
    positions[topo.root()] = generic.positions[topo.root()];
    for &j in topo.traversal_order() {
        if let Some(p) = topo.parents()[j] {
            let dir = generic.positions[j] - generic.positions[p];
            let len = dir.norm();
            if len == 0.0 {
                return Err(SkeletonError::DegenerateBone(j));
            }
            positions[j] = positions[p] + dir * (target[j] / len);
        }
    }
    let rebuilt = SkeletonTemplate {
        topology: generic.topology.clone(),
        positions,
        normalized: false,
    };
    normalize_template(&rebuilt)
}

/// Draws the kept-joint set: every joint except the pelvis is dropped
/// independently with `p_major` (major joints) or `p_other`.
pub fn draw_joint_subset(
    topology: &SkeletonTopology,
    rng: &mut impl Rng,
    p_major: f64,
    p_other: f64,
) -> Result<JointSubset, SkeletonError> {
    for p in [p_major, p_other] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SkeletonError::BadProbability(p));
        }
    }
    let pelvis = topology.root();
    for _ in 0..MAX_SUBSAMPLE_RETRIES {
        let kept: Vec<usize> = (0..topology.joint_count())
            .filter(|&j| {
                if j == pelvis {
                    return true;
                }
                let p = if topology.major_mask()[j] { p_major } else { p_other };
                // Always consume one draw per joint so streams stay aligned.
                let u: f64 = rng.random();
                u >= p
            })
            .collect();
        if kept.len() >= 2 {
            let (_, remapped_parents) = topology.restrict(&kept)?;
            return Ok(JointSubset {
                kept,
                remapped_parents,
                pelvis_kept: true,
            });
        }
    }
    Err(SkeletonError::SubsampleExhausted(MAX_SUBSAMPLE_RETRIES))
}

/// Stochastic joint subsampling applied consistently to a sequence and its
/// template. Deterministic in `seed`.
pub fn subsample_joints(
    seq: &MotionSequence,
    t: &SkeletonTemplate,
    seed: u64,
    p_major: f64,
    p_other: f64,
) -> Result<(MotionSequence, SkeletonTemplate, JointSubset), SkeletonError> {
    if *seq.topology != *t.topology {
        return Err(SkeletonError::TopologyMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subset = draw_joint_subset(&seq.topology, &mut rng, p_major, p_other)?;
    let sub_seq = seq.restrict(&subset.kept)?;
    let mut sub_t = t.restrict(&subset.kept)?;
    sub_t.topology = sub_seq.topology.clone();
    Ok((sub_seq, sub_t, subset))
}
