//! Reader and writer for hierarchical skeleton + channel animation text
//! files (the BVH layout: `HIERARCHY` block of nested `ROOT`/`JOINT`/`End
//! Site` entries with `OFFSET` and `CHANNELS`, then a `MOTION` block with one
//! line of channel values per frame).
//!
//! `End Site` entries become channel-less joints named `<parent>_end`.
//! Rotation channels are in degrees and compose in the order listed.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};

use super::{AngularClip, MocapError};
use crate::skeleton::{Landmarks, SkeletonTopology, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    Xpos,
    Ypos,
    Zpos,
    Xrot,
    Yrot,
    Zrot,
}

impl Channel {
    fn parse(s: &str) -> Option<Channel> {
        Some(match s.to_ascii_lowercase().as_str() {
            "xposition" => Channel::Xpos,
            "yposition" => Channel::Ypos,
            "zposition" => Channel::Zpos,
            "xrotation" => Channel::Xrot,
            "yrotation" => Channel::Yrot,
            "zrotation" => Channel::Zrot,
            _ => return None,
        })
    }
}

struct RawJoint {
    name: String,
    parent: Option<usize>,
    offset: Vec3,
    channels: Vec<Channel>,
}

struct Tokens<'a> {
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        Tokens { lines, pos: 0 }
    }

    fn next(&mut self) -> Result<(usize, Vec<&'a str>), MocapError> {
        let l = self.lines.get(self.pos).cloned().ok_or(MocapError::Parse {
            line: self.lines.last().map_or(0, |l| l.0),
            msg: "unexpected end of file".into(),
        })?;
        self.pos += 1;
        Ok(l)
    }
}

fn perr(line: usize, msg: impl Into<String>) -> MocapError {
    MocapError::Parse { line, msg: msg.into() }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, MocapError> {
    s.parse().map_err(|_| perr(line, format!("bad number `{s}`")))
}

fn parse_joint(tok: &mut Tokens, joints: &mut Vec<RawJoint>, name: String, parent: Option<usize>) -> Result<(), MocapError> {
    let (line, t) = tok.next()?;
    if t[0] != "{" {
        return Err(perr(line, "expected `{`"));
    }
    let idx = joints.len();
    joints.push(RawJoint {
        name,
        parent,
        offset: Vec3::zeros(),
        channels: Vec::new(),
    });
    loop {
        let (line, t) = tok.next()?;
        match t[0].to_ascii_uppercase().as_str() {
            "OFFSET" => {
                if t.len() != 4 {
                    return Err(perr(line, "OFFSET needs 3 values"));
                }
                joints[idx].offset = Vec3::new(parse_f64(t[1], line)?, parse_f64(t[2], line)?, parse_f64(t[3], line)?);
            }
            "CHANNELS" => {
                let n: usize = t.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| perr(line, "bad channel count"))?;
                if t.len() != n + 2 {
                    return Err(perr(line, "channel count mismatch"));
                }
                joints[idx].channels = t[2..]
                    .iter()
                    .map(|c| Channel::parse(c).ok_or_else(|| perr(line, format!("unknown channel `{c}`"))))
                    .collect::<Result<_, _>>()?;
            }
            "JOINT" => {
                let name = t.get(1).ok_or_else(|| perr(line, "JOINT without name"))?.to_string();
                parse_joint(tok, joints, name, Some(idx))?;
            }
            "END" => {
                let name = format!("{}_end", joints[idx].name);
                parse_joint(tok, joints, name, Some(idx))?;
            }
            "}" => return Ok(()),
            other => return Err(perr(line, format!("unexpected `{other}`"))),
        }
    }
}

/// Normalized joint name for alias matching.
fn key(name: &str) -> String {
    name.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect()
}

fn find(names: &[String], aliases: &[&str]) -> Option<usize> {
    let keys: Vec<String> = names.iter().map(|n| key(n)).collect();
    aliases.iter().find_map(|a| keys.iter().position(|k| k == a))
}

/// Landmark and major-joint detection from common naming schemes.
fn classify(names: &[String], root: usize) -> (Vec<bool>, Landmarks) {
    let side = |s: &str, l: &[&str]| -> Vec<String> {
        l.iter()
            .flat_map(|b| [format!("{s}{b}"), format!("{}{b}", &s[..1])])
            .collect()
    };
    let aliases = |s: &str, l: &[&str]| side(s, l);
    let lookup = |v: Vec<String>| find(names, &v.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let part = |s: &str, l: &[&str]| lookup(aliases(s, l));

    let hips = ["upleg", "hip", "thigh"];
    let knees = ["leg", "knee", "shin", "lowleg"];
    let ankles = ["foot", "ankle"];
    let shoulders = ["arm", "uparm", "shldr", "shoulder"];
    let elbows = ["forearm", "elbow", "lowarm"];
    let wrists = ["hand", "wrist"];
    let toes = ["toebase", "toe", "toes", "footend", "toebaseend", "toeend"];

    let mut major = vec![false; names.len()];
    let mut mark = |i: Option<usize>| {
        if let Some(i) = i {
            major[i] = true;
        }
        i
    };
    let lm = Landmarks {
        pelvis: root,
        left_hip: mark(part("left", &hips)),
        right_hip: mark(part("right", &hips)),
        left_shoulder: mark(part("left", &shoulders)),
        right_shoulder: mark(part("right", &shoulders)),
        head_top: find(names, &["headend", "headtop", "headsite", "head"]),
        left_foot: part("left", &toes).or_else(|| part("left", &ankles)),
        right_foot: part("right", &toes).or_else(|| part("right", &ankles)),
    };
    for s in ["left", "right"] {
        mark(part(s, &knees));
        mark(part(s, &ankles));
        mark(part(s, &elbows));
        mark(part(s, &wrists));
    }
    (major, lm)
}

fn euler_to_quat(order: &[Channel], values: &[f64]) -> UnitQuaternion<f64> {
    let mut q = UnitQuaternion::identity();
    for (c, v) in order.iter().zip(values) {
        let axis = match c {
            Channel::Xrot => Vector3::x_axis(),
            Channel::Yrot => Vector3::y_axis(),
            Channel::Zrot => Vector3::z_axis(),
            _ => continue,
        };
        q *= UnitQuaternion::from_axis_angle(&axis, v.to_radians());
    }
    q
}

/// Parses a BVH document into an angular clip in the file's own axes and
/// units.
pub fn parse_bvh(text: &str) -> Result<AngularClip, MocapError> {
    let mut tok = Tokens::new(text);
    let (line, t) = tok.next()?;
    if !t[0].eq_ignore_ascii_case("HIERARCHY") {
        return Err(perr(line, "expected HIERARCHY"));
    }
    let (line, t) = tok.next()?;
    if !t[0].eq_ignore_ascii_case("ROOT") || t.len() < 2 {
        return Err(perr(line, "expected ROOT <name>"));
    }
    let mut joints = Vec::new();
    parse_joint(&mut tok, &mut joints, t[1].to_string(), None)?;

    let (line, t) = tok.next()?;
    if !t[0].eq_ignore_ascii_case("MOTION") {
        return Err(perr(line, "expected MOTION"));
    }
    let (line, t) = tok.next()?;
    if t.len() != 2 || !t[0].eq_ignore_ascii_case("Frames:") {
        return Err(perr(line, "expected `Frames: <n>`"));
    }
    let frames: usize = t[1].parse().map_err(|_| perr(line, "bad frame count"))?;
    let (line, t) = tok.next()?;
    if t.len() != 3 || !t[0].eq_ignore_ascii_case("Frame") {
        return Err(perr(line, "expected `Frame Time: <seconds>`"));
    }
    let frame_time = parse_f64(t[2], line)?;
    if !(frame_time > 0.0) {
        return Err(perr(line, "frame time must be positive"));
    }

    let names: Vec<String> = joints.iter().map(|j| j.name.clone()).collect();
    let (major, landmarks) = classify(&names, 0);
    let topo = Arc::new(SkeletonTopology::new(
        names,
        joints.iter().map(|j| j.parent).collect(),
        major,
        landmarks,
    )?);

    let n_channels: usize = joints.iter().map(|j| j.channels.len()).sum();
    let nj = joints.len();
    let mut rotations = Vec::with_capacity(frames * nj);
    let mut root_translation = Vec::with_capacity(frames);
    for _ in 0..frames {
        let (line, t) = tok.next()?;
        if t.len() != n_channels {
            return Err(perr(line, format!("{} values, expected {n_channels}", t.len())));
        }
        let values: Vec<f64> = t.iter().map(|s| parse_f64(s, line)).collect::<Result<_, _>>()?;
        let mut k = 0;
        let mut root = Vec3::zeros();
        for (ji, j) in joints.iter().enumerate() {
            let v = &values[k..k + j.channels.len()];
            k += j.channels.len();
            for (c, x) in j.channels.iter().zip(v) {
                if ji == 0 {
                    match c {
                        Channel::Xpos => root.x = *x,
                        Channel::Ypos => root.y = *x,
                        Channel::Zpos => root.z = *x,
                        _ => {}
                    }
                }
            }
            rotations.push(euler_to_quat(&j.channels, v));
        }
        root_translation.push(root);
    }
    Ok(AngularClip {
        topology: topo,
        offsets: joints.iter().map(|j| j.offset).collect(),
        rotations,
        root_translation,
        framerate: 1.0 / frame_time,
    })
}

/// Serializes a clip with `Zrotation Yrotation Xrotation` channels (and root
/// positions). Joints named `*_end` without children are written as `End
/// Site`.
pub fn write_bvh(clip: &AngularClip) -> Result<String, MocapError> {
    clip.validate()?;
    let topo = &clip.topology;
    let nj = topo.joint_count();
    let mut children = vec![Vec::new(); nj];
    for (j, p) in topo.parents().iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(j);
        }
    }
    let is_end = |j: usize| children[j].is_empty() && topo.names()[j].ends_with("_end");

    let mut out = String::from("HIERARCHY\n");
    let mut channel_order = Vec::new();
    fn emit(
        out: &mut String,
        j: usize,
        depth: usize,
        clip: &AngularClip,
        children: &[Vec<usize>],
        is_end: &dyn Fn(usize) -> bool,
        order: &mut Vec<usize>,
    ) {
        let pad = "  ".repeat(depth);
        let o = clip.offsets[j];
        let name = &clip.topology.names()[j];
        if is_end(j) {
            let _ = writeln!(out, "{pad}End Site\n{pad}{{\n{pad}  OFFSET {} {} {}\n{pad}}}", o.x, o.y, o.z);
            return;
        }
        let head = if depth == 0 { "ROOT" } else { "JOINT" };
        let _ = writeln!(out, "{pad}{head} {name}\n{pad}{{\n{pad}  OFFSET {} {} {}", o.x, o.y, o.z);
        if depth == 0 {
            let _ = writeln!(out, "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation");
        } else {
            let _ = writeln!(out, "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation");
        }
        order.push(j);
        for &c in &children[j] {
            emit(out, c, depth + 1, clip, children, is_end, order);
        }
        let _ = writeln!(out, "{pad}}}");
    }
    emit(&mut out, topo.root(), 0, clip, &children, &is_end, &mut channel_order);
    if channel_order.len() + (0..nj).filter(|&j| is_end(j)).count() != nj {
        return Err(MocapError::Shape("joint order is not a tree traversal".into()));
    }

    let frames = clip.frame_count();
    let _ = writeln!(out, "MOTION\nFrames: {frames}\nFrame Time: {}", 1.0 / clip.framerate);
    for f in 0..frames {
        let mut vals: Vec<String> = Vec::new();
        for &j in &channel_order {
            if j == topo.root() {
                let r = clip.root_translation[f];
                vals.extend([r.x, r.y, r.z].map(|v| v.to_string()));
            }
            // R = Rz * Ry * Rx
            let (rx, ry, rz) = clip.rotations[f * nj + j].euler_angles();
            vals.extend([rz, ry, rx].map(|v| v.to_degrees().to_string()));
        }
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::{forward_kinematics, synth, topologies};

    const SAMPLE: &str = "HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT LeftUpLeg
  {
    OFFSET 10 0 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 -40 0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.0333333
0 90 0 0 0 0 0 0 0
1 90 0 90 0 0 0 0 0
";

    #[test]
    fn parses_sample_hierarchy() {
        let clip = parse_bvh(SAMPLE).unwrap();
        assert_eq!(clip.topology.names(), &["Hips", "LeftUpLeg", "LeftUpLeg_end"]);
        assert_eq!(clip.frame_count(), 2);
        assert!((clip.framerate - 30.0).abs() < 1e-3);
        assert_eq!(clip.topology.landmarks().left_hip, Some(1));
        let seq = forward_kinematics(&clip).unwrap();
        // frame 1: root rotated 90 deg about Z, so the +X hip offset maps to +Y
        let hip = seq.at(1, 1);
        assert!((hip - Vec3::new(1.0, 100.0, 0.0)).norm() < 1e-9, "{hip}");
    }

    #[test]
    fn rejects_malformed_motion() {
        let broken = SAMPLE.replace("0 90 0 0 0 0 0 0 0", "0 90 0");
        assert!(matches!(parse_bvh(&broken), Err(MocapError::Parse { .. })));
        assert!(parse_bvh("HELLO").is_err());
    }

    #[test]
    fn write_then_parse_preserves_positions() {
        let spec = synth::SynthSpec::new(synth::MotionKind::Composite, topologies::BODY23, 0.5, 4);
        let clip = synth::generate_angular(&spec).unwrap();
        let text = write_bvh(&clip).unwrap();
        let back = parse_bvh(&text).unwrap();
        assert_eq!(back.topology.names(), clip.topology.names());
        let a = forward_kinematics(&clip).unwrap();
        let b = forward_kinematics(&back).unwrap();
        for (p, q) in a.positions().iter().zip(b.positions()) {
            assert!((p - q).norm() < 1e-9);
        }
        // landmarks recovered from names
        let lm = back.topology.landmarks();
        assert_eq!(lm.left_hip, back.topology.index_of("left_hip"));
        assert_eq!(lm.head_top, back.topology.index_of("head_top"));
    }
}
