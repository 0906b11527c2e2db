//! WebAssembly bindings for the browser demo: procedural motion on the
//! built-in skeletons, training-chunk extraction and stochastic joint
//! subsampling.

use skelfree::mocap::synth::{generate_synthetic, MotionKind, SynthSpec};
use skelfree::mocap::topologies::{builtin, builtin_names};
use skelfree::mocap::{extract_chunks, Chunk};
use skelfree::skeleton::{subsample_joints, MotionSequence, SkeletonTemplate};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub fn topologies() -> Vec<String> {
    builtin_names().iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen]
pub fn motion_kinds() -> Vec<String> {
    MotionKind::ALL.iter().map(|k| k.to_string()).collect()
}

fn flatten(seq: &MotionSequence, frame: usize) -> Vec<f32> {
    seq.frame(frame.min(seq.frame_count().saturating_sub(1)))
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect()
}

/// A generated clip with its chunks.
#[wasm_bindgen]
pub struct Scene {
    motion: MotionSequence,
    generic: SkeletonTemplate,
    chunks: Vec<Chunk>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(topology: &str, kind: &str, seconds: f64, scale: f64, seed: u32) -> Result<Scene, JsError> {
        let (_, generic) = builtin(topology)?;
        let kind: MotionKind = kind.parse()?;
        let mut spec = SynthSpec::new(kind, topology, seconds, seed as u64);
        spec.morphology_scale = scale;
        let motion = generate_synthetic(&spec)?;
        let chunks = extract_chunks(&motion, generic.topology().major_mask());
        Ok(Scene { motion, generic, chunks })
    }

    pub fn joint_count(&self) -> usize {
        self.motion.joint_count()
    }

    pub fn frame_count(&self) -> usize {
        self.motion.frame_count()
    }

    /// Parent index per joint, -1 for the root.
    pub fn parents(&self) -> Vec<i32> {
        self.motion.topology().parents().iter().map(|p| p.map_or(-1, |p| p as i32)).collect()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.motion.topology().names().to_vec()
    }

    /// Joint positions of one frame as `x, y, z` triples (meters, Z up).
    pub fn frame(&self, frame: usize) -> Vec<f32> {
        flatten(&self.motion, frame)
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_starts(&self) -> Vec<u32> {
        self.chunks.iter().map(|c| c.start_frame as u32).collect()
    }

    /// One frame of a chunk, translated so the chunk's major-joint mean is
    /// the origin.
    pub fn chunk_frame(&self, chunk: usize, frame: usize) -> Result<Vec<f32>, JsError> {
        let c = self.chunks.get(chunk).ok_or_else(|| JsError::new("chunk out of range"))?;
        Ok(flatten(&c.positions, frame))
    }

    /// Indices of the joints kept by one subsampling draw.
    pub fn subsample(&self, p_major: f64, p_other: f64, seed: u32) -> Result<Vec<u32>, JsError> {
        let (_, _, subset) = subsample_joints(&self.motion, &self.generic, seed as u64, p_major, p_other)?;
        Ok(subset.kept.iter().map(|&j| j as u32).collect())
    }

    pub fn major_mask(&self) -> Vec<u8> {
        self.motion.topology().major_mask().iter().map(|&m| m as u8).collect()
    }
}
