//! Raw clips to a chunked, split dataset: axis conversion, resampling,
//! forward kinematics, per-performer templates and chunk extraction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{quantize, Dataset, SourceEntry};
use super::synth::{generate_angular, MotionKind, SynthSpec};
use super::{
    extract_chunks, forward_kinematics, resample_angular, resample_positions, topologies, AngularClip, AxisConvention,
    MocapError, Split, WORKING_FPS,
};
use crate::skeleton::{normalize_template, template_from_sequence, MotionSequence, SkeletonTemplate};

#[derive(Clone, Debug)]
pub enum SourceMotion {
    Angular(AngularClip),
    Positions(MotionSequence),
}

/// One input clip with its provenance.
#[derive(Clone, Debug)]
pub struct SourceClip {
    pub id: String,
    pub origin: String,
    /// Key into the generic-pose table passed to [`prepare_dataset`].
    pub topology: String,
    pub axes: AxisConvention,
    pub motion: SourceMotion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub fps: f64,
    /// Probability that a chunk lands in the validation split.
    pub validation_fraction: f64,
    /// Topology whose chunks all go to validation.
    pub holdout_topology: Option<String>,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions { fps: WORKING_FPS, validation_fraction: 0.1, holdout_topology: None, seed: 0 }
    }
}

/// Chunk counts per topology and split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub counts: BTreeMap<String, (usize, usize)>,
}

impl SplitReport {
    pub fn train(&self) -> usize {
        self.counts.values().map(|c| c.0).sum()
    }

    pub fn validation(&self) -> usize {
        self.counts.values().map(|c| c.1).sum()
    }
}

impl std::fmt::Display for SplitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "topology\ttrain\tvalidation")?;
        for (topo, (t, v)) in &self.counts {
            writeln!(f, "{topo}\t{t}\t{v}")?;
        }
        write!(f, "total\t{}\t{}", self.train(), self.validation())
    }
}

fn canonical_positions(clip: &SourceClip, fps: f64) -> Result<MotionSequence, MocapError> {
    clip.axes.validate()?;
    let seq = match &clip.motion {
        SourceMotion::Angular(a) => {
            a.validate()?;
            forward_kinematics(&resample_angular(a, fps)?)?
        }
        SourceMotion::Positions(p) => resample_positions(p, fps)?,
    };
    Ok(clip.axes.convert(&seq))
}

/// Runs the preprocessing pipeline over `sources`. Each clip is treated as
/// one performer and gets its own template, named after the clip.
pub fn prepare_dataset(
    sources: &[SourceClip],
    generics: &BTreeMap<String, SkeletonTemplate>,
    opts: &PrepareOptions,
) -> Result<(Dataset, SplitReport), MocapError> {
    if !(0.0..=1.0).contains(&opts.validation_fraction) {
        return Err(MocapError::Shape(format!("validation fraction {}", opts.validation_fraction)));
    }
    let mut ds = Dataset::default();
    let mut report = SplitReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for clip in sources {
        let generic = generics.get(&clip.topology).ok_or_else(|| MocapError::UnknownTopology(clip.topology.clone()))?;
        let seq = canonical_positions(clip, opts.fps)?.with_topology(generic.topology().clone())?;
        let template = normalize_template(&template_from_sequence(&seq, generic)?)?;
        let template = SkeletonTemplate::new(generic.topology().clone(), quantize(&template.as_sequence(opts.fps)).into_positions())?
            .assume_normalized();
        if !ds.topologies.contains_key(&clip.topology) {
            ds.add_topology(&clip.topology, generic.clone());
        }
        ds.templates.insert(clip.id.clone(), (clip.topology.clone(), template));
        ds.sources.insert(
            clip.id.clone(),
            SourceEntry {
                origin: clip.origin.clone(),
                framerate: match &clip.motion {
                    SourceMotion::Angular(a) => a.framerate,
                    SourceMotion::Positions(p) => p.framerate(),
                },
                axes: clip.axes,
            },
        );
        let held_out = opts.holdout_topology.as_deref() == Some(clip.topology.as_str());
        let entry = report.counts.entry(clip.topology.clone()).or_default();
        for mut chunk in extract_chunks(&seq, generic.topology().major_mask()) {
            // One draw per chunk regardless of holdout keeps splits stable.
            let u: f64 = rng.random();
            chunk.split = if held_out || u < opts.validation_fraction { Split::Validation } else { Split::Train };
            match chunk.split {
                Split::Train => entry.0 += 1,
                Split::Validation => entry.1 += 1,
            }
            chunk.positions = quantize(&chunk.positions);
            chunk.template_ref = clip.id.clone();
            chunk.source_id = clip.id.clone();
            ds.chunks.push(chunk);
        }
    }
    Ok((ds, report))
}

/// Generic neutral poses of the built-in topologies.
pub fn builtin_generics() -> BTreeMap<String, SkeletonTemplate> {
    topologies::builtin_names()
        .into_iter()
        .map(|n| (n.to_string(), topologies::builtin(n).expect("built-in").1))
        .collect()
}

/// Clip specs of the small two-topology training fixture: four 1.8 s
/// clips, five chunks each, twenty chunks in all.
pub fn fixture_specs(seed: u64) -> Vec<SynthSpec> {
    let plan = [
        (MotionKind::WalkCycle, topologies::BODY17, 1.0),
        (MotionKind::ArmWave, topologies::BODY17, 0.92),
        (MotionKind::Squat, topologies::BODY23, 1.06),
        (MotionKind::Composite, topologies::BODY23, 0.97),
    ];
    plan.iter()
        .enumerate()
        .map(|(i, &(kind, topo, scale))| {
            let mut s = SynthSpec::new(kind, topo, 1.8, seed.wrapping_add(i as u64));
            s.morphology_scale = scale;
            s.proportion_jitter = 0.05;
            s
        })
        .collect()
}

/// Source clips for the synthetic specs, generated as angular clips.
pub fn synthetic_sources(specs: &[SynthSpec]) -> Result<Vec<SourceClip>, MocapError> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SourceClip {
                id: format!("synth{i:03}-{}-{}", s.topology, s.kind),
                origin: format!("synth kind={} topology={} scale={} seed={}", s.kind, s.topology, s.morphology_scale, s.seed),
                topology: s.topology.clone(),
                axes: AxisConvention::IDENTITY,
                motion: SourceMotion::Angular(generate_angular(s)?),
            })
        })
        .collect()
}

/// The twenty-chunk, two-topology fixture with every chunk in training.
pub fn synthetic_fixture(seed: u64) -> Result<Dataset, MocapError> {
    let sources = synthetic_sources(&fixture_specs(seed))?;
    let opts = PrepareOptions { validation_fraction: 0.0, seed, ..Default::default() };
    Ok(prepare_dataset(&sources, &builtin_generics(), &opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::{CHUNK_FRAMES, CHUNK_STRIDE};

    #[test]
    fn fixture_has_twenty_chunks_over_two_topologies() {
        let ds = synthetic_fixture(0).unwrap();
        assert_eq!(ds.chunks.len(), 20);
        assert_eq!(ds.topologies.len(), 2);
        assert!(ds.chunks.iter().all(|c| c.split == Split::Train));
        for c in &ds.chunks {
            let t = ds.template(&c.template_ref).unwrap();
            assert_eq!(t.joint_count(), c.positions.joint_count());
            assert_eq!(c.positions.frame_count(), CHUNK_FRAMES);
        }
    }

    #[test]
    fn sixty_hz_clip_gives_six_chunks() {
        let mut spec = SynthSpec::new(MotionKind::IdleSway, topologies::BODY17, 2.0, 4);
        spec.framerate = 60.0;
        let sources = synthetic_sources(&[spec]).unwrap();
        let (ds, report) = prepare_dataset(&sources, &builtin_generics(), &PrepareOptions::default()).unwrap();
        assert_eq!(ds.chunks.len(), (60 - CHUNK_FRAMES) / CHUNK_STRIDE + 1);
        assert_eq!(report.train() + report.validation(), 6);
    }

    #[test]
    fn holdout_topology_only_in_validation() {
        let sources = synthetic_sources(&fixture_specs(1)).unwrap();
        let opts = PrepareOptions { holdout_topology: Some(topologies::BODY23.into()), ..Default::default() };
        let (ds, report) = prepare_dataset(&sources, &builtin_generics(), &opts).unwrap();
        for c in &ds.chunks {
            if ds.topology_of_template(&c.template_ref) == Some(topologies::BODY23) {
                assert_eq!(c.split, Split::Validation);
            }
        }
        assert_eq!(report.counts[topologies::BODY23].0, 0);
    }

    #[test]
    fn unknown_topology_is_rejected() {
        let mut sources = synthetic_sources(&fixture_specs(0)[..1]).unwrap();
        sources[0].topology = "hexapod".into();
        assert!(matches!(
            prepare_dataset(&sources, &builtin_generics(), &PrepareOptions::default()),
            Err(MocapError::UnknownTopology(_))
        ));
    }
}
