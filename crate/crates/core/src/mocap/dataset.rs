//! On-disk dataset: a TOML manifest plus little-endian binary payloads.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.toml
//! templates/<template id>.skm     one-frame payload per template
//! generic/<topology id>.skm       generic neutral pose per topology
//! chunks/<index>.skm              one payload per chunk
//! ```
//!
//! Payload (`.skm`) layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `SKFM`                            |
//! | 4      | 2    | format version (`PAYLOAD_VERSION`)      |
//! | 6      | 2    | reserved, zero                          |
//! | 8      | 4    | joint count J (u32)                     |
//! | 12     | 4    | frame count F (u32)                     |
//! | 16     | 4    | CRC-32 (IEEE) of the body bytes         |
//! | 20     | 12JF | body: f32, joint-major, then axis, then frame |
//!
//! Value `(j, a, f)` sits at body index `(j * 3 + a) * F + f`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AxisConvention, Chunk, Split};
use crate::skeleton::{Landmarks, MotionSequence, SkeletonError, SkeletonTemplate, SkeletonTopology, Vec3};

pub const PAYLOAD_MAGIC: [u8; 4] = *b"SKFM";
pub const PAYLOAD_VERSION: u16 = 1;
pub const MANIFEST_FORMAT: &str = "skelfree-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a payload file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated ({got} bytes, expected {expected})")]
    Truncated { path: PathBuf, got: usize, expected: usize },
    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("chunk {chunk} references unknown template `{template}`")]
    MissingTemplate { chunk: String, template: String },
    #[error("template `{template}` references unknown topology `{topology}`")]
    MissingTopology { template: String, topology: String },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Encodes `J x 3 x F` values given frame-major positions.
pub fn encode_payload(positions: &[Vec3], joints: usize, frames: usize) -> Vec<u8> {
    let mut body = Vec::with_capacity(joints * 3 * frames * 4);
    for j in 0..joints {
        for a in 0..3 {
            for f in 0..frames {
                body.extend_from_slice(&(positions[f * joints + j][a] as f32).to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&PAYLOAD_MAGIC);
    out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(joints as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decoded payload: joint count, frame count and frame-major positions.
pub struct Payload {
    pub joints: usize,
    pub frames: usize,
    pub positions: Vec<Vec3>,
    pub checksum: u32,
}

pub fn decode_payload(bytes: &[u8], path: &Path) -> Result<Payload, DatasetError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != PAYLOAD_MAGIC {
            return Err(DatasetError::BadMagic(path.to_path_buf()));
        }
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    if bytes[..4] != PAYLOAD_MAGIC {
        return Err(DatasetError::BadMagic(path.to_path_buf()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != PAYLOAD_VERSION {
        return Err(DatasetError::VersionMismatch {
            path: path.to_path_buf(),
            found: version as u32,
            expected: PAYLOAD_VERSION as u32,
        });
    }
    let joints = u32_at(8) as usize;
    let frames = u32_at(12) as usize;
    let stored = u32_at(16);
    let expected = HEADER_LEN + joints * 3 * frames * 4;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len(),
            expected,
        });
    }
    let body = &bytes[HEADER_LEN..expected];
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(DatasetError::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut positions = vec![Vec3::zeros(); joints * frames];
    for j in 0..joints {
        for a in 0..3 {
            for f in 0..frames {
                let o = ((j * 3 + a) * frames + f) * 4;
                positions[f * joints + j][a] = f32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]]) as f64;
            }
        }
    }
    Ok(Payload {
        joints,
        frames,
        positions,
        checksum: stored,
    })
}

/// Rounds every coordinate to the nearest `f32`, matching what a payload
/// round trip yields.
pub fn quantize(seq: &MotionSequence) -> MotionSequence {
    seq.map_positions(|_, _, p| p.map(|v| v as f32 as f64))
}

/// Topology entry in the manifest; the root's parent is `-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyEntry {
    pub names: Vec<String>,
    pub parents: Vec<i64>,
    pub major: Vec<bool>,
    pub landmarks: Landmarks,
    /// Relative path of the generic neutral pose payload.
    pub generic: String,
}

impl TopologyEntry {
    pub fn from_topology(t: &SkeletonTopology, generic: String) -> Self {
        TopologyEntry {
            names: t.names().to_vec(),
            parents: t.parents().iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            major: t.major_mask().to_vec(),
            landmarks: t.landmarks().clone(),
            generic,
        }
    }

    pub fn to_topology(&self) -> Result<SkeletonTopology, DatasetError> {
        let parents = self
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(DatasetError::Manifest(format!("bad parent index {p}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SkeletonTopology::new(
            self.names.clone(),
            parents,
            self.major.clone(),
            self.landmarks.clone(),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub topology: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    /// Original input path or generator description.
    pub origin: String,
    pub framerate: f64,
    pub axes: AxisConvention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub file: String,
    pub template: String,
    pub topology: String,
    pub split: Split,
    pub source: String,
    pub start_frame: usize,
    pub mean_offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub topologies: BTreeMap<String, TopologyEntry>,
    #[serde(default)]
    pub templates: BTreeMap<String, TemplateEntry>,
    #[serde(default)]
    pub sources: BTreeMap<String, SourceEntry>,
    #[serde(default)]
    pub chunks: Vec<ChunkEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            topologies: BTreeMap::new(),
            templates: BTreeMap::new(),
            sources: BTreeMap::new(),
            chunks: Vec::new(),
        }
    }
}

/// An in-memory dataset: topologies, templates and normalized chunks.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub topologies: BTreeMap<String, Arc<SkeletonTopology>>,
    pub generics: BTreeMap<String, SkeletonTemplate>,
    /// Template id to (topology id, template).
    pub templates: BTreeMap<String, (String, SkeletonTemplate)>,
    pub sources: BTreeMap<String, SourceEntry>,
    pub chunks: Vec<Chunk>,
}

impl Dataset {
    pub fn add_topology(&mut self, id: &str, generic: SkeletonTemplate) {
        self.topologies.insert(id.to_string(), generic.topology().clone());
        self.generics.insert(id.to_string(), generic);
    }

    pub fn template(&self, id: &str) -> Option<&SkeletonTemplate> {
        self.templates.get(id).map(|(_, t)| t)
    }

    pub fn topology_of_template(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(|(t, _)| t.as_str())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Chunk> {
        self.chunks.iter().filter(move |c| c.split == split)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn read_payload(path: &Path) -> Result<Payload, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_payload(&bytes, path)
}

/// Writes the dataset under `dir` and returns the manifest it wrote.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest, DatasetError> {
    let mut manifest = DatasetManifest {
        sources: ds.sources.clone(),
        ..Default::default()
    };
    for (id, topo) in &ds.topologies {
        let file = format!("generic/{id}.skm");
        let generic = ds
            .generics
            .get(id)
            .ok_or_else(|| DatasetError::Manifest(format!("topology `{id}` has no generic pose")))?;
        write_file(&dir.join(&file), &encode_payload(generic.positions(), topo.joint_count(), 1))?;
        manifest.topologies.insert(id.clone(), TopologyEntry::from_topology(topo, file));
    }
    for (id, (topo_id, t)) in &ds.templates {
        if !ds.topologies.contains_key(topo_id) {
            return Err(DatasetError::MissingTopology {
                template: id.clone(),
                topology: topo_id.clone(),
            });
        }
        let file = format!("templates/{id}.skm");
        write_file(&dir.join(&file), &encode_payload(t.positions(), t.joint_count(), 1))?;
        manifest.templates.insert(
            id.clone(),
            TemplateEntry {
                topology: topo_id.clone(),
                file,
            },
        );
    }
    for (i, c) in ds.chunks.iter().enumerate() {
        let file = format!("chunks/{i:06}.skm");
        let topology = ds
            .topology_of_template(&c.template_ref)
            .ok_or_else(|| DatasetError::MissingTemplate {
                chunk: file.clone(),
                template: c.template_ref.clone(),
            })?
            .to_string();
        let seq = &c.positions;
        write_file(
            &dir.join(&file),
            &encode_payload(seq.positions(), seq.joint_count(), seq.frame_count()),
        )?;
        manifest.chunks.push(ChunkEntry {
            file,
            template: c.template_ref.clone(),
            topology,
            split: c.split,
            source: c.source_id.clone(),
            start_frame: c.start_frame,
            mean_offset: [c.mean_offset.x, c.mean_offset.y, c.mean_offset.z],
        });
    }
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(DatasetError::Manifest(format!("unexpected format `{}`", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::VersionMismatch {
            path,
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

fn load_template(dir: &Path, file: &str, topo: &Arc<SkeletonTopology>) -> Result<SkeletonTemplate, DatasetError> {
    let path = dir.join(file);
    let p = read_payload(&path)?;
    if p.joints != topo.joint_count() || p.frames != 1 {
        return Err(DatasetError::Manifest(format!(
            "{file}: {}x{} payload for a {}-joint template",
            p.joints,
            p.frames,
            topo.joint_count()
        )));
    }
    Ok(SkeletonTemplate::new(topo.clone(), p.positions)?.assume_normalized())
}

/// Reads a dataset written by [`write_dataset`], verifying every payload.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let mut ds = Dataset {
        sources: manifest.sources.clone(),
        ..Default::default()
    };
    for (id, entry) in &manifest.topologies {
        let topo = Arc::new(entry.to_topology()?);
        let generic = load_template(dir, &entry.generic, &topo)?;
        ds.topologies.insert(id.clone(), topo);
        ds.generics.insert(id.clone(), generic);
    }
    for (id, entry) in &manifest.templates {
        let topo = ds.topologies.get(&entry.topology).ok_or_else(|| DatasetError::MissingTopology {
            template: id.clone(),
            topology: entry.topology.clone(),
        })?;
        let t = load_template(dir, &entry.file, topo)?;
        ds.templates.insert(id.clone(), (entry.topology.clone(), t));
    }
    for entry in &manifest.chunks {
        let (_, template) = ds.templates.get(&entry.template).ok_or_else(|| DatasetError::MissingTemplate {
            chunk: entry.file.clone(),
            template: entry.template.clone(),
        })?;
        let topo = template.topology().clone();
        let path = dir.join(&entry.file);
        let p = read_payload(&path)?;
        if p.joints != topo.joint_count() {
            return Err(DatasetError::Manifest(format!(
                "{}: {} joints, template has {}",
                entry.file,
                p.joints,
                topo.joint_count()
            )));
        }
        ds.chunks.push(Chunk {
            positions: MotionSequence::new(topo, p.positions, super::WORKING_FPS)?,
            template_ref: entry.template.clone(),
            source_id: entry.source.clone(),
            mean_offset: Vec3::from(entry.mean_offset),
            split: entry.split,
            start_frame: entry.start_frame,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::{extract_chunks, synth, topologies};

    fn small_dataset() -> Dataset {
        let (_, generic) = topologies::builtin(topologies::BODY17).unwrap();
        let seq = synth::generate_synthetic(&synth::SynthSpec::new(synth::MotionKind::WalkCycle, topologies::BODY17, 1.0, 3)).unwrap();
        let mut ds = Dataset::default();
        ds.add_topology(topologies::BODY17, generic.clone());
        ds.templates.insert("t0".into(), (topologies::BODY17.into(), generic));
        let mut c = extract_chunks(&seq, seq.topology().major_mask()).remove(0);
        c.positions = quantize(&c.positions);
        c.template_ref = "t0".into();
        c.source_id = "s0".into();
        ds.chunks.push(c);
        ds
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &Dataset::default()).unwrap();
        assert!(m.chunks.is_empty());
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.chunks.is_empty() && ds.templates.is_empty());
    }

    #[test]
    fn one_chunk_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.chunks.len(), 1);
        let (a, b) = (&ds.chunks[0], &back.chunks[0]);
        for (x, y) in a.positions.positions().iter().zip(b.positions.positions()) {
            for k in 0..3 {
                assert_eq!(x[k].to_bits(), y[k].to_bits());
            }
        }
        assert_eq!(a.mean_offset, b.mean_offset);
        assert_eq!(a.template_ref, b.template_ref);
        assert_eq!(back.topologies[topologies::BODY17], ds.topologies[topologies::BODY17]);
    }

    #[test]
    fn corrupted_payloads_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small_dataset()).unwrap();
        let path = dir.path().join("chunks/000000.skm");
        let good = fs::read(&path).unwrap();

        let mut flipped = good.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode_payload(&flipped, &path), Err(DatasetError::Checksum { .. })));

        assert!(matches!(decode_payload(&good[..good.len() - 3], &path), Err(DatasetError::Truncated { .. })));

        let mut versioned = good.clone();
        versioned[4] = 9;
        assert!(matches!(
            decode_payload(&versioned, &path),
            Err(DatasetError::VersionMismatch { found: 9, .. })
        ));

        let mut magic = good;
        magic[0] = b'X';
        assert!(matches!(decode_payload(&magic, &path), Err(DatasetError::BadMagic(_))));
    }

    #[test]
    fn manifest_rejects_dangling_template() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = small_dataset();
        ds.chunks[0].template_ref = "ghost".into();
        assert!(matches!(write_dataset(dir.path(), &ds), Err(DatasetError::MissingTemplate { .. })));
    }

    #[test]
    fn payload_layout_is_joint_axis_frame() {
        let topo = topologies::builtin(topologies::BODY17).unwrap().0;
        let seq = MotionSequence::from_fn(topo, 2, 30.0, |j, f| Vec3::new(j as f64, 100.0 + f as f64, -1.0)).unwrap();
        let bytes = encode_payload(seq.positions(), 17, 2);
        let at = |i: usize| f32::from_le_bytes(bytes[HEADER_LEN + 4 * i..HEADER_LEN + 4 * i + 4].try_into().unwrap());
        // joint 1, axis 1, frame 1 -> (1 * 3 + 1) * 2 + 1
        assert_eq!(at(9), 101.0);
        assert_eq!(at(0), 0.0);
        assert_eq!(at(6), 1.0);
    }
}
