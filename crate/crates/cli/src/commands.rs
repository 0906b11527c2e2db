use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::DType;
use skelfree::mocap::bvh::{parse_bvh, write_bvh};
use skelfree::mocap::dataset::{read_dataset, write_dataset, Dataset};
use skelfree::mocap::prepare::{
    builtin_generics, prepare_dataset, synthetic_fixture, synthetic_sources, PrepareOptions, SourceClip, SourceMotion,
};
use skelfree::mocap::synth::{generate_angular, MotionKind, SynthSpec};
use skelfree::mocap::topologies::{builtin, builtin_names};
use skelfree::mocap::{forward_kinematics, AngularClip, AxisConvention, Chunk, Split};
use skelfree::model::{load_checkpoint, Model};
use skelfree::skeleton::{MotionSequence, SkeletonTemplate};
use skelfree::tasks::{
    add_noise, config_fingerprint, draw_proportion_subset, emit_report, eval_denoising, eval_representation,
    eval_upsampling, retarget, EvalItem, EvalReport, ReportFormat, RetargetParams, Windowing,
};
use skelfree::training::{checkpoint_path, derive_seed, TrainOutcome, Trainer, TrainItem};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::latent::{decode_latent, encode_latent, read_manifest, write_manifest, LatentEntry, LatentManifest};

fn axes(cfg: &RunConfig) -> AxisConvention {
    match cfg.prepare.up_axis.as_str() {
        "y" => AxisConvention::y_up(cfg.prepare.unit_scale),
        _ => AxisConvention { unit_scale: cfg.prepare.unit_scale, ..AxisConvention::IDENTITY },
    }
}

fn clip_id(path: &Path, taken: &BTreeMap<String, SkeletonTemplate>) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into());
    let base: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect();
    let mut id = base.clone();
    let mut k = 1;
    while taken.contains_key(&id) {
        id = format!("{base}-{k}");
        k += 1;
    }
    id
}

/// Topology id and generic pose for a parsed clip: a built-in skeleton when
/// the hierarchy matches one, otherwise the clip's own rest pose.
fn clip_topology(clip: &AngularClip, axes: &AxisConvention) -> Result<(String, SkeletonTemplate), CliError> {
    for name in builtin_names() {
        let (topo, generic) = builtin(name)?;
        if topo.names() == clip.topology.names() && topo.parents() == clip.topology.parents() {
            return Ok((name.to_string(), generic));
        }
    }
    let rest = AngularClip {
        topology: clip.topology.clone(),
        offsets: clip.offsets.clone(),
        rotations: vec![Default::default(); clip.topology.joint_count()],
        root_translation: vec![Default::default()],
        framerate: clip.framerate,
    };
    let pose = axes.convert(&forward_kinematics(&rest)?);
    let mut h = crc32fast::Hasher::new();
    for (n, p) in clip.topology.names().iter().zip(clip.topology.parents()) {
        h.update(n.as_bytes());
        h.update(&p.map_or(u64::MAX, |p| p as u64).to_le_bytes());
    }
    let generic = SkeletonTemplate::new(clip.topology.clone(), pose.into_positions())?;
    Ok((format!("bvh-{:08x}", h.finalize()), generic))
}

pub fn prepare(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Usage("no input files".into()));
    }
    let axes = axes(cfg);
    let mut generics = BTreeMap::new();
    let mut ids = BTreeMap::new();
    let mut sources = Vec::new();
    let mut failures = Vec::new();
    for path in &cfg.inputs {
        let parsed = fs::read_to_string(path)
            .map_err(CliError::from)
            .and_then(|text| parse_bvh(&text).map_err(CliError::from))
            .and_then(|clip| Ok((clip_topology(&clip, &axes)?, clip)));
        match parsed {
            Ok(((topo_id, generic), mut clip)) => {
                clip.topology = generic.topology().clone();
                let id = clip_id(path, &ids);
                ids.insert(id.clone(), generic.clone());
                generics.entry(topo_id.clone()).or_insert(generic);
                sources.push(SourceClip {
                    id,
                    origin: path.display().to_string(),
                    topology: topo_id,
                    axes,
                    motion: SourceMotion::Angular(clip),
                });
            }
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{f}");
        }
        return Err(CliError::Data(format!("{} of {} inputs could not be read", failures.len(), cfg.inputs.len())));
    }
    if let Some(h) = &cfg.prepare.holdout_topology {
        if !generics.contains_key(h) {
            return Err(CliError::Data(format!("holdout topology `{h}` does not occur in the inputs")));
        }
    }
    let opts = PrepareOptions {
        fps: cfg.prepare.fps,
        validation_fraction: cfg.prepare.validation_fraction,
        holdout_topology: cfg.prepare.holdout_topology.clone(),
        seed,
    };
    let (ds, report) = prepare_dataset(&sources, &generics, &opts)?;
    write_dataset(out, &ds)?;
    println!("{report}");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let s = &cfg.synth;
    let specs: Vec<SynthSpec> = if s.fixture {
        skelfree::mocap::prepare::fixture_specs(seed)
    } else {
        let topologies = builtin_names();
        (0..s.clips)
            .map(|i| {
                let kind = MotionKind::ALL[i % MotionKind::ALL.len()];
                let topo = topologies[(i / MotionKind::ALL.len() + i) % topologies.len()];
                let mut spec = SynthSpec::new(kind, topo, s.duration, derive_seed(&[seed, i as u64]));
                spec.framerate = s.framerate;
                spec.morphology_scale = 0.85 + 0.3 * ((derive_seed(&[seed, i as u64, 1]) >> 11) as f64 / (1u64 << 53) as f64);
                spec.proportion_jitter = 0.05;
                spec
            })
            .collect()
    };
    fs::create_dir_all(out)?;
    if s.format == "bvh" {
        for (i, spec) in specs.iter().enumerate() {
            let clip = generate_angular(spec)?;
            let path = out.join(format!("synth{i:03}-{}-{}.bvh", spec.topology, spec.kind));
            fs::write(&path, write_bvh(&clip)?)?;
        }
        println!("wrote {} clips to {}", specs.len(), out.display());
        return Ok(());
    }
    let ds = if s.fixture {
        synthetic_fixture(seed)?
    } else {
        let opts = PrepareOptions {
            fps: cfg.prepare.fps,
            validation_fraction: cfg.prepare.validation_fraction,
            holdout_topology: cfg.prepare.holdout_topology.clone(),
            seed,
        };
        let (ds, report) = prepare_dataset(&synthetic_sources(&specs)?, &builtin_generics(), &opts)?;
        println!("{report}");
        ds
    };
    write_dataset(out, &ds)?;
    println!("wrote {} chunks to {}", ds.chunks.len(), out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(read_dataset(cfg.require_data()?)?)
}

/// Indices of the selected chunks.
fn selected(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<usize>, CliError> {
    let idx: Vec<usize> = if cfg.select.chunks.is_empty() {
        (0..ds.chunks.len())
            .filter(|&i| match cfg.select.split.as_str() {
                "train" => ds.chunks[i].split == Split::Train,
                "validation" => ds.chunks[i].split == Split::Validation,
                _ => true,
            })
            .collect()
    } else {
        cfg.select.chunks.clone()
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.chunks.len()) {
        return Err(CliError::Usage(format!("chunk {bad} out of range ({} chunks)", ds.chunks.len())));
    }
    if idx.is_empty() {
        return Err(CliError::Data(format!("no chunks selected from split `{}`", cfg.select.split)));
    }
    Ok(idx)
}

fn eval_items(ds: &Dataset, idx: &[usize]) -> Vec<EvalItem> {
    let all = EvalItem::from_dataset(ds, None);
    idx.iter().map(|&i| all[i].clone()).collect()
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.require_checkpoint()?;
    let ck = load_checkpoint(path, Some(&cfg.model))?;
    Ok(ck.model()?)
}

/// Output dataset holding `motions`, each `(source chunk, motion, template id)`.
struct Output<'a> {
    input: &'a Dataset,
    ds: Dataset,
}

impl<'a> Output<'a> {
    fn new(input: &'a Dataset) -> Self {
        Output { input, ds: Dataset { sources: input.sources.clone(), ..Default::default() } }
    }

    fn add_template(&mut self, id: &str, topo_id: &str, t: &SkeletonTemplate, generic: &SkeletonTemplate) {
        if !self.ds.topologies.contains_key(topo_id) {
            self.ds.add_topology(topo_id, generic.clone());
        }
        self.ds.templates.insert(id.to_string(), (topo_id.to_string(), t.clone()));
    }

    /// Registers an input-dataset template.
    fn keep_template(&mut self, id: &str) -> Result<(), CliError> {
        let (topo_id, t) = self.input.templates.get(id).ok_or_else(|| CliError::Data(format!("unknown template `{id}`")))?;
        let generic = self.input.generics.get(topo_id).ok_or_else(|| CliError::Data(format!("unknown topology `{topo_id}`")))?;
        let (topo_id, t, generic) = (topo_id.clone(), t.clone(), generic.clone());
        self.add_template(id, &topo_id, &t, &generic);
        Ok(())
    }

    fn push(&mut self, source: &Chunk, positions: MotionSequence, template: &str) {
        self.ds.chunks.push(Chunk {
            positions,
            template_ref: template.to_string(),
            source_id: source.source_id.clone(),
            mean_offset: source.mean_offset,
            split: source.split,
            start_frame: source.start_frame,
        });
    }

    fn write(self, dir: &Path) -> Result<usize, CliError> {
        write_dataset(dir, &self.ds)?;
        Ok(self.ds.chunks.len())
    }
}

struct Target {
    id: String,
    topology: String,
    template: SkeletonTemplate,
    generic: SkeletonTemplate,
}

fn resolve_target(cfg: &RunConfig, ds: Option<&Dataset>) -> Result<Target, CliError> {
    let name = cfg.target.as_deref().ok_or_else(|| CliError::Usage("missing --target".into()))?;
    if let Some(ds) = ds {
        if let Some((topo, t)) = ds.templates.get(name) {
            let generic = ds.generics.get(topo).cloned().unwrap_or_else(|| t.clone());
            return Ok(Target { id: name.into(), topology: topo.clone(), template: t.clone(), generic });
        }
    }
    match builtin(name) {
        Ok((_, generic)) => Ok(Target { id: name.into(), topology: name.into(), template: generic.clone(), generic }),
        Err(_) => Err(CliError::Data(format!("target `{name}` is neither a dataset template nor a built-in topology"))),
    }
}

fn train_items(ds: &Dataset) -> Vec<TrainItem> {
    ds.split(Split::Train)
        .filter_map(|c| Some(TrainItem { motion: c.positions.clone(), template: ds.template(&c.template_ref)?.clone() }))
        .collect()
}

fn run_trainer(mut trainer: Trainer, out: &Path) -> Result<(), CliError> {
    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = interrupted.clone();
        // a second handler registration (e.g. in tests) is harmless to skip
        let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    }
    let outcome = trainer.run(out, |_, _| interrupted.load(Ordering::SeqCst))?;
    match outcome {
        TrainOutcome::Completed => println!("completed {} steps; checkpoint {}", trainer.step_count(), checkpoint_path(out).display()),
        TrainOutcome::Stopped => println!("interrupted at step {}; rerun with --resume to continue", trainer.step_count()),
    }
    Ok(())
}

fn resume_or(cfg: &RunConfig, out: &Path, items: Vec<TrainItem>, fresh: impl FnOnce(Vec<TrainItem>) -> Result<Trainer, CliError>) -> Result<Trainer, CliError> {
    let ck_path = checkpoint_path(out);
    let mut train = cfg.train.clone();
    train.seed = cfg.require_seed()?;
    if cfg.resume {
        if !ck_path.exists() {
            return Err(CliError::Usage(format!("--resume given but {} does not exist", ck_path.display())));
        }
        let ck = load_checkpoint(&ck_path, Some(&cfg.model))?;
        return Ok(Trainer::resume(&ck, train, items)?);
    }
    if ck_path.exists() {
        return Err(CliError::Usage(format!("{} exists; pass --resume or choose another --out", ck_path.display())));
    }
    fresh(items)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let items = train_items(&ds);
    if items.is_empty() {
        return Err(CliError::Data("dataset has no training chunks".into()));
    }
    let mut train = cfg.train.clone();
    train.seed = seed;
    let trainer = resume_or(cfg, out, items, |items| {
        let model = Model::new(cfg.model.clone(), DType::F32, seed)?;
        Ok(Trainer::new(model, train, items)?)
    })?;
    run_trainer(trainer, out)
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let items = train_items(&ds);
    if items.is_empty() {
        return Err(CliError::Data("dataset has no training chunks".into()));
    }
    let mut cfg = cfg.clone();
    cfg.train.finetune = true;
    cfg.train.seed = seed;
    let train = cfg.train.clone();
    let trainer = resume_or(&cfg, out, items, |items| {
        let model = load_model(&cfg)?;
        Ok(Trainer::new(model, train, items)?)
    })?;
    run_trainer(trainer, out)
}

pub fn encode(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let model = load_model(cfg)?;
    let idx = selected(cfg, &ds)?;
    fs::create_dir_all(out.join("codes"))?;
    let mut manifest =
        LatentManifest { format: "skelfree-latents".into(), version: 1, model: config_fingerprint(&model), codes: Vec::new() };
    for &i in &idx {
        let c = &ds.chunks[i];
        let t = ds.template(&c.template_ref).ok_or_else(|| CliError::Data(format!("chunk {i}: unknown template")))?;
        let z = model.encode(&c.positions, t)?;
        let file = format!("codes/{i:06}.skl");
        fs::write(out.join(&file), encode_latent(&z))?;
        manifest.codes.push(LatentEntry {
            file,
            chunk: i,
            source: c.source_id.clone(),
            source_template: c.template_ref.clone(),
            split: c.split,
            start_frame: c.start_frame,
            mean_offset: [c.mean_offset.x, c.mean_offset.y, c.mean_offset.z],
            framerate: c.positions.framerate(),
        });
    }
    write_manifest(out, &manifest)?;
    println!("encoded {} chunks", manifest.codes.len());
    Ok(())
}

pub fn decode(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let dir = cfg.latents.as_deref().ok_or_else(|| CliError::Usage("missing --latents".into()))?;
    let ds = match &cfg.data {
        Some(_) => Some(load_data(cfg)?),
        None => None,
    };
    let model = load_model(cfg)?;
    let target = resolve_target(cfg, ds.as_ref())?;
    let manifest = read_manifest(dir)?;
    let empty = Dataset::default();
    let mut output = Output::new(ds.as_ref().unwrap_or(&empty));
    output.add_template(&target.id, &target.topology, &target.template, &target.generic);
    for e in &manifest.codes {
        let z = decode_latent(&fs::read(dir.join(&e.file))?, &e.file)?;
        let seq = model.decode(&z, &target.template, e.framerate)?;
        let source = Chunk {
            positions: seq.clone(),
            template_ref: e.source_template.clone(),
            source_id: e.source.clone(),
            mean_offset: e.mean_offset.into(),
            split: e.split,
            start_frame: e.start_frame,
        };
        output.push(&source, seq, &target.id);
    }
    let n = output.write(out)?;
    println!("decoded {n} codes under `{}`", target.id);
    Ok(())
}

fn task_params(cfg: &RunConfig) -> RetargetParams {
    RetargetParams {
        windowing: cfg.tasks.windowed.then_some(Windowing { length: cfg.tasks.window, stride: cfg.tasks.stride }),
        restore_trajectory: cfg.tasks.restore_trajectory,
    }
}

pub fn retarget_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let model = load_model(cfg)?;
    let target = resolve_target(cfg, Some(&ds))?;
    let params = task_params(cfg);
    let mut output = Output::new(&ds);
    output.add_template(&target.id, &target.topology, &target.template, &target.generic);
    for i in selected(cfg, &ds)? {
        let c = &ds.chunks[i];
        let src = ds.template(&c.template_ref).ok_or_else(|| CliError::Data(format!("chunk {i}: unknown template")))?;
        let seq = retarget(&model, &c.positions, src, &target.template, &params)?;
        output.push(c, seq, &target.id);
    }
    let n = output.write(out)?;
    println!("retargeted {n} chunks to `{}`", target.id);
    Ok(())
}

fn emit(cfg: &RunConfig, report: &EvalReport, out: &Path) -> Result<(), CliError> {
    let formats: Vec<ReportFormat> =
        cfg.eval.formats.iter().map(|f| if f == "svg" { ReportFormat::Svg } else { ReportFormat::Csv }).collect();
    emit_report(report, out, &formats)?;
    for a in report.overall() {
        let axis = a.axis.map(|x| format!("{}={x} ", report.axis_name.as_deref().unwrap_or("axis"))).unwrap_or_default();
        let input = a.mean_input_mpjpe_cm.map(|x| format!(" (input {x:.3} cm)")).unwrap_or_default();
        println!("{} {axis}n={} mpjpe {:.3} cm{input}", report.protocol, a.n, a.mean_mpjpe_cm);
    }
    Ok(())
}

/// Noise is added with the same seeds as the denoising protocol, so the
/// written motions are the ones the report scores.
pub fn denoise_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let model = load_model(cfg)?;
    let idx = selected(cfg, &ds)?;
    let sigma = cfg.tasks.sigma_cm;
    let seed = if sigma.is_some() { cfg.require_seed()? } else { cfg.seed.unwrap_or(0) };
    let mut output = Output::new(&ds);
    for (k, &i) in idx.iter().enumerate() {
        let c = &ds.chunks[i];
        let t = ds.template(&c.template_ref).ok_or_else(|| CliError::Data(format!("chunk {i}: unknown template")))?;
        let input = match sigma {
            Some(s) => add_noise(&c.positions, s / 100.0, derive_seed(&[seed, 0, k as u64]))?,
            None => c.positions.clone(),
        };
        let seq = retarget(&model, &input, t, t, &RetargetParams::RAW)?;
        output.keep_template(&c.template_ref)?;
        output.push(c, seq, &c.template_ref);
    }
    let n = output.write(out)?;
    println!("denoised {n} chunks");
    if let Some(s) = sigma {
        emit(cfg, &eval_denoising(&model, &eval_items(&ds, &idx), &[s], seed)?, &out.join("report"))?;
    }
    Ok(())
}

/// Keeps a random joint subset per chunk (protocol seeds) and decodes on the
/// full template.
pub fn upsample_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let model = load_model(cfg)?;
    let idx = selected(cfg, &ds)?;
    let p = cfg.tasks.proportion;
    let mut output = Output::new(&ds);
    for (k, &i) in idx.iter().enumerate() {
        let c = &ds.chunks[i];
        let t = ds.template(&c.template_ref).ok_or_else(|| CliError::Data(format!("chunk {i}: unknown template")))?;
        let kept = draw_proportion_subset(t.topology(), p, derive_seed(&[seed, 0, k as u64]))?;
        let seq = retarget(&model, &c.positions.restrict(&kept)?, &t.restrict(&kept)?, t, &RetargetParams::RAW)?;
        output.keep_template(&c.template_ref)?;
        output.push(c, seq, &c.template_ref);
    }
    let n = output.write(out)?;
    println!("upsampled {n} chunks from proportion {p}");
    emit(cfg, &eval_upsampling(&model, &eval_items(&ds, &idx), &[p], seed)?, &out.join("report"))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.require_seed()?;
    let out = cfg.require_out()?;
    let ds = load_data(cfg)?;
    let model = load_model(cfg)?;
    let items = eval_items(&ds, &selected(cfg, &ds)?);
    for p in &cfg.eval.protocols {
        let report = match p.as_str() {
            "representation" => eval_representation(&model, &items)?,
            "denoising" => eval_denoising(&model, &items, &cfg.eval.sigmas_cm, seed)?,
            _ => eval_upsampling(&model, &items, &cfg.eval.proportions, seed)?,
        };
        emit(cfg, &report, out)?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct ReportMeta {
    axis: Option<String>,
    fingerprint: String,
}

/// Re-emits summaries and plots from per-item CSVs in `from`.
pub fn report(cfg: &RunConfig, from: &Path) -> Result<(), CliError> {
    let out = cfg.require_out()?;
    let mut csvs: Vec<PathBuf> = fs::read_dir(from)
        .map_err(|e| CliError::Data(format!("{}: {e}", from.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".csv") && !name.ends_with("_summary.csv")
        })
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(CliError::Data(format!("no report CSVs in {}", from.display())));
    }
    for path in csvs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let meta_path = from.join(format!("{stem}_meta.json"));
        let meta: ReportMeta = match fs::read_to_string(&meta_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?,
            Err(_) => ReportMeta { axis: None, fingerprint: String::new() },
        };
        let text = fs::read_to_string(&path)?;
        let report = EvalReport::from_csv(&text, meta.axis.as_deref(), meta.fingerprint)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        emit(cfg, &report, out)?;
    }
    Ok(())
}
