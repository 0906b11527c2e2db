//! `skelfree` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 model or checkpoint error, 5 numeric failure (non-finite loss).

mod commands;
mod config;
mod error;
mod latent;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{env_config_file, resolve, Overrides, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "skelfree", version, about = "Skeleton-agnostic motion autoencoder")]
struct Cli {
    /// TOML config file (also SKELFREE_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue training from the checkpoint in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true)]
    device: Option<String>,
    /// Override any config field, e.g. `--set train.lr_max=2e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Data {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Select {
    /// `all`, `train` or `validation`.
    #[arg(long)]
    split: Option<String>,
    /// Chunk index; repeatable.
    #[arg(long = "chunk")]
    chunks: Vec<usize>,
}

#[derive(Args, Debug, Default)]
struct Ckpt {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert BVH clips into a chunked dataset.
    Prepare {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        holdout_topology: Option<String>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        /// Up axis of the input files (`z` or `y`).
        #[arg(long)]
        up_axis: Option<String>,
        /// Meters per input unit.
        #[arg(long)]
        unit_scale: Option<f64>,
    },
    /// Generate procedural motion as a dataset or BVH files.
    Synth {
        /// The twenty-chunk, two-topology training fixture.
        #[arg(long)]
        fixture: bool,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        format: Option<String>,
    },
    /// Train a model on the training split.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Continue training a checkpoint at a constant learning rate.
    Finetune {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Encode chunks into latent codes.
    Encode {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        select: Select,
    },
    /// Decode latent codes under a target template.
    Decode {
        #[arg(long)]
        latents: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        /// Dataset template id or built-in topology name.
        #[arg(long)]
        target: Option<String>,
    },
    /// Transfer chunks onto a target template.
    Retarget {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        select: Select,
        #[arg(long)]
        target: Option<String>,
        /// Single pass without windowing or trajectory handling.
        #[arg(long)]
        raw: bool,
    },
    /// Encode-decode chunks, optionally after adding Gaussian noise.
    Denoise {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        select: Select,
        /// Noise standard deviation in centimeters.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Reconstruct full skeletons from a random joint subset.
    Upsample {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        select: Select,
        #[arg(long)]
        proportion: Option<f64>,
    },
    /// Run evaluation protocols and write reports.
    Eval {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        select: Select,
        /// `representation`, `denoising` or `upsampling`; repeatable.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        proportions: Vec<f64>,
    },
    /// Rebuild summaries and plots from per-item report CSVs.
    Report {
        #[arg(long)]
        from: PathBuf,
        /// `csv` or `svg`; repeatable.
        #[arg(long = "format")]
        formats: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Finetune { .. } => "finetune",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Retarget { .. } => "retarget",
            Command::Denoise { .. } => "denoise",
            Command::Upsample { .. } => "upsample",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn set_common(o: &mut Overrides, data: Option<&Data>, ckpt: Option<&Ckpt>, select: Option<&Select>) {
    if let Some(d) = data {
        o.set_opt("data", d.data.as_deref().map(path_value));
    }
    if let Some(c) = ckpt {
        o.set_opt("checkpoint", c.checkpoint.as_deref().map(path_value));
    }
    if let Some(s) = select {
        o.set_opt("select.split", s.split.clone());
        if !s.chunks.is_empty() {
            o.set("select.chunks", s.chunks.iter().map(|&c| toml::Value::Integer(c as i64)).collect::<Vec<_>>());
        }
    }
}

fn floats(v: &[f64]) -> toml::Value {
    toml::Value::Array(v.iter().map(|&x| toml::Value::Float(x)).collect())
}

fn strings(v: &[String]) -> toml::Value {
    toml::Value::Array(v.iter().cloned().map(toml::Value::String).collect())
}

/// Flag-level overrides, applied above the config file.
fn overrides(cli: &Cli) -> Result<Overrides, CliError> {
    let mut o = Overrides::default();
    o.set_opt("seed", cli.seed.map(|s| s as i64));
    o.set_opt("out", cli.out.as_deref().map(path_value));
    o.set_opt("device", cli.device.clone());
    if cli.resume {
        o.set("resume", true);
    }
    match &cli.command {
        Command::Prepare { inputs, holdout_topology, validation_fraction, up_axis, unit_scale } => {
            if !inputs.is_empty() {
                o.set("inputs", toml::Value::Array(inputs.iter().map(|p| path_value(p)).collect()));
            }
            o.set_opt("prepare.holdout_topology", holdout_topology.clone());
            o.set_opt("prepare.validation_fraction", *validation_fraction);
            o.set_opt("prepare.up_axis", up_axis.clone());
            o.set_opt("prepare.unit_scale", *unit_scale);
        }
        Command::Synth { fixture, clips, duration, format } => {
            if *fixture {
                o.set("synth.fixture", true);
            }
            o.set_opt("synth.clips", clips.map(|c| c as i64));
            o.set_opt("synth.duration", *duration);
            o.set_opt("synth.format", format.clone());
        }
        Command::Train { data, iterations } => {
            set_common(&mut o, Some(data), None, None);
            o.set_opt("train.iterations", iterations.map(|i| i as i64));
        }
        Command::Finetune { data, ckpt, iterations } => {
            set_common(&mut o, Some(data), Some(ckpt), None);
            o.set_opt("train.iterations", iterations.map(|i| i as i64));
        }
        Command::Encode { data, ckpt, select } => set_common(&mut o, Some(data), Some(ckpt), Some(select)),
        Command::Decode { latents, data, ckpt, target } => {
            set_common(&mut o, Some(data), Some(ckpt), None);
            o.set_opt("latents", latents.as_deref().map(path_value));
            o.set_opt("target", target.clone());
        }
        Command::Retarget { data, ckpt, select, target, raw } => {
            set_common(&mut o, Some(data), Some(ckpt), Some(select));
            o.set_opt("target", target.clone());
            if *raw {
                o.set("tasks.windowed", false);
                o.set("tasks.restore_trajectory", false);
            }
        }
        Command::Denoise { data, ckpt, select, sigma } => {
            set_common(&mut o, Some(data), Some(ckpt), Some(select));
            o.set_opt("tasks.sigma_cm", *sigma);
        }
        Command::Upsample { data, ckpt, select, proportion } => {
            set_common(&mut o, Some(data), Some(ckpt), Some(select));
            o.set_opt("tasks.proportion", *proportion);
        }
        Command::Eval { data, ckpt, select, protocols, sigmas, proportions } => {
            set_common(&mut o, Some(data), Some(ckpt), Some(select));
            if !protocols.is_empty() {
                o.set("eval.protocols", strings(protocols));
            }
            if !sigmas.is_empty() {
                o.set("eval.sigmas_cm", floats(sigmas));
            }
            if !proportions.is_empty() {
                o.set("eval.proportions", floats(proportions));
            }
        }
        Command::Report { formats, .. } => {
            if !formats.is_empty() {
                o.set("eval.formats", strings(formats));
            }
        }
    }
    for s in &cli.set {
        o.parse_assignment(s)?;
    }
    Ok(o)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = cli.config.clone().or_else(env_config_file);
    let cfg: RunConfig = resolve(file.as_deref(), &overrides(cli)?)?;
    let name = cli.command.name();
    cfg.write_provenance(cfg.require_out()?, name)?;
    match &cli.command {
        Command::Prepare { .. } => commands::prepare(&cfg),
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Finetune { .. } => commands::finetune(&cfg),
        Command::Encode { .. } => commands::encode(&cfg),
        Command::Decode { .. } => commands::decode(&cfg),
        Command::Retarget { .. } => commands::retarget_cmd(&cfg),
        Command::Denoise { .. } => commands::denoise_cmd(&cfg),
        Command::Upsample { .. } => commands::upsample_cmd(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Report { from, .. } => commands::report(&cfg, from),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
