use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use copeft::eval::EvalConfig;
use copeft::harness::{
    adapt, emit_table, evaluate_cell, read_checkpoint, read_meta, read_reports, restore, run_experiment,
    save_checkpoint, train_base, AdaptSettings, CheckpointKind, CheckpointMeta, ExperimentConfig, TrainConfig,
};
use copeft::peft::{build_freeze_mask, count_params, init_method_params, FreezeMask, Method};
use copeft::pipeline::{build_registry, ModelConfig};
use copeft::scenes::{generate_dataset, read_dataset, write_dataset, DomainConfig};
use copeft::{Error, Registry, Result};

#[derive(Parser)]
#[command(name = "copeft", version, about = "Parameter-efficient adaptation of collaborative BEV detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Preset name (domain_a, domain_b) or a JSON domain file.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model and write a full checkpoint.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a base checkpoint and write a delta checkpoint.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = copeft::harness::DEFAULT_RATE)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = copeft::harness::DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a base checkpoint, optionally with a delta, and write a JSON report.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Needed only without a delta sidecar; defaults to `none`.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Collect JSON reports from a directory into a CSV table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable and total parameter counts as JSON.
    CountParams {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        method: Method,
    },
    /// Run a full experiment from a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let line = serde_json::to_string(&ErrorLine { error: kind, message: message.replace('\n', " ") })
        .expect("error line serializes");
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail("usage", first, 2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Base parameters from a full checkpoint, plus the parameters of `method`.
fn load_base(path: &Path, method: &Method) -> Result<(Registry, ModelConfig)> {
    let meta = read_meta(path)?;
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint(format!("{} is not a full checkpoint", path.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut reg = build_registry(&meta.model, &Method::None, &mut rng)?;
    restore(&ckpt, &mut reg, &meta.model)?;
    init_method_params(&mut reg, &meta.model, method, &mut rng)?;
    Ok((reg, meta.model))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { domain, count, seed, out } => {
            let cfg = DomainConfig { seed, ..DomainConfig::load(&domain)? };
            write_dataset(&generate_dataset(&cfg, count)?, &cfg, &out)
        }
        Command::TrainBase { data, config, out } => {
            let cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let (frames, _) = read_dataset(&data)?;
            let (reg, _) = train_base(&frames, &cfg)?;
            let meta = CheckpointMeta { kind: CheckpointKind::Full, model: cfg.model, method: None, seed: Some(cfg.seed) };
            save_checkpoint(&reg, CheckpointKind::Full, None, &meta, &out)
        }
        Command::Adapt { base, data, method, rate, seed, epochs, out } => {
            let (reg, model) = load_base(&base, &Method::None)?;
            let (frames, _) = read_dataset(&data)?;
            let settings = AdaptSettings { epochs, ..AdaptSettings::new(method, rate, seed) };
            let adapted = adapt(&reg, &model, &frames, &settings)?;
            let meta = CheckpointMeta { kind: CheckpointKind::Delta, model, method: Some(method), seed: Some(seed) };
            save_checkpoint(&adapted.registry, CheckpointKind::Delta, Some(&adapted.mask), &meta, &out)
        }
        Command::Eval { base, delta, data, method, report } => {
            let delta_meta = delta.as_deref().map(read_meta).transpose()?;
            let method = match (method, delta_meta.as_ref().and_then(|m| m.method)) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::Config(format!("--method {a} contradicts the delta's method {b}")));
                }
                (Some(m), _) | (None, Some(m)) => m,
                (None, None) => Method::None,
            };
            let (mut reg, model) = load_base(&base, &method)?;
            let mut mask = FreezeMask::default();
            let mut seed = 0;
            if let (Some(path), Some(meta)) = (&delta, &delta_meta) {
                let ckpt = read_checkpoint(path)?;
                if ckpt.kind != CheckpointKind::Delta {
                    return Err(Error::Checkpoint(format!("{} is not a delta checkpoint", path.display())));
                }
                restore(&ckpt, &mut reg, &model)?;
                mask = FreezeMask::from_names(ckpt.names().map(str::to_string).collect());
                seed = meta.seed.unwrap_or(0);
            }
            let (frames, _) = read_dataset(&data)?;
            let r = evaluate_cell(&model, &method, seed, &reg, &mask, &frames, &EvalConfig::default())?;
            fs::write(report, r.to_json() + "\n")?;
            Ok(())
        }
        Command::Report { input, out } => fs::write(out, emit_table(&read_reports(&input)?)).map_err(Error::from),
        Command::CountParams { base, method } => {
            let (reg, model) = load_base(&base, &method)?;
            let mask = build_freeze_mask(&reg, &method, &model)?;
            let c = count_params(&reg, &mask)?;
            #[derive(Serialize)]
            struct Counts {
                method: String,
                trainable: usize,
                total: usize,
                ratio: f64,
            }
            let line = Counts { method: method.to_string(), trainable: c.trainable, total: c.total, ratio: c.ratio };
            println!("{}", serde_json::to_string(&line)?);
            Ok(())
        }
        Command::Experiment { config } => {
            let cfg: ExperimentConfig = read_json(&config)?;
            run_experiment(&cfg)?;
            Ok(())
        }
    }
}
