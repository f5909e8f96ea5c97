//! Experiment orchestration: base training, budgeted adaptation,
//! evaluation, checkpoints and result tables.
//!
//! Every random choice of a (method, seed) cell comes from a ChaCha8 stream
//! keyed by the seed, so a cell is reproducible in isolation and all methods
//! with the same seed see the same adaptation frames.

pub mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig, MetricsReport};
use crate::nn::{adam_step, AdamConfig, GradMap};
use crate::peft::{build_freeze_mask, count_params, init_method_params, FreezeMask, Method};
use crate::pipeline::{build_registry, build_targets, stage_of, AgentInput, DetectionTargets, ModelConfig, Pipeline};
use crate::scenes::{read_dataset, SceneSample};
use crate::{Registry, TensorF};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, read_meta, restore, save_checkpoint, sidecar_path, Checkpoint, CheckpointKind,
    CheckpointMeta,
};

pub const DEFAULT_BATCH_SIZE: usize = 2;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BASE_EPOCHS: usize = 30;
pub const DEFAULT_RATE: f64 = 0.1;

pub const TABLE_HEADER: &str = "method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds";

const STREAM_SELECT: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Optimisation settings shared by base training and adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_BASE_EPOCHS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_base_epochs() -> usize {
    DEFAULT_BASE_EPOCHS
}
fn default_rate() -> f64 {
    DEFAULT_RATE
}

/// One full benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_a: PathBuf,
    pub train_b: PathBuf,
    pub test_b: PathBuf,
    pub methods: Vec<Method>,
    #[serde(default = "default_rate")]
    pub rate: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_epochs")]
    pub base_epochs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
    /// Off by default so reruns are byte-identical; `seconds` is then 0.
    #[serde(default)]
    pub report_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        validate_rate(self.rate)?;
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.base_train().validate()
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.base_epochs,
            seed: self.base_seed,
        }
    }

    pub fn adapt_settings(&self, method: Method, seed: u64) -> AdaptSettings {
        AdaptSettings {
            method,
            rate: self.rate,
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }
}

fn validate_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("rate must lie in (0, 1], got {rate}")))
    }
}

/// `ceil(rate * n)`, ignoring round-off just above an integer.
pub fn budget(rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Indices of the budgeted frames: a seeded shuffle of `0..n`, then a prefix.
pub fn select_frames(n: usize, rate: f64, seed: u64) -> Result<Vec<usize>> {
    validate_rate(rate)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, STREAM_SELECT));
    idx.truncate(budget(rate, n));
    Ok(idx)
}

/// Fails unless every observation matches the model's input grid.
pub fn check_frames(model: &ModelConfig, frames: &[SceneSample], what: &str) -> Result<()> {
    let want = [model.in_channels, model.grid.rows, model.grid.cols];
    for (i, f) in frames.iter().enumerate() {
        if f.grids.is_empty() {
            return Err(Error::Geometry(format!("{what} frame {i} has no agents")));
        }
        if let Some(g) = f.grids.iter().find(|g| g.shape() != want) {
            return Err(Error::Geometry(format!("{what} frame {i} observation {:?} vs model input {want:?}", g.shape())));
        }
    }
    Ok(())
}

enum FrameInput {
    Observations(Vec<TensorF>),
    Features(TensorF),
}

/// A training frame with its targets and, for a frozen encoder, its features.
struct Prepared {
    input: FrameInput,
    targets: DetectionTargets<f64>,
}

impl Prepared {
    fn input(&self) -> AgentInput<'_, f64> {
        match &self.input {
            FrameInput::Observations(o) => AgentInput::Observations(o),
            FrameInput::Features(f) => AgentInput::Features(f),
        }
    }
}

fn prepare(pipe: &Pipeline<'_>, reg: &Registry, frames: &[&SceneSample]) -> Result<Vec<Prepared>> {
    let fg = pipe.config().feature_grid();
    let encoder_frozen = reg.trainable_names().all(|n| stage_of(n) > 0);
    frames
        .iter()
        .map(|f| {
            let input = if encoder_frozen {
                FrameInput::Features(pipe.encode_agents(reg, &f.grids)?.0)
            } else {
                FrameInput::Observations(f.grids.clone())
            };
            Ok(Prepared { input, targets: build_targets(&f.boxes, &fg) })
        })
        .collect()
}

/// Loss history of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    /// Mean per-frame loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Shuffled mini-batch Adam over `frames`.
///
/// The samples of a batch are differentiated concurrently, then their
/// gradients are summed in frame order and divided by the batch length.
fn run_epochs(
    pipe: &Pipeline<'_>,
    reg: &mut Registry,
    frames: &[Prepared],
    epochs: usize,
    batch: usize,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    let mut stats = TrainStats::default();
    if frames.is_empty() || reg.trainable_names().next().is_none() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let current: &Registry = reg;
            let results: Vec<Result<(f64, GradMap<f64>)>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        s.spawn(move || {
                            let p = &frames[i];
                            let (loss, g) = pipe.loss_and_grads(current, p.input(), &p.targets)?;
                            Ok((loss.total, g))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
            });
            let mut acc = GradMap::new();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss;
                acc.merge(&g)?;
            }
            acc.scale(1.0 / chunk.len() as f64);
            adam_step(reg, &acc, adam)?;
            stats.steps += 1;
        }
        stats.epoch_loss.push(epoch_loss / frames.len() as f64);
    }
    Ok(stats)
}

/// Trains every base parameter on `frames` from a fresh initialisation.
pub fn train_base(frames: &[SceneSample], cfg: &TrainConfig) -> Result<(Registry, TrainStats)> {
    cfg.validate()?;
    check_frames(&cfg.model, frames, "training")?;
    let mut reg = build_registry(&cfg.model, &Method::None, &mut stream(cfg.seed, STREAM_INIT))?;
    let all: Vec<String> = reg.names().map(str::to_string).collect();
    reg.set_trainable(all.iter().map(String::as_str))?;
    let pipe = Pipeline::base(&cfg.model)?;
    let refs: Vec<&SceneSample> = frames.iter().collect();
    let prepared = prepare(&pipe, &reg, &refs)?;
    let stats = run_epochs(&pipe, &mut reg, &prepared, cfg.epochs, cfg.batch_size, &cfg.optimizer, &mut stream(cfg.seed, STREAM_ORDER))?;
    reg.set_trainable([])?;
    Ok((reg, stats))
}

/// One adaptation cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptSettings {
    pub method: Method,
    pub rate: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl AdaptSettings {
    pub fn new(method: Method, rate: f64, seed: u64) -> Self {
        Self {
            method,
            rate,
            seed,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Result of [`adapt`].
#[derive(Clone, Debug)]
pub struct Adapted {
    pub registry: Registry,
    pub mask: FreezeMask,
    /// Indices into the training set that the optimizer saw.
    pub frames: Vec<usize>,
    pub stats: TrainStats,
    pub seconds: f64,
}

/// Adapts a trained base registry to `train` under the budget and method.
///
/// `none` performs no optimizer step; `scratch` discards the base values.
pub fn adapt(base: &Registry, model: &ModelConfig, train: &[SceneSample], s: &AdaptSettings) -> Result<Adapted> {
    let start = Instant::now();
    check_frames(model, train, "adaptation")?;
    if s.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let frames = select_frames(train.len(), s.rate, s.seed)?;
    let mut init = stream(s.seed, STREAM_INIT);
    let mut reg = match s.method {
        Method::Scratch => build_registry(model, &Method::Scratch, &mut init)?,
        m => {
            let mut reg = base.clone();
            for (_, e) in reg.iter_mut() {
                e.reset_optimizer();
            }
            init_method_params(&mut reg, model, &m, &mut init)?;
            reg
        }
    };
    let mask = build_freeze_mask(&reg, &s.method, model)?;
    mask.apply(&mut reg)?;

    let mut stats = TrainStats::default();
    if s.method.trains() {
        let pipe = Pipeline::new(model, &s.method)?;
        let chosen: Vec<&SceneSample> = frames.iter().map(|&i| &train[i]).collect();
        let prepared = prepare(&pipe, &reg, &chosen)?;
        stats = run_epochs(&pipe, &mut reg, &prepared, s.epochs, s.batch_size, &s.optimizer, &mut stream(s.seed, STREAM_ORDER))?;
    }
    let used = if s.method.trains() { frames } else { Vec::new() };
    Ok(Adapted { registry: reg, mask, frames: used, stats, seconds: start.elapsed().as_secs_f64() })
}

/// Evaluates an adapted registry and fills in the cell's bookkeeping.
pub fn evaluate_cell(
    model: &ModelConfig,
    method: &Method,
    seed: u64,
    reg: &Registry,
    mask: &FreezeMask,
    test: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let pipe = Pipeline::new(model, method)?;
    let mut report = evaluate_model(&pipe, reg, test, cfg)?;
    let count = count_params(reg, mask)?;
    report.method = method.to_string();
    report.seed = seed;
    report.params_trainable = count.trainable;
    report.params_total = count.total;
    Ok(report)
}

/// The results table as CSV text, rows in input order.
pub fn emit_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.4},{:.4},{:.4}",
            r.method,
            r.seed,
            r.params_trainable,
            r.params_total,
            r.ratio(),
            r.ap50,
            r.ap70,
            r.seconds
        )
        .expect("writing to a String");
    }
    out
}

/// Reads every `*.json` report in `dir`, ordered by file name.
pub fn read_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
}

/// Output locations of [`run_experiment`] inside the output directory.
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const REPORT_DIR: &str = "reports";
pub const DELTA_DIR: &str = "deltas";
pub const TABLE_FILE: &str = "results.csv";

pub fn cell_name(index: usize, method: &Method, seed: u64) -> String {
    format!("{index:03}_{method}_seed{seed}")
}

/// Loads the cached base model when present, otherwise trains and caches it.
fn base_model(cfg: &ExperimentConfig, train_a: &[SceneSample]) -> Result<Registry> {
    let path = cfg.out_dir.join(BASE_CHECKPOINT);
    if path.exists() {
        let ckpt = read_checkpoint(&path)?;
        if ckpt.config_hash != cfg.model.hash() {
            return Err(Error::Checkpoint(format!("cached {} was trained for a different model config", path.display())));
        }
        let mut reg = build_registry(&cfg.model, &Method::None, &mut stream(cfg.base_seed, STREAM_INIT))?;
        restore(&ckpt, &mut reg, &cfg.model)?;
        return Ok(reg);
    }
    let (reg, _) = train_base(train_a, &cfg.base_train())?;
    let meta = CheckpointMeta { kind: CheckpointKind::Full, model: cfg.model.clone(), method: None, seed: Some(cfg.base_seed) };
    save_checkpoint(&reg, CheckpointKind::Full, None, &meta, &path)?;
    Ok(reg)
}

/// Runs the whole benchmark and writes reports, deltas and the table.
///
/// All inputs, including a cached base checkpoint, are validated before
/// any training starts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let (train_a, _) = read_dataset(&cfg.train_a)?;
    let (train_b, _) = read_dataset(&cfg.train_b)?;
    let (test_b, _) = read_dataset(&cfg.test_b)?;
    check_frames(&cfg.model, &train_a, "train_a")?;
    check_frames(&cfg.model, &train_b, "train_b")?;
    check_frames(&cfg.model, &test_b, "test_b")?;

    fs::create_dir_all(cfg.out_dir.join(REPORT_DIR))?;
    fs::create_dir_all(cfg.out_dir.join(DELTA_DIR))?;
    let base = base_model(cfg, &train_a)?;

    let mut reports = Vec::new();
    let mut index = 0;
    for method in &cfg.methods {
        for &seed in &cfg.seeds {
            let adapted = adapt(&base, &cfg.model, &train_b, &cfg.adapt_settings(*method, seed))?;
            let mut report = evaluate_cell(&cfg.model, method, seed, &adapted.registry, &adapted.mask, &test_b, &cfg.eval)?;
            if cfg.report_wall_clock {
                report.seconds = adapted.seconds;
            }
            let name = cell_name(index, method, seed);
            fs::write(cfg.out_dir.join(REPORT_DIR).join(format!("{name}.json")), report.to_json() + "\n")?;
            if !adapted.mask.is_empty() {
                let meta = CheckpointMeta { kind: CheckpointKind::Delta, model: cfg.model.clone(), method: Some(*method), seed: Some(seed) };
                let path = cfg.out_dir.join(DELTA_DIR).join(format!("{name}.ckpt"));
                save_checkpoint(&adapted.registry, CheckpointKind::Delta, Some(&adapted.mask), &meta, &path)?;
            }
            reports.push(report);
            index += 1;
        }
    }
    fs::write(cfg.out_dir.join(TABLE_FILE), emit_table(&reports))?;
    Ok(reports)
}
