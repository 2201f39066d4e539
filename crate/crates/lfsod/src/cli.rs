//! The `lfsod` command line: `train`, `eval`, `predict`, `metrics`.
//!
//! Settings come from three layers, later layers winning: built-in defaults
//! for the chosen protocol, an optional `key=value` config file, then flags.
//! Every command is deterministic for a fixed seed and writes byte-stable
//! files; progress and summary lines go to stderr only.
//!
//! Seeding: the dataset stream uses the configured seed as-is, model
//! initialization uses a derived stream, so swapping one of them out does not
//! silently reshuffle the other.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::attention::BlockParams;
use crate::dataset::{self, DatasetError, DatasetManifest, LoadConfig, Sample, Split};
use crate::loss::hybrid_loss;
use crate::metrics::{self, aggregate_report, score_image, MetricsError};
use crate::network::{Ablation, CheckpointError, Model, ModelConfig};
use crate::tensor::{AdamState, GradientTape, TensorError, TensorId, UpsampleMode};

/// Steps averaged when judging a loss plateau.
const PLATEAU_WINDOW: usize = 50;
/// Minimum relative improvement between consecutive windows; below this the
/// learning rate is decayed.
const PLATEAU_MIN_REL: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    Io(io::Error),
    Dataset(DatasetError),
    Tensor(TensorError),
    Metrics(MetricsError),
    Checkpoint(CheckpointError),
    /// The config file could not be read.
    ConfigFile { path: PathBuf, detail: String },
    /// A config file line is not `key=value`.
    ConfigLine { line: usize, detail: String },
    UnknownKey(String),
    BadValue { key: String, detail: String },
    /// Training aborted because the loss left the reals.
    NonFiniteLoss { step: usize },
    /// Neither a dataset root nor a synthetic scene count was given.
    NoInput,
    /// Prediction and ground truth directories hold different id sets.
    IdMismatch { missing_preds: Vec<String>, missing_gts: Vec<String> },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Dataset(e) => write!(f, "{e}"),
            CliError::Tensor(e) => write!(f, "{e}"),
            CliError::Metrics(e) => write!(f, "{e}"),
            CliError::Checkpoint(e) => write!(f, "{e}"),
            CliError::ConfigFile { path, detail } => {
                write!(f, "config file {}: {detail}", path.display())
            }
            CliError::ConfigLine { line, detail } => {
                write!(f, "config line {line}: {detail}")
            }
            CliError::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            CliError::BadValue { key, detail } => write!(f, "bad value for {key}: {detail}"),
            CliError::NonFiniteLoss { step } => {
                write!(f, "loss became non-finite at step {step}")
            }
            CliError::NoInput => {
                write!(f, "no input data: pass --dataset-root or --synthetic N")
            }
            CliError::IdMismatch { missing_preds, missing_gts } => {
                write!(
                    f,
                    "prediction/gt id sets differ; missing predictions: {missing_preds:?}; missing gt: {missing_gts:?}"
                )
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Dataset(e)
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Tensor(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Metrics(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}

/// Optimizer presets. `toy` is sized for synthetic desk-scale runs; `full`
/// keeps the slow schedule meant for real datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Toy,
    Full,
}

impl Protocol {
    fn default_lr(self) -> f64 {
        match self {
            Protocol::Toy => 1e-3,
            Protocol::Full => 1e-5,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Toy => "toy",
            Protocol::Full => "full",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy" => Ok(Protocol::Toy),
            "full" => Ok(Protocol::Full),
            other => Err(format!("unknown protocol {other:?}, expected toy or full")),
        }
    }
}

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub split: Split,
    /// Use N generated scenes instead of reading a dataset.
    pub synthetic: Option<usize>,
    pub model: ModelConfig,
    pub protocol: Protocol,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub lr_decay: f64,
}

impl RunConfig {
    pub fn defaults(protocol: Protocol) -> RunConfig {
        RunConfig {
            dataset_root: None,
            split: Split::Train,
            synthetic: None,
            model: ModelConfig::default(),
            protocol,
            lr: protocol.default_lr(),
            batch_size: 2,
            steps: 500,
            seed: 0,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            lr_decay: 0.9,
        }
    }

    /// Defaults for the protocol picked by flag or file, then the config
    /// file, then flag overrides.
    pub fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
        let file_kvs = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                parse_kv_file(&text)?
            }
            None => Vec::new(),
        };
        let mut protocol = Protocol::Toy;
        for (k, v) in &file_kvs {
            if k == "protocol" {
                protocol = v
                    .parse()
                    .map_err(|detail| CliError::BadValue { key: k.clone(), detail })?;
            }
        }
        if let Some(p) = args.protocol {
            protocol = p;
        }
        let mut cfg = RunConfig::defaults(protocol);
        for (k, v) in &file_kvs {
            cfg.apply_kv(k, v)?;
        }
        cfg.apply_flags(args);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e: T::Err| CliError::BadValue {
                key: key.to_string(),
                detail: format!("{value:?}: {e}"),
            })
        }
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(value)),
            "split" => self.split = parse(key, value)?,
            "synthetic" => self.synthetic = Some(parse(key, value)?),
            "temporal_slices" => self.model.temporal_slices = parse(key, value)?,
            "base_channels" => self.model.base_channels = parse(key, value)?,
            "rfb_channels" => self.model.rfb_channels = parse(key, value)?,
            "input_size" => self.model.input_size = parse(key, value)?,
            "ablation" => self.model.ablation = parse(key, value)?,
            "upsample" => self.model.upsample = parse(key, value)?,
            "protocol" => self.protocol = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "lr_decay" => self.lr_decay = parse(key, value)?,
            other => return Err(CliError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    fn apply_flags(&mut self, a: &ConfigArgs) {
        if let Some(v) = &a.dataset_root {
            self.dataset_root = Some(v.clone());
        }
        if let Some(v) = a.split {
            self.split = v;
        }
        if let Some(v) = a.synthetic {
            self.synthetic = Some(v);
        }
        if let Some(v) = a.temporal_slices {
            self.model.temporal_slices = v;
        }
        if let Some(v) = a.base_channels {
            self.model.base_channels = v;
        }
        if let Some(v) = a.rfb_channels {
            self.model.rfb_channels = v;
        }
        if let Some(v) = a.input_size {
            self.model.input_size = v;
        }
        if let Some(v) = a.ablation {
            self.model.ablation = v;
        }
        if let Some(v) = a.upsample {
            self.model.upsample = v;
        }
        if let Some(v) = a.protocol {
            self.protocol = v;
        }
        if let Some(v) = a.lr {
            self.lr = v;
        }
        if let Some(v) = a.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = a.steps {
            self.steps = v;
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = &a.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        if let Some(v) = &a.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = a.lr_decay {
            self.lr_decay = v;
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CliError::BadValue { key: "lr".into(), detail: format!("{}", self.lr) });
        }
        if self.batch_size == 0 {
            return Err(CliError::BadValue { key: "batch_size".into(), detail: "0".into() });
        }
        if self.steps == 0 {
            return Err(CliError::BadValue { key: "steps".into(), detail: "0".into() });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CliError::BadValue {
                key: "lr_decay".into(),
                detail: format!("{} not in (0, 1]", self.lr_decay),
            });
        }
        if self.synthetic == Some(0) {
            return Err(CliError::BadValue {
                key: "synthetic".into(),
                detail: "need at least one scene".into(),
            });
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }
}

/// `key=value` per line, `#` comments, blank lines ignored.
fn parse_kv_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut kvs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::ConfigLine {
            line: i + 1,
            detail: format!("expected key=value, got {line:?}"),
        })?;
        kvs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(kvs)
}

#[derive(Parser, Debug)]
#[command(name = "lfsod", about = "Light-field salient object detection", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes a checkpoint and a per-step loss CSV
    Train(ConfigArgs),
    /// Score a checkpoint on a dataset; writes report and curve files
    Eval(ConfigArgs),
    /// Write one 8-bit saliency PNG per sample
    Predict(ConfigArgs),
    /// Score saved prediction maps against ground truth masks
    Metrics(MetricsArgs),
}

/// Flags shared by train / eval / predict. Anything not given falls back to
/// the config file and then the protocol defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Plain-text key=value settings file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding aif/, fs/, gt/
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    /// Dataset split, train or test
    #[arg(long)]
    pub split: Option<Split>,
    /// Use N generated synthetic scenes instead of a dataset
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Pipeline variant: B, ME0, ME, SA1, SA2, PF1, PF2 or FULL
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Square input resolution, a multiple of 32
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Focal stack depth T
    #[arg(long)]
    pub temporal_slices: Option<usize>,
    /// Encoder stem width
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Receptive-field block output width
    #[arg(long)]
    pub rfb_channels: Option<usize>,
    /// Upsampling mode, nearest or bilinear
    #[arg(long)]
    pub upsample: Option<UpsampleMode>,
    /// Optimizer preset, toy or full
    #[arg(long)]
    pub protocol: Option<Protocol>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; defaults to <out-dir>/model.ckpt
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Learning rate multiplier applied on a loss plateau
    #[arg(long)]
    pub lr_decay: Option<f64>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory of prediction PNGs, one <id>.png per image
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of ground truth PNGs with matching ids
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Where report.csv and curves/ are written
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&RunConfig::resolve(&a)?),
        Command::Eval(a) => cmd_eval(&RunConfig::resolve(&a)?),
        Command::Predict(a) => cmd_predict(&RunConfig::resolve(&a)?),
        Command::Metrics(a) => cmd_metrics(&a.pred_dir, &a.gt_dir, &a.out_dir),
    }
}

/// Model init gets its own seed stream so changing the data seed alone does
/// not move the weights.
fn model_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

fn load_dataset_for(cfg: &RunConfig, lc: LoadConfig) -> Result<Vec<Sample>, CliError> {
    if let Some(n) = cfg.synthetic {
        Ok(dataset::generate_synthetic(cfg.seed, n, lc)?)
    } else if let Some(root) = &cfg.dataset_root {
        let manifest = DatasetManifest::discover(root, cfg.split)?;
        Ok(dataset::load_all(&manifest, lc)?)
    } else {
        Err(CliError::NoInput)
    }
}

/// Samples visited round-robin in manifest order: step s covers global
/// positions s*batch .. s*batch+batch, wrapping over the dataset.
pub fn batch_indices(step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch).map(|j| (step * batch + j) % n).collect()
}

/// True when the mean loss over the last `window` steps failed to improve on
/// the window before it by at least `min_rel`, relatively.
pub fn plateaued(history: &[f64], window: usize, min_rel: f64) -> bool {
    if history.len() < 2 * window {
        return false;
    }
    let recent = &history[history.len() - window..];
    let earlier = &history[history.len() - 2 * window..history.len() - window];
    let m_recent: f64 = recent.iter().sum::<f64>() / window as f64;
    let m_earlier: f64 = earlier.iter().sum::<f64>() / window as f64;
    (m_earlier - m_recent) / f64::max(m_earlier.abs(), 1e-12) < min_rel
}

/// One loss CSV row: batch means of the hybrid terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub iou: f64,
    pub em: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub final_lr: f64,
}

/// `step,loss,bce,iou,em` with shortest-round-trip float formatting, which is
/// deterministic and parses back exactly.
pub fn render_loss_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from("step,loss,bce,iou,em\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.bce, r.iou, r.em));
    }
    out
}

/// Adam over the summed per-head hybrid loss, batch means logged per step.
/// The learning rate decays by `cfg.lr_decay` whenever disjoint
/// 50-step loss windows stop improving.
pub fn train_model(cfg: &RunConfig, model: &mut Model, samples: &[Sample]) -> Result<TrainLog, CliError> {
    assert!(!samples.is_empty(), "caller guarantees at least one sample");
    let mut states: Vec<AdamState> =
        model.params.iter().map(|(_, t)| AdamState::new(t.numel())).collect();
    let mut lr = cfg.lr;
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_indices(step, cfg.batch_size, samples.len());
        let mut tape = GradientTape::new();
        let bp = BlockParams::bind(&mut tape, &model.params, true);
        let mut total: Option<TensorId> = None;
        let (mut bce, mut iou, mut em) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let s = &samples[i];
            let aif = tape.constant(s.aif.clone());
            let stack = tape.constant(s.focal_stack.clone());
            let pred = model.forward(&mut tape, &bp, aif, stack)?;
            let gt = tape.constant(s.gt_tensor());
            let breakdown = hybrid_loss(&mut tape, &pred.heads(), gt)?;
            bce += breakdown.bce;
            iou += breakdown.iou;
            em += breakdown.em;
            total = Some(match total {
                None => breakdown.total_id,
                Some(acc) => tape.add(acc, breakdown.total_id)?,
            });
        }
        let k = idx.len() as f64;
        let batch_loss = tape.scale(total.expect("batch not empty"), 1.0 / k)?;
        let loss = tape.value(batch_loss).data[0];
        if !loss.is_finite() {
            return Err(CliError::NonFiniteLoss { step });
        }
        tape.backward(batch_loss)?;
        let grads: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|(name, _)| tape.grad(bp.id(name)).expect("trainable param").to_vec())
            .collect();
        for (((_, t), st), g) in model.params.iter_mut().zip(&mut states).zip(&grads) {
            st.step(&mut t.data, g, lr)?;
        }
        rows.push(TrainRow { step, loss, bce: bce / k, iou: iou / k, em: em / k });
        history.push(loss);
        if (step + 1) % PLATEAU_WINDOW == 0 && plateaued(&history, PLATEAU_WINDOW, PLATEAU_MIN_REL)
        {
            lr *= cfg.lr_decay;
        }
    }
    Ok(TrainLog { rows, final_lr: lr })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let samples = load_dataset_for(cfg, LoadConfig::from(&cfg.model))?;
    let mut model = Model::new(cfg.model, model_seed(cfg.seed))?;
    let log = train_model(cfg, &mut model, &samples)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("loss.csv"), render_loss_csv(&log.rows))?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    model.save(&ckpt)?;
    let first = log.rows.first().expect("steps >= 1").loss;
    let last = log.rows.last().expect("steps >= 1").loss;
    eprintln!(
        "trained {} steps on {} samples, loss {first:.6} -> {last:.6}, wrote {}",
        log.rows.len(),
        samples.len(),
        ckpt.display()
    );
    Ok(())
}

/// Loads the checkpoint named by the config, erroring up front with the path
/// when it does not exist.
fn load_checkpoint(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Dataset(DatasetError::MissingFile(path)));
    }
    Ok(Model::load(&path)?)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_checkpoint(cfg)?;
    // resize target and stack depth come from the checkpoint, not the flags
    let samples = load_dataset_for(cfg, LoadConfig::from(&model.config))?;
    let curves_dir = cfg.out_dir.join("curves");
    fs::create_dir_all(&curves_dir)?;
    let mut scored = Vec::with_capacity(samples.len());
    for s in &samples {
        let p3 = model.infer(&s.aif, &s.focal_stack)?;
        let p = dataset::saliency_from_tensor(&p3)?;
        let scores = score_image(&s.id, &p, &s.gt)?;
        metrics::write_curves(&scores.curves, &curves_dir.join(format!("{}.csv", s.id)))?;
        scored.push(scores);
    }
    let report = aggregate_report(scored)?;
    metrics::write_report(&report, &cfg.out_dir.join("report.csv"))?;
    metrics::write_curves(&report.mean_curves, &cfg.out_dir.join("curves_mean.csv"))?;
    eprintln!(
        "eval {} images: MAE {:.4}, F_adp {:.4}, S {:.4}, E_adp {:.4}",
        report.images.len(),
        report.mean_mae,
        report.mean_f,
        report.mean_s,
        report.mean_e
    );
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_checkpoint(cfg)?;
    let samples = load_dataset_for(cfg, LoadConfig::from(&model.config))?;
    fs::create_dir_all(&cfg.out_dir)?;
    for s in &samples {
        let p3 = model.infer(&s.aif, &s.focal_stack)?;
        let p = dataset::saliency_from_tensor(&p3)?;
        dataset::write_saliency_map(&p, &cfg.out_dir.join(format!("{}.png", s.id)))?;
    }
    eprintln!("wrote {} saliency maps to {}", samples.len(), cfg.out_dir.display());
    Ok(())
}

/// Sorted PNG stems in a directory.
fn png_ids(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Dataset(DatasetError::NoSamples(dir.to_path_buf())));
    }
    Ok(ids)
}

/// Scores a directory of saved maps against ground truth masks, no model
/// involved. Same aggregation code path as `eval`.
pub fn cmd_metrics(pred_dir: &Path, gt_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    let preds = png_ids(pred_dir)?;
    let gts = png_ids(gt_dir)?;
    let pred_set: HashSet<&str> = preds.iter().map(String::as_str).collect();
    let gt_set: HashSet<&str> = gts.iter().map(String::as_str).collect();
    let missing_preds: Vec<String> =
        gts.iter().filter(|i| !pred_set.contains(i.as_str())).cloned().collect();
    let missing_gts: Vec<String> =
        preds.iter().filter(|i| !gt_set.contains(i.as_str())).cloned().collect();
    if !missing_preds.is_empty() || !missing_gts.is_empty() {
        return Err(CliError::IdMismatch { missing_preds, missing_gts });
    }
    let curves_dir = out_dir.join("curves");
    fs::create_dir_all(&curves_dir)?;
    let mut scored = Vec::with_capacity(preds.len());
    for id in &preds {
        let p = dataset::read_saliency_map(&pred_dir.join(format!("{id}.png")))?;
        let g = dataset::read_gt_mask(&gt_dir.join(format!("{id}.png")))?;
        let scores = score_image(id, &p, &g)?;
        metrics::write_curves(&scores.curves, &curves_dir.join(format!("{id}.csv")))?;
        scored.push(scores);
    }
    let report = aggregate_report(scored)?;
    metrics::write_report(&report, &out_dir.join("report.csv"))?;
    metrics::write_curves(&report.mean_curves, &out_dir.join("curves_mean.csv"))?;
    eprintln!(
        "scored {} images: MAE {:.4}, F_adp {:.4}, S {:.4}, E_adp {:.4}",
        report.images.len(),
        report.mean_mae,
        report.mean_f,
        report.mean_s,
        report.mean_e
    );
    Ok(())
}
