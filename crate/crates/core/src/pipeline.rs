//! End-to-end operations behind the command-line tool: supernet
//! training, evolutionary search, candidate evaluation, the offline
//! energy audit, and report generation.
//!
//! Every operation validates its full configuration before any compute
//! starts, and every operation is deterministic under a fixed seed and
//! fixed inputs. A lock file guards the checkpoint directory against
//! concurrent writers.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_space, load_checkpoint, save_checkpoint, MANIFEST_FILE};
use crate::data::{batch_indices_sequential, load_cifar10_bin, load_idx, synthetic_patterns_with_sigma, Dataset, Split};
use crate::energy::{flops_catalog, model_energy, read_fr_trace, EnergyReport, LayerKind};
use crate::error::{Error, Result};
use crate::evolution::{
    evolve, kendall_tau, pareto_front, random_search, read_records_jsonl, EvoConfig, FitnessRecord,
};
use crate::model::{Supernet, SupernetConfig};
use crate::rng::{mix, Rng};
use crate::space::{self, ArchSpec, Candidate, FixedBackbone, SearchSpace, SpaceKind};
use crate::tensor::Tensor;
use crate::train::{evaluate, recalibrate_bn, train_epoch, AdamW, EvalResult, TrainConfig};

/// How many leading training batches feed BN recalibration before an
/// inherited-weight evaluation.
pub const CALIBRATION_BATCHES: usize = 20;

const LOCK_FILE: &str = "lock";
const LOSS_HISTORY_FILE: &str = "loss_history.csv";
const INIT_STREAM: u64 = 0x0001_1217;

// ---- Configuration ----

/// Dataset selection, tagged by `kind` in the JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Deterministic class-prototype images with Gaussian pixel noise.
    Synthetic {
        classes: usize,
        size: usize,
        per_class: usize,
        #[serde(default = "default_sigma")]
        sigma: f32,
    },
    /// CIFAR-10 binary batches under `dir`.
    Cifar10 { dir: PathBuf },
    /// IDX image/label file pairs (big-endian, magic-prefixed).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

fn default_sigma() -> f32 {
    0.1
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Synthetic { classes, size, per_class, sigma } => {
                if *classes < 2 {
                    return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {classes}")));
                }
                if *size == 0 || size % 4 != 0 {
                    return Err(Error::Config(format!(
                        "synthetic image size {size} must be a positive multiple of 4"
                    )));
                }
                if *per_class == 0 {
                    return Err(Error::Config("synthetic per_class must be >= 1".into()));
                }
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::Config(format!("synthetic sigma {sigma} must be finite and >= 0")));
                }
                Ok(())
            }
            DataConfig::Cifar10 { dir } => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("cifar10 dir {} does not exist", dir.display())));
                }
                Ok(())
            }
            DataConfig::Idx { train_images, train_labels, val_images, val_labels } => {
                for p in [train_images, train_labels, val_images, val_labels] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("idx file {} does not exist", p.display())));
                    }
                }
                Ok(())
            }
        }
    }

    /// Load one split. `seed` only matters for synthetic data, where it
    /// drives the noise (with a per-split stream, so train and val never
    /// share samples).
    pub fn load(&self, seed: u64, split: Split) -> Result<Dataset> {
        match self {
            DataConfig::Synthetic { classes, size, per_class, sigma } => {
                synthetic_patterns_with_sigma(seed, *classes, *size, *per_class, *sigma, split)
            }
            DataConfig::Cifar10 { dir } => load_cifar10_bin(dir, split),
            DataConfig::Idx { train_images, train_labels, val_images, val_labels } => match split {
                Split::Train => load_idx(train_images, train_labels, split),
                Split::Val | Split::Test => load_idx(val_images, val_labels, split),
            },
        }
    }
}

/// Full run configuration: JSON file with this exact schema, unknown
/// keys rejected. Command-line flags override individual fields after
/// parsing.
///
/// ```json
/// {
///   "space": "s_s",
///   "backbone": null,
///   "data": { "kind": "synthetic", "classes": 3, "size": 16, "per_class": 50, "sigma": 0.1 },
///   "train": { "epochs": 200, "batch_size": 64, "learning_rate": 0.001, "weight_decay": 0.01, "seed": 0 },
///   "evo": { "population_size": 50, "generations": 20, "parent_count": 10,
///            "mutation_prob": 0.2, "crossover_prob": 0.5, "alpha": 0.5, "seed": 0,
///            "total_sample_budget": null, "elitist": true },
///   "checkpoint_dir": "ckpt",
///   "results_path": "results.jsonl",
///   "report_dir": "report",
///   "seed": 0
/// }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceKind,
    /// Fixed architecture for the SNN-only space; defaults to the
    /// 4-384 backbone when absent. Must be null for transformer spaces.
    #[serde(default)]
    pub backbone: Option<FixedBackbone>,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evo: EvoConfig,
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_results_path")]
    pub results_path: PathBuf,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
    /// Master seed for data generation and weight init. Distinct from
    /// the training and search seeds so stages can be varied separately;
    /// a command-line `--seed` sets all three at once.
    #[serde(default)]
    pub seed: u64,
}

fn default_results_path() -> PathBuf {
    PathBuf::from("results.jsonl")
}

fn default_report_dir() -> PathBuf {
    PathBuf::from("report")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Point the training, search, and data seeds at one value.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.evo.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.space != SpaceKind::SS && self.backbone.is_some() {
            return Err(Error::Config(format!(
                "space {} searches the architecture itself and takes no fixed backbone",
                self.space
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        self.evo.validate()?;
        if let Some(b) = &self.backbone {
            if b.depth == 0 || b.embed_dim == 0 || b.head_num == 0 {
                return Err(Error::Config("degenerate backbone dimensions".into()));
            }
        }
        Ok(())
    }

    /// The backbone actually used: the configured one, or the 4-384
    /// default for the SNN-only space, or none for transformer spaces.
    pub fn effective_backbone(&self) -> Option<FixedBackbone> {
        match self.space {
            SpaceKind::SS => Some(self.backbone.clone().unwrap_or_else(FixedBackbone::spikformer_4_384)),
            _ => None,
        }
    }
}

// ---- Checkpoint-directory lock ----

/// Exclusive advisory lock on a checkpoint directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Take the writer lock for `dir`, creating the directory if needed.
/// Fails if another process already holds it.
pub fn lock_dir(dir: &Path) -> Result<DirLock> {
    fs::create_dir_all(dir)?;
    let path = dir.join(LOCK_FILE);
    match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(DirLock { path })
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
            "checkpoint directory {} is locked by another process (remove {} if stale)",
            dir.display(),
            path.display()
        ))),
        Err(e) => Err(Error::Io(e)),
    }
}

// ---- Shared helpers ----

fn supernet_config_for(
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
    data: &Dataset,
) -> Result<SupernetConfig> {
    let shape = data.images.shape().to_vec();
    let (in_channels, hw) = (shape[1], (shape[2], shape[3]));
    match backbone {
        Some(b) => SupernetConfig::for_backbone(b, in_channels, data.num_classes, hw),
        None => SupernetConfig::for_space(space, in_channels, data.num_classes, hw),
    }
}

fn calibration_batches(data: &Dataset, batch_size: usize) -> Vec<Tensor> {
    batch_indices_sequential(data.len(), batch_size.max(1))
        .into_iter()
        .take(CALIBRATION_BATCHES)
        .map(|idx| data.gather(&idx).0)
        .collect()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

// ---- cmd_train ----

/// Train the supernet, checkpointing after every epoch. Resumes from an
/// existing checkpoint in the directory; a resumed run is bit-identical
/// to an uninterrupted one. Also maintains `loss_history.csv` next to
/// the checkpoint.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<f32>> {
    config.validate()?;
    let _lock = lock_dir(&config.checkpoint_dir)?;
    let space = SearchSpace::from_kind(config.space);
    let backbone = config.effective_backbone();
    let data = config.data.load(config.seed, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let net_config = supernet_config_for(&space, backbone.as_ref(), &data)?;

    let (mut net, mut opt, start_epoch, mut history) =
        if config.checkpoint_dir.join(MANIFEST_FILE).exists() {
            let loaded = load_checkpoint(&config.checkpoint_dir)?;
            check_space(&loaded.manifest, &space, backbone.as_ref())?;
            if loaded.manifest.train != config.train {
                return Err(Error::Config(
                    "checkpoint was written with a different training config; \
                     resuming would not reproduce a single uninterrupted run"
                        .into(),
                ));
            }
            if loaded.manifest.supernet != net_config {
                return Err(Error::Config(
                    "checkpoint supernet dimensions do not match the configured dataset".into(),
                ));
            }
            let opt = loaded.optimizer.unwrap_or_else(|| {
                AdamW::new(&loaded.net.params, config.train.learning_rate, config.train.weight_decay)
            });
            let epoch = loaded.manifest.epoch;
            let history = read_loss_history(&config.checkpoint_dir.join(LOSS_HISTORY_FILE), epoch)?;
            (loaded.net, opt, epoch, history)
        } else {
            let mut rng = Rng::new(mix(config.seed, INIT_STREAM));
            let net = Supernet::new(net_config, &mut rng)?;
            let opt = AdamW::new(&net.params, config.train.learning_rate, config.train.weight_decay);
            (net, opt, 0, Vec::new())
        };

    for epoch in start_epoch..config.train.epochs {
        let loss = train_epoch(&mut net, &mut opt, &data, &space, backbone.as_ref(), &config.train, epoch)?;
        history.push(loss);
        save_checkpoint(
            &config.checkpoint_dir,
            &net,
            Some(&opt),
            &config.train,
            config.space,
            backbone.as_ref(),
            epoch + 1,
        )?;
        write_loss_history(&config.checkpoint_dir.join(LOSS_HISTORY_FILE), &history)?;
    }
    Ok(history)
}

fn write_loss_history(path: &Path, history: &[f32]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        writeln!(out, "{epoch},{loss}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_loss_history(path: &Path, epochs: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut history = Vec::new();
    for line in text.lines().skip(1) {
        let (_, loss) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("malformed loss history line '{line}'")))?;
        history.push(
            loss.parse::<f32>()
                .map_err(|_| Error::Data(format!("malformed loss value '{loss}'")))?,
        );
    }
    history.truncate(epochs);
    Ok(history)
}

// ---- cmd_search ----

pub struct SearchOutcome {
    /// Records produced by this run, in evaluation order.
    pub records: Vec<FitnessRecord>,
    /// Pareto front of this run's records.
    pub front: Vec<FitnessRecord>,
    pub results_path: PathBuf,
    pub front_csv_path: PathBuf,
}

/// Run the evolutionary search (or, with `baseline`, pure random
/// sampling at the same budget) over inherited supernet weights.
/// Appends the fitness records to the results JSONL and writes the
/// Pareto front as CSV into the report directory.
pub fn cmd_search(config: &RunConfig, baseline: bool) -> Result<SearchOutcome> {
    config.validate()?;
    let space = SearchSpace::from_kind(config.space);
    let backbone = config.effective_backbone();
    let loaded = load_checkpoint(&config.checkpoint_dir)?;
    check_space(&loaded.manifest, &space, backbone.as_ref())?;

    let train_data = config.data.load(config.seed, Split::Train)?;
    let val_data = config.data.load(config.seed, Split::Val)?;
    if val_data.is_empty() {
        return Err(Error::Data("validation dataset is empty".into()));
    }
    let batches = calibration_batches(&train_data, config.train.batch_size);
    let mut net = loaded.net;
    let batch_size = config.train.batch_size;

    // Mean firing rate per candidate, kept for the front CSV.
    let mut details: HashMap<String, (f64, f64, f64)> = HashMap::new();
    let mut evaluator = |c: &Candidate| -> Result<(f64, f64)> {
        let result = evaluate_calibrated(&mut net, c, &space, backbone.as_ref(), &batches, &val_data, batch_size)?;
        details.insert(c.key(), (mean_fr(&result), result.energy_joules, result.accuracy));
        Ok((result.accuracy, result.energy_joules))
    };

    let records = if baseline {
        let budget = config
            .evo
            .total_sample_budget
            .unwrap_or(config.evo.population_size * config.evo.generations);
        random_search(&space, &mut evaluator, budget, config.evo.alpha, config.evo.seed)?
    } else {
        evolve(&space, &mut evaluator, &config.evo)?.records
    };

    create_parent(&config.results_path)?;
    append_records_jsonl(&config.results_path, &records)?;

    let front = pareto_front(&records);
    fs::create_dir_all(&config.report_dir)?;
    let front_csv_path = config.report_dir.join("front.csv");
    let mut csv = String::from("candidate,fr,energy_joules,accuracy\n");
    for r in &front {
        let key = r.candidate.key();
        let (fr, _, _) = details
            .get(&key)
            .copied()
            .ok_or_else(|| Error::Data(format!("no evaluation detail for {key}")))?;
        writeln!(
            csv,
            "{},{},{:e},{}",
            csv_quote(&r.candidate.to_string()),
            fr,
            r.raw_energy,
            r.raw_accuracy
        )
        .unwrap();
    }
    fs::write(&front_csv_path, csv)?;

    Ok(SearchOutcome { records, front, results_path: config.results_path.clone(), front_csv_path })
}

fn append_records_jsonl(path: &Path, records: &[FitnessRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(format!("encoding record: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

fn mean_fr(result: &EvalResult) -> f64 {
    if result.fr_trace.is_empty() {
        return 0.0;
    }
    result.fr_trace.iter().map(|e| e.fr).sum::<f64>() / result.fr_trace.len() as f64
}

fn evaluate_calibrated(
    net: &mut Supernet,
    candidate: &Candidate,
    space: &SearchSpace,
    backbone: Option<&FixedBackbone>,
    batches: &[Tensor],
    val_data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult> {
    let spec = crate::model::build_subnet(net, candidate, space, backbone)?;
    recalibrate_bn(net, &spec, batches)?;
    evaluate(net, candidate, space, backbone, val_data, batch_size)
}

// ---- cmd_evaluate ----

/// BN-recalibrated inherited-weight evaluation of a single candidate
/// string against the validation split.
pub fn cmd_evaluate(config: &RunConfig, candidate_str: &str) -> Result<EvalResult> {
    config.validate()?;
    let candidate: Candidate = candidate_str.parse()?;
    let space = SearchSpace::from_kind(config.space);
    let violations = space::validate(&candidate, &space);
    if !violations.is_empty() {
        return Err(Error::Config(format!("invalid candidate: {}", violations.join("; "))));
    }
    let backbone = config.effective_backbone();
    let loaded = load_checkpoint(&config.checkpoint_dir)?;
    check_space(&loaded.manifest, &space, backbone.as_ref())?;
    let train_data = config.data.load(config.seed, Split::Train)?;
    let val_data = config.data.load(config.seed, Split::Val)?;
    let batches = calibration_batches(&train_data, config.train.batch_size);
    let mut net = loaded.net;
    evaluate_calibrated(
        &mut net,
        &candidate,
        &space,
        backbone.as_ref(),
        &batches,
        &val_data,
        config.train.batch_size,
    )
}

// ---- cmd_energy ----

/// Shapes assumed by the offline energy audit (CIFAR-scale input).
pub const AUDIT_INPUT_HW: (usize, usize) = (32, 32);
pub const AUDIT_IN_CHANNELS: usize = 3;
pub const AUDIT_NUM_CLASSES: usize = 10;

/// Offline energy audit: bill an architecture described by a candidate
/// string against a measured firing-rate trace, without running the
/// model. The trace must cover every spiking layer exactly once, with
/// no extra rows.
pub fn cmd_energy(arch: &str, trace_path: &Path, time_step: usize) -> Result<EnergyReport> {
    let candidate: Candidate = arch.parse()?;
    if !(2..=4).contains(&time_step) {
        return Err(Error::Config(format!(
            "time_step {time_step} outside the searchable grid 2..4"
        )));
    }
    let backbone = match candidate {
        Candidate::Snn(_) => Some(FixedBackbone::spikformer_4_384()),
        Candidate::Arch(_) => None,
    };
    let spec = ArchSpec::resolve(&candidate, backbone.as_ref())?;
    let catalog = flops_catalog(&spec, AUDIT_INPUT_HW, AUDIT_IN_CHANNELS, AUDIT_NUM_CLASSES)?;
    let trace = read_fr_trace(trace_path)?;

    let expected: HashSet<&str> = catalog
        .iter()
        .filter(|e| e.kind != LayerKind::Ann)
        .map(|e| e.layer_id.as_str())
        .collect();
    let mut seen: HashSet<&str> = HashSet::new();
    for entry in &trace {
        if !expected.contains(entry.layer_id.as_str()) {
            return Err(Error::Data(format!(
                "fr trace has a row for unknown layer '{}'",
                entry.layer_id
            )));
        }
        if !seen.insert(entry.layer_id.as_str()) {
            return Err(Error::Data(format!(
                "fr trace lists layer '{}' more than once",
                entry.layer_id
            )));
        }
    }
    model_energy(&catalog, &trace, time_step)
}

// ---- cmd_report ----

pub struct ReportSummary {
    pub record_count: usize,
    /// Kendall tau between accuracy and energy over all records.
    pub tau: f64,
    pub front: Vec<FitnessRecord>,
    pub svg_path: PathBuf,
    pub front_csv_path: PathBuf,
}

/// Read a results JSONL and emit a scatter SVG (energy vs accuracy,
/// Pareto polyline, top-20%-accuracy subset highlighted), the Pareto
/// front as CSV, and the Kendall tau between accuracy and energy.
pub fn cmd_report(results_path: &Path, report_dir: &Path) -> Result<ReportSummary> {
    let records = read_records_jsonl(results_path)?;
    if records.len() < 2 {
        return Err(Error::Data(format!(
            "report needs at least 2 records, got {}",
            records.len()
        )));
    }
    let accs: Vec<f64> = records.iter().map(|r| r.raw_accuracy).collect();
    let energies: Vec<f64> = records.iter().map(|r| r.raw_energy).collect();
    let tau = kendall_tau(&accs, &energies)?;
    let front = pareto_front(&records);

    fs::create_dir_all(report_dir)?;
    let svg_path = report_dir.join("scatter.svg");
    fs::write(&svg_path, render_scatter(&records, &front))?;

    let front_csv_path = report_dir.join("front.csv");
    let mut csv = String::from("candidate,energy_joules,accuracy,fitness\n");
    for r in &front {
        writeln!(csv, "{},{:e},{},{}", csv_quote(&r.candidate.to_string()), r.raw_energy, r.raw_accuracy, r.fitness)
            .unwrap();
    }
    fs::write(&front_csv_path, csv)?;

    Ok(ReportSummary { record_count: records.len(), tau, front, svg_path, front_csv_path })
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 50.0;

struct AxisMap {
    min: f64,
    span: f64,
    lo_px: f64,
    span_px: f64,
}

impl AxisMap {
    fn new(values: &[f64], lo_px: f64, hi_px: f64) -> AxisMap {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if max > min { max - min } else { 1.0 };
        // Degenerate ranges center the points instead of dividing by zero.
        let min = if max > min { min } else { min - 0.5 };
        AxisMap { min, span, lo_px, span_px: hi_px - lo_px }
    }

    fn px(&self, v: f64) -> f64 {
        self.lo_px + (v - self.min) / self.span * self.span_px
    }
}

/// Scatter plot of all records: energy on x, accuracy on y, one circle
/// per record, the Pareto front as a polyline, and the highest-20%
/// accuracy subset in a highlight color.
pub fn render_scatter(records: &[FitnessRecord], front: &[FitnessRecord]) -> String {
    let energies: Vec<f64> = records.iter().map(|r| r.raw_energy).collect();
    let accs: Vec<f64> = records.iter().map(|r| r.raw_accuracy).collect();
    let x = AxisMap::new(&energies, MARGIN_L, SVG_W - MARGIN_R);
    // SVG y grows downward, so accuracy maps top-to-bottom reversed.
    let y = AxisMap::new(&accs, SVG_H - MARGIN_B, MARGIN_T);

    // Accuracy cutoff for the highlighted top-20% subset.
    let mut sorted = accs.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let top_n = ((records.len() as f64) * 0.2).ceil().max(1.0) as usize;
    let cutoff = sorted[top_n.min(sorted.len()) - 1];

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    )
    .unwrap();
    writeln!(svg, "  <rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "  <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_L,
        b = SVG_H - MARGIN_B,
        r = SVG_W - MARGIN_R
    )
    .unwrap();
    writeln!(
        svg,
        "  <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>",
        l = MARGIN_L,
        t = MARGIN_T,
        b = SVG_H - MARGIN_B
    )
    .unwrap();
    writeln!(
        svg,
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">energy (J)</text>",
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        SVG_H - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 {})\">accuracy</text>",
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0
    )
    .unwrap();

    if !front.is_empty() {
        let mut pts: Vec<(f64, f64)> = front.iter().map(|r| (r.raw_energy, r.raw_accuracy)).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let path: Vec<String> = pts.iter().map(|&(e, a)| format!("{:.2},{:.2}", x.px(e), y.px(a))).collect();
        writeln!(
            svg,
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#228833\" stroke-width=\"1.5\"/>",
            path.join(" ")
        )
        .unwrap();
    }

    for r in records {
        let highlight = r.raw_accuracy >= cutoff;
        let fill = if highlight { "#ee6677" } else { "#4477aa" };
        writeln!(
            svg,
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{fill}\" fill-opacity=\"0.8\"/>",
            x.px(r.raw_energy),
            y.px(r.raw_accuracy)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::CandidateSnn;
    use tempfile::tempdir;

    fn toy_config(dir: &Path) -> RunConfig {
        RunConfig {
            space: SpaceKind::SS,
            backbone: Some(FixedBackbone {
                depth: 4,
                embed_dim: 16,
                mlp_ratio: 1.0,
                head_num: 2,
            }),
            data: DataConfig::Synthetic { classes: 2, size: 8, per_class: 6, sigma: 0.1 },
            train: TrainConfig { epochs: 2, batch_size: 4, learning_rate: 2e-3, weight_decay: 1e-2, seed: 5 },
            evo: EvoConfig {
                population_size: 4,
                generations: 2,
                parent_count: 2,
                total_sample_budget: Some(6),
                ..EvoConfig::default()
            },
            checkpoint_dir: dir.join("ckpt"),
            results_path: dir.join("results.jsonl"),
            report_dir: dir.join("report"),
            seed: 5,
        }
    }

    /// Minimal well-formedness check: tags balance and attributes are
    /// properly quoted.
    fn assert_well_formed_xml(text: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed tag") + start;
            let tag = &rest[start + 1..end];
            assert!(!tag.is_empty(), "empty tag");
            assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in <{tag}>");
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "mismatched </{name}>");
            } else if !tag.ends_with('/') {
                let name: String = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
            rest = &rest[end + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn config_json_roundtrip_and_unknown_key_rejection() {
        let dir = tempdir().unwrap();
        let config = toy_config(dir.path());
        let json = serde_json::to_string_pretty(&config).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), config);

        let bad = json.replacen("\"seed\"", "\"sede\"", 1);
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Config(_))));

        let mut with_backbone = config;
        with_backbone.space = SpaceKind::STs;
        assert!(with_backbone.validate().is_err());
    }

    #[test]
    fn lock_excludes_second_writer_and_releases_on_drop() {
        let dir = tempdir().unwrap();
        let lock = lock_dir(dir.path()).unwrap();
        assert!(matches!(lock_dir(dir.path()), Err(Error::Config(_))));
        drop(lock);
        lock_dir(dir.path()).unwrap();
    }

    #[test]
    fn train_search_evaluate_report_roundtrip() {
        let dir = tempdir().unwrap();
        let config = toy_config(dir.path());

        let history = cmd_train(&config).unwrap();
        assert_eq!(history.len(), config.train.epochs);
        assert!(config.checkpoint_dir.join(MANIFEST_FILE).exists());
        let csv = fs::read_to_string(config.checkpoint_dir.join(LOSS_HISTORY_FILE)).unwrap();
        assert_eq!(csv.lines().count(), config.train.epochs + 1);

        let outcome = cmd_search(&config, false).unwrap();
        assert!(!outcome.records.is_empty());
        assert!(outcome.records.len() <= 6);
        assert!(!outcome.front.is_empty());
        assert!(outcome.front_csv_path.exists());

        let result = cmd_evaluate(&config, &outcome.front[0].candidate.to_string()).unwrap();
        let again = cmd_evaluate(&config, &outcome.front[0].candidate.to_string()).unwrap();
        assert_eq!(result, again);
        assert!(result.energy_joules > 0.0);

        let summary = cmd_report(&config.results_path, &config.report_dir).unwrap();
        assert_eq!(summary.record_count, outcome.records.len());
        let svg = fs::read_to_string(&summary.svg_path).unwrap();
        assert_well_formed_xml(&svg);
        assert_eq!(svg.matches("<circle").count(), summary.record_count);
        let recomputed = kendall_tau(
            &outcome.records.iter().map(|r| r.raw_accuracy).collect::<Vec<_>>(),
            &outcome.records.iter().map(|r| r.raw_energy).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(summary.tau, recomputed);
    }

    #[test]
    fn train_rerun_reproduces_identical_weights() {
        let dir = tempdir().unwrap();
        let config_a = {
            let mut c = toy_config(dir.path());
            c.checkpoint_dir = dir.path().join("a");
            c
        };
        let config_b = {
            let mut c = toy_config(dir.path());
            c.checkpoint_dir = dir.path().join("b");
            c
        };
        cmd_train(&config_a).unwrap();
        cmd_train(&config_b).unwrap();
        let blob_a = fs::read(config_a.checkpoint_dir.join(crate::checkpoint::WEIGHTS_FILE)).unwrap();
        let blob_b = fs::read(config_b.checkpoint_dir.join(crate::checkpoint::WEIGHTS_FILE)).unwrap();
        assert_eq!(blob_a, blob_b);
    }

    #[test]
    fn train_resume_extends_instead_of_restarting() {
        let dir = tempdir().unwrap();
        let mut config = toy_config(dir.path());
        config.train.epochs = 1;
        cmd_train(&config).unwrap();
        config.train.epochs = 2;
        // Resume rejects a changed train config outright.
        assert!(matches!(cmd_train(&config), Err(Error::Config(_))));

        let mut full = toy_config(dir.path());
        full.checkpoint_dir = dir.path().join("full");
        let full_hist = cmd_train(&full).unwrap();
        // Same config trained in one go, then "resumed" at completion: no-op.
        let resumed = cmd_train(&full).unwrap();
        assert_eq!(full_hist, resumed);
    }

    #[test]
    fn energy_audit_matches_library_model_energy() {
        let dir = tempdir().unwrap();
        let baseline = Candidate::Snn(CandidateSnn::baseline(4));
        let spec = ArchSpec::resolve(&baseline, Some(&FixedBackbone::spikformer_4_384())).unwrap();
        let catalog = flops_catalog(&spec, AUDIT_INPUT_HW, AUDIT_IN_CHANNELS, AUDIT_NUM_CLASSES).unwrap();
        let trace = crate::energy::uniform_trace(&catalog, 0.35);
        let path = dir.path().join("trace.csv");
        crate::energy::write_fr_trace(&path, &trace).unwrap();

        let report = cmd_energy(&baseline.to_string(), &path, 4).unwrap();
        let direct = model_energy(&catalog, &trace, 4).unwrap();
        assert_eq!(report.total_energy, direct.total_energy);

        // Zero trace: only the dense encoder conv is billed.
        let zero = crate::energy::uniform_trace(&catalog, 0.0);
        crate::energy::write_fr_trace(&path, &zero).unwrap();
        let report = cmd_energy(&baseline.to_string(), &path, 2).unwrap();
        assert_eq!(report.total_energy, crate::energy::E_MAC * report.first_layer_flops);

        // Extra and missing rows are both rejected, as is t outside 2..4.
        let mut extra = zero.clone();
        extra.push(crate::energy::FrEntry {
            layer_id: "nonexistent".into(),
            kind: LayerKind::SnnConv,
            flops: 1.0,
            fr: 0.1,
        });
        crate::energy::write_fr_trace(&path, &extra).unwrap();
        assert!(matches!(cmd_energy(&baseline.to_string(), &path, 2), Err(Error::Data(_))));
        let missing = &zero[1..].to_vec();
        crate::energy::write_fr_trace(&path, missing).unwrap();
        assert!(matches!(cmd_energy(&baseline.to_string(), &path, 2), Err(Error::Data(_))));
        crate::energy::write_fr_trace(&path, &zero).unwrap();
        assert!(matches!(cmd_energy(&baseline.to_string(), &path, 0), Err(Error::Config(_))));
        assert!(matches!(cmd_energy(&baseline.to_string(), &path, 5), Err(Error::Config(_))));
    }

    #[test]
    fn report_requires_two_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(cmd_report(&path, dir.path()), Err(Error::Data(_))));
    }
}
