//! Repeated-holdout experiments: distributed perturbed model vs centralized
//! plaintext baseline on identical splits.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::dataset::{
    generate_splits, load_csv, partition_vertical, DatasetError, LabelColumn, PartitionedTable,
    Split, SplitPlan, Table,
};
use crate::envelope::{EnvelopeError, KeyPair, Scheme, MIN_RSA_BITS};
use crate::model::{baseline_fit_with_floor, GaussianNBModel, ModelError, DEFAULT_VARIANCE_FLOOR};
use crate::perturb::{NoiseFamily, NoiseMode, PerturbError};
use crate::protocol::{perturb_fragment, Coordinator, CoordinatorConfig, Party, PartyConfig, UploadMode};
use crate::session::{run_in_process, run_tcp_loopback, SessionError, TransportKind, DEFAULT_PHASE_TIMEOUT};

fn default_sites() -> usize {
    3
}

fn default_noise_seed() -> u64 {
    1
}

fn default_key_bits() -> usize {
    MIN_RSA_BITS
}

fn default_floor() -> f64 {
    DEFAULT_VARIANCE_FLOOR
}

/// Everything needed to reproduce a run, given the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_path: PathBuf,
    pub label_column: LabelColumn,
    #[serde(default = "default_sites")]
    pub num_sites: usize,
    #[serde(default)]
    pub split_plan: SplitPlan,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default)]
    pub noise_family: NoiseFamily,
    /// Seed of every site's noise streams.
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub envelope: Scheme,
    #[serde(default = "default_key_bits")]
    pub key_bits: usize,
    #[serde(default)]
    pub upload: UploadMode,
    /// Present test instances to the perturbed model with their site noise added.
    #[serde(default)]
    pub perturbed_test: bool,
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset_path: impl Into<PathBuf>, label_column: LabelColumn) -> Self {
        Self {
            dataset_path: dataset_path.into(),
            label_column,
            num_sites: default_sites(),
            split_plan: SplitPlan::default(),
            noise_mode: NoiseMode::default(),
            noise_family: NoiseFamily::default(),
            noise_seed: default_noise_seed(),
            transport: TransportKind::default(),
            envelope: Scheme::default(),
            key_bits: default_key_bits(),
            upload: UploadMode::default(),
            perturbed_test: false,
            variance_floor: default_floor(),
            output_path: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.num_sites == 0 {
            return bad("num_sites must be at least 1".into());
        }
        match self.noise_mode {
            NoiseMode::Absolute(v) | NoiseMode::RatioOfSampleVariance(v) if !(v >= 0.0 && v.is_finite()) => {
                return bad(format!("noise level {v} must be finite and non-negative"))
            }
            _ => {}
        }
        if !(self.variance_floor > 0.0) {
            return bad(format!("variance floor {} must be positive", self.variance_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RepeatFailure {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("repeat {index}: {source}")]
    Repeat {
        index: usize,
        #[source]
        source: RepeatFailure,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code: 1 usage, 2 data, 3 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::Output { .. } => 2,
            HarnessError::Repeat { source: RepeatFailure::Model(_), .. } => 2,
            HarnessError::Repeat { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub index: usize,
    pub acc_perturbed: f64,
    pub acc_baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
}

impl ColumnSummary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub perturbed: ColumnSummary,
    pub baseline: ColumnSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total: u64,
    pub repeats: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatResult>,
    pub summary: Summary,
    /// Wall-clock milliseconds. Absent from reports meant to be compared
    /// byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<Timing>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        canonical::to_string(self)
    }

    pub fn without_timing(&self) -> Self {
        Self { timing_ms: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRepeat {
    pub index: usize,
    pub acc_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub config: ExperimentConfig,
    pub repeats: Vec<BaselineRepeat>,
    pub baseline: ColumnSummary,
}

/// Models and predictions from one split.
#[derive(Debug, Clone)]
pub struct RepeatRun {
    pub index: usize,
    pub perturbed_model: GaussianNBModel,
    pub baseline_model: GaussianNBModel,
    pub perturbed_predictions: Vec<String>,
    pub baseline_predictions: Vec<String>,
    pub result: RepeatResult,
}

/// Predicts every row in `rows` (positions into `table.rows`), handing the
/// model values in its own attribute order.
pub fn predict(
    model: &GaussianNBModel,
    table: &Table,
    rows: &[usize],
) -> Result<Vec<String>, ModelError> {
    predict_values(model, &table.attribute_names, rows.iter().map(|&i| table.rows[i].values.as_slice()))
}

fn predict_values<'a>(
    model: &GaussianNBModel,
    names: &[String],
    rows: impl Iterator<Item = &'a [f64]>,
) -> Result<Vec<String>, ModelError> {
    let order = model
        .attribute_names()
        .map(|a| {
            names
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| ModelError::MissingAttribute(a.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.map(|values| {
        let v: Vec<f64> = order.iter().map(|&j| values[j]).collect();
        model.classify_values(&v).map(|c| c.label)
    })
    .collect()
}

/// Fraction of `predictions` equal to the true labels of `rows`.
pub fn accuracy(predictions: &[String], table: &Table, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let correct = predictions
        .iter()
        .zip(rows)
        .filter(|(p, &i)| **p == table.rows[i].class_label)
        .count();
    correct as f64 / rows.len() as f64
}

fn perturbed_test_values(
    cfg: &ExperimentConfig,
    table: &Table,
    fragments: &[PartitionedTable],
) -> Result<Vec<Vec<f64>>, PerturbError> {
    let mut values = vec![vec![0.0; table.num_attributes()]; table.len()];
    for frag in fragments {
        let cols = perturb_fragment(frag, cfg.noise_mode, cfg.noise_family, cfg.noise_seed)?;
        for (col, &parent) in cols.iter().zip(&frag.attribute_indices) {
            for (row, &w) in values.iter_mut().zip(&col.values) {
                row[parent] = w;
            }
        }
    }
    Ok(values)
}

/// Runs the protocol session and the baseline fit for split `index`.
pub fn run_repeat(
    cfg: &ExperimentConfig,
    table: &Table,
    fragments: &[Arc<PartitionedTable>],
    split: &Split,
    index: usize,
) -> Result<RepeatRun, RepeatFailure> {
    let keys = cfg.envelope.generate_keypair(cfg.key_bits)?;
    run_repeat_with_keys(cfg, table, fragments, split, index, keys)
}

/// As [`run_repeat`], with the coordinator's long-term key pair supplied.
/// Sites still generate fresh key pairs for every session.
pub fn run_repeat_with_keys(
    cfg: &ExperimentConfig,
    table: &Table,
    fragments: &[Arc<PartitionedTable>],
    split: &Split,
    index: usize,
    coordinator_keys: KeyPair,
) -> Result<RepeatRun, RepeatFailure> {
    let coord_cfg = CoordinatorConfig {
        session_id: format!("{}-{index}", table.name),
        min_sites: fragments.len(),
        split_plan: cfg.split_plan.clone(),
        split_index: index,
        noise_mode: cfg.noise_mode,
        noise_family: cfg.noise_family,
        upload: cfg.upload,
        scheme: cfg.envelope,
        key_bits: cfg.key_bits,
        variance_floor: cfg.variance_floor,
    };
    let coordinator = Coordinator::with_keys(coord_cfg, coordinator_keys);
    let parties: Vec<Party> = fragments
        .iter()
        .map(|f| {
            Party::new(
                f.clone(),
                PartyConfig {
                    scheme: cfg.envelope,
                    key_bits: cfg.key_bits,
                    noise_seed: cfg.noise_seed,
                },
            )
        })
        .collect();
    let outcome = match cfg.transport {
        TransportKind::InProcess => run_in_process(coordinator, parties)?,
        TransportKind::TcpLoopback => run_tcp_loopback(coordinator, parties, DEFAULT_PHASE_TIMEOUT)?,
    };
    let perturbed_model = outcome.model;
    let baseline_model = baseline_fit_with_floor(table, &split.train, cfg.variance_floor)?;

    let perturbed_predictions = if cfg.perturbed_test {
        let owned: Vec<PartitionedTable> = fragments.iter().map(|f| (**f).clone()).collect();
        let noisy = perturbed_test_values(cfg, table, &owned)?;
        predict_values(
            &perturbed_model,
            &table.attribute_names,
            split.test.iter().map(|&i| noisy[i].as_slice()),
        )?
    } else {
        predict(&perturbed_model, table, &split.test)?
    };
    let baseline_predictions = predict(&baseline_model, table, &split.test)?;
    let result = RepeatResult {
        index,
        acc_perturbed: accuracy(&perturbed_predictions, table, &split.test),
        acc_baseline: accuracy(&baseline_predictions, table, &split.test),
    };
    Ok(RepeatRun {
        index,
        perturbed_model,
        baseline_model,
        perturbed_predictions,
        baseline_predictions,
        result,
    })
}

/// Runs `job(i)` for every `i` in `0..n` on a small worker pool and returns
/// the results in index order.
fn parallel_map<T: Send, E: Send>(
    n: usize,
    job: impl Fn(usize) -> Result<T, E> + Sync,
) -> Vec<Result<T, E>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = job(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index was processed"))
        .collect()
}

pub fn load_table(cfg: &ExperimentConfig) -> Result<Table, HarnessError> {
    let table = load_csv(&cfg.dataset_path, &cfg.label_column)?;
    table.validate()?;
    Ok(table)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let table = load_table(cfg)?;
    run_experiment_on_table(cfg, &table)
}

pub fn run_experiment_on_table(
    cfg: &ExperimentConfig,
    table: &Table,
) -> Result<ExperimentReport, HarnessError> {
    let start = Instant::now();
    cfg.validate()?;
    let fragments: Vec<Arc<PartitionedTable>> = partition_vertical(table, cfg.num_sites)?
        .into_iter()
        .map(Arc::new)
        .collect();
    let splits = generate_splits(table.len(), &cfg.split_plan)?;
    let coordinator_keys = cfg
        .envelope
        .generate_keypair(cfg.key_bits)
        .map_err(|e| HarnessError::Repeat { index: 0, source: e.into() })?;
    let runs = parallel_map(splits.len(), |i| {
        let t = Instant::now();
        run_repeat_with_keys(cfg, table, &fragments, &splits[i], i, coordinator_keys.clone())
            .map(|r| (r.result, t.elapsed().as_millis() as u64))
    });
    let mut repeats = Vec::with_capacity(runs.len());
    let mut times = Vec::with_capacity(runs.len());
    for (index, run) in runs.into_iter().enumerate() {
        let (r, ms) = run.map_err(|source| HarnessError::Repeat { index, source })?;
        repeats.push(r);
        times.push(ms);
    }
    let summary = Summary {
        perturbed: ColumnSummary::of(&repeats.iter().map(|r| r.acc_perturbed).collect::<Vec<_>>()),
        baseline: ColumnSummary::of(&repeats.iter().map(|r| r.acc_baseline).collect::<Vec<_>>()),
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        repeats,
        summary,
        timing_ms: Some(Timing {
            total: start.elapsed().as_millis() as u64,
            repeats: times,
        }),
    })
}

/// One report per noise ratio; every report uses the same splits and seeds.
pub fn sweep_noise(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<ExperimentReport>, HarnessError> {
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(HarnessError::Config(format!("noise ratio {r} must be finite and non-negative")));
    }
    if ratios.is_empty() {
        return Ok(Vec::new());
    }
    cfg.validate()?;
    let table = load_table(cfg)?;
    sweep_noise_on_table(cfg, &table, ratios)
}

pub fn sweep_noise_on_table(
    cfg: &ExperimentConfig,
    table: &Table,
    ratios: &[f64],
) -> Result<Vec<ExperimentReport>, HarnessError> {
    ratios
        .iter()
        .map(|&r| {
            let c = ExperimentConfig {
                noise_mode: NoiseMode::RatioOfSampleVariance(r),
                ..cfg.clone()
            };
            run_experiment_on_table(&c, table)
        })
        .collect()
}

pub fn run_baseline(cfg: &ExperimentConfig) -> Result<BaselineReport, HarnessError> {
    cfg.validate()?;
    let table = load_table(cfg)?;
    run_baseline_on_table(cfg, &table)
}

pub fn run_baseline_on_table(cfg: &ExperimentConfig, table: &Table) -> Result<BaselineReport, HarnessError> {
    let splits = generate_splits(table.len(), &cfg.split_plan)?;
    let mut repeats = Vec::with_capacity(splits.len());
    for (index, split) in splits.iter().enumerate() {
        let wrap = |e: ModelError| HarnessError::Repeat { index, source: e.into() };
        let model = baseline_fit_with_floor(table, &split.train, cfg.variance_floor).map_err(wrap)?;
        let preds = predict(&model, table, &split.test).map_err(wrap)?;
        repeats.push(BaselineRepeat {
            index,
            acc_baseline: accuracy(&preds, table, &split.test),
        });
    }
    let baseline = ColumnSummary::of(&repeats.iter().map(|r| r.acc_baseline).collect::<Vec<_>>());
    Ok(BaselineReport {
        config: cfg.clone(),
        repeats,
        baseline,
    })
}

pub fn format_report_table(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8}  {:>10}  {:>10}", "repeat", "perturbed", "baseline");
    for r in &report.repeats {
        let _ = writeln!(s, "{:>8}  {:>10.4}  {:>10.4}", r.index, r.acc_perturbed, r.acc_baseline);
    }
    let p = report.summary.perturbed;
    let b = report.summary.baseline;
    let _ = writeln!(s, "{:>8}  {:>10.4}  {:>10.4}", "mean", p.mean, b.mean);
    let _ = writeln!(s, "{:>8}  {:>10.4}  {:>10.4}", "std", p.std, b.std);
    s
}

pub fn format_sweep_table(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8}  {:>14}  {:>13}  {:>13}  {:>12}",
        "ratio", "perturbed_mean", "perturbed_std", "baseline_mean", "baseline_std"
    );
    for r in reports {
        let ratio = match r.config.noise_mode {
            NoiseMode::RatioOfSampleVariance(x) | NoiseMode::Absolute(x) => x,
        };
        let _ = writeln!(
            s,
            "{:>8}  {:>14.4}  {:>13.4}  {:>13.4}  {:>12.4}",
            ratio, r.summary.perturbed.mean, r.summary.perturbed.std, r.summary.baseline.mean, r.summary.baseline.std
        );
    }
    s
}

pub fn format_baseline_table(report: &BaselineReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8}  {:>10}", "repeat", "baseline");
    for r in &report.repeats {
        let _ = writeln!(s, "{:>8}  {:>10.4}", r.index, r.acc_baseline);
    }
    let _ = writeln!(s, "{:>8}  {:>10.4}", "mean", report.baseline.mean);
    let _ = writeln!(s, "{:>8}  {:>10.4}", "std", report.baseline.std);
    s
}
