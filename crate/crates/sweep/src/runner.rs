//! Resumable dimension sweeps and drop-loss comparisons.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use cfscale::data::{inject_noise_avoiding, load_interactions, split};
use cfscale::graph::build_normalized_adjacency;
use cfscale::{evaluate, train, Dataset, DropConfig, InteractionFormat, ModelKind, NoiseSpec, Objective, Scalar, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SweepError};

pub const CSV_HEADER: &str = "model,dataset,dim,seed,variant,ndcg20,epochs_trained,wall_seconds";
pub const COMPARISON_HEADER: &str = "dim,variant,ndcg";
pub const BASELINE: &str = "baseline";
/// Largest embedding width accepted unless raised explicitly.
pub const DEFAULT_DIM_CAP: usize = 4096;
/// Cutoff of the reported test metric.
pub const TEST_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One training objective in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub objective: Objective,
}

impl Variant {
    /// The model's own objective, optionally replaced by the drop loss.
    pub fn for_model(model: &ModelKind, drop: Option<DropConfig>) -> Result<Self> {
        match (model, drop) {
            (ModelKind::Sgl(_), Some(_)) => Err(SweepError::Config(
                "the drop loss replaces the ranking term only; it is not combined with sgl".into(),
            )),
            (ModelKind::Sgl(_), None) => Ok(Self {
                name: BASELINE.into(),
                objective: Objective::Sgl,
            }),
            (_, None) => Ok(Self {
                name: BASELINE.into(),
                objective: Objective::Bpr,
            }),
            (_, Some(d)) => {
                d.validate()?;
                Ok(Self {
                    name: drop_variant_name(&d),
                    objective: Objective::BprDrop(d),
                })
            }
        }
    }
}

pub fn drop_variant_name(d: &DropConfig) -> String {
    format!("drop-{}-{}", d.save_ratio, if d.get_low { "low" } else { "high" })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub model: ModelKind,
    pub data: PathBuf,
    pub format: InteractionFormat,
    /// Value of the `dataset` column.
    pub dataset_name: String,
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Seed and objective are set per point.
    pub train: TrainConfig,
    pub noise_delta: Option<f64>,
    pub drop: Option<DropConfig>,
    pub split: SplitSpec,
    pub output: PathBuf,
    pub jobs: usize,
    pub precision: Precision,
    pub dim_cap: usize,
}

impl SweepConfig {
    pub fn new(model: ModelKind, data: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        let data = data.into();
        let dataset_name = data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Self {
            model,
            data,
            format: InteractionFormat::TsvUirt,
            dataset_name,
            dims: powers_of_two(2, 1024),
            seeds: vec![1],
            train: TrainConfig {
                max_epochs: 100,
                ..TrainConfig::default()
            },
            noise_delta: None,
            drop: None,
            split: SplitSpec::default(),
            output: output.into(),
            jobs: 1,
            precision: Precision::default(),
            dim_cap: DEFAULT_DIM_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.seeds.is_empty() {
            return Err(SweepError::Config("dims and seeds must be non-empty".into()));
        }
        if self.dims[0] == 0 || self.dims.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SweepError::Config("dims must be positive and strictly increasing".into()));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d > self.dim_cap) {
            return Err(SweepError::Config(format!("dim {d} exceeds the cap {}", self.dim_cap)));
        }
        let mut seen = HashSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(SweepError::Config("seeds must be distinct".into()));
        }
        if self.jobs == 0 {
            return Err(SweepError::Config("jobs must be at least 1".into()));
        }
        for &d in &self.dims {
            self.model.validate(d)?;
        }
        self.train.validate()?;
        self.split.validate()?;
        if let Some(delta) = self.noise_delta {
            cfscale::data::noise_count(0, delta)?;
        }
        Ok(())
    }
}

/// `lo, 2·lo, 4·lo, …` up to and including `hi`.
pub fn powers_of_two(lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut d = lo.max(1);
    while d <= hi {
        out.push(d);
        d *= 2;
    }
    out
}

/// One CSV row. A failed point has an empty `ndcg20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub model: String,
    pub dataset: String,
    pub dim: usize,
    pub seed: u64,
    pub variant: String,
    pub ndcg20: Option<f64>,
    pub epochs_trained: usize,
    pub wall_seconds: f64,
}

impl SweepRecord {
    fn key(&self) -> PointKey {
        (self.model.clone(), self.dataset.clone(), self.dim, self.seed, self.variant.clone())
    }

    pub fn completed(&self) -> bool {
        self.ndcg20.is_some()
    }
}

type PointKey = (String, String, usize, u64, String);

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Completed records, including those found in the output file.
    pub records: Vec<SweepRecord>,
    /// Points that failed in this run, with their error messages.
    pub failures: Vec<(SweepRecord, String)>,
    /// Points trained in this run.
    pub trained: usize,
}

impl SweepResult {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Mean NDCG@20 over seeds per dimension, in increasing dimension.
    pub fn mean_curve(&self, variant: &str) -> Vec<(usize, f64)> {
        mean_curve(&self.records, variant)
    }
}

pub fn mean_curve(records: &[SweepRecord], variant: &str) -> Vec<(usize, f64)> {
    let mut by_dim: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.variant == variant) {
        if let Some(v) = r.ndcg20 {
            let e = by_dim.entry(r.dim).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    by_dim.into_iter().map(|(d, (s, c))| (d, s / c as f64)).collect()
}

/// Train/valid/test partition of the sweep's dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    held_out: Dataset,
}

impl Prepared {
    pub fn new(full: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let (train, valid, test) = split(full, spec)?;
        let held_out = valid.union(&test)?;
        Ok(Self {
            train,
            valid,
            test,
            held_out,
        })
    }
}

struct Point {
    dim: usize,
    seed: u64,
    variant: Variant,
}

fn run_point<T: Scalar>(cfg: &SweepConfig, data: &Prepared, point: &Point) -> cfscale::Result<(f64, usize)> {
    let train_set = match cfg.noise_delta {
        Some(delta) => inject_noise_avoiding(&data.train, &data.held_out, &NoiseSpec::new(delta, point.seed))?,
        None => data.train.clone(),
    };
    let tc = TrainConfig {
        seed: point.seed,
        objective: point.variant.objective,
        ..cfg.train.clone()
    };
    let (params, history) = train::<T>(&cfg.model, &train_set, &data.valid, point.dim, &tc)?;
    let adj = cfg.model.is_graph().then(|| build_normalized_adjacency::<T>(&train_set));
    let report = evaluate(&cfg.model, &params, adj.as_ref(), &[&train_set, &data.valid], &data.test, TEST_K)?;
    Ok((report.ndcg, history.epochs.len()))
}

fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
    if !path.exists() || fs::metadata(path).map_err(|e| SweepError::io(path, e))?.len() == 0 {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| SweepError::csv(path, e))?;
    let header = reader.headers().map_err(|e| SweepError::csv(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(SweepError::Header {
            path: path.into(),
            expected: CSV_HEADER.into(),
            found: header,
        });
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<SweepRecord>, _>>()
        .map_err(|e| SweepError::csv(path, e))
}

/// Rewrites `path` with only `records` (drops stale failed rows).
fn rewrite(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| SweepError::csv(&tmp, e))?;
        if records.is_empty() {
            w.write_record(CSV_HEADER.split(',')).map_err(|e| SweepError::csv(&tmp, e))?;
        }
        for r in records {
            w.serialize(r).map_err(|e| SweepError::csv(&tmp, e))?;
        }
        w.flush().map_err(|e| SweepError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SweepError::io(path, e))
}

/// Loads and splits the configured dataset, then runs [`run_sweep_on`].
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let full = load_interactions(&cfg.data, cfg.format)?;
    let data = Prepared::new(&full, &cfg.split)?;
    let variant = Variant::for_model(&cfg.model, cfg.drop)?;
    run_variants(cfg, &data, &[variant])
}

/// Sweep over an already prepared split.
pub fn run_sweep_on(cfg: &SweepConfig, data: &Prepared) -> Result<SweepResult> {
    cfg.validate()?;
    let variant = Variant::for_model(&cfg.model, cfg.drop)?;
    run_variants(cfg, data, &[variant])
}

/// Trains every missing `(variant, dim, seed)` point and appends one row
/// per point to `cfg.output`.
pub fn run_variants(cfg: &SweepConfig, data: &Prepared, variants: &[Variant]) -> Result<SweepResult> {
    cfg.validate()?;
    let path = cfg.output.as_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SweepError::io(dir, e))?;
    }
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let existing = read_records(path)?;
    let (mut records, stale): (Vec<_>, Vec<_>) = existing.into_iter().partition(SweepRecord::completed);
    if !stale.is_empty() || fresh {
        rewrite(path, &records)?;
    }
    let done: HashSet<PointKey> = records.iter().map(SweepRecord::key).collect();
    let model = cfg.model.name().to_string();
    let mut queue = VecDeque::new();
    for v in variants {
        for &dim in &cfg.dims {
            for &seed in &cfg.seeds {
                let key = (model.clone(), cfg.dataset_name.clone(), dim, seed, v.name.clone());
                if !done.contains(&key) {
                    queue.push_back(Point {
                        dim,
                        seed,
                        variant: v.clone(),
                    });
                }
            }
        }
    }
    let todo = queue.len();
    log::info!("{} points to train, {} already recorded", todo, records.len());

    let file = OpenOptions::new().append(true).open(path).map_err(|e| SweepError::io(path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let queue = Mutex::new(queue);
    let (tx, rx) = mpsc::channel::<(SweepRecord, Option<String>)>();
    let mut failures = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..cfg.jobs.min(todo.max(1)) {
            let tx = tx.clone();
            let queue = &queue;
            let model = model.clone();
            scope.spawn(move || loop {
                let Some(point) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                let start = Instant::now();
                let outcome = match cfg.precision {
                    Precision::F32 => run_point::<f32>(cfg, data, &point),
                    Precision::F64 => run_point::<f64>(cfg, data, &point),
                };
                let wall_seconds = start.elapsed().as_secs_f64();
                let mut record = SweepRecord {
                    model: model.clone(),
                    dataset: cfg.dataset_name.clone(),
                    dim: point.dim,
                    seed: point.seed,
                    variant: point.variant.name.clone(),
                    ndcg20: None,
                    epochs_trained: 0,
                    wall_seconds,
                };
                let message = match outcome {
                    Ok((ndcg, epochs)) => {
                        record.ndcg20 = Some(ndcg);
                        record.epochs_trained = epochs;
                        None
                    }
                    Err(e) => Some(e.to_string()),
                };
                if tx.send((record, message)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (record, message) in rx {
            writer.serialize(&record).map_err(|e| SweepError::csv(path, e))?;
            writer.flush().map_err(|e| SweepError::io(path, e))?;
            match message {
                None => {
                    log::info!(
                        "{} dim {} seed {} {}: ndcg@20 {:.5} after {} epochs ({:.1}s)",
                        record.model,
                        record.dim,
                        record.seed,
                        record.variant,
                        record.ndcg20.unwrap_or(f64::NAN),
                        record.epochs_trained,
                        record.wall_seconds
                    );
                    records.push(record);
                }
                Some(msg) => {
                    log::error!("{} dim {} seed {} {} failed: {msg}", record.model, record.dim, record.seed, record.variant);
                    failures.push((record, msg));
                }
            }
        }
        Ok(())
    })?;
    records.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(SweepResult {
        records,
        failures,
        trained: todo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dim: usize,
    pub variant: String,
    pub ndcg: f64,
}

/// Runs the baseline and one drop variant per save ratio across all dims,
/// then averages seeds into `dim,variant,ndcg` rows.
pub fn compare_drop(cfg: &SweepConfig, data: &Prepared, save_ratios: &[f64], get_low: bool) -> Result<(SweepResult, Vec<ComparisonRow>)> {
    if save_ratios.is_empty() {
        return Err(SweepError::Config("the drop grid is empty".into()));
    }
    let mut variants = vec![Variant::for_model(&cfg.model, None)?];
    for &r in save_ratios {
        variants.push(Variant::for_model(&cfg.model, Some(DropConfig::new(r, get_low)))?);
    }
    let result = run_variants(cfg, data, &variants)?;
    let mut rows = Vec::new();
    for &dim in &cfg.dims {
        for v in &variants {
            if let Some(&(_, ndcg)) = result.mean_curve(&v.name).iter().find(|(d, _)| *d == dim) {
                rows.push(ComparisonRow {
                    dim,
                    variant: v.name.clone(),
                    ndcg,
                });
            }
        }
    }
    Ok((result, rows))
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SweepError::csv(path, e))?;
    if rows.is_empty() {
        w.write_record(COMPARISON_HEADER.split(',')).map_err(|e| SweepError::csv(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| SweepError::csv(path, e))?;
    }
    w.flush().map_err(|e| SweepError::io(path, e))
}

/// Reads sweep rows from an existing CSV.
pub fn load_records(path: &Path) -> Result<Vec<SweepRecord>> {
    if !path.exists() {
        return Err(SweepError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    read_records(path)
}
