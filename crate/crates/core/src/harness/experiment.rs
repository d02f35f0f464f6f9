//! Experiment configuration, orchestration and result tables.
//!
//! An experiment trains every listed variant on every repetition's bundle,
//! optionally at several first-layer regularization values, and scores each
//! task's test set by AUC. Jobs run on a fixed-size worker pool and are
//! collected in job order, so results do not depend on the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{load_csv, DatasetBundle, Split};
use super::mnist::{load_pool, mnist_bundle, ImagePool, MnistRecipe};
use super::synth::{synth_tasks, SynthSpec};
use crate::error::{Error, Result};
use crate::linear::LinearHyperparams;
use crate::model::{ModelConfig, TrainedModel, Variant, WidthPolicy};
use crate::nonlinear::NonlinearHyperparams;
use crate::ocksr::auc;
use crate::persist::save_model;
use crate::sparse::SparseHyperparams;
use crate::trace::TrainingTrace;

/// First-layer regularization values swept by default.
pub const DEFAULT_GRID: [f64; 7] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSpec),
    Csv { path: PathBuf },
    Mnist(MnistRecipe),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

/// Cross-validated choice of the second-layer weight: `gamma_l2` for
/// OCKSR-L, `gamma_n2` for OCKSR-N and `gamma_n3` for OCKSR-NS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub candidates: Vec<f64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            candidates: vec![1e-2, 1e-1, 1.0, 10.0],
        }
    }
}

fn one() -> usize {
    1
}

fn baseline_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub kernel_width: WidthPolicy,
    /// First-layer ridge for every variant. When unset each variant keeps its
    /// own: `baseline_gamma` for OCKSR and C-OCKSR, `gamma_*1` otherwise.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "baseline_gamma")]
    pub baseline_gamma: f64,
    #[serde(default)]
    pub linear: LinearHyperparams,
    #[serde(default)]
    pub nonlinear: NonlinearHyperparams,
    #[serde(default)]
    pub sparse: SparseHyperparams,
    /// Repetition `r` uses seed `seed + r` for data generation and folds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default = "one")]
    pub workers: usize,
    /// Sweep grid; [`DEFAULT_GRID`] when unset.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub cv: Option<CvConfig>,
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub data: DataSource,
}

impl ExperimentConfig {
    pub fn new(variants: Vec<Variant>, data: DataSource) -> Self {
        Self {
            variants,
            kernel_width: WidthPolicy::Median,
            gamma: None,
            baseline_gamma: baseline_gamma(),
            linear: LinearHyperparams::default(),
            nonlinear: NonlinearHyperparams::default(),
            sparse: SparseHyperparams::default(),
            seed: 0,
            repetitions: 1,
            workers: 1,
            grid: None,
            cv: None,
            save_models: false,
            data,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("bad experiment config: {e}")))
    }

    /// Reads a config file; a relative data path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path).map_err(Error::io_at(path))?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.data {
            DataSource::Csv { path } if path.is_relative() => *path = base.join(&*path),
            DataSource::Mnist(r) if r.pool.is_relative() => r.pool = base.join(&r.pool),
            _ => {}
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec())
    }

    /// The training configuration of one variant, optionally at a given
    /// first-layer ridge.
    pub fn model_config(&self, variant: Variant, gamma: Option<f64>) -> ModelConfig {
        let mut mc = ModelConfig {
            variant,
            kernel_width: self.kernel_width,
            gamma: self.baseline_gamma,
            linear: self.linear.clone(),
            nonlinear: self.nonlinear.clone(),
            sparse: self.sparse.clone(),
        };
        if let Some(g) = gamma.or(self.gamma) {
            mc.set_first_layer_gamma(g);
        }
        mc
    }

    /// Checks every training configuration the experiment will use.
    pub fn validate(&self, grid: Option<&[f64]>) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::param("no variants listed"));
        }
        if self.repetitions == 0 || self.workers == 0 {
            return Err(Error::param("repetitions and workers must be positive"));
        }
        let points: Vec<Option<f64>> = match grid {
            Some([]) => return Err(Error::param("empty regularization grid")),
            Some(g) => g.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        };
        for &v in &self.variants {
            for &g in &points {
                let mc = self.model_config(v, g);
                mc.validate().map_err(|e| Error::param(format!("{v}: {e}")))?;
                if mc.first_layer_gamma() <= 0.0 && v.is_two_layer() {
                    return Err(Error::param(format!("{v}: first-layer ridge must be positive")));
                }
            }
        }
        if let Some(cv) = &self.cv {
            if cv.folds < 2 || cv.candidates.is_empty() {
                return Err(Error::param("cv needs at least 2 folds and one candidate"));
            }
            if cv.candidates.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::param("cv candidates must be positive"));
            }
        }
        match &self.data {
            DataSource::Synth(s) => s.validate(),
            DataSource::Mnist(r) => r.validate(),
            DataSource::Csv { .. } => Ok(()),
        }
    }
}

/// Produces the bundle of each repetition.
#[derive(Debug, Clone)]
pub enum DataLoader {
    /// The same bundle for every repetition.
    Fixed(DatasetBundle),
    /// A fresh synthetic draw with seed `base + repetition`.
    Synth { spec: SynthSpec, base: u64 },
    /// A fresh recipe draw with seed `base + repetition`.
    Mnist {
        pool: ImagePool,
        recipe: MnistRecipe,
        base: u64,
    },
}

impl DataLoader {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match &cfg.data {
            DataSource::Synth(spec) => DataLoader::Synth {
                spec: spec.clone(),
                base: cfg.seed,
            },
            DataSource::Csv { path } => DataLoader::Fixed(load_csv(path)?),
            DataSource::Mnist(recipe) => DataLoader::Mnist {
                pool: load_pool(&recipe.pool)?,
                recipe: recipe.clone(),
                base: cfg.seed,
            },
        })
    }

    pub fn bundle(&self, repetition: usize) -> Result<DatasetBundle> {
        match self {
            DataLoader::Fixed(b) => Ok(b.clone()),
            DataLoader::Synth { spec, base } => synth_tasks(&spec.with_seed(base + repetition as u64)),
            DataLoader::Mnist { pool, recipe, base } => mnist_bundle(pool, recipe, base + repetition as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    /// First-layer ridge actually used.
    pub gamma: f64,
    pub repetition: usize,
    pub seed: u64,
    /// AUC per task, empty when the run failed.
    pub auc: Vec<f64>,
    /// Sum of squared training-response errors.
    pub sse: Option<f64>,
    /// Second-layer weight picked by cross-validation.
    pub selected: Option<f64>,
    pub train_rows: usize,
    pub test_rows: usize,
    pub fingerprint: Option<String>,
    pub model_file: Option<String>,
    pub trace: Option<TrainingTrace>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn mean_auc(&self) -> Option<f64> {
        (self.ok() && !self.auc.is_empty()).then(|| self.auc.iter().sum::<f64>() / self.auc.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEntry {
    pub variant: Variant,
    pub gamma: f64,
    /// Mean over every stored task AUC of the successful runs.
    pub mean_auc: f64,
    pub mean_sse: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub runs: Vec<RunRecord>,
    pub means: Vec<MeanEntry>,
}

/// Arithmetic mean with a fixed summation order.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ResultTable {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let means = Self::aggregate(&runs);
        Self { runs, means }
    }

    /// Means per (variant, gamma) in first-appearance order.
    pub fn aggregate(runs: &[RunRecord]) -> Vec<MeanEntry> {
        let mut keys: Vec<(Variant, f64)> = Vec::new();
        for r in runs {
            if !keys
                .iter()
                .any(|&(v, g)| v == r.variant && g.to_bits() == r.gamma.to_bits())
            {
                keys.push((r.variant, r.gamma));
            }
        }
        keys.into_iter()
            .map(|(variant, gamma)| {
                let group: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| r.variant == variant && r.gamma.to_bits() == gamma.to_bits())
                    .collect();
                let ok: Vec<&&RunRecord> = group.iter().filter(|r| r.ok()).collect();
                MeanEntry {
                    variant,
                    gamma,
                    mean_auc: mean(ok.iter().flat_map(|r| r.auc.iter().copied())),
                    mean_sse: mean(ok.iter().filter_map(|r| r.sse)),
                    runs: group.len(),
                    failed: group.len() - ok.len(),
                }
            })
            .collect()
    }

    pub fn mean_auc(&self, variant: Variant) -> Option<f64> {
        self.means.iter().find(|m| m.variant == variant).map(|m| m.mean_auc)
    }

    pub fn mean_auc_at(&self, variant: Variant, gamma: f64) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.variant == variant && m.gamma == gamma)
            .map(|m| m.mean_auc)
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }

    /// Recomputes the means from the stored runs and compares them with the
    /// stored means to `tol`.
    pub fn check_means(&self, tol: f64) -> Result<()> {
        let fresh = Self::aggregate(&self.runs);
        if fresh.len() != self.means.len() {
            return Err(Error::Corruption("stored means do not cover the stored runs".into()));
        }
        for (a, b) in fresh.iter().zip(&self.means) {
            let same_nan = a.mean_auc.is_nan() && b.mean_auc.is_nan();
            if a.variant != b.variant || a.gamma != b.gamma || !(same_nan || (a.mean_auc - b.mean_auc).abs() <= tol) {
                return Err(Error::Corruption(format!(
                    "stored mean {} for {} at gamma {} does not re-aggregate ({})",
                    b.mean_auc, b.variant, b.gamma, a.mean_auc
                )));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.csv` (one row per task AUC) and the `<stem>.json`
    /// sidecar with means, traces and errors.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
        w.write_record(["variant", "task", "repetition", "auc", "gamma", "status"])
            .map_err(csv_err)?;
        for r in &self.runs {
            let gamma = r.gamma.to_string();
            let rep = r.repetition.to_string();
            if r.ok() {
                for (t, a) in r.auc.iter().enumerate() {
                    let row = [r.variant.as_str(), &t.to_string(), &rep, &a.to_string(), &gamma, "ok"];
                    w.write_record(row).map_err(csv_err)?;
                }
            } else {
                w.write_record([r.variant.as_str(), "", &rep, "", &gamma, "failed"])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        fs::write(
            &json_path,
            serde_json::to_string_pretty(self).expect("table serializes"),
        )?;
        Ok((csv_path, json_path))
    }

    /// Reads a table from its JSON sidecar and checks it against the CSV
    /// next to it and against its own stored means.
    pub fn read(json_path: &Path) -> Result<Self> {
        let table: ResultTable = serde_json::from_str(&fs::read_to_string(json_path).map_err(Error::io_at(json_path))?)
            .map_err(|e| Error::Corruption(format!("result sidecar unreadable: {e}")))?;
        let csv_path = json_path.with_extension("csv");
        if csv_path.exists() {
            let mut reader = csv::Reader::from_path(&csv_path).map_err(csv_err)?;
            let mut from_csv = Vec::new();
            for rec in reader.records() {
                let rec = rec.map_err(csv_err)?;
                if &rec[5] == "ok" {
                    let v: f64 = rec[3]
                        .parse()
                        .map_err(|_| Error::Corruption(format!("bad auc {:?} in {}", &rec[3], csv_path.display())))?;
                    from_csv.push(v.to_bits());
                }
            }
            let stored: Vec<u64> = table
                .runs
                .iter()
                .filter(|r| r.ok())
                .flat_map(|r| r.auc.iter().map(|a| a.to_bits()))
                .collect();
            if stored != from_csv {
                return Err(Error::Corruption("result CSV and sidecar disagree".into()));
            }
        }
        table.check_means(1e-12)?;
        Ok(table)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Errors unless every row used for fitting is a training row.
pub fn audit_hygiene(bundle: &DatasetBundle, fit_rows: &[usize]) -> Result<()> {
    match fit_rows.iter().find(|&&i| bundle.split.get(i) != Some(&Split::Train)) {
        Some(i) => Err(Error::State(format!(
            "row {i} is not a training row but was used for fitting"
        ))),
        None => Ok(()),
    }
}

/// Mean AUC of `config` over pooled, task-stratified folds of the training
/// partition. Held-out samples of a task are its targets; held-out samples of
/// the other tasks are its non-targets.
pub fn pooled_cv_score(config: &ModelConfig, bundle: &DatasetBundle, folds: usize, seed: u64) -> Result<f64> {
    if bundle.tasks < 2 {
        return Err(Error::param("cross-validation needs at least two tasks"));
    }
    let train = bundle.train_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; bundle.split.len()];
    for t in 0..bundle.tasks {
        let mut rows: Vec<usize> = train.iter().copied().filter(|&i| bundle.task_ids[i] == t).collect();
        if rows.len() < folds {
            return Err(Error::input(format!(
                "task {t} has {} training samples, fewer than {folds} folds",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for (p, &i) in rows.iter().enumerate() {
            fold_of[i] = p % folds;
        }
    }

    let mut scores = Vec::new();
    for f in 0..folds {
        let fit: Vec<usize> = train.iter().copied().filter(|&i| fold_of[i] != f).collect();
        let held: Vec<usize> = train.iter().copied().filter(|&i| fold_of[i] == f).collect();
        audit_hygiene(bundle, &fit)?;
        let ids: Vec<usize> = fit.iter().map(|&i| bundle.task_ids[i]).collect();
        let model = TrainedModel::fit(config, &bundle.features.select_rows(&fit), &ids, bundle.tasks)?;
        let s = model.score(&bundle.features.select_rows(&held))?;
        for t in 0..bundle.tasks {
            let labels: Vec<bool> = held.iter().map(|&i| bundle.task_ids[i] == t).collect();
            let col: Vec<f64> = s.column(t).iter().copied().collect();
            scores.push(auc(&col, &labels)?);
        }
    }
    Ok(mean(scores.into_iter()))
}

fn set_second_layer(mc: &mut ModelConfig, value: f64) {
    match mc.variant {
        Variant::Linear => mc.linear.gamma_l2 = value,
        Variant::Nonlinear => mc.nonlinear.gamma_n2 = value,
        Variant::Sparse => mc.sparse.gamma_n3 = value,
        Variant::Ocksr | Variant::COcksr => {}
    }
}

/// Applies the cross-validated second-layer weight to `mc` when the config
/// asks for cross-validation and the variant has such a weight. Returns the
/// chosen value.
pub fn select_second_layer(
    cfg: &ExperimentConfig,
    mc: &mut ModelConfig,
    bundle: &DatasetBundle,
    seed: u64,
) -> Result<Option<f64>> {
    let cv = match &cfg.cv {
        Some(cv) if matches!(mc.variant, Variant::Linear | Variant::Nonlinear | Variant::Sparse) => cv,
        _ => return Ok(None),
    };
    let mut best = (f64::NEG_INFINITY, cv.candidates[0]);
    for &c in &cv.candidates {
        let mut trial = mc.clone();
        set_second_layer(&mut trial, c);
        let s = pooled_cv_score(&trial, bundle, cv.folds, seed)?;
        if s > best.0 {
            best = (s, c);
        }
    }
    set_second_layer(mc, best.1);
    Ok(Some(best.1))
}

struct Job {
    variant: Variant,
    gamma: Option<f64>,
}

fn run_job(
    cfg: &ExperimentConfig,
    job: &Job,
    bundle: &DatasetBundle,
    repetition: usize,
    model_dir: Option<&Path>,
) -> RunRecord {
    let mut mc = cfg.model_config(job.variant, job.gamma);
    let seed = cfg.seed + repetition as u64;
    let train = bundle.train_rows();
    let mut record = RunRecord {
        variant: job.variant,
        gamma: mc.first_layer_gamma(),
        repetition,
        seed,
        auc: Vec::new(),
        sse: None,
        selected: None,
        train_rows: train.len(),
        test_rows: bundle.split.len() - train.len(),
        fingerprint: None,
        model_file: None,
        trace: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        record.selected = select_second_layer(cfg, &mut mc, bundle, seed)?;
        audit_hygiene(bundle, &train)?;
        let model = TrainedModel::fit(&mc, &bundle.train_features(), &bundle.train_task_ids(), bundle.tasks)?;
        record.fingerprint = Some(model.fingerprint.clone());
        record.trace = Some(model.trace.clone());
        record.sse = Some(model.training_sse()?);
        let mut aucs = Vec::with_capacity(bundle.tasks);
        for t in 0..bundle.tasks {
            let ts = bundle.test_set(t);
            let s = model.score(&ts.features)?;
            let col: Vec<f64> = s.column(t).iter().copied().collect();
            aucs.push(auc(&col, &ts.labels)?);
        }
        record.auc = aucs;
        if let Some(dir) = model_dir {
            let path = dir.join(format!("{}_g{:e}_r{repetition}.mtoc", job.variant, record.gamma));
            save_model(&model, &path)?;
            record.model_file = Some(path.display().to_string());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.auc.clear();
        record.error = Some(e.to_string());
        if let Error::Training { trace, .. } = e {
            record.trace = Some(*trace);
        }
    }
    record
}

fn execute(cfg: &ExperimentConfig, data: &DataLoader, grid: Option<&[f64]>, out: Option<&Path>) -> Result<ResultTable> {
    cfg.validate(grid)?;
    let points: Vec<Option<f64>> = match grid {
        Some(g) => g.iter().map(|&v| Some(v)).collect(),
        None => vec![None],
    };
    let jobs: Vec<Job> = points
        .iter()
        .flat_map(|&gamma| cfg.variants.iter().map(move |&variant| Job { variant, gamma }))
        .collect();
    let model_dir = match (out, cfg.save_models) {
        (Some(dir), true) => {
            let d = dir.join("models");
            fs::create_dir_all(&d)?;
            Some(d)
        }
        _ => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::param(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let per_rep: Vec<Result<Vec<RunRecord>>> = pool.install(|| {
        (0..cfg.repetitions)
            .into_par_iter()
            .map(|rep| {
                let bundle = data.bundle(rep)?;
                bundle.validate_for_evaluation()?;
                Ok(jobs
                    .par_iter()
                    .map(|job| run_job(cfg, job, &bundle, rep, model_dir.as_deref()))
                    .collect())
            })
            .collect()
    });
    let mut runs = Vec::new();
    for r in per_rep {
        runs.extend(r?);
    }
    let table = ResultTable::from_runs(runs);
    if let Some(dir) = out {
        table.write(dir, "results")?;
    }
    Ok(table)
}

/// Trains and scores every variant on every repetition. Training failures
/// are recorded in the table; data and configuration errors abort.
pub fn run_experiment(cfg: &ExperimentConfig, data: &DataLoader, out: Option<&Path>) -> Result<ResultTable> {
    execute(cfg, data, None, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub variant: Variant,
    pub mean_auc: f64,
    pub mean_sse: f64,
    pub failed: usize,
}

/// [`run_experiment`] at every first-layer ridge in `grid`, plus the
/// per-point summary (also written to `sweep.csv` under `out`).
pub fn sweep_regularization(
    cfg: &ExperimentConfig,
    data: &DataLoader,
    grid: &[f64],
    out: Option<&Path>,
) -> Result<(ResultTable, Vec<SweepPoint>)> {
    let table = execute(cfg, data, Some(grid), out)?;
    let points: Vec<SweepPoint> = table
        .means
        .iter()
        .map(|m| SweepPoint {
            gamma: m.gamma,
            variant: m.variant,
            mean_auc: m.mean_auc,
            mean_sse: m.mean_sse,
            failed: m.failed,
        })
        .collect();
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(csv_err)?;
        w.write_record(["gamma", "variant", "mean_auc", "mean_sse", "failed"])
            .map_err(csv_err)?;
        for p in &points {
            w.write_record([
                p.gamma.to_string(),
                p.variant.to_string(),
                p.mean_auc.to_string(),
                p.mean_sse.to_string(),
                p.failed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok((table, points))
}
