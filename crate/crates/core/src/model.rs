//! Variant selection, model configuration and the trained-model type shared by
//! the harness, persistence and the bindings.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_width, rbf_cross, rbf_gram};
use crate::linalg::{ensure_finite, Mat};
use crate::linear::{train_linear, LinearHyperparams};
use crate::nonlinear::{predict_nonlinear, train_nonlinear, NonlinearHyperparams};
use crate::ocksr::{build_responses, fit_c_ocksr, fit_single, validate_task_ids, ResponseMode};
use crate::sparse::{train_sparse, SparseHyperparams};
use crate::trace::TrainingTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Ocksr,
    COcksr,
    Linear,
    Nonlinear,
    Sparse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ocksr,
        Variant::COcksr,
        Variant::Linear,
        Variant::Nonlinear,
        Variant::Sparse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ocksr => "OCKSR",
            Variant::COcksr => "C-OCKSR",
            Variant::Linear => "OCKSR-L",
            Variant::Nonlinear => "OCKSR-N",
            Variant::Sparse => "OCKSR-NS",
        }
    }

    /// Variants with a second RBF layer over intermediate responses.
    pub fn is_two_layer(self) -> bool {
        matches!(self, Variant::Nonlinear | Variant::Sparse)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('_', "-");
        Variant::ALL.into_iter().find(|v| v.as_str() == up).ok_or_else(|| {
            Error::param(format!(
                "unknown variant {s:?}; expected one of OCKSR, C-OCKSR, OCKSR-L, OCKSR-N, OCKSR-NS"
            ))
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// First-layer RBF width: the median heuristic over the training features or a
/// fixed σ. Written in config files as `kernel_width = "median"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WidthPolicy {
    #[default]
    Median,
    Sigma(f64),
}

impl WidthPolicy {
    pub fn resolve(self, x: &Mat) -> Result<f64> {
        match self {
            WidthPolicy::Median => median_heuristic_width(x),
            WidthPolicy::Sigma(s) if s.is_finite() && s > 0.0 => Ok(s),
            WidthPolicy::Sigma(s) => Err(Error::param(format!("kernel width must be positive, got {s}"))),
        }
    }
}

impl Serialize for WidthPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WidthPolicy::Median => s.serialize_str("median"),
            WidthPolicy::Sigma(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for WidthPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(WidthPolicy::Sigma(v)),
            Raw::Int(v) => Ok(WidthPolicy::Sigma(v as f64)),
            Raw::Name(s) if s.eq_ignore_ascii_case("median") => Ok(WidthPolicy::Median),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "kernel_width must be \"median\" or a positive number, got {s:?}"
            ))),
        }
    }
}

fn default_gamma() -> f64 {
    1.0
}

/// Everything needed to train one variant. Only the section belonging to the
/// chosen variant is read during training; `gamma` is the ridge of the two
/// single-layer baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub kernel_width: WidthPolicy,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub linear: LinearHyperparams,
    #[serde(default)]
    pub nonlinear: NonlinearHyperparams,
    #[serde(default)]
    pub sparse: SparseHyperparams,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            kernel_width: WidthPolicy::Median,
            gamma: default_gamma(),
            linear: LinearHyperparams::default(),
            nonlinear: NonlinearHyperparams::default(),
            sparse: SparseHyperparams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let WidthPolicy::Sigma(s) = self.kernel_width {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::param(format!("kernel width must be positive, got {s}")));
            }
        }
        match self.variant {
            Variant::Ocksr | Variant::COcksr => {
                if !(self.gamma.is_finite() && self.gamma >= 0.0) {
                    return Err(Error::param(format!("gamma must be nonnegative, got {}", self.gamma)));
                }
                Ok(())
            }
            Variant::Linear => self.linear.validate(),
            Variant::Nonlinear => self.nonlinear.validate(),
            Variant::Sparse => self.sparse.validate(),
        }
    }

    /// The ridge on the first layer for this variant.
    pub fn first_layer_gamma(&self) -> f64 {
        match self.variant {
            Variant::Ocksr | Variant::COcksr => self.gamma,
            Variant::Linear => self.linear.gamma_l1,
            Variant::Nonlinear => self.nonlinear.gamma_n1,
            Variant::Sparse => self.sparse.gamma_n1,
        }
    }

    pub fn set_first_layer_gamma(&mut self, g: f64) {
        match self.variant {
            Variant::Ocksr | Variant::COcksr => self.gamma = g,
            Variant::Linear => self.linear.gamma_l1 = g,
            Variant::Nonlinear => self.nonlinear.gamma_n1 = g,
            Variant::Sparse => self.sparse.gamma_n1 = g,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::param(format!("bad model config: {e}")))
    }
}

/// Hex SHA-256 of a config text.
pub fn fingerprint(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}

fn one_hot(task_ids: &[usize], tasks: usize) -> Result<Mat> {
    build_responses(task_ids, tasks, ResponseMode::JointOneHot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub sigma: f64,
    /// Second-layer exponent coefficient, two-layer variants only.
    pub theta: Option<f64>,
    pub train_features: Mat,
    pub task_ids: Vec<usize>,
    pub tasks: usize,
    /// First-layer coefficients, n×T. Single-task OCKSR stores each task's
    /// solution in its own column, zero outside that task's rows.
    pub a: Mat,
    /// T×T structure matrix (OCKSR-L) or n×T second-layer coefficients.
    pub b: Option<Mat>,
    /// Training intermediate responses `KA`, two-layer variants only.
    pub y_train: Option<Mat>,
    pub target_means: Vec<f64>,
    pub trace: TrainingTrace,
    pub fingerprint: String,
}

impl TrainedModel {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Trains the configured variant on task-contiguous training samples.
    pub fn fit(config: &ModelConfig, x: &Mat, task_ids: &[usize], tasks: usize) -> Result<Self> {
        config.validate()?;
        ensure_finite(x, "training features")?;
        if task_ids.len() != x.nrows() {
            return Err(Error::input(format!(
                "{} task ids for {} training samples",
                task_ids.len(),
                x.nrows()
            )));
        }
        validate_task_ids(task_ids, tasks)?;
        if !task_ids.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::input("training samples must be ordered contiguously by task"));
        }
        if let Some(t) = (0..tasks).find(|t| !task_ids.contains(t)) {
            return Err(Error::input(format!("task {t} has no training samples")));
        }
        let sigma = config.kernel_width.resolve(x)?;
        let k = rbf_gram(x, sigma)?;
        let n = x.nrows();

        let mut theta = None;
        let mut b = None;
        let mut y_train = None;
        let mut trace = TrainingTrace::default();
        let a = match config.variant {
            Variant::Ocksr => {
                let mut a = Mat::zeros(n, tasks);
                for t in 0..tasks {
                    let rows: Vec<usize> = (0..n).filter(|&i| task_ids[i] == t).collect();
                    let kt = k.select_rows(&rows).select_columns(&rows);
                    let at = fit_single(&kt, &DVector::from_element(rows.len(), 1.0), config.gamma)?;
                    for (p, &i) in rows.iter().enumerate() {
                        a[(i, t)] = at[p];
                    }
                }
                a
            }
            Variant::COcksr => fit_c_ocksr(&k, task_ids, tasks, config.gamma)?,
            Variant::Linear => {
                let r = one_hot(task_ids, tasks)?;
                let fit = train_linear(&k, &r, &config.linear)?;
                b = Some(fit.b);
                trace = fit.trace;
                fit.a
            }
            Variant::Nonlinear => {
                let r = one_hot(task_ids, tasks)?;
                let fit = train_nonlinear(&k, task_ids, &r, &config.nonlinear)?;
                theta = Some(fit.state.theta());
                b = Some(fit.state.b.clone());
                y_train = Some(fit.state.y().clone());
                trace = fit.trace;
                fit.state.a().clone()
            }
            Variant::Sparse => {
                let r = one_hot(task_ids, tasks)?;
                let fit = train_sparse(&k, task_ids, &r, &config.sparse)?;
                theta = Some(fit.state.theta());
                b = Some(fit.state.b.clone());
                y_train = Some(fit.state.y().clone());
                trace = fit.trace;
                fit.state.a().clone()
            }
        };

        let text = config.to_toml();
        let mut model = TrainedModel {
            config: config.clone(),
            sigma,
            theta,
            train_features: x.clone(),
            task_ids: task_ids.to_vec(),
            tasks,
            a,
            b,
            y_train,
            target_means: Vec::new(),
            trace,
            fingerprint: fingerprint(&text),
        };
        let train = model.responses(&k)?;
        model.target_means = (0..tasks)
            .map(|t| {
                let rows: Vec<usize> = (0..n).filter(|&i| task_ids[i] == t).collect();
                rows.iter().map(|&i| train[(i, t)]).sum::<f64>() / rows.len() as f64
            })
            .collect();
        Ok(model)
    }

    /// Final responses (m×T) for a query-by-training kernel block.
    pub fn responses(&self, k_cross: &Mat) -> Result<Mat> {
        if k_cross.ncols() != self.a.nrows() {
            return Err(Error::input(format!(
                "kernel has {} columns, model has {} training samples",
                k_cross.ncols(),
                self.a.nrows()
            )));
        }
        match (self.config.variant, &self.b) {
            (Variant::Ocksr | Variant::COcksr, _) => Ok(k_cross * &self.a),
            (Variant::Linear, Some(b)) => Ok(k_cross * (&self.a * b)),
            (Variant::Nonlinear | Variant::Sparse, Some(b)) => {
                let (y, theta) = match (&self.y_train, self.theta) {
                    (Some(y), Some(t)) => (y, t),
                    _ => return Err(Error::State("two-layer model lacks Y or theta".into())),
                };
                predict_nonlinear(k_cross, &self.a, y, theta, b)
            }
            (v, None) => Err(Error::State(format!("{v} model has no B matrix"))),
        }
    }

    /// Final responses for raw query features.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        ensure_finite(x, "query features")?;
        let k_cross = rbf_cross(x, &self.train_features, self.sigma)?;
        self.responses(&k_cross)
    }

    /// Per-task dissimilarity scores `|y − mean_t|`, m×T.
    pub fn score(&self, x: &Mat) -> Result<Mat> {
        let mut y = self.predict(x)?;
        for (t, mean) in self.target_means.iter().enumerate() {
            y.column_mut(t).apply(|v| *v = (*v - mean).abs());
        }
        Ok(y)
    }

    /// Sum of squared errors of the training responses against the targets
    /// the variant was fitted to. Single-task OCKSR is charged only on its own
    /// task's rows.
    pub fn training_sse(&self) -> Result<f64> {
        let k = rbf_gram(&self.train_features, self.sigma)?;
        let y = self.responses(&k)?;
        let r = one_hot(&self.task_ids, self.tasks)?;
        let mut sse = 0.0;
        for i in 0..y.nrows() {
            for t in 0..y.ncols() {
                if self.config.variant == Variant::Ocksr && self.task_ids[i] != t {
                    continue;
                }
                sse += (y[(i, t)] - r[(i, t)]).powi(2);
            }
        }
        Ok(sse)
    }

    /// Checks shapes and finiteness after deserialization.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.train_features.nrows();
        let t = self.tasks;
        let bad = |m: String| Err(Error::Corruption(m));
        if self.task_ids.len() != n || self.a.shape() != (n, t) || self.target_means.len() != t {
            return bad("matrix shapes disagree with the training set".into());
        }
        if self.task_ids.iter().any(|&id| id >= t) {
            return bad("task id out of range".into());
        }
        let b_shape = match self.config.variant {
            Variant::Ocksr | Variant::COcksr => None,
            Variant::Linear => Some((t, t)),
            Variant::Nonlinear | Variant::Sparse => Some((n, t)),
        };
        if self.b.as_ref().map(|b| b.shape()) != b_shape {
            return bad(format!("B has the wrong shape for {}", self.config.variant));
        }
        let two = self.config.variant.is_two_layer();
        if two != self.theta.is_some() || self.y_train.as_ref().map(|y| y.shape()) != two.then_some((n, t)) {
            return bad("second-layer data inconsistent with the variant".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("kernel width is not positive".into());
        }
        Ok(())
    }
}
