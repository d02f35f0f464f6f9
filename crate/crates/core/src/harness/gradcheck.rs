//! Analytic gradients against central finite differences on random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{median_heuristic_width, pairwise_sq_dist, rbf_gram};
use crate::linalg::Mat;
use crate::linear::{grad_b, objective_ql, LinearHyperparams};
use crate::nonlinear::{
    backprop_chain, grad_j_tikhonov, grad_theta, grad_total_a, objective_qn, NonlinearHyperparams, SecondLayerState,
};
use crate::ocksr::{build_responses, ResponseMode};
use crate::sparse::{grad_j_sparse, objective_qns, SparseHyperparams};

/// Relative error above which a check fails outright.
pub const HARD_FAIL: f64 = 1e-4;
/// Gradient norm below which an instance counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;
const MAX_REGENERATIONS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradTarget {
    #[serde(rename = "linear-B")]
    LinearB,
    #[serde(rename = "nonlinear-A")]
    NonlinearA,
    #[serde(rename = "nonlinear-theta")]
    NonlinearTheta,
    #[serde(rename = "sparse-A")]
    SparseA,
}

impl GradTarget {
    pub const ALL: [GradTarget; 4] = [
        GradTarget::LinearB,
        GradTarget::NonlinearA,
        GradTarget::NonlinearTheta,
        GradTarget::SparseA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradTarget::LinearB => "linear-B",
            GradTarget::NonlinearA => "nonlinear-A",
            GradTarget::NonlinearTheta => "nonlinear-theta",
            GradTarget::SparseA => "sparse-A",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('θ', "theta");
        GradTarget::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(&s))
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown gradient check {s:?}; expected linear-B, nonlinear-A, nonlinear-theta or sparse-A"
                ))
            })
    }
}

/// A point at which to compare gradients. `b` is T×T for `linear-B` and n×T
/// otherwise.
#[derive(Debug, Clone)]
pub struct Instance {
    pub k: Mat,
    pub r: Mat,
    pub a: Mat,
    pub b: Mat,
    pub theta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub target: GradTarget,
    pub n: usize,
    pub tasks: usize,
    pub seed: u64,
    pub h: f64,
    /// `max_i |g_i − ĝ_i| / max(‖g‖_∞, ‖ĝ‖_∞)`.
    pub max_rel_error: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub notes: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.skipped || self.max_rel_error < HARD_FAIL
    }
}

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random instance with task-contiguous one-hot responses and an RBF kernel
/// over Gaussian features.
pub fn random_instance(target: GradTarget, n: usize, tasks: usize, seed: u64) -> Result<Instance> {
    if tasks == 0 || n < tasks.max(2) {
        return Err(Error::param(format!("need n >= max(T, 2), got n = {n}, T = {tasks}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gauss(&mut rng, n, 3, 1.0);
    let k = rbf_gram(&x, median_heuristic_width(&x)?)?;
    let task_ids: Vec<usize> = (0..n).map(|i| i * tasks / n).collect();
    let r = build_responses(&task_ids, tasks, ResponseMode::JointOneHot)?;
    let a = gauss(&mut rng, n, tasks, 0.5);
    let b = match target {
        GradTarget::LinearB => gauss(&mut rng, tasks, tasks, 1.0),
        _ => gauss(&mut rng, n, tasks, 0.5),
    };
    let y = &k * &a;
    let e = pairwise_sq_dist(&y)?;
    let mean = e.sq.sum() / (n * n) as f64;
    Ok(Instance {
        k,
        r,
        a,
        b,
        theta: if mean > 0.0 { 1.0 / mean } else { 1.0 },
        gamma1: rng.random_range(0.01..1.0),
        gamma2: rng.random_range(0.01..1.0),
        gamma3: rng.random_range(0.01..1.0),
    })
}

fn linear_hp(inst: &Instance) -> LinearHyperparams {
    LinearHyperparams {
        gamma_l1: inst.gamma1,
        gamma_l2: inst.gamma2,
        gamma_l3: inst.gamma3,
        ..LinearHyperparams::default()
    }
}

fn nonlinear_hp(inst: &Instance) -> NonlinearHyperparams {
    NonlinearHyperparams {
        gamma_n1: inst.gamma1,
        gamma_n2: inst.gamma2,
        ..NonlinearHyperparams::default()
    }
}

fn sparse_hp(inst: &Instance) -> SparseHyperparams {
    SparseHyperparams {
        gamma_n1: inst.gamma1,
        gamma_n2: inst.gamma2,
        gamma_n3: inst.gamma3,
        ..SparseHyperparams::default()
    }
}

/// Objective as a function of the checked block, and its analytic gradient.
fn objective(target: GradTarget, inst: &Instance, x: &Mat) -> Result<f64> {
    match target {
        GradTarget::LinearB => objective_ql(&inst.k, &inst.a, x, &inst.r, &linear_hp(inst)),
        GradTarget::NonlinearA => {
            let s = SecondLayerState::new(&inst.k, x.clone(), inst.theta, inst.b.clone())?;
            objective_qn(&inst.k, &s, &inst.r, &nonlinear_hp(inst))
        }
        GradTarget::NonlinearTheta => {
            let s = SecondLayerState::new(&inst.k, inst.a.clone(), x[(0, 0)], inst.b.clone())?;
            objective_qn(&inst.k, &s, &inst.r, &nonlinear_hp(inst))
        }
        GradTarget::SparseA => {
            let s = SecondLayerState::new(&inst.k, x.clone(), inst.theta, inst.b.clone())?;
            objective_qns(&inst.k, x, s.j(), &inst.b, &inst.r, &sparse_hp(inst))
        }
    }
}

fn analytic(target: GradTarget, inst: &Instance) -> Result<Mat> {
    if target == GradTarget::LinearB {
        return grad_b(&inst.k, &inst.a, &inst.b, &inst.r, &linear_hp(inst));
    }
    let s = SecondLayerState::new(&inst.k, inst.a.clone(), inst.theta, inst.b.clone())?;
    let dj = match target {
        GradTarget::SparseA => grad_j_sparse(s.j(), &s.b, &inst.r),
        _ => grad_j_tikhonov(s.j(), &s.b, &inst.r, inst.gamma2),
    };
    if target == GradTarget::NonlinearTheta {
        return Ok(Mat::from_element(1, 1, grad_theta(&dj, s.j(), s.dist())));
    }
    let chain = backprop_chain(&dj, s.j(), s.y(), s.theta(), &inst.k)?;
    Ok(grad_total_a(&chain, &inst.k, s.a(), inst.gamma1))
}

fn point(target: GradTarget, inst: &Instance) -> Mat {
    match target {
        GradTarget::LinearB => inst.b.clone(),
        GradTarget::NonlinearTheta => Mat::from_element(1, 1, inst.theta),
        GradTarget::NonlinearA | GradTarget::SparseA => inst.a.clone(),
    }
}

/// Compares the analytic gradient with central differences of step `h` at
/// one instance. An identically zero gradient is reported as skipped.
pub fn check_instance(target: GradTarget, inst: &Instance, h: f64) -> Result<GradReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param(format!("step must be positive, got {h}")));
    }
    let g = analytic(target, inst)?;
    let x0 = point(target, inst);
    let mut fd = Mat::zeros(x0.nrows(), x0.ncols());
    for idx in 0..x0.len() {
        let mut plus = x0.clone();
        plus[idx] += h;
        let mut minus = x0.clone();
        minus[idx] -= h;
        fd[idx] = (objective(target, inst, &plus)? - objective(target, inst, &minus)?) / (2.0 * h);
    }
    let scale = g.amax().max(fd.amax());
    let mut report = GradReport {
        target,
        n: inst.k.nrows(),
        tasks: inst.r.ncols(),
        seed: 0,
        h,
        max_rel_error: 0.0,
        grad_norm: g.norm(),
        skipped: false,
        notes: Vec::new(),
    };
    if scale == 0.0 {
        report.skipped = true;
        report.notes.push("gradient identically zero; check skipped".into());
    } else {
        report.max_rel_error = (&g - &fd).amax() / scale;
    }
    Ok(report)
}

/// Builds a random instance and checks it. Instances whose analytic gradient
/// norm is below [`DEGENERATE_NORM`] are regenerated with the next seed.
pub fn gradcheck(target: GradTarget, n: usize, tasks: usize, seed: u64, h: f64) -> Result<GradReport> {
    let mut notes = Vec::new();
    for s in seed..seed + MAX_REGENERATIONS {
        let inst = random_instance(target, n, tasks, s)?;
        if analytic(target, &inst)?.norm() < DEGENERATE_NORM {
            notes.push(format!(
                "seed {s} degenerate (gradient norm below {DEGENERATE_NORM:e}); regenerated"
            ));
            continue;
        }
        let mut report = check_instance(target, &inst, h)?;
        report.seed = s;
        notes.append(&mut report.notes);
        report.notes = notes;
        return Ok(report);
    }
    Err(Error::Degenerate(format!(
        "{MAX_REGENERATIONS} consecutive degenerate instances from seed {seed}"
    )))
}

/// The all-zero instance: `R = 0`, `A = 0`, `B = 0` and zero weights.
pub fn zero_instance(target: GradTarget, n: usize, tasks: usize) -> Result<Instance> {
    let mut inst = random_instance(target, n, tasks, 0)?;
    inst.r.fill(0.0);
    inst.a.fill(0.0);
    inst.b.fill(0.0);
    inst.theta = 1.0;
    inst.gamma1 = 0.0;
    inst.gamma2 = 0.0;
    inst.gamma3 = 0.0;
    Ok(inst)
}
