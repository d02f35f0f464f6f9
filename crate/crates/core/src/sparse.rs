//! Sparse non-linear structure learning.
//!
//! Same two-layer model as [`crate::nonlinear`], but `B` carries a sparse
//! group lasso penalty `γ₂‖B‖₁ + γ₃ Σ_t ‖b_t‖₂` (groups are the task columns)
//! and is re-solved each outer iteration by accelerated proximal gradient with
//! monotone restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_shape, ensure_square, frob2, power_iteration, quad_trace, solve_shifted_spd, Mat};
use crate::nonlinear::{init_nonlinear, run_outer_loop, OuterLoop, SecondLayer, SecondLayerState};
use crate::trace::TrainingTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseHyperparams {
    pub gamma_n1: f64,
    /// Element-wise L1 weight.
    pub gamma_n2: f64,
    /// Task-column group weight.
    pub gamma_n3: f64,
    pub eta_a: f64,
    /// Step for `θ`. Zero by default: `J` depends on `A` and `θ` only through
    /// `θ‖y_i − y_j‖²`, so shrinking `A` while growing `θ` keeps lowering the
    /// first-layer penalty and the pair never settles.
    pub eta_theta: f64,
    pub epsilon: f64,
    pub max_outer_iters: usize,
    pub prox_max_iters: usize,
    /// FISTA iteration cap for the warm-started `B` update inside each outer iteration.
    pub inner_iters: usize,
    pub prox_tol: f64,
    /// Use the squared group norm `Σ‖b_t‖₂²` instead of `Σ‖b_t‖₂`.
    pub squared_group: bool,
    /// Ridge used for the initial `B = (J_init + γI)⁻¹R`.
    pub gamma_init: f64,
}

impl Default for SparseHyperparams {
    fn default() -> Self {
        Self {
            gamma_n1: 1.0,
            gamma_n2: 1.0,
            gamma_n3: 1.0,
            eta_a: 1.0,
            eta_theta: 0.0,
            epsilon: 1e-6,
            max_outer_iters: 500,
            prox_max_iters: 5000,
            inner_iters: 100,
            prox_tol: 1e-9,
            squared_group: false,
            gamma_init: 1e-2,
        }
    }
}

impl SparseHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_n1 >= 0.0 && self.gamma_n2 >= 0.0 && self.gamma_n3 >= 0.0) {
            return Err(Error::param("sparse regularization weights must be nonnegative"));
        }
        if !(self.eta_a >= 0.0 && self.eta_theta >= 0.0) {
            return Err(Error::param("step sizes must be nonnegative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        if !(self.prox_tol >= 0.0) || self.prox_max_iters == 0 || self.inner_iters == 0 {
            return Err(Error::param("proximal solver controls must be positive"));
        }
        if !(self.gamma_init > 0.0) {
            return Err(Error::param("gamma_init must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub nonzero_fraction: f64,
    pub column_norms: Vec<f64>,
    pub zero_columns: Vec<usize>,
}

impl SparsityReport {
    pub fn of(b: &Mat) -> Self {
        let total = b.len().max(1);
        let nonzero = b.iter().filter(|&&v| v != 0.0).count();
        let column_norms: Vec<f64> = b.column_iter().map(|c| c.norm()).collect();
        let zero_columns = b
            .column_iter()
            .enumerate()
            .filter(|(_, c)| c.iter().all(|&v| v == 0.0))
            .map(|(t, _)| t)
            .collect();
        Self {
            nonzero_fraction: nonzero as f64 / total as f64,
            column_norms,
            zero_columns,
        }
    }
}

pub fn sgl_penalty(b: &Mat, gamma_n2: f64, gamma_n3: f64, squared_group: bool) -> f64 {
    let l1: f64 = b.iter().map(|v| v.abs()).sum();
    let group: f64 = if squared_group {
        frob2(b)
    } else {
        b.column_iter().map(|c| c.norm()).sum()
    };
    gamma_n2 * l1 + gamma_n3 * group
}

/// `‖JB − R‖² + γ₁ tr(AᵀKA) + γ₂‖B‖₁ + γ₃ Σ_t ‖b_t‖₂`.
pub fn objective_qns(k: &Mat, a: &Mat, j: &Mat, b: &Mat, r: &Mat, hp: &SparseHyperparams) -> Result<f64> {
    ensure_square(j, "J")?;
    ensure_shape(b, j.nrows(), r.ncols(), "B")?;
    ensure_shape(r, j.nrows(), r.ncols(), "R")?;
    Ok(frob2(&(j * b - r))
        + hp.gamma_n1 * quad_trace(a, k)
        + sgl_penalty(b, hp.gamma_n2, hp.gamma_n3, hp.squared_group))
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Proximal operator of `t1‖X‖₁ + t2 Σ_t ‖x_t‖₂`: element-wise soft
/// thresholding followed by column-wise group shrinkage.
pub fn prox_sparse_group(v: &Mat, t1: f64, t2: f64) -> Mat {
    let mut out = v.map(|x| soft(x, t1));
    for mut col in out.column_iter_mut() {
        let norm = col.norm();
        let scale = if norm > 0.0 { (1.0 - t2 / norm).max(0.0) } else { 0.0 };
        col *= scale;
    }
    out
}

/// Proximal operator of `t1‖X‖₁ + t2 Σ_t ‖x_t‖₂²`.
pub fn prox_sparse_group_squared(v: &Mat, t1: f64, t2: f64) -> Mat {
    v.map(|x| soft(x, t1) / (1.0 + 2.0 * t2))
}

/// `∂‖JB − R‖²/∂J = 2(JB − R)Bᵀ`.
pub fn grad_j_sparse(j: &Mat, b: &Mat, r: &Mat) -> Mat {
    (j * b - r) * b.transpose() * 2.0
}

#[derive(Debug, Clone)]
pub struct SparseSolve {
    pub b: Mat,
    pub report: SparsityReport,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// Minimizes `‖JB − R‖² + γ₂‖B‖₁ + γ₃ Σ‖b_t‖₂` over `B` by FISTA with step
/// `1/L`, `L = 2λ_max(J)²`. A step that would raise the objective is rejected
/// and momentum restarted, so the iterate objectives never increase. If even an
/// unaccelerated step fails to descend, `L` is doubled.
/// With both weights zero the problem is least squares and is solved directly.
pub fn solve_b_sparse(j: &Mat, r: &Mat, hp: &SparseHyperparams, warm: Option<&Mat>) -> Result<SparseSolve> {
    ensure_square(j, "J")?;
    ensure_shape(r, j.nrows(), r.ncols(), "R")?;
    let objective = |b: &Mat| frob2(&(j * b - r)) + sgl_penalty(b, hp.gamma_n2, hp.gamma_n3, hp.squared_group);
    let prox = |v: &Mat, step: f64| {
        if hp.squared_group {
            prox_sparse_group_squared(v, step * hp.gamma_n2, step * hp.gamma_n3)
        } else {
            prox_sparse_group(v, step * hp.gamma_n2, step * hp.gamma_n3)
        }
    };

    if hp.gamma_n2 == 0.0 && hp.gamma_n3 == 0.0 {
        // no penalty: plain least squares, solved directly
        let mut b = solve_shifted_spd(j, 0.0, r)?;
        let mut f = objective(&b);
        if let Some(w) = warm {
            ensure_shape(w, r.nrows(), r.ncols(), "warm start")?;
            let fw = objective(w);
            if fw < f {
                b = w.clone();
                f = fw;
            }
        }
        return Ok(SparseSolve {
            report: SparsityReport::of(&b),
            b,
            iterations: 0,
            converged: true,
            objective: f,
        });
    }

    let lambda = power_iteration(j, 50);
    let mut lip = (2.0 * lambda * lambda).max(f64::MIN_POSITIVE);
    let jr = j * r;
    let jj = j * j;

    let mut x = match warm {
        Some(w) => {
            ensure_shape(w, r.nrows(), r.ncols(), "warm start")?;
            w.clone()
        }
        None => Mat::zeros(r.nrows(), r.ncols()),
    };
    let mut fx = objective(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut momentum = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < hp.prox_max_iters {
        iterations += 1;
        let grad = (&jj * &y - &jr) * 2.0;
        let z = prox(&(&y - grad / lip), 1.0 / lip);
        let fz = objective(&z);
        if fz <= fx {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &z + (&z - &x) * ((t - 1.0) / t_next);
            let change = (fx - fz) / fx.abs().max(f64::MIN_POSITIVE);
            x = z;
            fx = fz;
            t = t_next;
            momentum = true;
            if change <= hp.prox_tol {
                converged = true;
                break;
            }
        } else if momentum {
            y = x.clone();
            t = 1.0;
            momentum = false;
        } else {
            lip *= 2.0;
        }
    }

    Ok(SparseSolve {
        report: SparsityReport::of(&x),
        b: x,
        iterations,
        converged,
        objective: fx,
    })
}

struct SparseGroup<'a> {
    hp: &'a SparseHyperparams,
}

impl SecondLayer for SparseGroup<'_> {
    fn penalty(&self, _j: &Mat, b: &Mat) -> f64 {
        sgl_penalty(b, self.hp.gamma_n2, self.hp.gamma_n3, self.hp.squared_group)
    }

    fn grad_j(&self, j: &Mat, b: &Mat, r: &Mat) -> Mat {
        grad_j_sparse(j, b, r)
    }

    fn solve_b(&self, j: &Mat, r: &Mat, warm: &Mat, trace: &mut TrainingTrace) -> Result<Mat> {
        // warm-started and capped: never worse than `warm`, so the outer
        // objective still cannot increase
        let capped = SparseHyperparams {
            prox_max_iters: self.hp.inner_iters,
            ..self.hp.clone()
        };
        let solve = solve_b_sparse(j, r, &capped, Some(warm))?;
        trace.sparsity.push(solve.report);
        Ok(solve.b)
    }
}

#[derive(Debug, Clone)]
pub struct SparseFit {
    pub state: SecondLayerState,
    pub trace: TrainingTrace,
    pub report: SparsityReport,
}

pub fn train_sparse(k: &Mat, task_ids: &[usize], r: &Mat, hp: &SparseHyperparams) -> Result<SparseFit> {
    hp.validate()?;
    let mut state = init_nonlinear(k, task_ids, r, hp.gamma_n1, hp.gamma_init)?;
    let mut trace = TrainingTrace::default();
    let cfg = OuterLoop {
        gamma_n1: hp.gamma_n1,
        eta_a: hp.eta_a,
        eta_theta: hp.eta_theta,
        epsilon: hp.epsilon,
        max_outer_iters: hp.max_outer_iters,
    };
    run_outer_loop(k, r, &mut state, &cfg, &SparseGroup { hp }, &mut trace)?;

    let last = trace.last().unwrap_or(f64::INFINITY);
    let polish = solve_b_sparse(state.j(), r, hp, Some(&state.b))?;
    if !polish.converged {
        trace.warn(format!(
            "final sparse B solve stopped at the iteration cap ({})",
            polish.iterations
        ));
    }
    let q = polish.objective + hp.gamma_n1 * quad_trace(state.a(), k);
    if q < last {
        state.b = polish.b;
        trace.record(q);
        trace.sparsity.push(polish.report);
    }
    let report = SparsityReport::of(&state.b);
    Ok(SparseFit { state, trace, report })
}
