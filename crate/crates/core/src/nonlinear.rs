//! Non-linear structure learning with Tikhonov regularization.
//!
//! Intermediate responses `Y = KA` feed a second RBF kernel
//! `J = exp(-θE)`, `E` the squared distances between rows of `Y`, and the final
//! responses are `JB`. Training alternates backtracking gradient steps on `A`
//! and `θ` (gradients pulled back through `J → E → F → Y → A`) with an exact
//! closed-form solve for `B`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{clamp_theta, cross_sq_dist, pairwise_sq_dist, second_layer_kernel, DistanceMatrix};
use crate::linalg::{ensure_finite, ensure_shape, ensure_square, frob2, quad_trace, solve_shifted_spd, Mat};
use crate::ocksr::{fit_multi, validate_task_ids};
use crate::trace::TrainingTrace;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearHyperparams {
    pub gamma_n1: f64,
    pub gamma_n2: f64,
    pub eta_a: f64,
    /// Step for `θ`. Zero by default: `J` depends on `A` and `θ` only through
    /// `θ‖y_i − y_j‖²`, so shrinking `A` while growing `θ` keeps lowering the
    /// first-layer penalty and the pair never settles.
    pub eta_theta: f64,
    pub epsilon: f64,
    pub max_outer_iters: usize,
}

impl Default for NonlinearHyperparams {
    fn default() -> Self {
        Self {
            gamma_n1: 1.0,
            gamma_n2: 10.0,
            eta_a: 1.0,
            eta_theta: 0.0,
            epsilon: 1e-6,
            max_outer_iters: 500,
        }
    }
}

impl NonlinearHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_n1 >= 0.0) {
            return Err(Error::param("gamma_n1 must be nonnegative"));
        }
        if !(self.gamma_n2 > 0.0) {
            return Err(Error::param("gamma_n2 must be positive"));
        }
        if !(self.eta_a >= 0.0 && self.eta_theta >= 0.0) {
            return Err(Error::param("step sizes must be nonnegative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Two-layer model state. The derived fields `y`, `dist` and `j` are only
/// valid while the state is consistent; mutate `A` or `θ` through the setters
/// and call [`SecondLayerState::refresh`] before use.
#[derive(Debug, Clone)]
pub struct SecondLayerState {
    a: Mat,
    theta: f64,
    pub b: Mat,
    y: Mat,
    dist: DistanceMatrix,
    j: Mat,
    consistent: bool,
}

impl SecondLayerState {
    pub fn new(k: &Mat, a: Mat, theta: f64, b: Mat) -> Result<Self> {
        ensure_square(k, "K")?;
        ensure_shape(&a, k.nrows(), a.ncols(), "A")?;
        ensure_shape(&b, k.nrows(), a.ncols(), "B")?;
        let mut s = Self {
            y: Mat::zeros(0, 0),
            dist: DistanceMatrix {
                sq: Mat::zeros(0, 0),
                inner: Mat::zeros(0, 0),
            },
            j: Mat::zeros(0, 0),
            a,
            theta,
            b,
            consistent: false,
        };
        s.refresh(k)?;
        Ok(s)
    }

    /// Re-derives `Y`, `E`, `F` and `J` from the current `A` and `θ`, returning
    /// a warning if `θ` had to be clamped.
    pub fn refresh(&mut self, k: &Mat) -> Result<Option<String>> {
        self.y = k * &self.a;
        self.dist = pairwise_sq_dist(&self.y)?;
        let (j, warning) = second_layer_kernel(&self.dist, self.theta);
        self.theta = clamp_theta(self.theta).0;
        self.j = j;
        self.consistent = true;
        Ok(warning)
    }

    pub fn set_a(&mut self, a: Mat) {
        self.a = a;
        self.consistent = false;
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.theta = theta;
        self.consistent = false;
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn dist(&self) -> &DistanceMatrix {
        &self.dist
    }

    pub fn j(&self) -> &Mat {
        &self.j
    }

    pub fn is_consistent(&self) -> bool {
        self.consistent
    }

    fn require_consistent(&self) -> Result<()> {
        if self.consistent {
            Ok(())
        } else {
            Err(Error::State(
                "second-layer kernel is stale; refresh after updating A or theta".into(),
            ))
        }
    }
}

/// Second-layer regularization regime: Tikhonov here, sparse group lasso in
/// [`crate::sparse`].
pub(crate) trait SecondLayer {
    fn penalty(&self, j: &Mat, b: &Mat) -> f64;
    fn grad_j(&self, j: &Mat, b: &Mat, r: &Mat) -> Mat;
    fn solve_b(&self, j: &Mat, r: &Mat, warm: &Mat, trace: &mut TrainingTrace) -> Result<Mat>;
}

pub(crate) struct Tikhonov {
    pub gamma_n2: f64,
}

impl SecondLayer for Tikhonov {
    fn penalty(&self, j: &Mat, b: &Mat) -> f64 {
        self.gamma_n2 * quad_trace(b, j)
    }

    fn grad_j(&self, j: &Mat, b: &Mat, r: &Mat) -> Mat {
        grad_j_tikhonov(j, b, r, self.gamma_n2)
    }

    fn solve_b(&self, j: &Mat, r: &Mat, _warm: &Mat, _trace: &mut TrainingTrace) -> Result<Mat> {
        solve_b_closed(j, r, self.gamma_n2)
    }
}

/// `‖JB − R‖² + γ₁ tr(AᵀKA) + γ₂ tr(BᵀJB)` for a consistent state.
pub fn objective_qn(k: &Mat, state: &SecondLayerState, r: &Mat, hp: &NonlinearHyperparams) -> Result<f64> {
    state.require_consistent()?;
    ensure_shape(r, state.b.nrows(), state.b.ncols(), "R")?;
    Ok(objective_parts(k, &state.a, &state.j, &state.b, r, hp.gamma_n1) + hp.gamma_n2 * quad_trace(&state.b, &state.j))
}

/// Terms shared by both non-linear objectives: `‖JB − R‖² + γ₁ tr(AᵀKA)`.
pub(crate) fn objective_parts(k: &Mat, a: &Mat, j: &Mat, b: &Mat, r: &Mat, gamma_n1: f64) -> f64 {
    frob2(&(j * b - r)) + gamma_n1 * quad_trace(a, k)
}

/// `∂/∂J [‖JB − R‖² + γ₂ tr(BᵀJB)] = 2(JB − R)Bᵀ + γ₂BBᵀ`.
pub fn grad_j_tikhonov(j: &Mat, b: &Mat, r: &Mat, gamma_n2: f64) -> Mat {
    let bt = b.transpose();
    (j * b - r) * &bt * 2.0 + b * &bt * gamma_n2
}

#[derive(Debug, Clone)]
pub struct ChainGrad {
    pub da: Mat,
    pub dy: Mat,
}

/// Pulls `∂Q/∂J` back to `A` through `J = exp(-θE)`, `E_ij = F_ii + F_jj − 2F_ij`,
/// `F = YYᵀ` and `Y = KA`.
pub fn backprop_chain(dq_dj: &Mat, j: &Mat, y: &Mat, theta: f64, k: &Mat) -> Result<ChainGrad> {
    let n = j.nrows();
    ensure_shape(dq_dj, n, n, "dQ/dJ")?;
    ensure_shape(y, n, y.ncols(), "Y")?;
    ensure_shape(k, n, n, "K")?;
    let de = j.component_mul(dq_dj) * (-theta);
    let sym = &de + de.transpose();
    let mut df = &de * -2.0;
    for i in 0..n {
        df[(i, i)] += sym.row(i).sum();
    }
    let dy = (&df + df.transpose()) * y;
    let da = k * &dy;
    Ok(ChainGrad { da, dy })
}

/// Full gradient in `A`: the chain term plus `2γ₁KA`.
pub fn grad_total_a(chain: &ChainGrad, k: &Mat, a: &Mat, gamma_n1: f64) -> Mat {
    &chain.da + k * a * (2.0 * gamma_n1)
}

/// `∂Q/∂θ = trace((∂Q/∂J)ᵀ (−J ∘ E))`.
pub fn grad_theta(dq_dj: &Mat, j: &Mat, e: &DistanceMatrix) -> f64 {
    -dq_dj.component_mul(&j.component_mul(&e.sq)).sum()
}

/// `B = (J + γ₂I)⁻¹R`.
pub fn solve_b_closed(j: &Mat, r: &Mat, gamma_n2: f64) -> Result<Mat> {
    if !(gamma_n2 > 0.0) {
        return Err(Error::param("gamma_n2 must be positive for the closed-form B solve"));
    }
    ensure_square(j, "J")?;
    ensure_finite(r, "R")?;
    solve_shifted_spd(j, gamma_n2, r)
}

/// Block-diagonal all-ones matrix over contiguous task groups.
pub fn block_ones(task_ids: &[usize]) -> Mat {
    let n = task_ids.len();
    Mat::from_fn(n, n, |i, j| if task_ids[i] == task_ids[j] { 1.0 } else { 0.0 })
}

fn check_contiguous(task_ids: &[usize]) -> Result<()> {
    if task_ids.windows(2).all(|w| w[0] <= w[1]) {
        Ok(())
    } else {
        Err(Error::input("training samples must be ordered contiguously by task"))
    }
}

/// Initial state: independent per-task first-layer solves, `B` from the
/// block-diagonal `J_init`, and `θ` the reciprocal of the mean of `E`.
/// The returned state's `J` is `J(A, θ)`; `B` is the value from `J_init`.
pub fn init_nonlinear(
    k: &Mat,
    task_ids: &[usize],
    r: &Mat,
    gamma_n1: f64,
    gamma_init: f64,
) -> Result<SecondLayerState> {
    ensure_square(k, "K")?;
    if task_ids.len() != k.nrows() {
        return Err(Error::input("task ids do not match kernel size"));
    }
    validate_task_ids(task_ids, r.ncols())?;
    check_contiguous(task_ids)?;
    ensure_shape(r, k.nrows(), r.ncols(), "R")?;

    let a = fit_multi(k, r, gamma_n1)?;
    let j_init = block_ones(task_ids);
    let b = solve_shifted_spd(&j_init, gamma_init, r)?;
    let y = k * &a;
    let dist = pairwise_sq_dist(&y)?;
    let n = dist.sq.nrows();
    let mean = dist.sq.sum() / (n * n) as f64;
    if !(mean > 0.0) {
        return Err(Error::Degenerate(
            "all intermediate responses coincide; cannot set the second-layer width".into(),
        ));
    }
    SecondLayerState::new(k, a, 1.0 / mean, b)
}

/// Intermediate responses of new samples, their second-layer kernel against
/// the stored training responses, and the final responses `J_test B`.
pub fn predict_nonlinear(k_cross: &Mat, a: &Mat, y_train: &Mat, theta: f64, b: &Mat) -> Result<Mat> {
    if k_cross.ncols() != a.nrows() {
        return Err(Error::input(format!(
            "test kernel has {} columns, model has {} training samples",
            k_cross.ncols(),
            a.nrows()
        )));
    }
    ensure_shape(y_train, a.nrows(), a.ncols(), "training responses")?;
    ensure_shape(b, a.nrows(), b.ncols(), "B")?;
    let y_test = k_cross * a;
    let j_test = cross_sq_dist(&y_test, y_train).map(|d| (-theta * d).exp());
    Ok(j_test * b)
}

#[derive(Debug, Clone)]
pub struct NonlinearFit {
    pub state: SecondLayerState,
    pub trace: TrainingTrace,
}

pub(crate) struct OuterLoop {
    pub gamma_n1: f64,
    pub eta_a: f64,
    pub eta_theta: f64,
    pub epsilon: f64,
    pub max_outer_iters: usize,
}

fn total_objective(k: &Mat, s: &SecondLayerState, r: &Mat, gamma_n1: f64, layer: &dyn SecondLayer) -> f64 {
    objective_parts(k, &s.a, &s.j, &s.b, r, gamma_n1) + layer.penalty(&s.j, &s.b)
}

/// Alternating minimization shared by the Tikhonov and sparse variants.
pub(crate) fn run_outer_loop(
    k: &Mat,
    r: &Mat,
    state: &mut SecondLayerState,
    cfg: &OuterLoop,
    layer: &dyn SecondLayer,
    trace: &mut TrainingTrace,
) -> Result<()> {
    state.require_consistent()?;
    let q0 = total_objective(k, state, r, cfg.gamma_n1, layer);
    trace.record(q0);
    let mut q = q0;

    for it in 1..=cfg.max_outer_iters {
        if cfg.eta_a > 0.0 {
            let dj = layer.grad_j(&state.j, &state.b, r);
            let chain = backprop_chain(&dj, &state.j, &state.y, state.theta, k)?;
            let g = grad_total_a(&chain, k, &state.a, cfg.gamma_n1);
            let mut eta = cfg.eta_a;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let mut cand = state.clone();
                cand.set_a(&state.a - &g * eta);
                cand.refresh(k)?;
                let qc = total_objective(k, &cand, r, cfg.gamma_n1, layer);
                if qc <= q {
                    *state = cand;
                    q = qc;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if eta != cfg.eta_a {
                trace.adjust(it, "A", eta);
            }
            if !accepted {
                trace.warn(format!("iteration {it}: no descent step found for A"));
            }
        }

        if cfg.eta_theta > 0.0 {
            let dj = layer.grad_j(&state.j, &state.b, r);
            let g = grad_theta(&dj, &state.j, &state.dist);
            let mut eta = cfg.eta_theta;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let mut cand = state.clone();
                cand.set_theta(state.theta - eta * g);
                let warning = cand.refresh(k)?;
                let qc = total_objective(k, &cand, r, cfg.gamma_n1, layer);
                if qc <= q {
                    if let Some(w) = warning {
                        trace.warn(format!("iteration {it}: {w}"));
                    }
                    *state = cand;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if eta != cfg.eta_theta {
                trace.adjust(it, "theta", eta);
            }
            if !accepted {
                trace.warn(format!("iteration {it}: no descent step found for theta"));
            }
        }

        state.b = layer.solve_b(&state.j, r, &state.b, trace)?;
        let q_new = total_objective(k, state, r, cfg.gamma_n1, layer);
        trace.record(q_new);
        if !q_new.is_finite() || q_new > 1e3 * q0 {
            return Err(Error::Training {
                message: format!("objective diverged at iteration {it}: {q_new:e}"),
                trace: Box::new(trace.clone()),
            });
        }
        let prev = trace.objective[trace.objective.len() - 2];
        q = q_new;
        if (prev - q_new).abs() < cfg.epsilon * q0 {
            trace.converged = true;
            break;
        }
    }
    Ok(())
}

pub fn train_nonlinear(k: &Mat, task_ids: &[usize], r: &Mat, hp: &NonlinearHyperparams) -> Result<NonlinearFit> {
    hp.validate()?;
    let mut state = init_nonlinear(k, task_ids, r, hp.gamma_n1, hp.gamma_n2)?;
    let mut trace = TrainingTrace::default();
    let cfg = OuterLoop {
        gamma_n1: hp.gamma_n1,
        eta_a: hp.eta_a,
        eta_theta: hp.eta_theta,
        epsilon: hp.epsilon,
        max_outer_iters: hp.max_outer_iters,
    };
    run_outer_loop(k, r, &mut state, &cfg, &Tikhonov { gamma_n2: hp.gamma_n2 }, &mut trace)?;
    Ok(NonlinearFit { state, trace })
}
