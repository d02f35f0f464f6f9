//! Linear structure learning: a first layer of kernel coefficients `A` mixed
//! by a T×T structure matrix `B`, trained by alternating an exact Sylvester
//! solve for `A` with backtracking gradient steps on `B`.
//!
//! Objective:
//! `‖KAB − R‖² + γ₁ tr(AᵀKA) + γ₂ tr(BᵀB) + γ₃ ‖B‖_*`

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, ensure_shape, ensure_square, frob2, quad_trace, Mat};
use crate::trace::TrainingTrace;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearHyperparams {
    pub gamma_l1: f64,
    pub gamma_l2: f64,
    pub gamma_l3: f64,
    pub eta_b: f64,
    /// Convergence tolerance on the objective change, relative to the initial objective.
    pub epsilon: f64,
    pub max_outer_iters: usize,
    /// Project `B` onto the symmetric PSD cone after every step.
    pub project_psd: bool,
    /// Keep `B` fixed at the identity.
    pub freeze_structure: bool,
}

impl Default for LinearHyperparams {
    fn default() -> Self {
        Self {
            gamma_l1: 1.0,
            gamma_l2: 1.0,
            gamma_l3: 1e-3,
            eta_b: 1e-2,
            epsilon: 1e-8,
            max_outer_iters: 500,
            project_psd: false,
            freeze_structure: false,
        }
    }
}

impl LinearHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_l1 > 0.0) {
            return Err(Error::param("gamma_l1 must be positive"));
        }
        if !(self.gamma_l2 >= 0.0 && self.gamma_l3 >= 0.0) {
            return Err(Error::param("gamma_l2 and gamma_l3 must be nonnegative"));
        }
        if !(self.eta_b > 0.0) {
            return Err(Error::param("eta_b must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub a: Mat,
    pub b: Mat,
    /// Composed single-layer discriminant `C = AB`.
    pub c: Mat,
    pub trace: TrainingTrace,
}

fn check_dims(k: &Mat, a: &Mat, b: &Mat, r: &Mat) -> Result<()> {
    ensure_square(k, "K")?;
    let (n, t) = (k.nrows(), r.ncols());
    ensure_shape(r, n, t, "R")?;
    ensure_shape(a, n, t, "A")?;
    ensure_shape(b, t, t, "B")
}

pub fn singular_values(b: &Mat) -> Vec<f64> {
    b.clone().svd(false, false).singular_values.iter().copied().collect()
}

pub fn nuclear_norm(b: &Mat) -> f64 {
    singular_values(b).iter().sum()
}

pub fn objective_ql(k: &Mat, a: &Mat, b: &Mat, r: &Mat, hp: &LinearHyperparams) -> Result<f64> {
    check_dims(k, a, b, r)?;
    let ka = k * a;
    let fit = frob2(&(&ka * b - r));
    Ok(fit + hp.gamma_l1 * quad_trace(a, k) + hp.gamma_l2 * frob2(b) + hp.gamma_l3 * nuclear_norm(b))
}

/// Solves `K A (BBᵀ) + γA = R Bᵀ`, the stationarity condition of the objective
/// in `A` for fixed `B`, in the joint eigenbasis of `K` and `BBᵀ`.
pub fn solve_a_sylvester(k: &Mat, b: &Mat, r: &Mat, gamma_l1: f64) -> Result<Mat> {
    if !(gamma_l1 > 0.0) {
        return Err(Error::param("gamma_l1 must be positive for the Sylvester solve"));
    }
    ensure_square(k, "K")?;
    ensure_finite(b, "B")?;
    let t = r.ncols();
    ensure_shape(r, k.nrows(), t, "R")?;
    ensure_shape(b, t, t, "B")?;

    let bbt = b * b.transpose();
    let mix = SymmetricEigen::new((&bbt + bbt.transpose()) * 0.5);
    let kern = SymmetricEigen::new((k + k.transpose()) * 0.5);
    let (v, q) = (&kern.eigenvectors, &mix.eigenvectors);

    let mut rotated = v.transpose() * (r * b.transpose()) * q;
    for i in 0..rotated.nrows() {
        let d = kern.eigenvalues[i].max(0.0);
        for j in 0..rotated.ncols() {
            let denom = d * mix.eigenvalues[j].max(0.0) + gamma_l1;
            if !(denom > 0.0) {
                return Err(Error::Numerical {
                    message: "singular Sylvester operator".into(),
                    condition: f64::INFINITY,
                });
            }
            rotated[(i, j)] /= denom;
        }
    }
    Ok(v * rotated * q.transpose())
}

/// Relative residual `‖KABBᵀ − RBᵀ + γA‖ / ‖RBᵀ‖`.
pub fn sylvester_residual(k: &Mat, a: &Mat, b: &Mat, r: &Mat, gamma_l1: f64) -> f64 {
    let rb = r * b.transpose();
    let res = k * a * (b * b.transpose()) - &rb + a * gamma_l1;
    res.norm() / rb.norm().max(f64::MIN_POSITIVE)
}

/// Subgradient of the nuclear norm, `UVᵀ` over the nonzero singular values.
pub fn nuclear_subgradient(b: &Mat) -> Result<Mat> {
    let t = b.nrows();
    let svd = b.clone().svd(true, true);
    let (u, vt) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => {
            return Err(Error::Numerical {
                message: "SVD of B failed".into(),
                condition: f64::NAN,
            })
        }
    };
    let smax = svd.singular_values.max();
    let tol = smax * t as f64 * f64::EPSILON;
    let mut g = Mat::zeros(t, b.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            g += u.column(i) * vt.row(i);
        }
    }
    Ok(g)
}

/// `∂Q/∂B = 2(KA)ᵀ(KAB − R) + 2γ₂B + γ₃ UVᵀ`.
pub fn grad_b(k: &Mat, a: &Mat, b: &Mat, r: &Mat, hp: &LinearHyperparams) -> Result<Mat> {
    check_dims(k, a, b, r)?;
    let ka = k * a;
    let mut g = ka.transpose() * (&ka * b - r) * 2.0 + b * (2.0 * hp.gamma_l2);
    if hp.gamma_l3 != 0.0 {
        g += nuclear_subgradient(b)? * hp.gamma_l3;
    }
    Ok(g)
}

fn project_psd(b: &Mat) -> Mat {
    let eig = SymmetricEigen::new((b + b.transpose()) * 0.5);
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * Mat::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

pub fn train_linear(k: &Mat, r: &Mat, hp: &LinearHyperparams) -> Result<LinearFit> {
    hp.validate()?;
    ensure_square(k, "K")?;
    ensure_finite(k, "K")?;
    ensure_shape(r, k.nrows(), r.ncols(), "R")?;
    let t = r.ncols();

    let mut trace = TrainingTrace::default();
    let mut b = Mat::identity(t, t);
    let mut a = solve_a_sylvester(k, &b, r, hp.gamma_l1)?;
    let q0 = objective_ql(k, &a, &b, r, hp)?;
    trace.record(q0);
    let mut q = q0;

    for it in 1..=hp.max_outer_iters {
        if !hp.freeze_structure {
            let g = grad_b(k, &a, &b, r, hp)?;
            let mut eta = hp.eta_b;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let mut cand = &b - &g * eta;
                if hp.project_psd {
                    cand = project_psd(&cand);
                }
                let qc = objective_ql(k, &a, &cand, r, hp)?;
                if qc <= q {
                    b = cand;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if eta != hp.eta_b {
                trace.adjust(it, "B", eta);
            }
            if !accepted {
                trace.warn(format!("iteration {it}: no descent step found for B"));
            }
        }

        a = solve_a_sylvester(k, &b, r, hp.gamma_l1)?;
        let res = sylvester_residual(k, &a, &b, r, hp.gamma_l1);
        if res > 1e-8 {
            trace.warn(format!("iteration {it}: Sylvester residual {res:e}"));
        }
        let q_new = objective_ql(k, &a, &b, r, hp)?;
        trace.record(q_new);
        if !q_new.is_finite() || q_new > 1e3 * q0 {
            return Err(Error::Training {
                message: format!("objective diverged at iteration {it}: {q_new:e}"),
                trace: Box::new(trace),
            });
        }
        let delta = (q_new - q).abs();
        q = q_new;
        if delta < hp.epsilon * q0 {
            trace.converged = true;
            break;
        }
    }

    let c = &a * &b;
    Ok(LinearFit { a, b, c, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocksr::{build_responses, fit_c_ocksr, fit_single, ResponseMode};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_psd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let g = rand_mat(n, n, rng);
        &g * g.transpose() / n as f64 + Mat::identity(n, n) * 0.1
    }

    fn hp(l1: f64, l2: f64, l3: f64) -> LinearHyperparams {
        LinearHyperparams {
            gamma_l1: l1,
            gamma_l2: l2,
            gamma_l3: l3,
            ..Default::default()
        }
    }

    /// `vec(A)` for column-major `vec`.
    fn vec_of(m: &Mat) -> DVector<f64> {
        DVector::from_column_slice(m.as_slice())
    }

    fn kron(a: &Mat, b: &Mat) -> Mat {
        let (p, q) = b.shape();
        Mat::from_fn(a.nrows() * p, a.ncols() * q, |i, j| {
            a[(i / p, j / q)] * b[(i % p, j % q)]
        })
    }

    /// Explicit Kronecker form: `((BBᵀ)ᵀ ⊗ I + γ I ⊗ K⁻¹) vec(A) = vec(K⁻¹RBᵀ)`.
    fn kronecker_oracle(k: &Mat, b: &Mat, r: &Mat, gamma: f64) -> Mat {
        let (n, t) = r.shape();
        let kinv = k.clone().try_inverse().unwrap();
        let m = b * b.transpose();
        let sys = kron(&m.transpose(), &Mat::identity(n, n)) + kron(&Mat::identity(t, t), &kinv) * gamma;
        let rhs = vec_of(&(&kinv * r * b.transpose()));
        let x = sys.lu().solve(&rhs).unwrap();
        Mat::from_column_slice(n, t, x.as_slice())
    }

    #[test]
    fn objective_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = rand_psd(4, &mut rng);
        let r = rand_mat(4, 2, &mut rng);
        let q = objective_ql(&k, &Mat::zeros(4, 2), &Mat::zeros(2, 2), &r, &hp(1.0, 1.0, 1.0)).unwrap();
        assert!((q - frob2(&r)).abs() < 1e-14);

        let t = 3;
        let q = objective_ql(
            &k,
            &Mat::zeros(4, t),
            &Mat::identity(t, t),
            &Mat::zeros(4, t),
            &hp(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert!((q - 2.0 * t as f64).abs() < 1e-12);
        assert!(objective_ql(&k, &Mat::zeros(3, 2), &Mat::zeros(2, 2), &r, &hp(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn objective_matches_scalar_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, t) = (5, 3);
        let k = rand_psd(n, &mut rng);
        let a = rand_mat(n, t, &mut rng);
        let b = rand_mat(t, t, &mut rng);
        let r = rand_mat(n, t, &mut rng);
        let h = hp(0.3, 0.7, 1.1);
        let mut fit = 0.0;
        for i in 0..n {
            for j in 0..t {
                let mut v = 0.0;
                for p in 0..n {
                    for s in 0..t {
                        v += k[(i, p)] * a[(p, s)] * b[(s, j)];
                    }
                }
                fit += (v - r[(i, j)]).powi(2);
            }
        }
        let mut reg = 0.0;
        for c in 0..t {
            for i in 0..n {
                for p in 0..n {
                    reg += a[(i, c)] * k[(i, p)] * a[(p, c)];
                }
            }
        }
        let frob: f64 = b.iter().map(|v| v * v).sum();
        // nuclear norm via eigenvalues of BᵀB
        let btb = b.transpose() * &b;
        let nuc: f64 = SymmetricEigen::new(btb)
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .sum();
        let expect = fit + 0.3 * reg + 0.7 * frob + 1.1 * nuc;
        let got = objective_ql(&k, &a, &b, &r, &h).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn sylvester_identity_reduces_to_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_psd(6, &mut rng);
        let r = rand_mat(6, 3, &mut rng);
        let a = solve_a_sylvester(&k, &Mat::identity(3, 3), &r, 0.4).unwrap();
        let ridge = crate::ocksr::fit_multi(&k, &r, 0.4).unwrap();
        assert!((a - ridge).amax() < 1e-10);
    }

    #[test]
    fn sylvester_scalar_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = rand_psd(5, &mut rng);
        let r = rand_mat(5, 1, &mut rng);
        let bval = 1.7;
        let a = solve_a_sylvester(&k, &Mat::from_element(1, 1, bval), &r, 0.2).unwrap();
        let sys = &k * (bval * bval) + Mat::identity(5, 5) * 0.2;
        let expect = sys.lu().solve(&(&r * bval)).unwrap();
        assert!((a - expect).amax() < 1e-10);
    }

    #[test]
    fn sylvester_matches_kronecker_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let k = rand_psd(6, &mut rng);
            let b = rand_mat(3, 3, &mut rng);
            let r = rand_mat(6, 3, &mut rng);
            let a = solve_a_sylvester(&k, &b, &r, 0.3).unwrap();
            let oracle = kronecker_oracle(&k, &b, &r, 0.3);
            assert!((&a - &oracle).amax() < 1e-8 * oracle.amax().max(1.0));
            assert!(sylvester_residual(&k, &a, &b, &r, 0.3) < 1e-8);
        }
        let k = rand_psd(3, &mut rng);
        assert!(matches!(
            solve_a_sylvester(&k, &Mat::identity(2, 2), &Mat::zeros(3, 2), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gradient_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = rand_psd(4, &mut rng);
        let b = rand_mat(2, 2, &mut rng);
        let g = grad_b(&k, &Mat::zeros(4, 2), &b, &Mat::zeros(4, 2), &hp(1.0, 0.8, 0.0)).unwrap();
        assert!((g - &b * 1.6).amax() < 1e-14);

        let b = Mat::identity(3, 3) * 2.5;
        let g = grad_b(&k, &Mat::zeros(4, 3), &b, &Mat::zeros(4, 3), &hp(1.0, 0.0, 0.9)).unwrap();
        assert!((g - Mat::identity(3, 3) * 0.9).amax() < 1e-12);

        assert_eq!(nuclear_subgradient(&Mat::zeros(2, 2)).unwrap(), Mat::zeros(2, 2));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (n, t) = (8, 3);
            let k = rand_psd(n, &mut rng);
            let a = rand_mat(n, t, &mut rng);
            let b = rand_mat(t, t, &mut rng);
            let r = rand_mat(n, t, &mut rng);
            let h = hp(0.5, 0.3, 0.7);
            let g = grad_b(&k, &a, &b, &r, &hp(0.5, 0.3, 0.7)).unwrap();
            let step = 1e-6;
            let mut worst: f64 = 0.0;
            for i in 0..t {
                for j in 0..t {
                    let mut bp = b.clone();
                    bp[(i, j)] += step;
                    let mut bm = b.clone();
                    bm[(i, j)] -= step;
                    let fd = (objective_ql(&k, &a, &bp, &r, &h).unwrap() - objective_ql(&k, &a, &bm, &r, &h).unwrap())
                        / (2.0 * step);
                    worst = worst.max((fd - g[(i, j)]).abs());
                }
            }
            assert!(worst / g.amax() < 1e-5, "relative error {}", worst / g.amax());
        }
    }

    #[test]
    fn frozen_structure_reproduces_joint_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = rand_psd(8, &mut rng);
        let ids = [0, 0, 0, 1, 1, 2, 2, 2];
        let r = build_responses(&ids, 3, ResponseMode::JointOneHot).unwrap();
        let h = LinearHyperparams {
            gamma_l1: 0.25,
            gamma_l2: 0.0,
            gamma_l3: 0.0,
            freeze_structure: true,
            ..Default::default()
        };
        let fit = train_linear(&k, &r, &h).unwrap();
        let base = fit_c_ocksr(&k, &ids, 3, 0.25).unwrap();
        assert!((&fit.a - &base).amax() < 1e-8);
        assert_eq!(fit.b, Mat::identity(3, 3));
        assert!(fit.trace.converged);
    }

    #[test]
    fn single_task_recovers_baseline_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = rand_psd(10, &mut rng);
        let r = Mat::from_element(10, 1, 1.0);
        let h = LinearHyperparams {
            gamma_l1: 0.5,
            gamma_l2: 0.1,
            gamma_l3: 0.05,
            ..Default::default()
        };
        let fit = train_linear(&k, &r, &h).unwrap();
        let bval = fit.b[(0, 0)];
        let single = fit_single(&k, &DVector::from_element(10, 1.0), 0.5 / (bval * bval)).unwrap();
        assert!((fit.c.column(0) - single).amax() < 1e-6);
    }

    #[test]
    fn training_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let k = rand_psd(12, &mut rng);
        let ids: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let r = build_responses(&ids, 3, ResponseMode::JointOneHot).unwrap();
        let fit = train_linear(&k, &r, &hp(0.1, 0.01, 0.01)).unwrap();
        assert!(fit.trace.max_increase() <= 1e-10);
        assert!(fit.trace.last().unwrap() <= fit.trace.initial().unwrap());
        assert!((&fit.c - &fit.a * &fit.b).amax() == 0.0);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let k = Mat::identity(2, 2);
        let r = Mat::from_element(2, 1, 1.0);
        assert!(train_linear(&k, &r, &hp(0.0, 0.0, 0.0)).is_err());
        let bad = LinearHyperparams {
            eta_b: 0.0,
            ..Default::default()
        };
        assert!(train_linear(&k, &r, &bad).is_err());
    }
}
