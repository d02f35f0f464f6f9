//! Single-task one-class kernel spectral regression and the joint
//! (negatives-at-origin) baseline, plus scoring and AUC.
//!
//! Training solves `(K + γI) a = r`. A sample is scored by the absolute
//! distance of its projection `y = K_cross a` from the mean projection of the
//! task's positive training samples, so lower scores are more target-like.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, ensure_square, solve_shifted_spd, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseMode {
    /// A single column of ones: every training sample is a target.
    SingleTaskPositive,
    /// One column per task, a one in the sample's own task column and zeros elsewhere.
    JointOneHot,
}

pub fn validate_task_ids(task_ids: &[usize], tasks: usize) -> Result<()> {
    if tasks == 0 {
        return Err(Error::input("task count must be at least 1"));
    }
    match task_ids.iter().position(|&t| t >= tasks) {
        Some(i) => Err(Error::input(format!(
            "sample {i} has task id {} outside [0, {tasks})",
            task_ids[i]
        ))),
        None => Ok(()),
    }
}

pub fn build_responses(task_ids: &[usize], tasks: usize, mode: ResponseMode) -> Result<Mat> {
    validate_task_ids(task_ids, tasks)?;
    let n = task_ids.len();
    Ok(match mode {
        ResponseMode::SingleTaskPositive => Mat::from_element(n, 1, 1.0),
        ResponseMode::JointOneHot => {
            let mut r = Mat::zeros(n, tasks);
            for (i, &t) in task_ids.iter().enumerate() {
                r[(i, t)] = 1.0;
            }
            r
        }
    })
}

fn check_system(k: &Mat, gamma: f64) -> Result<()> {
    ensure_square(k, "kernel matrix")?;
    ensure_finite(k, "kernel matrix")?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::param(format!("regularization must be nonnegative, got {gamma}")));
    }
    Ok(())
}

/// `(K + γI)⁻¹ R` for a matrix of responses.
pub fn fit_multi(k: &Mat, r: &Mat, gamma: f64) -> Result<Mat> {
    check_system(k, gamma)?;
    ensure_finite(r, "responses")?;
    solve_shifted_spd(k, gamma, r)
}

/// `a = (K + γI)⁻¹ r`.
pub fn fit_single(k: &Mat, r: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
    let rhs = Mat::from_column_slice(r.len(), 1, r.as_slice());
    let a = fit_multi(k, &rhs, gamma)?;
    Ok(a.column(0).into_owned())
}

/// Joint training over all tasks' samples with one-hot responses: positives of
/// one task act as negatives, mapped to the origin, for every other task.
pub fn fit_c_ocksr(k: &Mat, task_ids: &[usize], tasks: usize, gamma: f64) -> Result<Mat> {
    if task_ids.len() != k.nrows() {
        return Err(Error::input(format!(
            "{} task ids for a {}x{} kernel",
            task_ids.len(),
            k.nrows(),
            k.ncols()
        )));
    }
    let r = build_responses(task_ids, tasks, ResponseMode::JointOneHot)?;
    fit_multi(k, &r, gamma)
}

pub fn project(k_cross: &Mat, coeffs: &Mat) -> Result<Mat> {
    if k_cross.ncols() != coeffs.nrows() {
        return Err(Error::input(format!(
            "cannot project: kernel has {} columns but coefficients have {} rows",
            k_cross.ncols(),
            coeffs.nrows()
        )));
    }
    Ok(k_cross * coeffs)
}

/// Mean of `column` over the given rows.
pub fn target_mean(column: &[f64], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::input("task has no positive training samples"));
    }
    Ok(rows.iter().map(|&i| column[i]).sum::<f64>() / rows.len() as f64)
}

pub fn score_task(y_test: &[f64], target_mean: f64) -> Vec<f64> {
    y_test.iter().map(|y| (y - target_mean).abs()).collect()
}

/// Probability that a target scores strictly lower than a non-target, ties
/// counted one half, via the Mann-Whitney rank statistic with midranks.
/// `labels[i]` is true for target samples.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("scores contain NaN".into()));
    }
    let targets = labels.iter().filter(|&&l| l).count();
    let others = labels.len() - targets;
    if targets == 0 || others == 0 {
        return Err(Error::Evaluation(
            "AUC needs at least one target and one non-target".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_others = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tied block i..=j shares the average rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if !labels[idx] {
                rank_sum_others += mid;
            }
        }
        i = j + 1;
    }
    let o = others as f64;
    let u = rank_sum_others - o * (o + 1.0) / 2.0;
    Ok(u / (o * targets as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub task: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tasks: Vec<TaskScores>,
}

impl ScoreReport {
    pub fn mean_auc(&self) -> f64 {
        if self.tasks.is_empty() {
            return f64::NAN;
        }
        self.tasks.iter().map(|t| t.auc).sum::<f64>() / self.tasks.len() as f64
    }
}
