//! Synthetic related tasks with a tunable degree of shared structure.
//!
//! Task `t` draws targets from `N(μ_t, I)` with
//! `μ_t = ρ·m + (1 − ρ)·m_t`, where the shared mean `m` and the private means
//! `m_t` are drawn from `N(0, s²I)`. Each task's test non-targets come from the
//! other tasks' target distributions and from a wide background Gaussian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetBundle, Provenance, Split};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub tasks: usize,
    pub n_per_task: usize,
    pub dim: usize,
    pub rho: f64,
    pub seed: u64,
    /// Standard deviation `s` of the shared and private means.
    pub mean_scale: f64,
    pub test_targets: usize,
    pub test_nontargets: usize,
    /// Fraction of non-targets drawn from the background instead of other tasks.
    pub background_fraction: f64,
    /// Standard deviation of the zero-mean background Gaussian.
    pub background_scale: f64,
    /// Tasks whose mean ignores the shared component (`ρ = 0` for them).
    pub unrelated_tasks: Vec<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            n_per_task: 15,
            dim: 20,
            rho: 0.8,
            seed: 0,
            mean_scale: 3.0,
            test_targets: 50,
            test_nontargets: 100,
            background_fraction: 0.0,
            background_scale: 3.0,
            unrelated_tasks: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::param(format!(
                "relatedness must lie in [0, 1], got {}",
                self.rho
            )));
        }
        if self.tasks == 0 || self.n_per_task == 0 || self.dim == 0 {
            return Err(Error::param("tasks, n_per_task and dim must be positive"));
        }
        if self.test_targets == 0 || self.test_nontargets == 0 {
            return Err(Error::param("each test set needs targets and non-targets"));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) || (self.tasks == 1 && self.background_fraction < 1.0) {
            return Err(Error::param(
                "background_fraction must lie in [0, 1] and be 1 for a single task",
            ));
        }
        if !(self.mean_scale >= 0.0 && self.background_scale > 0.0) {
            return Err(Error::param("mean and background scales must be positive"));
        }
        if let Some(&t) = self.unrelated_tasks.iter().find(|&&t| t >= self.tasks) {
            return Err(Error::param(format!("unrelated task {t} out of range")));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, mean: &[f64], scale: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + scale * z
        })
        .collect()
}

fn draw_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Mat {
    let zero = vec![0.0; spec.dim];
    let shared = gaussian(rng, &zero, spec.mean_scale);
    let mut means = Mat::zeros(spec.tasks, spec.dim);
    for t in 0..spec.tasks {
        let private = gaussian(rng, &zero, spec.mean_scale);
        let rho = if spec.unrelated_tasks.contains(&t) {
            0.0
        } else {
            spec.rho
        };
        for j in 0..spec.dim {
            means[(t, j)] = rho * shared[j] + (1.0 - rho) * private[j];
        }
    }
    means
}

/// Task means (T×d) used by [`synth_tasks`] for the same spec.
pub fn task_means(spec: &SynthSpec) -> Result<Mat> {
    spec.validate()?;
    Ok(draw_means(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)))
}

pub fn synth_tasks(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = draw_means(spec, &mut rng);
    let mean = |t: usize| means.row(t).iter().copied().collect::<Vec<_>>();
    let zero = vec![0.0; spec.dim];

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut task_ids = Vec::new();
    let mut split = Vec::new();
    let mut labels = Vec::new();
    let mut push = |x: Vec<f64>, t: usize, s: Split, l: Option<bool>| {
        rows.push(x);
        task_ids.push(t);
        split.push(s);
        labels.push(l);
    };

    for t in 0..spec.tasks {
        for _ in 0..spec.n_per_task {
            push(gaussian(&mut rng, &mean(t), 1.0), t, Split::Train, None);
        }
    }
    for t in 0..spec.tasks {
        for _ in 0..spec.test_targets {
            push(gaussian(&mut rng, &mean(t), 1.0), t, Split::Test, Some(true));
        }
        for _ in 0..spec.test_nontargets {
            let x = if rng.random::<f64>() < spec.background_fraction {
                gaussian(&mut rng, &zero, spec.background_scale)
            } else {
                let mut other = rng.random_range(0..spec.tasks - 1);
                if other >= t {
                    other += 1;
                }
                gaussian(&mut rng, &mean(other), 1.0)
            };
            push(x, t, Split::Test, Some(false));
        }
    }

    let n = rows.len();
    let features = Mat::from_fn(n, spec.dim, |i, j| rows[i][j]);
    let provenance = Provenance {
        source: format!("synth(T={}, rho={}, d={})", spec.tasks, spec.rho, spec.dim),
        seed: Some(spec.seed),
        permutation: Vec::new(),
    };
    DatasetBundle::from_rows(features, task_ids, split, labels, provenance)
}
