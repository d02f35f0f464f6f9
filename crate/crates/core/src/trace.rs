use serde::{Deserialize, Serialize};

use crate::sparse::SparsityReport;

/// A change to a gradient step size made by the backtracking policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAdjustment {
    pub iteration: usize,
    pub block: String,
    pub step: f64,
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Objective after initialization followed by one value per accepted outer iteration.
    pub objective: Vec<f64>,
    pub step_adjustments: Vec<StepAdjustment>,
    pub warnings: Vec<String>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sparsity: Vec<SparsityReport>,
}

impl TrainingTrace {
    pub fn record(&mut self, q: f64) {
        self.objective.push(q);
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn adjust(&mut self, iteration: usize, block: &str, step: f64) {
        self.step_adjustments.push(StepAdjustment {
            iteration,
            block: block.to_string(),
            step,
        });
    }

    pub fn iterations(&self) -> usize {
        self.objective.len().saturating_sub(1)
    }

    pub fn initial(&self) -> Option<f64> {
        self.objective.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.objective.last().copied()
    }

    /// Largest single-step increase of the objective, zero for a non-increasing trace.
    pub fn max_increase(&self) -> f64 {
        self.objective.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}
