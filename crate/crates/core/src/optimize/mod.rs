//! Per-timestep optimization of the conditional text embedding: first so
//! that guided sampling from the inverted noise retraces the source image's
//! inversion trajectory under the source pose, then once per target frame
//! under that frame's pose.

mod adam;
mod pacm;
mod schedule;

pub use adam::Adam;
pub use pacm::{
    optimize_pose_aware_embeddings, pose_aware_inversion, timestep_loss, FrameTarget, InversionResult, PacmContext,
    PoseAwareResult, TimestepProblem,
};
pub use schedule::{EmbeddingSchedule, Provenance};

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Adam learning rate.
    pub eta: f64,
    /// Gradient steps per timestep.
    pub inner_iterations: usize,
    /// The inner loop stops once the loss falls below this value.
    pub early_stop_loss: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 1e-2,
            inner_iterations: 5,
            early_stop_loss: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::param("pacm.eta", format!("must be > 0, got {}", self.eta)));
        }
        if self.inner_iterations == 0 {
            return Err(Error::param("pacm.inner_iterations", "must be >= 1"));
        }
        if !(self.early_stop_loss >= 0.0) {
            return Err(Error::param("pacm.early_stop_loss", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepReport {
    pub timestep: usize,
    pub initial_loss: f64,
    /// Loss of the returned embedding, never above `initial_loss`.
    pub final_loss: f64,
    /// Gradient steps taken.
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub frame_index: usize,
    pub timesteps: Vec<TimestepReport>,
    pub total_iterations: usize,
    /// Neither serialized nor compared, so reports of identical runs are
    /// equal.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for OptimizationReport {
    fn eq(&self, other: &Self) -> bool {
        self.frame_index == other.frame_index
            && self.timesteps == other.timesteps
            && self.total_iterations == other.total_iterations
    }
}

impl OptimizationReport {
    fn new(frame_index: usize) -> Self {
        Self {
            frame_index,
            timesteps: Vec::new(),
            total_iterations: 0,
            wall_time: Duration::ZERO,
        }
    }

    fn push(&mut self, step: TimestepReport) {
        self.total_iterations += step.iterations;
        self.timesteps.push(step);
    }

    /// Fraction of timesteps whose loss strictly decreased.
    pub fn improved_fraction(&self) -> f64 {
        if self.timesteps.is_empty() {
            return 0.0;
        }
        let n = self.timesteps.iter().filter(|s| s.final_loss < s.initial_loss).count();
        n as f64 / self.timesteps.len() as f64
    }
}
