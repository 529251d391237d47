use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SourceOptimized,
    PoseAware,
}

/// One optimized embedding per inference timestep, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSchedule {
    pub frame_index: usize,
    pub provenance: Provenance,
    entries: Vec<(usize, Array2<f64>)>,
}

impl EmbeddingSchedule {
    pub fn new(frame_index: usize, provenance: Provenance) -> Self {
        Self {
            frame_index,
            provenance,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, t: usize, embedding: Array2<f64>) {
        self.entries.push((t, embedding));
    }

    pub fn get(&self, t: usize) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(s, _)| *s == t).map(|(_, e)| e)
    }

    /// The embedding for `t`, or a contract error naming the timestep.
    pub fn at(&self, t: usize) -> Result<&Array2<f64>> {
        self.get(t).ok_or_else(|| {
            Error::Contract(format!(
                "embedding schedule of frame {} has no entry for timestep {t}",
                self.frame_index
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.entries.iter().map(|(t, e)| (*t, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One entry per inference timestep, in order, all of one shape.
    pub fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        let ts: Vec<usize> = self.entries.iter().map(|(t, _)| *t).collect();
        if ts != schedule.timestep_map {
            return Err(Error::Contract(format!(
                "embedding schedule of frame {} covers timesteps {ts:?}, expected {:?}",
                self.frame_index, schedule.timestep_map
            )));
        }
        if let Some((_, first)) = self.entries.first() {
            if let Some((_, bad)) = self.entries.iter().find(|(_, e)| e.dim() != first.dim()) {
                return Err(Error::shape(first.shape(), bad.shape()));
            }
        }
        Ok(())
    }
}
