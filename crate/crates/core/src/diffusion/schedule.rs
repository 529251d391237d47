use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Timestep;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: BetaSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub inference_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: BetaSchedule::ScaledLinear,
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000,
            inference_steps: 50,
        }
    }
}

/// Noise tables in double precision plus the descending inference timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Strictly decreasing; `timestep_map[0]` is the noisiest step.
    pub timestep_map: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            kind,
            beta_start,
            beta_end,
            train_steps,
            inference_steps,
        } = params;
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(
                "beta",
                format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
            ));
        }
        if train_steps == 0 {
            return Err(Error::param("train_steps", "must be >= 1"));
        }
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::param(
                "inference_steps",
                format!("must be in [1, {train_steps}], got {inference_steps}"),
            ));
        }

        let lerp = |a: f64, b: f64, i: usize| {
            if train_steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (train_steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| match kind {
                BetaSchedule::Linear => lerp(beta_start, beta_end, i),
                BetaSchedule::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();

        let stride = train_steps / inference_steps;
        let timestep_map = (0..inference_steps).rev().map(|i| i * stride).collect();

        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
            timestep_map,
        })
    }

    /// `alpha_bar` at `t`; 1 for the clean sentinel.
    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        match t {
            Timestep::Clean => 1.0,
            Timestep::At(i) => self.alpha_bars[i],
        }
    }

    pub fn check(&self, t: Timestep) -> Result<()> {
        match t {
            Timestep::At(i) if i >= self.alpha_bars.len() => Err(Error::Index {
                index: i,
                len: self.alpha_bars.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn inference_steps(&self) -> usize {
        self.timestep_map.len()
    }

    /// Successive `(t, t_prev)` pairs walked by the sampler, noisiest first.
    pub fn sampling_pairs(&self) -> Vec<(usize, Timestep)> {
        self.timestep_map
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let prev = self
                    .timestep_map
                    .get(i + 1)
                    .map_or(Timestep::Clean, |&p| Timestep::At(p));
                (t, prev)
            })
            .collect()
    }

    /// Hex SHA-256 over the parameters and timestep map.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.params).expect("params serialize"));
        for t in &self.timestep_map {
            h.update((*t as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kind: BetaSchedule, start: f64, end: f64, t: usize, s: usize) -> ScheduleParams {
        ScheduleParams {
            kind,
            beta_start: start,
            beta_end: end,
            train_steps: t,
            inference_steps: s,
        }
    }

    #[test]
    fn tiny_linear_schedule() {
        let s = NoiseSchedule::new(params(BetaSchedule::Linear, 1e-4, 2e-2, 10, 10)).unwrap();
        assert_eq!(s.alpha_bars[0], 1.0 - 1e-4);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.timestep_map, (0..10).rev().collect::<Vec<_>>());
    }

    #[test]
    fn fifty_steps_over_a_thousand() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        assert_eq!(s.timestep_map.len(), 50);
        assert!(s.timestep_map.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(s.timestep_map[0], 980);
        assert_eq!(*s.timestep_map.last().unwrap(), 0);
    }

    #[test]
    fn alpha_bar_matches_brute_force_product() {
        for kind in [BetaSchedule::Linear, BetaSchedule::ScaledLinear] {
            let s = NoiseSchedule::new(params(kind, 0.00085, 0.012, 1000, 50)).unwrap();
            for t in 0..1000 {
                let mut prod = 1.0;
                for i in 0..=t {
                    prod *= 1.0 - s.betas[i];
                }
                assert!((prod - s.alpha_bars[t]).abs() <= 1e-12);
                if t > 0 {
                    assert!((s.alpha_bars[t] - s.alpha_bars[t - 1] * s.alphas[t]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::new(params(BetaSchedule::Linear, 0.0, 0.1, 10, 5)).is_err());
        assert!(NoiseSchedule::new(params(BetaSchedule::Linear, 0.2, 0.1, 10, 5)).is_err());
        assert!(NoiseSchedule::new(params(BetaSchedule::Linear, 0.1, 1.0, 10, 5)).is_err());
        assert!(NoiseSchedule::new(params(BetaSchedule::Linear, 0.1, 0.2, 10, 11)).is_err());
        assert!(NoiseSchedule::new(params(BetaSchedule::Linear, 0.1, 0.2, 10, 0)).is_err());
    }

    #[test]
    fn sampling_pairs_end_clean() {
        let s = NoiseSchedule::new(params(BetaSchedule::Linear, 1e-4, 2e-2, 100, 4)).unwrap();
        assert_eq!(
            s.sampling_pairs(),
            vec![
                (75, Timestep::At(50)),
                (50, Timestep::At(25)),
                (25, Timestep::At(0)),
                (0, Timestep::Clean)
            ]
        );
    }
}
