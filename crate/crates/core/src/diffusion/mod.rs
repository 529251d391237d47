//! Forward noising, deterministic DDIM sampling and inversion, and
//! classifier-free guidance.

mod schedule;

pub use schedule::{BetaSchedule, NoiseSchedule, ScheduleParams};
pub(crate) use schedule::hex;

use ndarray::{Array2, Array3, Zip};

use crate::backend::DenoiserBackend;
use crate::error::{Error, Result};
use crate::pose::ConditioningImage;

/// A point on the diffusion time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timestep {
    /// `alpha_bar = 1`.
    Clean,
    At(usize),
}

impl Timestep {
    /// Clean precedes every noisy timestep.
    fn rank(self) -> i64 {
        match self {
            Timestep::Clean => -1,
            Timestep::At(t) => t as i64,
        }
    }
}

impl std::fmt::Display for Timestep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Timestep::Clean => f.write_str("clean"),
            Timestep::At(t) => write!(f, "{t}"),
        }
    }
}

/// A latent tensor `(channels, height, width)` tagged with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Array3<f64>,
    pub timestep: Timestep,
}

impl LatentCode {
    pub fn new(data: Array3<f64>, timestep: Timestep) -> Self {
        Self { data, timestep }
    }

    pub fn clean(data: Array3<f64>) -> Self {
        Self::new(data, Timestep::Clean)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl GuidanceConfig {
    pub const OFF: GuidanceConfig = GuidanceConfig { scale: 1.0 };

    pub fn new(scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::param("guidance", format!("scale must be >= 0, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// Whether the unconditional branch contributes at all.
    pub fn needs_uncond(&self) -> bool {
        self.scale != 1.0
    }
}

fn same_shape<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise`.
pub fn q_sample(z0: &LatentCode, t: usize, noise: &Array3<f64>, schedule: &NoiseSchedule) -> Result<LatentCode> {
    same_shape(&z0.data, noise)?;
    schedule.check(Timestep::At(t))?;
    let ab = schedule.alpha_bar(Timestep::At(t));
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(&z0.data).and(noise).map_collect(|&z, &e| a * z + b * e);
    Ok(LatentCode::new(data, Timestep::At(t)))
}

/// `(z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)`.
pub fn predict_z0(z_t: &LatentCode, eps: &Array3<f64>, t: Timestep, schedule: &NoiseSchedule) -> Result<Array3<f64>> {
    same_shape(&z_t.data, eps)?;
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&z_t.data).and(eps).map_collect(|&z, &e| (z - b * e) / a))
}

/// Moves a latent from `from` to `to` along the deterministic DDIM path for a
/// fixed noise estimate. Used in both time directions.
pub(crate) fn ddim_transfer(
    z: &LatentCode,
    eps: &Array3<f64>,
    from: Timestep,
    to: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentCode> {
    schedule.check(to)?;
    let z0 = predict_z0(z, eps, from, schedule)?;
    let ab = schedule.alpha_bar(to);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(&z0).and(eps).map_collect(|&x, &e| a * x + b * e);
    Ok(LatentCode::new(data, to))
}

/// Coefficients `(a, b)` with `ddim_step(z, eps) = a * z + b * eps`.
pub(crate) fn ddim_coefficients(t: Timestep, t_prev: Timestep, schedule: &NoiseSchedule) -> (f64, f64) {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let a = ab_prev.sqrt() / ab.sqrt();
    let b = (1.0 - ab_prev).sqrt() - ab_prev.sqrt() * (1.0 - ab).sqrt() / ab.sqrt();
    (a, b)
}

/// One deterministic (eta = 0) DDIM update from `t` to an earlier `t_prev`.
pub fn ddim_step(
    z_t: &LatentCode,
    eps: &Array3<f64>,
    t: Timestep,
    t_prev: Timestep,
    schedule: &NoiseSchedule,
) -> Result<LatentCode> {
    if t_prev.rank() >= t.rank() {
        return Err(Error::TimestepOrder {
            current: t.to_string(),
            prev: t_prev.to_string(),
        });
    }
    ddim_transfer(z_t, eps, t, t_prev, schedule)
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`; exact at `w = 0` and `w = 1`.
pub fn cfg_combine(eps_uncond: &Array3<f64>, eps_cond: &Array3<f64>, guidance: GuidanceConfig) -> Result<Array3<f64>> {
    same_shape(eps_uncond, eps_cond)?;
    let w = guidance.scale;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok(Zip::from(eps_uncond)
        .and(eps_cond)
        .map_collect(|&u, &c| u + w * (c - u)))
}

/// DDIM inversion at guidance 1.0. Returns `[Z_0, .., Z_T]` where `Z_0` is
/// the clean input and entry `k` sits at the `k`-th smallest inference
/// timestep.
pub fn ddim_invert(
    z0: &LatentCode,
    denoiser: &dyn DenoiserBackend,
    embedding: &Array2<f64>,
    pose: &ConditioningImage,
    schedule: &NoiseSchedule,
) -> Result<Vec<LatentCode>> {
    let mut trajectory = Vec::with_capacity(schedule.inference_steps() + 1);
    trajectory.push(LatentCode::clean(z0.data.clone()));
    for &(t, prev) in schedule.sampling_pairs().iter().rev() {
        let current = trajectory.last().expect("non-empty");
        let eps = denoiser
            .predict_noise(current, t, embedding, pose)
            .map_err(|e| Error::BackendAt {
                timestep: t,
                source: Box::new(e),
            })?;
        let next = ddim_transfer(current, &eps, prev, Timestep::At(t), schedule)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn schedule(s: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams {
            inference_steps: s,
            ..Default::default()
        })
        .unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_simple_fn((4, 8, 8), || StandardNormal.sample(rng))
    }

    #[test]
    fn zero_noise_forward() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = LatentCode::clean(randn(&mut rng));
        let zt = q_sample(&z0, 500, &Array3::zeros((4, 8, 8)), &s).unwrap();
        let a = s.alpha_bars[500].sqrt();
        assert_eq!(zt.data, z0.data.mapv(|v| a * v));
    }

    #[test]
    fn small_t_limit() {
        let s = NoiseSchedule::new(ScheduleParams {
            kind: BetaSchedule::Linear,
            beta_start: 1e-8,
            beta_end: 1e-6,
            train_steps: 10,
            inference_steps: 10,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = LatentCode::clean(randn(&mut rng));
        let noise = randn(&mut rng);
        let zt = q_sample(&z0, 0, &noise, &s).unwrap();
        let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = (1.0 - s.alpha_bars[0]).sqrt() * norm;
        let diff = (&zt.data - &z0.data).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff <= bound + 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let s = schedule(10);
        let z0 = LatentCode::clean(Array3::zeros((4, 8, 8)));
        assert!(matches!(
            q_sample(&z0, 0, &Array3::zeros((4, 4, 8)), &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn predict_z0_inverts_forward() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = LatentCode::clean(randn(&mut rng));
        let noise = randn(&mut rng);
        let zt = q_sample(&z0, 740, &noise, &s).unwrap();
        let back = predict_z0(&zt, &noise, Timestep::At(740), &s).unwrap();
        for (a, b) in back.iter().zip(z0.data.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let zero = predict_z0(&zt, &Array3::zeros((4, 8, 8)), Timestep::At(740), &s).unwrap();
        assert_eq!(zero, zt.data.mapv(|v| v / s.alpha_bars[740].sqrt()));
    }

    #[test]
    fn ddim_with_true_noise_lands_on_forward_state() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = LatentCode::clean(randn(&mut rng));
        let noise = randn(&mut rng);
        let zt = q_sample(&z0, 600, &noise, &s).unwrap();
        let prev = ddim_step(&zt, &noise, Timestep::At(600), Timestep::At(580), &s).unwrap();
        let expected = q_sample(&z0, 580, &noise, &s).unwrap();
        for (a, b) in prev.data.iter().zip(expected.data.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn terminal_step_returns_predicted_z0() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zt = LatentCode::new(randn(&mut rng), Timestep::At(20));
        let eps = randn(&mut rng);
        let out = ddim_step(&zt, &eps, Timestep::At(20), Timestep::Clean, &s).unwrap();
        let z0 = predict_z0(&zt, &eps, Timestep::At(20), &s).unwrap();
        assert_eq!(out.data, z0);
        assert_eq!(out.timestep, Timestep::Clean);
    }

    #[test]
    fn order_violation() {
        let s = schedule(50);
        let z = LatentCode::new(Array3::zeros((4, 8, 8)), Timestep::At(20));
        let eps = Array3::zeros((4, 8, 8));
        assert!(matches!(
            ddim_step(&z, &eps, Timestep::At(20), Timestep::At(20), &s),
            Err(Error::TimestepOrder { .. })
        ));
        assert!(ddim_step(&z, &eps, Timestep::At(20), Timestep::At(40), &s).is_err());
        // skipping timesteps is allowed
        assert!(ddim_step(&z, &eps, Timestep::At(20), Timestep::At(3), &s).is_ok());
    }

    #[test]
    fn guidance_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (u, c) = (randn(&mut rng), randn(&mut rng));
        assert_eq!(cfg_combine(&u, &c, GuidanceConfig::OFF).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, GuidanceConfig::new(0.0).unwrap()).unwrap(), u);
        let g = cfg_combine(&u, &c, GuidanceConfig::new(7.5).unwrap()).unwrap();
        for ((g, u), c) in g.iter().zip(u.iter()).zip(c.iter()) {
            assert!((g - (u + 7.5 * (c - u))).abs() < 1e-12);
        }
        assert!(GuidanceConfig::new(-1.0).is_err());
    }

    #[test]
    fn ddim_coefficients_match_step() {
        let s = schedule(50);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = LatentCode::new(randn(&mut rng), Timestep::At(400));
        let eps = randn(&mut rng);
        let (a, b) = ddim_coefficients(Timestep::At(400), Timestep::At(380), &s);
        let out = ddim_step(&z, &eps, Timestep::At(400), Timestep::At(380), &s).unwrap();
        for ((o, z), e) in out.data.iter().zip(z.data.iter()).zip(eps.iter()) {
            assert!((o - (a * z + b * e)).abs() < 1e-12);
        }
    }
}
