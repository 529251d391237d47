use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Array3, Zip};

use super::{Adam, EmbeddingSchedule, OptimizationReport, OptimizerConfig, Provenance, TimestepReport};
use crate::backend::DenoiserBackend;
use crate::diffusion::{cfg_combine, ddim_coefficients, ddim_invert, ddim_step, GuidanceConfig, LatentCode, NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::pose::ConditioningImage;

/// Everything the optimizer shares between timesteps and frames.
#[derive(Clone, Copy)]
pub struct PacmContext<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub schedule: &'a NoiseSchedule,
    /// Embedding of the empty prompt, used for the unconditional branch.
    pub null_embedding: &'a Array2<f64>,
    /// Guidance applied while optimizing.
    pub guidance: GuidanceConfig,
    pub optimizer: OptimizerConfig,
}

fn at_timestep(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ (Error::BackendAt { .. } | Error::Divergence { .. }) => e,
        other => Error::BackendAt {
            timestep: t,
            source: Box::new(other),
        },
    }
}

/// The single-step objective
/// `mean((ddim_step(z_t, guided_eps(embedding)) - target)^2)`.
pub struct TimestepProblem<'a> {
    latent: &'a LatentCode,
    t: usize,
    prev: Timestep,
    pose: &'a ConditioningImage,
    target: &'a Array3<f64>,
    eps_uncond: Option<Array3<f64>>,
}

impl<'a> TimestepProblem<'a> {
    /// Evaluates the unconditional branch once; it does not depend on the
    /// optimized embedding.
    pub fn new(
        ctx: &PacmContext<'_>,
        latent: &'a LatentCode,
        t: usize,
        prev: Timestep,
        pose: &'a ConditioningImage,
        target: &'a Array3<f64>,
    ) -> Result<Self> {
        if target.shape() != latent.data.shape() {
            return Err(Error::shape(latent.data.shape(), target.shape()));
        }
        let eps_uncond = if ctx.guidance.needs_uncond() {
            Some(ctx.backend.predict_noise(latent, t, ctx.null_embedding, pose)?)
        } else {
            None
        };
        Ok(Self {
            latent,
            t,
            prev,
            pose,
            target,
            eps_uncond,
        })
    }

    fn sample(&self, ctx: &PacmContext<'_>, eps_cond: &Array3<f64>) -> Result<LatentCode> {
        let eps = match &self.eps_uncond {
            Some(u) => cfg_combine(u, eps_cond, ctx.guidance)?,
            None => eps_cond.clone(),
        };
        ddim_step(self.latent, &eps, Timestep::At(self.t), self.prev, ctx.schedule)
    }

    fn mse(&self, z: &LatentCode) -> f64 {
        let sq: f64 = Zip::from(&z.data).and(self.target).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        sq / self.target.len() as f64
    }

    /// Loss and the sampled latent.
    pub fn loss(&self, ctx: &PacmContext<'_>, embedding: &Array2<f64>) -> Result<(f64, LatentCode)> {
        let eps = ctx.backend.predict_noise(self.latent, self.t, embedding, self.pose)?;
        let z = self.sample(ctx, &eps)?;
        Ok((self.mse(&z), z))
    }

    /// Loss, sampled latent and gradient with respect to the embedding. The
    /// step is affine in the guided noise, `a * z + b * eps`, and the guided
    /// noise is affine in the conditional noise with slope `w`.
    pub fn loss_and_gradient(
        &self,
        ctx: &PacmContext<'_>,
        embedding: &Array2<f64>,
    ) -> Result<(f64, LatentCode, Array2<f64>)> {
        let (_, b) = ddim_coefficients(Timestep::At(self.t), self.prev, ctx.schedule);
        let scale = 2.0 * ctx.guidance.scale * b / self.target.len() as f64;
        let mut sampled: Option<Result<LatentCode>> = None;
        let mut upstream = |eps: &Array3<f64>| match self.sample(ctx, eps) {
            Ok(z) => {
                let seed = Zip::from(&z.data).and(self.target).map_collect(|&a, &b| scale * (a - b));
                sampled = Some(Ok(z));
                seed
            }
            Err(e) => {
                sampled = Some(Err(e));
                Array3::zeros(eps.raw_dim())
            }
        };
        let (_, grad) = ctx
            .backend
            .predict_noise_vjp(self.latent, self.t, embedding, self.pose, &mut upstream)?;
        let z = sampled.expect("backend invokes the upstream callback")?;
        Ok((self.mse(&z), z, grad))
    }
}

struct StepOutcome {
    embedding: Array2<f64>,
    next: LatentCode,
    report: TimestepReport,
}

/// Adam from `init` with best-iterate tracking: `n` gradient steps and
/// `n + 1` loss evaluations unless the loss drops below the early-stop
/// threshold first.
fn optimize_timestep(
    ctx: &PacmContext<'_>,
    problem: &TimestepProblem<'_>,
    init: &Array2<f64>,
    frame: usize,
) -> Result<StepOutcome> {
    let OptimizerConfig {
        eta,
        inner_iterations: n,
        early_stop_loss,
    } = ctx.optimizer;
    let diverged = |loss: f64| Error::Divergence {
        frame: Some(frame),
        timestep: problem.t,
        loss,
    };
    let mut embedding = init.clone();
    let mut adam = Adam::new(eta, embedding.dim());
    let mut best: Option<(f64, Array2<f64>, LatentCode)> = None;
    let mut initial_loss = f64::NAN;
    let mut iterations = 0;
    for k in 0..=n {
        let (loss, z, grad) = if k < n {
            let (l, z, g) = problem.loss_and_gradient(ctx, &embedding)?;
            (l, z, Some(g))
        } else {
            let (l, z) = problem.loss(ctx, &embedding)?;
            (l, z, None)
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        if k == 0 {
            initial_loss = loss;
        }
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, embedding.clone(), z));
        }
        if loss < early_stop_loss {
            break;
        }
        let Some(grad) = grad else { break };
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(diverged(f64::NAN));
        }
        adam.step(&mut embedding, &grad);
        iterations += 1;
    }
    let (final_loss, embedding, next) = best.expect("at least one evaluation");
    Ok(StepOutcome {
        embedding,
        next,
        report: TimestepReport {
            timestep: problem.t,
            initial_loss,
            final_loss,
            iterations,
        },
    })
}

struct Chain {
    embeddings: EmbeddingSchedule,
    latents: Vec<LatentCode>,
    report: OptimizationReport,
}

/// Initial embedding for timestep `t` given the previous step's result.
type InitFn<'a> = dyn Fn(usize, Option<&Array2<f64>>) -> Result<Array2<f64>> + 'a;

/// Walks the sampling timesteps from `Z_T`, optimizing each step toward the
/// inversion trajectory and carrying the best sampled latent forward.
fn run_chain(
    ctx: &PacmContext<'_>,
    trajectory: &[LatentCode],
    pose: &ConditioningImage,
    frame: usize,
    provenance: Provenance,
    init: &InitFn<'_>,
) -> Result<Chain> {
    let start = Instant::now();
    let pairs = ctx.schedule.sampling_pairs();
    let s = pairs.len();
    if trajectory.len() != s + 1 {
        return Err(Error::Contract(format!(
            "inversion trajectory has {} latents, expected {}",
            trajectory.len(),
            s + 1
        )));
    }
    let mut chain = Chain {
        embeddings: EmbeddingSchedule::new(frame, provenance),
        latents: vec![trajectory[s].clone()],
        report: OptimizationReport::new(frame),
    };
    for (j, &(t, prev)) in pairs.iter().enumerate() {
        let z = chain.latents.last().expect("non-empty");
        let target = &trajectory[s - 1 - j].data;
        let start_embedding = init(t, chain.embeddings.iter().last().map(|(_, e)| e))?;
        let step = TimestepProblem::new(ctx, z, t, prev, pose, target)
            .and_then(|p| optimize_timestep(ctx, &p, &start_embedding, frame))
            .map_err(at_timestep(t))?;
        log::debug!(
            "frame {frame} t={t}: loss {:.3e} -> {:.3e}",
            step.report.initial_loss,
            step.report.final_loss
        );
        chain.embeddings.push(t, step.embedding);
        chain.report.push(step.report);
        chain.latents.push(step.next);
    }
    chain.report.wall_time = start.elapsed();
    Ok(chain)
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    /// Optimized source embeddings, one per timestep.
    pub embeddings: EmbeddingSchedule,
    /// Plain DDIM inversion `[Z_0, .., Z_T]`.
    pub trajectory: Vec<LatentCode>,
    /// Latents reached by guided sampling with the optimized embeddings,
    /// from `Z_T` down to the clean estimate.
    pub reconstruction: Vec<LatentCode>,
    pub report: OptimizationReport,
}

/// Inverts the source latent at guidance 1 with the prompt embedding, then
/// optimizes the conditional embedding per timestep so guided sampling under
/// the source pose retraces the inversion. Each timestep starts from the
/// previous timestep's result.
pub fn pose_aware_inversion(
    ctx: &PacmContext<'_>,
    source_latent: &LatentCode,
    source_pose: &ConditioningImage,
    prompt_embedding: &Array2<f64>,
) -> Result<InversionResult> {
    ctx.optimizer.validate()?;
    let trajectory = ddim_invert(source_latent, ctx.backend, prompt_embedding, source_pose, ctx.schedule)?;
    let init = |_t: usize, previous: Option<&Array2<f64>>| Ok(previous.unwrap_or(prompt_embedding).clone());
    let chain = run_chain(ctx, &trajectory, source_pose, 0, Provenance::SourceOptimized, &init)?;
    Ok(InversionResult {
        embeddings: chain.embeddings,
        trajectory,
        reconstruction: chain.latents,
        report: chain.report,
    })
}

/// A frame to optimize: its output index and rasterized pose.
#[derive(Debug, Clone)]
pub struct FrameTarget {
    pub frame_index: usize,
    pub pose: ConditioningImage,
}

#[derive(Debug, Clone)]
pub struct PoseAwareResult {
    pub embeddings: EmbeddingSchedule,
    pub report: OptimizationReport,
}

fn optimize_frame(
    ctx: &PacmContext<'_>,
    source: &EmbeddingSchedule,
    trajectory: &[LatentCode],
    target: &FrameTarget,
) -> Result<PoseAwareResult> {
    let init = |t: usize, _: Option<&Array2<f64>>| source.at(t).cloned();
    let chain = run_chain(ctx, trajectory, &target.pose, target.frame_index, Provenance::PoseAware, &init)?;
    Ok(PoseAwareResult {
        embeddings: chain.embeddings,
        report: chain.report,
    })
}

/// Per frame: starts from `Z_T` with each timestep's embedding initialized
/// from the source schedule, and steps toward the source inversion
/// trajectory under the frame's pose. Frames are independent; up to `jobs`
/// run at once and results come back in input order.
pub fn optimize_pose_aware_embeddings(
    ctx: &PacmContext<'_>,
    source: &EmbeddingSchedule,
    trajectory: &[LatentCode],
    frames: &[FrameTarget],
    jobs: usize,
) -> Result<Vec<PoseAwareResult>> {
    ctx.optimizer.validate()?;
    source.check(ctx.schedule)?;
    let run = |target: &FrameTarget| {
        optimize_frame(ctx, source, trajectory, target).map_err(|e| Error::Stage {
            stage: "pose-aware optimization",
            frame: Some(target.frame_index),
            source: Box::new(e),
        })
    };
    let jobs = jobs.clamp(1, frames.len().max(1));
    if jobs == 1 {
        return frames.iter().map(run).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<PoseAwareResult>>>> = Mutex::new(frames.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(target) = frames.get(i) else { break };
                let out = run(target);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every frame is processed"))
        .collect()
}

/// Loss of one timestep for a given embedding, for diagnostics and tests.
pub fn timestep_loss(
    ctx: &PacmContext<'_>,
    latent: &LatentCode,
    t: usize,
    prev: Timestep,
    pose: &ConditioningImage,
    target: &Array3<f64>,
    embedding: &Array2<f64>,
) -> Result<f64> {
    TimestepProblem::new(ctx, latent, t, prev, pose, target)?
        .loss(ctx, embedding)
        .map(|(l, _)| l)
}
