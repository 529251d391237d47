use std::sync::Arc;

use ndarray::Array2;

use super::config::PacmRole;
use crate::attention::{
    extract_body_mask, BodyMask, Branch, DualConsistencyProcessor, FrameRole, FusionWeights, MaskOptions,
    MgdmSettings,
};
use crate::backend::{DenoiserBackend, SiteFilter};
use crate::diffusion::{cfg_combine, ddim_step, GuidanceConfig, LatentCode, NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::optimize::EmbeddingSchedule;
use crate::pose::ConditioningImage;

/// Mask guidance inputs.
#[derive(Debug, Clone)]
pub struct MaskGuidance {
    pub settings: MgdmSettings,
    pub options: MaskOptions,
    /// Embedding rows of the subject words.
    pub subject_tokens: Vec<usize>,
    pub head_mean: bool,
    /// Segmentation of the source image. Without it the anchor mask is
    /// estimated from the anchor's own cross-attention.
    pub source_mask: Option<BodyMask>,
}

/// Attention replacement during generation.
#[derive(Clone)]
pub struct AttentionSetup {
    pub filter: SiteFilter,
    pub weights: FusionWeights,
    pub mask: Option<MaskGuidance>,
}

pub struct GenerationInputs<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub schedule: &'a NoiseSchedule,
    /// Source inversion `[Z_0, .., Z_T]`.
    pub trajectory: &'a [LatentCode],
    /// Conditioning image per output frame; entry 0 is the source pose.
    pub poses: &'a [ConditioningImage],
    /// Embedding schedule per output frame; entry 0 is the source schedule.
    pub embeddings: &'a [&'a EmbeddingSchedule],
    pub prompt_embedding: &'a Array2<f64>,
    pub null_embedding: &'a Array2<f64>,
    pub role: PacmRole,
    pub guidance: GuidanceConfig,
    pub attention: Option<AttentionSetup>,
}

struct Frame<'a> {
    pose: &'a ConditioningImage,
    uncond: &'a Array2<f64>,
    cond: &'a Array2<f64>,
}

/// Denoises every frame in lockstep from `Z_T`. At each timestep the anchor
/// (frame 0) replays the source inversion so its keys and values are those
/// of the source image, then frames `1..` take one guided DDIM step each in
/// order, attending to the anchor and to the frame before them. Frame 0's
/// output is the source latent.
pub fn generate_frames(inputs: &GenerationInputs<'_>) -> Result<Vec<LatentCode>> {
    let n = inputs.poses.len();
    if inputs.embeddings.len() != n {
        return Err(Error::Contract(format!(
            "{} embedding schedules for {n} frames",
            inputs.embeddings.len()
        )));
    }
    let pairs = inputs.schedule.sampling_pairs();
    let s = pairs.len();
    if inputs.trajectory.len() != s + 1 {
        return Err(Error::Contract(format!(
            "inversion trajectory has {} latents, expected {}",
            inputs.trajectory.len(),
            s + 1
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    for e in inputs.embeddings {
        e.check(inputs.schedule)?;
    }

    let processor = inputs.attention.as_ref().map(|a| {
        let settings = a.mask.as_ref().map(|m| m.settings);
        Arc::new(DualConsistencyProcessor::new(a.weights, settings))
    });
    let _handle = match (&inputs.attention, &processor) {
        (Some(a), Some(p)) => Some(inputs.backend.install_attention_processor(a.filter.clone(), p.clone())),
        _ => None,
    };
    let mask = inputs.attention.as_ref().and_then(|a| a.mask.as_ref());
    if let Some(m) = mask {
        if m.source_mask.is_none() {
            log::warn!("no source mask given; estimating the anchor mask from cross-attention");
        }
    }

    let mut latents: Vec<LatentCode> = vec![inputs.trajectory[s].clone(); n];
    for (j, &(t, prev)) in pairs.iter().enumerate() {
        let frame = |i: usize| -> Result<Frame<'_>> {
            let optimized = inputs.embeddings[i].at(t)?;
            let (uncond, cond) = match inputs.role {
                PacmRole::Conditional => (inputs.null_embedding, optimized),
                PacmRole::Unconditional => (optimized, inputs.prompt_embedding),
            };
            Ok(Frame {
                pose: &inputs.poses[i],
                uncond,
                cond,
            })
        };

        if let Some(p) = &processor {
            let anchor = frame(0)?;
            let z = &inputs.trajectory[s - j];
            p.begin_timestep(t);
            if let Some(m) = mask {
                let grid = (z.shape()[1], z.shape()[2]);
                let anchor_mask = match &m.source_mask {
                    Some(sm) => sm.resample(grid.0, grid.1),
                    None => estimate_mask(inputs.backend, p, z, t, &anchor, m, grid)?,
                };
                p.set_anchor_mask(anchor_mask);
            }
            for (branch, emb) in branches(inputs.guidance, &anchor) {
                p.begin_pass(FrameRole::Anchor, t, branch);
                inputs.backend.predict_noise(z, t, emb, anchor.pose)?;
            }
            p.finish_frame();
        }

        for (i, latent) in latents.iter_mut().enumerate().skip(1) {
            let f = frame(i)?;
            if let (Some(p), Some(m)) = (&processor, mask) {
                let grid = (latent.shape()[1], latent.shape()[2]);
                let current = estimate_mask(inputs.backend, p, latent, t, &f, m, grid)?;
                p.set_current_mask(current);
            }
            let mut eps = Vec::with_capacity(2);
            for (branch, emb) in branches(inputs.guidance, &f) {
                if let Some(p) = &processor {
                    p.begin_pass(FrameRole::Generated, t, branch);
                }
                eps.push(inputs.backend.predict_noise(latent, t, emb, f.pose)?);
            }
            if let Some(p) = &processor {
                p.finish_frame();
            }
            let guided = match eps.as_slice() {
                [u, c] => cfg_combine(u, c, inputs.guidance)?,
                [only] => only.clone(),
                _ => unreachable!("one or two branches"),
            };
            *latent = ddim_step(latent, &guided, Timestep::At(t), prev, inputs.schedule)?;
            if !latent.is_finite() {
                return Err(Error::Divergence {
                    frame: Some(i),
                    timestep: t,
                    loss: f64::NAN,
                });
            }
        }
        log::debug!("denoised timestep {t} for {} frames", n - 1);
    }
    latents[0] = inputs.trajectory[0].clone();
    Ok(latents)
}

/// Branches to evaluate: both under real guidance, only the one that
/// survives at the exact endpoints.
fn branches<'f>(guidance: GuidanceConfig, f: &Frame<'f>) -> Vec<(Branch, &'f Array2<f64>)> {
    if guidance.scale == 1.0 {
        vec![(Branch::Conditional, f.cond)]
    } else if guidance.scale == 0.0 {
        vec![(Branch::Unconditional, f.uncond)]
    } else {
        vec![(Branch::Unconditional, f.uncond), (Branch::Conditional, f.cond)]
    }
}

fn estimate_mask(
    backend: &dyn DenoiserBackend,
    processor: &DualConsistencyProcessor,
    latent: &LatentCode,
    t: usize,
    frame: &Frame<'_>,
    mask: &MaskGuidance,
    grid: (usize, usize),
) -> Result<BodyMask> {
    processor.begin_pass(FrameRole::Observe, t, Branch::Conditional);
    let maps =
        backend.collect_cross_attention_maps(latent, t, frame.cond, frame.pose, &mask.subject_tokens, mask.head_mean)?;
    let local: Vec<usize> = (0..mask.subject_tokens.len()).collect();
    extract_body_mask(&maps, &local, &mask.options, grid)
}
