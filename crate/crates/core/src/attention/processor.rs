use std::sync::{Mutex, MutexGuard};

use ndarray::Array2;

use super::bank::{AttentionBank, Branch};
use super::fusion::{dual_consistency_attention, mgdm_attention, FrameKeyValues, FrameMasks, FusionWeights, KeyValue};
use super::kernels::multi_head_attention;
use crate::backend::{AttentionCall, AttentionKind, AttentionProcessor, AttentionSite, BlockKind, SiteFilter};
use crate::error::{Error, Result};

/// How the processor treats the frame whose pass is in progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    /// Plain attention; keys and values are recorded as the anchor's.
    Anchor,
    /// Fused attention against the anchor and previous frame.
    Generated,
    /// Plain attention with nothing recorded, for auxiliary passes such as
    /// mask estimation.
    Observe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MgdmSettings {
    /// Drop masked tokens from the key set instead of zeroing them.
    pub drop_masked_tokens: bool,
}

struct State {
    bank: AttentionBank,
    role: FrameRole,
    branch: Branch,
}

/// Replaces self-attention with dual consistency attention, optionally
/// mask-guided. The pipeline announces each denoiser pass with
/// [`begin_pass`](Self::begin_pass) and closes each frame with
/// [`finish_frame`](Self::finish_frame).
pub struct DualConsistencyProcessor {
    weights: FusionWeights,
    mgdm: Option<MgdmSettings>,
    state: Mutex<State>,
}

impl DualConsistencyProcessor {
    pub fn new(weights: FusionWeights, mgdm: Option<MgdmSettings>) -> Self {
        Self {
            weights,
            mgdm,
            state: Mutex::new(State {
                bank: AttentionBank::new(),
                role: FrameRole::Anchor,
                branch: Branch::Conditional,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn weights(&self) -> FusionWeights {
        self.weights
    }

    pub fn mask_guided(&self) -> bool {
        self.mgdm.is_some()
    }

    /// Starts a timestep, dropping cached entries of any other one.
    pub fn begin_timestep(&self, t: usize) {
        self.lock().bank.begin_timestep(t);
    }

    pub fn begin_pass(&self, role: FrameRole, t: usize, branch: Branch) {
        let mut s = self.lock();
        if role != FrameRole::Observe {
            s.bank.begin_timestep(t);
        }
        s.role = role;
        s.branch = branch;
    }

    pub fn set_anchor_mask(&self, mask: super::BodyMask) {
        self.lock().bank.set_anchor_mask(mask);
    }

    pub fn set_current_mask(&self, mask: super::BodyMask) {
        self.lock().bank.set_current_mask(mask);
    }

    pub fn finish_frame(&self) {
        self.lock().bank.finish_frame();
    }

    pub fn with_bank<R>(&self, f: impl FnOnce(&AttentionBank) -> R) -> R {
        f(&self.lock().bank)
    }
}

fn check_like(live: &KeyValue, cached: &KeyValue) -> Result<()> {
    if live.k.dim() != cached.k.dim() {
        return Err(Error::shape(live.k.shape(), cached.k.shape()));
    }
    if live.v.dim() != cached.v.dim() {
        return Err(Error::shape(live.v.shape(), cached.v.shape()));
    }
    Ok(())
}

impl AttentionProcessor for DualConsistencyProcessor {
    fn process(&self, call: &AttentionCall<'_>) -> Result<Array2<f64>> {
        let mut s = self.lock();
        if s.role == FrameRole::Observe {
            return multi_head_attention(call.q, call.k, call.v, call.heads);
        }
        if s.bank.timestep() != Some(call.timestep) {
            return Err(Error::Contract(format!(
                "attention call at timestep {} outside the announced pass",
                call.timestep
            )));
        }
        let live = KeyValue::new(call.k.clone(), call.v.clone());
        let branch = s.branch;
        match s.role {
            FrameRole::Anchor => {
                let out = multi_head_attention(call.q, call.k, call.v, call.heads)?;
                s.bank.record_anchor(call.site, branch, live);
                Ok(out)
            }
            FrameRole::Generated => {
                let anchor = s.bank.anchor(&call.site, branch)?;
                let previous = s.bank.previous(&call.site, branch)?;
                check_like(&live, anchor)?;
                check_like(&live, previous)?;
                let frames = FrameKeyValues {
                    anchor,
                    previous,
                    current: &live,
                };
                let out = match self.mgdm {
                    None => dual_consistency_attention(call.q, frames, self.weights, call.heads)?,
                    Some(settings) => {
                        let (h, w) = call.site.spatial_resolution;
                        let missing = |which: &str| Error::MissingMask(format!("{which} frame mask at {}", call.site));
                        let anchor_mask = s.bank.anchor_mask().ok_or_else(|| missing("anchor"))?.resample(h, w);
                        let previous_mask = s.bank.previous_mask().ok_or_else(|| missing("previous"))?.resample(h, w);
                        let current_mask = s.bank.current_mask().ok_or_else(|| missing("current"))?.resample(h, w);
                        let masks = FrameMasks {
                            anchor: &anchor_mask,
                            previous: &previous_mask,
                            current: &current_mask,
                        };
                        mgdm_attention(
                            call.q,
                            frames,
                            masks,
                            self.weights,
                            call.heads,
                            settings.drop_masked_tokens,
                        )?
                    }
                };
                s.bank.record_current(call.site, branch, live);
                Ok(out)
            }
            FrameRole::Observe => unreachable!("handled above"),
        }
    }
}

/// Sites whose self-attention is replaced while generating one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WiringPlan {
    pub frame_index: usize,
    pub sites: Vec<AttentionSite>,
}

impl WiringPlan {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn filter(&self) -> SiteFilter {
        SiteFilter::sites(self.sites.clone())
    }
}

/// The anchor frame is left untouched; every later frame replaces the
/// self-attention of the upsampling blocks and nothing else.
pub fn frame_generation_attention_schedule(frame_index: usize, inventory: &[AttentionSite]) -> WiringPlan {
    let sites = if frame_index == 0 {
        Vec::new()
    } else {
        inventory
            .iter()
            .filter(|s| s.block_kind == BlockKind::Up && s.attention_kind == AttentionKind::SelfAttention)
            .copied()
            .collect()
    };
    WiringPlan { frame_index, sites }
}
