use std::collections::HashMap;

use super::fusion::KeyValue;
use super::mask::BodyMask;
use crate::backend::AttentionSite;
use crate::error::{Error, Result};

/// Guidance branch a denoiser call belongs to. Keys and values are cached
/// per branch so each branch fuses with its own counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Unconditional,
    Conditional,
}

type Slot = (AttentionSite, Branch);

/// Keys, values and masks of the anchor frame and the previous frame at the
/// timestep currently being denoised, plus those of the frame in progress.
///
/// Frames are denoised in lockstep, so only one timestep is ever held. When a
/// frame finishes its pass, its entries become the previous frame's.
#[derive(Debug, Default)]
pub struct AttentionBank {
    timestep: Option<usize>,
    anchor: HashMap<Slot, KeyValue>,
    previous: HashMap<Slot, KeyValue>,
    current: HashMap<Slot, KeyValue>,
    anchor_mask: Option<BodyMask>,
    previous_mask: Option<BodyMask>,
    current_mask: Option<BodyMask>,
}

impl AttentionBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn timestep(&self) -> Option<usize> {
        self.timestep
    }

    /// Drops everything cached for another timestep.
    pub fn begin_timestep(&mut self, t: usize) {
        if self.timestep != Some(t) {
            *self = Self {
                timestep: Some(t),
                ..Self::default()
            };
        }
    }

    pub fn record_anchor(&mut self, site: AttentionSite, branch: Branch, kv: KeyValue) {
        self.current.insert((site, branch), kv.clone());
        self.anchor.insert((site, branch), kv);
    }

    pub fn record_current(&mut self, site: AttentionSite, branch: Branch, kv: KeyValue) {
        self.current.insert((site, branch), kv);
    }

    pub fn anchor(&self, site: &AttentionSite, branch: Branch) -> Result<&KeyValue> {
        self.anchor.get(&(*site, branch)).ok_or_else(|| Error::BankState {
            site: *site,
            what: format!("no anchor keys for the {branch:?} branch"),
        })
    }

    pub fn previous(&self, site: &AttentionSite, branch: Branch) -> Result<&KeyValue> {
        self.previous.get(&(*site, branch)).ok_or_else(|| Error::BankState {
            site: *site,
            what: format!("no previous-frame keys for the {branch:?} branch"),
        })
    }

    pub fn set_anchor_mask(&mut self, mask: BodyMask) {
        self.current_mask = Some(mask.clone());
        self.anchor_mask = Some(mask);
    }

    pub fn set_current_mask(&mut self, mask: BodyMask) {
        self.current_mask = Some(mask);
    }

    pub fn anchor_mask(&self) -> Option<&BodyMask> {
        self.anchor_mask.as_ref()
    }

    pub fn previous_mask(&self) -> Option<&BodyMask> {
        self.previous_mask.as_ref()
    }

    pub fn current_mask(&self) -> Option<&BodyMask> {
        self.current_mask.as_ref()
    }

    /// The frame in progress becomes the previous frame.
    pub fn finish_frame(&mut self) {
        self.previous = std::mem::take(&mut self.current);
        self.previous_mask = self.current_mask.take();
    }

    /// Number of cached key/value entries over all frames.
    pub fn len(&self) -> usize {
        self.anchor.len() + self.previous.len() + self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mask::MaskSource;
    use crate::backend::{AttentionKind, BlockKind};
    use ndarray::Array2;

    fn site() -> AttentionSite {
        AttentionSite {
            block_kind: BlockKind::Up,
            layer_index: 0,
            attention_kind: AttentionKind::SelfAttention,
            spatial_resolution: (2, 2),
        }
    }

    fn kv(v: f64) -> KeyValue {
        KeyValue::new(Array2::from_elem((4, 2), v), Array2::from_elem((4, 2), v))
    }

    #[test]
    fn rotation_and_eviction() {
        let mut bank = AttentionBank::new();
        bank.begin_timestep(10);
        assert!(matches!(bank.anchor(&site(), Branch::Conditional), Err(Error::BankState { .. })));
        bank.record_anchor(site(), Branch::Conditional, kv(0.0));
        bank.set_anchor_mask(BodyMask::filled(2, 2, true, MaskSource::SegmentationFile));
        bank.finish_frame();
        assert_eq!(bank.previous(&site(), Branch::Conditional).unwrap(), &kv(0.0));
        assert!(bank.previous(&site(), Branch::Unconditional).is_err());

        bank.record_current(site(), Branch::Conditional, kv(1.0));
        bank.finish_frame();
        assert_eq!(bank.previous(&site(), Branch::Conditional).unwrap(), &kv(1.0));
        assert_eq!(bank.anchor(&site(), Branch::Conditional).unwrap(), &kv(0.0));
        assert!(bank.previous_mask().is_none());
        assert!(bank.anchor_mask().is_some());
        assert_eq!(bank.len(), 2);

        bank.begin_timestep(10);
        assert_eq!(bank.len(), 2);
        bank.begin_timestep(5);
        assert!(bank.is_empty());
    }
}
