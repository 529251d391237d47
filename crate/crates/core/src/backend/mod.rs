//! The noise-prediction network contract: pose-conditioned noise
//! prediction, gradients with respect to the text embedding, attention
//! processor injection and cross-attention map readout.

mod codec;
mod embedder;
mod processor;
pub(crate) mod tape;
mod toy;

pub use codec::{LatentCodec, OrthonormalCodec};
pub use embedder::{ToyTextEmbedder, EMBED_DIM, EMBED_TOKENS};
pub use processor::{
    AttentionCall, AttentionProcessor, IdentityProcessor, ProcessorHandle, ProcessorRegistry, SiteFilter,
};
pub use toy::{SiteTrace, ToyDenoiser, ToyWeights, AttentionWeights};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentCode;
use crate::error::Result;
use crate::pose::ConditioningImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionSite {
    pub block_kind: BlockKind,
    pub layer_index: usize,
    pub attention_kind: AttentionKind,
    /// `(height, width)` of the query grid in latent cells.
    pub spatial_resolution: (usize, usize),
}

impl AttentionSite {
    pub(crate) fn same_slot(&self, other: &AttentionSite) -> bool {
        self.block_kind == other.block_kind
            && self.layer_index == other.layer_index
            && self.attention_kind == other.attention_kind
    }
}

impl std::fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.attention_kind {
            AttentionKind::SelfAttention => "self",
            AttentionKind::Cross => "cross",
        };
        write!(f, "{:?}[{}].{}", self.block_kind, self.layer_index, kind)
    }
}

/// Cross-attention probabilities per site, `(heads, queries, tokens)`; the
/// head axis has length 1 when heads were averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMaps {
    pub maps: Vec<(AttentionSite, Array3<f64>)>,
}

impl CrossAttentionMaps {
    pub fn get(&self, site: &AttentionSite) -> Option<&Array3<f64>> {
        self.maps.iter().find(|(s, _)| s.same_slot(site)).map(|(_, m)| m)
    }
}

/// A noise-prediction network with pose conditioning.
///
/// `predict_noise` must be a pure function of its arguments and the set of
/// installed processors.
pub trait DenoiserBackend: Send + Sync {
    /// `(channels, height, width)` of the latent.
    fn latent_shape(&self) -> [usize; 3];

    /// `(tokens, dim)` of the text embedding.
    fn embedding_shape(&self) -> [usize; 2];

    /// `(width, height)` of the pose-conditioning image.
    fn condition_size(&self) -> (u32, u32);

    fn predict_noise(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
    ) -> Result<Array3<f64>>;

    /// Noise prediction together with the gradient of `sum(upstream * eps)`
    /// with respect to `embedding`. `upstream` is computed from the
    /// prediction itself, so a loss gradient costs one forward and one
    /// backward pass.
    fn predict_noise_vjp(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
        upstream: &mut dyn FnMut(&Array3<f64>) -> Array3<f64>,
    ) -> Result<(Array3<f64>, Array2<f64>)>;

    fn install_attention_processor(
        &self,
        filter: SiteFilter,
        processor: std::sync::Arc<dyn AttentionProcessor>,
    ) -> ProcessorHandle;

    /// Cross-attention maps restricted to `token_indices`, optionally averaged
    /// over heads.
    fn collect_cross_attention_maps(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
        token_indices: &[usize],
        head_mean: bool,
    ) -> Result<CrossAttentionMaps>;

    fn list_attention_sites(&self) -> Vec<AttentionSite>;
}
