use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{Tape, Var};
use super::{
    AttentionCall, AttentionKind, AttentionProcessor, AttentionSite, BlockKind, CrossAttentionMaps,
    DenoiserBackend, ProcessorHandle, ProcessorRegistry, SiteFilter, EMBED_DIM, EMBED_TOKENS,
};
use crate::attention::kernels::multi_head_probs;
use crate::diffusion::LatentCode;
use crate::error::{Error, Result};
use crate::pose::ConditioningImage;

const CHANNELS: usize = 4;
const GRID: usize = 8;
const HIDDEN: usize = 16;
const FF: usize = 32;
const HEADS: usize = 2;
const POSE_SIZE: u32 = 64;
const TEXT_GAIN: f64 = 0.1;

/// Projections of one attention site. Keys and values read from the hidden
/// state (self) or the text embedding (cross).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
struct Layer {
    block: BlockKind,
    index: usize,
    res: usize,
    self_attn: AttentionWeights,
    cross_attn: AttentionWeights,
    ff1: Array2<f64>,
    ff2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyWeights {
    pub w_in: Array2<f64>,
    pub b_in: Array2<f64>,
    pub w_time: Array2<f64>,
    pub w_pose: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
    layers: Vec<Layer>,
}

/// Hidden state entering one attention site during a traced forward pass.
#[derive(Debug, Clone)]
pub struct SiteTrace {
    pub site: AttentionSite,
    /// `(queries, HIDDEN)`
    pub hidden: Array2<f64>,
}

/// A small deterministic U-shaped attention network standing in for a
/// pretrained pose-conditioned denoiser.
///
/// Latent `4x8x8`, hidden width 16 with 2 heads, text embedding `8x32`,
/// pose image `64x64` RGB pooled to the latent grid and added at the input.
/// Input and output projections are kept small so the noise estimate varies
/// slowly along a sampling trajectory, which keeps DDIM inversion accurate.
/// Layers: `down[0]` at 8x8, `mid[0]` at 4x4, `up[0]` and `up[1]` at 8x8, each
/// with one self-attention, one cross-attention and a tanh feed-forward.
pub struct ToyDenoiser {
    seed: u64,
    cond_scale: f64,
    weights: ToyWeights,
    registry: ProcessorRegistry,
}

struct Forward {
    eps: Var,
    embedding: Var,
    traces: Vec<SiteTrace>,
    cross_probs: Vec<(AttentionSite, Vec<Array2<f64>>)>,
}

#[derive(Clone, Copy, Default)]
struct ForwardMode {
    trace: bool,
    cross_probs: bool,
    embedding_grad: bool,
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let std = gain / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl ToyWeights {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = |rng: &mut ChaCha8Rng, ctx: usize, out_gain: f64| AttentionWeights {
            wq: init(rng, HIDDEN, HIDDEN, 1.0),
            wk: init(rng, ctx, HIDDEN, 1.0),
            wv: init(rng, ctx, HIDDEN, 1.0),
            wo: init(rng, HIDDEN, HIDDEN, out_gain),
        };
        let w_in = init(&mut rng, CHANNELS, HIDDEN, 0.05);
        let b_in = init(&mut rng, 1, HIDDEN, 0.1);
        let w_time = init(&mut rng, HIDDEN, HIDDEN, 0.5);
        let w_pose = init(&mut rng, 3, HIDDEN, 1.0);
        let plan = [
            (BlockKind::Down, 0, GRID),
            (BlockKind::Mid, 0, GRID / 2),
            (BlockKind::Up, 0, GRID),
            (BlockKind::Up, 1, GRID),
        ];
        let layers = plan
            .iter()
            .map(|&(block, index, res)| Layer {
                block,
                index,
                res,
                self_attn: attn(&mut rng, HIDDEN, 0.5),
                cross_attn: attn(&mut rng, EMBED_DIM, TEXT_GAIN),
                ff1: init(&mut rng, HIDDEN, FF, 1.0),
                ff2: init(&mut rng, FF, HIDDEN, 0.5),
            })
            .collect();
        let w_out = init(&mut rng, HIDDEN, CHANNELS, 0.3);
        let b_out = init(&mut rng, 1, CHANNELS, 0.1);
        Self {
            w_in,
            b_in,
            w_time,
            w_pose,
            w_out,
            b_out,
            layers,
        }
    }
}

fn time_features(t: usize) -> Array2<f64> {
    let half = HIDDEN / 2;
    Array2::from_shape_fn((1, HIDDEN), |(_, i)| {
        let freq = (-(10_000f64).ln() * (i % half) as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Mean RGB of each latent cell's pixel block, in `[0, 1]`: `(GRID*GRID, 3)`.
fn pose_features(pose: &ConditioningImage) -> Array2<f64> {
    let bw = pose.width as usize / GRID;
    let bh = pose.height as usize / GRID;
    let norm = 1.0 / (255.0 * (bw * bh) as f64);
    let mut out = Array2::zeros((GRID * GRID, 3));
    for gy in 0..GRID {
        for gx in 0..GRID {
            for y in gy * bh..(gy + 1) * bh {
                for x in gx * bw..(gx + 1) * bw {
                    let p = pose.pixel(x as u32, y as u32);
                    for c in 0..3 {
                        out[(gy * GRID + gx, c)] += p[c] as f64 * norm;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn latent_to_rows(latent: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = latent.dim();
    Array2::from_shape_fn((h * w, c), |(p, ch)| latent[(ch, p / w, p % w)])
}

pub(crate) fn rows_to_latent(rows: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((rows.ncols(), h, w), |(c, y, x)| rows[(y * w + x, c)])
}

impl ToyDenoiser {
    pub fn new(seed: u64) -> Self {
        Self::with_cond_scale(seed, 1.0)
    }

    pub fn with_cond_scale(seed: u64, cond_scale: f64) -> Self {
        Self {
            seed,
            cond_scale,
            weights: ToyWeights::new(seed),
            registry: ProcessorRegistry::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    /// Projections of the site in the same slot as `site`.
    pub fn site_weights(&self, site: &AttentionSite) -> Option<&AttentionWeights> {
        self.weights
            .layers
            .iter()
            .find(|l| l.block == site.block_kind && l.index == site.layer_index)
            .map(|l| match site.attention_kind {
                AttentionKind::SelfAttention => &l.self_attn,
                AttentionKind::Cross => &l.cross_attn,
            })
    }

    pub fn heads(&self) -> usize {
        HEADS
    }

    /// Runs the network and records the hidden state entering every visited
    /// attention site, in visiting order.
    pub fn trace(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
    ) -> Result<Vec<SiteTrace>> {
        let mut tape = Tape::new();
        let mode = ForwardMode {
            trace: true,
            ..Default::default()
        };
        Ok(self.forward(&mut tape, latent, t, embedding, pose, mode)?.traces)
    }

    fn check_inputs(&self, latent: &LatentCode, embedding: &Array2<f64>, pose: &ConditioningImage) -> Result<()> {
        if latent.shape() != [CHANNELS, GRID, GRID] {
            return Err(Error::shape(&[CHANNELS, GRID, GRID], &latent.shape()));
        }
        if embedding.dim() != (EMBED_TOKENS, EMBED_DIM) {
            return Err(Error::Contract(format!(
                "embedding must be ({EMBED_TOKENS}, {EMBED_DIM}), got {:?}",
                embedding.shape()
            )));
        }
        if (pose.width, pose.height) != (POSE_SIZE, POSE_SIZE) {
            return Err(Error::Contract(format!(
                "pose image must be {POSE_SIZE}x{POSE_SIZE}, got {}x{}",
                pose.width, pose.height
            )));
        }
        Ok(())
    }

    fn forward(
        &self,
        tape: &mut Tape,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
        mode: ForwardMode,
    ) -> Result<Forward> {
        self.check_inputs(latent, embedding, pose)?;
        let w = &self.weights;

        let x = latent_to_rows(&latent.data);
        let row_bias = &w.b_in + &time_features(t).dot(&w.w_time);
        let h0 = x.dot(&w.w_in) + &row_bias + pose_features(pose).dot(&w.w_pose) * self.cond_scale;

        let e = if mode.embedding_grad {
            tape.variable(embedding.clone())
        } else {
            tape.constant(embedding.clone())
        };
        let mut h = tape.constant(h0);
        let mut skip = None;
        let mut traces = Vec::new();
        let mut cross_probs = Vec::new();

        for layer in &w.layers {
            match layer.block {
                BlockKind::Mid => {
                    skip = Some(h);
                    h = tape.pool2(h, GRID, GRID);
                }
                BlockKind::Up if layer.index == 0 => {
                    let up = tape.up2(h, GRID / 2, GRID / 2);
                    h = tape.add(up, skip.expect("mid precedes up"));
                }
                _ => {}
            }
            for kind in [AttentionKind::SelfAttention, AttentionKind::Cross] {
                let site = AttentionSite {
                    block_kind: layer.block,
                    layer_index: layer.index,
                    attention_kind: kind,
                    spatial_resolution: (layer.res, layer.res),
                };
                let (aw, ctx) = match kind {
                    AttentionKind::SelfAttention => (&layer.self_attn, h),
                    AttentionKind::Cross => (&layer.cross_attn, e),
                };
                if mode.trace {
                    traces.push(SiteTrace {
                        site,
                        hidden: tape.value(h).clone(),
                    });
                }
                let wq = tape.constant(aw.wq.clone());
                let wk = tape.constant(aw.wk.clone());
                let wv = tape.constant(aw.wv.clone());
                let q = tape.matmul(h, wq);
                let k = tape.matmul(ctx, wk);
                let v = tape.matmul(ctx, wv);
                if mode.cross_probs && kind == AttentionKind::Cross {
                    cross_probs.push((site, multi_head_probs(tape.value(q), tape.value(k), HEADS)));
                }
                let attended = match self.registry.lookup(&site) {
                    Some(p) => {
                        let out = p.process(&AttentionCall {
                            site,
                            timestep: t,
                            heads: HEADS,
                            q: tape.value(q),
                            k: tape.value(k),
                            v: tape.value(v),
                        })?;
                        if out.dim() != tape.value(q).dim() {
                            return Err(Error::shape(tape.value(q).shape(), out.shape()));
                        }
                        tape.constant(out)
                    }
                    None => tape.attention(q, k, v, HEADS),
                };
                let wo = tape.constant(aw.wo.clone());
                let proj = tape.matmul(attended, wo);
                h = tape.add(h, proj);
            }
            let f1 = tape.constant(layer.ff1.clone());
            let f2 = tape.constant(layer.ff2.clone());
            let a = tape.matmul(h, f1);
            let a = tape.tanh(a);
            let a = tape.matmul(a, f2);
            h = tape.add(h, a);
        }

        let w_out = tape.constant(w.w_out.clone());
        let out = tape.matmul(h, w_out);
        let eps = tape.add_row(out, &w.b_out);
        Ok(Forward {
            eps,
            embedding: e,
            traces,
            cross_probs,
        })
    }
}

impl DenoiserBackend for ToyDenoiser {
    fn latent_shape(&self) -> [usize; 3] {
        [CHANNELS, GRID, GRID]
    }

    fn embedding_shape(&self) -> [usize; 2] {
        [EMBED_TOKENS, EMBED_DIM]
    }

    fn condition_size(&self) -> (u32, u32) {
        (POSE_SIZE, POSE_SIZE)
    }

    fn predict_noise(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
    ) -> Result<Array3<f64>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, latent, t, embedding, pose, ForwardMode::default())?;
        Ok(rows_to_latent(tape.value(f.eps), GRID, GRID))
    }

    fn predict_noise_vjp(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
        upstream: &mut dyn FnMut(&Array3<f64>) -> Array3<f64>,
    ) -> Result<(Array3<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let mode = ForwardMode {
            embedding_grad: true,
            ..Default::default()
        };
        let f = self.forward(&mut tape, latent, t, embedding, pose, mode)?;
        let eps = rows_to_latent(tape.value(f.eps), GRID, GRID);
        let seed = upstream(&eps);
        if seed.shape() != eps.shape() {
            return Err(Error::shape(eps.shape(), seed.shape()));
        }
        let grad = tape.gradient(f.eps, &latent_to_rows(&seed), f.embedding);
        Ok((eps, grad))
    }

    fn install_attention_processor(
        &self,
        filter: SiteFilter,
        processor: Arc<dyn AttentionProcessor>,
    ) -> ProcessorHandle {
        self.registry.install(&self.list_attention_sites(), filter, processor)
    }

    fn collect_cross_attention_maps(
        &self,
        latent: &LatentCode,
        t: usize,
        embedding: &Array2<f64>,
        pose: &ConditioningImage,
        token_indices: &[usize],
        head_mean: bool,
    ) -> Result<CrossAttentionMaps> {
        if let Some(&bad) = token_indices.iter().find(|&&i| i >= EMBED_TOKENS) {
            return Err(Error::Index {
                index: bad,
                len: EMBED_TOKENS,
            });
        }
        let mut tape = Tape::new();
        let mode = ForwardMode {
            cross_probs: true,
            ..Default::default()
        };
        let f = self.forward(&mut tape, latent, t, embedding, pose, mode)?;
        let maps = f
            .cross_probs
            .into_iter()
            .map(|(site, heads)| {
                let q = heads[0].nrows();
                let picked: Vec<Array2<f64>> = heads
                    .iter()
                    .map(|p| Array2::from_shape_fn((q, token_indices.len()), |(r, c)| p[(r, token_indices[c])]))
                    .collect();
                let tensor = if head_mean {
                    let n = picked.len() as f64;
                    let mean = picked.iter().fold(Array2::zeros((q, token_indices.len())), |acc, p| acc + p) / n;
                    mean.insert_axis(ndarray::Axis(0))
                } else {
                    let views: Vec<_> = picked.iter().map(|p| p.view()).collect();
                    ndarray::stack(ndarray::Axis(0), &views).expect("equal head shapes")
                };
                (site, tensor)
            })
            .collect();
        Ok(CrossAttentionMaps { maps })
    }

    fn list_attention_sites(&self) -> Vec<AttentionSite> {
        self.weights
            .layers
            .iter()
            .flat_map(|l| {
                [AttentionKind::SelfAttention, AttentionKind::Cross].map(|k| AttentionSite {
                    block_kind: l.block,
                    layer_index: l.index,
                    attention_kind: k,
                    spatial_resolution: (l.res, l.res),
                })
            })
            .collect()
    }
}
