use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::kernels::multi_head_attention;
use super::mask::BodyMask;
use crate::error::{Error, Result};

/// Weights of the anchor, previous-frame and current-frame attention terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.7,
            lambda2: 0.15,
            lambda3: 0.15,
        }
    }
}

impl FusionWeights {
    /// Each weight must lie in `[0, 1]` and the three must sum to 1 within
    /// `1e-9`. The endpoints are allowed so single-term collapses can be
    /// expressed.
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("lambda3", lambda3)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param("fusion weights", format!("{name} = {v} is outside [0, 1]")));
            }
        }
        let sum = lambda1 + lambda2 + lambda3;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "fusion weights",
                format!("lambda1 + lambda2 + lambda3 = {sum}, expected 1"),
            ));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }

    pub fn terms(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

/// Keys and values of one frame at one attention site, `(tokens, features)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValue {
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl KeyValue {
    pub fn new(k: Array2<f64>, v: Array2<f64>) -> Self {
        Self { k, v }
    }
}

/// Weighted sum of attention against each frame. Terms with zero weight are
/// never evaluated, so a single unit weight reproduces that term exactly.
fn fuse(q: &Array2<f64>, frames: [&KeyValue; 3], weights: FusionWeights, heads: usize) -> Result<Array2<f64>> {
    let mut out: Option<Array2<f64>> = None;
    for (lambda, kv) in weights.terms().into_iter().zip(frames) {
        if lambda == 0.0 {
            continue;
        }
        let term = multi_head_attention(q, &kv.k, &kv.v, heads)?;
        match out.as_mut() {
            None => out = Some(if lambda == 1.0 { term } else { term * lambda }),
            Some(acc) => acc.scaled_add(lambda, &term),
        }
    }
    out.ok_or_else(|| Error::param("fusion weights", "all weights are zero"))
}

/// Keys and values of the anchor frame, the previous frame and the frame
/// being generated, at one site.
#[derive(Debug, Clone, Copy)]
pub struct FrameKeyValues<'a> {
    pub anchor: &'a KeyValue,
    pub previous: &'a KeyValue,
    pub current: &'a KeyValue,
}

/// `lambda1 * CFA(i, 0) + lambda2 * CFA(i, i-1) + lambda3 * CFA(i, i)`.
pub fn dual_consistency_attention(
    q: &Array2<f64>,
    frames: FrameKeyValues<'_>,
    weights: FusionWeights,
    heads: usize,
) -> Result<Array2<f64>> {
    fuse(q, [frames.anchor, frames.previous, frames.current], weights, heads)
}

/// Character and background parts of one frame's keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedKeyValue {
    pub character: KeyValue,
    pub background: KeyValue,
}

fn check_tokens(tokens: usize, mask: &BodyMask) -> Result<()> {
    let (h, w) = mask.resolution();
    if h * w != tokens {
        return Err(Error::shape(&[tokens], &[h, w]));
    }
    Ok(())
}

fn scale_rows(x: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, &w) in out.axis_iter_mut(Axis(0)).zip(weights) {
        row *= w;
    }
    out
}

/// Zeroes the background rows (character part) and the character rows
/// (background part). The two parts sum back to the input exactly.
pub fn masked_kv_split(kv: &KeyValue, mask: &BodyMask) -> Result<MaskedKeyValue> {
    check_tokens(kv.k.nrows(), mask)?;
    check_tokens(kv.v.nrows(), mask)?;
    let m = mask.flat();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    Ok(MaskedKeyValue {
        character: KeyValue::new(scale_rows(&kv.k, &m), scale_rows(&kv.v, &m)),
        background: KeyValue::new(scale_rows(&kv.k, &inv), scale_rows(&kv.v, &inv)),
    })
}

/// Keeps only the character rows and only the background rows. Either part
/// may have no rows; attention against it then yields zeros.
pub fn masked_kv_select(kv: &KeyValue, mask: &BodyMask) -> Result<MaskedKeyValue> {
    check_tokens(kv.k.nrows(), mask)?;
    check_tokens(kv.v.nrows(), mask)?;
    let m = mask.flat();
    let pick = |keep: bool| {
        let rows: Vec<usize> = (0..m.len()).filter(|&i| (m[i] == 1.0) == keep).collect();
        KeyValue::new(kv.k.select(Axis(0), &rows), kv.v.select(Axis(0), &rows))
    };
    Ok(MaskedKeyValue {
        character: pick(true),
        background: pick(false),
    })
}

/// Per-query choice between a character and a background result.
pub fn compose_by_mask(character: &Array2<f64>, background: &Array2<f64>, mask: &BodyMask) -> Result<Array2<f64>> {
    check_tokens(character.nrows(), mask)?;
    if character.dim() != background.dim() {
        return Err(Error::shape(character.shape(), background.shape()));
    }
    let mut out = background.clone();
    for (i, &m) in mask.flat().iter().enumerate() {
        if m == 1.0 {
            out.row_mut(i).assign(&character.row(i));
        }
    }
    Ok(out)
}

/// Masks of the anchor, previous and current frame at one site's resolution.
#[derive(Debug, Clone, Copy)]
pub struct FrameMasks<'a> {
    pub anchor: &'a BodyMask,
    pub previous: &'a BodyMask,
    pub current: &'a BodyMask,
}

/// Mask-guided fusion: character and background attention are fused
/// separately over the three frames and recombined by the current frame's
/// mask.
pub fn mgdm_attention(
    q: &Array2<f64>,
    frames: FrameKeyValues<'_>,
    masks: FrameMasks<'_>,
    weights: FusionWeights,
    heads: usize,
    drop_masked_tokens: bool,
) -> Result<Array2<f64>> {
    check_tokens(q.nrows(), masks.current)?;
    let split = if drop_masked_tokens {
        masked_kv_select
    } else {
        masked_kv_split
    };
    let parts = [
        split(frames.anchor, masks.anchor)?,
        split(frames.previous, masks.previous)?,
        split(frames.current, masks.current)?,
    ];
    let ones = masks.current.count();
    let total = q.nrows();
    let character = || fuse(q, [&parts[0].character, &parts[1].character, &parts[2].character], weights, heads);
    let background = || fuse(q, [&parts[0].background, &parts[1].background, &parts[2].background], weights, heads);
    if ones == total {
        return character();
    }
    if ones == 0 {
        return background();
    }
    compose_by_mask(&character()?, &background()?, masks.current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::mask::MaskSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BodyMask {
        BodyMask::from_fn(h, w, MaskSource::CrossAttention, |_, _| rng.random_bool(0.5))
    }

    #[test]
    fn weights_validate() {
        assert!(FusionWeights::new(0.9, 0.15, 0.15).is_err());
        assert!(FusionWeights::new(1.2, -0.1, -0.1).is_err());
        let d = FusionWeights::default();
        assert_eq!(d.terms(), [0.7, 0.15, 0.15]);
        assert!((d.terms().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn split_partitions_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kv = KeyValue::new(randn(&mut rng, 16, 6), randn(&mut rng, 16, 6));
        let m = random_mask(&mut rng, 4, 4);
        let p = masked_kv_split(&kv, &m).unwrap();
        assert_eq!(&p.character.k + &p.background.k, kv.k);
        assert_eq!(&p.character.v + &p.background.v, kv.v);
    }

    #[test]
    fn split_rejects_wrong_resolution() {
        let kv = KeyValue::new(Array2::zeros((16, 2)), Array2::zeros((16, 2)));
        let m = BodyMask::filled(3, 3, true, MaskSource::CrossAttention);
        assert!(masked_kv_split(&kv, &m).is_err());
    }

    #[test]
    fn select_keeps_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kv = KeyValue::new(randn(&mut rng, 4, 2), randn(&mut rng, 4, 2));
        let m = BodyMask::from_fn(2, 2, MaskSource::CrossAttention, |r, c| r == c);
        let p = masked_kv_select(&kv, &m).unwrap();
        assert_eq!(p.character.k.row(1), kv.k.row(3));
        assert_eq!(p.background.k.nrows(), 2);
    }

    #[test]
    fn compose_with_identical_inputs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 9, 3);
        let m = random_mask(&mut rng, 3, 3);
        assert_eq!(compose_by_mask(&x, &x, &m).unwrap(), x);
    }

    #[test]
    fn zero_weight_terms_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&mut rng, 4, 4);
        let good = KeyValue::new(randn(&mut rng, 4, 4), randn(&mut rng, 4, 4));
        let bad = KeyValue::new(Array2::zeros((1, 3)), Array2::zeros((1, 3)));
        let w = FusionWeights::new(0.0, 0.0, 1.0).unwrap();
        let frames = FrameKeyValues {
            anchor: &bad,
            previous: &bad,
            current: &good,
        };
        assert!(dual_consistency_attention(&q, frames, w, 2).is_ok());
    }
}
