use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::{AttentionKind, BlockKind, CrossAttentionMaps};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    SegmentationFile,
    CrossAttention,
}

/// Binary character (true) versus background (false) map, row-major over a
/// grid of latent cells.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    cells: Array2<bool>,
    source: MaskSource,
}

impl BodyMask {
    pub fn new(cells: Array2<bool>, source: MaskSource) -> Self {
        Self { cells, source }
    }

    pub fn from_fn(h: usize, w: usize, source: MaskSource, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((h, w), |(r, c)| f(r, c)), source)
    }

    pub fn filled(h: usize, w: usize, value: bool, source: MaskSource) -> Self {
        Self::new(Array2::from_elem((h, w), value), source)
    }

    /// Reads a PNG or PGM; any nonzero luminance marks the character.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, MaskSource::SegmentationFile, |r, c| {
            img.get_pixel(c as u32, r as u32)[0] > 0
        }))
    }

    /// `(height, width)`
    pub fn resolution(&self) -> (usize, usize) {
        self.cells.dim()
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.cells
    }

    /// Row-major `0.0` / `1.0` values.
    pub fn flat(&self) -> Vec<f64> {
        self.cells.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Number of character cells.
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbor resampling; each output cell reads the input cell
    /// under its center.
    pub fn resample(&self, h: usize, w: usize) -> BodyMask {
        if self.resolution() == (h, w) {
            return self.clone();
        }
        let (sh, sw) = self.resolution();
        Self::from_fn(h, w, self.source, |r, c| self.cells[(nearest(r, h, sh), nearest(c, w, sw))])
    }
}

/// Source index whose cell contains the center of destination cell `i`.
pub(crate) fn nearest(i: usize, dst: usize, src: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

fn resample_values(map: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = map.dim();
    Array2::from_shape_fn((h, w), |(r, c)| map[(nearest(r, h, sh), nearest(c, w, sw))])
}

/// Which cross-attention sites feed mask extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSites {
    /// Up-block cross-attention sites at or above the minimum resolution; when
    /// none qualify, the up-block cross-attention sites of largest resolution.
    Auto,
    /// Cross-attention sites of the named `(block, layer)` slots.
    Listed(Vec<(BlockKind, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub threshold: f64,
    pub sites: MaskSites,
    pub min_resolution: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            threshold: 0.35,
            sites: MaskSites::Auto,
            min_resolution: 16,
        }
    }
}

/// Mean attention paid to `token_indices`, averaged over heads and the
/// selected sites, on the grid of the finest selected site.
pub fn aggregate_token_attention(
    maps: &CrossAttentionMaps,
    token_indices: &[usize],
    options: &MaskOptions,
) -> Result<Array2<f64>> {
    if token_indices.is_empty() {
        return Err(Error::param("token_indices", "no subject tokens selected"));
    }
    let cross: Vec<_> = maps
        .maps
        .iter()
        .filter(|(s, _)| s.attention_kind == AttentionKind::Cross)
        .collect();
    let selected: Vec<_> = match &options.sites {
        MaskSites::Auto => {
            let up: Vec<_> = cross.iter().filter(|(s, _)| s.block_kind == BlockKind::Up).copied().collect();
            let fine: Vec<_> = up
                .iter()
                .filter(|(s, _)| {
                    let (h, w) = s.spatial_resolution;
                    h.min(w) >= options.min_resolution
                })
                .copied()
                .collect();
            if fine.is_empty() {
                let best = up.iter().map(|(s, _)| s.spatial_resolution.0 * s.spatial_resolution.1).max();
                up.into_iter()
                    .filter(|(s, _)| Some(s.spatial_resolution.0 * s.spatial_resolution.1) == best)
                    .collect()
            } else {
                fine
            }
        }
        MaskSites::Listed(slots) => cross
            .iter()
            .filter(|(s, _)| slots.contains(&(s.block_kind, s.layer_index)))
            .copied()
            .collect(),
    };
    if selected.is_empty() {
        return Err(Error::param("mgdm.sites", "no cross-attention site selected for mask extraction"));
    }

    let (gh, gw) = selected
        .iter()
        .map(|(s, _)| s.spatial_resolution)
        .max_by_key(|&(h, w)| h * w)
        .expect("non-empty");
    let mut acc = Array2::<f64>::zeros((gh, gw));
    for (site, tensor) in &selected {
        let (heads, queries, tokens) = tensor.dim();
        if let Some(&bad) = token_indices.iter().find(|&&i| i >= tokens) {
            return Err(Error::Index { index: bad, len: tokens });
        }
        let (h, w) = site.spatial_resolution;
        if h * w != queries {
            return Err(Error::shape(&[h * w], &[queries]));
        }
        let mut per_query = Array2::<f64>::zeros((h, w));
        for head in tensor.axis_iter(Axis(0)) {
            for (q, row) in head.axis_iter(Axis(0)).enumerate() {
                let s: f64 = token_indices.iter().map(|&t| row[t]).sum();
                per_query[(q / w, q % w)] += s;
            }
        }
        per_query /= (heads * token_indices.len()) as f64;
        acc += &resample_values(&per_query, gh, gw);
    }
    Ok(acc / selected.len() as f64)
}

/// Min-max normalizes and thresholds. A map without dynamic range has no
/// meaningful foreground and yields all zeros.
pub fn binarize(map: &Array2<f64>, threshold: f64) -> Array2<bool> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 1e-12) {
        log::warn!("attention map has no dynamic range; body mask is empty");
        return Array2::from_elem(map.dim(), false);
    }
    map.mapv(|v| (v - min) / range >= threshold)
}

/// Body mask from the attention paid to the subject tokens.
pub fn extract_body_mask(
    maps: &CrossAttentionMaps,
    token_indices: &[usize],
    options: &MaskOptions,
    target_resolution: (usize, usize),
) -> Result<BodyMask> {
    let map = aggregate_token_attention(maps, token_indices, options)?;
    let mask = BodyMask::new(binarize(&map, options.threshold), MaskSource::CrossAttention);
    Ok(mask.resample(target_resolution.0, target_resolution.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionSite;
    use ndarray::Array3;

    fn up_cross(res: usize, layer: usize) -> AttentionSite {
        AttentionSite {
            block_kind: BlockKind::Up,
            layer_index: layer,
            attention_kind: AttentionKind::Cross,
            spatial_resolution: (res, res),
        }
    }

    #[test]
    fn uniform_maps_give_empty_mask() {
        let maps = CrossAttentionMaps {
            maps: vec![(up_cross(4, 0), Array3::from_elem((2, 16, 4), 0.25))],
        };
        let opts = MaskOptions {
            threshold: 0.5,
            ..Default::default()
        };
        let m = extract_body_mask(&maps, &[1], &opts, (4, 4)).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn delta_map_sets_one_cell() {
        let mut t = Array3::zeros((1, 16, 3));
        t[(0, 6, 2)] = 1.0;
        let maps = CrossAttentionMaps {
            maps: vec![(up_cross(4, 0), t)],
        };
        let m = extract_body_mask(&maps, &[2], &MaskOptions::default(), (4, 4)).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.cells()[(1, 2)]);
    }

    #[test]
    fn empty_tokens_rejected() {
        let maps = CrossAttentionMaps {
            maps: vec![(up_cross(4, 0), Array3::zeros((1, 16, 3)))],
        };
        assert!(extract_body_mask(&maps, &[], &MaskOptions::default(), (4, 4)).is_err());
        assert!(matches!(
            extract_body_mask(&maps, &[3], &MaskOptions::default(), (4, 4)),
            Err(Error::Index { index: 3, .. })
        ));
    }

    #[test]
    fn auto_prefers_fine_sites() {
        let mut coarse = Array3::zeros((1, 16, 1));
        coarse[(0, 0, 0)] = 1.0;
        let mut fine = Array3::zeros((1, 256, 1));
        fine[(0, 255, 0)] = 1.0;
        let maps = CrossAttentionMaps {
            maps: vec![(up_cross(4, 0), coarse), (up_cross(16, 1), fine)],
        };
        let m = extract_body_mask(&maps, &[0], &MaskOptions::default(), (16, 16)).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.cells()[(15, 15)]);
    }

    #[test]
    fn nearest_resampling() {
        let m = BodyMask::from_fn(2, 2, MaskSource::CrossAttention, |r, c| r == 0 && c == 1);
        let up = m.resample(4, 4);
        assert_eq!(up.count(), 4);
        assert!(up.cells()[(0, 2)] && up.cells()[(1, 3)]);
        assert_eq!(up.resample(2, 2), m);
    }
}
