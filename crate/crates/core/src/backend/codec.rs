use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Image <-> latent mapping. Images are grayscale in `[0, 1]`, `(height, width)`.
pub trait LatentCodec: Send + Sync {
    fn image_size(&self) -> (usize, usize);
    fn latent_shape(&self) -> [usize; 3];
    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>>;
    fn decode(&self, latent: &Array3<f64>) -> Array2<f64>;
}

/// Splits the image into `patch x patch` tiles, one per latent cell, and
/// projects each centered tile onto `channels` orthonormal basis vectors.
/// Channel 0 is the tile mean direction. The projection has orthonormal rows,
/// so `decode(encode(x))` is the orthogonal projection of `x`.
#[derive(Debug, Clone)]
pub struct OrthonormalCodec {
    patch: usize,
    grid: (usize, usize),
    /// `(channels, patch * patch)`
    basis: Array2<f64>,
    scale: f64,
}

impl OrthonormalCodec {
    pub fn new(seed: u64, channels: usize, grid: (usize, usize), patch: usize) -> Self {
        let n = patch * patch;
        assert!(channels >= 1 && channels <= n, "channels must fit in a patch");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis = Array2::<f64>::zeros((channels, n));
        basis.row_mut(0).fill(1.0 / (n as f64).sqrt());
        for c in 1..channels {
            let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Gram-Schmidt, applied twice for stability
            for _ in 0..2 {
                for p in 0..c {
                    let dot: f64 = basis.row(p).iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (x, b) in v.iter_mut().zip(basis.row(p).iter()) {
                        *x -= dot * b;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (dst, x) in basis.row_mut(c).iter_mut().zip(&v) {
                *dst = x / norm;
            }
        }
        Self {
            patch,
            grid,
            basis,
            scale: 0.25,
        }
    }

    /// The 64x64 -> 4x8x8 codec of the toy backend.
    pub fn toy(seed: u64) -> Self {
        Self::new(seed ^ 0x5eed_c0de, 4, (8, 8), 8)
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }
}

impl LatentCodec for OrthonormalCodec {
    fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * self.patch, self.grid.1 * self.patch)
    }

    fn latent_shape(&self) -> [usize; 3] {
        [self.basis.nrows(), self.grid.0, self.grid.1]
    }

    fn encode(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        let (h, w) = self.image_size();
        if image.dim() != (h, w) {
            return Err(Error::shape(&[h, w], image.shape()));
        }
        let p = self.patch;
        let mut out = Array3::zeros((self.basis.nrows(), self.grid.0, self.grid.1));
        for gy in 0..self.grid.0 {
            for gx in 0..self.grid.1 {
                for (c, b) in self.basis.rows().into_iter().enumerate() {
                    let mut acc = 0.0;
                    for (i, bv) in b.iter().enumerate() {
                        let px = image[(gy * p + i / p, gx * p + i % p)];
                        acc += bv * (2.0 * px - 1.0);
                    }
                    out[(c, gy, gx)] = acc * self.scale;
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latent: &Array3<f64>) -> Array2<f64> {
        let (h, w) = self.image_size();
        let p = self.patch;
        let mut img = Array2::<f64>::zeros((h, w));
        for gy in 0..self.grid.0 {
            for gx in 0..self.grid.1 {
                for (c, b) in self.basis.rows().into_iter().enumerate() {
                    let coeff = latent[(c, gy, gx)] / self.scale;
                    for (i, bv) in b.iter().enumerate() {
                        img[(gy * p + i / p, gx * p + i % p)] += coeff * bv;
                    }
                }
            }
        }
        img.mapv(|v| (v + 1.0) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        let c = OrthonormalCodec::toy(3);
        let g = c.basis().dot(&c.basis().t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let c = OrthonormalCodec::toy(0);
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let z = c.encode(&img).unwrap();
        let back = c.decode(&z);
        let z2 = c.encode(&back).unwrap();
        for (a, b) in z.iter().zip(z2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_image_round_trips_exactly() {
        let c = OrthonormalCodec::toy(0);
        let img = Array2::from_elem((64, 64), 0.3);
        let back = c.decode(&c.encode(&img).unwrap());
        assert!(back.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
