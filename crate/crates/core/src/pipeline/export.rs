use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pose::ConditioningImage;

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub const OVERLAY_FILE: &str = "overlay.png";

fn to_gray(image: &Array2<f64>) -> GrayImage {
    let (h, w) = image.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(image[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `frame_0000.png`, `frame_0001.png`, .. as 8-bit grayscale, values
/// clamped to `[0, 1]`. With poses, also writes a contact sheet with each
/// frame's skeleton drawn over it, one tile per frame left to right.
/// Returns the written paths, frames first.
pub fn export_frames(
    images: &[Array2<f64>],
    out_dir: &Path,
    overlay: Option<&[ConditioningImage]>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(images.len() + 1);
    for (i, img) in images.iter().enumerate() {
        let path = out_dir.join(frame_file_name(i));
        save(|p| to_gray(img).save(p), &path)?;
        written.push(path);
    }
    if let (Some(poses), Some(first)) = (overlay, images.first()) {
        if poses.len() != images.len() {
            return Err(Error::Contract(format!(
                "{} overlay poses for {} frames",
                poses.len(),
                images.len()
            )));
        }
        let (h, w) = first.dim();
        let mut sheet = RgbImage::new((w * images.len()) as u32, h as u32);
        for (i, (img, pose)) in images.iter().zip(poses).enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::shape(&[h, w], img.shape()));
            }
            let gray = to_gray(img);
            for y in 0..h as u32 {
                for x in 0..w as u32 {
                    let px = pose_pixel(pose, x, y, w as u32, h as u32);
                    let g = gray.get_pixel(x, y)[0];
                    let c = if px == [0, 0, 0] { [g, g, g] } else { px };
                    sheet.put_pixel(i as u32 * w as u32 + x, y, Rgb(c));
                }
            }
        }
        let path = out_dir.join(OVERLAY_FILE);
        save(|p| sheet.save(p), &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Nearest pose pixel for a tile pixel when sizes differ.
fn pose_pixel(pose: &ConditioningImage, x: u32, y: u32, w: u32, h: u32) -> [u8; 3] {
    let px = ((2 * x + 1) * pose.width / (2 * w)).min(pose.width - 1);
    let py = ((2 * y + 1) * pose.height / (2 * h)).min(pose.height - 1);
    pose.pixel(px, py)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frames_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = export_frames(&[], dir.path(), Some(&[])).unwrap();
        assert!(out.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn values_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_vec((1, 3), vec![-0.5, 0.5, 1.5]).unwrap();
        export_frames(&[img], dir.path(), None).unwrap();
        let back = image::open(dir.path().join("frame_0000.png")).unwrap().to_luma8();
        assert_eq!(back.as_raw(), &vec![0, 128, 255]);
    }
}
