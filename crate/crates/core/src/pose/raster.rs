use std::path::Path;

use super::Pose;
use crate::error::{Error, Result};

/// Limb connectivity of the 18-joint skeleton, as joint index pairs.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

pub const JOINT_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

/// An RGB8 image, row-major, used as the pose-conditioning input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ConditioningImage {
    pub fn black(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(path, &self.data, self.width, self.height, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterStyle {
    /// Joint disc radius in output pixels.
    pub joint_radius: f64,
    /// Limb stroke width in output pixels; zero disables limbs.
    pub limb_width: f64,
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            joint_radius: 2.0,
            limb_width: 2.0,
        }
    }
}

/// Draws the skeleton on black. Pixel `(px, py)` is covered by a shape when
/// its center `(px + 0.5, py + 0.5)` lies inside it.
pub fn rasterize_pose(pose: &Pose, width: u32, height: u32, style: RasterStyle) -> ConditioningImage {
    let mut img = ConditioningImage::black(width, height);
    let sx = width as f64 / pose.canvas_width as f64;
    let sy = height as f64 / pose.canvas_height as f64;
    let at = |j: usize| (pose.keypoints[j].x * sx, pose.keypoints[j].y * sy);

    if style.limb_width > 0.0 {
        let half = style.limb_width / 2.0;
        for (i, &(a, b)) in LIMBS.iter().enumerate() {
            if !(pose.keypoints[a].is_present() && pose.keypoints[b].is_present()) {
                continue;
            }
            let color = JOINT_COLORS[i].map(|c| (c as f64 * 0.6).round() as u8);
            let (p, q) = (at(a), at(b));
            let bounds = (
                p.0.min(q.0) - half,
                p.1.min(q.1) - half,
                p.0.max(q.0) + half,
                p.1.max(q.1) + half,
            );
            fill(&mut img, bounds, color, |x, y| segment_distance2((x, y), p, q) <= half * half);
        }
    }

    let r = style.joint_radius;
    for (j, kp) in pose.keypoints.iter().enumerate() {
        if !kp.is_present() {
            continue;
        }
        let c = at(j);
        fill(&mut img, (c.0 - r, c.1 - r, c.0 + r, c.1 + r), JOINT_COLORS[j], |x, y| {
            (x - c.0).powi(2) + (y - c.1).powi(2) <= r * r
        });
    }
    img
}

fn fill(
    img: &mut ConditioningImage,
    (x0, y0, x1, y1): (f64, f64, f64, f64),
    color: [u8; 3],
    inside: impl Fn(f64, f64) -> bool,
) {
    let lo_x = (x0 - 1.0).floor().max(0.0) as i64;
    let lo_y = (y0 - 1.0).floor().max(0.0) as i64;
    let hi_x = ((x1 + 1.0).ceil() as i64).min(img.width as i64 - 1);
    let hi_y = ((y1 + 1.0).ceil() as i64).min(img.height as i64 - 1);
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            if inside(px as f64 + 0.5, py as f64 + 0.5) {
                img.put(px as u32, py as u32, color);
            }
        }
    }
}

fn segment_distance2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + s * dx, a.1 + s * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Keypoint;

    #[test]
    fn all_missing_is_black() {
        let img = rasterize_pose(&Pose::empty(100, 100), 64, 64, RasterStyle::default());
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn deterministic() {
        let mut pose = Pose::empty(100, 100);
        pose.keypoints[1] = Keypoint::new(50.0, 30.0, 1.0);
        pose.keypoints[2] = Keypoint::new(40.0, 32.0, 0.8);
        pose.keypoints[3] = Keypoint::new(35.0, 50.0, 0.8);
        let a = rasterize_pose(&pose, 64, 64, RasterStyle::default());
        let b = rasterize_pose(&pose, 64, 64, RasterStyle::default());
        assert_eq!(a, b);
        assert!(a.data.iter().any(|&v| v != 0));
    }

    #[test]
    fn single_joint_is_one_disc() {
        let r = 3.0;
        let (cx, cy) = (20.3, 17.8);
        let mut pose = Pose::empty(64, 64);
        pose.keypoints[7] = Keypoint::new(cx, cy, 1.0);
        let img = rasterize_pose(&pose, 64, 64, RasterStyle { joint_radius: r, limb_width: 2.0 });

        // independent count of pixel centers inside the disc
        let mut expected = 0;
        for py in 0..64 {
            for px in 0..64 {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                    expected += 1;
                }
            }
        }
        let lit: Vec<(u32, u32)> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) != [0, 0, 0])
            .collect();
        assert_eq!(lit.len(), expected);
        assert!(lit.iter().all(|&(x, y)| img.pixel(x, y) == JOINT_COLORS[7]));
    }

    #[test]
    fn missing_endpoint_hides_limb() {
        let mut pose = Pose::empty(64, 64);
        pose.keypoints[1] = Keypoint::new(10.0, 10.0, 1.0);
        pose.keypoints[2] = Keypoint::new(40.0, 10.0, 0.0);
        let img = rasterize_pose(&pose, 64, 64, RasterStyle::default());
        assert_eq!(img.pixel(25, 10), [0, 0, 0]);
    }
}
