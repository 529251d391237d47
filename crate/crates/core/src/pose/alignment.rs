use super::{joint, Keypoint, Pose};
use crate::error::{Error, Result};

/// `p -> scale * R(rotation) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        translation: (0.0, 0.0),
    };

    pub fn new(scale: f64, rotation: f64, translation: (f64, f64)) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param("scale", format!("must be > 0, got {scale}")));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        if self.rotation == 0.0 {
            return (
                self.scale * x + self.translation.0,
                self.scale * y + self.translation.1,
            );
        }
        let (s, c) = self.rotation.sin_cos();
        (
            self.scale * (c * x - s * y) + self.translation.0,
            self.scale * (s * x + c * y) + self.translation.1,
        )
    }

    pub fn inverse(&self) -> Self {
        let scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let partial = Self {
            scale,
            rotation,
            translation: (0.0, 0.0),
        };
        let (tx, ty) = partial.apply(self.translation.0, self.translation.1);
        Self {
            scale,
            rotation,
            translation: (-tx, -ty),
        }
    }

    /// The transform equivalent to applying `first` and then `self`.
    pub fn compose(&self, first: &SimilarityTransform) -> Self {
        let linear = Self {
            translation: (0.0, 0.0),
            ..*self
        };
        let (tx, ty) = linear.apply(first.translation.0, first.translation.1);
        Self {
            scale: self.scale * first.scale,
            rotation: self.rotation + first.rotation,
            translation: (tx + self.translation.0, ty + self.translation.1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlignOptions {
    /// Off by default: only position and scale are compensated.
    pub allow_rotation: bool,
}

/// Least-squares similarity transform that maps the target's torso anchors
/// onto the source's.
pub fn estimate_alignment(
    source: &Pose,
    target: &Pose,
    options: AlignOptions,
) -> Result<SimilarityTransform> {
    let pairs: Vec<(&Keypoint, &Keypoint)> = joint::ANCHORS
        .iter()
        .map(|&j| (&source.keypoints[j], &target.keypoints[j]))
        .filter(|(s, t)| s.is_present() && t.is_present())
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Alignment {
            frame: None,
            message: format!("{} usable anchor joints, need at least 2", pairs.len()),
        });
    }

    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for (s, t) in &pairs {
        sx += s.x;
        sy += s.y;
        tx += t.x;
        ty += t.y;
    }
    let (sx, sy, tx, ty) = (sx / n, sy / n, tx / n, ty / n);

    // a = sum <t, s>, b = sum t x s over centered coordinates
    let (mut a, mut b, mut var_t) = (0.0, 0.0, 0.0);
    for (s, t) in &pairs {
        let (ux, uy) = (t.x - tx, t.y - ty);
        let (vx, vy) = (s.x - sx, s.y - sy);
        a += ux * vx + uy * vy;
        b += ux * vy - uy * vx;
        var_t += ux * ux + uy * uy;
    }
    if var_t <= f64::EPSILON {
        return Err(Error::Alignment {
            frame: None,
            message: "target anchor joints are coincident".into(),
        });
    }

    let (scale, rotation) = if options.allow_rotation {
        (a.hypot(b) / var_t, b.atan2(a))
    } else {
        (a / var_t, 0.0)
    };
    if !(scale > 0.0) {
        return Err(Error::Alignment {
            frame: None,
            message: format!("degenerate scale {scale}; anchors are mirrored"),
        });
    }

    let linear = SimilarityTransform {
        scale,
        rotation,
        translation: (0.0, 0.0),
    };
    let (mx, my) = linear.apply(tx, ty);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: (sx - mx, sy - my),
    })
}

/// Maps every confident joint through `transform`. Joints that land outside
/// the canvas are clamped to its border; the count of clamped joints is
/// returned alongside the pose.
pub fn apply_alignment(pose: &Pose, transform: &SimilarityTransform) -> (Pose, usize) {
    let mut out = pose.clone();
    let mut clamped = 0;
    let max_x = (pose.canvas_width - 1) as f64;
    let max_y = (pose.canvas_height - 1) as f64;
    for kp in out.keypoints.iter_mut().filter(|k| k.is_present()) {
        let (x, y) = transform.apply(kp.x, kp.y);
        if pose.contains(x, y) {
            kp.x = x;
            kp.y = y;
        } else {
            clamped += 1;
            kp.x = x.clamp(0.0, max_x);
            kp.y = y.clamp(0.0, max_y);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} joint(s) clamped to the canvas after alignment");
    }
    (out, clamped)
}
