use super::{apply_alignment, estimate_alignment, AlignOptions, Keypoint, Pose, PoseSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Easing {
    #[default]
    Linear,
    Smoothstep,
}

impl Easing {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Easing::Linear => s,
            Easing::Smoothstep => s * s * (3.0 - 2.0 * s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionOptions {
    pub easing: Easing,
    pub align: AlignOptions,
    /// Estimate one transform per desired frame instead of one for the clip.
    pub per_frame_alignment: bool,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self {
            easing: Easing::Linear,
            align: AlignOptions::default(),
            per_frame_alignment: false,
        }
    }
}

/// Blends every joint between two poses at parameter `s` (0 = `from`, 1 = `to`).
/// A joint missing in either endpoint stays missing.
pub(crate) fn blend(from: &Pose, to: &Pose, s: f64) -> Pose {
    let mut out = from.clone();
    for (j, kp) in out.keypoints.iter_mut().enumerate() {
        let (a, b) = (&from.keypoints[j], &to.keypoints[j]);
        *kp = if a.is_present() && b.is_present() {
            Keypoint::new(
                a.x * (1.0 - s) + b.x * s,
                a.y * (1.0 - s) + b.y * s,
                a.confidence * (1.0 - s) + b.confidence * s,
            )
        } else {
            Keypoint::MISSING
        };
    }
    out
}

/// The `t` in-between poses from `source` to `first_target`; pose `k`
/// (1-based) sits at eased parameter `k / (t + 1)`.
pub fn interpolate_transition(source: &Pose, first_target: &Pose, t: usize, easing: Easing) -> Vec<Pose> {
    (1..=t)
        .map(|k| blend(source, first_target, easing.apply(k as f64 / (t + 1) as f64)))
        .collect()
}

/// `[source, transition.., aligned desired..]`, of length `desired.len() + t + 1`.
pub fn build_target_sequence(
    source: &Pose,
    desired: &PoseSequence,
    t: usize,
    options: TransitionOptions,
) -> Result<PoseSequence> {
    let first = desired.poses.first().ok_or_else(|| Error::param("desired", "empty pose sequence"))?;
    for (i, p) in desired.poses.iter().enumerate() {
        if !p.same_canvas(source) {
            return Err(Error::PoseSchema {
                frame: i,
                message: format!(
                    "canvas {}x{} differs from source canvas {}x{}",
                    p.canvas_width, p.canvas_height, source.canvas_width, source.canvas_height
                ),
            });
        }
    }

    let with_frame = |frame: usize| {
        move |e: Error| match e {
            Error::Alignment { message, .. } => Error::Alignment {
                frame: Some(frame),
                message,
            },
            other => other,
        }
    };

    let aligned: Vec<Pose> = if options.per_frame_alignment {
        desired
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let tf = estimate_alignment(source, p, options.align).map_err(with_frame(i))?;
                Ok(apply_alignment(p, &tf).0)
            })
            .collect::<Result<_>>()?
    } else {
        let tf = estimate_alignment(source, first, options.align).map_err(with_frame(0))?;
        desired.poses.iter().map(|p| apply_alignment(p, &tf).0).collect()
    };

    let mut poses = Vec::with_capacity(aligned.len() + t + 1);
    poses.push(source.clone());
    poses.extend(interpolate_transition(source, &aligned[0], t, options.easing));
    poses.extend(aligned);
    Ok(PoseSequence {
        poses,
        source_index_offset: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{SimilarityTransform, NUM_JOINTS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jittered(base: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        let mut p = base.clone();
        for k in p.keypoints.iter_mut() {
            k.x += rng.random_range(-10.0..10.0);
            k.y += rng.random_range(-10.0..10.0);
        }
        p
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let mut kps = [Keypoint::MISSING; NUM_JOINTS];
        for k in kps.iter_mut() {
            *k = Keypoint::new(
                rng.random_range(100.0..400.0),
                rng.random_range(100.0..400.0),
                rng.random_range(0.1..1.0),
            );
        }
        Pose::new(kps, 512, 512)
    }

    #[test]
    fn zero_transition_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        assert!(interpolate_transition(&a, &b, 0, Easing::Linear).is_empty());
    }

    #[test]
    fn single_midpoint() {
        let mut a = Pose::empty(20, 20);
        let mut b = Pose::empty(20, 20);
        a.keypoints[0] = Keypoint::new(0.0, 0.0, 1.0);
        b.keypoints[0] = Keypoint::new(10.0, 10.0, 1.0);
        let mid = interpolate_transition(&a, &b, 1, Easing::Linear);
        assert_eq!(mid.len(), 1);
        assert_eq!((mid[0].keypoints[0].x, mid[0].keypoints[0].y), (5.0, 5.0));
        assert!(!mid[0].keypoints[1].is_present());
    }

    #[test]
    fn trajectories_are_collinear_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for easing in [Easing::Linear, Easing::Smoothstep] {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let frames = interpolate_transition(&a, &b, 3, easing);
            for j in 0..NUM_JOINTS {
                let (ax, ay) = (a.keypoints[j].x, a.keypoints[j].y);
                let (dx, dy) = (b.keypoints[j].x - ax, b.keypoints[j].y - ay);
                let len2 = dx * dx + dy * dy;
                let mut last = 0.0;
                for f in &frames {
                    let (px, py) = (f.keypoints[j].x - ax, f.keypoints[j].y - ay);
                    let cross = dx * py - dy * px;
                    assert!(cross.abs() <= 1e-9 * len2.max(1.0), "joint {j} leaves the segment");
                    let s = (dx * px + dy * py) / len2;
                    assert!(s > last && s < 1.0, "joint {j} not monotone");
                    last = s;
                }
            }
        }
    }

    #[test]
    fn endpoints_reproduce_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, mut b) = (random_pose(&mut rng), random_pose(&mut rng));
        b.keypoints[4] = Keypoint::MISSING;
        let mut a_masked = a.clone();
        a_masked.keypoints[4] = Keypoint::MISSING;
        assert_eq!(blend(&a, &b, 0.0), a_masked);
        assert_eq!(blend(&a, &b, 1.0), b);
    }

    #[test]
    fn missing_joint_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        a.keypoints[9] = Keypoint::MISSING;
        for f in interpolate_transition(&a, &b, 6, Easing::Smoothstep) {
            assert!(!f.keypoints[9].is_present());
        }
    }

    #[test]
    fn degenerate_pipeline_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = random_pose(&mut rng);
        let desired = PoseSequence::new(vec![jittered(&src, &mut rng)]);
        let seq = build_target_sequence(&src, &desired, 0, TransitionOptions::default()).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.poses[0], src);
    }

    #[test]
    fn twelve_desired_plus_three_transition_is_sixteen_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = random_pose(&mut rng);
        let desired = PoseSequence::new((0..12).map(|_| jittered(&src, &mut rng)).collect());
        let seq = build_target_sequence(&src, &desired, 3, TransitionOptions::default()).unwrap();
        assert_eq!(seq.len(), 16);
        assert_eq!(seq.source_index_offset, 3);
    }

    #[test]
    fn misaligned_clip_is_pulled_onto_the_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reference: Vec<Pose> = (0..5)
            .map(|_| {
                let mut p = random_pose(&mut rng);
                for k in p.keypoints.iter_mut() {
                    k.x = 200.0 + (k.x - 250.0) * 0.3;
                    k.y = 200.0 + (k.y - 250.0) * 0.3;
                }
                p
            })
            .collect();
        // source shares the reference's first frame torso
        let source = reference[0].clone();
        let warp = SimilarityTransform::new(1.4, 0.0, (-30.0, 25.0)).unwrap();
        let desired = PoseSequence::new(
            reference
                .iter()
                .map(|p| apply_alignment(p, &warp).0)
                .collect(),
        );
        let seq = build_target_sequence(&source, &desired, 2, TransitionOptions::default()).unwrap();
        let aligned = &seq.poses[3..];
        let mut sq = 0.0;
        let mut n = 0.0;
        for (a, r) in aligned.iter().zip(&reference) {
            for (p, q) in a.keypoints.iter().zip(&r.keypoints) {
                sq += (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
                n += 1.0;
            }
        }
        assert!((sq / n).sqrt() < 1.0);
    }

    #[test]
    fn alignment_error_names_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_pose(&mut rng);
        let mut bad = random_pose(&mut rng);
        for k in bad.keypoints.iter_mut() {
            *k = Keypoint::MISSING;
        }
        let desired = PoseSequence::new(vec![jittered(&src, &mut rng), bad]);
        let opts = TransitionOptions {
            per_frame_alignment: true,
            ..Default::default()
        };
        assert!(matches!(
            build_target_sequence(&src, &desired, 1, opts),
            Err(Error::Alignment { frame: Some(1), .. })
        ));
    }
}
