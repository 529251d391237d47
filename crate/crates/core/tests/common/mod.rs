#![allow(dead_code, clippy::field_reassign_with_default)]

use std::path::{Path, PathBuf};

use animkit::backend::{LatentCodec, OrthonormalCodec};
use animkit::pipeline::{make_codec, PipelineConfig};
use animkit::pose::{joint, write_pose_file, Keypoint, Pose, NUM_JOINTS};
use ndarray::Array2;

pub const CANVAS: u32 = 256;

/// An upright figure centered on the canvas, arms swung by `swing` pixels.
pub fn standing_pose(swing: f64) -> Pose {
    let mut kp = [Keypoint::MISSING; NUM_JOINTS];
    let mut set = |j: usize, x: f64, y: f64| kp[j] = Keypoint::new(x, y, 1.0);
    set(joint::NOSE, 128.0, 48.0);
    set(joint::NECK, 128.0, 72.0);
    set(joint::R_SHOULDER, 108.0, 74.0);
    set(joint::L_SHOULDER, 148.0, 74.0);
    set(joint::R_ELBOW, 100.0 - swing, 104.0);
    set(joint::L_ELBOW, 156.0 + swing, 104.0);
    set(joint::R_WRIST, 96.0 - 2.0 * swing, 132.0);
    set(joint::L_WRIST, 160.0 + 2.0 * swing, 132.0);
    set(joint::R_HIP, 116.0, 140.0);
    set(joint::L_HIP, 140.0, 140.0);
    set(joint::R_KNEE, 114.0 + swing, 180.0);
    set(joint::L_KNEE, 142.0 - swing, 180.0);
    set(joint::R_ANKLE, 112.0 + 2.0 * swing, 220.0);
    set(joint::L_ANKLE, 144.0 - 2.0 * swing, 220.0);
    set(joint::R_EYE, 122.0, 44.0);
    set(joint::L_EYE, 134.0, 44.0);
    set(joint::R_EAR, 116.0, 48.0);
    set(joint::L_EAR, 140.0, 48.0);
    Pose::new(kp, CANVAS, CANVAS)
}

/// A bright figure on a graded background, projected onto the codec's span
/// and quantized to 8 bits so the codec reproduces it closely.
pub fn figure_image(codec: &OrthonormalCodec) -> Array2<f64> {
    let (h, w) = codec.image_size();
    let raw = Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - w as f64 / 2.0;
        let dy = y as f64 - h as f64 * 0.47;
        if dx * dx / 100.0 + dy * dy / 400.0 < 1.0 {
            0.85
        } else {
            0.2 + 0.3 * x as f64 / w as f64
        }
    });
    let projected = codec.decode(&codec.encode(&raw).unwrap());
    projected.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn figure_mask(h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - w as f64 / 2.0;
        let dy = y as f64 - h as f64 * 0.47;
        dx * dx / 100.0 + dy * dy / 400.0 < 1.0
    })
}

pub fn save_gray(path: &Path, img: &Array2<f64>) {
    let (h, w) = img.dim();
    let out = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[(y as usize, x as usize)] * 255.0).round() as u8])
    });
    out.save(path).unwrap();
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub image: PathBuf,
    pub pose: PathBuf,
    pub mask: PathBuf,
    pub source: Array2<f64>,
}

/// Source image, mask and a pose clip whose first frame is the source
/// pose. `swings` gives the arm swing of each desired frame.
pub fn fixture(swings: &[f64]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let codec = make_codec();
    let source = figure_image(&codec);
    let image = dir.path().join("source.png");
    save_gray(&image, &source);
    let (h, w) = source.dim();
    let mask = dir.path().join("mask.png");
    save_gray(&mask, &figure_mask(h, w).mapv(|b| if b { 1.0 } else { 0.0 }));
    let mut poses = vec![standing_pose(0.0)];
    poses.extend(swings.iter().map(|&s| standing_pose(s)));
    let pose = dir.path().join("poses.json");
    write_pose_file(&pose, &poses).unwrap();
    Fixture {
        dir,
        image,
        pose,
        mask,
        source,
    }
}

/// A fast configuration over `fixture`: `frames` outputs, `steps` DDIM steps.
pub fn small_config(f: &Fixture, frames: usize, steps: usize, out: &str) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.prompt = "a person dancing".into();
    c.image = Some(f.image.clone());
    c.pose = Some(f.pose.clone());
    c.subject_tokens = vec!["person".into()];
    c.frames = frames;
    c.transition_frames = 1;
    c.schedule.inference_steps = steps;
    c.out_dir = f.dir.path().join(out);
    c
}

pub fn inf_norm<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
