//! Browser demo: pose transitions, the noise schedule and attention fusion.

use animkit::attention::{dual_consistency_attention, FrameKeyValues, FusionWeights, KeyValue};
use animkit::diffusion::{BetaSchedule, NoiseSchedule, ScheduleParams};
use animkit::pose::{
    build_target_sequence, joint, rasterize_pose, Easing, Keypoint, Pose, PoseSequence, RasterStyle,
    TransitionOptions, NUM_JOINTS,
};
use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn figure(swing: f64, lean: f64) -> Pose {
    let mut kp = [Keypoint::MISSING; NUM_JOINTS];
    let mut set = |j: usize, x: f64, y: f64| kp[j] = Keypoint::new(x + lean * (220.0 - y) / 4.0, y, 1.0);
    set(joint::NOSE, 128.0, 48.0);
    set(joint::NECK, 128.0, 72.0);
    set(joint::R_SHOULDER, 108.0, 74.0);
    set(joint::L_SHOULDER, 148.0, 74.0);
    set(joint::R_ELBOW, 100.0 - swing, 104.0 - swing);
    set(joint::L_ELBOW, 156.0 + swing, 104.0 - swing);
    set(joint::R_WRIST, 96.0 - 2.0 * swing, 132.0 - 2.0 * swing);
    set(joint::L_WRIST, 160.0 + 2.0 * swing, 132.0 - 2.0 * swing);
    set(joint::R_HIP, 116.0, 140.0);
    set(joint::L_HIP, 140.0, 140.0);
    set(joint::R_KNEE, 114.0 - swing / 2.0, 180.0);
    set(joint::L_KNEE, 142.0 + swing / 2.0, 180.0);
    set(joint::R_ANKLE, 112.0 - swing, 220.0);
    set(joint::L_ANKLE, 144.0 + swing, 220.0);
    Pose::new(kp, 256, 256)
}

/// RGBA strip of `tile`-pixel squares: the source pose, the interpolated
/// transition, then the aligned target pose.
#[wasm_bindgen]
pub fn transition_strip(
    swing: f64,
    lean: f64,
    transition_frames: usize,
    smooth: bool,
    tile: u32,
) -> Result<Vec<u8>, JsError> {
    let options = TransitionOptions {
        easing: if smooth { Easing::Smoothstep } else { Easing::Linear },
        ..Default::default()
    };
    let target = PoseSequence::new(vec![figure(swing, lean)]);
    let seq = build_target_sequence(&figure(0.0, 0.0), &target, transition_frames, options)?;
    let tiles: Vec<_> = seq
        .poses
        .iter()
        .map(|p| rasterize_pose(p, tile, tile, RasterStyle::default()))
        .collect();
    let width = tile as usize * tiles.len();
    let mut rgba = vec![255u8; width * tile as usize * 4];
    for (i, img) in tiles.iter().enumerate() {
        for y in 0..tile {
            for x in 0..tile {
                let o = ((y as usize * width) + i * tile as usize + x as usize) * 4;
                rgba[o..o + 3].copy_from_slice(&img.pixel(x, y));
            }
        }
    }
    Ok(rgba)
}

/// Cumulative signal level at every training step, followed by the
/// inference timesteps (descending) as floats.
#[wasm_bindgen]
pub fn alpha_bar_curve(scaled: bool, beta_start: f64, beta_end: f64, inference_steps: usize) -> Result<Vec<f64>, JsError> {
    let schedule = NoiseSchedule::new(ScheduleParams {
        kind: if scaled { BetaSchedule::ScaledLinear } else { BetaSchedule::Linear },
        beta_start,
        beta_end,
        inference_steps,
        ..Default::default()
    })?;
    let mut out = schedule.alpha_bars.clone();
    out.extend(schedule.timestep_map.iter().map(|&t| t as f64));
    Ok(out)
}

/// Fuses attention over three frames whose values are pure red (anchor),
/// green (previous) and blue (current). Each of the `side * side` random
/// queries becomes one RGBA pixel showing how much it drew from each frame.
#[wasm_bindgen]
pub fn fusion_mix(anchor: f64, previous: f64, current: f64, side: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    let weights = FusionWeights::new(anchor, previous, current)?;
    let n = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |r: usize| Array2::from_shape_simple_fn((r, 4), || StandardNormal.sample(&mut rng));
    let q: Array2<f64> = randn(n) * 2.0;
    let frame = |k: Array2<f64>, channel: usize| {
        KeyValue::new(k, Array2::from_shape_fn((n, 3), |(_, c)| f64::from(c == channel)))
    };
    let kvs = [frame(randn(n), 0), frame(randn(n), 1), frame(randn(n), 2)];
    let out = dual_consistency_attention(
        &q,
        FrameKeyValues {
            anchor: &kvs[0],
            previous: &kvs[1],
            current: &kvs[2],
        },
        weights,
        1,
    )?;
    Ok(out
        .rows()
        .into_iter()
        .flat_map(|r| [r[0], r[1], r[2], 1.0].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}
