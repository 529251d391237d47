//! Pins the toy backend's output so refactors cannot silently change it.

mod common;

use animkit::backend::*;
use animkit::diffusion::*;
use animkit::pipeline::make_codec;
use animkit::pose::*;
use sha2::{Digest, Sha256};

fn digest(values: impl Iterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    values.for_each(|v| h.update(v.to_le_bytes()));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn toy_noise_prediction_is_pinned() {
    let codec = make_codec();
    let z = LatentCode::new(codec.encode(&common::figure_image(&codec)).unwrap(), Timestep::At(501));
    let pose = rasterize_pose(&common::standing_pose(5.0), 64, 64, RasterStyle::default());
    let emb = ToyTextEmbedder.embed("a person dancing");
    let eps = ToyDenoiser::new(0).predict_noise(&z, 501, &emb, &pose).unwrap();
    let sum: f64 = eps.iter().sum();
    assert!((sum - GOLDEN_SUM).abs() < 1e-9, "sum {sum}");
    assert_eq!(digest(eps.iter().copied()), GOLDEN_DIGEST);
}

const GOLDEN_SUM: f64 = -2.781920640960712;
const GOLDEN_DIGEST: &str = "146d7b5e2b698aa60a4674900a5cc98fa716ab8d033508d1a9d71042351ad6c7";
