use animkit_wasm::{alpha_bar_curve, fusion_mix, transition_strip};

#[test]
fn strip_has_one_tile_per_pose() {
    let rgba = transition_strip(12.0, 0.1, 3, true, 32).unwrap();
    assert_eq!(rgba.len(), 5 * 32 * 32 * 4);
    assert!(rgba.chunks(4).any(|p| p[..3] != [0, 0, 0]));
}

#[test]
fn curve_lists_levels_then_timesteps() {
    let data = alpha_bar_curve(true, 0.00085, 0.012, 10).unwrap();
    assert_eq!(data.len(), 1010);
    assert!(data[..1000].windows(2).all(|w| w[1] < w[0]));
    assert!(data[1000..].windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn single_source_fusion_is_one_color() {
    let red = fusion_mix(1.0, 0.0, 0.0, 4, 1).unwrap();
    assert!(red.chunks(4).all(|p| p == [255, 0, 0, 255]));
    let mixed = fusion_mix(0.7, 0.15, 0.15, 4, 1).unwrap();
    let near = |a: u8, b: u8| a.abs_diff(b) <= 1;
    assert!(mixed.chunks(4).all(|p| near(p[0], 179) && near(p[1], 38) && near(p[2], 38)));
}
