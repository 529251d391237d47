use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use animkit::pose::{joint, write_pose_file, Keypoint, Pose, NUM_JOINTS};

fn pose(swing: f64) -> Pose {
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
    set(joint::R_KNEE, 114.0, 180.0);
    set(joint::L_KNEE, 142.0, 180.0);
    set(joint::R_ANKLE, 112.0, 220.0);
    set(joint::L_ANKLE, 144.0, 220.0);
    Pose::new(kp, 256, 256)
}

/// Binary PGM of a bright ellipse on a dark ramp.
fn write_image(path: &Path) {
    let mut bytes = b"P5\n64 64\n255\n".to_vec();
    for y in 0..64 {
        for x in 0..64 {
            let (dx, dy) = (x as f64 - 32.0, y as f64 - 30.0);
            let v = if dx * dx / 100.0 + dy * dy / 400.0 < 1.0 { 220 } else { 40 + x as u8 };
            bytes.push(v);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

struct Inputs {
    dir: tempfile::TempDir,
    image: PathBuf,
    poses: PathBuf,
}

fn inputs() -> Inputs {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("source.pgm");
    let poses = dir.path().join("poses.json");
    write_image(&image);
    write_pose_file(&poses, &[pose(0.0), pose(8.0), pose(16.0)]).unwrap();
    Inputs { dir, image, poses }
}

fn animate(f: &Inputs, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_animate"))
        .arg("--image")
        .arg(&f.image)
        .arg("--pose")
        .arg(&f.poses)
        .args(["--prompt", "a person dancing", "--subject-tokens", "person"])
        .args(["--set", "frames=3", "--set", "transition.frames=1", "--set", "schedule.inference_steps=2"])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn successful_run_writes_frames() {
    let f = inputs();
    let out = f.dir.path().join("out");
    let res = animate(&f, &["--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for name in ["frame_0000.png", "frame_0002.png", "overlay.png", "manifest.json", "timings.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let f = inputs();
    let res = animate(&f, &["--set", "no.such.key=1"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no.such.key"));

    let missing = f.dir.path().join("missing.pgm");
    let res = animate(&f, &["--image", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    let config = f.dir.path().join("run.conf");
    std::fs::write(&config, "frames = 3\nframes = 4\n").unwrap();
    let res = animate(&f, &["--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three_and_keep_partial() {
    let f = inputs();
    std::fs::write(&f.image, b"not an image").unwrap();
    let out = f.dir.path().join("out");
    let res = animate(&f, &["--out", out.to_str().unwrap(), "--keep-partial"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    let partial = std::fs::read_to_string(out.join("partial.json")).unwrap();
    assert!(partial.contains("error"));
}
