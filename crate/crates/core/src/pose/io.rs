use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Keypoint, Pose, PoseSequence, NUM_JOINTS};
use crate::error::{Error, Result};

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    canvas_width: u32,
    canvas_height: u32,
    frames: Vec<Vec<f64>>,
}

pub fn parse_pose_file(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_str(&text)
}

/// Parses the pose JSON format: `{"canvas_width", "canvas_height", "frames": [[x,y,c]*18, ...]}`.
pub fn parse_pose_str(text: &str) -> Result<PoseSequence> {
    let file: PoseFile = serde_json::from_str(text).map_err(|e| Error::PoseParse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.canvas_width == 0 || file.canvas_height == 0 {
        return Err(Error::PoseSchema {
            frame: 0,
            message: "canvas dimensions must be positive".into(),
        });
    }

    let mut poses = Vec::with_capacity(file.frames.len());
    for (frame, values) in file.frames.iter().enumerate() {
        if values.len() != NUM_JOINTS * 3 {
            return Err(Error::PoseSchema {
                frame,
                message: format!(
                    "expected {} numbers ({} joints), got {}",
                    NUM_JOINTS * 3,
                    NUM_JOINTS,
                    values.len()
                ),
            });
        }
        let mut pose = Pose::empty(file.canvas_width, file.canvas_height);
        for (j, triple) in values.chunks_exact(3).enumerate() {
            let (x, y, c) = (triple[0], triple[1], triple[2]);
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::PoseSchema {
                    frame,
                    message: format!("joint {j} confidence {c} outside [0, 1]"),
                });
            }
            if c == 0.0 {
                continue;
            }
            if !pose.contains(x, y) {
                return Err(Error::PoseSchema {
                    frame,
                    message: format!("joint {j} at ({x}, {y}) lies outside the canvas"),
                });
            }
            pose.keypoints[j] = Keypoint::new(x, y, c);
        }
        poses.push(pose);
    }
    Ok(PoseSequence::new(poses))
}

pub fn write_pose_file(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = poses
        .first()
        .map(|p| (p.canvas_width, p.canvas_height))
        .unwrap_or((1, 1));
    let file = PoseFile {
        canvas_width: w,
        canvas_height: h,
        frames: poses
            .iter()
            .map(|p| {
                p.keypoints
                    .iter()
                    .flat_map(|k| [k.x, k.y, k.confidence])
                    .collect()
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).expect("pose file serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// serde_json reports 1-based line and column; column counts bytes.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
