//! Pose keypoints, alignment of target poses onto a source pose, transition
//! interpolation and skeleton rasterization.

mod alignment;
mod io;
mod raster;
mod transition;

pub use alignment::{apply_alignment, estimate_alignment, AlignOptions, SimilarityTransform};
pub use io::{parse_pose_file, parse_pose_str, write_pose_file};
pub use raster::{rasterize_pose, ConditioningImage, RasterStyle, JOINT_COLORS, LIMBS};
pub use transition::{build_target_sequence, interpolate_transition, Easing, TransitionOptions};

/// Number of joints in the COCO-18 layout.
pub const NUM_JOINTS: usize = 18;

/// COCO-18 joint indices.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;

    /// Torso joints used to estimate the alignment transform.
    pub const ANCHORS: [usize; 5] = [NECK, R_SHOULDER, L_SHOULDER, R_HIP, L_HIP];
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// In `[0, 1]`; zero marks a missing joint whose coordinates are meaningless.
    pub confidence: f64,
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_present(&self) -> bool {
        self.confidence > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub keypoints: [Keypoint; NUM_JOINTS],
    pub canvas_width: u32,
    pub canvas_height: u32,
}

impl Pose {
    pub fn new(keypoints: [Keypoint; NUM_JOINTS], canvas_width: u32, canvas_height: u32) -> Self {
        Self {
            keypoints,
            canvas_width,
            canvas_height,
        }
    }

    /// A pose with every joint missing.
    pub fn empty(canvas_width: u32, canvas_height: u32) -> Self {
        Self::new([Keypoint::MISSING; NUM_JOINTS], canvas_width, canvas_height)
    }

    pub fn same_canvas(&self, other: &Pose) -> bool {
        self.canvas_width == other.canvas_width && self.canvas_height == other.canvas_height
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.canvas_width as f64 && y < self.canvas_height as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub poses: Vec<Pose>,
    /// Number of transition frames inserted after the source pose.
    pub source_index_offset: usize,
}

impl PoseSequence {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self {
            poses,
            source_index_offset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}
