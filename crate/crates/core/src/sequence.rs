//! Frame and keypoint containers shared by the simulator, dataset reader and
//! pipeline.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::classifier::KeypointState;
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::mask::MaskImage;

/// Metres per raw unit in TUM 16-bit depth images.
pub const DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Static,
    Human,
    Carried,
}

impl PointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointKind::Static => "static",
            PointKind::Human => "human",
            PointKind::Carried => "carried",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(PointKind::Static),
            "human" => Some(PointKind::Human),
            "carried" => Some(PointKind::Carried),
            _ => None,
        }
    }
}

/// Ground-truth annotation, available for simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truth {
    pub state: KeypointState,
    pub kind: PointKind,
    pub track: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    pub depth: Option<f64>,
    /// Index of the matched keypoint in the previous frame.
    pub match_prev: Option<usize>,
    pub truth: Option<Truth>,
}

impl Keypoint {
    pub fn new(u: f64, v: f64, depth: Option<f64>) -> Self {
        Self { pixel: Vector2::new(u, v), depth, match_prev: None, truth: None }
    }

    pub fn valid_depth(&self) -> Option<f64> {
        self.depth.filter(|z| z.is_finite() && *z > 0.0)
    }
}

/// Raw 16-bit depth image; 0 means no measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthGrid {
    width: usize,
    height: usize,
    raw: Vec<u16>,
}

impl DepthGrid {
    pub fn new(width: usize, height: usize, raw: Vec<u16>) -> Option<Self> {
        (raw.len() == width * height).then_some(Self { width, height, raw })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, raw: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u16] {
        &self.raw
    }

    pub fn set_meters(&mut self, x: usize, y: usize, z: f64) {
        self.raw[y * self.width + x] = encode_depth(z);
    }

    pub fn meters(&self, x: usize, y: usize) -> Option<f64> {
        decode_depth(self.raw[y * self.width + x])
    }
}

pub fn decode_depth(raw: u16) -> Option<f64> {
    (raw != 0).then(|| raw as f64 / DEPTH_SCALE)
}

pub fn encode_depth(z: f64) -> u16 {
    if !(z > 0.0) {
        return 0;
    }
    (z * DEPTH_SCALE).round().clamp(1.0, u16::MAX as f64) as u16
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    /// Timestamp token used for file names.
    pub stamp: String,
    pub pose: Option<PoseSE3>,
    pub keypoints: Vec<Keypoint>,
    pub mask: MaskImage,
    pub depth: DepthGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn keypoint_count(&self) -> usize {
        self.frames.iter().map(|f| f.keypoints.len()).sum()
    }

    pub fn has_truth(&self) -> bool {
        self.frames.iter().flat_map(|f| &f.keypoints).any(|k| k.truth.is_some())
    }
}

pub fn format_stamp(t: f64) -> String {
    format!("{t:.6}")
}
