//! Depth-aware dynamic keypoint classification for RGB-D visual odometry.
//!
//! Keypoints are labelled static or dynamic by fusing two cues:
//!
//! * a semantic cue: signed distance to the nearest human-mask edge fed into
//!   a logistic model whose slope grows with depth ([`mask`]),
//! * a geometric cue: distance to the epipolar line of the matched keypoint in
//!   the previous frame, hard-thresholded by a depth-dependent bound
//!   ([`geometry`], [`classifier`]).
//!
//! The fused per-frame observation drives a two-state Bayes filter along match
//! chains. An object interaction pass ([`oim`]) then flips static, unsegmented
//! keypoints that sit among dynamic neighbours at a similar depth next to a
//! human. [`pipeline`] runs the whole thing over a [`FrameSequence`], which
//! comes either from the synthetic generator in [`sim`] or from a TUM-layout
//! directory ([`dataset`]). [`eval`] provides ATE/RPE trajectory metrics.

pub mod classifier;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod law;
pub mod mask;
pub mod oim;
pub mod pipeline;
pub mod sequence;
pub mod sim;

pub use classifier::{ClassifierParams, FusionRule, KeypointState, MovingBelief, Provenance};
pub use geometry::{CameraIntrinsics, FundamentalMatrix, PoseSE3};
pub use law::DepthLaw;
pub use mask::{MaskDistanceField, MaskImage, Zone};
pub use pipeline::{Pipeline, PipelineParams};
pub use sequence::{DepthGrid, Frame, FrameSequence, Keypoint, PointKind, Truth};
