//! Deterministic synthetic RGB-D scenes with ground-truth keypoint labels.
//!
//! Humans are flat boxes or ellipses facing the camera. Attached keypoints
//! and carried objects move rigidly with their actor. Every random draw comes
//! from a ChaCha stream keyed by `(seed, frame, entity)`, so frames can be
//! generated in any order and stay bit-identical.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::KeypointState;
use crate::dataset::{export_sequence, DatasetError};
use crate::geometry::{project, CameraIntrinsics, PoseSE3};
use crate::mask::MaskImage;
use crate::sequence::{format_stamp, DepthGrid, Frame, FrameSequence, Keypoint, PointKind, Truth};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let k = CameraIntrinsics::tum_fr3();
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: 640, height: 480 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: [f64; 3],
    /// Roll, pitch, yaw in degrees.
    #[serde(default)]
    pub rotation_deg: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Spread evenly over the sequence and interpolated linearly (slerp for rotation).
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkConfig {
    pub count: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarriedConfig {
    /// Centre offset from the actor centre (m), in the actor plane.
    pub offset: [f64; 2],
    #[serde(default)]
    pub depth_offset: f64,
    pub radius: f64,
    pub points: usize,
    /// Whether carried keypoints are matched across frames.
    #[serde(default)]
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    pub shape: Shape,
    pub width: f64,
    pub height: f64,
    /// Centre waypoints in world coordinates, spread evenly over the sequence.
    pub path: Vec<[f64; 3]>,
    pub attached_points: usize,
    /// Depth spread of attached points around the actor plane (m).
    #[serde(default = "default_body_depth")]
    pub body_depth: f64,
    #[serde(default)]
    pub carried: Vec<CarriedConfig>,
}

fn default_body_depth() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub match_sigma_px: f64,
    pub outlier_rate: f64,
    /// Positive grows rendered masks, negative erodes them (px).
    pub mask_dilation_px: f64,
    pub depth_sigma_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_start")]
    pub start_time: f64,
    /// World z of the background wall used for depth rendering (m).
    #[serde(default = "default_wall")]
    pub wall_depth: f64,
    #[serde(default)]
    pub camera: CameraConfig,
    pub trajectory: TrajectoryConfig,
    pub landmarks: LandmarkConfig,
    #[serde(default)]
    pub actors: Vec<ActorConfig>,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_fps() -> f64 {
    30.0
}

fn default_start() -> f64 {
    1000.0
}

fn default_wall() -> f64 {
    8.0
}

impl SceneConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: SceneConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene config serialises")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if self.frames < 2 {
            return Err(invalid(format!("frames: need at least 2, got {}", self.frames)));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps: must be positive"));
        }
        let c = &self.camera;
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy).map_err(|e| invalid(format!("camera: {e}")))?;
        if c.width == 0 || c.height == 0 {
            return Err(invalid("camera.width/height: must be positive"));
        }
        if self.trajectory.waypoints.is_empty() {
            return Err(invalid("trajectory.waypoints: need at least one waypoint"));
        }
        let l = &self.landmarks;
        if (0..3).any(|i| l.min[i] > l.max[i]) {
            return Err(invalid("landmarks.min: must not exceed landmarks.max"));
        }
        if self.actors.len() > 255 {
            return Err(invalid("actors: at most 255 supported"));
        }
        for (i, a) in self.actors.iter().enumerate() {
            if !(a.width > 0.0 && a.height > 0.0) {
                return Err(invalid(format!("actors[{i}].width/height: must be positive")));
            }
            if a.path.is_empty() {
                return Err(invalid(format!("actors[{i}].path: need at least one point")));
            }
            if a.body_depth < 0.0 {
                return Err(invalid(format!("actors[{i}].body_depth: must be non-negative")));
            }
            for (j, c) in a.carried.iter().enumerate() {
                if !(c.radius > 0.0) {
                    return Err(invalid(format!("actors[{i}].carried[{j}].radius: must be positive")));
                }
            }
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.outlier_rate) {
            return Err(invalid(format!("noise.outlier_rate: must lie in [0, 1], got {}", n.outlier_rate)));
        }
        if n.match_sigma_px < 0.0 || n.depth_sigma_m < 0.0 {
            return Err(invalid("noise: standard deviations must be non-negative"));
        }
        Ok(())
    }

    /// Walking-style benchmark: two moving humans, 300 static landmarks and
    /// 40 human-attached keypoints with match noise and outliers.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            frames: 30,
            fps: 30.0,
            start_time: 1000.0,
            wall_depth: 8.0,
            camera: CameraConfig::default(),
            trajectory: default_trajectory(),
            landmarks: LandmarkConfig { count: 300, min: [-3.0, -2.0, 3.0], max: [3.0, 2.0, 7.5] },
            actors: vec![
                ActorConfig {
                    shape: Shape::Box,
                    width: 0.5,
                    height: 1.6,
                    path: vec![[-0.9, 0.1, 2.2], [-0.2, 0.1, 2.4]],
                    attached_points: 20,
                    body_depth: 0.1,
                    carried: vec![],
                },
                ActorConfig {
                    shape: Shape::Ellipse,
                    width: 0.55,
                    height: 1.7,
                    path: vec![[1.0, 0.0, 2.8], [0.5, 0.05, 2.6]],
                    attached_points: 20,
                    body_depth: 0.1,
                    carried: vec![],
                },
            ],
            noise: NoiseConfig { match_sigma_px: 0.25, outlier_rate: 0.1, mask_dilation_px: 1.0, depth_sigma_m: 0.01 },
        }
    }

    /// One human holding an unmatched object in front of the torso. The
    /// object is not part of the human mask.
    pub fn carried_object(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            frames: 12,
            fps: 30.0,
            start_time: 1000.0,
            wall_depth: 8.0,
            camera: CameraConfig::default(),
            trajectory: default_trajectory(),
            landmarks: LandmarkConfig { count: 200, min: [-3.0, -2.0, 3.5], max: [3.0, 2.0, 7.5] },
            actors: vec![ActorConfig {
                shape: Shape::Box,
                width: 0.45,
                height: 1.6,
                path: vec![[-0.5, 0.1, 2.3], [0.1, 0.1, 2.4]],
                attached_points: 120,
                body_depth: 0.1,
                carried: vec![CarriedConfig {
                    offset: [0.0, 0.1],
                    depth_offset: -0.2,
                    radius: 0.06,
                    points: 20,
                    matched: false,
                }],
            }],
            noise: NoiseConfig { match_sigma_px: 0.25, outlier_rate: 0.0, mask_dilation_px: 0.0, depth_sigma_m: 0.01 },
        }
    }

    /// Static scene without actors or noise.
    pub fn static_only(seed: u64, frames: usize, landmarks: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            frames,
            fps: 30.0,
            start_time: 1000.0,
            wall_depth: 8.0,
            camera: CameraConfig::default(),
            trajectory: default_trajectory(),
            landmarks: LandmarkConfig { count: landmarks, min: [-3.0, -2.0, 3.0], max: [3.0, 2.0, 7.5] },
            actors: vec![],
            noise: NoiseConfig::default(),
        }
    }
}

fn default_trajectory() -> TrajectoryConfig {
    TrajectoryConfig {
        waypoints: vec![
            Waypoint { position: [-0.05, -0.1, 0.0], rotation_deg: [0.0, 0.0, 0.0] },
            Waypoint { position: [0.05, 0.1, 0.25], rotation_deg: [1.0, -2.0, 1.5] },
        ],
    }
}

// 32-byte key: seed | frame | entity | zero
fn stream(seed: u64, frame: u64, entity: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&frame.to_le_bytes());
    key[16..24].copy_from_slice(&entity.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Attached points cover this fraction of the silhouette half-extent on each side.
const SPREAD: f64 = 0.48;

const LAYOUT: u64 = u64::MAX;
const OUTLIER_ENTITY: u64 = u64::MAX;

/// Position along evenly spaced waypoints at fraction `s` in [0, 1].
fn lerp_path<T, U>(points: &[T], s: f64, mix: impl Fn(&T, &T, f64) -> U) -> U {
    if points.len() == 1 {
        return mix(&points[0], &points[0], 0.0);
    }
    let x = s.clamp(0.0, 1.0) * (points.len() - 1) as f64;
    let i = (x.floor() as usize).min(points.len() - 2);
    mix(&points[i], &points[i + 1], x - i as f64)
}

fn fraction(frame: usize, frames: usize) -> f64 {
    frame as f64 / (frames - 1) as f64
}

fn camera_pose(cfg: &SceneConfig, frame: usize) -> PoseSE3 {
    let s = fraction(frame, cfg.frames);
    let (position, rotation) = lerp_path(&cfg.trajectory.waypoints, s, |a, b, t| {
        let pa = Vector3::from(a.position);
        let pb = Vector3::from(b.position);
        (pa + (pb - pa) * t, euler(a.rotation_deg).slerp(&euler(b.rotation_deg), t))
    });
    PoseSE3::new(rotation, position)
}

fn euler(deg: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(deg[0].to_radians(), deg[1].to_radians(), deg[2].to_radians())
}

fn actor_center(actor: &ActorConfig, frame: usize, frames: usize) -> Vector3<f64> {
    let p = lerp_path(&actor.path, fraction(frame, frames), |a, b, t| {
        let (va, vb) = (Vector3::from(*a), Vector3::from(*b));
        let v = va + (vb - va) * t;
        [v.x, v.y, v.z]
    });
    Vector3::from(p)
}

fn actor_moving(actor: &ActorConfig, frame: usize, frames: usize) -> bool {
    let other = if frame == 0 { 1 } else { frame - 1 };
    (actor_center(actor, frame, frames) - actor_center(actor, other, frames)).norm() > 1e-12
}

#[derive(Debug, Clone, Copy)]
struct Track {
    id: u64,
    kind: PointKind,
    actor: Option<usize>,
    /// Index into the actor's carried list for carried points.
    carried: Option<usize>,
    /// World position (static) or offset from the actor centre (attached).
    offset: Vector3<f64>,
    matched: bool,
}

struct Layout {
    tracks: Vec<Track>,
    orientation: UnitQuaternion<f64>,
}

fn layout(cfg: &SceneConfig) -> Layout {
    let orientation = camera_pose(cfg, 0).rotation;
    let mut tracks = Vec::new();
    let mut next_id = 0u64;
    let l = &cfg.landmarks;
    for _ in 0..l.count {
        let mut rng = stream(cfg.seed, LAYOUT, next_id);
        let p = Vector3::new(
            rng.random_range(l.min[0]..=l.max[0]),
            rng.random_range(l.min[1]..=l.max[1]),
            rng.random_range(l.min[2]..=l.max[2]),
        );
        tracks.push(Track { id: next_id, kind: PointKind::Static, actor: None, carried: None, offset: p, matched: true });
        next_id += 1;
    }
    for (ai, a) in cfg.actors.iter().enumerate() {
        for _ in 0..a.attached_points {
            let mut rng = stream(cfg.seed, LAYOUT, next_id);
            let (ox, oy) = loop {
                let ox = rng.random_range(-SPREAD..=SPREAD) * a.width;
                let oy = rng.random_range(-SPREAD..=SPREAD) * a.height;
                let inside = match a.shape {
                    Shape::Box => true,
                    Shape::Ellipse => (ox / (SPREAD * a.width)).powi(2) + (oy / (SPREAD * a.height)).powi(2) <= 1.0,
                };
                if inside {
                    break (ox, oy);
                }
            };
            let oz = if a.body_depth > 0.0 { rng.random_range(0.0..=a.body_depth) } else { 0.0 };
            tracks.push(Track {
                id: next_id,
                kind: PointKind::Human,
                actor: Some(ai),
                carried: None,
                offset: Vector3::new(ox, oy, oz),
                matched: true,
            });
            next_id += 1;
        }
        for (ci, c) in a.carried.iter().enumerate() {
            for _ in 0..c.points {
                let mut rng = stream(cfg.seed, LAYOUT, next_id);
                let r = c.radius * rng.random_range(0.0f64..=1.0).sqrt();
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                tracks.push(Track {
                    id: next_id,
                    kind: PointKind::Carried,
                    actor: Some(ai),
                    carried: Some(ci),
                    offset: Vector3::new(c.offset[0] + r * th.cos(), c.offset[1] + r * th.sin(), c.depth_offset),
                    matched: c.matched,
                });
                next_id += 1;
            }
        }
    }
    Layout { tracks, orientation }
}

/// Image-space footprint of an actor or carried object.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    center: Vector2<f64>,
    half: Vector2<f64>,
    ellipse: bool,
    depth: f64,
    actor: usize,
    carried: Option<usize>,
}

impl Footprint {
    fn contains(&self, p: &Vector2<f64>, grow: f64) -> bool {
        let hx = self.half.x + grow;
        let hy = self.half.y + grow;
        if hx <= 0.0 || hy <= 0.0 {
            return false;
        }
        let d = p - self.center;
        if self.ellipse {
            (d.x / hx).powi(2) + (d.y / hy).powi(2) <= 1.0
        } else {
            d.x.abs() <= hx && d.y.abs() <= hy
        }
    }
}

struct FrameGeometry {
    pose: PoseSE3,
    footprints: Vec<Footprint>,
}

fn frame_geometry(cfg: &SceneConfig, k: &CameraIntrinsics, layout: &Layout, frame: usize) -> FrameGeometry {
    let pose = camera_pose(cfg, frame);
    let to_cam = pose.inverse();
    let mut footprints = Vec::new();
    for (ai, a) in cfg.actors.iter().enumerate() {
        let center = actor_center(a, frame, cfg.frames);
        let c = to_cam.transform_point(&center);
        if c.z <= 0.05 {
            continue;
        }
        let px = Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        footprints.push(Footprint {
            center: px,
            half: Vector2::new(k.fx * 0.5 * a.width / c.z, k.fy * 0.5 * a.height / c.z),
            ellipse: a.shape == Shape::Ellipse,
            depth: c.z,
            actor: ai,
            carried: None,
        });
        for (ci, co) in a.carried.iter().enumerate() {
            let w = center + layout.orientation * Vector3::new(co.offset[0], co.offset[1], co.depth_offset);
            let cc = to_cam.transform_point(&w);
            if cc.z <= 0.05 {
                continue;
            }
            footprints.push(Footprint {
                center: Vector2::new(k.fx * cc.x / cc.z + k.cx, k.fy * cc.y / cc.z + k.cy),
                half: Vector2::new(k.fx * co.radius / cc.z, k.fy * co.radius / cc.z),
                ellipse: true,
                depth: cc.z,
                actor: ai,
                carried: Some(ci),
            });
        }
    }
    // far to near so nearer surfaces overwrite
    footprints.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    FrameGeometry { pose, footprints }
}

fn render_mask(cfg: &SceneConfig, geo: &FrameGeometry) -> MaskImage {
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let mut mask = MaskImage::empty(w, h);
    // carried objects are not human: where they are in front, they cut the mask
    for fp in &geo.footprints {
        let (grow, id) = match fp.carried {
            None => (cfg.noise.mask_dilation_px, (fp.actor + 1) as u8),
            Some(_) => (-cfg.noise.mask_dilation_px, 0),
        };
        let (x0, x1, y0, y1) = pixel_bounds(fp, grow, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if fp.contains(&Vector2::new(x as f64, y as f64), grow) {
                    mask.set(x, y, id);
                }
            }
        }
    }
    mask
}

fn pixel_bounds(fp: &Footprint, grow: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    (
        clampi((fp.center.x - fp.half.x - grow).floor(), w),
        clampi((fp.center.x + fp.half.x + grow).ceil() + 1.0, w),
        clampi((fp.center.y - fp.half.y - grow).floor(), h),
        clampi((fp.center.y + fp.half.y + grow).ceil() + 1.0, h),
    )
}

fn render_depth(cfg: &SceneConfig, k: &CameraIntrinsics, geo: &FrameGeometry) -> DepthGrid {
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let mut depth = DepthGrid::empty(w, h);
    let r = geo.pose.rotation_matrix();
    let t = geo.pose.translation;
    for y in 0..h {
        for x in 0..w {
            let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let dz = (r * d).z;
            if dz > 1e-9 {
                let s = (cfg.wall_depth - t.z) / dz;
                if s > 0.0 {
                    depth.set_meters(x, y, s);
                }
            }
        }
    }
    for fp in &geo.footprints {
        // small objects get a pixel of margin so rounded keypoints land on them
        let grow = if fp.carried.is_some() { 1.0 } else { 0.0 };
        let (x0, x1, y0, y1) = pixel_bounds(fp, grow, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if fp.contains(&Vector2::new(x as f64, y as f64), grow) {
                    depth.set_meters(x, y, fp.depth);
                }
            }
        }
    }
    depth
}

fn track_world(cfg: &SceneConfig, layout: &Layout, track: &Track, frame: usize) -> Vector3<f64> {
    match track.actor {
        None => track.offset,
        Some(ai) => actor_center(&cfg.actors[ai], frame, cfg.frames) + layout.orientation * track.offset,
    }
}

fn occluded(geo: &FrameGeometry, track: &Track, pixel: &Vector2<f64>, depth: f64) -> bool {
    geo.footprints.iter().any(|fp| {
        let own = track.actor == Some(fp.actor) && fp.carried == track.carried;
        !own && fp.depth < depth && fp.contains(pixel, 0.0)
    })
}

/// Truth-only keypoint before noise: (track index, pixel, depth).
fn visible_tracks(
    cfg: &SceneConfig,
    k: &CameraIntrinsics,
    layout: &Layout,
    geo: &FrameGeometry,
    frame: usize,
) -> Vec<(usize, Vector2<f64>, f64)> {
    let (w, h) = (cfg.camera.width as f64, cfg.camera.height as f64);
    layout
        .tracks
        .iter()
        .enumerate()
        .filter_map(|(ti, tr)| {
            let world = track_world(cfg, layout, tr, frame);
            let (px, z) = project(k, &geo.pose, &world).ok()?;
            if px.x < 0.0 || px.y < 0.0 || px.x > w - 1.0 || px.y > h - 1.0 {
                return None;
            }
            (!occluded(geo, tr, &px, z)).then_some((ti, px, z))
        })
        .collect()
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<FrameSequence, SimError> {
    cfg.validate()?;
    let k = CameraIntrinsics::new(cfg.camera.fx, cfg.camera.fy, cfg.camera.cx, cfg.camera.cy)
        .map_err(|e| invalid(format!("camera: {e}")))?;
    let layout = layout(cfg);
    let pixel_noise = Normal::new(0.0, cfg.noise.match_sigma_px).map_err(|e| invalid(format!("noise: {e}")))?;
    let depth_noise = Normal::new(0.0, cfg.noise.depth_sigma_m).map_err(|e| invalid(format!("noise: {e}")))?;

    let mut frames: Vec<Frame> = Vec::with_capacity(cfg.frames);
    let mut prev_index: Vec<Option<usize>> = vec![None; layout.tracks.len()];
    for fi in 0..cfg.frames {
        let geo = frame_geometry(cfg, &k, &layout, fi);
        let visible = visible_tracks(cfg, &k, &layout, &geo, fi);
        let mut cur_index: Vec<Option<usize>> = vec![None; layout.tracks.len()];
        let mut keypoints = Vec::with_capacity(visible.len());
        for (idx, (ti, px, z)) in visible.into_iter().enumerate() {
            let tr = &layout.tracks[ti];
            let mut rng = stream(cfg.seed, fi as u64, tr.id);
            let noisy = Vector2::new(px.x + pixel_noise.sample(&mut rng), px.y + pixel_noise.sample(&mut rng));
            let depth = (z + depth_noise.sample(&mut rng)).max(1e-3);
            let moving = tr.actor.is_some_and(|a| actor_moving(&cfg.actors[a], fi, cfg.frames));
            let state = if moving { KeypointState::Dynamic } else { KeypointState::Static };
            cur_index[ti] = Some(idx);
            keypoints.push(Keypoint {
                pixel: noisy,
                depth: Some(depth),
                match_prev: if tr.matched { prev_index[ti] } else { None },
                truth: Some(Truth { state, kind: tr.kind, track: tr.id }),
            });
        }
        if fi > 0 {
            plant_outliers(cfg, fi, &mut keypoints);
        }
        let timestamp_str = format_stamp(cfg.start_time + fi as f64 / cfg.fps);
        frames.push(Frame {
            timestamp: timestamp_str.parse().expect("formatted float"),
            stamp: timestamp_str,
            pose: Some(geo.pose),
            keypoints,
            mask: render_mask(cfg, &geo),
            depth: render_depth(cfg, &k, &geo),
        });
        prev_index = cur_index;
    }
    Ok(FrameSequence { intrinsics: k, width: cfg.camera.width, height: cfg.camera.height, frames })
}

/// Swaps the match targets of randomly chosen pairs of matched keypoints.
fn plant_outliers(cfg: &SceneConfig, frame: usize, keypoints: &mut [Keypoint]) {
    let matched: Vec<usize> = (0..keypoints.len()).filter(|i| keypoints[*i].match_prev.is_some()).collect();
    let count = ((cfg.noise.outlier_rate * matched.len() as f64).round() as usize) & !1;
    if count < 2 {
        return;
    }
    let mut rng = stream(cfg.seed, frame as u64, OUTLIER_ENTITY);
    let picked = rand::seq::index::sample(&mut rng, matched.len(), count);
    let picked: Vec<usize> = picked.iter().map(|i| matched[i]).collect();
    for pair in picked.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        let tmp = keypoints[a].match_prev;
        keypoints[a].match_prev = keypoints[b].match_prev;
        keypoints[b].match_prev = tmp;
    }
}

pub fn export_scene(seq: &FrameSequence, dir: &Path) -> Result<(), SimError> {
    if seq.frames.is_empty() {
        return Err(invalid("sequence has no frames"));
    }
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    export_sequence(seq, dir)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SceneSummary {
    pub frames: usize,
    pub keypoints: usize,
    pub dynamic_fraction: f64,
}

pub fn summarize(seq: &FrameSequence) -> SceneSummary {
    let total = seq.keypoint_count();
    let dynamic = seq
        .frames
        .iter()
        .flat_map(|f| &f.keypoints)
        .filter(|k| k.truth.is_some_and(|t| t.state == KeypointState::Dynamic))
        .count();
    SceneSummary {
        frames: seq.frames.len(),
        keypoints: total,
        dynamic_fraction: if total == 0 { 0.0 } else { dynamic as f64 / total as f64 },
    }
}
