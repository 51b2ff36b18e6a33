//! Object interaction: static keypoints next to a human, at the human's depth
//! and surrounded by geometrically dynamic keypoints, are relabelled dynamic.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{KeypointRecord, KeypointState, MovingBelief, Provenance};
use crate::law::{DepthLaw, NegativeDepth, DELTA, GAMMA};
use crate::mask::{squared_edt, MaskImage};
use crate::sequence::DepthGrid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OimError {
    #[error("mask is {0}x{1} but depth grid is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("query keypoint has no depth")]
    MissingDepth,
    #[error("weighted centroid needs at least one neighbour")]
    NoNeighbors,
    #[error(transparent)]
    NegativeDepth(#[from] NegativeDepth),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OimParams {
    /// Depth gap threshold (m).
    pub rho: f64,
    pub delta: DepthLaw,
    pub gamma: DepthLaw,
    /// Belief assigned (at least) to a flipped keypoint.
    pub belief_floor: f64,
}

impl Default for OimParams {
    fn default() -> Self {
        Self { rho: 0.7, delta: DELTA, gamma: GAMMA, belief_floor: 0.75 }
    }
}

impl OimParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(format!("rho must be positive, got {}", self.rho));
        }
        if !self.delta.is_valid() || !self.gamma.is_valid() {
            return Err("delta/gamma law is invalid".into());
        }
        if !(0.0..=1.0).contains(&self.belief_floor) {
            return Err(format!("belief_floor must lie in [0, 1], got {}", self.belief_floor));
        }
        Ok(())
    }
}

pub fn delta_threshold(z: f64) -> Result<f64, NegativeDepth> {
    DELTA.eval(z)
}

pub fn gamma_threshold(z: f64) -> Result<f64, NegativeDepth> {
    GAMMA.eval(z)
}

/// Pixels near a human mask whose depth is close to that human's depth.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionZone {
    width: usize,
    height: usize,
    member: Vec<bool>,
    human_depth: Vec<f64>,
}

impl InteractionZone {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, member: vec![false; width * height], human_depth: vec![f64::NAN; width * height] }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.member[y * self.width + x]
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        let (x, y) = (pixel.x.round(), pixel.y.round());
        x >= 0.0 && y >= 0.0 && self.contains(x as usize, y as usize)
    }

    /// Reference human depth for a member pixel.
    pub fn human_depth(&self, x: usize, y: usize) -> Option<f64> {
        self.contains(x, y).then(|| self.human_depth[y * self.width + x])
    }

    pub fn member_count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.member_count() == 0
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

pub fn build_interaction_zone(mask: &MaskImage, depth: &DepthGrid, params: &OimParams) -> Result<InteractionZone, OimError> {
    let (w, h) = (mask.width(), mask.height());
    if depth.width() != w || depth.height() != h {
        return Err(OimError::DimensionMismatch(w, h, depth.width(), depth.height()));
    }
    let mut zone = InteractionZone::empty(w, h);
    let mut best_dist = vec![f64::INFINITY; w * h];
    for id in mask.instances() {
        let mut depths: Vec<f64> = Vec::new();
        let mut feature = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == id {
                    feature[y * w + x] = true;
                    if let Some(z) = depth.meters(x, y) {
                        depths.push(z);
                    }
                }
            }
        }
        let Some(z_human) = median(&mut depths) else { continue };
        let radius = params.delta.eval(z_human)?;
        let (sq, _) = squared_edt(w, h, &feature);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = sq[i].sqrt();
                if d >= radius || d >= best_dist[i] {
                    continue;
                }
                if matches!(depth.meters(x, y), Some(z) if (z - z_human).abs() < params.rho) {
                    zone.member[i] = true;
                    zone.human_depth[i] = z_human;
                    best_dist[i] = d;
                }
            }
        }
    }
    Ok(zone)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OimPoint {
    pub pixel: Vector2<f64>,
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicNeighbor {
    /// Position in the candidate list passed to [`find_supporting_dynamics`].
    pub index: usize,
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// Absolute depth difference to the query (m).
    pub depth_gap: f64,
    /// Pixel distance to the query.
    pub distance: f64,
}

/// Dynamic keypoints closer than `delta(z)` px and `rho` m to the query,
/// nearest first (ties by input order).
pub fn find_supporting_dynamics(
    query: &OimPoint,
    dynamics: &[OimPoint],
    params: &OimParams,
) -> Result<Vec<DynamicNeighbor>, OimError> {
    let z = query.depth.filter(|z| z.is_finite()).ok_or(OimError::MissingDepth)?;
    let radius = params.delta.eval(z)?;
    let mut out: Vec<DynamicNeighbor> = dynamics
        .iter()
        .enumerate()
        .filter_map(|(index, d)| {
            let dz = d.depth?;
            let distance = (d.pixel - query.pixel).norm();
            let depth_gap = (z - dz).abs();
            (distance < radius && depth_gap < params.rho).then_some(DynamicNeighbor {
                index,
                pixel: d.pixel,
                depth: dz,
                depth_gap,
                distance,
            })
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(out)
}

/// Centroid weighted by `(rho - gap) / rho`.
pub fn weighted_centroid(neighbors: &[DynamicNeighbor], rho: f64) -> Result<Vector2<f64>, OimError> {
    if neighbors.is_empty() {
        return Err(OimError::NoNeighbors);
    }
    let (sum, weight) = neighbors.iter().fold((Vector2::zeros(), 0.0), |(s, w), n| {
        let wi = (rho - n.depth_gap) / rho;
        (s + n.pixel * wi, w + wi)
    });
    Ok(sum / weight)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OimDecision {
    pub centroid: Vector2<f64>,
    pub distance: f64,
    pub threshold: f64,
    pub support: usize,
}

impl OimDecision {
    pub fn flips(&self) -> bool {
        self.distance < self.threshold
    }
}

/// Evaluates one static query against the dynamic set.
pub fn evaluate_query(query: &OimPoint, dynamics: &[OimPoint], params: &OimParams) -> Result<Option<OimDecision>, OimError> {
    let neighbors = find_supporting_dynamics(query, dynamics, params)?;
    if neighbors.is_empty() {
        return Ok(None);
    }
    let centroid = weighted_centroid(&neighbors, params.rho)?;
    let z = query.depth.ok_or(OimError::MissingDepth)?;
    Ok(Some(OimDecision {
        centroid,
        distance: (centroid - query.pixel).norm(),
        threshold: params.gamma.eval(z)?,
        support: neighbors.len(),
    }))
}

/// Keypoints the geometric module found dynamic.
pub fn geometric_dynamics(records: &[KeypointRecord]) -> Vec<OimPoint> {
    records
        .iter()
        .filter(|r| {
            r.state == KeypointState::Dynamic
                && r.provenance == Provenance::Classifier
                && r.observation.reproj_error.is_some()
                && r.depth().is_some()
        })
        .map(|r| OimPoint { pixel: r.pixel(), depth: r.depth() })
        .collect()
}

/// Single pass over static, unsegmented keypoints inside the zone. Returns the
/// indices that were flipped.
pub fn apply_oim(records: &mut [KeypointRecord], zone: &InteractionZone, params: &OimParams) -> Vec<usize> {
    let dynamics = geometric_dynamics(records);
    if dynamics.is_empty() {
        return Vec::new();
    }
    let flips: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.state == KeypointState::Static && !r.observation.in_mask() && zone.contains_pixel(&r.pixel()))
        .filter_map(|(i, r)| {
            let query = OimPoint { pixel: r.pixel(), depth: r.depth() };
            match evaluate_query(&query, &dynamics, params) {
                Ok(Some(d)) if d.flips() => Some(i),
                _ => None,
            }
        })
        .collect();
    for &i in &flips {
        let r = &mut records[i];
        r.state = KeypointState::Dynamic;
        r.provenance = Provenance::Oim;
        r.belief = MovingBelief::new(r.belief.value().max(params.belief_floor));
    }
    flips
}
