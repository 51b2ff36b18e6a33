//! Human instance masks, signed distance to the mask edge and the semantic
//! moving probability.
//!
//! Distances are signed: positive inside a mask, negative outside, zero on
//! edge pixels. An edge pixel is a mask pixel with at least one in-image
//! 4-neighbour that is not part of any mask.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::law::{DepthLaw, NegativeDepth, BETA};

/// Depth assumed for keypoints without a depth measurement.
pub const MISSING_DEPTH_FALLBACK: f64 = 5.0;

/// Probability confidence below which a keypoint sits in the uncertainty band.
pub const RELIABLE_CONFIDENCE: f64 = 0.75;

// Slack on the 75% boundary so that d = ln(3)/beta lands on the reliable side
// despite rounding in exp().
const ZONE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("pixel ({0}, {1}) outside {2}x{3} image")]
    OutOfBounds(f64, f64, usize, usize),
    #[error("expected {expected} pixels, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    NegativeDepth(#[from] NegativeDepth),
}

/// Per-pixel instance ids; 0 is background, `n >= 1` is human mask `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self, MaskError> {
        if ids.len() != width * height {
            return Err(MaskError::DimensionMismatch { expected: width * height, actual: ids.len() });
        }
        Ok(Self { width, height, ids })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, ids: vec![0; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self, MaskError> {
        Self::new(width, height, bits.iter().map(|b| u8::from(*b)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.get(x, y) != 0
    }

    pub fn has_mask(&self) -> bool {
        self.ids.iter().any(|v| *v != 0)
    }

    pub fn mask_pixel_count(&self) -> usize {
        self.ids.iter().filter(|v| **v != 0).count()
    }

    /// Sorted distinct non-zero instance ids.
    pub fn instances(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for v in &self.ids {
            seen[*v as usize] = true;
        }
        (1..=255u8).filter(|i| seen[*i as usize]).collect()
    }

    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        if !self.is_set(x, y) {
            return false;
        }
        (x > 0 && !self.is_set(x - 1, y))
            || (x + 1 < self.width && !self.is_set(x + 1, y))
            || (y > 0 && !self.is_set(x, y - 1))
            || (y + 1 < self.height && !self.is_set(x, y + 1))
    }
}

/// Exact squared Euclidean distance transform to a set of feature pixels.
///
/// Returns squared distances (`f64::INFINITY` when there are no features) and
/// the flat index of the nearest feature (`usize::MAX` when none).
pub fn squared_edt(width: usize, height: usize, feature: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let n = width * height;
    // column pass: nearest feature row within each column
    let mut col_sq = vec![f64::INFINITY; n];
    let mut col_row = vec![usize::MAX; n];
    for x in 0..width {
        let mut last: Option<usize> = None;
        for y in 0..height {
            if feature[y * width + x] {
                last = Some(y);
            }
            if let Some(r) = last {
                col_row[y * width + x] = r;
                col_sq[y * width + x] = ((y - r) * (y - r)) as f64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..height).rev() {
            if feature[y * width + x] {
                next = Some(y);
            }
            if let Some(r) = next {
                let d = ((r - y) * (r - y)) as f64;
                if d < col_sq[y * width + x] {
                    col_sq[y * width + x] = d;
                    col_row[y * width + x] = r;
                }
            }
        }
    }

    // row pass: lower envelope of parabolas
    let mut out_sq = vec![f64::INFINITY; n];
    let mut out_idx = vec![usize::MAX; n];
    let mut hull: Vec<usize> = Vec::with_capacity(width);
    let mut bounds: Vec<f64> = Vec::with_capacity(width);
    for y in 0..height {
        let row = &col_sq[y * width..(y + 1) * width];
        hull.clear();
        bounds.clear();
        for q in 0..width {
            let fq = row[q];
            if !fq.is_finite() {
                continue;
            }
            let mut s = f64::NEG_INFINITY;
            while let Some(&p) = hull.last() {
                let (pf, qf) = (p as f64, q as f64);
                s = ((fq + qf * qf) - (row[p] + pf * pf)) / (2.0 * (qf - pf));
                if s <= *bounds.last().unwrap() {
                    hull.pop();
                    bounds.pop();
                    s = f64::NEG_INFINITY;
                } else {
                    break;
                }
            }
            hull.push(q);
            bounds.push(s);
        }
        if hull.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..width {
            let xf = x as f64;
            while k + 1 < hull.len() && bounds[k + 1] < xf {
                k += 1;
            }
            let v = hull[k];
            let dx = xf - v as f64;
            out_sq[y * width + x] = dx * dx + row[v];
            out_idx[y * width + x] = col_row[y * width + v] * width + v;
        }
    }
    (out_sq, out_idx)
}

/// Signed distance (px) from every pixel to the nearest mask-edge pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistanceField {
    width: usize,
    height: usize,
    signed: Vec<f64>,
    nearest_instance: Vec<u8>,
    instance: Vec<u8>,
}

pub fn build_distance_field(mask: &MaskImage) -> MaskDistanceField {
    let (w, h) = (mask.width, mask.height);
    let n = w * h;
    if !mask.has_mask() {
        return MaskDistanceField {
            width: w,
            height: h,
            signed: vec![f64::NEG_INFINITY; n],
            nearest_instance: vec![0; n],
            instance: mask.ids.clone(),
        };
    }
    let mut edges = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            edges[y * w + x] = mask.is_edge(x, y);
        }
    }
    let (sq, idx) = squared_edt(w, h, &edges);
    let mut signed = Vec::with_capacity(n);
    let mut nearest_instance = Vec::with_capacity(n);
    for i in 0..n {
        let d = sq[i].sqrt();
        signed.push(if mask.ids[i] != 0 { d } else { -d });
        nearest_instance.push(if idx[i] == usize::MAX { mask.ids[i] } else { mask.ids[idx[i]] });
    }
    MaskDistanceField { width: w, height: h, signed, nearest_instance, instance: mask.ids.clone() }
}

impl MaskDistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.signed[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.signed
    }

    /// Instance owning the nearest edge pixel (0 when the frame has no mask).
    pub fn nearest_instance(&self, x: usize, y: usize) -> u8 {
        self.nearest_instance[y * self.width + x]
    }

    pub fn instance(&self, x: usize, y: usize) -> u8 {
        self.instance[y * self.width + x]
    }

    /// Rounds a sub-pixel position to the containing pixel.
    pub fn locate(&self, pixel: &Vector2<f64>) -> Result<(usize, usize), MaskError> {
        let (x, y) = (pixel.x.round(), pixel.y.round());
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return Err(MaskError::OutOfBounds(pixel.x, pixel.y, self.width, self.height));
        }
        Ok((x as usize, y as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    ReliableInside,
    Uncertain,
    ReliableOutside,
}

impl Zone {
    pub fn from_probability(p: f64) -> Self {
        if p.max(1.0 - p) < RELIABLE_CONFIDENCE - ZONE_EPS {
            Zone::Uncertain
        } else if p >= 0.5 {
            Zone::ReliableInside
        } else {
            Zone::ReliableOutside
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Zone::ReliableInside => "reliable_inside",
            Zone::Uncertain => "uncertain",
            Zone::ReliableOutside => "reliable_outside",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticProbability {
    pub value: f64,
    pub zone: Zone,
}

pub fn beta(z: f64) -> Result<f64, NegativeDepth> {
    BETA.eval(z)
}

/// Logistic moving probability of a keypoint at signed mask distance `d`.
pub fn semantic_probability_with(law: &DepthLaw, signed_dist: f64, z: f64) -> Result<SemanticProbability, NegativeDepth> {
    let b = law.eval(z)?;
    let value = 1.0 / ((-b * signed_dist).exp() + 1.0);
    Ok(SemanticProbability { value, zone: Zone::from_probability(value) })
}

pub fn semantic_moving_probability(signed_dist: f64, z: f64) -> Result<SemanticProbability, NegativeDepth> {
    semantic_probability_with(&BETA, signed_dist, z)
}

/// Half-width in px of the uncertainty band on each side of the edge.
pub fn uncertainty_half_width(law: &DepthLaw, z: f64) -> Result<f64, NegativeDepth> {
    Ok(3f64.ln() / law.eval(z)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskFlags {
    pub in_mask: bool,
    pub zone: Zone,
    pub instance: u8,
    pub signed_dist: f64,
    pub probability: f64,
    pub depth_missing: bool,
}

pub fn mask_flags_with(
    law: &DepthLaw,
    field: &MaskDistanceField,
    pixel: &Vector2<f64>,
    depth: Option<f64>,
) -> Result<MaskFlags, MaskError> {
    let (x, y) = field.locate(pixel)?;
    let d = field.at(x, y);
    let depth_missing = depth.is_none();
    let z = depth.unwrap_or(MISSING_DEPTH_FALLBACK);
    let p = semantic_probability_with(law, d, z)?;
    Ok(MaskFlags {
        in_mask: d >= 0.0,
        zone: p.zone,
        instance: field.instance(x, y),
        signed_dist: d,
        probability: p.value,
        depth_missing,
    })
}

pub fn mask_flags(field: &MaskDistanceField, pixel: &Vector2<f64>, depth: Option<f64>) -> Result<MaskFlags, MaskError> {
    mask_flags_with(&BETA, field, pixel, depth)
}
