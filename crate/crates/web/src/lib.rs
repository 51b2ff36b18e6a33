//! Browser bindings: depth-dependent probability curves, the signed mask
//! distance field with zone shading, and single OIM queries.

use dynakey_core::classifier::{alpha, geometric_moving_probability};
use dynakey_core::mask::{beta, build_distance_field, semantic_moving_probability, MaskImage, Zone};
use dynakey_core::oim::{evaluate_query, find_supporting_dynamics, OimParams, OimPoint};
use nalgebra::Vector2;
use wasm_bindgen::prelude::*;

fn clamp_depth(z: f64) -> f64 {
    if z.is_finite() {
        z.max(0.0)
    } else {
        0.0
    }
}

fn samples(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let n = n.max(2);
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Semantic moving probability at `n` evenly spaced signed distances.
#[wasm_bindgen]
pub fn semantic_curve(z: f64, d_min: f64, d_max: f64, n: usize) -> Vec<f64> {
    let z = clamp_depth(z);
    samples(d_min, d_max, n).map(|d| semantic_moving_probability(d, z).map_or(f64::NAN, |p| p.value)).collect()
}

/// Geometric moving probability at `n` evenly spaced reprojection errors.
#[wasm_bindgen]
pub fn geometric_curve(z: f64, sigma: f64, e_max: f64, n: usize) -> Vec<f64> {
    let z = clamp_depth(z);
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    samples(0.0, e_max.max(0.0), n).map(|e| geometric_moving_probability(e, z, sigma).unwrap_or(f64::NAN)).collect()
}

/// `[beta, alpha, half width of the uncertainty band in px]` at depth `z`.
#[wasm_bindgen]
pub fn laws_at(z: f64) -> Vec<f64> {
    let z = clamp_depth(z);
    let b = beta(z).unwrap_or(f64::NAN);
    vec![b, alpha(z).unwrap_or(f64::NAN), 3f64.ln() / b]
}

/// Paintable instance mask with a live signed distance field.
#[wasm_bindgen]
pub struct MaskCanvas {
    mask: MaskImage,
}

#[wasm_bindgen]
impl MaskCanvas {
    #[wasm_bindgen(constructor)]
    pub fn new(width: usize, height: usize) -> MaskCanvas {
        MaskCanvas { mask: MaskImage::empty(width.max(1), height.max(1)) }
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn clear(&mut self) {
        self.mask = MaskImage::empty(self.mask.width(), self.mask.height());
    }

    /// Fills a disc with instance `id` (0 erases).
    pub fn paint(&mut self, cx: f64, cy: f64, radius: f64, id: u8) {
        let (w, h) = (self.mask.width(), self.mask.height());
        let r = radius.max(0.0);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
        let x1 = ((cx + r).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                    self.mask.set(x, y, id);
                }
            }
        }
    }

    /// Signed distance per pixel, row-major; positive inside.
    pub fn signed_field(&self) -> Vec<f64> {
        build_distance_field(&self.mask).values().to_vec()
    }

    /// RGBA pixels coloured by zone for keypoints at depth `z`: red for
    /// reliably inside, amber for uncertain, blue for reliably outside.
    pub fn shade(&self, z: f64) -> Vec<u8> {
        let z = clamp_depth(z);
        let field = build_distance_field(&self.mask);
        let mut out = Vec::with_capacity(field.values().len() * 4);
        for &d in field.values() {
            let p = semantic_moving_probability(d, z).map(|p| p.value).unwrap_or(0.0);
            let rgb = match Zone::from_probability(p) {
                Zone::ReliableInside => [200, 40, 40],
                Zone::Uncertain => [230, 170, 30],
                Zone::ReliableOutside => [40, 70, 160],
            };
            // fade with confidence so the logistic ramp is visible
            let k = 0.35 + 0.65 * (2.0 * p - 1.0).abs();
            out.extend(rgb.iter().map(|c| (*c as f64 * k) as u8));
            out.push(255);
        }
        out
    }
}

/// One interaction query. `dynamics` is `[x0, y0, z0, x1, y1, z1, ...]`.
///
/// Returns `[centroid x, centroid y, distance, gamma, flips (0/1), support,
/// search radius]`, or `[NaN, NaN, NaN, gamma, 0, 0, search radius]` when no
/// dynamic point supports the query.
#[wasm_bindgen]
pub fn oim_query(qx: f64, qy: f64, qz: f64, dynamics: &[f64], rho: f64) -> Vec<f64> {
    let params = OimParams { rho: if rho > 0.0 { rho } else { OimParams::default().rho }, ..OimParams::default() };
    let qz = clamp_depth(qz);
    let query = OimPoint { pixel: Vector2::new(qx, qy), depth: Some(qz) };
    let points: Vec<OimPoint> = dynamics
        .chunks_exact(3)
        .map(|c| OimPoint { pixel: Vector2::new(c[0], c[1]), depth: Some(c[2]).filter(|z| *z >= 0.0) })
        .collect();
    let radius = params.delta.eval(qz).unwrap_or(f64::NAN);
    let gamma = params.gamma.eval(qz).unwrap_or(f64::NAN);
    match evaluate_query(&query, &points, &params) {
        Ok(Some(d)) => vec![d.centroid.x, d.centroid.y, d.distance, d.threshold, f64::from(u8::from(d.flips())), d.support as f64, radius],
        _ => vec![f64::NAN, f64::NAN, f64::NAN, gamma, 0.0, 0.0, radius],
    }
}

/// Indices (into the triples) of the dynamic points supporting a query.
#[wasm_bindgen]
pub fn oim_neighbors(qx: f64, qy: f64, qz: f64, dynamics: &[f64], rho: f64) -> Vec<u32> {
    let params = OimParams { rho: if rho > 0.0 { rho } else { OimParams::default().rho }, ..OimParams::default() };
    let query = OimPoint { pixel: Vector2::new(qx, qy), depth: Some(clamp_depth(qz)) };
    let points: Vec<OimPoint> = dynamics
        .chunks_exact(3)
        .map(|c| OimPoint { pixel: Vector2::new(c[0], c[1]), depth: Some(c[2]).filter(|z| *z >= 0.0) })
        .collect();
    find_supporting_dynamics(&query, &points, &params)
        .map(|n| n.iter().map(|d| d.index as u32).collect())
        .unwrap_or_default()
}
