//! Pinhole cameras, rigid poses and two-view epipolar geometry.
//!
//! Poses are camera-to-world: `X_world = R * X_cam + t`, which is the TUM
//! ground-truth convention.

use std::ops::Mul;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("relative translation is zero, epipolar constraint undefined")]
    DegenerateMotion,
    #[error("epipolar line has vanishing normal")]
    DegenerateLine,
    #[error("need at least 8 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("best consensus has only {0} inliers")]
    NoConsensus(usize),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("matrix is not rank 2 (singular values {0:?})")]
    NotRankTwo([f64; 3]),
    #[error("quaternion has zero norm")]
    InvalidQuaternion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() || !fx.is_finite() || !fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Calibration of the TUM RGB-D fr3 sequences.
    pub fn tum_fr3() -> Self {
        Self { fx: 535.4, fy: 539.2, cx: 320.1, cy: 247.6 }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Builds a pose from TUM-ordered `(qx, qy, qz, qw)`, renormalising.
    pub fn from_xyzw(translation: Vector3<f64>, q: [f64; 4]) -> Result<Self, GeometryError> {
        let raw = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = raw.norm();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(GeometryError::InvalidQuaternion);
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(raw), translation))
    }

    /// `(qx, qy, qz, qw)`.
    pub fn xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        PoseSE3::new(self.rotation * rhs.rotation, self.rotation * rhs.translation + self.translation)
    }
}

/// Rank-2 epipolar operator: `p_cur^T F q_prev = 0` for static correspondences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Wraps a matrix as-is after checking that it has rank 2.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if !(s[0] > 0.0) || !s[0].is_finite() || s[2] >= 1e-8 * s[0] || s[1] < 1e-8 * s[0] {
            return Err(GeometryError::NotRankTwo([s[0], s[1], s[2]]));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Unit Frobenius norm, largest-magnitude entry positive.
    pub fn normalized(&self) -> Self {
        Self(canonical_scale(self.0))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0 * factor)
    }

    /// Left null vector `e'` with `e'^T F = 0` (epipole in the current image).
    pub fn left_epipole(&self) -> Vector3<f64> {
        let svd = self.0.svd(true, false);
        let u = svd.u.expect("u requested");
        let k = argmin(svd.singular_values.as_slice());
        u.column(k).into_owned()
    }
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn canonical_scale(m: Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    let mut out = m / norm;
    let mut pivot = 0.0_f64;
    for v in out.transpose().iter() {
        // row-major scan so ties resolve to the first entry in reading order
        if v.abs() > pivot.abs() {
            pivot = *v;
        }
    }
    if pivot < 0.0 {
        out = -out;
    }
    out
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K^-T [t]x R K^-1` for the motion that maps previous-camera coordinates
/// into current-camera coordinates (`X_cur = R X_prev + t`).
pub fn fundamental_from_relative(
    k: &CameraIntrinsics,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Result<FundamentalMatrix, GeometryError> {
    if translation.norm() <= 1e-9 {
        return Err(GeometryError::DegenerateMotion);
    }
    let k_inv = k.inverse_matrix();
    let f = k_inv.transpose() * skew(translation) * rotation * k_inv;
    Ok(FundamentalMatrix(canonical_scale(f)))
}

pub fn fundamental_from_poses(
    k: &CameraIntrinsics,
    pose_prev: &PoseSE3,
    pose_cur: &PoseSE3,
) -> Result<FundamentalMatrix, GeometryError> {
    let rel = pose_cur.inverse() * *pose_prev;
    fundamental_from_relative(k, &rel.rotation_matrix(), &rel.translation)
}

/// Line `x u + y v + z = 0` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EpipolarLine {
    pub fn coefficients(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Unsigned point-line distance in pixels.
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        (self.x * p.x + self.y * p.y + self.z).abs() / self.x.hypot(self.y)
    }
}

pub fn epipolar_line(f: &FundamentalMatrix, q: &Vector2<f64>) -> Result<EpipolarLine, GeometryError> {
    let l = f.0 * Vector3::new(q.x, q.y, 1.0);
    if l.x.abs() < 1e-12 && l.y.abs() < 1e-12 {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(EpipolarLine { x: l.x, y: l.y, z: l.z })
}

/// Distance from `p` (current frame) to the epipolar line of `q` (previous frame).
pub fn reprojection_error(
    f: &FundamentalMatrix,
    q: &Vector2<f64>,
    p: &Vector2<f64>,
) -> Result<f64, GeometryError> {
    Ok(epipolar_line(f, q)?.distance(p))
}

pub fn project(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    point: &Vector3<f64>,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let c = pose.inverse().transform_point(point);
    if !(c.z > 0.0) {
        return Err(GeometryError::BehindCamera(c.z));
    }
    let pixel = Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
    Ok((pixel, c.z))
}

pub fn backproject(
    k: &CameraIntrinsics,
    pixel: &Vector2<f64>,
    depth: f64,
    pose: &PoseSE3,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let c = Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    );
    Ok(pose.transform_point(&c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 2000, inlier_threshold: 1.0, seed: 0, confidence: 0.999 }
    }
}

const MIN_SAMPLE: usize = 8;

/// Hartley normalisation: centroid to origin, mean distance sqrt(2).
fn hartley(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let h = t * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}

fn enforce_rank_two(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let mut s = svd.singular_values;
    let k = argmin(s.as_slice());
    s[k] = 0.0;
    svd.u.unwrap() * Matrix3::from_diagonal(&s) * svd.v_t.unwrap()
}

/// Normalised 8-point least squares over all given correspondences `(q, p)`.
pub fn eight_point(matches: &[(Vector2<f64>, Vector2<f64>)]) -> Option<FundamentalMatrix> {
    if matches.len() < MIN_SAMPLE {
        return None;
    }
    let qs: Vec<_> = matches.iter().map(|m| m.0).collect();
    let ps: Vec<_> = matches.iter().map(|m| m.1).collect();
    let tq = hartley(&qs)?;
    let tp = hartley(&ps)?;
    let rows = matches.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (q, p)) in qs.iter().zip(&ps).enumerate() {
        let q = apply(&tq, q);
        let p = apply(&tp, p);
        let row = [p.x * q.x, p.x * q.y, p.x, p.y * q.x, p.y * q.y, p.y, q.x, q.y, 1.0];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let k = argmin(svd.singular_values.as_slice());
    let f = v_t.row(k);
    let fn_ = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let f = tp.transpose() * enforce_rank_two(&fn_) * tq;
    if !f.iter().all(|v| v.is_finite()) || f.norm() == 0.0 {
        return None;
    }
    Some(FundamentalMatrix(canonical_scale(f)))
}

fn inlier_flags(
    f: &FundamentalMatrix,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
) -> Vec<bool> {
    matches
        .iter()
        .map(|(q, p)| matches!(reprojection_error(f, q, p), Ok(e) if e < threshold))
        .collect()
}

/// RANSAC over minimal 8-point samples followed by a least-squares refit on
/// the consensus set. Deterministic for a fixed seed.
pub fn estimate_fundamental_ransac(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    params: &RansacParams,
) -> Result<(FundamentalMatrix, Vec<bool>), GeometryError> {
    if matches.len() < MIN_SAMPLE {
        return Err(GeometryError::InsufficientMatches(matches.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(FundamentalMatrix, usize)> = None;
    let mut budget = params.iterations;
    let mut sample_buf = Vec::with_capacity(MIN_SAMPLE);
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        sample_buf.clear();
        sample_buf.extend(sample(&mut rng, matches.len(), MIN_SAMPLE).iter().map(|i| matches[i]));
        let Some(f) = eight_point(&sample_buf) else { continue };
        let count = inlier_flags(&f, matches, params.inlier_threshold).iter().filter(|b| **b).count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((f, count));
            let w = count as f64 / matches.len() as f64;
            let needed = adaptive_iterations(w, params.confidence);
            budget = budget.min(needed.max(iter));
        }
    }
    let (mut f, count) = best.ok_or(GeometryError::NoConsensus(0))?;
    if count < MIN_SAMPLE {
        return Err(GeometryError::NoConsensus(count));
    }
    let mut flags = inlier_flags(&f, matches, params.inlier_threshold);
    for _ in 0..2 {
        let inliers: Vec<_> = matches.iter().zip(&flags).filter(|(_, b)| **b).map(|(m, _)| *m).collect();
        let Some(refit) = eight_point(&inliers) else { break };
        let refit_flags = inlier_flags(&refit, matches, params.inlier_threshold);
        let refit_count = refit_flags.iter().filter(|b| **b).count();
        if refit_count < flags.iter().filter(|b| **b).count() {
            break;
        }
        let settled = refit_flags == flags;
        f = refit;
        flags = refit_flags;
        if settled {
            break;
        }
    }
    Ok((f, flags))
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(MIN_SAMPLE as i32);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 || !(confidence > 0.0 && confidence < 1.0) {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() { n.ceil() as usize } else { usize::MAX }
}
