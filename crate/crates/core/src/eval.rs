//! Absolute trajectory error and relative pose error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{associate, StampedPose};
use crate::geometry::PoseSE3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least {needed} associated poses, got {got}")]
    InsufficientOverlap { needed: usize, got: usize },
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("baseline RMSE must be positive, got {0}")]
    ZeroBaseline(f64),
}

/// Similarity transform mapping estimated positions onto ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    /// Rotation was not uniquely determined (fewer than 3 points or collinear input).
    pub degenerate: bool,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), scale: 1.0, degenerate: false }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Closed-form least-squares alignment minimising `sum |gt - (s R est + t)|^2`.
pub fn align_umeyama(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Alignment, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Err(EvalError::InsufficientOverlap { needed: 1, got: 0 });
    }
    let mu_e = centroid(est);
    let mu_g = centroid(gt);
    let n = est.len() as f64;
    if est.len() < 3 {
        // translation only
        return Ok(Alignment { translation: mu_g - mu_e, degenerate: true, ..Alignment::identity() });
    }
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let degenerate = sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE);
    if est == gt {
        // identity is the exact minimiser; skip the SVD round-off
        return Ok(Alignment { degenerate, ..Alignment::identity() });
    }
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale && var_e > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let translation = mu_g - scale * (rotation * mu_e);
    Ok(Alignment { rotation, translation, scale, degenerate })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub estimated: Vec<StampedPose>,
    pub ground_truth: Vec<StampedPose>,
    pub alignment: Alignment,
    pub residuals: Vec<f64>,
}

impl AlignedPair {
    pub fn rmse(&self) -> f64 {
        rms(&self.residuals)
    }
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn associated(est: &[StampedPose], gt: &[StampedPose], max_diff: f64) -> (Vec<StampedPose>, Vec<StampedPose>) {
    let ta: Vec<f64> = est.iter().map(|p| p.timestamp).collect();
    let tb: Vec<f64> = gt.iter().map(|p| p.timestamp).collect();
    let assoc = associate(&ta, &tb, max_diff);
    assoc.pairs.iter().map(|(i, j)| (est[*i], gt[*j])).unzip()
}

pub fn ate(est: &[StampedPose], gt: &[StampedPose], max_diff: f64, with_scale: bool) -> Result<AlignedPair, EvalError> {
    let (e, g) = associated(est, gt, max_diff);
    if e.len() < 2 {
        return Err(EvalError::InsufficientOverlap { needed: 2, got: e.len() });
    }
    let ep: Vec<_> = e.iter().map(|p| p.pose.translation).collect();
    let gp: Vec<_> = g.iter().map(|p| p.pose.translation).collect();
    let alignment = align_umeyama(&ep, &gp, with_scale)?;
    let residuals = ep.iter().zip(&gp).map(|(a, b)| (alignment.apply(a) - b).norm()).collect();
    Ok(AlignedPair { estimated: e, ground_truth: g, alignment, residuals })
}

pub fn ate_rmse(est: &[StampedPose], gt: &[StampedPose], max_diff: f64) -> Result<f64, EvalError> {
    Ok(ate(est, gt, max_diff, false)?.rmse())
}

/// Rotation angle in degrees from the trace of the rotation matrix.
pub fn rotation_angle_deg(pose: &PoseSE3) -> f64 {
    let c = ((pose.rotation_matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeResult {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
    pub count: usize,
}

pub fn rpe(est: &[StampedPose], gt: &[StampedPose], delta: usize, max_diff: f64) -> Result<RpeResult, EvalError> {
    let delta = delta.max(1);
    let (e, g) = associated(est, gt, max_diff);
    if e.len() < delta + 1 {
        return Err(EvalError::InsufficientOverlap { needed: delta + 1, got: e.len() });
    }
    let mut trans = Vec::with_capacity(e.len() - delta);
    let mut rot = Vec::with_capacity(e.len() - delta);
    for i in 0..e.len() - delta {
        let gt_rel = g[i].pose.inverse() * g[i + delta].pose;
        let est_rel = e[i].pose.inverse() * e[i + delta].pose;
        let err = gt_rel.inverse() * est_rel;
        trans.push(err.translation.norm());
        rot.push(rotation_angle_deg(&err));
    }
    Ok(RpeResult { trans_rmse: rms(&trans), rot_rmse_deg: rms(&rot), count: trans.len() })
}

/// Percentage RMSE reduction relative to a baseline; negative when worse.
pub fn improvement_rate(baseline_rmse: f64, method_rmse: f64) -> Result<f64, EvalError> {
    if !(baseline_rmse > 0.0) {
        return Err(EvalError::ZeroBaseline(baseline_rmse));
    }
    Ok(100.0 * (baseline_rmse - method_rmse) / baseline_rmse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub baseline_ate_rmse: f64,
    pub baseline_rpe_trans_rmse: f64,
    pub baseline_rpe_rot_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequence: String,
    pub ate_rmse: f64,
    pub rpe_trans_rmse: f64,
    pub rpe_rot_rmse: f64,
    pub improvement_vs_baseline: Option<Improvement>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub max_diff: f64,
    pub with_scale: bool,
    pub delta: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_diff: 0.02, with_scale: false, delta: 1 }
    }
}

pub fn evaluate(
    sequence: &str,
    est: &[StampedPose],
    gt: &[StampedPose],
    baseline: Option<&[StampedPose]>,
    opts: &EvalOptions,
) -> Result<MetricReport, EvalError> {
    let a = ate(est, gt, opts.max_diff, opts.with_scale)?.rmse();
    let r = rpe(est, gt, opts.delta, opts.max_diff)?;
    let improvement_vs_baseline = match baseline {
        None => None,
        Some(b) => {
            let ba = ate(b, gt, opts.max_diff, opts.with_scale)?.rmse();
            let br = rpe(b, gt, opts.delta, opts.max_diff)?;
            Some(Improvement {
                ate: improvement_rate(ba, a)?,
                rpe_trans: improvement_rate(br.trans_rmse, r.trans_rmse)?,
                rpe_rot: improvement_rate(br.rot_rmse_deg, r.rot_rmse_deg)?,
                baseline_ate_rmse: ba,
                baseline_rpe_trans_rmse: br.trans_rmse,
                baseline_rpe_rot_rmse: br.rot_rmse_deg,
            })
        }
    };
    Ok(MetricReport {
        sequence: sequence.to_string(),
        ate_rmse: a,
        rpe_trans_rmse: r.trans_rmse,
        rpe_rot_rmse: r.rot_rmse_deg,
        improvement_vs_baseline,
    })
}

/// Plain-text table: raw RMSEs plus improvement rates when a baseline exists.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>14} {:>14} {:>9} {:>11} {:>11}\n",
        "sequence", "ATE [m]", "RPE-t [m]", "RPE-r [deg]", "ATE %", "RPE-t %", "RPE-r %"
    ));
    for r in reports {
        let pct = |v: Option<f64>| v.map(|x| format!("{x:.1}%")).unwrap_or_else(|| "-".into());
        let imp = r.improvement_vs_baseline;
        out.push_str(&format!(
            "{:<16} {:>12.6} {:>14.6} {:>14.6} {:>9} {:>11} {:>11}\n",
            r.sequence,
            r.ate_rmse,
            r.rpe_trans_rmse,
            r.rpe_rot_rmse,
            pct(imp.map(|i| i.ate)),
            pct(imp.map(|i| i.rpe_trans)),
            pct(imp.map(|i| i.rpe_rot)),
        ));
    }
    out
}
