//! Geometric moving probability, weighted fusion with the semantic cue and
//! the per-keypoint two-state Bayes filter.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reprojection_error, FundamentalMatrix};
use crate::law::{DepthLaw, NegativeDepth, ALPHA, BETA};
use crate::mask::{mask_flags_with, MaskDistanceField, Zone, MISSING_DEPTH_FALLBACK};
use crate::sequence::Keypoint;

/// Belief assigned to a keypoint that starts a new track.
pub const NEW_TRACK_PRIOR: f64 = 0.5;

const CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifierError {
    #[error("reprojection error must be non-negative, got {0}")]
    NegativeError(f64),
    #[error(transparent)]
    NegativeDepth(#[from] NegativeDepth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeypointState {
    Static,
    Dynamic,
}

impl KeypointState {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeypointState::Static => "static",
            KeypointState::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(KeypointState::Static),
            "dynamic" => Some(KeypointState::Dynamic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Classifier,
    Oim,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Classifier => "classifier",
            Provenance::Oim => "oim",
        }
    }
}

/// Probability in [0, 1] that a keypoint is dynamic.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MovingBelief(f64);

impl MovingBelief {
    pub fn new(value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value), "belief {value} outside [0, 1]");
        Self(value.clamp(0.0, 1.0))
    }

    pub fn new_track() -> Self {
        Self(NEW_TRACK_PRIOR)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FusionRule {
    GeometricOnly,
    SemanticOnly,
    Fused(f64),
    NoObservation,
}

impl FusionRule {
    pub fn tag(&self) -> String {
        match self {
            FusionRule::GeometricOnly => "geometric".into(),
            FusionRule::SemanticOnly => "semantic".into(),
            FusionRule::Fused(w) => format!("fused:{w}"),
            FusionRule::NoObservation => "none".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedObservation {
    pub p_move: Option<f64>,
    pub rule: FusionRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierParams {
    pub alpha: DepthLaw,
    pub beta: DepthLaw,
    /// Standard deviation of the epipolar error model (px).
    pub sigma: f64,
    pub omega_uncertain: f64,
    pub omega_reliable: f64,
    /// State transition probability of the Bayes prediction step.
    pub epsilon: f64,
    pub decision_threshold: f64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            alpha: ALPHA,
            beta: BETA,
            sigma: 1.0,
            omega_uncertain: 0.5,
            omega_reliable: 0.1,
            epsilon: 0.1,
            decision_threshold: 0.5,
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("omega_uncertain", self.omega_uncertain)?;
        unit("omega_reliable", self.omega_reliable)?;
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(format!("epsilon must lie in [0, 0.5), got {}", self.epsilon));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(format!("decision_threshold must lie in (0, 1), got {}", self.decision_threshold));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma must be positive, got {}", self.sigma));
        }
        if !self.alpha.is_valid() || self.alpha.min < 0.0 {
            return Err("alpha law is invalid".into());
        }
        if !self.beta.is_valid() || self.beta.min < 0.0 {
            return Err("beta law is invalid".into());
        }
        Ok(())
    }
}

pub fn alpha(z: f64) -> Result<f64, NegativeDepth> {
    ALPHA.eval(z)
}

/// Moving probability from the epipolar error: 1 above the depth threshold,
/// otherwise one minus the peak-normalised Gaussian.
pub fn geometric_probability_with(law: &DepthLaw, err: f64, z: f64, sigma: f64) -> Result<f64, ClassifierError> {
    if !(err >= 0.0) {
        return Err(ClassifierError::NegativeError(err));
    }
    let threshold = law.eval(z)?;
    if err >= threshold {
        return Ok(1.0);
    }
    Ok(-(-(err * err) / (2.0 * sigma * sigma)).exp_m1())
}

pub fn geometric_moving_probability(err: f64, z: f64, sigma: f64) -> Result<f64, ClassifierError> {
    geometric_probability_with(&ALPHA, err, z, sigma)
}

/// Per-keypoint evidence gathered before fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointObservation {
    pub pixel: Vector2<f64>,
    pub depth: Option<f64>,
    pub match_prev: Option<usize>,
    /// Present only when the keypoint is matched and the epipolar geometry is known.
    pub reproj_error: Option<f64>,
    pub signed_mask_dist: f64,
    pub zone: Zone,
    pub instance: u8,
}

impl KeypointObservation {
    pub fn in_mask(&self) -> bool {
        self.signed_mask_dist >= 0.0
    }
}

pub fn select_omega(obs: &KeypointObservation, params: &ClassifierParams) -> FusionRule {
    match (obs.reproj_error.is_some(), obs.zone) {
        (true, Zone::ReliableOutside) => FusionRule::GeometricOnly,
        (true, Zone::Uncertain) => FusionRule::Fused(params.omega_uncertain),
        (true, Zone::ReliableInside) => FusionRule::Fused(params.omega_reliable),
        // linked but no geometry this frame: let the carried belief stand
        (false, Zone::ReliableOutside) if obs.match_prev.is_some() => FusionRule::NoObservation,
        (false, _) => FusionRule::SemanticOnly,
    }
}

pub fn fuse(p_g: Option<f64>, p_s: f64, rule: FusionRule) -> FusedObservation {
    let p_move = match rule {
        FusionRule::Fused(w) => p_g.map(|g| w * g + (1.0 - w) * p_s),
        FusionRule::GeometricOnly => p_g,
        FusionRule::SemanticOnly => Some(p_s),
        FusionRule::NoObservation => None,
    };
    FusedObservation { p_move, rule: if p_move.is_none() { FusionRule::NoObservation } else { rule } }
}

/// One predict/correct step of the static/dynamic filter.
pub fn bayes_update(prior: MovingBelief, obs: &FusedObservation, epsilon: f64) -> MovingBelief {
    let bel = prior.value();
    let pred = (1.0 - epsilon) * bel + epsilon * (1.0 - bel);
    let Some(p) = obs.p_move else {
        return MovingBelief::new(pred);
    };
    let pred = pred.clamp(CLAMP, 1.0 - CLAMP);
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    let num = p * pred;
    MovingBelief::new(num / (num + (1.0 - p) * (1.0 - pred)))
}

pub fn classify(bel: MovingBelief, threshold: f64) -> KeypointState {
    if bel.value() >= threshold {
        KeypointState::Dynamic
    } else {
        KeypointState::Static
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordFlags {
    pub depth_missing: bool,
    pub out_of_bounds: bool,
    pub bad_link: bool,
    pub geometry_failed: bool,
}

impl RecordFlags {
    pub fn to_field(&self) -> String {
        let names = [
            (self.depth_missing, "depth_missing"),
            (self.out_of_bounds, "out_of_bounds"),
            (self.bad_link, "bad_link"),
            (self.geometry_failed, "geometry_failed"),
        ];
        names.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect::<Vec<_>>().join("|")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRecord {
    pub observation: KeypointObservation,
    pub p_s: f64,
    pub p_g: Option<f64>,
    pub fused: FusedObservation,
    pub belief: MovingBelief,
    pub state: KeypointState,
    pub provenance: Provenance,
    pub flags: RecordFlags,
}

impl KeypointRecord {
    pub fn pixel(&self) -> Vector2<f64> {
        self.observation.pixel
    }

    pub fn depth(&self) -> Option<f64> {
        self.observation.depth
    }
}

/// Classifies one frame given the previous frame's records.
///
/// Per-keypoint problems are reported through [`RecordFlags`]; the frame is
/// never aborted.
pub fn classify_frame(
    params: &ClassifierParams,
    prev: Option<&[KeypointRecord]>,
    keypoints: &[Keypoint],
    f: Option<&FundamentalMatrix>,
    field: &MaskDistanceField,
) -> Vec<KeypointRecord> {
    keypoints.iter().map(|kp| classify_keypoint(params, prev, kp, f, field)).collect()
}

fn classify_keypoint(
    params: &ClassifierParams,
    prev: Option<&[KeypointRecord]>,
    kp: &Keypoint,
    f: Option<&FundamentalMatrix>,
    field: &MaskDistanceField,
) -> KeypointRecord {
    let mut flags = RecordFlags::default();
    let depth = kp.valid_depth();
    flags.depth_missing = depth.is_none();
    let z = depth.unwrap_or(MISSING_DEPTH_FALLBACK);

    let (signed_dist, zone, instance, p_s) = match mask_flags_with(&params.beta, field, &kp.pixel, depth) {
        Ok(m) => (m.signed_dist, m.zone, m.instance, m.probability),
        Err(_) => {
            flags.out_of_bounds = true;
            (f64::NEG_INFINITY, Zone::ReliableOutside, 0, 0.0)
        }
    };

    let predecessor = match (kp.match_prev, prev) {
        (Some(j), Some(prev)) if j < prev.len() => Some((j, &prev[j])),
        (Some(_), _) => {
            flags.bad_link = true;
            None
        }
        _ => None,
    };

    let reproj_error = match (predecessor, f) {
        (Some((_, q)), Some(f)) => match reprojection_error(f, &q.pixel(), &kp.pixel) {
            Ok(e) if e.is_finite() => Some(e),
            _ => {
                flags.geometry_failed = true;
                None
            }
        },
        _ => None,
    };

    let observation = KeypointObservation {
        pixel: kp.pixel,
        depth,
        match_prev: predecessor.map(|(j, _)| j),
        reproj_error,
        signed_mask_dist: signed_dist,
        zone,
        instance,
    };
    let p_g = reproj_error.and_then(|e| geometric_probability_with(&params.alpha, e, z, params.sigma).ok());
    let rule = select_omega(&observation, params);
    let fused = fuse(p_g, p_s, rule);
    let prior = predecessor.map(|(_, q)| q.belief).unwrap_or_else(MovingBelief::new_track);
    let belief = bayes_update(prior, &fused, params.epsilon);
    KeypointRecord {
        observation,
        p_s,
        p_g,
        fused,
        belief,
        state: classify(belief, params.decision_threshold),
        provenance: Provenance::Classifier,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_distance_field, MaskImage};

    fn obs(matched: bool, zone: Zone) -> KeypointObservation {
        KeypointObservation {
            pixel: Vector2::zeros(),
            depth: Some(2.0),
            match_prev: matched.then_some(0),
            reproj_error: matched.then_some(0.1),
            signed_mask_dist: if zone == Zone::ReliableOutside { -50.0 } else { 50.0 },
            zone,
            instance: 0,
        }
    }

    #[test]
    fn alpha_law() {
        assert_eq!(alpha(0.0).unwrap(), 0.9);
        assert_eq!(alpha(10.0).unwrap(), 0.5);
        assert!((alpha(5.0).unwrap() - 0.7).abs() < 1e-15);
        assert!(alpha(-0.5).is_err());
    }

    #[test]
    fn geometric_probability_values() {
        assert_eq!(geometric_moving_probability(0.0, 3.0, 1.0).unwrap(), 0.0);
        for z in [0.0, 2.0, 10.0, 50.0] {
            assert_eq!(geometric_moving_probability(1.0, z, 1.0).unwrap(), 1.0);
        }
        let p = geometric_moving_probability(0.3, 0.0, 1.0).unwrap();
        assert!((p - (1.0 - (-0.045f64).exp())).abs() < 1e-12);
        assert!(matches!(geometric_moving_probability(-0.1, 1.0, 1.0), Err(ClassifierError::NegativeError(_))));
        // jump exactly at alpha
        let a = alpha(2.0).unwrap();
        assert_eq!(geometric_moving_probability(a, 2.0, 1.0).unwrap(), 1.0);
        assert!(geometric_moving_probability(a - 1e-9, 2.0, 1.0).unwrap() < 0.5);
    }

    #[test]
    fn omega_rules() {
        let p = ClassifierParams::default();
        assert_eq!(select_omega(&obs(true, Zone::ReliableOutside), &p), FusionRule::GeometricOnly);
        assert_eq!(select_omega(&obs(false, Zone::ReliableInside), &p), FusionRule::SemanticOnly);
        assert_eq!(select_omega(&obs(true, Zone::Uncertain), &p), FusionRule::Fused(0.5));
        assert_eq!(select_omega(&obs(true, Zone::ReliableInside), &p), FusionRule::Fused(0.1));
        assert_eq!(select_omega(&obs(false, Zone::ReliableOutside), &p), FusionRule::SemanticOnly);
        let mut linked = obs(false, Zone::ReliableOutside);
        linked.match_prev = Some(3);
        assert_eq!(select_omega(&linked, &p), FusionRule::NoObservation);
    }

    #[test]
    fn fusion_arithmetic() {
        let f = fuse(Some(0.4), 0.8, FusionRule::Fused(0.5));
        assert!((f.p_move.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(fuse(Some(0.33), 0.9, FusionRule::GeometricOnly).p_move, Some(0.33));
        for w in [0.0, 0.1, 0.5, 0.77, 1.0] {
            let f = fuse(Some(0.42), 0.42, FusionRule::Fused(w));
            assert!((f.p_move.unwrap() - 0.42).abs() < 1e-15);
        }
        assert_eq!(fuse(None, 0.3, FusionRule::NoObservation).p_move, None);
    }

    #[test]
    fn bayes_closed_forms() {
        let half = FusedObservation { p_move: Some(0.5), rule: FusionRule::SemanticOnly };
        let b = bayes_update(MovingBelief::new(0.3), &half, 0.1);
        assert!((b.value() - (0.9 * 0.3 + 0.1 * 0.7)).abs() < 1e-15);
        let strong = FusedObservation { p_move: Some(0.9), rule: FusionRule::SemanticOnly };
        let b = bayes_update(MovingBelief::new(0.5), &strong, 0.1);
        assert!((b.value() - 0.9).abs() < 1e-15);
        let none = FusedObservation { p_move: None, rule: FusionRule::NoObservation };
        let b = bayes_update(MovingBelief::new(1.0), &none, 0.1);
        assert!((b.value() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn extremes_do_not_divide_by_zero() {
        let obs = FusedObservation { p_move: Some(0.0), rule: FusionRule::GeometricOnly };
        let b = bayes_update(MovingBelief::new(1.0), &obs, 0.0);
        assert!(b.value().is_finite() && (0.0..=1.0).contains(&b.value()));
    }

    #[test]
    fn decision_tie_goes_dynamic() {
        assert_eq!(classify(MovingBelief::new(0.49), 0.5), KeypointState::Static);
        assert_eq!(classify(MovingBelief::new(0.5), 0.5), KeypointState::Dynamic);
        assert_eq!(classify(MovingBelief::new(0.97), 0.5), KeypointState::Dynamic);
    }

    #[test]
    fn unmatched_inside_mask_is_semantic() {
        let mut m = MaskImage::empty(200, 200);
        for y in 20..180 {
            for x in 20..180 {
                m.set(x, y, 1);
            }
        }
        let field = build_distance_field(&m);
        let kp = Keypoint::new(100.0, 100.0, Some(2.0));
        let rec = classify_frame(&ClassifierParams::default(), None, &[kp], None, &field);
        assert_eq!(rec[0].fused.rule, FusionRule::SemanticOnly);
        assert_eq!(rec[0].state, KeypointState::Dynamic);
        assert!((rec[0].belief.value() - rec[0].p_s).abs() < 1e-12);
        assert!(rec[0].belief.value() > 0.75);
    }

    #[test]
    fn bad_links_and_out_of_bounds_are_flagged() {
        let field = build_distance_field(&MaskImage::empty(10, 10));
        let mut kp = Keypoint::new(50.0, 5.0, None);
        kp.match_prev = Some(4);
        let rec = classify_frame(&ClassifierParams::default(), Some(&[]), &[kp], None, &field);
        assert!(rec[0].flags.out_of_bounds && rec[0].flags.bad_link && rec[0].flags.depth_missing);
        assert_eq!(rec[0].flags.to_field(), "depth_missing|out_of_bounds|bad_link");
        assert_eq!(rec[0].state, KeypointState::Static);
    }
}
