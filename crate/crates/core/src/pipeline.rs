//! Frame-by-frame orchestration: epipolar geometry, classification, OIM and
//! scoring against ground-truth labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_frame, ClassifierParams, KeypointRecord, KeypointState, Provenance};
use crate::geometry::{estimate_fundamental_ransac, fundamental_from_poses, FundamentalMatrix, RansacParams};
use crate::mask::build_distance_field;
use crate::oim::{apply_oim, build_interaction_zone, OimParams};
use crate::sequence::{Frame, FrameSequence, PointKind};

pub const PARAMS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        let r = RansacParams::default();
        Self { iterations: r.iterations, inlier_threshold: r.inlier_threshold, confidence: r.confidence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    pub schema_version: u32,
    pub seed: u64,
    pub use_oim: bool,
    /// Use ground-truth poses for F when every frame has one.
    pub use_poses: bool,
    pub classifier: ClassifierParams,
    pub oim: OimParams,
    pub ransac: RansacConfig,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            schema_version: PARAMS_SCHEMA_VERSION,
            seed: 42,
            use_oim: true,
            use_poses: true,
            classifier: ClassifierParams::default(),
            oim: OimParams::default(),
            ransac: RansacConfig::default(),
        }
    }
}

impl PipelineParams {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let p: PipelineParams = toml::from_str(text).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != PARAMS_SCHEMA_VERSION {
            return Err(format!("schema_version: expected {PARAMS_SCHEMA_VERSION}, got {}", self.schema_version));
        }
        self.classifier.validate().map_err(|e| format!("classifier.{e}"))?;
        self.oim.validate().map_err(|e| format!("oim.{e}"))?;
        if self.ransac.iterations == 0 {
            return Err("ransac.iterations must be positive".into());
        }
        if !(self.ransac.inlier_threshold > 0.0) {
            return Err("ransac.inlier_threshold must be positive".into());
        }
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return Err("ransac.confidence must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn ransac_for(&self, frame: usize) -> RansacParams {
        RansacParams {
            iterations: self.ransac.iterations,
            inlier_threshold: self.ransac.inlier_threshold,
            confidence: self.ransac.confidence,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FSource {
    Poses,
    Ransac,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub timestamp: f64,
    pub stamp: String,
    pub f_source: FSource,
    pub records: Vec<KeypointRecord>,
    pub oim_flips: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    params: PipelineParams,
}

impl Pipeline {
    pub fn new(params: PipelineParams) -> Result<Self, String> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &PipelineParams {
        &self.params
    }

    pub fn run(&self, seq: &FrameSequence) -> Vec<FrameResult> {
        let use_poses = self.params.use_poses && seq.frames.iter().all(|f| f.pose.is_some());
        let mut results: Vec<FrameResult> = Vec::with_capacity(seq.frames.len());
        for (i, frame) in seq.frames.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| (&seq.frames[j], &results[j]));
            let res = self.process_frame(seq, i, prev, frame, use_poses);
            results.push(res);
        }
        results
    }

    fn fundamental(
        &self,
        seq: &FrameSequence,
        index: usize,
        prev: &Frame,
        frame: &Frame,
        use_poses: bool,
    ) -> (Option<FundamentalMatrix>, FSource) {
        if use_poses {
            let (Some(a), Some(b)) = (prev.pose, frame.pose) else {
                return (None, FSource::Unavailable);
            };
            return match fundamental_from_poses(&seq.intrinsics, &a, &b) {
                Ok(f) => (Some(f), FSource::Poses),
                Err(e) => {
                    log::warn!("frame {}: no epipolar geometry from poses: {e}", frame.stamp);
                    (None, FSource::Unavailable)
                }
            };
        }
        let matches: Vec<(Vector2<f64>, Vector2<f64>)> = frame
            .keypoints
            .iter()
            .filter_map(|k| {
                let j = k.match_prev?;
                prev.keypoints.get(j).map(|q| (q.pixel, k.pixel))
            })
            .collect();
        match estimate_fundamental_ransac(&matches, &self.params.ransac_for(index)) {
            Ok((f, _)) => (Some(f), FSource::Ransac),
            Err(e) => {
                log::warn!("frame {}: RANSAC failed: {e}", frame.stamp);
                (None, FSource::Unavailable)
            }
        }
    }

    fn process_frame(
        &self,
        seq: &FrameSequence,
        index: usize,
        prev: Option<(&Frame, &FrameResult)>,
        frame: &Frame,
        use_poses: bool,
    ) -> FrameResult {
        let (f, f_source) = match prev {
            Some((pf, _)) => self.fundamental(seq, index, pf, frame, use_poses),
            None => (None, FSource::Unavailable),
        };
        let field = build_distance_field(&frame.mask);
        let prev_records = prev.map(|(_, r)| r.records.as_slice());
        let mut records = classify_frame(&self.params.classifier, prev_records, &frame.keypoints, f.as_ref(), &field);
        if f.is_none() && prev.is_some() {
            for r in &mut records {
                r.flags.geometry_failed = true;
            }
        }
        let mut oim_flips = Vec::new();
        if self.params.use_oim && frame.mask.has_mask() {
            match build_interaction_zone(&frame.mask, &frame.depth, &self.params.oim) {
                Ok(zone) => oim_flips = apply_oim(&mut records, &zone, &self.params.oim),
                Err(e) => log::warn!("frame {}: interaction zone unavailable: {e}", frame.stamp),
            }
        }
        FrameResult { timestamp: frame.timestamp, stamp: frame.stamp.clone(), f_source, records, oim_flips }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const CSV_HEADER: &str = "frame_ts,idx,u,v,z,reproj_error,p_s,p_g,omega,p_move,bel,state,provenance,flags";

pub fn format_records(results: &[FrameResult]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for fr in results {
        for (i, r) in fr.records.iter().enumerate() {
            let o = &r.observation;
            let _ = writeln!(
                out,
                "{},{i},{:.6},{:.6},{},{},{:.6},{},{},{},{:.6},{},{},{}",
                fr.stamp,
                o.pixel.x,
                o.pixel.y,
                opt(o.depth),
                opt(o.reproj_error),
                r.p_s,
                opt(r.p_g),
                r.fused.rule.tag(),
                opt(r.fused.p_move),
                r.belief.value(),
                r.state.as_str(),
                r.provenance.as_str(),
                r.flags.to_field(),
            );
        }
    }
    out
}

/// Keypoints estimated static, i.e. the inlier set handed to tracking.
pub fn format_static_set(results: &[FrameResult]) -> String {
    let mut out = String::from("frame_ts,idx,u,v\n");
    for fr in results {
        for (i, r) in fr.records.iter().enumerate().filter(|(_, r)| r.state == KeypointState::Static) {
            let _ = writeln!(out, "{},{i},{:.6},{:.6}", fr.stamp, r.pixel().x, r.pixel().y);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClassScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl ClassScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        Self { tp, fp, fn_, precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub dynamic: ClassScore,
    #[serde(rename = "static")]
    pub static_: ClassScore,
    pub count: usize,
}

fn score_pairs(pairs: impl Iterator<Item = (KeypointState, KeypointState)>) -> Scores {
    let (mut dd, mut ds, mut sd, mut ss) = (0, 0, 0, 0);
    for (truth, pred) in pairs {
        match (truth, pred) {
            (KeypointState::Dynamic, KeypointState::Dynamic) => dd += 1,
            (KeypointState::Dynamic, KeypointState::Static) => ds += 1,
            (KeypointState::Static, KeypointState::Dynamic) => sd += 1,
            (KeypointState::Static, KeypointState::Static) => ss += 1,
        }
    }
    Scores {
        dynamic: ClassScore::from_counts(dd, sd, ds),
        static_: ClassScore::from_counts(ss, ds, sd),
        count: dd + ds + sd + ss,
    }
}

fn labelled<'a>(
    seq: &'a FrameSequence,
    results: &'a [FrameResult],
) -> impl Iterator<Item = (crate::sequence::Truth, &'a KeypointRecord)> + 'a {
    seq.frames
        .iter()
        .zip(results)
        .flat_map(|(f, r)| f.keypoints.iter().zip(&r.records))
        .filter_map(|(k, r)| k.truth.map(|t| (t, r)))
}

/// Precision/recall counted per keypoint observation.
pub fn score_observations(seq: &FrameSequence, results: &[FrameResult]) -> Option<Scores> {
    seq.has_truth().then(|| score_pairs(labelled(seq, results).map(|(t, r)| (t.state, r.state))))
}

/// Precision/recall per ground-truth track, each track labelled by the
/// majority of its per-frame states (ties count as Dynamic).
pub fn score_tracks(seq: &FrameSequence, results: &[FrameResult]) -> Option<Scores> {
    if !seq.has_truth() {
        return None;
    }
    let mut tally: BTreeMap<u64, [usize; 4]> = BTreeMap::new();
    for (t, r) in labelled(seq, results) {
        let e = tally.entry(t.track).or_default();
        e[0] += 1;
        e[1] += usize::from(t.state == KeypointState::Dynamic);
        e[2] += usize::from(r.state == KeypointState::Dynamic);
    }
    let vote = |dyn_count: usize, total: usize| {
        if 2 * dyn_count >= total {
            KeypointState::Dynamic
        } else {
            KeypointState::Static
        }
    };
    Some(score_pairs(tally.values().map(|c| (vote(c[1], c[0]), vote(c[2], c[0])))))
}

/// Fraction of observations of a given kind that ended up Dynamic, plus the
/// fraction of those that came from the interaction module.
pub fn kind_recall(seq: &FrameSequence, results: &[FrameResult], kind: PointKind) -> Option<f64> {
    let hits: Vec<bool> = labelled(seq, results)
        .filter(|(t, _)| t.kind == kind && t.state == KeypointState::Dynamic)
        .map(|(_, r)| r.state == KeypointState::Dynamic)
        .collect();
    (!hits.is_empty()).then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub keypoints: usize,
    pub predicted_dynamic: usize,
    pub oim_flips: usize,
    pub f_from_poses: usize,
    pub f_from_ransac: usize,
    pub f_unavailable: usize,
    pub per_observation: Option<Scores>,
    pub per_track: Option<Scores>,
    pub carried_recall: Option<f64>,
    pub config: PipelineParams,
}

pub fn summarize(seq: &FrameSequence, results: &[FrameResult], params: &PipelineParams) -> RunSummary {
    let count = |s: FSource| results.iter().filter(|r| r.f_source == s).count();
    RunSummary {
        frames: results.len(),
        keypoints: results.iter().map(|r| r.records.len()).sum(),
        predicted_dynamic: results
            .iter()
            .flat_map(|r| &r.records)
            .filter(|r| r.state == KeypointState::Dynamic)
            .count(),
        oim_flips: results.iter().map(|r| r.oim_flips.len()).sum(),
        f_from_poses: count(FSource::Poses),
        f_from_ransac: count(FSource::Ransac),
        f_unavailable: count(FSource::Unavailable),
        per_observation: score_observations(seq, results),
        per_track: score_tracks(seq, results),
        carried_recall: kind_recall(seq, results, PointKind::Carried),
        config: *params,
    }
}

pub fn oim_count(results: &[FrameResult]) -> usize {
    results.iter().flat_map(|r| &r.records).filter(|r| r.provenance == Provenance::Oim).count()
}
