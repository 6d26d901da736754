//! Attribute-based face retrieval.
//!
//! For a query face from the in-the-wild pool, candidates from the gaze pool
//! are gender-filtered, ranked by a weighted landmark/pose distance, cut to
//! the top `n`, penalized by age and race disagreement, and the best final
//! score wins.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{Validate, ValidationIssue};
use crate::error::{Error, Result};
use crate::normalization::NormalizationResult;

pub const LANDMARK_COUNT: usize = 68;
pub const AGE_CLASSES: usize = 9;
pub const RACE_CLASSES: usize = 7;
pub const GENDER_CLASSES: usize = 2;
const PROBABILITY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wider,
    Xgaze,
}

/// Extracted attributes of one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub face_id: String,
    pub source: Source,
    /// 68 landmarks in normalized-frame pixels.
    pub a_lmk: Vec<[f64; 2]>,
    /// (pitch, yaw) head pose in degrees.
    pub a_pose: [f64; 2],
    pub a_age: Vec<f64>,
    pub a_race: Vec<f64>,
    pub a_gender: Vec<f64>,
}

fn check_distribution(field: &str, p: &[f64], classes: usize, out: &mut Vec<ValidationIssue>) {
    if p.len() != classes {
        out.push(ValidationIssue::new(
            field,
            format!("expected {classes} probabilities, got {}", p.len()),
        ));
        return;
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        out.push(ValidationIssue::new(field, "probabilities must be finite and >= 0"));
        return;
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        out.push(ValidationIssue::new(
            field,
            format!("probabilities sum to {sum:.6}, expected 1"),
        ));
    }
}

impl Validate for AttributeRecord {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        if self.face_id.is_empty() {
            out.push(ValidationIssue::new("face_id", "must not be empty"));
        }
        if self.a_lmk.len() != LANDMARK_COUNT {
            out.push(ValidationIssue::new(
                "a_lmk",
                format!("expected {LANDMARK_COUNT} landmarks, got {}", self.a_lmk.len()),
            ));
        } else if self.a_lmk.iter().flatten().any(|v| !v.is_finite()) {
            out.push(ValidationIssue::new("a_lmk", "landmarks must be finite"));
        }
        if self.a_pose.iter().any(|v| !v.is_finite()) {
            out.push(ValidationIssue::new("a_pose", "pose must be finite"));
        }
        check_distribution("a_age", &self.a_age, AGE_CLASSES, &mut out);
        check_distribution("a_race", &self.a_race, RACE_CLASSES, &mut out);
        check_distribution("a_gender", &self.a_gender, GENDER_CLASSES, &mut out);
        out
    }
}

impl AttributeRecord {
    /// Most likely gender class; ties go to the lowest index.
    pub fn gender_class(&self) -> Option<usize> {
        argmax(&self.a_gender)
    }
}

fn argmax(p: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in p.iter().enumerate() {
        match best {
            Some(b) if p[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub alpha_lmk: f64,
    pub alpha_pose: f64,
    pub top_n: usize,
    pub beta_age: f64,
    pub beta_race: f64,
    /// Distances strictly below this swap only the eye region.
    pub eye_swap_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            alpha_lmk: 1.0,
            alpha_pose: 1.0,
            top_n: 50,
            beta_age: 0.5,
            beta_race: 0.5,
            eye_swap_threshold: 2.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_lmk, self.alpha_pose, self.beta_age, self.beta_race];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("match weights must be finite and >= 0"));
        }
        if self.top_n == 0 {
            return Err(Error::invalid("top_n must be >= 1"));
        }
        if !self.eye_swap_threshold.is_finite() {
            return Err(Error::invalid("eye_swap_threshold must be finite"));
        }
        Ok(())
    }

    /// Multiplies every weight by `k` (the threshold is left alone).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_lmk: self.alpha_lmk * k,
            alpha_pose: self.alpha_pose * k,
            beta_age: self.beta_age * k,
            beta_race: self.beta_race * k,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    Eyes,
    Full,
}

impl SwapMode {
    /// Half-open rule: `distance < threshold` swaps eyes, otherwise full.
    pub fn for_distance(distance: f64, threshold: f64) -> Self {
        if distance < threshold {
            SwapMode::Eyes
        } else {
            SwapMode::Full
        }
    }
}

impl std::fmt::Display for SwapMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SwapMode::Eyes => "eyes",
            SwapMode::Full => "full",
        })
    }
}

/// Candidates surviving the gender filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderFiltered {
    pub indices: Vec<usize>,
    /// Set when no candidate matched and all were passed through.
    pub fallback: bool,
}

pub fn gender_filter(query: &AttributeRecord, candidates: &[AttributeRecord]) -> GenderFiltered {
    let wanted = query.gender_class();
    let indices: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.gender_class() == wanted)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() && !candidates.is_empty() {
        log::warn!(
            "gender filter removed every candidate for {}; passing all through",
            query.face_id
        );
        return GenderFiltered {
            indices: (0..candidates.len()).collect(),
            fallback: true,
        };
    }
    GenderFiltered {
        indices,
        fallback: false,
    }
}

fn mean_abs_diff(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = a
        .zip(b)
        .fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).abs(), n + 1));
    sum / n as f64
}

/// Weighted landmark/pose dissimilarity. The matching score is its negation.
pub fn matching_distance(f_w: &AttributeRecord, f_e: &AttributeRecord, cfg: &MatchConfig) -> Result<f64> {
    for r in [f_w, f_e] {
        if r.a_lmk.len() != LANDMARK_COUNT {
            return Err(Error::invalid(format!(
                "{}: a_lmk has {} points, expected {LANDMARK_COUNT}",
                r.face_id,
                r.a_lmk.len()
            )));
        }
    }
    let lmk = mean_abs_diff(f_w.a_lmk.iter().flatten().copied(), f_e.a_lmk.iter().flatten().copied());
    let pose = mean_abs_diff(f_w.a_pose.iter().copied(), f_e.a_pose.iter().copied());
    Ok(cfg.alpha_lmk * lmk + cfg.alpha_pose * pose)
}

pub fn matching_score(f_w: &AttributeRecord, f_e: &AttributeRecord, cfg: &MatchConfig) -> Result<f64> {
    matching_distance(f_w, f_e, cfg).map(|d| -d)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Age/race disagreement penalty subtracted from the score.
pub fn auxiliary_penalty(f_w: &AttributeRecord, f_e: &AttributeRecord, cfg: &MatchConfig) -> Result<f64> {
    for (name, a, b, n) in [
        ("a_age", &f_w.a_age, &f_e.a_age, AGE_CLASSES),
        ("a_race", &f_w.a_race, &f_e.a_race, RACE_CLASSES),
    ] {
        if a.len() != n || b.len() != n {
            return Err(Error::invalid(format!("{name} must have {n} entries")));
        }
    }
    Ok(cfg.beta_age * l1(&f_w.a_age, &f_e.a_age) + cfg.beta_race * l1(&f_w.a_race, &f_e.a_race))
}

/// The selected candidate for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub candidate_index: usize,
    pub xgaze_id: String,
    pub distance: f64,
    pub score: f64,
    pub penalty: f64,
    pub final_score: f64,
    pub mode: SwapMode,
    pub gender_fallback: bool,
}

struct Ranked {
    index: usize,
    distance: f64,
}

fn by_score_then_id<'a>(cands: &'a [AttributeRecord]) -> impl Fn(&Ranked, &Ranked) -> Ordering + 'a {
    move |a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| cands[a.index].face_id.cmp(&cands[b.index].face_id))
    }
}

pub fn retrieve(query: &AttributeRecord, candidates: &[AttributeRecord], cfg: &MatchConfig) -> Result<Retrieval> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::NoMatch(format!("no candidates for {}", query.face_id)));
    }
    let filtered = gender_filter(query, candidates);
    let mut ranked = filtered
        .indices
        .iter()
        .map(|&index| matching_distance(query, &candidates[index], cfg).map(|distance| Ranked { index, distance }))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(by_score_then_id(candidates));
    ranked.truncate(cfg.top_n);

    let mut best: Option<Retrieval> = None;
    for r in ranked {
        let cand = &candidates[r.index];
        let penalty = auxiliary_penalty(query, cand, cfg)?;
        let score = -r.distance;
        let final_score = score - penalty;
        let better = match &best {
            None => true,
            Some(b) => match final_score.total_cmp(&b.final_score) {
                Ordering::Greater => true,
                Ordering::Equal => cand.face_id < b.xgaze_id,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some(Retrieval {
                candidate_index: r.index,
                xgaze_id: cand.face_id.clone(),
                distance: r.distance,
                score,
                penalty,
                final_score,
                mode: SwapMode::for_distance(r.distance, cfg.eye_swap_threshold),
                gender_fallback: filtered.fallback,
            });
        }
    }
    best.ok_or_else(|| Error::NoMatch(format!("no candidates for {}", query.face_id)))
}

/// Retrieves for many queries in parallel; results keep query order.
pub fn retrieve_all(
    queries: &[AttributeRecord],
    candidates: &[AttributeRecord],
    cfg: &MatchConfig,
) -> Vec<Result<Retrieval>> {
    queries.par_iter().map(|q| retrieve(q, candidates, cfg)).collect()
}

/// Exhaustive reference: argmax of `score - penalty` over the gender-filtered
/// pool without any top-n cut. Agrees with [`retrieve`] when
/// `top_n >= candidates.len()`.
pub fn brute_force_retrieve(
    query: &AttributeRecord,
    candidates: &[AttributeRecord],
    cfg: &MatchConfig,
) -> Result<Retrieval> {
    if candidates.is_empty() {
        return Err(Error::NoMatch(format!("no candidates for {}", query.face_id)));
    }
    let filtered = gender_filter(query, candidates);
    let mut best: Option<Retrieval> = None;
    for &i in &filtered.indices {
        let c = &candidates[i];
        let distance = matching_distance(query, c, cfg)?;
        let penalty = auxiliary_penalty(query, c, cfg)?;
        let final_score = -distance - penalty;
        let take = best
            .as_ref()
            .is_none_or(|b| final_score > b.final_score || (final_score == b.final_score && c.face_id < b.xgaze_id));
        if take {
            best = Some(Retrieval {
                candidate_index: i,
                xgaze_id: c.face_id.clone(),
                distance,
                score: -distance,
                penalty,
                final_score,
                mode: SwapMode::for_distance(distance, cfg.eye_swap_threshold),
                gender_fallback: filtered.fallback,
            });
        }
    }
    best.ok_or_else(|| Error::NoMatch(query.face_id.clone()))
}

/// A retrieval together with the query face's saved normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub wider_id: String,
    pub xgaze_id: String,
    pub score: f64,
    pub distance: f64,
    pub mode: SwapMode,
    pub norm: NormalizationResult,
    #[serde(default)]
    pub gender_fallback: bool,
}

impl MatchResult {
    pub fn new(wider_id: impl Into<String>, retrieval: &Retrieval, norm: NormalizationResult) -> Self {
        Self {
            wider_id: wider_id.into(),
            xgaze_id: retrieval.xgaze_id.clone(),
            score: retrieval.final_score,
            distance: retrieval.distance,
            mode: retrieval.mode,
            norm,
            gender_fallback: retrieval.gender_fallback,
        }
    }
}

impl Validate for MatchResult {
    fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        if self.wider_id.is_empty() {
            out.push(ValidationIssue::new("wider_id", "must not be empty"));
        }
        if self.xgaze_id.is_empty() {
            out.push(ValidationIssue::new("xgaze_id", "must not be empty"));
        }
        if !self.distance.is_finite() || self.distance < 0.0 {
            out.push(ValidationIssue::new("distance", "must be finite and >= 0"));
        }
        if !self.score.is_finite() {
            out.push(ValidationIssue::new("score", "must be finite"));
        }
        if let Err(e) = self.norm.validate() {
            out.push(ValidationIssue::new("norm", e.to_string()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_abs_diff_eq;

    fn record(id: &str, gender: [f64; 2]) -> AttributeRecord {
        AttributeRecord {
            face_id: id.into(),
            source: Source::Xgaze,
            a_lmk: vec![[10.0, 20.0]; 68],
            a_pose: [0.0, 0.0],
            a_age: one_hot(9, 0),
            a_race: one_hot(7, 0),
            a_gender: gender.to_vec(),
        }
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn gender_filter_keeps_matching_argmax() {
        let q = record("q", [0.9, 0.1]);
        let c = vec![
            record("a", [0.8, 0.2]),
            record("b", [0.3, 0.7]),
            record("c", [0.6, 0.4]),
        ];
        let f = gender_filter(&q, &c);
        assert_eq!(f.indices, vec![0, 2]);
        assert!(!f.fallback);
    }

    #[test]
    fn gender_filter_falls_back_when_empty() {
        let q = record("q", [0.9, 0.1]);
        let c = vec![record("a", [0.1, 0.9]), record("b", [0.3, 0.7])];
        let f = gender_filter(&q, &c);
        assert_eq!(f.indices, vec![0, 1]);
        assert!(f.fallback);
    }

    #[test]
    fn gender_ties_break_to_first_class() {
        assert_eq!(record("q", [0.5, 0.5]).gender_class(), Some(0));
        let q = record("q", [0.5, 0.5]);
        let c = vec![record("a", [0.5, 0.5]), record("b", [0.4, 0.6])];
        assert_eq!(gender_filter(&q, &c).indices, vec![0]);
    }

    #[test]
    fn distance_examples() {
        let cfg = MatchConfig::default();
        let a = record("a", [1.0, 0.0]);
        assert_eq!(matching_distance(&a, &a, &cfg).unwrap(), 0.0);
        assert_eq!(matching_score(&a, &a, &cfg).unwrap(), 0.0);

        let mut b = a.clone();
        b.a_pose[0] += 2.0;
        let cfg = MatchConfig {
            alpha_lmk: 0.0,
            alpha_pose: 1.0,
            ..MatchConfig::default()
        };
        assert_eq!(matching_distance(&a, &b, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn landmark_term_is_linear_in_weight() {
        let recs = synth::random_attribute_records(2, Source::Wider, 5);
        let one = MatchConfig {
            alpha_lmk: 1.0,
            alpha_pose: 0.0,
            ..MatchConfig::default()
        };
        let two = MatchConfig { alpha_lmk: 2.0, ..one };
        let d1 = matching_distance(&recs[0], &recs[1], &one).unwrap();
        let d2 = matching_distance(&recs[0], &recs[1], &two).unwrap();
        assert_eq!(d2, 2.0 * d1);
    }

    #[test]
    fn missing_landmarks_are_invalid() {
        let a = record("a", [1.0, 0.0]);
        let mut b = a.clone();
        b.a_lmk.pop();
        assert!(matches!(
            matching_distance(&a, &b, &MatchConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn penalty_examples() {
        let a = record("a", [1.0, 0.0]);
        let cfg = MatchConfig::default();
        assert_eq!(auxiliary_penalty(&a, &a, &cfg).unwrap(), 0.0);
        let mut b = a.clone();
        b.a_age = one_hot(9, 4);
        let cfg = MatchConfig {
            beta_age: 1.0,
            beta_race: 0.0,
            ..cfg
        };
        assert_eq!(auxiliary_penalty(&a, &b, &cfg).unwrap(), 2.0);
    }

    #[test]
    fn single_candidate_always_wins() {
        let q = record("q", [1.0, 0.0]);
        let mut c = record("far", [0.0, 1.0]);
        c.a_pose = [80.0, -80.0];
        let r = retrieve(&q, &[c], &MatchConfig::default()).unwrap();
        assert_eq!(r.xgaze_id, "far");
        assert!(r.gender_fallback);
    }

    #[test]
    fn empty_candidates_is_no_match() {
        let q = record("q", [1.0, 0.0]);
        assert!(matches!(
            retrieve(&q, &[], &MatchConfig::default()),
            Err(Error::NoMatch(_))
        ));
    }

    #[test]
    fn penalty_overturns_eq2_winner() {
        // pose distances 1, 2, 3 under alpha_pose = 1 (two-degree pose steps);
        // the closest candidate disagrees on age and race and loses.
        let q = record("q", [1.0, 0.0]);
        let mut near = record("near", [1.0, 0.0]);
        near.a_pose = [2.0, 0.0];
        near.a_age = one_hot(9, 8);
        near.a_race = one_hot(7, 6);
        let mut mid = record("mid", [1.0, 0.0]);
        mid.a_pose = [4.0, 0.0];
        let mut far = record("far", [1.0, 0.0]);
        far.a_pose = [6.0, 0.0];
        let cfg = MatchConfig {
            top_n: 3,
            ..MatchConfig::default()
        };
        // final scores: near -1 - (0.5*2 + 0.5*2) = -3; mid -2; far -3
        let r = retrieve(&q, &[near, mid, far], &cfg).unwrap();
        assert_eq!(r.xgaze_id, "mid");
        assert_abs_diff_eq!(r.final_score, -2.0, epsilon = 1e-12);
        assert_eq!(r.penalty, 0.0);
    }

    #[test]
    fn top_n_cut_applies_before_penalty() {
        let q = record("q", [1.0, 0.0]);
        let mut near = record("near", [1.0, 0.0]);
        near.a_pose = [2.0, 0.0];
        near.a_age = one_hot(9, 8);
        let mut mid = record("mid", [1.0, 0.0]);
        mid.a_pose = [4.0, 0.0];
        let cfg = MatchConfig {
            top_n: 1,
            ..MatchConfig::default()
        };
        assert_eq!(retrieve(&q, &[near, mid], &cfg).unwrap().xgaze_id, "near");
    }

    #[test]
    fn score_ties_break_by_id() {
        let q = record("q", [1.0, 0.0]);
        let c = vec![record("b", [1.0, 0.0]), record("a", [1.0, 0.0])];
        let r = retrieve(&q, &c, &MatchConfig::default()).unwrap();
        assert_eq!(r.xgaze_id, "a");
        assert_eq!(r.candidate_index, 1);
    }

    #[test]
    fn mode_flips_at_threshold() {
        assert_eq!(SwapMode::for_distance(1.999, 2.0), SwapMode::Eyes);
        assert_eq!(SwapMode::for_distance(2.0, 2.0), SwapMode::Full);
        assert_eq!(SwapMode::for_distance(2.001, 2.0), SwapMode::Full);
    }

    #[test]
    fn validation_names_fields() {
        let mut r = record("x", [0.5, 0.4]);
        r.a_age = vec![0.1; 9];
        let issues = r.validate();
        let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
        assert_eq!(fields, vec!["a_age", "a_gender"]);
    }

    #[test]
    fn config_validation() {
        assert!(MatchConfig::default().validate().is_ok());
        assert!(MatchConfig {
            top_n: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MatchConfig {
            beta_age: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn retrieve_all_keeps_order() {
        let qs = synth::random_attribute_records(8, Source::Wider, 1);
        let cs = synth::random_attribute_records(30, Source::Xgaze, 2);
        let cfg = MatchConfig::default();
        let all = retrieve_all(&qs, &cs, &cfg);
        for (q, r) in qs.iter().zip(all) {
            assert_eq!(r.unwrap(), retrieve(q, &cs, &cfg).unwrap());
        }
    }
}
