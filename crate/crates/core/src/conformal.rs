//! APS conformity scores, split-conformal calibration and prediction sets.
//!
//! The APS score of label `y` is the probability mass of all classes ranked
//! at or above `y` when classes are sorted by descending probability (ties by
//! ascending class index). The randomized variant subtracts `u * p_y` with
//! `u ~ U[0, 1]`.
//!
//! Calibration takes the `ceil((n + 1)(1 - alpha))`-th smallest calibration
//! score as the threshold `tau`; when that rank exceeds `n` the threshold
//! saturates at 1 and every set is the full label set. A prediction set holds
//! every label whose score is `<= tau`; if that leaves it empty the argmax
//! class is added, so sets are never empty.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, LabeledDataset, PredictionRecord};
use crate::error::{Error, Result};
use crate::rng;

/// How scores are computed and at which miscoverage level to calibrate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub alpha: f64,
    #[serde(default)]
    pub randomized: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ScoreConfig {
    pub fn deterministic(alpha: f64) -> Self {
        Self {
            alpha,
            randomized: false,
            seed: 0,
        }
    }

    pub fn randomized(alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            randomized: true,
            seed,
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Weighted,
    Mondrian,
}

/// How calibration records are grouped for Mondrian calibration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// One threshold per true class, applied per candidate label.
    ByClass,
    /// One threshold per value of a group attribute.
    ByGroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellThreshold {
    pub tau: f64,
    pub n: usize,
}

/// A fitted conformal threshold (or one per partition cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Threshold in score units. For Mondrian results this is the largest
    /// per-cell threshold.
    pub tau: f64,
    pub n_cal: usize,
    pub alpha: f64,
    pub variant: Variant,
    #[serde(default)]
    pub randomized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Partition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_thresholds: Option<BTreeMap<String, CellThreshold>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_used: Option<Vec<f64>>,
}

/// The set-valued prediction for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPredictionSet")]
pub struct PredictionSet {
    pub record_id: String,
    members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_of_label: Option<f64>,
}

#[derive(Deserialize)]
struct RawPredictionSet {
    record_id: String,
    members: Vec<usize>,
    #[serde(default)]
    score_of_label: Option<f64>,
}

impl TryFrom<RawPredictionSet> for PredictionSet {
    type Error = Error;

    fn try_from(raw: RawPredictionSet) -> Result<Self> {
        PredictionSet::new(raw.record_id, raw.members, raw.score_of_label)
    }
}

impl PredictionSet {
    /// `members` is sorted and deduplicated; it must not be empty.
    pub fn new(
        record_id: impl Into<String>,
        mut members: Vec<usize>,
        score_of_label: Option<f64>,
    ) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::Empty("prediction set members"));
        }
        Ok(Self {
            record_id: record_id.into(),
            members,
            score_of_label,
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }
}

/// Class indices sorted by descending probability, ascending index on ties.
pub fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// APS scores of every candidate label, indexed by class.
///
/// All scoring goes through this function so calibration and set
/// construction use bit-identical sums.
pub fn aps_scores(probs: &[f64], u: Option<f64>) -> Vec<f64> {
    let mut scores = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for c in descending_order(probs) {
        cum += probs[c];
        let s = match u {
            Some(u) => cum - u.clamp(0.0, 1.0) * probs[c],
            None => cum,
        };
        scores[c] = s.clamp(0.0, 1.0);
    }
    scores
}

/// APS conformity score of `label`.
pub fn aps_score(probs: &[f64], label: usize, u: Option<f64>) -> f64 {
    aps_scores(probs, u)[label]
}

/// `ceil((n + 1)(1 - alpha))`, at least 1. The product is nudged down by a
/// relative 1e-12 so representation error in `1 - alpha` cannot push an exact
/// integer up by one.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let m = (n + 1) as f64;
    let x = m * (1.0 - alpha) - m * 1e-12;
    (libm::ceil(x) as usize).max(1)
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::NonFiniteScore(i)),
        None => Ok(()),
    }
}

/// Threshold from an unsorted score list.
fn quantile_threshold(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let rank = conformal_rank(n, alpha);
    if rank > n {
        return 1.0;
    }
    let mut buf = scores.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *nth
}

/// Plain split-conformal calibration.
pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    check_scores(scores)?;
    Ok(CalibrationResult {
        tau: quantile_threshold(scores, alpha),
        n_cal: scores.len(),
        alpha,
        variant: Variant::Plain,
        randomized: false,
        partition: None,
        partition_thresholds: None,
        weights_used: None,
    })
}

/// Weighted split-conformal calibration.
///
/// `tau` is the smallest calibration score `t` with
/// `sum(w_i : s_i <= t) / (sum(w) + max(w)) >= 1 - alpha`, or 1 if no score
/// qualifies. The `max(w)` term stands in for the unknown weight of the test
/// point. With equal weights this is exactly [`calibrate`].
pub fn weighted_calibrate(scores: &[f64], weights: &[f64], alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    check_scores(scores)?;
    if scores.len() != weights.len() {
        return Err(Error::LengthMismatch {
            scores: scores.len(),
            weights: weights.len(),
        });
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        return Err(Error::NonPositiveWeight { index, value });
    }

    let total: f64 = weights.iter().sum();
    let w_max = weights.iter().copied().fold(0.0, f64::max);
    let denom = total + w_max;
    let needed = denom * (1.0 - alpha) - denom * 1e-12;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut tau = 1.0;
    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        cum += weights[i];
        let tied_with_next = order
            .get(pos + 1)
            .is_some_and(|&j| scores[j].total_cmp(&scores[i]) == Ordering::Equal);
        if !tied_with_next && cum >= needed {
            tau = scores[i];
            break;
        }
    }

    Ok(CalibrationResult {
        tau,
        n_cal: scores.len(),
        alpha,
        variant: Variant::Weighted,
        randomized: false,
        partition: None,
        partition_thresholds: None,
        weights_used: Some(weights.to_vec()),
    })
}

/// Per-record randomization draws for a dataset, or `None` for the
/// deterministic variant.
pub fn draw_u(n: usize, randomized: bool, seed: u64, stream: u64) -> Option<Vec<f64>> {
    randomized.then(|| {
        let mut rng = rng::stream(seed, stream);
        (0..n).map(|_| rng.random::<f64>()).collect()
    })
}

/// APS score of each calibration record's true label.
pub fn calibration_scores(ds: &LabeledDataset, cfg: &ScoreConfig) -> Vec<f64> {
    let u = draw_u(ds.len(), cfg.randomized, cfg.seed, rng::CALIBRATION_U_STREAM);
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| aps_score(r.probs(), r.label(), u.as_ref().map(|u| u[i])))
        .collect()
}

/// Plain calibration on a labeled calibration set.
pub fn calibrate_dataset(cal: &LabeledDataset, cfg: &ScoreConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let mut result = calibrate(&calibration_scores(cal, cfg), cfg.alpha)?;
    result.randomized = cfg.randomized;
    Ok(result)
}

/// Weighted calibration with one weight per class (e.g. label-shift
/// importance weights). Records whose class weight is zero carry no mass and
/// are dropped.
pub fn weighted_calibrate_dataset(
    cal: &LabeledDataset,
    class_weights: &[f64],
    cfg: &ScoreConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    if class_weights.len() != cal.num_classes() {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} classes",
            class_weights.len(),
            cal.num_classes()
        )));
    }
    let scores = calibration_scores(cal, cfg);
    let (kept_scores, weights): (Vec<f64>, Vec<f64>) = cal
        .records()
        .iter()
        .zip(scores)
        .map(|(r, s)| (s, class_weights[r.label()]))
        .filter(|&(_, w)| w != 0.0)
        .unzip();
    let mut result = weighted_calibrate(&kept_scores, &weights, cfg.alpha)?;
    result.randomized = cfg.randomized;
    Ok(result)
}

fn partition_key(record: &PredictionRecord, partition: &Partition) -> Result<String> {
    match partition {
        Partition::ByClass => Ok(record.label().to_string()),
        Partition::ByGroup(attr) => record
            .group(attr)
            .map(ToString::to_string)
            .ok_or_else(|| Error::MissingGroup(record.id().to_string())),
    }
}

/// Mondrian calibration: one plain threshold per partition cell.
///
/// With [`Partition::ByClass`] every class must have calibration records.
pub fn mondrian_calibrate(
    cal: &LabeledDataset,
    partition: &Partition,
    cfg: &ScoreConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    if cal.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let scores = calibration_scores(cal, cfg);
    let mut cells: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if let Partition::ByClass = partition {
        for k in 0..cal.num_classes() {
            cells.insert(k.to_string(), Vec::new());
        }
    }
    for (r, s) in cal.records().iter().zip(&scores) {
        cells.entry(partition_key(r, partition)?).or_default().push(*s);
    }

    let mut thresholds = BTreeMap::new();
    for (key, cell_scores) in cells {
        if cell_scores.is_empty() {
            let name = match partition {
                Partition::ByClass => format!("class {key}"),
                Partition::ByGroup(attr) => format!("{attr}={key}"),
            };
            return Err(Error::EmptyCell(name));
        }
        let tau = quantile_threshold(&cell_scores, cfg.alpha);
        thresholds.insert(key, CellThreshold { tau, n: cell_scores.len() });
    }
    let tau = thresholds.values().map(|c| c.tau).fold(0.0, f64::max);

    Ok(CalibrationResult {
        tau,
        n_cal: cal.len(),
        alpha: cfg.alpha,
        variant: Variant::Mondrian,
        randomized: cfg.randomized,
        partition: Some(partition.clone()),
        partition_thresholds: Some(thresholds),
        weights_used: None,
    })
}

#[inline]
pub(crate) fn admits(score: f64, tau: f64) -> bool {
    tau >= 1.0 || score <= tau
}

/// Labels admitted by `tau`, with the argmax forced in when none are.
pub(crate) fn members_at(probs: &[f64], scores: &[f64], tau: f64) -> Vec<usize> {
    let mut members: Vec<usize> = (0..scores.len()).filter(|&y| admits(scores[y], tau)).collect();
    if members.is_empty() {
        members.push(argmax(probs));
    }
    members
}

fn cell<'a>(calib: &'a CalibrationResult, key: &str) -> Result<&'a CellThreshold> {
    calib
        .partition_thresholds
        .as_ref()
        .and_then(|t| t.get(key))
        .ok_or_else(|| Error::UnknownPartitionKey(key.to_string()))
}

/// Builds the prediction set for one probability vector. `key` selects the
/// cell for group-partitioned Mondrian calibrations and is ignored otherwise.
pub fn predict_set(
    probs: &[f64],
    calib: &CalibrationResult,
    key: Option<&str>,
    u: Option<f64>,
) -> Result<PredictionSet> {
    let scores = aps_scores(probs, u);
    let members = match (&calib.variant, &calib.partition) {
        (Variant::Mondrian, Some(Partition::ByClass)) => {
            let mut members = Vec::new();
            for (y, &s) in scores.iter().enumerate() {
                if admits(s, cell(calib, &y.to_string())?.tau) {
                    members.push(y);
                }
            }
            if members.is_empty() {
                members.push(argmax(probs));
            }
            members
        }
        (Variant::Mondrian, _) => {
            let key = key.ok_or(Error::MissingPartitionKey)?;
            members_at(probs, &scores, cell(calib, key)?.tau)
        }
        _ => members_at(probs, &scores, calib.tau),
    };
    Ok(PredictionSet {
        record_id: String::new(),
        members,
        score_of_label: None,
    })
}

/// Prediction set for a record, filling in its id, its partition key and the
/// score of its true label.
pub fn predict_record(
    record: &PredictionRecord,
    calib: &CalibrationResult,
    u: Option<f64>,
) -> Result<PredictionSet> {
    let key = match &calib.partition {
        Some(p @ Partition::ByGroup(_)) if calib.variant == Variant::Mondrian => {
            Some(partition_key(record, p)?)
        }
        _ => None,
    };
    let mut set = predict_set(record.probs(), calib, key.as_deref(), u)?;
    set.record_id = record.id().to_string();
    set.score_of_label = Some(aps_score(record.probs(), record.label(), u));
    Ok(set)
}

/// Prediction sets for every record of `ds`, in order. Randomized
/// calibrations draw one `u` per record from `seed`.
pub fn predict_sets(
    ds: &LabeledDataset,
    calib: &CalibrationResult,
    seed: u64,
) -> Result<Vec<PredictionSet>> {
    let u = draw_u(ds.len(), calib.randomized, seed, rng::PREDICTION_U_STREAM);
    ds.records()
        .iter()
        .enumerate()
        .map(|(i, r)| predict_record(r, calib, u.as_ref().map(|u| u[i])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledDataset, PredictionRecord};
    use proptest::prelude::*;

    fn rec(id: &str, probs: &[f64], label: usize) -> PredictionRecord {
        PredictionRecord::new(id, probs.to_vec(), label, BTreeMap::new()).unwrap()
    }

    /// Brute force: smallest integer rank r with r >= (n+1)(1-alpha), by scan.
    fn oracle_tau(scores: &[f64], alpha: f64) -> f64 {
        let n = scores.len();
        let target = (n + 1) as f64 * (1.0 - alpha);
        let mut r = 1;
        while (r as f64) < target - (n + 1) as f64 * 1e-12 {
            r += 1;
        }
        if r > n {
            return 1.0;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[r - 1]
    }

    #[test]
    fn aps_score_examples() {
        assert!((aps_score(&[0.6, 0.3, 0.1], 1, None) - 0.9).abs() < 1e-12);
        assert_eq!(aps_score(&[0.0, 1.0, 0.0], 1, None), 1.0);
        assert!((aps_score(&[0.6, 0.3, 0.1], 0, Some(0.5)) - 0.3).abs() < 1e-12);
        // ties go to the lower index first
        assert!((aps_score(&[0.4, 0.4, 0.2], 0, None) - 0.4).abs() < 1e-12);
        assert!((aps_score(&[0.4, 0.4, 0.2], 1, None) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate(&[0.1, 0.2, 0.3, 0.4], 0.5).unwrap();
        assert_eq!(c.tau, 0.3);
        assert_eq!(c.n_cal, 4);
        assert_eq!(calibrate(&[0.1, 0.2, 0.3, 0.4], 0.1).unwrap().tau, 1.0);
        assert_eq!(calibrate(&[0.7], 0.6).unwrap().tau, 0.7);
    }

    #[test]
    fn calibrate_errors() {
        assert_eq!(calibrate(&[], 0.1).unwrap_err(), Error::Empty("calibration scores"));
        assert_eq!(calibrate(&[0.1], 0.0).unwrap_err(), Error::InvalidAlpha(0.0));
        assert_eq!(calibrate(&[0.1], 1.0).unwrap_err(), Error::InvalidAlpha(1.0));
        assert_eq!(calibrate(&[0.1, f64::NAN], 0.2).unwrap_err(), Error::NonFiniteScore(1));
    }

    #[test]
    fn rank_is_exact_on_integer_products() {
        // (n+1)(1-alpha) lands on an integer: rank must not round up past it
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(99, 0.3), 70);
        assert_eq!(conformal_rank(19, 0.05), 19);
        assert_eq!(conformal_rank(500, 0.1), 451);
        assert_eq!(conformal_rank(1, 0.99), 1);
    }

    #[test]
    fn weighted_examples() {
        let s = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(weighted_calibrate(&s, &[1.0; 4], 0.5).unwrap().tau, 0.3);
        assert_eq!(weighted_calibrate(&[0.7], &[3.5], 0.6).unwrap().tau, 0.7);
        assert_eq!(
            weighted_calibrate(&s, &[1.0, 0.0, 1.0, 1.0], 0.5).unwrap_err(),
            Error::NonPositiveWeight { index: 1, value: 0.0 }
        );
        assert!(matches!(
            weighted_calibrate(&s, &[1.0; 3], 0.5),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(weighted_calibrate(&[], &[], 0.5).is_err());
    }

    /// Brute-force weighted quantile: try every candidate score.
    fn oracle_weighted(scores: &[f64], weights: &[f64], alpha: f64) -> f64 {
        let total: f64 = weights.iter().sum();
        let w_max = weights.iter().copied().fold(0.0, f64::max);
        let denom = total + w_max;
        let mut best = 1.0;
        let mut found = false;
        for &t in scores {
            let mass: f64 = scores
                .iter()
                .zip(weights)
                .filter(|(s, _)| **s <= t)
                .map(|(_, w)| *w)
                .sum();
            if mass / denom >= (1.0 - alpha) - 1e-12 && (!found || t < best) {
                best = t;
                found = true;
            }
        }
        best
    }

    #[test]
    fn weighted_upweighting_moves_tau_toward_region() {
        // low region [0.1, 0.3], high region [0.7, 0.9]
        let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9, 0.15, 0.25, 0.75, 0.85];
        let low: Vec<f64> = scores.iter().map(|&s| if s < 0.5 { 2.0 } else { 1.0 }).collect();
        let high: Vec<f64> = scores.iter().map(|&s| if s > 0.5 { 2.0 } else { 1.0 }).collect();
        let t_low = weighted_calibrate(&scores, &low, 0.5).unwrap().tau;
        let t_eq = weighted_calibrate(&scores, &[1.0; 10], 0.5).unwrap().tau;
        let t_high = weighted_calibrate(&scores, &high, 0.5).unwrap().tau;
        assert!(t_low <= t_eq && t_eq <= t_high);
        assert!(t_low < t_high);
        assert_eq!(t_low, oracle_weighted(&scores, &low, 0.5));
        assert_eq!(t_high, oracle_weighted(&scores, &high, 0.5));
    }

    proptest! {
        #[test]
        fn calibrate_matches_sort_and_index(
            scores in prop::collection::vec(0.0f64..1.0, 1..200),
            alpha in 0.001f64..0.999,
        ) {
            prop_assert_eq!(calibrate(&scores, alpha).unwrap().tau, oracle_tau(&scores, alpha));
        }

        #[test]
        fn weighted_matches_brute_force(
            pairs in prop::collection::vec((0.0f64..1.0, 0.1f64..5.0), 1..60),
            alpha in 0.01f64..0.99,
        ) {
            let (scores, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let got = weighted_calibrate(&scores, &weights, alpha).unwrap().tau;
            prop_assert_eq!(got, oracle_weighted(&scores, &weights, alpha));
        }

        #[test]
        fn weighted_reduces_to_plain(
            scores in prop::collection::vec(0.0f64..1.0, 1..200),
            alpha in 0.001f64..0.999,
            exp in 0i32..4,
        ) {
            let w = vec![libm::pow(2.0, exp as f64); scores.len()];
            prop_assert_eq!(
                weighted_calibrate(&scores, &w, alpha).unwrap().tau,
                calibrate(&scores, alpha).unwrap().tau
            );
        }

        #[test]
        fn sets_are_nested_prefixes(
            raw in prop::collection::vec(0.01f64..1.0, 2..9),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
            cal in prop::collection::vec(0.0f64..1.0, 1..80),
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let c_lo = calibrate(&cal, lo).unwrap();
            let c_hi = calibrate(&cal, hi).unwrap();
            prop_assert!(c_lo.tau >= c_hi.tau);
            let big = predict_set(&probs, &c_lo, None, None).unwrap();
            let small = predict_set(&probs, &c_hi, None, None).unwrap();
            prop_assert!(small.members().iter().all(|m| big.contains(*m)));
            // deterministic sets are prefixes of the descending order
            let order = descending_order(&probs);
            let mut prefix = order[..big.len()].to_vec();
            prefix.sort_unstable();
            prop_assert_eq!(prefix, big.members().to_vec());
        }

        #[test]
        fn randomized_scores_in_unit_interval(
            raw in prop::collection::vec(0.0f64..1.0, 2..9),
            u in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            for y in 0..probs.len() {
                let s = aps_score(&probs, y, Some(u));
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!(s <= aps_score(&probs, y, None));
            }
        }
    }

    fn result_with_tau(tau: f64) -> CalibrationResult {
        CalibrationResult {
            tau,
            n_cal: 10,
            alpha: 0.1,
            variant: Variant::Plain,
            randomized: false,
            partition: None,
            partition_thresholds: None,
            weights_used: None,
        }
    }

    #[test]
    fn predict_set_examples() {
        let p = [0.6, 0.3, 0.1];
        assert_eq!(predict_set(&p, &result_with_tau(0.9), None, None).unwrap().members(), &[0, 1]);
        assert_eq!(predict_set(&p, &result_with_tau(1.0), None, None).unwrap().members(), &[0, 1, 2]);
        assert_eq!(predict_set(&p, &result_with_tau(0.2), None, None).unwrap().members(), &[0]);
        // argmax is not class 0
        let q = [0.1, 0.2, 0.7];
        assert_eq!(predict_set(&q, &result_with_tau(0.05), None, None).unwrap().members(), &[2]);
    }

    fn dataset(records: Vec<PredictionRecord>, k: usize) -> LabeledDataset {
        LabeledDataset::with_default_names(records, k).unwrap()
    }

    #[test]
    fn mondrian_by_class_matches_per_cell_quantiles() {
        // class 0 scores around 0.5-0.6, class 1 scores around 0.9-1.0
        let mut records = Vec::new();
        let mut s0 = Vec::new();
        let mut s1 = Vec::new();
        for i in 0..20 {
            let p = 0.5 + 0.005 * i as f64;
            let r = rec(&format!("a{i}"), &[p, 1.0 - p], 0);
            s0.push(aps_score(r.probs(), 0, None));
            records.push(r);
            let q = 0.9 + 0.004 * i as f64;
            let r = rec(&format!("b{i}"), &[q, 1.0 - q], 1);
            s1.push(aps_score(r.probs(), 1, None));
            records.push(r);
        }
        let ds = dataset(records, 2);
        let cfg = ScoreConfig::deterministic(0.2);
        let m = mondrian_calibrate(&ds, &Partition::ByClass, &cfg).unwrap();
        let cells = m.partition_thresholds.as_ref().unwrap();
        assert_eq!(cells["0"].tau, oracle_tau(&s0, 0.2));
        assert_eq!(cells["1"].tau, oracle_tau(&s1, 0.2));
        assert_eq!(cells["0"].n, 20);
        assert_eq!(m.variant, Variant::Mondrian);
    }

    #[test]
    fn mondrian_single_cell_equals_plain() {
        let mut records = Vec::new();
        for i in 0..30 {
            let p = 0.3 + 0.02 * i as f64;
            let mut g = BTreeMap::new();
            g.insert("site".to_string(), "A".to_string());
            records.push(PredictionRecord::new(format!("r{i}"), vec![p, 1.0 - p], i % 2, g).unwrap());
        }
        let ds = dataset(records, 2);
        let cfg = ScoreConfig::deterministic(0.1);
        let m = mondrian_calibrate(&ds, &Partition::ByGroup("site".into()), &cfg).unwrap();
        let plain = calibrate_dataset(&ds, &cfg).unwrap();
        assert_eq!(m.partition_thresholds.as_ref().unwrap()["A"].tau, plain.tau);
        assert_eq!(m.tau, plain.tau);

        let r = &ds.records()[3];
        assert_eq!(
            predict_record(r, &m, None).unwrap().members(),
            predict_record(r, &plain, None).unwrap().members()
        );
        assert_eq!(
            predict_set(r.probs(), &m, None, None).unwrap_err(),
            Error::MissingPartitionKey
        );
        assert_eq!(
            predict_set(r.probs(), &m, Some("B"), None).unwrap_err(),
            Error::UnknownPartitionKey("B".into())
        );
    }

    #[test]
    fn mondrian_reports_empty_cell() {
        let records = vec![rec("a", &[0.6, 0.3, 0.1], 0), rec("b", &[0.2, 0.7, 0.1], 1)];
        let ds = dataset(records, 3);
        let err = mondrian_calibrate(&ds, &Partition::ByClass, &ScoreConfig::deterministic(0.1)).unwrap_err();
        assert_eq!(err, Error::EmptyCell("class 2".into()));
    }

    #[test]
    fn mondrian_group_requires_attribute() {
        let records = vec![rec("a", &[0.6, 0.4], 0)];
        let ds = dataset(records, 2);
        let err = mondrian_calibrate(&ds, &Partition::ByGroup("site".into()), &ScoreConfig::deterministic(0.1))
            .unwrap_err();
        assert_eq!(err, Error::MissingGroup("a".into()));
    }

    #[test]
    fn weighted_dataset_drops_zero_weight_classes() {
        let records = vec![
            rec("a", &[0.9, 0.1], 0),
            rec("b", &[0.6, 0.4], 0),
            rec("c", &[0.3, 0.7], 1),
        ];
        let ds = dataset(records, 2);
        let c = weighted_calibrate_dataset(&ds, &[1.0, 0.0], &ScoreConfig::deterministic(0.4)).unwrap();
        assert_eq!(c.n_cal, 2);
        assert_eq!(c.weights_used.as_deref(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn predict_record_fills_metadata() {
        let r = rec("x7", &[0.6, 0.3, 0.1], 1);
        let s = predict_record(&r, &result_with_tau(0.95), None).unwrap();
        assert_eq!(s.record_id, "x7");
        assert!((s.score_of_label.unwrap() - 0.9).abs() < 1e-12);
        assert!(s.contains(1));
    }

    #[test]
    fn prediction_set_rejects_empty() {
        assert!(PredictionSet::new("a", vec![], None).is_err());
        let s = PredictionSet::new("a", vec![2, 0, 2], None).unwrap();
        assert_eq!(s.members(), &[0, 2]);
    }

    #[test]
    fn randomized_calibration_is_seeded() {
        let records: Vec<_> = (0..50)
            .map(|i| {
                let p = 0.2 + 0.012 * i as f64;
                rec(&format!("r{i}"), &[p, 1.0 - p], i % 2)
            })
            .collect();
        let ds = dataset(records, 2);
        let a = calibrate_dataset(&ds, &ScoreConfig::randomized(0.1, 5)).unwrap();
        let b = calibrate_dataset(&ds, &ScoreConfig::randomized(0.1, 5)).unwrap();
        assert_eq!(a, b);
        assert!(a.randomized);
        let sa = predict_sets(&ds, &a, 9).unwrap();
        let sb = predict_sets(&ds, &b, 9).unwrap();
        assert_eq!(sa, sb);
    }
}
