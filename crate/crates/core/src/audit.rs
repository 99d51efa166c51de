//! Stratified coverage and efficiency measurements.
//!
//! Marginal coverage can look perfect while individual classes, groups or set
//! sizes are badly over- or under-covered. Reports here break coverage down
//! along every stratum the data carries, each with an exact 95% interval.
//! Strata with no records are left out rather than reported as zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bounds::clopper_pearson;
use crate::conformal::{
    aps_scores, calibration_scores, check_alpha, conformal_rank, draw_u, members_at,
    PredictionSet, ScoreConfig,
};
use crate::data::{LabeledDataset, Taxonomy};
use crate::error::{Error, Result};
use crate::rng;

/// Confidence level of every interval in a [`CoverageReport`].
pub const INTERVAL_CONFIDENCE: f64 = 0.95;

/// Empirical coverage of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStat {
    pub n: usize,
    pub covered: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoverageStat {
    pub fn from_counts(covered: usize, n: usize) -> Self {
        let (lower, upper) =
            clopper_pearson(covered, n, INTERVAL_CONFIDENCE).unwrap_or((0.0, 1.0));
        let rate = if n == 0 { 0.0 } else { covered as f64 / n as f64 };
        Self {
            n,
            covered,
            rate,
            lower,
            upper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub mean_size: f64,
    pub fraction_singleton: f64,
    pub fraction_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub marginal: CoverageStat,
    pub per_class: BTreeMap<usize, CoverageStat>,
    /// Keyed `attribute=value`.
    pub per_group: BTreeMap<String, CoverageStat>,
    pub per_set_size: BTreeMap<usize, CoverageStat>,
    pub efficiency: Efficiency,
}

/// One row of the tidy export of a [`CoverageReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub stratum: String,
    pub key: String,
    pub n: usize,
    pub covered: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoverageReport {
    /// Flat rows, one per stratum: marginal, then classes, groups, set sizes.
    pub fn rows(&self) -> Vec<StratumRow> {
        let row = |stratum: &str, key: String, s: &CoverageStat| StratumRow {
            stratum: stratum.to_string(),
            key,
            n: s.n,
            covered: s.covered,
            rate: s.rate,
            lower: s.lower,
            upper: s.upper,
        };
        let mut rows = Vec::new();
        rows.push(row("marginal", "all".to_string(), &self.marginal));
        rows.extend(self.per_class.iter().map(|(k, s)| row("class", k.to_string(), s)));
        rows.extend(self.per_group.iter().map(|(k, s)| row("group", k.clone(), s)));
        rows.extend(self.per_set_size.iter().map(|(k, s)| row("set_size", k.to_string(), s)));
        rows
    }

    /// Lowest per-class coverage rate and its class.
    pub fn worst_class(&self) -> Option<(usize, f64)> {
        self.per_class
            .iter()
            .map(|(&k, s)| (k, s.rate))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

fn check_alignment(sets: &[PredictionSet], ds: &LabeledDataset) -> Result<()> {
    if sets.len() != ds.len() {
        return Err(Error::Misaligned(format!(
            "{} sets for {} records",
            sets.len(),
            ds.len()
        )));
    }
    let k = ds.num_classes();
    for (i, (s, r)) in sets.iter().zip(ds.records()).enumerate() {
        if !s.record_id.is_empty() && s.record_id != r.id() {
            return Err(Error::Misaligned(format!(
                "position {i}: set for {} but record {}",
                s.record_id,
                r.id()
            )));
        }
        if s.members().iter().any(|&m| m >= k) {
            return Err(Error::Misaligned(format!(
                "set for {} names a class outside 0..{k}",
                r.id()
            )));
        }
    }
    Ok(())
}

#[derive(Default)]
struct Tally {
    covered: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.n += 1;
        self.covered += usize::from(hit);
    }

    fn stat(&self) -> CoverageStat {
        CoverageStat::from_counts(self.covered, self.n)
    }
}

/// Coverage of `sets` against the true labels in `ds`, stratified by class,
/// group attribute value and set size.
pub fn coverage_report(
    sets: &[PredictionSet],
    ds: &LabeledDataset,
    alpha: f64,
) -> Result<CoverageReport> {
    check_alpha(alpha)?;
    check_alignment(sets, ds)?;
    let k = ds.num_classes();
    let mut marginal = Tally::default();
    let mut per_class: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut per_group: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_size: BTreeMap<usize, Tally> = BTreeMap::new();
    let (mut size_sum, mut singles, mut full) = (0usize, 0usize, 0usize);

    for (s, r) in sets.iter().zip(ds.records()) {
        let hit = s.contains(r.label());
        marginal.add(hit);
        per_class.entry(r.label()).or_default().add(hit);
        for (attr, value) in r.groups() {
            per_group.entry(format!("{attr}={value}")).or_default().add(hit);
        }
        per_size.entry(s.len()).or_default().add(hit);
        size_sum += s.len();
        singles += usize::from(s.len() == 1);
        full += usize::from(s.len() == k);
    }

    let n = sets.len().max(1) as f64;
    Ok(CoverageReport {
        alpha,
        marginal: marginal.stat(),
        per_class: per_class.into_iter().map(|(k, t)| (k, t.stat())).collect(),
        per_group: per_group.into_iter().map(|(k, t)| (k, t.stat())).collect(),
        per_set_size: per_size.into_iter().map(|(k, t)| (k, t.stat())).collect(),
        efficiency: Efficiency {
            mean_size: size_sum as f64 / n,
            fraction_singleton: singles as f64 / n,
            fraction_full: full as f64 / n,
        },
    })
}

/// Coverage rate per set size; sizes that never occur are absent.
pub fn set_size_coverage(sets: &[PredictionSet], ds: &LabeledDataset) -> Result<BTreeMap<usize, f64>> {
    check_alignment(sets, ds)?;
    let mut per_size: BTreeMap<usize, Tally> = BTreeMap::new();
    for (s, r) in sets.iter().zip(ds.records()) {
        per_size.entry(s.len()).or_default().add(s.contains(r.label()));
    }
    Ok(per_size
        .into_iter()
        .map(|(size, t)| (size, t.covered as f64 / t.n as f64))
        .collect())
}

/// Prediction sets mapped through a taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collapsed {
    /// Members are superclass indices.
    pub sets: Vec<PredictionSet>,
    /// Fraction of collapsed sets naming exactly one superclass.
    pub informativeness: f64,
}

/// Maps each set's classes to superclasses, removing duplicates.
pub fn superclass_collapse(sets: &[PredictionSet], taxonomy: &Taxonomy) -> Result<Collapsed> {
    let mut out = Vec::with_capacity(sets.len());
    let mut informative = 0usize;
    for s in sets {
        let members = s
            .members()
            .iter()
            .map(|&c| taxonomy.superclass(c).ok_or(Error::MissingSuperclass(c)))
            .collect::<Result<Vec<usize>>>()?;
        let collapsed = PredictionSet::new(s.record_id.clone(), members, s.score_of_label)?;
        informative += usize::from(collapsed.len() == 1);
        out.push(collapsed);
    }
    let informativeness = if sets.is_empty() {
        0.0
    } else {
        informative as f64 / sets.len() as f64
    };
    Ok(Collapsed {
        sets: out,
        informativeness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub target: f64,
    pub alpha: f64,
    pub tau: f64,
    pub empirical: f64,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// In strictly increasing target coverage.
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub target: f64,
    pub alpha: f64,
    pub fraction_singleton: f64,
    pub mean_size: f64,
    /// Collapsed informativeness, when the evaluation set has a taxonomy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub informativeness: Option<f64>,
}

/// `points` target coverages evenly spaced from `accuracy` to 0.999.
pub fn default_target_grid(accuracy: f64, points: usize) -> Vec<f64> {
    const TOP: f64 = 0.999;
    let start = accuracy.clamp(0.001, TOP);
    if points <= 1 || start >= TOP {
        return alloc::vec![TOP];
    }
    let step = (TOP - start) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| start + step * i as f64).collect();
    grid[points - 1] = TOP;
    grid.dedup();
    grid
}

/// Sorts an alpha grid into increasing target coverage and validates it.
fn target_order(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::InvalidGrid("alpha grid is empty".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidGrid("duplicate alpha values".into()));
    }
    Ok(sorted)
}

/// Calibration scores sorted once, evaluation scores computed once, then
/// sets rebuilt per threshold. Randomization draws are shared across the
/// sweep so sets stay nested.
pub(crate) struct Sweep<'a> {
    sorted_cal: Vec<f64>,
    eval: &'a LabeledDataset,
    eval_scores: Vec<Vec<f64>>,
}

impl<'a> Sweep<'a> {
    pub(crate) fn new(cal: &LabeledDataset, eval: &'a LabeledDataset, cfg: &ScoreConfig) -> Result<Self> {
        if cal.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        if eval.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut sorted_cal = calibration_scores(cal, cfg);
        sorted_cal.sort_by(f64::total_cmp);
        let u = draw_u(eval.len(), cfg.randomized, cfg.seed, rng::PREDICTION_U_STREAM);
        let eval_scores = eval
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| aps_scores(r.probs(), u.as_ref().map(|u| u[i])))
            .collect();
        Ok(Self {
            sorted_cal,
            eval,
            eval_scores,
        })
    }

    pub(crate) fn tau(&self, alpha: f64) -> f64 {
        let n = self.sorted_cal.len();
        let rank = conformal_rank(n, alpha);
        if rank > n {
            1.0
        } else {
            self.sorted_cal[rank - 1]
        }
    }

    pub(crate) fn sets(&self, tau: f64) -> Vec<PredictionSet> {
        self.eval
            .records()
            .iter()
            .zip(&self.eval_scores)
            .map(|(r, scores)| {
                PredictionSet::new(r.id(), members_at(r.probs(), scores, tau), Some(scores[r.label()]))
                    .expect("members_at never returns an empty set")
            })
            .collect()
    }
}

/// Empirical coverage against target coverage over an alpha grid.
pub fn calibration_curve(
    cal: &LabeledDataset,
    eval: &LabeledDataset,
    alphas: &[f64],
    cfg: &ScoreConfig,
) -> Result<CalibrationCurve> {
    let order = target_order(alphas)?;
    let sweep = Sweep::new(cal, eval, cfg)?;
    let n = eval.len() as f64;
    let points = order
        .into_iter()
        .map(|alpha| {
            let tau = sweep.tau(alpha);
            let sets = sweep.sets(tau);
            let covered = sets
                .iter()
                .zip(eval.records())
                .filter(|(s, r)| s.contains(r.label()))
                .count();
            let size: usize = sets.iter().map(PredictionSet::len).sum();
            CurvePoint {
                target: 1.0 - alpha,
                alpha,
                tau,
                empirical: covered as f64 / n,
                mean_size: size as f64 / n,
            }
        })
        .collect();
    Ok(CalibrationCurve { points })
}

/// Singleton fraction, mean set size and (with a taxonomy) collapsed
/// informativeness over an alpha grid, measured on `eval` only.
pub fn efficiency_curve(
    cal: &LabeledDataset,
    eval: &LabeledDataset,
    alphas: &[f64],
    cfg: &ScoreConfig,
) -> Result<Vec<EfficiencyPoint>> {
    let order = target_order(alphas)?;
    let sweep = Sweep::new(cal, eval, cfg)?;
    let n = eval.len() as f64;
    order
        .into_iter()
        .map(|alpha| {
            let sets = sweep.sets(sweep.tau(alpha));
            let singles = sets.iter().filter(|s| s.len() == 1).count();
            let size: usize = sets.iter().map(PredictionSet::len).sum();
            let informativeness = match eval.taxonomy() {
                Some(t) => Some(superclass_collapse(&sets, t)?.informativeness),
                None => None,
            };
            Ok(EfficiencyPoint {
                target: 1.0 - alpha,
                alpha,
                fraction_singleton: singles as f64 / n,
                mean_size: size as f64 / n,
                informativeness,
            })
        })
        .collect()
}
