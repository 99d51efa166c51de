//! Selective classification: abstain when the top probability is below a
//! threshold λ and bound the accuracy of what is kept.
//!
//! Two different uses of the bound live here and should not be confused:
//!
//! - [`selective_curve`] reports a pointwise bound at every λ, each at the
//!   full δ. It is descriptive. Reading the curve and picking the best λ
//!   afterwards does not carry a 1−δ guarantee.
//! - [`choose_lambda`] runs fixed-sequence testing down the λ grid and stops
//!   at the first failure. The returned λ is certified at level 1−δ.
//!
//! [`size_one_misuse_demo`] sets both against the common misuse of reading
//! singleton conformal sets as "confident" predictions.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audit::Sweep;
use crate::bounds::BoundKind;
use crate::conformal::{check_alpha, ScoreConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveConfig {
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Candidate thresholds, sorted descending.
    pub grid: Vec<f64>,
    #[serde(default)]
    pub bound: BoundKind,
}

impl SelectiveConfig {
    /// Hoeffding bound over the default quantile grid of `ds`.
    pub fn for_dataset(ds: &LabeledDataset, delta: f64, target_accuracy: Option<f64>) -> Self {
        Self {
            delta,
            target_accuracy,
            grid: default_grid(ds, DEFAULT_GRID_POINTS),
            bound: BoundKind::Hoeffding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidDelta(self.delta));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidGrid("empty threshold grid".into()));
        }
        if self.grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidGrid("thresholds must lie in [0, 1]".into()));
        }
        if self.grid.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidGrid("thresholds must be sorted descending".into()));
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig("target accuracy must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// `points` thresholds at evenly spaced empirical quantiles of the top
/// probability, descending, duplicates removed.
pub fn default_grid(ds: &LabeledDataset, points: usize) -> Vec<f64> {
    let mut maxes: Vec<f64> = ds.records().iter().map(|r| r.max_prob()).collect();
    if maxes.is_empty() || points == 0 {
        return Vec::new();
    }
    maxes.sort_by(f64::total_cmp);
    let last = maxes.len() - 1;
    let mut grid: Vec<f64> = (0..points)
        .rev()
        .map(|i| {
            let q = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
            maxes[libm::floor(q * last as f64) as usize]
        })
        .collect();
    grid.dedup();
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub lambda: f64,
    pub rejection_fraction: f64,
    pub n_kept: usize,
    /// Zero when nothing is kept.
    pub empirical_accuracy: f64,
    pub lower_bound: f64,
}

/// Points in ascending λ order, so rejection is nondecreasing along the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveCurve {
    pub points: Vec<SelectivePoint>,
    pub delta: f64,
}

/// Records sorted by top probability, descending, with running counts of
/// correct predictions.
struct Ranked {
    max_probs: Vec<f64>,
    correct_prefix: Vec<usize>,
}

impl Ranked {
    fn new(ds: &LabeledDataset) -> Self {
        let mut rows: Vec<(f64, bool)> = ds.records().iter().map(|r| (r.max_prob(), r.is_correct())).collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut correct_prefix = Vec::with_capacity(rows.len() + 1);
        correct_prefix.push(0);
        let mut acc = 0;
        for &(_, c) in &rows {
            acc += c as usize;
            correct_prefix.push(acc);
        }
        Self {
            max_probs: rows.into_iter().map(|r| r.0).collect(),
            correct_prefix,
        }
    }

    /// (kept, correct among kept) for threshold `lambda`.
    fn kept(&self, lambda: f64) -> (usize, usize) {
        let n = self.max_probs.partition_point(|&m| m >= lambda);
        (n, self.correct_prefix[n])
    }

    fn top(&self, n: usize) -> (usize, usize) {
        (n, self.correct_prefix[n])
    }
}

fn point(lambda: f64, total: usize, kept: usize, correct: usize, cfg: &SelectiveConfig) -> Result<SelectivePoint> {
    let (empirical_accuracy, lower_bound) = if kept == 0 {
        (0.0, 0.0)
    } else {
        (correct as f64 / kept as f64, cfg.bound.lower(correct, kept, cfg.delta)?)
    };
    Ok(SelectivePoint {
        lambda,
        rejection_fraction: 1.0 - kept as f64 / total as f64,
        n_kept: kept,
        empirical_accuracy,
        lower_bound,
    })
}

/// Pointwise selective-accuracy curve. Each bound uses the full δ.
pub fn selective_curve(ds: &LabeledDataset, cfg: &SelectiveConfig) -> Result<SelectiveCurve> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let ranked = Ranked::new(ds);
    let points = cfg
        .grid
        .iter()
        .rev()
        .map(|&lambda| {
            let (kept, correct) = ranked.kept(lambda);
            point(lambda, ds.len(), kept, correct, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectiveCurve {
        points,
        delta: cfg.delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub lambda: f64,
    pub certified_accuracy: f64,
    pub n_kept: usize,
    pub empirical_accuracy: f64,
}

/// Fixed-sequence test of `bound(λ) ≥ target` down the grid.
///
/// Thresholds where even a perfect record of kept predictions could not
/// reach the target are skipped rather than counted as failures; whether a
/// point is skipped depends only on how many records it keeps, never on the
/// labels. The first real failure ends the sequence. Returns the last λ that
/// passed, or `None` if the first tested point fails or nothing is testable.
pub fn choose_lambda(ds: &LabeledDataset, cfg: &SelectiveConfig) -> Result<Option<Certification>> {
    cfg.validate()?;
    let target = cfg.target_accuracy.ok_or(Error::MissingTarget)?;
    let ranked = Ranked::new(ds);
    let mut best = None;
    for &lambda in &cfg.grid {
        let (kept, correct) = ranked.kept(lambda);
        if kept == 0 || cfg.bound.lower(kept, kept, cfg.delta)? < target {
            continue;
        }
        let lower = cfg.bound.lower(correct, kept, cfg.delta)?;
        if lower < target {
            break;
        }
        best = Some(Certification {
            lambda,
            certified_accuracy: lower,
            n_kept: kept,
            empirical_accuracy: correct as f64 / kept as f64,
        });
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeOnePoint {
    pub alpha: f64,
    pub tau: f64,
    pub marginal_coverage: f64,
    pub n_singleton: usize,
    pub singleton_fraction: f64,
    /// `None` when no singleton sets were produced.
    pub singleton_accuracy: Option<f64>,
    /// Selective classification keeping the same number of most confident
    /// records.
    pub matched: SelectivePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeOneMisuseReport {
    pub delta: f64,
    pub overall_accuracy: f64,
    /// In the order the alphas were given.
    pub points: Vec<SizeOnePoint>,
}

/// Calibrates on `cal` for every alpha and reads singleton sets on `eval` as
/// if they were confident predictions, next to a selective classifier that
/// rejects the same fraction of `eval`.
pub fn size_one_misuse_demo(
    cal: &LabeledDataset,
    eval: &LabeledDataset,
    alphas: &[f64],
    cfg: &ScoreConfig,
    delta: f64,
) -> Result<SizeOneMisuseReport> {
    cfg.validate()?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidGrid("empty alpha grid".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let sweep = Sweep::new(cal, eval, cfg)?;
    let ranked = Ranked::new(eval);
    let sel = SelectiveConfig {
        delta,
        target_accuracy: None,
        grid: Vec::new(),
        bound: BoundKind::Hoeffding,
    };
    let n = eval.len();
    let points = alphas
        .iter()
        .map(|&alpha| {
            let tau = sweep.tau(alpha);
            let sets = sweep.sets(tau);
            let mut covered = 0;
            let mut singles = 0;
            let mut singles_right = 0;
            for (s, r) in sets.iter().zip(eval.records()) {
                let hit = s.contains(r.label());
                covered += hit as usize;
                if s.len() == 1 {
                    singles += 1;
                    singles_right += hit as usize;
                }
            }
            let (kept, correct) = ranked.top(singles);
            let lambda = if kept == 0 { 1.0 } else { ranked.max_probs[kept - 1] };
            Ok(SizeOnePoint {
                alpha,
                tau,
                marginal_coverage: covered as f64 / n as f64,
                n_singleton: singles,
                singleton_fraction: singles as f64 / n as f64,
                singleton_accuracy: (singles > 0).then(|| singles_right as f64 / singles as f64),
                matched: point(lambda, n, kept, correct, &sel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SizeOneMisuseReport {
        delta,
        overall_accuracy: eval.accuracy(),
        points,
    })
}
