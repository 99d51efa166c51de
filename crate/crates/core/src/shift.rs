//! Label shift, a score-space surrogate for domain shift, and the
//! recalibration workflow.
//!
//! Conformal coverage relies on calibration and test data being
//! exchangeable. Label shift resamples a dataset toward a different class
//! distribution; score shift sharpens or flattens every probability vector
//! with a temperature and adds log-space noise, which degrades calibration
//! the way an unseen acquisition site would while keeping a valid simplex.
//! It is a surrogate, not a model of any particular real shift.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::{coverage_report, CoverageReport};
use crate::conformal::{
    calibrate_dataset, predict_sets, weighted_calibrate_dataset, CalibrationResult, ScoreConfig,
};
use crate::data::{resample_weighted, split_dataset, LabeledDataset, PredictionRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShiftKind {
    /// Resample toward this class distribution.
    LabelShift { target: Vec<f64> },
    /// Move mass toward the class with the lowest coverage under the
    /// original calibration until its share triples (capped at 0.9). Only
    /// meaningful inside [`shift_experiment`], which resolves it.
    AdversarialLabelShift,
    /// Temperature plus multiplicative log-space noise on every vector.
    ScoreShift { temperature: f64, noise_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub seed: u64,
    /// Output size for label shift. Score shift keeps every input record.
    pub size: usize,
}

impl ShiftSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        match &self.kind {
            ShiftKind::LabelShift { target } => check_target(target, k),
            ShiftKind::AdversarialLabelShift => Ok(()),
            ShiftKind::ScoreShift {
                temperature,
                noise_scale,
            } => {
                if !(temperature.is_finite() && *temperature > 0.0) {
                    return Err(Error::InvalidShift(format!("temperature {temperature} must be positive")));
                }
                if !(noise_scale.is_finite() && *noise_scale >= 0.0) {
                    return Err(Error::InvalidShift(format!("noise scale {noise_scale} must be nonnegative")));
                }
                Ok(())
            }
        }
    }
}

fn check_target(target: &[f64], k: usize) -> Result<()> {
    if target.len() != k {
        return Err(Error::InvalidShift(format!("target has {} entries for {k} classes", target.len())));
    }
    if target.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidShift("target has a negative or non-finite entry".to_string()));
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidShift(format!("target sums to {sum}, not 1")));
    }
    Ok(())
}

/// Importance weights `target[k] / empirical[k]` for calibration records of
/// class `k`.
pub fn label_shift_weights(cal: &LabeledDataset, target: &[f64]) -> Result<Vec<f64>> {
    check_target(target, cal.num_classes())?;
    let empirical = cal.class_distribution();
    target
        .iter()
        .zip(&empirical)
        .enumerate()
        .map(|(class, (&t, &e))| match (t > 0.0, e > 0.0) {
            (true, false) => Err(Error::EmptyWeightedClass { class }),
            (false, _) => Ok(0.0),
            (true, true) => Ok(t / e),
        })
        .collect()
}

/// Triples the share of `worst` (capped at 0.9) and scales the other classes
/// down proportionally.
pub fn tripled_share_target(empirical: &[f64], worst: usize) -> Vec<f64> {
    let share = empirical[worst];
    let boosted = (3.0 * share).min(0.9).max(share);
    let scale = if share < 1.0 { (1.0 - boosted) / (1.0 - share) } else { 0.0 };
    empirical
        .iter()
        .enumerate()
        .map(|(k, &p)| if k == worst { boosted } else { p * scale })
        .collect()
}

/// Adversarial target from a coverage report on `ds`: the worst-covered
/// class present in `ds` gets its share tripled.
pub fn adversarial_target(ds: &LabeledDataset, report: &CoverageReport) -> Result<Vec<f64>> {
    let empirical = ds.class_distribution();
    let (worst, _) = report
        .per_class
        .iter()
        .filter(|(k, _)| empirical[**k] > 0.0)
        .map(|(&k, s)| (k, s.rate))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or(Error::Empty("per-class coverage"))?;
    Ok(tripled_share_target(&empirical, worst))
}

/// Applies a resolved shift. Class names, taxonomy and `K` are unchanged.
pub fn apply_shift(ds: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    spec.validate(ds.num_classes())?;
    match &spec.kind {
        ShiftKind::LabelShift { target } => {
            let weights = label_shift_weights(ds, target)?;
            resample_weighted(ds, &weights, spec.size, spec.seed)
        }
        ShiftKind::AdversarialLabelShift => Err(Error::InvalidShift(
            "adversarial target must be resolved against a calibration first".to_string(),
        )),
        ShiftKind::ScoreShift {
            temperature,
            noise_scale,
        } => {
            let mut rng = rng::stream(spec.seed, rng::SHIFT_NOISE_STREAM);
            let records = ds
                .records()
                .iter()
                .map(|r| {
                    let logits: Vec<f64> = r
                        .probs()
                        .iter()
                        .map(|&p| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            libm::log(p) / temperature + noise_scale * z
                        })
                        .collect();
                    PredictionRecord::new(r.id(), softmax(&logits), r.label(), r.groups().clone())
                })
                .collect::<Result<Vec<_>>>()?;
            ds.with_records(records)
        }
    }
}

/// Softmax with max subtraction; `-inf` logits map to exactly zero.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftExperimentResult {
    pub alpha: f64,
    pub n_recal: usize,
    pub coverage_before: f64,
    pub coverage_after_shift: f64,
    pub coverage_after_recalibration: f64,
    /// Label shift only: original calibration set reweighted toward the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_after_weighting: Option<f64>,
    /// The label distribution actually targeted, once resolved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

/// A shift experiment with its stratified reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftExperiment {
    pub result: ShiftExperimentResult,
    pub before: CoverageReport,
    pub after_shift: CoverageReport,
    pub after_recalibration: CoverageReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_weighting: Option<CoverageReport>,
    pub recalibration: CalibrationResult,
}

fn report(ds: &LabeledDataset, calib: &CalibrationResult, seed: u64, alpha: f64) -> Result<CoverageReport> {
    coverage_report(&predict_sets(ds, calib, seed)?, ds, alpha)
}

/// Calibrates on `cal`, shifts `eval`, and measures coverage before the
/// shift, after it, and after recalibrating on `n_recal` shifted records.
///
/// The recalibration records are split off the shifted pool before any
/// post-recalibration measurement, so recalibration and evaluation stay
/// exchangeable.
pub fn shift_experiment(
    cal: &LabeledDataset,
    eval: &LabeledDataset,
    spec: &ShiftSpec,
    cfg: &ScoreConfig,
    n_recal: usize,
    seed: u64,
) -> Result<ShiftExperiment> {
    cfg.validate()?;
    spec.validate(eval.num_classes())?;
    if n_recal == 0 {
        return Err(Error::InvalidShift("recalibration size must be positive".to_string()));
    }
    let calib = calibrate_dataset(cal, cfg)?;
    let before = report(eval, &calib, seed, cfg.alpha)?;

    let resolved = match &spec.kind {
        ShiftKind::AdversarialLabelShift => ShiftSpec {
            kind: ShiftKind::LabelShift {
                target: adversarial_target(eval, &before)?,
            },
            ..spec.clone()
        },
        _ => spec.clone(),
    };
    let shifted = apply_shift(eval, &resolved)?;
    if shifted.len() <= n_recal {
        return Err(Error::InsufficientShiftedData {
            available: shifted.len(),
            needed: n_recal,
        });
    }
    let (recal, holdout) = split_dataset(
        &shifted,
        &SplitSpec {
            calibration_size: n_recal,
            seed,
            stratify_by_class: false,
        },
    )?;

    let after_shift = report(&holdout, &calib, seed, cfg.alpha)?;
    let recalibration = calibrate_dataset(&recal, cfg)?;
    let after_recalibration = report(&holdout, &recalibration, seed, cfg.alpha)?;

    let target = match &resolved.kind {
        ShiftKind::LabelShift { target } => Some(target.clone()),
        _ => None,
    };
    let after_weighting = match &target {
        Some(t) => {
            let weights = label_shift_weights(cal, t)?;
            let weighted = weighted_calibrate_dataset(cal, &weights, cfg)?;
            Some(report(&holdout, &weighted, seed, cfg.alpha)?)
        }
        None => None,
    };

    Ok(ShiftExperiment {
        result: ShiftExperimentResult {
            alpha: cfg.alpha,
            n_recal,
            coverage_before: before.marginal.rate,
            coverage_after_shift: after_shift.marginal.rate,
            coverage_after_recalibration: after_recalibration.marginal.rate,
            coverage_after_weighting: after_weighting.as_ref().map(|r| r.marginal.rate),
            target,
        },
        before,
        after_shift,
        after_recalibration,
        after_weighting,
        recalibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use alloc::vec;

    fn pool(n: usize, seed: u64) -> LabeledDataset {
        let mut cfg = SynthConfig::uniform(n, 3, 2.0, seed);
        cfg.class_priors = vec![0.5, 0.3, 0.2];
        generate(&cfg).unwrap()
    }

    #[test]
    fn identity_label_shift_keeps_distribution() {
        let ds = pool(4000, 1);
        let target = ds.class_distribution();
        let spec = ShiftSpec {
            kind: ShiftKind::LabelShift { target: target.clone() },
            seed: 2,
            size: 4000,
        };
        let out = apply_shift(&ds, &spec).unwrap();
        for (p, q) in out.class_distribution().iter().zip(&target) {
            let se = libm::sqrt(q * (1.0 - q) / 4000.0);
            assert!((p - q).abs() <= 3.0 * se);
        }
        assert_eq!(out.class_names(), ds.class_names());
        assert_eq!(out.num_classes(), ds.num_classes());
    }

    #[test]
    fn identity_score_shift_is_noop() {
        let ds = pool(300, 3);
        let spec = ShiftSpec {
            kind: ShiftKind::ScoreShift {
                temperature: 1.0,
                noise_scale: 0.0,
            },
            seed: 0,
            size: 0,
        };
        let out = apply_shift(&ds, &spec).unwrap();
        assert_eq!(out.len(), ds.len());
        for (a, b) in ds.records().iter().zip(out.records()) {
            assert_eq!(a.label(), b.label());
            for (p, q) in a.probs().iter().zip(b.probs()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_preserves_argmax() {
        let ds = pool(500, 4);
        for t in [0.3, 2.0, 5.0] {
            let spec = ShiftSpec {
                kind: ShiftKind::ScoreShift {
                    temperature: t,
                    noise_scale: 0.0,
                },
                seed: 0,
                size: 0,
            };
            let out = apply_shift(&ds, &spec).unwrap();
            for (a, b) in ds.records().iter().zip(out.records()) {
                assert_eq!(a.argmax(), b.argmax());
            }
        }
    }

    #[test]
    fn extreme_temperature_stays_on_simplex() {
        let ds = pool(200, 5);
        let spec = ShiftSpec {
            kind: ShiftKind::ScoreShift {
                temperature: 1e-3,
                noise_scale: 3.0,
            },
            seed: 1,
            size: 0,
        };
        let out = apply_shift(&ds, &spec).unwrap();
        for r in out.records() {
            assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_validation() {
        let ds = pool(100, 6);
        let bad = [
            ShiftKind::LabelShift { target: vec![0.5, 0.5] },
            ShiftKind::LabelShift { target: vec![0.5, 0.6, -0.1] },
            ShiftKind::ScoreShift { temperature: 0.0, noise_scale: 0.0 },
            ShiftKind::ScoreShift { temperature: 1.0, noise_scale: -1.0 },
            ShiftKind::AdversarialLabelShift,
        ];
        for kind in bad {
            let spec = ShiftSpec { kind, seed: 0, size: 10 };
            assert!(apply_shift(&ds, &spec).is_err());
        }
    }

    #[test]
    fn weights_examples() {
        // two balanced classes
        let mut cfg = SynthConfig::uniform(1000, 2, 2.0, 7);
        cfg.class_priors = vec![0.5, 0.5];
        let ds = generate(&cfg).unwrap();
        let emp = ds.class_distribution();
        let w = label_shift_weights(&ds, &emp).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let balanced = ds.with_records(ds.records()[..0].to_vec()).unwrap();
        assert!(label_shift_weights(&balanced, &[0.5, 0.5]).is_err());

        // exactly balanced calibration set: 2/3 vs 1/3 doubles class 0's share relative to class 1
        let mut recs = Vec::new();
        for r in ds.records() {
            if recs.iter().filter(|x: &&PredictionRecord| x.label() == r.label()).count() < 100 {
                recs.push(r.clone());
            }
        }
        let bal = ds.with_records(recs).unwrap();
        assert_eq!(bal.class_counts(), vec![100, 100]);
        let w = label_shift_weights(&bal, &[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!((w[0] - 2.0 * w[1]).abs() < 1e-12);
    }

    #[test]
    fn weights_error_on_missing_class() {
        let mut cfg = SynthConfig::uniform(200, 3, 2.0, 8);
        cfg.class_priors = vec![0.5, 0.5, 0.0];
        let ds = generate(&cfg).unwrap();
        assert_eq!(
            label_shift_weights(&ds, &[0.4, 0.4, 0.2]).unwrap_err(),
            Error::EmptyWeightedClass { class: 2 }
        );
        assert_eq!(label_shift_weights(&ds, &[0.5, 0.5, 0.0]).unwrap()[2], 0.0);
    }

    #[test]
    fn tripled_share() {
        let t = tripled_share_target(&[0.5, 0.3, 0.2], 2);
        assert!((t[2] - 0.6).abs() < 1e-12);
        assert!((t[0] - 0.25).abs() < 1e-12);
        assert!((t[1] - 0.15).abs() < 1e-12);
        let capped = tripled_share_target(&[0.6, 0.4], 1);
        assert!((capped[1] - 0.9).abs() < 1e-12);
        assert!((capped.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn experiment_requires_enough_shifted_data() {
        let ds = pool(600, 9);
        let (cal, eval) = split_dataset(
            &ds,
            &SplitSpec {
                calibration_size: 300,
                seed: 0,
                stratify_by_class: false,
            },
        )
        .unwrap();
        let spec = ShiftSpec {
            kind: ShiftKind::ScoreShift {
                temperature: 1.0,
                noise_scale: 0.0,
            },
            seed: 0,
            size: 0,
        };
        let err = shift_experiment(&cal, &eval, &spec, &ScoreConfig::deterministic(0.1), 300, 0).unwrap_err();
        assert_eq!(err, Error::InsufficientShiftedData { available: 300, needed: 300 });
    }

    #[test]
    fn adversarial_experiment_runs_and_resolves_target() {
        let ds = pool(4000, 10);
        let (cal, eval) = split_dataset(
            &ds,
            &SplitSpec {
                calibration_size: 1000,
                seed: 0,
                stratify_by_class: false,
            },
        )
        .unwrap();
        let spec = ShiftSpec {
            kind: ShiftKind::AdversarialLabelShift,
            seed: 1,
            size: 3000,
        };
        let out = shift_experiment(&cal, &eval, &spec, &ScoreConfig::deterministic(0.1), 1000, 2).unwrap();
        let target = out.result.target.as_ref().unwrap();
        assert!((target.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(out.result.coverage_after_weighting.is_some());
        assert_eq!(out.after_shift.marginal.n, 2000);
        assert_eq!(out.recalibration.n_cal, 1000);
    }
}
