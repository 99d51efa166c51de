//! Four canned demonstrations of where conformal prediction sets mislead,
//! each reduced to a PASS (pitfall reproduced) or FAIL verdict.
//!
//! - `conditional-coverage`: marginal coverage hides a rare, hard class that
//!   is under-covered; class-conditional (Mondrian) calibration fixes it.
//! - `label-shift`: shifting the class mix breaks coverage; recalibrating
//!   on shifted data or reweighting the calibration set restores it.
//! - `size-one`: singleton sets are over-covered and their rate cannot be
//!   steered, unlike a selective classifier with a threshold.
//! - `few-classes`: with a coarse taxonomy most sets stop being informative
//!   as the target coverage rises.
//!
//! Every demo repeats over `trials` seeded trials through a
//! [`TrialExecutor`], so sequential and parallel runs give identical reports.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audit::{coverage_report, default_target_grid, efficiency_curve, EfficiencyPoint};
use crate::conformal::{calibrate_dataset, mondrian_calibrate, predict_sets, Partition, ScoreConfig};
use crate::data::{split_dataset, LabeledDataset, PredictionRecord, SplitSpec, Taxonomy};
use crate::error::{Error, Result};
use crate::rng::trial_seed;
use crate::selective::{choose_lambda, size_one_misuse_demo, Certification, SelectiveConfig, SizeOneMisuseReport};
use crate::shift::{shift_experiment, ShiftKind, ShiftSpec};
use crate::synth::{generate, Concentration, GroupSpec, SynthConfig};
use crate::trials::{mean_and_se, TrialExecutor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pitfall {
    ConditionalCoverage,
    LabelShift,
    SizeOne,
    FewClasses,
}

impl Pitfall {
    pub const ALL: [Pitfall; 4] = [
        Pitfall::ConditionalCoverage,
        Pitfall::LabelShift,
        Pitfall::SizeOne,
        Pitfall::FewClasses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pitfall::ConditionalCoverage => "conditional-coverage",
            Pitfall::LabelShift => "label-shift",
            Pitfall::SizeOne => "size-one",
            Pitfall::FewClasses => "few-classes",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pitfall {name:?}")))
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn from(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_and_se(values);
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSetup {
    pub synth: SynthConfig,
    pub n_cal: usize,
    pub rare_class: usize,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftSetup {
    pub synth: SynthConfig,
    pub n_cal: usize,
    pub n_recal: usize,
    pub shifted_size: usize,
    pub min_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeOneSetup {
    pub synth: SynthConfig,
    pub n_cal: usize,
    pub delta: f64,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewClassSetup {
    /// Must carry a taxonomy.
    pub synth: SynthConfig,
    pub n_cal: usize,
    pub points: usize,
    pub min_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitfallsConfig {
    pub seed: u64,
    pub alpha: f64,
    pub trials: usize,
    pub conditional: ConditionalSetup,
    pub label_shift: LabelShiftSetup,
    pub size_one: SizeOneSetup,
    pub few_classes: FewClassSetup,
}

const SKEWED_PRIORS: [f64; 7] = [0.60, 0.12, 0.11, 0.07, 0.04, 0.03, 0.03];
const BASE_CONCENTRATION: f64 = 2.25;

fn skewed(n: usize, hard_class: Option<usize>) -> SynthConfig {
    let mut conc = vec![BASE_CONCENTRATION; 7];
    if let Some(c) = hard_class {
        conc[c] *= 0.5;
    }
    SynthConfig {
        n,
        k: 7,
        class_priors: SKEWED_PRIORS.to_vec(),
        concentration: Concentration::PerClass(conc),
        group_specs: Vec::new(),
        seed: 0,
        class_names: None,
        taxonomy: None,
    }
}

/// Confident records are nearly always right and the rest are close to
/// random, so the model's confidence ranks its correctness well.
pub fn well_ranked(n: usize) -> SynthConfig {
    SynthConfig {
        group_specs: vec![GroupSpec {
            attribute: "difficulty".to_string(),
            categories: vec!["easy".to_string(), "hard".to_string()],
            distribution: vec![0.8, 0.2],
            multipliers: vec![1.0, 0.02],
        }],
        ..SynthConfig::uniform(n, 7, 10.0, 0)
    }
}

impl Default for PitfallsConfig {
    fn default() -> Self {
        let taxonomy = Taxonomy::new(
            vec![0, 0, 0, 0, 1, 1, 1],
            vec!["benign".to_string(), "malignant".to_string()],
        )
        .expect("valid taxonomy");
        Self {
            seed: 2024,
            alpha: 0.1,
            trials: 20,
            conditional: ConditionalSetup {
                synth: skewed(5500, Some(5)),
                n_cal: 500,
                rare_class: 5,
                min_gap: 0.05,
            },
            label_shift: LabelShiftSetup {
                synth: skewed(8000, Some(1)),
                n_cal: 1000,
                n_recal: 1000,
                shifted_size: 6000,
                min_drop: 0.02,
            },
            size_one: SizeOneSetup {
                synth: well_ranked(5000),
                n_cal: 1000,
                delta: 0.1,
                alphas: vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4],
            },
            few_classes: FewClassSetup {
                synth: SynthConfig {
                    taxonomy: Some(taxonomy),
                    ..skewed(5000, None)
                },
                n_cal: 1000,
                points: 10,
                min_loss: 0.2,
            },
        }
    }
}

impl PitfallsConfig {
    pub fn validate(&self) -> Result<()> {
        ScoreConfig::deterministic(self.alpha).validate()?;
        if self.trials < 2 {
            return Err(Error::InvalidConfig("at least two trials are needed".into()));
        }
        let c = &self.conditional;
        c.synth.validate()?;
        if c.rare_class >= c.synth.k {
            return Err(Error::InvalidConfig(format!("rare class {} out of range", c.rare_class)));
        }
        self.label_shift.synth.validate()?;
        self.size_one.synth.validate()?;
        let f = &self.few_classes;
        f.synth.validate()?;
        if f.synth.taxonomy.is_none() {
            return Err(Error::InvalidConfig("few-classes demo needs a taxonomy".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSummary {
    pub rare_class: usize,
    pub marginal: MeanSe,
    pub rare_coverage: MeanSe,
    /// Marginal minus rare-class coverage, per trial.
    pub gap: MeanSe,
    pub mondrian_marginal: MeanSe,
    pub mondrian_per_class: BTreeMap<usize, MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftSummary {
    pub before: MeanSe,
    pub after_shift: MeanSe,
    pub after_recalibration: MeanSe,
    pub after_weighting: MeanSe,
    /// Target for the first trial's adversarial shift.
    pub example_target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeOneSummary {
    pub singleton_accuracy: MeanSe,
    pub marginal: MeanSe,
    /// Singleton accuracy minus marginal coverage, per trial.
    pub excess: MeanSe,
    pub singleton_fraction: MeanSe,
    /// First trial, across the alpha grid.
    pub example: SizeOneMisuseReport,
    /// First trial, selective classification certified at `1 - alpha`.
    pub certification: Option<Certification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewClassSummary {
    pub monotone_trials: usize,
    pub informativeness_start: MeanSe,
    pub informativeness_end: MeanSe,
    pub singleton_start: MeanSe,
    pub singleton_end: MeanSe,
    /// First trial's sweep from model accuracy to 0.999.
    pub example_curve: Vec<EfficiencyPoint>,
    /// First trial: fraction of each of the possible sets on the
    /// superclass-level task, randomized scores.
    pub superclass_set_fractions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemoSummary {
    ConditionalCoverage(ConditionalSummary),
    LabelShift(LabelShiftSummary),
    SizeOne(SizeOneSummary),
    FewClasses(FewClassSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub verdict: Verdict,
    /// What PASS means for this demo.
    pub check: String,
    pub summary: DemoSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitfallsReport {
    pub seed: u64,
    pub alpha: f64,
    pub trials: usize,
    pub demos: BTreeMap<Pitfall, DemoReport>,
}

impl PitfallsReport {
    pub fn verdicts(&self) -> BTreeMap<Pitfall, Verdict> {
        self.demos.iter().map(|(p, d)| (*p, d.verdict)).collect()
    }
}

/// Runs the selected demos (all of them when `only` is empty).
pub fn run_pitfalls<E: TrialExecutor>(cfg: &PitfallsConfig, only: &[Pitfall], exec: &E) -> Result<PitfallsReport> {
    cfg.validate()?;
    let mut demos = BTreeMap::new();
    for p in Pitfall::ALL {
        if !only.is_empty() && !only.contains(&p) {
            continue;
        }
        let report = match p {
            Pitfall::ConditionalCoverage => conditional_demo(cfg, exec)?,
            Pitfall::LabelShift => label_shift_demo(cfg, exec)?,
            Pitfall::SizeOne => size_one_demo(cfg, exec)?,
            Pitfall::FewClasses => few_class_demo(cfg, exec)?,
        };
        demos.insert(p, report);
    }
    Ok(PitfallsReport {
        seed: cfg.seed,
        alpha: cfg.alpha,
        trials: cfg.trials,
        demos,
    })
}

fn demo_seed(cfg: &PitfallsConfig, p: Pitfall, trial: usize) -> u64 {
    trial_seed(trial_seed(cfg.seed, p.tag()), trial as u64)
}

/// Generates the pool for one trial and splits it.
fn pool(synth: &SynthConfig, n_cal: usize, seed: u64, stratify: bool) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = generate(&synth.with_seed(seed))?;
    split_dataset(
        &ds,
        &SplitSpec {
            calibration_size: n_cal,
            seed,
            stratify_by_class: stratify,
        },
    )
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn conditional_demo<E: TrialExecutor>(cfg: &PitfallsConfig, exec: &E) -> Result<DemoReport> {
    let setup = &cfg.conditional;
    let score = ScoreConfig::deterministic(cfg.alpha);
    let rare = setup.rare_class;
    let rows = collect(exec.run(cfg.trials, |t| {
        let seed = demo_seed(cfg, Pitfall::ConditionalCoverage, t);
        let (cal, eval) = pool(&setup.synth, setup.n_cal, seed, true)?;
        let plain = calibrate_dataset(&cal, &score)?;
        let plain = coverage_report(&predict_sets(&eval, &plain, seed)?, &eval, cfg.alpha)?;
        let mondrian = mondrian_calibrate(&cal, &Partition::ByClass, &score)?;
        let mondrian = coverage_report(&predict_sets(&eval, &mondrian, seed)?, &eval, cfg.alpha)?;
        let rare_cov = plain.per_class.get(&rare).map_or(f64::NAN, |s| s.rate);
        let per_class: BTreeMap<usize, f64> = mondrian.per_class.iter().map(|(k, s)| (*k, s.rate)).collect();
        Ok((plain.marginal.rate, rare_cov, mondrian.marginal.rate, per_class))
    }))?;

    let marginal: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rare_cov: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let gap: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let mondrian: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        for (k, v) in &r.3 {
            by_class.entry(*k).or_default().push(*v);
        }
    }
    let mondrian_per_class: BTreeMap<usize, MeanSe> = by_class.iter().map(|(k, v)| (*k, MeanSe::of(v))).collect();

    let gap = MeanSe::of(&gap);
    let target = 1.0 - cfg.alpha;
    let lifted = mondrian_per_class.values().all(|m| m.mean >= target - 3.0 * m.se);
    Ok(DemoReport {
        verdict: Verdict::from(gap.mean >= setup.min_gap && lifted),
        check: format!(
            "class {rare} coverage at least {} below marginal; class-conditional calibration lifts every class to {target} within 3 SE",
            setup.min_gap
        ),
        summary: DemoSummary::ConditionalCoverage(ConditionalSummary {
            rare_class: rare,
            marginal: MeanSe::of(&marginal),
            rare_coverage: MeanSe::of(&rare_cov),
            gap,
            mondrian_marginal: MeanSe::of(&mondrian),
            mondrian_per_class,
        }),
    })
}

fn label_shift_demo<E: TrialExecutor>(cfg: &PitfallsConfig, exec: &E) -> Result<DemoReport> {
    let setup = &cfg.label_shift;
    let score = ScoreConfig::deterministic(cfg.alpha);
    let rows = collect(exec.run(cfg.trials, |t| {
        let seed = demo_seed(cfg, Pitfall::LabelShift, t);
        let (cal, eval) = pool(&setup.synth, setup.n_cal, seed, false)?;
        let spec = ShiftSpec {
            kind: ShiftKind::AdversarialLabelShift,
            seed,
            size: setup.shifted_size,
        };
        shift_experiment(&cal, &eval, &spec, &score, setup.n_recal, seed).map(|e| e.result)
    }))?;

    let pick = |f: fn(&crate::shift::ShiftExperimentResult) -> f64| {
        MeanSe::of(&rows.iter().map(f).collect::<Vec<_>>())
    };
    let before = pick(|r| r.coverage_before);
    let after_shift = pick(|r| r.coverage_after_shift);
    let after_recalibration = pick(|r| r.coverage_after_recalibration);
    let after_weighting = pick(|r| r.coverage_after_weighting.unwrap_or(f64::NAN));
    let target = 1.0 - cfg.alpha;
    let restored = |m: &MeanSe| m.mean >= target - 3.0 * m.se;
    let ok = after_shift.mean <= target - setup.min_drop && restored(&after_recalibration) && restored(&after_weighting);
    Ok(DemoReport {
        verdict: Verdict::from(ok),
        check: format!(
            "adversarial label shift drops coverage at least {} below {target}; recalibration on {} shifted records and reweighting each restore it within 3 SE",
            setup.min_drop, setup.n_recal
        ),
        summary: DemoSummary::LabelShift(LabelShiftSummary {
            before,
            after_shift,
            after_recalibration,
            after_weighting,
            example_target: rows[0].target.clone().unwrap_or_default(),
        }),
    })
}

fn size_one_demo<E: TrialExecutor>(cfg: &PitfallsConfig, exec: &E) -> Result<DemoReport> {
    let setup = &cfg.size_one;
    let score = ScoreConfig::deterministic(cfg.alpha);
    let mut alphas = setup.alphas.clone();
    if !alphas.contains(&cfg.alpha) {
        alphas.push(cfg.alpha);
    }
    let at = alphas.iter().position(|a| *a == cfg.alpha).expect("alpha is in the grid");
    let rows = collect(exec.run(cfg.trials, |t| {
        let seed = demo_seed(cfg, Pitfall::SizeOne, t);
        let (cal, eval) = pool(&setup.synth, setup.n_cal, seed, false)?;
        let report = size_one_misuse_demo(&cal, &eval, &alphas, &score, setup.delta)?;
        let certification = if t == 0 {
            let sel = SelectiveConfig::for_dataset(&eval, setup.delta, Some(1.0 - cfg.alpha));
            choose_lambda(&eval, &sel)?
        } else {
            None
        };
        Ok((report, certification))
    }))?;

    let point = |r: &SizeOneMisuseReport| r.points[at].clone();
    let acc: Vec<f64> = rows.iter().map(|r| point(&r.0).singleton_accuracy.unwrap_or(f64::NAN)).collect();
    let marginal: Vec<f64> = rows.iter().map(|r| point(&r.0).marginal_coverage).collect();
    let excess: Vec<f64> = acc.iter().zip(&marginal).map(|(a, m)| a - m).collect();
    let fraction: Vec<f64> = rows.iter().map(|r| point(&r.0).singleton_fraction).collect();
    let excess = MeanSe::of(&excess);
    let (example, certification) = rows.into_iter().next().expect("at least two trials");
    Ok(DemoReport {
        verdict: Verdict::from(excess.mean > 3.0 * excess.se),
        check: format!(
            "at alpha {} singleton sets are more accurate than the marginal coverage, by more than 3 SE",
            cfg.alpha
        ),
        summary: DemoSummary::SizeOne(SizeOneSummary {
            singleton_accuracy: MeanSe::of(&acc),
            marginal: MeanSe::of(&marginal),
            excess,
            singleton_fraction: MeanSe::of(&fraction),
            example,
            certification,
        }),
    })
}

/// The same records with probabilities summed within each superclass and
/// labels replaced by superclasses.
pub fn superclass_dataset(ds: &LabeledDataset, taxonomy: &Taxonomy) -> Result<LabeledDataset> {
    if taxonomy.num_classes() != ds.num_classes() {
        return Err(Error::InvalidTaxonomy(format!(
            "taxonomy covers {} classes, dataset has {}",
            taxonomy.num_classes(),
            ds.num_classes()
        )));
    }
    let m = taxonomy.num_superclasses();
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let mut probs = vec![0.0; m];
            for (k, p) in r.probs().iter().enumerate() {
                probs[taxonomy.superclass_of()[k]] += p;
            }
            PredictionRecord::new(r.id(), probs, taxonomy.superclass_of()[r.label()], r.groups().clone())
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(records, taxonomy.superclass_names().to_vec(), None)
}

fn few_class_demo<E: TrialExecutor>(cfg: &PitfallsConfig, exec: &E) -> Result<DemoReport> {
    let setup = &cfg.few_classes;
    let score = ScoreConfig::deterministic(cfg.alpha);
    let rows = collect(exec.run(cfg.trials, |t| {
        let seed = demo_seed(cfg, Pitfall::FewClasses, t);
        let (cal, eval) = pool(&setup.synth, setup.n_cal, seed, false)?;
        let targets = default_target_grid(eval.accuracy(), setup.points);
        let alphas: Vec<f64> = targets.iter().map(|t| 1.0 - t).collect();
        let curve = efficiency_curve(&cal, &eval, &alphas, &score)?;
        let monotone = curve.windows(2).all(|w| {
            w[1].fraction_singleton <= w[0].fraction_singleton && w[1].informativeness <= w[0].informativeness
        });
        Ok((curve, monotone, cal, eval))
    }))?;

    let ends = |f: fn(&EfficiencyPoint) -> f64, last: bool| {
        let v: Vec<f64> = rows
            .iter()
            .map(|r| f(if last { r.0.last() } else { r.0.first() }.expect("nonempty grid")))
            .collect();
        MeanSe::of(&v)
    };
    let info = |p: &EfficiencyPoint| p.informativeness.unwrap_or(f64::NAN);
    let informativeness_start = ends(info, false);
    let informativeness_end = ends(info, true);
    let singleton_start = ends(|p| p.fraction_singleton, false);
    let singleton_end = ends(|p| p.fraction_singleton, true);
    let monotone_trials = rows.iter().filter(|r| r.1).count();

    let (curve, _, cal, eval) = rows.into_iter().next().expect("at least two trials");
    let taxonomy = setup.synth.taxonomy.as_ref().expect("validated");
    let super_cal = superclass_dataset(&cal, taxonomy)?;
    let super_eval = superclass_dataset(&eval, taxonomy)?;
    let seed = demo_seed(cfg, Pitfall::FewClasses, 0);
    let calib = calibrate_dataset(&super_cal, &ScoreConfig::randomized(cfg.alpha, seed))?;
    let mut fractions = BTreeMap::new();
    for s in predict_sets(&super_eval, &calib, seed)? {
        let key = s
            .members()
            .iter()
            .map(|&m| taxonomy.superclass_names()[m].as_str())
            .collect::<Vec<_>>()
            .join("+");
        *fractions.entry(key).or_insert(0.0) += 1.0 / super_eval.len() as f64;
    }

    let ok = monotone_trials == cfg.trials && informativeness_start.mean - informativeness_end.mean >= setup.min_loss;
    Ok(DemoReport {
        verdict: Verdict::from(ok),
        check: format!(
            "singleton fraction and superclass informativeness never increase with target coverage, and informativeness falls by at least {}",
            setup.min_loss
        ),
        summary: DemoSummary::FewClasses(FewClassSummary {
            monotone_trials,
            informativeness_start,
            informativeness_end,
            singleton_start,
            singleton_end,
            example_curve: curve,
            superclass_set_fractions: fractions,
        }),
    })
}
