//! Seeded synthetic classifier outputs.
//!
//! Labels are drawn from the class priors. Each probability vector is a
//! Dirichlet draw with parameter 1 on every class plus
//! `concentration[label] * multiplier` on the true class, where the
//! multiplier is the product of the record's group multipliers. Larger
//! concentration gives a sharper, more accurate "model"; a multiplier below 1
//! makes a group harder.
//!
//! Record `i` draws everything from its own stream
//! `rng::stream(seed, SYNTH_STREAM_BASE + i)`, so generation can be split
//! over index ranges without changing the output.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::data::{default_class_names, LabeledDataset, PredictionRecord, Taxonomy};
use crate::error::{Error, Result};
use crate::rng;

/// A group attribute attached to every synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub attribute: String,
    pub categories: Vec<String>,
    pub distribution: Vec<f64>,
    /// Concentration multiplier per category.
    pub multipliers: Vec<f64>,
}

/// Either one concentration for every class or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Concentration {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl Concentration {
    pub fn for_class(&self, class: usize) -> f64 {
        match self {
            Concentration::Uniform(c) => *c,
            Concentration::PerClass(v) => v[class],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub class_priors: Vec<f64>,
    pub concentration: Concentration,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_specs: Vec<GroupSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<Taxonomy>,
}

impl SynthConfig {
    /// Balanced priors, one concentration for all classes, no groups.
    pub fn uniform(n: usize, k: usize, concentration: f64, seed: u64) -> Self {
        Self {
            n,
            k,
            class_priors: alloc::vec![1.0 / k as f64; k],
            concentration: Concentration::Uniform(concentration),
            group_specs: Vec::new(),
            seed,
            class_names: None,
            taxonomy: None,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k < 2 {
            return Err(Error::TooFewClasses(self.k));
        }
        check_simplex("class_priors", &self.class_priors, self.k)?;
        match &self.concentration {
            Concentration::Uniform(c) if !(c.is_finite() && *c > 0.0) => {
                return invalid(format!("concentration {c} must be positive"));
            }
            Concentration::PerClass(v) if v.len() != self.k => {
                return invalid(format!("{} concentrations for {} classes", v.len(), self.k));
            }
            Concentration::PerClass(v) if v.iter().any(|c| !(c.is_finite() && *c > 0.0)) => {
                return invalid("concentrations must be positive".into());
            }
            _ => {}
        }
        for g in &self.group_specs {
            let m = g.categories.len();
            if m == 0 || g.multipliers.len() != m {
                return invalid(format!("group {} needs one multiplier per category", g.attribute));
            }
            check_simplex(&g.attribute, &g.distribution, m)?;
            if g.multipliers.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return invalid(format!("group {} multipliers must be positive", g.attribute));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.k {
                return invalid(format!("{} class names for {} classes", names.len(), self.k));
            }
        }
        Ok(())
    }
}

fn check_simplex(what: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::InvalidConfig(format!("{what} has {} entries, expected {len}", v.len())));
    }
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidConfig(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Generates `cfg.n` records.
pub fn generate(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let label_dist = WeightedIndex::new(&cfg.class_priors)
        .map_err(|e| Error::InvalidConfig(format!("class_priors: {e}")))?;
    let group_dists = cfg
        .group_specs
        .iter()
        .map(|g| {
            WeightedIndex::new(&g.distribution)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", g.attribute)))
        })
        .collect::<Result<Vec<_>>>()?;
    let unit = Gamma::new(1.0, 1.0).expect("valid gamma");

    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = rng::stream(cfg.seed, rng::SYNTH_STREAM_BASE + i as u64);
        let label = label_dist.sample(&mut rng);
        let mut groups = BTreeMap::new();
        let mut multiplier = 1.0;
        for (g, dist) in cfg.group_specs.iter().zip(&group_dists) {
            let c = dist.sample(&mut rng);
            multiplier *= g.multipliers[c];
            groups.insert(g.attribute.clone(), g.categories[c].clone());
        }
        let peak = Gamma::new(1.0 + cfg.concentration.for_class(label) * multiplier, 1.0)
            .map_err(|e| Error::InvalidConfig(format!("concentration: {e}")))?;
        let probs = loop {
            let draws: Vec<f64> = (0..cfg.k)
                .map(|c| if c == label { peak.sample(&mut rng) } else { unit.sample(&mut rng) })
                .collect();
            let sum: f64 = draws.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                break draws.into_iter().map(|d| d / sum).collect();
            }
        };
        records.push(PredictionRecord::new(format!("s{i}"), probs, label, groups)?);
    }
    let names = cfg.class_names.clone().unwrap_or_else(|| default_class_names(cfg.k));
    LabeledDataset::new(records, names, cfg.taxonomy.clone())
}
