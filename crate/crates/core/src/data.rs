//! Prediction records, labeled datasets and seeded resampling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Maximum allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// One model output: a probability vector over `K` classes, the true label
/// and optional flat group attributes (e.g. `site=A`).
///
/// Construction validates the vector and rescales it to sum to one when it
/// is off by more than float roundoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct PredictionRecord {
    id: String,
    probs: Vec<f64>,
    label: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    groups: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    probs: Vec<f64>,
    label: usize,
    #[serde(default)]
    groups: BTreeMap<String, String>,
}

impl TryFrom<RawRecord> for PredictionRecord {
    type Error = Error;

    fn try_from(raw: RawRecord) -> Result<Self> {
        PredictionRecord::new(raw.id, raw.probs, raw.label, raw.groups)
    }
}

impl PredictionRecord {
    pub fn new(
        id: impl Into<String>,
        mut probs: Vec<f64>,
        label: usize,
        groups: BTreeMap<String, String>,
    ) -> Result<Self> {
        let k = probs.len();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        for (class, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::ProbabilityOutOfRange { class, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::ProbabilitySum { sum });
        }
        if label >= k {
            return Err(Error::LabelOutOfRange { label, k });
        }
        // sums off by more than float roundoff are rescaled; roundoff is
        // left alone so stored vectors load back bit for bit
        if (sum - 1.0).abs() > k as f64 * f64::EPSILON {
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(Self {
            id: id.into(),
            probs,
            label,
            groups,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn groups(&self) -> &BTreeMap<String, String> {
        &self.groups
    }

    pub fn group(&self, attribute: &str) -> Option<&str> {
        self.groups.get(attribute).map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    pub fn is_correct(&self) -> bool {
        self.argmax() == self.label
    }

    pub(crate) fn with_id(&self, id: String) -> Self {
        Self {
            id,
            ..self.clone()
        }
    }

    pub(crate) fn groups_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.groups
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Mapping from class index to a coarser superclass (e.g. benign/malignant).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTaxonomy")]
pub struct Taxonomy {
    superclass_of: Vec<usize>,
    superclass_names: Vec<String>,
}

#[derive(Deserialize)]
struct RawTaxonomy {
    superclass_of: Vec<usize>,
    superclass_names: Vec<String>,
}

impl TryFrom<RawTaxonomy> for Taxonomy {
    type Error = Error;

    fn try_from(raw: RawTaxonomy) -> Result<Self> {
        Taxonomy::new(raw.superclass_of, raw.superclass_names)
    }
}

impl Taxonomy {
    pub fn new(superclass_of: Vec<usize>, superclass_names: Vec<String>) -> Result<Self> {
        if superclass_names.is_empty() {
            return Err(Error::InvalidTaxonomy("no superclasses".to_string()));
        }
        if let Some((class, &s)) = superclass_of
            .iter()
            .enumerate()
            .find(|(_, &s)| s >= superclass_names.len())
        {
            return Err(Error::InvalidTaxonomy(format!(
                "class {class} maps to superclass {s}, only {} exist",
                superclass_names.len()
            )));
        }
        Ok(Self {
            superclass_of,
            superclass_names,
        })
    }

    /// Superclass names default to `super_<i>`.
    pub fn with_default_names(superclass_of: Vec<usize>) -> Result<Self> {
        let n = superclass_of.iter().copied().max().map_or(0, |m| m + 1);
        let names = (0..n).map(|i| format!("super_{i}")).collect();
        Self::new(superclass_of, names)
    }

    pub fn superclass(&self, class: usize) -> Option<usize> {
        self.superclass_of.get(class).copied()
    }

    pub fn superclass_of(&self) -> &[usize] {
        &self.superclass_of
    }

    pub fn superclass_names(&self) -> &[String] {
        &self.superclass_names
    }

    pub fn num_classes(&self) -> usize {
        self.superclass_of.len()
    }

    pub fn num_superclasses(&self) -> usize {
        self.superclass_names.len()
    }
}

/// A validated collection of prediction records sharing one label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct LabeledDataset {
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taxonomy: Option<Taxonomy>,
    records: Vec<PredictionRecord>,
}

#[derive(Deserialize)]
struct RawDataset {
    class_names: Vec<String>,
    #[serde(default)]
    taxonomy: Option<Taxonomy>,
    records: Vec<PredictionRecord>,
}

impl TryFrom<RawDataset> for LabeledDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        LabeledDataset::new(raw.records, raw.class_names, raw.taxonomy)
    }
}

impl LabeledDataset {
    pub fn new(
        records: Vec<PredictionRecord>,
        class_names: Vec<String>,
        taxonomy: Option<Taxonomy>,
    ) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::TooFewClasses(k));
        }
        if let Some(r) = records.iter().find(|r| r.num_classes() != k) {
            return Err(Error::InconsistentClassCount {
                id: r.id.clone(),
                expected: k,
                found: r.num_classes(),
            });
        }
        if let Some(t) = &taxonomy {
            if t.num_classes() != k {
                return Err(Error::InvalidTaxonomy(format!(
                    "taxonomy covers {} classes, dataset has {k}",
                    t.num_classes()
                )));
            }
        }
        Ok(Self {
            class_names,
            taxonomy,
            records,
        })
    }

    /// Class names default to `class_<i>`.
    pub fn with_default_names(records: Vec<PredictionRecord>, k: usize) -> Result<Self> {
        Self::new(records, default_class_names(k), None)
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn taxonomy(&self) -> Option<&Taxonomy> {
        self.taxonomy.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same class names and taxonomy, different records. Records must already
    /// have the right number of classes.
    pub fn with_records(&self, records: Vec<PredictionRecord>) -> Result<Self> {
        Self::new(records, self.class_names.clone(), self.taxonomy.clone())
    }

    pub fn with_taxonomy(mut self, taxonomy: Option<Taxonomy>) -> Result<Self> {
        if let Some(t) = &taxonomy {
            if t.num_classes() != self.num_classes() {
                return Err(Error::InvalidTaxonomy(format!(
                    "taxonomy covers {} classes, dataset has {}",
                    t.num_classes(),
                    self.num_classes()
                )));
            }
        }
        self.taxonomy = taxonomy;
        Ok(self)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            class_names: self.class_names.clone(),
            taxonomy: self.taxonomy.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Empirical label distribution; all zeros for an empty dataset.
    pub fn class_distribution(&self) -> Vec<f64> {
        let n = self.len();
        self.class_counts()
            .into_iter()
            .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    /// Top-1 accuracy of the argmax prediction.
    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.is_correct()).count() as f64 / self.len() as f64
    }

    /// Sorted, deduplicated attribute names present on any record.
    pub fn group_attributes(&self) -> Vec<String> {
        let mut attrs: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.groups.keys().cloned())
            .collect();
        attrs.sort();
        attrs.dedup();
        attrs
    }

    /// Adds an attribute named `a+b+...` whose value is the `|`-joined values
    /// of the listed attributes, so combinations can be used as Mondrian cells.
    /// Records missing any listed attribute get no combined value.
    pub fn with_combined_group(&self, attributes: &[&str]) -> Self {
        let name = attributes.join("+");
        let mut out = self.clone();
        for r in &mut out.records {
            let values: Option<Vec<&str>> = attributes.iter().map(|a| r.group(a)).collect();
            if let Some(values) = values {
                let joined = values.join("|");
                r.groups_mut().insert(name.clone(), joined);
            }
        }
        out
    }
}

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Parameters of a calibration/evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stratify_by_class: bool,
}

/// Splits `ds` into a calibration set of exactly `calibration_size` records
/// and an evaluation set holding the rest. Both keep the input order.
///
/// Unstratified: Fisher–Yates shuffle of the record indices on
/// `rng::stream(seed, SPLIT_STREAM)`, first `calibration_size` go to
/// calibration. Stratified: per-class quotas by largest remainder (ties to
/// the lower class index), then a shuffle of each class's indices in class
/// order on the same stream.
pub fn split_dataset(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let n = ds.len();
    let size = spec.calibration_size;
    if size == 0 || size >= n {
        return Err(Error::InvalidSplitSize { size, len: n });
    }
    let mut rng = rng::stream(spec.seed, rng::SPLIT_STREAM);
    let mut in_cal = vec![false; n];

    if spec.stratify_by_class {
        let counts = ds.class_counts();
        let quotas = largest_remainder(&counts, size, n);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
        for (i, r) in ds.records.iter().enumerate() {
            by_class[r.label].push(i);
        }
        for (members, quota) in by_class.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            for &i in &members[..quota] {
                in_cal[i] = true;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..size] {
            in_cal[i] = true;
        }
    }

    let (cal, eval): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| in_cal[i]);
    Ok((ds.subset(&cal), ds.subset(&eval)))
}

/// Integer apportionment of `size` among classes proportional to `counts`.
fn largest_remainder(counts: &[usize], size: usize, total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * size / total).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // remainder numerators are exact integers; stable sort keeps index order on ties
    order.sort_by(|&a, &b| ((counts[b] * size) % total).cmp(&((counts[a] * size) % total)));
    for &k in order.iter().take(size - assigned) {
        quotas[k] += 1;
    }
    quotas
}

/// Draws `size` records with replacement, each with probability proportional
/// to `class_weights[label]`. Drawn records get ids `<original>#<draw>` so
/// duplicates stay distinguishable.
pub fn resample_weighted(
    ds: &LabeledDataset,
    class_weights: &[f64],
    size: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let k = ds.num_classes();
    if class_weights.len() != k {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {k} classes",
            class_weights.len()
        )));
    }
    if let Some(w) = class_weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {w} is not a finite nonnegative number")));
    }
    let counts = ds.class_counts();
    if let Some(class) = (0..k).find(|&c| class_weights[c] > 0.0 && counts[c] == 0) {
        return Err(Error::EmptyWeightedClass { class });
    }
    if !class_weights.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidWeights("all weights are zero".to_string()));
    }
    if size == 0 {
        return ds.with_records(Vec::new());
    }
    let per_record: Vec<f64> = ds.records.iter().map(|r| class_weights[r.label]).collect();
    let dist = WeightedIndex::new(&per_record)
        .map_err(|e| Error::InvalidWeights(format!("{e}")))?;
    let mut rng = rng::stream(seed, rng::RESAMPLE_STREAM);
    let records = (0..size)
        .map(|draw| {
            let r = &ds.records[dist.sample(&mut rng)];
            r.with_id(format!("{}#{draw}", r.id))
        })
        .collect();
    ds.with_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rec(id: &str, probs: &[f64], label: usize) -> PredictionRecord {
        PredictionRecord::new(id, probs.to_vec(), label, BTreeMap::new()).unwrap()
    }

    fn two_class(n0: usize, n1: usize) -> LabeledDataset {
        let mut records = Vec::new();
        for i in 0..n0 {
            records.push(rec(&format!("a{i}"), &[0.7, 0.3], 0));
        }
        for i in 0..n1 {
            records.push(rec(&format!("b{i}"), &[0.2, 0.8], 1));
        }
        LabeledDataset::with_default_names(records, 2).unwrap()
    }

    #[test]
    fn record_rejects_bad_sum() {
        let err = PredictionRecord::new("x", vec![0.5, 0.2, 0.2], 0, BTreeMap::new()).unwrap_err();
        match err {
            Error::ProbabilitySum { sum } => assert!((sum - 0.9).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_rejects_label_out_of_range() {
        let probs = vec![1.0 / 7.0; 7];
        let err = PredictionRecord::new("x", probs, 7, BTreeMap::new()).unwrap_err();
        assert_eq!(err, Error::LabelOutOfRange { label: 7, k: 7 });
    }

    #[test]
    fn record_rejects_out_of_range_entries_and_single_class() {
        assert!(matches!(
            PredictionRecord::new("x", vec![1.2, -0.2], 0, BTreeMap::new()),
            Err(Error::ProbabilityOutOfRange { class: 0, .. })
        ));
        assert_eq!(
            PredictionRecord::new("x", vec![1.0], 0, BTreeMap::new()).unwrap_err(),
            Error::TooFewClasses(1)
        );
    }

    #[test]
    fn record_renormalizes_within_tolerance() {
        let r = rec("x", &[0.6 + 5e-7, 0.3, 0.1], 0);
        let s: f64 = r.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(r.probs()[0] > 0.6);
        let exact = rec("y", &[0.6, 0.3, 0.1], 0);
        assert_eq!(exact.probs(), &[0.6, 0.3, 0.1]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn dataset_rejects_inconsistent_k() {
        let records = vec![rec("a", &[0.5, 0.5], 0), rec("b", &[0.2, 0.3, 0.5], 1)];
        assert!(matches!(
            LabeledDataset::with_default_names(records, 2),
            Err(Error::InconsistentClassCount { expected: 2, found: 3, .. })
        ));
    }

    #[test]
    fn taxonomy_validation() {
        assert!(Taxonomy::new(vec![0, 2], vec!["a".into(), "b".into()]).is_err());
        let t = Taxonomy::with_default_names(vec![0, 1, 0]).unwrap();
        assert_eq!(t.num_superclasses(), 2);
        let ds = two_class(1, 1);
        assert!(ds.clone().with_taxonomy(Some(t)).is_err());
    }

    #[test]
    fn split_partitions_disjointly() {
        let mut records = Vec::new();
        for i in 0..100 {
            records.push(rec(&format!("r{i}"), &[0.5, 0.5], i % 2));
        }
        let ds = LabeledDataset::with_default_names(records, 2).unwrap();
        let spec = SplitSpec {
            calibration_size: 30,
            seed: 1,
            stratify_by_class: false,
        };
        let (cal, eval) = split_dataset(&ds, &spec).unwrap();
        assert_eq!(cal.len(), 30);
        assert_eq!(eval.len(), 70);
        let a: BTreeSet<&str> = cal.records().iter().map(|r| r.id()).collect();
        let b: BTreeSet<&str> = eval.records().iter().map(|r| r.id()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 100);

        let (cal2, eval2) = split_dataset(&ds, &spec).unwrap();
        assert_eq!(cal, cal2);
        assert_eq!(eval, eval2);
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let ds = two_class(50, 50);
        let spec = SplitSpec {
            calibration_size: 10,
            seed: 3,
            stratify_by_class: true,
        };
        let (cal, _) = split_dataset(&ds, &spec).unwrap();
        assert_eq!(cal.class_counts(), vec![5, 5]);

        // 70/30 with an awkward size: 7 * 0.7 = 4.9, 7 * 0.3 = 2.1 -> 5 + 2
        let ds = two_class(70, 30);
        let spec = SplitSpec {
            calibration_size: 7,
            seed: 3,
            stratify_by_class: true,
        };
        let (cal, eval) = split_dataset(&ds, &spec).unwrap();
        assert_eq!(cal.class_counts(), vec![5, 2]);
        assert_eq!(eval.class_counts(), vec![65, 28]);
    }

    #[test]
    fn split_rejects_bad_sizes() {
        let ds = two_class(5, 5);
        for size in [0, 10, 11] {
            let spec = SplitSpec {
                calibration_size: size,
                seed: 0,
                stratify_by_class: false,
            };
            assert_eq!(
                split_dataset(&ds, &spec).unwrap_err(),
                Error::InvalidSplitSize { size, len: 10 }
            );
        }
    }

    #[test]
    fn resample_degenerate_weights() {
        let ds = two_class(20, 20);
        let out = resample_weighted(&ds, &[1.0, 0.0], 50, 4).unwrap();
        assert_eq!(out.len(), 50);
        assert!(out.records().iter().all(|r| r.label() == 0));
    }

    #[test]
    fn resample_rejects_weight_on_empty_class() {
        let ds = two_class(20, 0);
        assert_eq!(
            resample_weighted(&ds, &[1.0, 1.0], 5, 0).unwrap_err(),
            Error::EmptyWeightedClass { class: 1 }
        );
        assert!(resample_weighted(&ds, &[1.0, 0.0], 5, 0).is_ok());
        assert!(resample_weighted(&ds, &[0.0, 0.0], 5, 0).is_err());
        assert!(resample_weighted(&ds, &[1.0], 5, 0).is_err());
    }

    #[test]
    fn resample_targets_weighted_fraction() {
        // class fractions equal, weights 0.1/0.9 -> P(class 1) = 0.9
        let ds = two_class(100, 100);
        let out = resample_weighted(&ds, &[0.1, 0.9], 10_000, 11).unwrap();
        let frac = out.class_distribution()[1];
        assert!((frac - 0.9).abs() <= 0.01, "fraction {frac}");
    }

    #[test]
    fn resample_uniform_weights_preserve_distribution() {
        // input 30% class 1; binomial se at n=5000 is sqrt(.21/5000)
        let ds = two_class(70, 30);
        let out = resample_weighted(&ds, &[1.0, 1.0], 5000, 5).unwrap();
        let se = libm::sqrt(0.3 * 0.7 / 5000.0);
        assert!((out.class_distribution()[1] - 0.3).abs() <= 3.0 * se);
        let ids: BTreeSet<&str> = out.records().iter().map(|r| r.id()).collect();
        assert_eq!(ids.len(), 5000);
    }

    #[test]
    fn combined_groups_concatenate() {
        let mut g = BTreeMap::new();
        g.insert("sex".to_string(), "f".to_string());
        g.insert("skin".to_string(), "v".to_string());
        let r1 = PredictionRecord::new("a", vec![0.5, 0.5], 0, g).unwrap();
        let r2 = rec("b", &[0.5, 0.5], 1);
        let ds = LabeledDataset::with_default_names(vec![r1, r2], 2).unwrap();
        let out = ds.with_combined_group(&["sex", "skin"]);
        assert_eq!(out.records()[0].group("sex+skin"), Some("f|v"));
        assert_eq!(out.records()[1].group("sex+skin"), None);
        assert_eq!(out.group_attributes(), vec!["sex", "sex+skin", "skin"]);
    }
}
