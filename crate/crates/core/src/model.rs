//! Gaussian Naive Bayes from per-class sufficient statistics.
//!
//! Sites summarise each (attribute, class) cell as a count, a mean and an
//! unbiased sample variance of the perturbed values. Since the noise is
//! independent with known variance, `S^2 - noise_variance` estimates the
//! variance of the undisguised attribute.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::dataset::Table;
use crate::perturb::PerturbedColumn;

/// Base of the variance floor; the applied floor is `base * (1 + mu^2)`.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{values} values but {labels} labels")]
    LengthMismatch { values: usize, labels: usize },
    #[error("class `{class}` has {n} training rows for `{attribute}`; need at least 2")]
    InsufficientClassData {
        attribute: String,
        class: String,
        n: u64,
    },
    #[error("attribute `{attribute}` reports n={n} for class `{class}` but class count is {expected}")]
    InconsistentCounts {
        attribute: String,
        class: String,
        n: u64,
        expected: u64,
    },
    #[error("no statistics for attribute `{attribute}`, class `{class}`")]
    MissingCell { attribute: String, class: String },
    #[error("duplicate statistics for attribute `{attribute}`, class `{class}`")]
    DuplicateCell { attribute: String, class: String },
    #[error("instance lacks attribute `{0}`")]
    MissingAttribute(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Mean and `(n - 1)`-denominator sample variance, two-pass. The variance is
/// zero when fewer than two values are given.
pub fn mean_and_sample_variance(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConditionalStats {
    pub attribute_name: String,
    pub class_label: String,
    pub n: u64,
    pub mean: f64,
    pub sample_variance: f64,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub mu_hat: f64,
    pub var_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeParams {
    pub name: String,
    pub params: BTreeMap<String, ClassParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNBModel {
    /// Sorted lexicographically; also the tie-break order.
    pub class_labels: Vec<String>,
    pub priors: BTreeMap<String, f64>,
    pub attributes: Vec<AttributeParams>,
    pub variance_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub log_scores: BTreeMap<String, f64>,
}

/// Groups labels by class in lexicographic order, keeping row order inside
/// each group.
fn group_by_class<'a>(labels: &'a [String]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    groups
}

/// One [`ClassConditionalStats`] per class present in `labels`, in class order.
pub fn compute_stats(
    column: &PerturbedColumn,
    labels: &[String],
) -> Result<Vec<ClassConditionalStats>, ModelError> {
    if column.values.len() != labels.len() {
        return Err(ModelError::LengthMismatch {
            values: column.values.len(),
            labels: labels.len(),
        });
    }
    group_by_class(labels)
        .into_iter()
        .map(|(class, rows)| {
            let vals: Vec<f64> = rows.iter().map(|&i| column.values[i]).collect();
            if vals.len() < 2 {
                return Err(ModelError::InsufficientClassData {
                    attribute: column.attribute_name.clone(),
                    class: class.to_string(),
                    n: vals.len() as u64,
                });
            }
            let (mean, sample_variance) = mean_and_sample_variance(&vals);
            Ok(ClassConditionalStats {
                attribute_name: column.attribute_name.clone(),
                class_label: class.to_string(),
                n: vals.len() as u64,
                mean,
                sample_variance,
                noise_variance: column.noise_variance,
            })
        })
        .collect()
}

/// Class counts in lexicographic class order.
pub fn class_counts(labels: &[String]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for l in labels {
        *counts.entry(l.clone()).or_insert(0) += 1;
    }
    counts
}

/// Removes the noise variance from the perturbed sample variance and clamps
/// the result at `floor`. The perturbed mean is used unchanged.
pub fn correct_variance(s: &ClassConditionalStats, floor: f64) -> ClassParams {
    ClassParams {
        mu_hat: s.mean,
        var_hat: (s.sample_variance - s.noise_variance).max(floor),
    }
}

/// Builds a model from per-attribute groups of statistics. Attribute order
/// follows `stats`; `floor_base` scales with `1 + mu_hat^2` per cell.
pub fn assemble_model(
    stats: &[Vec<ClassConditionalStats>],
    class_counts: &BTreeMap<String, u64>,
    floor_base: f64,
) -> Result<GaussianNBModel, ModelError> {
    if !(floor_base > 0.0 && floor_base.is_finite()) {
        return Err(ModelError::Invalid(format!("variance floor {floor_base}")));
    }
    let total: u64 = class_counts.values().sum();
    if total == 0 {
        return Err(ModelError::Invalid("no training rows".into()));
    }
    let class_labels: Vec<String> = class_counts.keys().cloned().collect();
    let priors = class_counts
        .iter()
        .map(|(c, &n)| (c.clone(), n as f64 / total as f64))
        .collect();

    let mut attributes = Vec::with_capacity(stats.len());
    for group in stats {
        let Some(name) = group.first().map(|s| s.attribute_name.clone()) else {
            continue;
        };
        let mut params = BTreeMap::new();
        for s in group {
            if s.attribute_name != name {
                return Err(ModelError::Invalid(format!(
                    "group for `{name}` contains `{}`",
                    s.attribute_name
                )));
            }
            let expected = *class_counts.get(&s.class_label).ok_or_else(|| {
                ModelError::InconsistentCounts {
                    attribute: name.clone(),
                    class: s.class_label.clone(),
                    n: s.n,
                    expected: 0,
                }
            })?;
            if s.n != expected {
                return Err(ModelError::InconsistentCounts {
                    attribute: name.clone(),
                    class: s.class_label.clone(),
                    n: s.n,
                    expected,
                });
            }
            let floor = floor_base * (1.0 + s.mean * s.mean);
            if params
                .insert(s.class_label.clone(), correct_variance(s, floor))
                .is_some()
            {
                return Err(ModelError::DuplicateCell {
                    attribute: name.clone(),
                    class: s.class_label.clone(),
                });
            }
        }
        if let Some(missing) = class_labels.iter().find(|c| !params.contains_key(*c)) {
            return Err(ModelError::MissingCell {
                attribute: name,
                class: missing.clone(),
            });
        }
        attributes.push(AttributeParams { name, params });
    }

    Ok(GaussianNBModel {
        class_labels,
        priors,
        attributes,
        variance_floor: floor_base,
    })
}

/// Plaintext centralized model over the given training positions.
pub fn baseline_fit(table: &Table, train: &[usize]) -> Result<GaussianNBModel, ModelError> {
    baseline_fit_with_floor(table, train, DEFAULT_VARIANCE_FLOOR)
}

pub fn baseline_fit_with_floor(
    table: &Table,
    train: &[usize],
    floor_base: f64,
) -> Result<GaussianNBModel, ModelError> {
    let rows: Vec<&crate::dataset::Row> = train.iter().map(|&i| &table.rows[i]).collect();
    let labels: Vec<String> = rows.iter().map(|r| r.class_label.clone()).collect();
    let groups = group_by_class(&labels);
    let mut stats = Vec::with_capacity(table.num_attributes());
    for (a, name) in table.attribute_names.iter().enumerate() {
        let mut group = Vec::with_capacity(groups.len());
        for (class, idx) in &groups {
            if idx.len() < 2 {
                return Err(ModelError::InsufficientClassData {
                    attribute: name.clone(),
                    class: class.to_string(),
                    n: idx.len() as u64,
                });
            }
            let vals: Vec<f64> = idx.iter().map(|&i| rows[i].values[a]).collect();
            let (mean, sample_variance) = mean_and_sample_variance(&vals);
            group.push(ClassConditionalStats {
                attribute_name: name.clone(),
                class_label: class.to_string(),
                n: idx.len() as u64,
                mean,
                sample_variance,
                noise_variance: 0.0,
            });
        }
        stats.push(group);
    }
    assemble_model(&stats, &class_counts(&labels), floor_base)
}

fn log_density(x: f64, p: &ClassParams) -> f64 {
    let d = x - p.mu_hat;
    -0.5 * (2.0 * PI * p.var_hat).ln() - d * d / (2.0 * p.var_hat)
}

impl GaussianNBModel {
    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    /// Checks the structural invariants of a model received from elsewhere.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.class_labels.is_empty() {
            return Err(ModelError::Invalid("no classes".into()));
        }
        if self.class_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Invalid("class labels not sorted and unique".into()));
        }
        let sum: f64 = self.priors.values().sum();
        if (sum - 1.0).abs() > 1e-12 || self.priors.len() != self.class_labels.len() {
            return Err(ModelError::Invalid(format!("priors sum to {sum}")));
        }
        if !(self.variance_floor > 0.0) {
            return Err(ModelError::Invalid("non-positive variance floor".into()));
        }
        for a in &self.attributes {
            for c in &self.class_labels {
                let p = a.params.get(c).ok_or_else(|| ModelError::MissingCell {
                    attribute: a.name.clone(),
                    class: c.clone(),
                })?;
                if !(p.var_hat >= self.variance_floor) || !p.mu_hat.is_finite() {
                    return Err(ModelError::Invalid(format!(
                        "bad parameters for `{}`/`{c}`",
                        a.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Scores values given in model attribute order.
    pub fn classify_values(&self, values: &[f64]) -> Result<Classification, ModelError> {
        if values.len() != self.attributes.len() {
            return Err(ModelError::Invalid(format!(
                "expected {} values, got {}",
                self.attributes.len(),
                values.len()
            )));
        }
        let mut log_scores = BTreeMap::new();
        let mut best: Option<(&str, f64)> = None;
        for class in &self.class_labels {
            let mut score = self.priors[class].ln();
            for (attr, &x) in self.attributes.iter().zip(values) {
                score += log_density(x, &attr.params[class]);
            }
            // strict comparison keeps the lexicographically smallest label on ties
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((class, score));
            }
            log_scores.insert(class.clone(), score);
        }
        let label = best.map(|(c, _)| c.to_string()).unwrap_or_default();
        Ok(Classification { label, log_scores })
    }

    pub fn classify(&self, instance: &HashMap<String, f64>) -> Result<Classification, ModelError> {
        let values = self
            .attributes
            .iter()
            .map(|a| {
                instance
                    .get(&a.name)
                    .copied()
                    .ok_or_else(|| ModelError::MissingAttribute(a.name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.classify_values(&values)
    }

    /// Sorted-key JSON with shortest round-trip float formatting.
    pub fn to_canonical_json(&self) -> String {
        canonical::to_string(self)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: GaussianNBModel =
            serde_json::from_str(s).map_err(|e| ModelError::Invalid(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Row;

    fn col(values: &[f64], noise: f64) -> PerturbedColumn {
        PerturbedColumn {
            attribute_name: "x".into(),
            values: values.to_vec(),
            noise_variance: noise,
        }
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn cell(class: &str, n: u64, mean: f64, s2: f64, noise: f64) -> ClassConditionalStats {
        ClassConditionalStats {
            attribute_name: "x".into(),
            class_label: class.into(),
            n,
            mean,
            sample_variance: s2,
            noise_variance: noise,
        }
    }

    #[test]
    fn stats_single_class() {
        let s = compute_stats(&col(&[1.0, 2.0, 3.0], 0.0), &labels(&["a", "a", "a"])).unwrap();
        assert_eq!(s, vec![cell("a", 3, 2.0, 1.0, 0.0)]);
        let c = compute_stats(&col(&[5.0; 4], 0.3), &labels(&["a"; 4])).unwrap();
        assert_eq!((c[0].mean, c[0].sample_variance, c[0].noise_variance), (5.0, 0.0, 0.3));
    }

    #[test]
    fn stats_two_classes() {
        let s = compute_stats(
            &col(&[0.0, 10.0, 2.0, 12.0], 0.0),
            &labels(&["a", "b", "a", "b"]),
        )
        .unwrap();
        assert_eq!(s, vec![cell("a", 2, 1.0, 2.0, 0.0), cell("b", 2, 11.0, 2.0, 0.0)]);
    }

    #[test]
    fn stats_errors() {
        assert!(matches!(
            compute_stats(&col(&[1.0, 2.0, 3.0], 0.0), &labels(&["a", "a", "b"])),
            Err(ModelError::InsufficientClassData { n: 1, .. })
        ));
        assert!(matches!(
            compute_stats(&col(&[1.0, 2.0], 0.0), &labels(&["a"])),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn variance_correction() {
        assert_eq!(correct_variance(&cell("a", 5, 0.0, 1.0, 0.0), 1e-9).var_hat, 1.0);
        assert_eq!(correct_variance(&cell("a", 5, 0.0, 3.0, 0.5), 1e-9).var_hat, 2.5);
        assert_eq!(correct_variance(&cell("a", 5, 7.0, 0.3, 0.5), 1e-9).var_hat, 1e-9);
        assert_eq!(correct_variance(&cell("a", 5, 7.0, 0.3, 0.5), 1e-9).mu_hat, 7.0);
    }

    #[test]
    fn priors_from_counts() {
        let counts: BTreeMap<String, u64> = [("a".to_string(), 3), ("b".to_string(), 1)].into();
        let stats = vec![vec![cell("a", 3, 0.0, 1.0, 0.0), cell("b", 1, 1.0, 1.0, 0.0)]];
        let m = assemble_model(&stats, &counts, 1e-9).unwrap();
        assert_eq!(m.priors["a"], 0.75);
        assert_eq!(m.priors["b"], 0.25);
        m.validate().unwrap();

        let single: BTreeMap<String, u64> = [("a".to_string(), 4)].into();
        let m = assemble_model(&[vec![cell("a", 4, 0.0, 1.0, 0.0)]], &single, 1e-9).unwrap();
        assert_eq!(m.priors["a"], 1.0);
        assert_eq!(m.classify_values(&[123.0]).unwrap().label, "a");
    }

    #[test]
    fn assemble_errors() {
        let counts: BTreeMap<String, u64> = [("a".to_string(), 6), ("b".to_string(), 2)].into();
        let bad_n = vec![vec![cell("a", 5, 0.0, 1.0, 0.0), cell("b", 2, 0.0, 1.0, 0.0)]];
        assert!(matches!(
            assemble_model(&bad_n, &counts, 1e-9),
            Err(ModelError::InconsistentCounts { n: 5, expected: 6, .. })
        ));
        let missing = vec![vec![cell("a", 6, 0.0, 1.0, 0.0)]];
        assert!(matches!(
            assemble_model(&missing, &counts, 1e-9),
            Err(ModelError::MissingCell { .. })
        ));
        let dup = vec![vec![
            cell("a", 6, 0.0, 1.0, 0.0),
            cell("a", 6, 0.0, 1.0, 0.0),
            cell("b", 2, 0.0, 1.0, 0.0),
        ]];
        assert!(matches!(
            assemble_model(&dup, &counts, 1e-9),
            Err(ModelError::DuplicateCell { .. })
        ));
    }

    #[test]
    fn floor_scales_with_mean() {
        let counts: BTreeMap<String, u64> = [("a".to_string(), 3)].into();
        let m = assemble_model(&[vec![cell("a", 3, 100.0, 0.2, 0.5)]], &counts, 1e-9).unwrap();
        let p = m.attributes[0].params["a"];
        assert_eq!(p.var_hat, 1e-9 * (1.0 + 100.0 * 100.0));
        assert!(p.var_hat >= m.variance_floor);
    }

    fn two_class_model(mu_a: f64, mu_b: f64) -> GaussianNBModel {
        let counts: BTreeMap<String, u64> = [("a".to_string(), 2), ("b".to_string(), 2)].into();
        assemble_model(
            &[vec![cell("a", 2, mu_a, 1.0, 0.0), cell("b", 2, mu_b, 1.0, 0.0)]],
            &counts,
            1e-9,
        )
        .unwrap()
    }

    #[test]
    fn classifies_nearest_mean() {
        let m = two_class_model(0.0, 10.0);
        let c = m.classify_values(&[1.0]).unwrap();
        assert_eq!(c.label, "a");
        // ln 0.5 - 0.5 ln(2 pi) - 0.5 for class a; the b term has (1-10)^2/2
        let base = 0.5f64.ln() - 0.5 * (2.0 * PI).ln();
        assert!((c.log_scores["a"] - (base - 0.5)).abs() < 1e-12);
        assert!((c.log_scores["b"] - (base - 40.5)).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_smaller_label() {
        let m = two_class_model(-3.0, 3.0);
        assert_eq!(m.classify_values(&[0.0]).unwrap().label, "a");
        let flipped = two_class_model(3.0, -3.0);
        assert_eq!(flipped.classify_values(&[0.0]).unwrap().label, "a");
    }

    #[test]
    fn classify_by_name_requires_all_attributes() {
        let m = two_class_model(0.0, 1.0);
        let empty = HashMap::new();
        assert_eq!(m.classify(&empty), Err(ModelError::MissingAttribute("x".into())));
        let inst: HashMap<String, f64> = [("x".to_string(), 0.9)].into();
        assert_eq!(m.classify(&inst).unwrap().label, "b");
    }

    #[test]
    fn baseline_on_toy_table() {
        // a: x = 1, 3 -> mean 2, S^2 = 2 ; b: x = 10, 14 -> mean 12, S^2 = 8
        let rows = [(1.0, "a"), (10.0, "b"), (3.0, "a"), (14.0, "b")]
            .iter()
            .enumerate()
            .map(|(i, (v, c))| Row { row_id: i as u64, values: vec![*v], class_label: c.to_string() })
            .collect();
        let t = Table {
            name: "toy".into(),
            attribute_names: vec!["x".into()],
            label_name: "y".into(),
            rows,
        };
        let m = baseline_fit(&t, &[0, 1, 2, 3]).unwrap();
        let p = &m.attributes[0].params;
        assert_eq!((p["a"].mu_hat, p["a"].var_hat), (2.0, 2.0));
        assert_eq!((p["b"].mu_hat, p["b"].var_hat), (12.0, 8.0));
        assert_eq!(m.priors["a"], 0.5);
    }

    #[test]
    fn canonical_json_roundtrip() {
        let m = two_class_model(0.1, 1.0 / 3.0);
        let s = m.to_canonical_json();
        assert!(s.find("\"attributes\"").unwrap() < s.find("\"class_labels\"").unwrap());
        let back = GaussianNBModel::from_json(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_canonical_json(), s);
    }
}
