//! Reports on fitted models: per-pattern category probabilities, baselines and
//! ratios, feature prevalence, co-occurrence tables and the pattern census.
//!
//! Feature indices are 0-based in the API; report writers print them 1-based.
//! Undefined quantities (zero denominators) are `None`.

use std::collections::HashMap;
use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::map_weights;
use crate::model::{category_probabilities, Hyperparams, LatentFeatureState, ObservationMatrix, WeightStack};

/// Set of active features; the bias is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeaturePattern {
    active: Vec<usize>,
}

impl FeaturePattern {
    pub fn new(mut active: Vec<usize>, k_active: usize) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&bad) = active.iter().find(|&&k| k >= k_active) {
            return Err(Error::InvalidArgument(format!(
                "feature {} outside 1..={k_active}",
                bad + 1
            )));
        }
        Ok(Self { active })
    }

    pub fn none() -> Self {
        Self { active: Vec::new() }
    }

    pub fn single(k: usize) -> Self {
        Self { active: vec![k] }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Extended row (1, z_1, ..., z_K).
    pub fn extended_row(&self, k_active: usize) -> Vec<f64> {
        let mut row = vec![0.0; k_active + 1];
        row[0] = 1.0;
        for &k in &self.active {
            row[k + 1] = 1.0;
        }
        row
    }

    /// Space-separated 1-based indices, or "none".
    pub fn label(&self) -> String {
        if self.active.is_empty() {
            "none".to_string()
        } else {
            self.active.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(" ")
        }
    }

    fn from_row(row: &[bool]) -> Self {
        Self {
            active: row.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect(),
        }
    }
}

/// Category probabilities of every dimension for a row with the given pattern.
pub fn pattern_probabilities(weights: &WeightStack, pattern: &FeaturePattern) -> Result<Vec<Vec<f64>>> {
    let k = weights.k_active();
    if let Some(&bad) = pattern.active.iter().find(|&&j| j >= k) {
        return Err(Error::InvalidArgument(format!("feature {} outside 1..={k}", bad + 1)));
    }
    let row = pattern.extended_row(k);
    weights.matrices().iter().map(|b| category_probabilities(&row, b)).collect()
}

/// Fraction of rows whose entry equals the target (0-based) category, per
/// dimension, over the full sample.
pub fn empirical_baseline(x: &ObservationMatrix, targets: &[usize]) -> Result<Vec<f64>> {
    if targets.len() != x.n_cols() {
        return Err(Error::Dimension(format!(
            "{} targets for {} dimensions",
            targets.len(),
            x.n_cols()
        )));
    }
    for (d, &t) in targets.iter().enumerate() {
        if t >= x.cardinality(d) {
            return Err(Error::InvalidArgument(format!(
                "target category {} outside 1..={} in dimension {}",
                t + 1,
                x.cardinality(d),
                d + 1
            )));
        }
    }
    let n = x.n_rows() as f64;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(d, &t)| (0..x.n_rows()).filter(|&i| x.get(i, d) == t).count() as f64 / n)
        .collect())
}

/// Elementwise probs / baseline; `None` where the baseline is zero.
pub fn probability_ratio(probs: &[f64], baseline: &[f64]) -> Result<Vec<Option<f64>>> {
    if probs.len() != baseline.len() {
        return Err(Error::Dimension("probabilities and baseline differ in length".into()));
    }
    Ok(probs
        .iter()
        .zip(baseline)
        .map(|(&p, &b)| if b > 0.0 { Some(p / b) } else { None })
        .collect())
}

/// m_k / N per feature.
pub fn feature_prevalence(z: &LatentFeatureState) -> Vec<f64> {
    let n = z.n_rows().max(1) as f64;
    z.column_counts().iter().map(|&m| m as f64 / n).collect()
}

/// Fraction of rows in which feature k is the only active feature.
pub fn single_feature_prevalence(z: &LatentFeatureState) -> Vec<f64> {
    let n = z.n_rows().max(1) as f64;
    let mut counts = vec![0usize; z.k_active()];
    for i in 0..z.n_rows() {
        let row = z.row(i);
        let mut on = row.iter().enumerate().filter(|(_, &b)| b);
        if let (Some((k, _)), None) = (on.next(), on.next()) {
            counts[k] += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Fraction of rows possessing at least the features of `pattern` (others
/// unconstrained).
pub fn wildcard_prevalence(z: &LatentFeatureState, pattern: &FeaturePattern) -> Result<f64> {
    if let Some(&bad) = pattern.active.iter().find(|&&k| k >= z.k_active()) {
        return Err(Error::InvalidArgument(format!("feature {} outside 1..={}", bad + 1, z.k_active())));
    }
    let hits = (0..z.n_rows())
        .filter(|&i| pattern.active.iter().all(|&k| z.get(i, k)))
        .count();
    Ok(hits as f64 / z.n_rows().max(1) as f64)
}

/// (empirical, product): empirical[k1,k2] = Σ_n z_nk1 z_nk2 / N and
/// product[k1,k2] = prevalence_k1 · prevalence_k2.
pub fn cooccurrence_tables(z: &LatentFeatureState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = z.k_active();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("co-occurrence needs K₊ >= 2, got {k}")));
    }
    let n = z.n_rows().max(1) as f64;
    let prev = feature_prevalence(z);
    let both = joint_counts(z);
    let empirical = DMatrix::from_fn(k, k, |a, b| both[(a, b)] as f64 / n);
    let product = DMatrix::from_fn(k, k, |a, b| prev[a] * prev[b]);
    Ok((empirical, product))
}

fn joint_counts(z: &LatentFeatureState) -> DMatrix<usize> {
    let k = z.k_active();
    DMatrix::from_fn(k, k, |a, b| {
        z.column(a).iter().zip(z.column(b)).filter(|(&x, &y)| x && y).count()
    })
}

/// P(k2 active | k1 active) = Σ_n z_nk1 z_nk2 / Σ_n z_nk1, row k1 undefined
/// when feature k1 is never active.
pub fn conditional_cooccurrence(z: &LatentFeatureState) -> Vec<Vec<Option<f64>>> {
    let both = joint_counts(z);
    let counts = z.column_counts();
    (0..z.k_active())
        .map(|a| {
            (0..z.k_active())
                .map(|b| {
                    if counts[a] == 0 {
                        None
                    } else {
                        Some(both[(a, b)] as f64 / counts[a] as f64)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orders patterns by their binary value Σ_k z_k 2^k (feature 1 is the least
/// significant bit).
fn binary_value_cmp(a: &[bool], b: &[bool]) -> Ordering {
    for (x, y) in a.iter().rev().zip(b.iter().rev()) {
        match x.cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Distinct row patterns with their counts, most frequent first, ties by
/// binary value ascending; at most `top_m` entries.
pub fn pattern_census(z: &LatentFeatureState, top_m: usize) -> Vec<(FeaturePattern, usize)> {
    let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
    for i in 0..z.n_rows() {
        *counts.entry(z.row(i)).or_default() += 1;
    }
    let mut entries: Vec<(Vec<bool>, usize)> = counts.into_iter().collect();
    entries.sort_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| binary_value_cmp(pa, pb)));
    entries
        .into_iter()
        .take(top_m)
        .map(|(row, c)| (FeaturePattern::from_row(&row), c))
        .collect()
}

/// Complements every column whose prevalence is strictly above `threshold`.
pub fn flip_prevalent_features(z: &LatentFeatureState, threshold: f64) -> (LatentFeatureState, Vec<usize>) {
    let prev = feature_prevalence(z);
    let flipped: Vec<usize> = (0..z.k_active()).filter(|&k| prev[k] > threshold).collect();
    let columns = z
        .columns()
        .iter()
        .enumerate()
        .map(|(k, col)| {
            if flipped.contains(&k) {
                col.iter().map(|&b| !b).collect()
            } else {
                col.clone()
            }
        })
        .collect();
    let out = LatentFeatureState::from_columns(z.n_rows(), columns).expect("same shape");
    (out, flipped)
}

fn default_top_patterns() -> usize {
    10
}

/// Settings of [`build_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// Category (0-based) per dimension whose probability is reported; by
    /// default category 2 (index 1) of every dimension.
    #[serde(default)]
    pub target_categories: Option<Vec<usize>>,
    /// Flip columns with prevalence above this before reporting.
    #[serde(default)]
    pub flip_threshold: Option<f64>,
    #[serde(default = "default_top_patterns")]
    pub top_patterns: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            target_categories: None,
            flip_threshold: None,
            top_patterns: default_top_patterns(),
        }
    }
}

/// One probability curve: a pattern and its target-category probability per
/// dimension, with the ratio to the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternCurve {
    pub pattern: FeaturePattern,
    pub probabilities: Vec<f64>,
    pub ratios: Vec<Option<f64>>,
}

/// Every table and curve of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub z: LatentFeatureState,
    pub weights: WeightStack,
    pub flipped: Vec<usize>,
    pub weights_refit: bool,
    pub targets: Vec<usize>,
    pub baseline: Vec<f64>,
    pub prevalence: Vec<f64>,
    pub single_prevalence: Vec<f64>,
    /// Present when K₊ ≥ 2.
    pub cooccurrence: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub conditional: Vec<Vec<Option<f64>>>,
    pub census: Vec<(FeaturePattern, usize)>,
    /// The empty pattern followed by every single-feature pattern.
    pub curves: Vec<PatternCurve>,
}

/// Builds the full report for (X, Z, B). With a flip threshold, prevalent
/// columns are complemented first and the weights re-fit as B_MAP of the
/// flipped Z.
pub fn build_report(
    x: &ObservationMatrix,
    z: &LatentFeatureState,
    weights: &WeightStack,
    hyper: &Hyperparams,
    options: &ReportOptions,
) -> Result<Report> {
    if z.n_rows() != x.n_rows() {
        return Err(Error::Dimension(format!("Z has {} rows, X has {}", z.n_rows(), x.n_rows())));
    }
    if weights.k_active() != z.k_active() || weights.n_dims() != x.n_cols() {
        return Err(Error::Dimension("weights do not match X and Z".into()));
    }
    let (z, weights, flipped, refit) = match options.flip_threshold {
        Some(t) => {
            let (fz, flipped) = flip_prevalent_features(z, t);
            if flipped.is_empty() {
                (fz, weights.clone(), flipped, false)
            } else {
                let w = map_weights(x, &fz, hyper)?;
                (fz, w, flipped, true)
            }
        }
        None => (z.clone(), weights.clone(), Vec::new(), false),
    };
    let targets = match &options.target_categories {
        Some(t) => t.clone(),
        None => vec![1; x.n_cols()],
    };
    let baseline = empirical_baseline(x, &targets)?;
    let mut patterns = vec![FeaturePattern::none()];
    patterns.extend((0..z.k_active()).map(FeaturePattern::single));
    let curves = patterns
        .into_iter()
        .map(|pattern| {
            let probs = pattern_probabilities(&weights, &pattern)?;
            let probabilities: Vec<f64> = probs.iter().zip(&targets).map(|(p, &t)| p[t]).collect();
            let ratios = probability_ratio(&probabilities, &baseline)?;
            Ok(PatternCurve {
                pattern,
                probabilities,
                ratios,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        prevalence: feature_prevalence(&z),
        single_prevalence: single_feature_prevalence(&z),
        cooccurrence: if z.k_active() >= 2 { Some(cooccurrence_tables(&z)?) } else { None },
        conditional: conditional_cooccurrence(&z),
        census: pattern_census(&z, options.top_patterns),
        curves,
        z,
        weights,
        flipped,
        weights_refit: refit,
        targets,
        baseline,
    })
}
