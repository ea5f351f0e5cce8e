//! Style representation metrics: multi-class style accuracy (nearest
//! centroid, weighted), per-style polarity accuracy, and exact
//! rank-statistic AUC for same-author pair verification.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Polarity;
use crate::interpret::centroid;
use crate::numerics::{cosine_similarity, NumericsError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("expected {expected} classes, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("class '{0}' has fewer than 2 examples")]
    InsufficientClass(String),
    #[error("style '{0}' is missing a polarity")]
    MissingPolarity(String),
    #[error("pairs must include both same and different labels")]
    SingleClassPairs,
    #[error("embedding/label counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassStat {
    pub class: String,
    pub support: usize,
    pub accuracy: f64,
}

fn parity_split<'a>(items: &[&'a Vec<f64>]) -> (Vec<&'a Vec<f64>>, Vec<&'a Vec<f64>>) {
    let fit = items.iter().step_by(2).copied().collect();
    let holdout = items.iter().skip(1).step_by(2).copied().collect();
    (fit, holdout)
}

fn nearest(emb: &[f64], centroids: &[Vec<f64>]) -> Result<usize> {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let dist = 1.0 - cosine_similarity(emb, c)?;
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    Ok(best)
}

/// Multi-class nearest-centroid classification over style labels with a
/// deterministic index-parity fit/holdout split per class. Returns the
/// support-weighted holdout accuracy and per-class stats. Class indices
/// are lexicographic over the label set; centroid ties go to the lowest.
pub fn stel_accuracy_detailed(
    embeddings: &[Vec<f64>],
    labels: &[String],
    n_classes: usize,
) -> Result<(f64, Vec<ClassStat>)> {
    if embeddings.len() != labels.len() {
        return Err(EvalError::LengthMismatch(embeddings.len(), labels.len()));
    }
    let mut by_class: BTreeMap<&String, Vec<&Vec<f64>>> = BTreeMap::new();
    for (emb, label) in embeddings.iter().zip(labels) {
        by_class.entry(label).or_default().push(emb);
    }
    if by_class.len() < 2 {
        return Err(EvalError::TooFewClasses(by_class.len()));
    }
    if by_class.len() != n_classes {
        return Err(EvalError::ClassCountMismatch { expected: n_classes, found: by_class.len() });
    }
    let mut centroids = Vec::with_capacity(by_class.len());
    let mut holdouts: Vec<(String, Vec<&Vec<f64>>)> = Vec::new();
    for (label, members) in &by_class {
        if members.len() < 2 {
            return Err(EvalError::InsufficientClass((*label).clone()));
        }
        let (fit, holdout) = parity_split(members);
        let fit_owned: Vec<Vec<f64>> = fit.into_iter().cloned().collect();
        centroids.push(centroid(&fit_owned));
        holdouts.push(((*label).clone(), holdout));
    }
    let total: usize = holdouts.iter().map(|(_, h)| h.len()).sum();
    let mut weighted = 0.0;
    let mut per_class = Vec::with_capacity(holdouts.len());
    for (ci, (label, holdout)) in holdouts.iter().enumerate() {
        let mut correct = 0usize;
        for emb in holdout {
            if nearest(emb, &centroids)? == ci {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / holdout.len() as f64;
        weighted += accuracy * holdout.len() as f64 / total as f64;
        per_class.push(ClassStat { class: label.clone(), support: holdout.len(), accuracy });
    }
    Ok((weighted, per_class))
}

pub fn stel_accuracy(
    embeddings: &[Vec<f64>],
    labels: &[String],
    n_classes: usize,
) -> Result<f64> {
    stel_accuracy_detailed(embeddings, labels, n_classes).map(|(acc, _)| acc)
}

/// Per style: binary nearest-centroid accuracy between polarities on the
/// parity holdout; final score is the unweighted mean across styles.
pub fn soc_accuracy(
    embeddings: &[Vec<f64>],
    styles: &[String],
    polarities: &[Polarity],
) -> Result<f64> {
    if embeddings.len() != styles.len() || styles.len() != polarities.len() {
        return Err(EvalError::LengthMismatch(embeddings.len(), styles.len()));
    }
    let mut by_style: BTreeMap<&String, (Vec<&Vec<f64>>, Vec<&Vec<f64>>)> = BTreeMap::new();
    for ((emb, style), pol) in embeddings.iter().zip(styles).zip(polarities) {
        let entry = by_style.entry(style).or_default();
        match pol {
            Polarity::Pos => entry.0.push(emb),
            Polarity::Neg => entry.1.push(emb),
        }
    }
    let mut total = 0.0;
    for (style, (pos, neg)) in &by_style {
        if pos.is_empty() || neg.is_empty() {
            return Err(EvalError::MissingPolarity((*style).clone()));
        }
        if pos.len() < 2 || neg.len() < 2 {
            return Err(EvalError::InsufficientClass((*style).clone()));
        }
        let (fit_pos, hold_pos) = parity_split(pos);
        let (fit_neg, hold_neg) = parity_split(neg);
        let fit_pos: Vec<Vec<f64>> = fit_pos.into_iter().cloned().collect();
        let fit_neg: Vec<Vec<f64>> = fit_neg.into_iter().cloned().collect();
        let centroids = vec![centroid(&fit_pos), centroid(&fit_neg)];
        let mut correct = 0usize;
        let mut count = 0usize;
        for h in &hold_pos {
            if nearest(h, &centroids)? == 0 {
                correct += 1;
            }
            count += 1;
        }
        for h in &hold_neg {
            if nearest(h, &centroids)? == 1 {
                correct += 1;
            }
            count += 1;
        }
        total += correct as f64 / count as f64;
    }
    Ok(total / by_style.len() as f64)
}

/// Exact ROC AUC via the rank statistic: P(score_pos > score_neg) plus
/// half the tie probability. Average ranks make ties exact.
pub fn auc(pairs: &[(f64, bool)]) -> Result<f64> {
    let p = pairs.iter().filter(|(_, same)| *same).count();
    let n = pairs.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClassPairs);
    }
    let mut indexed: Vec<(f64, bool)> = pairs.to_vec();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // average ranks over tie groups (1-based ranks)
    let mut rank_pos_sum = 0.0;
    let mut i = 0usize;
    while i < indexed.len() {
        let mut j = i;
        while j < indexed.len() && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for item in &indexed[i..j] {
            if item.1 {
                rank_pos_sum += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_pos_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Metric report with stable key order; values round-trip losslessly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_class: Vec<ClassStat>,
    pub dataset_sizes: BTreeMap<String, usize>,
    pub meta: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport {
            metrics: BTreeMap::new(),
            per_class: Vec::new(),
            dataset_sizes: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }
}

impl Default for EvalReport {
    fn default() -> Self {
        Self::new()
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| EvalError::Serialization(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Serialization(e.to_string()))
}

/// Optional per-class CSV: class,support,accuracy.
pub fn write_per_class_csv(stats: &[ClassStat], path: &Path) -> Result<()> {
    let mut out = String::from("class,support,accuracy\n");
    for s in stats {
        out.push_str(&format!("{},{},{}\n", s.class, s.support, s.accuracy));
    }
    std::fs::write(path, out)?;
    Ok(())
}
