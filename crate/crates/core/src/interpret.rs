//! Sense-level controllability: gain-based ablation, per-style probing,
//! best-sense assignment, and the edit-locality metrics (set distance,
//! target editability, other-style shifts).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledSentence, Polarity};
use crate::encoder::Model;
use crate::numerics::{cosine_similarity, NumericsError};
use crate::pooling::{encode_batch, PoolError, PoolingSpec};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("style '{style}' needs at least {needed} examples per polarity")]
    InsufficientData { style: String, needed: usize },
    #[error("style '{0}' is missing a polarity")]
    MissingPolarity(String),
    #[error("no other styles to measure shifts against")]
    NoOtherStyles,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed probe matrix: {0}")]
    MalformedMatrix(String),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

/// Arithmetic mean of a set of embeddings.
pub fn centroid(set: &[Vec<f64>]) -> Vec<f64> {
    let d = set[0].len();
    let mut mu = vec![0.0; d];
    for v in set {
        for (m, x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mu.iter_mut() {
        *m /= set.len() as f64;
    }
    mu
}

/// Mean cosine distance from a set of embeddings to a centroid:
/// d(A, mu) = (1/|A|) sum over a of (1 - cos(a, mu)).
pub fn set_distance(set: &[Vec<f64>], mu: &[f64]) -> Result<f64> {
    if set.is_empty() {
        return Err(InterpretError::Degenerate("empty embedding set".into()));
    }
    let mut total = 0.0;
    for a in set {
        total += 1.0 - cosine_similarity(a, mu)?;
    }
    Ok(total / set.len() as f64)
}

/// Relative reduction in distance to the opposite-polarity centroid:
/// (d(P_orig, mu) - d(P_edit, mu)) / d(P_orig, mu).
pub fn target_editability(
    p_orig: &[Vec<f64>],
    p_edit: &[Vec<f64>],
    mu_opposite: &[f64],
) -> Result<f64> {
    let d_orig = set_distance(p_orig, mu_opposite)?;
    let d_edit = set_distance(p_edit, mu_opposite)?;
    if d_orig == 0.0 {
        return Err(InterpretError::Degenerate(
            "original distance is zero; editability undefined".into(),
        ));
    }
    Ok((d_orig - d_edit) / d_orig)
}

/// One style's embeddings by polarity, with centroids.
#[derive(Clone, Debug)]
pub struct StyleSet {
    pub style: String,
    pub p_pos: Vec<Vec<f64>>,
    pub p_neg: Vec<Vec<f64>>,
    pub mu_pos: Vec<f64>,
    pub mu_neg: Vec<f64>,
}

impl StyleSet {
    pub fn new(style: String, p_pos: Vec<Vec<f64>>, p_neg: Vec<Vec<f64>>) -> Result<StyleSet> {
        if p_pos.is_empty() || p_neg.is_empty() {
            return Err(InterpretError::MissingPolarity(style));
        }
        let mu_pos = centroid(&p_pos);
        let mu_neg = centroid(&p_neg);
        Ok(StyleSet { style, p_pos, p_neg, mu_pos, mu_neg })
    }
}

#[derive(Clone, Debug)]
pub struct LocalityShifts {
    pub per_style: Vec<(String, f64)>,
    pub avg_other: f64,
    pub max_other: f64,
}

/// Shifts the edit induces on other styles, measured against each other
/// style's negative centroid, plus their average and maximum.
pub fn locality_shifts(
    p_orig: &[Vec<f64>],
    p_edit: &[Vec<f64>],
    other_styles: &[StyleSet],
) -> Result<LocalityShifts> {
    if other_styles.is_empty() {
        return Err(InterpretError::NoOtherStyles);
    }
    let mut per_style = Vec::with_capacity(other_styles.len());
    for other in other_styles {
        let shift = target_editability(p_orig, p_edit, &other.mu_neg)?;
        per_style.push((other.style.clone(), shift));
    }
    let avg_other = per_style.iter().map(|(_, v)| v).sum::<f64>() / per_style.len() as f64;
    let max_other =
        per_style.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    Ok(LocalityShifts { per_style, avg_other, max_other })
}

/// Probing activations: per (style, sense) the holdout accuracy of a
/// nearest-centroid classifier separating the style's polarities using
/// sense-isolated embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMatrix {
    pub styles: Vec<String>,
    /// styles x k, entries in [0, 1].
    pub activations: Vec<Vec<f64>>,
}

fn group_by_style(
    labeled: &[LabeledSentence],
) -> BTreeMap<String, (Vec<String>, Vec<String>)> {
    let mut groups: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for l in labeled {
        let entry = groups.entry(l.style.clone()).or_default();
        match l.polarity {
            Polarity::Pos => entry.0.push(l.text.clone()),
            Polarity::Neg => entry.1.push(l.text.clone()),
        }
    }
    groups
}

/// Even indices fit, odd indices hold out.
fn parity_split<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let fit = items.iter().step_by(2).cloned().collect();
    let holdout = items.iter().skip(1).step_by(2).cloned().collect();
    (fit, holdout)
}

/// Nearest-centroid label by cosine distance; ties go to the lowest class
/// index (pos before neg).
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

fn binary_holdout_accuracy(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
) -> Result<f64> {
    let (fit_pos, hold_pos) = parity_split(pos);
    let (fit_neg, hold_neg) = parity_split(neg);
    let centroids = [centroid(&fit_pos), centroid(&fit_neg)];
    let mut correct = 0usize;
    let mut total = 0usize;
    for h in &hold_pos {
        if nearest(h, &centroids)? == 0 {
            correct += 1;
        }
        total += 1;
    }
    for h in &hold_neg {
        if nearest(h, &centroids)? == 1 {
            correct += 1;
        }
        total += 1;
    }
    Ok(correct as f64 / total as f64)
}

/// A[x, l] = holdout accuracy distinguishing polarity of style x from
/// sense-l-only embeddings (gains one-hot at l). Deterministic: the
/// fit/holdout split is by example index parity.
pub fn probe_activations(
    model: &Model,
    labeled: &[LabeledSentence],
    spec: &PoolingSpec,
    threads: usize,
) -> Result<ProbeMatrix> {
    let groups = group_by_style(labeled);
    let k = model.cfg.k;
    let mut styles = Vec::new();
    let mut activations = Vec::new();
    for (style, (pos_texts, neg_texts)) in &groups {
        if pos_texts.is_empty() || neg_texts.is_empty() {
            return Err(InterpretError::MissingPolarity(style.clone()));
        }
        if pos_texts.len() < 2 || neg_texts.len() < 2 {
            return Err(InterpretError::InsufficientData { style: style.clone(), needed: 2 });
        }
        let mut row = Vec::with_capacity(k);
        for l in 0..k {
            let mut gains = vec![0.0; k];
            gains[l] = 1.0;
            let pos = embed_texts(model, pos_texts, spec, Some(&gains), threads)?;
            let neg = embed_texts(model, neg_texts, spec, Some(&gains), threads)?;
            row.push(binary_holdout_accuracy(&pos, &neg)?);
        }
        styles.push(style.clone());
        activations.push(row);
    }
    Ok(ProbeMatrix { styles, activations })
}

fn embed_texts(
    model: &Model,
    texts: &[String],
    spec: &PoolingSpec,
    gains: Option<&[f64]>,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let embs = encode_batch(model, texts, spec, gains, threads)?;
    Ok(embs.into_iter().map(|e| e.s).collect())
}

/// Argmax per row; exact ties break toward the highest sense index.
pub fn best_sense_per_style(matrix: &ProbeMatrix) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (style, row) in matrix.styles.iter().zip(&matrix.activations) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v >= row[best] {
                best = i;
            }
        }
        out.insert(style.clone(), best);
    }
    out
}

/// Invert the style -> sense assignment; senses with no styles map to
/// empty lists.
pub fn group_styles_by_sense(
    assignments: &BTreeMap<String, usize>,
    k: usize,
) -> BTreeMap<usize, Vec<String>> {
    let mut groups: BTreeMap<usize, Vec<String>> = (0..k).map(|l| (l, Vec::new())).collect();
    for (style, &sense) in assignments {
        groups.entry(sense).or_default().push(style.clone());
    }
    groups
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetEntry {
    pub style: String,
    pub d_orig: f64,
    pub d_edit: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonTargetShift {
    pub avg_shift: f64,
    pub max_shift: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SenseAblation {
    pub sense: usize,
    pub targets: Vec<TargetEntry>,
    pub non_target: Option<NonTargetShift>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub senses: Vec<SenseAblation>,
}

/// Full ablation study. Styles are assigned to their best-probing sense;
/// ablating that sense re-encodes the style's positives with the sense
/// gain zeroed. Per target style we report the editability delta against
/// its own negative centroid; per sense we aggregate the shifts that the
/// edit causes on every other style (per-style values averaged
/// arithmetically).
pub fn ablation_study(
    model: &Model,
    labeled: &[LabeledSentence],
    spec: &PoolingSpec,
    threads: usize,
    precomputed: Option<&ProbeMatrix>,
) -> Result<AblationReport> {
    let matrix = match precomputed {
        Some(m) => m.clone(),
        None => probe_activations(model, labeled, spec, threads)?,
    };
    let assignments = best_sense_per_style(&matrix);
    let groups = group_styles_by_sense(&assignments, model.cfg.k);

    let style_groups = group_by_style(labeled);
    let mut sets: BTreeMap<String, StyleSet> = BTreeMap::new();
    for (style, (pos_texts, neg_texts)) in &style_groups {
        let pos = embed_texts(model, pos_texts, spec, None, threads)?;
        let neg = embed_texts(model, neg_texts, spec, None, threads)?;
        sets.insert(style.clone(), StyleSet::new(style.clone(), pos, neg)?);
    }

    let mut senses = Vec::with_capacity(model.cfg.k);
    for l in 0..model.cfg.k {
        let targets_for_sense = &groups[&l];
        let mut targets = Vec::new();
        let mut shifts = Vec::new();
        for style in targets_for_sense {
            let set = &sets[style];
            let mut gains = vec![1.0; model.cfg.k];
            gains[l] = 0.0;
            let (pos_texts, _) = &style_groups[style];
            let edited = embed_texts(model, pos_texts, spec, Some(&gains), threads)?;

            let d_orig = set_distance(&set.p_pos, &set.mu_neg)?;
            let d_edit = set_distance(&edited, &set.mu_neg)?;
            let delta = if d_orig == 0.0 { 0.0 } else { (d_orig - d_edit) / d_orig };
            targets.push(TargetEntry { style: style.clone(), d_orig, d_edit, delta });

            let others: Vec<StyleSet> = sets
                .values()
                .filter(|s| &s.style != style)
                .cloned()
                .collect();
            if !others.is_empty() {
                let ls = locality_shifts(&set.p_pos, &edited, &others)?;
                shifts.extend(ls.per_style.into_iter().map(|(_, v)| v));
            }
        }
        let non_target = if shifts.is_empty() {
            None
        } else {
            Some(NonTargetShift {
                avg_shift: shifts.iter().sum::<f64>() / shifts.len() as f64,
                max_shift: shifts.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            })
        };
        senses.push(SenseAblation { sense: l, targets, non_target });
    }
    Ok(AblationReport { senses })
}

// ── Report emission ─────────────────────────────────────────────────────

/// CSV: header `style,0,...,k-1,best_sense`, one row per style.
pub fn write_probe_csv(matrix: &ProbeMatrix, path: &Path) -> Result<()> {
    let k = matrix.activations.first().map_or(0, |r| r.len());
    let mut out = String::from("style");
    for l in 0..k {
        out.push_str(&format!(",{l}"));
    }
    out.push_str(",best_sense\n");
    let best = best_sense_per_style(matrix);
    for (style, row) in matrix.styles.iter().zip(&matrix.activations) {
        out.push_str(style);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", best[style]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_probe_csv(path: &Path) -> Result<ProbeMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| InterpretError::MalformedMatrix("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "style" || cols[cols.len() - 1] != "best_sense" {
        return Err(InterpretError::MalformedMatrix(format!("bad header: {header}")));
    }
    let k = cols.len() - 2;
    let mut styles = Vec::new();
    let mut activations = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 2 {
            return Err(InterpretError::MalformedMatrix(format!(
                "row {}: expected {} fields, got {}",
                i + 2,
                k + 2,
                fields.len()
            )));
        }
        styles.push(fields[0].to_string());
        let row: Vec<f64> = fields[1..=k]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| {
                    InterpretError::MalformedMatrix(format!("row {}: {e}", i + 2))
                })
            })
            .collect::<Result<_>>()?;
        activations.push(row);
    }
    Ok(ProbeMatrix { styles, activations })
}

pub fn write_ablation_report(report: &AblationReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| InterpretError::MalformedMatrix(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
