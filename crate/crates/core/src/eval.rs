//! Confusion matrices, per-class and weighted precision/recall, dataset
//! splitting (stratified k-fold, leave-one-out, grouped train/val/test),
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {a} true labels vs {b} predictions")]
    LengthMismatch { a: usize, b: usize },
    #[error("label {label} at index {index} out of range for {n_classes} classes")]
    LabelOutOfRange { index: usize, label: usize, n_classes: usize },
    #[error("no class with defined metrics and positive support")]
    ZeroSupport,
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    ClassTooSmall { class: usize, count: usize, folds: usize },
    #[error("{n} samples are too few (need at least {need})")]
    TooFewSamples { n: usize, need: usize },
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
}

/// Which patch population a model was evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Surface,
    Section,
    Mixed,
}

impl std::fmt::Display for ViewTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewTag::Surface => "surface",
            ViewTag::Section => "section",
            ViewTag::Mixed => "mixed",
        })
    }
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_labels(y_true: &[u8], y_pred: &[u8], n_classes: usize) -> Result<Self, EvalError> {
        if y_true.len() != y_pred.len() {
            return Err(EvalError::LengthMismatch { a: y_true.len(), b: y_pred.len() });
        }
        let mut cm = Self::new(n_classes);
        for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
            for label in [t as usize, p as usize] {
                if label >= n_classes {
                    return Err(EvalError::LabelOutOfRange { index: i, label, n_classes });
                }
            }
            cm.add(t as usize, p as usize);
        }
        Ok(cm)
    }

    pub fn add(&mut self, true_class: usize, pred_class: usize) {
        self.counts[true_class * self.n_classes + pred_class] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.n_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|k| self.count(k, k)).sum()
    }

    /// True-class count for class `k` (row sum).
    pub fn support(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|p| self.count(k, p)).sum()
    }

    /// Predicted-class count for class `k` (column sum).
    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|t| self.count(t, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str("true\\pred");
        for name in class_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for t in 0..self.n_classes {
            let _ = write!(out, "{}", class_names[t]);
            for p in 0..self.n_classes {
                let _ = write!(out, ",{}", self.count(t, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class precision/recall; `None` marks the undefined 0/0 case, which is
/// excluded from weighted averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub support: u64,
    pub predicted: u64,
}

pub fn precision_recall(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.n_classes)
        .map(|k| {
            let tp = cm.count(k, k);
            let support = cm.support(k);
            let predicted = cm.predicted(k);
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (support > 0).then(|| tp as f64 / support as f64);
            if precision.is_none() || recall.is_none() {
                log::warn!("class {k}: 0/0 metric left undefined and excluded from averages");
            }
            ClassMetrics { precision, recall, support, predicted }
        })
        .collect()
}

/// Support-weighted average over the classes whose metric is defined.
pub fn weighted_average(values: &[Option<f64>], supports: &[u64]) -> Result<f64, EvalError> {
    assert_eq!(values.len(), supports.len());
    let mut num = 0.0;
    let mut den = 0u64;
    for (v, &s) in values.iter().zip(supports) {
        if let Some(v) = v {
            num += v * s as f64;
            den += s;
        }
    }
    if den == 0 {
        return Err(EvalError::ZeroSupport);
    }
    Ok(num / den as f64)
}

/// Predicted class = argmax probability, ties broken by lowest class index.
pub fn argmax_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// A full evaluation: confusion matrix, per-class and weighted metrics.
///
/// Weighted recall is reported as `trace/total` — identical to accuracy by
/// construction — so the identity holds exactly in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub view_tag: ViewTag,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub accuracy: f64,
    pub n_samples: u64,
    pub undefined_classes: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

pub fn report_from_confusion(
    cm: ConfusionMatrix,
    class_names: Vec<String>,
    view_tag: ViewTag,
    model_id: &str,
    seeds: BTreeMap<String, u64>,
) -> Result<EvaluationReport, EvalError> {
    let per_class = precision_recall(&cm);
    let precisions: Vec<Option<f64>> = per_class.iter().map(|m| m.precision).collect();
    let supports: Vec<u64> = per_class.iter().map(|m| m.support).collect();
    let weighted_precision = weighted_average(&precisions, &supports)?;
    let accuracy = cm.accuracy();
    // zero-support rows add nothing to either side, so trace/total equals the
    // support-weighted recall over defined classes, exactly
    let weighted_recall = accuracy;
    let undefined_classes = per_class
        .iter()
        .enumerate()
        .filter(|(_, m)| m.precision.is_none() || m.recall.is_none())
        .map(|(k, _)| class_names[k].clone())
        .collect();
    Ok(EvaluationReport {
        model_id: model_id.to_string(),
        view_tag,
        class_names,
        n_samples: cm.total(),
        confusion: cm,
        per_class,
        weighted_precision,
        weighted_recall,
        accuracy,
        undefined_classes,
        seeds,
    })
}

/// Runs a probabilistic classifier over a feature matrix and assembles the
/// report. `x` is row-major with `cols` features per row.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<F>(
    predict_proba: F,
    x: &[f64],
    cols: usize,
    y: &[u8],
    class_names: Vec<String>,
    view_tag: ViewTag,
    model_id: &str,
    seeds: BTreeMap<String, u64>,
) -> Result<EvaluationReport, EvalError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = y.len();
    if x.len() != n * cols {
        return Err(EvalError::LengthMismatch { a: x.len() / cols.max(1), b: n });
    }
    let y_pred: Vec<u8> =
        (0..n).map(|i| argmax_class(&predict_proba(&x[i * cols..(i + 1) * cols])) as u8).collect();
    let cm = ConfusionMatrix::from_labels(y, &y_pred, class_names.len())?;
    report_from_confusion(cm, class_names, view_tag, model_id, seeds)
}

/// Stratified k-fold assignment: folds partition the indices and per-class
/// counts across folds differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 || labels.len() < k {
        return Err(EvalError::TooFewSamples { n: labels.len(), need: k.max(2) });
    }
    let classes: std::collections::BTreeSet<u8> = labels.iter().copied().collect();
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0usize;
    for class in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(EvalError::ClassTooSmall {
                class: class as usize,
                count: idx.len(),
                folds: k,
            });
        }
        let mut rng = stream(seed, &[class as u64]);
        idx.shuffle(&mut rng);
        // rotate the starting fold per class so fold sizes stay level
        for (j, i) in idx.into_iter().enumerate() {
            folds[(j + offset) % k].push(i);
        }
        offset += 1;
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// n singleton folds.
pub fn leave_one_out(n: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    if n < 2 {
        return Err(EvalError::TooFewSamples { n, need: 2 });
    }
    Ok((0..n).map(|i| vec![i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Val, SplitPart::Test];
}

/// Assigns each record to train/val/test so that all records sharing a group
/// key land in the same part. Groups are shuffled by seed, then greedily
/// given to the part with the largest remaining record deficit (ties in
/// train, val, test order), which keeps achieved sizes within one group of
/// the targets.
pub fn group_split(
    keys: &[&str],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<SplitPart>, EvalError> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadFractions(format!(
            "({ft}, {fv}, {fs}) must be >= 0 and sum to 1"
        )));
    }
    let mut group_order: Vec<&str> = Vec::new();
    let mut group_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for &k in keys {
        if !group_sizes.contains_key(k) {
            group_order.push(k);
        }
        *group_sizes.entry(k).or_insert(0) += 1;
    }
    let mut rng = stream(seed, &[]);
    group_order.shuffle(&mut rng);

    let n = keys.len() as f64;
    let targets = [ft * n, fv * n, fs * n];
    let mut assigned = [0.0f64; 3];
    let mut part_of: BTreeMap<&str, SplitPart> = BTreeMap::new();
    for g in group_order {
        let mut best = 0;
        for p in 1..3 {
            if targets[p] - assigned[p] > targets[best] - assigned[best] {
                best = p;
            }
        }
        part_of.insert(g, SplitPart::ALL[best]);
        assigned[best] += group_sizes[g] as f64;
    }
    Ok(keys.iter().map(|k| part_of[k]).collect())
}

/// One line of the weighted-metrics comparison table.
pub struct WeightedRow {
    pub classifier: String,
    /// (view, weighted precision, weighted recall); None when unavailable.
    pub views: Vec<(ViewTag, Option<(f64, f64)>)>,
}

/// Aligned plain-text table of weighted P/R per classifier and view.
pub fn weighted_table(rows: &[WeightedRow]) -> String {
    let mut views: Vec<ViewTag> = Vec::new();
    for row in rows {
        for (v, _) in &row.views {
            if !views.contains(v) {
                views.push(*v);
            }
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "Classifier");
    for v in &views {
        let _ = write!(out, "{:>12}{:>12}", format!("{v} P"), format!("{v} R"));
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<16}", row.classifier);
        for v in &views {
            match row.views.iter().find(|(rv, _)| rv == v).and_then(|(_, m)| *m) {
                Some((p, r)) => {
                    let _ = write!(out, "{p:>12.3}{r:>12.3}");
                }
                None => {
                    let _ = write!(out, "{:>12}{:>12}", "n/a", "n/a");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Aligned plain-text table of per-class P/R for one or more reports.
pub fn per_class_table(rows: &[(&str, &EvaluationReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let _ = write!(out, "{:<16}", "Classifier");
    for name in &first.class_names {
        let _ = write!(out, "{:>10}{:>10}", format!("{name} P"), format!("{name} R"));
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:<16}");
        for m in &report.per_class {
            for v in [m.precision, m.recall] {
                match v {
                    Some(v) => {
                        let _ = write!(out, "{v:>10.3}");
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "n/a");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}
