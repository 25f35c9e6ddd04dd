//! Evaluation metrics for beam predictions and agent replies.

mod agent;

pub use agent::{agent_accuracy, AgentCaseResult, AgentEvalReport};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The cut-offs reported for every evaluation.
pub const TOP_KS: [usize; 4] = [1, 2, 3, 5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("prediction {pred} out of range for {classes} classes")]
    PredictionOutOfRange { pred: usize, classes: usize },
    #[error("{rows} probability rows for {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("nothing to measure")]
    EmptySlice,
}

/// Number of classes that outrank `label` in `row`. Equal probabilities are
/// ordered by lower index first.
fn rank_of(row: &[f64], label: usize) -> usize {
    let p = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

/// Fraction of rows whose label is among the `k` most probable classes, for
/// each `k` in `ks`. Rows are `classes` wide; all (sample, step) pairs are
/// pooled.
pub fn topk_accuracy(
    probabilities: &[f64],
    classes: usize,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, MetricsError> {
    let rows = if classes == 0 { 0 } else { probabilities.len() / classes };
    if rows != labels.len() || rows * classes != probabilities.len() {
        return Err(MetricsError::LengthMismatch { rows, labels: labels.len() });
    }
    let mut hits = vec![0usize; ks.len()];
    for (row, &label) in probabilities.chunks(classes.max(1)).zip(labels) {
        if label >= classes {
            return Err(MetricsError::LabelOutOfRange { label, classes });
        }
        let rank = rank_of(row, label);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = labels.len().max(1) as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect())
}

/// `counts[true][pred]`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            rows: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(MetricsError::LabelOutOfRange { label: y, classes });
        }
        if p >= classes {
            return Err(MetricsError::PredictionOutOfRange { pred: p, classes });
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn confusion_csv(matrix: &[Vec<u64>]) -> String {
    let mut out = String::from("true\\pred");
    for j in 0..matrix.len() {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_k: BTreeMap<usize, f64>,
    pub confusion: Vec<Vec<u64>>,
    pub mean_loss: f64,
    pub per_frame_latency_ms: f64,
    pub sample_count: usize,
    pub horizon: usize,
}

impl EvalReport {
    /// Builds a report from `sample_count * horizon` probability rows.
    pub fn from_probabilities(
        probabilities: &[f64],
        classes: usize,
        labels: &[usize],
        horizon: usize,
        mean_loss: f64,
        per_frame_latency_ms: f64,
    ) -> Result<Self, MetricsError> {
        let top_k = topk_accuracy(probabilities, classes, labels, &TOP_KS)?;
        let preds: Vec<usize> = probabilities.chunks(classes.max(1)).map(argmax).collect();
        let confusion = confusion_matrix(&preds, labels, classes)?;
        Ok(Self {
            top_k,
            confusion,
            mean_loss,
            per_frame_latency_ms,
            sample_count: labels.len() / horizon.max(1),
            horizon,
        })
    }

    pub fn top(&self, k: usize) -> f64 {
        self.top_k.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Fraction of predictions on the confusion diagonal.
    pub fn diagonal_fraction(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        let diag: u64 = self.confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
        diag as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Timed repetitions (warmup excluded).
    pub samples: usize,
}

/// Times `run` after `warmup` untimed calls. `run` returns the number of
/// frames it predicted; each repetition contributes its wall time per frame.
pub fn latency_profile(warmup: usize, repetitions: usize, mut run: impl FnMut() -> usize) -> Result<LatencyProfile, MetricsError> {
    for _ in 0..warmup.max(1) {
        if run() == 0 {
            return Err(MetricsError::EmptySlice);
        }
    }
    if repetitions == 0 {
        return Err(MetricsError::EmptySlice);
    }
    let mut per_frame = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let frames = run();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if frames == 0 {
            return Err(MetricsError::EmptySlice);
        }
        per_frame.push(ms / frames as f64);
    }
    per_frame.sort_by(f64::total_cmp);
    let pct = |q: f64| per_frame[((q * (per_frame.len() - 1) as f64).round() as usize).min(per_frame.len() - 1)];
    Ok(LatencyProfile {
        mean_ms: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        samples: per_frame.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let labels = [2, 0, 1];
        let mut probs = vec![0.0; 9];
        for (i, &y) in labels.iter().enumerate() {
            probs[i * 3 + y] = 1.0;
        }
        let top = topk_accuracy(&probs, 3, &labels, &TOP_KS).unwrap();
        assert!(top.values().all(|&v| v == 1.0));
        let cm = confusion_matrix(&[2, 0, 1], &labels, 3).unwrap();
        for (i, row) in cm.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c, u64::from(i == j));
            }
        }
    }

    #[test]
    fn uniform_rows_break_ties_by_index() {
        let k = 64;
        let labels: Vec<usize> = (0..k).collect();
        let probs = vec![1.0 / k as f64; k * k];
        let top = topk_accuracy(&probs, k, &labels, &TOP_KS).unwrap();
        // Only label 0 is ranked first; labels 0..k-1 are in the top k.
        assert_eq!(top[&1], 1.0 / 64.0);
        assert_eq!(top[&2], 2.0 / 64.0);
        assert_eq!(top[&5], 5.0 / 64.0);
    }

    #[test]
    fn single_confusion_entry_and_errors() {
        let cm = confusion_matrix(&[5], &[3], 8).unwrap();
        assert_eq!(cm[3][5], 1);
        assert_eq!(cm.iter().flatten().sum::<u64>(), 1);
        assert_eq!(
            confusion_matrix(&[8], &[3], 8),
            Err(MetricsError::PredictionOutOfRange { pred: 8, classes: 8 })
        );
        assert_eq!(
            topk_accuracy(&[0.5, 0.5], 2, &[2], &[1]),
            Err(MetricsError::LabelOutOfRange { label: 2, classes: 2 })
        );
        let csv = confusion_csv(&cm);
        assert!(csv.starts_with("true\\pred,0,1"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn report_cross_checks() {
        let probs = [0.7, 0.2, 0.1, 0.1, 0.3, 0.6, 0.3, 0.3, 0.4, 0.5, 0.5, 0.0];
        let labels = [0, 1, 2, 1];
        let r = EvalReport::from_probabilities(&probs, 3, &labels, 2, 0.0, 0.0).unwrap();
        assert_eq!(r.sample_count, 2);
        assert_eq!(r.confusion.iter().flatten().sum::<u64>() as usize, r.sample_count * r.horizon);
        assert_eq!(r.diagonal_fraction(), r.top(1));
        assert_eq!(r.top(1), 0.5);
    }

    #[test]
    fn latency_single_repetition() {
        let p = latency_profile(1, 1, || 4).unwrap();
        assert_eq!(p.mean_ms, p.p50_ms);
        assert_eq!(p.samples, 1);
        assert_eq!(latency_profile(1, 3, || 0), Err(MetricsError::EmptySlice));
        let a = latency_profile(2, 5, || 3).unwrap();
        let b = latency_profile(2, 5, || 3).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    proptest! {
        #[test]
        fn topk_monotone(raw in prop::collection::vec(0.0f64..1.0, 8 * 6), labels in prop::collection::vec(0usize..8, 6)) {
            let mut probs = raw;
            for row in probs.chunks_mut(8) {
                let s: f64 = row.iter().sum::<f64>() + 1e-12;
                row.iter_mut().for_each(|v| *v /= s);
            }
            let top = topk_accuracy(&probs, 8, &labels, &TOP_KS).unwrap();
            let v: Vec<f64> = TOP_KS.iter().map(|k| top[k]).collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
