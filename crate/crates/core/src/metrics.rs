//! Evaluation metrics: Spearman rank correlation (average ranks on ties,
//! then Pearson on the rank vectors) for regression, accuracy for
//! classification.

use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric needs at least {min} values, got {n}")]
    TooShort { n: usize, min: usize },
    #[error("metric inputs differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{side} vector is constant; rank correlation is undefined")]
    Constant { side: &'static str },
    #[error("{side} contains a non-finite value at index {index}")]
    NonFinite { side: &'static str, index: usize },
    #[error("truth must be binary (0/1), got {value} at index {index}")]
    NonBinaryTruth { index: usize, value: f64 },
}

fn check_finite(side: &'static str, v: &[f64]) -> Result<(), MetricError> {
    for (index, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(MetricError::NonFinite { side, index });
        }
    }
    Ok(())
}

/// Ranks with ties assigned the average of the positions they occupy
/// (1-based fractional ranks).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 {
        return Err(MetricError::Constant { side: "prediction" });
    }
    if vb == 0.0 {
        return Err(MetricError::Constant { side: "truth" });
    }
    // rounding can push |r| a few ulps past 1; the metric is in [-1, 1]
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of the rank vectors.
/// Constant input is an error, never a silent zero.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            a: pred.len(),
            b: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(MetricError::TooShort {
            n: pred.len(),
            min: 2,
        });
    }
    check_finite("prediction", pred)?;
    check_finite("truth", truth)?;
    let ra = average_ranks(pred);
    let rb = average_ranks(truth);
    if ra.iter().all(|&r| r == ra[0]) {
        return Err(MetricError::Constant { side: "prediction" });
    }
    if rb.iter().all(|&r| r == rb[0]) {
        return Err(MetricError::Constant { side: "truth" });
    }
    // The extremes are exactly the rank-identical and rank-mirrored cases;
    // return them exactly rather than through rounded square roots.
    // Fractional ranks are halves, so these comparisons are exact.
    let hi = (pred.len() + 1) as f64;
    if ra == rb {
        return Ok(1.0);
    }
    if ra.iter().zip(&rb).all(|(&x, &y)| x + y == hi) {
        return Ok(-1.0);
    }
    pearson(&ra, &rb)
}

/// Fraction of examples where `pred_prob >= threshold` matches the binary
/// truth label.
pub fn accuracy(pred_prob: &[f64], truth: &[f64], threshold: f64) -> Result<f64, MetricError> {
    if pred_prob.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            a: pred_prob.len(),
            b: truth.len(),
        });
    }
    if pred_prob.is_empty() {
        return Err(MetricError::TooShort { n: 0, min: 1 });
    }
    check_finite("prediction", pred_prob)?;
    for (index, &value) in truth.iter().enumerate() {
        if value != 0.0 && value != 1.0 {
            return Err(MetricError::NonBinaryTruth { index, value });
        }
    }
    let correct = pred_prob
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| (p >= threshold) == (t == 1.0))
        .count();
    Ok(correct as f64 / pred_prob.len() as f64)
}

/// Evaluation summary for one task, JSON-serializable.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n_examples: usize,
    pub splits: BTreeMap<String, SplitMetric>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitMetric {
    pub value: f64,
    pub n_examples: usize,
}

impl EvalReport {
    /// Fixed-width table rendering for terminals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:>12} {:>8}\n", "metric", "value", "n"));
        out.push_str(&format!(
            "{:<12} {:>12.6} {:>8}\n",
            self.metric, self.value, self.n_examples
        ));
        for (split, m) in &self.splits {
            out.push_str(&format!(
                "{:<12} {:>12.6} {:>8}\n",
                format!("  {split}"),
                m.value,
                m.n_examples
            ));
        }
        out
    }
}
