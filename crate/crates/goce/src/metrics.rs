//! Classification metric suite: Accuracy@1, multiclass Brier score,
//! macro-F1, expected calibration error (10 equal-width bins), and NLL.

use crate::error::{GoceError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy_at_1: f64,
    pub brier: f64,
    pub macro_f1: f64,
    pub ece: f64,
    pub nll: f64,
    pub count: usize,
}

const ECE_BINS: usize = 10;

/// Argmax with ties resolved to the lowest index.
pub fn argmax_tie_low(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn metrics(predictions: &[Vec<f64>], labels: &[usize]) -> Result<MetricReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(GoceError::Data(format!(
            "metrics need matching nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions.len();
    let n_classes = predictions[0].len();
    let mut correct = 0usize;
    let mut brier = 0.0;
    let mut nll = 0.0;
    let mut bin_count = [0usize; ECE_BINS];
    let mut bin_conf = [0.0f64; ECE_BINS];
    let mut bin_acc = [0.0f64; ECE_BINS];
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (p, &y) in predictions.iter().zip(labels) {
        if p.len() != n_classes || y >= n_classes {
            return Err(GoceError::Data(format!(
                "prediction width {} / label {} inconsistent with {} classes",
                p.len(),
                y,
                n_classes
            )));
        }
        let pred = argmax_tie_low(p);
        let hit = pred == y;
        if hit {
            correct += 1;
            tp[pred] += 1;
        } else {
            fp[pred] += 1;
            fn_[y] += 1;
        }
        for (c, &pc) in p.iter().enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            brier += (pc - t) * (pc - t);
        }
        nll += -p[y].max(1e-300).ln();
        let conf = p[pred];
        let bin = ((conf * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bin_count[bin] += 1;
        bin_conf[bin] += conf;
        bin_acc[bin] += if hit { 1.0 } else { 0.0 };
    }
    let mut ece = 0.0;
    for b in 0..ECE_BINS {
        if bin_count[b] > 0 {
            let nb = bin_count[b] as f64;
            ece += (nb / n as f64) * ((bin_acc[b] / nb) - (bin_conf[b] / nb)).abs();
        }
    }
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        // 0/0 := 0 for classes never seen and never predicted
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(MetricReport {
        accuracy_at_1: correct as f64 / n as f64,
        brier: brier / n as f64,
        macro_f1: f1_sum / n_classes as f64,
        ece,
        nll: nll / n as f64,
        count: n,
    })
}
