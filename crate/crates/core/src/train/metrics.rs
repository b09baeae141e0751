//! Readout metrics.

use crate::error::{invalid, Result};

/// `fired * 100 / (neurons * steps)`.
pub fn avg_spikes(fired: u64, neurons: u64, steps: u64) -> Result<f64> {
    if neurons == 0 || steps == 0 {
        return Err(invalid("spike rate needs a positive neuron and step count"));
    }
    Ok(fired as f64 * 100.0 / (neurons as f64 * steps as f64))
}

/// Index of the largest value, the lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    hits as f64 * 100.0 / logits.len() as f64
}

/// Cross-entropy of one row and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits[label];
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[label] -= 1.0;
    (loss, g)
}
