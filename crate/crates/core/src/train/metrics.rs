use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(preds: &[usize], truth: &[usize]) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(preds, truth)?;
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `k×k` counts, rows indexed by truth and columns by prediction.
pub fn confusion(preds: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_lengths(preds, truth)?;
    let mut m = vec![vec![0; k]; k];
    for (i, (&p, &t)) in preds.iter().zip(truth).enumerate() {
        if p >= k || t >= k {
            return Err(Error::Data(format!("sample {i}: label outside [0, {k})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Support-weighted mean of per-class F1. Any 0/0 resolves to 0.
pub fn weighted_f1(preds: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let m = confusion(preds, truth, k)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let support: f64 = m[c].iter().sum::<usize>() as f64;
        let predicted: f64 = (0..k).map(|r| m[r][c]).sum::<usize>() as f64;
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        total += support / n * f1;
    }
    Ok(total)
}

/// Row-wise argmax of `[batch, K]` logits; ties go to the lower index.
pub fn argmax_rows(logits: &[f64], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}
