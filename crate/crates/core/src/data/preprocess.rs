use crate::error::{Error, Result};

/// Per-channel z-scoring of a channel-major `C×T` signal in place, using
/// the population standard deviation. Channels whose std is zero (or not
/// finite) use std 1. Returns the number of clamped channels.
pub fn zscore(signal: &mut [f64], channels: usize) -> usize {
    if channels == 0 || signal.is_empty() {
        return 0;
    }
    let t = signal.len() / channels;
    let mut clamped = 0;
    for row in signal.chunks_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let mut sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            sd = 1.0;
            clamped += 1;
        }
        for v in row.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    if clamped > 0 {
        log::debug!("z-score: {clamped} flat channel(s) left unscaled");
    }
    clamped
}

/// Step between window starts: `window·(1 − overlap)` rounded, at least 1.
pub fn stride(window: usize, overlap: f64) -> usize {
    ((window as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Cuts a channel-major `C×L` recording into `C×window` segments.
/// A trailing remainder shorter than the window is dropped.
pub fn segment(recording: &[f64], channels: usize, window: usize, overlap: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if channels == 0 || recording.len() % channels != 0 {
        return Err(Error::Dimension(format!(
            "recording of {} values is not divisible into {channels} channels",
            recording.len()
        )));
    }
    let len = recording.len() / channels;
    if window == 0 || window > len {
        return Err(Error::Config(format!("window {window} does not fit a recording of length {len}")));
    }
    let step = stride(window, overlap);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= len {
        let mut seg = Vec::with_capacity(channels * window);
        for c in 0..channels {
            seg.extend_from_slice(&recording[c * len + start..c * len + start + window]);
        }
        out.push(seg);
        start += step;
    }
    Ok(out)
}
