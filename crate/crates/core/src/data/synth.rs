//! Synthetic multichannel trials with a planted class-specific rhythm.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::format::{Trial, TrialFile};
use crate::error::{Error, Result};

/// Rhythm frequency (Hz) of each class.
pub const CLASS_FREQS: [f64; 4] = [10.0, 22.0, 6.0, 30.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub sample_rate: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Per-subject gain on the rhythm, drawn uniformly from this range.
    pub gain_range: [f64; 2],
    /// Per-subject frequency offset, uniform in `±freq_jitter` Hz.
    pub freq_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 12,
            trials_per_subject: 100,
            channels: 8,
            samples: 500,
            classes: 2,
            sample_rate: 250.0,
            amplitude: 1.0,
            noise_std: 1.0,
            gain_range: [0.5, 1.5],
            freq_jitter: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Channels carrying the rhythm of class `k`; all other channels are
    /// pure noise for that class.
    pub fn signal_channels(&self, k: usize) -> std::ops::Range<usize> {
        let width = (self.channels / (2 * self.classes)).max(1);
        let start = (k * width).min(self.channels);
        start..((k + 1) * width).min(self.channels)
    }

    /// Channels that never carry a rhythm.
    pub fn noise_channels(&self) -> std::ops::Range<usize> {
        self.signal_channels(self.classes - 1).end..self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > CLASS_FREQS.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 2 to {} classes, got {}",
                CLASS_FREQS.len(),
                self.classes
            )));
        }
        if self.subjects == 0 || self.trials_per_subject == 0 || self.channels == 0 || self.samples == 0 {
            return Err(Error::Config("subjects, trials, channels and samples must be positive".into()));
        }
        if self.signal_channels(self.classes - 1).is_empty() {
            return Err(Error::Config(format!(
                "{} channels cannot host {} class-specific channel groups",
                self.channels, self.classes
            )));
        }
        if !(self.sample_rate > 0.0) || self.gain_range[0] > self.gain_range[1] || self.freq_jitter < 0.0 {
            return Err(Error::Config("invalid sample rate, gain range or jitter".into()));
        }
        Ok(())
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<TrialFile> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.subjects * cfg.trials_per_subject);
    for subject in 0..cfg.subjects {
        let gain = rng.gen_range(cfg.gain_range[0]..=cfg.gain_range[1]);
        let jitter = if cfg.freq_jitter > 0.0 {
            rng.gen_range(-cfg.freq_jitter..=cfg.freq_jitter)
        } else {
            0.0
        };
        let mut labels: Vec<usize> = (0..cfg.trials_per_subject).map(|i| i % cfg.classes).collect();
        labels.shuffle(&mut rng);
        for label in labels {
            let freq = CLASS_FREQS[label] + jitter;
            let chans = cfg.signal_channels(label);
            let mut signal = Vec::with_capacity(cfg.channels * cfg.samples);
            for c in 0..cfg.channels {
                let phase = rng.gen_range(0.0..2.0 * PI);
                for t in 0..cfg.samples {
                    let noise: f64 = rng.sample(StandardNormal);
                    let mut v = cfg.noise_std * noise;
                    if chans.contains(&c) {
                        v += gain * cfg.amplitude * (2.0 * PI * freq * t as f64 / cfg.sample_rate + phase).sin();
                    }
                    signal.push(v as f32);
                }
            }
            trials.push(Trial {
                subject: subject as u32,
                label: label as u32,
                signal,
            });
        }
    }
    Ok(TrialFile {
        channels: cfg.channels,
        samples: cfg.samples,
        classes: cfg.classes,
        sample_rate: cfg.sample_rate as f32,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects: 3,
            trials_per_subject: 10,
            samples: 250,
            ..Default::default()
        }
    }

    #[test]
    fn reproducible_bytes() {
        let a = synth_generate(&small()).unwrap().to_bytes().unwrap();
        let b = synth_generate(&small()).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_labels_per_subject() {
        let f = synth_generate(&SynthConfig { classes: 4, ..small() }).unwrap();
        for s in 0..3 {
            let mut counts = [0; 4];
            for t in f.trials.iter().filter(|t| t.subject == s) {
                counts[t.label as usize] += 1;
            }
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn channel_layout() {
        let c = SynthConfig::default();
        assert_eq!(c.signal_channels(0), 0..2);
        assert_eq!(c.signal_channels(1), 2..4);
        assert_eq!(c.noise_channels(), 4..8);
        let narrow = SynthConfig { channels: 3, classes: 4, ..c };
        assert!(synth_generate(&narrow).is_err());
    }

    #[test]
    fn rejects_five_classes() {
        assert!(synth_generate(&SynthConfig { classes: 5, ..small() }).is_err());
    }
}
