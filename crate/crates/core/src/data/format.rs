//! Binary trial container and matrix export.
//!
//! Trial file layout (little-endian):
//!
//! ```text
//! "EEGT" | u32 version | u32 C | u32 T | u32 n_trials | u32 K | f32 sample_rate
//! n_trials × ( u32 subject | u32 label | C·T f32, channel-major )
//! ```
//!
//! Matrix layout: `u32 rows | u32 cols | rows·cols f32, row-major`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEGT";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub subject: u32,
    pub label: u32,
    /// `C×T`, channel-major.
    pub signal: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialFile {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub sample_rate: f32,
    pub trials: Vec<Trial>,
}

impl TrialFile {
    pub fn record_bytes(&self) -> usize {
        8 + 4 * self.channels * self.samples
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.trials.iter().map(|t| t.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels * self.samples;
        if n == 0 {
            return Err(Error::Data("channels and samples must be positive".into()));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.signal.len() != n {
                return Err(Error::Data(format!(
                    "trial {i} has {} values, expected {n} ({}×{})",
                    t.signal.len(),
                    self.channels,
                    self.samples
                )));
            }
            if t.label as usize >= self.classes {
                return Err(Error::Data(format!(
                    "trial {i} has label {} but the file declares {} classes",
                    t.label, self.classes
                )));
            }
            if let Some(j) = t.signal.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("trial {i} has a non-finite value at index {j}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let u32_of = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in 32 bits")))
        };
        let mut out = Vec::with_capacity(HEADER_BYTES + self.trials.len() * self.record_bytes());
        out.extend_from_slice(MAGIC);
        for (v, what) in [
            (VERSION as usize, "version"),
            (self.channels, "channel count"),
            (self.samples, "sample count"),
            (self.trials.len(), "trial count"),
            (self.classes, "class count"),
        ] {
            out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
        }
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        for t in &self.trials {
            out.extend_from_slice(&t.subject.to_le_bytes());
            out.extend_from_slice(&t.label.to_le_bytes());
            for v in &t.signal {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format(format!(
                "file is {} bytes, shorter than the {HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a trial file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let (channels, samples, n, classes) = (word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
        let sample_rate = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        let rec = 8 + 4 * channels * samples;
        let expected = HEADER_BYTES + n * rec;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "file is {} bytes but the header implies {expected}",
                bytes.len()
            )));
        }
        let trials = bytes[HEADER_BYTES..]
            .chunks_exact(rec)
            .map(|r| Trial {
                subject: u32::from_le_bytes(r[0..4].try_into().unwrap()),
                label: u32::from_le_bytes(r[4..8].try_into().unwrap()),
                signal: r[8..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect();
        let f = TrialFile {
            channels,
            samples,
            classes,
            sample_rate,
            trials,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Dense `rows×cols` matrix stored as 32-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: data.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("matrix file shorter than its header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * rows * cols {
            return Err(Error::Format(format!(
                "matrix header says {rows}×{cols} but the payload is {} bytes",
                bytes.len() - 8
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
