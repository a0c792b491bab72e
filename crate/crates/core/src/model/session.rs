use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, BnStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Which attention stage produced a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapFamily {
    IntraFine,
    IntraCoarse,
    /// Fine queries attending to coarse keys.
    CrossFineFromCoarse,
    /// Coarse queries attending to fine keys.
    CrossCoarseFromFine,
}

impl MapFamily {
    pub fn slug(self) -> &'static str {
        match self {
            MapFamily::IntraFine => "intra_fine",
            MapFamily::IntraCoarse => "intra_coarse",
            MapFamily::CrossFineFromCoarse => "cross_fine_from_coarse",
            MapFamily::CrossCoarseFromFine => "cross_coarse_from_fine",
        }
    }
}

/// Attention probabilities of one layer, `[batch, heads, N, N]`, taken
/// before dropout.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub family: MapFamily,
    pub layer: usize,
    pub probs: Tensor,
}

impl AttentionMap {
    /// Row-major `N×N` matrix for one trial and head.
    pub fn head(&self, trial: usize, head: usize) -> (usize, Vec<f64>) {
        let s = self.probs.shape();
        let n = s[2];
        let off = (trial * s[1] + head) * n * n;
        (n, self.probs.data()[off..off + n * n].to_vec())
    }
}

/// Intermediate quantities captured for inspection.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub attention: Vec<AttentionMap>,
    /// Token aggregation weights per active branch, `[batch, N]`.
    pub aggregation: Vec<Tensor>,
}

/// One forward pass: a tape, read-only parameters, and the mode flags.
pub struct Session<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub train: bool,
    rng: ChaCha8Rng,
    pub bn_updates: Vec<(String, BnStats)>,
    pub trace: Option<Trace>,
}

impl<'s> Session<'s> {
    /// `seed` drives the dropout masks of this pass.
    pub fn new(store: &'s ParamStore, train: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    /// Identity outside training or at rate zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, rate, &mut self.rng)
    }

    /// Batch norm under `prefix` (`.gamma`, `.beta`, running stats in buffers).
    pub fn batch_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, stats) = self.tape.batch_norm(x, gamma, beta, eps, BnMode::Train)?;
            if let Some(s) = stats {
                self.bn_updates.push((prefix.to_string(), s));
            }
            Ok(y)
        } else {
            let store = self.store;
            let missing = || Error::Config(format!("missing running stats for `{prefix}`"));
            let mean = store.buffer(&format!("{prefix}.running_mean")).ok_or_else(missing)?;
            let var = store.buffer(&format!("{prefix}.running_var")).ok_or_else(missing)?;
            let mode = BnMode::Eval {
                mean: mean.data(),
                var: var.data(),
            };
            Ok(self.tape.batch_norm(x, gamma, beta, eps, mode)?.0)
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta, eps)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, Some(b))
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, BnStats)], momentum: f64) -> Result<()> {
    for (prefix, stats) in updates {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = store
                .buffer_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))?;
            for (r, f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (1.0 - momentum) * *r + momentum * f;
            }
        }
    }
    Ok(())
}

pub(crate) fn register_bn<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    ch: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), &[ch], Init::Const(1.0), rng)?;
    store.register(&format!("{prefix}.beta"), &[ch], Init::Const(0.0), rng)?;
    store.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[ch]))?;
    store.insert_buffer(&format!("{prefix}.running_var"), Tensor::full(&[ch], 1.0))?;
    Ok(())
}

pub(crate) fn register_ln<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), &[d], Init::Const(1.0), rng)?;
    store.register(&format!("{prefix}.beta"), &[d], Init::Const(0.0), rng)?;
    Ok(())
}

pub(crate) fn register_linear<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    inp: usize,
    out: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(&format!("{prefix}.weight"), &[out, inp], Init::FanIn(inp), rng)?;
    store.register(&format!("{prefix}.bias"), &[out], Init::FanIn(inp), rng)?;
    Ok(())
}
