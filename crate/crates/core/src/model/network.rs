//! The full network: tokenizer, dual branches, attention stages, head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::session::Session;
use super::{attention, branches, head, tokenizer};
use crate::autodiff::Var;
use crate::config::{Branch, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dsainet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Dsainet {
    /// Registers every parameter in a fixed order, so a seed fully
    /// determines the initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        tokenizer::register(&mut params, &config, &mut rng)?;
        branches::register(&mut params, &config, &mut rng)?;
        attention::register(&mut params, &config, &mut rng)?;
        head::register(&mut params, &config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn session(&self, train: bool, seed: u64) -> Session<'_> {
        Session::new(&self.params, train, seed)
    }

    /// `x: [batch, C, T]` → logits `[batch, K]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let f = tokenizer::tokenize(s, x, cfg)?;
        let z0 = tokenizer::project_and_encode(s, f, cfg)?;
        let (mut zf, mut zc) = branches::run_branches(s, z0, cfg)?;
        if cfg.ablation.intra_attention {
            if let Some(z) = zf {
                zf = Some(attention::intra_refine(s, z, Branch::Fine, cfg)?);
            }
            if let Some(z) = zc {
                zc = Some(attention::intra_refine(s, z, Branch::Coarse, cfg)?);
            }
        }
        if let (Some(f), Some(c), true) = (zf, zc, attention::uses_inter(cfg)) {
            let (f, c) = attention::inter_interact(s, f, c, cfg)?;
            zf = Some(f);
            zc = Some(c);
        }
        let pool = |s: &mut Session<'_>, z: Option<Var>| -> Result<Option<Var>> {
            let Some(z) = z else { return Ok(None) };
            let (p, w) = head::aggregate(s, z, cfg.ablation.aggregation)?;
            if s.trace.is_some() {
                let wt = s.tape.value(w).clone();
                if let Some(t) = s.trace.as_mut() {
                    t.aggregation.push(wt);
                }
            }
            Ok(Some(p))
        };
        let pf = pool(s, zf)?;
        let pc = pool(s, zc)?;
        head::classify(s, pf, pc, cfg.classes)
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = self.session(false, 0);
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.tape.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Multiply-accumulates of one evaluation-mode forward on a single
    /// trial. Counted: convolutions, linear maps, attention products.
    /// Not counted: norms, activations, softmax, pooling, additions.
    pub fn macs(&self) -> Result<u64> {
        let mut s = self.session(false, 0);
        let x = s.tape.constant(Tensor::zeros(&[1, self.config.channels, self.config.samples]));
        self.forward(&mut s, x)?;
        Ok(s.tape.macs())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut m: Dsainet = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: not a model checkpoint ({e})", path.display())))?;
        m.params.reindex();
        m.config.validate()?;
        let fresh = Dsainet::new(m.config.clone(), 0)?;
        if fresh.params.names() != m.params.names() {
            return Err(Error::Format(format!(
                "{}: parameter set does not match its stored configuration",
                path.display()
            )));
        }
        for (name, t) in fresh.params.iter() {
            if m.params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(Error::Format(format!("{}: parameter `{name}` has the wrong shape", path.display())));
            }
        }
        Ok(m)
    }
}
