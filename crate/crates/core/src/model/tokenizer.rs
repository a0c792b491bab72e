//! Shared spatiotemporal tokenization: raw `C×T` trials to `N×d` tokens.
//!
//! Stage order: temporal conv (1→f1) → depthwise spatial conv over all
//! electrodes (f1→f2) → BN → GELU → avg-pool → dropout → separable temporal
//! conv (depthwise then pointwise, f2→f2) → BN → GELU → avg-pool → dropout.

use rand::Rng;

use super::session::{register_bn, register_linear, Session};
use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub const TEMPORAL: &str = "tok.temporal.weight";
pub const SPATIAL: &str = "tok.spatial.weight";
pub const SEP_DEPTHWISE: &str = "tok.sep_dw.weight";
pub const SEP_POINTWISE: &str = "tok.sep_pw.weight";
pub const POS_EMBED: &str = "tok.pos_embed";

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let a = &cfg.arch;
    let [k1, k2] = a.temporal_kernels;
    let f2 = a.f2();
    store.register(TEMPORAL, &[a.f1, k1], Init::FanIn(k1), rng)?;
    store.register(SPATIAL, &[f2, cfg.channels], Init::FanIn(cfg.channels), rng)?;
    register_bn(store, "tok.bn1", f2, rng)?;
    store.register(SEP_DEPTHWISE, &[f2, k2], Init::FanIn(k2), rng)?;
    store.register(SEP_POINTWISE, &[f2, f2], Init::FanIn(f2), rng)?;
    register_bn(store, "tok.bn2", f2, rng)?;
    if f2 != a.embed_dim {
        register_linear(store, "tok.proj", f2, a.embed_dim, rng)?;
    }
    if cfg.ablation.positional_embedding {
        store.register(POS_EMBED, &[cfg.n_tokens(), a.embed_dim], Init::Normal(0.02), rng)?;
    }
    Ok(())
}

/// `x: [batch, C, T]` → feature map `[batch, f2, 1, N]`.
pub fn tokenize(s: &mut Session<'_>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let [_, c, t] = shape[..] else {
        return Err(Error::Dimension(format!(
            "tokenizer expects [batch, channels, samples], got {shape:?}"
        )));
    };
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "input has {c} channels but the model was built for {}",
            cfg.channels
        )));
    }
    if t < cfg.min_samples() {
        return Err(Error::Config(format!(
            "trial length {t} too short: the tokenizer needs at least {} samples",
            cfg.min_samples()
        )));
    }
    let a = &cfg.arch;
    let [p1, p2] = a.pool_sizes;
    let wt = s.p(TEMPORAL)?;
    let ws = s.p(SPATIAL)?;
    let h = s.tape.temporal_spatial_conv(x, wt, ws)?;
    let h = s.batch_norm(h, "tok.bn1", a.bn_eps)?;
    let h = s.tape.gelu(h);
    let h = s.tape.avg_pool(h, p1)?;
    let h = s.dropout(h, a.dropout)?;

    let wdw = s.p(SEP_DEPTHWISE)?;
    let h = s.tape.depthwise_conv1d(h, wdw, None)?;
    let wpw = s.p(SEP_POINTWISE)?;
    let h = s.tape.grouped_pointwise(h, wpw, None, 1)?;
    let h = s.batch_norm(h, "tok.bn2", a.bn_eps)?;
    let h = s.tape.gelu(h);
    let h = s.tape.avg_pool(h, p2)?;
    let h = s.dropout(h, a.dropout)?;

    let sh = s.tape.shape(h).to_vec();
    s.tape.reshape(h, &[sh[0], sh[1], 1, sh[2]])
}

/// Feature map `[batch, f2, 1, N]` → position-encoded tokens `[batch, N, d]`.
pub fn project_and_encode(s: &mut Session<'_>, f: Var, cfg: &ModelConfig) -> Result<Var> {
    let sh = s.tape.shape(f).to_vec();
    let [b, f2, 1, n] = sh[..] else {
        return Err(Error::Dimension(format!(
            "expected feature map [batch, f2, 1, N], got {sh:?}"
        )));
    };
    let d = cfg.arch.embed_dim;
    let z = s.tape.reshape(f, &[b, f2, n])?;
    let z = s.tape.transpose(z)?;
    let z = if f2 != d { s.linear(z, "tok.proj")? } else { z };
    let z = s.tape.scale(z, (d as f64).sqrt());
    if !cfg.ablation.positional_embedding {
        return Ok(z);
    }
    let pe = s.p(POS_EMBED)?;
    let expected = s.tape.shape(pe)[0];
    if expected != n {
        return Err(Error::Config(format!(
            "trial yields {n} tokens but the positional table was built for {expected}"
        )));
    }
    s.tape.add_broadcast(z, pe)
}
