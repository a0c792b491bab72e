//! Fine- and coarse-scale temporal convolution branches over channel-first
//! tokens.

use rand::Rng;

use super::session::{register_bn, Session};
use crate::autodiff::Var;
use crate::config::{Branch, BranchConfig, ModelConfig};
use crate::error::Result;
use crate::params::{Init, ParamStore};

pub fn block_prefix(branch: Branch, layer: usize) -> String {
    format!("{}.block{layer}", branch.name())
}

pub fn reinject_name(branch: Branch) -> String {
    format!("{}.reinject_alpha", branch.name())
}

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.arch.embed_dim;
    for branch in cfg.ablation.active_branches() {
        let bc = cfg.branch(branch);
        let hidden = d * bc.expansion_ratio;
        for (layer, &k) in bc.kernel_sizes.iter().enumerate() {
            let p = block_prefix(branch, layer);
            store.register(&format!("{p}.dw.weight"), &[d, k], Init::FanIn(k), rng)?;
            store.register(&format!("{p}.dw.bias"), &[d], Init::FanIn(k), rng)?;
            let in1 = d / bc.groups;
            store.register(&format!("{p}.pw1.weight"), &[hidden, in1], Init::FanIn(in1), rng)?;
            store.register(&format!("{p}.pw1.bias"), &[hidden], Init::FanIn(in1), rng)?;
            let in2 = hidden / bc.groups;
            store.register(&format!("{p}.pw2.weight"), &[d, in2], Init::FanIn(in2), rng)?;
            store.register(&format!("{p}.pw2.bias"), &[d], Init::FanIn(in2), rng)?;
            register_bn(store, &format!("{p}.bn"), d, rng)?;
            store.register(&format!("{p}.alpha"), &[1], Init::Const(bc.residual_scale_init), rng)?;
        }
        if cfg.arch.reinject {
            store.register(&reinject_name(branch), &[1], Init::Const(bc.residual_scale_init), rng)?;
        }
    }
    Ok(())
}

/// One residual block on `[batch, d, N]`:
/// `h + α · BN(PW₂(σ(PW₁(σ(DW_k(h))))))`.
pub fn tc_block(
    s: &mut Session<'_>,
    h: Var,
    layer: usize,
    bc: &BranchConfig,
    bn_eps: f64,
) -> Result<Var> {
    let p = block_prefix(bc.branch, layer);
    let dw_w = s.p(&format!("{p}.dw.weight"))?;
    let dw_b = s.p(&format!("{p}.dw.bias"))?;
    let y = s.tape.depthwise_conv1d(h, dw_w, Some(dw_b))?;
    let y = s.tape.gelu(y);
    let w1 = s.p(&format!("{p}.pw1.weight"))?;
    let b1 = s.p(&format!("{p}.pw1.bias"))?;
    let y = s.tape.grouped_pointwise(y, w1, Some(b1), bc.groups)?;
    let y = s.tape.gelu(y);
    let w2 = s.p(&format!("{p}.pw2.weight"))?;
    let b2 = s.p(&format!("{p}.pw2.bias"))?;
    let y = s.tape.grouped_pointwise(y, w2, Some(b2), bc.groups)?;
    let y = s.batch_norm(y, &format!("{p}.bn"), bn_eps)?;
    let alpha = s.p(&format!("{p}.alpha"))?;
    let y = s.tape.scale_by(y, alpha)?;
    s.tape.add(h, y)
}

/// Runs one branch on tokens `z0: [batch, N, d]`, returning `[batch, N, d]`.
pub fn run_branch(s: &mut Session<'_>, z0: Var, branch: Branch, cfg: &ModelConfig) -> Result<Var> {
    let bc = cfg.branch(branch);
    let mut h = s.tape.transpose(z0)?;
    for layer in 0..bc.n_blocks() {
        h = tc_block(s, h, layer, &bc, cfg.arch.bn_eps)?;
    }
    let z = s.tape.transpose(h)?;
    if cfg.arch.reinject {
        let a = s.p(&reinject_name(branch))?;
        let inj = s.tape.scale_by(z0, a)?;
        s.tape.add(z, inj)
    } else {
        Ok(z)
    }
}

/// Both branches from the shared tokens. Disabled branches yield `None`.
pub fn run_branches(s: &mut Session<'_>, z0: Var, cfg: &ModelConfig) -> Result<(Option<Var>, Option<Var>)> {
    let fine = if cfg.ablation.fine_branch {
        Some(run_branch(s, z0, Branch::Fine, cfg)?)
    } else {
        None
    };
    let coarse = if cfg.ablation.coarse_branch {
        Some(run_branch(s, z0, Branch::Coarse, cfg)?)
    } else {
        None
    };
    Ok((fine, coarse))
}
