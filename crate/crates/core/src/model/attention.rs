//! Intra-branch self-attention refinement and symmetric inter-branch
//! cross-attention, both in post-norm residual form.

use rand::Rng;

use super::session::{register_linear, register_ln, AttentionMap, MapFamily, Session};
use crate::autodiff::Var;
use crate::config::{ArchConfig, Branch, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub fn intra_prefix(branch: Branch, layer: usize) -> String {
    format!("intra.{}.layer{layer}", branch.name())
}

/// Prefix for the cross-attention block that updates `target`.
pub fn inter_prefix(target: Branch, layer: usize) -> String {
    let src = target.other();
    format!("inter.layer{layer}.{}_from_{}", target.name(), src.name())
}

pub fn beta_name(target: Branch, layer: usize) -> String {
    format!("{}.beta", inter_prefix(target, layer))
}

pub fn register_mha<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        register_linear(store, &format!("{prefix}.{p}"), d, d, rng)?;
    }
    Ok(())
}

/// Attention sublayer plus FFN sublayer, each followed by layer norm.
pub fn register_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, a: &ArchConfig, rng: &mut R) -> Result<()> {
    let d = a.embed_dim;
    register_mha(store, &format!("{prefix}.attn"), d, rng)?;
    register_ln(store, &format!("{prefix}.ln1"), d, rng)?;
    register_linear(store, &format!("{prefix}.ffn1"), d, d * a.ffn_ratio, rng)?;
    register_linear(store, &format!("{prefix}.ffn2"), d * a.ffn_ratio, d, rng)?;
    register_ln(store, &format!("{prefix}.ln2"), d, rng)?;
    Ok(())
}

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let a = &cfg.arch;
    let branches = cfg.ablation.active_branches();
    if cfg.ablation.intra_attention {
        for &b in &branches {
            for layer in 0..a.attn_layers {
                register_block(store, &intra_prefix(b, layer), a, rng)?;
            }
        }
    }
    if uses_inter(cfg) {
        for layer in 0..a.attn_layers {
            for b in [Branch::Fine, Branch::Coarse] {
                register_block(store, &inter_prefix(b, layer), a, rng)?;
                store.register(&beta_name(b, layer), &[1], Init::Const(a.interaction_init), rng)?;
            }
        }
    }
    Ok(())
}

/// Cross-attention needs both streams.
pub fn uses_inter(cfg: &ModelConfig) -> bool {
    cfg.ablation.inter_attention && cfg.ablation.fine_branch && cfg.ablation.coarse_branch
}

/// Multi-head attention of `q_src` over `kv_src`, both `[batch, N, d]`.
/// Returns the mixed output and the pre-dropout attention probabilities
/// `[batch, heads, N, N]`.
pub fn mha(
    s: &mut Session<'_>,
    q_src: Var,
    kv_src: Var,
    prefix: &str,
    n_heads: usize,
    dropout: f64,
) -> Result<(Var, Var)> {
    let (sq, sk) = (s.tape.shape(q_src).to_vec(), s.tape.shape(kv_src).to_vec());
    if sq.len() != 3 || sq != sk {
        return Err(Error::ShapeMismatch {
            op: "mha",
            lhs: sq,
            rhs: sk,
        });
    }
    let (b, n, d) = (sq[0], sq[1], sq[2]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!("n_heads {n_heads} must divide {d}")));
    }
    let dh = d / n_heads;
    let heads = |s: &mut Session<'_>, src: Var, name: &str| -> Result<Var> {
        let p = s.linear(src, &format!("{prefix}.{name}"))?;
        let p = s.tape.reshape(p, &[b, n, n_heads, dh])?;
        s.tape.permute(p, &[0, 2, 1, 3])
    };
    let q = heads(s, q_src, "q")?;
    let k = heads(s, kv_src, "k")?;
    let v = heads(s, kv_src, "v")?;
    let scores = s.tape.bmm(q, k, true)?;
    let scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = s.tape.softmax(scores, 3)?;
    let att = s.dropout(probs, dropout)?;
    let ctx = s.tape.bmm(att, v, false)?;
    let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.tape.reshape(ctx, &[b, n, d])?;
    let out = s.linear(ctx, &format!("{prefix}.o"))?;
    Ok((out, probs))
}

fn ffn(s: &mut Session<'_>, x: Var, prefix: &str, dropout: f64) -> Result<Var> {
    let h = s.linear(x, &format!("{prefix}.ffn1"))?;
    let h = s.tape.gelu(h);
    let h = s.dropout(h, dropout)?;
    s.linear(h, &format!("{prefix}.ffn2"))
}

fn record(s: &mut Session<'_>, family: MapFamily, layer: usize, probs: Var) {
    if s.trace.is_some() {
        let t = s.tape.value(probs).clone();
        if let Some(trace) = s.trace.as_mut() {
            trace.attention.push(AttentionMap {
                family,
                layer,
                probs: t,
            });
        }
    }
}

/// `LN(z + scale·MHA(z, kv, kv))` followed by `LN(· + FFN(·))`.
fn attend_block(
    s: &mut Session<'_>,
    z: Var,
    kv: Var,
    prefix: &str,
    strength: Option<Var>,
    a: &ArchConfig,
) -> Result<(Var, Var)> {
    let (att, probs) = mha(s, z, kv, &format!("{prefix}.attn"), a.n_heads, a.dropout)?;
    let att = match strength {
        Some(beta) => s.tape.scale_by(att, beta)?,
        None => att,
    };
    let r = s.tape.add(z, att)?;
    let zbar = s.layer_norm(r, &format!("{prefix}.ln1"), a.ln_eps)?;
    let f = ffn(s, zbar, prefix, a.dropout)?;
    let r = s.tape.add(zbar, f)?;
    Ok((s.layer_norm(r, &format!("{prefix}.ln2"), a.ln_eps)?, probs))
}

/// Self-attention refinement of one branch over `attn_layers` layers.
pub fn intra_refine(s: &mut Session<'_>, z: Var, branch: Branch, cfg: &ModelConfig) -> Result<Var> {
    let family = match branch {
        Branch::Fine => MapFamily::IntraFine,
        Branch::Coarse => MapFamily::IntraCoarse,
    };
    let mut z = z;
    for layer in 0..cfg.arch.attn_layers {
        let (out, probs) = attend_block(s, z, z, &intra_prefix(branch, layer), None, &cfg.arch)?;
        record(s, family, layer, probs);
        z = out;
    }
    Ok(z)
}

/// Symmetric cross-attention. Both directions read the pre-update streams.
pub fn inter_interact(s: &mut Session<'_>, zf: Var, zc: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let (mut zf, mut zc) = (zf, zc);
    for layer in 0..cfg.arch.attn_layers {
        let bf = s.p(&beta_name(Branch::Fine, layer))?;
        let bc = s.p(&beta_name(Branch::Coarse, layer))?;
        let (nf, pf) = attend_block(s, zf, zc, &inter_prefix(Branch::Fine, layer), Some(bf), &cfg.arch)?;
        let (nc, pc) = attend_block(s, zc, zf, &inter_prefix(Branch::Coarse, layer), Some(bc), &cfg.arch)?;
        record(s, MapFamily::CrossFineFromCoarse, layer, pf);
        record(s, MapFamily::CrossCoarseFromFine, layer, pc);
        zf = nf;
        zc = nc;
    }
    Ok((zf, zc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mha_store(d: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        register_mha(&mut st, "m", d, &mut rng).unwrap();
        st
    }

    #[test]
    fn single_token_attends_to_itself() {
        let st = mha_store(8, 0);
        let mut s = Session::new(&st, false, 0);
        let x = s.tape.constant(rand_tensor(&[1, 1, 8], 1));
        let (out, probs) = mha(&mut s, x, x, "m", 2, 0.0).unwrap();
        assert_eq!(s.tape.data(probs), &[1.0, 1.0]);
        // output = o(v(x)) for the single token
        let mut r = Session::new(&st, false, 0);
        let x2 = r.tape.constant(rand_tensor(&[1, 1, 8], 1));
        let v = r.linear(x2, "m.v").unwrap();
        let o = r.linear(v, "m.o").unwrap();
        for (a, b) in s.tape.data(out).iter().zip(r.tape.data(o)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_tokens_give_uniform_rows() {
        let st = mha_store(8, 0);
        let mut s = Session::new(&st, false, 0);
        let row = rand_tensor(&[8], 2).into_data();
        let data: Vec<f64> = (0..5).flat_map(|_| row.clone()).collect();
        let x = s.tape.constant(Tensor::new(vec![1, 5, 8], data).unwrap());
        let (_, probs) = mha(&mut s, x, x, "m", 4, 0.0).unwrap();
        assert!(s.tape.data(probs).iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_head_matches_dense_reference() {
        let d = 40;
        let st = mha_store(d, 3);
        let xin = rand_tensor(&[1, 5, d], 4);
        let mut s = Session::new(&st, false, 0);
        let x = s.tape.constant(xin.clone());
        let (out, _) = mha(&mut s, x, x, "m", 1, 0.0).unwrap();

        let w = |n: &str| st.get(n).unwrap().data().to_vec();
        let proj = |name: &str, x: &[f64]| -> Vec<f64> {
            let (wt, b) = (w(&format!("m.{name}.weight")), w(&format!("m.{name}.bias")));
            let mut y = vec![0.0; 5 * d];
            for t in 0..5 {
                for o in 0..d {
                    y[t * d + o] = b[o] + (0..d).map(|i| wt[o * d + i] * x[t * d + i]).sum::<f64>();
                }
            }
            y
        };
        let (q, k, v) = (proj("q", xin.data()), proj("k", xin.data()), proj("v", xin.data()));
        let mut ctx = vec![0.0; 5 * d];
        for i in 0..5 {
            let mut sc: Vec<f64> = (0..5)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = sc.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = sc.iter().map(|v| (v - m).exp()).sum();
            sc.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            for c in 0..d {
                ctx[i * d + c] = (0..5).map(|j| sc[j] * v[j * d + c]).sum();
            }
        }
        let want = proj("o", &ctx);
        for (a, b) in s.tape.data(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_permutation_equivariance() {
        let st = mha_store(8, 5);
        let xin = rand_tensor(&[1, 4, 8], 6);
        let perm = [2usize, 0, 3, 1];
        let mut pdata = Vec::new();
        for &p in &perm {
            pdata.extend_from_slice(&xin.data()[p * 8..(p + 1) * 8]);
        }
        let mut s = Session::new(&st, false, 0);
        let x = s.tape.constant(xin);
        let xp = s.tape.constant(Tensor::new(vec![1, 4, 8], pdata).unwrap());
        let (o, _) = mha(&mut s, x, x, "m", 2, 0.0).unwrap();
        let (op, _) = mha(&mut s, xp, xp, "m", 2, 0.0).unwrap();
        let (o, op) = (s.tape.data(o), s.tape.data(op));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((op[i * 8 + c] - o[p * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let st = mha_store(8, 0);
        let mut s = Session::new(&st, false, 0);
        let a = s.tape.constant(Tensor::zeros(&[1, 3, 8]));
        let b = s.tape.constant(Tensor::zeros(&[1, 4, 8]));
        assert!(mha(&mut s, a, b, "m", 2, 0.0).is_err());
    }

    fn full_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        register(&mut st, cfg, &mut rng).unwrap();
        st
    }

    #[test]
    fn intra_output_is_layer_normalised() {
        let cfg = ModelConfig::bcic_iv_2a();
        let st = full_store(&cfg, 7);
        for n in [1usize, 6, 31] {
            let mut s = Session::new(&st, false, 0);
            let z = s.tape.constant(rand_tensor(&[2, n, 40], n as u64));
            let out = intra_refine(&mut s, z, Branch::Fine, &cfg).unwrap();
            assert_eq!(s.tape.shape(out), &[2, n, 40]);
            for row in s.tape.data(out).chunks(40) {
                let m = row.iter().sum::<f64>() / 40.0;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 40.0;
                assert!(m.abs() < 1e-6);
                // eps=1e-5 shrinks the variance by at most ~1e-5/var
                assert!((v - 1.0).abs() < 1e-4, "{v}");
            }
        }
    }

    #[test]
    fn two_layers_differ_from_one() {
        let mut cfg = ModelConfig::bcic_iv_2a();
        let st1 = full_store(&cfg, 8);
        cfg.arch.attn_layers = 2;
        let st2 = full_store(&cfg, 8);
        let zin = rand_tensor(&[1, 6, 40], 1);
        let run = |st: &ParamStore, c: &ModelConfig| {
            let mut s = Session::new(st, false, 0);
            let z = s.tape.constant(zin.clone());
            let o = intra_refine(&mut s, z, Branch::Fine, c).unwrap();
            s.tape.data(o).to_vec()
        };
        let one = run(&st1, &ModelConfig::bcic_iv_2a());
        let two = run(&st2, &cfg);
        assert!(one.iter().zip(&two).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn zero_beta_isolates_streams() {
        let cfg = ModelConfig::bcic_iv_2a();
        let mut st = full_store(&cfg, 9);
        st.fill(&beta_name(Branch::Fine, 0), 0.0).unwrap();
        st.fill(&beta_name(Branch::Coarse, 0), 0.0).unwrap();
        let zf = rand_tensor(&[1, 6, 40], 1);
        let run = |zc: Tensor| {
            let mut s = Session::new(&st, false, 0);
            let f = s.tape.constant(zf.clone());
            let c = s.tape.constant(zc);
            let (of, _) = inter_interact(&mut s, f, c, &cfg).unwrap();
            s.tape.data(of).to_vec()
        };
        let a = run(rand_tensor(&[1, 6, 40], 2));
        let b = run(rand_tensor(&[1, 6, 40], 3));
        assert_eq!(a, b);
    }

    #[test]
    fn nonzero_beta_couples_streams() {
        let cfg = ModelConfig::bcic_iv_2a();
        let st = full_store(&cfg, 9);
        let zf = rand_tensor(&[1, 6, 40], 1);
        let run = |zc: Tensor| {
            let mut s = Session::new(&st, false, 0);
            let f = s.tape.constant(zf.clone());
            let c = s.tape.constant(zc);
            let (of, _) = inter_interact(&mut s, f, c, &cfg).unwrap();
            s.tape.data(of).to_vec()
        };
        let a = run(rand_tensor(&[1, 6, 40], 2));
        let b = run(rand_tensor(&[1, 6, 40], 3));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn swapped_roles_swap_outputs() {
        // Tie parameters: the fine-target block copies the coarse-target one
        // and vice versa; swapping the inputs must then swap the outputs.
        let cfg = ModelConfig::bcic_iv_2a();
        let st = full_store(&cfg, 10);
        let mut swapped = st.clone();
        let fp = inter_prefix(Branch::Fine, 0);
        let cp = inter_prefix(Branch::Coarse, 0);
        for name in st.names() {
            if let Some(rest) = name.strip_prefix(&fp) {
                let other = format!("{cp}{rest}");
                swapped.set(name, st.get(&other).unwrap().data()).unwrap();
                swapped.set(&other, st.get(name).unwrap().data()).unwrap();
            }
        }
        let (a, b) = (rand_tensor(&[1, 5, 40], 1), rand_tensor(&[1, 5, 40], 2));
        let run = |store: &ParamStore, x: &Tensor, y: &Tensor| {
            let mut s = Session::new(store, false, 0);
            let f = s.tape.constant(x.clone());
            let c = s.tape.constant(y.clone());
            let (of, oc) = inter_interact(&mut s, f, c, &cfg).unwrap();
            (s.tape.data(of).to_vec(), s.tape.data(oc).to_vec())
        };
        let (f1, c1) = run(&st, &a, &b);
        let (f2, c2) = run(&swapped, &b, &a);
        assert_eq!(f1, c2);
        assert_eq!(c1, f2);
    }
}
