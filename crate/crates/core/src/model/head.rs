//! Query-driven token pooling and the linear classifier.

use rand::Rng;

use super::session::{register_linear, Session};
use crate::autodiff::Var;
use crate::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const QUERY: &str = "head.query";
pub const CLS: &str = "head.cls";

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let d = cfg.arch.embed_dim;
    if cfg.ablation.aggregation == Aggregation::Adaptive {
        store.register(QUERY, &[d], Init::Normal(0.02), rng)?;
    }
    register_linear(store, CLS, cfg.classifier_width(), cfg.classes, rng)
}

/// Pools `z: [batch, N, d]` to `[batch, d]`. Returns the pooled vectors
/// and the token weights `[batch, N]`.
pub fn aggregate(s: &mut Session<'_>, z: Var, mode: Aggregation) -> Result<(Var, Var)> {
    let sh = s.tape.shape(z).to_vec();
    let [b, n, d] = sh[..] else {
        return Err(Error::Dimension(format!("aggregate expects [batch, N, d], got {sh:?}")));
    };
    let q = match mode {
        Aggregation::Adaptive => {
            let q = s.p(QUERY)?;
            s.tape.reshape(q, &[1, d])?
        }
        Aggregation::Mean => s.tape.constant(Tensor::zeros(&[1, d])),
    };
    let scores = s.tape.linear(z, q, None)?;
    let scores = s.tape.reshape(scores, &[b, 1, n])?;
    let w = s.tape.softmax(scores, 2)?;
    let p = s.tape.bmm(w, z, false)?;
    let p = s.tape.reshape(p, &[b, d])?;
    let w = s.tape.reshape(w, &[b, n])?;
    Ok((p, w))
}

/// Logits from the pooled branch vectors, concatenated fine then coarse.
pub fn classify(s: &mut Session<'_>, pf: Option<Var>, pc: Option<Var>, classes: usize) -> Result<Var> {
    let x = match (pf, pc) {
        (Some(f), Some(c)) => s.tape.concat(f, c)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => return Err(Error::Config("classifier needs at least one branch".into())),
    };
    let w = s.p(&format!("{CLS}.weight"))?;
    let ws = s.tape.shape(w).to_vec();
    if ws[0] != classes || Some(&ws[1]) != s.tape.shape(x).last() {
        return Err(Error::Config(format!(
            "classifier weight {ws:?} does not match {classes} classes and input {:?}",
            s.tape.shape(x)
        )));
    }
    s.linear(x, CLS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn store_with_query(q: Vec<f64>) -> ParamStore {
        let mut st = ParamStore::new();
        let d = q.len();
        st.insert(QUERY, Tensor::new(vec![d], q).unwrap().with_requires_grad(true)).unwrap();
        st
    }

    #[test]
    fn single_token_gets_full_weight() {
        let st = store_with_query(rand_vec(40, 1));
        let mut s = Session::new(&st, false, 0);
        let tok = rand_vec(40, 2);
        let z = s.tape.constant(Tensor::new(vec![1, 1, 40], tok.clone()).unwrap());
        let (p, w) = aggregate(&mut s, z, Aggregation::Adaptive).unwrap();
        assert_eq!(s.tape.data(w), &[1.0]);
        assert_eq!(s.tape.data(p), &tok[..]);
    }

    #[test]
    fn zero_query_is_token_mean_and_matches_mean_mode() {
        let st = store_with_query(vec![0.0; 40]);
        let z = Tensor::new(vec![2, 31, 40], rand_vec(2 * 31 * 40, 3)).unwrap();
        let mut s = Session::new(&st, false, 0);
        let zv = s.tape.constant(z.clone());
        let (pa, wa) = aggregate(&mut s, zv, Aggregation::Adaptive).unwrap();
        let (pm, wm) = aggregate(&mut s, zv, Aggregation::Mean).unwrap();
        assert_eq!(s.tape.data(pa), s.tape.data(pm));
        assert_eq!(s.tape.data(wa), s.tape.data(wm));
        for bi in 0..2 {
            for c in 0..40 {
                let mean: f64 = (0..31).map(|t| z.data()[(bi * 31 + t) * 40 + c]).sum::<f64>() / 31.0;
                assert!((s.tape.data(pa)[bi * 40 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_explicit_weighted_sum() {
        let q = rand_vec(40, 4);
        let st = store_with_query(q.clone());
        let z = rand_vec(31 * 40, 5);
        let mut s = Session::new(&st, false, 0);
        let zv = s.tape.constant(Tensor::new(vec![1, 31, 40], z.clone()).unwrap());
        let (p, w) = aggregate(&mut s, zv, Aggregation::Adaptive).unwrap();

        let scores: Vec<f64> = (0..31).map(|t| (0..40).map(|c| q[c] * z[t * 40 + c]).sum()).collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        for t in 0..31 {
            assert!((s.tape.data(w)[t] - e[t] / tot).abs() < 1e-12);
        }
        for c in 0..40 {
            let want: f64 = (0..31).map(|t| e[t] / tot * z[t * 40 + c]).sum();
            assert!((s.tape.data(p)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_shift_invariant() {
        // adding a multiple of q to every token shifts all scores equally
        let q = rand_vec(8, 6);
        let st = store_with_query(q.clone());
        let z = rand_vec(5 * 8, 7);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        let shifted: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + 3.0 * q[i % 8] / qq).collect();
        let mut s = Session::new(&st, false, 0);
        let a = s.tape.constant(Tensor::new(vec![1, 5, 8], z).unwrap());
        let b = s.tape.constant(Tensor::new(vec![1, 5, 8], shifted).unwrap());
        let (_, wa) = aggregate(&mut s, a, Aggregation::Adaptive).unwrap();
        let (_, wb) = aggregate(&mut s, b, Aggregation::Adaptive).unwrap();
        for (x, y) in s.tape.data(wa).iter().zip(s.tape.data(wb)) {
            assert!((x - y).abs() < 1e-12);
            assert!(*x >= 0.0);
        }
        assert!((s.tape.data(wa).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn head_store(cfg: &ModelConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut st = ParamStore::new();
        register(&mut st, cfg, &mut rng).unwrap();
        st
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let cfg = ModelConfig::bcic_iv_2a();
        let mut st = head_store(&cfg);
        st.fill("head.cls.weight", 0.0).unwrap();
        st.fill("head.cls.bias", 0.0).unwrap();
        let mut s = Session::new(&st, false, 0);
        let f = s.tape.constant(Tensor::new(vec![3, 40], rand_vec(120, 1)).unwrap());
        let c = s.tape.constant(Tensor::new(vec![3, 40], rand_vec(120, 2)).unwrap());
        let y = classify(&mut s, Some(f), Some(c), 4).unwrap();
        assert_eq!(s.tape.shape(y), &[3, 4]);
        assert!(s.tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_shapes_follow_branch_count() {
        let cfg = ModelConfig::bcic_iv_2a();
        assert_eq!(head_store(&cfg).get("head.cls.weight").unwrap().shape(), &[4, 80]);
        let single = cfg.single_branch_mode(crate::config::Branch::Fine).unwrap();
        assert_eq!(head_store(&single).get("head.cls.weight").unwrap().shape(), &[4, 40]);
    }

    #[test]
    fn swapping_inputs_and_column_blocks_preserves_logits() {
        let cfg = ModelConfig::bcic_iv_2a();
        let st = head_store(&cfg);
        let w = st.get("head.cls.weight").unwrap().data().to_vec();
        let mut swapped = st.clone();
        let mut ws = vec![0.0; w.len()];
        for r in 0..4 {
            ws[r * 80..r * 80 + 40].copy_from_slice(&w[r * 80 + 40..r * 80 + 80]);
            ws[r * 80 + 40..r * 80 + 80].copy_from_slice(&w[r * 80..r * 80 + 40]);
        }
        swapped.set("head.cls.weight", &ws).unwrap();
        let (pf, pc) = (rand_vec(40, 3), rand_vec(40, 4));
        let run = |store: &ParamStore, a: &[f64], b: &[f64]| {
            let mut s = Session::new(store, false, 0);
            let f = s.tape.constant(Tensor::new(vec![1, 40], a.to_vec()).unwrap());
            let c = s.tape.constant(Tensor::new(vec![1, 40], b.to_vec()).unwrap());
            let y = classify(&mut s, Some(f), Some(c), 4).unwrap();
            s.tape.data(y).to_vec()
        };
        let a = run(&st, &pf, &pc);
        let b = run(&swapped, &pc, &pf);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let cfg = ModelConfig::bcic_iv_2a();
        let st = head_store(&cfg);
        let mut s = Session::new(&st, false, 0);
        let f = s.tape.constant(Tensor::zeros(&[1, 40]));
        let c = s.tape.constant(Tensor::zeros(&[1, 40]));
        assert!(matches!(classify(&mut s, Some(f), Some(c), 3), Err(Error::Config(_))));
    }
}
