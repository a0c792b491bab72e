//! Input-gradient saliency and attention-map extraction.

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Dsainet, Trace};
use crate::tensor::Tensor;
use crate::train::Examples;

const CHUNK: usize = 32;

/// Per-channel saliency: `|∂ logit_true / ∂ x|` averaged over time and
/// trials, computed in evaluation mode. Returns `C` values.
pub fn saliency(model: &Dsainet, ex: &Examples) -> Result<Vec<f64>> {
    let (c, t, k) = (model.config.channels, model.config.samples, model.config.classes);
    if ex.channels != c || ex.samples != t {
        return Err(Error::Config(format!(
            "trials are {}×{} but the checkpoint expects {c}×{t}",
            ex.channels, ex.samples
        )));
    }
    if ex.is_empty() {
        return Err(Error::Data("no trials to explain".into()));
    }
    let mut acc = vec![0.0; c];
    let idx: Vec<usize> = (0..ex.len()).collect();
    for part in idx.chunks(CHUNK) {
        let (x, y) = ex.batch(part);
        let b = part.len();
        let mut s = model.session(false, 0);
        let xv = s.tape.leaf(x.with_requires_grad(true));
        let logits = model.forward(&mut s, xv)?;
        let mut onehot = vec![0.0; b * k];
        for (i, &label) in y.iter().enumerate() {
            if label >= k {
                return Err(Error::Data(format!("trial {} has label {label} outside [0, {k})", part[i])));
            }
            onehot[i * k + label] = 1.0;
        }
        let mask = s.tape.constant(Tensor::new(vec![b, k], onehot)?);
        let picked = s.tape.mul(logits, mask)?;
        let total = s.tape.sum(picked);
        s.tape.backward(total)?;
        let g = s.tape.grad(xv).ok_or_else(|| Error::Contract("input gradient missing".into()))?;
        for trial in g.chunks(c * t) {
            for (ch, row) in trial.chunks(t).enumerate() {
                acc[ch] += row.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
    }
    let denom = (ex.len() * t) as f64;
    Ok(acc.into_iter().map(|v| v / denom).collect())
}

/// Attention maps and aggregation weights of one trial in evaluation mode.
pub fn trace_trial(model: &Dsainet, trial: &[f64]) -> Result<Trace> {
    let (c, t) = (model.config.channels, model.config.samples);
    let x = Tensor::new(vec![1, c, t], trial.to_vec())?;
    let mut s = model.session(false, 0).with_trace();
    let xv = s.tape.constant(x);
    model.forward(&mut s, xv)?;
    Ok(s.trace.unwrap_or_default())
}

/// File stem for one exported head, e.g. `cross_fine_from_coarse_l0_h2`.
pub fn map_stem(map: &AttentionMap, head: usize) -> String {
    format!("{}_l{}_h{head}", map.family.slug(), map.layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, ModelConfig};
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::MapFamily;

    fn examples() -> Examples {
        let d = synth_generate(&SynthConfig {
            subjects: 1,
            trials_per_subject: 6,
            channels: 4,
            samples: 256,
            ..Default::default()
        })
        .unwrap();
        Examples::from_trials(&d, &(0..6).collect::<Vec<_>>())
    }

    #[test]
    fn saliency_length_and_sign() {
        let m = Dsainet::new(ModelConfig::new(4, 256, 2), 0).unwrap();
        let s = saliency(&m, &examples()).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    #[test]
    fn zero_classifier_zero_saliency() {
        let mut m = Dsainet::new(ModelConfig::new(4, 256, 2), 0).unwrap();
        m.params.fill("head.cls.weight", 0.0).unwrap();
        let s = saliency(&m, &examples()).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_matches_single_trial_finite_difference() {
        let m = Dsainet::new(ModelConfig::new(4, 256, 2), 1).unwrap();
        let ex = examples();
        let one = Examples {
            x: ex.trial(0).to_vec(),
            y: vec![ex.y[0]],
            ..ex.clone()
        };
        let sal = saliency(&m, &one).unwrap();
        // channel 1 saliency from central differences on every sample
        let h = 1e-5;
        let logit = |x: &[f64]| {
            let y = m.predict(&Tensor::new(vec![1, 4, 256], x.to_vec()).unwrap()).unwrap();
            y.data()[one.y[0]]
        };
        let mut total = 0.0;
        for i in 256..512 {
            let mut xp = one.x.clone();
            let mut xm = one.x.clone();
            xp[i] += h;
            xm[i] -= h;
            total += ((logit(&xp) - logit(&xm)) / (2.0 * h)).abs();
        }
        let fd = total / 256.0;
        assert!((fd - sal[1]).abs() / fd < 1e-5, "{fd} vs {}", sal[1]);
    }

    #[test]
    fn trace_rows_are_distributions() {
        let m = Dsainet::new(ModelConfig::new(4, 256, 2), 0).unwrap();
        let tr = trace_trial(&m, examples().trial(0)).unwrap();
        assert_eq!(tr.attention.len(), 4);
        for map in &tr.attention {
            for h in 0..4 {
                let (n, v) = map.head(0, h);
                assert_eq!(n, 8);
                for row in v.chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        let stems: Vec<String> = tr.attention.iter().map(|m| map_stem(m, 0)).collect();
        assert!(stems.contains(&"cross_coarse_from_fine_l0_h0".to_string()));
    }

    #[test]
    fn no_inter_has_no_cross_maps() {
        let m = Dsainet::new(ModelConfig::new(4, 256, 2).with_ablation(Ablation::no_inter()), 0).unwrap();
        let tr = trace_trial(&m, examples().trial(0)).unwrap();
        assert_eq!(tr.attention.len(), 2);
        assert!(tr
            .attention
            .iter()
            .all(|m| matches!(m.family, MapFamily::IntraFine | MapFamily::IntraCoarse)));
    }
}
