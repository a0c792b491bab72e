//! The training loop, checkpoint selection and run bookkeeping.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{accuracy, argmax_rows, mean_std, weighted_f1, MeanStd};
use super::optim::{Adam, AdamConfig};
use crate::config::ModelConfig;
use crate::data::{zscore, TrialFile};
use crate::error::{Error, Result};
use crate::model::{apply_bn_updates, Dsainet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 100,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Z-scored trials in `f64`, ready for batching.
#[derive(Clone, Debug)]
pub struct Examples {
    pub channels: usize,
    pub samples: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Examples {
    pub fn from_trials(data: &TrialFile, idx: &[usize]) -> Self {
        let n = data.channels * data.samples;
        let mut x = Vec::with_capacity(idx.len() * n);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = &data.trials[i];
            let start = x.len();
            x.extend(t.signal.iter().map(|&v| f64::from(v)));
            zscore(&mut x[start..], data.channels);
            y.push(t.label as usize);
        }
        Self {
            channels: data.channels,
            samples: data.samples,
            x,
            y,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.channels * self.samples;
        &self.x[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.channels * self.samples);
        for &i in idx {
            data.extend_from_slice(self.trial(i));
        }
        let x = Tensor::new(vec![idx.len(), self.channels, self.samples], data).expect("non-empty batch");
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Keeps the parameters of the epoch with the highest validation accuracy.
/// Ties keep the earlier epoch.
#[derive(Clone, Debug, Default)]
pub struct BestTracker {
    pub epoch: Option<usize>,
    pub val_acc: f64,
    pub params: Option<ParamStore>,
}

impl BestTracker {
    pub fn offer(&mut self, epoch: usize, val_acc: f64, params: &ParamStore) -> bool {
        if self.epoch.is_none() || val_acc > self.val_acc {
            self.epoch = Some(epoch);
            self.val_acc = val_acc;
            self.params = Some(params.clone());
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub test_subjects: Vec<u32>,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub test_acc: f64,
    pub test_f1: f64,
}

pub struct RunOutcome {
    pub record: RunRecord,
    /// Model restored to the best-validation checkpoint.
    pub model: Dsainet,
    /// Model as it stood after the final epoch.
    pub last: Dsainet,
}

pub struct Sets<'a> {
    pub train: &'a Examples,
    pub val: &'a Examples,
    pub test: &'a Examples,
}

/// Evaluation-mode predictions in chunks of `chunk` trials.
pub fn predict(model: &Dsainet, ex: &Examples, chunk: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ex.len()).collect();
    let mut out = Vec::with_capacity(ex.len());
    for part in idx.chunks(chunk.max(1)) {
        let (x, _) = ex.batch(part);
        let logits = model.predict(&x)?;
        out.extend(argmax_rows(logits.data(), model.config.classes));
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 64;

/// One forward/backward/update step. Returns the batch loss.
pub fn train_step(model: &mut Dsainet, opt: &mut Adam, x: Tensor, y: &[usize], dropout_seed: u64) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut s = model.session(true, dropout_seed);
        let xv = s.tape.constant(x);
        let logits = model.forward(&mut s, xv)?;
        let loss = s.tape.cross_entropy(logits, y)?;
        s.tape.backward(loss)?;
        let grads: Vec<(String, Vec<f64>)> = s
            .tape
            .param_grads()
            .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.to_vec())))
            .collect();
        (s.tape.data(loss)[0], grads, std::mem::take(&mut s.bn_updates))
    };
    if !loss.is_finite() {
        return Err(Error::Data(format!("training diverged: loss is {loss}")));
    }
    for (name, g) in grads {
        if let Some(p) = model.params.get_mut(&name) {
            p.accumulate_grad(&g);
        }
    }
    apply_bn_updates(&mut model.params, &updates, model.config.arch.bn_momentum)?;
    opt.step(&mut model.params)?;
    Ok(loss)
}

pub fn train_run(model_cfg: &ModelConfig, tc: &TrainConfig, sets: &Sets<'_>, seed: u64, run: usize, config_hash: &str) -> Result<RunOutcome> {
    tc.validate()?;
    for (name, ex) in [("training", sets.train), ("validation", sets.val), ("test", sets.test)] {
        if ex.is_empty() {
            return Err(Error::Config(format!("{name} partition has no trials")));
        }
        if ex.channels != model_cfg.channels || ex.samples != model_cfg.samples {
            return Err(Error::Config(format!(
                "{name} trials are {}×{} but the model expects {}×{}",
                ex.channels, ex.samples, model_cfg.channels, model_cfg.samples
            )));
        }
        if let Some(&bad) = ex.y.iter().find(|&&l| l >= model_cfg.classes) {
            return Err(Error::Config(format!(
                "{name} trials contain label {bad} but the model has {} classes",
                model_cfg.classes
            )));
        }
    }
    let mut model = Dsainet::new(model_cfg.clone(), seed)?;
    let mut opt = Adam::new(tc.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut best = BestTracker::default();
    let mut train_loss = Vec::with_capacity(tc.epochs);
    let mut val_acc = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..sets.train.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let (x, y) = sets.train.batch(chunk);
            let loss = train_step(&mut model, &mut opt, x, &y, rng.gen())?;
            total += loss * chunk.len() as f64;
        }
        let loss = total / order.len() as f64;
        let acc = accuracy(&predict(&model, sets.val, EVAL_CHUNK)?, &sets.val.y)?;
        log::info!("run {run} seed {seed} epoch {}: loss {loss:.4} val acc {acc:.4}", epoch + 1);
        train_loss.push(loss);
        val_acc.push(acc);
        best.offer(epoch, acc, &model.params);
    }
    let best_model = Dsainet {
        config: model.config.clone(),
        params: best.params.take().expect("at least one epoch"),
    };
    let preds = predict(&best_model, sets.test, EVAL_CHUNK)?;
    let record = RunRecord {
        run,
        seed,
        config_hash: config_hash.to_string(),
        test_subjects: Vec::new(),
        train_loss,
        val_acc,
        best_epoch: best.epoch.expect("at least one epoch"),
        test_acc: accuracy(&preds, &sets.test.y)?,
        test_f1: weighted_f1(&preds, &sets.test.y, model_cfg.classes)?,
    };
    Ok(RunOutcome {
        record,
        model: best_model,
        last: model,
    })
}

/// Hex SHA-256 of the JSON serialisation of `value`. Field order is fixed
/// by the type definitions, so equal configurations hash equally.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub test_acc: MeanStd,
    pub test_f1: MeanStd,
}

/// Mean ± std over all runs (every fold of every seed).
pub fn summarize(records: &[RunRecord]) -> Summary {
    let acc: Vec<f64> = records.iter().map(|r| r.test_acc).collect();
    let f1: Vec<f64> = records.iter().map(|r| r.test_f1).collect();
    Summary {
        runs: records.len(),
        test_acc: mean_std(&acc),
        test_f1: mean_std(&f1),
    }
}

impl Summary {
    pub fn table(&self) -> String {
        format!(
            "metric    mean     std      runs\nACC       {:.4}   {:.4}   {}\nF1(w)     {:.4}   {:.4}   {}\n",
            self.test_acc.mean, self.test_acc.std, self.runs, self.test_f1.mean, self.test_f1.std, self.runs
        )
    }
}

pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Applies `f` to every item on up to `workers` threads. Results keep the
/// input order, and each item's result does not depend on the worker count.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn tracker_prefers_best_not_last() {
        let mk = |v: f64| {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
            p
        };
        let mut t = BestTracker::default();
        for (e, acc) in [0.5, 0.8, 0.8, 0.6].iter().enumerate() {
            t.offer(e, *acc, &mk(e as f64));
        }
        assert_eq!(t.epoch, Some(1));
        assert_eq!(t.params.unwrap().get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&ModelConfig::bcic_iv_2a()).unwrap();
        assert_eq!(a, config_hash(&ModelConfig::bcic_iv_2a()).unwrap());
        assert_ne!(a, config_hash(&ModelConfig::physionet_mi()).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        let out = parallel_map(&items, 4, |i, v| (i as u64) * 100 + v);
        assert_eq!(out, (0..17).map(|v| v * 101).collect::<Vec<_>>());
    }

    #[test]
    fn summary_matches_hand_computation() {
        let rec = |acc, f1| RunRecord {
            run: 0,
            seed: 0,
            config_hash: String::new(),
            test_subjects: vec![],
            train_loss: vec![],
            val_acc: vec![],
            best_epoch: 0,
            test_acc: acc,
            test_f1: f1,
        };
        let s = summarize(&[rec(0.9, 0.8), rec(0.7, 0.6)]);
        assert!((s.test_acc.mean - 0.8).abs() < 1e-15);
        assert!((s.test_acc.std - 0.1).abs() < 1e-15);
        assert!((s.test_f1.mean - 0.7).abs() < 1e-15);
    }

    fn tiny_sets() -> (Examples, Examples, Examples) {
        let data = synth_generate(&SynthConfig {
            subjects: 3,
            trials_per_subject: 8,
            channels: 4,
            samples: 256,
            ..Default::default()
        })
        .unwrap();
        let by = |s: u32| -> Vec<usize> { (0..data.trials.len()).filter(|&i| data.trials[i].subject == s).collect() };
        (
            Examples::from_trials(&data, &by(0)),
            Examples::from_trials(&data, &by(1)),
            Examples::from_trials(&data, &by(2)),
        )
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (tr, va, te) = tiny_sets();
        let cfg = ModelConfig::new(4, 256, 2);
        let tc = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 5,
            seeds: vec![3],
            ..Default::default()
        };
        let sets = Sets { train: &tr, val: &va, test: &te };
        let out = train_run(&cfg, &tc, &sets, 3, 0, "").unwrap();
        let init = Dsainet::new(cfg, 3).unwrap();
        for (name, t) in init.params.iter() {
            assert_eq!(out.last.params.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn same_seed_same_record() {
        let (tr, va, te) = tiny_sets();
        let cfg = ModelConfig::new(4, 256, 2);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            ..Default::default()
        };
        let sets = Sets { train: &tr, val: &va, test: &te };
        let a = train_run(&cfg, &tc, &sets, 1, 0, "h").unwrap().record;
        let b = train_run(&cfg, &tc, &sets, 1, 0, "h").unwrap().record;
        assert_eq!(a, b);
        let bits = |r: &RunRecord| r.train_loss.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = train_run(&cfg, &tc, &sets, 2, 0, "h").unwrap().record;
        assert_ne!(a.train_loss, c.train_loss);
    }

    #[test]
    fn mismatched_data_rejected() {
        let (tr, va, te) = tiny_sets();
        let cfg = ModelConfig::new(5, 256, 2);
        let sets = Sets { train: &tr, val: &va, test: &te };
        let r = train_run(&cfg, &TrainConfig::default(), &sets, 0, 0, "");
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
