//! Subject-independent split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::TrialFile;
use crate::error::{Error, Result};

/// Share of each training subject's trials held out for validation under
/// leave-one-subject-out.
pub const LOSO_VAL_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    Loso,
    Kfold { k: usize },
}

/// One train/validate/test assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub train: Vec<u32>,
    /// Validation subjects. Empty under LOSO, where validation trials are
    /// drawn from the training subjects instead.
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub seed: u64,
    pub stratified: bool,
    pub runs: Vec<SplitRun>,
}

/// Subject id with its label when all of its trials share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubjectInfo {
    pub id: u32,
    pub label: Option<u32>,
}

pub fn subject_info(data: &TrialFile) -> Vec<SubjectInfo> {
    let mut labels: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for t in &data.trials {
        labels.entry(t.subject).or_default().insert(t.label);
    }
    labels
        .into_iter()
        .map(|(id, ls)| SubjectInfo {
            id,
            label: if ls.len() == 1 { ls.first().copied() } else { None },
        })
        .collect()
}

pub fn make_splits(subjects: &[SubjectInfo], protocol: Protocol, seed: u64) -> Result<SplitManifest> {
    let ids: BTreeSet<u32> = subjects.iter().map(|s| s.id).collect();
    if ids.len() != subjects.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match protocol {
        Protocol::Loso => {
            if ids.len() < 2 {
                return Err(Error::Config(format!(
                    "leave-one-subject-out needs at least 2 subjects, got {}",
                    ids.len()
                )));
            }
            let runs = ids
                .iter()
                .map(|&held| SplitRun {
                    train: ids.iter().copied().filter(|&s| s != held).collect(),
                    val: Vec::new(),
                    test: vec![held],
                })
                .collect();
            Ok(SplitManifest {
                protocol,
                seed,
                stratified: true,
                runs,
            })
        }
        Protocol::Kfold { k } => {
            if k < 3 {
                return Err(Error::Config(format!(
                    "k-fold needs k >= 3 (test, validation and at least one training fold), got {k}"
                )));
            }
            if k > ids.len() {
                return Err(Error::Config(format!("{k} folds requested but only {} subjects", ids.len())));
            }
            let stratified = subjects.iter().all(|s| s.label.is_some());
            let mut groups: BTreeMap<Option<u32>, Vec<u32>> = BTreeMap::new();
            for s in subjects {
                groups.entry(if stratified { s.label } else { None }).or_default().push(s.id);
            }
            let mut folds: Vec<Vec<u32>> = vec![Vec::new(); k];
            let mut next = 0;
            for members in groups.values_mut() {
                members.sort_unstable();
                members.shuffle(&mut rng);
                for &id in members.iter() {
                    folds[next % k].push(id);
                    next += 1;
                }
            }
            for f in &mut folds {
                f.sort_unstable();
            }
            let runs = (0..k)
                .map(|test| {
                    let others: Vec<usize> = (0..k).filter(|&i| i != test).collect();
                    let val = *others.choose(&mut rng).expect("k >= 3");
                    let mut train: Vec<u32> = others
                        .iter()
                        .filter(|&&i| i != val)
                        .flat_map(|&i| folds[i].iter().copied())
                        .collect();
                    train.sort_unstable();
                    SplitRun {
                        train,
                        val: folds[val].clone(),
                        test: folds[test].clone(),
                    }
                })
                .collect();
            Ok(SplitManifest {
                protocol,
                seed,
                stratified,
                runs,
            })
        }
    }
}

impl SplitManifest {
    /// Every run's partitions are pairwise subject-disjoint and non-empty
    /// where required.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.runs.iter().enumerate() {
            let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
                r.train.iter().collect(),
                r.val.iter().collect(),
                r.test.iter().collect(),
            );
            if tr.is_empty() || te.is_empty() {
                return Err(Error::Config(format!("run {i}: empty train or test partition")));
            }
            if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
                return Err(Error::Config(format!("run {i}: partitions share subjects")));
            }
            if va.is_empty() && self.protocol != Protocol::Loso {
                return Err(Error::Config(format!("run {i}: empty validation partition")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: not a split manifest ({e})", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

/// Trial indices of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Resolves a run to trial indices. With no validation subjects, a
/// label-stratified [`LOSO_VAL_FRACTION`] of each training subject's trials
/// is moved to validation, drawn with `seed`.
pub fn partition(data: &TrialFile, run: &SplitRun, seed: u64) -> Result<Partition> {
    let (tr, va, te): (BTreeSet<u32>, BTreeSet<u32>, BTreeSet<u32>) = (
        run.train.iter().copied().collect(),
        run.val.iter().copied().collect(),
        run.test.iter().copied().collect(),
    );
    let mut p = Partition {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut pools: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, t) in data.trials.iter().enumerate() {
        if te.contains(&t.subject) {
            p.test.push(i);
        } else if va.contains(&t.subject) {
            p.val.push(i);
        } else if tr.contains(&t.subject) {
            if va.is_empty() {
                pools.entry((t.subject, t.label)).or_default().push(i);
            } else {
                p.train.push(i);
            }
        }
    }
    if va.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in pools.values_mut() {
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * LOSO_VAL_FRACTION).round() as usize;
            p.val.extend_from_slice(&idx[..n_val]);
            p.train.extend_from_slice(&idx[n_val..]);
        }
        p.train.sort_unstable();
        p.val.sort_unstable();
    }
    for (name, v) in [("training", &p.train), ("validation", &p.val), ("test", &p.test)] {
        if v.is_empty() {
            return Err(Error::Config(format!("{name} partition has no trials")));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unlabeled(n: u32) -> Vec<SubjectInfo> {
        (1..=n).map(|id| SubjectInfo { id, label: None }).collect()
    }

    #[test]
    fn loso_tests_each_subject_once() {
        let m = make_splits(&unlabeled(9), Protocol::Loso, 0).unwrap();
        assert_eq!(m.runs.len(), 9);
        for (i, r) in m.runs.iter().enumerate() {
            assert_eq!(r.test, vec![i as u32 + 1]);
            assert_eq!(r.train.len(), 8);
        }
        m.validate().unwrap();
    }

    #[test]
    fn kfold_partitions_subjects() {
        let m = make_splits(&unlabeled(10), Protocol::Kfold { k: 5 }, 3).unwrap();
        let mut seen: Vec<u32> = m.runs.iter().flat_map(|r| r.test.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (1..=10).collect::<Vec<_>>());
        m.validate().unwrap();
        for r in &m.runs {
            assert_eq!(r.train.len() + r.val.len() + r.test.len(), 10);
        }
    }

    #[test]
    fn kfold_rejects_too_many_folds() {
        assert!(make_splits(&unlabeled(10), Protocol::Kfold { k: 20 }, 0).is_err());
        assert!(make_splits(&unlabeled(10), Protocol::Kfold { k: 2 }, 0).is_err());
    }

    #[test]
    fn kfold_stratifies_subject_labels() {
        let subs: Vec<SubjectInfo> = (0..12).map(|id| SubjectInfo { id, label: Some(id % 2) }).collect();
        let m = make_splits(&subs, Protocol::Kfold { k: 3 }, 1).unwrap();
        assert!(m.stratified);
        for r in &m.runs {
            let ones = r.test.iter().filter(|&&s| s % 2 == 1).count();
            assert_eq!(ones, 2);
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = make_splits(&unlabeled(6), Protocol::Kfold { k: 3 }, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        m.write(&path).unwrap();
        assert_eq!(SplitManifest::read(&path).unwrap(), m);
    }
}
