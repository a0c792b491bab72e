use std::collections::BTreeSet;

use dsainet::autodiff::Tape;
use dsainet::data::{make_splits, segment, stride, Matrix, Protocol, SubjectInfo, Trial, TrialFile};
use dsainet::train::{accuracy, weighted_f1};
use dsainet::Tensor;
use proptest::prelude::*;

fn trial_file() -> impl Strategy<Value = TrialFile> {
    (1usize..5, 1usize..12, 2usize..5, 0usize..6).prop_flat_map(|(c, t, k, n)| {
        let trial = (0u32..20, 0..k as u32, prop::collection::vec(any::<f32>(), c * t))
            .prop_map(|(subject, label, signal)| Trial { subject, label, signal });
        (prop::collection::vec(trial, n), 1.0f32..1000.0).prop_map(move |(trials, sample_rate)| TrialFile {
            channels: c,
            samples: t,
            classes: k,
            sample_rate,
            trials,
        })
    })
}

fn bits(f: &TrialFile) -> Vec<Vec<u32>> {
    f.trials.iter().map(|t| t.signal.iter().map(|v| v.to_bits()).collect()).collect()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..80.0, seed in any::<u64>()) {
        let mut x = Vec::with_capacity(rows * cols);
        let mut s = seed;
        for _ in 0..rows * cols {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            x.push(((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale);
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![rows, cols], x).unwrap());
        let p = tape.softmax(v, 1).unwrap();
        for row in tape.data(p).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| q >= 0.0));
        }
    }

    #[test]
    fn trial_file_round_trip(f in trial_file()) {
        let back = TrialFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&f));
        prop_assert_eq!((back.channels, back.samples, back.classes), (f.channels, f.samples, f.classes));
        prop_assert_eq!(back.sample_rate.to_bits(), f.sample_rate.to_bits());
        let meta: Vec<_> = back.trials.iter().map(|t| (t.subject, t.label)).collect();
        let want: Vec<_> = f.trials.iter().map(|t| (t.subject, t.label)).collect();
        prop_assert_eq!(meta, want);
    }

    #[test]
    fn matrix_round_trip(rows in 1usize..5, cols in 1usize..7, seed in any::<u32>()) {
        let data: Vec<f32> = (0..rows * cols).map(|i| f32::from_bits(seed.wrapping_mul(i as u32 + 1) & 0x7f7f_ffff)).collect();
        let m = Matrix { rows, cols, data };
        let back = Matrix::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn truncated_files_rejected(f in trial_file(), cut in 1usize..40) {
        let bytes = f.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(TrialFile::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_cover(n in 3usize..16, k in 3usize..8, seed in any::<u64>(), loso in any::<bool>()) {
        prop_assume!(loso || k <= n);
        let subjects: Vec<SubjectInfo> = (0..n as u32).map(|id| SubjectInfo { id: id * 3 + 1, label: None }).collect();
        let protocol = if loso { Protocol::Loso } else { Protocol::Kfold { k } };
        let m = make_splits(&subjects, protocol, seed).unwrap();
        prop_assert_eq!(m.runs.len(), if loso { n } else { k });
        let all: BTreeSet<u32> = subjects.iter().map(|s| s.id).collect();
        let mut tested = BTreeSet::new();
        for r in &m.runs {
            let (tr, va, te): (BTreeSet<u32>, BTreeSet<u32>, BTreeSet<u32>) =
                (r.train.iter().copied().collect(), r.val.iter().copied().collect(), r.test.iter().copied().collect());
            prop_assert!(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te));
            let union: BTreeSet<u32> = tr.union(&va).chain(te.iter()).copied().collect();
            prop_assert_eq!(&union, &all);
            for s in te {
                prop_assert!(tested.insert(s), "subject tested twice");
            }
        }
        prop_assert_eq!(tested, all);
    }

    #[test]
    fn segment_count_matches_formula(c in 1usize..4, len in 1usize..200, w in 1usize..60, ov in 0.0f64..0.95) {
        prop_assume!(w <= len);
        let rec: Vec<f64> = (0..c * len).map(|i| i as f64).collect();
        let segs = segment(&rec, c, w, ov).unwrap();
        let step = stride(w, ov);
        prop_assert_eq!(segs.len(), (len - w) / step + 1);
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.len(), c * w);
            prop_assert_eq!(s[0], (i * step) as f64);
        }
    }

    #[test]
    fn metrics_bounded(labels in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
        let (p, t): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let a = accuracy(&p, &t).unwrap();
        let f = weighted_f1(&p, &t, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
        if p == t {
            prop_assert_eq!((a, f), (1.0, 1.0));
        }
    }
}
