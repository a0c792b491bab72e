//! Running every split of a manifest for every seed.

use super::run::{parallel_map, train_run, Examples, RunOutcome, Sets, TrainConfig};
use crate::config::ModelConfig;
use crate::data::{partition, SplitManifest, TrialFile};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Job {
    pub run: usize,
    pub seed: u64,
}

/// Seed-major list of (run, seed) pairs, optionally truncated to the first
/// `max_runs` runs of the manifest.
pub fn jobs(manifest: &SplitManifest, seeds: &[u64], max_runs: Option<usize>) -> Vec<Job> {
    let n = max_runs.map_or(manifest.runs.len(), |m| m.min(manifest.runs.len()));
    seeds
        .iter()
        .flat_map(|&seed| (0..n).map(move |run| Job { run, seed }))
        .collect()
}

pub fn run_job(model: &ModelConfig, tc: &TrainConfig, data: &TrialFile, manifest: &SplitManifest, job: Job, hash: &str) -> Result<RunOutcome> {
    let split = &manifest.runs[job.run];
    let p = partition(data, split, job.seed)?;
    let train = Examples::from_trials(data, &p.train);
    let val = Examples::from_trials(data, &p.val);
    let test = Examples::from_trials(data, &p.test);
    let sets = Sets {
        train: &train,
        val: &val,
        test: &test,
    };
    let mut out = train_run(model, tc, &sets, job.seed, job.run, hash)?;
    out.record.test_subjects = split.test.clone();
    Ok(out)
}

/// Trains all jobs on up to `workers` threads; results keep job order.
pub fn run_jobs(
    model: &ModelConfig,
    tc: &TrainConfig,
    data: &TrialFile,
    manifest: &SplitManifest,
    jobs: &[Job],
    workers: usize,
    hash: &str,
) -> Result<Vec<RunOutcome>> {
    manifest.validate()?;
    parallel_map(jobs, workers, |_, &job| run_job(model, tc, data, manifest, job, hash))
        .into_iter()
        .collect()
}
