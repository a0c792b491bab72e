use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use super::{AttnArgs, ConfigArgs, EvalArgs, GenArgs, InspectArgs, SaliencyArgs, SplitArgs, TrainArgs};
use crate::cli::CliConfig;
use crate::config::Ablation;
use crate::data::{make_splits, subject_info, synth_generate, Matrix, SplitManifest, SynthConfig, TrialFile};
use crate::error::{Error, Result};
use crate::interpret;
use crate::model::Dsainet;
use crate::train::{self, accuracy, config_hash, predict, summarize, weighted_f1, Examples};

pub const MAC_CONVENTION: &str = "MACs count one multiply-accumulate per product in convolutions, \
linear layers and attention score/mixing products, for a single trial in evaluation mode; \
normalisation, activations, softmax, pooling and additions are not counted";

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad {what} `{v}`"))))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if !s.contains(',') {
        if let Ok(n) = s.trim().parse::<u64>() {
            return Ok((0..n).collect());
        }
    }
    parse_list(s, "seed")
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<CliConfig> {
    let mut sets = args.sets.clone();
    sets.extend(extra);
    let mut cfg = CliConfig::load(args.config.as_deref(), &sets)?;
    if let Some(name) = &args.ablation {
        cfg.ablation = Ablation::variants()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::variants().iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown ablation `{name}` (one of {})", names.join(", ")))
            })?;
    }
    Ok(cfg)
}

fn select(data: &TrialFile, subjects: Option<&str>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match subjects {
        None => (0..data.trials.len()).collect(),
        Some(s) => {
            let ids: Vec<u32> = parse_list(s, "subject id")?;
            (0..data.trials.len())
                .filter(|&i| ids.contains(&data.trials[i].subject))
                .collect()
        }
    };
    if idx.is_empty() {
        return Err(Error::Data("no trials selected".into()));
    }
    Ok(idx)
}

fn check_layout(model: &Dsainet, data: &TrialFile) -> Result<()> {
    let c = &model.config;
    if (c.channels, c.samples) != (data.channels, data.samples) || data.classes > c.classes {
        return Err(Error::Config(format!(
            "checkpoint expects {}×{} trials with {} classes, data file has {}×{} with {}",
            c.channels, c.samples, c.classes, data.channels, data.samples, data.classes
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(e) = a.epochs {
        extra.push(format!("train.epochs={e}"));
    }
    if let Some(b) = a.batch_size {
        extra.push(format!("train.batch_size={b}"));
    }
    if let Some(lr) = a.lr {
        extra.push(format!("train.learning_rate={lr:e}"));
    }
    if let Some(p) = &a.protocol {
        extra.push(format!("data.protocol=\"{p}\""));
    }
    if let Some(k) = a.folds {
        extra.push(format!("data.folds={k}"));
    }
    let mut cfg = load_config(&a.cfg, extra)?;
    if let Some(s) = &a.seeds {
        cfg.train.seeds = parse_seeds(s)?;
        cfg.train.validate()?;
    }
    let data = TrialFile::read(&a.data)?;
    let model_cfg = cfg.model_for(&data)?;
    let manifest = match &a.manifest {
        Some(p) => SplitManifest::read(p)?,
        None => make_splits(&subject_info(&data), cfg.data.protocol()?, cfg.data.split_seed)?,
    };
    let known = data.subjects();
    for run in &manifest.runs {
        if let Some(s) = run.train.iter().chain(&run.val).chain(&run.test).find(|s| !known.contains(s)) {
            return Err(Error::Config(format!("manifest names subject {s}, absent from the data file")));
        }
    }
    let hash = config_hash(&(&model_cfg, &cfg))?;
    let effective = cfg.to_toml()?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), &effective)?;
    manifest.write(&a.out.join("manifest.json"))?;
    let mut log = fs::File::create(a.out.join("run.log"))?;
    writeln!(log, "config hash {hash}\n{effective}")?;

    let jobs = train::jobs(&manifest, &cfg.train.seeds, a.max_runs);
    log::info!("{} runs on {} worker(s), config hash {hash}", jobs.len(), a.workers);
    let outcomes = train::run_jobs(&model_cfg, &cfg.train, &data, &manifest, &jobs, a.workers, &hash)?;

    let runs_path = a.out.join("runs.jsonl");
    if runs_path.exists() {
        fs::remove_file(&runs_path)?;
    }
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let r = o.record;
        o.model.save(&a.out.join(format!("ckpt_run{}_seed{}.json", r.run, r.seed)))?;
        train::run::append_record(&runs_path, &r)?;
        writeln!(
            log,
            "run {} seed {} test {:?}: best epoch {} acc {:.4} f1 {:.4}",
            r.run,
            r.seed,
            r.test_subjects,
            r.best_epoch + 1,
            r.test_acc,
            r.test_f1
        )?;
        records.push(r);
    }
    let summary = summarize(&records);
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(a.out.join("summary.txt"), summary.table())?;
    write!(log, "{}", summary.table())?;
    print!("{}", summary.table());
    println!("config hash {hash}");
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = Dsainet::load(&a.checkpoint)?;
    let data = TrialFile::read(&a.data)?;
    check_layout(&model, &data)?;
    let ex = Examples::from_trials(&data, &select(&data, a.subjects.as_deref())?);
    let preds = predict(&model, &ex, 64)?;
    println!(
        "trials {}  ACC {:.4}  F1(w) {:.4}",
        ex.len(),
        accuracy(&preds, &ex.y)?,
        weighted_f1(&preds, &ex.y, model.config.classes)?
    );
    Ok(())
}

/// Parameter total per top-level component, in registration order.
pub fn param_breakdown(model: &Dsainet) -> Vec<(String, usize)> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        if !counts.contains_key(&group) {
            order.push(group.clone());
        }
        *counts.entry(group).or_default() += t.numel();
    }
    order.into_iter().map(|g| (g.clone(), counts[&g])).collect()
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Vec::new())?;
    let model_cfg = cfg.model(
        cfg.data.channels.unwrap_or(a.channels),
        cfg.data.samples.unwrap_or(a.samples),
        cfg.data.classes.unwrap_or(a.classes),
    )?;
    let model = Dsainet::new(model_cfg, 0)?;
    let c = &model.config;
    println!(
        "input {} channels × {} samples, {} classes, {} tokens",
        c.channels,
        c.samples,
        c.classes,
        c.n_tokens()
    );
    println!("trainable parameters: {}", model.param_count());
    for (group, n) in param_breakdown(&model) {
        println!("  {group:<8} {n}");
    }
    if a.verbose {
        for (name, t) in model.params.iter() {
            println!("    {name} {:?}", t.shape());
        }
    }
    let macs = model.macs()?;
    println!("MACs: {macs} ({:.2} M)", macs as f64 / 1e6);
    println!("convention: {MAC_CONVENTION}");
    Ok(())
}

pub fn saliency(a: &SaliencyArgs) -> Result<()> {
    let model = Dsainet::load(&a.checkpoint)?;
    let data = TrialFile::read(&a.data)?;
    check_layout(&model, &data)?;
    let ex = Examples::from_trials(&data, &select(&data, a.subjects.as_deref())?);
    let s = interpret::saliency(&model, &ex)?;
    Matrix::from_f64(1, s.len(), &s)?.write(&a.out)?;
    for (ch, v) in s.iter().enumerate() {
        println!("channel {ch:>3}  {v:.6e}");
    }
    Ok(())
}

pub fn attn_export(a: &AttnArgs) -> Result<()> {
    let model = Dsainet::load(&a.checkpoint)?;
    let data = TrialFile::read(&a.data)?;
    check_layout(&model, &data)?;
    if a.trial >= data.trials.len() {
        return Err(Error::Config(format!(
            "trial {} out of range, file has {}",
            a.trial,
            data.trials.len()
        )));
    }
    let ex = Examples::from_trials(&data, &[a.trial]);
    let trace = interpret::trace_trial(&model, ex.trial(0))?;
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for map in &trace.attention {
        for h in 0..map.probs.shape()[1] {
            let (n, v) = map.head(0, h);
            Matrix::from_f64(n, n, &v)?.write(&a.out.join(format!("{}.mat", interpret::map_stem(map, h))))?;
            written += 1;
        }
    }
    let branches = model.config.ablation.active_branches();
    for (b, w) in branches.iter().zip(&trace.aggregation) {
        let n = w.shape()[1];
        Matrix::from_f64(1, n, w.data())?.write(&a.out.join(format!("aggregation_{}.mat", b.name())))?;
        written += 1;
    }
    println!("wrote {written} matrices to {}", a.out.display());
    Ok(())
}

pub fn gen_data(a: &GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        subjects: a.subjects,
        trials_per_subject: a.trials,
        channels: a.channels,
        samples: a.samples,
        classes: a.classes,
        sample_rate: a.sample_rate,
        amplitude: a.amplitude,
        noise_std: a.noise_std,
        freq_jitter: a.freq_jitter,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let f = synth_generate(&cfg)?;
    f.write(&a.out)?;
    println!(
        "wrote {} trials ({} subjects, {}×{}, {} classes) to {}",
        f.trials.len(),
        a.subjects,
        f.channels,
        f.samples,
        f.classes,
        a.out.display()
    );
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let data = TrialFile::read(&a.data)?;
    let section = crate::cli::DataSection {
        protocol: a.protocol.clone(),
        folds: a.folds,
        ..Default::default()
    };
    let m = make_splits(&subject_info(&data), section.protocol()?, a.seed)?;
    m.write(&a.out)?;
    println!("wrote {} runs to {}", m.runs.len(), a.out.display());
    Ok(())
}
