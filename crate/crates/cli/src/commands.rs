use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};
use wavegraph::data_io::{generate_synthetic, ingest_ogw, Store, SyntheticConfig};
use wavegraph::dataset::{prepare_split, PrepConfig, PreparedSplitRecord};
use wavegraph::evaluation::{emit_report, evaluate_run, load_evaluations, missing_runs};
use wavegraph::geometry::SplitName;
use wavegraph::signal_prep::BandSpec;
use wavegraph::training::{run_stages, Checkpoint, ModelKind, Preset, RunManifest, TrainConfig, TrainedRun};
use wavegraph::{Error, PreparedSplitF64};

use crate::{Command, DataArgs, EvalArgs, IngestArgs, Overrides, PrepArgs, ReportArgs, SynthArgs, TrainArgs};

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Ingest(a) => ingest(&a),
        Command::Prep(a) => prep(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => report(&a),
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 3,
        Some(Error::Io { .. }) => 4,
        Some(
            Error::InvalidLayout(_)
            | Error::Catalog(_)
            | Error::Data(_)
            | Error::InsufficientData(_)
            | Error::Schema { .. }
            | Error::Ingestion { .. }
            | Error::Json(_),
        ) => 5,
        Some(Error::TrainingAborted { .. }) => 6,
        Some(Error::Numeric(_) | Error::Metric(_) | Error::Report(_) | Error::Image(_)) => 7,
        None => 1,
    }
}

pub fn error_kind(err: &anyhow::Error) -> &'static str {
    match exit_code(err) {
        3 => "config",
        4 => "missing-input",
        5 => "data",
        6 => "training-aborted",
        7 => "evaluation",
        _ => "internal",
    }
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(v) = a.noise {
        cfg.noise_level = v;
    }
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.samples_per_location {
        cfg.samples_per_location = v;
    }
    let store = generate_synthetic(&cfg, a.seed, &a.store)?;
    log::info!("wrote {} samples to {}", store.ids().len(), store.root().display());
    Ok(())
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let store = ingest_ogw(&a.source, &a.store, a.excitation_hz)?;
    log::info!("ingested {} samples into {}", store.ids().len(), store.root().display());
    Ok(())
}

fn default_bins(preset: Preset) -> usize {
    match preset {
        Preset::Reference => BandSpec::default().bins,
        Preset::Desk => 60,
    }
}

fn prep_config(d: &DataArgs) -> PrepConfig {
    let mut cfg = PrepConfig::default();
    cfg.band.bins = d.bins.unwrap_or_else(|| default_bins(d.preset));
    if let Some(v) = d.band_low_hz {
        cfg.band.low_hz = v;
    }
    if let Some(v) = d.band_high_hz {
        cfg.band.high_hz = v;
    }
    cfg
}

#[derive(Serialize)]
struct PrepManifest<'a> {
    command: &'static str,
    store: &'a Path,
    store_manifest_sha256: String,
    split: SplitName,
    seed: u64,
    prep: PrepConfig,
    cache_key: &'a str,
    reused: bool,
}

/// Loads the cached preprocessing of `(split, seed)` or computes and caches it.
fn prepared(d: &DataArgs, seed: u64) -> anyhow::Result<PreparedSplitF64> {
    let store = Store::open(&d.store)?;
    let cfg = prep_config(d);
    let manifest_bytes = serde_json::to_vec(store.manifest())?;
    let store_sha = hex::encode(Sha256::digest(&manifest_bytes));
    let key_src = serde_json::json!({ "store": store_sha, "prep": cfg, "split": d.split, "seed": seed });
    let key = hex::encode(Sha256::digest(key_src.to_string().as_bytes()));
    let base = d.out.join("prep");
    let cache = base.join(format!("{}_{seed}.json", d.split));
    if cache.exists() {
        let rec: PreparedSplitRecord = read_json(&cache)?;
        if rec.config_hash == key {
            log::info!("reusing cached preprocessing {}", cache.display());
            return Ok(PreparedSplitF64::from_record(&rec)?);
        }
        log::info!("cache {} is stale, recomputing", cache.display());
    }
    let split = prepare_split::<f64>(&store, d.split, seed, &cfg)?;
    write_json(&cache, &split.to_record(&key))?;
    write_json(
        &base.join(format!("{}_{seed}.manifest.json", d.split)),
        &PrepManifest {
            command: "prep",
            store: &d.store,
            store_manifest_sha256: store_sha,
            split: d.split,
            seed,
            prep: cfg,
            cache_key: &key,
            reused: false,
        },
    )?;
    Ok(split)
}

fn prep(a: &PrepArgs) -> anyhow::Result<()> {
    for &seed in &a.seeds {
        let p = prepared(&a.data, seed)?;
        log::info!(
            "split {} seed {seed}: {} train, {} val, {} test, E_max {:.4}",
            a.data.split,
            p.train.len(),
            p.val.len(),
            p.test.len(),
            p.e_max
        );
    }
    Ok(())
}

fn parse_models(s: &str) -> anyhow::Result<Vec<ModelKind>> {
    if s == "all" {
        return Ok(ModelKind::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<ModelKind>().map_err(anyhow::Error::from))
        .collect()
}

fn train_config(preset: Preset, model: ModelKind, bins: usize, o: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(preset, model, bins);
    let c = &mut cfg.coupling;
    if let Some(v) = o.lambda_max {
        c.lambda_max = v;
    }
    if let Some(v) = o.warmup {
        c.warmup = v;
    }
    if let Some(v) = o.ramp {
        c.ramp = v;
    }
    if let Some(v) = o.alpha {
        c.alpha = v;
    }
    if let Some(v) = o.mu {
        c.mu = v;
    }
    if let Some(v) = o.eps_weight {
        c.eps_weight = v;
    }
    if let Some(v) = o.eps_grad {
        c.eps_grad = v;
    }
    if let Some(e) = &o.epochs {
        let [e1, e2, e3] = e.as_slice() else {
            bail!(Error::Config("--epochs needs three values".into()));
        };
        cfg.plan.stage1.epochs = *e1;
        cfg.plan.stage2.epochs = *e2;
        cfg.plan.stage3.epochs = *e3;
    }
    if let Some(b) = o.batch_size {
        cfg.plan.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(out: &Path, split: SplitName, model: ModelKind, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{split}_{model}_{seed}"))
}

fn train_one(d: &DataArgs, model: ModelKind, seed: u64, o: &Overrides) -> anyhow::Result<()> {
    let data = prepared(d, seed)?;
    let cfg = train_config(d.preset, model, data.bins(), o)?;
    log::info!("training {model} on split {} seed {seed}", d.split);
    let run = run_stages(&data, &cfg, seed)?;
    let dir = run_dir(&d.out, d.split, model, seed);
    write_json(&dir.join("checkpoint.json"), &run.checkpoint())?;
    write_json(&dir.join("manifest.json"), &run.manifest)?;
    if let Some(sel) = run.manifest.selected {
        log::info!("{model} seed {seed}: selected stage {} epoch {} score {:.5}", sel.stage, sel.epoch, sel.score);
    }
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let models = parse_models(&a.model)?;
    // prepare caches up front so parallel seeds never race on them
    for &seed in &a.seeds {
        prepared(&a.data, seed)?;
    }
    for model in models {
        if a.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = a
                    .seeds
                    .iter()
                    .map(|&seed| s.spawn(move || train_one(&a.data, model, seed, &a.overrides)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| bail!("training thread panicked")))
                    .collect::<anyhow::Result<Vec<()>>>()
            })?;
        } else {
            for &seed in &a.seeds {
                train_one(&a.data, model, seed, &a.overrides)?;
            }
        }
    }
    Ok(())
}

fn load_run(dir: &Path) -> anyhow::Result<TrainedRun<f64>> {
    let ck: Checkpoint = read_json(&dir.join("checkpoint.json"))?;
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    Ok(TrainedRun::from_checkpoint(&ck, manifest)?)
}

#[derive(Serialize)]
struct EvalManifest<'a> {
    command: &'static str,
    split: SplitName,
    models: &'a [ModelKind],
    seeds: &'a [u64],
    margin: f64,
    prep: PrepConfig,
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let models = parse_models(&a.models)?;
    let d = &a.data;
    let gaps: Vec<String> = models
        .iter()
        .flat_map(|&m| a.seeds.iter().map(move |&s| (m, s)))
        .filter(|&(m, s)| !run_dir(&d.out, d.split, m, s).join("checkpoint.json").exists())
        .map(|(m, s)| format!("split {} model {m} seed {s}", d.split))
        .collect();
    if !gaps.is_empty() {
        bail!(Error::Report(format!("missing trained runs: {}", gaps.join("; "))));
    }
    let eval_dir = d.out.join("eval");
    for &seed in &a.seeds {
        let data = prepared(d, seed)?;
        for &model in &models {
            let run = load_run(&run_dir(&d.out, d.split, model, seed))?;
            let ev = evaluate_run(&run, &data, a.margin)?;
            write_json(&eval_dir.join(format!("{}_{model}_{seed}.eval.json", d.split)), &ev)?;
        }
    }
    write_json(
        &eval_dir.join(format!("{}.manifest.json", d.split)),
        &EvalManifest {
            command: "eval",
            split: d.split,
            models: &models,
            seeds: &a.seeds,
            margin: a.margin,
            prep: prep_config(d),
        },
    )?;
    let runs = load_evaluations(&eval_dir)?;
    emit_report(&runs, &d.out)?;
    log::info!("report written to {}", d.out.join("report.md").display());
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let runs = load_evaluations(&a.out.join("eval"))?;
    if a.models.is_some() || a.seeds.is_some() || a.splits.is_some() {
        let models = parse_models(a.models.as_deref().unwrap_or("all"))?;
        let seeds = a.seeds.clone().unwrap_or_else(|| vec![0, 1, 42]);
        let splits = a.splits.clone().unwrap_or_else(|| vec![SplitName::A]);
        let mut expected = Vec::new();
        for &s in &splits {
            for &m in &models {
                expected.extend(seeds.iter().map(|&seed| (s, m, seed)));
            }
        }
        let gaps = missing_runs(&runs, &expected);
        if !gaps.is_empty() {
            bail!(Error::Report(format!("missing run evaluations: {}", gaps.join("; "))));
        }
    }
    emit_report(&runs, &a.out)?;
    Ok(())
}
