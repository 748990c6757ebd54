use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::ArgMatches;
use rayon::prelude::*;
use serde_json::json;

use moirai_core::datagen::{kernelsynth_corpus, tsmixup, MixupConfig, SynthOptions};
use moirai_core::datapipe::{read_corpus, resolve_data_path, write_corpus};
use moirai_core::decoding::{bench_kv as run_bench, forecast as run_forecast, write_forecast, ForecastRecord, Forecaster, ModelForecaster};
use moirai_core::evaluation::{run_eval, SeasonalNaive, Task};
use moirai_core::model::checkpoint;
use moirai_core::training::{metrics_path, train_with, write_metrics, LossKind, TrainConfig};
use moirai_core::{DecodeMode, DecodeOptions, Model, ModelConfig, ProjectionKind, Series};

use crate::manifest::{with_out, RunManifest};
use crate::{BenchArgs, DecodeArg, EvalArgs, ForecastArgs, LossArg, MixupArgs, ProjectionArg, ReplayArgs, SynthArgs, TrainArgs};

fn decode_mode(d: DecodeArg) -> DecodeMode {
    match d {
        DecodeArg::Direct => DecodeMode::Direct,
        DecodeArg::Arq => DecodeMode::Arq,
    }
}

fn load_series(path: &Path) -> anyhow::Result<(PathBuf, Vec<Series>)> {
    let resolved = resolve_data_path(path);
    let (series, report) = read_corpus(&resolved).with_context(|| format!("loading {}", resolved.display()))?;
    if report.malformed > 0 {
        eprintln!("skipped {} malformed record(s) in {}", report.malformed, resolved.display());
    }
    Ok((resolved, series))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    f(&mut out)?;
    out.flush().with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: &SynthArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let opts = SynthOptions {
        freq: a.freq.clone(),
        ..SynthOptions::default()
    };
    let series = kernelsynth_corpus(a.n, a.len, a.seed, &opts)?;
    write_corpus(&a.out, &series)?;
    eprintln!("wrote {} series to {}", series.len(), a.out.display());
    let mut m = RunManifest::new("synth", argv, json!({"n": a.n, "len": a.len, "freq": a.freq}), Some(a.seed));
    m.outputs.push(a.out.clone());
    m.finish(&a.out, start.elapsed())
}

pub fn mixup(a: &MixupArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let (corpus_path, pool) = load_series(&a.corpus)?;
    let cfg = MixupConfig {
        k_max: a.k_max,
        len_min: a.len_min,
        len_max: a.len_max,
        weight_concentration: a.concentration,
    };
    let seeds = moirai_core::datagen::derive_seeds(a.seed, a.n);
    let series = seeds
        .par_iter()
        .map(|&s| tsmixup(&pool, &cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    write_corpus(&a.out, &series)?;
    eprintln!("wrote {} series to {}", series.len(), a.out.display());
    let mut m = RunManifest::new("mixup", argv, json!({"n": a.n, "mixup": cfg_json(&cfg)?}), Some(a.seed));
    m.inputs.push(corpus_path);
    m.outputs.push(a.out.clone());
    m.finish(&a.out, start.elapsed())
}

fn cfg_json(v: &impl serde::Serialize) -> anyhow::Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

/// Defaults, then the config file, then flags typed on the command line.
/// Without a config file every flag (default or not) applies.
pub fn resolve_train_config(a: &TrainArgs, sub: &ArgMatches) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let has_file = a.config.is_some();
    let set = |id: &str| !has_file || sub.value_source(id) == Some(ValueSource::CommandLine);
    if set("seed") {
        cfg.seed = a.seed;
    }
    if set("steps") {
        cfg.optim.total_steps = a.steps;
        cfg.optim.warmup_steps = (a.steps / 10).max(1);
    }
    if set("batch") {
        cfg.optim.batch_size = a.batch;
    }
    if set("ctx_patches") {
        cfg.ctx_patches = a.ctx_patches;
    }
    if set("mask_rate") {
        cfg.flags.mask_rate = a.mask_rate;
    }
    if set("multi_token") {
        cfg.flags.multi_token = a.multi_token;
    }
    if set("projection") {
        cfg.flags.projection = match a.projection {
            ProjectionArg::Linear => ProjectionKind::Linear,
            ProjectionArg::Residual => ProjectionKind::ResidualBlock,
        };
    }
    if set("loss") {
        cfg.flags.loss = match a.loss {
            LossArg::Quantile => LossKind::Quantile,
            LossArg::Median => LossKind::Median,
        };
    }
    if a.ckpt_every.is_some() {
        cfg.ckpt_every = a.ckpt_every;
    }
    cfg.ckpt_path = Some(a.out.clone());
    Ok(cfg)
}

pub fn train(a: &TrainArgs, sub: &ArgMatches, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = resolve_train_config(a, sub)?;
    let (corpus_path, corpus) = load_series(&a.corpus)?;
    let report_every = (cfg.optim.total_steps / 20).max(1);
    let out = train_with(&corpus, &cfg, |r| {
        if r.step % report_every == 0 {
            eprintln!("step {:>6}  loss {:.5}  lr {:.3e}  grad_norm {:.4}", r.step, r.loss, r.lr, r.grad_norm);
        }
    })?;
    let metrics = metrics_path(&a.out);
    write_file(&metrics, |w| Ok(write_metrics(w, &out.metrics)?))?;
    eprintln!(
        "wrote {} ({} parameters) and {}; {} windows rejected by the z-score filter",
        a.out.display(),
        out.model.parameter_count(),
        metrics.display(),
        out.rejected_windows
    );
    let mut m = RunManifest::new("train", argv, cfg_json(&cfg)?, Some(cfg.seed));
    m.inputs.extend(a.config.iter().cloned());
    m.inputs.push(corpus_path);
    m.outputs.extend([a.out.clone(), metrics]);
    m.finish(&a.out, start.elapsed())
}

pub fn forecast(a: &ForecastArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let model = load_model(&a.model)?;
    let (corpus_path, series) = load_series(&a.corpus)?;
    let opts = DecodeOptions {
        mode: decode_mode(a.decode),
        use_cache: !a.no_cache,
    };
    let results: Vec<anyhow::Result<ForecastRecord>> = series
        .par_iter()
        .map(|s| {
            let context = if a.holdout {
                s.split_last(a.horizon)
                    .map(|(c, _)| c)
                    .with_context(|| format!("series {} is too short to hold out {}", s.id, a.horizon))?
            } else {
                s.clone()
            };
            let qf = run_forecast(&context, &model, a.horizon, opts).with_context(|| format!("series {}", s.id))?;
            Ok(ForecastRecord::new(s.id.clone(), context.len(), &qf))
        })
        .collect();
    let mut failed = 0;
    write_file(&a.out, |w| {
        for r in results {
            match r {
                Ok(rec) => write_forecast(w, &rec)?,
                Err(e) => {
                    failed += 1;
                    eprintln!("skipped: {e:#}");
                }
            }
        }
        Ok(())
    })?;
    eprintln!("wrote {} forecast(s) to {}", series.len() - failed, a.out.display());
    let mut m = RunManifest::new(
        "forecast",
        argv,
        json!({"horizon": a.horizon, "decode": cfg_json(&opts)?, "holdout": a.holdout, "model": model.config()}),
        Some(a.seed),
    );
    m.inputs.extend([a.model.clone(), corpus_path]);
    m.outputs.push(a.out.clone());
    m.finish(&a.out, start.elapsed())
}

pub fn eval(a: &EvalArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let (tasks_path, series) = load_series(&a.tasks)?;
    let mut tasks = Vec::with_capacity(series.len());
    for s in &series {
        match Task::from_series(s, a.horizon) {
            Ok(t) => tasks.push(t),
            Err(e) => eprintln!("skipped task {}: {e}", s.id),
        }
    }
    let opts = DecodeOptions {
        mode: decode_mode(a.decode),
        use_cache: true,
    };
    let naive = SeasonalNaive::default();
    let model;
    let forecaster: &dyn Forecaster = if a.model == "seasonal-naive" {
        &naive
    } else {
        model = load_model(Path::new(&a.model))?;
        &ModelForecaster { model: &model, options: opts }
    };
    let report = run_eval(forecaster, &tasks, Some(&a.out))?;
    for s in &report.skipped {
        eprintln!("skipped task {}: {}", s.task_id, s.reason);
    }
    match report.aggregate {
        Some(agg) => println!(
            "{} task(s) scored, {} skipped; normalized MASE {:.4}, normalized CRPS {:.4}",
            report.records.len(),
            report.skipped.len(),
            agg.agg_mase,
            agg.agg_crps
        ),
        None => println!("no task scored"),
    }
    let mut m = RunManifest::new(
        "eval",
        argv,
        json!({"horizon": a.horizon, "decode": cfg_json(&opts)?, "forecaster": forecaster.name()}),
        None,
    );
    m.inputs.push(tasks_path);
    if a.model != "seasonal-naive" {
        m.inputs.push(PathBuf::from(&a.model));
    }
    m.outputs.push(a.out.clone());
    m.finish(&a.out, start.elapsed())
}

pub fn bench_kv(a: &BenchArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let start = Instant::now();
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => Model::init(ModelConfig::default(), a.seed)?,
    };
    let mut rows = Vec::new();
    println!("{:>8} {:>8} {:>12} {:>12} {:>8}", "context", "horizon", "cached_ms", "uncached_ms", "speedup");
    for &h in &a.horizon {
        let r = run_bench(a.context, h, &model)?;
        println!("{:>8} {:>8} {:>12.2} {:>12.2} {:>8.2}", r.context_len, r.horizon, r.cached_ms, r.uncached_ms, r.speedup);
        rows.push(r);
    }
    write_file(&a.out, |w| {
        serde_json::to_writer_pretty(&mut *w, &rows)?;
        Ok(writeln!(w)?)
    })?;
    let mut m = RunManifest::new("bench-kv", argv, json!({"context": a.context, "horizons": a.horizon}), Some(a.seed));
    m.inputs.extend(a.model.iter().cloned());
    m.outputs.push(a.out.clone());
    m.finish(&a.out, start.elapsed())
}

pub fn replay(a: &ReplayArgs) -> anyhow::Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if manifest.subcommand == "replay" {
        bail!("a replay manifest cannot itself be replayed");
    }
    let argv = match &a.out {
        Some(out) => with_out(&manifest.argv, out),
        None => manifest.argv,
    };
    eprintln!("replaying: {}", argv.join(" "));
    crate::execute(argv)
}
