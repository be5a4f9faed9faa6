//! The seven subcommands behind the `stsn` binary: ingest, synth, train,
//! eval, sweep, export-maps and flops. Each is a thin deterministic wrapper
//! over the core operations; outputs overwrite deterministically so reruns
//! with identical inputs and seed are idempotent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use stsn_core::dataset::{prepare, viable_targets, IntervalSeries, PreparedData};
use stsn_core::eval::{channel_metrics, pooled_metrics, HaBaseline};
use stsn_core::features::{aggregate_events, aggregate_trajectories, count_pois, Normalizer};
use stsn_core::flops::count_flops;
use stsn_core::grid::GridSpec;
use stsn_core::model::{ForwardOpts, Mode, ModelConfig, Sample, StsnModel};
use stsn_core::synthcity::generate;
use stsn_core::tape::Tape;
use stsn_core::tensor::Tensor;
use stsn_core::training::{train_loop, EpochRecord, TrainResult};

use crate::archive::{read_archive, write_archive, write_labels, Ranges};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::csvio;
use crate::error::{config_err, data_err, runtime_err, CliError};

pub const USAGE: &str = "\
usage: stsn <command> [options]

commands:
  ingest        build a feature archive from trajectory or event CSVs
  synth         generate the synthetic benchmark city
  train         train a model on an archive
  eval          evaluate a checkpoint (or the historical-average baseline)
  sweep         train/evaluate across keep ratios, emit the cost curve
  export-maps   write keep masks, attention and prediction heatmaps
  flops         print the analytic multiply-accumulate cost report

global options:
  --config PATH   flat key=value config file
  --set KEY=VAL   override one config key (repeatable)
  --seed N        override the RNG seed
  --out DIR       output directory (default: run)

command options:
  --trips PATH / --events PATH / --pois PATH   (ingest)
  --data DIR                                   (train/eval/sweep/export-maps)
  --checkpoint PATH                            (eval/export-maps)
  --split test|train                           (eval; default test)
  --ha                                         (eval the baseline instead)
  --ratios R1,R2,...                           (sweep)
  --interval N                                 (export-maps target interval)
";

struct ParsedArgs {
    command: String,
    flags: BTreeMap<String, Vec<String>>,
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, CliError> {
    let Some(command) = args.first() else {
        return Err(config_err("missing command; see --help"));
    };
    let mut flags: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let boolean = ["--ha", "--help"];
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        if !flag.starts_with("--") {
            return Err(config_err(format!("unexpected argument {flag:?}")));
        }
        if boolean.contains(&flag.as_str()) {
            flags.entry(flag.clone()).or_default().push("true".into());
            i += 1;
            continue;
        }
        let Some(value) = args.get(i + 1) else {
            return Err(config_err(format!("flag {flag} needs a value")));
        };
        flags.entry(flag.clone()).or_default().push(value.clone());
        i += 2;
    }
    Ok(ParsedArgs {
        command: command.clone(),
        flags,
    })
}

impl ParsedArgs {
    fn one(&self, flag: &str) -> Result<Option<&str>, CliError> {
        match self.flags.get(flag).map(|v| v.as_slice()) {
            None => Ok(None),
            Some([x]) => Ok(Some(x)),
            Some(_) => Err(config_err(format!("flag {flag} given more than once"))),
        }
    }

    fn has(&self, flag: &str) -> bool {
        self.flags.contains_key(flag)
    }
}

/// Entry point shared by `main` and the integration tests.
pub fn run(args: &[String]) -> Result<(), CliError> {
    if args.iter().any(|a| a == "--help") || args.first().map(String::as_str) == Some("help") {
        print!("{USAGE}");
        return Ok(());
    }
    let parsed = parse_args(args)?;

    let mut cfg = RunConfig::default();
    if let Some(path) = parsed.one("--config")? {
        cfg.merge_file(Path::new(path))?;
    }
    if let Some(sets) = parsed.flags.get("--set") {
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
    }
    if let Some(seed) = parsed.one("--seed")? {
        cfg.set("seed", seed)?;
    }
    if let Some(out) = parsed.one("--out")? {
        cfg.set("out_dir", out)?;
    }
    if let Some(data) = parsed.one("--data")? {
        cfg.set("data_dir", data)?;
    }

    match parsed.command.as_str() {
        "ingest" => cmd_ingest(&cfg, &parsed),
        "synth" => cmd_synth(&cfg),
        "train" => cmd_train(&cfg).map(|_| ()),
        "eval" => cmd_eval(&cfg, &parsed),
        "sweep" => cmd_sweep(&cfg, &parsed),
        "export-maps" => cmd_export_maps(&cfg, &parsed),
        "flops" => cmd_flops(&cfg),
        other => Err(config_err(format!("unknown command {other:?}; see --help"))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.get("out_dir"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if !cfg.has("data_dir") {
        return Err(config_err("data_dir is required (set --data or data_dir=)"));
    }
    Ok(PathBuf::from(cfg.get("data_dir")))
}

// ── ingest ──────────────────────────────────────────────────────────────

fn ingest_grid(cfg: &RunConfig) -> Result<GridSpec, CliError> {
    for key in ["lat_min", "lat_max", "lon_min", "lon_max"] {
        if !cfg.has(key) {
            return Err(config_err(format!("ingest needs {key}=")));
        }
    }
    GridSpec::new(
        cfg.f64_of("lat_min")?,
        cfg.f64_of("lat_max")?,
        cfg.f64_of("lon_min")?,
        cfg.f64_of("lon_max")?,
        cfg.usize_of("rows")?,
        cfg.usize_of("cols")?,
        cfg.f64_of("cell_meters")?,
    )
    .map_err(|e| config_err(format!("{e}")))
}

fn cmd_ingest(cfg: &RunConfig, args: &ParsedArgs) -> Result<(), CliError> {
    let grid = ingest_grid(cfg)?;
    let out = out_dir(cfg)?;
    let trips = args.one("--trips")?;
    let events = args.one("--events")?;
    let pois_path = args
        .one("--pois")?
        .ok_or_else(|| config_err("ingest needs --pois PATH"))?;

    let raw_pois = csvio::read_pois(Path::new(pois_path))?;
    let mut categories: Vec<String> = raw_pois.iter().map(|(c, _, _)| c.clone()).collect();
    categories.sort();
    categories.dedup();
    if categories.is_empty() {
        categories.push("uncategorized".into());
    }
    let poi_image = count_pois(&grid, &categories, &raw_pois)
        .map_err(|e| data_err(format!("{pois_path}: {e}")))?;

    let (channel_names, images, first_interval, skipped): (Vec<String>, Vec<Tensor>, i64, usize) =
        match (trips, events) {
            (Some(tpath), None) => {
                let vehicles = csvio::read_trajectories(Path::new(tpath))?;
                let trajs: Vec<_> = vehicles.into_iter().map(|(_, pts)| pts).collect();
                let (lo, hi) = time_range(trajs.iter().flatten().map(|p| p.t));
                let mut images = Vec::new();
                let mut skipped = 0;
                let (first, count) = interval_span(lo, hi);
                for k in 0..count {
                    let id = first + k as i64;
                    let (img, stats) = aggregate_trajectories(&grid, &trajs, id)
                        .map_err(|e| data_err(format!("{tpath}: {e}")))?;
                    skipped = stats.out_of_bounds_points; // same full scan every interval
                    images.push(img.values);
                }
                (
                    stsn_core::features::FLOW_CHANNELS
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    images,
                    first,
                    skipped,
                )
            }
            (None, Some(epath)) => {
                let events = csvio::read_events(Path::new(epath))?;
                let (lo, hi) = time_range(events.iter().map(|e| e.t));
                let mut images = Vec::new();
                let mut skipped = 0;
                let (first, count) = interval_span(lo, hi);
                for k in 0..count {
                    let id = first + k as i64;
                    let (img, stats) = aggregate_events(&grid, &events, id);
                    skipped += stats.out_of_bounds_points;
                    images.push(img.values);
                }
                (
                    stsn_core::features::EVENT_CHANNELS
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    images,
                    first,
                    skipped,
                )
            }
            _ => {
                return Err(config_err(
                    "ingest needs exactly one of --trips PATH or --events PATH",
                ))
            }
        };

    if images.is_empty() {
        eprintln!("warning: no data rows; writing an empty archive");
    }
    let series = IntervalSeries {
        grid: grid.clone(),
        first_interval,
        images,
        channel_names,
        poi: poi_image.values,
        poi_categories: categories,
        utc_offset_minutes: cfg.i32_of("utc_offset_minutes")?,
    };
    let ranges = Ranges {
        train_start: cfg.opt_i64("train_start")?,
        train_end: cfg.opt_i64("train_end")?,
        test_start: cfg.opt_i64("test_start")?,
        test_end: cfg.opt_i64("test_end")?,
    };
    write_archive(&out, &series, &ranges)?;
    std::fs::write(out.join("config.echo"), cfg.echo())?;
    println!(
        "ingested intervals={} regions={} skipped_points={} skipped_pois={}",
        series.images.len(),
        grid.regions(),
        skipped,
        poi_image.skipped
    );
    Ok(())
}

fn time_range(ts: impl Iterator<Item = i64>) -> (i64, i64) {
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for t in ts {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    (lo, hi)
}

fn interval_span(lo: i64, hi: i64) -> (i64, usize) {
    if lo > hi {
        return (0, 0);
    }
    let first = lo.div_euclid(3600);
    let last = hi.div_euclid(3600);
    (first, (last - first + 1) as usize)
}

// ── synth ───────────────────────────────────────────────────────────────

fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synth_spec()?;
    let out = out_dir(cfg)?;
    let city = generate(&spec);
    write_archive(
        &out,
        &city.series,
        &Ranges {
            train_start: Some(city.train_range.0),
            train_end: Some(city.train_range.1),
            test_start: Some(city.test_range.0),
            test_end: Some(city.test_range.1),
        },
    )?;
    write_labels(&out, &city)?;
    std::fs::write(out.join("config.echo"), cfg.echo())?;
    let count = |l: stsn_core::synthcity::RegionLabel| {
        city.labels.iter().filter(|&&x| x == l).count()
    };
    println!(
        "synthesized intervals={} regions={} unique={} redundant={} empty={}",
        city.series.images.len(),
        city.series.grid.regions(),
        count(stsn_core::synthcity::RegionLabel::Unique),
        count(stsn_core::synthcity::RegionLabel::Redundant),
        count(stsn_core::synthcity::RegionLabel::Empty),
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

/// Archive dimensions override the model keys so a config written for one
/// grid cannot silently mis-shape another; the echo records the effective
/// values.
fn align_config_to_series(cfg: &mut RunConfig, series: &IntervalSeries) -> Result<(), CliError> {
    cfg.set("rows", &series.grid.rows.to_string())?;
    cfg.set("cols", &series.grid.cols.to_string())?;
    cfg.set("channels", &series.channel_names.len().to_string())?;
    cfg.set("poi_channels", &series.poi_categories.len().to_string())?;
    Ok(())
}

struct SplitIds {
    train: Vec<i64>,
    test: Vec<i64>,
}

fn resolve_targets(
    cfg: &RunConfig,
    series: &IntervalSeries,
    ranges: &Ranges,
    model_cfg: &ModelConfig,
) -> Result<SplitIds, CliError> {
    let pick = |key: &str, fallback: Option<i64>| -> Result<i64, CliError> {
        match cfg.opt_i64(key)? {
            Some(v) => Ok(v),
            None => fallback.ok_or_else(|| {
                config_err(format!("{key} not in config and not in the archive manifest"))
            }),
        }
    };
    let train_start = pick("train_start", ranges.train_start)?;
    let train_end = pick("train_end", ranges.train_end)?;
    let test_start = pick("test_start", ranges.test_start)?;
    let test_end = pick("test_end", ranges.test_end)?;
    let stride = cfg.usize_of("sample_stride")?.max(1);
    let train = viable_targets(series, model_cfg, train_start, train_end)
        .into_iter()
        .step_by(stride)
        .collect::<Vec<_>>();
    let test = viable_targets(series, model_cfg, test_start, test_end)
        .into_iter()
        .step_by(stride)
        .collect::<Vec<_>>();
    if train.is_empty() {
        return Err(data_err(format!(
            "no viable training targets in [{train_start}, {train_end}) — check history spans"
        )));
    }
    Ok(SplitIds { train, test })
}

fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut csv =
        String::from("epoch,train_loss,train_mse,train_mae,train_kl,val_rmse,val_mae,seconds\n");
    for r in log {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.3}\n",
            r.epoch, r.train_loss, r.train_mse, r.train_mae, r.train_kl, r.val_rmse, r.val_mae,
            r.seconds
        ));
    }
    csv
}

struct TrainArtifacts {
    result: TrainResult,
    #[allow(dead_code)]
    model: StsnModel,
    #[allow(dead_code)]
    data: PreparedData,
}

fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    let dir = data_dir(cfg)?;
    let (series, ranges) = read_archive(&dir)?;
    let mut cfg = cfg.clone();
    align_config_to_series(&mut cfg, &series)?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let ids = resolve_targets(&cfg, &series, &ranges, &model_cfg)?;
    let data = prepare(&series, &model_cfg, &ids.train, &ids.test, train_cfg.val_fraction)
        .map_err(|e| data_err(format!("{e}")))?;
    let model =
        StsnModel::new(model_cfg, &series.grid).map_err(|e| config_err(format!("{e}")))?;

    let log_timing = cfg.bool_of("log_timing")?;
    let start = Instant::now();
    let mut clock: Box<dyn FnMut() -> f64> = if log_timing {
        Box::new(move || start.elapsed().as_secs_f64())
    } else {
        Box::new(|| 0.0)
    };
    let result =
        train_loop(&model, &data, &train_cfg, &mut clock).map_err(|e| runtime_err(format!("{e}")))?;

    let out = out_dir(&cfg)?;
    std::fs::write(out.join("config.echo"), cfg.echo())?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&result.log))?;
    let ckpt = Checkpoint {
        params: result.best_params.clone(),
        opt: result.best_opt.clone(),
        epoch: result.best_epoch,
        best_val_rmse: result.best_val_rmse,
        normalizer: data.normalizer.clone(),
        poi_normalizer: data.poi_normalizer.clone(),
        config_echo: cfg.echo(),
    };
    checkpoint::save(&out.join("best.ckpt"), &ckpt)?;
    println!(
        "trained epochs={} best_epoch={} best_val_rmse={:.6} stopped_early={}",
        result.log.len(),
        result.best_epoch,
        result.best_val_rmse,
        result.stopped_early
    );
    Ok(TrainArtifacts {
        result,
        model,
        data,
    })
}

// ── eval ────────────────────────────────────────────────────────────────

/// Rebuilds the model and data exactly as a checkpoint saw them, from the
/// config echo embedded in the checkpoint.
fn model_from_checkpoint(
    ckpt: &Checkpoint,
    series: &IntervalSeries,
) -> Result<(StsnModel, ModelConfig, RunConfig), CliError> {
    let mut cfg = RunConfig::default();
    cfg.merge_text(&ckpt.config_echo, "checkpoint config")?;
    let model_cfg = cfg.model_config()?;
    let model =
        StsnModel::new(model_cfg.clone(), &series.grid).map_err(|e| data_err(format!("{e}")))?;
    Ok((model, model_cfg, cfg))
}

fn assemble_split(
    series: &IntervalSeries,
    model_cfg: &ModelConfig,
    normalizer: &Normalizer,
    ids: &[i64],
) -> Result<Vec<Sample>, CliError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        out.push(
            stsn_core::dataset::assemble(series, model_cfg, normalizer, id)
                .map_err(|e| data_err(format!("{e}")))?,
        );
    }
    Ok(out)
}

fn eval_csv(channel_names: &[String], per_channel: &[(f64, f64)], pooled: (f64, f64)) -> String {
    let mut csv = String::from("channel,rmse,mae\n");
    for (name, (rmse, mae)) in channel_names.iter().zip(per_channel) {
        csv.push_str(&format!("{name},{rmse:.6},{mae:.6}\n"));
    }
    csv.push_str(&format!("all,{:.6},{:.6}\n", pooled.0, pooled.1));
    csv
}

fn cmd_eval(cfg: &RunConfig, args: &ParsedArgs) -> Result<(), CliError> {
    let dir = data_dir(cfg)?;
    let (series, ranges) = read_archive(&dir)?;
    let split = args.one("--split")?.unwrap_or("test");
    if !["test", "train"].contains(&split) {
        return Err(config_err(format!("--split {split:?}, want test|train")));
    }

    let out = out_dir(cfg)?;
    if args.has("--ha") {
        // Baseline: slot means fitted on the training range.
        let mut acfg = cfg.clone();
        align_config_to_series(&mut acfg, &series)?;
        let model_cfg = acfg.model_config()?;
        let ids = resolve_targets(&acfg, &series, &ranges, &model_cfg)?;
        let eval_ids = if split == "test" { &ids.test } else { &ids.train };
        let ha = HaBaseline::fit(&series, &ids.train)
            .map_err(|e| data_err(format!("{e}")))?;
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for &id in eval_ids {
            preds.push(ha.predict(id));
            targets.push(
                series
                    .image(id)
                    .ok_or_else(|| data_err(format!("missing interval {id}")))?
                    .clone(),
            );
        }
        let per = channel_metrics(&preds, &targets);
        let pooled = pooled_metrics(&preds, &targets);
        let csv = eval_csv(&series.channel_names, &per, pooled);
        std::fs::write(out.join(format!("eval_ha_{split}.csv")), &csv)?;
        print!("{csv}");
        return Ok(());
    }

    let ckpt_path = args
        .one("--checkpoint")?
        .ok_or_else(|| config_err("eval needs --checkpoint PATH (or --ha)"))?;
    let ckpt = checkpoint::load(Path::new(ckpt_path))?;
    let (model, model_cfg, mut eff_cfg) = model_from_checkpoint(&ckpt, &series)?;
    for key in ["train_start", "train_end", "test_start", "test_end", "sample_stride"] {
        if cfg.has(key) {
            eff_cfg.set(key, cfg.get(key))?;
        }
    }
    let ids = resolve_targets(&eff_cfg, &series, &ranges, &model_cfg)?;
    let eval_ids = if split == "test" { &ids.test } else { &ids.train };
    let samples = assemble_split(&series, &model_cfg, &ckpt.normalizer, eval_ids)?;
    let poi_norm = ckpt.poi_normalizer.normalize(&series.poi);

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for sample in &samples {
        let mut tape = Tape::new();
        let out_fw = model
            .forward(
                &mut tape,
                &ckpt.params,
                &poi_norm,
                sample,
                Mode::Eval,
                None,
                ForwardOpts::default(),
            )
            .map_err(|e| runtime_err(format!("{e}")))?;
        preds.push(ckpt.normalizer.denormalize(tape.value(out_fw.prediction)));
        targets.push(sample.target_raw.clone());
    }
    let per = channel_metrics(&preds, &targets);
    let pooled = pooled_metrics(&preds, &targets);
    let csv = eval_csv(&series.channel_names, &per, pooled);
    std::fs::write(out.join(format!("eval_{split}.csv")), &csv)?;
    print!("{csv}");
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

fn cmd_sweep(cfg: &RunConfig, args: &ParsedArgs) -> Result<(), CliError> {
    let ratios: Vec<f64> = args
        .one("--ratios")?
        .unwrap_or("1.0,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1")
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| config_err(format!("bad ratio {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    for &r in &ratios {
        if !(0.0 < r && r <= 1.0) {
            return Err(config_err(format!("ratio {r} outside (0, 1]")));
        }
    }
    let out = out_dir(cfg)?;
    let mut csv = String::from("keep_ratio,val_rmse,val_mae,gflops,params\n");
    for ratio in &ratios {
        let mut run_cfg = cfg.clone();
        run_cfg.set("keep_ratio", &format!("{ratio}"))?;
        run_cfg.set(
            "out_dir",
            &out.join(format!("ratio_{ratio}")).display().to_string(),
        )?;
        let artifacts = cmd_train(&run_cfg)?;
        let best = &artifacts.result.log[artifacts
            .result
            .log
            .iter()
            .position(|r| r.epoch == artifacts.result.best_epoch)
            .expect("best epoch in log")];
        let report = count_flops(&artifacts.model.cfg, *ratio);
        csv.push_str(&format!(
            "{ratio},{:.6},{:.6},{:.6},{}\n",
            artifacts.result.best_val_rmse,
            best.val_mae,
            report.gflops(),
            artifacts.result.best_params.trainable_scalars(),
        ));
    }
    std::fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

// ── export-maps ─────────────────────────────────────────────────────────

fn grid_csv(rows: usize, cols: usize, cell: impl Fn(usize, usize) -> String) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| cell(r, c)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn cmd_export_maps(cfg: &RunConfig, args: &ParsedArgs) -> Result<(), CliError> {
    let dir = data_dir(cfg)?;
    let (series, ranges) = read_archive(&dir)?;
    let ckpt_path = args
        .one("--checkpoint")?
        .ok_or_else(|| config_err("export-maps needs --checkpoint PATH"))?;
    let ckpt = checkpoint::load(Path::new(ckpt_path))?;
    let (model, model_cfg, eff_cfg) = model_from_checkpoint(&ckpt, &series)?;

    let target_id = match args.one("--interval")? {
        Some(v) => v
            .parse::<i64>()
            .map_err(|_| config_err(format!("--interval {v:?} not an integer")))?,
        None => {
            let ids = resolve_targets(&eff_cfg, &series, &ranges, &model_cfg)?;
            *ids.test
                .first()
                .ok_or_else(|| data_err("no test targets to export"))?
        }
    };
    let sample = stsn_core::dataset::assemble(&series, &model_cfg, &ckpt.normalizer, target_id)
        .map_err(|e| data_err(format!("{e}")))?;
    let poi_norm = ckpt.poi_normalizer.normalize(&series.poi);

    let mut tape = Tape::new();
    let fw = model
        .forward(
            &mut tape,
            &ckpt.params,
            &poi_norm,
            &sample,
            Mode::Eval,
            None,
            ForwardOpts {
                capture_attention: true,
                ..ForwardOpts::default()
            },
        )
        .map_err(|e| runtime_err(format!("{e}")))?;

    let out = out_dir(cfg)?;
    let maps_dir = out.join("maps");
    std::fs::create_dir_all(&maps_dir)?;
    let (rows, cols) = (model_cfg.rows, model_cfg.cols);
    let n = rows * cols;
    let t_len = model_cfg.input_intervals();

    for i in 0..t_len {
        // Keep/drop mask: all ones at keep ratio 1.0.
        let kept: Vec<usize> = if fw.decisions.is_empty() {
            (0..n).collect()
        } else {
            fw.decisions[i].kept.clone()
        };
        let mut mask = vec![0u8; n];
        for &r in &kept {
            mask[r] = 1;
        }
        std::fs::write(
            maps_dir.join(format!("mask_{i}.csv")),
            grid_csv(rows, cols, |r, c| mask[r * cols + c].to_string()),
        )?;

        // Readout-token attention of the last spatial layer, head-averaged,
        // scattered back to the grid (pruned cells stay 0).
        let layer = fw.attention[i]
            .last()
            .ok_or_else(|| runtime_err("attention capture missing"))?;
        let heads = layer.shape()[0];
        let mut grid_attn = vec![0.0f64; n];
        for (tok, &region) in kept.iter().enumerate() {
            let mut sum = 0.0;
            for h in 0..heads {
                sum += layer.at3(h, 0, tok + 1); // +1 skips the readout itself
            }
            grid_attn[region] = sum / heads as f64;
        }
        std::fs::write(
            maps_dir.join(format!("attention_{i}.csv")),
            grid_csv(rows, cols, |r, c| format!("{:.9}", grid_attn[r * cols + c])),
        )?;
        crate::pgm::write_pgm(
            &maps_dir.join(format!("attention_{i}.pgm")),
            rows,
            cols,
            &grid_attn,
        )?;
    }

    let pred = ckpt.normalizer.denormalize(tape.value(fw.prediction));
    for (c, name) in series.channel_names.iter().enumerate() {
        std::fs::write(
            maps_dir.join(format!("prediction_{name}.csv")),
            grid_csv(rows, cols, |r, cc| format!("{:.6}", pred.at3(c, r, cc))),
        )?;
        std::fs::write(
            maps_dir.join(format!("target_{name}.csv")),
            grid_csv(rows, cols, |r, cc| {
                format!("{:.6}", sample.target_raw.at3(c, r, cc))
            }),
        )?;
    }
    println!(
        "exported maps for interval {target_id} to {}",
        maps_dir.display()
    );
    Ok(())
}

// ── flops ───────────────────────────────────────────────────────────────

fn cmd_flops(cfg: &RunConfig) -> Result<(), CliError> {
    let model_cfg = cfg.model_config()?;
    let report = count_flops(&model_cfg, model_cfg.keep_ratio);
    println!(
        "config: regions={} kept={} d={} spatial_layers={} temporal_layers={} intervals={}",
        report.regions,
        report.kept,
        report.d,
        report.spatial_layers,
        report.temporal_layers,
        report.intervals
    );
    for (name, macs) in report.components() {
        println!("{name:>14} {macs:>16} MACs");
    }
    println!("{:>14} {:>16} MACs", "total", report.total());
    println!("{:>14} {:>16.6} GFLOPs (2 FLOPs per MAC)", "", report.gflops());
    Ok(())
}
