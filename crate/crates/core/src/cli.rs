//! The `seqdet` command-line tool.
//!
//! Machine output is one JSON document on standard output; progress and
//! errors go to standard error. Exit codes follow [`crate::error::exit`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::decoder::DecoderConfig;
use crate::error::exit;
use crate::eval::{detect_all, evaluate, EvalReport};
use crate::matching::MetricKind;
use crate::numerics::checkpoint::{load_checkpoint, load_params, save_checkpoint};
use crate::numerics::{Fault, GradCheckReport, ParamStore};
use crate::scenegen::{read_dataset, read_scene_file, write_dataset, Dataset, Scene};
use crate::training::{check_compatible, fit, init_model, toy_grad_check, toy_scene_config, StepMetrics, TOY_CHECK_SEED};
use crate::words::WordOrder;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
const CHECKPOINT_PREFIX: &str = "checkpoint_";
const CHECKPOINT_EXT: &str = "p2sq";

/// Relative error below which the gradient check passes.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "seqdet", version, about = "Sequence-decoding 3D detection on synthetic LiDAR scenes")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect objects in one scene file.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Train and score one model per word order.
    AblateOrder(AblateArgs),
    /// Train and score one model per similarity metric.
    AblateMetric(AblateArgs),
    /// Verify reverse-mode gradients on the toy model.
    CheckGrad {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the config.json of the checkpoint's run directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation split; the training split is scored when absent.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

/// Parses `args`, runs the command, prints its output and returns the exit
/// code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            emit(&out.value);
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// A command's JSON output and exit code.
pub struct Outcome {
    pub value: Value,
    pub code: i32,
}

impl Outcome {
    fn ok(value: Value) -> Self {
        Self { value, code: exit::OK }
    }
}

fn emit(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable output")
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::GenData { config, out, count } => gen_data(config, out, *count).map(Outcome::ok),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train(config, data, out, *resume, threads).map(Outcome::ok),
        Command::Eval { model, data } => {
            let (cfg, store) = load_model(model)?;
            let dataset = read_dataset(data)?;
            check_dataset(&cfg, &dataset)?;
            let report = evaluate(&store, &cfg.model, &dataset.scenes, &cfg.class_names(), &cfg.eval, threads)?;
            Ok(Outcome::ok(to_value(&report)))
        }
        Command::Infer { model, scene } => {
            let (cfg, store) = load_model(model)?;
            let scene = read_scene_file(scene)?;
            infer_scene(&cfg, &store, &scene).map(Outcome::ok)
        }
        Command::AblateOrder(a) => {
            let variants = WordOrder::ablation_set()
                .into_iter()
                .map(|o| (o.to_string(), move |c: &mut RunConfig| c.model.decoder.order = o))
                .collect::<Vec<_>>();
            ablate(a, "order", variants, threads).map(Outcome::ok)
        }
        Command::AblateMetric(a) => {
            let variants = [MetricKind::WordDistance, MetricKind::CornerDistance, MetricKind::Iou3d]
                .into_iter()
                .map(|m| {
                    let name = to_value(&m).as_str().expect("unit variant").to_string();
                    (name, move |c: &mut RunConfig| c.matcher.similarity.metric = m)
                })
                .collect::<Vec<_>>();
            ablate(a, "metric", variants, threads).map(Outcome::ok)
        }
        Command::CheckGrad { config, inject_fault } => check_grad(config.as_deref(), *inject_fault),
    }
}

fn gen_data(config: &Path, out: &Path, count: usize) -> Result<Value> {
    let cfg = RunConfig::load(config)?;
    let started = Instant::now();
    let index = write_dataset(out, &cfg.scenegen, count)?;
    eprintln!("wrote {count} scenes to {} in {:.1}s", out.display(), started.elapsed().as_secs_f64());
    Ok(json!({
        "out": out,
        "scene_count": index.scene_count,
        "seed": cfg.scenegen.seed,
        "checksums": index.checksums,
    }))
}

/// Rejects datasets generated for a different class list or extent.
fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.config.class_names() != cfg.class_names() {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from configured {:?}",
            data.config.class_names(),
            cfg.class_names()
        )));
    }
    if data.config.extent != cfg.model.grid.extent {
        return Err(Error::Config("dataset extent differs from the model grid".into()));
    }
    Ok(())
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("{CHECKPOINT_PREFIX}{step:07}.{CHECKPOINT_EXT}"))
}

/// Checkpoints in `run_dir` by step, ascending.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(found),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(run_dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(CHECKPOINT_PREFIX))
            .and_then(|n| n.strip_suffix(&format!(".{CHECKPOINT_EXT}")))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}

/// Keeps the metric lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: StepMetrics = serde_json::from_str(line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn train(config: &Path, data: &Path, out: &Path, resume: bool, threads: usize) -> Result<Value> {
    let cfg = RunConfig::load(config)?;
    let dataset = read_dataset(data)?;
    check_dataset(&cfg, &dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let existing = list_checkpoints(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut store = if resume {
        let saved_path = out.join(CONFIG_FILE);
        let text = fs::read_to_string(&saved_path).map_err(|e| Error::io(&saved_path, e))?;
        let saved = RunConfig::from_json(&text, &saved_path)?;
        if saved.model != cfg.model || saved.loss != cfg.loss || saved.matcher != cfg.matcher {
            return Err(Error::Config("resumed run must keep the model, loss and matcher settings".into()));
        }
        let (step, path) = existing
            .last()
            .ok_or_else(|| Error::Config(format!("no checkpoint to resume in {}", out.display())))?;
        let store = load_checkpoint(path)?;
        check_compatible(&store, &cfg.model)?;
        truncate_metrics(&metrics_path, *step)?;
        eprintln!("resuming from step {step}");
        store
    } else {
        if !existing.is_empty() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                out.display()
            )));
        }
        let store = init_model(&cfg.model, cfg.train.seed);
        save_checkpoint(&checkpoint_path(out, 0), &store)?;
        fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        store
    };
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let total = cfg.train.total_steps(dataset.scenes.len());
    let start_step = store.step();
    let every = cfg.train.checkpoint_every;
    let report_every = (total / 20).max(1);
    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let started = Instant::now();
    let mut first: Option<StepMetrics> = None;
    let mut last: Option<StepMetrics> = None;
    fit(&cfg.fit_config(threads), &dataset.scenes, &mut store, &mut |m, s| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if every > 0 && m.step % every == 0 && m.step < total {
            save_checkpoint(&checkpoint_path(out, m.step), s)?;
        }
        if m.step % report_every == 0 || m.step == total {
            eprintln!(
                "step {:>6}/{total}  loss {:.4} (cls {:.4}, reg {:.4})  lr {:.2e}  {:.0}s",
                m.step,
                m.loss_total,
                m.loss_cls,
                m.loss_reg,
                m.lr,
                started.elapsed().as_secs_f64()
            );
        }
        first.get_or_insert_with(|| m.clone());
        last = Some(m.clone());
        Ok(())
    })?;
    let final_path = checkpoint_path(out, store.step());
    if !final_path.exists() {
        save_checkpoint(&final_path, &store)?;
    }
    Ok(json!({
        "run_dir": out,
        "start_step": start_step,
        "steps": store.step(),
        "checkpoint": final_path,
        "first_loss": first.map(|m| m.loss_total),
        "final_loss": last.map(|m| m.loss_total),
    }))
}

/// Loads the config (explicit, or the run directory's) and the parameters.
fn load_model(args: &ModelArgs) -> Result<(RunConfig, ParamStore)> {
    let cfg_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let store = load_params(&args.checkpoint)?;
    check_compatible(&store, &cfg.model)?;
    Ok((cfg, store))
}

#[derive(Serialize)]
struct DetectionOut<'a> {
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    theta: f64,
    class: &'a str,
    score: f64,
}

fn infer_scene(cfg: &RunConfig, store: &ParamStore, scene: &Scene) -> Result<Value> {
    let names = cfg.class_names();
    let dets = detect_all(store, &cfg.model, std::slice::from_ref(scene), cfg.eval.score_threshold, 1)?
        .pop()
        .unwrap_or_default();
    let out: Vec<DetectionOut> = dets
        .iter()
        .map(|d| DetectionOut {
            x: d.b.x,
            y: d.b.y,
            z: d.b.z,
            l: d.b.l,
            w: d.b.w,
            h: d.b.h,
            theta: d.b.theta,
            class: &names[d.class_id()],
            score: d.score,
        })
        .collect();
    Ok(to_value(&out))
}

/// One row of an ablation table.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub map: Option<f64>,
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub final_loss: Option<f64>,
    pub steps: u64,
}

fn ablate<F: Fn(&mut RunConfig)>(args: &AblateArgs, axis: &str, variants: Vec<(String, F)>, threads: usize) -> Result<Value> {
    let base = RunConfig::load(&args.config)?;
    let train = read_dataset(&args.data)?;
    check_dataset(&base, &train)?;
    let val = match &args.val {
        Some(dir) => {
            let v = read_dataset(dir)?;
            check_dataset(&base, &v)?;
            Some(v)
        }
        None => None,
    };
    let scored = val.as_ref().unwrap_or(&train);
    let mut rows = Vec::with_capacity(variants.len());
    for (name, apply) in &variants {
        let mut cfg = base.clone();
        apply(&mut cfg);
        cfg.validate()?;
        eprintln!("[{axis} {name}] training");
        let (row, _) = train_and_score(&cfg, &train.scenes, &scored.scenes, name, threads)?;
        eprintln!("[{axis} {name}] mAP {}", fmt_ap(row.map));
        rows.push(row);
    }
    eprintln!("{}", ablation_table(axis, &rows));
    Ok(json!({
        "axis": axis,
        "split": if val.is_some() { "val" } else { "train" },
        "rows": rows,
    }))
}

/// Trains a fresh model under `cfg` and evaluates it on `scored`.
pub fn train_and_score(
    cfg: &RunConfig,
    train: &[Scene],
    scored: &[Scene],
    name: &str,
    threads: usize,
) -> Result<(AblationRow, EvalReport)> {
    let mut store = init_model(&cfg.model, cfg.train.seed);
    let mut last = None;
    fit(&cfg.fit_config(threads), train, &mut store, &mut |m, _| {
        last = Some(m.loss_total);
        Ok(())
    })?;
    let report = evaluate(&store, &cfg.model, scored, &cfg.class_names(), &cfg.eval, threads)?;
    let row = AblationRow {
        variant: name.to_string(),
        map: report.map,
        per_class_ap: report.per_class.iter().map(|(k, c)| (k.clone(), c.ap)).collect(),
        final_loss: last,
        steps: store.step(),
    };
    Ok((row, report))
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

/// Aligned text rendering of an ablation table.
pub fn ablation_table(axis: &str, rows: &[AblationRow]) -> String {
    let classes: Vec<&str> = rows
        .first()
        .map(|r| r.per_class_ap.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let mut header = vec![axis.to_string(), "mAP".to_string()];
    header.extend(classes.iter().map(|c| c.to_string()));
    let mut lines = vec![header];
    for r in rows {
        let mut cells = vec![r.variant.clone(), fmt_ap(r.map)];
        cells.extend(r.per_class_ap.iter().map(|(_, ap)| fmt_ap(*ap)));
        lines.push(cells);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l.get(c).map_or(0, |s| s.len())).max().unwrap_or(0))
        .collect();
    lines
        .iter()
        .map(|l| {
            l.iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parameter group of a parameter name: the name without its last part.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

fn grad_report_json(report: &GradCheckReport) -> Value {
    let mut groups = serde_json::Map::new();
    for (name, err) in &report.per_param {
        let g = param_group(name);
        let cur = groups.get(g).and_then(Value::as_f64).unwrap_or(0.0);
        groups.insert(g.to_string(), json!(cur.max(*err)));
    }
    let params: serde_json::Map<String, Value> = report.per_param.iter().map(|(n, e)| (n.clone(), json!(e))).collect();
    json!({
        "tolerance": GRAD_TOLERANCE,
        "max_error": report.max_error,
        "worst": report.worst,
        "passed": report.max_error < GRAD_TOLERANCE,
        "groups": groups,
        "parameters": params,
    })
}

fn check_grad(config: Option<&Path>, inject_fault: bool) -> Result<Outcome> {
    let decoder = match config {
        Some(p) => RunConfig::load(p)?.model.decoder,
        None => DecoderConfig::default(),
    };
    let decoder = DecoderConfig {
        classes: toy_scene_config().classes.len(),
        ..decoder
    };
    let started = Instant::now();
    let fault = inject_fault.then_some(Fault::LinearWeightGrad);
    let report = toy_grad_check(decoder, TOY_CHECK_SEED, fault)?;
    eprintln!("gradient check over {} tensors in {:.1}s", report.per_param.len(), started.elapsed().as_secs_f64());
    let value = grad_report_json(&report);
    if report.max_error < GRAD_TOLERANCE {
        return Ok(Outcome::ok(value));
    }
    let err = Error::Verification {
        param: report.worst.clone().unwrap_or_default(),
        error: report.max_error,
    };
    eprintln!("error: {err}");
    Ok(Outcome {
        value,
        code: err.exit_code(),
    })
}
