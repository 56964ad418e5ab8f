//! The `mcunet` command line.
//!
//! Every stage resolves one [`RunConfig`] (defaults, `--config` file,
//! environment, then flags) and writes a run directory holding
//! `manifest.json` (the resolved config plus SHA-256 of every input and
//! output), the outputs themselves and `summary.txt`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcunet_core::data::synth_vessels;
use mcunet_core::referral::{
    decide, evaluate_cohort, normalized_case_score, pixel_metrics, CaseRecord, CohortContext, Normalization,
};
use mcunet_core::rng::{derive_seed, tags};
use mcunet_core::uncertainty::{estimator_spread, sample_count_sweep, Clock, EvalCase, Metric, Reduction};
use mcunet_core::unet::Optimizer;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{Result, TriageError};
use crate::pgm;
use crate::pipeline::{self, CaseScores};
use crate::report::{report_csv, spread_csv, sweep_csv, threshold_report};
use crate::service;
use crate::store::CaseStore;
use crate::tns;

#[derive(Debug, Parser)]
#[command(name = "mcunet", version, about = "MC-dropout vessel segmentation with uncertainty-based referral")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

/// Flags shared by every subcommand; each overrides the matching
/// `RunConfig` field.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON file with `RunConfig` fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// MC-dropout passes per case.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Metric name, or `all` where a command reports every metric.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// `mean`, `max` or `quantile(q)`.
    #[arg(long, global = true)]
    pub reduction: Option<String>,
    /// `theoretical-max` or `cohort-max`.
    #[arg(long, global = true)]
    pub normalization: Option<String>,
    #[arg(long, global = true)]
    pub dropout_p: Option<f64>,
    #[arg(long, global = true)]
    pub tau_grid: Option<String>,
    #[arg(long, global = true)]
    pub n_grid: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, global = true)]
    pub train_patches: Option<usize>,
    #[arg(long, global = true)]
    pub test_patches: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub spread_seeds: Option<usize>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    /// Run directory for this command's outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub output: OutputFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/ and test/ synthetic vessel datasets.
    Synth,
    /// Train the micro U-Net on random patches of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// MC-dropout inference on one PGM image.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
    },
    /// Case-level metric estimates against the number of MC samples.
    SweepSamples {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation patch whose estimates are repeated across seeds.
        #[arg(long, default_value_t = 0)]
        spread_case: usize,
    },
    /// Ingest held-out patches into a store and run inference on each.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Retained-cohort performance over a grid of thresholds.
    SweepThreshold {
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Per-case table, queue and threshold report of a store.
    ExportReport {
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run the HTTP referral service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::SweepSamples { .. } => "sweep-samples",
            Command::Evaluate { .. } => "evaluate",
            Command::SweepThreshold { .. } => "sweep-threshold",
            Command::ExportReport { .. } => "export-report",
            Command::Serve { .. } => "serve",
        }
    }
}

fn parse_flag<T: std::str::FromStr>(key: &str, value: &Option<String>) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    value.as_deref().map(|v| v.parse::<T>().map_err(|e| TriageError::config(key, e.to_string()))).transpose()
}

/// `--metric` may be `all` for commands that report every metric.
fn metric_selection(common: &Common, cfg: &RunConfig) -> Vec<Metric> {
    match common.metric.as_deref() {
        Some("all") => Metric::ALL.to_vec(),
        _ => vec![cfg.metric],
    }
}

impl Common {
    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), env)?;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(seed, samples, tau, dropout_p, tau_grid, n_grid, epochs, learning_rate, batch_size);
        set!(train_patches, test_patches, patch_size, spread_seeds, port);
        if self.metric.as_deref() != Some("all") {
            if let Some(m) = parse_flag::<Metric>("metric", &self.metric)? {
                cfg.metric = m;
            }
        }
        if let Some(r) = parse_flag::<Reduction>("reduction", &self.reduction)? {
            cfg.reduction = r;
        }
        if let Some(n) = parse_flag::<Normalization>("normalization", &self.normalization)? {
            cfg.normalization = n;
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerArg::Adam => Optimizer::adam(),
                OptimizerArg::Sgd => Optimizer::Sgd,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SHA-256 of a file, or of every file under a directory (sorted relative
/// paths and contents).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    if path.is_file() {
        let bytes = std::fs::read(path).map_err(|e| TriageError::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(bytes)));
    }
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let full = path.join(&rel);
        let bytes = std::fs::read(&full).map_err(|e| TriageError::io(&full, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        return Ok(());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| TriageError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| TriageError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// A run directory being filled by one command.
pub struct RunDir {
    pub dir: PathBuf,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    summary: String,
}

impl RunDir {
    fn create(dir: PathBuf, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| TriageError::io(&dir, e))?;
        Ok(RunDir { dir, command, inputs: BTreeMap::new(), outputs: Vec::new(), summary: String::new() })
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), hash_path(path)?);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| TriageError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| TriageError::io(&path, e))?;
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn json(&mut self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("plain data") + "\n";
        self.write(rel, text)
    }

    /// Register an output written by someone else (file or directory).
    fn output(&mut self, rel: &str) {
        self.outputs.push(rel.to_string());
    }

    fn line(&mut self, text: impl AsRef<str>) {
        self.summary.push_str(text.as_ref());
        self.summary.push('\n');
    }

    fn finish(mut self, cfg: &RunConfig, result: Value) -> Result<Value> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            outputs.insert(rel.clone(), hash_path(&self.dir.join(rel))?);
        }
        let summary = std::mem::take(&mut self.summary);
        let path = self.dir.join("summary.txt");
        std::fs::write(&path, &summary).map_err(|e| TriageError::io(&path, e))?;
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
            "inputs": self.inputs,
            "outputs": outputs,
        });
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("plain data") + "\n";
        std::fs::write(&path, text).map_err(|e| TriageError::io(&path, e))?;
        Ok(json!({ "command": self.command, "run_dir": self.dir, "summary": summary, "result": result }))
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn require<'a>(flag: Option<&'a PathBuf>, fallback: Option<&'a PathBuf>, key: &str) -> Result<&'a Path> {
    flag.or(fallback).map(PathBuf::as_path).ok_or_else(|| TriageError::config(key, format!("--{key} is required")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Run one parsed command. Returns the JSON result that `--output json`
/// prints.
pub fn run(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<Value> {
    let cfg = cli.common.resolve(env)?;
    let name = cli.command.name();
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    match &cli.command {
        Command::Synth => synth(&cfg, RunDir::create(out, name)?),
        Command::Train { data } => train(&cfg, data, RunDir::create(out, name)?),
        Command::Infer { checkpoint, image } => {
            let ckpt = require(checkpoint.as_ref(), cfg.checkpoint.as_ref(), "checkpoint")?.to_path_buf();
            infer(&cfg, &ckpt, image, RunDir::create(out, name)?)
        }
        Command::SweepSamples { checkpoint, data, spread_case } => {
            let ckpt = require(checkpoint.as_ref(), cfg.checkpoint.as_ref(), "checkpoint")?.to_path_buf();
            let metrics = metric_selection(&cli.common, &cfg);
            sweep_samples(&cfg, &ckpt, data, *spread_case, &metrics, RunDir::create(out, name)?)
        }
        Command::Evaluate { checkpoint, data, store } => {
            let ckpt = require(checkpoint.as_ref(), cfg.checkpoint.as_ref(), "checkpoint")?.to_path_buf();
            let store = require(store.as_ref(), cfg.store_dir.as_ref(), "store")?.to_path_buf();
            evaluate(&cfg, &ckpt, data, &store, RunDir::create(out, name)?)
        }
        Command::SweepThreshold { store } => {
            let store = require(store.as_ref(), cfg.store_dir.as_ref(), "store")?.to_path_buf();
            sweep_threshold(&cfg, &store, RunDir::create(out, name)?)
        }
        Command::ExportReport { store } => {
            let store = require(store.as_ref(), cfg.store_dir.as_ref(), "store")?.to_path_buf();
            export_report(&cfg, &store, RunDir::create(out, name)?)
        }
        Command::Serve { checkpoint, store } => {
            let ckpt = require(checkpoint.as_ref(), cfg.checkpoint.as_ref(), "checkpoint")?.to_path_buf();
            let store = require(store.as_ref(), cfg.store_dir.as_ref(), "store")?.to_path_buf();
            serve(&cfg, &ckpt, &store)
        }
    }
}

fn synth(cfg: &RunConfig, mut run: RunDir) -> Result<Value> {
    let mut result = serde_json::Map::new();
    for (split, seed) in [("train", cfg.seed), ("test", derive_seed(cfg.seed, tags::SYNTH, 1))] {
        let records = synth_vessels(&mcunet_core::data::SyntheticConfig { seed, ..cfg.synthetic })?;
        dataset::save_flat(&run.dir.join(split), &records)?;
        run.output(split);
        let fractions: Vec<f64> = records.iter().map(|r| r.mask.sum_f64() / r.mask.len() as f64).collect();
        let (lo, hi) = fractions.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &f| (a.min(f), b.max(f)));
        run.line(format!(
            "{split}: {} images {}x{}, foreground fraction {lo:.3}..{hi:.3}",
            records.len(),
            cfg.synthetic.height,
            cfg.synthetic.width
        ));
        result.insert(split.into(), json!({ "images": records.len(), "seed": seed, "foreground_fraction": fractions }));
    }
    run.finish(cfg, Value::Object(result))
}

fn train(cfg: &RunConfig, data: &Path, mut run: RunDir) -> Result<Value> {
    run.input("data", data)?;
    let records = dataset::load_auto(data)?;
    if records.is_empty() {
        return Err(TriageError::data(format!("{}: no images", data.display())));
    }
    let started = Instant::now();
    let mut progress = Vec::new();
    let trained = pipeline::train_model(&records, cfg, |epoch, loss| {
        progress.push((epoch, loss));
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    checkpoint::save(&run.dir.join("checkpoint"), &trained.checkpoint)?;
    run.output("checkpoint");
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in &progress {
        losses.push_str(&format!("{},{l}\n", e + 1));
    }
    run.write("losses.csv", losses)?;
    run.line(format!(
        "trained on {} patches of {}x{} from {} images, {} epochs",
        trained.patches,
        cfg.patch_size,
        cfg.patch_size,
        records.len(),
        cfg.epochs
    ));
    if let (Some(first), Some(last)) = (trained.losses.first(), trained.losses.last()) {
        run.line(format!("loss {first:.6} -> {last:.6}"));
    }
    eprintln!("training took {:.1}s", started.elapsed().as_secs_f64());
    let checkpoint = run.dir.join("checkpoint");
    run.finish(cfg, json!({ "losses": trained.losses, "checkpoint": checkpoint }))
}

fn infer(cfg: &RunConfig, ckpt_dir: &Path, image_path: &Path, mut run: RunDir) -> Result<Value> {
    run.input("checkpoint", ckpt_dir)?;
    run.input("image", image_path)?;
    let ckpt = checkpoint::load(ckpt_dir)?;
    let image = pgm::read(image_path)?;
    let (h, w) = (image.dim(0), image.dim(1));
    let image = image.reshape(&[1, h, w])?;
    let maps = pipeline::infer(&ckpt.params, &image, cfg.samples, ckpt.dropout_p, cfg.seed)?;
    run.write("foreground.tns", tns::encode(&maps.foreground_probability().cast()))?;
    run.write("prediction.tns", tns::encode(&maps.predicted_mask()))?;
    run.write("prediction.pgm", pgm::encode(&maps.predicted_mask())?)?;
    for m in Metric::ALL {
        run.write(&format!("{m}.tns"), tns::encode(&maps.get(m).scalar.cast()))?;
    }
    let scores = CaseScores::compute(&maps, cfg.reduction)?;
    let threshold = cfg.threshold();
    let record = CaseRecord::from_maps("image", &maps, None)?;
    // under cohort-max a lone image is its own cohort
    let ctx = CohortContext::from_cases(std::slice::from_ref(&record), cfg.metric, cfg.reduction)?;
    let normalized = normalized_case_score(&record, &threshold, Some(&ctx))?;
    let decision = decide(normalized, cfg.tau);
    let result = json!({
        "height": h,
        "width": w,
        "samples": cfg.samples,
        "seed": cfg.seed,
        "scores": scores,
        "metric": cfg.metric,
        "normalized_score": normalized,
        "decision": decision,
    });
    run.json("scores.json", &result)?;
    run.line(format!("{h}x{w} image, T={} seed={}", cfg.samples, cfg.seed));
    run.line(format!("{} score {normalized:.4} -> {decision:?} at tau {}", cfg.metric, cfg.tau));
    run.finish(cfg, result)
}

fn load_eval_set(cfg: &RunConfig, data: &Path) -> Result<mcunet_core::data::PatchSet> {
    let records = dataset::load_auto(data)?;
    if records.is_empty() {
        return Err(TriageError::data(format!("{}: no images", data.display())));
    }
    pipeline::evaluation_patches(&records, cfg)
}

fn sweep_samples(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    data: &Path,
    spread_case: usize,
    metrics: &[Metric],
    mut run: RunDir,
) -> Result<Value> {
    run.input("checkpoint", ckpt_dir)?;
    run.input("data", data)?;
    let ckpt = checkpoint::load(ckpt_dir)?;
    let patches = load_eval_set(cfg, data)?;
    let Some(case) = patches.patches.get(spread_case) else {
        return Err(TriageError::config("spread_case", format!("{spread_case} >= {} patches", patches.len())));
    };
    let grid = cfg.sample_grid()?;
    let eval: Vec<EvalCase<'_>> =
        patches.patches.iter().map(|p| EvalCase { image: &p.image, mask: Some(&p.mask) }).collect();
    let records = sample_count_sweep(
        &ckpt.params,
        &eval,
        &grid,
        ckpt.dropout_p,
        cfg.seed,
        cfg.reduction,
        &mut WallClock(Instant::now()),
    )?;
    run.write("sweep.csv", sweep_csv(&records, metrics))?;
    let seeds: Vec<u64> =
        (0..cfg.spread_seeds as u64).map(|k| derive_seed(cfg.seed, tags::SWEEP, (1 << 32) + k)).collect();
    let spread = grid
        .iter()
        .map(|&n| Ok((n, estimator_spread(&ckpt.params, &case.image, n, ckpt.dropout_p, &seeds, cfg.reduction)?)))
        .collect::<Result<Vec<_>>>()?;
    run.write("spread.csv", spread_csv(&spread, seeds.len(), metrics))?;
    run.line(format!("{} cases, N in {:?}, {} rows", eval.len(), grid, grid.len() * metrics.len()));
    for m in metrics {
        let (first, last) = (&spread[0].1[m.index()], &spread[spread.len() - 1].1[m.index()]);
        run.line(format!(
            "{m}: across-seed std {:.3e} at N={} vs {:.3e} at N={}",
            first.std,
            spread[0].0,
            last.std,
            spread[spread.len() - 1].0
        ));
    }
    run.finish(cfg, json!({ "sweep": records, "spread": spread }))
}

fn open_store(dir: &Path, cfg: &RunConfig) -> Result<CaseStore> {
    CaseStore::open(dir, cfg.threshold())
}

fn evaluate(cfg: &RunConfig, ckpt_dir: &Path, data: &Path, store_dir: &Path, mut run: RunDir) -> Result<Value> {
    run.input("checkpoint", ckpt_dir)?;
    run.input("data", data)?;
    let ckpt = checkpoint::load(ckpt_dir)?;
    let patches = load_eval_set(cfg, data)?;
    dataset::save_patches(&run.dir.join("patches"), &patches)?;
    run.output("patches");
    let mut store = open_store(store_dir, cfg)?;
    store.set_config(cfg.threshold())?;
    let run_cfg = RunConfig { dropout_p: ckpt.dropout_p, ..cfg.clone() };
    pipeline::evaluate_into_store(&mut store, &ckpt.params, &patches, &run_cfg, |i| {
        if (i + 1) % 10 == 0 {
            eprintln!("inferred {} / {}", i + 1, patches.len());
        }
    })?;
    let cohort = store.state().evaluable_records();
    let report = evaluate_cohort(&cohort, &cfg.threshold())?;
    let plain = pixel_metrics(cohort.iter())?;
    let all_auroc = evaluate_cohort(&cohort, &cfg.threshold().with_tau(1.0))?.auroc;
    run.json("report.json", &report)?;
    run.write("report.csv", report_csv(std::slice::from_ref(&report)))?;
    let unreferred = json!({
        "accuracy": plain.accuracy,
        "precision": plain.precision,
        "recall": plain.recall,
        "auroc": all_auroc,
        "counts": plain.counts,
    });
    run.json("test_metrics.json", &unreferred)?;
    run.line(format!("{} cases in {}", cohort.len(), store_dir.display()));
    run.line(format!(
        "all cases: accuracy {} precision {} recall {} auroc {}",
        fmt_opt(plain.accuracy),
        fmt_opt(plain.precision),
        fmt_opt(plain.recall),
        fmt_opt(all_auroc)
    ));
    run.line(format!(
        "{} tau {}: referred {} of {}, retained accuracy {} auroc {}",
        cfg.metric,
        cfg.tau,
        report.referred,
        cohort.len(),
        fmt_opt(report.accuracy),
        fmt_opt(report.auroc)
    ));
    run.finish(cfg, json!({ "report": report, "all_cases": unreferred, "log_digest": store.log_digest()? }))
}

fn sweep_threshold(cfg: &RunConfig, store_dir: &Path, mut run: RunDir) -> Result<Value> {
    let store = open_store(store_dir, cfg)?;
    run.input("store", &store_dir.join(crate::store::LOG_FILE))?;
    let rows = threshold_report(store.state(), &cfg.threshold(), &cfg.taus()?)?;
    run.write("report.csv", report_csv(&rows))?;
    run.json("report.json", &rows)?;
    run.line(format!(
        "{} x {} normalised by {}, {} cases",
        cfg.metric,
        cfg.reduction,
        cfg.normalization,
        rows[0].retained + rows[0].referred
    ));
    for r in &rows {
        run.line(format!(
            "tau {:<4} referred {:>4}  accuracy {}  auroc {}",
            r.tau,
            r.referred,
            fmt_opt(r.accuracy),
            fmt_opt(r.auroc)
        ));
    }
    run.finish(cfg, serde_json::to_value(&rows).expect("plain data"))
}

fn export_report(cfg: &RunConfig, store_dir: &Path, mut run: RunDir) -> Result<Value> {
    let store = open_store(store_dir, cfg)?;
    run.input("store", &store_dir.join(crate::store::LOG_FILE))?;
    let active = store.config();
    let mut table = String::from("id,status,ground_truth,samples,seed,decision,raw_score,normalized_score");
    for m in Metric::ALL {
        table.push(',');
        table.push_str(m.name());
    }
    table.push('\n');
    for c in store.state().cases.values() {
        let scores = c.inference.as_ref().map(|i| CaseScores::from_fields(&i.fields, active.reduction)).transpose()?;
        let cells = [
            c.id.clone(),
            format!("{:?}", c.status).to_lowercase(),
            c.ground_truth.is_some().to_string(),
            c.inference.as_ref().map_or(String::new(), |i| i.samples.to_string()),
            c.inference.as_ref().map_or(String::new(), |i| i.seed.to_string()),
            c.decision.map_or(String::new(), |d| format!("{:?}", d.decision).to_lowercase()),
            c.decision.map_or(String::new(), |d| d.raw_score.to_string()),
            c.decision.map_or(String::new(), |d| d.normalized_score.to_string()),
        ];
        table.push_str(&cells.join(","));
        match scores {
            Some(s) => {
                for x in [s.aleatoric, s.epistemic, s.entropy, s.mutual_information, s.combined] {
                    table.push_str(&format!(",{x}"));
                }
            }
            None => table.push_str(",,,,,"),
        }
        table.push('\n');
    }
    run.write("cases.csv", table)?;
    let queue = service::queue_view(&store, Some("referred"))?;
    run.json("queue.json", &queue)?;
    run.line(format!("{} cases, {} referred under the store config", store.state().cases.len(), queue.cases.len()));
    let report = match threshold_report(store.state(), &active, &cfg.taus()?) {
        Ok(rows) => {
            run.write("report.csv", report_csv(&rows))?;
            run.json("report.json", &rows)?;
            run.line(format!("threshold report over {} taus", rows.len()));
            serde_json::to_value(&rows).expect("plain data")
        }
        Err(TriageError::Conflict(why)) => {
            run.line(format!("no threshold report: {why}"));
            Value::Null
        }
        Err(e) => return Err(e),
    };
    run.finish(cfg, json!({ "config": active, "queue": queue, "report": report }))
}

fn serve(cfg: &RunConfig, ckpt_dir: &Path, store_dir: &Path) -> Result<Value> {
    let ckpt = checkpoint::load(ckpt_dir)?;
    let store = open_store(store_dir, cfg)?;
    let state = std::sync::Arc::new(service::AppState::new(store, ckpt.params, ckpt.dropout_p, cfg.samples, cfg.seed));
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| TriageError::io("tokio runtime", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| TriageError::io(addr.to_string(), e))?;
        eprintln!("listening on http://{addr}");
        service::serve(listener, state).await.map_err(|e| TriageError::io(addr.to_string(), e))
    })?;
    Ok(json!({ "command": "serve", "stopped": true }))
}

/// Entry point used by the binary: parse, run, print and map failures onto
/// exit codes.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::FailureKind::Config.exit_code() } else { 0 };
        }
    };
    let format = cli.common.output;
    match run(&cli, |k| std::env::var(k).ok()) {
        Ok(value) => {
            let mut stdout = std::io::stdout().lock();
            let _ = match format {
                OutputFormat::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&value).expect("plain data")),
                OutputFormat::Text => write!(stdout, "{}", value["summary"].as_str().unwrap_or("")),
            };
            0
        }
        Err(e) => {
            match format {
                OutputFormat::Json => {
                    println!("{}", json!({ "error": e.to_string(), "exit_code": e.kind().exit_code() }))
                }
                OutputFormat::Text => eprintln!("error: {e}"),
            }
            e.kind().exit_code()
        }
    }
}
