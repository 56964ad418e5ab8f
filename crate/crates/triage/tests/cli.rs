use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Parser;
use mcunet_core::referral::CohortReport;
use mcunet_triage::cli::{self, Cli};
use mcunet_triage::config::RunConfig;
use mcunet_triage::store::CaseStore;
use mcunet_triage::{checkpoint, pipeline, report, tns};
use serde_json::{json, Value};

struct Work {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        let cfg = json!({
            "seed": 5,
            "samples": 3,
            "n_grid": "1:3",
            "spread_seeds": 3,
            "train_patches": 16,
            "test_patches": 6,
            "patch_size": 16,
            "epochs": 1,
            "batch_size": 4,
            "synthetic": { "count": 3, "height": 32, "width": 32 }
        });
        std::fs::write(&config, cfg.to_string()).unwrap();
        Work { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Value {
        self.try_run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
    }

    fn try_run(&self, args: &[&str]) -> mcunet_triage::Result<Value> {
        let config = self.config.to_str().unwrap().to_string();
        let mut argv = vec!["mcunet", "--config", &config];
        argv.extend_from_slice(args);
        let parsed = Cli::try_parse_from(&argv).unwrap();
        cli::run(&parsed, |_| None)
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_string()
    }
}

fn manifest_outputs(run_dir: &Path) -> BTreeMap<String, String> {
    let m: Value = serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    serde_json::from_value(m["outputs"].clone()).unwrap()
}

fn strip_runtime(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n")
}

#[test]
fn synth_writes_both_splits() {
    let w = Work::new();
    let out = w.run(&["--out", &w.p("synth"), "synth"]);
    assert_eq!(out["result"]["train"]["images"], 3);
    for split in ["train", "test"] {
        let records = mcunet_triage::dataset::load_auto(&w.path(&format!("synth/{split}"))).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].image.shape(), &[1, 32, 32]);
    }
    assert!(w.path("synth/train/synth_0000.pgm").is_file());
    assert!(w.path("synth/train/synth_0000_mask.pgm").is_file());
    assert_ne!(hash(&w.path("synth/train")), hash(&w.path("synth/test")));
    assert!(w.path("synth/summary.txt").is_file());
    assert_eq!(manifest_outputs(&w.path("synth")).len(), 2);
}

fn hash(p: &Path) -> String {
    cli::hash_path(p).unwrap()
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let w = Work::new();
    w.run(&["--out", &w.p("synth"), "synth"]);
    w.run(&["--out", &w.p("train0"), "--epochs", "0", "train", "--data", &w.p("synth/train")]);
    let ckpt = checkpoint::load(&w.path("train0/checkpoint")).unwrap();
    assert_eq!(ckpt.params, pipeline::initial_params(5).unwrap());
    assert_eq!(ckpt.epoch, 0);
}

#[test]
fn full_pipeline_and_rerun_determinism() {
    let w = Work::new();
    let stages = |tag: &str| {
        let d = |s: &str| w.p(&format!("{tag}/{s}"));
        w.run(&["--out", &d("synth"), "synth"]);
        let trained = w.run(&["--out", &d("train"), "train", "--data", &d("synth/train")]);
        assert_eq!(trained["result"]["losses"].as_array().unwrap().len(), 1);
        let ckpt = d("train/checkpoint");
        w.run(&["--out", &d("infer"), "infer", "--checkpoint", &ckpt, "--image", &d("synth/test/synth_0000.pgm")]);
        w.run(&[
            "--out",
            &d("sweep"),
            "--metric",
            "all",
            "sweep-samples",
            "--checkpoint",
            &ckpt,
            "--data",
            &d("synth/test"),
        ]);
        w.run(&[
            "--out",
            &d("eval"),
            "evaluate",
            "--checkpoint",
            &ckpt,
            "--data",
            &d("synth/test"),
            "--store",
            &d("store"),
        ]);
        w.run(&["--out", &d("thr"), "sweep-threshold", "--store", &d("store")]);
        w.run(&["--out", &d("export"), "export-report", "--store", &d("store")]);
    };
    stages("a");
    stages("b");

    let infer = w.path("a/infer");
    for f in
        ["foreground.tns", "prediction.tns", "prediction.pgm", "epistemic.tns", "mutual-information.tns", "scores.json"]
    {
        assert!(infer.join(f).is_file(), "{f}");
    }
    assert_eq!(tns::read(&infer.join("entropy.tns")).unwrap().shape(), &[32, 32]);

    let sweep = std::fs::read_to_string(w.path("a/sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 5);
    assert_eq!(sweep.lines().next().unwrap(), report::SWEEP_HEADER);
    assert!(sweep.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() >= 0.0));
    let spread = std::fs::read_to_string(w.path("a/sweep/spread.csv")).unwrap();
    assert_eq!(spread.lines().count(), 1 + 3 * 5);

    // every output matches across reruns; sweep runtimes are wall-clock
    for stage in ["synth", "train", "infer", "sweep", "eval", "thr", "export"] {
        let (a, b) =
            (manifest_outputs(&w.path(&format!("a/{stage}"))), manifest_outputs(&w.path(&format!("b/{stage}"))));
        assert_eq!(a.len(), b.len());
        for (k, h) in &a {
            if stage == "sweep" && k == "sweep.csv" {
                continue;
            }
            assert_eq!(Some(h), b.get(k), "{stage}/{k}");
        }
    }
    let sweep_b = std::fs::read_to_string(w.path("b/sweep/sweep.csv")).unwrap();
    assert_eq!(strip_runtime(&sweep), strip_runtime(&sweep_b));
    assert_eq!(
        std::fs::read(w.path("a/store/events.jsonl")).unwrap(),
        std::fs::read(w.path("b/store/events.jsonl")).unwrap()
    );

    // sweep-threshold agrees with the store-level report
    let rows: Vec<CohortReport> = serde_json::from_slice(&std::fs::read(w.path("a/thr/report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 9);
    let cfg = RunConfig::load(Some(&w.config), |_| None).unwrap();
    let store = CaseStore::open(&w.path("a/store"), cfg.threshold()).unwrap();
    let direct = report::threshold_report(store.state(), &cfg.threshold(), &cfg.taus().unwrap()).unwrap();
    assert_eq!(rows, direct);
    let csv = std::fs::read_to_string(w.path("a/thr/report.csv")).unwrap();
    assert_eq!(csv, report::report_csv(&direct));

    // tau = 1 refers nothing, so the retained metrics are the plain ones
    let w1 = w.run(&[
        "--out",
        &w.p("a/eval1"),
        "--tau",
        "1",
        "evaluate",
        "--checkpoint",
        &w.p("a/train/checkpoint"),
        "--data",
        &w.p("a/synth/test"),
        "--store",
        &w.p("a/store1"),
    ]);
    let (rep, all) = (&w1["result"]["report"], &w1["result"]["all_cases"]);
    assert_eq!(rep["referred"], 0);
    for k in ["accuracy", "precision", "recall", "auroc"] {
        assert_eq!(rep[k], all[k], "{k}");
    }

    let cases = std::fs::read_to_string(w.path("a/export/cases.csv")).unwrap();
    assert_eq!(cases.lines().count(), 1 + 6);
    let queue: Value = serde_json::from_slice(&std::fs::read(w.path("a/export/queue.json")).unwrap()).unwrap();
    let referred = queue["cases"].as_array().unwrap().len();
    let report_json: CohortReport =
        serde_json::from_slice(&std::fs::read(w.path("a/eval/report.json")).unwrap()).unwrap();
    assert_eq!(referred, report_json.referred);
}

#[test]
fn resuming_evaluate_adds_no_events() {
    let w = Work::new();
    w.run(&["--out", &w.p("synth"), "synth"]);
    w.run(&["--out", &w.p("train"), "--epochs", "0", "train", "--data", &w.p("synth/train")]);
    let args =
        ["evaluate", "--checkpoint", &w.p("train/checkpoint"), "--data", &w.p("synth/test"), "--store", &w.p("store")];
    let first = w.run(&[&["--out", &w.p("e1")], &args[..]].concat());
    let second = w.run(&[&["--out", &w.p("e2")], &args[..]].concat());
    assert_eq!(first["result"]["log_digest"], second["result"]["log_digest"]);
}

#[test]
fn single_metric_sweep_has_one_row_per_sample_count() {
    let w = Work::new();
    w.run(&["--out", &w.p("synth"), "synth"]);
    w.run(&["--out", &w.p("train"), "--epochs", "0", "train", "--data", &w.p("synth/train")]);
    w.run(&[
        "--out",
        &w.p("sweep"),
        "--metric",
        "entropy",
        "--n-grid",
        "2,4",
        "sweep-samples",
        "--checkpoint",
        &w.p("train/checkpoint"),
        "--data",
        &w.p("synth/test"),
    ]);
    let csv = std::fs::read_to_string(w.path("sweep/sweep.csv")).unwrap();
    let ns: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["2", "4"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("entropy")));
}

#[test]
fn failures_map_to_exit_codes() {
    let w = Work::new();
    let code = |args: &[&str]| cli::main_with(std::iter::once("mcunet").chain(args.iter().copied()).map(Into::into));
    assert_eq!(code(&["--bogus", "synth"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--tau", "1.5", "--out", &w.p("x"), "synth"]), 2);
    assert_eq!(code(&["--metric", "nope", "--out", &w.p("x"), "synth"]), 2);
    assert_eq!(code(&["--config", &w.p("missing.json"), "synth"]), 3);
    std::fs::write(w.path("bad.json"), r#"{"sed": 1}"#).unwrap();
    assert_eq!(code(&["--config", &w.p("bad.json"), "synth"]), 2);
    assert_eq!(code(&["--out", &w.p("t"), "train", "--data", &w.p("nothing-here")]), 3);
    assert_eq!(code(&["--out", &w.p("s"), "sweep-threshold"]), 2);
    assert!(matches!(
        w.try_run(&["--out", &w.p("s"), "sweep-threshold", "--store", &w.p("empty")]),
        Err(mcunet_triage::TriageError::Conflict(_))
    ));
}
