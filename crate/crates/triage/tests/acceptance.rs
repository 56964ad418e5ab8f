//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criteria that need the trained desk model
//! share one synth/train/evaluate run.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{header, Method, Request};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use clap::Parser;
use http_body_util::BodyExt;
use mcunet_core::referral::{auroc, decide, normalized_scores, CohortReport, Decision, Normalization, ThresholdConfig};
use mcunet_core::rng::{tags, RngStream};
use mcunet_core::uncertainty::{Metric, Reduction, UncertaintyMaps};
use mcunet_core::unet::{
    batch_loss_with_masks, init_he, loss_and_grad_with_masks, Architecture, DropoutMasks, Example, ModelParams,
    Provenance, SampleStack,
};
use mcunet_core::Tensor;
use mcunet_triage::cli::{self, Cli};
use mcunet_triage::service::{self, AppState};
use mcunet_triage::store::CaseStore;
use mcunet_triage::{pgm, pipeline, report};
use serde_json::{json, Value};
use tower::ServiceExt;

const P1_TOL: f64 = 1e-6;
const P1_STACKS: usize = 1000;
const P1_LIMIT_S: f64 = 10.0;
const P2_TOL: f64 = 1e-9;
const P3_COORDS: usize = 50;
const P3_STEP: f64 = 1e-3;
const P3_TOL: f64 = 1e-3;
const P3_LIMIT_S: f64 = 60.0;
const P4_SEEDS: usize = 20;
const P4_MAX_N: usize = 30;
const P4_LIMIT_S: f64 = 600.0;
const P5_SEED: u64 = 42;
const P5_TRAIN_PATCHES: usize = 1000;
const P5_PATCH: usize = 48;
const P5_EPOCHS: usize = 30;
const P5_TEST_PATCHES: usize = 100;
const P5_MIN_ACCURACY: f64 = 0.90;
const P5_MIN_AUROC: f64 = 0.90;
const P5_LIMIT_S: f64 = 900.0;
const P6_INSTANCES: usize = 200;
const P6_TOL: f64 = 1e-9;
const P8_TOL: f64 = 1e-9;
const P9_REQUESTS: usize = 200;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, pass, detail };
    eprintln!("{} {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o
}

fn random_stack(rng: &mut RngStream) -> SampleStack {
    let t = 1 + rng.below(30) as usize;
    let (h, w) = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
    let scale = [0.5, 3.0, 12.0][rng.below(3) as usize];
    let repeat = rng.below(4) == 0;
    let plane = h * w;
    let mut slabs: Vec<Tensor<f32>> = Vec::with_capacity(t);
    for _ in 0..t {
        if repeat && !slabs.is_empty() {
            slabs.push(slabs[0].clone());
            continue;
        }
        let mut d = vec![0.0f32; 2 * plane];
        for p in 0..plane {
            let fg = 1.0 / (1.0 + (-scale * rng.normal()).exp());
            d[p] = (1.0 - fg) as f32;
            d[plane + p] = fg as f32;
        }
        slabs.push(Tensor::new(vec![2, h, w], d).unwrap());
    }
    SampleStack::from_slabs(&slabs, Provenance { seed: None, dropout_p: 0.5 }).unwrap()
}

fn p1_p2() -> (Outcome, Outcome) {
    let started = Instant::now();
    let mut rng = RngStream::new(2001, 0);
    let mut worst_identity = 0.0f64;
    let mut worst_bound = 0.0f64;
    let mut zero_mismatch = 0usize;
    let mut identical_pixels = 0usize;
    for _ in 0..P1_STACKS {
        let s = random_stack(&mut rng);
        let maps = UncertaintyMaps::compute(&s).unwrap();
        let (k, plane, t) = (2, s.height() * s.width(), s.samples());
        let a = maps.aleatoric.matrix.as_ref().unwrap().data();
        let e = maps.epistemic.matrix.as_ref().unwrap().data();
        for p in 0..plane {
            let mean: Vec<f64> =
                (0..k).map(|c| (0..t).map(|i| f64::from(s.prob(i, c, p))).sum::<f64>() / t as f64).collect();
            for i in 0..k {
                for j in 0..k {
                    let expect = if i == j { mean[i] - mean[i] * mean[j] } else { -mean[i] * mean[j] };
                    let idx = (i * k + j) * plane + p;
                    worst_identity = worst_identity.max((a[idx] + e[idx] - expect).abs());
                }
            }
            let mi = maps.mutual_information.scalar.data()[p];
            let h = maps.entropy.scalar.data()[p];
            let violation = [-mi, mi - h, h - std::f64::consts::LN_2].into_iter().fold(0.0f64, f64::max);
            worst_bound = worst_bound.max(violation);
            let identical = (1..t).all(|i| (0..k).all(|c| s.prob(i, c, p) == s.prob(0, c, p)));
            identical_pixels += identical as usize;
            if identical != (mi == 0.0) {
                zero_mismatch += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let p1 = outcome(
        "P1",
        worst_identity < P1_TOL && secs < P1_LIMIT_S,
        format!("aleatoric+epistemic vs diag(mean)-mean*mean^T: max abs err {worst_identity:.2e} (tol {P1_TOL:e}) over {P1_STACKS} stacks, {secs:.2}s (limit {P1_LIMIT_S}s)"),
    );
    let p2 = outcome(
        "P2",
        worst_bound <= P2_TOL && zero_mismatch == 0,
        format!("0<=MI<=H<=ln2: worst violation {worst_bound:.2e} (tol {P2_TOL:e}); MI==0 iff identical slabs: {zero_mismatch} mismatches over {identical_pixels} identical pixels"),
    );
    (p1, p2)
}

fn p3() -> Outcome {
    let started = Instant::now();
    let seed = 2024;
    let arch = Architecture::default();
    let mut params: ModelParams<f64> = init_he(arch, &mut RngStream::derive(seed, tags::INIT, 0)).unwrap();
    let mut r = RngStream::new(seed, 11);
    for i in 0..params.num_parameters() {
        if params.get(i) == 0.0 {
            params.set(i, 0.05 * r.normal());
        }
    }
    let image = Tensor::from_fn(&[1, 8, 8], |_| r.uniform()).unwrap();
    let labels = Tensor::from_fn(&[8, 8], |_| if r.uniform() < 0.3 { 1.0 } else { 0.0 }).unwrap();
    let masks = vec![DropoutMasks::sample(&arch, 8, 8, 0.25, &mut RngStream::new(seed, 12)).unwrap()];
    let batch = [Example { image: &image, labels: &labels }];
    let (_, grads) = loss_and_grad_with_masks(&params, &batch, &masks).unwrap();
    let mut pick = RngStream::new(seed, 13);
    let mut worst = 0.0f64;
    for _ in 0..P3_COORDS {
        let coord = pick.below(params.num_parameters() as u64) as usize;
        let mut q = params.clone();
        let w = q.get(coord);
        q.set(coord, w + P3_STEP);
        let up = batch_loss_with_masks(&q, &batch, &masks).unwrap();
        q.set(coord, w - P3_STEP);
        let down = batch_loss_with_masks(&q, &batch, &masks).unwrap();
        let numeric = (up - down) / (2.0 * P3_STEP);
        worst = worst.max((grads.get(coord) - numeric).abs() / numeric.abs().max(1e-8));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        "P3",
        worst < P3_TOL && secs < P3_LIMIT_S,
        format!("{P3_COORDS} coordinates, 1x8x8 input, h={P3_STEP:e}: max relative err {worst:.2e} (tol {P3_TOL:e}), {secs:.2}s (limit {P3_LIMIT_S}s)"),
    )
}

fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn p6() -> Outcome {
    let mut rng = RngStream::new(2006, 0);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..P6_INSTANCES {
        let n = 2 + rng.below(99) as usize;
        let levels = [1, 2, 3, 5, 1_000_000][rng.below(5) as usize];
        tied += (levels <= 3) as usize;
        let (scores, labels) = loop {
            let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            if labels.contains(&true) && labels.contains(&false) {
                break (scores, labels);
            }
        };
        worst = worst.max((auroc(&scores, &labels).unwrap() - mann_whitney(&scores, &labels)).abs());
    }
    outcome(
        "P6",
        worst < P6_TOL,
        format!("trapezoidal vs pairwise AUROC on {P6_INSTANCES} instances ({tied} heavy-tie): max abs err {worst:.2e} (tol {P6_TOL:e})"),
    )
}

fn cli_run(args: &[&str]) -> Value {
    let argv: Vec<&str> = std::iter::once("mcunet").chain(args.iter().copied()).collect();
    let parsed = Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    cli::run(&parsed, |_| None).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

struct Desk {
    checkpoint: String,
    test: String,
    store: std::path::PathBuf,
}

fn p5(work: &Path) -> (Outcome, Desk) {
    let started = Instant::now();
    let common = [
        "--seed".to_string(),
        P5_SEED.to_string(),
        "--train-patches".into(),
        P5_TRAIN_PATCHES.to_string(),
        "--patch-size".into(),
        P5_PATCH.to_string(),
        "--epochs".into(),
        P5_EPOCHS.to_string(),
        "--test-patches".into(),
        P5_TEST_PATCHES.to_string(),
    ];
    let with =
        |extra: &[&str]| -> Vec<String> { common.iter().cloned().chain(extra.iter().map(|x| x.to_string())).collect() };
    let call = |args: Vec<String>| cli_run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&["--out", &s(&work.join("synth")), "synth"]));
    call(with(&["--out", &s(&work.join("train")), "train", "--data", &s(&work.join("synth/train"))]));
    let desk = Desk {
        checkpoint: s(&work.join("train/checkpoint")),
        test: s(&work.join("synth/test")),
        store: work.join("store"),
    };
    let eval = call(with(&[
        "--out",
        &s(&work.join("evaluate")),
        "evaluate",
        "--checkpoint",
        &desk.checkpoint,
        "--data",
        &desk.test,
        "--store",
        &s(&desk.store),
    ]));
    let secs = started.elapsed().as_secs_f64();
    let all = &eval["result"]["all_cases"];
    let (acc, auc) = (all["accuracy"].as_f64().unwrap_or(f64::NAN), all["auroc"].as_f64().unwrap_or(f64::NAN));
    let o = outcome(
        "P5",
        acc >= P5_MIN_ACCURACY && auc >= P5_MIN_AUROC && secs < P5_LIMIT_S,
        format!("{P5_TRAIN_PATCHES} patches {P5_PATCH}x{P5_PATCH}, seed {P5_SEED}, {P5_EPOCHS} epochs; {P5_TEST_PATCHES} held-out patches: pixel accuracy {acc:.4} (min {P5_MIN_ACCURACY}), AUROC {auc:.4} (min {P5_MIN_AUROC}), {secs:.1}s (limit {P5_LIMIT_S}s)"),
    );
    (o, desk)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn p4(work: &Path, desk: &Desk) -> Outcome {
    let started = Instant::now();
    let grid = format!("1:{P4_MAX_N}");
    let seeds = P4_SEEDS.to_string();
    let out = s(&work.join("sweep"));
    cli_run(&[
        "--seed",
        "42",
        "--patch-size",
        "48",
        "--test-patches",
        "100",
        "--metric",
        "all",
        "--n-grid",
        &grid,
        "--spread-seeds",
        &seeds,
        "--out",
        &out,
        "sweep-samples",
        "--checkpoint",
        &desk.checkpoint,
        "--data",
        &desk.test,
    ]);
    let secs = started.elapsed().as_secs_f64();
    let sweep = csv_rows(&std::fs::read_to_string(work.join("sweep/sweep.csv")).unwrap());
    let spread = csv_rows(&std::fs::read_to_string(work.join("sweep/spread.csv")).unwrap());
    let mut pass = secs < P4_LIMIT_S;
    let mut notes = Vec::new();
    for m in Metric::ALL {
        let rows: Vec<&Vec<String>> = sweep.iter().filter(|r| r[1] == m.name()).collect();
        let ns: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        let runtimes_ok = rows.iter().all(|r| r[5].parse::<f64>().is_ok_and(|v| v.is_finite() && v > 0.0));
        if ns != (1..=P4_MAX_N).collect::<Vec<_>>() || !runtimes_ok {
            pass = false;
            notes.push(format!("{m}: {} sweep rows, runtime populated {runtimes_ok}", rows.len()));
        }
    }
    let std_at = |m: Metric, n: usize| -> f64 {
        spread.iter().find(|r| r[0] == n.to_string() && r[1] == m.name()).map(|r| r[4].parse().unwrap()).unwrap()
    };
    for m in [Metric::Entropy, Metric::MutualInformation, Metric::Epistemic] {
        let (first, last) = (std_at(m, 1), std_at(m, P4_MAX_N));
        let ok = last < first;
        pass &= ok;
        notes.push(format!(
            "{m} std {first:.3e} (N=1) -> {last:.3e} (N={P4_MAX_N}) {}",
            if ok { "ok" } else { "not decreasing" }
        ));
    }
    outcome(
        "P4",
        pass,
        format!("across-{P4_SEEDS}-seed std of case scores: {}; sweep.csv has {P4_MAX_N} rows per metric with runtime_s; {secs:.1}s (limit {P4_LIMIT_S}s)", notes.join(", ")),
    )
}

fn p7(desk: &Desk) -> Outcome {
    let store = CaseStore::open(&desk.store, ThresholdConfig::default()).unwrap();
    let cases = store.state().evaluable_records();
    let grid = mcunet_core::referral::tau_grid(0.1, 0.9, 0.1).unwrap();
    let mut broken = Vec::new();
    let mut configs = 0;
    for metric in Metric::ALL {
        for normalization in [Normalization::TheoreticalMax, Normalization::CohortMax] {
            for reduction in [Reduction::Mean, Reduction::Max, Reduction::Quantile(0.9)] {
                configs += 1;
                let template = ThresholdConfig { metric, reduction, tau: 0.5, normalization };
                let scores = normalized_scores(&cases, &template).unwrap();
                let sets: Vec<Vec<bool>> = grid
                    .iter()
                    .map(|&t| scores.iter().map(|&x| decide(x, t) == Decision::Referred).collect())
                    .collect();
                let nested = sets.windows(2).all(|w| w[1].iter().zip(&w[0]).all(|(&now, &before)| !now || before));
                let rows = report::threshold_report(store.state(), &template, &grid).unwrap();
                let counts_ok = rows.windows(2).all(|w| w[0].referred >= w[1].referred)
                    && rows.iter().zip(&sets).all(|(r, set)| r.referred == set.iter().filter(|&&x| x).count());
                let top_ok = normalization != Normalization::TheoreticalMax
                    || report::threshold_report(store.state(), &template, &[1.0]).unwrap()[0].referred == 0;
                if !(nested && counts_ok && top_ok) {
                    broken.push(format!("{metric}/{reduction}/{normalization}"));
                }
            }
        }
    }
    outcome(
        "P7",
        broken.is_empty(),
        format!(
            "tau 0.1..0.9 over {} desk cases, {configs} metric/reduction/normalization configs: nested sets, non-increasing counts, tau=1 refers 0 under theoretical-max; violations: {}",
            cases.len(),
            if broken.is_empty() { "none".to_string() } else { broken.join(" ") }
        ),
    )
}

async fn request(router: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (u16, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = router.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status().as_u16();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= P8_TOL,
        _ => false,
    }
}

fn cell(v: &str) -> Option<f64> {
    (!v.is_empty()).then(|| v.parse().unwrap())
}

fn p8(work: &Path, desk: &Desk) -> Outcome {
    let out = s(&work.join("threshold"));
    cli_run(&["--out", &out, "sweep-threshold", "--store", &s(&desk.store)]);
    let rows = csv_rows(&std::fs::read_to_string(work.join("threshold/report.csv")).unwrap());
    let store = CaseStore::open(&desk.store, ThresholdConfig::default()).unwrap();
    let params = pipeline::initial_params(0).unwrap();
    let router = service::router(Arc::new(AppState::new(store, params, 0.25, 20, 42)));
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let (status, body) = runtime.block_on(request(&router, Method::GET, "/report", None));
    let json: Vec<CohortReport> = serde_json::from_slice(&body).unwrap_or_default();
    let mut mismatches = Vec::new();
    if status != 200 || json.len() != rows.len() || rows.is_empty() {
        mismatches.push(format!("status {status}, {} CSV rows vs {} JSON rows", rows.len(), json.len()));
    }
    for (r, j) in rows.iter().zip(&json) {
        let counts = r[2].parse::<usize>().unwrap() == j.retained && r[3].parse::<usize>().unwrap() == j.referred;
        let same_key = r[1] == j.metric.name() && close(cell(&r[0]), Some(j.tau));
        let rates = close(cell(&r[4]), Some(j.referral_rate))
            && close(cell(&r[5]), j.accuracy)
            && close(cell(&r[6]), j.precision)
            && close(cell(&r[7]), j.recall)
            && close(cell(&r[8]), j.auroc);
        if !(counts && same_key && rates) {
            mismatches.push(format!("tau {}", r[0]));
        }
    }
    outcome(
        "P8",
        mismatches.is_empty(),
        format!(
            "sweep-threshold CSV vs GET /report JSON over {} rows: counts exact, rates within {P8_TOL:e}; mismatches: {}",
            rows.len(),
            if mismatches.is_empty() { "none".to_string() } else { mismatches.join(" ") }
        ),
    )
}

fn tiny_image(rng: &mut RngStream, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, n], |_| rng.uniform_f32()).unwrap()
}

fn tiny_mask(rng: &mut RngStream, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, n], |_| (rng.uniform() < 0.3) as u8 as f32).unwrap()
}

async fn p9_sequence(work: &Path) -> (bool, String) {
    let dir = work.join("p9-store");
    let store = CaseStore::open(&dir, ThresholdConfig::default()).unwrap();
    let state = Arc::new(AppState::new(store, pipeline::initial_params(9).unwrap(), 0.25, 4, 42));
    let router = service::router(state.clone());
    let digest = |state: &Arc<AppState>| {
        let state = state.clone();
        async move { state.store.read().await.log_digest().unwrap() }
    };
    let mut rng = RngStream::new(2009, 0);
    let mut ids: Vec<(String, usize)> = Vec::new();
    let mut whatifs = (0usize, 0usize);
    let mut digest_changed = 0usize;
    let mut statuses = std::collections::BTreeMap::<u16, usize>::new();
    for i in 0..P9_REQUESTS {
        let pick = |rng: &mut RngStream, ids: &[(String, usize)]| {
            if ids.is_empty() || rng.below(10) == 0 {
                ("unknown".to_string(), 8)
            } else {
                ids[rng.below(ids.len() as u64) as usize].clone()
            }
        };
        let (status, _) = match rng.below(8) {
            0 | 1 => {
                let n = [8, 16][rng.below(2) as usize];
                let id = if rng.below(5) == 0 && !ids.is_empty() { ids[0].0.clone() } else { format!("c{i:03}") };
                let mut body =
                    json!({ "id": id, "image": BASE64.encode(pgm::encode(&tiny_image(&mut rng, n)).unwrap()) });
                if rng.below(10) < 7 {
                    body["mask"] = json!(BASE64.encode(pgm::encode(&tiny_mask(&mut rng, n)).unwrap()));
                }
                let r = request(&router, Method::POST, "/cases", Some(body)).await;
                if r.0 == 201 {
                    ids.push((id, n));
                }
                r
            }
            2 | 3 => {
                let (id, _) = pick(&mut rng, &ids);
                let body = json!({ "T": rng.below(5), "seed": rng.below(1000) });
                request(&router, Method::POST, &format!("/cases/{id}/infer"), Some(body)).await
            }
            4 => {
                let (id, n) = pick(&mut rng, &ids);
                let reviewer = ["a", "b"][rng.below(2) as usize];
                let body = if rng.below(2) == 0 {
                    json!({ "reviewer": reviewer, "verdict": "accept" })
                } else {
                    let size = if rng.below(6) == 0 { n / 2 } else { n };
                    let rows: Vec<Vec<u8>> =
                        (0..size).map(|_| (0..size).map(|_| rng.below(2) as u8).collect()).collect();
                    json!({ "reviewer": reviewer, "verdict": "override", "corrected_mask": rows })
                };
                request(&router, Method::POST, &format!("/cases/{id}/review"), Some(body)).await
            }
            5 => {
                let metric = Metric::ALL[rng.below(5) as usize];
                let normalization = ["theoretical-max", "cohort-max"][rng.below(2) as usize];
                let tau = if rng.below(8) == 0 { 1.5 } else { rng.uniform() };
                let body = json!({ "metric": metric, "reduction": "mean", "tau": tau, "normalization": normalization });
                request(&router, Method::PUT, "/config", Some(body)).await
            }
            6 => {
                let before = digest(&state).await;
                let uri = match rng.below(3) {
                    0 => format!("/whatif?tau={}", rng.uniform()),
                    1 => format!("/whatif?tau={}&metric=entropy&normalization=cohort-max", rng.uniform()),
                    _ => "/report?grid=0.1:0.9:0.1".to_string(),
                };
                let r = request(&router, Method::GET, &uri, None).await;
                whatifs.0 += 1;
                whatifs.1 += (r.0 == 200) as usize;
                digest_changed += (digest(&state).await != before) as usize;
                r
            }
            _ => {
                let (id, _) = pick(&mut rng, &ids);
                let uri = match rng.below(4) {
                    0 => "/queue?status=all".to_string(),
                    1 => format!("/cases/{id}"),
                    2 => format!("/cases/{id}/maps/entropy"),
                    _ => "/health".to_string(),
                };
                request(&router, Method::GET, &uri, None).await
            }
        };
        *statuses.entry(status).or_default() += 1;
    }
    let store = state.store.read().await;
    let live = store.state().clone();
    let replayed = store.replayed().unwrap();
    drop(store);
    let reopened = CaseStore::open(&dir, ThresholdConfig::default()).unwrap().state().clone();
    let pass = replayed == live && reopened == live && digest_changed == 0 && whatifs.1 > 0;
    let detail = format!(
        "{P9_REQUESTS} requests (statuses {statuses:?}), {} cases, {} events: replay==live {}, reopen==live {}; {} what-if/report requests ({} answered) changed the digest {digest_changed} times",
        live.cases.len(),
        live.events,
        replayed == live,
        reopened == live,
        whatifs.0,
        whatifs.1
    );
    (pass, detail)
}

fn p9(work: &Path) -> Outcome {
    let (pass, detail) = tokio::runtime::Runtime::new().unwrap().block_on(p9_sequence(work));
    outcome("P9", pass, detail)
}

fn main() {
    let started = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let (o1, o2) = p1_p2();
    let o3 = p3();
    let o6 = p6();
    let o9 = p9(work.path());
    let (o5, desk) = p5(work.path());
    let o4 = p4(work.path(), &desk);
    let o7 = p7(&desk);
    let o8 = p8(work.path(), &desk);
    let outcomes = [o1, o2, o3, o4, o5, o6, o7, o8, o9];
    println!();
    for o in &outcomes {
        println!("{} {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} passed in {:.1}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(" "));
        std::process::exit(1);
    }
}
