//! Event-sourced case store.
//!
//! The store directory holds `events.jsonl`, one [`Event`] per line, and
//! `artifacts/<sha256>.tns`, content-addressed TNS1 tensors referenced by
//! the events. Every mutation appends events and then applies them through
//! the same [`StoreState::apply`] used on replay, so reopening a store
//! always reproduces the live state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mcunet_core::referral::{
    decide, normalize_score, CaseRecord, CohortContext, Decision, MetricFields, ReviewVerdict, ThresholdConfig,
    VerdictKind,
};
use mcunet_core::uncertainty::{Metric, UncertaintyMaps};
use mcunet_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TriageError};
use crate::tns;

pub const LOG_FILE: &str = "events.jsonl";
pub const ARTIFACT_DIR: &str = "artifacts";

/// Lifecycle of a case: ingested, then retained or referred once inferred,
/// and reviewed after a verdict on a referred case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ingested,
    Retained,
    Referred,
    Reviewed,
}

impl std::str::FromStr for Status {
    type Err = TriageError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ingested" => Ok(Status::Ingested),
            "retained" => Ok(Status::Retained),
            "referred" => Ok(Status::Referred),
            "reviewed" => Ok(Status::Reviewed),
            other => Err(TriageError::config("status", format!("unknown status {other:?}"))),
        }
    }
}

/// Metric maps of one inference, in [`Metric::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapRefs {
    pub foreground: String,
    pub predicted: String,
    pub metrics: [String; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    Ingested { id: String, image: String, ground_truth: Option<String> },
    InferenceComplete { id: String, samples: usize, seed: u64, dropout_p: f64, maps: MapRefs },
    Decision { id: String, decision: Decision, raw_score: f64, normalized_score: f64 },
    Verdict { id: String, reviewer: String, kind: VerdictKind, corrected_mask: Option<String>, verdict_hash: String },
    ConfigChanged { config: ThresholdConfig },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub samples: usize,
    pub seed: u64,
    pub dropout_p: f64,
    pub maps: MapRefs,
    pub foreground: Tensor<f64>,
    pub predicted: Tensor<f32>,
    pub fields: MetricFields,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionState {
    pub decision: Decision,
    pub raw_score: f64,
    pub normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub reviewer: String,
    pub kind: VerdictKind,
    pub corrected_mask: Option<Tensor<f32>>,
    pub mask_ref: Option<String>,
    pub verdict_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseState {
    pub id: String,
    pub status: Status,
    /// `[1, H, W]`.
    pub image: Tensor<f32>,
    pub image_ref: String,
    /// `[H, W]` in {0, 1}.
    pub ground_truth: Option<Tensor<f32>>,
    pub ground_truth_ref: Option<String>,
    pub inference: Option<Inference>,
    /// Decision under the active config; kept current for reviewed cases
    /// too, although their status no longer changes.
    pub decision: Option<DecisionState>,
    pub verdict: Option<Verdict>,
}

impl CaseState {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    /// The referral engine's view of an inferred case.
    pub fn record(&self) -> Option<CaseRecord> {
        let inf = self.inference.as_ref()?;
        Some(CaseRecord {
            id: self.id.clone(),
            image: Some(self.image.clone()),
            foreground: inf.foreground.clone(),
            predicted: inf.predicted.clone(),
            ground_truth: self.ground_truth.clone(),
            fields: inf.fields.clone(),
            status: match self.status {
                Status::Ingested => None,
                Status::Retained => Some(mcunet_core::referral::CaseStatus::Retained),
                Status::Referred => Some(mcunet_core::referral::CaseStatus::Referred),
                Status::Reviewed => Some(mcunet_core::referral::CaseStatus::Reviewed),
            },
            verdict: self.verdict.as_ref().map(|v| ReviewVerdict {
                reviewer: v.reviewer.clone(),
                kind: v.kind,
                corrected_mask: v.corrected_mask.clone(),
            }),
        })
    }
}

/// Materialised state; a pure function of the event sequence and the
/// artifacts it references.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreState {
    pub cases: BTreeMap<String, CaseState>,
    pub config: ThresholdConfig,
    pub events: u64,
}

impl StoreState {
    fn new(config: ThresholdConfig) -> Self {
        StoreState { cases: BTreeMap::new(), config, events: 0 }
    }

    fn case_mut(&mut self, id: &str) -> Result<&mut CaseState> {
        self.cases.get_mut(id).ok_or_else(|| TriageError::data(format!("event for unknown case {id:?}")))
    }

    pub fn apply(&mut self, event: &Event, artifacts: &Artifacts) -> Result<()> {
        match event {
            Event::Ingested { id, image, ground_truth } => {
                if self.cases.contains_key(id) {
                    return Err(TriageError::data(format!("case {id:?} ingested twice")));
                }
                let case = CaseState {
                    id: id.clone(),
                    status: Status::Ingested,
                    image: artifacts.load(image)?,
                    image_ref: image.clone(),
                    ground_truth: ground_truth.as_deref().map(|r| artifacts.load(r)).transpose()?,
                    ground_truth_ref: ground_truth.clone(),
                    inference: None,
                    decision: None,
                    verdict: None,
                };
                self.cases.insert(id.clone(), case);
            }
            Event::InferenceComplete { id, samples, seed, dropout_p, maps } => {
                let fields = MetricFields(
                    maps.metrics.each_ref().map(|r| artifacts.load(r).map(|t| t.cast::<f64>())).try_map_all()?,
                );
                let inference = Inference {
                    samples: *samples,
                    seed: *seed,
                    dropout_p: *dropout_p,
                    maps: maps.clone(),
                    foreground: artifacts.load(&maps.foreground)?.cast(),
                    predicted: artifacts.load(&maps.predicted)?,
                    fields,
                };
                self.case_mut(id)?.inference = Some(inference);
            }
            Event::Decision { id, decision, raw_score, normalized_score } => {
                let case = self.case_mut(id)?;
                case.decision = Some(DecisionState {
                    decision: *decision,
                    raw_score: *raw_score,
                    normalized_score: *normalized_score,
                });
                if case.status != Status::Reviewed {
                    case.status = match decision {
                        Decision::Retained => Status::Retained,
                        Decision::Referred => Status::Referred,
                    };
                }
            }
            Event::Verdict { id, reviewer, kind, corrected_mask, verdict_hash } => {
                let case = self.case_mut(id)?;
                case.verdict = Some(Verdict {
                    reviewer: reviewer.clone(),
                    kind: *kind,
                    corrected_mask: corrected_mask.as_deref().map(|r| artifacts.load(r)).transpose()?,
                    mask_ref: corrected_mask.clone(),
                    verdict_hash: verdict_hash.clone(),
                });
                case.status = Status::Reviewed;
            }
            Event::ConfigChanged { config } => self.config = *config,
        }
        self.events += 1;
        Ok(())
    }

    /// Inferred cases as referral-engine records, in id order.
    pub fn inferred_records(&self) -> Vec<CaseRecord> {
        self.cases.values().filter_map(CaseState::record).collect()
    }

    /// Inferred cases that carry ground truth, in id order.
    pub fn evaluable_records(&self) -> Vec<CaseRecord> {
        self.inferred_records().into_iter().filter(|r| r.ground_truth.is_some()).collect()
    }

    /// Decisions every inferred case should have under the active config,
    /// normalised against all inferred cases.
    fn target_decisions(&self) -> Result<Vec<(String, DecisionState)>> {
        let records = self.inferred_records();
        let cfg = self.config;
        let ctx = CohortContext::from_cases(&records, cfg.metric, cfg.reduction)?;
        records
            .iter()
            .map(|r| {
                let raw = r.raw_score(cfg.metric, cfg.reduction)?;
                let normalized = normalize_score(raw, cfg.metric, 2, Some(&ctx), cfg.normalization)?;
                Ok((
                    r.id.clone(),
                    DecisionState {
                        decision: decide(normalized, cfg.tau),
                        raw_score: raw,
                        normalized_score: normalized,
                    },
                ))
            })
            .collect()
    }
}

/// Content-addressed TNS1 files.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.tns"))
    }

    pub fn put(&self, t: &Tensor<f32>) -> Result<String> {
        let bytes = tns::encode(t);
        let hash = hex::encode(Sha256::digest(&bytes));
        let path = self.path(&hash);
        if !path.exists() {
            let tmp = self.dir.join(format!("{hash}.tmp"));
            std::fs::write(&tmp, &bytes).map_err(|e| TriageError::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| TriageError::io(&path, e))?;
        }
        Ok(hash)
    }

    pub fn bytes(&self, hash: &str) -> Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(TriageError::data(format!("malformed artifact reference {hash:?}")));
        }
        let path = self.path(hash);
        std::fs::read(&path).map_err(|e| TriageError::io(&path, e))
    }

    pub fn load(&self, hash: &str) -> Result<Tensor<f32>> {
        tns::decode(&self.bytes(hash)?)
    }
}

/// Single-writer handle on a store directory.
#[derive(Debug)]
pub struct CaseStore {
    dir: PathBuf,
    artifacts: Artifacts,
    log: File,
    state: StoreState,
}

/// What the caller learns from [`CaseStore::review`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewOutcome {
    Recorded,
    /// Identical verdict already on file; nothing appended.
    Unchanged,
}

pub fn valid_case_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b))
        && !id.starts_with('.')
}

impl CaseStore {
    /// Open (creating if needed) and replay the log. A new store records
    /// `initial` as its first event; an existing one keeps its own config.
    pub fn open(dir: &Path, initial: ThresholdConfig) -> Result<Self> {
        initial.validate()?;
        let artifact_dir = dir.join(ARTIFACT_DIR);
        std::fs::create_dir_all(&artifact_dir).map_err(|e| TriageError::io(&artifact_dir, e))?;
        let artifacts = Artifacts { dir: artifact_dir };
        let log_path = dir.join(LOG_FILE);
        let state = replay(&log_path, &artifacts, initial)?;
        let log =
            OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| TriageError::io(&log_path, e))?;
        let mut store = CaseStore { dir: dir.to_path_buf(), artifacts, log, state };
        if store.state.events == 0 {
            store.commit(&[Event::ConfigChanged { config: initial }])?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn artifacts(&self) -> &Artifacts {
        &self.artifacts
    }

    pub fn config(&self) -> ThresholdConfig {
        self.state.config
    }

    pub fn case(&self, id: &str) -> Result<&CaseState> {
        self.state.cases.get(id).ok_or_else(|| TriageError::NotFound(format!("case {id:?}")))
    }

    /// Rebuild the state from disk, independently of this handle.
    pub fn replayed(&self) -> Result<StoreState> {
        replay(&self.dir.join(LOG_FILE), &self.artifacts, ThresholdConfig::default())
    }

    /// SHA-256 of the event log.
    pub fn log_digest(&self) -> Result<String> {
        let path = self.dir.join(LOG_FILE);
        let bytes = std::fs::read(&path).map_err(|e| TriageError::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn commit(&mut self, events: &[Event]) -> Result<()> {
        let mut text = String::new();
        for e in events {
            text.push_str(&serde_json::to_string(e).expect("plain data"));
            text.push('\n');
        }
        let path = self.dir.join(LOG_FILE);
        self.log.write_all(text.as_bytes()).map_err(|e| TriageError::io(&path, e))?;
        self.log.flush().map_err(|e| TriageError::io(&path, e))?;
        for e in events {
            self.state.apply(e, &self.artifacts)?;
        }
        Ok(())
    }

    fn next_id(&self) -> String {
        let mut n = self.state.cases.len() + 1;
        loop {
            let id = format!("case-{n:06}");
            if !self.state.cases.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    /// Add a case. `image` is `[H, W]` or `[1, H, W]` in `[0, 1]` with `H`, `W`
    /// divisible by 4; `ground_truth` is a binary `[H, W]` mask.
    pub fn ingest(
        &mut self,
        id: Option<String>,
        image: Tensor<f32>,
        ground_truth: Option<Tensor<f32>>,
    ) -> Result<String> {
        let (h, w) = match image.shape() {
            &[h, w] | &[1, h, w] => (h, w),
            other => return Err(TriageError::data(format!("image must be [H,W] or [1,H,W], got {other:?}"))),
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(TriageError::data(format!("image {h}x{w}: both sides must be divisible by 4")));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TriageError::data("image values must lie in [0, 1]"));
        }
        if let Some(gt) = &ground_truth {
            if gt.shape() != [h, w] {
                return Err(TriageError::data(format!("ground truth is {:?}, image is {h}x{w}", gt.shape())));
            }
            if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(TriageError::data("ground truth must be binary"));
            }
        }
        let id = match id {
            Some(id) if !valid_case_id(&id) => {
                return Err(TriageError::data(format!("case id {id:?}: use 1-64 of [A-Za-z0-9._-]")))
            }
            Some(id) => id,
            None => self.next_id(),
        };
        if self.state.cases.contains_key(&id) {
            return Err(TriageError::Conflict(format!("case {id:?} already exists")));
        }
        let image = image.reshape(&[1, h, w])?;
        let event = Event::Ingested {
            id: id.clone(),
            image: self.artifacts.put(&image)?,
            ground_truth: ground_truth.as_ref().map(|g| self.artifacts.put(g)).transpose()?,
        };
        self.commit(&[event])?;
        Ok(id)
    }

    /// Record an inference result and re-decide the cohort.
    pub fn record_inference(
        &mut self,
        id: &str,
        samples: usize,
        seed: u64,
        dropout_p: f64,
        maps: &UncertaintyMaps,
    ) -> Result<()> {
        let case = self.case(id)?;
        if case.status == Status::Reviewed {
            return Err(TriageError::Conflict(format!("case {id:?} is already reviewed")));
        }
        if maps.predicted_mask().shape() != [case.height(), case.width()] {
            return Err(TriageError::data(format!("maps do not match case {id:?}")));
        }
        let put64 = |t: &Tensor<f64>| self.artifacts.put(&t.cast::<f32>());
        let refs = MapRefs {
            foreground: put64(&maps.foreground_probability())?,
            predicted: self.artifacts.put(&maps.predicted_mask())?,
            metrics: Metric::ALL.map(|m| put64(&maps.get(m).scalar)).try_map_all()?,
        };
        let event = Event::InferenceComplete { id: id.to_string(), samples, seed, dropout_p, maps: refs };
        self.commit(&[event])?;
        self.redecide()
    }

    pub fn set_config(&mut self, config: ThresholdConfig) -> Result<()> {
        config.validate()?;
        if config == self.state.config {
            return Ok(());
        }
        self.commit(&[Event::ConfigChanged { config }])?;
        self.redecide()
    }

    /// Append a decision event for every inferred case whose decision or
    /// score differs from what the active config implies.
    fn redecide(&mut self) -> Result<()> {
        let targets = self.state.target_decisions()?;
        let events: Vec<Event> = targets
            .into_iter()
            .filter(|(id, target)| self.state.cases[id].decision.as_ref() != Some(target))
            .map(|(id, t)| Event::Decision {
                id,
                decision: t.decision,
                raw_score: t.raw_score,
                normalized_score: t.normalized_score,
            })
            .collect();
        if events.is_empty() {
            return Ok(());
        }
        self.commit(&events)
    }

    /// Record a reviewer verdict on a referred case. An identical repeat on
    /// a reviewed case is a no-op; any other review of a non-referred case
    /// is a conflict.
    pub fn review(
        &mut self,
        id: &str,
        reviewer: &str,
        kind: VerdictKind,
        mask: Option<Tensor<f32>>,
    ) -> Result<ReviewOutcome> {
        let case = self.case(id)?;
        let (h, w) = (case.height(), case.width());
        match (kind, &mask) {
            (VerdictKind::Override, None) => return Err(TriageError::data("override needs a corrected mask")),
            (VerdictKind::Accept, Some(_)) => return Err(TriageError::data("accept takes no corrected mask")),
            _ => {}
        }
        if let Some(m) = &mask {
            if m.shape() != [h, w] {
                return Err(TriageError::data(format!("corrected mask is {:?}, case is {h}x{w}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(TriageError::data("corrected mask must be binary"));
            }
        }
        let hash = verdict_hash(reviewer, kind, mask.as_ref());
        match case.status {
            Status::Referred => {}
            Status::Reviewed => {
                let v = case.verdict.as_ref().expect("reviewed cases carry a verdict");
                if v.reviewer == reviewer && v.verdict_hash == hash {
                    return Ok(ReviewOutcome::Unchanged);
                }
                return Err(TriageError::Conflict(format!("case {id:?} was already reviewed by {:?}", v.reviewer)));
            }
            other => return Err(TriageError::Conflict(format!("case {id:?} is {other:?}, not referred"))),
        }
        if reviewer.is_empty() {
            return Err(TriageError::data("reviewer must be named"));
        }
        let event = Event::Verdict {
            id: id.to_string(),
            reviewer: reviewer.to_string(),
            kind,
            corrected_mask: mask.as_ref().map(|m| self.artifacts.put(m)).transpose()?,
            verdict_hash: hash,
        };
        self.commit(&[event])?;
        Ok(ReviewOutcome::Recorded)
    }
}

pub fn verdict_hash(reviewer: &str, kind: VerdictKind, mask: Option<&Tensor<f32>>) -> String {
    let mut h = Sha256::new();
    h.update(reviewer.as_bytes());
    h.update([0]);
    h.update(match kind {
        VerdictKind::Accept => b"accept".as_slice(),
        VerdictKind::Override => b"override".as_slice(),
    });
    if let Some(m) = mask {
        h.update([0]);
        h.update(tns::encode(m));
    }
    hex::encode(h.finalize())
}

fn replay(log_path: &Path, artifacts: &Artifacts, initial: ThresholdConfig) -> Result<StoreState> {
    let mut state = StoreState::new(initial);
    let file = match File::open(log_path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(e) => return Err(TriageError::io(log_path, e)),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TriageError::io(log_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(&line)
            .map_err(|e| TriageError::data(format!("{} line {}: {e}", log_path.display(), n + 1)))?;
        state.apply(&event, artifacts)?;
    }
    Ok(state)
}

/// `[Result<T>; N] -> Result<[T; N]>`.
trait TryMapAll<T, const N: usize> {
    fn try_map_all(self) -> Result<[T; N]>;
}

impl<T, const N: usize> TryMapAll<T, N> for [Result<T>; N] {
    fn try_map_all(self) -> Result<[T; N]> {
        let items: Vec<T> = self.into_iter().collect::<Result<_>>()?;
        Ok(items.try_into().unwrap_or_else(|_| unreachable!("length preserved")))
    }
}
