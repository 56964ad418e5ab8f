//! Stage glue shared by the CLI and the service: patch sets, training a
//! checkpoint, MC inference and cohort evaluation.

use mcunet_core::data::{extract_patches, ImageRecord, PatchSet};
use mcunet_core::referral::MetricFields;
use mcunet_core::rng::{derive_seed, tags};
use mcunet_core::uncertainty::{reduce_field, Metric, Reduction, UncertaintyMaps};
use mcunet_core::unet::{init_he, mc_sample, train_with_progress, Architecture, ModelParams};
use mcunet_core::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::store::CaseStore;

/// Training patches: stream `(seed, PATCH, i)`.
pub fn training_patches(records: &[ImageRecord], cfg: &RunConfig) -> Result<PatchSet> {
    Ok(extract_patches(records, cfg.train_patches, cfg.patch_size, cfg.seed)?)
}

/// Held-out patches, drawn under a seed derived from the run seed so they
/// never share streams with the training draw.
pub fn evaluation_patches(records: &[ImageRecord], cfg: &RunConfig) -> Result<PatchSet> {
    Ok(extract_patches(records, cfg.test_patches, cfg.patch_size, derive_seed(cfg.seed, tags::PATCH, 1))?)
}

pub fn initial_params(seed: u64) -> Result<ModelParams> {
    Ok(init_he(Architecture::default(), &mut RngStream::derive(seed, tags::INIT, 0))?)
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    pub patches: usize,
}

pub fn train_model(records: &[ImageRecord], cfg: &RunConfig, on_epoch: impl FnMut(usize, f64)) -> Result<TrainRun> {
    let set = training_patches(records, cfg)?;
    let params = initial_params(cfg.seed)?;
    let out = train_with_progress(params, &set.examples(), &cfg.train_config(), on_epoch)?;
    Ok(TrainRun {
        checkpoint: Checkpoint { params: out.params, dropout_p: cfg.dropout_p, seed: cfg.seed, epoch: cfg.epochs },
        losses: out.losses,
        patches: set.len(),
    })
}

/// `samples` MC-dropout passes over a `[1, H, W]` image and the maps
/// derived from them.
pub fn infer(
    params: &ModelParams,
    image: &Tensor<f32>,
    samples: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<UncertaintyMaps> {
    let stack = mc_sample(params, image, samples, dropout_p, seed)?;
    Ok(UncertaintyMaps::compute(&stack)?)
}

/// Raw (unnormalised) case scores for every metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub aleatoric: f64,
    pub epistemic: f64,
    pub entropy: f64,
    pub mutual_information: f64,
    pub combined: f64,
}

impl CaseScores {
    pub fn compute(maps: &UncertaintyMaps, reduction: Reduction) -> Result<Self> {
        Self::from_fields(&MetricFields::from_maps(maps), reduction)
    }

    pub fn from_fields(fields: &MetricFields, reduction: Reduction) -> Result<Self> {
        let s = |m: Metric| reduce_field(fields.get(m).data(), reduction).map(|v| v.max(0.0));
        Ok(CaseScores {
            aleatoric: s(Metric::Aleatoric)?,
            epistemic: s(Metric::Epistemic)?,
            entropy: s(Metric::Entropy)?,
            mutual_information: s(Metric::MutualInformation)?,
            combined: s(Metric::Combined)?,
        })
    }
}

/// Id of evaluation patch `i` inside a store.
pub fn patch_id(i: usize) -> String {
    format!("patch-{i:04}")
}

/// Per-case MC seed used by `evaluate`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, tags::MC_SAMPLE, index as u64)
}

/// Ingest every patch (with its mask as ground truth) and run inference on
/// it. Cases already present are left alone, so an interrupted run resumes.
pub fn evaluate_into_store(
    store: &mut CaseStore,
    params: &ModelParams,
    patches: &PatchSet,
    cfg: &RunConfig,
    mut on_case: impl FnMut(usize),
) -> Result<()> {
    for (i, p) in patches.patches.iter().enumerate() {
        let id = patch_id(i);
        if store.state().cases.get(&id).is_some_and(|c| c.inference.is_some()) {
            continue;
        }
        if !store.state().cases.contains_key(&id) {
            store.ingest(Some(id.clone()), p.image.clone(), Some(p.mask.clone()))?;
        }
        let maps = infer(params, &p.image, cfg.samples, cfg.dropout_p, case_seed(cfg.seed, i))?;
        store.record_inference(&id, cfg.samples, case_seed(cfg.seed, i), cfg.dropout_p, &maps)?;
        on_case(i);
    }
    Ok(())
}
