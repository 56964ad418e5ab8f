//! Refer/retain decisions at an uncertainty threshold and the performance
//! of what the model keeps.
//!
//! A case is referred when its normalised score is strictly greater than
//! `tau`. Scores are normalised either by the metric's analytic maximum or
//! by the largest raw score in the cohort. Pixel metrics pool counts across
//! all retained cases.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::uncertainty::{reduce_field, Metric, Reduction, UncertaintyMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Normalization {
    TheoreticalMax,
    CohortMax,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::TheoreticalMax => "theoretical-max",
            Normalization::CohortMax => "cohort-max",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theoretical-max" | "theoretical" => Ok(Normalization::TheoreticalMax),
            "cohort-max" | "cohort" => Ok(Normalization::CohortMax),
            other => Err(Error::invalid("normalization", format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ThresholdConfig {
    pub metric: Metric,
    pub reduction: Reduction,
    pub tau: f64,
    pub normalization: Normalization,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            metric: Metric::Epistemic,
            reduction: Reduction::Mean,
            tau: 0.6,
            normalization: Normalization::TheoreticalMax,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        validate_tau(self.tau)?;
        if let Reduction::Quantile(q) = self.reduction {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid("reduction", format!("quantile {q} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn with_tau(self, tau: f64) -> Self {
        ThresholdConfig { tau, ..self }
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("tau", format!("{tau} not in [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Decision {
    Retained,
    Referred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CaseStatus {
    Retained,
    Referred,
    Reviewed,
}

impl From<Decision> for CaseStatus {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Retained => CaseStatus::Retained,
            Decision::Referred => CaseStatus::Referred,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum VerdictKind {
    Accept,
    Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewVerdict {
    pub reviewer: String,
    pub kind: VerdictKind,
    /// Present exactly when `kind` is `Override`.
    pub corrected_mask: Option<Tensor<f32>>,
}

/// Per-metric scalar fields of one case, in [`Metric::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFields(pub [Tensor<f64>; 5]);

impl MetricFields {
    pub fn from_maps(maps: &UncertaintyMaps) -> Self {
        MetricFields(Metric::ALL.map(|m| maps.get(m).scalar.clone()))
    }

    pub fn get(&self, metric: Metric) -> &Tensor<f64> {
        &self.0[metric.index()]
    }
}

/// One case flowing through inference, decision and review.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub image: Option<Tensor<f32>>,
    /// Predictive-mean foreground probability, `[H, W]`.
    pub foreground: Tensor<f64>,
    /// `argmax p̄`, `[H, W]` in {0, 1}.
    pub predicted: Tensor<f32>,
    pub ground_truth: Option<Tensor<f32>>,
    pub fields: MetricFields,
    pub status: Option<CaseStatus>,
    pub verdict: Option<ReviewVerdict>,
}

impl CaseRecord {
    pub fn from_maps(id: impl Into<String>, maps: &UncertaintyMaps, ground_truth: Option<Tensor<f32>>) -> Result<Self> {
        let predicted = maps.predicted_mask();
        if let Some(gt) = &ground_truth {
            if gt.shape() != predicted.shape() {
                return Err(Error::shape(
                    "CaseRecord",
                    format!("ground truth {:?} vs prediction {:?}", gt.shape(), predicted.shape()),
                ));
            }
        }
        Ok(CaseRecord {
            id: id.into(),
            image: None,
            foreground: maps.foreground_probability(),
            predicted,
            ground_truth,
            fields: MetricFields::from_maps(maps),
            status: None,
            verdict: None,
        })
    }

    pub fn raw_score(&self, metric: Metric, reduction: Reduction) -> Result<f64> {
        reduce_field(self.fields.get(metric).data(), reduction).map(|v| v.max(0.0))
    }
}

/// Cohort statistics needed by [`Normalization::CohortMax`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortContext {
    pub max_raw: f64,
}

impl CohortContext {
    pub fn from_cases(cases: &[CaseRecord], metric: Metric, reduction: Reduction) -> Result<Self> {
        let mut max_raw: f64 = 0.0;
        for c in cases {
            max_raw = max_raw.max(c.raw_score(metric, reduction)?);
        }
        Ok(CohortContext { max_raw })
    }
}

/// Map a raw case score into `[0, 1]`.
pub fn normalize_score(
    raw: f64,
    metric: Metric,
    classes: usize,
    context: Option<&CohortContext>,
    mode: Normalization,
) -> Result<f64> {
    if !(raw >= 0.0 && raw.is_finite()) {
        return Err(Error::invalid("raw score", format!("{raw} must be finite and >= 0")));
    }
    let max = match mode {
        Normalization::TheoreticalMax => metric.theoretical_max(classes),
        Normalization::CohortMax => {
            context.ok_or_else(|| Error::invalid("cohort context", "required for cohort-max normalization"))?.max_raw
        }
    };
    if max <= 0.0 {
        return Ok(0.0);
    }
    Ok((raw / max).min(1.0))
}

/// `Referred` iff `normalized > tau`.
pub fn decide(normalized: f64, tau: f64) -> Decision {
    if normalized > tau {
        Decision::Referred
    } else {
        Decision::Retained
    }
}

pub fn normalized_case_score(
    case: &CaseRecord,
    config: &ThresholdConfig,
    context: Option<&CohortContext>,
) -> Result<f64> {
    let raw = case.raw_score(config.metric, config.reduction)?;
    normalize_score(raw, config.metric, 2, context, config.normalization)
}

pub fn decide_case(case: &CaseRecord, config: &ThresholdConfig, context: Option<&CohortContext>) -> Result<Decision> {
    config.validate()?;
    Ok(decide(normalized_case_score(case, config, context)?, config.tau))
}

/// Normalised scores of a whole cohort, with the context built from the
/// cohort itself.
pub fn normalized_scores(cases: &[CaseRecord], config: &ThresholdConfig) -> Result<Vec<f64>> {
    let ctx = CohortContext::from_cases(cases, config.metric, config.reduction)?;
    cases.iter().map(|c| normalized_case_score(c, config, Some(&ctx))).collect()
}

pub fn decide_all(cases: &[CaseRecord], config: &ThresholdConfig) -> Result<Vec<Decision>> {
    config.validate()?;
    Ok(normalized_scores(cases, config)?.into_iter().map(|s| decide(s, config.tau)).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add_masks(&mut self, predicted: &[f32], truth: &[f32]) {
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p > 0.5, t > 0.5) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Pooled accuracy, precision and recall over cases with ground truth.
/// Errors when no case carries ground truth.
pub fn pixel_metrics<'a>(cases: impl IntoIterator<Item = &'a CaseRecord>) -> Result<PixelMetrics> {
    let mut counts = ConfusionCounts::default();
    let mut any = false;
    for c in cases {
        if let Some(gt) = &c.ground_truth {
            counts.add_masks(c.predicted.data(), gt.data());
            any = true;
        }
    }
    if !any {
        return Err(Error::Empty { what: "retained cases with ground truth" });
    }
    Ok(PixelMetrics { counts, accuracy: counts.accuracy(), precision: counts.precision(), recall: counts.recall() })
}

/// Trapezoidal area under the ROC curve. Tied scores contribute one
/// diagonal segment, which makes the result equal to
/// `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the area, in pair counts, so ties stay exact.
    let mut twice_area: u128 = 0;
    let mut tp_seen: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut tp, mut fp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        twice_area += u128::from(fp) * u128::from(2 * tp_seen + tp);
        tp_seen += tp;
    }
    Ok(twice_area as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Retained-cohort performance at one threshold.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CohortReport {
    pub tau: f64,
    pub metric: Metric,
    pub reduction: Reduction,
    pub normalization: Normalization,
    pub retained: usize,
    pub referred: usize,
    pub referral_rate: f64,
    /// `None` when undefined (zero denominator, or everything referred).
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// `None` when the retained pixels hold a single class.
    pub auroc: Option<f64>,
    pub all_referred: bool,
}

fn require_ground_truth(cases: &[CaseRecord]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Empty { what: "cohort" });
    }
    match cases.iter().find(|c| c.ground_truth.is_none()) {
        Some(c) => Err(Error::MissingGroundTruth { case: c.id.clone() }),
        None => Ok(()),
    }
}

fn report_for(cases: &[CaseRecord], config: &ThresholdConfig, decisions: &[Decision]) -> Result<CohortReport> {
    let retained: Vec<&CaseRecord> =
        cases.iter().zip(decisions).filter(|(_, &d)| d == Decision::Retained).map(|(c, _)| c).collect();
    let referred = cases.len() - retained.len();
    let mut report = CohortReport {
        tau: config.tau,
        metric: config.metric,
        reduction: config.reduction,
        normalization: config.normalization,
        retained: retained.len(),
        referred,
        referral_rate: referred as f64 / cases.len() as f64,
        accuracy: None,
        precision: None,
        recall: None,
        auroc: None,
        all_referred: retained.is_empty(),
    };
    if retained.is_empty() {
        return Ok(report);
    }
    let pm = pixel_metrics(retained.iter().copied())?;
    report.accuracy = pm.accuracy;
    report.precision = pm.precision;
    report.recall = pm.recall;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for c in &retained {
        let gt = c.ground_truth.as_ref().expect("checked");
        scores.extend_from_slice(c.foreground.data());
        labels.extend(gt.data().iter().map(|&v| v > 0.5));
    }
    report.auroc = match auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Report for a single configuration; every case needs ground truth.
pub fn evaluate_cohort(cases: &[CaseRecord], config: &ThresholdConfig) -> Result<CohortReport> {
    require_ground_truth(cases)?;
    let decisions = decide_all(cases, config)?;
    report_for(cases, config, &decisions)
}

/// One [`CohortReport`] per `tau` in ascending order.
pub fn sweep_threshold(cases: &[CaseRecord], template: &ThresholdConfig, grid: &[f64]) -> Result<Vec<CohortReport>> {
    require_ground_truth(cases)?;
    if grid.is_empty() {
        return Err(Error::Empty { what: "tau grid" });
    }
    let mut taus = grid.to_vec();
    for &t in &taus {
        validate_tau(t)?;
    }
    taus.sort_unstable_by(f64::total_cmp);
    let scores = normalized_scores(cases, template)?;
    taus.iter()
        .map(|&tau| {
            let config = template.with_tau(tau);
            let decisions: Vec<Decision> = scores.iter().map(|&s| decide(s, tau)).collect();
            report_for(cases, &config, &decisions)
        })
        .collect()
}

/// `start, start + step, ..., stop` with values snapped to 1e-9 so that
/// `0.1:0.9:0.1` yields exactly the decimal literals.
pub fn tau_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && stop >= start) {
        return Err(Error::invalid("tau grid", format!("{start}:{stop}:{step}")));
    }
    let n = libm::floor((stop - start) / step + 1e-9) as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| libm::round((start + i as f64 * step) * 1e9) / 1e9).collect();
    for &t in &grid {
        validate_tau(t)?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    #[test]
    fn normalisation_examples() {
        let n = |raw, m, mode| normalize_score(raw, m, 2, Some(&CohortContext { max_raw: 0.2 }), mode).unwrap();
        assert_eq!(n(LN_2, Metric::Entropy, Normalization::TheoreticalMax), 1.0);
        assert_eq!(n(0.0, Metric::Entropy, Normalization::TheoreticalMax), 0.0);
        assert_eq!(n(0.0, Metric::Entropy, Normalization::CohortMax), 0.0);
        assert!((n(0.1, Metric::Epistemic, Normalization::TheoreticalMax) - 0.4).abs() < 1e-15);
        assert_eq!(n(0.1, Metric::Epistemic, Normalization::CohortMax), 0.5);
        let zero = CohortContext { max_raw: 0.0 };
        assert_eq!(normalize_score(0.0, Metric::Combined, 2, Some(&zero), Normalization::CohortMax).unwrap(), 0.0);
        assert!(normalize_score(-0.1, Metric::Combined, 2, None, Normalization::TheoreticalMax).is_err());
        assert!(normalize_score(0.1, Metric::Combined, 2, None, Normalization::CohortMax).is_err());
    }

    #[test]
    fn strict_referral_rule() {
        assert_eq!(decide(0.61, 0.6), Decision::Referred);
        assert_eq!(decide(0.6, 0.6), Decision::Retained);
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(decide(s, 1.0), Decision::Retained);
        }
    }

    #[test]
    fn confusion_arithmetic() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 };
        assert!((c.accuracy().unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(c.precision(), Some(0.75));
        assert!((c.recall().unwrap() - 0.6).abs() < 1e-15);
        let none = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 };
        assert_eq!(none.precision(), None);
        assert_eq!(none.recall(), None);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass));
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn grid_literals() {
        let g = tau_grid(0.1, 0.9, 0.1).unwrap();
        assert_eq!(g, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert!(tau_grid(0.1, 1.5, 0.1).is_err());
        assert!(tau_grid(0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ThresholdConfig::default().validate().is_ok());
        assert!(ThresholdConfig::default().with_tau(1.2).validate().is_err());
        assert_eq!("cohort-max".parse::<Normalization>().unwrap(), Normalization::CohortMax);
    }
}
