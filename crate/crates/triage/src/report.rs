//! CSV layouts and the store-level report queries shared by the CLI and
//! the service.

use std::fmt::Write as _;

use mcunet_core::referral::{evaluate_cohort, sweep_threshold, CohortReport, ThresholdConfig};
use mcunet_core::uncertainty::{Metric, MetricStat, SweepRecord};

use crate::error::{Result, TriageError};
use crate::store::StoreState;

pub const REPORT_HEADER: &str = "tau,metric,retained,referred,referral_rate,accuracy,precision,recall,auroc";
pub const SWEEP_HEADER: &str = "N,metric,mean,std,error,runtime_s";
pub const SPREAD_HEADER: &str = "N,metric,seeds,mean,std";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(rows: &[CohortReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.tau,
            r.metric,
            r.retained,
            r.referred,
            r.referral_rate,
            opt(r.accuracy),
            opt(r.precision),
            opt(r.recall),
            opt(r.auroc)
        )
        .expect("string write");
    }
    out
}

/// Long format: one row per sample count and metric. `metrics` filters and
/// orders the metric column.
pub fn sweep_csv(records: &[SweepRecord], metrics: &[Metric]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in records {
        for &m in metrics {
            let s = r.stat(m);
            writeln!(out, "{},{},{},{},{},{}", r.samples, m, s.mean, s.std, opt(r.error), r.runtime_s)
                .expect("string write");
        }
    }
    out
}

/// Across-seed spread of case-level estimates, one block per sample count.
pub fn spread_csv(rows: &[(usize, Vec<MetricStat>)], seeds: usize, metrics: &[Metric]) -> String {
    let mut out = String::from(SPREAD_HEADER);
    out.push('\n');
    for (n, stats) in rows {
        for &m in metrics {
            let s = &stats[m.index()];
            writeln!(out, "{n},{m},{seeds},{},{}", s.mean, s.std).expect("string write");
        }
    }
    out
}

fn cohort_error(e: mcunet_core::Error) -> TriageError {
    match e {
        mcunet_core::Error::Empty { what: "cohort" } => {
            TriageError::Conflict("no inferred cases with ground truth to evaluate".into())
        }
        mcunet_core::Error::MissingGroundTruth { case } => {
            TriageError::Conflict(format!("case {case} has no ground truth"))
        }
        other => other.into(),
    }
}

/// Hypothetical decisions under `config` over every inferred case that
/// carries ground truth. Reads state only.
pub fn what_if(state: &StoreState, config: &ThresholdConfig) -> Result<CohortReport> {
    config.validate().map_err(|e| TriageError::config("tau", e.to_string()))?;
    evaluate_cohort(&state.evaluable_records(), config).map_err(cohort_error)
}

/// One report per `tau` in `grid` over the same cohort as [`what_if`].
pub fn threshold_report(state: &StoreState, template: &ThresholdConfig, grid: &[f64]) -> Result<Vec<CohortReport>> {
    sweep_threshold(&state.evaluable_records(), template, grid).map_err(|e| match e {
        mcunet_core::Error::InvalidArgument { name, detail } => TriageError::config(name, detail),
        other => cohort_error(other),
    })
}
