//! Per-pixel uncertainty from an MC-dropout [`SampleStack`].
//!
//! With `p_t` the softmax vector of pass `t` and `p̄` their mean:
//!
//! * aleatoric  `(1/T) Σ_t diag(p_t) - p_t p_tᵀ`
//! * epistemic  `(1/T) Σ_t (p_t - p̄)(p_t - p̄)ᵀ` (population covariance)
//! * entropy    `H[p̄]`, natural log
//! * mutual information `H[p̄] - (1/T) Σ_t H[p_t]`
//! * combined   aleatoric + epistemic, which equals `diag(p̄) - p̄ p̄ᵀ`
//!
//! The scalar field of a matrix-valued metric is its foreground (class 1)
//! diagonal entry. All accumulation is in `f64`; means are taken as
//! `x_0 + Σ (x_t - x_0) / T` so identical samples give an exactly zero
//! spread.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::entropy_unchecked;
use crate::rng::{derive_seed, tags};
use crate::tensor::Tensor;
use crate::unet::{mc_sample, ModelParams, SampleStack};

/// Class index treated as the positive (vessel) class.
pub const FOREGROUND: usize = 1;

/// Slack allowed below zero for mutual information before it is reported
/// as a bug instead of rounded to zero.
pub const MI_NEGATIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Metric {
    Aleatoric,
    Epistemic,
    Entropy,
    MutualInformation,
    Combined,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::Aleatoric, Metric::Epistemic, Metric::Entropy, Metric::MutualInformation, Metric::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Aleatoric => "aleatoric",
            Metric::Epistemic => "epistemic",
            Metric::Entropy => "entropy",
            Metric::MutualInformation => "mutual-information",
            Metric::Combined => "combined",
        }
    }

    /// Largest value the scalar field can take with `classes` classes:
    /// `ln K` for the entropy-type metrics, `1/4` for the foreground
    /// variance-type entries (`p (1 - p) <= 1/4`).
    pub fn theoretical_max(self, classes: usize) -> f64 {
        match self {
            Metric::Entropy | Metric::MutualInformation => libm::log(classes as f64),
            Metric::Aleatoric | Metric::Epistemic | Metric::Combined => 0.25,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aleatoric" => Ok(Metric::Aleatoric),
            "epistemic" => Ok(Metric::Epistemic),
            "entropy" => Ok(Metric::Entropy),
            "mutual-information" | "mutual_information" | "mi" => Ok(Metric::MutualInformation),
            "combined" => Ok(Metric::Combined),
            other => Err(Error::invalid("metric", format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub metric: Metric,
    /// `[H, W]`, non-negative.
    pub scalar: Tensor<f64>,
    /// `[K, K, H, W]` for aleatoric, epistemic and combined.
    pub matrix: Option<Tensor<f64>>,
}

impl UncertaintyMap {
    /// Trace of the matrix field, the alternative scalar summary.
    pub fn trace_field(&self) -> Option<Tensor<f64>> {
        let m = self.matrix.as_ref()?;
        let (k, plane) = (m.dim(0), m.dim(2) * m.dim(3));
        let d = m.data();
        let trace = (0..plane).map(|p| (0..k).map(|c| d[(c * k + c) * plane + p]).sum()).collect();
        Tensor::new(self.scalar.shape().to_vec(), trace).ok()
    }
}

/// All five maps plus the predictive mean, computed in one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    /// `p̄`, `[K, H, W]`.
    pub mean: Tensor<f64>,
    pub aleatoric: UncertaintyMap,
    pub epistemic: UncertaintyMap,
    pub entropy: UncertaintyMap,
    pub mutual_information: UncertaintyMap,
    pub combined: UncertaintyMap,
}

impl UncertaintyMaps {
    pub fn compute(stack: &SampleStack) -> Result<Self> {
        compute_maps(stack)
    }

    pub fn get(&self, metric: Metric) -> &UncertaintyMap {
        match metric {
            Metric::Aleatoric => &self.aleatoric,
            Metric::Epistemic => &self.epistemic,
            Metric::Entropy => &self.entropy,
            Metric::MutualInformation => &self.mutual_information,
            Metric::Combined => &self.combined,
        }
    }

    /// Foreground channel of the predictive mean, `[H, W]`.
    pub fn foreground_probability(&self) -> Tensor<f64> {
        let (h, w) = (self.mean.dim(1), self.mean.dim(2));
        let plane = h * w;
        let data = self.mean.data()[FOREGROUND * plane..(FOREGROUND + 1) * plane].to_vec();
        Tensor::new(vec![h, w], data).expect("slice of a finite tensor")
    }

    /// `argmax_c p̄_c` per pixel as `[H, W]` class indices (ties to the
    /// lower class).
    pub fn predicted_mask(&self) -> Tensor<f32> {
        let (k, h, w) = (self.mean.dim(0), self.mean.dim(1), self.mean.dim(2));
        let plane = h * w;
        let d = self.mean.data();
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as f32
            })
            .collect();
        Tensor::new(vec![h, w], data).expect("finite")
    }
}

fn compute_maps(stack: &SampleStack) -> Result<UncertaintyMaps> {
    let (t, k, h, w) = (stack.samples(), stack.classes(), stack.height(), stack.width());
    if t == 0 {
        return Err(Error::Empty { what: "sample stack" });
    }
    let plane = h * w;
    let inv_t = 1.0 / t as f64;
    let mut mean = vec![0.0f64; k * plane];
    let mut alea = vec![0.0f64; k * k * plane];
    let mut epi = vec![0.0f64; k * k * plane];
    let mut ent = vec![0.0f64; plane];
    let mut mi = vec![0.0f64; plane];

    let mut q = vec![0.0f64; t * k];
    let mut r = vec![0.0f64; t * k];
    let mut m = vec![0.0f64; k];
    let mut rbar = vec![0.0f64; k];
    for p in 0..plane {
        for s in 0..t {
            let mut total = 0.0;
            for c in 0..k {
                let v = f64::from(stack.prob(s, c, p));
                q[s * k + c] = v;
                total += v;
            }
            for c in 0..k {
                r[s * k + c] = q[s * k + c] / total;
            }
        }
        for c in 0..k {
            m[c] = shifted_mean((0..t).map(|s| q[s * k + c]), inv_t);
            rbar[c] = shifted_mean((0..t).map(|s| r[s * k + c]), inv_t).max(0.0);
            mean[c * plane + p] = m[c];
        }
        for i in 0..k {
            for j in 0..k {
                let mut a = 0.0;
                let mut e = 0.0;
                for s in 0..t {
                    let (qi, qj) = (q[s * k + i], q[s * k + j]);
                    a += if i == j { qi - qi * qi } else { -qi * qj };
                    e += (qi - m[i]) * (qj - m[j]);
                }
                alea[(i * k + j) * plane + p] = a * inv_t;
                epi[(i * k + j) * plane + p] = e * inv_t;
            }
        }
        let h_mean = entropy_unchecked(&rbar);
        let expected = shifted_mean((0..t).map(|s| entropy_unchecked(&r[s * k..(s + 1) * k])), inv_t);
        let info = h_mean - expected;
        if info < -MI_NEGATIVE_SLACK {
            return Err(Error::NegativeMutualInformation { value: info });
        }
        ent[p] = h_mean;
        mi[p] = info.max(0.0);
    }

    let fg = (FOREGROUND * k + FOREGROUND) * plane;
    let diag_field = |m: &[f64]| m[fg..fg + plane].to_vec();
    let comb: Vec<f64> = alea.iter().zip(&epi).map(|(a, e)| a + e).collect();
    let shape2 = vec![h, w];
    let shape4 = vec![k, k, h, w];
    let map = |metric, scalar: Vec<f64>, matrix: Option<Vec<f64>>| -> Result<UncertaintyMap> {
        Ok(UncertaintyMap {
            metric,
            scalar: Tensor::new(shape2.clone(), scalar)?,
            matrix: matrix.map(|d| Tensor::new(shape4.clone(), d)).transpose()?,
        })
    };
    Ok(UncertaintyMaps {
        mean: Tensor::new(vec![k, h, w], mean)?,
        aleatoric: map(Metric::Aleatoric, diag_field(&alea), Some(alea.clone()))?,
        epistemic: map(Metric::Epistemic, diag_field(&epi), Some(epi.clone()))?,
        combined: map(Metric::Combined, diag_field(&comb), Some(comb))?,
        entropy: map(Metric::Entropy, ent, None)?,
        mutual_information: map(Metric::MutualInformation, mi, None)?,
    })
}

/// `x_0 + Σ (x_t - x_0) / T`; returns `x_0` bit-for-bit when all inputs
/// are equal.
fn shifted_mean(mut xs: impl Iterator<Item = f64>, inv_t: f64) -> f64 {
    let Some(first) = xs.next() else { return 0.0 };
    let spread: f64 = xs.map(|x| x - first).sum();
    first + spread * inv_t
}

pub fn aleatoric_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    compute_maps(stack).map(|m| m.aleatoric)
}

pub fn epistemic_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    compute_maps(stack).map(|m| m.epistemic)
}

pub fn entropy_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    compute_maps(stack).map(|m| m.entropy)
}

pub fn mutual_information_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    compute_maps(stack).map(|m| m.mutual_information)
}

pub fn combined_map(stack: &SampleStack) -> Result<UncertaintyMap> {
    compute_maps(stack).map(|m| m.combined)
}

/// How a per-pixel field becomes one number per case.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "String", into = "String"))]
pub enum Reduction {
    Mean,
    Max,
    /// Linear interpolation between order statistics at `q * (n - 1)`.
    Quantile(f64),
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reduction::Mean => f.write_str("mean"),
            Reduction::Max => f.write_str("max"),
            Reduction::Quantile(q) => write!(f, "quantile({q})"),
        }
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("reduction", format!("{s:?} is not mean, max or quantile(q)"));
        match s {
            "mean" => Ok(Reduction::Mean),
            "max" => Ok(Reduction::Max),
            _ => {
                let inner = s
                    .strip_prefix("quantile(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("quantile:"))
                    .ok_or_else(bad)?;
                let q: f64 = inner.trim().parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::invalid("reduction", format!("quantile {q} outside [0, 1]")));
                }
                Ok(Reduction::Quantile(q))
            }
        }
    }
}

impl TryFrom<String> for Reduction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Reduction> for String {
    fn from(r: Reduction) -> String {
        format!("{r}")
    }
}

pub fn reduce_field(values: &[f64], reduction: Reduction) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty { what: "uncertainty field" });
    }
    Ok(match reduction {
        Reduction::Mean => shifted_mean(values.iter().copied(), 1.0 / values.len() as f64),
        Reduction::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Reduction::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid("reduction", format!("quantile {q} outside [0, 1]")));
            }
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            let pos = q * (sorted.len() - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    })
}

/// Case-level score of a map.
pub fn case_score(map: &UncertaintyMap, reduction: Reduction) -> Result<f64> {
    reduce_field(map.scalar.data(), reduction).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricStat {
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
}

/// One row of the sample-count experiment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRecord {
    pub samples: usize,
    /// Mean and population std of each metric's case score over the
    /// evaluation set, in [`Metric::ALL`] order.
    pub metrics: Vec<MetricStat>,
    /// Pooled misclassification rate of `argmax p̄`; `None` without masks.
    pub error: Option<f64>,
    pub runtime_s: f64,
}

impl SweepRecord {
    pub fn stat(&self, metric: Metric) -> &MetricStat {
        &self.metrics[metric.index()]
    }
}

/// Source of wall-clock seconds for the sweep's runtime column.
pub trait Clock {
    fn seconds(&mut self) -> f64;
}

/// Reports zero elapsed time; for environments without a timer.
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub image: &'a Tensor<f32>,
    pub mask: Option<&'a Tensor<f32>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

fn case_scores(maps: &UncertaintyMaps, reduction: Reduction) -> Result<[f64; 5]> {
    let mut out = [0.0; 5];
    for metric in Metric::ALL {
        out[metric.index()] = case_score(maps.get(metric), reduction)?;
    }
    Ok(out)
}

/// For every `N` in `grid` (strictly ascending), run `N` MC passes per
/// evaluation case and summarise. Case `i` always uses seed
/// `derive_seed(seed, SWEEP, i)`, so stacks for different `N` share their
/// leading samples.
pub fn sample_count_sweep(
    params: &ModelParams<f32>,
    eval: &[EvalCase<'_>],
    grid: &[usize],
    dropout_p: f64,
    seed: u64,
    reduction: Reduction,
    clock: &mut dyn Clock,
) -> Result<Vec<SweepRecord>> {
    if eval.is_empty() {
        return Err(Error::Empty { what: "evaluation set" });
    }
    if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sample grid", format!("{grid:?} must be strictly ascending and >= 1")));
    }
    let mut records = Vec::with_capacity(grid.len());
    for &n in grid {
        let start = clock.seconds();
        let mut per_metric: [Vec<f64>; 5] = Default::default();
        let (mut wrong, mut counted) = (0usize, 0usize);
        for (i, case) in eval.iter().enumerate() {
            let stack = mc_sample(params, case.image, n, dropout_p, derive_seed(seed, tags::SWEEP, i as u64))?;
            let maps = UncertaintyMaps::compute(&stack)?;
            for (slot, score) in per_metric.iter_mut().zip(case_scores(&maps, reduction)?) {
                slot.push(score);
            }
            if let Some(mask) = case.mask {
                let pred = maps.predicted_mask();
                if mask.shape() != pred.shape() {
                    return Err(Error::shape("sample_count_sweep", "mask does not match image"));
                }
                wrong += pred.data().iter().zip(mask.data()).filter(|(a, b)| a != b).count();
                counted += mask.len();
            }
        }
        let runtime_s = clock.seconds() - start;
        let metrics = Metric::ALL
            .iter()
            .map(|&metric| {
                let (mean, std) = mean_std(&per_metric[metric.index()]);
                MetricStat { metric, mean, std }
            })
            .collect();
        records.push(SweepRecord {
            samples: n,
            metrics,
            error: (counted > 0).then(|| wrong as f64 / counted as f64),
            runtime_s,
        });
    }
    Ok(records)
}

/// Spread of the `N`-sample case-score estimator: mean and population std
/// of each metric's score over one MC run per seed.
pub fn estimator_spread(
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    samples: usize,
    dropout_p: f64,
    seeds: &[u64],
    reduction: Reduction,
) -> Result<Vec<MetricStat>> {
    if seeds.is_empty() {
        return Err(Error::Empty { what: "seed list" });
    }
    let mut per_metric: [Vec<f64>; 5] = Default::default();
    for &seed in seeds {
        let maps = UncertaintyMaps::compute(&mc_sample(params, image, samples, dropout_p, seed)?)?;
        for (slot, score) in per_metric.iter_mut().zip(case_scores(&maps, reduction)?) {
            slot.push(score);
        }
    }
    Ok(Metric::ALL
        .iter()
        .map(|&metric| {
            let (mean, std) = mean_std(&per_metric[metric.index()]);
            MetricStat { metric, mean, std }
        })
        .collect())
}
