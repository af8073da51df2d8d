//! Two-stage anomaly detector.
//!
//! The pre-filter keeps only samples whose prediction is trustworthy: enough
//! neighbors contribute (attention entropy) and the same coefficients,
//! applied backwards over the context window, explain the target's recent
//! history (historical error). Surviving samples are scored hour by hour as
//! `|x̂ - x| / σ̂` and hours scoring above `delta` in any covering window are
//! anomalous. Consecutive anomalous hours form periods, which are then given
//! a heuristic class.

mod classify;
mod export;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph_data::{GraphSample, Hour};
use crate::predictor::{predict, weighted_stats, PredictionOutput, PredictorParams};
use crate::trainer::SampleSource;

pub use classify::{classify_period, Classifier};
pub use export::{
    read_report, write_calibration, write_report, write_verdicts, CalibrationFiles, Histogram, CALIBRATION_PERCENTILES,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Minimum attention entropy.
    pub lambda: f64,
    /// Percentile of the historical error compared against `gamma`.
    pub percentile: f64,
    pub gamma: f64,
    /// Score above which an hour is anomalous.
    pub delta: f64,
    /// Periods must last strictly longer than this to be reported as long.
    pub min_duration_hours: usize,
    /// Divide the entropy by `ln k` so that it lies in `[0, 1]`.
    pub entropy_normalized: bool,
    pub sigma_floor: f64,
    /// Utilization (percent) below which a cell counts as inactive.
    pub inactive_floor: f64,
    /// Utilization (percent) above which a cell counts as saturated.
    pub saturation_ceiling: f64,
    pub z_threshold: f64,
    pub classify_lookback_hours: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            percentile: 90.0,
            gamma: 2.0,
            delta: 5.0,
            min_duration_hours: 6,
            entropy_normalized: true,
            sigma_floor: 1e-4,
            inactive_floor: 1.0,
            saturation_ceiling: 95.0,
            z_threshold: 3.0,
            classify_lookback_hours: 168,
        }
    }
}

pub const DETECTOR_KEYS: [&str; 11] = [
    "lambda",
    "percentile",
    "gamma",
    "delta",
    "min_duration_hours",
    "entropy_normalized",
    "sigma_floor",
    "inactive_floor",
    "saturation_ceiling",
    "z_threshold",
    "classify_lookback_hours",
];

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entropy_normalized && !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda must lie in [0, 1] for normalized entropy, got {}",
                self.lambda
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::invalid(format!(
                "percentile must lie in (0, 100), got {}",
                self.percentile
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("sigma_floor", self.sigma_floor),
            ("z_threshold", self.z_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.inactive_floor < self.saturation_ceiling) {
            return Err(Error::invalid("inactive_floor must be below saturation_ceiling"));
        }
        if self.classify_lookback_hours == 0 {
            return Err(Error::invalid("classify_lookback_hours must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig, base: &DetectorConfig) -> Result<Self> {
        let cfg = Self {
            lambda: kv.get("lambda", base.lambda)?,
            percentile: kv.get("percentile", base.percentile)?,
            gamma: kv.get("gamma", base.gamma)?,
            delta: kv.get("delta", base.delta)?,
            min_duration_hours: kv.get("min_duration_hours", base.min_duration_hours)?,
            entropy_normalized: kv.get("entropy_normalized", base.entropy_normalized)?,
            sigma_floor: kv.get("sigma_floor", base.sigma_floor)?,
            inactive_floor: kv.get("inactive_floor", base.inactive_floor)?,
            saturation_ceiling: kv.get("saturation_ceiling", base.saturation_ceiling)?,
            z_threshold: kv.get("z_threshold", base.z_threshold)?,
            classify_lookback_hours: kv.get("classify_lookback_hours", base.classify_lookback_hours)?,
        };
        cfg.validate().map_err(|e| kv.attribute(e, &DETECTOR_KEYS))?;
        Ok(cfg)
    }
}

/// Shannon entropy (natural log) of the attention coefficients, optionally
/// divided by `ln k`. A single coefficient has entropy 0.
pub fn attention_entropy(alpha: &[f64], normalized: bool) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let h: f64 = -alpha.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>();
    let h = h.max(0.0);
    if !normalized {
        return Ok(h);
    }
    let k = alpha.len();
    if k == 1 {
        return Ok(0.0);
    }
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

/// `|x̂ - x| / max(σ̂, floor)` elementwise.
pub fn anomaly_scores(x_hat: &[f64], sigma_hat: &[f64], x_true: &[f64], sigma_floor: f64) -> Vec<f64> {
    x_hat
        .iter()
        .zip(sigma_hat)
        .zip(x_true)
        .map(|((m, s), y)| (m - y).abs() / s.max(sigma_floor))
        .collect()
}

/// Applies the sample's coefficients backwards over the context window and
/// scores the target's own history against them.
pub fn historical_error(out: &PredictionOutput, sample: &GraphSample, sigma_floor: f64) -> Result<Vec<f64>> {
    let xs = out.scaled_context(sample);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let st = weighted_stats(&out.alpha, &refs)?;
    Ok(anomaly_scores(&st.mean, &st.std, &sample.context_target, sigma_floor))
}

/// `p`-th percentile (`0 ≤ p ≤ 100`) with linear interpolation between the
/// order statistics at rank `p/100 · (n - 1)`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty vector"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    None,
    LowEntropy,
    HighHistoricalError,
    DegenerateContext,
}

impl FilterReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterReason::None => "none",
            FilterReason::LowEntropy => "low_entropy",
            FilterReason::HighHistoricalError => "high_historical_error",
            FilterReason::DegenerateContext => "degenerate_context",
        }
    }
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FilterReason::None,
            FilterReason::LowEntropy,
            FilterReason::HighHistoricalError,
            FilterReason::DegenerateContext,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown filter reason '{s}'")))
    }
}

fn filter_on(entropy: f64, h_err_pct: f64, cfg: &DetectorConfig) -> FilterReason {
    if entropy < cfg.lambda {
        FilterReason::LowEntropy
    } else if h_err_pct > cfg.gamma {
        FilterReason::HighHistoricalError
    } else {
        FilterReason::None
    }
}

/// Entropy first, then the historical-error percentile.
pub fn prefilter(entropy: f64, h_err: &[f64], cfg: &DetectorConfig) -> Result<(bool, FilterReason)> {
    let pct = percentile(h_err, cfg.percentile)?;
    let r = filter_on(entropy, pct, cfg);
    Ok((r == FilterReason::None, r))
}

/// Outcome of the detector on one graph sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVerdict {
    pub cell_id: String,
    pub anchor: Hour,
    pub reason: FilterReason,
    pub entropy: Option<f64>,
    /// Historical error at the configured percentile.
    pub h_err_pct: Option<f64>,
    /// Historical error at [`CALIBRATION_PERCENTILES`].
    pub h_err_calibration: Option<[f64; 4]>,
    /// Scores of every hour of the prediction window, kept even for filtered
    /// samples so thresholds can be re-applied; see [`SampleVerdict::scores`].
    pub raw_scores: Option<Vec<f64>>,
}

impl SampleVerdict {
    pub fn passed(&self) -> bool {
        self.reason == FilterReason::None
    }

    /// Scores of the prediction window, present only for passing samples.
    pub fn scores(&self) -> Option<&[f64]> {
        if self.passed() {
            self.raw_scores.as_deref()
        } else {
            None
        }
    }

    fn degenerate(sample: &GraphSample) -> Self {
        Self {
            cell_id: sample.target.cell_id.clone(),
            anchor: sample.anchor,
            reason: FilterReason::DegenerateContext,
            entropy: None,
            h_err_pct: None,
            h_err_calibration: None,
            raw_scores: None,
        }
    }

    /// Re-applies `lambda` and `gamma` from `cfg`; the percentile is the one
    /// the verdict was built with.
    pub fn reapply(&self, cfg: &DetectorConfig) -> Self {
        let mut v = self.clone();
        if let (Some(e), Some(p)) = (self.entropy, self.h_err_pct) {
            v.reason = filter_on(e, p, cfg);
        }
        v
    }
}

/// Runs the predictor and both detector stages on one sample.
pub fn judge(params: &PredictorParams, sample: &GraphSample, cfg: &DetectorConfig) -> Result<SampleVerdict> {
    let out = match predict(params, sample) {
        Ok(o) => o,
        Err(Error::DegenerateContext) => return Ok(SampleVerdict::degenerate(sample)),
        Err(e) => return Err(e),
    };
    let h_err = match historical_error(&out, sample, cfg.sigma_floor) {
        Ok(h) => h,
        Err(Error::DegenerateContext) => return Ok(SampleVerdict::degenerate(sample)),
        Err(e) => return Err(e),
    };
    let entropy = attention_entropy(&out.alpha, cfg.entropy_normalized)?;
    let pct = percentile(&h_err, cfg.percentile)?;
    let mut cal = [0.0; 4];
    for (c, p) in cal.iter_mut().zip(CALIBRATION_PERCENTILES) {
        *c = percentile(&h_err, p)?;
    }
    Ok(SampleVerdict {
        cell_id: sample.target.cell_id.clone(),
        anchor: sample.anchor,
        reason: filter_on(entropy, pct, cfg),
        entropy: Some(entropy),
        h_err_pct: Some(pct),
        h_err_calibration: Some(cal),
        raw_scores: Some(anomaly_scores(
            &out.x_hat,
            &out.sigma_hat,
            &sample.pred_target,
            cfg.sigma_floor,
        )),
    })
}

/// Judges every sample of `source`, in source order. Samples that cannot be
/// cut are skipped.
pub fn judge_all(
    params: &PredictorParams,
    source: &dyn SampleSource,
    cfg: &DetectorConfig,
) -> Result<Vec<SampleVerdict>> {
    let out: Vec<Option<SampleVerdict>> = (0..source.len())
        .into_par_iter()
        .map(|i| match source.sample(i) {
            Ok(s) => judge(params, &s, cfg).map(Some),
            Err(Error::SampleUnavailable { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Hourly labels of one cell over `[start, start + len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLabels {
    pub cell_id: String,
    pub start: Hour,
    pub anomalous: Vec<bool>,
    /// True when at least one passing sample covers the hour.
    pub covered: Vec<bool>,
    /// Highest score any passing sample gave the hour (0 when uncovered).
    pub max_score: Vec<f64>,
}

impl CellLabels {
    pub fn end(&self) -> Hour {
        self.start + self.anomalous.len() as Hour
    }

    pub fn is_anomalous(&self, hour: Hour) -> bool {
        hour >= self.start && hour < self.end() && self.anomalous[(hour - self.start) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consolidation {
    pub cells: BTreeMap<String, CellLabels>,
    /// Hours inside a cell's scored range that no passing sample covers.
    pub uncovered_hours: usize,
}

impl Consolidation {
    pub fn anomalous_hours(&self) -> usize {
        self.cells
            .values()
            .map(|c| c.anomalous.iter().filter(|a| **a).count())
            .sum()
    }

    pub fn total_hours(&self) -> usize {
        self.cells.values().map(|c| c.anomalous.len()).sum()
    }
}

/// An hour is anomalous when any passing verdict whose prediction window
/// `[anchor + 1, anchor + horizon]` contains it scores it above `delta`.
pub fn consolidate(verdicts: &[SampleVerdict], delta: f64) -> Consolidation {
    let mut by_cell: BTreeMap<&str, Vec<&SampleVerdict>> = BTreeMap::new();
    for v in verdicts {
        by_cell.entry(v.cell_id.as_str()).or_default().push(v);
    }
    let mut cells = BTreeMap::new();
    let mut uncovered = 0;
    for (cell, vs) in by_cell {
        let horizon = vs
            .iter()
            .filter_map(|v| v.raw_scores.as_ref().map(Vec::len))
            .max()
            .unwrap_or(1);
        let start = vs.iter().map(|v| v.anchor).min().expect("non-empty") + 1;
        let end = vs.iter().map(|v| v.anchor).max().expect("non-empty") + 1 + horizon as Hour;
        let n = (end - start) as usize;
        let mut labels = CellLabels {
            cell_id: cell.to_string(),
            start,
            anomalous: vec![false; n],
            covered: vec![false; n],
            max_score: vec![0.0; n],
        };
        for v in vs {
            let Some(scores) = v.scores() else { continue };
            for (i, &s) in scores.iter().enumerate() {
                let h = (v.anchor + 1 + i as Hour - start) as usize;
                labels.covered[h] = true;
                if s > labels.max_score[h] {
                    labels.max_score[h] = s;
                }
                if s > delta {
                    labels.anomalous[h] = true;
                }
            }
        }
        uncovered += labels.covered.iter().filter(|c| !**c).count();
        cells.insert(cell.to_string(), labels);
    }
    Consolidation {
        cells,
        uncovered_hours: uncovered,
    }
}

/// Maximal runs of `true` as half-open index ranges.
pub fn runs(labels: &[bool]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] {
            let s = i;
            while i < labels.len() && labels[i] {
                i += 1;
            }
            out.push(s..i);
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodClass {
    Class1,
    Class2,
    Unclassified,
}

impl PeriodClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PeriodClass::Class1 => "class1",
            PeriodClass::Class2 => "class2",
            PeriodClass::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for PeriodClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeriodClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class1" => Ok(PeriodClass::Class1),
            "class2" => Ok(PeriodClass::Class2),
            "unclassified" => Ok(PeriodClass::Unclassified),
            _ => Err(Error::invalid(format!("unknown period class '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyPeriod {
    pub cell_id: String,
    pub start: Hour,
    /// Inclusive.
    pub end: Hour,
    pub peak_score: f64,
    pub mean_score: f64,
    pub class: PeriodClass,
}

impl AnomalyPeriod {
    pub fn duration_hours(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn overlaps(&self, start: Hour, end_inclusive: Hour) -> bool {
        self.start <= end_inclusive && start <= self.end
    }
}

/// Groups consecutive anomalous hours of one cell into periods, unclassified.
pub fn extract_periods(labels: &CellLabels) -> Vec<AnomalyPeriod> {
    runs(&labels.anomalous)
        .into_iter()
        .map(|r| {
            let sc = &labels.max_score[r.clone()];
            AnomalyPeriod {
                cell_id: labels.cell_id.clone(),
                start: labels.start + r.start as Hour,
                end: labels.start + r.end as Hour - 1,
                peak_score: sc.iter().copied().fold(0.0, f64::max),
                mean_score: sc.iter().sum::<f64>() / sc.len() as f64,
                class: PeriodClass::Unclassified,
            }
        })
        .collect()
}

/// Periods of every cell, sorted by `(cell_id, start)`.
pub fn all_periods(c: &Consolidation) -> Vec<AnomalyPeriod> {
    c.cells.values().flat_map(extract_periods).collect()
}

/// Periods lasting strictly more than `min_duration_hours`.
pub fn long_periods(periods: &[AnomalyPeriod], min_duration_hours: usize) -> Vec<AnomalyPeriod> {
    periods
        .iter()
        .filter(|p| p.duration_hours() > min_duration_hours)
        .cloned()
        .collect()
}
