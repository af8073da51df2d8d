//! Heuristic period classes.
//!
//! Class 2 marks a change of operating state (inactive or saturated where
//! the cell used to be in normal service, or on/off flapping). Class 1 marks
//! a cell that leaves its usual daily profile while every other cell of the
//! same sector stays within its own.

use std::collections::HashMap;

use super::{AnomalyPeriod, DetectorConfig, PeriodClass};
use crate::graph_data::{CellMeta, Hour, KpiSeries};

/// Lower bound on the hour-of-day spread used for z-scores, in percentage
/// points.
const MIN_PROFILE_STD: f64 = 1.0;

pub struct Classifier<'a> {
    cfg: DetectorConfig,
    meta: HashMap<&'a str, &'a CellMeta>,
    sectors: HashMap<&'a str, Vec<&'a str>>,
    series: HashMap<&'a str, &'a KpiSeries>,
}

impl<'a> Classifier<'a> {
    /// `telemetry` is the raw series, before imputation.
    pub fn new(deployment: &'a [CellMeta], telemetry: &'a [KpiSeries], cfg: &DetectorConfig) -> Self {
        let mut sectors: HashMap<&str, Vec<&str>> = HashMap::new();
        for c in deployment {
            sectors.entry(&c.sector_id).or_default().push(&c.cell_id);
        }
        Self {
            cfg: cfg.clone(),
            meta: deployment.iter().map(|c| (c.cell_id.as_str(), c)).collect(),
            sectors,
            series: telemetry.iter().map(|s| (s.cell_id.as_str(), s)).collect(),
        }
    }

    fn observed(&self, cell: &str, from: Hour, to_inclusive: Hour) -> Vec<(Hour, f64)> {
        let Some(s) = self.series.get(cell) else {
            return Vec::new();
        };
        (from.max(s.start)..=to_inclusive.min(s.end() - 1))
            .filter_map(|h| {
                let i = (h - s.start) as usize;
                s.mask[i].then(|| (h, s.values[i]))
            })
            .collect()
    }

    fn lookback(&self, p: &AnomalyPeriod) -> (Hour, Hour) {
        (p.start - self.cfg.classify_lookback_hours as Hour, p.start - 1)
    }

    fn is_state_change(&self, p: &AnomalyPeriod) -> bool {
        let inside: Vec<f64> = self
            .observed(&p.cell_id, p.start, p.end)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        if inside.is_empty() {
            return false;
        }
        let (lo, hi) = (self.cfg.inactive_floor, self.cfg.saturation_ceiling);
        let active: Vec<bool> = inside.iter().map(|&v| v >= lo).collect();
        let switches = active.windows(2).filter(|w| w[0] != w[1]).count();
        if switches >= 2 {
            return true;
        }
        let (from, to) = self.lookback(p);
        let before: Vec<f64> = self
            .observed(&p.cell_id, from, to)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let (Some(now), Some(then)) = (median(&inside), median(&before)) else {
            return false;
        };
        (now < lo && then >= lo) || (now > hi && then <= hi)
    }

    /// Median absolute z-score of a cell over the period against its
    /// hour-of-day profile from the lookback window.
    fn deviation(&self, cell: &str, p: &AnomalyPeriod) -> Option<f64> {
        let (from, to) = self.lookback(p);
        let mut sums = [(0.0f64, 0.0f64, 0usize); 24];
        for (h, v) in self.observed(cell, from, to) {
            let e = &mut sums[h.rem_euclid(24) as usize];
            e.0 += v;
            e.1 += v * v;
            e.2 += 1;
        }
        let z: Vec<f64> = self
            .observed(cell, p.start, p.end)
            .into_iter()
            .filter_map(|(h, v)| {
                let (s, ss, n) = sums[h.rem_euclid(24) as usize];
                (n > 0).then(|| {
                    let mean = s / n as f64;
                    let var = (ss / n as f64 - mean * mean).max(0.0);
                    ((v - mean) / var.sqrt().max(MIN_PROFILE_STD)).abs()
                })
            })
            .collect();
        median(&z)
    }

    pub fn classify(&self, p: &AnomalyPeriod) -> PeriodClass {
        if self.is_state_change(p) {
            return PeriodClass::Class2;
        }
        let Some(meta) = self.meta.get(p.cell_id.as_str()) else {
            log::warn!("cell {} missing from deployment; period left unclassified", p.cell_id);
            return PeriodClass::Unclassified;
        };
        let peers: Vec<&str> = self
            .sectors
            .get(meta.sector_id.as_str())
            .map(|v| v.iter().copied().filter(|c| *c != p.cell_id).collect())
            .unwrap_or_default();
        if peers.is_empty() {
            log::warn!("cell {} has no sector peers; period left unclassified", p.cell_id);
            return PeriodClass::Unclassified;
        }
        let z = self.cfg.z_threshold;
        let affected = self.deviation(&p.cell_id, p).is_some_and(|d| d > z);
        let peers_normal = peers.iter().all(|c| self.deviation(c, p).is_none_or(|d| d <= z));
        if affected && peers_normal {
            PeriodClass::Class1
        } else {
            PeriodClass::Unclassified
        }
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// One-off classification; prefer [`Classifier`] for many periods.
pub fn classify_period(
    period: &AnomalyPeriod,
    telemetry: &[KpiSeries],
    deployment: &[CellMeta],
    cfg: &DetectorConfig,
) -> PeriodClass {
    Classifier::new(deployment, telemetry, cfg).classify(period)
}
