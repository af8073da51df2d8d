use std::io::Write;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph_data::io::{create_file, hour_to_timestamp, parse_timestamp};
use crate::graph_data::{Hour, Split};

use super::{parse_inject_split, GroundTruthLabel, InjectionSpec, LabelKind, Magnitude};

/// Every key accepted in a scenario file.
pub const SCENARIO_KEYS: &[&str] = &[
    "n_sites",
    "cells_per_site",
    "area_w_m",
    "area_h_m",
    "days",
    "start",
    "base_load",
    "base_spread",
    "diurnal_amp",
    "weekend_factor",
    "spatial_amp",
    "spatial_scale_m",
    "regional_var",
    "noise_std",
    "missing_frac",
    "rng_seed",
    "split_fractions",
    "inject_split",
    "inject_after_day",
    "n_class1",
    "n_class2",
    "class1_magnitude",
    "class1_min_hours",
    "class1_max_hours",
    "class2_hours",
    "mobility_events",
    "mobility_day",
    "mobility_radius_m",
    "mobility_magnitude",
    "mobility_hours",
    "inject",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_sites: usize,
    pub cells_per_site: usize,
    pub area_w_m: f64,
    pub area_h_m: f64,
    pub days: usize,
    /// First hour of the telemetry.
    pub start: Hour,
    /// Mean utilization (percent) before per-cell and spatial factors.
    pub base_load: f64,
    /// Log-scale spread of per-cell base load.
    pub base_spread: f64,
    /// Fraction of the load that follows the daily shape.
    pub diurnal_amp: f64,
    pub weekend_factor: f64,
    pub spatial_amp: f64,
    pub spatial_scale_m: f64,
    /// Log-scale amplitude of the slowly varying regional factor.
    pub regional_var: f64,
    pub noise_std: f64,
    pub missing_frac: f64,
    pub rng_seed: u64,
    pub split_fractions: [f64; 3],
    /// `None` injects anywhere.
    pub inject_split: Option<Split>,
    pub inject_after_day: usize,
    pub n_class1: usize,
    pub n_class2: usize,
    pub class1_magnitude: f64,
    pub class1_min_hours: usize,
    pub class1_max_hours: usize,
    pub class2_hours: usize,
    pub mobility_events: usize,
    pub mobility_day: Option<usize>,
    pub mobility_radius_m: f64,
    pub mobility_magnitude: f64,
    pub mobility_hours: usize,
    pub injections: Vec<InjectionSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_sites: 50,
            cells_per_site: 6,
            area_w_m: 6000.0,
            area_h_m: 4000.0,
            days: 30,
            // 2024-02-01T00:00:00Z
            start: 474_096,
            base_load: 30.0,
            base_spread: 0.35,
            diurnal_amp: 0.75,
            weekend_factor: 0.7,
            spatial_amp: 0.25,
            spatial_scale_m: 1500.0,
            regional_var: 0.15,
            noise_std: 1.0,
            missing_frac: 0.01,
            rng_seed: 7,
            split_fractions: [0.7, 0.1, 0.2],
            inject_split: Some(Split::Test),
            inject_after_day: 14,
            n_class1: 0,
            n_class2: 0,
            class1_magnitude: 0.5,
            class1_min_hours: 8,
            class1_max_hours: 12,
            class2_hours: 24,
            mobility_events: 0,
            mobility_day: None,
            mobility_radius_m: 600.0,
            mobility_magnitude: 2.5,
            mobility_hours: 9,
            injections: Vec::new(),
        }
    }
}

fn parse_fractions(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated fractions".into())
}

fn parse_hour(s: &str, start: Hour) -> Result<Hour> {
    match s.parse::<i64>() {
        Ok(offset) => Ok(start + offset),
        Err(_) => parse_timestamp(s),
    }
}

/// Parses an `inject` line such as
/// `class1 cell=S0001-2 start=400 hours=8 magnitude=0.5` (relative), with
/// `additive=30` in place of `magnitude` for percentage-point shifts;
/// `class2 cell=.. start=.. hours=24 mode=off|saturated|flapping`; or
/// `mobility x=.. y=.. radius=.. start=.. hours=9 factor=2.5`.
/// `start` is an hour offset from the scenario start or a timestamp.
fn parse_injection(spec: &str, start: Hour) -> Result<InjectionSpec> {
    let mut words = spec.split_whitespace();
    let kind: LabelKind = words
        .next()
        .ok_or_else(|| Error::invalid("empty inject line"))?
        .parse()?;
    let mut kv = std::collections::HashMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value, got `{w}`")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("inject {kind}: missing `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::invalid(format!("inject {kind}: bad number for `{k}`")))
    };
    let lo = parse_hour(get("start")?, start)?;
    let hours = num("hours")? as i64;
    if hours < 1 {
        return Err(Error::invalid("inject: hours must be at least 1"));
    }
    let window = (lo, lo + hours - 1);
    Ok(match kind {
        LabelKind::Class1 => {
            let magnitude = if kv.contains_key("additive") {
                Magnitude::Additive(num("additive")?)
            } else {
                Magnitude::Relative(num("magnitude")?)
            };
            InjectionSpec::Class1 {
                cell: get("cell")?.to_string(),
                window,
                magnitude,
            }
        }
        LabelKind::Class2 => InjectionSpec::Class2 {
            cell: get("cell")?.to_string(),
            window,
            mode: kv.get("mode").copied().unwrap_or("off").parse()?,
        },
        LabelKind::Mobility => InjectionSpec::Mobility {
            center: (num("x")?, num("y")?),
            radius_m: num("radius")?,
            window,
            peak_factor: kv.get("factor").map_or(Ok(2.5), |_| num("factor"))?,
        },
    })
}

impl ScenarioConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(SCENARIO_KEYS)?;
        let d = Self::default();
        let start = match kv.get_str("start") {
            Some(s) => parse_hour(s, 0).map_err(|e| kv.error_at("start", e.to_string()))?,
            None => d.start,
        };
        let split_fractions = match kv.get_str("split_fractions") {
            Some(s) => parse_fractions(s).map_err(|e| kv.error_at("split_fractions", e))?,
            None => d.split_fractions,
        };
        let inject_split = match kv.get_str("inject_split") {
            Some(s) => parse_inject_split(s).map_err(|e| kv.error_at("inject_split", e.to_string()))?,
            None => d.inject_split,
        };
        let injections = kv
            .all("inject")
            .map(|e| {
                parse_injection(&e.value, start).map_err(|err| Error::Config {
                    line: e.line,
                    key: e.key.clone(),
                    msg: err.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            n_sites: kv.get("n_sites", d.n_sites)?,
            cells_per_site: kv.get("cells_per_site", d.cells_per_site)?,
            area_w_m: kv.get("area_w_m", d.area_w_m)?,
            area_h_m: kv.get("area_h_m", d.area_h_m)?,
            days: kv.get("days", d.days)?,
            start,
            base_load: kv.get("base_load", d.base_load)?,
            base_spread: kv.get("base_spread", d.base_spread)?,
            diurnal_amp: kv.get("diurnal_amp", d.diurnal_amp)?,
            weekend_factor: kv.get("weekend_factor", d.weekend_factor)?,
            spatial_amp: kv.get("spatial_amp", d.spatial_amp)?,
            spatial_scale_m: kv.get("spatial_scale_m", d.spatial_scale_m)?,
            regional_var: kv.get("regional_var", d.regional_var)?,
            noise_std: kv.get("noise_std", d.noise_std)?,
            missing_frac: kv.get("missing_frac", d.missing_frac)?,
            rng_seed: kv.get("rng_seed", d.rng_seed)?,
            split_fractions,
            inject_split,
            inject_after_day: kv.get("inject_after_day", d.inject_after_day)?,
            n_class1: kv.get("n_class1", d.n_class1)?,
            n_class2: kv.get("n_class2", d.n_class2)?,
            class1_magnitude: kv.get("class1_magnitude", d.class1_magnitude)?,
            class1_min_hours: kv.get("class1_min_hours", d.class1_min_hours)?,
            class1_max_hours: kv.get("class1_max_hours", d.class1_max_hours)?,
            class2_hours: kv.get("class2_hours", d.class2_hours)?,
            mobility_events: kv.get("mobility_events", d.mobility_events)?,
            mobility_day: kv.get_opt("mobility_day")?,
            mobility_radius_m: kv.get("mobility_radius_m", d.mobility_radius_m)?,
            mobility_magnitude: kv.get("mobility_magnitude", d.mobility_magnitude)?,
            mobility_hours: kv.get("mobility_hours", d.mobility_hours)?,
            injections,
        };
        cfg.validate_with(kv)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&KvConfig::default())
    }

    fn validate_with(&self, kv: &KvConfig) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(kv.error_at(key, msg));
        if self.n_sites == 0 {
            return bad("n_sites", "must be at least 1");
        }
        if self.cells_per_site == 0 {
            return bad("cells_per_site", "must be at least 1");
        }
        if self.days == 0 {
            return bad("days", "must be at least 1");
        }
        if !(self.area_w_m > 0.0 && self.area_h_m > 0.0) {
            return bad("area_w_m", "area must be positive");
        }
        if !(0.0..1.0).contains(&self.missing_frac) {
            return bad("missing_frac", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.diurnal_amp) {
            return bad("diurnal_amp", "must lie in [0, 1]");
        }
        if !(self.weekend_factor > 0.0) {
            return bad("weekend_factor", "must be positive");
        }
        if !(self.base_load > 0.0 && self.base_load <= 100.0) {
            return bad("base_load", "must lie in (0, 100]");
        }
        if self.noise_std < 0.0 || self.base_spread < 0.0 || self.regional_var < 0.0 {
            return bad("noise_std", "spreads must be non-negative");
        }
        if !(self.spatial_scale_m > 0.0) {
            return bad("spatial_scale_m", "must be positive");
        }
        if self.class1_min_hours == 0 || self.class2_hours == 0 || self.mobility_hours == 0 {
            return bad("class1_min_hours", "durations must be at least 1 hour");
        }
        let end = self.start + (self.days * 24) as Hour;
        for spec in &self.injections {
            let (lo, hi) = spec.window();
            if lo < self.start || hi >= end {
                return bad("inject", "window outside scenario duration");
            }
        }
        Ok(())
    }
}

pub fn write_labels(path: &Path, labels: &[GroundTruthLabel]) -> Result<()> {
    let mut w = create_file(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "cell_id,timestamp,kind").map_err(io)?;
    for l in labels {
        writeln!(w, "{},{},{}", l.cell_id, hour_to_timestamp(l.hour), l.kind).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruthLabel>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |msg: String| Error::Parse {
            path: name.clone(),
            line: i + 2,
            msg,
        };
        if rec.len() != 3 {
            return Err(perr("expected 3 fields".into()));
        }
        let kind: LabelKind = rec[2].trim().parse().map_err(|e: Error| perr(e.to_string()))?;
        out.push(GroundTruthLabel {
            cell_id: rec[0].trim().to_string(),
            hour: parse_timestamp(&rec[1]).map_err(|e| perr(e.to_string()))?,
            is_anomalous: kind.is_anomalous(),
            kind,
        });
    }
    Ok(out)
}
