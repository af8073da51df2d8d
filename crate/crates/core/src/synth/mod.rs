//! Synthetic deployments and PRB-utilization telemetry with labelled
//! injected anomalies.
//!
//! Load per cell and hour is
//! `clip(base · diurnal(hour, mix(pos)) · weekly(day) · field(pos) · regional(pos, t) + noise, 0, 100)`
//! where `field`, `mix` and `regional` are smooth random Fourier fields over
//! the plane, so cells close together carry correlated load. Everything is a
//! pure function of the scenario config and seed.

mod config;

pub use config::{read_labels, write_labels, ScenarioConfig, SCENARIO_KEYS};

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, TimeZone, Utc, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph_data::{split_by_region, Axis, CellMeta, Hour, KpiSeries, Split, SplitSpec};

const SECTORS_PER_SITE: usize = 3;
const FOURIER_FEATURES: usize = 24;

/// Mixes a 64-bit seed with a stream id (splitmix64 finalizer).
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn str_stream(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Random Fourier approximation of a stationary Gaussian field with unit
/// variance and squared-exponential correlation of length `scale`.
#[derive(Debug, Clone)]
struct FourierField {
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
}

impl FourierField {
    fn new(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let freq = Normal::new(0.0, 1.0 / scale.max(1e-9)).expect("finite scale");
        let freqs = (0..FOURIER_FEATURES)
            .map(|_| (freq.sample(rng), freq.sample(rng)))
            .collect();
        let phases = (0..FOURIER_FEATURES).map(|_| rng.random::<f64>() * TAU).collect();
        Self { freqs, phases }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let norm = (2.0 / FOURIER_FEATURES as f64).sqrt();
        norm * self
            .freqs
            .iter()
            .zip(&self.phases)
            .map(|((wx, wy), p)| (wx * x + wy * y + p).cos())
            .sum::<f64>()
    }
}

fn circular_bump(hour: f64, center: f64, width: f64) -> f64 {
    let mut d = (hour - center).rem_euclid(24.0);
    if d > 12.0 {
        d -= 24.0;
    }
    (-(d / width).powi(2)).exp()
}

/// Daily shape in `[0, 1]`; `mix` blends a midday business profile (0) with
/// an evening residential profile (1).
fn diurnal_shape(hour_of_day: f64, mix: f64) -> f64 {
    let business = circular_bump(hour_of_day, 13.0, 4.0);
    let residential = (0.45 * circular_bump(hour_of_day, 8.5, 2.0) + circular_bump(hour_of_day, 20.5, 3.0)).min(1.0);
    (1.0 - mix) * business + mix * residential
}

/// Scenario-wide random structure shared by all cells.
struct Landscape {
    density: FourierField,
    mix: FourierField,
    regional: Vec<FourierField>,
    band_factor: [f64; 7],
}

impl Landscape {
    fn new(cfg: &ScenarioConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.rng_seed, 1));
        let density = FourierField::new(&mut rng, cfg.spatial_scale_m);
        let mix = FourierField::new(&mut rng, cfg.spatial_scale_m);
        let regional = (0..=cfg.days)
            .map(|_| FourierField::new(&mut rng, cfg.spatial_scale_m))
            .collect();
        let mut band_factor = [1.0; 7];
        for f in band_factor.iter_mut() {
            *f = rng.random_range(0.6..1.4);
        }
        Self {
            density,
            mix,
            regional,
            band_factor,
        }
    }

    fn regional(&self, x: f64, y: f64, hour_offset: usize) -> f64 {
        let day = hour_offset / 24;
        let frac = (hour_offset % 24) as f64 / 24.0;
        let a = self.regional[day.min(self.regional.len() - 1)].at(x, y);
        let b = self.regional[(day + 1).min(self.regional.len() - 1)].at(x, y);
        a * (1.0 - frac) + b * frac
    }
}

fn weekday_of(hour: Hour) -> Weekday {
    Utc.timestamp_opt(hour * 3600, 0)
        .single()
        .expect("hour within chrono range")
        .weekday()
}

pub(crate) fn is_weekend(hour: Hour) -> bool {
    matches!(weekday_of(hour), Weekday::Sat | Weekday::Sun)
}

fn round_centi(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Places `n_sites` sites uniformly in the area, each carrying
/// `cells_per_site` co-located cells spread over three azimuth sectors.
pub fn generate_deployment(cfg: &ScenarioConfig) -> Vec<CellMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.rng_seed, 0));
    let mut cells = Vec::with_capacity(cfg.n_sites * cfg.cells_per_site);
    for s in 0..cfg.n_sites {
        let site_id = format!("S{s:04}");
        let x = rng.random::<f64>() * cfg.area_w_m;
        let y = rng.random::<f64>() * cfg.area_h_m;
        let antennas: Vec<usize> = (0..SECTORS_PER_SITE)
            .map(|_| rng.random_range(0..crate::graph_data::ANTENNA_SLOTS))
            .collect();
        for c in 0..cfg.cells_per_site {
            let sector = c % SECTORS_PER_SITE;
            let band = crate::graph_data::ANTENNA_SLOTS + (c / SECTORS_PER_SITE + s) % crate::graph_data::BAND_SLOTS;
            let cell = CellMeta::new(
                format!("{site_id}-{c}"),
                site_id.clone(),
                format!("{site_id}-{}", (b'A' + sector as u8) as char),
                (round_centi(x), round_centi(y)),
                antennas[sector],
                band,
            )
            .expect("indices in range");
            cells.push(cell);
        }
    }
    cells
}

/// Hourly telemetry for every cell of `deployment`.
pub fn generate_traffic(deployment: &[CellMeta], cfg: &ScenarioConfig) -> Vec<KpiSeries> {
    let land = Landscape::new(cfg);
    let hours = cfg.days * 24;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise");
    deployment
        .iter()
        .map(|cell| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.rng_seed, str_stream(&cell.cell_id)));
            let z: f64 = StandardNormal.sample(&mut rng);
            let band = cell
                .attr_indices()
                .map_or(0, |(_, b)| b - crate::graph_data::ANTENNA_SLOTS);
            let base = cfg.base_load * (cfg.base_spread * z).exp() * land.band_factor[band];
            let field = (cfg.spatial_amp * land.density.at(cell.x, cell.y)).exp();
            let mix = 0.5 + 0.5 * land.mix.at(cell.x, cell.y).tanh();
            let mut values = Vec::with_capacity(hours);
            let mut mask = Vec::with_capacity(hours);
            for h in 0..hours {
                let hour = cfg.start + h as Hour;
                let hod = hour.rem_euclid(24) as f64;
                let diurnal = 1.0 - cfg.diurnal_amp + cfg.diurnal_amp * diurnal_shape(hod, mix);
                let weekly = if is_weekend(hour) { cfg.weekend_factor } else { 1.0 };
                let regional = (cfg.regional_var * land.regional(cell.x, cell.y, h)).exp();
                let eps = if cfg.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let v = base * diurnal * weekly * field * regional + eps;
                values.push(round_centi(v.clamp(0.0, 100.0)));
                mask.push(!(cfg.missing_frac > 0.0 && rng.random::<f64>() < cfg.missing_frac));
            }
            KpiSeries {
                cell_id: cell.cell_id.clone(),
                start: cfg.start,
                values,
                mask,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelKind {
    Class1,
    Class2,
    Mobility,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Class1 => "class1",
            LabelKind::Class2 => "class2",
            LabelKind::Mobility => "mobility",
        }
    }

    pub fn is_anomalous(self) -> bool {
        !matches!(self, LabelKind::Mobility)
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class1" | "class1_deviation" => Ok(LabelKind::Class1),
            "class2" | "class2_shift" => Ok(LabelKind::Class2),
            "mobility" | "mobility_event" => Ok(LabelKind::Mobility),
            other => Err(Error::invalid(format!("unknown label kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroundTruthLabel {
    pub cell_id: String,
    pub hour: Hour,
    pub is_anomalous: bool,
    pub kind: LabelKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Magnitude {
    /// `v · (1 + m)`.
    Relative(f64),
    /// `v + d` percentage points.
    Additive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class2Mode {
    Off,
    Saturated,
    Flapping,
}

impl FromStr for Class2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Class2Mode::Off),
            "saturated" | "on" => Ok(Class2Mode::Saturated),
            "flapping" => Ok(Class2Mode::Flapping),
            other => Err(Error::invalid(format!("unknown class2 mode `{other}`"))),
        }
    }
}

/// An anomaly or mobility event applied to generated telemetry. Windows are
/// inclusive hour ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionSpec {
    Class1 {
        cell: String,
        window: (Hour, Hour),
        magnitude: Magnitude,
    },
    Class2 {
        cell: String,
        window: (Hour, Hour),
        mode: Class2Mode,
    },
    Mobility {
        center: (f64, f64),
        radius_m: f64,
        window: (Hour, Hour),
        peak_factor: f64,
    },
}

impl InjectionSpec {
    pub fn window(&self) -> (Hour, Hour) {
        match self {
            InjectionSpec::Class1 { window, .. }
            | InjectionSpec::Class2 { window, .. }
            | InjectionSpec::Mobility { window, .. } => *window,
        }
    }
}

/// Shared raised-cosine profile of a mobility event, peaking mid-window.
pub fn mobility_profile(hour: Hour, window: (Hour, Hour), peak_factor: f64) -> f64 {
    let n = (window.1 - window.0 + 1) as f64;
    let u = ((hour - window.0) as f64 + 0.5) / n;
    1.0 + (peak_factor - 1.0) * 0.5 * (1.0 - (TAU * u).cos())
}

/// Cells inside a mobility event's disc.
pub fn cells_in_area(deployment: &[CellMeta], center: (f64, f64), radius_m: f64) -> Vec<String> {
    deployment
        .iter()
        .filter(|c| (c.x - center.0).hypot(c.y - center.1) <= radius_m)
        .map(|c| c.cell_id.clone())
        .collect()
}

/// Applies `spec` to `series` in place and returns the resulting labels.
/// Class 1/2 labels cover exactly the observed hours whose value changed;
/// mobility hours are labelled non-anomalous.
pub fn inject(
    series: &mut [KpiSeries],
    deployment: &[CellMeta],
    spec: &InjectionSpec,
) -> Result<Vec<GroundTruthLabel>> {
    let (lo, hi) = spec.window();
    if hi < lo {
        return Err(Error::invalid(format!("empty injection window {lo}..={hi}")));
    }
    let pos: HashMap<String, usize> = series.iter().enumerate().map(|(i, s)| (s.cell_id.clone(), i)).collect();
    let in_span = |s: &KpiSeries| lo >= s.start && hi < s.end();
    let mut labels = Vec::new();
    match spec {
        InjectionSpec::Class1 { cell, magnitude, .. } => {
            let &i = pos.get(cell).ok_or_else(|| Error::UnknownCell(cell.clone()))?;
            let s = &mut series[i];
            if !in_span(s) {
                return Err(Error::invalid("injection window outside telemetry span"));
            }
            for hour in lo..=hi {
                let j = (hour - s.start) as usize;
                let old = s.values[j];
                let new = match magnitude {
                    Magnitude::Relative(m) => old * (1.0 + m),
                    Magnitude::Additive(d) => old + d,
                };
                s.values[j] = round_centi(new.clamp(0.0, 100.0));
                if s.mask[j] && s.values[j] != old {
                    labels.push(GroundTruthLabel {
                        cell_id: cell.clone(),
                        hour,
                        is_anomalous: true,
                        kind: LabelKind::Class1,
                    });
                }
            }
        }
        InjectionSpec::Class2 { cell, mode, .. } => {
            let &i = pos.get(cell).ok_or_else(|| Error::UnknownCell(cell.clone()))?;
            let s = &mut series[i];
            if !in_span(s) {
                return Err(Error::invalid("injection window outside telemetry span"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(str_stream(cell), lo as u64));
            for hour in lo..=hi {
                let j = (hour - s.start) as usize;
                let old = s.values[j];
                let new = match mode {
                    Class2Mode::Off => round_centi(rng.random_range(0.0..0.5)),
                    Class2Mode::Saturated => round_centi(rng.random_range(97.0..100.0)),
                    Class2Mode::Flapping => {
                        if ((hour - lo) / 3) % 2 == 0 {
                            0.0
                        } else {
                            old
                        }
                    }
                };
                s.values[j] = new;
                if s.mask[j] && new != old {
                    labels.push(GroundTruthLabel {
                        cell_id: cell.clone(),
                        hour,
                        is_anomalous: true,
                        kind: LabelKind::Class2,
                    });
                }
            }
        }
        InjectionSpec::Mobility {
            center,
            radius_m,
            peak_factor,
            window,
        } => {
            for id in cells_in_area(deployment, *center, *radius_m) {
                let Some(&i) = pos.get(&id) else {
                    continue;
                };
                let s = &mut series[i];
                if !in_span(s) {
                    return Err(Error::invalid("injection window outside telemetry span"));
                }
                for hour in lo..=hi {
                    let j = (hour - s.start) as usize;
                    let f = mobility_profile(hour, *window, *peak_factor);
                    s.values[j] = round_centi((s.values[j] * f).clamp(0.0, 100.0));
                    labels.push(GroundTruthLabel {
                        cell_id: id.clone(),
                        hour,
                        is_anomalous: false,
                        kind: LabelKind::Mobility,
                    });
                }
            }
        }
    }
    Ok(labels)
}

/// A generated scenario: deployment, telemetry after injections, labels and
/// the regional split used to place injections.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub deployment: Vec<CellMeta>,
    pub telemetry: Vec<KpiSeries>,
    pub labels: Vec<GroundTruthLabel>,
    pub splits: SplitSpec,
    pub injections: Vec<InjectionSpec>,
}

/// Chooses automatic injections from the counts in `cfg`: at most one
/// injected cell per sector, never inside a mobility area, windows after
/// `inject_after_day`.
pub fn plan_injections(cfg: &ScenarioConfig, deployment: &[CellMeta], splits: &SplitSpec) -> Vec<InjectionSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.rng_seed, 2));
    let eligible: Vec<&CellMeta> = deployment
        .iter()
        .filter(|c| cfg.inject_split.is_none_or(|s| splits.of(&c.cell_id) == Some(s)))
        .collect();
    let end = cfg.start + (cfg.days * 24) as Hour;
    let earliest = cfg.start + (cfg.inject_after_day * 24) as Hour;
    let mut out = Vec::new();

    let mut blocked: BTreeSet<String> = BTreeSet::new();
    if cfg.mobility_events > 0 && !eligible.is_empty() {
        let n = eligible.len() as f64;
        let cx = eligible.iter().map(|c| c.x).sum::<f64>() / n;
        let cy = eligible.iter().map(|c| c.y).sum::<f64>() / n;
        // Snap to the cell nearest the centroid so the event always hits cells.
        let centre = eligible
            .iter()
            .min_by(|a, b| {
                (a.x - cx)
                    .hypot(a.y - cy)
                    .total_cmp(&(b.x - cx).hypot(b.y - cy))
                    .then(a.cell_id.cmp(&b.cell_id))
            })
            .map(|c| (c.x, c.y))
            .expect("non-empty");
        for e in 0..cfg.mobility_events {
            let day = cfg.mobility_day.unwrap_or(cfg.inject_after_day + 3) + 2 * e;
            let lo = cfg.start + (day * 24 + 15) as Hour;
            let hi = lo + cfg.mobility_hours as Hour - 1;
            if hi >= end {
                break;
            }
            blocked.extend(cells_in_area(deployment, centre, cfg.mobility_radius_m));
            out.push(InjectionSpec::Mobility {
                center: centre,
                radius_m: cfg.mobility_radius_m,
                window: (lo, hi),
                peak_factor: cfg.mobility_magnitude,
            });
        }
    }

    let mut pool: Vec<&CellMeta> = eligible.into_iter().filter(|c| !blocked.contains(&c.cell_id)).collect();
    pool.shuffle(&mut rng);
    let mut used_sectors = BTreeSet::new();
    let mut pick = |rng: &mut ChaCha8Rng, hours: usize| -> Option<(String, (Hour, Hour))> {
        let latest = end - hours as Hour;
        if latest <= earliest {
            return None;
        }
        while let Some(c) = pool.pop() {
            if used_sectors.insert(c.sector_id.clone()) {
                let lo = rng.random_range(earliest..latest);
                return Some((c.cell_id.clone(), (lo, lo + hours as Hour - 1)));
            }
        }
        None
    };
    let modes = [Class2Mode::Off, Class2Mode::Flapping, Class2Mode::Saturated];
    for i in 0..cfg.n_class2 {
        let Some((cell, window)) = pick(&mut rng, cfg.class2_hours) else {
            break;
        };
        out.push(InjectionSpec::Class2 {
            cell,
            window,
            mode: modes[i % modes.len()],
        });
    }
    for _ in 0..cfg.n_class1 {
        let hours = rng.random_range(cfg.class1_min_hours..=cfg.class1_max_hours.max(cfg.class1_min_hours));
        let Some((cell, window)) = pick(&mut rng, hours) else {
            break;
        };
        out.push(InjectionSpec::Class1 {
            cell,
            window,
            magnitude: Magnitude::Relative(cfg.class1_magnitude),
        });
    }
    out
}

/// Generates deployment and telemetry, then applies the explicit and planned
/// injections in that order.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let deployment = generate_deployment(cfg);
    let mut telemetry = generate_traffic(&deployment, cfg);
    let splits = split_by_region(&deployment, cfg.split_fractions, Axis::X)?;
    let mut injections = cfg.injections.clone();
    injections.extend(plan_injections(cfg, &deployment, &splits));
    let mut labels = Vec::new();
    for spec in &injections {
        labels.extend(inject(&mut telemetry, &deployment, spec)?);
    }
    labels.sort();
    labels.dedup_by(|a, b| a.cell_id == b.cell_id && a.hour == b.hour && a.kind == b.kind);
    Ok(Scenario {
        deployment,
        telemetry,
        labels,
        splits,
        injections,
    })
}

/// Groups per-hour labels into maximal `(cell, kind, start, end)` windows.
pub fn label_windows(labels: &[GroundTruthLabel]) -> Vec<(String, LabelKind, Hour, Hour)> {
    let mut sorted: Vec<&GroundTruthLabel> = labels.iter().collect();
    sorted.sort_by(|a, b| (a.cell_id.as_str(), a.kind, a.hour).cmp(&(b.cell_id.as_str(), b.kind, b.hour)));
    let mut out: Vec<(String, LabelKind, Hour, Hour)> = Vec::new();
    for l in sorted {
        match out.last_mut() {
            Some((c, k, _, end)) if *c == l.cell_id && *k == l.kind && *end + 1 >= l.hour => {
                *end = (*end).max(l.hour);
            }
            _ => out.push((l.cell_id.clone(), l.kind, l.hour, l.hour)),
        }
    }
    out
}

/// Chooses which split the automatic injections target.
pub(crate) fn parse_inject_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other.parse().map(Some),
    }
}

#[cfg(test)]
mod tests;
