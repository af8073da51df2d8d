//! Cell telemetry ingestion, cleaning, neighborhood construction and
//! regional splits.
//!
//! Hours are represented as `i64` offsets since the Unix epoch. All series in
//! a [`GraphSample`] are in the log-normalized domain (see [`log_normalize`]).

pub mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the one-hot cell attribute vector.
pub const ATTR_WIDTH: usize = 15;
/// Positions `0..ANTENNA_SLOTS` encode antenna type, the rest frequency band.
pub const ANTENNA_SLOTS: usize = 8;
pub const BAND_SLOTS: usize = ATTR_WIDTH - ANTENNA_SLOTS;

pub type Hour = i64;

/// Static description of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell_id: String,
    pub site_id: String,
    pub sector_id: String,
    pub x: f64,
    pub y: f64,
    pub attrs: [u8; ATTR_WIDTH],
}

impl CellMeta {
    /// Builds a cell whose attribute vector has exactly two hot positions:
    /// `antenna` in `0..8` and `band` in `8..15`.
    pub fn new(
        cell_id: impl Into<String>,
        site_id: impl Into<String>,
        sector_id: impl Into<String>,
        (x, y): (f64, f64),
        antenna: usize,
        band: usize,
    ) -> Result<Self> {
        if antenna >= ANTENNA_SLOTS {
            return Err(Error::invalid(format!(
                "antenna index {antenna} outside 0..{ANTENNA_SLOTS}"
            )));
        }
        if !(ANTENNA_SLOTS..ATTR_WIDTH).contains(&band) {
            return Err(Error::invalid(format!(
                "band index {band} outside {ANTENNA_SLOTS}..{ATTR_WIDTH}"
            )));
        }
        let mut attrs = [0u8; ATTR_WIDTH];
        attrs[antenna] = 1;
        attrs[band] = 1;
        Ok(Self {
            cell_id: cell_id.into(),
            site_id: site_id.into(),
            sector_id: sector_id.into(),
            x,
            y,
            attrs,
        })
    }

    /// The hot antenna and band positions, if the vector is well formed.
    pub fn attr_indices(&self) -> Option<(usize, usize)> {
        let a = (0..ANTENNA_SLOTS).find(|&i| self.attrs[i] == 1)?;
        let b = (ANTENNA_SLOTS..ATTR_WIDTH).find(|&i| self.attrs[i] == 1)?;
        Some((a, b))
    }

    pub fn attrs_f64(&self) -> [f64; ATTR_WIDTH] {
        self.attrs.map(f64::from)
    }

    pub fn distance(&self, other: &CellMeta) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Hourly PRB utilization (percent) of one cell. `mask[i]` is true when
/// `values[i]` was observed.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiSeries {
    pub cell_id: String,
    pub start: Hour,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl KpiSeries {
    pub fn fully_observed(cell_id: impl Into<String>, start: Hour, values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self {
            cell_id: cell_id.into(),
            start,
            values,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Exclusive end hour.
    pub fn end(&self) -> Hour {
        self.start + self.values.len() as Hour
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 1.0;
        }
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }

    pub fn at(&self, hour: Hour) -> Option<f64> {
        let i = hour - self.start;
        (i >= 0 && (i as usize) < self.values.len()).then(|| self.values[i as usize])
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.mask.len() {
            return Err(Error::shape(format!(
                "cell {}: {} values but {} mask entries",
                self.cell_id,
                self.values.len(),
                self.mask.len()
            )));
        }
        for (v, m) in self.values.iter().zip(&self.mask) {
            if *m && !(0.0..=100.0).contains(v) {
                return Err(Error::invalid(format!(
                    "cell {}: observed value {v} outside [0, 100]",
                    self.cell_id
                )));
            }
        }
        Ok(())
    }
}

/// Returns the cells whose missing fraction is at most `max_missing_frac`.
pub fn filter_cells(series: &[KpiSeries], max_missing_frac: f64) -> Result<BTreeSet<String>> {
    if series.is_empty() {
        return Err(Error::NoTelemetry);
    }
    if !(0.0..=1.0).contains(&max_missing_frac) {
        return Err(Error::invalid(format!(
            "max_missing_frac {max_missing_frac} outside [0, 1]"
        )));
    }
    Ok(series
        .iter()
        .filter(|s| s.missing_fraction() <= max_missing_frac)
        .map(|s| s.cell_id.clone())
        .collect())
}

/// Fills missing hours with the last observed value; leading gaps take the
/// first observed value. Observed values and the mask are left untouched.
pub fn impute_series(series: &KpiSeries) -> Result<KpiSeries> {
    series.validate()?;
    let first = series
        .mask
        .iter()
        .position(|m| *m)
        .ok_or_else(|| Error::UnimputableCell(series.cell_id.clone()))?;
    let mut out = series.clone();
    let mut carry = series.values[first];
    for (v, observed) in out.values.iter_mut().zip(&series.mask) {
        if *observed {
            carry = *v;
        } else {
            *v = carry;
        }
    }
    Ok(out)
}

pub fn log_normalize(v: f64) -> Result<f64> {
    if v.is_nan() || v < 0.0 {
        return Err(Error::invalid(format!("cannot log-normalize {v}")));
    }
    Ok(v.ln_1p())
}

pub fn denormalize(y: f64) -> f64 {
    y.exp_m1()
}

/// Neighborhood and window sizes. The context window spans `lookback + 1`
/// hours `[t - lookback, t]`; the prediction window spans `horizon` hours
/// `[t + 1, t + horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    pub k: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            k: 200,
            lookback: 167,
            horizon: 24,
        }
    }
}

impl GraphParams {
    pub fn context_len(&self) -> usize {
        self.lookback + 1
    }
}

/// One target cell with its `k` nearest neighbors around anchor hour `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub target: Arc<CellMeta>,
    pub neighbors: Vec<Arc<CellMeta>>,
    pub anchor: Hour,
    /// Target over `[t - T, t]`.
    pub context_target: Vec<f64>,
    /// Each neighbor over `[t - T, t]`.
    pub context_neighbors: Vec<Vec<f64>>,
    /// Each neighbor over `[t + 1, t + L]`.
    pub pred_neighbors: Vec<Vec<f64>>,
    /// Target over `[t + 1, t + L]`; held out from the model.
    pub pred_target: Vec<f64>,
    pub target_context_mask: Vec<bool>,
    pub target_pred_mask: Vec<bool>,
}

impl GraphSample {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_target.len()
    }

    pub fn horizon(&self) -> usize {
        self.pred_target.len()
    }

    /// First hour of the context window.
    pub fn context_start(&self) -> Hour {
        self.anchor - self.context_len() as Hour + 1
    }

    /// True when at least one context hour of the target was observed.
    pub fn has_observed_context(&self) -> bool {
        self.target_context_mask.iter().any(|m| *m)
    }

    /// Returns a copy with neighbors reordered so that new position `i`
    /// holds old neighbor `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> GraphSample {
        let mut out = self.clone();
        out.neighbors = perm.iter().map(|&i| self.neighbors[i].clone()).collect();
        out.context_neighbors = perm.iter().map(|&i| self.context_neighbors[i].clone()).collect();
        out.pred_neighbors = perm.iter().map(|&i| self.pred_neighbors[i].clone()).collect();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let t1 = self.context_len();
        let l = self.horizon();
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        if self.context_neighbors.len() != k || self.pred_neighbors.len() != k {
            return Err(Error::shape("neighbor series count differs from k"));
        }
        if self.context_neighbors.iter().any(|s| s.len() != t1) {
            return Err(Error::shape("neighbor context length differs from target"));
        }
        if self.pred_neighbors.iter().any(|s| s.len() != l) {
            return Err(Error::shape("neighbor prediction length differs from target"));
        }
        Ok(())
    }
}

struct CellSeries {
    start: Hour,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl CellSeries {
    fn covers(&self, from: Hour, to_inclusive: Hour) -> bool {
        from >= self.start && to_inclusive < self.start + self.values.len() as Hour
    }

    fn slice(&self, from: Hour, len: usize) -> &[f64] {
        let i = (from - self.start) as usize;
        &self.values[i..i + len]
    }

    fn mask_slice(&self, from: Hour, len: usize) -> &[bool] {
        let i = (from - self.start) as usize;
        &self.mask[i..i + len]
    }
}

/// Pre-indexed deployment and normalized telemetry from which graph samples
/// are cut. Neighbor candidates are ranked by planar distance with ties broken
/// by ascending `cell_id`.
pub struct GraphIndex {
    cells: Vec<Arc<CellMeta>>,
    by_id: HashMap<String, usize>,
    series: Vec<Option<CellSeries>>,
    candidates: Vec<Vec<usize>>,
    params: GraphParams,
}

impl GraphIndex {
    /// `telemetry` must already be imputed; cells without telemetry stay in
    /// the index but never cover any window.
    pub fn new(deployment: &[CellMeta], telemetry: &[KpiSeries], params: GraphParams) -> Result<Self> {
        if params.k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let mut cells: Vec<Arc<CellMeta>> = deployment.iter().cloned().map(Arc::new).collect();
        cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
        let mut by_id = HashMap::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            if by_id.insert(c.cell_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate cell_id {}", c.cell_id)));
            }
        }
        let mut series: Vec<Option<CellSeries>> = (0..cells.len()).map(|_| None).collect();
        for s in telemetry {
            let &i = by_id
                .get(&s.cell_id)
                .ok_or_else(|| Error::UnknownCell(s.cell_id.clone()))?;
            s.validate()?;
            let values = s
                .values
                .iter()
                .map(|&v| {
                    if v.is_nan() {
                        Err(Error::invalid(format!("cell {} has unimputed gaps", s.cell_id)))
                    } else {
                        log_normalize(v.clamp(0.0, 100.0))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            series[i] = Some(CellSeries {
                start: s.start,
                values,
                mask: s.mask.clone(),
            });
        }
        let keep = (2 * params.k + 16).min(cells.len().saturating_sub(1));
        let candidates = (0..cells.len()).map(|i| nearest_cells(&cells, i, keep)).collect();
        Ok(Self {
            cells,
            by_id,
            series,
            candidates,
            params,
        })
    }

    pub fn params(&self) -> GraphParams {
        self.params
    }

    pub fn cells(&self) -> &[Arc<CellMeta>] {
        &self.cells
    }

    pub fn index_of(&self, cell_id: &str) -> Option<usize> {
        self.by_id.get(cell_id).copied()
    }

    pub fn meta(&self, cell_id: &str) -> Option<&Arc<CellMeta>> {
        self.index_of(cell_id).map(|i| &self.cells[i])
    }

    /// Normalized series of a cell starting at `from`, if covered.
    pub fn normalized(&self, cell_id: &str, from: Hour, len: usize) -> Option<&[f64]> {
        let s = self.series[self.index_of(cell_id)?].as_ref()?;
        let to = from + len as Hour - 1;
        s.covers(from, to).then(|| s.slice(from, len))
    }

    /// `[start, end)` hour span of a cell's telemetry.
    pub fn span(&self, cell_id: &str) -> Option<(Hour, Hour)> {
        let s = self.series[self.index_of(cell_id)?].as_ref()?;
        Some((s.start, s.start + s.values.len() as Hour))
    }

    /// Union span over all cells with telemetry.
    pub fn time_span(&self) -> Option<(Hour, Hour)> {
        let mut it = self.series.iter().flatten();
        let first = it.next()?;
        let mut lo = first.start;
        let mut hi = first.start + first.values.len() as Hour;
        for s in it {
            lo = lo.min(s.start);
            hi = hi.max(s.start + s.values.len() as Hour);
        }
        Some((lo, hi))
    }

    fn covers(&self, i: usize, from: Hour, to: Hour) -> bool {
        self.series[i].as_ref().is_some_and(|s| s.covers(from, to))
    }

    /// Whether the target's own telemetry spans `[anchor - T, anchor + L]`.
    /// Neighbor availability is only checked by [`GraphIndex::build`].
    pub fn target_covers(&self, target: &str, anchor: Hour) -> bool {
        let p = self.params;
        self.index_of(target)
            .is_some_and(|i| self.covers(i, anchor - p.lookback as Hour, anchor + p.horizon as Hour))
    }

    /// Cuts the graph sample of `target` anchored at hour `anchor`.
    pub fn build(&self, target: &str, anchor: Hour) -> Result<GraphSample> {
        let GraphParams { k, lookback, horizon } = self.params;
        let unavailable = |reason: &str| Error::SampleUnavailable {
            cell: target.to_string(),
            anchor,
            reason: reason.to_string(),
        };
        let ti = self
            .index_of(target)
            .ok_or_else(|| Error::UnknownCell(target.to_string()))?;
        let from = anchor - lookback as Hour;
        let to = anchor + horizon as Hour;
        if !self.covers(ti, from, to) {
            return Err(unavailable("insufficient target history"));
        }
        let mut chosen: Vec<usize> = self.candidates[ti]
            .iter()
            .copied()
            .filter(|&j| self.covers(j, from, to))
            .take(k)
            .collect();
        if chosen.len() < k && self.candidates[ti].len() < self.cells.len() - 1 {
            chosen = nearest_cells(&self.cells, ti, self.cells.len() - 1)
                .into_iter()
                .filter(|&j| self.covers(j, from, to))
                .take(k)
                .collect();
        }
        if chosen.len() < k {
            return Err(unavailable("fewer than k candidate cells"));
        }
        let t1 = lookback + 1;
        let ts = self.series[ti].as_ref().expect("covered");
        let series_of = |j: usize| self.series[j].as_ref().expect("covered");
        Ok(GraphSample {
            target: self.cells[ti].clone(),
            neighbors: chosen.iter().map(|&j| self.cells[j].clone()).collect(),
            anchor,
            context_target: ts.slice(from, t1).to_vec(),
            context_neighbors: chosen.iter().map(|&j| series_of(j).slice(from, t1).to_vec()).collect(),
            pred_neighbors: chosen
                .iter()
                .map(|&j| series_of(j).slice(anchor + 1, horizon).to_vec())
                .collect(),
            pred_target: ts.slice(anchor + 1, horizon).to_vec(),
            target_context_mask: ts.mask_slice(from, t1).to_vec(),
            target_pred_mask: ts.mask_slice(anchor + 1, horizon).to_vec(),
        })
    }

    /// Samples for every `(anchor, cell)` in `anchors × cells`, ordered by
    /// anchor then `cell_id`. Infeasible pairs are skipped and counted.
    pub fn sliding<'a>(&'a self, cells: &[String], anchors: std::ops::Range<Hour>) -> SlidingSamples<'a> {
        let mut cells = cells.to_vec();
        cells.sort();
        cells.dedup();
        SlidingSamples {
            index: self,
            cells,
            anchors,
            next_anchor: None,
            cell_pos: 0,
            skipped: 0,
        }
    }
}

/// The `keep` nearest other cells to `target`, sorted by (distance, cell_id).
fn nearest_cells(cells: &[Arc<CellMeta>], target: usize, keep: usize) -> Vec<usize> {
    let t = &cells[target];
    let mut all: Vec<(f64, usize)> = cells
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(j, c)| (t.distance(c), j))
        .collect();
    // Cells are sorted by id, so index order is id order.
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keep < all.len() {
        all.select_nth_unstable_by(keep, cmp);
        all.truncate(keep);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(_, j)| j).collect()
}

/// Builds a single sample without keeping an index around.
pub fn build_graph_sample(
    deployment: &[CellMeta],
    telemetry: &[KpiSeries],
    target: &str,
    anchor: Hour,
    params: GraphParams,
) -> Result<GraphSample> {
    GraphIndex::new(deployment, telemetry, params)?.build(target, anchor)
}

/// Deterministic stream of graph samples; see [`GraphIndex::sliding`].
pub struct SlidingSamples<'a> {
    index: &'a GraphIndex,
    cells: Vec<String>,
    anchors: std::ops::Range<Hour>,
    next_anchor: Option<Hour>,
    cell_pos: usize,
    skipped: usize,
}

impl SlidingSamples<'_> {
    /// Number of infeasible `(cell, anchor)` pairs passed over so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for SlidingSamples<'_> {
    type Item = GraphSample;

    fn next(&mut self) -> Option<GraphSample> {
        loop {
            if self.cells.is_empty() {
                return None;
            }
            let anchor = *self.next_anchor.get_or_insert(self.anchors.start);
            if anchor >= self.anchors.end {
                return None;
            }
            let cell = &self.cells[self.cell_pos];
            self.cell_pos += 1;
            if self.cell_pos == self.cells.len() {
                self.cell_pos = 0;
                self.next_anchor = Some(anchor + 1);
            }
            match self.index.build(cell, anchor) {
                Ok(s) => return Some(s),
                Err(_) => self.skipped += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            other => Err(Error::invalid(format!("unknown axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub assignment: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
}

impl SplitSpec {
    pub fn cells(&self, split: Split) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn of(&self, cell_id: &str) -> Option<Split> {
        self.assignment.get(cell_id).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in self.assignment.values() {
            out[*s as usize] += 1;
        }
        out
    }
}

/// Sweeps cells along `axis` and cuts the ordering at the cumulative-count
/// quantiles of `fractions` (train, validation, test).
pub fn split_by_region(deployment: &[CellMeta], fractions: [f64; 3], axis: Axis) -> Result<SplitSpec> {
    let n = deployment.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 cells to split, got {n}")));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let key = |c: &CellMeta| match axis {
        Axis::X => (c.x, c.y),
        Axis::Y => (c.y, c.x),
    };
    let mut order: Vec<&CellMeta> = deployment.iter().collect();
    order.sort_by(|a, b| {
        let (a0, a1) = key(a);
        let (b0, b1) = key(b);
        a0.total_cmp(&b0)
            .then(a1.total_cmp(&b1))
            .then_with(|| a.cell_id.cmp(&b.cell_id))
    });
    let cut1 = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let cut2 = (((fractions[0] + fractions[1]) * n as f64).round() as usize).clamp(cut1 + 1, n - 1);
    let assignment = order
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let split = if i < cut1 {
                Split::Train
            } else if i < cut2 {
                Split::Validation
            } else {
                Split::Test
            };
            (c.cell_id.clone(), split)
        })
        .collect();
    Ok(SplitSpec { assignment, fractions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_deployment(xs: &[f64]) -> Vec<CellMeta> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                CellMeta::new(format!("c{i:02}"), format!("s{i}"), format!("s{i}-0"), (x, 0.0), 0, 8).unwrap()
            })
            .collect()
    }

    fn flat_telemetry(cells: &[CellMeta], start: Hour, len: usize) -> Vec<KpiSeries> {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let values = (0..len).map(|h| ((h + i) % 50) as f64).collect();
                KpiSeries::fully_observed(c.cell_id.clone(), start, values)
            })
            .collect()
    }

    fn with_missing(id: &str, n: usize, missing: usize) -> KpiSeries {
        let mut s = KpiSeries::fully_observed(id, 0, vec![10.0; n]);
        for m in s.mask.iter_mut().take(missing) {
            *m = false;
        }
        s
    }

    #[test]
    fn filter_drops_mostly_missing_cells() {
        let series = vec![
            with_missing("a", 100, 0),
            with_missing("b", 100, 30),
            with_missing("c", 100, 51),
            with_missing("d", 100, 90),
            with_missing("e", 10, 6),
        ];
        let kept = filter_cells(&series, 0.5).unwrap();
        assert_eq!(kept, ["a", "b"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let kept = filter_cells(&[with_missing("half", 10, 5)], 0.5).unwrap();
        assert!(kept.contains("half"));
    }

    #[test]
    fn filter_empty_is_error() {
        assert!(matches!(filter_cells(&[], 0.5), Err(Error::NoTelemetry)));
    }

    fn series_with_gaps(vals: &[Option<f64>]) -> KpiSeries {
        KpiSeries {
            cell_id: "x".into(),
            start: 0,
            values: vals.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            mask: vals.iter().map(Option::is_some).collect(),
        }
    }

    #[test]
    fn impute_carries_forward() {
        let s = series_with_gaps(&[Some(5.0), None, None, Some(9.0)]);
        let out = impute_series(&s).unwrap();
        assert_eq!(out.values, vec![5.0, 5.0, 5.0, 9.0]);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn impute_backfills_leading_gap() {
        let s = series_with_gaps(&[None, None, Some(3.0), None]);
        assert_eq!(impute_series(&s).unwrap().values, vec![3.0; 4]);
    }

    #[test]
    fn impute_identity_on_complete_data() {
        let s = KpiSeries::fully_observed("x", 3, vec![1.0, 2.5, 0.0]);
        assert_eq!(impute_series(&s).unwrap(), s);
    }

    #[test]
    fn impute_all_missing_fails() {
        let s = series_with_gaps(&[None, None]);
        assert!(matches!(impute_series(&s), Err(Error::UnimputableCell(_))));
    }

    #[test]
    fn log_normalize_values() {
        assert_eq!(log_normalize(0.0).unwrap(), 0.0);
        assert!((log_normalize(100.0).unwrap() - 4.61512).abs() < 1e-5);
        let v = 37.5;
        assert!((denormalize(log_normalize(v).unwrap()) - v).abs() <= 1e-12 * v);
        assert!(log_normalize(-0.1).is_err());
    }

    #[test]
    fn neighbors_on_a_line() {
        let dep = line_deployment(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let tel = flat_telemetry(&dep, 0, 10);
        let params = GraphParams {
            k: 2,
            lookback: 2,
            horizon: 2,
        };
        let s = build_graph_sample(&dep, &tel, "c00", 4, params).unwrap();
        let ids: Vec<_> = s.neighbors.iter().map(|c| c.cell_id.as_str()).collect();
        assert_eq!(ids, ["c01", "c02"]);
        assert_eq!(s.context_target.len(), 3);
        assert_eq!(s.pred_target.len(), 2);
    }

    #[test]
    fn single_candidate_is_neighbor_regardless_of_distance() {
        let dep = line_deployment(&[0.0, 5000.0]);
        let tel = flat_telemetry(&dep, 0, 10);
        let params = GraphParams {
            k: 1,
            lookback: 3,
            horizon: 2,
        };
        let s = build_graph_sample(&dep, &tel, "c00", 5, params).unwrap();
        assert_eq!(s.neighbors[0].cell_id, "c01");
    }

    #[test]
    fn ties_break_by_cell_id() {
        let dep = line_deployment(&[0.0, -1.0, 1.0]);
        let tel = flat_telemetry(&dep, 0, 10);
        let params = GraphParams {
            k: 1,
            lookback: 1,
            horizon: 1,
        };
        let s = build_graph_sample(&dep, &tel, "c00", 3, params).unwrap();
        assert_eq!(s.neighbors[0].cell_id, "c01");
    }

    #[test]
    fn sample_windows_are_aligned() {
        let dep = line_deployment(&[0.0, 1.0]);
        let tel = vec![
            KpiSeries::fully_observed("c00", 10, (0..20).map(f64::from).collect()),
            KpiSeries::fully_observed("c01", 10, (0..20).map(|h| f64::from(h) * 2.0).collect()),
        ];
        let params = GraphParams {
            k: 1,
            lookback: 2,
            horizon: 3,
        };
        let s = build_graph_sample(&dep, &tel, "c00", 15, params).unwrap();
        let norm = |v: f64| v.ln_1p();
        assert_eq!(s.context_target, vec![norm(3.0), norm(4.0), norm(5.0)]);
        assert_eq!(s.pred_target, vec![norm(6.0), norm(7.0), norm(8.0)]);
        assert_eq!(s.pred_neighbors[0], vec![norm(12.0), norm(14.0), norm(16.0)]);
    }

    #[test]
    fn insufficient_history_is_unavailable() {
        let dep = line_deployment(&[0.0, 1.0]);
        let tel = flat_telemetry(&dep, 0, 10);
        let params = GraphParams {
            k: 1,
            lookback: 5,
            horizon: 2,
        };
        assert!(matches!(
            build_graph_sample(&dep, &tel, "c00", 3, params),
            Err(Error::SampleUnavailable { .. })
        ));
        assert!(matches!(
            build_graph_sample(&dep, &tel, "c00", 8, params),
            Err(Error::SampleUnavailable { .. })
        ));
        let params = GraphParams {
            k: 2,
            lookback: 1,
            horizon: 1,
        };
        assert!(build_graph_sample(&dep, &tel, "c00", 5, params).is_err());
    }

    #[test]
    fn sliding_counts_feasible_anchors() {
        let dep = line_deployment(&[0.0, 1.0, 2.0]);
        let mut tel = flat_telemetry(&dep, 0, 20);
        // c02 starts two hours late.
        tel[2] = KpiSeries::fully_observed("c02", 2, vec![1.0; 18]);
        let params = GraphParams {
            k: 1,
            lookback: 3,
            horizon: 2,
        };
        let index = GraphIndex::new(&dep, &tel, params).unwrap();
        let cells: Vec<String> = dep.iter().map(|c| c.cell_id.clone()).collect();
        let mut stream = index.sliding(&cells, 3..8);
        let samples: Vec<_> = stream.by_ref().collect();
        assert_eq!(samples.len(), 13);
        assert_eq!(stream.skipped(), 2);
        let order: Vec<_> = samples.iter().map(|s| (s.anchor, s.target.cell_id.clone())).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn sliding_with_no_history_is_empty() {
        let dep = line_deployment(&(0..10).map(f64::from).collect::<Vec<_>>());
        let tel = flat_telemetry(&dep, 0, 5);
        let params = GraphParams {
            k: 2,
            lookback: 10,
            horizon: 2,
        };
        let index = GraphIndex::new(&dep, &tel, params).unwrap();
        let cells: Vec<String> = dep.iter().map(|c| c.cell_id.clone()).collect();
        let mut stream = index.sliding(&cells, 0..4);
        assert_eq!(stream.by_ref().count(), 0);
        assert_eq!(stream.skipped(), 40);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let dep = line_deployment(&(0..100).map(f64::from).collect::<Vec<_>>());
        let spec = split_by_region(&dep, [0.7, 0.1, 0.2], Axis::X).unwrap();
        assert_eq!(spec.sizes(), [70, 10, 20]);

        let dep = line_deployment(&[0.0, 1.0, 2.0]);
        let third = 1.0 / 3.0;
        let spec = split_by_region(&dep, [third, third, 1.0 - 2.0 * third], Axis::X).unwrap();
        assert_eq!(spec.sizes(), [1, 1, 1]);
    }

    #[test]
    fn split_sweeps_along_axis() {
        let dep = line_deployment(&(1..=10).rev().map(f64::from).collect::<Vec<_>>());
        let spec = split_by_region(&dep, [0.7, 0.1, 0.2], Axis::X).unwrap();
        for c in &dep {
            let want = match c.x as i32 {
                1..=7 => Split::Train,
                8 => Split::Validation,
                _ => Split::Test,
            };
            assert_eq!(spec.of(&c.cell_id), Some(want), "{}", c.x);
        }
    }

    #[test]
    fn split_rejects_tiny_or_bad_input() {
        let dep = line_deployment(&[0.0, 1.0]);
        assert!(split_by_region(&dep, [0.7, 0.1, 0.2], Axis::X).is_err());
        let dep = line_deployment(&[0.0, 1.0, 2.0, 3.0]);
        assert!(split_by_region(&dep, [0.7, 0.1, 0.1], Axis::X).is_err());
        assert!(split_by_region(&dep, [0.9, 0.0, 0.1], Axis::X).is_err());
    }

    #[test]
    fn attribute_indices_round_trip() {
        let c = CellMeta::new("a", "s", "s-1", (0.0, 0.0), 3, 12).unwrap();
        assert_eq!(c.attr_indices(), Some((3, 12)));
        assert_eq!(c.attrs.iter().map(|&a| a as usize).sum::<usize>(), 2);
        assert!(CellMeta::new("a", "s", "s", (0.0, 0.0), 8, 12).is_err());
        assert!(CellMeta::new("a", "s", "s", (0.0, 0.0), 0, 7).is_err());
    }
}
