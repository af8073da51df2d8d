//! End-to-end commands: scenario generation, training, calibration,
//! detection and evaluation.
//!
//! All commands read one flat key-value configuration (see
//! [`crate::config`]). Scenario, training, detector and pipeline keys may
//! share a file; every command rejects keys that none of them know.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::config::KvConfig;
use crate::detector::{
    all_periods, consolidate, judge_all, long_periods, read_report, write_calibration, write_report, write_verdicts,
    AnomalyPeriod, CalibrationFiles, Classifier, DetectorConfig, FilterReason, PeriodClass, SampleVerdict,
    DETECTOR_KEYS,
};
use crate::error::{Error, Result};
use crate::graph_data::io::{
    create_file, read_deployment, read_splits, read_telemetry, write_deployment, write_splits, write_telemetry,
};
use crate::graph_data::{
    filter_cells, impute_series, split_by_region, Axis, CellMeta, GraphIndex, GraphParams, Hour, KpiSeries, Split,
    SplitSpec,
};
use crate::predictor::{AttentionScore, Dims, Hyper, PredictorParams};
use crate::synth::{
    generate_scenario, label_windows, read_labels, write_labels, GroundTruthLabel, LabelKind, ScenarioConfig,
    SCENARIO_KEYS,
};
use crate::trainer::{
    evaluate, resume, training_mean, write_log, CheckpointPaths, EvalMetrics, IndexedSamples, SampleSource,
    TrainConfig, TrainState, TRAIN_KEYS,
};

pub const PIPELINE_KEYS: [&str; 21] = [
    "out_dir",
    "telemetry",
    "deployment",
    "splits",
    "labels",
    "model",
    "k",
    "lookback",
    "horizon",
    "max_missing_frac",
    "train_days",
    "train_stride",
    "eval_stride",
    "detect_stride",
    "calibrate_split",
    "detect_split",
    "attention_score",
    "scale_hidden",
    "embed_hidden",
    "d_k",
    "readout_hidden",
];

/// Label windows of one cell and kind closer than this are one event;
/// flapping injections leave gaps where the value did not change.
const LABEL_MERGE_GAP_HOURS: Hour = 6;

/// Every key any command accepts.
pub fn known_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = PIPELINE_KEYS.to_vec();
    keys.extend_from_slice(SCENARIO_KEYS);
    keys.extend_from_slice(&TRAIN_KEYS);
    keys.extend_from_slice(&DETECTOR_KEYS);
    keys.sort_unstable();
    keys.dedup();
    keys
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub telemetry: PathBuf,
    pub deployment: PathBuf,
    pub splits: PathBuf,
    pub labels: PathBuf,
    pub model: PathBuf,
}

impl Paths {
    /// Default layout: every file lives in `out_dir`.
    pub fn in_dir(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            telemetry: out_dir.join("telemetry.csv"),
            deployment: out_dir.join("deployment.csv"),
            splits: out_dir.join("splits.csv"),
            labels: out_dir.join("labels.csv"),
            model: out_dir.join("model.json"),
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub graph: GraphParams,
    pub hyper: Hyper,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub seed: u64,
    /// Cells missing more than this fraction of hours are dropped.
    pub max_missing_frac: f64,
    /// Training windows lie within the first `train_days` days of telemetry;
    /// 0 uses the whole span.
    pub train_days: usize,
    pub train_stride: usize,
    /// Anchor stride for validation during training and for `evaluate`.
    pub eval_stride: usize,
    pub detect_stride: usize,
    /// `None` uses every cell.
    pub calibrate_split: Option<Split>,
    pub detect_split: Option<Split>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::in_dir(Path::new("out")),
            graph: GraphParams::default(),
            hyper: Hyper::default(),
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            seed: 0,
            max_missing_frac: 0.2,
            train_days: 14,
            train_stride: 1,
            eval_stride: 6,
            detect_stride: 1,
            calibrate_split: Some(Split::Validation),
            detect_split: Some(Split::Test),
        }
    }
}

fn parse_split_choice(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other.parse().map(Some),
    }
}

impl PipelineConfig {
    /// `out_dir` (from `--out`) wins over the `out_dir` key; file keys win
    /// over the layout derived from the output directory.
    pub fn from_kv(kv: &KvConfig, out_dir: Option<&Path>) -> Result<Self> {
        kv.check_keys(&known_keys())?;
        let d = Self::default();
        let out = match out_dir {
            Some(p) => p.to_path_buf(),
            None => kv
                .get_str("out_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| d.paths.out_dir.clone()),
        };
        let layout = Paths::in_dir(&out);
        let path = |key: &str, default: PathBuf| kv.get_str(key).map(PathBuf::from).unwrap_or(default);
        let paths = Paths {
            telemetry: path("telemetry", layout.telemetry.clone()),
            deployment: path("deployment", layout.deployment.clone()),
            splits: path("splits", layout.splits.clone()),
            labels: path("labels", layout.labels.clone()),
            model: path("model", layout.model.clone()),
            out_dir: out,
        };
        let graph = GraphParams {
            k: kv.get("k", d.graph.k)?,
            lookback: kv.get("lookback", d.graph.lookback)?,
            horizon: kv.get("horizon", d.graph.horizon)?,
        };
        let hyper = Hyper {
            scale_hidden: kv.get("scale_hidden", d.hyper.scale_hidden)?,
            embed_hidden: kv.get("embed_hidden", d.hyper.embed_hidden)?,
            d_k: kv.get("d_k", d.hyper.d_k)?,
            readout_hidden: kv.get("readout_hidden", d.hyper.readout_hidden)?,
            score: kv.get::<AttentionScore>("attention_score", d.hyper.score)?,
        };
        let choice = |key: &str, default: Option<Split>| -> Result<Option<Split>> {
            match kv.get_str(key) {
                Some(s) => parse_split_choice(s).map_err(|e| kv.error_at(key, e.to_string())),
                None => Ok(default),
            }
        };
        let train = TrainConfig::from_kv(&kv.restricted(&TRAIN_KEYS), &d.train)?;
        let cfg = Self {
            paths,
            graph,
            hyper,
            seed: train.rng_seed,
            detector: DetectorConfig::from_kv(&kv.restricted(&DETECTOR_KEYS), &d.detector)?,
            train,
            max_missing_frac: kv.get("max_missing_frac", d.max_missing_frac)?,
            train_days: kv.get("train_days", d.train_days)?,
            train_stride: kv.get("train_stride", d.train_stride)?,
            eval_stride: kv.get("eval_stride", d.eval_stride)?,
            detect_stride: kv.get("detect_stride", d.detect_stride)?,
            calibrate_split: choice("calibrate_split", d.calibrate_split)?,
            detect_split: choice("detect_split", d.detect_split)?,
        };
        cfg.validate().map_err(|e| kv.attribute(e, &PIPELINE_KEYS))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.k < 2 {
            return Err(Error::invalid(format!(
                "k must be at least 2 for non-degenerate contexts, got {}",
                self.graph.k
            )));
        }
        if self.graph.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_missing_frac) {
            return Err(Error::invalid("max_missing_frac must lie in [0, 1]"));
        }
        if self.train_stride == 0 || self.eval_stride == 0 || self.detect_stride == 0 {
            return Err(Error::invalid(
                "train_stride, eval_stride and detect_stride must be positive",
            ));
        }
        if self.hyper.scale_hidden == 0
            || self.hyper.embed_hidden == 0
            || self.hyper.d_k == 0
            || self.hyper.readout_hidden == 0
        {
            return Err(Error::invalid(
                "network widths (scale_hidden, embed_hidden, d_k, readout_hidden) must be positive",
            ));
        }
        self.train.validate()?;
        self.detector.validate()
    }

    pub fn dims(&self) -> Dims {
        Dims::from_graph(self.graph)
    }

    /// Fails with a validation error naming the first missing input.
    pub fn require(&self, inputs: &[&Path]) -> Result<()> {
        for p in inputs {
            if !p.exists() {
                return Err(Error::invalid(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Deployment, telemetry and splits prepared for sampling.
pub struct Dataset {
    pub deployment: Vec<CellMeta>,
    /// Telemetry of the retained cells before imputation.
    pub raw: Vec<KpiSeries>,
    pub index: GraphIndex,
    pub splits: SplitSpec,
    /// Hours spanned by the retained telemetry, `[start, end)`.
    pub span: (Hour, Hour),
    pub dropped_cells: usize,
}

impl Dataset {
    /// Reads the input files; without a splits file a regional split is
    /// derived from the deployment.
    pub fn load(cfg: &PipelineConfig, graph: GraphParams) -> Result<Self> {
        let p = &cfg.paths;
        cfg.require(&[&p.deployment, &p.telemetry])?;
        let deployment = read_deployment(&p.deployment)?;
        let telemetry = read_telemetry(&p.telemetry)?;
        let splits = if p.splits.exists() {
            read_splits(&p.splits)?
        } else {
            log::warn!(
                "{} not found; splitting cells along x with fractions 0.7/0.1/0.2",
                p.splits.display()
            );
            split_by_region(&deployment, [0.7, 0.1, 0.2], Axis::X)?
        };
        Self::from_parts(deployment, telemetry, splits, graph, cfg.max_missing_frac)
    }

    pub fn from_parts(
        deployment: Vec<CellMeta>,
        telemetry: Vec<KpiSeries>,
        splits: SplitSpec,
        graph: GraphParams,
        max_missing_frac: f64,
    ) -> Result<Self> {
        let keep = filter_cells(&telemetry, max_missing_frac)?;
        let dropped_cells = telemetry.len() - keep.len();
        if dropped_cells > 0 {
            log::info!("dropped {dropped_cells} cells above the missing-data threshold");
        }
        let raw: Vec<KpiSeries> = telemetry.into_iter().filter(|s| keep.contains(&s.cell_id)).collect();
        let imputed = raw.iter().map(impute_series).collect::<Result<Vec<_>>>()?;
        let index = GraphIndex::new(&deployment, &imputed, graph)?;
        let span = index.time_span().ok_or(Error::NoTelemetry)?;
        Ok(Self {
            deployment,
            raw,
            index,
            splits,
            span,
            dropped_cells,
        })
    }

    /// Anchors whose full window fits inside the global telemetry span.
    pub fn anchors(&self) -> Range<Hour> {
        let p = self.index.params();
        let lo = self.span.0 + p.lookback as Hour;
        let hi = self.span.1 - p.horizon as Hour;
        lo..hi.max(lo)
    }

    /// Retained cells of `split`, or all retained cells.
    pub fn cells(&self, split: Option<Split>) -> Vec<String> {
        self.raw
            .iter()
            .map(|s| s.cell_id.clone())
            .filter(|c| split.is_none_or(|sp| self.splits.of(c) == Some(sp)))
            .collect()
    }

    pub fn source(&self, split: Option<Split>, stride: usize) -> IndexedSamples<'_> {
        IndexedSamples::new(&self.index, &self.cells(split), self.anchors(), stride)
    }

    /// Training-split samples whose windows end within the first `days`
    /// days of the span (all of it for 0).
    pub fn training_source(&self, days: usize, stride: usize) -> IndexedSamples<'_> {
        let mut anchors = self.anchors();
        if days > 0 {
            let end = self.span.0 + 24 * days as Hour - self.index.params().horizon as Hour;
            anchors.end = anchors.end.min(end).max(anchors.start);
        }
        IndexedSamples::new(&self.index, &self.cells(Some(Split::Train)), anchors, stride)
    }

    /// Mean raw utilization of the training cells, the scale of `norm_mae`.
    pub fn train_mean(&self) -> Result<f64> {
        training_mean(&self.raw, &self.cells(Some(Split::Train)), self.span.0, self.span.1)
    }
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut w = create_file(path)?;
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_summary(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let rows: Vec<String> = rows.iter().map(|(k, v)| format!("{k},{v}")).collect();
    write_rows(path, "metric,value", &rows)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub struct Generated {
    pub cells: usize,
    pub hours: usize,
    pub labels: usize,
    pub injections: usize,
}

/// Generates a scenario from the scenario keys of `kv` and writes
/// deployment, telemetry, splits and labels.
pub fn cmd_generate(kv: &KvConfig, cfg: &PipelineConfig) -> Result<Generated> {
    let scenario = ScenarioConfig::from_kv(&kv.restricted(SCENARIO_KEYS))?;
    let s = generate_scenario(&scenario)?;
    ensure_dir(&cfg.paths.out_dir)?;
    let p = &cfg.paths;
    write_deployment(&p.deployment, &s.deployment)?;
    write_telemetry(&p.telemetry, &s.telemetry)?;
    write_splits(&p.splits, &s.splits)?;
    write_labels(&p.labels, &s.labels)?;
    Ok(Generated {
        cells: s.deployment.len(),
        hours: scenario.days * 24,
        labels: s.labels.len(),
        injections: s.injections.len(),
    })
}

/// Trains the configured variant and writes the best model to
/// `paths.model`, a running checkpoint next to it, and `train_log.csv`.
/// With `resume`, continues from an existing checkpoint.
pub fn cmd_train(cfg: &PipelineConfig, resume_run: bool) -> Result<TrainState> {
    let data = Dataset::load(cfg, cfg.graph)?;
    ensure_dir(&cfg.paths.out_dir)?;
    if let Some(dir) = cfg.paths.model.parent() {
        ensure_dir(dir)?;
    }
    let ckpt = CheckpointPaths::for_model(&cfg.paths.model);
    let state = if resume_run && ckpt.exists() {
        let s = ckpt.load()?;
        if s.params.dims != cfg.dims() {
            return Err(Error::invalid(
                "checkpoint dimensions differ from the configured k, lookback and horizon",
            ));
        }
        log::info!("resuming from epoch {}", s.epochs_done);
        s
    } else {
        if resume_run {
            log::warn!("no checkpoint next to {}; starting fresh", cfg.paths.model.display());
        }
        let init = PredictorParams::new(cfg.dims(), cfg.hyper, cfg.train.variant, cfg.seed)?;
        TrainState::fresh(init)
    };
    let train_src = data.training_source(cfg.train_days, cfg.train_stride);
    if train_src.is_empty() {
        return Err(Error::Untrainable(format!(
            "no training windows fit in the first {} days",
            cfg.train_days
        )));
    }
    let val_src = data.source(Some(Split::Validation), cfg.eval_stride);
    if val_src.is_empty() {
        return Err(Error::Untrainable("validation split has no samples".into()));
    }
    let mean = data.train_mean()?;
    log::info!(
        "training {} on {} samples, validating on {} (train mean {mean:.3})",
        cfg.train.variant,
        train_src.len(),
        val_src.len()
    );
    let log_path = cfg.paths.output("train_log.csv");
    let state = resume(&cfg.train, state, &train_src, &val_src, mean, &mut |s| {
        ckpt.save(s)?;
        write_log(&log_path, &s.log)
    })?;
    ckpt.save(&state)?;
    write_log(&log_path, &state.log)?;
    Ok(state)
}

/// Loads the model and the data it was shaped for.
fn load_model_and_data(cfg: &PipelineConfig) -> Result<(PredictorParams, Dataset)> {
    cfg.require(&[&cfg.paths.model])?;
    let model = PredictorParams::load(&cfg.paths.model)?;
    let graph = GraphParams {
        k: model.dims.k,
        lookback: model.dims.lookback,
        horizon: model.dims.horizon,
    };
    if graph != cfg.graph {
        log::info!(
            "using the model's k={}, lookback={}, horizon={}",
            graph.k,
            graph.lookback,
            graph.horizon
        );
    }
    Ok((model, Dataset::load(cfg, graph)?))
}

/// Writes the entropy, historical-error and score distributions of the
/// calibration split.
pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<CalibrationFiles> {
    let (model, data) = load_model_and_data(cfg)?;
    let src = data.source(cfg.calibrate_split, cfg.detect_stride);
    let verdicts = judge_all(&model, &src, &cfg.detector)?;
    ensure_dir(&cfg.paths.out_dir)?;
    write_calibration(&cfg.paths.out_dir, &verdicts, &cfg.detector)
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub verdicts: Vec<SampleVerdict>,
    pub periods: Vec<AnomalyPeriod>,
    pub long: Vec<AnomalyPeriod>,
    /// Cells that received at least one verdict.
    pub cells: Vec<String>,
    pub scored_hours: usize,
    pub anomalous_hours: usize,
}

impl Detection {
    pub fn passed(&self) -> usize {
        self.verdicts.iter().filter(|v| v.passed()).count()
    }

    fn count(&self, r: FilterReason) -> usize {
        self.verdicts.iter().filter(|v| v.reason == r).count()
    }

    pub fn summary(&self) -> Vec<(&'static str, String)> {
        let n = self.verdicts.len();
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let class = |c: PeriodClass| self.long.iter().filter(|p| p.class == c).count();
        vec![
            ("samples", n.to_string()),
            ("passed", self.passed().to_string()),
            ("pass_rate", frac(self.passed(), n).to_string()),
            ("low_entropy", self.count(FilterReason::LowEntropy).to_string()),
            (
                "high_historical_error",
                self.count(FilterReason::HighHistoricalError).to_string(),
            ),
            (
                "degenerate_context",
                self.count(FilterReason::DegenerateContext).to_string(),
            ),
            ("scored_hours", self.scored_hours.to_string()),
            ("anomalous_hours", self.anomalous_hours.to_string()),
            (
                "anomalous_fraction",
                frac(self.anomalous_hours, self.scored_hours).to_string(),
            ),
            ("periods", self.periods.len().to_string()),
            ("long_periods", self.long.len().to_string()),
            ("long_class1", class(PeriodClass::Class1).to_string()),
            ("long_class2", class(PeriodClass::Class2).to_string()),
            ("long_unclassified", class(PeriodClass::Unclassified).to_string()),
        ]
    }
}

/// Judges, consolidates and classifies `verdicts` into anomaly periods.
pub fn detect_from_verdicts(verdicts: Vec<SampleVerdict>, data: &Dataset, cfg: &DetectorConfig) -> Detection {
    let c = consolidate(&verdicts, cfg.delta);
    let scored_hours = c.cells.values().map(|l| l.covered.iter().filter(|x| **x).count()).sum();
    let classifier = Classifier::new(&data.deployment, &data.raw, cfg);
    let mut periods = all_periods(&c);
    for p in &mut periods {
        p.class = classifier.classify(p);
    }
    let long = long_periods(&periods, cfg.min_duration_hours);
    let cells: BTreeSet<String> = verdicts.iter().map(|v| v.cell_id.clone()).collect();
    Detection {
        anomalous_hours: c.anomalous_hours(),
        verdicts,
        periods,
        long,
        cells: cells.into_iter().collect(),
        scored_hours,
    }
}

/// Writes `verdicts.csv`, `anomalies.csv` (every period),
/// `long_anomalies.csv` and `detect_summary.csv`.
pub fn cmd_detect(cfg: &PipelineConfig) -> Result<Detection> {
    let (model, data) = load_model_and_data(cfg)?;
    let src = data.source(cfg.detect_split, cfg.detect_stride);
    let verdicts = judge_all(&model, &src, &cfg.detector)?;
    let det = detect_from_verdicts(verdicts, &data, &cfg.detector);
    ensure_dir(&cfg.paths.out_dir)?;
    write_verdicts(
        &cfg.paths.output("verdicts.csv"),
        &det.verdicts,
        &cfg.detector,
        model.dims.horizon,
    )?;
    write_report(&cfg.paths.output("anomalies.csv"), &det.periods)?;
    write_report(&cfg.paths.output("long_anomalies.csv"), &det.long)?;
    write_summary(&cfg.paths.output("detect_summary.csv"), &det.summary())?;
    Ok(det)
}

/// Detection quality against ground-truth labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionScore {
    pub class1_windows: usize,
    pub class1_detected: usize,
    pub class2_windows: usize,
    pub class2_detected: usize,
    pub clean_cells: usize,
    /// Clean cells with at least one long period.
    pub clean_cells_flagged: usize,
    /// Long periods, at any time, on cells inside a mobility event area.
    pub mobility_long_periods: usize,
}

impl DetectionScore {
    pub fn class1_recall(&self) -> Option<f64> {
        (self.class1_windows > 0).then(|| self.class1_detected as f64 / self.class1_windows as f64)
    }

    pub fn class2_recall(&self) -> Option<f64> {
        (self.class2_windows > 0).then(|| self.class2_detected as f64 / self.class2_windows as f64)
    }

    pub fn false_long_rate(&self) -> Option<f64> {
        (self.clean_cells > 0).then(|| self.clean_cells_flagged as f64 / self.clean_cells as f64)
    }

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            ("class1_windows", self.class1_windows.to_string()),
            ("class1_detected", self.class1_detected.to_string()),
            ("class1_recall", opt(self.class1_recall())),
            ("class2_windows", self.class2_windows.to_string()),
            ("class2_detected", self.class2_detected.to_string()),
            ("class2_recall", opt(self.class2_recall())),
            ("clean_cells", self.clean_cells.to_string()),
            ("clean_cells_flagged", self.clean_cells_flagged.to_string()),
            ("false_long_rate", opt(self.false_long_rate())),
            ("mobility_long_periods", self.mobility_long_periods.to_string()),
        ]
    }
}

/// Groups labels into event windows per `(cell, kind)`, joining windows
/// separated by short gaps.
pub fn event_windows(labels: &[GroundTruthLabel]) -> Vec<(String, LabelKind, Hour, Hour)> {
    let mut out: Vec<(String, LabelKind, Hour, Hour)> = Vec::new();
    for w in label_windows(labels) {
        match out.last_mut() {
            Some(last) if last.0 == w.0 && last.1 == w.1 && w.2 - last.3 <= LABEL_MERGE_GAP_HOURS => {
                last.3 = last.3.max(w.3);
            }
            _ => out.push(w),
        }
    }
    out
}

/// Scores reported periods against labels, restricted to `cells` (the
/// cells that were judged). An injected window counts as detected when any
/// period of its cell overlaps it.
pub fn score_detection(
    periods: &[AnomalyPeriod],
    labels: &[GroundTruthLabel],
    cells: &[String],
    min_duration_hours: usize,
) -> DetectionScore {
    let judged: BTreeSet<&str> = cells.iter().map(String::as_str).collect();
    let mut by_cell: BTreeMap<&str, Vec<&AnomalyPeriod>> = BTreeMap::new();
    for p in periods {
        by_cell.entry(p.cell_id.as_str()).or_default().push(p);
    }
    let long = long_periods(periods, min_duration_hours);
    let labelled: BTreeSet<&str> = labels.iter().map(|l| l.cell_id.as_str()).collect();
    let mut s = DetectionScore::default();
    for (cell, kind, lo, hi) in event_windows(labels) {
        if !judged.contains(cell.as_str()) {
            continue;
        }
        let hit = by_cell
            .get(cell.as_str())
            .is_some_and(|ps| ps.iter().any(|p| p.overlaps(lo, hi)));
        match kind {
            LabelKind::Class1 => {
                s.class1_windows += 1;
                s.class1_detected += usize::from(hit);
            }
            LabelKind::Class2 => {
                s.class2_windows += 1;
                s.class2_detected += usize::from(hit);
            }
            LabelKind::Mobility => {}
        }
    }
    let region: BTreeSet<&str> = labels
        .iter()
        .filter(|l| l.kind == LabelKind::Mobility && judged.contains(l.cell_id.as_str()))
        .map(|l| l.cell_id.as_str())
        .collect();
    s.mobility_long_periods = long.iter().filter(|p| region.contains(p.cell_id.as_str())).count();
    for c in &judged {
        if !labelled.contains(c) {
            s.clean_cells += 1;
            if long.iter().any(|p| p.cell_id == *c) {
                s.clean_cells_flagged += 1;
            }
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub splits: Vec<(Split, EvalMetrics)>,
    /// Present when a labels file exists.
    pub detection: Option<DetectionScore>,
}

/// Writes `metrics.csv` (prediction quality per split) and, when labels
/// exist, `detection.csv`. Detection is read from `anomalies.csv` in the
/// output directory, running `detect` first when it is missing.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Evaluation> {
    let (model, data) = load_model_and_data(cfg)?;
    let mean = data.train_mean()?;
    let mut splits = Vec::new();
    let mut rows = Vec::new();
    for split in Split::ALL {
        let src = data.source(Some(split), cfg.eval_stride);
        if src.is_empty() {
            log::warn!("{split} split has no samples");
            continue;
        }
        let m = evaluate(&model, &src, mean, cfg.detector.sigma_floor)?;
        rows.push(format!(
            "{split},{},{},{},{},{},{}",
            m.norm_mae,
            m.r2.map(|v| v.to_string()).unwrap_or_default(),
            m.nll,
            m.pairs,
            m.samples,
            m.skipped
        ));
        splits.push((split, m));
    }
    ensure_dir(&cfg.paths.out_dir)?;
    write_rows(
        &cfg.paths.output("metrics.csv"),
        "split,norm_mae,r2,nll,pairs,samples,skipped",
        &rows,
    )?;

    let detection = if cfg.paths.labels.exists() {
        let labels = read_labels(&cfg.paths.labels)?;
        let report = cfg.paths.output("anomalies.csv");
        let verdict_path = cfg.paths.output("verdicts.csv");
        let (periods, cells) = if report.exists() && verdict_path.exists() {
            (read_report(&report)?, verdict_cells(&verdict_path)?)
        } else {
            let det = cmd_detect(cfg)?;
            (det.periods, det.cells)
        };
        let score = score_detection(&periods, &labels, &cells, cfg.detector.min_duration_hours);
        write_summary(&cfg.paths.output("detection.csv"), &score.rows())?;
        Some(score)
    } else {
        log::warn!("{} not found; skipping detection scoring", cfg.paths.labels.display());
        None
    };
    Ok(Evaluation { splits, detection })
}

fn verdict_cells(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut cells = BTreeSet::new();
    for rec in rdr.records() {
        cells.insert(rec?[0].to_string());
    }
    Ok(cells.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn period(cell: &str, start: Hour, end: Hour) -> AnomalyPeriod {
        AnomalyPeriod {
            cell_id: cell.into(),
            start,
            end,
            peak_score: 9.0,
            mean_score: 7.0,
            class: PeriodClass::Unclassified,
        }
    }

    fn labels(cell: &str, kind: LabelKind, hours: impl Iterator<Item = Hour>) -> Vec<GroundTruthLabel> {
        hours
            .map(|hour| GroundTruthLabel {
                cell_id: cell.into(),
                hour,
                is_anomalous: kind.is_anomalous(),
                kind,
            })
            .collect()
    }

    #[test]
    fn flapping_fragments_form_one_event() {
        let l = labels("A", LabelKind::Class2, (0..24).filter(|h| (h / 3) % 2 == 0));
        assert_eq!(event_windows(&l), vec![("A".to_string(), LabelKind::Class2, 0, 20)]);
        let mut two = labels("A", LabelKind::Class1, 0..8);
        two.extend(labels("A", LabelKind::Class1, 100..108));
        assert_eq!(event_windows(&two).len(), 2);
    }

    #[test]
    fn detection_scoring() {
        let cells: Vec<String> = ["A", "B", "C", "D", "E"].map(String::from).to_vec();
        let mut l = labels("A", LabelKind::Class2, 100..124);
        l.extend(labels("B", LabelKind::Class1, 200..210));
        l.extend(labels("C", LabelKind::Mobility, 300..309));
        l.extend(labels("Z", LabelKind::Class1, 0..10));
        let periods = vec![
            period("A", 120, 130),
            period("B", 190, 199),
            period("C", 302, 309),
            period("C", 10, 30),
            period("D", 50, 60),
            period("E", 50, 52),
        ];
        let s = score_detection(&periods, &l, &cells, 6);
        assert_eq!((s.class2_windows, s.class2_detected), (1, 1));
        assert_eq!((s.class1_windows, s.class1_detected), (1, 0));
        assert_eq!(s.mobility_long_periods, 2);
        assert_eq!((s.clean_cells, s.clean_cells_flagged), (2, 1));
        assert_eq!(s.false_long_rate(), Some(0.5));
        assert_eq!(s.class1_recall(), Some(0.0));
    }

    #[test]
    fn config_layout_and_overrides() {
        let mut kv = KvConfig::parse("k = 20\nlookback = 47\nhorizon = 12\nmodel = m/x.json\n").unwrap();
        kv.set("delta=7").unwrap();
        let c = PipelineConfig::from_kv(&kv, Some(Path::new("run"))).unwrap();
        assert_eq!(c.paths.telemetry, Path::new("run/telemetry.csv"));
        assert_eq!(c.paths.model, Path::new("m/x.json"));
        assert_eq!((c.graph.k, c.graph.lookback, c.graph.horizon), (20, 47, 12));
        assert_eq!(c.detector.delta, 7.0);
        let c = PipelineConfig::from_kv(&KvConfig::parse("out_dir = a\n").unwrap(), None).unwrap();
        assert_eq!(c.paths.out_dir, Path::new("a"));
    }

    #[test]
    fn config_rejects_k_below_two_and_unknown_keys() {
        let kv = KvConfig::parse("horizon = 3\nk = 1\n").unwrap();
        match PipelineConfig::from_kv(&kv, None) {
            Err(Error::Config { line, key, .. }) => assert_eq!((line, key.as_str()), (2, "k")),
            other => panic!("{other:?}"),
        }
        let kv = KvConfig::parse("n_sites = 4\nwidth = 3\n").unwrap();
        match PipelineConfig::from_kv(&kv, None) {
            Err(Error::Config { line, key, .. }) => assert_eq!((line, key.as_str()), (2, "width")),
            other => panic!("{other:?}"),
        }
        let kv = KvConfig::parse("detect_split = nowhere\n").unwrap();
        assert!(PipelineConfig::from_kv(&kv, None).unwrap_err().is_validation());
    }

    #[test]
    fn shared_keys_reach_every_section() {
        let kv = KvConfig::parse("rng_seed = 11\nsigma_floor = 0.001\nn_sites = 3\n").unwrap();
        let c = PipelineConfig::from_kv(&kv, None).unwrap();
        assert_eq!((c.seed, c.train.rng_seed), (11, 11));
        assert_eq!(c.detector.sigma_floor, c.train.sigma_floor);
        let s = ScenarioConfig::from_kv(&kv.restricted(SCENARIO_KEYS)).unwrap();
        assert_eq!((s.rng_seed, s.n_sites), (11, 3));
    }
}
