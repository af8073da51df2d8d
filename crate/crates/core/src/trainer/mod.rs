//! Training of the contextual predictor by Gaussian negative log-likelihood.

mod grad;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph_data::{denormalize, GraphIndex, GraphSample, Hour, Split};
use crate::predictor::{forward_trace, PredictorParams, Variant};

pub use grad::{clip_gradients, global_norm, gradients, nll_loss, BatchGradient};
pub use optim::OptimizerState;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples drawn per epoch; an epoch is `ceil(samples / batch_size)`
    /// optimizer steps.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub rng_seed: u64,
    pub sigma_floor: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            samples_per_epoch: 40_000,
            batch_size: 32,
            learning_rate: 1e-5,
            clip_norm: 0.8,
            rng_seed: 0,
            sigma_floor: 1e-4,
            variant: Variant::Full,
        }
    }
}

pub const TRAIN_KEYS: [&str; 8] = [
    "epochs",
    "samples_per_epoch",
    "batch_size",
    "learning_rate",
    "clip_norm",
    "rng_seed",
    "sigma_floor",
    "variant",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "epochs, samples_per_epoch and batch_size must be positive",
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("sigma_floor", self.sigma_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Reads the training keys from `kv`, falling back to `base`.
    pub fn from_kv(kv: &KvConfig, base: &TrainConfig) -> Result<Self> {
        let cfg = Self {
            epochs: kv.get("epochs", base.epochs)?,
            samples_per_epoch: kv.get("samples_per_epoch", base.samples_per_epoch)?,
            batch_size: kv.get("batch_size", base.batch_size)?,
            learning_rate: kv.get("learning_rate", base.learning_rate)?,
            clip_norm: kv.get("clip_norm", base.clip_norm)?,
            rng_seed: kv.get("rng_seed", base.rng_seed)?,
            sigma_floor: kv.get("sigma_floor", base.sigma_floor)?,
            variant: kv.get("variant", base.variant)?,
        };
        cfg.validate().map_err(|e| kv.attribute(e, &TRAIN_KEYS))?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

/// Random-access collection of graph samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn sample(&self, i: usize) -> Result<GraphSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [GraphSample] {
    fn len(&self) -> usize {
        <[GraphSample]>::len(self)
    }

    fn sample(&self, i: usize) -> Result<GraphSample> {
        self.get(i)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample {i} out of range")))
    }
}

impl SampleSource for Vec<GraphSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, i: usize) -> Result<GraphSample> {
        self.as_slice().sample(i)
    }
}

/// `(cell, anchor)` pairs cut lazily from a [`GraphIndex`].
pub struct IndexedSamples<'a> {
    index: &'a GraphIndex,
    keys: Vec<(String, Hour)>,
}

impl<'a> IndexedSamples<'a> {
    /// Every pair in `cells × anchors` (stepping by `stride`) whose target
    /// covers the window, ordered by anchor then `cell_id`.
    pub fn new(index: &'a GraphIndex, cells: &[String], anchors: std::ops::Range<Hour>, stride: usize) -> Self {
        let mut cells = cells.to_vec();
        cells.sort();
        cells.dedup();
        let mut keys = Vec::new();
        for a in anchors.step_by(stride.max(1)) {
            for c in &cells {
                if index.target_covers(c, a) {
                    keys.push((c.clone(), a));
                }
            }
        }
        Self { index, keys }
    }

    pub fn keys(&self) -> &[(String, Hour)] {
        &self.keys
    }
}

impl SampleSource for IndexedSamples<'_> {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn sample(&self, i: usize) -> Result<GraphSample> {
        let (c, a) = self
            .keys
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?;
        self.index.build(c, *a)
    }
}

/// Prediction quality in the original percentage domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// MAE divided by the training-set mean utilization.
    pub norm_mae: f64,
    /// Missing when the ground truth has zero variance.
    pub r2: Option<f64>,
    /// Mean per-sample NLL in the normalized domain.
    pub nll: f64,
    pub pairs: usize,
    pub samples: usize,
    pub skipped: usize,
}

/// `(MAE / train_mean, R²)` over paired predictions and observations.
pub fn regression_metrics(pred: &[f64], truth: &[f64], train_mean: f64) -> Result<(f64, Option<f64>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("need equal, non-empty prediction and truth series"));
    }
    if !(train_mean > 0.0 && train_mean.is_finite()) {
        return Err(Error::invalid(format!(
            "training mean must be positive, got {train_mean}"
        )));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok((mae / train_mean, r2))
}

#[derive(Default)]
struct MetricAcc {
    pred: Vec<f64>,
    truth: Vec<f64>,
    nll: f64,
    samples: usize,
    skipped: usize,
}

impl MetricAcc {
    fn push(&mut self, sample: &GraphSample, x_hat: &[f64], nll: f64) {
        for t in 0..x_hat.len() {
            if sample.target_pred_mask[t] {
                self.pred.push(denormalize(x_hat[t]));
                self.truth.push(denormalize(sample.pred_target[t]));
            }
        }
        self.nll += nll;
        self.samples += 1;
    }

    fn finish(self, train_mean: f64) -> Result<EvalMetrics> {
        if self.pred.is_empty() {
            return Err(Error::invalid("no evaluable (sample, hour) pairs"));
        }
        let (norm_mae, r2) = regression_metrics(&self.pred, &self.truth, train_mean)?;
        Ok(EvalMetrics {
            norm_mae,
            r2,
            nll: self.nll / self.samples as f64,
            pairs: self.pred.len(),
            samples: self.samples,
            skipped: self.skipped,
        })
    }
}

/// Weighted NLL over the observed hours of the prediction window.
fn masked_nll(sample: &GraphSample, x_hat: &[f64], sigma: &[f64], floor: f64) -> Option<f64> {
    let w = grad::hour_weights(&sample.target_pred_mask)?;
    let mut total = 0.0;
    for t in 0..x_hat.len() {
        if w[t] > 0.0 {
            let l = nll_loss(&x_hat[t..=t], &sigma[t..=t], &sample.pred_target[t..=t], floor).ok()?;
            total += w[t] * l;
        }
    }
    Some(total)
}

/// Scores every sample of `source`. Degenerate samples and samples whose
/// target has no observed hour in the window are counted as skipped.
pub fn evaluate(
    params: &PredictorParams,
    source: &dyn SampleSource,
    train_mean: f64,
    sigma_floor: f64,
) -> Result<EvalMetrics> {
    if source.is_empty() {
        return Err(Error::invalid("evaluation source is empty"));
    }
    let outs: Vec<Option<(GraphSample, Vec<f64>, f64)>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let s = match source.sample(i) {
                Ok(s) => s,
                Err(Error::SampleUnavailable { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let t = match forward_trace(params, &s) {
                Ok(t) => t,
                Err(Error::DegenerateContext) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(masked_nll(&s, &t.x_hat, &t.sigma_hat, sigma_floor).map(|nll| (s, t.x_hat, nll)))
        })
        .collect::<Result<_>>()?;
    let mut acc = MetricAcc::default();
    for o in outs {
        match o {
            Some((s, x, nll)) => acc.push(&s, &x, nll),
            None => acc.skipped += 1,
        }
    }
    acc.finish(train_mean)
}

/// Derives the parameters of `variant` from `base`. Shared networks are
/// copied; the auto-scaler is dropped or created and the readout head
/// created or dropped as the variant requires, fresh weights coming from
/// `base.init_seed`.
pub fn make_variant(base: &PredictorParams, variant: Variant) -> Result<PredictorParams> {
    if base.variant == variant {
        return Ok(base.clone());
    }
    let fresh = PredictorParams::new(base.dims, base.hyper, variant, base.init_seed)?;
    Ok(PredictorParams {
        variant,
        scale_nn: match (variant.has_autoscaler(), &base.scale_nn) {
            (true, Some(s)) => Some(s.clone()),
            (true, None) => fresh.scale_nn,
            (false, _) => None,
        },
        query_embed: base.query_embed.clone(),
        key_embed: base.key_embed.clone(),
        head: match (variant.is_interpretable(), &base.head) {
            (true, _) => None,
            (false, Some(h)) => Some(h.clone()),
            (false, None) => fresh.head,
        },
        ..base.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub metrics: EvalMetrics,
}

/// Everything needed to continue training after an interruption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PredictorParams,
    pub optimizer: OptimizerState,
    pub best: PredictorParams,
    pub best_epoch: Option<usize>,
    pub best_norm_mae: f64,
    pub epochs_done: usize,
    pub log: Vec<LogRow>,
    pub skipped_samples: usize,
}

impl TrainState {
    pub fn fresh(params: PredictorParams) -> Self {
        Self {
            optimizer: OptimizerState::new(&params),
            best: params.clone(),
            params,
            best_epoch: None,
            best_norm_mae: f64::INFINITY,
            epochs_done: 0,
            log: Vec::new(),
            skipped_samples: 0,
        }
    }
}

/// Trains from `init` and returns the final state; `state.best` holds the
/// parameters with the lowest validation `norm_mae`.
pub fn train(
    cfg: &TrainConfig,
    init: PredictorParams,
    train_src: &dyn SampleSource,
    val_src: &dyn SampleSource,
    train_mean: f64,
) -> Result<TrainState> {
    let init = make_variant(&init, cfg.variant)?;
    resume(
        cfg,
        TrainState::fresh(init),
        train_src,
        val_src,
        train_mean,
        &mut |_| Ok(()),
    )
}

/// Continues training from `state` up to `cfg.epochs`, calling `on_epoch`
/// after every completed epoch.
pub fn resume(
    cfg: &TrainConfig,
    mut state: TrainState,
    train_src: &dyn SampleSource,
    val_src: &dyn SampleSource,
    train_mean: f64,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if state.params.variant != cfg.variant {
        return Err(Error::invalid(format!(
            "state holds a {} model but the config asks for {}",
            state.params.variant, cfg.variant
        )));
    }
    if !state.optimizer.matches(&state.params) {
        return Err(Error::shape("optimizer state does not match parameters"));
    }
    if train_src.is_empty() {
        return Err(Error::Untrainable("training source is empty".into()));
    }
    let n = train_src.len();
    for epoch in state.epochs_done..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(epoch as u64 + 1);
        let mut acc = MetricAcc::default();
        let mut remaining = cfg.samples_per_epoch;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            let batch = idx
                .iter()
                .map(|&i| {
                    train_src.sample(i).map(Some).or_else(|e| match e {
                        Error::SampleUnavailable { .. } => Ok(None),
                        e => Err(e),
                    })
                })
                .collect::<Result<Vec<Option<GraphSample>>>>()?;
            let per: Vec<Option<(grad::SampleGradient, GraphSample)>> = batch
                .into_par_iter()
                .map(|s| match s {
                    Some(s) => Ok(grad::sample_gradient(&state.params, &s, cfg.sigma_floor)?.map(|g| (g, s))),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?;
            let mut pairs = Vec::with_capacity(per.len());
            for item in per {
                match item {
                    Some((g, s)) => {
                        acc.push(&s, &g.trace.x_hat, g.loss);
                        pairs.push(Some((g.grads, g.loss)));
                    }
                    None => {
                        acc.skipped += 1;
                        pairs.push(None);
                    }
                }
            }
            let mut bg = grad::reduce(&state.params, pairs.into_iter());
            state.skipped_samples += bg.skipped;
            if bg.used == 0 {
                continue;
            }
            clip_gradients(&mut bg.grads, cfg.clip_norm)?;
            state
                .optimizer
                .update(&mut state.params, &bg.grads, cfg.learning_rate)?;
        }
        if acc.samples == 0 {
            return Err(Error::Untrainable(
                "every sampled graph was degenerate or unobserved".into(),
            ));
        }
        if !state.params.is_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        let train_m = acc.finish(train_mean)?;
        let val_m = evaluate(&state.params, val_src, train_mean, cfg.sigma_floor)?;
        log::info!(
            "epoch {epoch}: train norm_mae {:.4} nll {:.4} | validation norm_mae {:.4} r2 {}",
            train_m.norm_mae,
            train_m.nll,
            val_m.norm_mae,
            val_m.r2.map_or("-".into(), |r| format!("{r:.4}")),
        );
        state.log.push(LogRow {
            epoch,
            split: Split::Train,
            metrics: train_m,
        });
        state.log.push(LogRow {
            epoch,
            split: Split::Validation,
            metrics: val_m,
        });
        if val_m.norm_mae < state.best_norm_mae {
            state.best_norm_mae = val_m.norm_mae;
            state.best_epoch = Some(epoch);
            state.best = state.params.clone();
        }
        state.epochs_done = epoch + 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Writes the training log as `epoch,split,norm_mae,r2,nll`.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = crate::graph_data::io::create_file(path)?;
    let mut text = String::from("epoch,split,norm_mae,r2,nll\n");
    for r in log {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.split,
            r.metrics.norm_mae,
            r.metrics.r2.map(|v| v.to_string()).unwrap_or_default(),
            r.metrics.nll
        ));
    }
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    epochs_done: usize,
    best_epoch: Option<usize>,
    best_norm_mae: Option<f64>,
    skipped_samples: usize,
    optimizer: OptimizerState,
    log: Vec<LogRow>,
}

pub struct CheckpointPaths {
    pub current: PathBuf,
    pub best: PathBuf,
    pub sidecar: PathBuf,
}

impl CheckpointPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self::for_model(&dir.join("model.json"))
    }

    /// Best model at `best`; the running checkpoint and optimizer sidecar
    /// sit next to it as `{stem}.checkpoint.json` and `{stem}.optimizer.json`.
    pub fn for_model(best: &Path) -> Self {
        let stem = best
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let dir = best.parent().unwrap_or(Path::new(""));
        Self {
            current: dir.join(format!("{stem}.checkpoint.json")),
            best: best.to_path_buf(),
            sidecar: dir.join(format!("{stem}.optimizer.json")),
        }
    }

    pub fn exists(&self) -> bool {
        self.current.exists() && self.best.exists() && self.sidecar.exists()
    }

    pub fn save(&self, state: &TrainState) -> Result<()> {
        state.params.save(&self.current)?;
        state.best.save(&self.best)?;
        let side = Sidecar {
            epochs_done: state.epochs_done,
            best_epoch: state.best_epoch,
            best_norm_mae: state.best_norm_mae.is_finite().then_some(state.best_norm_mae),
            skipped_samples: state.skipped_samples,
            optimizer: state.optimizer.clone(),
            log: state.log.clone(),
        };
        let text = serde_json::to_string(&side)?;
        std::fs::write(&self.sidecar, text).map_err(|e| Error::io(&self.sidecar, e))
    }

    pub fn load(&self) -> Result<TrainState> {
        let params = PredictorParams::load(&self.current)?;
        let best = PredictorParams::load(&self.best)?;
        let text = std::fs::read_to_string(&self.sidecar).map_err(|e| Error::io(&self.sidecar, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        if !side.optimizer.matches(&params) {
            return Err(Error::Model("optimizer sidecar does not match model".into()));
        }
        Ok(TrainState {
            params,
            optimizer: side.optimizer,
            best,
            best_epoch: side.best_epoch,
            best_norm_mae: side.best_norm_mae.unwrap_or(f64::INFINITY),
            epochs_done: side.epochs_done,
            log: side.log,
            skipped_samples: side.skipped_samples,
        })
    }
}

/// Mean of the observed raw utilization over `[from, to)` for `cells`.
pub fn training_mean(
    telemetry: &[crate::graph_data::KpiSeries],
    cells: &[String],
    from: Hour,
    to: Hour,
) -> Result<f64> {
    let wanted: std::collections::HashSet<&str> = cells.iter().map(String::as_str).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in telemetry.iter().filter(|s| wanted.contains(s.cell_id.as_str())) {
        for (i, (&v, &m)) in s.values.iter().zip(&s.mask).enumerate() {
            let h = s.start + i as Hour;
            if m && h >= from && h < to {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 || !(sum > 0.0) {
        return Err(Error::Untrainable("no positive training observations".into()));
    }
    Ok(sum / n as f64)
}
