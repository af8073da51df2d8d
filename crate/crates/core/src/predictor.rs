//! Contextual predictor: auto-scaler, neighbor attention and linear readout.
//!
//! A target cell is estimated from its `k` neighbors. Each neighbor series is
//! rescaled by an affine map `(sc_j, sh_j)` chosen by a small network from the
//! pair of cell vectors, the rescaled neighbors are weighted by attention
//! coefficients `alpha_j`, and the estimate is the weighted sum of the
//! neighbors' rescaled prediction-window series. The weighted spread of those
//! series is the predicted standard deviation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_data::{CellMeta, GraphParams, GraphSample, ATTR_WIDTH};
use crate::nn::{dot, Mlp, MlpDoc, MlpTrace, TENSOR_SUFFIXES};

pub const MODEL_FORMAT: &str = "ranctx-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAutoscaler,
    NoLinearCombination,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoAutoscaler, Variant::NoLinearCombination];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAutoscaler => "no_autoscaler",
            Variant::NoLinearCombination => "no_linear_combination",
        }
    }

    pub fn has_autoscaler(self) -> bool {
        self != Variant::NoAutoscaler
    }

    pub fn is_interpretable(self) -> bool {
        self != Variant::NoLinearCombination
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

/// How raw attention scores are formed from the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScore {
    /// `s_j = hq · hk_j / sqrt(d_k)`.
    QueryKey,
    /// `s_j = hk_j · hk_j / sqrt(d_k)`; the query embedding is unused.
    KeyKey,
}

impl AttentionScore {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionScore::QueryKey => "query_key",
            AttentionScore::KeyKey => "key_key",
        }
    }
}

impl FromStr for AttentionScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_key" => Ok(AttentionScore::QueryKey),
            "key_key" => Ok(AttentionScore::KeyKey),
            _ => Err(Error::invalid(format!("unknown attention score '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// `T`; the context window holds `T + 1` hours.
    pub lookback: usize,
    /// `L`.
    pub horizon: usize,
    pub k: usize,
    pub attr_width: usize,
}

impl Dims {
    pub fn from_graph(p: GraphParams) -> Self {
        Self {
            lookback: p.lookback,
            horizon: p.horizon,
            k: p.k,
            attr_width: ATTR_WIDTH,
        }
    }

    pub fn context_len(&self) -> usize {
        self.lookback + 1
    }

    /// Width of a cell vector: context followed by attributes.
    pub fn vector_width(&self) -> usize {
        self.context_len() + self.attr_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub scale_hidden: usize,
    pub embed_hidden: usize,
    pub d_k: usize,
    /// Hidden width of the series embedding and readout networks used by
    /// [`Variant::NoLinearCombination`].
    pub readout_hidden: usize,
    pub score: AttentionScore,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            scale_hidden: 183,
            embed_hidden: 32,
            d_k: 6,
            readout_hidden: 32,
            score: AttentionScore::QueryKey,
        }
    }
}

/// Networks replacing the linear readout in [`Variant::NoLinearCombination`].
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationHead {
    /// `L → hidden → L`, applied to each scaled prediction-window series.
    pub series_embed: Mlp,
    /// `d_k + L → hidden → 2L`; first half is the estimate, second half the
    /// pre-softplus standard deviation.
    pub readout: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub dims: Dims,
    pub hyper: Hyper,
    pub variant: Variant,
    pub init_seed: u64,
    /// Input is `[c_j, c_tar]`, output `[sc_j, sh_j]`. Absent without the
    /// auto-scaler.
    pub scale_nn: Option<Mlp>,
    pub query_embed: Mlp,
    pub key_embed: Mlp,
    pub head: Option<CombinationHead>,
}

impl PredictorParams {
    /// Fresh parameters. Weights are uniform with fan-in scaling; the
    /// auto-scaler starts near the identity map (`sc ≈ 1`, `sh ≈ 0`).
    pub fn new(dims: Dims, hyper: Hyper, variant: Variant, seed: u64) -> Result<Self> {
        if dims.lookback == 0 || dims.horizon == 0 || dims.k == 0 {
            return Err(Error::invalid("lookback, horizon and k must be positive"));
        }
        if hyper.scale_hidden == 0 || hyper.embed_hidden == 0 || hyper.d_k == 0 {
            return Err(Error::invalid("hidden widths and d_k must be positive"));
        }
        if hyper.readout_hidden == 0 {
            return Err(Error::invalid("readout_hidden must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = dims.vector_width();
        let mut scale_nn = Mlp::init(2 * w, hyper.scale_hidden, 2, &mut rng);
        for v in &mut scale_nn.output.w {
            *v *= 0.1;
        }
        scale_nn.output.b = vec![1.0, 0.0];
        let query_embed = Mlp::init(w, hyper.embed_hidden, hyper.d_k, &mut rng);
        let key_embed = Mlp::init(w, hyper.embed_hidden, hyper.d_k, &mut rng);
        let l = dims.horizon;
        let head = CombinationHead {
            series_embed: Mlp::init(l, hyper.readout_hidden, l, &mut rng),
            readout: Mlp::init(hyper.d_k + l, hyper.readout_hidden, 2 * l, &mut rng),
        };
        Ok(Self {
            dims,
            hyper,
            variant,
            init_seed: seed,
            scale_nn: variant.has_autoscaler().then_some(scale_nn),
            query_embed,
            key_embed,
            head: (!variant.is_interpretable()).then_some(head),
        })
    }

    /// Same architecture with every weight zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            hyper: self.hyper,
            variant: self.variant,
            init_seed: self.init_seed,
            scale_nn: self.scale_nn.as_ref().map(Mlp::zeros_like),
            query_embed: self.query_embed.zeros_like(),
            key_embed: self.key_embed.zeros_like(),
            head: self.head.as_ref().map(|h| CombinationHead {
                series_embed: h.series_embed.zeros_like(),
                readout: h.readout.zeros_like(),
            }),
        }
    }

    fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = Vec::with_capacity(5);
        if let Some(s) = &self.scale_nn {
            out.push(("scale_nn", s));
        }
        out.push(("query_embed", &self.query_embed));
        out.push(("key_embed", &self.key_embed));
        if let Some(h) = &self.head {
            out.push(("series_embed", &h.series_embed));
            out.push(("readout", &h.readout));
        }
        out
    }

    fn networks_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = Vec::with_capacity(5);
        if let Some(s) = &mut self.scale_nn {
            out.push(s);
        }
        out.push(&mut self.query_embed);
        out.push(&mut self.key_embed);
        if let Some(h) = &mut self.head {
            out.push(&mut h.series_embed);
            out.push(&mut h.readout);
        }
        out
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        self.networks()
            .into_iter()
            .flat_map(|(name, m)| {
                m.tensors()
                    .into_iter()
                    .zip(TENSOR_SUFFIXES)
                    .map(move |(t, s)| (format!("{name}.{s}"), t))
            })
            .collect()
    }

    /// Mutable tensors in the same order as [`PredictorParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.networks_mut().into_iter().flat_map(|m| m.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check_sample(&self, sample: &GraphSample) -> Result<()> {
        if sample.k() == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        sample.validate()?;
        if sample.context_len() != self.dims.context_len() {
            return Err(Error::shape(format!(
                "sample context length {} but model expects {}",
                sample.context_len(),
                self.dims.context_len()
            )));
        }
        if sample.horizon() != self.dims.horizon {
            return Err(Error::shape(format!(
                "sample horizon {} but model expects {}",
                sample.horizon(),
                self.dims.horizon
            )));
        }
        Ok(())
    }
}

/// Concatenates a normalized context window with the cell's attributes.
pub fn cell_vector(meta: &CellMeta, context: &[f64], dims: &Dims) -> Result<Vec<f64>> {
    if context.len() != dims.context_len() {
        return Err(Error::shape(format!(
            "context has {} values, expected {}",
            context.len(),
            dims.context_len()
        )));
    }
    if dims.attr_width != ATTR_WIDTH {
        return Err(Error::shape(format!(
            "attribute width {} differs from {ATTR_WIDTH}",
            dims.attr_width
        )));
    }
    let mut v = Vec::with_capacity(dims.vector_width());
    v.extend_from_slice(context);
    v.extend(meta.attrs_f64());
    Ok(v)
}

/// `b + W[:, w..] · c_tar`: the target's share of the auto-scaler's first
/// layer, shared by all neighbors of a sample.
fn scale_target_part(nn: &Mlp, c_tar: &[f64]) -> Vec<f64> {
    let w = c_tar.len();
    (0..nn.hidden.out)
        .map(|i| nn.hidden.b[i] + dot(&nn.hidden.row(i)[w..], c_tar))
        .collect()
}

fn scale_pair(nn: &Mlp, target_part: &[f64], c_j: &[f64]) -> MlpTrace {
    let w = c_j.len();
    let pre = target_part
        .iter()
        .enumerate()
        .map(|(i, &t)| t + dot(&nn.hidden.row(i)[..w], c_j))
        .collect();
    nn.trace_from_pre(pre)
}

#[inline]
fn affine(x: &[f64], sc: f64, sh: f64) -> Vec<f64> {
    x.iter().map(|&v| v * sc + sh).collect()
}

/// Result of rescaling one neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoScaled {
    pub sc: f64,
    pub sh: f64,
    /// `[x_j · sc + sh, m_j]`; attributes are untouched.
    pub scaled: Vec<f64>,
}

/// Rescales the context portion of `c_j`. Without an auto-scaler the
/// neighbor is returned unchanged with `sc = 1`, `sh = 0`.
pub fn auto_scale(params: &PredictorParams, c_tar: &[f64], c_j: &[f64]) -> Result<AutoScaled> {
    let w = params.dims.vector_width();
    if c_tar.len() != w || c_j.len() != w {
        return Err(Error::shape(format!("cell vectors must have width {w}")));
    }
    let Some(nn) = &params.scale_nn else {
        return Ok(AutoScaled {
            sc: 1.0,
            sh: 0.0,
            scaled: c_j.to_vec(),
        });
    };
    let t = scale_pair(nn, &scale_target_part(nn, c_tar), c_j);
    let (sc, sh) = (t.out[0], t.out[1]);
    Ok(AutoScaled {
        sc,
        sh,
        scaled: scaled_vector(c_j, params.dims.context_len(), sc, sh),
    })
}

fn scaled_vector(c_j: &[f64], t1: usize, sc: f64, sh: f64) -> Vec<f64> {
    let mut v = affine(&c_j[..t1], sc, sh);
    v.extend_from_slice(&c_j[t1..]);
    v
}

/// Softmax with the maximum subtracted first.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attention score"));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn raw_scores(score: AttentionScore, hq: &[f64], keys: &[&[f64]], d_k: usize) -> Vec<f64> {
    let norm = (d_k as f64).sqrt();
    keys.iter()
        .map(|hk| match score {
            AttentionScore::QueryKey => dot(hq, hk) / norm,
            AttentionScore::KeyKey => dot(hk, hk) / norm,
        })
        .collect()
}

/// Attention coefficients of the (already scaled) neighbor vectors.
pub fn attention(params: &PredictorParams, c_tar: &[f64], scaled: &[Vec<f64>]) -> Result<Vec<f64>> {
    if scaled.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let w = params.dims.vector_width();
    if c_tar.len() != w || scaled.iter().any(|v| v.len() != w) {
        return Err(Error::shape(format!("cell vectors must have width {w}")));
    }
    let hq = params.query_embed.forward(c_tar);
    let hk: Vec<Vec<f64>> = scaled.iter().map(|v| params.key_embed.forward(v)).collect();
    let keys: Vec<&[f64]> = hk.iter().map(Vec::as_slice).collect();
    softmax(&raw_scores(params.hyper.score, &hq, &keys, params.hyper.d_k))
}

/// Elementwise weighted mean and unbiased weighted standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `mean = Σ w_j x_j / v1` and `std = sqrt(Σ w_j (x_j - mean)² / (v1 - v2/v1))`
/// with `v1 = Σ w_j`, `v2 = Σ w_j²`. For normalized weights the mean is the
/// plain weighted sum.
pub fn weighted_stats(weights: &[f64], series: &[&[f64]]) -> Result<WeightedStats> {
    if weights.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    if series.len() != weights.len() {
        return Err(Error::shape("one series per weight required"));
    }
    let len = series[0].len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::shape("series lengths differ"));
    }
    let v1: f64 = weights.iter().sum();
    let v2: f64 = weights.iter().map(|w| w * w).sum();
    if !(v1 > 0.0) {
        return Err(Error::DegenerateContext);
    }
    let denom = v1 - v2 / v1;
    if !(denom > 0.0) {
        return Err(Error::DegenerateContext);
    }
    let normalized = (v1 - 1.0).abs() < 1e-12;
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for t in 0..len {
        let s: f64 = weights.iter().zip(series).map(|(w, x)| w * x[t]).sum();
        mean[t] = if normalized { s } else { s / v1 };
        let ss: f64 = weights
            .iter()
            .zip(series)
            .map(|(w, x)| w * (x[t] - mean[t]).powi(2))
            .sum();
        std[t] = (ss / denom).max(0.0).sqrt();
    }
    Ok(WeightedStats { mean, std })
}

/// Transforms each neighbor's prediction-window series with its own
/// `(sc_j, sh_j)` and combines them with `alpha`.
pub fn readout(alpha: &[f64], sc: &[f64], sh: &[f64], pred: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = alpha.len();
    if sc.len() != k || sh.len() != k || pred.len() != k {
        return Err(Error::shape("alpha, sc, sh and series must all have length k"));
    }
    let xs: Vec<Vec<f64>> = (0..k).map(|j| affine(&pred[j], sc[j], sh[j])).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let st = weighted_stats(alpha, &refs)?;
    Ok((st.mean, st.std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// Estimate over the prediction window, normalized domain.
    pub x_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sc: Vec<f64>,
    pub sh: Vec<f64>,
    /// False when the estimate is not a linear combination of the neighbors.
    pub interpretable: bool,
}

impl PredictionOutput {
    /// Each neighbor's context window after its affine rescaling.
    pub fn scaled_context(&self, sample: &GraphSample) -> Vec<Vec<f64>> {
        sample
            .context_neighbors
            .iter()
            .enumerate()
            .map(|(j, x)| affine(x, self.sc[j], self.sh[j]))
            .collect()
    }

    /// Each neighbor's prediction window after its affine rescaling.
    pub fn scaled_prediction(&self, sample: &GraphSample) -> Vec<Vec<f64>> {
        sample
            .pred_neighbors
            .iter()
            .enumerate()
            .map(|(j, x)| affine(x, self.sc[j], self.sh[j]))
            .collect()
    }
}

pub(crate) struct HeadTrace {
    pub embeds: Vec<MlpTrace>,
    pub input: Vec<f64>,
    pub readout: MlpTrace,
}

/// Every intermediate of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    pub c_tar: Vec<f64>,
    pub c_nb: Vec<Vec<f64>>,
    pub scale: Vec<MlpTrace>,
    pub sc: Vec<f64>,
    pub sh: Vec<f64>,
    pub keys_in: Vec<Vec<f64>>,
    pub query: MlpTrace,
    pub keys: Vec<MlpTrace>,
    pub alpha: Vec<f64>,
    pub xs_pred: Vec<Vec<f64>>,
    pub head: Option<HeadTrace>,
    pub x_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn forward_trace(params: &PredictorParams, sample: &GraphSample) -> Result<Trace> {
    params.check_sample(sample)?;
    let dims = &params.dims;
    let t1 = dims.context_len();
    let k = sample.k();
    let c_tar = cell_vector(&sample.target, &sample.context_target, dims)?;
    let c_nb = sample
        .neighbors
        .iter()
        .zip(&sample.context_neighbors)
        .map(|(m, x)| cell_vector(m, x, dims))
        .collect::<Result<Vec<_>>>()?;

    let (scale, sc, sh, keys_in) = match &params.scale_nn {
        Some(nn) => {
            let tp = scale_target_part(nn, &c_tar);
            let scale: Vec<MlpTrace> = c_nb.iter().map(|c| scale_pair(nn, &tp, c)).collect();
            let sc: Vec<f64> = scale.iter().map(|t| t.out[0]).collect();
            let sh: Vec<f64> = scale.iter().map(|t| t.out[1]).collect();
            let keys_in = (0..k).map(|j| scaled_vector(&c_nb[j], t1, sc[j], sh[j])).collect();
            (scale, sc, sh, keys_in)
        }
        None => (Vec::new(), vec![1.0; k], vec![0.0; k], c_nb.clone()),
    };
    if sc.iter().chain(&sh).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scale or shift"));
    }

    let query = params.query_embed.trace(&c_tar);
    let keys: Vec<MlpTrace> = keys_in.iter().map(|v| params.key_embed.trace(v)).collect();
    let key_refs: Vec<&[f64]> = keys.iter().map(|t| t.out.as_slice()).collect();
    let alpha = softmax(&raw_scores(params.hyper.score, &query.out, &key_refs, params.hyper.d_k))?;

    let xs_pred: Vec<Vec<f64>> = (0..k)
        .map(|j| affine(&sample.pred_neighbors[j], sc[j], sh[j]))
        .collect();

    let (head, x_hat, sigma_hat) = match &params.head {
        None => {
            let refs: Vec<&[f64]> = xs_pred.iter().map(Vec::as_slice).collect();
            let st = weighted_stats(&alpha, &refs)?;
            (None, st.mean, st.std)
        }
        Some(h) => {
            let l = dims.horizon;
            let embeds: Vec<MlpTrace> = xs_pred.iter().map(|x| h.series_embed.trace(x)).collect();
            let mut input = vec![0.0; params.hyper.d_k + l];
            for j in 0..k {
                let (a, rest) = input.split_at_mut(params.hyper.d_k);
                for (d, v) in a.iter_mut().zip(&keys[j].out) {
                    *d += alpha[j] * v;
                }
                for (d, v) in rest.iter_mut().zip(&embeds[j].out) {
                    *d += alpha[j] * v;
                }
            }
            let r = h.readout.trace(&input);
            let x_hat = r.out[..l].to_vec();
            let sigma_hat = r.out[l..].iter().map(|&v| softplus(v)).collect();
            (
                Some(HeadTrace {
                    embeds,
                    input,
                    readout: r,
                }),
                x_hat,
                sigma_hat,
            )
        }
    };
    if x_hat.iter().chain(&sigma_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction"));
    }
    Ok(Trace {
        c_tar,
        c_nb,
        scale,
        sc,
        sh,
        keys_in,
        query,
        keys,
        alpha,
        xs_pred,
        head,
        x_hat,
        sigma_hat,
    })
}

/// Runs the full forward pass on one graph sample.
pub fn predict(params: &PredictorParams, sample: &GraphSample) -> Result<PredictionOutput> {
    let t = forward_trace(params, sample)?;
    Ok(PredictionOutput {
        x_hat: t.x_hat,
        sigma_hat: t.sigma_hat,
        alpha: t.alpha,
        sc: t.sc,
        sh: t.sh,
        interpretable: params.variant.is_interpretable(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Activations {
    hidden: String,
    output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Weights {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scale_nn: Option<MlpDoc>,
    query_embed: MlpDoc,
    key_embed: MlpDoc,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    series_embed: Option<MlpDoc>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    readout: Option<MlpDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    variant: Variant,
    dims: Dims,
    hyper: Hyper,
    activations: Activations,
    init_seed: u64,
    weights: Weights,
}

impl PredictorParams {
    pub fn to_json(&self) -> Result<String> {
        if !self.is_finite() {
            return Err(Error::NonFinite("model weight"));
        }
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            variant: self.variant,
            dims: self.dims,
            hyper: self.hyper,
            activations: Activations {
                hidden: "relu".into(),
                output: "linear".into(),
            },
            init_seed: self.init_seed,
            weights: Weights {
                scale_nn: self.scale_nn.as_ref().map(MlpDoc::from),
                query_embed: (&self.query_embed).into(),
                key_embed: (&self.key_embed).into(),
                series_embed: self.head.as_ref().map(|h| (&h.series_embed).into()),
                readout: self.head.as_ref().map(|h| (&h.readout).into()),
            },
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unexpected format '{}'", doc.format)));
        }
        if doc.version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported model version {}", doc.version)));
        }
        if doc.activations.hidden != "relu" || doc.activations.output != "linear" {
            return Err(Error::Model("unsupported activations".into()));
        }
        let (dims, hyper, variant) = (doc.dims, doc.hyper, doc.variant);
        if dims.attr_width != ATTR_WIDTH || dims.lookback == 0 || dims.horizon == 0 {
            return Err(Error::Model("invalid dims".into()));
        }
        let w = dims.vector_width();
        let l = dims.horizon;
        let wt = doc.weights;
        let scale_nn = match (variant.has_autoscaler(), wt.scale_nn) {
            (true, Some(d)) => Some(d.into_mlp(2 * w, hyper.scale_hidden, 2, "scale_nn")?),
            (false, None) => None,
            _ => return Err(Error::Model("scale_nn presence does not match variant".into())),
        };
        let head = match (variant.is_interpretable(), wt.series_embed, wt.readout) {
            (true, None, None) => None,
            (false, Some(se), Some(ro)) => Some(CombinationHead {
                series_embed: se.into_mlp(l, hyper.readout_hidden, l, "series_embed")?,
                readout: ro.into_mlp(hyper.d_k + l, hyper.readout_hidden, 2 * l, "readout")?,
            }),
            _ => return Err(Error::Model("readout networks do not match variant".into())),
        };
        Ok(Self {
            dims,
            hyper,
            variant,
            init_seed: doc.init_seed,
            scale_nn,
            query_embed: wt
                .query_embed
                .into_mlp(w, hyper.embed_hidden, hyper.d_k, "query_embed")?,
            key_embed: wt.key_embed.into_mlp(w, hyper.embed_hidden, hyper.d_k, "key_embed")?,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
pub(crate) mod tests;
