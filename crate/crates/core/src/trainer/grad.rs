//! Gaussian negative log-likelihood and its exact reverse-mode gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph_data::GraphSample;
use crate::nn::{axpy, dot};
use crate::predictor::{forward_trace, sigmoid, AttentionScore, PredictorParams, Trace};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean over the window of `0.5 ln(2π σ²) + (x - x̂)² / (2σ²)`, with
/// `σ = max(sigma_hat, sigma_floor)`.
pub fn nll_loss(x_hat: &[f64], sigma_hat: &[f64], x_true: &[f64], sigma_floor: f64) -> Result<f64> {
    if x_hat.len() != sigma_hat.len() || x_hat.len() != x_true.len() || x_hat.is_empty() {
        return Err(Error::shape("nll_loss needs three equal, non-empty series"));
    }
    let mut total = 0.0;
    for ((&m, &s), &y) in x_hat.iter().zip(sigma_hat).zip(x_true) {
        if !(m.is_finite() && s.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite("nll_loss input"));
        }
        total += point_nll(m, s.max(sigma_floor), y);
    }
    Ok(total / x_hat.len() as f64)
}

#[inline]
fn point_nll(mean: f64, sigma: f64, y: f64) -> f64 {
    let r = y - mean;
    0.5 * (LN_2PI + 2.0 * sigma.ln()) + r * r / (2.0 * sigma * sigma)
}

/// Per-hour weights of the loss: observed hours share weight equally,
/// imputed hours get none.
pub(crate) fn hour_weights(mask: &[bool]) -> Option<Vec<f64>> {
    let n = mask.iter().filter(|m| **m).count();
    (n > 0).then(|| mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect())
}

/// Gradient of the mean loss over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub grads: PredictorParams,
    /// Mean loss over the samples that contributed.
    pub loss: f64,
    pub used: usize,
    /// Samples dropped because their readout was degenerate or their target
    /// had no observed hour in the prediction window.
    pub skipped: usize,
}

pub(crate) struct SampleGradient {
    pub grads: PredictorParams,
    pub loss: f64,
    pub trace: Trace,
}

/// Loss and gradient for one sample; `None` when the sample cannot
/// contribute.
pub(crate) fn sample_gradient(
    params: &PredictorParams,
    sample: &GraphSample,
    sigma_floor: f64,
) -> Result<Option<SampleGradient>> {
    let Some(w) = hour_weights(&sample.target_pred_mask) else {
        return Ok(None);
    };
    let trace = match forward_trace(params, sample) {
        Ok(t) => t,
        Err(Error::DegenerateContext) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut grads = params.zeros_like();
    let loss = backward(params, sample, &trace, &w, sigma_floor, &mut grads);
    Ok(Some(SampleGradient { grads, loss, trace }))
}

/// Exact gradient of the mean loss of `batch`. Per-sample work may run in
/// parallel; the reduction is always in batch order.
pub fn gradients(params: &PredictorParams, batch: &[GraphSample], sigma_floor: f64) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per: Vec<Option<SampleGradient>> = batch
        .par_iter()
        .map(|s| sample_gradient(params, s, sigma_floor))
        .collect::<Result<_>>()?;
    Ok(reduce(params, per.into_iter().map(|g| g.map(|g| (g.grads, g.loss)))))
}

pub(crate) fn reduce(
    params: &PredictorParams,
    per: impl Iterator<Item = Option<(PredictorParams, f64)>>,
) -> BatchGradient {
    let mut total = params.zeros_like();
    let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for item in per {
        match item {
            Some((g, l)) => {
                for (dst, src) in total.tensors_mut().into_iter().zip(g.tensors()) {
                    axpy(1.0, src.1, dst);
                }
                loss += l;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        for t in total.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= inv);
        }
        loss *= inv;
    }
    BatchGradient {
        grads: total,
        loss,
        used,
        skipped,
    }
}

/// Global L2 norm over every parameter tensor.
pub fn global_norm(grads: &PredictorParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so that their global L2 norm does not exceed `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut PredictorParams, clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::invalid("clip_norm must be positive"));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if norm > clip_norm {
        let f = clip_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(norm)
}

/// Backpropagates the weighted per-hour loss of one forward pass into
/// `g`, returning the loss.
fn backward(
    p: &PredictorParams,
    sample: &GraphSample,
    tr: &Trace,
    w: &[f64],
    floor: f64,
    g: &mut PredictorParams,
) -> f64 {
    let k = tr.alpha.len();
    let l = tr.x_hat.len();
    let d_k = p.hyper.d_k;
    let alpha = &tr.alpha;

    let mut loss = 0.0;
    let mut dx_hat = vec![0.0; l];
    let mut dsigma = vec![0.0; l];
    for t in 0..l {
        if w[t] == 0.0 {
            continue;
        }
        let s = tr.sigma_hat[t];
        let se = s.max(floor);
        let r = sample.pred_target[t] - tr.x_hat[t];
        loss += w[t] * point_nll(tr.x_hat[t], se, sample.pred_target[t]);
        dx_hat[t] = -w[t] * r / (se * se);
        if s > floor {
            dsigma[t] = w[t] * (1.0 / se - r * r / (se * se * se));
        }
    }

    let mut dalpha = vec![0.0; k];
    let mut dxs = vec![vec![0.0; l]; k];
    let mut dhk = vec![vec![0.0; d_k]; k];

    match (&p.head, &tr.head) {
        (None, _) => {
            let v1: f64 = alpha.iter().sum();
            let v2: f64 = alpha.iter().map(|a| a * a).sum();
            let denom = v1 - v2 / v1;
            let mut ddenom = 0.0;
            for t in 0..l {
                let s = tr.sigma_hat[t];
                if dsigma[t] != 0.0 && s > 0.0 {
                    let ss = s * s * denom;
                    let dvar = dsigma[t] / (2.0 * s);
                    let dss = dvar / denom;
                    ddenom -= dvar * ss / (denom * denom);
                    let mut dm = 0.0;
                    for j in 0..k {
                        let diff = tr.xs_pred[j][t] - tr.x_hat[t];
                        dxs[j][t] += dss * 2.0 * alpha[j] * diff;
                        dalpha[j] += dss * diff * diff;
                        dm -= 2.0 * dss * alpha[j] * diff;
                    }
                    dx_hat[t] += dm;
                }
            }
            for j in 0..k {
                for t in 0..l {
                    dalpha[j] += dx_hat[t] * tr.xs_pred[j][t];
                    dxs[j][t] += dx_hat[t] * alpha[j];
                }
                dalpha[j] += ddenom * (1.0 - 2.0 * alpha[j] / v1 + v2 / (v1 * v1));
            }
        }
        (Some(head), Some(ht)) => {
            let gh = g.head.as_mut().expect("gradient buffer mirrors params");
            let mut dr = vec![0.0; 2 * l];
            for t in 0..l {
                dr[t] = dx_hat[t];
                dr[l + t] = dsigma[t] * sigmoid(ht.readout.out[l + t]);
            }
            let mut dinput = vec![0.0; d_k + l];
            head.readout
                .backward(&ht.input, &ht.readout, &dr, &mut gh.readout, Some(&mut dinput));
            let (dagg_h, dagg_e) = dinput.split_at(d_k);
            for j in 0..k {
                dalpha[j] += dot(dagg_h, &tr.keys[j].out) + dot(dagg_e, &ht.embeds[j].out);
                axpy(alpha[j], dagg_h, &mut dhk[j]);
                let de: Vec<f64> = dagg_e.iter().map(|v| alpha[j] * v).collect();
                head.series_embed.backward(
                    &tr.xs_pred[j],
                    &ht.embeds[j],
                    &de,
                    &mut gh.series_embed,
                    Some(&mut dxs[j]),
                );
            }
        }
        (Some(_), None) => unreachable!("trace built without readout head"),
    }

    let da: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    let norm = (d_k as f64).sqrt();
    let mut dhq = vec![0.0; d_k];
    for j in 0..k {
        let ds = alpha[j] * (dalpha[j] - da) / norm;
        match p.hyper.score {
            AttentionScore::QueryKey => {
                axpy(ds, &tr.keys[j].out, &mut dhq);
                axpy(ds, &tr.query.out, &mut dhk[j]);
            }
            AttentionScore::KeyKey => axpy(2.0 * ds, &tr.keys[j].out, &mut dhk[j]),
        }
    }
    if p.hyper.score == AttentionScore::QueryKey {
        p.query_embed
            .backward(&tr.c_tar, &tr.query, &dhq, &mut g.query_embed, None);
    }

    let Some(nn) = &p.scale_nn else {
        for j in 0..k {
            p.key_embed
                .backward(&tr.keys_in[j], &tr.keys[j], &dhk[j], &mut g.key_embed, None);
        }
        return loss;
    };
    let gs = g.scale_nn.as_mut().expect("gradient buffer mirrors params");
    let width = tr.c_tar.len();
    let t1 = p.dims.context_len();
    let mut dsum = vec![0.0; nn.hidden.out];
    let mut dkin = vec![0.0; width];
    for j in 0..k {
        dkin.iter_mut().for_each(|v| *v = 0.0);
        p.key_embed
            .backward(&tr.keys_in[j], &tr.keys[j], &dhk[j], &mut g.key_embed, Some(&mut dkin));
        let x_ctx = &tr.c_nb[j][..t1];
        let x_pred = &sample.pred_neighbors[j];
        let dsc = dot(&dkin[..t1], x_ctx) + dot(&dxs[j], x_pred);
        let dsh = dkin[..t1].iter().sum::<f64>() + dxs[j].iter().sum::<f64>();
        let dpre = nn.backward_to_pre(&tr.scale[j], &[dsc, dsh], gs);
        let inp = nn.hidden.inp;
        for (i, &d) in dpre.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &tr.c_nb[j], &mut gs.hidden.w[i * inp..i * inp + width]);
                dsum[i] += d;
            }
        }
    }
    let inp = nn.hidden.inp;
    for (i, &d) in dsum.iter().enumerate() {
        if d != 0.0 {
            axpy(d, &tr.c_tar, &mut gs.hidden.w[i * inp + width..(i + 1) * inp]);
            gs.hidden.b[i] += d;
        }
    }
    loss
}
