//! C interface to the ranctx predictor and detector.
//!
//! Models are opaque handles loaded from the JSON files written by
//! `ranctx train`. Every fallible function returns a [`RanctxStatus`]; on
//! failure a description is available from [`ranctx_last_error`] on the same
//! thread. Series are expected in the log-normalized domain (see
//! [`ranctx_log_normalize`]).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use ranctx::detector::{self, DetectorConfig, FilterReason};
use ranctx::graph_data::{self, CellMeta, GraphSample};
use ranctx::predictor::{self, PredictorParams};
use ranctx::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RanctxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Model = 4,
    Io = 5,
    DegenerateContext = 6,
    EmptyNeighborhood = 7,
    NonFinite = 8,
    Panic = 9,
    Other = 10,
}

/// Outcome of the entropy and historical-error pre-filter.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RanctxFilter {
    Passed = 0,
    LowEntropy = 1,
    HighHistoricalError = 2,
    DegenerateContext = 3,
}

/// A trained predictor.
pub struct RanctxModel {
    params: PredictorParams,
}

/// One target cell and its `k` neighbors. `T1 = lookback + 1` and
/// `L = horizon` come from the model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RanctxSample {
    /// `T1` values.
    pub target_context: *const f64,
    /// `k * T1` values, neighbor-major.
    pub neighbor_context: *const f64,
    /// `k * L` values, neighbor-major.
    pub neighbor_prediction: *const f64,
    /// `L` observed target values; only read by [`ranctx_judge`].
    pub target_prediction: *const f64,
    /// `2 * (k + 1)` attribute indices: antenna (0..8) then band (8..15),
    /// target first, then each neighbor.
    pub attributes: *const u32,
}

/// Caller-owned output buffers. Any pointer may be null to skip that output.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RanctxPrediction {
    /// `L` values.
    pub x_hat: *mut f64,
    /// `L` values.
    pub sigma_hat: *mut f64,
    /// `k` values.
    pub alpha: *mut f64,
    /// `k` values.
    pub sc: *mut f64,
    /// `k` values.
    pub sh: *mut f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RanctxDetectorParams {
    pub lambda: f64,
    pub percentile: f64,
    pub gamma: f64,
    pub sigma_floor: f64,
    pub entropy_normalized: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RanctxVerdict {
    pub filter: RanctxFilter,
    /// NaN for a degenerate context.
    pub entropy: f64,
    /// NaN for a degenerate context.
    pub h_err_percentile: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RanctxStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::Parse { .. } => RanctxStatus::InvalidArgument,
        Error::Shape(_) => RanctxStatus::Shape,
        Error::Model(_) | Error::Json(_) => RanctxStatus::Model,
        Error::Io { .. } => RanctxStatus::Io,
        Error::DegenerateContext => RanctxStatus::DegenerateContext,
        Error::EmptyNeighborhood => RanctxStatus::EmptyNeighborhood,
        Error::NonFinite(_) => RanctxStatus::NonFinite,
        _ => RanctxStatus::Other,
    }
}

struct Failure(RanctxStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RanctxStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RanctxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RanctxStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            RanctxStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write(dst: *mut f64, src: &[f64]) {
    if !dst.is_null() {
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
}

unsafe fn model_ref<'a>(model: *const RanctxModel) -> Result<&'a PredictorParams, Failure> {
    model.as_ref().map(|m| &m.params).ok_or_else(|| null("model"))
}

unsafe fn build_sample(
    params: &PredictorParams,
    s: *const RanctxSample,
    with_target: bool,
) -> Result<GraphSample, Failure> {
    let s = s.as_ref().ok_or_else(|| null("sample"))?;
    let d = params.dims;
    let (k, t1, l) = (d.k, d.context_len(), d.horizon);
    if s.attributes.is_null() {
        return Err(null("attributes"));
    }
    let attrs = slice::from_raw_parts(s.attributes, 2 * (k + 1));
    let cell = |i: usize| -> Result<Arc<CellMeta>, Failure> {
        let id = if i == 0 {
            "target".to_string()
        } else {
            format!("neighbor{i}")
        };
        let m = CellMeta::new(
            id.clone(),
            id.clone(),
            id,
            (0.0, 0.0),
            attrs[2 * i] as usize,
            attrs[2 * i + 1] as usize,
        )?;
        Ok(Arc::new(m))
    };
    let ctx = input(s.neighbor_context, k * t1, "neighbor_context")?;
    let pred = input(s.neighbor_prediction, k * l, "neighbor_prediction")?;
    let target_pred = if with_target {
        input(s.target_prediction, l, "target_prediction")?.to_vec()
    } else {
        vec![0.0; l]
    };
    Ok(GraphSample {
        target: cell(0)?,
        neighbors: (1..=k).map(cell).collect::<Result<_, _>>()?,
        anchor: 0,
        context_target: input(s.target_context, t1, "target_context")?.to_vec(),
        context_neighbors: ctx.chunks(t1).map(<[f64]>::to_vec).collect(),
        pred_neighbors: pred.chunks(l).map(<[f64]>::to_vec).collect(),
        pred_target: target_pred,
        target_context_mask: vec![true; t1],
        target_pred_mask: vec![true; l],
    })
}

/// Description of the last failure on this thread, or null. The string stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ranctx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ranctx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file. On success `*out` owns a handle to be released with
/// [`ranctx_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ranctx_model_load(path: *const c_char, out: *mut *mut RanctxModel) -> RanctxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(RanctxStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let params = PredictorParams::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(RanctxModel { params }));
        Ok(())
    })
}

/// Parses a model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ranctx_model_from_json(json: *const c_char, out: *mut *mut RanctxModel) -> RanctxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| Failure(RanctxStatus::InvalidArgument, "model text is not UTF-8".into()))?;
        let params = PredictorParams::from_json(text)?;
        *out = Box::into_raw(Box::new(RanctxModel { params }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ranctx_model_free(model: *mut RanctxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window sizes of a model: lookback `T`, horizon `L` and neighbor count `k`.
///
/// # Safety
/// All pointers must be valid; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn ranctx_model_dims(
    model: *const RanctxModel,
    lookback: *mut usize,
    horizon: *mut usize,
    k: *mut usize,
) -> RanctxStatus {
    guard(|| {
        let d = model_ref(model)?.dims;
        for (dst, v) in [(lookback, d.lookback), (horizon, d.horizon), (k, d.k)] {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Predicts the target over the prediction window.
///
/// # Safety
/// Input arrays must hold the sizes documented on [`RanctxSample`]; non-null
/// outputs must hold `L` or `k` values.
#[no_mangle]
pub unsafe extern "C" fn ranctx_predict(
    model: *const RanctxModel,
    sample: *const RanctxSample,
    out: RanctxPrediction,
) -> RanctxStatus {
    guard(|| {
        let params = model_ref(model)?;
        let s = build_sample(params, sample, false)?;
        let o = predictor::predict(params, &s)?;
        write(out.x_hat, &o.x_hat);
        write(out.sigma_hat, &o.sigma_hat);
        write(out.alpha, &o.alpha);
        write(out.sc, &o.sc);
        write(out.sh, &o.sh);
        Ok(())
    })
}

/// Default detector thresholds.
#[no_mangle]
pub extern "C" fn ranctx_detector_defaults() -> RanctxDetectorParams {
    let d = DetectorConfig::default();
    RanctxDetectorParams {
        lambda: d.lambda,
        percentile: d.percentile,
        gamma: d.gamma,
        sigma_floor: d.sigma_floor,
        entropy_normalized: d.entropy_normalized,
    }
}

/// Runs the predictor and the pre-filter on one sample and writes the
/// anomaly score of each of the `L` hours to `scores` (may be null). Scores
/// are written even when the sample is filtered out; they are NaN for a
/// degenerate context. `params` may be null for the defaults.
///
/// # Safety
/// As for [`ranctx_predict`]; `sample->target_prediction` must hold `L`
/// values and `verdict` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ranctx_judge(
    model: *const RanctxModel,
    sample: *const RanctxSample,
    params: *const RanctxDetectorParams,
    verdict: *mut RanctxVerdict,
    scores: *mut f64,
) -> RanctxStatus {
    guard(|| {
        let model = model_ref(model)?;
        if verdict.is_null() {
            return Err(null("verdict"));
        }
        let p = params.as_ref().copied().unwrap_or_else(|| ranctx_detector_defaults());
        let cfg = DetectorConfig {
            lambda: p.lambda,
            percentile: p.percentile,
            gamma: p.gamma,
            sigma_floor: p.sigma_floor,
            entropy_normalized: p.entropy_normalized,
            ..DetectorConfig::default()
        };
        cfg.validate()?;
        let s = build_sample(model, sample, true)?;
        let v = detector::judge(model, &s, &cfg)?;
        *verdict = RanctxVerdict {
            filter: match v.reason {
                FilterReason::None => RanctxFilter::Passed,
                FilterReason::LowEntropy => RanctxFilter::LowEntropy,
                FilterReason::HighHistoricalError => RanctxFilter::HighHistoricalError,
                FilterReason::DegenerateContext => RanctxFilter::DegenerateContext,
            },
            entropy: v.entropy.unwrap_or(f64::NAN),
            h_err_percentile: v.h_err_pct.unwrap_or(f64::NAN),
        };
        match &v.raw_scores {
            Some(r) => write(scores, r),
            None => write(scores, &vec![f64::NAN; model.dims.horizon]),
        }
        Ok(())
    })
}

/// Entropy of `k` attention coefficients, divided by `ln k` when
/// `normalized`.
///
/// # Safety
/// `alpha` must hold `k` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ranctx_attention_entropy(
    alpha: *const f64,
    k: usize,
    normalized: bool,
    out: *mut f64,
) -> RanctxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = detector::attention_entropy(input(alpha, k, "alpha")?, normalized)?;
        Ok(())
    })
}

/// `|x_hat - x| / max(sigma_hat, sigma_floor)` for `len` hours.
///
/// # Safety
/// Every array must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ranctx_anomaly_scores(
    x_hat: *const f64,
    sigma_hat: *const f64,
    x_true: *const f64,
    len: usize,
    sigma_floor: f64,
    out: *mut f64,
) -> RanctxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(sigma_floor > 0.0) {
            return Err(Failure(
                RanctxStatus::InvalidArgument,
                "sigma_floor must be positive".into(),
            ));
        }
        let s = detector::anomaly_scores(
            input(x_hat, len, "x_hat")?,
            input(sigma_hat, len, "sigma_hat")?,
            input(x_true, len, "x_true")?,
            sigma_floor,
        );
        write(out, &s);
        Ok(())
    })
}

/// `ln(1 + v)` for a utilization `v` in percent.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ranctx_log_normalize(v: f64, out: *mut f64) -> RanctxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = graph_data::log_normalize(v)?;
        Ok(())
    })
}
