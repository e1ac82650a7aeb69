//! C ABI over the leakproto library.
//!
//! Every fallible call returns an [`LpStatus`]; on failure a message is kept
//! per thread and can be read with [`lp_last_error`]. Handles are opaque and
//! must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use leakproto::metrics::{self, ScoredSet};
use leakproto::model::{Model, Pooling, SampleOutput};
use leakproto::schedule::{self, LatentTensor, ScheduleConfig, LATENT_LEN};
use leakproto::scoring::{self, Bandwidth, KdeModel};
use leakproto::training::Checkpoint;
use leakproto::{Error, ErrorKind};

/// Number of values in one latent (4 × 32 × 32, channel-major).
pub const LP_LATENT_LEN: usize = 4096;
const _: () = assert!(LP_LATENT_LEN == LATENT_LEN);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    LpOk = 0,
    LpErrNull = 1,
    LpErrConfig = 2,
    LpErrData = 3,
    LpErrNumeric = 4,
    LpErrIo = 5,
    LpErrPanic = 6,
}

/// Trained model loaded from a checkpoint.
pub struct LpModel {
    model: Model,
}

/// Gaussian KDE over a fixed support set.
pub struct LpKde {
    kde: KdeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: Error) -> LpStatus {
    set_error(&e.to_string());
    match e.kind() {
        ErrorKind::Config => LpStatus::LpErrConfig,
        ErrorKind::Data => LpStatus::LpErrData,
        ErrorKind::Numeric => LpStatus::LpErrNumeric,
        ErrorKind::Io => LpStatus::LpErrIo,
    }
}

fn null(what: &str) -> LpStatus {
    set_error(&format!("null pointer: {what}"));
    LpStatus::LpErrNull
}

fn guard(f: impl FnOnce() -> LpStatus) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            LpStatus::LpErrPanic
        }
    }
}

fn done(r: leakproto::Result<()>) -> LpStatus {
    match r {
        Ok(()) => LpStatus::LpOk,
        Err(e) => fail(e),
    }
}

unsafe fn values<'a>(p: *const f64, n: usize) -> Option<&'a [f64]> {
    if n == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(p, n))
    }
}

/// Message of the last failure on this thread; empty if none. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Cosine-schedule coefficients at integer step `t` of `total_steps`
/// (other schedule parameters at their defaults).
///
/// # Safety
/// `alpha` and `sigma` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_alpha_sigma(t: usize, total_steps: usize, alpha: *mut f64, sigma: *mut f64) -> LpStatus {
    guard(|| {
        if alpha.is_null() || sigma.is_null() {
            return null("alpha/sigma");
        }
        let cfg = ScheduleConfig {
            total_steps,
            ..ScheduleConfig::default()
        };
        match cfg.validate().and_then(|_| schedule::alpha_sigma(t, &cfg)) {
            Ok((a, s)) => {
                *alpha = a;
                *sigma = s;
                LpStatus::LpOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads the best model from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_model_load(path: *const c_char, out: *mut *mut LpModel) -> LpStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return null("path/out");
        }
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            set_error("path is not valid UTF-8");
            return LpStatus::LpErrConfig;
        };
        match Checkpoint::load(path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(LpModel { model: ck.model }));
                LpStatus::LpOk
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`lp_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_model_free(model: *mut LpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_model_embed_dim(model: *const LpModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.embed_dim())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_model_num_classes(model: *const LpModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_classes())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_model_num_steps(model: *const LpModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.steps())
}

unsafe fn infer_one<'a>(model: *const LpModel, latent: *const f64, len: usize, noise_seed: u64, pooling: Pooling) -> Result<(&'a Model, SampleOutput), LpStatus> {
    let Some(m) = model.as_ref() else {
        return Err(null("model"));
    };
    let Some(data) = values(latent, len) else {
        return Err(null("latent"));
    };
    let run = || -> leakproto::Result<_> {
        let z0 = LatentTensor::new(data.to_vec())?.mark_scaled();
        let seq = m.model.sequence(&z0, noise_seed)?;
        Ok(m.model.infer(&[&seq], pooling)?.remove(0))
    };
    run().map(|o| (&m.model, o)).map_err(fail)
}

/// Frozen embedding of one VAE-scaled latent. With `attention` the embedding is
/// attention-pooled and gated; otherwise it is the plain mean over timesteps.
/// `out` receives [`lp_model_embed_dim`] values.
///
/// # Safety
/// `latent` must hold `len` values and `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn lp_model_embed(
    model: *const LpModel,
    latent: *const f64,
    len: usize,
    noise_seed: u64,
    attention: bool,
    out: *mut f64,
    out_len: usize,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let pooling = if attention { Pooling::Attention } else { Pooling::Uniform };
        let (_, o) = match infer_one(model, latent, len, noise_seed, pooling) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let h = if attention { o.gated() } else { o.pooled };
        if out_len != h.len() {
            return fail(Error::Shape(format!("output holds {out_len} values, embedding has {}", h.len())));
        }
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(&h);
        LpStatus::LpOk
    })
}

/// Class posteriors and temporal attention weights for one latent; writes the
/// argmax class to `predicted`. `attn` may be null.
///
/// # Safety
/// `posteriors` must hold `num_classes` values, `attn` (if non-null) `num_steps`.
#[no_mangle]
pub unsafe extern "C" fn lp_model_attribute(
    model: *const LpModel,
    latent: *const f64,
    len: usize,
    noise_seed: u64,
    posteriors: *mut f64,
    num_classes: usize,
    attn: *mut f64,
    num_steps: usize,
    predicted: *mut usize,
) -> LpStatus {
    guard(|| {
        if posteriors.is_null() || predicted.is_null() {
            return null("posteriors/predicted");
        }
        let (m, o) = match infer_one(model, latent, len, noise_seed, Pooling::Attention) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if num_classes != m.num_classes() || (!attn.is_null() && num_steps != m.config.steps()) {
            return fail(Error::Shape("output buffers do not match the model".into()));
        }
        let post = o.posteriors();
        slice::from_raw_parts_mut(posteriors, num_classes).copy_from_slice(&post);
        if !attn.is_null() {
            slice::from_raw_parts_mut(attn, num_steps).copy_from_slice(&o.attn);
        }
        let mut best = 0;
        for (i, p) in post.iter().enumerate() {
            if *p > post[best] {
                best = i;
            }
        }
        *predicted = best;
        LpStatus::LpOk
    })
}

/// Fits a KDE on `n` row-major support vectors of width `dim`. A non-positive
/// `bandwidth` selects Scott's rule.
///
/// # Safety
/// `support` must hold `n·dim` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_kde_fit(support: *const f64, n: usize, dim: usize, bandwidth: f64, out: *mut *mut LpKde) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        *out = ptr::null_mut();
        if dim == 0 {
            return fail(Error::Shape("dimension must be positive".into()));
        }
        let Some(data) = values(support, n * dim) else {
            return null("support");
        };
        let rows = data.chunks(dim).map(<[f64]>::to_vec).collect();
        let bw = if bandwidth > 0.0 { Bandwidth::Fixed(bandwidth) } else { Bandwidth::Auto };
        match scoring::fit_kde(rows, bw) {
            Ok(kde) => {
                *out = Box::into_raw(Box::new(LpKde { kde }));
                LpStatus::LpOk
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `kde` must be null or a handle from [`lp_kde_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_kde_free(kde: *mut LpKde) {
    if !kde.is_null() {
        drop(Box::from_raw(kde));
    }
}

/// # Safety
/// `kde` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_kde_bandwidth(kde: *const LpKde) -> f64 {
    kde.as_ref().map_or(f64::NAN, |k| k.kde.bandwidth)
}

/// Log-density of one query vector.
///
/// # Safety
/// `query` must hold `dim` values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_kde_score(kde: *const LpKde, query: *const f64, dim: usize, out: *mut f64) -> LpStatus {
    guard(|| {
        let (Some(k), Some(q)) = (kde.as_ref(), values(query, dim)) else {
            return null("kde/query");
        };
        if out.is_null() {
            return null("out");
        }
        match scoring::kde_log_score(&k.kde, q) {
            Ok(v) => {
                *out = v;
                LpStatus::LpOk
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn groups<'a>(pos: *const f64, npos: usize, neg: *const f64, nneg: usize) -> Result<(&'a [f64], &'a [f64]), LpStatus> {
    match (values(pos, npos), values(neg, nneg)) {
        (Some(p), Some(n)) => Ok((p, n)),
        _ => Err(null("scores")),
    }
}

/// ROC AUC of `pos` (higher is positive) against `neg`; ties count one half.
///
/// # Safety
/// Arrays must hold the given counts; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_roc_auc(pos: *const f64, npos: usize, neg: *const f64, nneg: usize, out: *mut f64) -> LpStatus {
    guard(|| {
        let (p, n) = match groups(pos, npos, neg, nneg) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        done(metrics::roc_auc(&ScoredSet::from_groups(p, n)).map(|v| *out = v))
    })
}

/// Equal error rate of closed (accepted above threshold) against open scores.
/// `threshold` may be null.
///
/// # Safety
/// Arrays must hold the given counts; `eer` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_eer(closed: *const f64, nclosed: usize, open: *const f64, nopen: usize, eer: *mut f64, threshold: *mut f64) -> LpStatus {
    guard(|| {
        let (c, o) = match groups(closed, nclosed, open, nopen) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if eer.is_null() {
            return null("eer");
        }
        done(metrics::eer(c, o).map(|p| {
            *eer = p.eer;
            if !threshold.is_null() {
                *threshold = p.threshold;
            }
        }))
    })
}

/// Histogram overlap of the two score groups on `bins` shared bins.
///
/// # Safety
/// Arrays must hold the given counts; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lp_ovl(closed: *const f64, nclosed: usize, open: *const f64, nopen: usize, bins: usize, out: *mut f64) -> LpStatus {
    guard(|| {
        let (c, o) = match groups(closed, nclosed, open, nopen) {
            Ok(v) => v,
            Err(s) => return s,
        };
        if out.is_null() {
            return null("out");
        }
        done(metrics::ovl(c, o, bins).map(|v| *out = v))
    })
}
