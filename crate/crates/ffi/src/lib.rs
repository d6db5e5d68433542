//! C ABI over the conformal-kit calibrators.
//!
//! Every fallible function returns a [`CkStatus`]; on failure the message is
//! available from [`ck_last_error`] on the same thread. Calibrators are opaque
//! handles released with [`ck_calibrator_free`]; strings returned by the
//! library are released with [`ck_string_free`].
//!
//! Matrices are row-major. Labels and class counts are `size_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use conformal_kit::calibrator::{CovariateConfig, KMeansCpConfig, Space};
use conformal_kit::density::BandwidthRule;
use conformal_kit::io::Envelope;
use conformal_kit::neighbors::WeightScheme;
use conformal_kit::quantile::{conformal_quantile, weighted_quantile, QuantileRule};
use conformal_kit::score::nonconformity_score;
use conformal_kit::{Calibrator, CalibratorKind, Error, Record, Threshold};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidAlpha = 3,
    InvalidProbabilities = 4,
    InvalidLabel = 5,
    ShapeMismatch = 6,
    InsufficientData = 7,
    Parse = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkKind {
    Naive = 0,
    Covariate = 1,
    Kmeans = 2,
    Ncp = 3,
}

/// Opaque fitted calibrator.
pub struct CkCalibrator {
    inner: Calibrator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: CkStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidAlpha(_) => CkStatus::InvalidAlpha,
            Error::InvalidProbabilities { .. } => CkStatus::InvalidProbabilities,
            Error::InvalidLabel { .. } => CkStatus::InvalidLabel,
            Error::Shape { .. } => CkStatus::ShapeMismatch,
            Error::EmptyCalibration | Error::EmptyTest | Error::InsufficientData { .. } | Error::InvalidK { .. } => CkStatus::InsufficientData,
            Error::Parse { .. } | Error::Json(_) => CkStatus::Parse,
            _ => CkStatus::InvalidArgument,
        };
        Failure { status, message: e.to_string() }
    }
}

fn null(what: &str) -> Failure {
    Failure { status: CkStatus::NullPointer, message: format!("`{what}` is null") }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure { status: CkStatus::InvalidArgument, message: message.into() }
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CkStatus::Ok
        }
        Ok(Err(failure)) => {
            set_error(failure.message);
            failure.status
        }
        Err(panic) => {
            let detail = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_default();
            set_error(format!("internal panic: {detail}"));
            CkStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn calibrator_arg<'a>(ptr: *const CkCalibrator) -> Result<&'a Calibrator, Failure> {
    ptr.as_ref().map(|c| &c.inner).ok_or_else(|| null("calibrator"))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b).ok_or_else(|| invalid("array size overflows"))
}

/// Calibration records from flat arrays. `embeddings` may be null when `dim` is 0.
unsafe fn records(
    probs: *const f64,
    labels: *const usize,
    embeddings: *const f64,
    n: usize,
    n_classes: usize,
    dim: usize,
) -> Result<Vec<Record>, Failure> {
    if n_classes == 0 {
        return Err(invalid("n_classes must be positive"));
    }
    let probs = slice_arg(probs, checked_len(n, n_classes)?, "probs")?;
    let labels = slice_arg(labels, n, "labels")?;
    let embeddings = slice_arg(embeddings, checked_len(n, dim)?, "embeddings")?;
    Ok((0..n)
        .map(|i| {
            let r = Record::new(i.to_string(), Vec::new())
                .with_probs(probs[i * n_classes..(i + 1) * n_classes].to_vec())
                .with_label(labels[i]);
            if dim > 0 {
                r.with_embedding(embeddings[i * dim..(i + 1) * dim].to_vec())
            } else {
                r
            }
        })
        .collect())
}

unsafe fn emit(calibrator: Calibrator, out: *mut *mut CkCalibrator) -> Result<(), Failure> {
    let out = out_arg(out, "out")?;
    *out = Box::into_raw(Box::new(CkCalibrator { inner: calibrator }));
    Ok(())
}

fn write_threshold(t: Threshold, value: &mut f64, infinite: &mut bool) {
    *value = t.finite().unwrap_or(f64::INFINITY);
    *infinite = t.is_infinite();
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn ck_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ck_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Hinge score `1 - probs[label]`.
///
/// # Safety
/// `probs` must point to `n_classes` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_nonconformity_score(probs: *const f64, n_classes: usize, label: usize, out: *mut f64) -> CkStatus {
    guard(|| {
        let probs = slice_arg(probs, n_classes, "probs")?;
        *out_arg(out, "out")? = nonconformity_score(probs, label)?;
        Ok(())
    })
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or infinite when that
/// rank exceeds `n`.
///
/// # Safety
/// `scores` must point to `n` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_conformal_quantile(
    scores: *const f64,
    n: usize,
    alpha: f64,
    out_threshold: *mut f64,
    out_infinite: *mut bool,
) -> CkStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let t = conformal_quantile(scores, alpha)?;
        write_threshold(t, out_arg(out_threshold, "out_threshold")?, out_arg(out_infinite, "out_infinite")?);
        Ok(())
    })
}

/// Smallest score whose normalized cumulative weight reaches `1 - alpha`.
///
/// # Safety
/// `scores` and `weights` must point to `n` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_weighted_quantile(
    scores: *const f64,
    weights: *const f64,
    n: usize,
    alpha: f64,
    out_threshold: *mut f64,
    out_infinite: *mut bool,
) -> CkStatus {
    guard(|| {
        let t = weighted_quantile(slice_arg(scores, n, "scores")?, slice_arg(weights, n, "weights")?, alpha)?;
        write_threshold(t, out_arg(out_threshold, "out_threshold")?, out_arg(out_infinite, "out_infinite")?);
        Ok(())
    })
}

/// Split conformal calibrator with the `(n + 1)`-corrected quantile.
///
/// # Safety
/// `probs` must point to `n * n_classes` doubles and `labels` to `n` labels.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_fit_naive(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    n_classes: usize,
    alpha: f64,
    out: *mut *mut CkCalibrator,
) -> CkStatus {
    guard(|| {
        let cal = records(probs, labels, ptr::null(), n, n_classes, 0)?;
        emit(Calibrator::naive(&cal, alpha, QuantileRule::FiniteSample)?, out)
    })
}

/// Per-cluster calibrator over k-means clusters of the embeddings. `k = 0`
/// picks the number of clusters from `n`.
///
/// # Safety
/// Array sizes as in [`ck_calibrator_fit_naive`], plus `n * dim` embedding values.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_fit_kmeans(
    probs: *const f64,
    labels: *const usize,
    embeddings: *const f64,
    n: usize,
    n_classes: usize,
    dim: usize,
    alpha: f64,
    k: usize,
    seed: u64,
    out: *mut *mut CkCalibrator,
) -> CkStatus {
    guard(|| {
        let cal = records(probs, labels, embeddings, n, n_classes, dim)?;
        let config = KMeansCpConfig { k: (k > 0).then_some(k), seed, ..KMeansCpConfig::default() };
        emit(Calibrator::kmeans(&cal, alpha, &config)?, out)
    })
}

/// Neighborhood calibrator with uniform weights over the `k` nearest embeddings.
///
/// # Safety
/// As for [`ck_calibrator_fit_kmeans`].
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_fit_ncp(
    probs: *const f64,
    labels: *const usize,
    embeddings: *const f64,
    n: usize,
    n_classes: usize,
    dim: usize,
    alpha: f64,
    k: usize,
    out: *mut *mut CkCalibrator,
) -> CkStatus {
    guard(|| {
        let cal = records(probs, labels, embeddings, n, n_classes, dim)?;
        emit(Calibrator::ncp(&cal, alpha, WeightScheme::uniform(k))?, out)
    })
}

/// Weighted calibrator with KDE density ratios between the calibration and
/// `n_test` unlabeled test embeddings. `bandwidth` is 0 for Scott's rule, 1 for
/// Silverman's; ratios are clipped to `[1 / clip, clip]`.
///
/// # Safety
/// As for [`ck_calibrator_fit_kmeans`], plus `n_test * dim` test embedding values.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_fit_covariate(
    probs: *const f64,
    labels: *const usize,
    embeddings: *const f64,
    n: usize,
    n_classes: usize,
    dim: usize,
    test_embeddings: *const f64,
    n_test: usize,
    alpha: f64,
    bandwidth: u32,
    clip: f64,
    out: *mut *mut CkCalibrator,
) -> CkStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("covariate calibration needs embeddings (dim > 0)"));
        }
        let cal = records(probs, labels, embeddings, n, n_classes, dim)?;
        let test_flat = slice_arg(test_embeddings, checked_len(n_test, dim)?, "test_embeddings")?;
        let test: Vec<Record> = test_flat
            .chunks(dim)
            .enumerate()
            .map(|(i, x)| Record::new(format!("t{i}"), Vec::new()).with_embedding(x.to_vec()))
            .collect();
        let bandwidth = match bandwidth {
            0 => BandwidthRule::Scott,
            1 => BandwidthRule::Silverman,
            other => return Err(invalid(format!("unknown bandwidth rule {other}"))),
        };
        let config = CovariateConfig { bandwidth, clip, space: Space::Embedding };
        emit(Calibrator::covariate(&cal, &test, alpha, &config)?, out)
    })
}

/// Parses a calibrator serialized by [`ck_calibrator_to_json`] or written by
/// the `calibrate` stage of the command-line pipeline.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_from_json(json: *const c_char, out: *mut *mut CkCalibrator) -> CkStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|_| invalid("json is not UTF-8"))?;
        let calibrator = match serde_json::from_str::<Envelope<Calibrator>>(text) {
            Ok(envelope) => envelope.payload,
            Err(_) => serde_json::from_str::<Calibrator>(text).map_err(Error::from)?,
        };
        emit(calibrator, out)
    })
}

/// Serializes a calibrator; release the string with [`ck_string_free`].
///
/// # Safety
/// `calibrator` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_to_json(calibrator: *const CkCalibrator, out: *mut *mut c_char) -> CkStatus {
    guard(|| {
        let text = serde_json::to_string(calibrator_arg(calibrator)?).map_err(Error::from)?;
        *out_arg(out, "out")? = CString::new(text).map_err(|_| invalid("serialized calibrator contains NUL"))?.into_raw();
        Ok(())
    })
}

/// A new handle with the same scores and locality, re-thresholded at `alpha`.
///
/// # Safety
/// `calibrator` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_with_alpha(calibrator: *const CkCalibrator, alpha: f64, out: *mut *mut CkCalibrator) -> CkStatus {
    guard(|| emit(calibrator_arg(calibrator)?.with_alpha(alpha)?, out))
}

/// # Safety
/// `calibrator` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_kind(calibrator: *const CkCalibrator, out: *mut CkKind) -> CkStatus {
    guard(|| {
        *out_arg(out, "out")? = match calibrator_arg(calibrator)?.kind() {
            CalibratorKind::Naive => CkKind::Naive,
            CalibratorKind::Covariate => CkKind::Covariate,
            CalibratorKind::Kmeans => CkKind::Kmeans,
            CalibratorKind::Ncp => CkKind::Ncp,
        };
        Ok(())
    })
}

/// # Safety
/// `calibrator` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_info(calibrator: *const CkCalibrator, out_alpha: *mut f64, out_n_classes: *mut usize, out_n_cal: *mut usize) -> CkStatus {
    guard(|| {
        let c = calibrator_arg(calibrator)?;
        *out_arg(out_alpha, "out_alpha")? = c.alpha();
        *out_arg(out_n_classes, "out_n_classes")? = c.n_classes();
        *out_arg(out_n_cal, "out_n_cal")? = c.cal_scores().len();
        Ok(())
    })
}

/// Prediction set for one query. `mask` receives `n_classes` bytes, 1 for
/// labels in the set. `embedding` may be null when `dim` is 0 and the
/// calibrator does not use embeddings.
///
/// # Safety
/// `probs` must point to `n_classes` doubles, `embedding` to `dim` doubles,
/// `mask` to `n_classes` writable bytes; the other outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_predict(
    calibrator: *const CkCalibrator,
    probs: *const f64,
    n_classes: usize,
    embedding: *const f64,
    dim: usize,
    mask: *mut u8,
    out_threshold: *mut f64,
    out_infinite: *mut bool,
) -> CkStatus {
    guard(|| {
        let c = calibrator_arg(calibrator)?;
        let probs = slice_arg(probs, n_classes, "probs")?;
        let embedding = slice_arg(embedding, dim, "embedding")?;
        if mask.is_null() && n_classes > 0 {
            return Err(null("mask"));
        }
        let mut query = Record::new("query", Vec::new()).with_probs(probs.to_vec());
        if dim > 0 {
            query = query.with_embedding(embedding.to_vec());
        }
        let set = c.predict_set(&query)?;
        let mask = slice::from_raw_parts_mut(mask, n_classes);
        mask.fill(0);
        for &y in &set.labels {
            mask[y] = 1;
        }
        write_threshold(set.threshold, out_arg(out_threshold, "out_threshold")?, out_arg(out_infinite, "out_infinite")?);
        Ok(())
    })
}

/// Releases a calibrator. Null is ignored.
///
/// # Safety
/// `calibrator` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_calibrator_free(calibrator: *mut CkCalibrator) {
    if !calibrator.is_null() {
        drop(Box::from_raw(calibrator));
    }
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
