//! C ABI for the augmentor toolkit.
//!
//! Every function returns an `AugStatus`. On failure a message describing
//! the error is available from `aug_last_error()` on the same thread until
//! the next failing call. Handles are opaque and must be released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use augmentor::classifier::{featurize, LinearModel, TrainingConfig};
use augmentor::consistency::parse_score;
use augmentor::corpus::{load_corpus, Corpus, Format, Label};
use augmentor::evaluation::{self, BootstrapConfig, EvalError};
use augmentor::experiments::{run_baseline, NativeLearner};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    SingleClass = 5,
    Training = 6,
    Panic = 7,
}

/// Loaded corpus of human and synthetic samples.
pub struct AugCorpus {
    inner: Corpus,
}

/// Trained hashed-feature logistic model.
pub struct AugModel {
    inner: LinearModel,
}

/// Bootstrap AUC estimate with its percentile interval.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugEvalResult {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub ci_level: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(AugStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(AugStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Fail(AugStatus::InvalidArgument, msg.into())
    }
}

impl From<EvalError> for Fail {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::SingleClass => AugStatus::SingleClass,
            _ => AugStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AugStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AugStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AugStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn labels_from(raw: &[u8]) -> Result<Vec<Label>, Fail> {
    raw.iter()
        .map(|&b| Label::try_from(b).map_err(|_| Fail::invalid(format!("label {b} is not 0 or 1"))))
        .collect()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aug_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aug_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Rank-based ROC AUC of `scores` against 0/1 `labels`, both of length `n`.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aug_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> AugStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let s = slice_arg(scores, n, "scores")?;
        let l = labels_from(slice_arg(labels, n, "labels")?)?;
        *out = evaluation::roc_auc(s, &l)?;
        Ok(())
    })
}

/// Full-sample AUC with a class-stratified percentile bootstrap interval.
///
/// # Safety
/// As for `aug_roc_auc`.
#[no_mangle]
pub unsafe extern "C" fn aug_bootstrap_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    n_resamples: usize,
    ci_level: f64,
    seed: u64,
    out: *mut AugEvalResult,
) -> AugStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let s = slice_arg(scores, n, "scores")?;
        let l = labels_from(slice_arg(labels, n, "labels")?)?;
        let cfg = BootstrapConfig {
            n_resamples,
            ci_level,
            seed,
        };
        let r = evaluation::bootstrap_auc(s, &l, &cfg)?;
        *out = AugEvalResult {
            auc: r.auc,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_resamples: r.n_resamples,
            ci_level: r.ci_level,
            seed: r.seed,
        };
        Ok(())
    })
}

/// Extracts the binary score from a grading reply.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aug_parse_score(raw: *const c_char, out: *mut u8) -> AugStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let raw = str_arg(raw, "raw")?;
        let label = parse_score(raw).map_err(|e| Fail(AugStatus::Parse, e.to_string()))?;
        *out = label.as_u8();
        Ok(())
    })
}

/// Loads a corpus file; `.csv` files are read as CSV, anything else as JSONL.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aug_corpus_load(
    path: *const c_char,
    out: *mut *mut AugCorpus,
) -> AugStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = load_corpus(&path, Format::from_path(&path))
            .map_err(|e| Fail(AugStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(AugCorpus { inner }));
        Ok(())
    })
}

/// Sizes of the human training and validation splits.
///
/// # Safety
/// `corpus` must come from `aug_corpus_load`; the out pointers must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aug_corpus_sizes(
    corpus: *const AugCorpus,
    human_train: *mut usize,
    validation: *mut usize,
) -> AugStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| Fail::null("corpus"))?;
        if human_train.is_null() || validation.is_null() {
            return Err(Fail::null("out"));
        }
        *human_train = c.inner.human_train.len();
        *validation = c.inner.validation.len();
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from `aug_corpus_load` and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn aug_corpus_free(corpus: *mut AugCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains the native model on the human split until saturation and scores
/// the validation split. `eval` may be NULL.
///
/// # Safety
/// `corpus` must come from `aug_corpus_load`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aug_train_baseline(
    corpus: *const AugCorpus,
    seed: u64,
    out: *mut *mut AugModel,
    eval: *mut AugEvalResult,
) -> AugStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| Fail::null("corpus"))?;
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let cfg = TrainingConfig {
            seed,
            ..Default::default()
        };
        let boot = BootstrapConfig {
            seed,
            ..Default::default()
        };
        let mut learner = NativeLearner::new(cfg);
        let point = run_baseline(&mut learner, &c.inner, &boot)
            .map_err(|e| Fail(AugStatus::Training, e.to_string()))?;
        if !eval.is_null() {
            *eval = AugEvalResult {
                auc: point.auc,
                ci_low: point.ci_low,
                ci_high: point.ci_high,
                n_resamples: boot.n_resamples,
                ci_level: boot.ci_level,
                seed,
            };
        }
        *out = Box::into_raw(Box::new(AugModel {
            inner: learner.model,
        }));
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aug_model_load(path: *const c_char, out: *mut *mut AugModel) -> AugStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = LinearModel::load(&path).map_err(|e| Fail(AugStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(AugModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aug_model_save(model: *const AugModel, path: *const c_char) -> AugStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Fail::null("model"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        m.inner
            .save(&path)
            .map_err(|e| Fail(AugStatus::Io, e.to_string()))
    })
}

/// Probability that `text` belongs to class 1.
///
/// # Safety
/// `model` must be a live handle; `text` a NUL-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aug_model_predict(
    model: *const AugModel,
    text: *const c_char,
    out: *mut f64,
) -> AugStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Fail::null("model"))?;
        if out.is_null() {
            return Err(Fail::null("out"));
        }
        let text = str_arg(text, "text")?;
        *out = m.inner.predict_proba(&featurize(text, m.inner.bits()));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle not used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn aug_model_free(model: *mut AugModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
