//! C ABI over the nsseg toolkit.
//!
//! Conventions:
//! - every fallible function returns an [`NssStatus`]; on failure a message
//!   is available from [`nss_last_error`] on the same thread;
//! - images are row-major `double` buffers of `height * width` elements;
//! - masks are `uint8_t` buffers with 0 = negative, 1 = positive,
//!   255 = ignore;
//! - models are opaque [`NssModel`] handles released with [`nss_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use nsseg::augment;
use nsseg::metrics;
use nsseg::model::{self, Architecture, TinyFcn};
use nsseg::pipeline::{self, ExperimentConfig};
use nsseg::pseudolabel::{self, RankerConfig};
use nsseg::{Error, Frame, ProbMap};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NssStatus {
    Ok = 0,
    InvalidArgument = 1,
    Numeric = 2,
    Storage = 3,
    Format = 4,
    Config = 5,
    UndefinedMetric = 6,
    NullPointer = 7,
    Panic = 8,
}

/// A trained or freshly initialized segmentation model.
pub struct NssModel {
    inner: TinyFcn,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NssStatus {
    match e {
        Error::Param(_) => NssStatus::InvalidArgument,
        Error::Numeric(_) => NssStatus::Numeric,
        Error::Storage { .. } => NssStatus::Storage,
        Error::Format { .. } => NssStatus::Format,
        Error::Config { .. } => NssStatus::Config,
        Error::UndefinedMetric(_) => NssStatus::UndefinedMetric,
        Error::Stage { source, .. } => status_of(source),
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult = std::result::Result<(), Failure>;

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> FfiResult) -> NssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NssStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            NssStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            NssStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> std::result::Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

fn pixel_count(height: usize, width: usize) -> std::result::Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Lib(Error::param(format!("invalid image size {height}x{width}"))))
}

unsafe fn input<'a, T>(
    p: *const T,
    len: usize,
    what: &'static str,
) -> std::result::Result<&'a [T], Failure> {
    Ok(slice::from_raw_parts(non_null(p, what)?, len))
}

unsafe fn output<'a, T>(
    p: *mut T,
    len: usize,
    what: &'static str,
) -> std::result::Result<&'a mut [T], Failure> {
    Ok(slice::from_raw_parts_mut(non_null(p, what)? as *mut T, len))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> std::result::Result<PathBuf, Failure> {
    let s = CStr::from_ptr(non_null(p, what)?)
        .to_str()
        .map_err(|_| Failure::Lib(Error::param(format!("{what} is not valid UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn frame_arg(
    data: *const f64,
    height: usize,
    width: usize,
) -> std::result::Result<Frame, Failure> {
    let n = pixel_count(height, width)?;
    Ok(Frame::new(
        height,
        width,
        input(data, n, "frame")?.to_vec(),
    )?)
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nss_model_load(path: *const c_char, out: *mut *mut NssModel) -> NssStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        out[0] = ptr::null_mut();
        let inner = model::load_checkpoint(&path_arg(path, "path")?)?;
        out[0] = Box::into_raw(Box::new(NssModel { inner }));
        Ok(())
    })
}

/// Create a model with the default architecture, initialized from `seed`.
/// A `zero` of true gives all-zero parameters instead.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nss_model_new(
    seed: u64,
    zero: bool,
    out: *mut *mut NssModel,
) -> NssStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        let arch = Architecture::default();
        let inner = if zero {
            TinyFcn::zeros(&arch)?
        } else {
            TinyFcn::init(&arch, seed)?
        };
        out[0] = Box::into_raw(Box::new(NssModel { inner }));
        Ok(())
    })
}

/// Release a handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nss_model_free(model: *mut NssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nss_model_save(model: *const NssModel, path: *const c_char) -> NssStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        model::save_checkpoint(&m.inner, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a valid handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn nss_model_num_params(model: *const NssModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_params())
}

/// Write the 16-hex-digit checkpoint id and a NUL into `buf` (17 bytes).
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nss_model_id(
    model: *const NssModel,
    buf: *mut c_char,
    len: usize,
) -> NssStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let id = model::checkpoint_id(&m.inner);
        if len < id.len() + 1 {
            return Err(Error::param(format!("id buffer needs {} bytes", id.len() + 1)).into());
        }
        let out = output(buf as *mut u8, len, "buf")?;
        out[..id.len()].copy_from_slice(id.as_bytes());
        out[id.len()] = 0;
        Ok(())
    })
}

/// Per-pixel lesion probabilities of one frame, written to `probs`
/// (`height * width` values). Also returns the frame score (max pixel)
/// through `score` when it is non-null.
///
/// # Safety
/// Buffers must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn nss_model_forward(
    model: *const NssModel,
    frame: *const f64,
    height: usize,
    width: usize,
    probs: *mut f64,
    score: *mut f64,
) -> NssStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let f = frame_arg(frame, height, width)?;
        let p = m.inner.forward(&f)?;
        output(probs, height * width, "probs")?.copy_from_slice(p.probs());
        if !score.is_null() {
            *score = model::frame_score(&p);
        }
        Ok(())
    })
}

/// `out = in ^ gamma` per pixel.
///
/// # Safety
/// Buffers must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn nss_power_law(
    frame: *const f64,
    height: usize,
    width: usize,
    gamma: f64,
    out: *mut f64,
) -> NssStatus {
    guard(|| {
        let f = augment::power_law(&frame_arg(frame, height, width)?, gamma)?;
        output(out, height * width, "out")?.copy_from_slice(f.data());
        Ok(())
    })
}

/// `out = gain * ln(1 + in)` per pixel, clamped to [0, 1].
///
/// # Safety
/// Buffers must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn nss_log_correction(
    frame: *const f64,
    height: usize,
    width: usize,
    gain: f64,
    out: *mut f64,
) -> NssStatus {
    guard(|| {
        let f = augment::log_correction(&frame_arg(frame, height, width)?, gain)?;
        output(out, height * width, "out")?.copy_from_slice(f.data());
        Ok(())
    })
}

/// Trinarize a probability map: in a positive frame POS above `k_pos`,
/// NEG below `k_neg`, IGNORE between (bounds inclusive); a negative frame is
/// all NEG.
///
/// # Safety
/// Buffers must hold `height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn nss_pixel_pseudolabels(
    probs: *const f64,
    height: usize,
    width: usize,
    is_positive: bool,
    k_pos: f64,
    k_neg: f64,
    labels: *mut u8,
) -> NssStatus {
    guard(|| {
        let n = pixel_count(height, width)?;
        let cfg = RankerConfig {
            k_pos,
            k_neg,
            ..RankerConfig::default()
        };
        cfg.validate()?;
        let p = ProbMap::new(height, width, input(probs, n, "probs")?.to_vec())?;
        let m = pseudolabel::pixel_pseudolabels(&p, is_positive, &cfg);
        output(labels, n, "labels")?.copy_from_slice(m.labels());
        Ok(())
    })
}

/// Number of frames the ranker marks positive: `ceil(n * c / 100)`.
#[no_mangle]
pub extern "C" fn nss_positive_count(n: usize, percentile_c: f64) -> usize {
    pseudolabel::positive_count(n, percentile_c)
}

unsafe fn scored_items(
    scores: *const f64,
    labels: *const u8,
    n: usize,
) -> std::result::Result<Vec<(f64, bool)>, Failure> {
    let s = input(scores, n, "scores")?;
    let l = input(labels, n, "labels")?;
    if let Some(bad) = l.iter().find(|&&y| y > 1) {
        return Err(Error::param(format!("label {bad} is not 0 or 1")).into());
    }
    Ok(s.iter().zip(l).map(|(&s, &y)| (s, y == 1)).collect())
}

/// Retrieval average precision of `n` scored binary items.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nss_average_precision(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> NssStatus {
    guard(|| {
        let v = metrics::average_precision(&scored_items(scores, labels, n)?)?;
        output(out, 1, "out")?[0] = v;
        Ok(())
    })
}

/// ROC-AUC (Mann-Whitney, ties count one half) of `n` scored binary items.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nss_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> NssStatus {
    guard(|| {
        let v = metrics::roc_auc(&scored_items(scores, labels, n)?)?;
        output(out, 1, "out")?[0] = v;
        Ok(())
    })
}

/// Write the bundled benchmark under `out_dir`, including its
/// `experiment.toml`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nss_generate_benchmark(out_dir: *const c_char) -> NssStatus {
    guard(|| {
        pipeline::benchmark::generate_benchmark(&path_arg(out_dir, "out_dir")?)?;
        Ok(())
    })
}

/// Run the experiment described by `config_path` into `out_dir`. On success
/// `*test_stack_ap` (when non-null) receives the test stack AP of the last
/// model.
///
/// # Safety
/// Strings must be NUL-terminated; `test_stack_ap` may be null.
#[no_mangle]
pub unsafe extern "C" fn nss_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    test_stack_ap: *mut f64,
) -> NssStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&path_arg(config_path, "config_path")?)?;
        let out = path_arg(out_dir, "out_dir")?;
        let _lock = pipeline::OutputLock::acquire(&out)?;
        let report = pipeline::run_noisy_student(&cfg, &out)?;
        if !test_stack_ap.is_null() {
            *test_stack_ap = report.last().test.stack_ap;
        }
        Ok(())
    })
}
