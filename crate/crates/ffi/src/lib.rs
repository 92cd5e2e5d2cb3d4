//! C ABI over the tooluq engine.
//!
//! Every fallible function returns a [`TuqStatus`] and writes its result
//! through an out-pointer. On failure the message is available from
//! [`tuq_last_error`] on the same thread. Strings returned by this library
//! are owned by the caller and released with [`tuq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use tooluq::eval::{emit_report, Experiment, ExperimentConfig, ReportFormat, ResultTable};
use tooluq::metrics::{sta_p, EntropyTerms, MetricKind};
use tooluq::prob::{gaussian_entropy, mc_predictive_entropy, Categorical, ScoredSample};
use tooluq::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuqStatus {
    Ok = 0,
    ConfigError = 1,
    UpstreamError = 2,
    UndefinedAuroc = 3,
    InvalidArgument = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuqReportFormat {
    Csv = 0,
    Jsonl = 1,
    Text = 2,
}

/// Opaque prepared experiment.
pub struct TuqExperiment {
    inner: Experiment,
}

/// Opaque result table.
pub struct TuqResultTable {
    inner: ResultTable,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> TuqStatus {
    match err {
        Error::UndefinedAuroc(_) => TuqStatus::UndefinedAuroc,
        e if e.exit_code() == 2 => TuqStatus::UpstreamError,
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => TuqStatus::ConfigError,
        _ => TuqStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TuqStatus, String)>) -> TuqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TuqStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            TuqStatus::Panic
        }
    }
}

fn lift(err: Error) -> (TuqStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (TuqStatus, String) {
    (TuqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (TuqStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (TuqStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (TuqStatus::InvalidArgument, format!("{what}: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), (TuqStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

/// Copy of the last error message on this thread, or null if none.
#[no_mangle]
pub extern "C" fn tuq_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn tuq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tuq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Shannon entropy in nats of a probability vector.
///
/// # Safety
/// `probs` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_entropy(probs: *const f64, n: usize, out: *mut f64) -> TuqStatus {
    guard(|| {
        let p = slice_arg(probs, n, "probs")?;
        let labels = (0..n).map(|i| i.to_string()).collect();
        let d = Categorical::new(labels, p.to_vec()).map_err(lift)?;
        write_out(out, d.entropy())
    })
}

/// Monte Carlo predictive entropy `-mean(log p)` from sequence log-probs.
///
/// # Safety
/// `log_probs` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_mc_predictive_entropy(log_probs: *const f64, n: usize, out: *mut f64) -> TuqStatus {
    guard(|| {
        let lp = slice_arg(log_probs, n, "log_probs")?;
        let samples: Vec<ScoredSample> = lp.iter().map(|&l| ScoredSample::new("", l)).collect();
        write_out(out, mc_predictive_entropy(&samples).map_err(lift)?)
    })
}

/// Differential entropy of a diagonal Gaussian with the given variances.
///
/// # Safety
/// `variances` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_gaussian_entropy(variances: *const f64, n: usize, out: *mut f64) -> TuqStatus {
    guard(|| {
        let v = slice_arg(variances, n, "variances")?;
        write_out(out, gaussian_entropy(v).map_err(lift)?)
    })
}

/// STA_P from the answer entropy given the tool output and the tool entropy.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_sta(h_answer: f64, h_tool: f64, out: *mut f64) -> TuqStatus {
    guard(|| {
        let terms =
            EntropyTerms { h_y_given_zx: h_answer, h_c_given_zx: h_answer, h_z_given_a: Some(h_tool), ..Default::default() };
        write_out(out, sta_p(&terms).map_err(lift)?)
    })
}

/// AUROC of uncertainty scores against correctness flags (nonzero = correct).
/// Returns `UndefinedAuroc` when all flags agree.
///
/// # Safety
/// `uncertainties` and `correct` must point to `n` readable elements;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_auroc(uncertainties: *const f64, correct: *const u8, n: usize, out: *mut f64) -> TuqStatus {
    guard(|| {
        let u = slice_arg(uncertainties, n, "uncertainties")?;
        let c: Vec<bool> = slice_arg(correct, n, "correct")?.iter().map(|&b| b != 0).collect();
        write_out(out, tooluq::eval::auroc(u, &c).map_err(lift)?)
    })
}

/// Parses and prepares an experiment from TOML config text.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_experiment_new(config_toml: *const c_char, out: *mut *mut TuqExperiment) -> TuqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(config_toml, "config_toml")?;
        let cfg = ExperimentConfig::from_toml_str(text).map_err(lift)?;
        let inner = Experiment::prepare(&cfg).map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(TuqExperiment { inner })))
    })
}

/// # Safety
/// `exp` must come from [`tuq_experiment_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tuq_experiment_free(exp: *mut TuqExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Runs the full protocol. A table is produced even when AUROCs are
/// undefined; use [`tuq_result_auroc`] to inspect them.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_experiment_run(exp: *const TuqExperiment, out: *mut *mut TuqResultTable) -> TuqStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let output = exp.inner.run().map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(TuqResultTable { inner: output.table })))
    })
}

/// # Safety
/// `table` must come from [`tuq_experiment_run`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tuq_result_free(table: *mut TuqResultTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// AUROC of a metric by column name, e.g. "STA_S" or "Tool Entropy".
///
/// # Safety
/// `table` must be a live handle; `metric` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_result_auroc(table: *const TuqResultTable, metric: *const c_char, out: *mut f64) -> TuqStatus {
    guard(|| {
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        let name = str_arg(metric, "metric")?;
        let kind = MetricKind::from_column_name(name)
            .ok_or_else(|| (TuqStatus::InvalidArgument, format!("unknown metric {name:?}")))?;
        if !table.inner.metrics().contains(&kind) {
            return Err((TuqStatus::InvalidArgument, format!("metric {name:?} is not reported in this mode")));
        }
        let a = table.inner.auroc(kind).ok_or((TuqStatus::UndefinedAuroc, format!("AUROC for {name} is undefined")))?;
        write_out(out, a)
    })
}

/// Number of scored eval questions.
///
/// # Safety
/// `table` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_result_question_count(table: *const TuqResultTable, out: *mut usize) -> TuqStatus {
    guard(|| {
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        write_out(out, table.inner.questions.len())
    })
}

/// Config hash of the run as a caller-owned string.
///
/// # Safety
/// `table` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tuq_result_config_hash(table: *const TuqResultTable, out: *mut *mut c_char) -> TuqStatus {
    guard(|| {
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        let s = CString::new(table.inner.config_hash.clone()).map_err(|e| (TuqStatus::InvalidArgument, e.to_string()))?;
        write_out(out, s.into_raw())
    })
}

/// Writes the table as a report file.
///
/// # Safety
/// `table` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tuq_result_write(
    table: *const TuqResultTable,
    format: TuqReportFormat,
    path: *const c_char,
) -> TuqStatus {
    guard(|| {
        let table = table.as_ref().ok_or_else(|| null("table"))?;
        let path = str_arg(path, "path")?;
        let f = match format {
            TuqReportFormat::Csv => ReportFormat::Csv,
            TuqReportFormat::Jsonl => ReportFormat::Jsonl,
            TuqReportFormat::Text => ReportFormat::Text,
        };
        emit_report(&table.inner, f, path).map_err(lift)
    })
}
