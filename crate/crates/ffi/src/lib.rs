//! C ABI for the `fours` library.
//!
//! Conventions:
//! - Every fallible function returns a [`FoursStatus`]; results go through
//!   out-pointers that are written only on success.
//! - Objects are opaque handles created by the loading, simulating, fitting
//!   and `*_from_json` functions and released with the matching `*_free`.
//! - Strings returned to the caller are NUL-terminated UTF-8 owned by the
//!   caller and released with [`fours_string_free`].
//! - The message of the last failure on the calling thread is available from
//!   [`fours_last_error_message`].
//! - Panics never cross the boundary; they are reported as
//!   [`FoursStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fours::cli::{self, Command, Context, Overrides};
use fours::data::{load_cohort, CohortDataset, CohortSchema};
use fours::selecting::information_table;
use fours::sequencing::{self, JlpmFit, JlpmSpec};
use fours::simulation::{simulate_cohort, SimScenario};
use fours::staging::{fit_staging, project_staging, StagingFit, StagingSpec};
use fours::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoursStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid input, specification or configuration.
    Invalid = 3,
    /// A required upstream artifact is missing.
    MissingArtifact = 4,
    /// Numerical failure (root bracketing, non-finite values).
    Numerical = 5,
    /// File-system error.
    Io = 6,
    /// Malformed JSON.
    Json = 7,
    /// An output buffer is too small.
    BufferTooSmall = 8,
    /// A fit finished without meeting the convergence criteria.
    NotConverged = 9,
    /// Internal error; the library state is still usable.
    Panic = 10,
}

/// Cohort dataset.
pub struct FoursCohort(CohortDataset);

/// Fitted sequencing (joint latent process) model of one subdimension.
pub struct FoursSequenceFit(JlpmFit);

/// Fitted staging model of one subdimension.
pub struct FoursStagingFit(StagingFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FoursStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MissingArtifact(_) => FoursStatus::MissingArtifact,
            Error::Bracket { .. } | Error::NonFinite { .. } => FoursStatus::Numerical,
            Error::Io { .. } => FoursStatus::Io,
            Error::Json(_) => FoursStatus::Json,
            _ => FoursStatus::Invalid,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(FoursStatus::Json, e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> FoursStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FoursStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal error: {msg}"));
            FoursStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FoursStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(FoursStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live `T`.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put<T>(out: *mut T, v: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

fn into_c_string(bytes: Vec<u8>) -> FfiResult<*mut c_char> {
    CString::new(bytes)
        .map(CString::into_raw)
        .map_err(|_| Failure(FoursStatus::Invalid, "string contains NUL".into()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn fours_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fours_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or a string returned by this library and not yet released.
#[no_mangle]
pub unsafe extern "C" fn fours_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a cohort from visit and event CSV files. `schema_json` maps columns
/// to roles (the `schema.json` written by `simulate` is an example).
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_cohort_load(
    visits_path: *const c_char,
    events_path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut FoursCohort,
) -> FoursStatus {
    guard(|| {
        let visits = str_arg(visits_path, "visits_path")?;
        let events = str_arg(events_path, "events_path")?;
        let schema: CohortSchema = payload(str_arg(schema_json, "schema_json")?)?;
        let data = load_cohort(Path::new(visits), Path::new(events), &schema)?;
        data.validate()?;
        put(out, Box::into_raw(Box::new(FoursCohort(data))))
    })
}

/// Simulate a cohort from a JSON scenario. The true values are discarded.
///
/// # Safety
/// `scenario_json` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_cohort_simulate(scenario_json: *const c_char, out: *mut *mut FoursCohort) -> FoursStatus {
    guard(|| {
        let scn: SimScenario = serde_json::from_str(str_arg(scenario_json, "scenario_json")?)?;
        let (data, _) = simulate_cohort(&scn)?;
        put(out, Box::into_raw(Box::new(FoursCohort(data))))
    })
}

/// Number of patients in the cohort.
///
/// # Safety
/// `cohort` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_cohort_n_patients(cohort: *const FoursCohort, out: *mut usize) -> FoursStatus {
    guard(|| put(out, ref_arg(cohort, "cohort")?.0.patients.len()))
}

/// # Safety
/// `cohort` is null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fours_cohort_free(cohort: *mut FoursCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Fit the sequencing model described by `spec_json`. A fit that does not
/// converge is still returned (status `Ok`); query it with
/// [`fours_sequence_fit_converged`].
///
/// # Safety
/// `cohort` is null or a live handle; `spec_json` is null or NUL-terminated;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit(
    cohort: *const FoursCohort,
    spec_json: *const c_char,
    out: *mut *mut FoursSequenceFit,
) -> FoursStatus {
    guard(|| {
        let data = &ref_arg(cohort, "cohort")?.0;
        let spec: JlpmSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let fit = sequencing::fit(&spec, data, None)?;
        put(out, Box::into_raw(Box::new(FoursSequenceFit(fit))))
    })
}

/// Restore a sequencing fit from its JSON form (plain or a `fours` artifact).
///
/// # Safety
/// `json` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit_from_json(json: *const c_char, out: *mut *mut FoursSequenceFit) -> FoursStatus {
    guard(|| {
        let fit: JlpmFit = payload(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(FoursSequenceFit(fit))))
    })
}

fn payload<T: serde::de::DeserializeOwned>(s: &str) -> FfiResult<T> {
    let v: serde_json::Value = serde_json::from_str(s)?;
    let v = match v {
        serde_json::Value::Object(mut m) if m.contains_key("payload") && m.contains_key("config_hash") => {
            m.remove("payload").expect("checked")
        }
        v => v,
    };
    Ok(serde_json::from_value(v)?)
}

/// JSON form of the fit; release with [`fours_string_free`].
///
/// # Safety
/// `fit` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit_to_json(fit: *const FoursSequenceFit, out: *mut *mut c_char) -> FoursStatus {
    guard(|| {
        let s = into_c_string(serde_json::to_vec(&ref_arg(fit, "fit")?.0)?)?;
        put(out, s)
    })
}

/// # Safety
/// `fit` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit_converged(fit: *const FoursSequenceFit, out: *mut bool) -> FoursStatus {
    guard(|| put(out, ref_arg(fit, "fit")?.0.converged()))
}

/// Number of items of the fitted subdimension.
///
/// # Safety
/// `fit` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit_n_items(fit: *const FoursSequenceFit, out: *mut usize) -> FoursStatus {
    guard(|| put(out, ref_arg(fit, "fit")?.0.items.len()))
}

/// Level probabilities `P(Y = 0..=M | latent = delta)` of item `item`
/// (0-based) written to `probs`, which holds `len >= M + 1` values. The
/// number of levels is written to `n_levels` when it is not null, also when
/// the buffer is too small.
///
/// # Safety
/// `fit` is null or a live handle; `probs` is null or holds `len` values;
/// `n_levels` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fours_item_probabilities(
    fit: *const FoursSequenceFit,
    item: usize,
    delta: f64,
    probs: *mut f64,
    len: usize,
    n_levels: *mut usize,
) -> FoursStatus {
    guard(|| {
        let meas = ref_arg(fit, "fit")?.0.measurement();
        let it = meas
            .items
            .get(item)
            .ok_or_else(|| Failure(FoursStatus::Invalid, format!("item {item} out of range ({} items)", meas.items.len())))?;
        let levels = it.thresholds.len() + 1;
        if !n_levels.is_null() {
            n_levels.write(levels);
        }
        if !delta.is_finite() {
            return Err(Failure(FoursStatus::Invalid, "delta must be finite".into()));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        if len < levels {
            return Err(Failure(FoursStatus::BufferTooSmall, format!("{levels} levels, buffer holds {len}")));
        }
        let buf = std::slice::from_raw_parts_mut(probs, levels);
        for (m, p) in buf.iter_mut().enumerate() {
            *p = it.probability(m as u32, delta);
        }
        Ok(())
    })
}

/// # Safety
/// `fit` is null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fours_sequence_fit_free(fit: *mut FoursSequenceFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Fit the staging model described by `spec_json`. Non-converged fits are
/// returned as with [`fours_sequence_fit`].
///
/// # Safety
/// `cohort` is null or a live handle; `spec_json` is null or NUL-terminated;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_staging_fit(
    cohort: *const FoursCohort,
    spec_json: *const c_char,
    out: *mut *mut FoursStagingFit,
) -> FoursStatus {
    guard(|| {
        let data = &ref_arg(cohort, "cohort")?.0;
        let spec: StagingSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let fit = fit_staging(&spec, data)?;
        put(out, Box::into_raw(Box::new(FoursStagingFit(fit))))
    })
}

/// # Safety
/// `json` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_staging_fit_from_json(json: *const c_char, out: *mut *mut FoursStagingFit) -> FoursStatus {
    guard(|| {
        let fit: StagingFit = payload(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(FoursStagingFit(fit))))
    })
}

/// # Safety
/// `fit` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_staging_fit_to_json(fit: *const FoursStagingFit, out: *mut *mut c_char) -> FoursStatus {
    guard(|| {
        let s = into_c_string(serde_json::to_vec(&ref_arg(fit, "fit")?.0)?)?;
        put(out, s)
    })
}

/// # Safety
/// `fit` is null or a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_staging_fit_converged(fit: *const FoursStagingFit, out: *mut bool) -> FoursStatus {
    guard(|| put(out, ref_arg(fit, "fit")?.0.converged()))
}

/// # Safety
/// `fit` is null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn fours_staging_fit_free(fit: *mut FoursStagingFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Project the stages onto the latent scale of `seq` and return the
/// stage-specific item information table as JSON.
///
/// # Safety
/// Handles are null or live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fours_information_table(
    seq: *const FoursSequenceFit,
    stg: *const FoursStagingFit,
    mc_draws: usize,
    out: *mut *mut c_char,
) -> FoursStatus {
    guard(|| {
        let seq = &ref_arg(seq, "seq")?.0;
        let stg = &ref_arg(stg, "stg")?.0;
        let proj = project_staging(seq, stg, mc_draws)?;
        let table = information_table(&seq.measurement(), &proj)?;
        let s = into_c_string(serde_json::to_vec(&table)?)?;
        put(out, s)
    })
}

/// Run a pipeline command (`structure`, `sequence`, `stage`, `select`,
/// `simulate` or `report`) as the command-line tool would. `config_path`
/// may be null; `out_dir` null keeps the configured directory. A run whose
/// fits do not converge returns `NotConverged` with its artifacts written.
///
/// # Safety
/// String arguments are null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fours_run(command: *const c_char, config_path: *const c_char, out_dir: *const c_char) -> FoursStatus {
    guard(|| {
        let cmd: Command = serde_json::from_value(serde_json::Value::String(str_arg(command, "command")?.to_string()))
            .map_err(|_| Failure(FoursStatus::Invalid, "unknown command".into()))?;
        let config = if config_path.is_null() { None } else { Some(Path::new(str_arg(config_path, "config_path")?)) };
        let ov = Overrides {
            out: if out_dir.is_null() { None } else { Some(str_arg(out_dir, "out_dir")?.into()) },
            ..Default::default()
        };
        let ctx = Context::load(config, &ov)?;
        let outcome = cli::run(cmd, &ctx)?;
        if !outcome.converged {
            return Err(Failure(FoursStatus::NotConverged, outcome.warnings.join("; ")));
        }
        Ok(())
    })
}
