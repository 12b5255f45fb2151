//! C ABI over `nishimori-lab`.
//!
//! Every fallible function returns an [`NlStatus`]; on failure the message is
//! available from [`nl_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nishimori_lab::container::{instance_from_container, instance_to_container, Container};
use nishimori_lab::experiment::{self, ExperimentConfig};
use nishimori_lab::model::{ModelConfig, PlantedInstance};
use nishimori_lab::observables::multioverlap;
use nishimori_lab::perturbation::{sample_perturbation_with, PerturbationConfig, PerturbationRealization};
use nishimori_lab::posterior::{build_posterior, PosteriorHandle, PosteriorMode};
use nishimori_lab::LabError;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    EnumerationLimit = 5,
    Numerical = 6,
    Io = 7,
    BufferTooSmall = 8,
    ChecksFailed = 9,
    Panic = 10,
}

/// A planted instance: σ*, parameters and base data.
pub struct NlInstance(PlantedInstance);

/// A posterior over one instance and one side-channel realisation.
pub struct NlPosterior(PosteriorHandle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &LabError) -> NlStatus {
    match e {
        LabError::InvalidPrior(_)
        | LabError::InvalidChannel(_)
        | LabError::InvalidPerturbation(_)
        | LabError::Unknown(_)
        | LabError::Json(_) => NlStatus::InvalidConfig,
        LabError::Shape(_) | LabError::Domain(_) | LabError::Mode(_) => NlStatus::InvalidArgument,
        LabError::EnumerationLimit { .. } | LabError::QuadratureTooLarge(_) => NlStatus::EnumerationLimit,
        LabError::NotFinite(_) => NlStatus::Numerical,
        LabError::Io(_) | LabError::Container(_) => NlStatus::Io,
    }
}

fn fail(status: NlStatus, msg: impl Into<String>) -> NlStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), NlStatus>) -> NlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NlStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(NlStatus::Panic, msg)
        }
    }
}

fn lab<T>(r: nishimori_lab::Result<T>) -> Result<T, NlStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, NlStatus> {
    if p.is_null() {
        return Err(fail(NlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], NlStatus> {
    if p.is_null() {
        return Err(fail(NlStatus::NullPointer, "output buffer is null"));
    }
    if len < need {
        return Err(fail(NlStatus::BufferTooSmall, format!("buffer holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), NlStatus> {
    if p.is_null() {
        Err(fail(NlStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn nl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generates a planted instance from a model config (`{prior, channel, N, seed}` JSON).
///
/// # Safety
/// `model_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_new(model_json: *const c_char, out: *mut *mut NlInstance) -> NlStatus {
    guard(|| {
        non_null(out, "out")?;
        let json = text(model_json, "model_json")?;
        let cfg: ModelConfig = serde_json::from_str(json).map_err(|e| fail(NlStatus::InvalidConfig, e.to_string()))?;
        let inst = lab(PlantedInstance::generate(&cfg))?;
        *out = Box::into_raw(Box::new(NlInstance(inst)));
        Ok(())
    })
}

/// # Safety
/// `inst` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_free(inst: *mut NlInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Number of spins, 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_n(inst: *const NlInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.0.signal.len())
}

/// Copies σ* into `out` (capacity `len`).
///
/// # Safety
/// `inst` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_signal(inst: *const NlInstance, out: *mut f64, len: usize) -> NlStatus {
    guard(|| {
        non_null(inst, "instance")?;
        let s = &(*inst).0.signal;
        out_slice(out, len, s.len())?.copy_from_slice(s);
        Ok(())
    })
}

/// Writes the instance to the binary container format.
///
/// # Safety
/// `inst` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_save(inst: *const NlInstance, path: *const c_char) -> NlStatus {
    guard(|| {
        non_null(inst, "instance")?;
        let path = text(path, "path")?;
        let c = lab(instance_to_container(&(*inst).0))?;
        lab(c.save(Path::new(path)))
    })
}

/// Reads an instance written by [`nl_instance_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_instance_load(path: *const c_char, out: *mut *mut NlInstance) -> NlStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = text(path, "path")?;
        let inst = lab(Container::load(Path::new(path)).and_then(|c| instance_from_container(&c)))?;
        *out = Box::into_raw(Box::new(NlInstance(inst)));
        Ok(())
    })
}

/// Exact posterior of an instance. With a non-null `perturbation_json`, side
/// channels are built at the configured λ and drawn from its `noise_seed`.
///
/// # Safety
/// `inst` must be a live handle, `perturbation_json` null or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn nl_posterior_new(
    inst: *const NlInstance,
    perturbation_json: *const c_char,
    out: *mut *mut NlPosterior,
) -> NlStatus {
    guard(|| {
        non_null(inst, "instance")?;
        non_null(out, "out")?;
        let inst = &(*inst).0;
        let n = inst.signal.len();
        let realization = if perturbation_json.is_null() {
            PerturbationRealization::none(n)
        } else {
            let cfg: PerturbationConfig = serde_json::from_str(text(perturbation_json, "perturbation_json")?)
                .map_err(|e| fail(NlStatus::InvalidConfig, e.to_string()))?;
            lab(cfg.validate())?;
            let channels = lab(cfg.lambda_for_run().and_then(|l| cfg.side_channels(n, &l)))?;
            lab(sample_perturbation_with(&inst.signal, &channels, cfg.noise_seed))?
        };
        let handle = lab(build_posterior(inst, &realization, PosteriorMode::ExactEnum))?;
        *out = Box::into_raw(Box::new(NlPosterior(handle)));
        Ok(())
    })
}

/// # Safety
/// `post` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nl_posterior_free(post: *mut NlPosterior) {
    if !post.is_null() {
        drop(Box::from_raw(post));
    }
}

/// `ln Z` of the posterior.
///
/// # Safety
/// `post` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nl_posterior_log_partition(post: *const NlPosterior, out: *mut f64) -> NlStatus {
    guard(|| {
        non_null(post, "posterior")?;
        non_null(out, "out")?;
        *out = lab((*post).0.log_partition())?;
        Ok(())
    })
}

/// Posterior means `⟨σᵢ⟩` into `out` (capacity `len` ≥ N).
///
/// # Safety
/// `post` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_posterior_site_means(post: *const NlPosterior, out: *mut f64, len: usize) -> NlStatus {
    guard(|| {
        non_null(post, "posterior")?;
        let m = lab((*post).0.exact())?.site_means(|_, x| x);
        out_slice(out, len, m.len())?.copy_from_slice(&m);
        Ok(())
    })
}

/// `(1/N)Σᵢ Πℓ (σᵢ^ℓ)^{kℓ}` for `n_replicas` row-major replicas of length `n`.
/// `powers` may be null (all ones) or hold `n_replicas` exponents.
///
/// # Safety
/// `replicas` must hold `n_replicas * n` doubles; `powers` null or `n_replicas` values; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn nl_multioverlap(
    replicas: *const f64,
    n_replicas: usize,
    n: usize,
    powers: *const u32,
    out: *mut f64,
) -> NlStatus {
    guard(|| {
        non_null(replicas, "replicas")?;
        non_null(out, "out")?;
        let flat = std::slice::from_raw_parts(replicas, n_replicas * n);
        let reps: Vec<&[f64]> = flat.chunks(n.max(1)).take(n_replicas).collect();
        let pw = (!powers.is_null()).then(|| std::slice::from_raw_parts(powers, n_replicas));
        *out = lab(multioverlap(&reps, pw))?;
        Ok(())
    })
}

/// Runs an experiment config (the CLI `run` command) and writes its outputs to
/// `output_dir`. Returns [`NlStatus::ChecksFailed`] when any check fails.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn nl_run_config(config_json: *const c_char, output_dir: *const c_char) -> NlStatus {
    guard(|| {
        let json = text(config_json, "config_json")?;
        let dir = text(output_dir, "output_dir")?;
        let cfg = ExperimentConfig::parse(json).map_err(|e| fail(NlStatus::InvalidConfig, e.to_string()))?;
        let outcome = lab(experiment::run(&cfg))?;
        lab(experiment::write_outputs(Path::new(dir), "run", &cfg.hash(), cfg.seed, &outcome.rows, &outcome.timings))?;
        if outcome.passed() {
            Ok(())
        } else {
            let names: Vec<String> =
                outcome.failures().map(|r| format!("{} N={} {}", r.test, r.n, r.observable)).collect();
            Err(fail(NlStatus::ChecksFailed, format!("failed: {}", names.join("; "))))
        }
    })
}
