//! C ABI for the koopman-lmi library.
//!
//! Datasets and models are opaque handles created and destroyed through this
//! API; every fallible call returns a [`KmStatus`] code and stores a
//! human-readable message retrievable with `km_last_error_message` (valid on
//! the calling thread until the next failing call).

use koopman_lmi::analysis::predict_multistep;
use koopman_lmi::cli::fit_from_dataset;
use koopman_lmi::config::ExperimentConfig;
use koopman_lmi::datagen::{self, SyntheticSpec};
use koopman_lmi::lti::{hinf_norm, spectral_radius};
use koopman_lmi::regressors::KoopmanModel;
use koopman_lmi::snapshots::{load_episodes, save_episodes, ColumnSchema, Dataset};
use koopman_lmi::Error;
use libc::{c_char, c_double, c_int, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// Invalid configuration or unknown option.
    Config = 3,
    /// Data loading, schema, or dimension error.
    Data = 4,
    /// Semidefinite solver failure.
    Solver = 5,
    /// Operation requires an asymptotically stable system.
    Unstable = 6,
    /// Filesystem or serialization error.
    Io = 7,
    /// Internal panic; a bug in the library.
    Internal = 8,
}

/// Opaque dataset of recorded episodes.
pub struct KmDataset {
    inner: Dataset,
}

/// Opaque fitted Koopman model.
pub struct KmModel {
    inner: KoopmanModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> KmStatus {
    match err {
        Error::Config(_) | Error::Schema(_) => KmStatus::Config,
        Error::Solver(_) | Error::InfeasibleStep(_) | Error::Bracket(_) | Error::Build(_) => {
            KmStatus::Solver
        }
        Error::UnstableSystem(_) => KmStatus::Unstable,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => KmStatus::Io,
        _ => KmStatus::Data,
    }
}

fn fail(err: &Error) -> KmStatus {
    set_error(&err.to_string());
    status_of(err)
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, KmStatus> {
    if ptr.is_null() {
        set_error(&format!("argument '{name}' is null"));
        return Err(KmStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("argument '{name}' is not valid UTF-8"));
        KmStatus::Utf8
    })
}

fn guarded(f: impl FnOnce() -> KmStatus) -> KmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            KmStatus::Internal
        }
    }
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call from the same thread.
#[no_mangle]
pub extern "C" fn km_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load an episode CSV file (`episode`, `t`, `x0..`, `u0..` columns).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// The returned handle must be released with `km_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn km_dataset_load_csv(
    path: *const c_char,
    out: *mut *mut KmDataset,
) -> KmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument 'out' is null");
            return KmStatus::NullArgument;
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_episodes(path, &ColumnSchema::default()) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(KmDataset { inner: ds }));
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Generate a synthetic dataset from a JSON-encoded generator spec (the
/// `data.synthetic` object of the experiment config).
///
/// # Safety
/// `spec_json` must be a valid NUL-terminated string and `out` a valid
/// pointer. The returned handle must be released with `km_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn km_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut KmDataset,
) -> KmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument 'out' is null");
            return KmStatus::NullArgument;
        }
        let text = match utf8_arg(spec_json, "spec_json") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let spec: SyntheticSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => {
                set_error(&format!("invalid generator spec: {e}"));
                return KmStatus::Config;
            }
        };
        match datagen::generate(&spec) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(KmDataset { inner: ds }));
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Write a dataset in the episode CSV format.
///
/// # Safety
/// `dataset` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn km_dataset_save_csv(
    dataset: *const KmDataset,
    path: *const c_char,
) -> KmStatus {
    guarded(|| {
        let Some(ds) = dataset.as_ref() else {
            set_error("argument 'dataset' is null");
            return KmStatus::NullArgument;
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_episodes(&ds.inner, path) {
            Ok(()) => KmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Number of episodes in the dataset; zero for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn km_dataset_n_episodes(dataset: *const KmDataset) -> size_t {
    match dataset.as_ref() {
        Some(ds) => ds.inner.episodes.len(),
        None => 0,
    }
}

/// Release a dataset handle (null is ignored).
///
/// # Safety
/// `dataset` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn km_dataset_free(dataset: *mut KmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fit a Koopman model on the dataset. `config_toml` is the experiment
/// config (its `lifting`, `regression`, and `solver` sections drive the fit;
/// the `data` section is ignored here).
///
/// # Safety
/// `dataset` must be a live handle, `config_toml` a valid string, `out` a
/// valid pointer. The returned handle must be released with `km_model_free`.
#[no_mangle]
pub unsafe extern "C" fn km_fit(
    dataset: *const KmDataset,
    config_toml: *const c_char,
    out: *mut *mut KmModel,
) -> KmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument 'out' is null");
            return KmStatus::NullArgument;
        }
        let Some(ds) = dataset.as_ref() else {
            set_error("argument 'dataset' is null");
            return KmStatus::NullArgument;
        };
        let text = match utf8_arg(config_toml, "config_toml") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let config = match ExperimentConfig::from_toml_str(text) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        match fit_from_dataset(&config, &ds.inner) {
            Ok((model, _, _)) => {
                *out = Box::into_raw(Box::new(KmModel { inner: model }));
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Load a model from its JSON container.
///
/// # Safety
/// `path` must be a valid string and `out` a valid pointer. The returned
/// handle must be released with `km_model_free`.
#[no_mangle]
pub unsafe extern "C" fn km_model_load_json(
    path: *const c_char,
    out: *mut *mut KmModel,
) -> KmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument 'out' is null");
            return KmStatus::NullArgument;
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match KoopmanModel::load_json(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(KmModel { inner: m }));
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Save a model to its JSON container.
///
/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn km_model_save_json(
    model: *const KmModel,
    path: *const c_char,
) -> KmStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            set_error("argument 'model' is null");
            return KmStatus::NullArgument;
        };
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match m.inner.save_json(path) {
            Ok(()) => KmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Serialize a model to a JSON string owned by the library; release it with
/// `km_string_free`.
///
/// # Safety
/// `model` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn km_model_to_json(
    model: *const KmModel,
    out_json: *mut *mut c_char,
) -> KmStatus {
    guarded(|| {
        if out_json.is_null() {
            set_error("argument 'out_json' is null");
            return KmStatus::NullArgument;
        }
        let Some(m) = model.as_ref() else {
            set_error("argument 'model' is null");
            return KmStatus::NullArgument;
        };
        match m.inner.to_json_string() {
            Ok(text) => match CString::new(text) {
                Ok(c) => {
                    *out_json = c.into_raw();
                    KmStatus::Ok
                }
                Err(_) => {
                    set_error("model JSON contained an interior NUL byte");
                    KmStatus::Internal
                }
            },
            Err(e) => fail(&e),
        }
    })
}

/// Spectral radius of the model's `A` block.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn km_model_spectral_radius(
    model: *const KmModel,
    out: *mut c_double,
) -> KmStatus {
    guarded(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("null argument");
            return KmStatus::NullArgument;
        };
        *out = spectral_radius(&m.inner.a());
        KmStatus::Ok
    })
}

/// H-infinity norm of the model's state-space realization to relative
/// tolerance `tol`. Fails with `KM_STATUS_UNSTABLE` for unstable models.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn km_model_hinf_norm(
    model: *const KmModel,
    tol: c_double,
    out: *mut c_double,
) -> KmStatus {
    guarded(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            set_error("null argument");
            return KmStatus::NullArgument;
        };
        let ss = match m.inner.state_space() {
            Ok(ss) => ss,
            Err(e) => return fail(&e),
        };
        match hinf_norm(&ss, tol) {
            Ok(v) => {
                *out = v;
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Multi-step prediction of one episode: root-mean-square error and the
/// divergence flag.
///
/// # Safety
/// `model` and `dataset` must be live handles; `out_rms` and `out_diverged`
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn km_model_predict_rms(
    model: *const KmModel,
    dataset: *const KmDataset,
    episode_id: u64,
    out_rms: *mut c_double,
    out_diverged: *mut c_int,
) -> KmStatus {
    guarded(|| {
        let (Some(m), Some(ds)) = (model.as_ref(), dataset.as_ref()) else {
            set_error("null handle argument");
            return KmStatus::NullArgument;
        };
        if out_rms.is_null() || out_diverged.is_null() {
            set_error("null output argument");
            return KmStatus::NullArgument;
        }
        let Some(episode) = ds.inner.episode(episode_id) else {
            set_error(&format!("episode {episode_id} not present in the dataset"));
            return KmStatus::Data;
        };
        match predict_multistep(&m.inner, episode) {
            Ok(result) => {
                *out_rms = result.rms_error;
                *out_diverged = c_int::from(result.diverged);
                KmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a model handle (null is ignored).
///
/// # Safety
/// `model` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn km_model_free(model: *mut KmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Release a string allocated by this library (null is ignored).
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn km_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
