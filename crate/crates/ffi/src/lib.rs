//! C ABI for the comuco library.
//!
//! Every function returns a [`ComucoStatus`]; on failure a description is
//! available from [`comuco_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use comuco::embedding_store::{sample_k_shot, LabeledRow};
use comuco::experts::predict;
use comuco::geometry::{fisher_rao_distance, jeffreys, ProbVector};
use comuco::trainer::{evaluate, train, zero_shot_accuracy};
use comuco::{CoMuCoConfig, Error, ExpertParams, FrozenData, Split, TaskManifest};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComucoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed feature file, manifest or JSON.
    Format = 4,
    /// Non-finite value during training or evaluation.
    Numerical = 5,
    /// Internal error; the library caught a panic.
    Internal = 6,
}

/// Training and fusion settings. Obtain defaults from
/// [`comuco_config_default`] and override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ComucoConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub b: f64,
    /// Negative selects the default (50, or 300 for cross-domain tasks).
    pub epochs: i64,
    pub warmup_lr: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Zero selects `4 * dim`.
    pub hidden_dim: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl From<&ComucoConfig> for CoMuCoConfig {
    fn from(c: &ComucoConfig) -> Self {
        CoMuCoConfig {
            alpha: c.alpha,
            beta: c.beta,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            lambda3: c.lambda3,
            tau: c.tau,
            b: c.b,
            epochs: usize::try_from(c.epochs).ok(),
            warmup_lr: c.warmup_lr,
            peak_lr: c.peak_lr,
            batch_size: c.batch_size,
            hidden_dim: (c.hidden_dim > 0).then_some(c.hidden_dim),
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

impl From<&CoMuCoConfig> for ComucoConfig {
    fn from(c: &CoMuCoConfig) -> Self {
        ComucoConfig {
            alpha: c.alpha,
            beta: c.beta,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            lambda3: c.lambda3,
            tau: c.tau,
            b: c.b,
            epochs: c.epochs.map_or(-1, |e| e as i64),
            warmup_lr: c.warmup_lr,
            peak_lr: c.peak_lr,
            batch_size: c.batch_size,
            hidden_dim: c.hidden_dim.unwrap_or(0),
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

/// A loaded task: manifest plus normalized features and text embeddings.
pub struct ComucoTask {
    manifest: TaskManifest,
    frozen: FrozenData,
}

/// Trained or freshly initialized adapters with the settings used for fusion.
pub struct ComucoModel {
    params: ExpertParams,
    config: CoMuCoConfig,
}

struct Failure(ComucoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => ComucoStatus::Io,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::TrailingData { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateRow { .. }
            | Error::Manifest(_)
            | Error::Json(_) => ComucoStatus::Format,
            Error::Numerical { .. } | Error::TrainingAborted { .. } => ComucoStatus::Numerical,
            _ => ComucoStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult) -> ComucoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ComucoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal error: {msg}"));
            ComucoStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ComucoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| {
        Failure(
            ComucoStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn test_rows(m: &TaskManifest) -> Vec<LabeledRow> {
    m.rows
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| LabeledRow {
            row: r.index,
            label: r.label,
        })
        .collect()
}

/// Message describing the last failed call on this thread, or an empty
/// string. The pointer stays valid until the next library call on this
/// thread.
#[no_mangle]
pub extern "C" fn comuco_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn comuco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default configuration to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `ComucoConfig`.
#[no_mangle]
pub unsafe extern "C" fn comuco_config_default(out: *mut ComucoConfig) -> ComucoStatus {
    guard(|| {
        *out_ref(out, "out")? = ComucoConfig::from(&CoMuCoConfig::default());
        Ok(())
    })
}

/// Loads a task from its manifest JSON; feature paths resolve relative to
/// the manifest's directory.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_task_load(
    manifest_path: *const c_char,
    out: *mut *mut ComucoTask,
) -> ComucoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let manifest = TaskManifest::load(path_arg(manifest_path, "manifest_path")?)?;
        let frozen = manifest.load_frozen()?;
        *out = Box::into_raw(Box::new(ComucoTask { manifest, frozen }));
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a handle from [`comuco_task_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn comuco_task_free(task: *mut ComucoTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Number of classes and embedding dimension of a task.
///
/// # Safety
/// `task` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_task_shape(
    task: *const ComucoTask,
    num_classes: *mut usize,
    dim: *mut usize,
) -> ComucoStatus {
    guard(|| {
        let t = deref(task, "task")?;
        *out_ref(num_classes, "num_classes")? = t.frozen.num_classes();
        *out_ref(dim, "dim")? = t.frozen.dim();
        Ok(())
    })
}

/// Test-split accuracy of the frozen zero-shot classifier.
///
/// # Safety
/// `task` must be a live handle; `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_zero_shot_accuracy(
    task: *const ComucoTask,
    accuracy: *mut f64,
) -> ComucoStatus {
    guard(|| {
        let t = deref(task, "task")?;
        *out_ref(accuracy, "accuracy")? = zero_shot_accuracy(&t.frozen, &test_rows(&t.manifest))?;
        Ok(())
    })
}

/// Freshly initialized (identity) adapters for `task`.
///
/// # Safety
/// `task` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_init(
    task: *const ComucoTask,
    config: *const ComucoConfig,
    seed: u64,
    out: *mut *mut ComucoModel,
) -> ComucoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let t = deref(task, "task")?;
        let config = CoMuCoConfig::from(deref(config, "config")?);
        config.validate()?;
        let dim = t.frozen.dim();
        let params = ExpertParams::init(dim, config.hidden_for(dim), seed)?;
        *out = Box::into_raw(Box::new(ComucoModel { params, config }));
        Ok(())
    })
}

/// Samples a `k`-shot episode with `seed`, trains on it and returns the
/// model and its test accuracy (`accuracy` may be null).
///
/// # Safety
/// `task` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_train(
    task: *const ComucoTask,
    config: *const ComucoConfig,
    k: usize,
    seed: u64,
    out: *mut *mut ComucoModel,
    accuracy: *mut f64,
) -> ComucoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let t = deref(task, "task")?;
        let config = CoMuCoConfig::from(deref(config, "config")?);
        let episode = sample_k_shot(&t.manifest, k, seed)?;
        let epochs = config.epochs_for(t.manifest.cross_domain);
        let (params, history) = train(&episode, &t.frozen, &config, epochs, seed)?;
        if let Some(a) = accuracy.as_mut() {
            *a = history.final_accuracy;
        }
        *out = Box::into_raw(Box::new(ComucoModel { params, config }));
        Ok(())
    })
}

/// Loads adapters saved by [`comuco_model_save`] or the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `config` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_load(
    path: *const c_char,
    config: *const ComucoConfig,
    out: *mut *mut ComucoModel,
) -> ComucoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let config = CoMuCoConfig::from(deref(config, "config")?);
        config.validate()?;
        let params = ExpertParams::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(ComucoModel { params, config }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_save(
    model: *const ComucoModel,
    path: *const c_char,
) -> ComucoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.params.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_free(model: *mut ComucoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Test-split accuracy of the fused classifier.
///
/// # Safety
/// `model` and `task` must be live handles; `accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_evaluate(
    model: *const ComucoModel,
    task: *const ComucoTask,
    accuracy: *mut f64,
) -> ComucoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let t = deref(task, "task")?;
        *out_ref(accuracy, "accuracy")? =
            evaluate(&m.params, &t.frozen, &test_rows(&t.manifest), &m.config)?;
        Ok(())
    })
}

/// Classifies one unit-norm feature of length `dim` against the task's
/// class embeddings. When `logits` is non-null, `num_classes` fused logits
/// are written there.
///
/// # Safety
/// `feature` must hold `dim` doubles; `logits`, if non-null, `num_classes`.
#[no_mangle]
pub unsafe extern "C" fn comuco_model_predict(
    model: *const ComucoModel,
    task: *const ComucoTask,
    feature: *const f64,
    dim: usize,
    class_out: *mut usize,
    logits: *mut f64,
    num_classes: usize,
) -> ComucoStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let t = deref(task, "task")?;
        let z = slice_arg(feature, dim, "feature")?;
        let (class, outputs) = predict(z, &m.params, &t.frozen.text, &m.config)?;
        *out_ref(class_out, "class_out")? = class;
        if !logits.is_null() {
            let fused = outputs.s_fused.as_slice();
            if num_classes != fused.len() {
                return Err(Failure(
                    ComucoStatus::InvalidArgument,
                    format!(
                        "logits buffer holds {num_classes} values, task has {} classes",
                        fused.len()
                    ),
                ));
            }
            std::slice::from_raw_parts_mut(logits, num_classes).copy_from_slice(fused);
        }
        Ok(())
    })
}

fn prob_pair(p: &[f64], q: &[f64]) -> Result<(ProbVector, ProbVector), Failure> {
    Ok((ProbVector::new(p.to_vec())?, ProbVector::new(q.to_vec())?))
}

/// Jeffreys divergence `KL(p||q) + KL(q||p)` of two interior distributions.
///
/// # Safety
/// `p` and `q` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_jeffreys(
    p: *const f64,
    q: *const f64,
    n: usize,
    out: *mut f64,
) -> ComucoStatus {
    guard(|| {
        let (p, q) = prob_pair(slice_arg(p, n, "p")?, slice_arg(q, n, "q")?)?;
        *out_ref(out, "out")? = jeffreys(&p, &q)?;
        Ok(())
    })
}

/// Fisher-Rao geodesic distance between two distributions.
///
/// # Safety
/// `p` and `q` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comuco_fisher_rao(
    p: *const f64,
    q: *const f64,
    n: usize,
    out: *mut f64,
) -> ComucoStatus {
    guard(|| {
        let (p, q) = prob_pair(slice_arg(p, n, "p")?, slice_arg(q, n, "q")?)?;
        *out_ref(out, "out")? = fisher_rao_distance(&p, &q)?;
        Ok(())
    })
}
