//! C ABI over the `meshrollout` library.
//!
//! Every function returns an [`MrStatus`]. On failure a message is kept per
//! thread and can be copied out with [`mr_last_error_message`]. Handles are
//! opaque, owned by the caller and released with their `_free` function.
//! Handles must not be shared between threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use meshrollout::data::{generate_split, DatasetConfig, DatasetSplit, Trajectory};
use meshrollout::experiment::{evaluate_model, train_model, ExperimentConfig, TrainOptions};
use meshrollout::model::Model;
use meshrollout::train::Checkpoint;
use meshrollout::Error;

/// Result codes of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Which half of a dataset to address.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrSplit {
    Train = 0,
    Test = 1,
}

/// Generated train and test trajectories.
pub struct MrDataset {
    split: DatasetSplit,
}

/// A model with its parameters and normalization statistics.
pub struct MrModel {
    model: Model,
    checkpoint: Checkpoint,
}

/// Rollout metrics on a dataset split.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MrMetrics {
    pub one_step_rmse: f64,
    pub rollout_rmse: f64,
    pub diverged: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MrStatus {
    match e {
        Error::Config(_) | Error::Infeasible(_) => MrStatus::Config,
        Error::Io { .. } | Error::IoBare(_) => MrStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => MrStatus::Checkpoint,
        Error::NonFiniteGradient { .. } | Error::Diverged { .. } | Error::Pole { .. } => {
            MrStatus::Numeric
        }
        Error::FileHeader(_)
        | Error::FilePayload(_)
        | Error::FileSchema(_)
        | Error::FileEndianness(_) => MrStatus::Io,
        _ => MrStatus::Internal,
    }
}

struct Fail(MrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside meshrollout".into());
            MrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MrStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(MrStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: non-null output pointers must be valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: non-null handles were produced by this library.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

fn trajectories(ds: &MrDataset, split: MrSplit) -> &[Trajectory] {
    match split {
        MrSplit::Train => &ds.split.train,
        MrSplit::Test => &ds.split.test,
    }
}

fn trajectory(ds: &MrDataset, split: MrSplit, index: usize) -> Result<&Trajectory, Fail> {
    trajectories(ds, split).get(index).ok_or_else(|| {
        Fail(
            MrStatus::InvalidArgument,
            format!("trajectory {index} out of range"),
        )
    })
}

/// Copies the last error message of this thread, NUL-terminated, into
/// `buf`. `required` receives the needed size including the terminator.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn mr_last_error_message(
    buf: *mut c_char,
    len: usize,
    required: *mut usize,
) -> MrStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let need = msg.len() + 1;
    if let Some(r) = unsafe { required.as_mut() } {
        *r = need;
    }
    if buf.is_null() || len < need {
        return MrStatus::BufferTooSmall;
    }
    // SAFETY: `buf` holds at least `need` bytes.
    unsafe {
        std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
        *buf.add(msg.len()) = 0;
    }
    MrStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a dataset from a TOML dataset description (empty for the
/// defaults).
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_dataset_generate(
    toml: *const c_char,
    out: *mut *mut MrDataset,
) -> MrStatus {
    guard(|| {
        let text = unsafe { str_arg(toml, "toml") }?;
        let out = unsafe { out_arg(out, "out") }?;
        let cfg: DatasetConfig = toml_parse(text)?;
        let split = generate_split(&cfg)?;
        *out = Box::into_raw(Box::new(MrDataset { split }));
        Ok(())
    })
}

fn toml_parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, Fail> {
    toml::from_str(text).map_err(|e| Fail(MrStatus::Config, e.to_string()))
}

/// # Safety
/// `ds` must be null or a handle from [`mr_dataset_generate`], freed once.
#[no_mangle]
pub unsafe extern "C" fn mr_dataset_free(ds: *mut MrDataset) {
    if !ds.is_null() {
        // SAFETY: produced by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Number of trajectories in one split.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_dataset_len(
    ds: *const MrDataset,
    split: MrSplit,
    out: *mut usize,
) -> MrStatus {
    guard(|| {
        let ds = unsafe { handle(ds, "ds") }?;
        *unsafe { out_arg(out, "out") }? = trajectories(ds, split).len();
        Ok(())
    })
}

/// Node count, stored states and components per node of a trajectory.
///
/// # Safety
/// `ds` must be a live dataset handle; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_trajectory_shape(
    ds: *const MrDataset,
    split: MrSplit,
    index: usize,
    nodes: *mut usize,
    steps: *mut usize,
    components: *mut usize,
) -> MrStatus {
    guard(|| {
        let traj = trajectory(unsafe { handle(ds, "ds") }?, split, index)?;
        *unsafe { out_arg(nodes, "nodes") }? = traj.num_nodes();
        *unsafe { out_arg(steps, "steps") }? = traj.num_steps;
        *unsafe { out_arg(components, "components") }? = traj.num_components();
        Ok(())
    })
}

/// Copies the node-major `nodes × components` state at step `t` into `buf`.
///
/// # Safety
/// `ds` must be a live dataset handle; `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_trajectory_state(
    ds: *const MrDataset,
    split: MrSplit,
    index: usize,
    t: usize,
    buf: *mut f64,
    len: usize,
) -> MrStatus {
    guard(|| {
        let traj = trajectory(unsafe { handle(ds, "ds") }?, split, index)?;
        if t >= traj.num_steps {
            return Err(Fail(
                MrStatus::InvalidArgument,
                format!("step {t} out of range"),
            ));
        }
        let state = traj.state(t);
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < state.len() {
            return Err(Fail(
                MrStatus::BufferTooSmall,
                format!("state needs {} values, buffer holds {len}", state.len()),
            ));
        }
        // SAFETY: `buf` holds at least `state.len()` doubles.
        let dst = unsafe { std::slice::from_raw_parts_mut(buf, state.len()) };
        for (d, &s) in dst.iter_mut().zip(state) {
            *d = f64::from(s);
        }
        Ok(())
    })
}

/// Trains a model on the training split of `ds` according to an experiment
/// TOML (its dataset section is ignored) with the given seed.
///
/// # Safety
/// `toml` must be NUL-terminated, `ds` a live handle, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_model_train(
    toml: *const c_char,
    ds: *const MrDataset,
    seed: u64,
    out: *mut *mut MrModel,
) -> MrStatus {
    guard(|| {
        let text = unsafe { str_arg(toml, "toml") }?;
        let ds = unsafe { handle(ds, "ds") }?;
        let out = unsafe { out_arg(out, "out") }?;
        let cfg = ExperimentConfig::from_toml(text)?;
        let outcome = train_model(
            &cfg.model_for(seed),
            &cfg.train,
            &ds.split.train,
            TrainOptions::default(),
        )?;
        *out = Box::into_raw(Box::new(MrModel {
            model: outcome.model,
            checkpoint: outcome.checkpoint,
        }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_model_load(path: *const c_char, out: *mut *mut MrModel) -> MrStatus {
    guard(|| {
        let path = unsafe { str_arg(path, "path") }?;
        let out = unsafe { out_arg(out, "out") }?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        let model = checkpoint.model()?;
        *out = Box::into_raw(Box::new(MrModel { model, checkpoint }));
        Ok(())
    })
}

/// Writes the model's checkpoint, including optimizer state, to `path`.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mr_model_save(model: *const MrModel, path: *const c_char) -> MrStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let path = unsafe { str_arg(path, "path") }?;
        m.checkpoint.save(Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mr_model_free(model: *mut MrModel) {
    if !model.is_null() {
        // SAFETY: produced by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Trainable scalar count of a model.
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_model_num_parameters(
    model: *const MrModel,
    out: *mut usize,
) -> MrStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        *unsafe { out_arg(out, "out") }? = m.model.num_parameters();
        Ok(())
    })
}

/// One-step and all-rollout RMSE on a split. `horizon = 0` rolls out each
/// trajectory to its end.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_model_evaluate(
    model: *const MrModel,
    ds: *const MrDataset,
    split: MrSplit,
    horizon: usize,
    out: *mut MrMetrics,
) -> MrStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let ds = unsafe { handle(ds, "ds") }?;
        let out = unsafe { out_arg(out, "out") }?;
        let data = trajectories(ds, split);
        if data.is_empty() {
            return Err(Fail(
                MrStatus::InvalidArgument,
                "split holds no trajectories".into(),
            ));
        }
        let report = evaluate_model(&m.model, data, (horizon > 0).then_some(horizon))?;
        *out = MrMetrics {
            one_step_rmse: report.one_step_rmse,
            rollout_rmse: report.rollout_rmse,
            diverged: report.diverged as u64,
        };
        Ok(())
    })
}

/// Runs the numerical theory suites; `passed` and `total` count checks.
///
/// # Safety
/// Outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mr_verify(seed: u64, passed: *mut usize, total: *mut usize) -> MrStatus {
    guard(|| {
        let passed = unsafe { out_arg(passed, "passed") }?;
        let total = unsafe { out_arg(total, "total") }?;
        let g = meshrollout::theory::gradient_suite(seed)?;
        let s = meshrollout::theory::stability_suite(seed)?;
        let checks: Vec<_> = g.checks.iter().chain(&s.checks).collect();
        *total = checks.len();
        *passed = checks.iter().filter(|c| c.passed).count();
        Ok(())
    })
}
