//! C ABI over trained checkpoints: online task-branch inference, the noise
//! schedule and the anticipation metrics.
//!
//! Every entry point returns a [`CstdStatus`]. On failure the message is kept
//! per thread and read back with [`cstd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use costodet::checkpoint::load_checkpoint;
use costodet::diffusion::{DiffusionSchedule, ScheduleKind};
use costodet::metrics::{anticipation_channel, smooth_metric};
use costodet::model::{CoModel, OnlineSession};
use costodet::task::{decode_regression, TaskKind};
use costodet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CstdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    NonFinite = 4,
    Checkpoint = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CstdTask {
    Anticipation = 0,
    Recognition = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CstdSchedule {
    Cosine = 0,
    Linear = 1,
}

/// Opaque trained model.
pub struct CstdModel {
    model: CoModel,
}

/// Opaque recurrent state of one video stream.
pub struct CstdSession {
    session: OnlineSession,
    feature_dim: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CstdModelInfo {
    pub task: i32,
    pub observation_dim: usize,
    /// Length of one task-branch output row.
    pub output_dim: usize,
    /// Anticipated events or recognized phases.
    pub channels: usize,
    pub horizon: f64,
    pub diffusion_steps: usize,
}

/// Errors of one anticipation channel; undefined entries are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CstdChannelMetrics {
    pub mae: f64,
    pub in_mae: f64,
    pub out_mae: f64,
    pub wmae: f64,
    pub emae: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CstdStatus {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::UnknownConditioning(_)
        | Error::Shape(_)
        | Error::StepOutOfRange { .. } => CstdStatus::InvalidArgument,
        Error::UnknownTarget(_)
        | Error::LabelOutOfRange { .. }
        | Error::UnknownPhase { .. }
        | Error::Data { .. }
        | Error::Dataset { .. }
        | Error::Csv(_) => CstdStatus::Data,
        Error::NonFinite(_) => CstdStatus::NonFinite,
        Error::CheckpointVersion { .. } | Error::CheckpointCorrupt(_) | Error::CheckpointMismatch(_) | Error::Json(_) => {
            CstdStatus::Checkpoint
        }
        Error::Io(_) => CstdStatus::Io,
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

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CstdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CstdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            CstdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CstdStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn nonnull_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(Failure::Null(what)) };
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Error::Shape(format!("{what} has length {got}, expected {want}")).into());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cstd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cstd_model_load(path: *const c_char, out: *mut *mut CstdModel) -> CstdStatus {
    guard(|| {
        let path = nonnull(path, "path")?;
        let out = nonnull_mut(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let trainer = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(CstdModel { model: trainer.model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cstd_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cstd_model_free(model: *mut CstdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn cstd_model_info(model: *const CstdModel, info: *mut CstdModelInfo) -> CstdStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let info = nonnull_mut(info, "info")?;
        *info = CstdModelInfo {
            task: match m.kind() {
                TaskKind::Anticipation => CstdTask::Anticipation as i32,
                TaskKind::Recognition => CstdTask::Recognition as i32,
            },
            observation_dim: m.config.encoder.observation.flat_dim(),
            output_dim: m.head.config().output_dim(),
            channels: m.channels(),
            horizon: m.config.horizon,
            diffusion_steps: m.config.diffusion_steps,
        };
        Ok(())
    })
}

/// Starts a stream with a zero recurrent state.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cstd_session_new(model: *const CstdModel, out: *mut *mut CstdSession) -> CstdStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let out = nonnull_mut(out, "out")?;
        let session = CstdSession { session: m.start_session(), feature_dim: m.encoder.feature_dim() };
        *out = Box::into_raw(Box::new(session));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`cstd_session_new`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn cstd_session_free(session: *mut CstdSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of frames consumed by the session.
///
/// # Safety
/// `session` must be a live handle and `frames` writable.
#[no_mangle]
pub unsafe extern "C" fn cstd_session_frames(session: *const CstdSession, frames: *mut usize) -> CstdStatus {
    guard(|| {
        *nonnull_mut(frames, "frames")? = nonnull(session, "session")?.session.frames_seen;
        Ok(())
    })
}

/// Consumes one frame and writes the raw task-branch output row.
///
/// # Safety
/// `observation` must hold `observation_len` values and `output` `output_len`
/// writable values; both lengths must match [`CstdModelInfo`].
#[no_mangle]
pub unsafe extern "C" fn cstd_session_step(
    model: *const CstdModel,
    session: *mut CstdSession,
    observation: *const f64,
    observation_len: usize,
    output: *mut f64,
    output_len: usize,
) -> CstdStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let s = nonnull_mut(session, "session")?;
        let x = input(observation, observation_len, "observation")?;
        let out = self::output(output, output_len, "output")?;
        expect_len(s.feature_dim, m.encoder.feature_dim(), "session state")?;
        expect_len(output_len, m.head.config().output_dim(), "output")?;
        let row = m.step(&mut s.session, x)?;
        out.copy_from_slice(&row);
        Ok(())
    })
}

/// Consumes one frame of an anticipation model and writes the remaining
/// time of each channel in time units.
///
/// # Safety
/// As [`cstd_session_step`], with `remaining` holding `channels` values.
#[no_mangle]
pub unsafe extern "C" fn cstd_session_anticipate(
    model: *const CstdModel,
    session: *mut CstdSession,
    observation: *const f64,
    observation_len: usize,
    remaining: *mut f64,
    channels: usize,
) -> CstdStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let s = nonnull_mut(session, "session")?;
        let x = input(observation, observation_len, "observation")?;
        let out = output(remaining, channels, "remaining")?;
        if m.kind() != TaskKind::Anticipation {
            return Err(Error::InvalidArgument("model was trained for recognition".into()).into());
        }
        expect_len(channels, m.channels(), "remaining")?;
        let row = m.step(&mut s.session, x)?;
        for (o, v) in out.iter_mut().zip(&row) {
            *o = decode_regression(*v, m.config.horizon);
        }
        Ok(())
    })
}

/// Writes `ᾱ_1..ᾱ_steps` of a schedule into `out`, which holds `steps` values.
///
/// # Safety
/// `out` must hold `steps` writable values.
#[no_mangle]
pub unsafe extern "C" fn cstd_schedule_alpha_bars(kind: CstdSchedule, steps: usize, out: *mut f64) -> CstdStatus {
    guard(|| {
        let out = output(out, steps, "out")?;
        let kind = match kind {
            CstdSchedule::Cosine => ScheduleKind::Cosine,
            CstdSchedule::Linear => ScheduleKind::Linear,
        };
        let sched = DiffusionSchedule::new(kind, steps)?;
        for (k, o) in (1..=steps).zip(out.iter_mut()) {
            *o = sched.alpha_bar(k);
        }
        Ok(())
    })
}

/// Anticipation errors of one channel over `len` frames with horizon `horizon`.
///
/// # Safety
/// `preds` and `labels` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn cstd_channel_metrics(
    preds: *const f64,
    labels: *const f64,
    len: usize,
    horizon: f64,
    out: *mut CstdChannelMetrics,
) -> CstdStatus {
    guard(|| {
        let p = input(preds, len, "preds")?;
        let y = input(labels, len, "labels")?;
        let out = nonnull_mut(out, "out")?;
        let m = anticipation_channel(p, y, horizon)?;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = CstdChannelMetrics {
            mae: m.mae,
            in_mae: nan(m.in_mae),
            out_mae: nan(m.out_mae),
            wmae: nan(m.wmae),
            emae: nan(m.emae),
        };
        Ok(())
    })
}

/// Smoothness of one channel's predictions inside the horizon; NaN when undefined.
///
/// # Safety
/// `preds` and `labels` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn cstd_smooth(
    preds: *const f64,
    labels: *const f64,
    len: usize,
    horizon: f64,
    segment_aware: bool,
    out: *mut f64,
) -> CstdStatus {
    guard(|| {
        let p = input(preds, len, "preds")?;
        let y = input(labels, len, "labels")?;
        let out = nonnull_mut(out, "out")?;
        *out = smooth_metric(p, y, horizon, segment_aware)?.unwrap_or(f64::NAN);
        Ok(())
    })
}
