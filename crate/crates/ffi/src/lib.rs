//! C interface to `glead`.
//!
//! Fallible functions return a [`GleadStatus`]. On failure,
//! [`glead_last_error`] describes the problem for the calling thread.
//! Handles are opaque; release each with its `_free` function. Images are
//! `float` arrays laid out `[n, 3, R, R]` with values in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use glead::autograd::{no_grad, Tensor, Var};
use glead::config::FResolution;
use glead::metrics::{reconstruct_images, sample_images};
use glead::nn::Tape;
use glead::trainer::{load_models, train_run, Checkpoint, Models, RunOptions, Trainer};
use glead::GleadError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GleadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Dataset = 6,
    Numerical = 7,
    Diverged = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A run configuration.
pub struct GleadConfig(glead::GleadConfig);

/// A training session kept in memory.
pub struct GleadTrainer(Trainer<f32>);

/// Networks restored from a checkpoint.
pub struct GleadModel(Models);

/// Scalars of one training iteration.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GleadStepStats {
    pub images_shown: u64,
    pub score_real: f64,
    pub score_fake: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub rec_real: f64,
    pub rec_fake: f64,
    pub r1_applied: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GleadModelInfo {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    /// Decoder resolution, 0 when the decoder only predicts `w`.
    pub f_resolution: usize,
    pub has_decoder: bool,
    pub images_shown: u64,
}

/// Outcome of [`glead_train_run`]. Metric fields are NaN when the run was
/// not evaluated.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GleadRunSummary {
    pub images_shown: u64,
    pub finished: bool,
    pub diverged: bool,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub reconstruction: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(GleadStatus, String);

impl From<GleadError> for Failure {
    fn from(e: GleadError) -> Self {
        let status = match &e {
            GleadError::Contract(_) => GleadStatus::InvalidArgument,
            GleadError::Config(_) => GleadStatus::Config,
            GleadError::Numerical(_) => GleadStatus::Numerical,
            GleadError::Diverged { .. } => GleadStatus::Diverged,
            GleadError::Format(_) => GleadStatus::Format,
            GleadError::Dataset(_) | GleadError::Image(_) => GleadStatus::Dataset,
            GleadError::Io { .. } => GleadStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: GleadStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GleadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GleadStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            GleadStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(GleadStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(GleadStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(GleadStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(GleadStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(GleadStatus::NullPointer, "output pointer is NULL"));
    }
    out.write(v);
    Ok(())
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Failure> {
    if p.is_null() {
        return Err(fail(GleadStatus::NullPointer, "output buffer is NULL"));
    }
    if len < need {
        return Err(fail(GleadStatus::BufferTooSmall, format!("output buffer holds {len} floats, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn images_arg(m: &Models, images: *const f32, n: usize) -> Result<Tensor<f32>, Failure> {
    if images.is_null() {
        return Err(fail(GleadStatus::NullPointer, "images is NULL"));
    }
    if n == 0 {
        return Err(fail(GleadStatus::InvalidArgument, "need at least one image"));
    }
    let r = m.config.arch.resolution;
    let data = std::slice::from_raw_parts(images, n * 3 * r * r).to_vec();
    Ok(Tensor::new([n, 3, r, r], data))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn glead_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library from the
/// same thread.
#[no_mangle]
pub extern "C" fn glead_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn glead_config_default(out: *mut *mut GleadConfig) -> GleadStatus {
    guard(|| put(out, Box::into_raw(Box::new(GleadConfig(glead::GleadConfig::default())))))
}

/// Parse `key = value` lines; unknown or invalid settings are errors.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glead_config_parse(text: *const c_char, out: *mut *mut GleadConfig) -> GleadStatus {
    guard(|| {
        let cfg: glead::GleadConfig = str_arg(text, "text")?.parse()?;
        cfg.validate()?;
        put(out, Box::into_raw(Box::new(GleadConfig(cfg))))
    })
}

/// Change one setting. The whole configuration is validated when a
/// trainer is created.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn glead_config_set(cfg: *mut GleadConfig, key: *const c_char, value: *const c_char) -> GleadStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        cfg.0.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Write the configuration as text into `buf` (NUL-terminated). `*needed`
/// receives the required size including the terminator; pass a NULL
/// `buf` to query it.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes; `needed` must be
/// NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn glead_config_to_text(
    cfg: *const GleadConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> GleadStatus {
    guard(|| {
        let text = handle(cfg, "cfg")?.0.to_text();
        let need = text.len() + 1;
        if !needed.is_null() {
            needed.write(need);
        }
        if buf.is_null() {
            return Ok(());
        }
        if len < need {
            return Err(fail(GleadStatus::BufferTooSmall, format!("buffer holds {len} bytes, need {need}")));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr().cast(), buf, text.len());
        buf.add(text.len()).write(0);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glead_config_free(cfg: *mut GleadConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Build networks, optimizers and the dataset for a fresh run.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_new(cfg: *const GleadConfig, out: *mut *mut GleadTrainer) -> GleadStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?.0.clone();
        cfg.validate()?;
        let t = Trainer::new(cfg)?;
        put(out, Box::into_raw(Box::new(GleadTrainer(t))))
    })
}

/// One generator update followed by one discriminator update.
///
/// # Safety
/// `t` must be a live handle; `stats` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_step(t: *mut GleadTrainer, stats: *mut GleadStepStats) -> GleadStatus {
    guard(|| {
        let r = handle_mut(t, "trainer")?.0.step()?;
        if !stats.is_null() {
            let rec = r.record;
            stats.write(GleadStepStats {
                images_shown: rec.images_shown,
                score_real: rec.score_real,
                score_fake: rec.score_fake,
                loss_g: rec.loss_g,
                loss_d: rec.loss_d,
                rec_real: rec.rec_real,
                rec_fake: rec.rec_fake,
                r1_applied: r.r1_applied,
            });
        }
        Ok(())
    })
}

/// # Safety
/// `t` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_images_shown(t: *const GleadTrainer) -> u64 {
    t.as_ref().map_or(0, |t| t.0.images_shown)
}

/// Save the full training state; [`glead_trainer_resume`] continues it.
///
/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_save(t: *const GleadTrainer, path: *const c_char) -> GleadStatus {
    guard(|| {
        let t = handle(t, "trainer")?;
        t.0.to_checkpoint().save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_resume(path: *const c_char, out: *mut *mut GleadTrainer) -> GleadStatus {
    guard(|| {
        let ck = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(GleadTrainer(Trainer::from_checkpoint(&ck)?))))
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glead_trainer_free(t: *mut GleadTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Train into `out_dir` with logs, evaluations and checkpoints, resuming
/// from the newest checkpoint there if `resume` is set. `max_iterations`
/// of 0 means no limit. A diverged run returns `GLEAD_STATUS_OK` with
/// `diverged` set.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated string and
/// `summary` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn glead_train_run(
    cfg: *const GleadConfig,
    out_dir: *const c_char,
    resume: bool,
    max_iterations: u64,
    skip_eval: bool,
    summary: *mut GleadRunSummary,
) -> GleadStatus {
    guard(|| {
        let opts = RunOptions { resume, max_iterations: (max_iterations > 0).then_some(max_iterations), skip_eval };
        let s = train_run(&handle(cfg, "cfg")?.0, &PathBuf::from(str_arg(out_dir, "out_dir")?), &opts)?;
        if !summary.is_null() {
            let last = s.evaluations.last();
            summary.write(GleadRunSummary {
                images_shown: s.images_shown,
                finished: s.finished,
                diverged: s.diverged.is_some(),
                fid: last.map_or(f64::NAN, |e| e.fid),
                precision: last.map_or(f64::NAN, |e| e.precision),
                recall: last.map_or(f64::NAN, |e| e.recall),
                reconstruction: last.and_then(|e| e.reconstruction).unwrap_or(f64::NAN),
            });
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glead_model_load(path: *const c_char, out: *mut *mut GleadModel) -> GleadStatus {
    guard(|| {
        let m = load_models(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(GleadModel(m))))
    })
}

/// # Safety
/// `m` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glead_model_info(m: *const GleadModel, info: *mut GleadModelInfo) -> GleadStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let a = &m.config.arch;
        put(
            info,
            GleadModelInfo {
                resolution: a.resolution,
                z_dim: a.z_dim,
                w_dim: a.w_dim,
                f_resolution: match m.d.f_resolution() {
                    FResolution::None => 0,
                    FResolution::Res(r) => r,
                },
                has_decoder: m.d.has_decoder(),
                images_shown: m.images_shown,
            },
        )
    })
}

/// Generate `n` images with the averaged generator. The same `seed` gives
/// the same images as the training sample grids.
///
/// # Safety
/// `m` must be a live handle; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn glead_model_generate(
    m: *const GleadModel,
    seed: u64,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> GleadStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        if n == 0 {
            return Err(fail(GleadStatus::InvalidArgument, "n must be positive"));
        }
        let r = m.config.arch.resolution;
        let dst = out_slice(out, out_len, n * 3 * r * r)?;
        let imgs = sample_images(&m.g_ema, n, &mut glead::rng::derived(seed, 8), 16)?;
        dst.copy_from_slice(imgs.data());
        Ok(())
    })
}

/// Discriminator logits for `n` images, one per image.
///
/// # Safety
/// `m` must be a live handle, `images` must hold `n * 3 * R * R` floats
/// and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn glead_model_score(
    m: *const GleadModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> GleadStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let x = images_arg(m, images, n)?;
        let dst = out_slice(out, out_len, n)?;
        let s = no_grad(|| m.d.score(&Tape::frozen(), &Var::constant(x)))?;
        dst.copy_from_slice(s.value().data());
        Ok(())
    })
}

/// Reconstruct images through the discriminator's decoder and the frozen
/// generator.
///
/// # Safety
/// `m` must be a live handle, `images` must hold `n * 3 * R * R` floats
/// and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn glead_model_reconstruct(
    m: *const GleadModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> GleadStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let x = images_arg(m, images, n)?;
        let dst = out_slice(out, out_len, x.numel())?;
        let y = reconstruct_images(&m.d, &m.g, &x)?;
        dst.copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glead_model_free(m: *mut GleadModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
