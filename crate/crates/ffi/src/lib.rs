//! C ABI over the splatstream engine.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SsStatus`]; on failure a message is kept per thread and can be fetched
//! with [`ss_last_error`]. Images are row-major, 3 interleaved f64 channels
//! in `[0, 1]`. Poses are row-major 4×4 world→camera matrices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use splatstream::config::Config;
use splatstream::eval;
use splatstream::memory::{read_snapshot, write_snapshot, MemoryBank, MemoryConfig, TokenBlock};
use splatstream::pipeline::{PipelineConfig, PipelineState};
use splatstream::ply::{export_field, import_field};
use splatstream::raster::{render, RenderSettings};
use splatstream::types::{CameraIntrinsics, CameraPose, FrameObservation, GaussianField, Grid, RgbImage, Vec3};
use splatstream::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Unsupported = 6,
    Init = 7,
    Fusion = 8,
    EmptyBank = 9,
    Numeric = 10,
    Config = 11,
    Panic = 12,
}

impl From<&Error> for SsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::UndefinedCoverage => SsStatus::InvalidArgument,
            Error::EmptyBank => SsStatus::EmptyBank,
            Error::UndefinedLoss(_) | Error::NonFinite { .. } | Error::GradientUndefined(_) => SsStatus::Numeric,
            Error::Format { .. } | Error::Json(_) | Error::Png(_) => SsStatus::Format,
            Error::Validation(_) => SsStatus::Validation,
            Error::Unsupported(_) => SsStatus::Unsupported,
            Error::Init(_) => SsStatus::Init,
            Error::Fusion(_) => SsStatus::Fusion,
            Error::Path { .. } | Error::Io(_) => SsStatus::Io,
            Error::Config(_) => SsStatus::Config,
        }
    }
}

/// Camera intrinsics in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SsIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Borrowed view of one observation. `depth` may be null.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SsFrame {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` values.
    pub rgb: *const f64,
    /// `width * height` values, nonzero inside the object.
    pub mask: *const u8,
    /// `width * height` values or null.
    pub depth: *const f64,
}

/// Memory bank handle.
pub struct SsBank(MemoryBank);

/// Gaussian field handle.
pub struct SsField(GaussianField);

/// Streaming pipeline handle.
pub struct SsPipeline {
    state: PipelineState,
    render: RenderSettings,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(SsStatus::from(&e), e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Fail>;

fn null(what: &str) -> Fail {
    Fail(SsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> FfiResult) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SsStatus::Panic
        }
    }
}

unsafe fn view<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_path(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn read_pose(p: *const f64) -> FfiResult<CameraPose> {
    let m: [f64; 16] = view(p, 16, "pose")?.try_into().expect("16 values");
    Ok(CameraPose::from_row_major(&m)?)
}

unsafe fn unit(p: *const f64, what: &str) -> FfiResult<Vec3> {
    let v = view(p, 3, what)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn intrinsics(k: &SsIntrinsics) -> FfiResult<CameraIntrinsics> {
    Ok(CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?)
}

unsafe fn image(p: *const f64, width: usize, height: usize, what: &str) -> FfiResult<RgbImage> {
    let n = width.checked_mul(height).ok_or_else(|| Fail(SsStatus::InvalidArgument, "image too large".into()))?;
    let data = view(p, n * 3, what)?;
    Ok(Grid::from_vec(width, height, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?)
}

unsafe fn frame(f: *const SsFrame, t: usize) -> FfiResult<FrameObservation> {
    let f = handle(f, "frame")?;
    let n = f.width * f.height;
    let rgb = image(f.rgb, f.width, f.height, "frame.rgb")?;
    let mask = Grid::from_vec(f.width, f.height, view(f.mask, n, "frame.mask")?.iter().map(|&m| m != 0).collect())?;
    let depth = if f.depth.is_null() {
        None
    } else {
        Some(Grid::from_vec(f.width, f.height, view(f.depth, n, "frame.depth")?.to_vec())?)
    };
    Ok(FrameObservation { rgb, mask, depth, t })
}

unsafe fn block(p: *const f64, rows: usize, cols: usize, what: &str) -> FfiResult<TokenBlock> {
    Ok(TokenBlock::from_vec(rows, cols, view(p, rows * cols, what)?.to_vec())?)
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> FfiResult {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---- metrics

/// PSNR in dB with peak 1; identical images give 99.
///
/// # Safety
/// `a` and `b` must point to `width * height * 3` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_psnr(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        let v = eval::psnr(&image(a, width, height, "a")?, &image(b, width, height, "b")?)?;
        put(out, v, "out")
    })
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5). Images must be at least 11×11.
///
/// # Safety
/// As for [`ss_psnr`].
#[no_mangle]
pub unsafe extern "C" fn ss_ssim(a: *const f64, b: *const f64, width: usize, height: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        let v = eval::ssim(&image(a, width, height, "a")?, &image(b, width, height, "b")?)?;
        put(out, v, "out")
    })
}

/// Combined score in `[0, 1]`; `lpips` is ignored unless `has_lpips` is nonzero.
#[no_mangle]
pub extern "C" fn ss_m_avg(psnr: f64, ssim: f64, lpips: f64, has_lpips: i32) -> f64 {
    eval::m_avg(psnr, ssim, (has_lpips != 0).then_some(lpips))
}

// ---- memory bank

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_new(
    feature_dim: usize,
    tokens_per_view: usize,
    capacity_tokens: usize,
    directional: i32,
    out: *mut *mut SsBank,
) -> SsStatus {
    guard(|| {
        let bank = MemoryBank::new(MemoryConfig {
            feature_dim,
            tokens_per_view,
            capacity_tokens,
            directional: directional != 0,
        })?;
        put(out, Box::into_raw(Box::new(SsBank(bank))), "out")
    })
}

/// # Safety
/// `bank` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_free(bank: *mut SsBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Number of stored tokens; 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_len(bank: *const SsBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.len())
}

/// Writes one view: `keys` and `values` are P×C row-major, `direction` a unit 3-vector.
///
/// # Safety
/// Buffers must hold the stated number of values; `removed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_write(
    bank: *mut SsBank,
    keys: *const f64,
    direction: *const f64,
    values: *const f64,
    t: u64,
    removed: *mut usize,
) -> SsStatus {
    guard(|| {
        let bank = &mut handle_mut(bank, "bank")?.0;
        let (p, c) = (bank.config().tokens_per_view, bank.config().feature_dim);
        let k = block(keys, p, c, "keys")?;
        let v = block(values, p, c, "values")?;
        let gone = bank.write(&k, &unit(direction, "direction")?, &v, t)?;
        if !removed.is_null() {
            removed.write(gone.len());
        }
        Ok(())
    })
}

/// Both reads for a P×C query; each output receives P×C values. Usage is recorded.
///
/// # Safety
/// Buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_read(
    bank: *mut SsBank,
    query: *const f64,
    rows: usize,
    reference_direction: *const f64,
    current_direction: *const f64,
    sigma: f64,
    aligned: *mut f64,
    complementary: *mut f64,
) -> SsStatus {
    guard(|| {
        let bank = &mut handle_mut(bank, "bank")?.0;
        let c = bank.config().feature_dim;
        let q = block(query, rows, c, "query")?;
        let r = bank.read(&q, &unit(reference_direction, "reference_direction")?, &unit(current_direction, "current_direction")?, sigma)?;
        view_mut(aligned, rows * c, "aligned")?.copy_from_slice(r.aligned.as_slice());
        view_mut(complementary, rows * c, "complementary")?.copy_from_slice(r.complementary.as_slice());
        Ok(())
    })
}

/// One sparsification pass; stores the number of removed tokens.
///
/// # Safety
/// `removed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_sparsify(bank: *mut SsBank, removed: *mut usize) -> SsStatus {
    guard(|| {
        let n = handle_mut(bank, "bank")?.0.sparsify().removed_ids.len();
        if !removed.is_null() {
            removed.write(n);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_save(bank: *const SsBank, path: *const c_char) -> SsStatus {
    guard(|| Ok(write_snapshot(&handle(bank, "bank")?.0, c_path(path)?)?))
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_bank_load(path: *const c_char, out: *mut *mut SsBank) -> SsStatus {
    guard(|| {
        let bank = read_snapshot(c_path(path)?)?;
        put(out, Box::into_raw(Box::new(SsBank(bank))), "out")
    })
}

// ---- fields

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_field_load(path: *const c_char, out: *mut *mut SsField) -> SsStatus {
    guard(|| {
        let field = import_field(c_path(path)?)?;
        put(out, Box::into_raw(Box::new(SsField(field))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ss_field_save(field: *const SsField, path: *const c_char) -> SsStatus {
    guard(|| Ok(export_field(&handle(field, "field")?.0, c_path(path)?)?))
}

/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_field_len(field: *const SsField) -> usize {
    field.as_ref().map_or(0, |f| f.0.len())
}

/// # Safety
/// `field` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_field_free(field: *mut SsField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Renders `field` with default settings into `rgb` (`width * height * 3` values).
///
/// # Safety
/// `pose` must hold 16 values and `rgb` the image size.
#[no_mangle]
pub unsafe extern "C" fn ss_render(field: *const SsField, pose: *const f64, k: *const SsIntrinsics, rgb: *mut f64) -> SsStatus {
    guard(|| {
        let k = intrinsics(handle(k, "intrinsics")?)?;
        let out = render(&handle(field, "field")?.0, &read_pose(pose)?, &k, &RenderSettings::default())?;
        let dst = view_mut(rgb, k.pixel_count() * 3, "rgb")?;
        for (d, s) in dst.chunks_exact_mut(3).zip(out.color.as_slice()) {
            d.copy_from_slice(s);
        }
        Ok(())
    })
}

// ---- pipeline

/// Starts a stream from the reference frame. `config_path` may be null for
/// defaults, otherwise a TOML or JSON config file.
///
/// # Safety
/// All pointers must satisfy the layouts documented on their types.
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_new(
    config_path: *const c_char,
    reference: *const SsFrame,
    reference_pose: *const f64,
    k: *const SsIntrinsics,
    out: *mut *mut SsPipeline,
) -> SsStatus {
    guard(|| {
        let cfg = if config_path.is_null() {
            Config::default()
        } else {
            Config::load(c_path(config_path)?)?
        };
        let k = intrinsics(handle(k, "intrinsics")?)?;
        let state = PipelineState::init(&frame(reference, 0)?, &read_pose(reference_pose)?, &k, cfg.pipeline)?;
        put(out, Box::into_raw(Box::new(SsPipeline { state, render: cfg.render })), "out")
    })
}

/// Like [`ss_pipeline_new`] with the default configuration except for the
/// memory sizes and patch edge.
///
/// # Safety
/// As for [`ss_pipeline_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_new_sized(
    feature_dim: usize,
    tokens_per_view: usize,
    capacity_tokens: usize,
    patch_size: usize,
    reference: *const SsFrame,
    reference_pose: *const f64,
    k: *const SsIntrinsics,
    out: *mut *mut SsPipeline,
) -> SsStatus {
    guard(|| {
        let mut cfg = PipelineConfig {
            patch_size,
            ..Default::default()
        };
        cfg.memory.feature_dim = feature_dim;
        cfg.memory.tokens_per_view = tokens_per_view;
        cfg.memory.capacity_tokens = capacity_tokens;
        let k = intrinsics(handle(k, "intrinsics")?)?;
        let state = PipelineState::init(&frame(reference, 0)?, &read_pose(reference_pose)?, &k, cfg)?;
        put(
            out,
            Box::into_raw(Box::new(SsPipeline {
                state,
                render: RenderSettings::default(),
            })),
            "out",
        )
    })
}

/// Feeds one frame. On success `field_out` receives a new field handle
/// owned by the caller. On failure the pipeline is unchanged.
///
/// # Safety
/// As for [`ss_pipeline_new`]; `field_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_step(
    pipeline: *mut SsPipeline,
    f: *const SsFrame,
    pose: *const f64,
    field_out: *mut *mut SsField,
) -> SsStatus {
    guard(|| {
        let p = handle_mut(pipeline, "pipeline")?;
        if field_out.is_null() {
            return Err(null("field_out"));
        }
        let t = p.state.t() as usize + 1;
        let (field, _) = p.state.step(&frame(f, t)?, &read_pose(pose)?)?;
        put(field_out, Box::into_raw(Box::new(SsField(field))), "field_out")
    })
}

/// Renders a field with the pipeline's render settings.
///
/// # Safety
/// As for [`ss_render`].
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_render(
    pipeline: *const SsPipeline,
    field: *const SsField,
    pose: *const f64,
    rgb: *mut f64,
) -> SsStatus {
    guard(|| {
        let p = handle(pipeline, "pipeline")?;
        let k = *p.state.intrinsics();
        let out = render(&handle(field, "field")?.0, &read_pose(pose)?, &k, &p.render)?;
        let dst = view_mut(rgb, k.pixel_count() * 3, "rgb")?;
        for (d, s) in dst.chunks_exact_mut(3).zip(out.color.as_slice()) {
            d.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Frames processed since init; 0 for a null handle.
///
/// # Safety
/// `pipeline` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_t(pipeline: *const SsPipeline) -> u64 {
    pipeline.as_ref().map_or(0, |p| p.state.t())
}

/// Current number of memory tokens; 0 for a null handle.
///
/// # Safety
/// `pipeline` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_bank_len(pipeline: *const SsPipeline) -> usize {
    pipeline.as_ref().map_or(0, |p| p.state.bank().len())
}

/// # Safety
/// `pipeline` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_pipeline_free(pipeline: *mut SsPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}
