//! C ABI over `scdm-core`: load a checkpoint, ground a query, and the
//! segment helpers (overlap, offset encode/decode).
//!
//! Every fallible call returns a [`ScdmStatus`]; on failure the message is
//! kept per thread and read with [`scdm_last_error`]. Models are opaque
//! handles owned by the caller and released with [`scdm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scdm_core::fusion::VideoFeatureSequence;
use scdm_core::harness::checkpoint::Checkpoint;
use scdm_core::head::{decode, encode_targets, Anchor};
use scdm_core::model::Query;
use scdm_core::objective::{tiou, Segment};
use scdm_core::{ConditioningMode, Error, InferConfig, Model};

/// Result of every fallible call. Library errors keep the category codes
/// used as process exit codes by the command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScdmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Input = 10,
    Dimension = 11,
    Numeric = 12,
    Config = 13,
    Load = 14,
    UnsupportedMode = 15,
    Io = 16,
    Json = 17,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScdmMode {
    Scdm = 0,
    Scm = 1,
    Mul = 2,
    Fc = 3,
    None = 4,
}

impl From<ConditioningMode> for ScdmMode {
    fn from(m: ConditioningMode) -> Self {
        match m {
            ConditioningMode::Scdm => ScdmMode::Scdm,
            ConditioningMode::Scm => ScdmMode::Scm,
            ConditioningMode::Mul => ScdmMode::Mul,
            ConditioningMode::Fc => ScdmMode::Fc,
            ConditioningMode::None => ScdmMode::None,
        }
    }
}

/// A ranked prediction in normalized video time.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScdmSegment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// Shapes a caller needs to prepare inputs.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScdmModelInfo {
    pub mode: ScdmMode,
    pub input_length: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_anchors: usize,
}

/// Opaque trained model.
pub struct ScdmModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ScdmStatus {
    match err {
        Error::Input(_) => ScdmStatus::Input,
        Error::Dimension(_) => ScdmStatus::Dimension,
        Error::Numeric(_) => ScdmStatus::Numeric,
        Error::Config(_) => ScdmStatus::Config,
        Error::Load(_) => ScdmStatus::Load,
        Error::UnsupportedMode(_) => ScdmStatus::UnsupportedMode,
        Error::Io(_) => ScdmStatus::Io,
        Error::Json(_) => ScdmStatus::Json,
    }
}

/// Failure raised inside the wrapper itself.
struct Fail(ScdmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScdmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScdmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ScdmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(ScdmStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

fn invalid(msg: String) -> Fail {
    Fail(ScdmStatus::InvalidArgument, msg)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scdm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn scdm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_load(path: *const c_char, out: *mut *mut ScdmModel) -> ScdmStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null; caller guarantees termination.
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|e| invalid(format!("path is not UTF-8: {e}")))?;
        let model = Checkpoint::load(Path::new(path))?.to_model()?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(ScdmModel { model })) };
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`scdm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_free(model: *mut ScdmModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_info(model: *const ScdmModel, out: *mut ScdmModelInfo) -> ScdmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        // SAFETY: checked non-null.
        let m = unsafe { &(*model).model };
        let c = &m.config;
        let info = ScdmModelInfo {
            mode: c.mode.into(),
            input_length: c.input_length,
            feature_dim: c.d_v,
            vocab_size: c.vocab_size,
            num_layers: c.num_layers,
            num_anchors: m.anchors().len(),
        };
        // SAFETY: checked non-null.
        unsafe { *out = info };
        Ok(())
    })
}

/// Grounds one query. `video` holds `num_clips` rows of `feature_dim`
/// values (row-major); it is truncated or zero-padded to the model input
/// length. Up to `capacity` ranked segments, clamped to `[0, 1]` and
/// suppressed at `nms_threshold`, are written to `out`; `*written` receives
/// the count. `max_keep` of 0 means `capacity`.
///
/// # Safety
/// `video` must hold `num_clips * feature_dim` doubles, `tokens` must hold
/// `num_tokens` values, `out` must hold `capacity` segments and `written`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_predict(
    model: *const ScdmModel,
    video: *const f64,
    num_clips: usize,
    feature_dim: usize,
    tokens: *const u32,
    num_tokens: usize,
    nms_threshold: f64,
    max_keep: usize,
    out: *mut ScdmSegment,
    capacity: usize,
    written: *mut usize,
) -> ScdmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(video, "video")?;
        non_null(tokens, "tokens")?;
        non_null(written, "written")?;
        // SAFETY: checked non-null.
        unsafe { *written = 0 };
        if capacity > 0 {
            non_null(out, "out")?;
        }
        if num_tokens == 0 || num_clips == 0 {
            return Err(invalid("empty video or query".into()));
        }
        // SAFETY: checked non-null.
        let m = unsafe { &(*model).model };
        if feature_dim != m.config.d_v {
            return Err(invalid(format!("feature_dim {feature_dim} but the model expects {}", m.config.d_v)));
        }
        let len = num_clips.checked_mul(feature_dim).ok_or_else(|| invalid("video size overflows".into()))?;
        // SAFETY: caller guarantees the lengths.
        let (video, tokens) = unsafe { (std::slice::from_raw_parts(video, len), std::slice::from_raw_parts(tokens, num_tokens)) };
        let rows: Vec<Vec<f64>> = video.chunks(feature_dim).map(<[f64]>::to_vec).collect();
        let seq = VideoFeatureSequence::ingest(&rows, m.config.input_length, feature_dim)?;
        let tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let keep = if max_keep == 0 { capacity } else { max_keep.min(capacity) };
        if keep == 0 {
            return Err(Fail(ScdmStatus::BufferTooSmall, "no room for any segment".into()));
        }
        let infer = InferConfig { nms_threshold, max_keep: keep };
        let ranked = m.rank(Query { video: &seq.clips, tokens: &tokens }, &infer)?;
        for (i, s) in ranked.iter().enumerate() {
            let seg = ScdmSegment { start: s.segment.start, end: s.segment.end, score: s.score };
            // SAFETY: i < keep <= capacity.
            unsafe { *out.add(i) = seg };
        }
        // SAFETY: checked non-null.
        unsafe { *written = ranked.len() };
        Ok(())
    })
}

/// Temporal IoU of `[s1, e1]` and `[s2, e2]`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scdm_tiou(s1: f64, e1: f64, s2: f64, e2: f64, out: *mut f64) -> ScdmStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = tiou(&Segment::new(s1, e1)?, &Segment::new(s2, e2)?)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

fn anchor(center: f64, width: f64) -> Result<Anchor, Fail> {
    if !(width > 0.0 && center.is_finite() && width.is_finite()) {
        return Err(invalid(format!("anchor width {width} must be positive and finite")));
    }
    Ok(Anchor { center, width, layer: 0, unit: 0, ratio: 1.0 })
}

/// Applies offsets `(dc, dw)` to an anchor.
///
/// # Safety
/// `center` and `width` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scdm_decode(
    anchor_center: f64,
    anchor_width: f64,
    dc: f64,
    dw: f64,
    alpha_c: f64,
    alpha_w: f64,
    center: *mut f64,
    width: *mut f64,
) -> ScdmStatus {
    guard(|| {
        non_null(center, "center")?;
        non_null(width, "width")?;
        let (c, w) = decode(&anchor(anchor_center, anchor_width)?, dc, dw, alpha_c, alpha_w);
        // SAFETY: checked non-null.
        unsafe { (*center, *width) = (c, w) };
        Ok(())
    })
}

/// Offsets that decode an anchor to the given span.
///
/// # Safety
/// `dc` and `dw` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scdm_encode(
    anchor_center: f64,
    anchor_width: f64,
    center: f64,
    width: f64,
    alpha_c: f64,
    alpha_w: f64,
    dc: *mut f64,
    dw: *mut f64,
) -> ScdmStatus {
    guard(|| {
        non_null(dc, "dc")?;
        non_null(dw, "dw")?;
        if !(alpha_c != 0.0 && alpha_w != 0.0) {
            return Err(invalid("alpha_c and alpha_w must be non-zero".into()));
        }
        let (c, w) = encode_targets(&anchor(anchor_center, anchor_width)?, center, width, alpha_c, alpha_w)?;
        // SAFETY: checked non-null.
        unsafe { (*dc, *dw) = (c, w) };
        Ok(())
    })
}
