//! C ABI over the probe runtime and the deterministic text helpers.
//!
//! Every fallible function returns an [`HpStatus`]. On failure a message is
//! kept per thread and can be read with [`hp_last_error_message`] until the
//! next failing call on the same thread. Probe handles are opaque; create
//! them with [`hp_probe_load`] or [`hp_probe_from_bytes`] and release them
//! with [`hp_probe_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hallu_probe::labeler::{map_booleans, JudgeVerdict, Label};
use hallu_probe::probe::{checkpoint, Probe, ProbeError};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadCheckpoint = 4,
    DimensionMismatch = 5,
    BufferTooSmall = 6,
    InvalidArgument = 7,
    Panic = 99,
}

/// Sentence label produced by [`hp_map_booleans`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpLabel {
    Grounded = 0,
    Hallucinated = 1,
    Invalid = 2,
}

impl From<Label> for HpLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Grounded => HpLabel::Grounded,
            Label::Hallucinated => HpLabel::Hallucinated,
            Label::Invalid => HpLabel::Invalid,
        }
    }
}

/// Byte range `[start, end)` of one sentence in the UTF-8 input.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HpSpan {
    pub start: usize,
    pub end: usize,
}

/// A loaded probe. Opaque to C callers.
pub struct HpProbe {
    inner: Probe,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(HpStatus, String);

impl Failure {
    fn null(name: &str) -> Self {
        Failure(HpStatus::NullPointer, format!("{name} is null"))
    }
}

impl From<ProbeError> for Failure {
    fn from(e: ProbeError) -> Self {
        let status = match e {
            ProbeError::Io(_) => HpStatus::Io,
            ProbeError::Checkpoint(_) => HpStatus::BadCheckpoint,
            ProbeError::Dimension(_) => HpStatus::DimensionMismatch,
            _ => HpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HpStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            HpStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(HpStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn store<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(name));
    }
    unsafe { out.write(value) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hp_probe_load(path: *const c_char, out: *mut *mut HpProbe) -> HpStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let inner = checkpoint::load(Path::new(path))?;
        store(out, Box::into_raw(Box::new(HpProbe { inner })), "out")
    })
}

/// Decodes a checkpoint held in memory. On success `*out` owns a new handle.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_probe_from_bytes(bytes: *const u8, len: usize, out: *mut *mut HpProbe) -> HpStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(Failure::null("bytes"));
        }
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let inner = checkpoint::decode(std::slice::from_raw_parts(bytes, len))?;
        store(out, Box::into_raw(Box::new(HpProbe { inner })), "out")
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `probe` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hp_probe_free(probe: *mut HpProbe) {
    if !probe.is_null() {
        drop(Box::from_raw(probe));
    }
}

/// Number of features the probe expects per row, or 0 for a null handle.
///
/// # Safety
/// `probe` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_probe_input_size(probe: *const HpProbe) -> usize {
    probe.as_ref().map_or(0, |p| p.inner.net.input_size())
}

/// Scores `rows` row-major feature vectors of width `dim` and writes one
/// hallucination probability per row to `out`.
///
/// # Safety
/// `features` must hold `rows * dim` floats and `out` room for `rows` floats.
#[no_mangle]
pub unsafe extern "C" fn hp_probe_predict(
    probe: *const HpProbe,
    features: *const f32,
    rows: usize,
    dim: usize,
    out: *mut f32,
) -> HpStatus {
    guard(|| {
        let probe = probe.as_ref().ok_or_else(|| Failure::null("probe"))?;
        if features.is_null() {
            return Err(Failure::null("features"));
        }
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let expected = probe.inner.net.input_size();
        if dim != expected {
            return Err(Failure(HpStatus::DimensionMismatch, format!("probe expects {expected} features, got {dim}")));
        }
        let len = rows.checked_mul(dim).ok_or_else(|| Failure(HpStatus::InvalidArgument, "rows * dim overflows".into()))?;
        if rows == 0 {
            return Ok(());
        }
        let x = ndarray::Array2::from_shape_vec((rows, dim), std::slice::from_raw_parts(features, len).to_vec())
            .map_err(|e| Failure(HpStatus::InvalidArgument, e.to_string()))?;
        let p = probe.inner.predict(&x)?;
        std::slice::from_raw_parts_mut(out, rows).copy_from_slice(p.as_slice().expect("contiguous output"));
        Ok(())
    })
}

/// Maps a judge verdict to a label for an answerable or unanswerable prompt.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_map_booleans(
    answerable: bool,
    conflicting: bool,
    grounded: bool,
    has_factual_information: bool,
    no_clear_answer: bool,
    out: *mut HpLabel,
) -> HpStatus {
    guard(|| {
        let verdict = JudgeVerdict::new(conflicting, grounded, has_factual_information, no_clear_answer);
        store(out, map_booleans(answerable, &verdict).into(), "out")
    })
}

/// Sets `*out` to whether `quote` is a non-empty exact substring of
/// `sentence`.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_verify_quote(sentence: *const c_char, quote: *const c_char, out: *mut bool) -> HpStatus {
    guard(|| {
        let sentence = text(sentence, "sentence")?;
        let quote = text(quote, "quote")?;
        store(out, hallu_probe::qa::verify_quote(sentence, quote), "out")
    })
}

/// Segments `text` into sentences. `*count` always receives the number of
/// sentences found; spans are written only when `capacity` is large enough,
/// otherwise `HP_STATUS_BUFFER_TOO_SMALL` is returned. Pass a null `spans`
/// with zero capacity to query the count.
///
/// # Safety
/// `text` must be NUL-terminated, `spans` must have room for `capacity`
/// entries and `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_split_sentences(
    text_in: *const c_char,
    spans: *mut HpSpan,
    capacity: usize,
    count: *mut usize,
) -> HpStatus {
    guard(|| {
        let s = text(text_in, "text")?;
        let found = hallu_probe::segment::split_sentences(s);
        store(count, found.len(), "count")?;
        if found.len() > capacity {
            return Err(Failure(HpStatus::BufferTooSmall, format!("{} sentences, capacity {capacity}", found.len())));
        }
        if found.is_empty() {
            return Ok(());
        }
        if spans.is_null() {
            return Err(Failure::null("spans"));
        }
        let dst = std::slice::from_raw_parts_mut(spans, found.len());
        for (d, f) in dst.iter_mut().zip(&found) {
            *d = HpSpan { start: f.start, end: f.end };
        }
        Ok(())
    })
}
