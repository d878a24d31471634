//! C ABI over `rcmd`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! [`RcmdStatus`]; on failure a message is kept per thread and can be read
//! with [`rcmd_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rcmd::alignment::token_contributions;
use rcmd::embedding::{load_corpus, CorpusFormat, EmbeddingCorpus, TokenMatrix};
use rcmd::evaluation::score_pair;
use rcmd::transport::{transport_pair, PlanMethod};
use rcmd::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    /// Embedding data failed validation: shape, zero rows, non-finite values.
    InvalidData = 5,
    NotFound = 6,
    /// The exact solver refused a problem above its size limit.
    ScaleExceeded = 7,
    /// Solver or numeric failure.
    Numeric = 8,
    InvalidArgument = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Transport method selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcmdMethod {
    Avg = 0,
    Rcmd1 = 1,
    Rcmd2 = 2,
    Rcmd = 3,
    Exact = 4,
}

/// Methods arrive as plain integers so an out-of-range value from C is an
/// error rather than an invalid enum.
fn method_arg(m: u32) -> Result<PlanMethod, Fail> {
    Ok(match m {
        x if x == RcmdMethod::Avg as u32 => PlanMethod::Avg,
        x if x == RcmdMethod::Rcmd1 as u32 => PlanMethod::Rcmd1,
        x if x == RcmdMethod::Rcmd2 as u32 => PlanMethod::Rcmd2,
        x if x == RcmdMethod::Rcmd as u32 => PlanMethod::Rcmd,
        x if x == RcmdMethod::Exact as u32 => PlanMethod::Exact,
        other => {
            return Err(Fail(
                RcmdStatus::InvalidArgument,
                format!("unknown method {other}"),
            ))
        }
    })
}

/// A set of sentences keyed by id.
pub struct RcmdCorpus(EmbeddingCorpus);

/// One sentence: an `L x D` matrix of token vectors.
pub struct RcmdMatrix(TokenMatrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RcmdStatus {
    match e {
        Error::Io { .. } => RcmdStatus::Io,
        Error::Parse { .. } => RcmdStatus::Parse,
        Error::DimensionMismatch { .. }
        | Error::ZeroVector { .. }
        | Error::NonFinite { .. }
        | Error::InvalidMatrix { .. }
        | Error::DuplicateId(_)
        | Error::DegeneratePooledEmbedding { .. }
        | Error::ShapeMismatch { .. }
        | Error::LengthMismatch { .. } => RcmdStatus::InvalidData,
        Error::MissingSentence(_) => RcmdStatus::NotFound,
        Error::ScaleExceeded { .. } => RcmdStatus::ScaleExceeded,
        Error::CycleSuspected(_) | Error::NonFiniteLoss { .. } | Error::InvalidProblem(_) => {
            RcmdStatus::Numeric
        }
        _ => RcmdStatus::InvalidArgument,
    }
}

struct Fail(RcmdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, records any failure, and turns panics into [`RcmdStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RcmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RcmdStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside rcmd".into());
            RcmdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RcmdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            RcmdStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failure on this thread, or null if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rcmd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rcmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a corpus; `.jsonl`/`.json` paths are read as JSON lines, anything
/// else as the binary format.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rcmd_corpus_load(
    path: *const c_char,
    out: *mut *mut RcmdCorpus,
) -> RcmdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let corpus = load_corpus(path, CorpusFormat::from_path(path))?;
        *out = Box::into_raw(Box::new(RcmdCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from [`rcmd_corpus_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rcmd_corpus_free(corpus: *mut RcmdCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of sentences, or 0 for a null handle.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rcmd_corpus_len(corpus: *const RcmdCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// Copy sentence `id` out of a corpus into a new matrix handle.
///
/// # Safety
/// `corpus` must be a live handle, `id` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rcmd_corpus_get(
    corpus: *const RcmdCorpus,
    id: *const c_char,
    out: *mut *mut RcmdMatrix,
) -> RcmdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let corpus = ref_arg(corpus, "corpus")?;
        let m = corpus.0.require(str_arg(id, "id")?)?.clone();
        *out = Box::into_raw(Box::new(RcmdMatrix(m)));
        Ok(())
    })
}

/// Build a matrix from `len * dim` row-major values.
///
/// # Safety
/// `id` must be NUL-terminated; `data` must point to `len * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rcmd_matrix_new(
    id: *const c_char,
    data: *const f64,
    len: usize,
    dim: usize,
    out: *mut *mut RcmdMatrix,
) -> RcmdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let id = str_arg(id, "id")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let n = len
            .checked_mul(dim)
            .ok_or_else(|| Fail(RcmdStatus::InvalidArgument, "len * dim overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let tokens = (0..len).map(|k| format!("t{k}")).collect();
        let m = TokenMatrix::from_flat(id, tokens, values, dim)?;
        *out = Box::into_raw(Box::new(RcmdMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rcmd_matrix_free(m: *mut RcmdMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Token count, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rcmd_matrix_len(m: *const RcmdMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rcmd_matrix_dim(m: *const RcmdMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.dim())
}

/// Sentence similarity; `method` is an [`RcmdMethod`] value. For
/// [`RcmdMethod::Exact`] this is `1 - d_EMD`.
///
/// # Safety
/// `a` and `b` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rcmd_similarity(
    a: *const RcmdMatrix,
    b: *const RcmdMatrix,
    method: u32,
    out: *mut f64,
) -> RcmdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = score_pair(
            &ref_arg(a, "a")?.0,
            &ref_arg(b, "b")?.0,
            method_arg(method)?,
        )?;
        Ok(())
    })
}

/// Transport distance; `method` is an [`RcmdMethod`] value.
///
/// # Safety
/// `a` and `b` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn rcmd_distance(
    a: *const RcmdMatrix,
    b: *const RcmdMatrix,
    method: u32,
    out: *mut f64,
) -> RcmdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = transport_pair(
            &ref_arg(a, "a")?.0,
            &ref_arg(b, "b")?.0,
            method_arg(method)?,
        )?
        .distance
        .value;
        Ok(())
    })
}

/// Write the `L1 x L2` token contribution matrix row-major into `buf`.
/// `written` receives `L1 * L2`; when `cap` is smaller nothing is written and
/// [`RcmdStatus::BufferTooSmall`] is returned, so callers can size a buffer.
///
/// # Safety
/// `a`, `b` must be live handles, `buf` must hold `cap` doubles (may be null
/// when `cap` is 0), `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rcmd_contributions(
    a: *const RcmdMatrix,
    b: *const RcmdMatrix,
    method: u32,
    buf: *mut f64,
    cap: usize,
    written: *mut usize,
) -> RcmdStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        let (a, b) = (&ref_arg(a, "a")?.0, &ref_arg(b, "b")?.0);
        *written = a.len() * b.len();
        if cap < *written {
            return Err(Fail(
                RcmdStatus::BufferTooSmall,
                format!("need {} values, buffer holds {cap}", *written),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let t = transport_pair(a, b, method_arg(method)?)?;
        let c = token_contributions(&t.plan, &t.cost)?;
        std::slice::from_raw_parts_mut(buf, *written).copy_from_slice(c.matrix().as_slice());
        Ok(())
    })
}
