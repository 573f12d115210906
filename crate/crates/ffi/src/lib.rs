//! C interface to a trained compsem model.
//!
//! Handles are opaque. Every fallible call returns a [`CompsemStatus`]; on
//! failure the message is available from [`compsem_last_error`] on the same
//! thread until the next call. Strings handed out by the library must be
//! released with [`compsem_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use compsem::chart::ChartError;
use compsem::lexicon::{LexiconError, ModelParams};
use compsem::query::{self, QueryError};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompsemStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidCheckpoint = 4,
    InvalidGraph = 5,
    InvalidQuestion = 6,
    Internal = 7,
}

/// A loaded model. Read-only once created, so one handle may serve several
/// threads at once.
pub struct CompsemModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(CompsemStatus, String);

impl From<QueryError> for Fail {
    fn from(e: QueryError) -> Self {
        let code = match &e {
            QueryError::Graph(_) => CompsemStatus::InvalidGraph,
            QueryError::EmptyQuestion => CompsemStatus::InvalidQuestion,
            QueryError::Chart(ChartError::EmptyQuestion | ChartError::Unanswerable) => CompsemStatus::InvalidQuestion,
            QueryError::Chart(ChartError::Lexicon(
                LexiconError::UnseenAttribute { .. } | LexiconError::MissingAttribute(..),
            )) => CompsemStatus::InvalidGraph,
            QueryError::Chart(_) => CompsemStatus::Internal,
        };
        Fail(code, e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CompsemStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CompsemStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            CompsemStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(CompsemStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CompsemStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(CompsemStatus::Internal, "output contains a NUL byte".into()))?;
    // SAFETY: caller checked `out` is non-null.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn compsem_model_load(path: *const c_char, out: *mut *mut CompsemModel) -> CompsemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(CompsemStatus::NullArgument, "`out` is null".into()));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let params = ModelParams::load(Path::new(path)).map_err(|e| {
            let code = match e {
                LexiconError::Io { .. } => CompsemStatus::Io,
                _ => CompsemStatus::InvalidCheckpoint,
            };
            Fail(code, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(CompsemModel { params }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`compsem_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn compsem_model_free(model: *mut CompsemModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn run_query(
    model: *const CompsemModel,
    kg_json: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
    f: impl FnOnce(&ModelParams, &compsem::kg::KnowledgeGraph, &str) -> Result<String, QueryError>,
) -> CompsemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(CompsemStatus::NullArgument, "`out` is null".into()));
        }
        *out = ptr::null_mut();
        let Some(model) = model.as_ref() else {
            return Err(Fail(CompsemStatus::NullArgument, "`model` is null".into()));
        };
        let kg_text = str_arg(kg_json, "kg_json")?;
        let question = str_arg(question, "question")?;
        let kg = query::load_graph(&model.params, kg_text)?;
        let s = f(&model.params, &kg, question)?;
        out_string(out, s)
    })
}

/// Answers `question` against the graph in `kg_json`. `*out` receives a JSON
/// object with `answer_type`, `p_type`, `answer` and `grounding`.
///
/// # Safety
/// `model` must be a live handle; strings NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn compsem_answer(
    model: *const CompsemModel,
    kg_json: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> CompsemStatus {
    run_query(model, kg_json, question, out, |p, kg, q| {
        Ok(query::answer_json(p, kg, q)?.to_string())
    })
}

/// Highest-scoring derivation as JSON `{"tree": ..., "ascii": ...}`.
///
/// # Safety
/// Same contract as [`compsem_answer`].
#[no_mangle]
pub unsafe extern "C" fn compsem_parse(
    model: *const CompsemModel,
    kg_json: *const c_char,
    question: *const c_char,
    out: *mut *mut c_char,
) -> CompsemStatus {
    run_query(model, kg_json, question, out, |p, kg, q| {
        let (tree, ascii) = query::parse_json(p, kg, q)?;
        Ok(serde_json::json!({ "tree": tree, "ascii": ascii }).to_string())
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn compsem_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Owned by the
/// library; valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn compsem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Short description of a status code. Static storage.
#[no_mangle]
pub extern "C" fn compsem_status_str(status: CompsemStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CompsemStatus::Ok => c"ok",
        CompsemStatus::NullArgument => c"null argument",
        CompsemStatus::InvalidUtf8 => c"invalid UTF-8",
        CompsemStatus::Io => c"i/o error",
        CompsemStatus::InvalidCheckpoint => c"invalid checkpoint",
        CompsemStatus::InvalidGraph => c"invalid graph",
        CompsemStatus::InvalidQuestion => c"invalid question",
        CompsemStatus::Internal => c"internal error",
    };
    s.as_ptr()
}
