use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};

use crowdroad::cli::CliError;

/// Result of every fallible call. On anything but `CRD_STATUS_OK` the
/// message is available from `crd_last_error` on the same thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrdStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument, configuration or dataset.
    InvalidArgument = 2,
    /// Factorization or filter failure.
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

pub(crate) struct FfiError {
    pub status: CrdStatus,
    pub message: String,
}

pub(crate) type FfiResult<T> = Result<T, FfiError>;

impl FfiError {
    pub fn new(status: CrdStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn null(what: &str) -> Self {
        Self::new(CrdStatus::NullPointer, format!("`{what}` is null"))
    }
}

impl From<crowdroad::Error> for FfiError {
    fn from(e: crowdroad::Error) -> Self {
        let status = match &e {
            crowdroad::Error::Io(_) => CrdStatus::Io,
            _ if e.is_input_error() => CrdStatus::InvalidArgument,
            _ => CrdStatus::Numerical,
        };
        Self::new(status, e.to_string())
    }
}

impl From<CliError> for FfiError {
    fn from(e: CliError) -> Self {
        let status = match &e {
            CliError::Usage(_) | CliError::Config(_) => CrdStatus::InvalidArgument,
            CliError::Numerical(_) => CrdStatus::Numerical,
            CliError::Output(_) | CliError::Violation(_) => CrdStatus::Io,
        };
        Self::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

pub(crate) fn last_error() -> Option<CString> {
    LAST_ERROR.with(|e| e.borrow().clone())
}

/// Run `f`, translating errors and panics into a status and recording the
/// message for `crd_last_error`.
pub(crate) fn guard<F>(f: F) -> CrdStatus
where
    F: FnOnce() -> FfiResult<()>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrdStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            CrdStatus::Panic
        }
    }
}

/// Borrow a NUL-terminated UTF-8 string.
pub(crate) unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| FfiError::new(CrdStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Borrow `n` doubles; a null pointer is allowed only when `n` is zero.
pub(crate) unsafe fn doubles<'a>(p: *const f64, n: usize, what: &str) -> FfiResult<&'a [f64]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(FfiError::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

pub(crate) unsafe fn doubles_mut<'a>(p: *mut f64, n: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(FfiError::null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

pub(crate) fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| FfiError::new(CrdStatus::InvalidArgument, "string contains NUL"))
}
