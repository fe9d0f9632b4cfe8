//! C interface to the guest VM and the session blob format.
//!
//! Every function returns an [`OopdbgStatus`]. On failure a message for the
//! calling thread is available from [`oopdbg_last_error`]. Handles are
//! opaque, owned by the caller and released with the matching `_free`
//! function. Strings go in as NUL-terminated UTF-8 and come out through a
//! caller buffer: `len_out` always receives the full length (without the
//! terminator) and the buffer gets a truncated, terminated copy.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use oopdbg_core::serial::{self, InertProxies, MaterializeError};
use oopdbg_core::vm::{spawn, ExecutionState, NoFiles, ProgramImage, Status, StepOp, TaskArgs, Value, Vm};
use oopdbg_core::wire::Message;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OopdbgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    LoadFailed = 3,
    SpawnFailed = 4,
    StepFailed = 5,
    SnapshotFailed = 6,
    MalformedBlob = 7,
    CodeVersionMismatch = 8,
    MalformedFrame = 9,
    OutOfRange = 10,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OopdbgExecStatus {
    Running = 0,
    SuspendedOnHalt = 1,
    SuspendedOnStep = 2,
    SuspendedOnException = 3,
    Completed = 4,
    Failed = 5,
}

impl From<Status> for OopdbgExecStatus {
    fn from(s: Status) -> Self {
        match s {
            Status::Running => OopdbgExecStatus::Running,
            Status::SuspendedOnHalt => OopdbgExecStatus::SuspendedOnHalt,
            Status::SuspendedOnStep => OopdbgExecStatus::SuspendedOnStep,
            Status::SuspendedOnException => OopdbgExecStatus::SuspendedOnException,
            Status::Completed => OopdbgExecStatus::Completed,
            Status::Failed => OopdbgExecStatus::Failed,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OopdbgStep {
    Into = 0,
    Over = 1,
    Through = 2,
    Proceed = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OopdbgBlobStats {
    pub object_count: u32,
    pub frame_count: u32,
    pub proxy_count: u32,
    pub byte_size: u64,
}

/// A loaded guest program.
pub struct OopdbgImage(ProgramImage);

/// An execution of a guest program.
pub struct OopdbgExecution(ExecutionState);

/// Serialized session bytes.
pub struct OopdbgBlob(Vec<u8>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("no interior NUL"));
}

fn fail(code: OopdbgStatus, msg: impl Into<String>) -> OopdbgStatus {
    set_error(msg);
    code
}

fn guard(f: impl FnOnce() -> OopdbgStatus) -> OopdbgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == OopdbgStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(OopdbgStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, OopdbgStatus> {
    if p.is_null() {
        return Err(fail(OopdbgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(OopdbgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], OopdbgStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(OopdbgStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, OopdbgStatus> {
    p.as_ref().ok_or_else(|| fail(OopdbgStatus::NullArgument, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut *mut T, v: T) -> OopdbgStatus {
    if out.is_null() {
        return fail(OopdbgStatus::NullArgument, "output pointer is null");
    }
    *out = Box::into_raw(Box::new(v));
    OopdbgStatus::Ok
}

unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize, len_out: *mut usize) -> OopdbgStatus {
    if !len_out.is_null() {
        *len_out = s.len();
    }
    if !buf.is_null() && cap > 0 {
        let n = s.len().min(cap - 1);
        ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
    }
    OopdbgStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message describing the last failure on this thread; empty after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn oopdbg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Compiles guest source into an image.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_image_load(source: *const c_char, out: *mut *mut OopdbgImage) -> OopdbgStatus {
    guard(|| {
        let src = tri!(text(source, "source"));
        match ProgramImage::load(src) {
            Ok(img) => write_out(out, OopdbgImage(img)),
            Err(e) => fail(OopdbgStatus::LoadFailed, e.to_string()),
        }
    })
}

/// Writes the 32-byte code hash of the image to `hash_out`.
///
/// # Safety
/// `image` must come from [`oopdbg_image_load`]; `hash_out` must have room
/// for 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_image_hash(image: *const OopdbgImage, hash_out: *mut u8) -> OopdbgStatus {
    guard(|| {
        let img = tri!(handle(image, "image"));
        if hash_out.is_null() {
            return fail(OopdbgStatus::NullArgument, "hash_out is null");
        }
        ptr::copy_nonoverlapping(img.0.hash().0.as_ptr(), hash_out, 32);
        OopdbgStatus::Ok
    })
}

/// # Safety
/// `image` must be null or come from [`oopdbg_image_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_image_free(image: *mut OopdbgImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Starts an execution sending `selector` to a new instance of `class` with
/// integer arguments. Nothing runs until [`oopdbg_execution_run`].
///
/// # Safety
/// `image` must be valid; `class` and `selector` NUL-terminated; `args`
/// must point to `nargs` integers (or be null when `nargs` is 0).
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_spawn(
    image: *const OopdbgImage,
    class: *const c_char,
    selector: *const c_char,
    args: *const i64,
    nargs: usize,
    out: *mut *mut OopdbgExecution,
) -> OopdbgStatus {
    guard(|| {
        let img = tri!(handle(image, "image"));
        let class = tri!(text(class, "class"));
        let selector = tri!(text(selector, "selector"));
        let args: &[i64] = if nargs == 0 {
            &[]
        } else if args.is_null() {
            return fail(OopdbgStatus::NullArgument, "args is null");
        } else {
            std::slice::from_raw_parts(args, nargs)
        };
        let task = TaskArgs::scalars(args.iter().map(|&a| Value::Int(a)));
        match spawn(&img.0, class, selector, &task) {
            Ok(st) => write_out(out, OopdbgExecution(st)),
            Err(e) => fail(OopdbgStatus::SpawnFailed, e.to_string()),
        }
    })
}

unsafe fn drive(
    image: *const OopdbgImage,
    exec: *mut OopdbgExecution,
    fuel: u64,
    op: StepOp,
    status_out: *mut OopdbgExecStatus,
) -> OopdbgStatus {
    let img = tri!(handle(image, "image"));
    let Some(st) = exec.as_mut() else {
        return fail(OopdbgStatus::NullArgument, "execution is null");
    };
    let mut files = NoFiles::default();
    let mut vm = Vm::new(&img.0, &mut files);
    if fuel > 0 {
        vm = vm.with_fuel(fuel);
    }
    match vm.step(&mut st.0, op) {
        Ok(s) => {
            if !status_out.is_null() {
                *status_out = s.into();
            }
            OopdbgStatus::Ok
        }
        Err(e) => fail(OopdbgStatus::StepFailed, e.to_string()),
    }
}

/// Runs until the execution suspends, completes or fails. A `fuel` of 0
/// means no instruction limit. Guest file primitives are unavailable.
///
/// # Safety
/// Both handles must be valid and the execution must belong to the image.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_run(
    image: *const OopdbgImage,
    exec: *mut OopdbgExecution,
    fuel: u64,
    status_out: *mut OopdbgExecStatus,
) -> OopdbgStatus {
    guard(|| drive(image, exec, fuel, StepOp::Proceed, status_out))
}

/// Applies one debugger step to a suspended execution.
///
/// # Safety
/// As for [`oopdbg_execution_run`].
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_step(
    image: *const OopdbgImage,
    exec: *mut OopdbgExecution,
    step: OopdbgStep,
    status_out: *mut OopdbgExecStatus,
) -> OopdbgStatus {
    let op = match step {
        OopdbgStep::Into => StepOp::Into,
        OopdbgStep::Over => StepOp::Over,
        OopdbgStep::Through => StepOp::Through,
        OopdbgStep::Proceed => StepOp::Proceed,
    };
    guard(|| drive(image, exec, 0, op, status_out))
}

/// Restarts frame `frame` (0 is the top) from its first instruction.
///
/// # Safety
/// As for [`oopdbg_execution_run`].
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_restart(
    image: *const OopdbgImage,
    exec: *mut OopdbgExecution,
    frame: usize,
    status_out: *mut OopdbgExecStatus,
) -> OopdbgStatus {
    guard(|| drive(image, exec, 0, StepOp::Restart(frame), status_out))
}

/// # Safety
/// `exec` must be valid; `status_out` and `depth_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_info(
    exec: *const OopdbgExecution,
    status_out: *mut OopdbgExecStatus,
    depth_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let st = tri!(handle(exec, "execution"));
        if !status_out.is_null() {
            *status_out = st.0.status.into();
        }
        if !depth_out.is_null() {
            *depth_out = st.0.depth();
        }
        OopdbgStatus::Ok
    })
}

/// Method name of frame `frame` (0 is the top), as `Class>>selector`.
///
/// # Safety
/// `exec` must be valid; `buf` must hold `cap` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_frame_method(
    exec: *const OopdbgExecution,
    frame: usize,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let st = tri!(handle(exec, "execution"));
        match oopdbg_core::view::frame_summary(&st.0, frame, false) {
            Ok(f) => copy_str(&f.method, buf, cap, len_out),
            Err(e) => fail(OopdbgStatus::OutOfRange, e),
        }
    })
}

/// The pending exception as `Class: message`, or an empty string.
///
/// # Safety
/// As for [`oopdbg_execution_frame_method`].
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_exception(
    exec: *const OopdbgExecution,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let st = tri!(handle(exec, "execution"));
        let s = st.0.exception.as_ref().map(|e| format!("{}: {}", e.class_name, e.message)).unwrap_or_default();
        copy_str(&s, buf, cap, len_out)
    })
}

/// The result of a completed execution, rendered; empty if none.
///
/// # Safety
/// As for [`oopdbg_execution_frame_method`].
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_result(
    exec: *const OopdbgExecution,
    buf: *mut c_char,
    cap: usize,
    len_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let st = tri!(handle(exec, "execution"));
        let s = st.0.result.as_ref().map(|v| oopdbg_core::vm::interp::render(&st.0, v)).unwrap_or_default();
        copy_str(&s, buf, cap, len_out)
    })
}

/// # Safety
/// `exec` must be null or a handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_execution_free(exec: *mut OopdbgExecution) {
    if !exec.is_null() {
        drop(Box::from_raw(exec));
    }
}

/// Serializes a suspended execution into a session blob. Objects holding
/// external resources make this fail, since no substitution rules apply.
///
/// # Safety
/// Both handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_snapshot(
    image: *const OopdbgImage,
    exec: *const OopdbgExecution,
    session_id: u64,
    monitor_id: u64,
    out: *mut *mut OopdbgBlob,
) -> OopdbgStatus {
    guard(|| {
        let img = tri!(handle(image, "image"));
        let st = tri!(handle(exec, "execution"));
        match serial::snapshot(&st.0, img.0.hash(), session_id, monitor_id, &mut []) {
            Ok(b) => write_out(out, OopdbgBlob(b)),
            Err(e) => fail(OopdbgStatus::SnapshotFailed, e.to_string()),
        }
    })
}

/// Borrows the blob's bytes; valid until the blob is freed.
///
/// # Safety
/// `blob` must be valid; `data_out` and `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_blob_bytes(
    blob: *const OopdbgBlob,
    data_out: *mut *const u8,
    len_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let b = tri!(handle(blob, "blob"));
        if data_out.is_null() || len_out.is_null() {
            return fail(OopdbgStatus::NullArgument, "output pointer is null");
        }
        *data_out = b.0.as_ptr();
        *len_out = b.0.len();
        OopdbgStatus::Ok
    })
}

/// # Safety
/// `blob` must be null or a handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_blob_free(blob: *mut OopdbgBlob) {
    if !blob.is_null() {
        drop(Box::from_raw(blob));
    }
}

fn materialize_status(e: &MaterializeError) -> OopdbgStatus {
    match e {
        MaterializeError::CodeVersionMismatch { .. } => OopdbgStatus::CodeVersionMismatch,
        _ => OopdbgStatus::MalformedBlob,
    }
}

/// Reads counts from a session blob without rebuilding it.
///
/// # Safety
/// `data` must point to `len` readable bytes; `stats_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_blob_stats(
    data: *const u8,
    len: usize,
    stats_out: *mut OopdbgBlobStats,
) -> OopdbgStatus {
    guard(|| {
        let blob = tri!(bytes(data, len, "data"));
        if stats_out.is_null() {
            return fail(OopdbgStatus::NullArgument, "stats_out is null");
        }
        match serial::blob_stats(blob) {
            Ok(s) => {
                *stats_out = OopdbgBlobStats {
                    object_count: s.object_count,
                    frame_count: s.frame_count,
                    proxy_count: s.proxy_count,
                    byte_size: s.byte_size as u64,
                };
                OopdbgStatus::Ok
            }
            Err(e) => fail(materialize_status(&e), e.to_string()),
        }
    })
}

/// Rebuilds an execution from a session blob against `image`, whose hash
/// must match. Proxies become inert objects.
///
/// # Safety
/// `image` must be valid; `data` must point to `len` readable bytes; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_materialize(
    image: *const OopdbgImage,
    data: *const u8,
    len: usize,
    out: *mut *mut OopdbgExecution,
) -> OopdbgStatus {
    guard(|| {
        let img = tri!(handle(image, "image"));
        let blob = tri!(bytes(data, len, "data"));
        match serial::materialize(blob, &img.0, &mut InertProxies) {
            Ok(m) => write_out(out, OopdbgExecution(m.state)),
            Err(e) => fail(materialize_status(&e), e.to_string()),
        }
    })
}

/// Decodes the first wire frame in `data`, reporting its tag and total
/// length. Returns `MalformedFrame` for truncated or invalid input.
///
/// # Safety
/// `data` must point to `len` readable bytes; the outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn oopdbg_wire_peek(
    data: *const u8,
    len: usize,
    tag_out: *mut u8,
    frame_len_out: *mut usize,
) -> OopdbgStatus {
    guard(|| {
        let buf = tri!(bytes(data, len, "data"));
        match Message::decode(buf) {
            Ok((m, used)) => {
                if !tag_out.is_null() {
                    *tag_out = m.tag();
                }
                if !frame_len_out.is_null() {
                    *frame_len_out = used;
                }
                OopdbgStatus::Ok
            }
            Err(e) => fail(OopdbgStatus::MalformedFrame, e.to_string()),
        }
    })
}
