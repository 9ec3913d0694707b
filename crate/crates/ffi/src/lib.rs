//! C ABI over the sluice engine: compile pipelines, run them locally, and
//! run jobs on the simulated runtime.
//!
//! Every fallible call returns a [`SluiceStatus`]; on failure the message is
//! available from [`sluice_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use sluice::catalog;
use sluice::config::RunConfig;
use sluice::format::FormatRegistry;
use sluice::kernels::KernelRegistry;
use sluice::orchestrator::local::run_local;
use sluice::orchestrator::{JobRequest, JobState, OrchestratorError, Runtime};
use sluice::pipeline::{canonical_json, compile, spec_from_json, CompiledPipeline, PipelineError};
use sluice::store::ObjectStore;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SluiceStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidPipeline = 3,
    InvalidConfig = 4,
    Execution = 5,
    JobFailed = 6,
    NotFound = 7,
    Panic = 8,
}

/// A compiled pipeline.
pub struct SluicePipeline {
    inner: CompiledPipeline,
    json: CString,
}

/// A simulated runtime with its own object store.
pub struct SluiceRuntime {
    inner: Runtime,
}

/// Bytes owned by the library; release with [`sluice_buffer_free`].
#[repr(C)]
pub struct SluiceBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SluiceStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure(SluiceStatus::InvalidPipeline, e.to_string())
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Pipeline(p) => p.into(),
            other => Failure(SluiceStatus::Execution, other.to_string()),
        }
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SluiceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SluiceStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SluiceStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SluiceStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SluiceStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, name: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(SluiceStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(SluiceStatus::NullArgument, format!("{name} is null")))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(SluiceStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_buffer(bytes: Vec<u8>) -> SluiceBuffer {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    SluiceBuffer {
        data: Box::into_raw(boxed) as *mut u8,
        len,
    }
}

fn into_cstring(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(SluiceStatus::Execution, "string contains NUL".into()))
}

fn new_pipeline(inner: CompiledPipeline, json: Vec<u8>) -> Result<*mut SluicePipeline, Failure> {
    let json = CString::new(json).map_err(|_| Failure(SluiceStatus::InvalidPipeline, "NUL in pipeline".into()))?;
    Ok(Box::into_raw(Box::new(SluicePipeline { inner, json })))
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sluice_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Compiles a pipeline document (JSON, NUL-terminated).
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_pipeline_compile(json: *const c_char, out: *mut *mut SluicePipeline) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let src = str_arg(json, "json")?;
        let (inner, bytes) = compile(&spec_from_json(src.as_bytes())?)?;
        *out = new_pipeline(inner, bytes)?;
        Ok(())
    })
}

/// Loads one of the shipped pipelines by name, e.g. "compression".
///
/// # Safety
/// `name` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_pipeline_from_catalog(
    name: *const c_char,
    out: *mut *mut SluicePipeline,
) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let name = str_arg(name, "name")?;
        let inner = catalog::compiled(name).map_err(|e| Failure(SluiceStatus::NotFound, e.to_string()))?;
        let bytes = canonical_json(&inner.pipeline);
        *out = new_pipeline(inner, bytes)?;
        Ok(())
    })
}

/// Canonical JSON of the compiled pipeline, owned by the handle.
///
/// # Safety
/// `pipeline` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sluice_pipeline_json(pipeline: *const SluicePipeline) -> *const c_char {
    pipeline.as_ref().map_or(ptr::null(), |p| p.json.as_ptr())
}

/// Number of stages, or 0 for a null handle.
///
/// # Safety
/// `pipeline` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sluice_pipeline_stage_count(pipeline: *const SluicePipeline) -> usize {
    pipeline.as_ref().map_or(0, |p| p.inner.stage_count())
}

/// # Safety
/// `pipeline` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sluice_pipeline_free(pipeline: *mut SluicePipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs the pipeline in-process over `input` and returns its final outputs
/// concatenated.
///
/// # Safety
/// `input` must point to `len` readable bytes (or be null with `len` 0) and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_run_local(
    pipeline: *const SluicePipeline,
    input: *const u8,
    len: usize,
    out: *mut SluiceBuffer,
) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = pipeline
            .as_ref()
            .ok_or_else(|| Failure(SluiceStatus::NullArgument, "pipeline is null".into()))?;
        let data = bytes_arg(input, len, "input")?.to_vec();
        let run = run_local(
            &p.inner,
            data,
            &[],
            &FormatRegistry::default(),
            &KernelRegistry::default(),
        )?;
        *out = into_buffer(run.joined());
        Ok(())
    })
}

/// # Safety
/// `buf` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sluice_buffer_free(buf: SluiceBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sluice_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a runtime with an in-memory store. `config_json` is a run
/// configuration document or null for defaults.
///
/// # Safety
/// `config_json` must be a valid C string or null; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_new(config_json: *const c_char, out: *mut *mut SluiceRuntime) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            let src = str_arg(config_json, "config_json")?;
            let cfg: RunConfig =
                serde_json::from_str(src).map_err(|e| Failure(SluiceStatus::InvalidConfig, e.to_string()))?;
            cfg.validate()
                .map_err(|e| Failure(SluiceStatus::InvalidConfig, e.to_string()))?;
            cfg
        };
        let inner = Runtime::new(cfg.runtime(), Arc::new(ObjectStore::memory()))?;
        *out = Box::into_raw(Box::new(SluiceRuntime { inner }));
        Ok(())
    })
}

/// # Safety
/// `rt` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_free(rt: *mut SluiceRuntime) {
    if !rt.is_null() {
        drop(Box::from_raw(rt));
    }
}

/// Stores an object at the current virtual time.
///
/// # Safety
/// `rt` must be a live handle, `key` a valid C string and `data` point to
/// `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_put(
    rt: *mut SluiceRuntime,
    key: *const c_char,
    data: *const u8,
    len: usize,
) -> SluiceStatus {
    guard(|| {
        let rt = handle(rt, "rt")?;
        let key = str_arg(key, "key")?;
        let data = bytes_arg(data, len, "data")?.to_vec();
        let now = rt.inner.now();
        rt.inner.store().put(key, data, now).map_err(OrchestratorError::from)?;
        Ok(())
    })
}

/// Submits a job over the object at `input_key`. The job id is returned in
/// `job_id`; free it with [`sluice_string_free`].
///
/// # Safety
/// Handles must be live, `input_key` a valid C string and `job_id` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_submit(
    rt: *mut SluiceRuntime,
    pipeline: *const SluicePipeline,
    input_key: *const c_char,
    job_id: *mut *mut c_char,
) -> SluiceStatus {
    guard(|| {
        out_ptr(job_id, "job_id")?;
        let rt = handle(rt, "rt")?;
        let p = pipeline
            .as_ref()
            .ok_or_else(|| Failure(SluiceStatus::NullArgument, "pipeline is null".into()))?;
        let key = str_arg(input_key, "input_key")?;
        let id = rt.inner.submit(JobRequest::new(p.inner.clone(), key))?;
        *job_id = into_cstring(id)?;
        Ok(())
    })
}

/// Runs the simulation until no work remains.
///
/// # Safety
/// `rt` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_run(rt: *mut SluiceRuntime) -> SluiceStatus {
    guard(|| {
        handle(rt, "rt")?.inner.run()?;
        Ok(())
    })
}

/// Current virtual time in milliseconds, or 0 for a null handle.
///
/// # Safety
/// `rt` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sluice_runtime_now_ms(rt: *const SluiceRuntime) -> u64 {
    rt.as_ref().map_or(0, |r| r.inner.now())
}

/// Job summary as canonical JSON; free with [`sluice_string_free`].
///
/// # Safety
/// `rt` must be a live handle, `job` a valid C string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_job_summary_json(
    rt: *const SluiceRuntime,
    job: *const c_char,
    out: *mut *mut c_char,
) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let rt = rt
            .as_ref()
            .ok_or_else(|| Failure(SluiceStatus::NullArgument, "rt is null".into()))?;
        let job = str_arg(job, "job")?;
        let summary = rt
            .inner
            .summary(job)
            .ok_or_else(|| Failure(SluiceStatus::NotFound, format!("unknown job {job}")))?;
        let json = String::from_utf8(canonical_json(&summary)).expect("serde_json emits UTF-8");
        *out = into_cstring(json)?;
        Ok(())
    })
}

/// Final outputs of a finished job, concatenated in output order. Returns
/// `JobFailed` if the job did not finish.
///
/// # Safety
/// `rt` must be a live handle, `job` a valid C string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sluice_job_output(
    rt: *const SluiceRuntime,
    job: *const c_char,
    out: *mut SluiceBuffer,
) -> SluiceStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let rt = rt
            .as_ref()
            .ok_or_else(|| Failure(SluiceStatus::NullArgument, "rt is null".into()))?;
        let job = str_arg(job, "job")?;
        match rt.inner.job_state(job) {
            None => return Err(Failure(SluiceStatus::NotFound, format!("unknown job {job}"))),
            Some(JobState::Done) => {}
            Some(state) => return Err(Failure(SluiceStatus::JobFailed, format!("job {job} is {state:?}"))),
        }
        let mut bytes = Vec::new();
        for key in rt.inner.final_outputs(job) {
            let obj = rt.inner.store().get(&key).map_err(OrchestratorError::from)?;
            bytes.extend_from_slice(&obj);
        }
        *out = into_buffer(bytes);
        Ok(())
    })
}
