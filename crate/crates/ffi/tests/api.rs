use std::ffi::{CStr, CString};
use std::ptr;

use sluice_ffi::*;

const SORT: &str = r#"{"name": "s", "table": "store://t", "log": "store://l", "timeout": 60,
    "input": {"format": "new_line"}, "stages": [{"kind": "sort", "identifier": "0"}]}"#;

fn compiled(doc: &str) -> *mut SluicePipeline {
    let json = CString::new(doc).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_pipeline_compile(json.as_ptr(), &mut p) },
        SluiceStatus::Ok
    );
    assert!(!p.is_null());
    p
}

fn last_error() -> String {
    let e = sluice_last_error();
    assert!(!e.is_null());
    unsafe { CStr::from_ptr(e) }.to_string_lossy().into_owned()
}

fn take(buf: SluiceBuffer) -> Vec<u8> {
    let v = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
    unsafe { sluice_buffer_free(buf) };
    v
}

#[test]
fn compile_and_run_local() {
    let p = compiled(SORT);
    assert_eq!(unsafe { sluice_pipeline_stage_count(p) }, 1);
    let json = unsafe { CStr::from_ptr(sluice_pipeline_json(p)) }.to_str().unwrap();
    // the canonical document compiles to itself
    let again = compiled(json);
    assert_eq!(
        unsafe { CStr::from_ptr(sluice_pipeline_json(again)) }.to_str().unwrap(),
        json
    );

    let input = b"30\n10\n20\n";
    let mut out = SluiceBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(
        unsafe { sluice_run_local(p, input.as_ptr(), input.len(), &mut out) },
        SluiceStatus::Ok
    );
    assert_eq!(take(out), b"10\n20\n30\n");
    assert!(sluice_last_error().is_null());
    unsafe {
        sluice_pipeline_free(p);
        sluice_pipeline_free(again);
    }
}

#[test]
fn invalid_pipeline_sets_error() {
    let doc = CString::new(
        r#"{"name": "e", "table": "store://t", "log": "store://l", "timeout": 60,
        "input": {"format": "new_line"}, "stages": []}"#,
    )
    .unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_pipeline_compile(doc.as_ptr(), &mut p) },
        SluiceStatus::InvalidPipeline
    );
    assert!(p.is_null());
    assert!(last_error().contains("stage"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_pipeline_compile(ptr::null(), &mut p) },
        SluiceStatus::NullArgument
    );
    assert_eq!(last_error(), "json is null");
    assert_eq!(
        unsafe { sluice_runtime_run(ptr::null_mut()) },
        SluiceStatus::NullArgument
    );
    assert_eq!(unsafe { sluice_pipeline_stage_count(ptr::null()) }, 0);
    unsafe {
        sluice_pipeline_free(ptr::null_mut());
        sluice_runtime_free(ptr::null_mut());
        sluice_string_free(ptr::null_mut());
    }
}

#[test]
fn unknown_catalog_name_is_not_found() {
    let name = CString::new("nope").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_pipeline_from_catalog(name.as_ptr(), &mut p) },
        SluiceStatus::NotFound
    );
}

#[test]
fn simulated_job_matches_local_run() {
    let name = CString::new("compression").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_pipeline_from_catalog(name.as_ptr(), &mut p) },
        SluiceStatus::Ok
    );
    let data = sluice::catalog::sample("compression", 3, 300_000).unwrap().input;

    let mut local = SluiceBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(
        unsafe { sluice_run_local(p, data.as_ptr(), data.len(), &mut local) },
        SluiceStatus::Ok
    );
    let local = take(local);

    let cfg = CString::new(r#"{"seed": 4}"#).unwrap();
    let mut rt = ptr::null_mut();
    assert_eq!(unsafe { sluice_runtime_new(cfg.as_ptr(), &mut rt) }, SluiceStatus::Ok);
    let key = CString::new("in/data").unwrap();
    assert_eq!(
        unsafe { sluice_runtime_put(rt, key.as_ptr(), data.as_ptr(), data.len()) },
        SluiceStatus::Ok
    );
    let mut job = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_runtime_submit(rt, p, key.as_ptr(), &mut job) },
        SluiceStatus::Ok
    );
    assert_eq!(unsafe { sluice_runtime_run(rt) }, SluiceStatus::Ok);
    assert!(unsafe { sluice_runtime_now_ms(rt) } > 0);

    let mut summary = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_job_summary_json(rt, job, &mut summary) },
        SluiceStatus::Ok
    );
    let s: serde_json::Value = serde_json::from_slice(unsafe { CStr::from_ptr(summary) }.to_bytes()).unwrap();
    assert_eq!(s["state"], "done");

    let mut out = SluiceBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(unsafe { sluice_job_output(rt, job, &mut out) }, SluiceStatus::Ok);
    assert_eq!(take(out), local);

    let missing = CString::new("job-9999").unwrap();
    let mut out = SluiceBuffer {
        data: ptr::null_mut(),
        len: 0,
    };
    assert_eq!(
        unsafe { sluice_job_output(rt, missing.as_ptr(), &mut out) },
        SluiceStatus::NotFound
    );
    unsafe {
        sluice_string_free(summary);
        sluice_string_free(job);
        sluice_runtime_free(rt);
        sluice_pipeline_free(p);
    }
}

#[test]
fn bad_config_is_rejected() {
    let cfg = CString::new(r#"{"cluster": {"failure_prob": 2.0}}"#).unwrap();
    let mut rt = ptr::null_mut();
    assert_eq!(
        unsafe { sluice_runtime_new(cfg.as_ptr(), &mut rt) },
        SluiceStatus::InvalidConfig
    );
    assert!(rt.is_null());
}
