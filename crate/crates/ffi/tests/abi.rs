use std::ffi::{CStr, CString};
use std::ptr;

use flexitrust_ffi::*;

fn run(scenario: &str, protocol: &str, p: FtParams) -> Result<*mut FtRun, FtStatus> {
    let s = CString::new(scenario).unwrap();
    let k = CString::new(protocol).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { ft_run_scenario(s.as_ptr(), k.as_ptr(), &p, &mut h) };
    if st == FtStatus::Ok {
        Ok(h)
    } else {
        assert!(h.is_null());
        Err(st)
    }
}

fn summary(h: *const FtRun) -> FtSummary {
    let mut s = FtSummary::default();
    assert_eq!(unsafe { ft_run_summary(h, &mut s) }, FtStatus::Ok);
    s
}

fn fetch(f: impl Fn(*mut u8, usize, *mut usize) -> FtStatus) -> Vec<u8> {
    let mut need = 0;
    assert_eq!(f(ptr::null_mut(), 0, &mut need), FtStatus::BufferTooSmall);
    let mut buf = vec![0u8; need];
    assert_eq!(f(buf.as_mut_ptr(), buf.len(), &mut need), FtStatus::Ok);
    buf
}

#[test]
fn rollback_breaks_volatile_small_quorum_only() {
    let mut p = ft_params_default();
    p.volatile_components = 1;
    let h = run("rollback_attack", "MinBft", p).unwrap();
    let s = summary(h);
    assert_eq!((s.safety_ok, s.violations), (0, 1));
    let json = fetch(|b, c, n| unsafe { ft_run_verdict_json(h, b, c, n) });
    assert!(String::from_utf8(json).unwrap().contains("\"record\":\"violation\""));
    unsafe { ft_run_free(h) };

    let h = run("rollback_attack", "FlexiBft", p).unwrap();
    assert_eq!(summary(h).safety_ok, 1);
    unsafe { ft_run_free(h) };
}

#[test]
fn trace_round_trips_through_explain() {
    let h = run("honest", "FlexiZZ", ft_params_default()).unwrap();
    let s = summary(h);
    assert_eq!(s.rsm_liveness_ok, 1);
    assert_eq!(s.completed_txns, ft_params_default().txns);
    let trace = fetch(|b, c, n| unsafe { ft_run_trace(h, b, c, n) });
    unsafe { ft_run_free(h) };

    let filter = CString::new("seq=1, kind=Preprepare").unwrap();
    let text = fetch(|b, c, n| unsafe { ft_trace_explain(trace.as_ptr(), trace.len(), filter.as_ptr(), b, c, n) });
    let text = String::from_utf8(text).unwrap();
    assert!(text.starts_with("# protocol=FlexiZZ"));
    assert!(text.contains("Preprepare v=0 seq=1"));
    assert!(!text.contains("seq=2"));

    let bad = CString::new("view=1").unwrap();
    let mut need = 0;
    let st = unsafe { ft_trace_explain(trace.as_ptr(), trace.len(), bad.as_ptr(), ptr::null_mut(), 0, &mut need) };
    assert_eq!(st, FtStatus::BadFilter);
    let msg = unsafe { CStr::from_ptr(ft_last_error()) }.to_str().unwrap();
    assert!(msg.contains("view"));

    let st = unsafe { ft_trace_explain(trace.as_ptr(), 4, ptr::null(), ptr::null_mut(), 0, &mut need) };
    assert_eq!(st, FtStatus::Decode);
}

#[test]
fn bad_arguments_map_to_codes() {
    assert_eq!(run("honest", "Raft", ft_params_default()), Err(FtStatus::UnknownProtocol));
    assert_eq!(run("meteor", "MinBft", ft_params_default()), Err(FtStatus::UnknownScenario));
    let mut p = ft_params_default();
    p.f = 0;
    assert_eq!(run("honest", "MinBft", p), Err(FtStatus::InvalidConfig));
    let k = CString::new("MinBft").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ft_run_scenario(ptr::null(), k.as_ptr(), &p, &mut h) }, FtStatus::NullArgument);
    let bytes = [0xffu8, 0xfe, 0];
    let st = unsafe { ft_run_scenario(bytes.as_ptr().cast(), k.as_ptr(), &p, &mut h) };
    assert_eq!(st, FtStatus::InvalidUtf8);
    assert_eq!(unsafe { ft_run_summary(ptr::null(), ptr::null_mut()) }, FtStatus::NullArgument);
    unsafe { ft_run_free(ptr::null_mut()) };
}

#[test]
fn model_matches_sequential_arithmetic() {
    let k = CString::new("MinBft").unwrap();
    let mut tps = 0.0;
    assert_eq!(unsafe { ft_throughput_model(k.as_ptr(), 100, 1000, 10_000, 64, &mut tps) }, FtStatus::Ok);
    assert!((tps - 10_000.0).abs() < 1e-6, "{tps}");
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flexitrust.h")).unwrap();
    for f in [
        "ft_last_error",
        "ft_params_default",
        "ft_run_scenario",
        "ft_run_free",
        "ft_run_summary",
        "ft_run_verdict_json",
        "ft_run_trace",
        "ft_trace_explain",
        "ft_throughput_model",
        "typedef struct FtRun FtRun;",
        "FT_STATUS_BUFFER_TOO_SMALL = 6",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}
