//! C ABI over the simulator: run a named scenario, read its verdict, fetch
//! the binary trace and render it.
//!
//! Every function returns an `FtStatus`; results come back through out
//! pointers. Handles are opaque and owned by the caller until passed to
//! `ft_run_free`. Byte outputs use the two-call pattern: pass a null buffer
//! to learn the size, then call again with room for it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flexitrust::explain::{explain_trace, TraceFilter};
use flexitrust::protocol::ProtocolKind;
use flexitrust::scenarios::{run_named_scenario, ScenarioName, ScenarioParams, Verdict};
use flexitrust::sim::throughput_model;
use flexitrust::trace::Trace;
use flexitrust::trusted::Persistence;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    UnknownProtocol = 3,
    UnknownScenario = 4,
    InvalidConfig = 5,
    BufferTooSmall = 6,
    Decode = 7,
    BadFilter = 8,
    Panic = 9,
}

/// Knobs for one scenario run. Start from `ft_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FtParams {
    pub f: u32,
    pub seed: u64,
    /// Nonzero for components that forget on rollback.
    pub volatile_components: u8,
    pub clients: u32,
    pub txns: u64,
    pub batch_size: u32,
    pub access_latency_us: u64,
    pub one_way_us: u64,
    pub jitter_us: u64,
    pub pipeline_width: u32,
}

impl From<&FtParams> for ScenarioParams {
    fn from(p: &FtParams) -> Self {
        ScenarioParams {
            f: p.f,
            seed: p.seed,
            persistence: if p.volatile_components != 0 { Persistence::Volatile } else { Persistence::Persistent },
            clients: p.clients,
            txns: p.txns,
            batch_size: p.batch_size,
            access_latency_us: p.access_latency_us,
            one_way_us: p.one_way_us,
            jitter_us: p.jitter_us,
            pipeline_width: p.pipeline_width,
            ..ScenarioParams::default()
        }
    }
}

/// A finished run. Opaque to C.
pub struct FtRun {
    trace: Trace,
    verdict: Verdict,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn guard(f: impl FnOnce() -> Result<(), (FtStatus, String)>) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FtStatus::Ok,
        Ok(Err((st, msg))) => {
            set_error(msg);
            st
        }
        Err(_) => {
            set_error("internal panic");
            FtStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FtStatus, String)> {
    if p.is_null() {
        return Err((FtStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (FtStatus::InvalidUtf8, format!("{what} is not utf-8")))
}

unsafe fn write_out(data: &[u8], buf: *mut u8, cap: usize, needed: *mut usize) -> Result<(), (FtStatus, String)> {
    if needed.is_null() {
        return Err((FtStatus::NullArgument, "needed is null".into()));
    }
    *needed = data.len();
    if buf.is_null() || cap < data.len() {
        return Err((FtStatus::BufferTooSmall, format!("need {} bytes", data.len())));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

/// Message for the last failing call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ft_params_default() -> FtParams {
    let d = ScenarioParams::default();
    FtParams {
        f: d.f,
        seed: d.seed,
        volatile_components: 0,
        clients: d.clients,
        txns: d.txns,
        batch_size: d.batch_size,
        access_latency_us: d.access_latency_us,
        one_way_us: d.one_way_us,
        jitter_us: d.jitter_us,
        pipeline_width: d.pipeline_width,
    }
}

/// Runs `scenario` (for example "rollback_attack") on `protocol` (for
/// example "MinBft") and stores the handle in `*out`.
///
/// # Safety
/// String arguments must be NUL-terminated; `params` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ft_run_scenario(
    scenario: *const c_char,
    protocol: *const c_char,
    params: *const FtParams,
    out: *mut *mut FtRun,
) -> FtStatus {
    guard(|| {
        if params.is_null() || out.is_null() {
            return Err((FtStatus::NullArgument, "params or out is null".into()));
        }
        *out = ptr::null_mut();
        let name: ScenarioName = str_arg(scenario, "scenario")?.parse().map_err(|e| (FtStatus::UnknownScenario, e))?;
        let kind: ProtocolKind = str_arg(protocol, "protocol")?.parse().map_err(|e| (FtStatus::UnknownProtocol, e))?;
        let p = ScenarioParams::from(&*params);
        let (trace, verdict) =
            run_named_scenario(name, kind, &p).map_err(|e| (FtStatus::InvalidConfig, e.to_string()))?;
        *out = Box::into_raw(Box::new(FtRun { trace, verdict }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from `ft_run_scenario` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_run_free(run: *mut FtRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Summary flags and counters of a finished run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct FtSummary {
    pub safety_ok: u8,
    pub rsm_liveness_ok: u8,
    pub consensus_liveness_ok: u8,
    pub aborted: u8,
    pub violations: u32,
    pub completed_txns: u64,
    pub view_changes: u64,
    pub tps: f64,
    pub mean_latency_us: f64,
}

/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_run_summary(run: *const FtRun, out: *mut FtSummary) -> FtStatus {
    guard(|| {
        let (Some(r), false) = (run.as_ref(), out.is_null()) else {
            return Err((FtStatus::NullArgument, "run or out is null".into()));
        };
        let v = &r.verdict;
        *out = FtSummary {
            safety_ok: v.safety_ok as u8,
            rsm_liveness_ok: v.rsm_liveness_ok as u8,
            consensus_liveness_ok: v.consensus_liveness_ok as u8,
            aborted: v.aborted.is_some() as u8,
            violations: v.violations.len() as u32,
            completed_txns: v.stats.completed_txns,
            view_changes: v.stats.view_changes,
            tps: v.stats.tps,
            mean_latency_us: v.stats.mean_latency_us,
        };
        Ok(())
    })
}

/// Verdict as JSON lines (UTF-8, not NUL-terminated).
///
/// # Safety
/// `run` must be live; `buf` must hold `cap` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn ft_run_verdict_json(run: *const FtRun, buf: *mut u8, cap: usize, needed: *mut usize) -> FtStatus {
    guard(|| {
        let r = run.as_ref().ok_or((FtStatus::NullArgument, "run is null".to_string()))?;
        write_out(r.verdict.render_json_lines().as_bytes(), buf, cap, needed)
    })
}

/// The binary trace of the run.
///
/// # Safety
/// As for `ft_run_verdict_json`.
#[no_mangle]
pub unsafe extern "C" fn ft_run_trace(run: *const FtRun, buf: *mut u8, cap: usize, needed: *mut usize) -> FtStatus {
    guard(|| {
        let r = run.as_ref().ok_or((FtStatus::NullArgument, "run is null".to_string()))?;
        write_out(&r.trace.to_bytes(), buf, cap, needed)
    })
}

/// Renders a binary trace. `filter` is null or a comma-separated list of
/// `key=value` clauses over replica, seq and kind.
///
/// # Safety
/// `trace` must hold `len` bytes; `filter` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ft_trace_explain(
    trace: *const u8,
    len: usize,
    filter: *const c_char,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> FtStatus {
    guard(|| {
        if trace.is_null() {
            return Err((FtStatus::NullArgument, "trace is null".into()));
        }
        let t = Trace::from_bytes(std::slice::from_raw_parts(trace, len))
            .map_err(|e| (FtStatus::Decode, e.to_string()))?;
        let f = if filter.is_null() {
            TraceFilter::default()
        } else {
            let s = str_arg(filter, "filter")?;
            TraceFilter::parse(s.split(',').map(str::trim).filter(|c| !c.is_empty()))
                .map_err(|e| (FtStatus::BadFilter, e.to_string()))?
        };
        write_out(explain_trace(&t, &f).as_bytes(), buf, cap, needed)
    })
}

/// Analytic throughput bound in transactions per second.
///
/// # Safety
/// `protocol` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_throughput_model(
    protocol: *const c_char,
    batch: u32,
    rtt_us: u64,
    access_latency_us: u64,
    pipeline_width: u32,
    out: *mut f64,
) -> FtStatus {
    guard(|| {
        if out.is_null() {
            return Err((FtStatus::NullArgument, "out is null".into()));
        }
        let kind: ProtocolKind = str_arg(protocol, "protocol")?.parse().map_err(|e| (FtStatus::UnknownProtocol, e))?;
        *out = throughput_model(kind, batch, rtt_us, access_latency_us, kind.phases(), pipeline_width);
        Ok(())
    })
}
