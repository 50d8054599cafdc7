//! Sweep driver: a TOML experiment spec expands into a run matrix whose rows
//! land in a CSV metrics file and a JSON-lines verdict file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProtocolKind;
use crate::scenarios::{run_named_scenario, ScenarioError, ScenarioName, ScenarioParams, Verdict};
use crate::trusted::Persistence;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("spec parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("run {tag}: {source}")]
    Run { tag: String, source: ScenarioError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("metrics: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Config problems are the caller's fault; everything else is the environment's.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Parse { .. } | ExperimentError::Invalid(_) | ExperimentError::Run { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_owned(), source }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    pub protocols: Vec<String>,
    #[serde(default = "one")]
    pub f: Vec<u32>,
    #[serde(default = "one")]
    pub batch_sizes: Vec<u32>,
    #[serde(default = "default_access")]
    pub access_latency_us: Vec<u64>,
    /// Round trip; each hop takes half.
    #[serde(default = "default_rtt")]
    pub rtt_us: Vec<u64>,
    #[serde(default = "default_persistence")]
    pub persistence: Vec<String>,
    #[serde(default = "zero")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub keep_traces: bool,
    /// Everything not swept: clients, txns, jitter, pipeline width and so on.
    #[serde(default)]
    pub params: ScenarioParams,
}

fn one<T: From<u8>>() -> Vec<T> {
    vec![T::from(1)]
}
fn zero() -> Vec<u64> {
    vec![0]
}
fn default_access() -> Vec<u64> {
    vec![1_000]
}
fn default_rtt() -> Vec<u64> {
    vec![1_000]
}
fn default_persistence() -> Vec<String> {
    vec!["persistent".into()]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// One point of the run matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub scenario: ScenarioName,
    pub kind: ProtocolKind,
    pub params: ScenarioParams,
    pub rtt_us: u64,
}

impl RunSpec {
    pub fn tag(&self) -> String {
        let p = &self.params;
        format!(
            "{}-{}-f{}-{}-b{}-a{}-rtt{}-s{}",
            self.scenario,
            self.kind,
            p.f,
            persistence_name(p.persistence),
            p.batch_size,
            p.access_latency_us,
            self.rtt_us,
            p.seed
        )
    }

    pub fn violation_expected(&self) -> bool {
        self.scenario.violation_expected(self.kind, self.params.persistence)
    }
}

pub fn persistence_name(p: Persistence) -> &'static str {
    match p {
        Persistence::Persistent => "persistent",
        Persistence::Volatile => "volatile",
    }
}

fn parse_persistence(s: &str) -> Result<Persistence, String> {
    match s.to_ascii_lowercase().as_str() {
        "persistent" => Ok(Persistence::Persistent),
        "volatile" => Ok(Persistence::Volatile),
        _ => Err(format!("unknown persistence {s:?}")),
    }
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec, ExperimentError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        ExperimentError::Parse { line, column, message: e.message().to_owned() }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl ExperimentSpec {
    /// The cross product in a fixed order: protocol, persistence, f, batch,
    /// access latency, rtt, seed.
    pub fn runs(&self) -> Result<Vec<RunSpec>, ExperimentError> {
        let scenario: ScenarioName = self.scenario.parse().map_err(ExperimentError::Invalid)?;
        let kinds = self
            .protocols
            .iter()
            .map(|p| p.parse::<ProtocolKind>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(ExperimentError::Invalid)?;
        let pers = self
            .persistence
            .iter()
            .map(|p| parse_persistence(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ExperimentError::Invalid)?;
        for (name, empty) in [
            ("protocols", kinds.is_empty()),
            ("f", self.f.is_empty()),
            ("batch_sizes", self.batch_sizes.is_empty()),
            ("access_latency_us", self.access_latency_us.is_empty()),
            ("rtt_us", self.rtt_us.is_empty()),
            ("persistence", pers.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(ExperimentError::Invalid(format!("{name} must not be empty")));
            }
        }
        if let Some(&f) = self.f.iter().find(|&&f| f == 0) {
            return Err(ExperimentError::Invalid(format!("f = {f}: every regime needs f >= 1")));
        }
        if self.batch_sizes.contains(&0) {
            return Err(ExperimentError::Invalid("batch size must be positive".into()));
        }
        let mut out = Vec::new();
        for &kind in &kinds {
            for &persistence in &pers {
                for &f in &self.f {
                    for &batch_size in &self.batch_sizes {
                        for &access in &self.access_latency_us {
                            for &rtt in &self.rtt_us {
                                for &seed in &self.seeds {
                                    let mut params = self.params.clone();
                                    params.f = f;
                                    params.persistence = persistence;
                                    params.batch_size = batch_size;
                                    params.access_latency_us = access;
                                    params.one_way_us = rtt / 2;
                                    params.seed = seed;
                                    params.record_traffic = params.record_traffic || self.keep_traces;
                                    out.push(RunSpec { scenario, kind, params, rtt_us: rtt });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub protocol: String,
    pub f: u32,
    pub n: u32,
    pub persistence: String,
    pub batch: u32,
    pub access_latency_us: u64,
    pub rtt_us: u64,
    pub seed: u64,
    pub completed_txns: u64,
    pub tps: f64,
    pub mean_latency_us: f64,
    pub makespan_us: u64,
    pub view_changes: u64,
    pub safety_ok: bool,
    pub rsm_liveness_ok: bool,
    pub consensus_liveness_ok: bool,
    pub violations: usize,
    pub violation_expected: bool,
    pub aborted: bool,
}

pub struct RunOutcome {
    pub spec: RunSpec,
    pub verdict: Verdict,
    pub row: MetricsRow,
    pub trace_bytes: Option<Vec<u8>>,
}

impl RunOutcome {
    pub fn unexpected_violation(&self) -> bool {
        !self.verdict.safety_ok && !self.spec.violation_expected()
    }
}

pub fn run_one(spec: &RunSpec, keep_trace: bool) -> Result<RunOutcome, ExperimentError> {
    let (trace, verdict) = run_named_scenario(spec.scenario, spec.kind, &spec.params)
        .map_err(|source| ExperimentError::Run { tag: spec.tag(), source })?;
    let p = &spec.params;
    let row = MetricsRow {
        scenario: spec.scenario.to_string(),
        protocol: spec.kind.to_string(),
        f: p.f,
        n: trace.header.n,
        persistence: persistence_name(p.persistence).into(),
        batch: p.batch_size,
        access_latency_us: p.access_latency_us,
        rtt_us: spec.rtt_us,
        seed: p.seed,
        completed_txns: verdict.stats.completed_txns,
        tps: verdict.stats.tps,
        mean_latency_us: verdict.stats.mean_latency_us,
        makespan_us: verdict.stats.makespan_us,
        view_changes: verdict.stats.view_changes,
        safety_ok: verdict.safety_ok,
        rsm_liveness_ok: verdict.rsm_liveness_ok,
        consensus_liveness_ok: verdict.consensus_liveness_ok,
        violations: verdict.violations.len(),
        violation_expected: spec.violation_expected(),
        aborted: verdict.aborted.is_some(),
    };
    let trace_bytes = keep_trace.then(|| trace.to_bytes());
    Ok(RunOutcome { spec: spec.clone(), verdict, row, trace_bytes })
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub keep_traces: Option<bool>,
}

pub struct Summary {
    pub runs: usize,
    pub unexpected: Vec<String>,
    pub metrics_path: PathBuf,
    pub verdicts_path: PathBuf,
}

/// Runs the whole matrix in parallel and writes `metrics.csv`,
/// `verdicts.jsonl` and optionally `traces/<tag>.fttrace` under the output
/// directory. Rows come out in matrix order regardless of scheduling.
pub fn run_experiments(
    spec: &ExperimentSpec,
    ov: &Overrides,
    mut progress: impl FnMut(&RunOutcome),
) -> Result<Summary, ExperimentError> {
    let mut spec = spec.clone();
    if let Some(s) = ov.seed {
        spec.seeds = vec![s];
    }
    if let Some(k) = ov.keep_traces {
        spec.keep_traces = k;
    }
    let dir = ov.output_dir.clone().unwrap_or_else(|| spec.output_dir.clone());
    let runs = spec.runs()?;
    let keep = spec.keep_traces;
    let outcomes: Vec<RunOutcome> =
        runs.par_iter().map(|r| run_one(r, keep)).collect::<Result<_, _>>()?;

    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let metrics_path = dir.join("metrics.csv");
    let verdicts_path = dir.join("verdicts.jsonl");
    let mut csv = csv::Writer::from_path(&metrics_path)?;
    let mut jl = fs::File::create(&verdicts_path).map_err(io_err(&verdicts_path))?;
    if keep {
        let td = dir.join("traces");
        fs::create_dir_all(&td).map_err(io_err(&td))?;
    }
    let mut unexpected = Vec::new();
    for o in &outcomes {
        csv.serialize(&o.row)?;
        let tag = o.spec.tag();
        for line in o.verdict.render_json_lines().lines() {
            let mut v: serde_json::Value = serde_json::from_str(line).expect("verdict lines are json");
            v["run"] = serde_json::Value::String(tag.clone());
            writeln!(jl, "{v}").map_err(io_err(&verdicts_path))?;
        }
        if let Some(b) = &o.trace_bytes {
            let p = dir.join("traces").join(format!("{tag}.fttrace"));
            fs::write(&p, b).map_err(io_err(&p))?;
        }
        if o.unexpected_violation() {
            unexpected.push(tag);
        }
        progress(o);
    }
    csv.flush().map_err(io_err(&metrics_path))?;
    Ok(Summary { runs: outcomes.len(), unexpected, metrics_path, verdicts_path })
}
