use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use flexitrust::experiment::{parse_spec, run_experiments, Overrides, RunSpec};
use flexitrust::explain::{explain_trace, TraceFilter};
use flexitrust::protocol::ProtocolKind;
use flexitrust::scenarios::{run_named_scenario, ScenarioName, ScenarioParams};
use flexitrust::trace::Trace;
use flexitrust::trusted::Persistence;

const UNEXPECTED_VIOLATION: u8 = 1;
const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "flexitrust", version, about = "Trusted-component BFT simulator and sweep runner")]
struct Cli {
    /// Repeat for more detail on stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every point of an experiment spec.
    Run {
        spec: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Replace the spec's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, overrides_with = "no_traces")]
        keep_traces: bool,
        #[arg(long)]
        no_traces: bool,
    },
    /// Run one named scenario and print its verdict.
    Scenario {
        name: ScenarioName,
        #[arg(short, long)]
        protocol: ProtocolKind,
        #[arg(long, default_value_t = 1)]
        f: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        volatile: bool,
        #[arg(long)]
        txns: Option<u64>,
        /// Write the binary trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render a recorded trace as a per-replica timeline.
    Explain {
        trace: PathBuf,
        /// key=value with key one of replica, seq, kind; repeatable.
        #[arg(short = 'F', long = "filter")]
        filters: Vec<String>,
        /// Print records in plain time order instead of grouping by replica.
        #[arg(long)]
        flat: bool,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(CONFIG_ERROR)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { spec, out, seed, keep_traces, no_traces } => {
            let text = match fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) => return fail(format_args!("{}: {e}", spec.display())),
            };
            let parsed = match parse_spec(&text) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let keep = if keep_traces {
                Some(true)
            } else if no_traces {
                Some(false)
            } else {
                None
            };
            let ov = Overrides { output_dir: out, seed, keep_traces: keep };
            let verbose = cli.verbose;
            let res = run_experiments(&parsed, &ov, |o| {
                if verbose > 0 {
                    eprintln!(
                        "{} tps={:.1} safety_ok={} rsm_liveness_ok={}",
                        o.spec.tag(),
                        o.row.tps,
                        o.row.safety_ok,
                        o.row.rsm_liveness_ok
                    );
                }
                if verbose > 1 {
                    eprint!("{}", o.verdict.render_text());
                }
            });
            match res {
                Ok(sum) => {
                    println!("{} runs; metrics in {}", sum.runs, sum.metrics_path.display());
                    for tag in &sum.unexpected {
                        eprintln!("unexpected safety violation: {tag}");
                    }
                    if sum.unexpected.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(UNEXPECTED_VIOLATION)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Scenario { name, protocol, f, seed, volatile, txns, trace } => {
            let mut p = ScenarioParams { f, seed, ..Default::default() };
            if volatile {
                p.persistence = Persistence::Volatile;
            }
            if let Some(t) = txns {
                p.txns = t;
            }
            let spec = RunSpec { scenario: name, kind: protocol, params: p.clone(), rtt_us: 2 * p.one_way_us };
            let (t, v) = match run_named_scenario(name, protocol, &p) {
                Ok(x) => x,
                Err(e) => return fail(e),
            };
            if let Some(path) = trace {
                if let Err(e) = fs::write(&path, t.to_bytes()) {
                    return fail(format_args!("{}: {e}", path.display()));
                }
            }
            print!("{}", v.render_text());
            if !v.safety_ok && !spec.violation_expected() {
                ExitCode::from(UNEXPECTED_VIOLATION)
            } else {
                ExitCode::SUCCESS
            }
        }
        Cmd::Explain { trace, filters, flat } => {
            let filter = match TraceFilter::parse(filters.iter().map(String::as_str)) {
                Ok(f) => f,
                Err(e) => {
                    use clap::CommandFactory;
                    Cli::command().error(clap::error::ErrorKind::InvalidValue, e).exit();
                }
            };
            let bytes = match fs::read(&trace) {
                Ok(b) => b,
                Err(e) => return fail(format_args!("{}: {e}", trace.display())),
            };
            let t = match Trace::from_bytes(&bytes) {
                Ok(t) => t,
                Err(e) => return fail(format_args!("{}: {e}", trace.display())),
            };
            if flat {
                let mut t2 = t.clone();
                t2.records.retain(|r| filter.matches(r));
                print!("{}", t2.render_text());
            } else {
                print!("{}", explain_trace(&t, &filter));
            }
            ExitCode::SUCCESS
        }
    }
}
