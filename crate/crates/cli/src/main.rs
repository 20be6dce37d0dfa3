//! Command-line front end: solve cavity models, run finite-N simulations,
//! reproduce the reference tables, and sweep parameter grids.
//!
//! Exit codes: 0 success, 1 usage error, 2 domain or solver error.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cavity_lb::phase_type::PhaseType;
use cavity_lb::policy::{pooling, pull, push, waterfill};
use cavity_lb::sim::{self, PolicyConfig, SimConfig};

#[derive(Parser)]
#[command(name = "cavity-lb", version, about = "Cavity analysis and simulation of bounded-queue load balancers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the cavity model for one policy and print the solution JSON.
    Analyze(AnalyzeArgs),
    /// Run the finite-N simulator and compare against the cavity value.
    Simulate(SimulateArgs),
    /// Reproduce one of the four reference tables as CSV.
    Table(TableArgs),
    /// Sweep one parameter and emit plot-ready CSV.
    Sweep(SweepArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Policy {
    Push,
    Pull,
    Waterfill,
    Pooling,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Scale {
    /// N up to 10^4; the 10^5 rows are emitted as "skipped".
    Desk,
    /// All four system sizes, 10^2 .. 10^5.
    Full,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    policy: Policy,
    /// Arrival rate per server, in [0, 1).
    #[arg(long)]
    lambda: f64,
    /// Probe/update rate per server (push, waterfill; overall rate for pull).
    #[arg(long)]
    delta: Option<f64>,
    /// Idle update rate (pull); derived from --delta and --delta1 if absent.
    #[arg(long)]
    delta0: Option<f64>,
    /// Update probability at completions (pull), default 0.
    #[arg(long)]
    delta1: Option<f64>,
    /// Centralized capacity fraction (pooling).
    #[arg(long)]
    p: Option<f64>,
    /// Job-size distribution: exponential, erlang:k, hyperexp:scv,f,
    /// hypererlang:k,l,p, zeps:eps, or file:<path> with {"alpha":..,"S":..}.
    #[arg(long, default_value = "exponential")]
    ph: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Output path (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Number of servers N.
    #[arg(long)]
    servers: usize,
    /// Total arrivals per run (default N*10^4).
    #[arg(long)]
    arrivals: Option<u64>,
    /// Independent replications.
    #[arg(long, default_value_t = 20)]
    runs: usize,
    /// Fraction of jobs excluded as warm-up.
    #[arg(long, default_value_t = 0.10)]
    warmup: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch-size constant C for water filling: M = round(C*log10(N)).
    #[arg(long)]
    cgrowth: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump per-job rows (run, arrival, departure, server) to a CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    /// Table number, 1..=4 (push, waterfill, pull, pooling).
    table: u32,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the per-run arrival count (default: the N*10^4 protocol).
    /// The infinity column is analytic and unaffected.
    #[arg(long)]
    arrivals: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// Swept parameter.
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    /// Number of grid points.
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Lambda,
    Delta,
    Scv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(v) = std::env::var("CAVITY_LB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Table(args) => cmd_table(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_ph(spec: &str) -> Result<PhaseType, String> {
    if let Some(path) = spec.strip_prefix("file:") {
        let text = fs::read_to_string(path).map_err(|e| format!("reading {path}: {e}"))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| format!("parsing {path}: {e}"))?;
        PhaseType::from_json(&value).map_err(|e| e.to_string())
    } else {
        PhaseType::parse(spec).map_err(|e| e.to_string())
    }
}

/// Assembles the simulator-facing policy record from CLI flags.
fn policy_config(args: &PolicyArgs) -> Result<PolicyConfig, String> {
    let lambda = args.lambda;
    match args.policy {
        Policy::Push => {
            let delta = args.delta.ok_or("--delta is required for push")?;
            Ok(PolicyConfig::Push { lambda, delta })
        }
        Policy::Waterfill => {
            let delta = args.delta.ok_or("--delta is required for waterfill")?;
            Ok(PolicyConfig::Waterfill { lambda, delta, c_growth: 0.0 })
        }
        Policy::Pull => {
            let delta1 = args.delta1.unwrap_or(0.0);
            let params = match (args.delta0, args.delta) {
                (Some(delta0), _) => pull::PullParams::new(lambda, delta0, delta1),
                (None, Some(delta)) => pull::PullParams::from_overall_rate(lambda, delta, delta1),
                (None, None) => return Err("pull needs --delta0 or --delta".into()),
            }
            .map_err(|e| e.to_string())?;
            Ok(PolicyConfig::Pull { lambda, delta0: params.delta0, delta1: params.delta1 })
        }
        Policy::Pooling => {
            let p = args.p.ok_or("--p is required for pooling")?;
            Ok(PolicyConfig::Pooling { lambda, p })
        }
    }
}

fn write_out(out: &Option<PathBuf>, content: &str) -> Result<(), String> {
    match out {
        Some(path) => fs::write(path, content).map_err(|e| format!("writing {path:?}: {e}")),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), String> {
    let ph = parse_ph(&args.policy.ph)?;
    let as_err = |e: cavity_lb::Error| e.to_string();
    let json = match policy_config(&args.policy)? {
        PolicyConfig::Push { lambda, delta } => {
            let params = push::PushParams::new(lambda, delta).map_err(as_err)?;
            let sol = push::solve(&params, &ph).map_err(as_err)?;
            serde_json::to_value(&sol).unwrap()
        }
        PolicyConfig::Pull { lambda, delta0, delta1 } => {
            let params = pull::PullParams::new(lambda, delta0, delta1).map_err(as_err)?;
            let sol = pull::solve(&params, &ph).map_err(as_err)?;
            serde_json::to_value(&sol).unwrap()
        }
        PolicyConfig::Waterfill { lambda, delta, .. } => {
            let params = waterfill::WaterfillParams::new(lambda, delta).map_err(as_err)?;
            let sol = waterfill::solve(&params, &ph).map_err(as_err)?;
            serde_json::to_value(&sol).unwrap()
        }
        PolicyConfig::Pooling { lambda, p } => {
            let params = pooling::PoolingParams::new(lambda, p).map_err(as_err)?;
            let sol = pooling::solve(&params, &ph).map_err(as_err)?;
            serde_json::to_value(&sol).unwrap()
        }
    };
    let mut text = serde_json::to_string_pretty(&json).unwrap();
    text.push('\n');
    write_out(&args.out, &text)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), String> {
    let ph = parse_ph(&args.policy.ph)?;
    let mut policy = policy_config(&args.policy)?;
    if let PolicyConfig::Waterfill { c_growth, .. } = &mut policy {
        *c_growth = args.cgrowth.ok_or("waterfill simulation needs --cgrowth")?;
    }
    let mut config = SimConfig::new(policy, ph, args.servers)
        .with_runs(args.runs)
        .with_seed(args.seed);
    config.warmup_fraction = args.warmup;
    config.collect_trace = args.trace.is_some();
    if let Some(a) = args.arrivals {
        config = config.with_arrivals(a);
    }
    let report = sim::simulate(&config).map_err(|e| e.to_string())?;
    if let Some(trace_path) = &args.trace {
        let mut csv = String::from("run,arrival,departure,server\n");
        for (run, trace) in report.traces.iter().enumerate() {
            if let Some(rows) = trace {
                for r in rows {
                    let _ = writeln!(csv, "{run},{},{},{}", r.arrival, r.departure, r.server);
                }
            }
        }
        fs::write(trace_path, csv).map_err(|e| format!("writing {trace_path:?}: {e}"))?;
    }
    let text = match args.format {
        Format::Json => {
            let mut t = serde_json::to_string_pretty(&report).unwrap();
            t.push('\n');
            t
        }
        Format::Csv => {
            let mut t = String::from(
                "policy,n_servers,runs,seed,arrivals_per_run,mean_response,ci_halfwidth,cavity,rel_err_pct\n",
            );
            let _ = writeln!(
                t,
                "{},{},{},{},{},{:.6},{:.3e},{:.6},{:.4}",
                report.policy,
                report.n_servers,
                report.runs,
                report.seed,
                report.arrivals_per_run,
                report.mean_response,
                report.ci_halfwidth,
                report.cavity_prediction,
                report.relative_error_pct
            );
            t
        }
    };
    write_out(&args.out, &text)
}

/// One reference-table row: a distribution and its load point.
struct TableRow {
    label: &'static str,
    ph: &'static str,
    lambda: f64,
    rate: f64,
    c_growth: f64,
}

fn table_rows(table: u32) -> Result<(Policy, Vec<TableRow>), String> {
    let r = |label, ph, lambda, rate, c_growth| TableRow { label, ph, lambda, rate, c_growth };
    Ok(match table {
        1 => (
            Policy::Push,
            vec![
                r("Exponential", "exponential", 0.9, 0.3, 0.0),
                r("Hyperexponential(2) f=1/2 SCV=15", "hyperexp:15,0.5", 0.85, 0.5, 0.0),
                r("Erlang(6)", "erlang:6", 0.8, 0.25, 0.0),
                r("Hyper-Erlang(2;5) p=0.25", "hypererlang:2,5,0.25", 0.85, 0.15, 0.0),
            ],
        ),
        2 => (
            Policy::Waterfill,
            vec![
                r("Exponential", "exponential", 0.8, 0.4, 20.0),
                r("Hyperexponential(2) f=1/2 SCV=10", "hyperexp:10,0.5", 0.8, 0.4, 40.0),
                r("Erlang(3)", "erlang:3", 0.75, 1.2, 30.0),
                r("Hyper-Erlang(3;5) p=0.6", "hypererlang:3,5,0.6", 0.8, 1.2, 30.0),
            ],
        ),
        3 => (
            Policy::Pull,
            vec![
                r("Exponential", "exponential", 0.7, 0.2, 0.0),
                r("Hyperexponential(2) f=1/2 SCV=20", "hyperexp:20,0.5", 0.9, 0.4, 0.0),
                r("Erlang(3)", "erlang:3", 0.75, 0.15, 0.0),
                r("Hyper-Erlang(2;5) p=0.75", "hypererlang:2,5,0.75", 0.75, 0.5, 0.0),
            ],
        ),
        4 => (
            Policy::Pooling,
            vec![
                r("Exponential", "exponential", 0.8, 0.3, 0.0),
                r("Hyperexponential(2) f=1/2 SCV=5", "hyperexp:5,0.5", 0.7, 0.3, 0.0),
                r("Erlang(7)", "erlang:7", 0.9, 0.5, 0.0),
                r("Hyper-Erlang(3;5) p=0.6", "hypererlang:3,5,0.6", 0.8, 0.1, 0.0),
            ],
        ),
        _ => return Err(format!("no table {table}; expected 1..=4")),
    })
}

fn cmd_table(args: TableArgs) -> Result<(), String> {
    let (policy, rows) = table_rows(args.table)?;
    let param_name = if policy == Policy::Pooling { "p" } else { "delta" };
    let waterfill = policy == Policy::Waterfill;
    let mut csv = if waterfill {
        format!("distribution,lambda,{param_name},N,C,M,sim,conf,infinity,rel_err_pct\n")
    } else {
        format!("distribution,lambda,{param_name},N,sim,conf,infinity,rel_err_pct\n")
    };
    let sizes: &[usize] = &[100, 1_000, 10_000, 100_000];
    for (row_idx, row) in rows.iter().enumerate() {
        let ph = parse_ph(row.ph)?;
        let policy_cfg = match policy {
            Policy::Push => PolicyConfig::Push { lambda: row.lambda, delta: row.rate },
            Policy::Waterfill => PolicyConfig::Waterfill {
                lambda: row.lambda,
                delta: row.rate,
                c_growth: row.c_growth,
            },
            Policy::Pull => {
                let params =
                    pull::PullParams::from_overall_rate(row.lambda, row.rate, 0.0)
                        .map_err(|e| e.to_string())?;
                PolicyConfig::Pull {
                    lambda: row.lambda,
                    delta0: params.delta0,
                    delta1: params.delta1,
                }
            }
            Policy::Pooling => PolicyConfig::Pooling { lambda: row.lambda, p: row.rate },
        };
        let probe = SimConfig::new(policy_cfg.clone(), ph.clone(), 100);
        let infinity = probe.cavity_prediction().map_err(|e| e.to_string())?;
        for (n_idx, &n) in sizes.iter().enumerate() {
            let skip = n == 100_000 && args.scale == Scale::Desk;
            let m_batch = if waterfill {
                SimConfig::new(policy_cfg.clone(), ph.clone(), n).batch_size()
            } else {
                0
            };
            let prefix = if waterfill {
                format!(
                    "{},{},{},{},{},{}",
                    row.label, row.lambda, row.rate, n, row.c_growth, m_batch
                )
            } else {
                format!("{},{},{},{}", row.label, row.lambda, row.rate, n)
            };
            if skip {
                let _ = writeln!(csv, "{prefix},skipped,skipped,{infinity:.4},skipped");
                continue;
            }
            let seed = args
                .seed
                .wrapping_add(((row_idx * sizes.len() + n_idx) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut config = SimConfig::new(policy_cfg.clone(), ph.clone(), n).with_seed(seed);
            if let Some(a) = args.arrivals {
                config = config.with_arrivals(a);
            }
            let report = sim::simulate(&config).map_err(|e| e.to_string())?;
            let _ = writeln!(
                csv,
                "{prefix},{:.4},{:.2e},{:.4},{:.4}",
                report.mean_response, report.ci_halfwidth, infinity, report.relative_error_pct
            );
        }
    }
    write_out(&args.out, &csv)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), String> {
    if args.steps == 0 {
        return Err("empty sweep grid (--steps 0)".into());
    }
    let grid: Vec<f64> = if args.steps == 1 {
        vec![args.from]
    } else {
        (0..args.steps)
            .map(|i| args.from + (args.to - args.from) * i as f64 / (args.steps - 1) as f64)
            .collect()
    };
    let base_ph = parse_ph(&args.policy.ph)?;
    let mut csv = String::from("x,ER,EQ,m_tilde,bound_lo,bound_hi\n");
    for &x in &grid {
        let mut p_args = PolicyArgs {
            policy: args.policy.policy,
            lambda: args.policy.lambda,
            delta: args.policy.delta,
            delta0: args.policy.delta0,
            delta1: args.policy.delta1,
            p: args.policy.p,
            ph: args.policy.ph.clone(),
        };
        let ph = match args.param {
            SweepParam::Lambda => {
                p_args.lambda = x;
                base_ph.clone()
            }
            SweepParam::Delta => {
                p_args.delta = Some(x);
                base_ph.clone()
            }
            SweepParam::Scv => {
                // Vary the SCV of a hyperexponential family at fixed f.
                let f = args
                    .policy
                    .ph
                    .strip_prefix("hyperexp:")
                    .and_then(|rest| rest.split(',').nth(1))
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or("scv sweep needs --ph hyperexp:<scv>,<f>")?;
                PhaseType::hyperexp(x, f).map_err(|e| e.to_string())?
            }
        };
        let as_err = |e: cavity_lb::Error| e.to_string();
        let (er, eq, m_tilde, bounds) = match policy_config(&p_args)? {
            PolicyConfig::Push { lambda, delta } => {
                let params = push::PushParams::new(lambda, delta).map_err(as_err)?;
                let sol = push::solve(&params, &ph).map_err(as_err)?;
                (sol.mean_response, sol.mean_queue, sol.m_tilde, Some(sol.bounds))
            }
            PolicyConfig::Pull { lambda, delta0, delta1 } => {
                let params = pull::PullParams::new(lambda, delta0, delta1).map_err(as_err)?;
                let sol = pull::solve(&params, &ph).map_err(as_err)?;
                (sol.mean_response, sol.mean_queue, sol.m_tilde, Some(sol.bounds))
            }
            PolicyConfig::Waterfill { lambda, delta, .. } => {
                let params =
                    waterfill::WaterfillParams::new(lambda, delta).map_err(as_err)?;
                let sol = waterfill::solve(&params, &ph).map_err(as_err)?;
                (sol.mean_response, sol.mean_queue, sol.m_tilde, Some(sol.bounds))
            }
            PolicyConfig::Pooling { lambda, p } => {
                let params = pooling::PoolingParams::new(lambda, p).map_err(as_err)?;
                let sol = pooling::solve(&params, &ph).map_err(as_err)?;
                (sol.mean_response, sol.mean_queue, sol.m as f64, None)
            }
        };
        let lambda_here = if args.param == SweepParam::Lambda { x } else { args.policy.lambda };
        match bounds {
            Some((lo, hi)) => {
                // Emit response-time bounds via Little's law.
                let _ = writeln!(
                    csv,
                    "{x},{er},{eq},{m_tilde},{},{}",
                    lo / lambda_here,
                    hi / lambda_here
                );
            }
            None => {
                let _ = writeln!(csv, "{x},{er},{eq},{m_tilde},,");
            }
        }
    }
    write_out(&args.out, &csv)
}
