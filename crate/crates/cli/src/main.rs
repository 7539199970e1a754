use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use snapchain::critical_rate::{contraction_start, extension_start, rate_table, NumericOptions};
use snapchain::dynamics::{integrate, ChainState, Direction, RateSchedule, Segment, StopCondition};
use snapchain::equilibria::{
    enumerate_equilibria, equilibrium_curves_2d, equilibrium_with_phases, intermediates_stable,
};
use snapchain::io::{
    load_config, rate_table_text, write_branches_csv, write_equilibria_csv, write_rate_table_csv, write_selection_csv,
    write_time_series_csv, RunConfig,
};
use snapchain::planner::{
    build_graph, default_start, parse_sequence, plan_schedule, selection_map, PlannerOptions, StateLabel,
};
use snapchain::Error;

#[derive(Parser)]
#[command(
    name = "snapchain",
    version,
    about = "Simulate and plan rate-controlled chains of bi-stable elements"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Relative integrator tolerance, overriding the config.
    #[arg(long, global = true)]
    tol_rel: Option<f64>,
    /// Absolute integrator tolerance in mm, overriding the config.
    #[arg(long, global = true)]
    tol_abs: Option<f64>,
    /// Reject chains whose critical forces are not ordered.
    #[arg(long, global = true)]
    strict_ordering: bool,
    /// Seed for randomized sweeps, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a rate schedule and write the time series or events.
    Simulate(SimulateArgs),
    /// List every equilibrium at a total length.
    Equilibria {
        /// Total length L (mm).
        #[arg(long)]
        length: f64,
    },
    /// Equilibrium branches of a two-element chain in the strain plane.
    Curves2d {
        #[arg(long, default_value_t = 200)]
        resolution: usize,
    },
    /// Critical rates by the asymptotic, transcendental and numeric methods.
    CriticalRate {
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
        /// Relative bracket width of the numeric method.
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
    },
    /// Plan and verify a rate schedule for a sequence of states.
    Plan(PlanArgs),
    /// Transition graph of the stable states.
    Graph {
        #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
        format: GraphFormat,
        #[arg(long, value_enum, default_value_t = Intermediates::Auto)]
        intermediates: Intermediates,
    },
    /// First event as a function of rate, from one state.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Schedule file (JSON); overrides --rate.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Constant rate (mm/s), positive for extension.
    #[arg(long, allow_hyphen_values = true)]
    rate: Option<f64>,
    /// Duration of the constant-rate run (s).
    #[arg(long)]
    duration: Option<f64>,
    #[command(flatten)]
    start: StartArgs,
    #[arg(long, value_enum, default_value_t = SimFormat::Csv)]
    format: SimFormat,
    /// Sampling interval (s) of the time series.
    #[arg(long)]
    sample_dt: Option<f64>,
}

#[derive(Args)]
struct StartArgs {
    /// Starting state label, e.g. 00 or 1s; `rest` for zero strain.
    #[arg(long)]
    start: Option<String>,
    /// Total length of the starting equilibrium (mm).
    #[arg(long)]
    length: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    /// Comma-separated states, e.g. "00,10,11,01,00".
    #[arg(long)]
    sequence: String,
    /// Relative distance kept from the ends of each rate interval.
    #[arg(long, default_value_t = 0.15)]
    margin: f64,
    #[arg(long, value_enum, default_value_t = Intermediates::Auto)]
    intermediates: Intermediates,
    /// Total length of the starting equilibrium (mm); needed unless the
    /// sequence starts at all-0 or all-1.
    #[arg(long)]
    length: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Starting state label.
    #[arg(long)]
    from: String,
    /// Total length of the starting equilibrium (mm).
    #[arg(long)]
    length: Option<f64>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Extend)]
    direction: DirectionArg,
    /// Smallest rate magnitude (mm/s).
    #[arg(long)]
    min: f64,
    /// Largest rate magnitude (mm/s).
    #[arg(long)]
    max: f64,
    /// Log-spaced grid size.
    #[arg(long, default_value_t = 48)]
    points: usize,
    /// Draw this many log-uniform random rates instead of a grid.
    #[arg(long)]
    random: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Dot,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Intermediates {
    Auto,
    Stable,
    Unstable,
}

impl Intermediates {
    fn flag(self) -> Option<bool> {
        match self {
            Intermediates::Auto => None,
            Intermediates::Stable => Some(true),
            Intermediates::Unstable => Some(false),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Extend,
    Contract,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Extend => Direction::Extend,
            DirectionArg::Contract => Direction::Contract,
        }
    }
}

/// Failure of a command: the library error plus an exit code.
struct Failure {
    kind: String,
    message: String,
    code: u8,
    /// The reader closed stdout early, e.g. `snapchain ... | head`.
    broken_pipe: bool,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let broken_pipe = matches!(&e, Error::Io(io) if io.kind() == io::ErrorKind::BrokenPipe);
        let message = match &e {
            Error::InvalidConfig(list) => list.join("; "),
            other => other.to_string(),
        };
        Failure {
            kind: e.kind().to_string(),
            message,
            code: 1,
            broken_pipe,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage".into(),
        message: message.into(),
        code: 2,
        broken_pipe: false,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&usage(e.to_string().trim_end()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.broken_pipe => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure) {
    let body = json!({ "error": f.kind, "message": f.message });
    eprintln!("{body}");
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| usage("--config is required"))?;
    let mut rc = load_config(path).map_err(|e| match e {
        Error::Io(io) => Failure {
            kind: "io".into(),
            message: format!("cannot read {}: {io}", path.display()),
            code: 1,
            broken_pipe: false,
        },
        other => other.into(),
    })?;
    if let Some(r) = cli.tol_rel {
        rc.tolerances.rtol = r;
    }
    if let Some(a) = cli.tol_abs {
        rc.tolerances.atol = a;
    }
    if !(rc.tolerances.rtol > 0.0 && rc.tolerances.atol > 0.0) {
        return Err(usage("tolerances must be positive"));
    }
    if cli.strict_ordering {
        let v = rc.chain.ordering_violations();
        if !v.is_empty() {
            return Err(Error::InvalidConfig(v).into());
        }
    }
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    Ok(rc)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn start_state(rc: &RunConfig, start: Option<&str>, length: Option<f64>) -> Result<ChainState, Failure> {
    let chain = &rc.chain;
    match start {
        None | Some("rest") => Ok(ChainState::at_rest(chain)),
        Some("extension") => Ok(extension_start(chain)?),
        Some("contraction") => Ok(contraction_start(chain)?),
        Some(label) => {
            let label: StateLabel = label.parse()?;
            if label.len() != chain.len() {
                return Err(Error::BadStateLabel(format!(
                    "{label} has {} elements, chain has {}",
                    label.len(),
                    chain.len()
                ))
                .into());
            }
            match length {
                Some(l) => {
                    let eq = equilibrium_with_phases(chain, label.phases(), l)?;
                    Ok(ChainState::new(chain, eq.eps, 0.0)?)
                }
                None => Ok(default_start(chain, &label)?),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let rc = load(&cli)?;
    let chain = &rc.chain;
    let mut out = output(&cli.out)?;
    match &cli.command {
        Command::Simulate(a) => {
            let schedule = match (&a.schedule, a.rate) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(path)?;
                    serde_json::from_str::<RateSchedule>(&text).map_err(Error::from)?
                }
                (None, Some(v)) => {
                    let d = a.duration.ok_or_else(|| usage("--rate needs --duration"))?;
                    RateSchedule::new(vec![Segment::new(v, StopCondition::Duration { seconds: d })])
                }
                (None, None) => return Err(usage("give --schedule or --rate")),
            };
            let start = start_state(&rc, a.start.start.as_deref(), a.start.length)?;
            let mut opts = rc.integrate_options();
            if a.sample_dt.is_some() {
                opts.sample_dt = a.sample_dt;
            }
            let traj = integrate(chain, &start, &schedule, &opts)?;
            match a.format {
                SimFormat::Csv => write_time_series_csv(&mut out, chain.len(), &traj)?,
                SimFormat::Json => {
                    let body = json!({
                        "events": traj.events,
                        "segments": traj.segments,
                        "final_state": traj.final_state,
                        "steps": traj.steps,
                    });
                    writeln!(out, "{}", serde_json::to_string_pretty(&body).map_err(Error::from)?)?;
                }
            }
        }
        Command::Equilibria { length } => {
            let points = enumerate_equilibria(chain, *length);
            write_equilibria_csv(&mut out, chain.len(), &points)?;
        }
        Command::Curves2d { resolution } => {
            let branches = equilibrium_curves_2d(chain, *resolution)?;
            write_branches_csv(&mut out, chain.len(), &branches)?;
        }
        Command::CriticalRate { format, rel_tol } => {
            let mut opts = NumericOptions {
                rel_tol: *rel_tol,
                ..Default::default()
            };
            opts.integrate.rtol = rc.tolerances.rtol;
            opts.integrate.atol = rc.tolerances.atol;
            opts.integrate.event_tol = rc.tolerances.event_tol;
            let rows = rate_table(chain, &opts)?;
            match format {
                TableFormat::Text => write!(out, "{}", rate_table_text(&rows))?,
                TableFormat::Csv => write_rate_table_csv(&mut out, &rows)?,
            }
        }
        Command::Plan(a) => {
            let sequence = parse_sequence(&a.sequence)?;
            let mut opts = PlannerOptions {
                margin: a.margin,
                intermediates_stable: a.intermediates.flag(),
                ..Default::default()
            };
            opts.integrate.rtol = rc.tolerances.rtol;
            opts.integrate.atol = rc.tolerances.atol;
            opts.integrate.event_tol = rc.tolerances.event_tol;
            let start = match (a.length, sequence.first()) {
                (Some(l), Some(first)) => {
                    let eq = equilibrium_with_phases(chain, first.phases(), l)?;
                    Some(ChainState::new(chain, eq.eps, 0.0)?)
                }
                _ => None,
            };
            let result = plan_schedule(chain, &sequence, start.as_ref(), &opts)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&result).map_err(Error::from)?)?;
            out.flush()?;
            if !result.success {
                return Err(Failure {
                    kind: "plan_not_verified".into(),
                    message: format!(
                        "verification diverged at state {} of the expected sequence",
                        result.mismatch_at.unwrap_or(0)
                    ),
                    code: 3,
                    broken_pipe: false,
                });
            }
        }
        Command::Graph { format, intermediates } => {
            let stable = intermediates.flag().unwrap_or_else(|| intermediates_stable(chain));
            let graph = build_graph(chain, stable);
            match format {
                GraphFormat::Dot => write!(out, "{}", graph.to_dot())?,
                GraphFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&graph).map_err(Error::from)?)?,
            }
        }
        Command::Sweep(a) => {
            if !(a.min > 0.0 && a.max > a.min) {
                return Err(usage("need 0 < --min < --max"));
            }
            let state = start_state(&rc, Some(&a.from), a.length)?;
            let speeds: Vec<f64> = match a.random {
                Some(k) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
                    let (lo, hi) = (a.min.ln(), a.max.ln());
                    let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(lo..=hi).exp()).collect();
                    v.sort_by(f64::total_cmp);
                    v
                }
                None => {
                    let n = a.points.max(2);
                    (0..n)
                        .map(|j| a.min * (a.max / a.min).powf(j as f64 / (n - 1) as f64))
                        .collect()
                }
            };
            let dir: Direction = a.direction.into();
            let mut opts = rc.integrate_options();
            opts.record_samples = false;
            let map = selection_map(chain, &state, dir, &speeds, &opts)?;
            write_selection_csv(&mut out, dir.sign(), &map)?;
        }
    }
    out.flush()?;
    Ok(())
}
