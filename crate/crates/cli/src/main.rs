//! `riskverify` command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use riskverify::contour::{contour_grid, ContourGrid, GridSpec, RiskContour};
use riskverify::montecarlo::{estimate_tube_point_risk, RiskEstimate};
use riskverify::polyalg::{Polynomial, VarId};
use riskverify::scenario::{fixture, LoadedScenario, FIXTURES};
use riskverify::verifier::{uniform_times, verify_trajectory, verify_tube, Status, Verdict};
use serde_json::json;

const THREADS_ENV: &str = "RISKVERIFY_THREADS";

#[derive(Parser)]
#[command(name = "riskverify", version, about = "Risk-bounded trajectory and tube safety verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify that the trajectory stays inside the risk contours.
    Verify(VerifyArgs),
    /// Certify that every trajectory in the tube around the nominal one does.
    VerifyTube(VerifyArgs),
    /// Emit a membership/risk grid of each contour over a 2-D state slice.
    Contour(ContourArgs),
    /// Monte Carlo violation estimates along the trajectory.
    McCheck(McArgs),
    /// List the shipped scenarios, or print one.
    Fixtures(FixturesArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Scenario file, or the name of a shipped fixture.
    scenario: String,
    /// Largest multiplier degree the retry ladder may try.
    #[arg(long)]
    degree_cap: Option<u32>,
    /// Leave Gram matrices out of the verdict.
    #[arg(long)]
    no_certificates: bool,
    /// Human-readable summary instead of JSON.
    #[arg(long)]
    text: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct ContourArgs {
    scenario: String,
    /// Times to evaluate at (comma separated); defaults to the horizon start.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    time: Vec<f64>,
    /// Risk level; defaults to the scenario's.
    #[arg(long)]
    delta: Option<f64>,
    /// `xmin,xmax,ymin,ymax` of the plotted axes.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-1.0, 1.0, -1.0, 1.0])]
    bounds: Vec<f64>,
    /// Points per axis, `n` or `nx,ny`.
    #[arg(long, value_delimiter = ',', default_values_t = [201])]
    res: Vec<usize>,
    /// Two state variables spanning the grid.
    #[arg(long, value_delimiter = ',', default_values_t = ["x1".to_string(), "x2".to_string()])]
    axes: Vec<String>,
    /// Fix a remaining state variable, e.g. `--slice x3=0.5`.
    #[arg(long, value_parser = parse_slice)]
    slice: Vec<(String, f64)>,
    /// Only this constraint.
    #[arg(long)]
    constraint: Option<String>,
    /// Output format; inferred from `--out` when it ends in `.csv`.
    #[arg(long, value_enum)]
    format: Option<GridFormat>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    scenario: String,
    /// Number of uniformly spaced times over the horizon.
    #[arg(long, default_value_t = 20)]
    times: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offset from the nominal trajectory, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offset: Vec<f64>,
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct FixturesArgs {
    /// Print this fixture's scenario JSON instead of the list.
    #[arg(long)]
    show: Option<String>,
    #[arg(long)]
    text: bool,
}

fn parse_slice(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or("expected VAR=VALUE")?;
    let value = value.trim().parse().map_err(|e| format!("bad value in `{s}`: {e}"))?;
    Ok((name.trim().to_string(), value))
}

/// Input or usage problem: exit code 2.
struct InputError(String);

impl<E: std::fmt::Display> From<E> for InputError {
    fn from(e: E) -> Self {
        InputError(e.to_string())
    }
}

fn input_err(msg: impl Into<String>) -> InputError {
    InputError(msg.into())
}

fn load(source: &str) -> Result<LoadedScenario, InputError> {
    let path = Path::new(source);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| input_err(format!("{source}: {e}")))?;
        return LoadedScenario::from_json(&text).map_err(|e| input_err(format!("{source}: {e}")));
    }
    match fixture(source) {
        Some(f) => Ok(f.load()),
        None => Err(input_err(format!(
            "{source}: no such file or shipped fixture (see `riskverify fixtures`)"
        ))),
    }
}

fn status_code(safe: bool) -> u8 {
    if safe {
        0
    } else {
        1
    }
}

fn cmd_verify(args: &VerifyArgs, tube: bool, out: &mut dyn Write) -> Result<u8, InputError> {
    let s = load(&args.scenario)?;
    let traj = s.require_trajectory()?;
    let mut opts = s.options();
    if args.degree_cap.is_some() {
        opts.degree_cap = args.degree_cap;
    }
    if args.no_certificates {
        opts.include_certificates = false;
    }
    let verdict = if tube {
        verify_tube(&s.scenario, traj, s.require_tube()?, &opts)?
    } else {
        verify_trajectory(&s.scenario, traj, &opts)?
    };
    if args.text {
        write!(out, "{}", verdict_text(&verdict))?;
    } else {
        writeln!(out, "{}", serde_json::to_string_pretty(&verdict)?)?;
    }
    Ok(status_code(verdict.is_safe()))
}

fn verdict_text(v: &Verdict) -> String {
    let status = match v.status {
        Status::Safe => "SAFE",
        Status::NotVerified => "NOT_VERIFIED",
    };
    let mut s = format!("{status} (delta {}, {:.1} ms)\n", v.delta, v.wall_time_ms);
    for c in &v.constraints {
        let degrees = |r: &riskverify::verifier::StageReport| {
            r.attempts
                .last()
                .map(|a| format!("{:?} {}", a.degrees, a.outcome))
                .unwrap_or_else(|| "not attempted".into())
        };
        let _ = writeln!(s, "  {}: risk {}; mean {}", c.name, degrees(&c.risk), degrees(&c.mean));
    }
    if let Some(f) = &v.failure {
        let _ = writeln!(s, "  failed: {} ({:?}): {}", f.constraint, f.stage, f.reason);
        if let Some(d) = &f.diagnostic {
            let bound = d.risk_bound.map_or("inf".to_string(), |b| format!("{b:.4}"));
            let _ = writeln!(s, "  near t = {:.4}, x = {:?}, risk bound {bound} ({})", d.time, d.state, d.source);
        }
    }
    s
}

/// Rewrites a contour so the chosen axes become `x1, x2` and the sliced
/// variables are constants.
fn slice_contour(rc: &RiskContour, axes: [VarId; 2], fixed: &BTreeMap<VarId, f64>) -> RiskContour {
    // go through placeholders so swapping x1/x2 does not collide
    let tmp = [VarId::Offset(0), VarId::Offset(1)];
    let mut first: BTreeMap<VarId, Polynomial> = fixed.iter().map(|(v, x)| (*v, Polynomial::constant(*x))).collect();
    first.insert(axes[0], Polynomial::var(tmp[0]));
    first.insert(axes[1], Polynomial::var(tmp[1]));
    let second: BTreeMap<VarId, Polynomial> = [
        (tmp[0], Polynomial::var(VarId::State(0))),
        (tmp[1], Polynomial::var(VarId::State(1))),
    ]
    .into();
    let map = |p: &Polynomial| p.substitute(&first).substitute(&second);
    RiskContour {
        name: rc.name.clone(),
        p1: map(&rc.p1),
        p2: map(&rc.p2),
    }
}

fn state_var(name: &str, dim: usize) -> Result<VarId, InputError> {
    match name.parse::<VarId>() {
        Ok(VarId::State(i)) if i < dim => Ok(VarId::State(i)),
        _ => Err(input_err(format!("`{name}` is not a state variable x1..x{dim}"))),
    }
}

fn cmd_contour(args: &ContourArgs, out: &mut dyn Write) -> Result<u8, InputError> {
    let s = load(&args.scenario)?;
    let dim = s.scenario.state_dim;
    if args.axes.len() != 2 {
        return Err(input_err("--axes takes exactly two state variables"));
    }
    let axes = [state_var(&args.axes[0], dim)?, state_var(&args.axes[1], dim)?];
    if axes[0] == axes[1] {
        return Err(input_err("--axes must name two different variables"));
    }
    let mut fixed = BTreeMap::new();
    for (name, value) in &args.slice {
        let v = state_var(name, dim)?;
        if axes.contains(&v) {
            return Err(input_err(format!("`{name}` is a grid axis and cannot be sliced")));
        }
        fixed.insert(v, *value);
    }
    let missing: Vec<String> = (0..dim)
        .map(VarId::State)
        .filter(|v| !axes.contains(v) && !fixed.contains_key(v))
        .map(|v| v.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(input_err(format!(
            "contour grids are two-dimensional but the state has {dim} components; \
             fix {} with --slice (e.g. --slice {}=0) or pick other --axes",
            missing.join(", "),
            missing[0]
        )));
    }
    let bounds: [f64; 4] = args
        .bounds
        .as_slice()
        .try_into()
        .map_err(|_| input_err("--bounds takes xmin,xmax,ymin,ymax"))?;
    let resolution = match args.res.as_slice() {
        [n] => [*n, *n],
        [nx, ny] => [*nx, *ny],
        _ => return Err(input_err("--res takes n or nx,ny")),
    };
    let spec = GridSpec {
        bounds: [(bounds[0], bounds[1]), (bounds[2], bounds[3])],
        resolution,
    };
    let delta = args.delta.unwrap_or(s.scenario.delta);
    if !(0.0..=1.0).contains(&delta) {
        return Err(input_err("--delta must lie in [0, 1]"));
    }
    let times = if args.time.is_empty() {
        vec![s.scenario.horizon.0]
    } else {
        args.time.clone()
    };
    let contours: Vec<RiskContour> = s
        .scenario
        .contours()?
        .into_iter()
        .filter(|rc| args.constraint.as_ref().is_none_or(|c| *c == rc.name))
        .collect();
    if contours.is_empty() {
        return Err(input_err(format!(
            "no constraint named `{}`",
            args.constraint.as_deref().unwrap_or_default()
        )));
    }
    let mut grids: Vec<ContourGrid> = Vec::new();
    for rc in &contours {
        let sliced = slice_contour(rc, axes, &fixed);
        for &t in &times {
            let mut g = contour_grid(&sliced, t, delta, &spec)?;
            g.axes[0].name = args.axes[0].clone();
            g.axes[1].name = args.axes[1].clone();
            grids.push(g);
        }
    }
    let format = args.format.unwrap_or(match &args.out {
        Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => GridFormat::Csv,
        _ => GridFormat::Json,
    });
    let body = match format {
        GridFormat::Json => serde_json::to_string(&json!({ "grids": grids, "slice": fixed_json(&fixed) }))? + "\n",
        GridFormat::Csv => grids.iter().map(ContourGrid::to_csv).collect::<Vec<_>>().join("\n"),
    };
    match &args.out {
        Some(p) => std::fs::write(p, body).map_err(|e| input_err(format!("{}: {e}", p.display())))?,
        None => write!(out, "{body}")?,
    }
    Ok(0)
}

fn fixed_json(fixed: &BTreeMap<VarId, f64>) -> BTreeMap<String, f64> {
    fixed.iter().map(|(v, x)| (v.to_string(), *x)).collect()
}

fn cmd_mc(args: &McArgs, out: &mut dyn Write) -> Result<u8, InputError> {
    if args.samples == 0 {
        return Err(input_err("--samples must be at least 1"));
    }
    if args.times == 0 {
        return Err(input_err("--times must be at least 1"));
    }
    let s = load(&args.scenario)?;
    let traj = s.require_trajectory()?;
    let offset = (!args.offset.is_empty()).then_some(args.offset.as_slice());
    let times = uniform_times(s.scenario.horizon, args.times);
    let estimates = estimate_tube_point_risk(&s.scenario, traj, offset, &times, args.samples, args.seed)?;
    let delta = s.scenario.delta;
    let within = |e: &RiskEstimate| e.mean <= delta + 3.0 * e.stderr;
    let all_within = estimates.iter().all(within);
    if args.text {
        for e in &estimates {
            writeln!(
                out,
                "{:<16} t = {:<8.4} {:.5} ± {:.5} {}",
                e.constraint,
                e.time,
                e.mean,
                e.stderr,
                if within(e) { "ok" } else { "EXCEEDS" }
            )?;
        }
        let summary = if all_within { "all within delta + 3 stderr" } else { "some estimates exceed delta + 3 stderr" };
        writeln!(out, "{summary}")?;
    } else {
        writeln!(out, "{}", serde_json::to_string_pretty(&estimates)?)?;
    }
    Ok(status_code(all_within))
}

fn cmd_fixtures(args: &FixturesArgs, out: &mut dyn Write) -> Result<u8, InputError> {
    if let Some(name) = &args.show {
        let f = fixture(name).ok_or_else(|| input_err(format!("no fixture named `{name}`")))?;
        write!(out, "{}", f.json)?;
        return Ok(0);
    }
    if args.text {
        for f in FIXTURES {
            let expected = match f.expected {
                Some(Status::Safe) => "SAFE",
                Some(Status::NotVerified) => "NOT_VERIFIED",
                None => "-",
            };
            let kind = format!("{:?}", f.kind).to_lowercase();
            writeln!(out, "{:<32} {kind:<10} {expected:<12} {}", f.name, f.load().description)?;
        }
    } else {
        let list: Vec<_> = FIXTURES
            .iter()
            .map(|f| {
                json!({
                    "name": f.name,
                    "kind": f.kind,
                    "expected": f.expected,
                    "description": f.load().description,
                })
            })
            .collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&list)?)?;
    }
    Ok(0)
}

fn configure_threads() -> Result<(), InputError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| input_err(format!("{THREADS_ENV}={value}: expected a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here too, on stdout with status 0
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Verify(a) => cmd_verify(a, false, out),
        Command::VerifyTube(a) => cmd_verify(a, true, out),
        Command::Contour(a) => cmd_contour(a, out),
        Command::McCheck(a) => cmd_mc(a, out),
        Command::Fixtures(a) => cmd_fixtures(a, out),
    });
    match result {
        Ok(code) => code,
        Err(InputError(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn main() -> ExitCode {
    let code = run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr());
    ExitCode::from(code)
}
