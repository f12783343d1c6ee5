//! `robust-mhe` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 infeasible LMI,
//! 3 solver failure.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_mhe::detect::{
    certificate_hash, read_certificate, search_rho, verify_nominal, write_certificate, DetectError,
    DetectOptions, DetectabilityCertificate,
};
use robust_mhe::iqc::{check_pointwise_iqc_empirical, empty_template, template_from_families, FilterRealization, MultiplierFamily};
use robust_mhe::mhe::{min_horizon, MheConfig, MheDesign, MheError};
use robust_mhe::model::{scenario_by_name, BoxSet, ModelError, SCENARIO_NAMES};
use robust_mhe::sim::{compare, run_closed_loop, SimError};
use robust_mhe::{Scenario, Vector};

use config::{parse_vector, Horizon, RunConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Infeasible(String),
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Infeasible(m) | CliError::Solver(m) => m,
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Infeasible { .. } | DetectError::InteriorViolation { .. } => CliError::Infeasible(e.to_string()),
            DetectError::Solver(_) => CliError::Solver(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MheError> for CliError {
    fn from(e: MheError) -> Self {
        match e {
            MheError::SolverFailure { .. } | MheError::InfeasibleWindow { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Estimator { source, k, .. } => match CliError::from(source) {
                CliError::Usage(m) => CliError::Usage(format!("k = {k}: {m}")),
                CliError::Infeasible(m) => CliError::Infeasible(format!("k = {k}: {m}")),
                CliError::Solver(m) => CliError::Solver(format!("k = {k}: {m}")),
            },
            SimError::Unpaired(_) => CliError::Solver(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "robust-mhe", version, about = "Robust detectability certificates and moving horizon estimation")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search a detectability certificate and write it as JSON.
    Verify(VerifyArgs),
    /// Print the minimum horizon and the generalized eigenvalue bound.
    Horizon(HorizonArgs),
    /// Run the closed loop and write the trace CSV.
    Simulate(SimulateArgs),
    /// Paired runs of the robust and the standard estimator over several seeds.
    Compare(CompareArgs),
    /// Smallest point-wise IQC value along sampled trajectories.
    IqcCheck(IqcCheckArgs),
    /// Render a trace CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: Option<String>,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Initial estimate, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    xhat0: Option<String>,
    /// Half-width of the disturbance box.
    #[arg(long)]
    w_bound: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// `ρ²`, or a comma-separated grid tried in increasing order.
    #[arg(long)]
    rho2: Option<String>,
    /// Zames-Falb order; 0 leaves the family out.
    #[arg(long)]
    zf_order: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// Add the static polytopic family.
    #[arg(long)]
    with_static: bool,
    /// Use only the static polytopic family.
    #[arg(long, conflicts_with_all = ["zf_order", "with_static"])]
    static_only: bool,
    /// General instead of symmetric Zames-Falb coefficient matrix.
    #[arg(long)]
    nonsymmetric: bool,
    /// Certificate for the model without the uncertainty channel.
    #[arg(long)]
    nominal: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HorizonArgs {
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug)]
struct MheArgs {
    #[arg(long)]
    cert: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    /// Horizon `N` or `auto` for `N_min + 3`.
    #[arg(long)]
    horizon: Option<Horizon>,
    /// Bound on the estimated uncertainty outputs.
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    mhe: MheArgs,
    /// `robust` or `standard`.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    log_scale: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    mhe: MheArgs,
    /// Number of seeds; seeds `0..n` are used.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IqcCheckArgs {
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 100)]
    trajectories: usize,
    #[arg(long, default_value_t = 100)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    svg: PathBuf,
    #[arg(long)]
    log_scale: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = limit_threads() {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.code());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn limit_threads() -> CliResult {
    let Ok(raw) = std::env::var("THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Verify(a) => verify(&cfg, a),
        Command::Horizon(a) => horizon(&cfg, a),
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Compare(a) => compare_cmd(&cfg, a),
        Command::IqcCheck(a) => iqc_check(&cfg, a),
        Command::Plot(a) => plot(a),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn vector_arg(flag: Option<&str>, key: Option<&Vec<f64>>, dim: usize, name: &str) -> Result<Option<Vector>, CliError> {
    let values = match (flag, key) {
        (Some(s), _) => parse_vector(s).map_err(|e| CliError::Usage(format!("--{name}: {e}")))?,
        (None, Some(v)) => v.clone(),
        (None, None) => return Ok(None),
    };
    if values.len() != dim {
        return Err(CliError::Usage(format!("{name} needs {dim} entries, got {}", values.len())));
    }
    Ok(Some(Vector::from_vec(values)))
}

/// Scenario by name with the configured initial conditions and disturbance bound.
fn load_scenario(cfg: &RunConfig, a: &ScenarioArgs, fallback: Option<&str>) -> Result<Scenario, CliError> {
    let name = a
        .scenario
        .as_deref()
        .or(cfg.scenario.name.as_deref())
        .or(fallback)
        .ok_or_else(|| CliError::Usage(format!("no scenario given (one of {})", SCENARIO_NAMES.join(", "))))?;
    let mut s = scenario_by_name(name)?;
    let n = s.dims().n;
    if let Some(x0) = vector_arg(a.x0.as_deref(), cfg.scenario.x0.as_ref(), n, "x0")? {
        s.x0 = x0;
    }
    if let Some(xh) = vector_arg(a.xhat0.as_deref(), cfg.scenario.xhat0.as_ref(), n, "xhat0")? {
        s.xhat0 = xh;
    }
    if let Some(r) = a.w_bound.or(cfg.scenario.w_bound) {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(CliError::Usage(format!("w bound must be finite and nonnegative, got {r}")));
        }
        s.boxes.w = BoxSet::symmetric(s.dims().n_w, r);
    }
    Ok(s)
}

fn rho_from(rho2: f64) -> Result<f64, CliError> {
    if !(rho2 > 0.0 && rho2 < 1.0) {
        return Err(CliError::Usage(format!("rho2 must lie in (0, 1), got {rho2}")));
    }
    Ok(rho2.sqrt())
}

fn families(cfg: &RunConfig, a: &VerifyArgs, p: usize) -> Result<Vec<MultiplierFamily>, CliError> {
    let c = &cfg.certificate;
    let alpha = a.alpha.or(c.alpha).unwrap_or(0.0);
    let beta = a.beta.or(c.beta).unwrap_or(0.25);
    let mut out = Vec::new();
    if !a.static_only {
        let nu = a.zf_order.or(c.zf_order).unwrap_or(2);
        if nu > 0 {
            out.push(MultiplierFamily::ZamesFalb {
                nu,
                alpha,
                beta,
                symmetric: !a.nonsymmetric && c.symmetric.unwrap_or(true),
            });
        }
    }
    if a.static_only || a.with_static || c.with_static.unwrap_or(false) {
        out.push(MultiplierFamily::StaticPolytopic { alpha, beta });
    }
    if let Some([lo, hi]) = c.parametric.filter(|_| !a.static_only) {
        out.push(MultiplierFamily::Parametric {
            a: lo,
            b: hi,
            phi: FilterRealization::memoryless(p),
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("no multiplier family selected".into()));
    }
    Ok(out)
}

fn verify(cfg: &RunConfig, a: VerifyArgs) -> CliResult {
    let scenario = load_scenario(cfg, &a.scenario, None)?;
    let c = &cfg.certificate;
    let mut grid = match (&a.rho2, &c.rho2) {
        (Some(s), _) => parse_vector(s).map_err(|e| CliError::Usage(format!("--rho2: {e}")))?,
        (None, Some(r)) => r.values(),
        (None, None) => return Err(CliError::Usage("no rho2 given".into())),
    };
    for &r in &grid {
        rho_from(r)?;
    }
    grid.sort_by(f64::total_cmp);
    let opts = DetectOptions::default();
    let cert = if a.nominal {
        let mut last = None;
        let mut found = None;
        for &r in &grid {
            match verify_nominal(&scenario, r.sqrt(), &opts) {
                Ok(cert) => {
                    found = Some(cert);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        match (found, last) {
            (Some(cert), _) => cert,
            (None, Some(e)) => return Err(e.into()),
            (None, None) => return Err(CliError::Usage("empty rho2 grid".into())),
        }
    } else {
        let p = scenario.dims().p;
        let fams = if p == 0 { Vec::new() } else { families(cfg, &a, p)? };
        let template = |rho: f64| {
            if fams.is_empty() {
                Ok(empty_template())
            } else {
                template_from_families(&fams, p, rho).map_err(DetectError::from)
            }
        };
        search_rho(&scenario, &grid, template, &opts)?
    };
    let out = a
        .out
        .or_else(|| c.path.clone())
        .unwrap_or_else(|| PathBuf::from("certificate.json"));
    write_certificate(&cert, &out)?;
    println!("margin = {:e}", cert.margin);
    println!("rho2 = {}", cert.rho * cert.rho);
    println!("hash = {}", certificate_hash(&cert)?);
    println!("certificate written to {}", out.display());
    Ok(())
}

fn cert_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.certificate.path.clone())
        .ok_or_else(|| CliError::Usage("no certificate given (--cert)".into()))
}

fn horizon(cfg: &RunConfig, a: HorizonArgs) -> CliResult {
    let cert = read_certificate(&cert_path(cfg, a.cert)?)?;
    let eps = a.eps.or(cfg.mhe.epsilon).unwrap_or(0.1);
    let hb = min_horizon(&cert, eps)?;
    println!("N_min = {}", hb.n_min);
    println!("lambda_bar = {}", hb.lambda_bar);
    Ok(())
}

struct Designs {
    robust: MheDesign,
    robust_hash: String,
    standard: MheDesign,
    standard_hash: String,
}

/// Both estimators on the same scenario and horizon. The standard one uses a
/// nominal certificate at the same ρ.
fn build_designs(cfg: &RunConfig, a: &MheArgs) -> Result<(Designs, Scenario), CliError> {
    let cert = read_certificate(&cert_path(cfg, a.cert.clone())?)?;
    let scenario = load_scenario(cfg, &a.scenario, Some(&cert.scenario))?;
    let epsilon = a.eps.or(cfg.mhe.epsilon).unwrap_or(0.1);
    let xi = a.xi.or(cfg.mhe.xi).unwrap_or(500.0);
    let horizon = match a.horizon.or(cfg.mhe.horizon).unwrap_or(Horizon::Auto) {
        Horizon::Fixed(n) => n,
        Horizon::Auto => min_horizon(&cert, epsilon)?.n_min + 3,
    };
    let mhe_cfg = MheConfig {
        horizon,
        epsilon,
        xi,
        d_max: a.d_max.or(cfg.mhe.d_max),
        ..Default::default()
    };
    let nominal = verify_nominal(&scenario, cert.rho, &DetectOptions::default())?;
    let designs = Designs {
        robust: MheDesign::robust(&cert, &mhe_cfg, &scenario)?,
        robust_hash: certificate_hash(&cert)?,
        standard: MheDesign::standard(&nominal, &mhe_cfg, &scenario)?,
        standard_hash: certificate_hash(&nominal)?,
    };
    Ok((designs, scenario))
}

fn simulate(cfg: &RunConfig, a: SimulateArgs) -> CliResult {
    let steps = a.mhe.steps.or(cfg.mhe.steps).unwrap_or(100);
    let seed = a.seed.or(cfg.mhe.seed).unwrap_or(0);
    let kind = a
        .estimator
        .or_else(|| cfg.mhe.estimator.clone())
        .unwrap_or_else(|| "robust".into());
    let (d, scenario) = build_designs(cfg, &a.mhe)?;
    let (design, hash) = match kind.as_str() {
        "robust" => (&d.robust, &d.robust_hash),
        "standard" => (&d.standard, &d.standard_hash),
        other => return Err(CliError::Usage(format!("unknown estimator `{other}` (robust or standard)"))),
    };
    let csv_path = a
        .csv
        .or_else(|| cfg.output.csv.clone())
        .unwrap_or_else(|| PathBuf::from("trace.csv"));
    let svg_path = a.svg.or_else(|| cfg.output.svg.clone());
    let log_scale = a.log_scale || cfg.output.log_scale.unwrap_or(false);
    let emit = |csv: &str| -> CliResult {
        write_file(&csv_path, csv)?;
        if let Some(p) = &svg_path {
            if !csv.is_empty() {
                write_file(p, &svg::render_csv(csv, log_scale).map_err(CliError::Usage)?)?;
            }
        }
        Ok(())
    };
    let trace = match run_closed_loop(design, hash, steps, seed, &scenario.x0, &scenario.xhat0) {
        Ok(t) => t,
        Err(e) => {
            if let SimError::Estimator { trace, .. } = &e {
                emit(&trace.to_csv())?;
            }
            return Err(e.into());
        }
    };
    emit(&trace.to_csv())?;
    let (err, state) = trace.tail_means();
    println!("estimator = {kind}, N = {}, steps = {steps}, seed = {seed}", design.horizon);
    println!("mean_err_tail = {err:e}");
    println!("mean_state_tail = {state:e}");
    println!("fallbacks = {}", trace.fallbacks());
    println!("trace written to {}", csv_path.display());
    Ok(())
}

fn compare_cmd(cfg: &RunConfig, a: CompareArgs) -> CliResult {
    let steps = a.mhe.steps.or(cfg.mhe.steps).unwrap_or(100);
    let n = a.seeds.or(cfg.mhe.seeds).unwrap_or(10);
    if n == 0 {
        return Err(CliError::Usage("at least one seed is needed".into()));
    }
    let seeds: Vec<u64> = (0..n).collect();
    let (d, scenario) = build_designs(cfg, &a.mhe)?;
    let out = compare(
        (&d.robust, &d.robust_hash),
        (&d.standard, &d.standard_hash),
        steps,
        &seeds,
        &scenario.x0,
        &scenario.xhat0,
    )?;
    let path = a
        .out
        .or_else(|| cfg.output.summary.clone())
        .unwrap_or_else(|| PathBuf::from("summary.csv"));
    write_file(&path, &out.summary.to_csv())?;
    let s = &out.summary;
    println!("N = {}, steps = {steps}, seeds = {n}", d.robust.horizon);
    println!("median_err proposed = {:e}, standard = {:e}", s.median_err_proposed, s.median_err_standard);
    println!("median_state proposed = {:e}, standard = {:e}", s.median_state_proposed, s.median_state_standard);
    println!("summary written to {}", path.display());
    Ok(())
}

fn iqc_check(cfg: &RunConfig, a: IqcCheckArgs) -> CliResult {
    let cert: DetectabilityCertificate = read_certificate(&cert_path(cfg, a.cert)?)?;
    let name = a.scenario.as_deref().or(cfg.scenario.name.as_deref()).unwrap_or(&cert.scenario);
    let scenario = scenario_by_name(name)?;
    if scenario.dims().p != cert.multiplier.filter.p() {
        return Err(CliError::Usage("certificate multiplier does not match the scenario".into()));
    }
    let report = check_pointwise_iqc_empirical(&cert.multiplier, scenario.uncertainty.as_ref(), a.trajectories, a.length, a.seed);
    println!("min_iqc_value = {:e}", report.min_value);
    if let (Some(t), Some(k)) = (report.worst_trajectory, report.worst_step) {
        println!("worst trajectory = {t}, step = {k}");
    }
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let csv = read_file(&a.csv)?;
    write_file(&a.svg, &svg::render_csv(&csv, a.log_scale).map_err(CliError::Usage)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use robust_mhe::sdp::SdpError;

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(CliError::from(DetectError::Infeasible { margin: -1.0 }).code(), 2);
        assert_eq!(CliError::from(DetectError::Solver(SdpError::Unbounded)).code(), 3);
        assert_eq!(CliError::from(DetectError::HashMismatch).code(), 1);
        assert_eq!(CliError::from(MheError::InfeasibleWindow { lambda: 1.0 }).code(), 3);
        assert_eq!(CliError::from(MheError::InvalidConfig("n".into())).code(), 1);
        assert_eq!(CliError::from(SimError::InvalidInput("x".into())).code(), 1);
        assert_eq!(CliError::from(SimError::Unpaired(3)).code(), 3);
    }

    #[test]
    fn rho2_outside_the_unit_interval_is_a_usage_error() {
        assert!(rho_from(0.5).is_ok());
        for r in [0.0, 1.0, -0.2, f64::NAN] {
            assert_eq!(rho_from(r).unwrap_err().code(), 1);
        }
    }
}
