//! Command-line front end: simulate panels, fit marginal models, estimate
//! covariance parameters, run WCR, compute serial diagnostics and run
//! Monte Carlo scenarios.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use longcount::cov_estimation::{fit_covariance, DEFAULT_BINS};
use longcount::data::{load_panel, write_panel_to};
use longcount::diagnostics::{serial_diagnostic, working_variances, DEFAULT_DIAGNOSTIC_BINS};
use longcount::gee::fit_gee;
use longcount::harness::{preset, preset_names, run_scenario};
use longcount::rng::seeded;
use longcount::simulate::{simulate_panel, DesignSpec, GammaSpec, GoupParams};
use longcount::subject_level::{alpha_irls, alpha_ls, subject_covariates, IRLS_MAX_ITER, IRLS_TOL};
use longcount::wcr::run_wcr;
use longcount::{
    AlphaFit, CovMethod, CovParamEstimate, FitConfig, GeeFit, Panel, PanelSchema, SamplingScheme, VarianceKind,
    WorkingCov,
};

#[derive(Parser, Debug)]
#[command(name = "longcount", version, about = "Marginal analysis of long count sequences")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a panel from the GOUP model and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit the marginal model and write a JSON report.
    Fit(FitArgs),
    /// Estimate the GOUP covariance parameters and write them as JSON.
    EstimateCov(EstimateCovArgs),
    /// Within-cluster resampling; writes a JSON result.
    Wcr(WcrArgs),
    /// Binned serial-correlation diagnostic; writes CSV.
    Diagnose(DiagnoseArgs),
    /// Run a Monte Carlo preset and write the summary CSV.
    Scenario(ScenarioArgs),
}

#[derive(Args, Debug)]
struct PanelInput {
    /// Panel CSV with columns subject,time,offset,count[,trip_index] plus covariates.
    #[arg(long)]
    panel: PathBuf,
    /// Subject-level covariate columns (comma separated; empty for none).
    #[arg(long, value_delimiter = ',', default_value = "z")]
    z_cols: Vec<String>,
    /// Trip-level covariate columns (comma separated; empty for none).
    #[arg(long, value_delimiter = ',', default_value = "x")]
    x_cols: Vec<String>,
}

impl PanelInput {
    fn load(&self) -> Result<Panel> {
        let clean = |v: &[String]| v.iter().filter(|s| !s.is_empty()).cloned().collect();
        let schema = PanelSchema::with_covariates(clean(&self.z_cols), clean(&self.x_cols));
        Ok(load_panel(&self.panel, &schema)?)
    }
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output path, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

impl OutArg {
    fn writer(&self) -> Result<Box<dyn Write>> {
        if self.out.as_os_str() == "-" {
            Ok(Box::new(BufWriter::new(io::stdout().lock())))
        } else {
            let f = File::create(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }

    fn write_json<T: Serialize>(&self, value: &T) -> Result<()> {
        let mut w = self.writer()?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of subjects.
    #[arg(long)]
    n: usize,
    /// Trips per subject.
    #[arg(long)]
    k: usize,
    /// Target marginal mean count (sets the intercept).
    #[arg(long, default_value_t = 1.0)]
    mean: f64,
    /// Constant OU decay rate.
    #[arg(long, default_value_t = 50.0, conflicts_with_all = ["gamma_start", "gamma_end"])]
    gamma: f64,
    /// Decay rate at time 0 of a linearly varying rate.
    #[arg(long, requires = "gamma_end")]
    gamma_start: Option<f64>,
    /// Decay rate at time 1 of a linearly varying rate.
    #[arg(long, requires = "gamma_start")]
    gamma_end: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma2_b: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2_c: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2_e: f64,
    /// Effect of the binary subject covariate.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    alpha: f64,
    /// Effect of the trip-time covariate.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Working {
    Independence,
    Goup,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VarianceArg {
    Robust,
    Model,
    Both,
}

impl From<VarianceArg> for VarianceKind {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Robust => VarianceKind::Robust,
            VarianceArg::Model => VarianceKind::ModelBased,
            VarianceArg::Both => VarianceKind::Both,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AlphaArg {
    Ls,
    Irls,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    FseLs,
    FseIrls,
    NoFse,
}

impl From<MethodArg> for CovMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::FseLs => CovMethod::FseLs,
            MethodArg::FseIrls => CovMethod::FseIrls,
            MethodArg::NoFse => CovMethod::NoFse,
        }
    }
}

#[derive(Args, Debug)]
struct WorkingArgs {
    /// Include fixed subject effects.
    #[arg(long)]
    fse: bool,
    #[arg(long, value_enum, default_value = "independence")]
    working: Working,
    /// JSON covariance estimate, or `auto` to estimate it from the panel
    /// (FSE-LS with --fse, no-FSE otherwise).
    #[arg(long, default_value = "auto")]
    cov_params: String,
    #[arg(long, value_enum, default_value = "both")]
    variance: VarianceArg,
    /// Single scoring step from the working-independence fit (GOUP only).
    #[arg(long)]
    one_step: bool,
}

impl WorkingArgs {
    fn config(&self, panel: &Panel) -> Result<(FitConfig, Option<CovParamEstimate>)> {
        let variance = self.variance.into();
        if self.working == Working::Independence {
            if self.one_step {
                bail!("--one-step needs --working goup");
            }
            return Ok((FitConfig::independence(self.fse).with_variance(variance), None));
        }
        let cov = if self.cov_params == "auto" {
            let method = if self.fse { CovMethod::FseLs } else { CovMethod::NoFse };
            fit_covariance(panel, method, DEFAULT_BINS)?
        } else {
            let path = Path::new(&self.cov_params);
            let f = File::open(path).with_context(|| format!("opening covariance parameters {}", path.display()))?;
            serde_json::from_reader(f).with_context(|| format!("parsing covariance parameters {}", path.display()))?
        };
        let config = FitConfig {
            use_fse: self.fse,
            working_cov: WorkingCov::Supplied(cov.clone()),
            variance_kind: variance,
            one_step: self.one_step,
            ..FitConfig::default()
        };
        Ok((config, Some(cov)))
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: PanelInput,
    #[command(flatten)]
    working: WorkingArgs,
    /// Recover subject-level effects from the FSE estimates (needs --fse).
    #[arg(long, value_enum)]
    alpha: Option<AlphaArg>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EstimateCovArgs {
    #[command(flatten)]
    input: PanelInput,
    #[arg(long, value_enum, default_value = "fse-ls")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Single,
    Srs,
    Systematic,
    Sb,
}

#[derive(Args, Debug)]
struct WcrArgs {
    #[command(flatten)]
    input: PanelInput,
    #[arg(long, value_enum, default_value = "sb")]
    scheme: SchemeArg,
    /// Trips per subject for SRS.
    #[arg(long, default_value_t = 100)]
    r: usize,
    /// Block size for separated blocks.
    #[arg(long, default_value_t = 100)]
    block: usize,
    /// Separation (trips skipped) for separated blocks and systematic sampling.
    #[arg(long, default_value_t = 50)]
    sep: usize,
    /// Number of subsamples L.
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[command(flatten)]
    working: WorkingArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    input: PanelInput,
    #[arg(long, default_value_t = DEFAULT_DIAGNOSTIC_BINS)]
    bins: usize,
    /// Standardize with fixed-subject-effect fitted means.
    #[arg(long)]
    fse: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Preset name; see --list.
    #[arg(long, required_unless_present = "list")]
    preset: Option<String>,
    /// Shrinks trips per subject and replicates (1.0 = paper scale).
    #[arg(long, default_value_t = 0.2)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of replicates.
    #[arg(long)]
    replicates: Option<usize>,
    /// Print the preset names and exit.
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Serialize)]
struct FitReport<'a> {
    fit: &'a GeeFit,
    theta_names: Vec<String>,
    theta: Vec<f64>,
    se_robust: Option<Vec<f64>>,
    se_model: Option<Vec<f64>>,
    cov_params: Option<CovParamEstimate>,
    alpha: Option<AlphaFit>,
}

fn theta_se(fit: &GeeFit, kind: VarianceKind) -> Option<Vec<f64>> {
    fit.cov_theta(kind)
        .map(|m| m.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let gamma = match (args.gamma_start, args.gamma_end) {
        (Some(start), Some(end)) => GammaSpec::Linear { start, end },
        _ => GammaSpec::Constant(args.gamma),
    };
    let params = GoupParams {
        nu_star: 0.0,
        alpha: vec![args.alpha],
        beta: vec![args.beta],
        sigma2_b: args.sigma2_b,
        sigma2_c: args.sigma2_c,
        sigma2_e: args.sigma2_e,
        gamma,
    };
    let design = DesignSpec::driving_study(args.n, args.k, Some(args.mean));
    let panel = simulate_panel(&params, &design, &mut seeded(args.seed))?;
    let mut w = args.out.writer()?;
    write_panel_to(&panel, &mut w)?;
    w.flush()?;
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let panel = args.input.load()?;
    let (config, cov_params) = args.working.config(&panel)?;
    let fit = fit_gee(&panel, &config)?;
    if let Some(reason) = fit.na {
        log::warn!("fit is NA: {reason}");
    }
    if !fit.dropped_subjects.is_empty() {
        log::warn!(
            "subjects with only zero counts dropped from the fixed-effects fit: {}",
            fit.dropped_subjects.join(", ")
        );
    }
    let alpha = match args.alpha {
        None => None,
        Some(_) if !fit.use_fse => bail!("--alpha needs --fse"),
        Some(_) if fit.is_na() => None,
        Some(method) => {
            let nu = fit.nu_hat.as_deref().unwrap_or(&[]);
            let z = subject_covariates(&panel, &fit.fse_subjects);
            Some(match method {
                AlphaArg::Ls => alpha_ls(nu, &z)?,
                AlphaArg::Irls => {
                    let cov = fit
                        .cov_nu_given_nu
                        .as_ref()
                        .context("IRLS needs the covariance of the subject effects")?;
                    alpha_irls(nu, &z, cov, IRLS_MAX_ITER, IRLS_TOL)?
                }
            })
        }
    };
    let report = FitReport {
        theta_names: fit.theta_names(),
        theta: fit.theta(),
        se_robust: theta_se(&fit, VarianceKind::Robust),
        se_model: theta_se(&fit, VarianceKind::ModelBased),
        fit: &fit,
        cov_params,
        alpha,
    };
    args.out.write_json(&report)
}

fn estimate_cov(args: &EstimateCovArgs) -> Result<()> {
    let panel = args.input.load()?;
    let est = fit_covariance(&panel, args.method.into(), args.bins)?;
    if !est.converged {
        log::warn!("nonlinear regression did not converge; starting values reported");
    }
    args.out.write_json(&est)
}

fn wcr(args: &WcrArgs) -> Result<()> {
    let panel = args.input.load()?;
    let (config, _) = args.working.config(&panel)?;
    let scheme = match args.scheme {
        SchemeArg::Single => SamplingScheme::SingleTrip,
        SchemeArg::Srs => SamplingScheme::Srs { r: args.r },
        SchemeArg::Systematic => SamplingScheme::SystematicSeparated { s: args.sep },
        SchemeArg::Sb => SamplingScheme::SeparatedBlocks {
            block: args.block,
            sep: args.sep,
        },
    };
    let result = run_wcr(&panel, scheme, args.reps, &config, args.seed)?;
    if result.na_flag {
        log::warn!("every subsample fit was NA");
    } else if result.diag_negative {
        log::warn!("the combined variance has a negative diagonal entry");
    }
    args.out.write_json(&result)
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let panel = args.input.load()?;
    let fit = fit_gee(&panel, &FitConfig::independence(args.fse).with_variance(VarianceKind::ModelBased))?;
    if let Some(reason) = fit.na {
        bail!("working-independence fit failed: {reason}");
    }
    let fitted = fit.fitted_means(&panel);
    let variances = working_variances(&fitted, None, args.fse);
    let bins = serial_diagnostic(&panel, &fitted, &variances, args.bins)?;
    let mut w = args.out.writer()?;
    bins.write_csv_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> Result<()> {
    if args.list {
        let mut w = args.out.writer()?;
        for name in preset_names() {
            writeln!(w, "{name}")?;
        }
        w.flush()?;
        return Ok(());
    }
    let name = args.preset.as_deref().expect("clap enforces --preset");
    let mut scenario = preset(name, args.scale, args.seed)?;
    if let Some(r) = args.replicates {
        scenario.replicates = r;
    }
    log::info!(
        "{}: n={}, k={}, {} replicates",
        scenario.name,
        scenario.design.n_subjects,
        scenario.design.trips_per_subject,
        scenario.replicates
    );
    let summary = run_scenario(&scenario)?;
    let mut w = args.out.writer()?;
    summary.write_csv_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::EstimateCov(a) => estimate_cov(a),
        Command::Wcr(a) => wcr(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Scenario(a) => scenario(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
