//! `maxar` command-line pipeline: simulate, fit, forecast, diagnose and score.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 data error.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use maxar::diagnostics::{
    all_pairs, detect_atom, empirical_crosscorr, fmadogram_curve, fmadogram_theta, ratio_field_cdf, write_ratio_cdf,
    DEFAULT_ATOM_THRESHOLD,
};
use maxar::forecast::{forecast_grid, write_ensembles};
use maxar::gev::{fit_marginals, load_marginals, save_marginals, standardize_field, GevFitOptions, MarginalModel};
use maxar::grid::{load_field, save_field, Scale, SpaceTimeField, SpatialGrid};
use maxar::inference::{bootstrap_ci, epsilon_sensitivity, fit_two_step, BootstrapOptions, FitOptions, FitResult, PARAM_NAMES};
use maxar::model::{simulate_st_with, theoretical_crosscorr, ModelParams, SimulateOptions, StPair};
use maxar::scoring::{evaluate_protocol, write_events, write_scores, ProtocolOptions, ScoreScale};
use maxar::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "maxar", version, about = "Space-time max-autoregressive Brown-Resnick fields")]
struct Cli {
    /// key=value file supplying defaults for the subcommand's flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate a field on a regular grid (Fréchet scale)
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Fit GEV margins and the space-time model by two-step pairwise likelihood
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Ensemble forecasts at every grid site
    #[command(args_override_self = true)]
    Forecast(ForecastArgs),
    /// Ratio-field CDFs, F-madogram curve and cross-correlation tables
    #[command(args_override_self = true)]
    Diagnose(DiagnoseArgs),
    /// CRPS and RMSE of forecasts over randomly chosen space-time events
    #[command(args_override_self = true)]
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Field CSV with columns lon,lat,t,value
    #[arg(long)]
    input: PathBuf,
    /// Marginal scale of the input: raw, frechet or gumbel
    #[arg(long, default_value = "raw")]
    scale: String,
    /// GEV table from `fit` (needed for raw-scale input)
    #[arg(long)]
    marginals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    m1: usize,
    #[arg(long, default_value_t = 20)]
    m2: usize,
    #[arg(long, default_value_t = 0.5)]
    mesh: f64,
    #[arg(long = "t-len", default_value_t = 200)]
    t_len: usize,
    #[arg(long, default_value_t = 2.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0.6)]
    hurst: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    tau1: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tau2: f64,
    #[arg(long, default_value_t = 0.8)]
    a: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Keep only the upwind history with a^K <= tol (exact simulation when absent)
    #[arg(long)]
    lookback_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    io: InputArgs,
    /// Output prefix: writes PREFIX.fit, PREFIX.gev.csv, PREFIX.eps.csv, PREFIX.bootstrap.csv
    #[arg(long)]
    output: PathBuf,
    /// Space-time mask radius in cells
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    /// Spatial mask radius in cells (defaults to --r)
    #[arg(long)]
    r_spatial: Option<f64>,
    /// Largest time lag in the space-time mask
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Exclusion radius of the parameter space around h/u
    #[arg(long)]
    epsilon: Option<f64>,
    /// Bootstrap replicates (0 skips the bootstrap; at least 50 otherwise)
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Skip the refits at epsilon/2 and 2*epsilon
    #[arg(long)]
    skip_eps_report: bool,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    io: InputArgs,
    /// Parameter file written by `fit`
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Base time, 1-based (defaults to the last time step)
    #[arg(long)]
    t0: Option<usize>,
    /// Lead times, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1")]
    lead: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    ensemble_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    io: InputArgs,
    /// Output prefix: writes PREFIX.ratio.csv, PREFIX.atoms.csv, PREFIX.madogram.csv, PREFIX.crosscorr.csv
    #[arg(long)]
    output: PathBuf,
    /// Lags as h1:h2:u in cells, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1:0:1,0:1:1,1:1:1")]
    lags: Vec<String>,
    /// Upper end of the z grid for ratio-field CDFs
    #[arg(long, default_value_t = 2.0)]
    z_max: f64,
    /// Fitted parameters; adds theoretical cross-correlations
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    io: InputArgs,
    #[arg(long)]
    fit: PathBuf,
    /// Score table CSV; per-event scores go to OUTPUT.events.csv
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
    lead: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    events: usize,
    #[arg(long, default_value_t = 500)]
    ensemble_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Score on the original data scale instead of the Gumbel scale
    #[arg(long)]
    raw_scale: bool,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let args: Vec<String> = std::env::args().collect();
    let args = match config::merge_config(args, &cmd) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.0);
            return ExitCode::from(2);
        }
    };
    let matches = match cmd.clone().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let meta = config::sidecar_text(name, &cmd, sub, cli.threads);
    let result = match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a, &meta),
        Cmd::Fit(a) => cmd_fit(a, &meta),
        Cmd::Forecast(a) => cmd_forecast(a, &meta),
        Cmd::Diagnose(a) => cmd_diagnose(a, &meta),
        Cmd::Score(a) => cmd_score(a, &meta),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            let code = match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Data => 4,
            };
            eprintln!("error ({}): {e}", e.kind());
            ExitCode::from(code)
        }
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn write_meta(output: &Path, meta: &str) -> Res<()> {
    std::fs::write(config::sidecar_path(output), meta)?;
    Ok(())
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Attaches the path to I/O errors from loading `path`.
fn at_path<T>(path: &Path, r: maxar::Result<T>) -> Res<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::Lib(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
        e => Failure::Lib(e),
    })
}

fn parse_scale(s: &str) -> Res<Scale> {
    Ok(Scale::parse(s)?)
}

/// Loads the input and brings it to the Fréchet scale. Returns the raw field
/// too when the input was on the raw scale.
fn load_frechet(io: &InputArgs) -> Res<(SpaceTimeField, Option<SpaceTimeField>, Option<MarginalModel>)> {
    let scale = parse_scale(&io.scale)?;
    let field = at_path(&io.input, load_field(&io.input, scale))?;
    let marginals = io.marginals.as_ref().map(|p| at_path(p, load_marginals(p))).transpose()?;
    match scale {
        Scale::Frechet => Ok((field, None, marginals)),
        Scale::Gumbel => Ok((field.map(Scale::Frechet, f64::exp)?, None, marginals)),
        Scale::Raw => {
            let m = marginals.ok_or_else(|| {
                usage("raw-scale input needs --marginals (the GEV table written by `fit`), or pass --scale frechet")
            })?;
            let z = standardize_field(&field, &m)?;
            Ok((z, Some(field), Some(m)))
        }
    }
}

fn cmd_simulate(a: &SimulateArgs, meta: &str) -> Res<()> {
    let grid = SpatialGrid::new(a.mesh, a.m1, a.m2, [0.0, 0.0])?;
    let params = ModelParams::new(a.kappa, a.hurst, [a.tau1, a.tau2], a.a)?;
    let opts = SimulateOptions {
        lookback_tol: a.lookback_tol,
    };
    let field = simulate_st_with(&grid, a.t_len, &params, a.seed, &opts)?;
    save_field(&field, &a.output)?;
    write_meta(&a.output, meta)
}

fn cmd_fit(a: &FitArgs, meta: &str) -> Res<()> {
    let scale = parse_scale(&a.io.scale)?;
    let field = at_path(&a.io.input, load_field(&a.io.input, scale))?;
    let gev_opts = GevFitOptions::default();
    let (z, raw, marginals) = match scale {
        Scale::Raw => {
            let m = fit_marginals(&field, None, &gev_opts);
            let failed = m.failed_sites();
            if !failed.is_empty() {
                eprintln!("warning: GEV fit failed at {} site(s); first: {}", failed.len(), failed[0] + 1);
            }
            let z = standardize_field(&field, &m)?;
            (z, Some(field), Some(m))
        }
        Scale::Frechet => (field, None, None),
        Scale::Gumbel => (field.map(Scale::Frechet, f64::exp)?, None, None),
    };
    let mut opts = FitOptions::for_grid(&z.grid);
    opts.r_spacetime = a.r;
    opts.r_spatial = a.r_spatial.unwrap_or(a.r);
    opts.p = a.p;
    opts.eps = a.epsilon;
    let fit = fit_two_step(&z, &opts)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    let fit_path = with_suffix(&a.output, ".fit");
    fit.save(&fit_path)?;
    if let Some(m) = &marginals {
        save_marginals(m, with_suffix(&a.output, ".gev.csv"))?;
    }
    if !a.skip_eps_report {
        let factors = [0.5, 1.0, 2.0];
        let fits = epsilon_sensitivity(&z, &opts, &factors)?;
        let mut w = create(&with_suffix(&a.output, ".eps.csv"))?;
        writeln!(w, "factor,epsilon,{},spacetime_loglik,boundary", PARAM_NAMES.join(","))?;
        for (f, r) in factors.iter().zip(&fits) {
            let p = r.params.as_array();
            writeln!(
                w,
                "{f},{:.10e},{},{:.10e},{}",
                r.eps,
                p.map(|v| format!("{v:.10e}")).join(","),
                r.spacetime_loglik,
                r.boundary
            )?;
        }
        w.flush()?;
    }
    if a.bootstrap > 0 {
        let (Some(raw), Some(m)) = (&raw, &marginals) else {
            return Err(usage("the bootstrap refits the margins and needs raw-scale input (--scale raw)"));
        };
        let boot = bootstrap_ci(raw, m, &fit, &opts, &BootstrapOptions::new(a.bootstrap, a.level, a.seed))?;
        if boot.failed > 0 {
            eprintln!("warning: {} of {} bootstrap replicates failed", boot.failed, a.bootstrap);
        }
        let mut w = create(&with_suffix(&a.output, ".bootstrap.csv"))?;
        boot.write_csv(&mut w)?;
        w.flush()?;
    }
    write_meta(&fit_path, meta)
}

fn cmd_forecast(a: &ForecastArgs, meta: &str) -> Res<()> {
    let (z, _, marginals) = load_frechet(&a.io)?;
    let fit = at_path(&a.fit, FitResult::load(&a.fit))?;
    let t0 = match a.t0 {
        Some(0) => return Err(usage("--t0 is 1-based")),
        Some(t) => t - 1,
        None => z.t_len - 1,
    };
    if a.lead.is_empty() {
        return Err(usage("--lead needs at least one lead time"));
    }
    let mut out = create(&a.output)?;
    for (k, &lead) in a.lead.iter().enumerate() {
        let ens = forecast_grid(&z, t0, lead, a.ensemble_size, &fit.params, marginals.as_ref(), a.seed)?;
        let missing = ens.iter().filter(|e| e.frechet.is_empty()).count();
        if missing > 0 {
            eprintln!("lead {lead}: {missing} site(s) have an off-grid source and no forecast");
        }
        let mut buf = Vec::new();
        write_ensembles(&z.grid, t0, &ens, &mut buf)?;
        let body = if k == 0 {
            &buf[..]
        } else {
            let nl = buf.iter().position(|b| *b == b'\n').map_or(buf.len(), |i| i + 1);
            &buf[nl..]
        };
        out.write_all(body)?;
    }
    out.flush()?;
    write_meta(&a.output, meta)
}

fn parse_lag(s: &str) -> Res<((i64, i64), usize)> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let bad = || usage(format!("lag '{s}' is not of the form h1:h2:u"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let h1 = parts[0].parse().map_err(|_| bad())?;
    let h2 = parts[1].parse().map_err(|_| bad())?;
    let u = parts[2].parse().map_err(|_| bad())?;
    Ok(((h1, h2), u))
}

fn cmd_diagnose(a: &DiagnoseArgs, meta: &str) -> Res<()> {
    let (z, _, _) = load_frechet(&a.io)?;
    let lags: Vec<((i64, i64), usize)> = a.lags.iter().map(|s| parse_lag(s)).collect::<Res<_>>()?;
    let fit = a.fit.as_ref().map(|p| at_path(p, FitResult::load(p))).transpose()?;
    let zs: Vec<f64> = (0..=200).map(|i| a.z_max * i as f64 / 200.0).collect();

    let mut ratio_out = create(&with_suffix(&a.output, ".ratio.csv"))?;
    let mut atoms = create(&with_suffix(&a.output, ".atoms.csv"))?;
    writeln!(atoms, "h1,h2,u,atom_location,atom_mass")?;
    let mut cc = create(&with_suffix(&a.output, ".crosscorr.csv"))?;
    writeln!(cc, "h1,h2,u,mean,lo,hi,n_sites,theoretical")?;
    for (k, &(h, u)) in lags.iter().enumerate() {
        if u > 0 {
            let cdf = ratio_field_cdf(&z, h, u)?;
            let mut buf = Vec::new();
            write_ratio_cdf(&cdf, &zs, &mut buf)?;
            let body = if k == 0 {
                &buf[..]
            } else {
                let nl = buf.iter().position(|b| *b == b'\n').map_or(buf.len(), |i| i + 1);
                &buf[nl..]
            };
            ratio_out.write_all(body)?;
            match detect_atom(&cdf, DEFAULT_ATOM_THRESHOLD) {
                Some((loc, mass)) => writeln!(atoms, "{},{},{u},{loc:.10e},{mass:.6}", h.0, h.1)?,
                None => writeln!(atoms, "{},{},{u},,", h.0, h.1)?,
            }
        }
        let r = empirical_crosscorr(&z, h, u)?;
        let theory = match &fit {
            Some(f) => {
                let hh = [h.0 as f64 * z.grid.mesh, h.1 as f64 * z.grid.mesh];
                format!("{:.6}", theoretical_crosscorr(StPair::new(hh, u), &f.params)?)
            }
            None => String::new(),
        };
        writeln!(cc, "{},{},{u},{:.6},{:.6},{:.6},{},{theory}", h.0, h.1, r.mean, r.lo, r.hi, r.n_sites)?;
    }
    ratio_out.flush()?;
    atoms.flush()?;
    cc.flush()?;

    let est = fmadogram_theta(&z, &all_pairs(z.n_sites()))?;
    let mut w = create(&with_suffix(&a.output, ".madogram.csv"))?;
    writeln!(w, "distance,theta,pairs")?;
    for (d, th, n) in fmadogram_curve(&est) {
        writeln!(w, "{d:.10e},{th:.6},{n}")?;
    }
    w.flush()?;
    write_meta(&with_suffix(&a.output, ".ratio.csv"), meta)
}

fn cmd_score(a: &ScoreArgs, meta: &str) -> Res<()> {
    let (z, _, marginals) = load_frechet(&a.io)?;
    let fit = at_path(&a.fit, FitResult::load(&a.fit))?;
    if a.raw_scale && marginals.is_none() {
        return Err(usage("--raw-scale needs --marginals"));
    }
    let opts = ProtocolOptions {
        leads: a.lead.clone(),
        n_events: a.events,
        members: a.ensemble_size,
        seed: a.seed,
        scale: if a.raw_scale { ScoreScale::Raw } else { ScoreScale::Gumbel },
    };
    let res = evaluate_protocol(&z, &fit.params, marginals.as_ref(), &opts)?;
    let mut w = create(&a.output)?;
    write_scores(&res.rows, &mut w)?;
    w.flush()?;
    let all: Vec<_> = res.events.into_iter().flatten().collect();
    let mut w = create(&with_suffix(&a.output, ".events.csv"))?;
    write_events(&all, &mut w)?;
    w.flush()?;
    write_meta(&a.output, meta)
}
