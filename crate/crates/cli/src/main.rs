use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixrobust::asymptotics::{format_theta_star, kl_limit, LimitConfig};
use mixrobust::error::Error;
use mixrobust::family_spec::parse_family_spec;
use mixrobust::fit::{fit, FitOptions};
use mixrobust::io::{
    format_fit, format_histogram, format_predictions, format_status, parse_dataset, parse_fit,
    parse_start, run_dir_name,
};
use mixrobust::likelihood::QuadSettings;
use mixrobust::model::parse_model_formula;
use mixrobust::par::{with_workers, ExecMode};
use mixrobust::predict::{default_method, histogram, predict, PredictMethod};
use mixrobust::simlab::{
    run_scenario, run_slopes_scenario, write_outputs, OutputOptions, RunOptions, ScenarioConfig,
};

#[derive(Parser)]
#[command(
    name = "mixrobust",
    version,
    about = "Random-effects GLMMs under misspecified mixing distributions"
)]
struct Cli {
    /// Worker threads (default: available parallelism). Output does not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean, variance, skewness and kurtosis of a random-effects family.
    Moments {
        #[arg(long)]
        family: String,
    },
    /// Maximum-likelihood fit of one model to a data file.
    Fit(FitArgs),
    /// Empirical-Bayes predictions of the random effects from a saved fit.
    Predict(PredictArgs),
    /// Run a simulation scenario.
    Simulate(RunArgs),
    /// Run a random-slopes scenario and report fixed-effect medians.
    Slopes(RunArgs),
    /// Large-sample limit of a misspecified fit.
    Asymptotics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// e.g. `bernoulli ~ visit + bmi` or `bernoulli ~ z + t | t` (random slope on t)
    #[arg(long)]
    model: String,
    /// Random-effects family, e.g. `normal`, `exp`, `tukey(free)`
    #[arg(long)]
    ranef: String,
    #[arg(long)]
    quad_points: Option<usize>,
    /// `parameter,value` rows on the unconstrained scale.
    #[arg(long)]
    start: Option<PathBuf>,
    /// Estimates CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    /// `mode` or `mean`; discrete fits default to mean, others to mode.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    quad_points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a histogram of the predicted intercepts.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Desk-scale preset: `desk_replications`, no free-shape fits at the skipped sizes.
    #[arg(long)]
    desk: bool,
    /// Long-format replications file.
    #[arg(long)]
    tidy: bool,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Io(_)) { 3 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn quad(points: Option<usize>) -> QuadSettings {
    let mut q = QuadSettings::default();
    if let Some(p) = points {
        q.points = p;
    }
    q
}

/// Six significant digits.
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{}", v + 0.0);
    }
    let decimals = (5 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}")
}

fn moments(family: &str) -> Result<(), Failure> {
    let spec = parse_family_spec(family)?;
    let [mean, var, skew, kurt] = spec.family.moment_summary()?;
    println!("mean {}", sig6(mean));
    println!("variance {}", sig6(var));
    println!("skewness {}", sig6(skew));
    println!(
        "kurtosis {} (raw fourth standardized moment; normal = 3)",
        sig6(kurt)
    );
    Ok(())
}

fn run_fit(a: &FitArgs) -> Result<(), Failure> {
    let data = parse_dataset(&read(&a.data)?)?;
    let model = parse_model_formula(&a.model)?
        .resolve(&data.covariate_names, parse_family_spec(&a.ranef)?)?;
    let data = data.select_covariates(&model.covariate_names)?;
    let mut opts = FitOptions {
        quad: quad(a.quad_points),
        ..FitOptions::default()
    };
    if let Some(p) = &a.start {
        opts.start = Some(parse_start(&read(p)?, &model.param_names())?);
    }
    let f = fit(&data, &model, &opts)?;
    emit(a.out.as_deref(), &format_fit(&f))?;
    eprintln!("{}", format_status(&f));
    Ok(())
}

fn run_predict(a: &PredictArgs, exec: ExecMode) -> Result<(), Failure> {
    let f = parse_fit(&read(&a.fit)?)?;
    let data = parse_dataset(&read(&a.data)?)?.select_covariates(&f.model.covariate_names)?;
    let method = match &a.method {
        Some(m) => m.parse::<PredictMethod>()?,
        None => default_method(&f),
    };
    let p = predict(&data, &f, method, quad(a.quad_points), exec)?;
    emit(a.out.as_deref(), &format_predictions(&p))?;
    if let Some(h) = &a.histogram {
        emit(
            Some(h),
            &format_histogram(&histogram(&p.intercepts(), a.bins)),
        )?;
    }
    Ok(())
}

fn run_simulation(a: &RunArgs, exec: ExecMode, slopes: bool) -> Result<(), Failure> {
    let config = ScenarioConfig::parse(&read(&a.config)?)?;
    let opts = RunOptions { desk: a.desk, exec };
    let results = if slopes {
        run_slopes_scenario(&config, opts)?.0
    } else {
        run_scenario(&config, opts)?
    };
    let dir = write_outputs(
        &a.out_dir,
        &config,
        &results,
        OutputOptions {
            desk: a.desk,
            tidy: a.tidy,
        },
    )?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    let converged = results.iter().filter(|r| r.converged).count();
    eprintln!(
        "{} fits, {converged} converged, {failed} failed",
        results.len()
    );
    println!("{}", dir.display());
    Ok(())
}

fn run_asymptotics(config: &Path, out_dir: &Path) -> Result<(), Failure> {
    let cfg = LimitConfig::parse(&read(config)?)?;
    let problem = cfg.problem()?;
    let limit = kl_limit(&problem, None)?;
    let emitted = cfg.emit();
    let dir = out_dir.join(run_dir_name(cfg.base_seed, &emitted));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    emit(Some(&dir.join("config.cfg")), &emitted)?;
    let table = format_theta_star(&problem, &limit);
    emit(Some(&dir.join("theta_star.csv")), &table)?;
    eprintln!(
        "{{\"expected_loglik\": {}, \"status\": \"{:?}\", \"iterations\": {}, \"gradient_norm\": {}}}",
        limit.expected_loglik, limit.status, limit.iterations, limit.gradient_norm
    );
    print!("{table}");
    println!("{}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let workers = cli.workers;
    if workers == Some(0) {
        return Err(Failure {
            code: 2,
            message: "--workers must be at least 1".into(),
        });
    }
    let exec = ExecMode::from_workers(workers);
    with_workers(workers, move || match &cli.command {
        Command::Moments { family } => moments(family),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a, exec),
        Command::Simulate(a) => run_simulation(a, exec, false),
        Command::Slopes(a) => run_simulation(a, exec, true),
        Command::Asymptotics { config, out_dir } => run_asymptotics(config, out_dir),
    })
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
