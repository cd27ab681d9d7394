use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ewsg::harness::{
    emit_results, exit_code, run_config, ExperimentConfig, ModelName, MseReference, ObservableKind, OutputFormat,
    SweepParameter, SweepSpec,
};
use ewsg::samplers::{MomentumInit, SamplerKind, ThetaInit};
use ewsg::weights::XPolicy;
use ewsg::Error;

/// Ensemble runs of stochastic-gradient Langevin samplers.
///
/// Every flag can also be set through an environment variable with the
/// `EWSG_` prefix (shown per flag). Precedence, lowest first: built-in
/// defaults, `--config` file, environment, command line.
#[derive(Parser, Debug)]
#[command(name = "ewsg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment or a sweep and emit plot-ready results.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file with [model], [sampler], [run], [output], [sweep].
    #[arg(long, env = "EWSG_CONFIG")]
    config: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,

    /// gaussian2d | blr | misspecified | quadratic-scalar, or a CSV path (BLR).
    #[arg(long, env = "EWSG_MODEL")]
    model: Option<String>,
    /// Data file for models that take one.
    #[arg(long, env = "EWSG_DATA")]
    data: Option<PathBuf>,
    /// Number of potential terms for generated models.
    #[arg(long, env = "EWSG_N")]
    n: Option<usize>,
    #[arg(long, env = "EWSG_DATA_SEED")]
    data_seed: Option<u64>,

    /// fg | sghmc | ewsg | sgld | ewsg-od | ewsg-vr
    #[arg(long, env = "EWSG_SAMPLER")]
    sampler: Option<String>,
    #[arg(long, env = "EWSG_H")]
    h: Option<f64>,
    #[arg(long, env = "EWSG_GAMMA")]
    gamma: Option<f64>,
    /// Noise amplitude, or `auto` for √(2γ).
    #[arg(long, env = "EWSG_SIGMA")]
    sigma: Option<String>,
    /// Index-chain length.
    #[arg(long = "M", env = "EWSG_M")]
    m: Option<usize>,
    #[arg(long, env = "EWSG_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "EWSG_DATAPASSES")]
    datapasses: Option<u64>,
    #[arg(long, env = "EWSG_SEED")]
    seed: Option<u64>,
    /// recommended | zero | constant=<v> | momentum-kill
    #[arg(long, env = "EWSG_X_POLICY")]
    x_policy: Option<String>,
    /// Initial position: zero | target.
    #[arg(long, env = "EWSG_INIT")]
    init: Option<String>,
    /// Start from zero momentum instead of a standard-normal draw.
    #[arg(long, env = "EWSG_ZERO_MOMENTUM")]
    zero_momentum: bool,

    #[arg(long, env = "EWSG_CHAINS")]
    chains: Option<usize>,
    /// Only every j-th step enters time averages.
    #[arg(long, env = "EWSG_THIN")]
    thin: Option<usize>,
    /// Simulated time T; overrides --datapasses.
    #[arg(long, env = "EWSG_TIME")]
    time: Option<f64>,
    #[arg(long, env = "EWSG_BURN_IN")]
    burn_in: Option<f64>,
    /// Observable for the MSE metric: variance | mean (of --component).
    #[arg(long, env = "EWSG_OBSERVABLE")]
    observable: Option<String>,
    #[arg(long, env = "EWSG_COMPONENT")]
    component: Option<usize>,
    /// truth | coupled
    #[arg(long, env = "EWSG_MSE_REFERENCE")]
    mse_reference: Option<String>,
    #[arg(long, env = "EWSG_DIVERGENCE_THRESHOLD")]
    divergence_threshold: Option<f64>,

    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep_t", env = "EWSG_SWEEP_H")]
    sweep_h: Option<Vec<f64>>,
    /// Comma-separated simulated times.
    #[arg(long = "sweep-T", value_delimiter = ',', env = "EWSG_SWEEP_T")]
    sweep_t: Option<Vec<f64>>,

    /// Output file; standard output when omitted.
    #[arg(long, env = "EWSG_OUT")]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long, env = "EWSG_FORMAT")]
    format: Option<String>,
}

fn bad(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: msg.into(),
    }
}

fn effective_config(a: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.model {
        match ModelName::parse(m) {
            Some(name) => c.model.name = name,
            None => {
                c.model.name = ModelName::Blr;
                c.model.path = Some(PathBuf::from(m));
            }
        }
    }
    if let Some(p) = &a.data {
        c.model.path = Some(p.clone());
    }
    if let Some(v) = a.n {
        c.model.n = v;
    }
    if let Some(v) = a.data_seed {
        c.model.data_seed = v;
    }
    if let Some(s) = &a.sampler {
        c.sampler.name = SamplerKind::parse(s).ok_or_else(|| bad("sampler.name", format!("unknown sampler `{s}`")))?;
    }
    if let Some(v) = a.h {
        c.sampler.h = v;
    }
    if let Some(v) = a.gamma {
        c.sampler.gamma = v;
    }
    if let Some(s) = &a.sigma {
        c.sampler.sigma = match s.as_str() {
            "auto" => None,
            v => Some(v.parse().map_err(|_| bad("sampler.sigma", format!("expected a number or `auto`, got `{v}`")))?),
        };
    }
    if let Some(v) = a.m {
        c.sampler.index_chain_len = v;
    }
    if let Some(v) = a.batch {
        c.sampler.batch = v;
    }
    if let Some(v) = a.datapasses {
        c.sampler.data_passes = v;
    }
    if let Some(v) = a.seed {
        c.sampler.seed = v;
    }
    if let Some(s) = &a.x_policy {
        c.sampler.x_policy = XPolicy::parse(s).ok_or_else(|| bad("sampler.x_policy", format!("unknown policy `{s}`")))?;
    }
    if let Some(s) = &a.init {
        c.sampler.init_theta = match s.as_str() {
            "zero" => ThetaInit::Zero,
            "target" => ThetaInit::Target,
            _ => return Err(bad("sampler.init_theta", format!("expected zero or target, got `{s}`"))),
        };
    }
    if a.zero_momentum {
        c.sampler.init_momentum = MomentumInit::Zero;
    }
    if let Some(v) = a.chains {
        c.run.chains = v;
    }
    if let Some(v) = a.thin {
        c.run.thin = v;
    }
    if let Some(v) = a.time {
        c.run.time = Some(v);
    }
    if let Some(v) = a.burn_in {
        c.run.burn_in = v;
    }
    if let Some(s) = &a.observable {
        c.run.observable = Some(match s.as_str() {
            "variance" => ObservableKind::Variance,
            "mean" => ObservableKind::Mean,
            _ => return Err(bad("run.observable", format!("expected variance or mean, got `{s}`"))),
        });
    }
    if let Some(v) = a.component {
        c.run.component = v;
    }
    if let Some(s) = &a.mse_reference {
        c.run.mse_reference = match s.as_str() {
            "truth" => MseReference::Truth,
            "coupled" => MseReference::Coupled,
            _ => return Err(bad("run.mse_reference", format!("expected truth or coupled, got `{s}`"))),
        };
    }
    if let Some(v) = a.divergence_threshold {
        c.run.divergence_threshold = v;
    }
    if let Some(values) = &a.sweep_h {
        c.sweep = Some(SweepSpec {
            parameter: SweepParameter::H,
            values: values.clone(),
        });
    }
    if let Some(values) = &a.sweep_t {
        c.sweep = Some(SweepSpec {
            parameter: SweepParameter::Time,
            values: values.clone(),
        });
    }
    if let Some(p) = &a.out {
        c.output.path = Some(p.clone());
    }
    if let Some(f) = &a.format {
        c.output.format = match f.as_str() {
            "csv" => OutputFormat::Csv,
            "json" => OutputFormat::Json,
            _ => return Err(bad("output.format", format!("expected csv or json, got `{f}`"))),
        };
    }
    c.validate()?;
    Ok(c)
}

fn execute(a: &RunArgs) -> Result<(), Error> {
    let config = effective_config(a)?;
    if a.print_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let record = run_config(&config)?;
    log::info!("run {} finished in {:.2}s", record.run_id, record.wall_time_seconds);
    emit_results(&record, config.output.format, config.output.path.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("EWSG_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => execute(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
