//! Experiment plumbing: configuration, model construction, ensemble runs,
//! metrics and result files.
//!
//! A run is described by one [`ExperimentConfig`] (a TOML document with
//! `[model]`, `[sampler]`, `[run]`, `[output]` and optional `[sweep]`
//! sections). [`run_config`] executes it and returns a [`ResultRecord`] whose
//! config echo reproduces every metric bit-for-bit with the same binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{kl_to_target, mean_and_stderr, MomentSummary, Observable, ScalingSeries};
use crate::error::{Error, Result};
use crate::model::{
    blr_model, gaussian_quadratic_model, load_csv_dataset, misspecified_gaussian_model, quadratic_scalar_model,
    random_centers, synthetic_logistic_data, Dataset, GaussianQuadratic, GradientModel, LabelColumn,
    LogisticRegression, MisspecifiedGaussian, QuadraticScalar,
};
use crate::oracle::index_chain_stationary_tv;
use crate::samplers::{
    budget_audit, simulate_chain, ChainState, FrictionMode, MomentumInit, RunResult, SamplerConfig, SamplerKind,
    ThetaInit, VrAudit,
};
use crate::weights::{WeightContext, XPolicy};

/// Fixed CSV schema; one row per (sweep point, metric).
pub const CSV_HEADER: [&str; 12] = [
    "run_id", "sampler", "model", "h", "gamma", "M", "b", "K", "chains", "seed", "metric", "value",
];

/// Prefix of every environment-variable override understood by the CLI.
pub const ENV_PREFIX: &str = "EWSG_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    /// Quadratic potential with `n` standard-normal centers.
    #[default]
    #[serde(rename = "gaussian2d")]
    Gaussian2d,
    Blr,
    Misspecified,
    QuadraticScalar,
}

impl ModelName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian2d" | "gaussian" => Some(ModelName::Gaussian2d),
            "blr" => Some(ModelName::Blr),
            "misspecified" => Some(ModelName::Misspecified),
            "quadratic-scalar" => Some(ModelName::QuadraticScalar),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelName::Gaussian2d => "gaussian2d",
            ModelName::Blr => "blr",
            ModelName::Misspecified => "misspecified",
            ModelName::QuadraticScalar => "quadratic-scalar",
        }
    }
}

/// `[model]`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub name: ModelName,
    /// Number of potential terms (training rows for data models).
    pub n: usize,
    /// Parameter dimension for `gaussian2d`, feature count for synthetic BLR.
    pub dim: usize,
    /// Seed for centers, offsets and synthetic data.
    pub data_seed: u64,
    /// CSV file for `blr` (features + label) or `misspecified` (first column).
    pub path: Option<PathBuf>,
    pub label_column: LabelColumn,
    pub standardize: bool,
    pub prior_variance: f64,
    /// Held-out share of a CSV dataset; for synthetic BLR, test rows are
    /// generated in addition to the `n` training rows.
    pub test_fraction: f64,
    /// Explicit offsets for `quadratic-scalar`.
    pub offsets: Option<Vec<f64>>,
    /// Generating coefficients for synthetic BLR.
    pub theta_star: Option<Vec<f64>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            name: ModelName::Gaussian2d,
            n: 50,
            dim: 2,
            data_seed: 0,
            path: None,
            label_column: LabelColumn::Last,
            standardize: true,
            prior_variance: 10.0,
            test_fraction: 0.2,
            offsets: None,
            theta_star: None,
        }
    }
}

/// `[sampler]`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub name: SamplerKind,
    pub h: f64,
    pub gamma: f64,
    /// `None` means `√(2γ)` (unit temperature).
    pub sigma: Option<f64>,
    #[serde(rename = "M")]
    pub index_chain_len: usize,
    pub batch: usize,
    pub data_passes: u64,
    pub x_policy: XPolicy,
    pub seed: u64,
    /// `None` picks matrix friction for `ewsg-vr` and scalar otherwise.
    pub friction: Option<FrictionMode>,
    pub calibration_period: u64,
    pub persist_index: bool,
    pub init_theta: ThetaInit,
    pub init_momentum: MomentumInit,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            name: SamplerKind::Ewsg,
            h: 0.05,
            gamma: 10.0,
            sigma: None,
            index_chain_len: 1,
            batch: 1,
            data_passes: 30,
            x_policy: XPolicy::Recommended,
            seed: 0,
            friction: None,
            calibration_period: 1,
            persist_index: false,
            init_theta: ThetaInit::Zero,
            init_momentum: MomentumInit::Normal,
        }
    }
}

impl SamplerSpec {
    pub fn to_config(&self) -> SamplerConfig {
        let mut cfg = SamplerConfig::new(self.h, self.gamma)
            .with_index_chain(self.index_chain_len)
            .with_batch(self.batch)
            .with_passes(self.data_passes)
            .with_seed(self.seed)
            .with_x_policy(self.x_policy.clone())
            .with_init(self.init_theta.clone(), self.init_momentum.clone());
        if let Some(s) = self.sigma {
            cfg = cfg.with_sigma(s);
        }
        cfg.friction = self.friction.unwrap_or(if self.name == SamplerKind::EwsgVr {
            FrictionMode::Matrix
        } else {
            FrictionMode::Scalar
        });
        cfg.calibration_period = self.calibration_period;
        cfg.persist_index = self.persist_index;
        cfg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableKind {
    #[default]
    Variance,
    Mean,
}

/// What the MSE is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseReference {
    /// The analytic expectation under the target.
    #[default]
    Truth,
    /// The time average of a full-gradient chain driven by the same noise
    /// stream for the same number of steps.
    Coupled,
}

/// `[run]`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub chains: usize,
    /// Only every `thin`-th step enters time averages.
    pub thin: usize,
    /// Simulated time `T`; when set it replaces `sampler.data_passes`.
    pub time: Option<f64>,
    /// Leading fraction of steps dropped from time averages.
    pub burn_in: f64,
    /// Largest tolerated fraction of diverged chains.
    pub divergence_threshold: f64,
    /// Enables the MSE metric for this observable of one coordinate.
    pub observable: Option<ObservableKind>,
    pub component: usize,
    pub mse_reference: MseReference,
    /// Length of a frozen-state index chain whose law is compared with the
    /// exact weights at the first chain's final state.
    pub index_tv_steps: Option<usize>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            chains: 100,
            thin: 1,
            time: None,
            burn_in: 0.0,
            divergence_threshold: 0.1,
            observable: None,
            component: 0,
            mse_reference: MseReference::Truth,
            index_tv_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// `[output]`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Standard output when unset.
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    /// Step size; `run.time` (if set) is held fixed.
    #[default]
    H,
    /// Simulated time at fixed step size.
    Time,
}

/// `[sweep]`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// A complete, reproducible description of one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub sampler: SamplerSpec,
    pub run: RunSpec,
    pub output: OutputSpec,
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks everything that does not need the model to be built.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.path.is_none() && m.n == 0 {
            return Err(Error::config("model.n", "need at least one term"));
        }
        if let Some(p) = &m.path {
            if !p.is_file() {
                return Err(Error::config("model.path", format!("{} does not exist", p.display())));
            }
            if matches!(m.name, ModelName::Gaussian2d | ModelName::QuadraticScalar) {
                return Err(Error::config("model.path", format!("{} takes no data file", m.name.name())));
            }
        }
        if !(0.0..1.0).contains(&m.test_fraction) {
            return Err(Error::config("model.test_fraction", "must lie in [0, 1)"));
        }
        let r = &self.run;
        if r.chains == 0 {
            return Err(Error::config("run.chains", "need at least one chain"));
        }
        if r.thin == 0 {
            return Err(Error::config("run.thin", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&r.burn_in) {
            return Err(Error::config("run.burn_in", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&r.divergence_threshold) {
            return Err(Error::config("run.divergence_threshold", "must lie in [0, 1]"));
        }
        if let Some(t) = r.time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("run.time", format!("must be positive, got {t}")));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.len() < 3 {
                return Err(Error::config("sweep.values", "need at least 3 sweep points"));
            }
            if let Some(v) = s.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::config("sweep.values", format!("values must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Stable identifier derived from the crate version and every section
    /// that affects results (the output destination does not).
    pub fn run_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.output = OutputSpec::default();
        let echo = serde_json::to_string(&keyed).expect("config serializes");
        let digest = Sha256::digest(format!("{}\n{echo}", env!("CARGO_PKG_VERSION")));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A model built from its spec, plus any held-out data.
pub enum BuiltModel {
    Gaussian(GaussianQuadratic),
    Blr {
        model: LogisticRegression,
        test: Option<Dataset>,
    },
    Misspecified(MisspecifiedGaussian),
    QuadraticScalar(QuadraticScalar),
}

impl BuiltModel {
    pub fn as_model(&self) -> &dyn GradientModel {
        match self {
            BuiltModel::Gaussian(m) => m,
            BuiltModel::Blr { model, .. } => model,
            BuiltModel::Misspecified(m) => m,
            BuiltModel::QuadraticScalar(m) => m,
        }
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<BuiltModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    match spec.name {
        ModelName::Gaussian2d => {
            if spec.dim == 0 {
                return Err(Error::config("model.dim", "need d >= 1"));
            }
            Ok(BuiltModel::Gaussian(gaussian_quadratic_model(&random_centers(
                &mut rng, spec.n, spec.dim,
            ))?))
        }
        ModelName::Blr => {
            let (train, test) = match &spec.path {
                Some(p) => {
                    let data = load_csv_dataset(p, &spec.label_column, spec.standardize)?;
                    data.split(spec.test_fraction)
                }
                None => {
                    let star = match &spec.theta_star {
                        Some(s) => s.clone(),
                        None => (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    };
                    let n_test = (spec.n as f64 * spec.test_fraction / (1.0 - spec.test_fraction)).round() as usize;
                    let train = synthetic_logistic_data(&mut rng, spec.n, &star);
                    let test = synthetic_logistic_data(&mut rng, n_test, &star);
                    (train, test)
                }
            };
            let test = (!test.is_empty()).then_some(test);
            Ok(BuiltModel::Blr {
                model: blr_model(train, spec.prior_variance)?,
                test,
            })
        }
        ModelName::Misspecified => {
            let data = match &spec.path {
                Some(p) => read_first_column(p)?,
                None => {
                    let exp = Exp::new(1.0).expect("unit rate is valid");
                    (0..spec.n).map(|_| exp.sample(&mut rng)).collect()
                }
            };
            Ok(BuiltModel::Misspecified(misspecified_gaussian_model(data)?))
        }
        ModelName::QuadraticScalar => {
            let offsets = match &spec.offsets {
                Some(o) => o.clone(),
                None => (0..spec.n).map(|_| StandardNormal.sample(&mut rng)).collect(),
            };
            Ok(BuiltModel::QuadraticScalar(quadratic_scalar_model(offsets)?))
        }
    }
}

fn read_first_column(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = record.get(0).unwrap_or("").trim();
        match cell.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if row == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    row,
                    column: 0,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Data passes needed for `⌈T/h⌉` outer iterations.
pub fn passes_for_time(kind: SamplerKind, cfg: &SamplerConfig, n: usize, time: f64) -> u64 {
    let steps = ((time / cfg.h) * (1.0 - 1e-12)).ceil().max(1.0) as u64;
    let per = cfg.evals_per_step(kind, n);
    match kind {
        SamplerKind::EwsgVr => steps.div_ceil((n as u64).div_ceil(per)),
        _ => (steps * per).div_ceil(n as u64),
    }
}

/// Per-chain outcome of [`run_ensemble`].
#[derive(Clone, Debug)]
pub struct EnsembleRun {
    pub result: RunResult,
    /// Time average of the observable for each chain, when one was requested.
    pub time_averages: Option<Vec<f64>>,
}

/// Runs `chains` chains in parallel, accumulating streaming time averages of
/// `observable` over every `thin`-th step after the burn-in fraction.
pub fn run_ensemble<M: GradientModel + ?Sized>(
    model: &M,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    chains: usize,
    observable: Option<&Observable>,
    burn_in: f64,
    thin: usize,
) -> Result<EnsembleRun> {
    cfg.validate(kind, model.n_terms(), model.dim())?;
    if chains == 0 {
        return Err(Error::config("run.chains", "need at least one chain"));
    }
    let skip = (cfg.outer_steps(kind, model.n_terms()) as f64 * burn_in).floor() as u64;
    let thin = thin.max(1) as u64;
    let outcomes: Vec<(ChainState, Option<VrAudit>, f64)> = (0..chains as u64)
        .into_par_iter()
        .map(|chain| {
            let (mut sum, mut count) = (0.0, 0u64);
            let run = simulate_chain(model, kind, cfg, chain, |s, _| {
                if let Some(obs) = observable {
                    if s.step > skip && s.step % thin == 0 {
                        sum += obs.eval(&s.theta);
                        count += 1;
                    }
                }
            })?;
            let avg = if count > 0 { sum / count as f64 } else { f64::NAN };
            Ok((run.state, run.vr_audit, avg))
        })
        .collect::<Result<_>>()?;
    let mut vr_audit: Option<VrAudit> = None;
    let mut final_states = Vec::with_capacity(chains);
    let mut averages = Vec::with_capacity(chains);
    for (state, audit, avg) in outcomes {
        if let Some(a) = audit {
            vr_audit.get_or_insert_with(VrAudit::new).merge(&a);
        }
        final_states.push(state);
        averages.push(avg);
    }
    Ok(EnsembleRun {
        result: RunResult {
            kind,
            budget_ledger: final_states.iter().map(|s| s.grad_evals).sum(),
            diverged_count: final_states.iter().filter(|s| s.diverged).count(),
            final_states,
            trajectories: None,
            vr_audit,
        },
        time_averages: observable.map(|_| averages),
    })
}

/// Per-chain time averages of a full-gradient chain sharing each sampler
/// chain's noise stream and initial state and taking as many steps.
/// Overdamped samplers are paired with full-batch SGLD.
pub fn coupled_reference_averages<M: GradientModel + ?Sized>(
    model: &M,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    chains: usize,
    observable: &Observable,
    burn_in: f64,
    thin: usize,
) -> Result<Vec<f64>> {
    let n = model.n_terms();
    let steps = cfg.outer_steps(kind, n);
    let mut reference = cfg.clone();
    reference.friction = FrictionMode::Scalar;
    reference.batch = n;
    reference.data_passes = steps;
    let ref_kind = if kind.is_overdamped() {
        SamplerKind::Sgld
    } else {
        SamplerKind::FullGradient
    };
    let run = run_ensemble(model, ref_kind, &reference, chains, Some(observable), burn_in, thin)?;
    Ok(run.time_averages.expect("observable supplied"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

/// Metrics at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// The sampler settings actually run at this point.
    pub sampler: SamplerConfig,
    pub metrics: Vec<Metric>,
}

/// Log-log fit of one metric across the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub metric: String,
    pub series: ScalingSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub points: Vec<SweepPoint>,
    pub fits: Vec<SlopeFit>,
}

/// Everything a run produced, with the config that reproduces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub version: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    /// Effective sampler settings of a single run (unset for sweeps).
    pub sampler: Option<SamplerConfig>,
    pub metrics: Vec<Metric>,
    pub sweep: Option<SweepReport>,
    /// Excluded from CSV output so that reruns compare byte-for-byte.
    pub wall_time_seconds: f64,
}

impl ResultRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

impl SweepPoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

fn observable_for(config: &ExperimentConfig, model: &dyn GradientModel) -> Result<Option<(Observable, Option<f64>)>> {
    let Some(kind) = config.run.observable else {
        return Ok(None);
    };
    let j = config.run.component;
    if j >= model.dim() {
        return Err(Error::config(
            "run.component",
            format!("component {j} out of range for dimension {}", model.dim()),
        ));
    }
    let target = model.analytic_target();
    let needs_truth = config.run.mse_reference == MseReference::Truth;
    if needs_truth && target.is_none() {
        return Err(Error::config(
            "run.mse_reference",
            format!("model `{}` has no analytic target; use `coupled`", model.name()),
        ));
    }
    Ok(Some(match kind {
        ObservableKind::Mean => (Observable::Mean { component: j }, target.map(|t| t.mean[j])),
        ObservableKind::Variance => {
            // Centered at the target mean when known, else at zero.
            let center = target.map_or(0.0, |t| t.mean[j]);
            (
                Observable::Variance { component: j, center },
                target.map(|t| t.covariance[(j, j)]),
            )
        }
    }))
}

/// Sampler settings for a config, with `run.time` converted to data passes.
pub fn effective_sampler(config: &ExperimentConfig, n: usize) -> SamplerConfig {
    let mut cfg = config.sampler.to_config();
    if let Some(t) = config.run.time {
        cfg.data_passes = passes_for_time(config.sampler.name, &cfg, n, t);
    }
    cfg
}

fn evaluate(config: &ExperimentConfig, built: &BuiltModel, cfg: &SamplerConfig) -> Result<Vec<Metric>> {
    let model = built.as_model();
    let kind = config.sampler.name;
    let (n, d) = (model.n_terms(), model.dim());
    let run_spec = &config.run;
    let observable = observable_for(config, model)?;
    let ens = run_ensemble(
        model,
        kind,
        cfg,
        run_spec.chains,
        observable.as_ref().map(|(o, _)| o),
        run_spec.burn_in,
        run_spec.thin,
    )?;
    let result = &ens.result;
    let chains = run_spec.chains;
    if result.diverged_count as f64 > run_spec.divergence_threshold * chains as f64 {
        return Err(Error::DivergenceThreshold {
            diverged: result.diverged_count,
            chains,
            threshold: run_spec.divergence_threshold,
        });
    }
    let report = budget_audit(result, cfg, n)?;

    let mut metrics = Vec::new();
    let mut push = |name: String, value: f64| {
        if value.is_finite() {
            metrics.push(Metric { name, value });
        }
    };
    push("diverged".into(), result.diverged_count as f64);
    push("budget_total".into(), report.total as f64);
    push("budget_allowed_per_chain".into(), report.allowed_per_chain as f64);
    push("outer_steps".into(), cfg.outer_steps(kind, n) as f64);

    let finals = result.final_thetas();
    if finals.len() >= 2 {
        let summary = MomentSummary::from_samples(finals.iter().map(Vec::as_slice))?;
        for j in 0..d {
            push(format!("mean[{j}]"), summary.mean[j]);
        }
        for j in 0..d {
            push(format!("var[{j}]"), summary.covariance[(j, j)]);
        }
    }
    if let Some(target) = model.analytic_target() {
        if finals.len() >= d + 2 {
            match kl_to_target(finals.iter().map(Vec::as_slice), target) {
                Ok(kl) => push("kl".into(), kl),
                Err(Error::SingularCovariance { .. }) => log::warn!("ensemble covariance is singular; KL skipped"),
                Err(e) => return Err(e),
            }
        }
    }

    if let (Some((obs, truth)), Some(avgs)) = (&observable, &ens.time_averages) {
        let mut pairs: Vec<(f64, f64)> = match run_spec.mse_reference {
            MseReference::Truth => {
                let t = truth.expect("checked in observable_for");
                avgs.iter().map(|&a| (a, t)).collect()
            }
            MseReference::Coupled => {
                let refs =
                    coupled_reference_averages(model, kind, cfg, chains, obs, run_spec.burn_in, run_spec.thin)?;
                avgs.iter().copied().zip(refs).collect()
            }
        };
        pairs.retain(|(a, r)| a.is_finite() && r.is_finite());
        if !pairs.is_empty() {
            let sq: Vec<f64> = pairs.iter().map(|(a, r)| (a - r).powi(2)).collect();
            let mse = sq.iter().sum::<f64>() / sq.len() as f64;
            push("mse".into(), mse);
            if sq.len() >= 2 {
                push("mse_stderr".into(), mean_and_stderr(&sq)?.1);
            }
            let valid: Vec<f64> = pairs.iter().map(|(a, _)| *a).collect();
            push("time_average".into(), valid.iter().sum::<f64>() / valid.len() as f64);
        }
    }

    if let BuiltModel::Blr { model: blr, test: Some(test) } = built {
        if !finals.is_empty() {
            let (ll, acc) = predictive_scores(blr, test, &finals);
            push("test_log_lik".into(), ll);
            push("test_accuracy".into(), acc);
        }
    }

    if kind.is_weighted() && cfg.batch == 1 {
        if let Some(state) = result.final_states.iter().find(|s| !s.diverged) {
            push("delta".into(), final_state_delta(model, kind, cfg, state)?);
            if let (Some(steps), false) = (run_spec.index_tv_steps, kind.is_overdamped()) {
                push(
                    "index_tv".into(),
                    index_chain_stationary_tv(model, &state.theta, &state.momentum, cfg, steps, cfg.seed)?,
                );
            }
        }
    }

    if let Some(a) = &result.vr_audit {
        if a.updates > 0 {
            push("friction_updates".into(), a.updates as f64);
            push("friction_clamped".into(), a.clamped as f64);
            push("friction_min_eigenvalue".into(), a.min_eigenvalue);
            push("friction_max_asymmetry".into(), a.max_asymmetry);
        }
    }
    Ok(metrics)
}

/// Covariance-trace gap of the exact weights at a chain's final state.
fn final_state_delta(model: &dyn GradientModel, kind: SamplerKind, cfg: &SamplerConfig, state: &ChainState) -> Result<f64> {
    let d = model.dim();
    let mut x = vec![0.0; d];
    let scale = if kind.is_overdamped() {
        if let XPolicy::Constant(v) = cfg.x_policy {
            x.fill(v);
        }
        (cfg.h / 2.0).sqrt()
    } else {
        cfg.x_policy.underdamped_x(cfg.h, cfg.gamma, cfg.sigma, &state.momentum, &mut x);
        cfg.h.sqrt() / cfg.sigma
    };
    let ctx = WeightContext::new(x, scale, model.n_terms(), 1)?;
    crate::diagnostics::covariance_trace_delta(model, &state.theta, &ctx)
}

/// Mean held-out log predictive density and accuracy of the ensemble-averaged
/// predictive.
pub fn predictive_scores(model: &LogisticRegression, test: &Dataset, thetas: &[Vec<f64>]) -> (f64, f64) {
    let mut ll = 0.0;
    let mut correct = 0usize;
    for i in 0..test.len() {
        let p = thetas.iter().map(|t| model.predict(test.row(i), t)).sum::<f64>() / thetas.len() as f64;
        let y = test.label(i);
        let py = if y == 1.0 { p } else { 1.0 - p };
        ll += py.max(f64::MIN_POSITIVE).ln();
        if (p >= 0.5) == (y == 1.0) {
            correct += 1;
        }
    }
    let m = test.len().max(1) as f64;
    (ll / m, correct as f64 / m)
}

/// Runs a single experiment, ignoring any `[sweep]` section.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    let start = Instant::now();
    let built = build_model(&config.model)?;
    let cfg = effective_sampler(config, built.as_model().n_terms());
    log::info!(
        "{} on {}: h={} K={} chains={}",
        config.sampler.name,
        built.as_model().name(),
        cfg.h,
        cfg.data_passes,
        config.run.chains
    );
    let metrics = evaluate(config, &built, &cfg)?;
    Ok(ResultRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: config.run_id(),
        config: config.clone(),
        sampler: Some(cfg),
        metrics,
        sweep: None,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every sweep point and fits log-log slopes of `mse` and `kl` against
/// the swept parameter.
pub fn run_sweep(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "no [sweep] section"))?;
    let start = Instant::now();
    let built = build_model(&config.model)?;
    let n = built.as_model().n_terms();
    let mut points = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let mut point = config.clone();
        point.sweep = None;
        match sweep.parameter {
            SweepParameter::H => point.sampler.h = value,
            SweepParameter::Time => point.run.time = Some(value),
        }
        let cfg = effective_sampler(&point, n);
        log::info!("sweep point {value}: h={} K={}", cfg.h, cfg.data_passes);
        let metrics = evaluate(&point, &built, &cfg)?;
        points.push(SweepPoint {
            value,
            sampler: cfg,
            metrics,
        });
    }
    let mut fits = Vec::new();
    for name in ["mse", "kl"] {
        let values: Option<Vec<f64>> = points.iter().map(|p| p.metric(name).filter(|v| *v > 0.0)).collect();
        if let Some(values) = values {
            let series = ScalingSeries::new(sweep.values.clone(), values)?.fit()?;
            fits.push(SlopeFit {
                metric: name.to_string(),
                series,
            });
        }
    }
    Ok(ResultRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: config.run_id(),
        config: config.clone(),
        sampler: None,
        metrics: Vec::new(),
        sweep: Some(SweepReport {
            parameter: sweep.parameter,
            points,
            fits,
        }),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// [`run_sweep`] when a sweep is configured, else [`run_experiment`].
pub fn run_config(config: &ExperimentConfig) -> Result<ResultRecord> {
    if config.sweep.is_some() {
        run_sweep(config)
    } else {
        run_experiment(config)
    }
}

/// CSV rendering; floats use the shortest representation that parses back
/// to the same value.
pub fn render_csv(record: &ResultRecord) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    let c = &record.config;
    let model = c.model.name.name();
    let sampler = c.sampler.name.name();
    let mut row = |cfg: Option<&SamplerConfig>, metric: &str, value: f64| -> Result<()> {
        let (h, k) = match cfg {
            Some(s) => (s.h.to_string(), s.data_passes.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            record.run_id.as_str(),
            sampler,
            model,
            &h,
            &c.sampler.gamma.to_string(),
            &c.sampler.index_chain_len.to_string(),
            &c.sampler.batch.to_string(),
            &k,
            &c.run.chains.to_string(),
            &c.sampler.seed.to_string(),
            metric,
            &value.to_string(),
        ])?;
        Ok(())
    };
    for m in &record.metrics {
        row(record.sampler.as_ref(), &m.name, m.value)?;
    }
    if let Some(sweep) = &record.sweep {
        for p in &sweep.points {
            for m in &p.metrics {
                row(Some(&p.sampler), &m.name, m.value)?;
            }
        }
        for f in &sweep.fits {
            if let (Some(s), Some(r)) = (f.series.slope, f.series.residual) {
                row(None, &format!("slope({})", f.metric), s)?;
                row(None, &format!("residual({})", f.metric), r)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<csv buffer>"),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_json(record: &ResultRecord) -> Result<String> {
    let mut s = serde_json::to_string_pretty(record)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_json(text: &str) -> Result<ResultRecord> {
    Ok(serde_json::from_str(text)?)
}

/// Writes the record to `path`, or to standard output when `None`.
pub fn emit_results(record: &ResultRecord, format: OutputFormat, path: Option<&Path>) -> Result<()> {
    let text = match format {
        OutputFormat::Csv => render_csv(record)?,
        OutputFormat::Json => render_json(record)?,
    };
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => 2,
        Error::DivergenceThreshold { .. } => 3,
        Error::BudgetAudit(_) => 4,
        _ => 1,
    }
}
