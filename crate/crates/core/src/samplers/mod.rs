//! Langevin samplers driven by full, uniform stochastic, or exponentially
//! weighted stochastic gradients.
//!
//! All samplers share one Euler–Maruyama integrator and one budget rule: a
//! single term-gradient evaluation costs one unit, and a run with `K` data
//! passes may spend `K·n` units per chain.
//!
//! # Random streams
//!
//! Each chain owns two independent ChaCha8 streams, both seeded from the master
//! seed and selected by stream id:
//!
//! * stream `2·chain` drives the integrator (initial momentum, then `d` normals
//!   per step);
//! * stream `2·chain + 1` drives minibatch proposals and MH acceptances.
//!
//! Index-chain activity therefore never shifts the integrator noise, which is
//! what makes EWSG with `M = 0` reproduce SGHMC exactly. Adding chains does not
//! perturb the streams of existing ones.

mod integrator;
mod vr;

pub use integrator::{em_step_matrix_friction, em_step_uld};
pub use vr::{VrAudit, VrState, PSD_TOLERANCE};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientModel;
use crate::weights::{IndexState, WeightContext, XPolicy};

use integrator::{em_step_matrix_friction_in_place, em_step_overdamped_in_place, em_step_uld_in_place};

/// Position, momentum and bookkeeping of one Markov chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: Vec<f64>,
    /// Unused (all zero) for overdamped samplers.
    pub momentum: Vec<f64>,
    pub step: u64,
    pub grad_evals: u64,
    pub diverged: bool,
}

impl ChainState {
    pub fn new(theta: Vec<f64>, momentum: Vec<f64>) -> Self {
        ChainState {
            theta,
            momentum,
            step: 0,
            grad_evals: 0,
            diverged: false,
        }
    }

    #[inline]
    fn check_finite(&mut self) {
        if !self.theta.iter().chain(&self.momentum).all(|v| v.is_finite()) {
            self.diverged = true;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplerKind {
    /// Underdamped Langevin with the full gradient.
    #[serde(rename = "fg")]
    FullGradient,
    #[serde(rename = "sghmc")]
    Sghmc,
    #[serde(rename = "ewsg")]
    Ewsg,
    #[serde(rename = "sgld")]
    Sgld,
    #[serde(rename = "ewsg-od")]
    EwsgOverdamped,
    #[serde(rename = "ewsg-vr")]
    EwsgVr,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::FullGradient,
        SamplerKind::Sghmc,
        SamplerKind::Ewsg,
        SamplerKind::Sgld,
        SamplerKind::EwsgOverdamped,
        SamplerKind::EwsgVr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::FullGradient => "fg",
            SamplerKind::Sghmc => "sghmc",
            SamplerKind::Ewsg => "ewsg",
            SamplerKind::Sgld => "sgld",
            SamplerKind::EwsgOverdamped => "ewsg-od",
            SamplerKind::EwsgVr => "ewsg-vr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_overdamped(self) -> bool {
        matches!(self, SamplerKind::Sgld | SamplerKind::EwsgOverdamped)
    }

    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            SamplerKind::Ewsg | SamplerKind::EwsgOverdamped | SamplerKind::EwsgVr
        )
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrictionMode {
    #[default]
    Scalar,
    /// Per-step friction matrix; EWSG-VR only.
    Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaInit {
    #[default]
    Zero,
    /// An exact draw from the model's analytic target.
    Target,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumInit {
    #[default]
    Normal,
    Zero,
    Fixed(Vec<f64>),
}

/// Every tuning knob of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Step size `h`.
    pub h: f64,
    /// Friction `γ`.
    pub gamma: f64,
    /// Noise amplitude `σ`; the temperature is `σ²/(2γ)`.
    pub sigma: f64,
    /// Index-chain length `M`.
    pub index_chain_len: usize,
    /// Minibatch size `b`.
    pub batch: usize,
    /// Data passes `K`.
    pub data_passes: u64,
    pub x_policy: XPolicy,
    pub seed: u64,
    pub friction: FrictionMode,
    /// Variance-calibration period `L` in data passes (EWSG-VR).
    pub calibration_period: u64,
    /// Start each outer iteration's index chain from the previously accepted
    /// minibatch instead of a fresh uniform draw. Experimental.
    pub persist_index: bool,
    pub init_theta: ThetaInit,
    pub init_momentum: MomentumInit,
}

impl SamplerConfig {
    /// Defaults with `σ = √(2γ)` (unit temperature), `M = 1`, `b = 1`.
    pub fn new(h: f64, gamma: f64) -> Self {
        SamplerConfig {
            h,
            gamma,
            sigma: (2.0 * gamma).sqrt(),
            index_chain_len: 1,
            batch: 1,
            data_passes: 1,
            x_policy: XPolicy::Recommended,
            seed: 0,
            friction: FrictionMode::Scalar,
            calibration_period: 1,
            persist_index: false,
            init_theta: ThetaInit::Zero,
            init_momentum: MomentumInit::Normal,
        }
    }

    pub fn with_passes(mut self, k: u64) -> Self {
        self.data_passes = k;
        self
    }

    pub fn with_index_chain(mut self, m: usize) -> Self {
        self.index_chain_len = m;
        self
    }

    pub fn with_batch(mut self, b: usize) -> Self {
        self.batch = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_x_policy(mut self, p: XPolicy) -> Self {
        self.x_policy = p;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_init(mut self, theta: ThetaInit, momentum: MomentumInit) -> Self {
        self.init_theta = theta;
        self.init_momentum = momentum;
        self
    }

    /// Temperature implied by the fluctuation–dissipation relation `σ² = 2γT`.
    pub fn temperature(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.gamma)
    }

    pub fn validate(&self, kind: SamplerKind, n: usize, d: usize) -> Result<()> {
        let positive = |v: f64, field: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        positive(self.h, "sampler.h")?;
        if !kind.is_overdamped() {
            positive(self.gamma, "sampler.gamma")?;
            positive(self.sigma, "sampler.sigma")?;
        }
        if self.batch == 0 || self.batch > n {
            return Err(Error::config(
                "sampler.batch",
                format!("need 1 <= b <= n = {n}, got {}", self.batch),
            ));
        }
        if self.data_passes == 0 {
            return Err(Error::config("sampler.data_passes", "need K >= 1"));
        }
        if self.calibration_period == 0 {
            return Err(Error::config("sampler.calibration_period", "need L >= 1"));
        }
        if self.friction == FrictionMode::Matrix && kind != SamplerKind::EwsgVr {
            return Err(Error::config(
                "sampler.friction",
                "matrix friction is only available for ewsg-vr",
            ));
        }
        if kind.is_overdamped() && self.x_policy == XPolicy::MomentumKill {
            return Err(Error::config(
                "sampler.x_policy",
                "momentum-kill has no overdamped counterpart",
            ));
        }
        if let XPolicy::Constant(v) = self.x_policy {
            if !v.is_finite() {
                return Err(Error::config("sampler.x_policy", "constant must be finite"));
            }
        }
        for (init, field) in [
            (match &self.init_theta {
                ThetaInit::Fixed(v) => Some(v),
                _ => None,
            }, "sampler.init_theta"),
            (match &self.init_momentum {
                MomentumInit::Fixed(v) => Some(v),
                _ => None,
            }, "sampler.init_momentum"),
        ] {
            if let Some(v) = init {
                if v.len() != d {
                    return Err(Error::config(field, format!("expected {d} components, got {}", v.len())));
                }
            }
        }
        Ok(())
    }

    /// Term-gradient evaluations spent by one outer iteration (excluding
    /// EWSG-VR calibrations).
    pub fn evals_per_step(&self, kind: SamplerKind, n: usize) -> u64 {
        let b = self.batch as u64;
        match kind {
            SamplerKind::FullGradient => n as u64,
            SamplerKind::Sghmc | SamplerKind::Sgld => b,
            SamplerKind::Ewsg | SamplerKind::EwsgOverdamped | SamplerKind::EwsgVr => {
                (self.index_chain_len as u64 + 1) * b
            }
        }
    }

    /// Outer iterations per chain: `⌈K·n / evals_per_step⌉`, and for EWSG-VR
    /// `K·⌈n / ((M+1)·b)⌉`.
    pub fn outer_steps(&self, kind: SamplerKind, n: usize) -> u64 {
        let per = self.evals_per_step(kind, n);
        match kind {
            SamplerKind::EwsgVr => self.data_passes * (n as u64).div_ceil(per),
            _ => (self.data_passes * n as u64).div_ceil(per),
        }
    }

    /// Full-data calibrations performed by EWSG-VR.
    pub fn calibrations(&self, kind: SamplerKind) -> u64 {
        match kind {
            SamplerKind::EwsgVr => self.data_passes.div_ceil(self.calibration_period),
            _ => 0,
        }
    }
}

/// The two per-chain random streams.
pub fn chain_streams(seed: u64, chain_id: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * chain_id);
    let mut index = ChaCha8Rng::seed_from_u64(seed);
    index.set_stream(2 * chain_id + 1);
    (noise, index)
}

/// Sorted, distinct, uniformly drawn minibatch.
pub fn draw_minibatch<R: Rng + ?Sized>(rng: &mut R, n: usize, b: usize, out: &mut Vec<usize>) {
    out.clear();
    if b == 1 {
        out.push(rng.random_range(0..n));
    } else {
        out.extend(sample_indices(rng, n, b));
        out.sort_unstable();
    }
}

fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
}

/// Result of simulating one chain.
#[derive(Clone, Debug)]
pub struct ChainRun {
    pub state: ChainState,
    pub vr_audit: Option<VrAudit>,
}

/// Scratch buffers reused across steps.
struct Workspace {
    n: usize,
    grad: Vec<f64>,
    batch: Vec<usize>,
    batch_grads: Vec<f64>,
    estimate: Vec<f64>,
    proposal: Vec<usize>,
    proposal_grads: Vec<f64>,
    proposal_estimate: Vec<f64>,
    noise: Vec<f64>,
    scratch: Vec<f64>,
    full_batch: Vec<usize>,
}

impl Workspace {
    fn new(n: usize, d: usize, b: usize) -> Self {
        Workspace {
            n,
            grad: vec![0.0; d],
            batch: Vec::with_capacity(b),
            batch_grads: vec![0.0; b * d],
            estimate: vec![0.0; d],
            proposal: Vec::with_capacity(b),
            proposal_grads: vec![0.0; b * d],
            proposal_estimate: vec![0.0; d],
            noise: vec![0.0; d],
            scratch: vec![0.0; d],
            full_batch: (0..n).collect(),
        }
    }
}

/// `(n/b)·Σⱼ ∇V_{iⱼ}(θ)` summed in batch order; per-term gradients land in
/// `grads`.
#[inline]
fn batch_estimate<M: GradientModel + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &[usize],
    n: usize,
    grads: &mut [f64],
    estimate: &mut [f64],
) {
    let d = theta.len();
    estimate.fill(0.0);
    for (&i, g) in batch.iter().zip(grads.chunks_exact_mut(d)) {
        model.term_gradient(i, theta, g);
        for (e, gi) in estimate.iter_mut().zip(g.iter()) {
            *e += gi;
        }
    }
    let factor = n as f64 / batch.len() as f64;
    estimate.iter_mut().for_each(|e| *e *= factor);
}

/// As [`batch_estimate`] but keeps only the sum, reusing one `d`-sized buffer.
#[inline]
fn sum_estimate<M: GradientModel + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &[usize],
    n: usize,
    scratch: &mut [f64],
    estimate: &mut [f64],
) {
    estimate.fill(0.0);
    for &i in batch {
        model.term_gradient(i, theta, scratch);
        for (e, gi) in estimate.iter_mut().zip(scratch.iter()) {
            *e += gi;
        }
    }
    let factor = n as f64 / batch.len() as f64;
    estimate.iter_mut().for_each(|e| *e *= factor);
}

/// Runs the index chain for one outer iteration. On return `ws.batch`,
/// `ws.batch_grads` and `ws.estimate` hold the accepted minibatch.
#[allow(clippy::too_many_arguments)]
fn select_weighted<M: GradientModel + ?Sized>(
    model: &M,
    theta: &[f64],
    ctx: &WeightContext,
    chain_len: usize,
    persist: bool,
    first: bool,
    ws: &mut Workspace,
    index_rng: &mut ChaCha8Rng,
    state: &mut ChainState,
) {
    let (n, b) = (ws.n, ctx.b);
    if !(persist && !first) {
        draw_minibatch(index_rng, n, b, &mut ws.batch);
    }
    batch_estimate(model, theta, &ws.batch, n, &mut ws.batch_grads, &mut ws.estimate);
    state.grad_evals += b as u64;
    if chain_len == 0 {
        return;
    }
    let mut current = IndexState {
        indices: std::mem::take(&mut ws.batch),
        estimate: std::mem::take(&mut ws.estimate),
        log_score: 0.0,
    };
    current.log_score = ctx.score_of_estimate(&current.estimate);
    for _ in 0..chain_len {
        draw_minibatch(index_rng, n, b, &mut ws.proposal);
        batch_estimate(model, theta, &ws.proposal, n, &mut ws.proposal_grads, &mut ws.proposal_estimate);
        state.grad_evals += b as u64;
        let u: f64 = index_rng.random();
        if current.step_in_place(&ws.proposal, &ws.proposal_estimate, ctx, u) {
            std::mem::swap(&mut ws.batch_grads, &mut ws.proposal_grads);
        }
    }
    ws.batch = current.indices;
    ws.estimate = current.estimate;
}

fn initial_state<M: GradientModel + ?Sized>(
    model: &M,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    noise_rng: &mut ChaCha8Rng,
) -> Result<ChainState> {
    let d = model.dim();
    let theta = match &cfg.init_theta {
        ThetaInit::Zero => vec![0.0; d],
        ThetaInit::Fixed(v) => v.clone(),
        ThetaInit::Target => model
            .analytic_target()
            .ok_or_else(|| Error::config("sampler.init_theta", "model has no analytic target"))?
            .sample(noise_rng),
    };
    let momentum = if kind.is_overdamped() {
        vec![0.0; d]
    } else {
        match &cfg.init_momentum {
            MomentumInit::Normal => {
                let mut r = vec![0.0; d];
                fill_normal(noise_rng, &mut r);
                r
            }
            MomentumInit::Zero => vec![0.0; d],
            MomentumInit::Fixed(v) => v.clone(),
        }
    };
    Ok(ChainState::new(theta, momentum))
}

/// Simulates one chain, calling `observer(state, batch)` after every outer
/// iteration with the minibatch whose gradient drove the step.
pub fn simulate_chain<M, F>(
    model: &M,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    chain_id: u64,
    mut observer: F,
) -> Result<ChainRun>
where
    M: GradientModel + ?Sized,
    F: FnMut(&ChainState, &[usize]),
{
    let (n, d) = (model.n_terms(), model.dim());
    cfg.validate(kind, n, d)?;
    let (mut noise_rng, mut index_rng) = chain_streams(cfg.seed, chain_id);
    let mut state = initial_state(model, kind, cfg, &mut noise_rng)?;
    let mut ws = Workspace::new(n, d, cfg.batch);
    let steps = cfg.outer_steps(kind, n);
    let (h, gamma, sigma) = (cfg.h, cfg.gamma, cfg.sigma);

    let scale = if kind.is_overdamped() {
        (h / 2.0).sqrt()
    } else {
        h.sqrt() / sigma
    };
    let mut ctx = WeightContext {
        x: vec![0.0; d],
        scale,
        n,
        b: cfg.batch,
    };

    match kind {
        SamplerKind::FullGradient | SamplerKind::Sghmc | SamplerKind::Sgld => {
            for _ in 0..steps {
                if kind == SamplerKind::FullGradient {
                    sum_estimate(model, &state.theta, &ws.full_batch, n, &mut ws.grad, &mut ws.estimate);
                    state.grad_evals += n as u64;
                } else {
                    draw_minibatch(&mut index_rng, n, cfg.batch, &mut ws.batch);
                    batch_estimate(model, &state.theta, &ws.batch, n, &mut ws.batch_grads, &mut ws.estimate);
                    state.grad_evals += cfg.batch as u64;
                }
                fill_normal(&mut noise_rng, &mut ws.noise);
                if kind == SamplerKind::Sgld {
                    em_step_overdamped_in_place(&mut state, &ws.estimate, h, &ws.noise);
                } else {
                    em_step_uld_in_place(&mut state, &ws.estimate, h, gamma, sigma, &ws.noise);
                }
                let batch: &[usize] = if kind == SamplerKind::FullGradient { &ws.full_batch } else { &ws.batch };
                observer(&state, batch);
                if state.diverged {
                    break;
                }
            }
            Ok(ChainRun { state, vr_audit: None })
        }
        SamplerKind::Ewsg | SamplerKind::EwsgOverdamped => {
            for k in 0..steps {
                if kind == SamplerKind::Ewsg {
                    cfg.x_policy.underdamped_x(h, gamma, sigma, &state.momentum, &mut ctx.x);
                } else {
                    overdamped_x(&cfg.x_policy, &mut ctx.x);
                }
                let theta = std::mem::take(&mut state.theta);
                select_weighted(
                    model,
                    &theta,
                    &ctx,
                    cfg.index_chain_len,
                    cfg.persist_index,
                    k == 0,
                    &mut ws,
                    &mut index_rng,
                    &mut state,
                );
                state.theta = theta;
                fill_normal(&mut noise_rng, &mut ws.noise);
                if kind == SamplerKind::Ewsg {
                    em_step_uld_in_place(&mut state, &ws.estimate, h, gamma, sigma, &ws.noise);
                } else {
                    em_step_overdamped_in_place(&mut state, &ws.estimate, h, &ws.noise);
                }
                observer(&state, &ws.batch);
                if state.diverged {
                    break;
                }
            }
            Ok(ChainRun { state, vr_audit: None })
        }
        SamplerKind::EwsgVr => {
            let temperature = cfg.temperature();
            let mut vr = VrState::new(n, d, gamma);
            let mut audit = VrAudit::new();
            let per_pass = (n as u64).div_ceil(cfg.evals_per_step(kind, n));
            let mut first = true;
            'passes: for pass in 0..cfg.data_passes {
                if pass % cfg.calibration_period == 0 {
                    let all = model.all_term_gradients(&state.theta);
                    state.grad_evals += n as u64;
                    vr.calibrate(&state.theta, all);
                }
                for _ in 0..per_pass {
                    cfg.x_policy.underdamped_x(h, gamma, sigma, &state.momentum, &mut ctx.x);
                    let theta = std::mem::take(&mut state.theta);
                    select_weighted(
                        model,
                        &theta,
                        &ctx,
                        cfg.index_chain_len,
                        cfg.persist_index,
                        first,
                        &mut ws,
                        &mut index_rng,
                        &mut state,
                    );
                    first = false;
                    state.theta = theta;
                    fill_normal(&mut noise_rng, &mut ws.noise);
                    em_step_matrix_friction_in_place(
                        &mut state,
                        &ws.estimate,
                        h,
                        &vr.friction,
                        sigma,
                        &ws.noise,
                        &mut ws.scratch,
                    );
                    // Corrections use the term gradients at the pre-step θ.
                    vr.correct(&ws.batch, &ws.batch_grads);
                    vr.update_friction(sigma, h, temperature, &mut audit);
                    observer(&state, &ws.batch);
                    if state.diverged {
                        break 'passes;
                    }
                }
            }
            Ok(ChainRun {
                state,
                vr_audit: Some(audit),
            })
        }
    }
}

/// The overdamped weight hyperparameter is the standardized position
/// increment; with no increment information the natural choice is zero.
fn overdamped_x(policy: &XPolicy, out: &mut [f64]) {
    match policy {
        XPolicy::Constant(v) => out.fill(*v),
        _ => out.fill(0.0),
    }
}

/// Thinned record of one chain: the state after every `thin`-th step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub thin: usize,
    pub dim: usize,
    /// Row-major `samples × d`.
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.theta.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta_at(&self, i: usize) -> &[f64] {
        &self.theta[i * self.dim..(i + 1) * self.dim]
    }

    pub fn thetas(&self) -> impl Iterator<Item = &[f64]> {
        self.theta.chunks_exact(self.dim)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Record every `thin`-th state when set.
    pub thin: Option<usize>,
}

/// Outcome of an ensemble run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub kind: SamplerKind,
    pub final_states: Vec<ChainState>,
    pub trajectories: Option<Vec<Trajectory>>,
    /// Total term-gradient evaluations over all chains.
    pub budget_ledger: u64,
    pub diverged_count: usize,
    pub vr_audit: Option<VrAudit>,
}

impl RunResult {
    /// Final positions of the chains that did not diverge.
    pub fn final_thetas(&self) -> Vec<Vec<f64>> {
        self.final_states
            .iter()
            .filter(|s| !s.diverged)
            .map(|s| s.theta.clone())
            .collect()
    }
}

/// Runs `chains` independent chains in parallel; results are ordered by chain
/// id regardless of completion order.
pub fn run<M: GradientModel + ?Sized>(
    model: &M,
    kind: SamplerKind,
    cfg: &SamplerConfig,
    chains: usize,
    options: &RunOptions,
) -> Result<RunResult> {
    cfg.validate(kind, model.n_terms(), model.dim())?;
    if chains == 0 {
        return Err(Error::config("run.chains", "need at least one chain"));
    }
    let d = model.dim();
    let thin = options.thin;
    if thin == Some(0) {
        return Err(Error::config("run.thin", "must be >= 1"));
    }
    let outcomes: Vec<(ChainRun, Option<Trajectory>)> = (0..chains as u64)
        .into_par_iter()
        .map(|chain| {
            let mut traj = thin.map(|t| Trajectory {
                thin: t,
                dim: d,
                theta: Vec::new(),
                momentum: Vec::new(),
            });
            let run = simulate_chain(model, kind, cfg, chain, |s, _| {
                if let Some(tr) = traj.as_mut() {
                    if s.step % tr.thin as u64 == 0 {
                        tr.theta.extend_from_slice(&s.theta);
                        tr.momentum.extend_from_slice(&s.momentum);
                    }
                }
            })?;
            Ok((run, traj))
        })
        .collect::<Result<_>>()?;
    let mut audit: Option<VrAudit> = None;
    let mut final_states = Vec::with_capacity(chains);
    let mut trajectories = thin.map(|_| Vec::with_capacity(chains));
    for (run, traj) in outcomes {
        if let Some(a) = run.vr_audit {
            audit.get_or_insert_with(VrAudit::new).merge(&a);
        }
        final_states.push(run.state);
        if let (Some(all), Some(t)) = (trajectories.as_mut(), traj) {
            all.push(t);
        }
    }
    Ok(RunResult {
        kind,
        budget_ledger: final_states.iter().map(|s| s.grad_evals).sum(),
        diverged_count: final_states.iter().filter(|s| s.diverged).count(),
        final_states,
        trajectories,
        vr_audit: audit,
    })
}

pub fn run_full_gradient_uld<M: GradientModel + ?Sized>(model: &M, cfg: &SamplerConfig, chains: usize) -> Result<RunResult> {
    run(model, SamplerKind::FullGradient, cfg, chains, &RunOptions::default())
}

pub fn run_sghmc<M: GradientModel + ?Sized>(model: &M, cfg: &SamplerConfig, chains: usize) -> Result<RunResult> {
    run(model, SamplerKind::Sghmc, cfg, chains, &RunOptions::default())
}

pub fn run_ewsg<M: GradientModel + ?Sized>(model: &M, cfg: &SamplerConfig, chains: usize) -> Result<RunResult> {
    run(model, SamplerKind::Ewsg, cfg, chains, &RunOptions::default())
}

/// SGLD when `weighted` is false, overdamped EWSG otherwise.
pub fn run_overdamped<M: GradientModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    chains: usize,
    weighted: bool,
) -> Result<RunResult> {
    let kind = if weighted {
        SamplerKind::EwsgOverdamped
    } else {
        SamplerKind::Sgld
    };
    run(model, kind, cfg, chains, &RunOptions::default())
}

pub fn run_ewsg_vr<M: GradientModel + ?Sized>(model: &M, cfg: &SamplerConfig, chains: usize) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.friction = FrictionMode::Matrix;
    run(model, SamplerKind::EwsgVr, &cfg, chains, &RunOptions::default())
}

/// Gradient-evaluation accounting for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub sampler: SamplerKind,
    pub per_chain: Vec<u64>,
    /// `K·n`, plus `n` per calibration for EWSG-VR.
    pub allowed_per_chain: u64,
    /// One outer iteration's worth of evaluations.
    pub slack_per_chain: u64,
    pub total: u64,
}

/// Checks every chain against the `K·n` budget (plus one outer iteration of
/// rounding slack).
pub fn budget_audit(result: &RunResult, cfg: &SamplerConfig, n: usize) -> Result<BudgetReport> {
    let kind = result.kind;
    let allowed = cfg.data_passes * n as u64 + cfg.calibrations(kind) * n as u64;
    let slack = cfg.evals_per_step(kind, n);
    let per_chain: Vec<u64> = result.final_states.iter().map(|s| s.grad_evals).collect();
    if let Some((chain, used)) = per_chain.iter().enumerate().find(|(_, &e)| e > allowed + slack) {
        return Err(Error::BudgetAudit(format!(
            "{kind} chain {chain} used {used} evaluations, allowed {allowed} + {slack}"
        )));
    }
    let total: u64 = per_chain.iter().sum();
    if total != result.budget_ledger {
        return Err(Error::BudgetAudit(format!(
            "ledger {} disagrees with per-chain sum {total}",
            result.budget_ledger
        )));
    }
    Ok(BudgetReport {
        sampler: kind,
        per_chain,
        allowed_per_chain: allowed,
        slack_per_chain: slack,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_quadratic_model, quadratic_scalar_model, random_centers};

    fn gaussian(n: usize) -> crate::model::GaussianQuadratic {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        gaussian_quadratic_model(&random_centers(&mut rng, n, 2)).unwrap()
    }

    #[test]
    fn step_counts_follow_budget() {
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(30);
        assert_eq!(cfg.outer_steps(SamplerKind::Sghmc, 50), 1500);
        assert_eq!(cfg.outer_steps(SamplerKind::Ewsg, 50), 750);
        assert_eq!(cfg.outer_steps(SamplerKind::FullGradient, 50), 30);
        let cfg = cfg.with_index_chain(2);
        assert_eq!(cfg.outer_steps(SamplerKind::Ewsg, 50), 500);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(3).with_index_chain(2);
        // ⌈50/3⌉ = 17 per pass.
        assert_eq!(cfg.outer_steps(SamplerKind::EwsgVr, 50), 51);
    }

    #[test]
    fn sghmc_and_ewsg_budgets_are_exact() {
        let model = gaussian(50);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(30).with_seed(4);
        let r = run_sghmc(&model, &cfg, 3).unwrap();
        let report = budget_audit(&r, &cfg, 50).unwrap();
        assert!(report.per_chain.iter().all(|&e| e == 1500));
        let r = run_ewsg(&model, &cfg, 3).unwrap();
        let report = budget_audit(&r, &cfg, 50).unwrap();
        assert!(report.per_chain.iter().all(|&e| e == 1500));
        let r = run_full_gradient_uld(&model, &cfg, 2).unwrap();
        assert_eq!(r.budget_ledger, 30 * 50 * 2);
    }

    #[test]
    fn vr_budget_counts_calibrations() {
        let model = gaussian(50);
        let cfg = SamplerConfig::new(0.01, 10.0).with_passes(4).with_seed(4);
        let r = run_ewsg_vr(&model, &cfg, 2).unwrap();
        // 4 calibrations of 50 plus 4 passes of 25 steps × 2 evaluations.
        assert!(r.final_states.iter().all(|s| s.grad_evals == 4 * 50 + 4 * 50));
        budget_audit(&r, &{
            let mut c = cfg.clone();
            c.friction = FrictionMode::Matrix;
            c
        }, 50)
        .unwrap();
    }

    #[test]
    fn audit_rejects_overspend() {
        let model = gaussian(10);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(2);
        let mut r = run_sghmc(&model, &cfg, 1).unwrap();
        r.final_states[0].grad_evals += 5;
        r.budget_ledger += 5;
        assert!(matches!(budget_audit(&r, &cfg, 10), Err(Error::BudgetAudit(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let model = gaussian(20);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(5).with_seed(77);
        let opts = RunOptions { thin: Some(3) };
        for kind in SamplerKind::ALL {
            let mut c = cfg.clone();
            if kind == SamplerKind::EwsgVr {
                c.friction = FrictionMode::Matrix;
            }
            if kind.is_overdamped() {
                c.h = 5e-3;
            }
            let a = run(&model, kind, &c, 3, &opts).unwrap();
            let b = run(&model, kind, &c, 3, &opts).unwrap();
            assert_eq!(a.final_states, b.final_states, "{kind}");
            assert_eq!(a.trajectories, b.trajectories, "{kind}");
        }
    }

    fn positions(model: &dyn GradientModel, kind: SamplerKind, cfg: &SamplerConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        simulate_chain(model, kind, cfg, 1, |s, _| out.push((s.theta.clone(), s.momentum.clone()))).unwrap();
        out
    }

    #[test]
    fn zero_length_index_chain_is_sghmc() {
        let model = gaussian(30);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(5).with_index_chain(0).with_batch(3);
        let a = run_ewsg(&model, &cfg, 4).unwrap();
        let b = run_sghmc(&model, &cfg, 4).unwrap();
        assert_eq!(a.final_states, b.final_states);
    }

    #[test]
    fn full_batch_samplers_coincide() {
        let model = gaussian(12);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(6).with_batch(12).with_index_chain(2);
        let fg = positions(&model, SamplerKind::FullGradient, &cfg);
        let sg = positions(&model, SamplerKind::Sghmc, &cfg);
        let ew = positions(&model, SamplerKind::Ewsg, &cfg);
        assert_eq!(fg, sg);
        assert_eq!(ew.len(), 2);
        assert_eq!(ew[..], fg[..2]);
    }

    #[test]
    fn adding_chains_keeps_existing_streams() {
        let model = gaussian(20);
        let cfg = SamplerConfig::new(0.05, 10.0).with_passes(2).with_seed(5);
        let a = run_ewsg(&model, &cfg, 2).unwrap();
        let b = run_ewsg(&model, &cfg, 5).unwrap();
        assert_eq!(a.final_states[..], b.final_states[..2]);
    }

    #[test]
    fn noiseless_damped_flow_reaches_minimizer() {
        let model = gaussian(10);
        let cfg = SamplerConfig::new(0.01, 5.0)
            .with_sigma(1e-300)
            .with_passes(2000)
            .with_init(ThetaInit::Fixed(vec![1.0, -1.0]), MomentumInit::Zero);
        let r = run_full_gradient_uld(&model, &cfg, 1).unwrap();
        let target = model.analytic_target().unwrap();
        for (t, m) in r.final_states[0].theta.iter().zip(&target.mean) {
            assert!((t - m).abs() < 1e-8, "{t} vs {m}");
        }
    }

    #[test]
    fn stable_region_has_no_divergence() {
        // σ → 0 and a convex quadratic with hγ < 2, h < 2.
        let model = quadratic_scalar_model(vec![-1.0, 0.0, 1.0]).unwrap();
        for (h, gamma) in [(0.5, 1.0), (1.0, 1.5), (1.9, 1.0)] {
            let cfg = SamplerConfig::new(h, gamma)
                .with_sigma(1e-300)
                .with_passes(500)
                .with_init(ThetaInit::Fixed(vec![3.0]), MomentumInit::Fixed(vec![1.0]));
            let r = run_full_gradient_uld(&model, &cfg, 1).unwrap();
            assert_eq!(r.diverged_count, 0, "h = {h}, γ = {gamma}");
        }
    }

    #[test]
    fn blow_up_is_flagged_not_fatal() {
        let model = gaussian(50);
        let cfg = SamplerConfig::new(2.0, 10.0).with_passes(400);
        let r = run_full_gradient_uld(&model, &cfg, 2).unwrap();
        assert_eq!(r.diverged_count, 2);
        assert!(r.final_thetas().is_empty());
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let model = gaussian(10);
        let bad = [
            (SamplerConfig::new(-1.0, 1.0), "sampler.h"),
            (SamplerConfig::new(0.1, 1.0).with_batch(11), "sampler.batch"),
            (SamplerConfig::new(0.1, 1.0).with_passes(0), "sampler.data_passes"),
        ];
        for (cfg, field) in bad {
            match run_sghmc(&model, &cfg, 1) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error, got {other:?}"),
            }
        }
        let cfg = SamplerConfig::new(0.1, 1.0).with_x_policy(XPolicy::MomentumKill);
        assert!(run_overdamped(&model, &cfg, 1, true).is_err());
        let mut cfg = SamplerConfig::new(0.1, 1.0);
        cfg.friction = FrictionMode::Matrix;
        assert!(run_ewsg(&model, &cfg, 1).is_err());
    }

    #[test]
    fn persisted_index_changes_only_index_usage() {
        let model = gaussian(20);
        let mut cfg = SamplerConfig::new(0.05, 10.0).with_passes(3).with_seed(8);
        cfg.persist_index = true;
        let r = run_ewsg(&model, &cfg, 2).unwrap();
        assert!(r.final_states.iter().all(|s| s.grad_evals == 60 && !s.diverged));
    }

    #[test]
    fn minibatches_are_sorted_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut out = Vec::new();
        for b in [1, 2, 5, 10] {
            for _ in 0..100 {
                draw_minibatch(&mut rng, 10, b, &mut out);
                assert_eq!(out.len(), b);
                assert!(out.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
