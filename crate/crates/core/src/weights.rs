//! Exponential subsampling weights and the Metropolis–Hastings index chain.
//!
//! For a step with scaled gradients `aᵢ = scale·∇Vᵢ(θ)` and hyperparameter `x`,
//! index `i` carries weight
//!
//! ```text
//! pᵢ ∝ exp(−½‖x + Σⱼ aⱼ‖² + ½‖x + n·aᵢ‖²)
//! ```
//!
//! The first exponent is common to every index and cancels both in the
//! normalization and in Metropolis–Hastings ratios, so everything here works
//! with the per-index score `½‖x + n·aᵢ‖²` in the log domain.
//!
//! A minibatch `{i₁…i_b}` is scored the same way with `aᵢ` replaced by the
//! scaled batch mean `scale·(1/b)Σⱼ∇V_{iⱼ}`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// The pieces that define one step's weight distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightContext {
    pub x: Vec<f64>,
    /// `√h/σ` for underdamped samplers, `√h/√2` for overdamped ones.
    pub scale: f64,
    pub n: usize,
    pub b: usize,
}

impl WeightContext {
    pub fn new(x: Vec<f64>, scale: f64, n: usize, b: usize) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::NonPositive {
                what: "weight scale",
                value: scale,
            });
        }
        ensure_finite(&x, "x")?;
        if b == 0 || b > n {
            return Err(Error::config("b", format!("need 1 <= b <= n = {n}, got {b}")));
        }
        Ok(WeightContext { x, scale, n, b })
    }

    /// Score of a stochastic gradient `g = (n/b)Σ∇V` (or `n∇Vᵢ` when b = 1):
    /// `½‖x + scale·g‖²`.
    #[inline]
    pub fn score_of_estimate(&self, estimate: &[f64]) -> f64 {
        0.5 * self
            .x
            .iter()
            .zip(estimate)
            .map(|(xi, gi)| (xi + self.scale * gi).powi(2))
            .sum::<f64>()
    }
}

/// `½‖x + n·scale·∇Vᵢ‖²`, the index-specific part of the log weight.
pub fn unnormalized_log_weight(ctx: &WeightContext, grad_i: &[f64]) -> Result<f64> {
    ensure_finite(grad_i, "gradient")?;
    let n = ctx.n as f64;
    Ok(0.5
        * ctx
            .x
            .iter()
            .zip(grad_i)
            .map(|(xi, gi)| (xi + n * ctx.scale * gi).powi(2))
            .sum::<f64>())
}

/// Normalizes log weights with max-subtraction.
pub fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Exact weights over all `n` single indices from an `n × d` row-major
/// gradient buffer.
pub fn exact_weights(ctx: &WeightContext, all_gradients: &[f64]) -> Result<Vec<f64>> {
    let d = ctx.x.len();
    if all_gradients.len() != ctx.n * d {
        return Err(Error::DimensionMismatch {
            expected: ctx.n * d,
            found: all_gradients.len(),
        });
    }
    if ctx.n == 0 {
        return Err(Error::Empty("gradients"));
    }
    let logs = all_gradients
        .chunks_exact(d)
        .map(|g| unnormalized_log_weight(ctx, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_log_weights(&logs))
}

/// Scaled minibatch mean `scale·(1/b)Σⱼ∇V_{iⱼ}`; the batch's score is
/// `½‖x + n·minibatch_a‖²`.
pub fn minibatch_a(ctx: &WeightContext, indices: &[usize], gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_distinct(indices)?;
    if indices.len() != gradients.len() {
        return Err(Error::DimensionMismatch {
            expected: indices.len(),
            found: gradients.len(),
        });
    }
    let d = ctx.x.len();
    let b = indices.len() as f64;
    let mut a = vec![0.0; d];
    for g in gradients {
        ensure_finite(g, "gradient")?;
        for (ai, gi) in a.iter_mut().zip(g) {
            *ai += gi;
        }
    }
    a.iter_mut().for_each(|v| *v *= ctx.scale / b);
    Ok(a)
}

fn check_distinct(indices: &[usize]) -> Result<()> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    match sorted.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::DuplicateIndex(w[0])),
        None => Ok(()),
    }
}

/// Current position of the index chain.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexState {
    /// Sorted, distinct indices of the current minibatch (one entry when b = 1).
    pub indices: Vec<usize>,
    /// The stored stochastic gradient `(n/b)Σ∇V` at the chain's θ.
    pub estimate: Vec<f64>,
    pub log_score: f64,
}

impl IndexState {
    pub fn new(mut indices: Vec<usize>, estimate: Vec<f64>, ctx: &WeightContext) -> Self {
        indices.sort_unstable();
        let log_score = ctx.score_of_estimate(&estimate);
        IndexState {
            indices,
            estimate,
            log_score,
        }
    }

    /// In-place Metropolis–Hastings update. Returns whether the proposal was
    /// accepted. `proposal_indices` must already be sorted.
    #[inline]
    pub fn step_in_place(
        &mut self,
        proposal_indices: &[usize],
        proposal_estimate: &[f64],
        ctx: &WeightContext,
        uniform_draw: f64,
    ) -> bool {
        let proposal_score = ctx.score_of_estimate(proposal_estimate);
        if accept(self.log_score, proposal_score, uniform_draw) {
            self.indices.clear();
            self.indices.extend_from_slice(proposal_indices);
            self.estimate.copy_from_slice(proposal_estimate);
            self.log_score = proposal_score;
            true
        } else {
            false
        }
    }
}

/// `log min{1, exp(to − from)}`.
#[inline]
pub fn log_acceptance(from_score: f64, to_score: f64) -> f64 {
    (to_score - from_score).min(0.0)
}

#[inline]
fn accept(current: f64, proposal: f64, uniform_draw: f64) -> bool {
    let log_ratio = proposal - current;
    log_ratio >= 0.0 || uniform_draw.ln() < log_ratio
}

/// One Metropolis–Hastings step of the index chain with a uniform proposal.
///
/// `proposal_grad` is the proposal's stored stochastic gradient `(n/b)Σ∇V`
/// (`n∇Vⱼ` for a single index). The caller supplies both the proposal and
/// the uniform draw, so the step is a pure function.
pub fn mh_index_step(
    state: IndexState,
    proposal_grad: Vec<f64>,
    proposal_index: Vec<usize>,
    ctx: &WeightContext,
    uniform_draw: f64,
) -> IndexState {
    let proposal = IndexState::new(proposal_index, proposal_grad, ctx);
    if accept(state.log_score, proposal.log_score, uniform_draw) {
        proposal
    } else {
        state
    }
}

/// How `x` is chosen at each outer iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum XPolicy {
    /// `x = √h·γ·r/σ`.
    #[default]
    Recommended,
    Zero,
    /// Every component set to the given value.
    Constant(f64),
    /// `x = (−1 + hγ)·r/(σ√h)`, the value that makes the next momentum zero.
    MomentumKill,
}

impl XPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recommended" => Some(XPolicy::Recommended),
            "zero" => Some(XPolicy::Zero),
            "momentum-kill" | "momentum_kill" => Some(XPolicy::MomentumKill),
            _ => s
                .strip_prefix("constant=")
                .and_then(|v| v.parse().ok())
                .map(XPolicy::Constant),
        }
    }

    /// Writes `x` for the underdamped samplers into `out`.
    #[inline]
    pub fn underdamped_x(&self, h: f64, gamma: f64, sigma: f64, r: &[f64], out: &mut [f64]) {
        match self {
            XPolicy::Recommended => {
                let c = h.sqrt() * gamma / sigma;
                out.iter_mut().zip(r).for_each(|(o, ri)| *o = c * ri);
            }
            XPolicy::Zero => out.fill(0.0),
            XPolicy::Constant(v) => out.fill(*v),
            XPolicy::MomentumKill => {
                let c = (-1.0 + h * gamma) / (sigma * h.sqrt());
                out.iter_mut().zip(r).for_each(|(o, ri)| *o = c * ri);
            }
        }
    }
}

impl std::fmt::Display for XPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            XPolicy::Recommended => f.write_str("recommended"),
            XPolicy::Zero => f.write_str("zero"),
            XPolicy::Constant(v) => write!(f, "constant={v}"),
            XPolicy::MomentumKill => f.write_str("momentum-kill"),
        }
    }
}

impl From<XPolicy> for String {
    fn from(p: XPolicy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for XPolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        XPolicy::parse(&s).ok_or_else(|| format!("unknown x policy `{s}`"))
    }
}

/// `√h·γ·r/σ`.
pub fn recommended_x(h: f64, gamma: f64, sigma: f64, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r.len()];
    XPolicy::Recommended.underdamped_x(h, gamma, sigma, r, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_sq;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_grads(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
        (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn log_weight_arithmetic() {
        let ctx = WeightContext::new(vec![0.0, 0.0], 1.0, 3, 1).unwrap();
        assert_eq!(unnormalized_log_weight(&ctx, &[0.0, 0.0]).unwrap(), 0.0);
        let ctx = WeightContext::new(vec![1.0, 0.0], 1.0, 2, 1).unwrap();
        assert_eq!(unnormalized_log_weight(&ctx, &[1.0, 0.0]).unwrap(), 4.5);
        assert!(unnormalized_log_weight(&ctx, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn equal_gradients_give_uniform_weights() {
        let ctx = WeightContext::new(vec![0.3, -0.2], 0.7, 4, 1).unwrap();
        let g = [1.5, -2.0].repeat(4);
        for p in exact_weights(&ctx, &g).unwrap() {
            assert_relative_eq!(p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn tiny_scale_gives_near_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grads(&mut rng, 7, 2);
        let ctx = WeightContext::new(vec![0.5, 0.5], 1e-8, 7, 1).unwrap();
        for p in exact_weights(&ctx, &g).unwrap() {
            assert!((p - 1.0 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_weights_match_verbatim_formula_with_shared_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, d) = (3, 2);
        let g = random_grads(&mut rng, n, d);
        let x = vec![0.4, -0.1];
        let scale = 0.3;
        let ctx = WeightContext::new(x.clone(), scale, n, 1).unwrap();
        // exp(-½‖x + Σa‖² + ½‖x + n aᵢ‖²) evaluated as written, then normalized.
        let a: Vec<Vec<f64>> = g.chunks(d).map(|gi| gi.iter().map(|v| scale * v).collect()).collect();
        let sum_a: Vec<f64> = (0..d).map(|k| a.iter().map(|ai| ai[k]).sum()).collect();
        let shared: f64 = x.iter().zip(&sum_a).map(|(xi, s)| (xi + s).powi(2)).sum::<f64>() / 2.0;
        let raw: Vec<f64> = a
            .iter()
            .map(|ai| {
                let own: f64 = x
                    .iter()
                    .zip(ai)
                    .map(|(xi, v)| (xi + n as f64 * v).powi(2))
                    .sum::<f64>()
                    / 2.0;
                (-shared + own).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        let p = exact_weights(&ctx, &g).unwrap();
        for (pi, ri) in p.iter().zip(&raw) {
            assert_relative_eq!(*pi, ri / z, epsilon = 1e-14);
        }
    }

    #[test]
    fn large_scores_stay_finite() {
        let ctx = WeightContext::new(vec![0.0; 2], 1.0, 5, 1).unwrap();
        // ‖n·aᵢ‖ up to 10³ means log weights up to 5·10⁵.
        let g: Vec<f64> = (0..5).flat_map(|i| [200.0 * i as f64 / 4.0, 0.0]).collect();
        let p = exact_weights(&ctx, &g).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[4], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_scores_always_accept() {
        let ctx = WeightContext::new(vec![1.0], 1.0, 2, 1).unwrap();
        let s = IndexState::new(vec![0], vec![2.0], &ctx);
        let next = mh_index_step(s, vec![2.0], vec![1], &ctx, 0.999_999);
        assert_eq!(next.indices, vec![1]);
    }

    #[test]
    fn self_proposal_keeps_state() {
        let ctx = WeightContext::new(vec![1.0], 1.0, 2, 1).unwrap();
        let s = IndexState::new(vec![1], vec![-3.0], &ctx);
        for u in [0.0, 0.5, 0.99] {
            let next = mh_index_step(s.clone(), vec![-3.0], vec![1], &ctx, u);
            assert_eq!(next, s);
        }
    }

    #[test]
    fn rejection_returns_input_unchanged() {
        let ctx = WeightContext::new(vec![0.0], 1.0, 2, 1).unwrap();
        let s = IndexState::new(vec![0], vec![3.0], &ctx);
        let next = mh_index_step(s.clone(), vec![0.0], vec![1], &ctx, 0.5);
        assert_eq!(next, s);
    }

    #[test]
    fn frozen_chain_matches_exact_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let g = random_grads(&mut rng, n, 2);
        let ctx = WeightContext::new(vec![0.2, -0.4], 0.35, n, 1).unwrap();
        let p = exact_weights(&ctx, &g).unwrap();
        let sg = |i: usize| g[i * 2..i * 2 + 2].iter().map(|v| n as f64 * v).collect::<Vec<_>>();
        let mut state = IndexState::new(vec![0], sg(0), &ctx);
        let mut counts = vec![0usize; n];
        let steps = 100_000;
        for _ in 0..steps {
            let j = rng.random_range(0..n);
            let u: f64 = rng.random();
            state = mh_index_step(state, sg(j), vec![j], &ctx, u);
            counts[state.indices[0]] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&p)
            .map(|(c, pi)| (*c as f64 / steps as f64 - pi).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv = {tv}");
    }

    #[test]
    fn recommended_x_values() {
        assert_eq!(recommended_x(0.04, 10.0, 20f64.sqrt(), &[0.0, 0.0]), vec![0.0, 0.0]);
        let x = recommended_x(0.04, 10.0, 20f64.sqrt(), &[1.0, 0.0]);
        assert_relative_eq!(x[0], 2.0 / 20f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(x[0], 0.4472, epsilon = 1e-4);
        let mut out = [7.0, 7.0];
        XPolicy::Zero.underdamped_x(0.04, 10.0, 1.0, &[3.0, -1.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn momentum_kill_zeroes_next_momentum() {
        // With x chosen this way and no gradient, (r' − r + hγr)/(σ√h) = x gives r' = 0.
        let (h, gamma, sigma) = (0.07, 10.0, 20f64.sqrt());
        let r = [0.8, -1.3];
        let mut x = [0.0; 2];
        XPolicy::MomentumKill.underdamped_x(h, gamma, sigma, &r, &mut x);
        for (xi, ri) in x.iter().zip(&r) {
            let r_next = ri - h * gamma * ri + sigma * h.sqrt() * xi;
            assert!(r_next.abs() < 1e-14);
        }
    }

    #[test]
    fn policy_parsing_round_trips() {
        for p in [XPolicy::Recommended, XPolicy::Zero, XPolicy::Constant(1.0), XPolicy::MomentumKill] {
            assert_eq!(XPolicy::parse(&p.to_string()), Some(p));
        }
        assert_eq!(XPolicy::parse("bogus"), None);
    }

    #[test]
    fn minibatch_of_one_is_single_index_a() {
        let ctx = WeightContext::new(vec![0.0, 0.0], 0.5, 4, 1).unwrap();
        let a = minibatch_a(&ctx, &[2], &[vec![1.0, -2.0]]).unwrap();
        assert_eq!(a, vec![0.5, -1.0]);
        assert!(matches!(
            minibatch_a(&ctx, &[1, 1], &[vec![0.0; 2], vec![0.0; 2]]),
            Err(Error::DuplicateIndex(1))
        ));
    }

    #[test]
    fn full_batch_has_single_outcome() {
        // b = n: the only minibatch is the whole set.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_grads(&mut rng, 3, 2);
        let grads: Vec<Vec<f64>> = g.chunks(2).map(<[f64]>::to_vec).collect();
        let ctx = WeightContext::new(vec![0.1, 0.1], 0.4, 3, 3).unwrap();
        let a = minibatch_a(&ctx, &[0, 1, 2], &grads).unwrap();
        let p = normalize_log_weights(&[0.5 * norm_sq(&a)]);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn pair_weights_enumerated() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, d, b) = (4usize, 2usize, 2usize);
        let g = random_grads(&mut rng, n, d);
        let grads: Vec<Vec<f64>> = g.chunks(d).map(<[f64]>::to_vec).collect();
        let x = vec![0.3, 0.7];
        let scale = 0.25;
        let ctx = WeightContext::new(x.clone(), scale, n, b).unwrap();
        let mut logs = Vec::new();
        let mut direct = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let a = minibatch_a(&ctx, &[i, j], &[grads[i].clone(), grads[j].clone()]).unwrap();
                let na: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi + n as f64 * ai).collect();
                logs.push(0.5 * norm_sq(&na));
                // Stored-estimate route: (n/b)(gᵢ + gⱼ).
                let est: Vec<f64> = (0..d).map(|k| (n as f64 / b as f64) * (grads[i][k] + grads[j][k])).collect();
                direct.push(ctx.score_of_estimate(&est));
            }
        }
        assert_eq!(logs.len(), 6);
        for (l, dl) in logs.iter().zip(&direct) {
            assert_relative_eq!(*l, *dl, epsilon = 1e-12);
        }
        let p = normalize_log_weights(&logs);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(
            grads in proptest::collection::vec(-50.0f64..50.0, 2..40),
            x0 in -3.0f64..3.0,
            scale in 1e-6f64..2.0,
        ) {
            let n = grads.len() / 2;
            prop_assume!(n >= 1);
            let ctx = WeightContext::new(vec![x0, -x0], scale, n, 1).unwrap();
            let p = exact_weights(&ctx, &grads[..2 * n]).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn detailed_balance_in_log_domain(
            grads in proptest::collection::vec(-5.0f64..5.0, 4..30),
            x0 in -2.0f64..2.0,
            scale in 1e-3f64..1.0,
            pick in any::<(usize, usize)>(),
        ) {
            let n = grads.len() / 2;
            let ctx = WeightContext::new(vec![x0, 0.5], scale, n, 1).unwrap();
            let logs: Vec<f64> = grads[..2 * n]
                .chunks(2)
                .map(|g| unnormalized_log_weight(&ctx, g).unwrap())
                .collect();
            let (i, j) = (pick.0 % n, pick.1 % n);
            // log pᵢ + log(1/n) + log acc(i→j) versus the reverse move.
            let lhs = logs[i] + log_acceptance(logs[i], logs[j]);
            let rhs = logs[j] + log_acceptance(logs[j], logs[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn uniform_limit_is_second_order(scale in 1e-4f64..1e-2) {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let n = 6;
            let g = random_grads(&mut rng, n, 2);
            let gmax = g.chunks(2).map(norm_sq).fold(0.0, f64::max);
            let ctx = WeightContext::new(vec![0.0, 0.0], scale, n, 1).unwrap();
            let p = exact_weights(&ctx, &g).unwrap();
            let dev = p.iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
            // Score spread is ½(n·scale)²‖g‖².
            prop_assert!(dev <= (n as f64 * scale).powi(2) * gmax);
        }
    }
}
