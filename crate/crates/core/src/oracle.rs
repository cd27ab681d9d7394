//! Brute-force references: the minimum-trace sampling distribution, the
//! index chain's empirical law on a frozen state, and the exact mean
//! recursion for the scalar quadratic target.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::model::GradientModel;
use crate::samplers::SamplerConfig;
use crate::weights::{exact_weights, IndexState, WeightContext};

/// Feasibility tolerance on support solutions.
pub const FEASIBILITY_TOLERANCE: f64 = -1e-12;
/// Largest instance the enumeration accepts.
pub const MAX_TERMS: usize = 14;
pub const MAX_DIM: usize = 3;

/// Deviations `bᵢ = n∇Vᵢ(θ) − ∇V(θ)`, stored row-major `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LPInstance {
    b: Vec<f64>,
    n: usize,
    d: usize,
}

impl LPInstance {
    /// Rows must sum to zero up to rounding.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().ok_or(Error::Empty("rows"))?.len();
        let mut b = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            b.extend_from_slice(r);
        }
        let inst = LPInstance { b, n: rows.len(), d };
        let scale = inst.b.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let total = inst.column_sums();
        if total.iter().any(|s| s.abs() > 1e-9 * scale * inst.n as f64) {
            return Err(Error::config("rows", "deviations must sum to zero"));
        }
        Ok(inst)
    }

    /// Subtracts the row mean from arbitrary vectors.
    pub fn recentered(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().ok_or(Error::Empty("rows"))?.len();
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        LPInstance::new(&centered)
    }

    /// Deviations of the scaled term gradients from the full gradient at θ.
    pub fn from_model<M: GradientModel + ?Sized>(model: &M, theta: &[f64]) -> Result<Self> {
        let (n, d) = (model.n_terms(), model.dim());
        let grads = model.all_term_gradients(theta);
        let mut full = vec![0.0; d];
        for g in grads.chunks_exact(d) {
            full.iter_mut().zip(g).for_each(|(f, v)| *f += v);
        }
        let rows: Vec<Vec<f64>> = grads
            .chunks_exact(d)
            .map(|g| g.iter().zip(&full).map(|(v, f)| n as f64 * v - f).collect())
            .collect();
        LPInstance::new(&rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.b[i * self.d..(i + 1) * self.d]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d];
        for r in self.b.chunks_exact(self.d) {
            s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        s
    }

    /// `Σpᵢ‖bᵢ‖²`.
    pub fn objective(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, pi)| pi * norm_sq(self.row(i))).sum()
    }

    /// `‖Bp‖∞` and `|Σp − 1|`.
    pub fn constraint_residual(&self, p: &[f64]) -> (f64, f64) {
        let mut bp = vec![0.0; self.d];
        for (i, pi) in p.iter().enumerate() {
            bp.iter_mut().zip(self.row(i)).for_each(|(a, v)| *a += pi * v);
        }
        (
            bp.iter().map(|v| v.abs()).fold(0.0, f64::max),
            (p.iter().sum::<f64>() - 1.0).abs(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub p: Vec<f64>,
    pub objective: f64,
    pub support: Vec<usize>,
}

/// Minimizes `Σpᵢ‖bᵢ‖²` subject to `Bp = 0`, `Σp = 1`, `p ≥ 0` by enumerating
/// every support of size at most `d + 1`.
///
/// Supports whose equality system is rank-deficient or inconsistent are
/// skipped. Among optimal supports the lexicographically smallest wins.
pub fn lp_min_trace_distribution(instance: &LPInstance) -> Result<LpSolution> {
    let (n, d) = (instance.n, instance.d);
    if n > MAX_TERMS || d > MAX_DIM {
        return Err(Error::config(
            "instance",
            format!("enumeration limited to n <= {MAX_TERMS}, d <= {MAX_DIM}; got n = {n}, d = {d}"),
        ));
    }
    let costs: Vec<f64> = (0..n).map(|i| norm_sq(instance.row(i))).collect();
    let cost_scale = costs.iter().cloned().fold(1.0, f64::max);
    let mut best: Option<LpSolution> = None;
    for k in 1..=(d + 1).min(n) {
        let mut support: Vec<usize> = (0..k).collect();
        loop {
            if let Some(p_s) = solve_support(instance, &support) {
                let objective: f64 = support.iter().zip(&p_s).map(|(&i, p)| p * costs[i]).sum();
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let tol = 1e-12 * cost_scale;
                        objective < b.objective - tol || (objective <= b.objective + tol && support < b.support)
                    }
                };
                if better {
                    let mut p = vec![0.0; n];
                    support.iter().zip(&p_s).for_each(|(&i, v)| p[i] = *v);
                    // Zero entries on a degenerate support are not part of it.
                    let support = (0..n).filter(|&i| p[i] > 0.0).collect();
                    best = Some(LpSolution { p, objective, support });
                }
            }
            if !next_combination(&mut support, n) {
                break;
            }
        }
    }
    best.ok_or_else(|| Error::config("instance", "no feasible support found"))
}

/// Solves `[B_S; 1ᵀ] p_S = [0; 1]` on one support; `None` if singular,
/// inconsistent or infeasible.
fn solve_support(instance: &LPInstance, support: &[usize]) -> Option<Vec<f64>> {
    let (d, k) = (instance.d, support.len());
    let a = DMatrix::from_fn(d + 1, k, |r, c| if r < d { instance.row(support[c])[r] } else { 1.0 });
    let mut rhs = DVector::zeros(d + 1);
    rhs[d] = 1.0;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank_tol = 1e-10 * smax.max(1.0);
    if svd.singular_values.iter().filter(|s| **s > rank_tol).count() < k {
        return None;
    }
    let p = svd.solve(&rhs, rank_tol).ok()?;
    let residual = (&a * &p - &rhs).amax();
    if residual > 1e-9 {
        return None;
    }
    if p.iter().any(|v| *v < FEASIBILITY_TOLERANCE) {
        return None;
    }
    Some(p.iter().map(|v| v.max(0.0)).collect())
}

/// Advances `c` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Runs the single-index MH chain for `inner_steps` steps on frozen `(θ, r)`
/// and returns the total-variation distance between its visit frequencies
/// and the exact weights.
pub fn index_chain_stationary_tv<M: GradientModel + ?Sized>(
    model: &M,
    theta: &[f64],
    momentum: &[f64],
    cfg: &SamplerConfig,
    inner_steps: usize,
    seed: u64,
) -> Result<f64> {
    let (n, d) = (model.n_terms(), model.dim());
    if cfg.batch != 1 {
        return Err(Error::config("sampler.batch", "the stationary-law oracle needs b = 1"));
    }
    if inner_steps == 0 {
        return Err(Error::config("inner_steps", "need at least one step"));
    }
    let mut x = vec![0.0; d];
    cfg.x_policy.underdamped_x(cfg.h, cfg.gamma, cfg.sigma, momentum, &mut x);
    let ctx = WeightContext::new(x, cfg.h.sqrt() / cfg.sigma, n, 1)?;
    let grads = model.all_term_gradients(theta);
    let p = exact_weights(&ctx, &grads)?;
    let estimates: Vec<f64> = grads.iter().map(|g| g * n as f64).collect();
    let row = |i: usize| &estimates[i * d..(i + 1) * d];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..n);
    let mut state = IndexState::new(vec![start], row(start).to_vec(), &ctx);
    let mut counts = vec![0u64; n];
    for _ in 0..inner_steps {
        let j = rng.random_range(0..n);
        let u: f64 = rng.random();
        state.step_in_place(&[j], row(j), &ctx, u);
        counts[state.indices[0]] += 1;
    }
    Ok(0.5
        * counts
            .iter()
            .zip(&p)
            .map(|(&c, pi)| (c as f64 / inner_steps as f64 - pi).abs())
            .sum::<f64>())
}

/// Noise-free mean dynamics `x ← (I + Ah)x` with `A = [[0, 1], [−1, −γ]]`,
/// which the ensemble mean `(E θ, E r)` follows on the scalar quadratic
/// target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMeanSystem {
    pub gamma: f64,
    pub h: f64,
    pub x0: [f64; 2],
}

impl LinearMeanSystem {
    pub fn new(gamma: f64, h: f64, x0: [f64; 2]) -> Self {
        LinearMeanSystem { gamma, h, x0 }
    }

    /// `I + Ah`.
    pub fn step_matrix(&self) -> [[f64; 2]; 2] {
        [[1.0, self.h], [-self.h, 1.0 - self.gamma * self.h]]
    }

    /// Largest eigenvalue magnitude of `I + Ah`; `√(1 − hγ + h²)` when the
    /// eigenvalues are complex.
    pub fn spectral_radius(&self) -> f64 {
        let m = self.step_matrix();
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = tr * tr / 4.0 - det;
        if disc < 0.0 {
            det.sqrt()
        } else {
            (tr / 2.0).abs() + disc.sqrt()
        }
    }

    /// `x_0, x_1, …, x_k`.
    pub fn trajectory(&self, k: usize) -> Vec<[f64; 2]> {
        let m = self.step_matrix();
        let mut out = Vec::with_capacity(k + 1);
        let mut x = self.x0;
        out.push(x);
        for _ in 0..k {
            x = [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]];
            out.push(x);
        }
        out
    }
}

/// `(I + Ah)ᵏ x₀`.
pub fn linear_mean_recursion(system: &LinearMeanSystem, k: usize) -> [f64; 2] {
    *system.trajectory(k).last().expect("trajectory includes x0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gaussian_quadratic_model, random_centers};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LPInstance {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        LPInstance::recentered(&rows).unwrap()
    }

    #[test]
    fn two_point_instance_is_forced_uniform() {
        let inst = LPInstance::new(&[vec![-1.0], vec![1.0]]).unwrap();
        let sol = lp_min_trace_distribution(&inst).unwrap();
        assert_relative_eq!(sol.p[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.p[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-12);
        assert_eq!(sol.support, vec![0, 1]);
    }

    #[test]
    fn zero_row_is_a_point_mass() {
        let inst = LPInstance::new(&[vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let sol = lp_min_trace_distribution(&inst).unwrap();
        assert_eq!(sol.support, vec![1]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn unbalanced_rows_are_rejected() {
        assert!(LPInstance::new(&[vec![1.0], vec![1.0]]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(lp_min_trace_distribution(&random_instance(&mut rng, 15, 2)).is_err());
    }

    #[test]
    fn model_deviations_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = gaussian_quadratic_model(&random_centers(&mut rng, 10, 2)).unwrap();
        let inst = LPInstance::from_model(&model, &[0.3, -0.2]).unwrap();
        assert!(inst.column_sums().iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut c = vec![0, 1];
        let mut all = vec![c.clone()];
        while next_combination(&mut c, 4) {
            all.push(c.clone());
        }
        assert_eq!(all, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    #[test]
    fn brute_force_grid_agrees_in_small_case() {
        // n = 3, d = 1: feasible set is a segment; scan it finely.
        let inst = LPInstance::recentered(&[vec![-2.0], vec![0.5], vec![1.0]]).unwrap();
        let sol = lp_min_trace_distribution(&inst).unwrap();
        let mut best = f64::INFINITY;
        let steps = 20_000;
        for a in 0..=steps {
            let p0 = a as f64 / steps as f64;
            // Solve the two constraints for p1, p2 given p0.
            let (b0, b1, b2) = (inst.row(0)[0], inst.row(1)[0], inst.row(2)[0]);
            let p1 = (-(b0 * p0) - b2 * (1.0 - p0)) / (b1 - b2);
            let p2 = 1.0 - p0 - p1;
            if p1 >= 0.0 && p2 >= 0.0 {
                best = best.min(inst.objective(&[p0, p1, p2]));
            }
        }
        assert!(sol.objective <= best + 1e-9);
        assert!(sol.objective >= best - 1e-3);
    }

    #[test]
    fn tv_is_zero_for_one_term() {
        let model = gaussian_quadratic_model(&[vec![1.0, 2.0]]).unwrap();
        let cfg = SamplerConfig::new(0.05, 10.0);
        let tv = index_chain_stationary_tv(&model, &[0.0, 0.0], &[1.0, 0.0], &cfg, 100, 0).unwrap();
        assert_eq!(tv, 0.0);
    }

    #[test]
    fn tv_is_small_for_flat_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = gaussian_quadratic_model(&random_centers(&mut rng, 10, 2)).unwrap();
        let cfg = SamplerConfig::new(1e-16, 10.0);
        let tv = index_chain_stationary_tv(&model, &[0.1, 0.2], &[0.5, 0.5], &cfg, 100_000, 4).unwrap();
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn mean_recursion_examples() {
        let sys = LinearMeanSystem::new(1.0, 0.1, [1.0, 0.0]);
        assert_eq!(linear_mean_recursion(&sys, 0), [1.0, 0.0]);
        let x1 = linear_mean_recursion(&sys, 1);
        assert_relative_eq!(x1[0], 1.0);
        assert_relative_eq!(x1[1], -0.1);
        let h: f64 = 0.01;
        let sys = LinearMeanSystem::new(1.0, h, [1.0, 1.0]);
        assert_relative_eq!(sys.spectral_radius(), (1.0 - h + h * h).sqrt(), epsilon = 1e-14);
        let traj = sys.trajectory(5000);
        let norm = |x: &[f64; 2]| x[0].hypot(x[1]);
        assert!(norm(&traj[5000]) < 1e-5 * norm(&traj[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lp_solution_is_feasible_sparse_and_no_worse_than_uniform(seed in any::<u64>(), n in 3usize..=10, d in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, n, d);
            let sol = lp_min_trace_distribution(&inst).unwrap();
            let (bp, sum) = inst.constraint_residual(&sol.p);
            prop_assert!(bp < 1e-9 && sum < 1e-9);
            prop_assert!(sol.p.iter().filter(|v| **v > 0.0).count() <= d + 1);
            let uniform = vec![1.0 / n as f64; n];
            prop_assert!(sol.objective <= inst.objective(&uniform) + 1e-12);
        }

        #[test]
        fn mean_recursion_contracts(gamma in 0.1f64..1.9, h in 1e-3f64..0.1) {
            let sys = LinearMeanSystem::new(gamma, h, [1.0, -0.5]);
            prop_assert!(sys.spectral_radius() < 1.0);
        }
    }
}
