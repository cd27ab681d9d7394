//! Euler–Maruyama steps for underdamped and overdamped Langevin dynamics.

use super::ChainState;
use crate::linalg::mat_vec;

/// One EM step of underdamped Langevin with scalar friction:
///
/// ```text
/// θ' = θ + h·r
/// r' = r − (g + γ·r)·h + σ·√h·ξ
/// ```
///
/// `θ'` uses the pre-update momentum.
pub fn em_step_uld(
    state: &ChainState,
    gradient_estimate: &[f64],
    h: f64,
    gamma: f64,
    sigma: f64,
    noise: &[f64],
) -> ChainState {
    let mut next = state.clone();
    em_step_uld_in_place(&mut next, gradient_estimate, h, gamma, sigma, noise);
    next
}

#[inline]
pub(crate) fn em_step_uld_in_place(
    state: &mut ChainState,
    gradient_estimate: &[f64],
    h: f64,
    gamma: f64,
    sigma: f64,
    noise: &[f64],
) {
    let kick = sigma * h.sqrt();
    for (((t, r), g), xi) in state
        .theta
        .iter_mut()
        .zip(state.momentum.iter_mut())
        .zip(gradient_estimate)
        .zip(noise)
    {
        *t += *r * h;
        *r = *r - (g + gamma * *r) * h + kick * xi;
    }
    state.step += 1;
    state.check_finite();
}

/// As [`em_step_uld`] with the friction `γ·r` replaced by `Γ·r` for a
/// row-major `d × d` matrix `Γ`.
pub fn em_step_matrix_friction(
    state: &ChainState,
    gradient_estimate: &[f64],
    h: f64,
    friction: &[f64],
    sigma: f64,
    noise: &[f64],
) -> ChainState {
    let mut next = state.clone();
    let mut scratch = vec![0.0; state.theta.len()];
    em_step_matrix_friction_in_place(&mut next, gradient_estimate, h, friction, sigma, noise, &mut scratch);
    next
}

#[inline]
pub(crate) fn em_step_matrix_friction_in_place(
    state: &mut ChainState,
    gradient_estimate: &[f64],
    h: f64,
    friction: &[f64],
    sigma: f64,
    noise: &[f64],
    scratch: &mut [f64],
) {
    mat_vec(friction, &state.momentum, scratch);
    let kick = sigma * h.sqrt();
    for ((((t, r), g), fr), xi) in state
        .theta
        .iter_mut()
        .zip(state.momentum.iter_mut())
        .zip(gradient_estimate)
        .zip(scratch.iter())
        .zip(noise)
    {
        *t += *r * h;
        *r = *r - (g + fr) * h + kick * xi;
    }
    state.step += 1;
    state.check_finite();
}

/// `θ' = θ − h·g + √(2h)·ξ`.
#[inline]
pub(crate) fn em_step_overdamped_in_place(state: &mut ChainState, gradient_estimate: &[f64], h: f64, noise: &[f64]) {
    let kick = (2.0 * h).sqrt();
    for ((t, g), xi) in state.theta.iter_mut().zip(gradient_estimate).zip(noise) {
        *t += -h * g + kick * xi;
    }
    state.step += 1;
    state.check_finite();
}
