//! Running moment estimates and the friction matrix for EWSG-VR.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Eigenvalues below this are clamped to zero.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// SVRG-style moment state: `m1 ≈ E_I[n∇V_I]`, `m2 ≈ E_I[n²∇V_I∇V_Iᵀ]`,
/// the anchor `ω`, its stored term gradients, and the current friction `Γ`.
#[derive(Clone, Debug)]
pub struct VrState {
    pub m1: Vec<f64>,
    /// Row-major `d × d`.
    pub m2: Vec<f64>,
    pub anchor: Vec<f64>,
    /// Row-major `n × d` term gradients at the anchor.
    anchor_gradients: Vec<f64>,
    /// Row-major `d × d`.
    pub friction: Vec<f64>,
    n: usize,
    d: usize,
}

/// Per-chain record of friction-matrix health.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VrAudit {
    pub updates: u64,
    pub clamped: u64,
    /// Smallest eigenvalue of any `Γ` actually used, after clamping.
    pub min_eigenvalue: f64,
    /// Smallest eigenvalue seen before clamping.
    pub min_raw_eigenvalue: f64,
    pub max_asymmetry: f64,
}

impl VrAudit {
    pub fn new() -> Self {
        VrAudit {
            updates: 0,
            clamped: 0,
            min_eigenvalue: f64::INFINITY,
            min_raw_eigenvalue: f64::INFINITY,
            max_asymmetry: 0.0,
        }
    }

    pub fn merge(&mut self, other: &VrAudit) {
        self.updates += other.updates;
        self.clamped += other.clamped;
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
        self.min_raw_eigenvalue = self.min_raw_eigenvalue.min(other.min_raw_eigenvalue);
        self.max_asymmetry = self.max_asymmetry.max(other.max_asymmetry);
    }
}

impl VrState {
    /// Starts with `Γ = γI` and no calibration.
    pub fn new(n: usize, d: usize, gamma: f64) -> Self {
        let mut friction = vec![0.0; d * d];
        (0..d).for_each(|i| friction[i * d + i] = gamma);
        VrState {
            m1: vec![0.0; d],
            m2: vec![0.0; d * d],
            anchor: vec![0.0; d],
            anchor_gradients: vec![0.0; n * d],
            friction,
            n,
            d,
        }
    }

    /// Exact moments over all `n` terms at the anchor `θ`; `all_gradients`
    /// is the `n × d` buffer of `∇Vᵢ(θ)`.
    pub fn calibrate(&mut self, theta: &[f64], all_gradients: Vec<f64>) {
        let (n, d) = (self.n as f64, self.d);
        self.m1.fill(0.0);
        self.m2.fill(0.0);
        for g in all_gradients.chunks_exact(d) {
            for a in 0..d {
                self.m1[a] += g[a];
                for b in 0..d {
                    self.m2[a * d + b] += n * g[a] * g[b];
                }
            }
        }
        self.anchor.copy_from_slice(theta);
        self.anchor_gradients = all_gradients;
    }

    /// Control-variate correction after a step that used `indices`, whose term
    /// gradients at the pre-step θ are the rows of `gradients_at_theta`.
    /// Batches of size `b` average their members' corrections.
    pub fn correct(&mut self, indices: &[usize], gradients_at_theta: &[f64]) {
        let d = self.d;
        let n = self.n as f64;
        let w = 1.0 / indices.len() as f64;
        for (&i, g) in indices.iter().zip(gradients_at_theta.chunks_exact(d)) {
            let g0 = &self.anchor_gradients[i * d..(i + 1) * d];
            for a in 0..d {
                self.m1[a] += w * (g[a] - g0[a]);
                for b in 0..d {
                    self.m2[a * d + b] += w * n * (g[a] * g[b] - g0[a] * g0[b]);
                }
            }
        }
    }

    /// `Γ ← (σ²I + h·(m2 − m1m1ᵀ))/(2T)`, projected onto the PSD cone when an
    /// eigenvalue falls below [`PSD_TOLERANCE`].
    pub fn update_friction(&mut self, sigma: f64, h: f64, temperature: f64, audit: &mut VrAudit) {
        let d = self.d;
        let mut g = DMatrix::<f64>::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let covar = self.m2[a * d + b] - self.m1[a] * self.m1[b];
                let diag = if a == b { sigma * sigma } else { 0.0 };
                g[(a, b)] = (diag + h * covar) / (2.0 * temperature);
            }
        }
        let asym = (0..d)
            .flat_map(|a| (0..d).map(move |b| (a, b)))
            .map(|(a, b)| (g[(a, b)] - g[(b, a)]).abs())
            .fold(0.0, f64::max);
        let g = (&g + g.transpose()) * 0.5;
        let eig = SymmetricEigen::new(g.clone());
        let raw_min = eig.eigenvalues.min();
        let used = if raw_min < PSD_TOLERANCE {
            audit.clamped += 1;
            let clamped = eig.eigenvalues.map(|v| v.max(0.0));
            let m = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            (&m + m.transpose()) * 0.5
        } else {
            g
        };
        let used_min = if raw_min < PSD_TOLERANCE {
            SymmetricEigen::new(used.clone()).eigenvalues.min()
        } else {
            raw_min
        };
        audit.updates += 1;
        audit.min_raw_eigenvalue = audit.min_raw_eigenvalue.min(raw_min);
        audit.min_eigenvalue = audit.min_eigenvalue.min(used_min);
        audit.max_asymmetry = audit.max_asymmetry.max(asym);
        for a in 0..d {
            for b in 0..d {
                self.friction[a * d + b] = used[(a, b)];
            }
        }
    }
}
