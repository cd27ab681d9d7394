//! Sample-quality measures: Gaussian KL, observable MSE, autocorrelation,
//! the weighted-vs-uniform covariance-trace gap, and log-log slope fits.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::model::{GaussianTarget, GradientModel};
use crate::samplers::Trajectory;
use crate::weights::{exact_weights, WeightContext};

/// Sample covariances whose condition number exceeds this are treated as
/// singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Sample mean and covariance with `1/(count − 1)` normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl MomentSummary {
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut iter = samples.into_iter().peekable();
        let d = iter.peek().map(|s| s.len()).ok_or(Error::Empty("samples"))?;
        // Welford updates stay accurate for large ensembles.
        let mut mean = DVector::<f64>::zeros(d);
        let mut m2 = DMatrix::<f64>::zeros(d, d);
        let mut count = 0usize;
        let mut delta = DVector::<f64>::zeros(d);
        for s in iter {
            if s.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: s.len(),
                });
            }
            count += 1;
            for j in 0..d {
                delta[j] = s[j] - mean[j];
                mean[j] += delta[j] / count as f64;
            }
            for a in 0..d {
                let after = s[a] - mean[a];
                for b in 0..d {
                    m2[(a, b)] += delta[b] * after;
                }
            }
        }
        if count < 2 {
            return Err(Error::TooFew {
                what: "samples",
                required: 2,
                found: count,
            });
        }
        let covariance = ((&m2 + m2.transpose()) * 0.5) / (count - 1) as f64;
        Ok(MomentSummary {
            mean,
            covariance,
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(N(μ_s, Σ_s) ‖ N(μ_t, Σ_t))` for the moment-matched Gaussian fit
/// `(μ_s, Σ_s)` of `samples`.
pub fn kl_gaussian<'a, I>(samples: I, target_mean: &[f64], target_cov: &DMatrix<f64>) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let fit = MomentSummary::from_samples(samples)?;
    let d = fit.dim();
    if fit.count < d + 2 {
        return Err(Error::TooFew {
            what: "samples",
            required: d + 2,
            found: fit.count,
        });
    }
    kl_between(&fit.mean, &fit.covariance, target_mean, target_cov)
}

/// As [`kl_gaussian`] against a model's analytic target.
pub fn kl_to_target<'a, I>(samples: I, target: &GaussianTarget) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    kl_gaussian(samples, &target.mean, &target.covariance)
}

/// Closed-form KL between two Gaussians given by their moments.
pub fn kl_between(
    fit_mean: &DVector<f64>,
    fit_cov: &DMatrix<f64>,
    target_mean: &[f64],
    target_cov: &DMatrix<f64>,
) -> Result<f64> {
    let d = fit_mean.len();
    if target_mean.len() != d || target_cov.nrows() != d || target_cov.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: target_mean.len(),
        });
    }
    let condition = condition_number(fit_cov);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularCovariance { condition });
    }
    let fit_chol = fit_cov
        .clone()
        .cholesky()
        .ok_or(Error::SingularCovariance { condition })?;
    let target_chol = target_cov
        .clone()
        .cholesky()
        .ok_or(Error::TargetNotPositiveDefinite)?;
    let diff = DVector::from_column_slice(target_mean) - fit_mean;
    let trace = target_chol.solve(fit_cov).trace();
    let mahalanobis = diff.dot(&target_chol.solve(&diff));
    let log_det = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_ratio = log_det(&target_chol.l()) - log_det(&fit_chol.l());
    // Rounding can leave a tiny negative value for identical inputs.
    Ok((0.5 * (trace + mahalanobis - d as f64 + log_det_ratio)).max(0.0))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// A user-supplied observable.
pub type ObservableFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Test function whose time average is compared against its target value.
#[derive(Clone)]
pub enum Observable {
    /// `θ_c`.
    Mean { component: usize },
    /// `(θ_c − center)²`, the variance of component `c` when `center` is its
    /// target mean.
    Variance { component: usize, center: f64 },
    Custom(ObservableFn),
}

impl Observable {
    #[inline]
    pub fn eval(&self, theta: &[f64]) -> f64 {
        match self {
            Observable::Mean { component } => theta[*component],
            Observable::Variance { component, center } => (theta[*component] - center).powi(2),
            Observable::Custom(f) => f(theta),
        }
    }
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Mean { component } => write!(f, "Mean({component})"),
            Observable::Variance { component, center } => write!(f, "Variance({component}, {center})"),
            Observable::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Time average of `observable` over one trajectory after discarding the
/// leading `burn_in` fraction.
pub fn time_average(trajectory: &Trajectory, observable: &Observable, burn_in: f64) -> Result<f64> {
    let len = trajectory.len();
    let skip = ((len as f64) * burn_in.clamp(0.0, 1.0)).floor() as usize;
    if len <= skip {
        return Err(Error::Empty("trajectory"));
    }
    let sum: f64 = trajectory.thetas().skip(skip).map(|t| observable.eval(t)).sum();
    Ok(sum / (len - skip) as f64)
}

/// `E[(φ̂ − φ̄)²]` over chains, where `φ̂` is each chain's time average.
pub fn mse_observable(trajectories: &[Trajectory], observable: &Observable, truth: f64) -> Result<f64> {
    mse_observable_after(trajectories, observable, truth, 0.0)
}

/// [`mse_observable`] with a burn-in fraction.
pub fn mse_observable_after(
    trajectories: &[Trajectory],
    observable: &Observable,
    truth: f64,
    burn_in: f64,
) -> Result<f64> {
    let averages = trajectories
        .iter()
        .map(|t| time_average(t, observable, burn_in))
        .collect::<Result<Vec<_>>>()?;
    mse_of_averages(&averages, truth)
}

/// Mean squared deviation of precomputed time averages from `truth`.
pub fn mse_of_averages(averages: &[f64], truth: f64) -> Result<f64> {
    if averages.is_empty() {
        return Err(Error::Empty("trajectories"));
    }
    Ok(averages.iter().map(|a| (a - truth).powi(2)).sum::<f64>() / averages.len() as f64)
}

/// Sample mean and its standard error.
pub fn mean_and_stderr(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::TooFew {
            what: "values",
            required: 2,
            found: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Error values against a swept quantity, with the fitted log-log slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeries {
    pub abscissae: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: Option<f64>,
    /// Root-mean-square residual of the fit in log space.
    pub residual: Option<f64>,
}

impl ScalingSeries {
    /// Sorts the points by abscissa; abscissae must be positive and distinct.
    pub fn new(abscissae: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if abscissae.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: abscissae.len(),
                found: values.len(),
            });
        }
        if let Some(&v) = abscissae.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::NonPositive {
                what: "abscissa",
                value: v,
            });
        }
        let mut pairs: Vec<(f64, f64)> = abscissae.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::config("sweep", "abscissae must be distinct"));
        }
        let (abscissae, values) = pairs.into_iter().unzip();
        Ok(ScalingSeries {
            abscissae,
            values,
            slope: None,
            residual: None,
        })
    }

    /// Fits and stores the slope.
    pub fn fit(mut self) -> Result<Self> {
        let (slope, residual) = loglog_slope(&self)?;
        self.slope = Some(slope);
        self.residual = Some(residual);
        Ok(self)
    }
}

/// Ordinary least squares of `log value` on `log abscissa`; returns the slope
/// and the RMS residual.
pub fn loglog_slope(series: &ScalingSeries) -> Result<(f64, f64)> {
    let k = series.abscissae.len();
    if k < 3 {
        return Err(Error::TooFew {
            what: "sweep points",
            required: 3,
            found: k,
        });
    }
    if let Some(&v) = series.values.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositive {
            what: "series value",
            value: v,
        });
    }
    let xs: Vec<f64> = series.abscissae.iter().map(|a| a.ln()).collect();
    let ys: Vec<f64> = series.values.iter().map(|v| v.ln()).collect();
    let n = k as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok((slope, (rss / n).sqrt()))
}

/// Biased sample autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::TooFew {
            what: "samples",
            required: max_lag + 1,
            found: series.len(),
        });
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = norm_sq(&centered);
    if c0 == 0.0 || !c0.is_finite() {
        return Err(Error::ConstantSeries);
    }
    Ok((0..=max_lag)
        .map(|lag| {
            if lag == 0 {
                1.0
            } else {
                centered[lag..].iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() / c0
            }
        })
        .collect())
}

/// `Tr cov_{I∼p}(n∇V_I) − Tr cov_{I∼uniform}(n∇V_I)` with `p` the exact
/// exponential weights at θ.
pub fn covariance_trace_delta<M: GradientModel + ?Sized>(model: &M, theta: &[f64], ctx: &WeightContext) -> Result<f64> {
    let n = model.n_terms();
    if ctx.n != n || ctx.x.len() != model.dim() || theta.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: ctx.n,
        });
    }
    let grads = model.all_term_gradients(theta);
    let p = exact_weights(ctx, &grads)?;
    let uniform = vec![1.0 / n as f64; n];
    let scaled: Vec<f64> = grads.iter().map(|g| g * n as f64).collect();
    Ok(weighted_trace_covariance(&scaled, &p) - weighted_trace_covariance(&scaled, &uniform))
}

/// `Σpᵢ‖vᵢ‖² − ‖Σpᵢvᵢ‖²` over the rows of an `n × d` buffer.
pub fn weighted_trace_covariance(rows: &[f64], p: &[f64]) -> f64 {
    let d = rows.len() / p.len();
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    for (row, &pi) in rows.chunks_exact(d).zip(p) {
        second += pi * norm_sq(row);
        for (m, v) in mean.iter_mut().zip(row) {
            *m += pi * v;
        }
    }
    second - norm_sq(&mean)
}
