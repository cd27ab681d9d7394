//! Additive potentials `V(θ) = Σᵢ Vᵢ(θ)` and the concrete targets used by the
//! experiments.
//!
//! Every model exposes per-term gradients. The samplers only ever see a model
//! through [`GradientModel`], so anything with hand-coded term gradients can be
//! sampled.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::dot;

/// Closed-form Gaussian law of θ, when the target admits one.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws one exact sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .expect("analytic target covariance is positive definite");
        let z = nalgebra::DVector::from_iterator(d, (0..d).map(|_| rng.sample(StandardNormal)));
        let x = chol.l() * z;
        self.mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }
}

/// A target distribution `exp(-V)` presented as `n` potential terms.
///
/// Implementations must be immutable after construction: samplers call
/// [`term_gradient`](GradientModel::term_gradient) from many chains at once.
pub trait GradientModel: Send + Sync {
    /// Number of potential terms `n`.
    fn n_terms(&self) -> usize;

    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    /// Writes `∇Vᵢ(θ)` into `out`.
    fn term_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]);

    /// `Vᵢ(θ)`, when the model provides it.
    fn term_potential(&self, _i: usize, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Exact law of θ under `exp(-V)`, when one is known.
    fn analytic_target(&self) -> Option<&GaussianTarget> {
        None
    }

    /// Short name used in reports.
    fn name(&self) -> &str;

    /// `∇V(θ)` as the in-order sum of term gradients.
    fn full_gradient(&self, theta: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; self.dim()];
        out.fill(0.0);
        for i in 0..self.n_terms() {
            self.term_gradient(i, theta, &mut buf);
            for (o, g) in out.iter_mut().zip(&buf) {
                *o += g;
            }
        }
    }

    /// `V(θ)` when every term potential is available.
    fn potential(&self, theta: &[f64]) -> Option<f64> {
        (0..self.n_terms())
            .map(|i| self.term_potential(i, theta))
            .sum()
    }

    /// All term gradients at θ as an `n × d` row-major buffer.
    fn all_term_gradients(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.n_terms() * d];
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            self.term_gradient(i, theta, row);
        }
        out
    }
}

/// `Vᵢ(θ) = ½‖θ − cᵢ‖²`; the target is `N(c̄, I/n)`.
#[derive(Clone, Debug)]
pub struct GaussianQuadratic {
    centers: Vec<f64>,
    n: usize,
    d: usize,
    target: GaussianTarget,
}

impl GaussianQuadratic {
    pub fn centers(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.d)
    }

    /// `∇V(θ) = nθ − Σcᵢ`, coded directly.
    pub fn closed_form_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n as f64;
        theta
            .iter()
            .zip(&self.target.mean)
            .map(|(t, m)| n * t - n * m)
            .collect()
    }
}

impl GradientModel for GaussianQuadratic {
    fn n_terms(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    fn term_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let c = &self.centers[i * self.d..(i + 1) * self.d];
        for ((o, t), ci) in out.iter_mut().zip(theta).zip(c) {
            *o = t - ci;
        }
    }

    fn term_potential(&self, i: usize, theta: &[f64]) -> Option<f64> {
        let c = &self.centers[i * self.d..(i + 1) * self.d];
        Some(0.5 * theta.iter().zip(c).map(|(t, ci)| (t - ci).powi(2)).sum::<f64>())
    }

    fn analytic_target(&self) -> Option<&GaussianTarget> {
        Some(&self.target)
    }

    fn name(&self) -> &str {
        "gaussian"
    }
}

/// Builds the quadratic model from explicit centers.
pub fn gaussian_quadratic_model(centers: &[Vec<f64>]) -> Result<GaussianQuadratic> {
    let first = centers.first().ok_or(Error::Empty("centers"))?;
    let d = first.len();
    if d == 0 {
        return Err(Error::Empty("center dimension"));
    }
    let mut flat = Vec::with_capacity(centers.len() * d);
    for c in centers {
        if c.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: c.len(),
            });
        }
        ensure_finite(c, "centers")?;
        flat.extend_from_slice(c);
    }
    let n = centers.len();
    let mut mean = vec![0.0; d];
    for c in centers {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let covariance = DMatrix::identity(d, d) / n as f64;
    Ok(GaussianQuadratic {
        centers: flat,
        n,
        d,
        target: GaussianTarget { mean, covariance },
    })
}

/// Draws `n` centers from a standard normal in `d` dimensions.
pub fn random_centers<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// A feature matrix with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    n: usize,
    p: usize,
}

impl Dataset {
    /// `features` is row-major `n × p`.
    pub fn new(features: Vec<f64>, labels: Vec<f64>, p: usize) -> Result<Self> {
        let n = labels.len();
        if features.len() != n * p {
            return Err(Error::DimensionMismatch {
                expected: n * p,
                found: features.len(),
            });
        }
        ensure_finite(&features, "features")?;
        ensure_finite(&labels, "labels")?;
        Ok(Dataset {
            features,
            labels,
            n,
            p,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                found: labels.len(),
            });
        }
        let mut features = Vec::with_capacity(rows.len() * p);
        for r in rows {
            if r.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: r.len(),
                });
            }
            features.extend_from_slice(r);
        }
        Dataset::new(features, labels, p)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_features(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Rescales every feature column to mean 0 and (population) std 1.
    /// Constant columns are only centered.
    pub fn standardize(&mut self) {
        let (n, p) = (self.n as f64, self.p);
        for j in 0..p {
            let mean = (0..self.n).map(|i| self.features[i * p + j]).sum::<f64>() / n;
            let var = (0..self.n)
                .map(|i| (self.features[i * p + j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            for i in 0..self.n {
                let v = &mut self.features[i * p + j];
                *v -= mean;
                if sd > 0.0 {
                    *v /= sd;
                }
            }
        }
    }

    /// Splits off the trailing `fraction` of rows as a held-out set.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let n_test = ((self.n as f64) * test_fraction).round() as usize;
        let n_train = self.n - n_test;
        let cut = n_train * self.p;
        (
            Dataset {
                features: self.features[..cut].to_vec(),
                labels: self.labels[..n_train].to_vec(),
                n: n_train,
                p: self.p,
            },
            Dataset {
                features: self.features[cut..].to_vec(),
                labels: self.labels[n_train..].to_vec(),
                n: n_test,
                p: self.p,
            },
        )
    }
}

/// Which CSV column carries the label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelColumn {
    #[default]
    Last,
    First,
    Index(usize),
}

/// Reads a numeric CSV. A first row containing any non-numeric cell is
/// treated as a header.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    label_column: &LabelColumn,
    standardize: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv_dataset(file, label_column, standardize)
}

pub fn read_csv_dataset<R: std::io::Read>(
    reader: R,
    label_column: &LabelColumn,
    standardize: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if row_idx == 0 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row: row_idx + 1,
                column: record.len().min(w) + 1,
                message: format!("expected {w} columns, found {}", record.len()),
            });
        }
        if w < 2 {
            return Err(Error::Parse {
                row: row_idx + 1,
                column: 1,
                message: "need at least one feature and one label column".into(),
            });
        }
        let label_idx = match label_column {
            LabelColumn::Last => w - 1,
            LabelColumn::First => 0,
            LabelColumn::Index(i) if *i < w => *i,
            LabelColumn::Index(i) => {
                return Err(Error::Parse {
                    row: row_idx + 1,
                    column: i + 1,
                    message: format!("label column {i} out of range"),
                })
            }
        };
        let mut feats = Vec::with_capacity(w - 1);
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_idx + 1,
                column: col + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_idx + 1,
                    column: col + 1,
                    message: "non-finite value".into(),
                });
            }
            if col == label_idx {
                labels.push(v);
            } else {
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut ds = Dataset::from_rows(&rows, labels)?;
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Bayesian logistic regression with an isotropic Gaussian prior.
///
/// The prior `‖θ‖²/(2s²)` is split evenly over the `n` data terms, so each
/// `Vᵢ(θ) = ‖θ‖²/(2s²n) + NLL(yᵢ | xᵢ, θ)` and `Σ Vᵢ = V` exactly.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    data: Dataset,
    prior_variance: f64,
}

impl LogisticRegression {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn prior_variance(&self) -> f64 {
        self.prior_variance
    }

    /// `P(y = 1 | x, θ)`.
    pub fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        sigmoid(dot(x, theta))
    }

    /// Per-datum negative log-likelihood.
    pub fn nll(&self, i: usize, theta: &[f64]) -> f64 {
        let z = dot(self.data.row(i), theta);
        softplus(z) - self.data.label(i) * z
    }

    /// `θ/s² + Σ (σ(θᵀxᵢ) − yᵢ) xᵢ`, coded directly.
    pub fn closed_form_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = theta.iter().map(|t| t / self.prior_variance).collect();
        for i in 0..self.data.len() {
            let x = self.data.row(i);
            let r = sigmoid(dot(x, theta)) - self.data.label(i);
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        g
    }
}

impl GradientModel for LogisticRegression {
    fn n_terms(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        self.data.n_features()
    }

    #[inline]
    fn term_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let x = self.data.row(i);
        let r = sigmoid(dot(x, theta)) - self.data.label(i);
        let prior = 1.0 / (self.prior_variance * self.data.len() as f64);
        for ((o, t), xj) in out.iter_mut().zip(theta).zip(x) {
            *o = prior * t + r * xj;
        }
    }

    fn term_potential(&self, i: usize, theta: &[f64]) -> Option<f64> {
        let prior = dot(theta, theta) / (2.0 * self.prior_variance * self.data.len() as f64);
        Some(prior + self.nll(i, theta))
    }

    fn name(&self) -> &str {
        "blr"
    }
}

pub fn blr_model(dataset: Dataset, prior_variance: f64) -> Result<LogisticRegression> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(prior_variance > 0.0) {
        return Err(Error::NonPositive {
            what: "prior_variance",
            value: prior_variance,
        });
    }
    for (row, &y) in dataset.labels().iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::NonBinaryLabel { row, value: y });
        }
    }
    Ok(LogisticRegression {
        data: dataset,
        prior_variance,
    })
}

/// Synthetic logistic data: standard-normal features, labels drawn from the
/// logistic model at `theta_star`.
pub fn synthetic_logistic_data<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    theta_star: &[f64],
) -> Dataset {
    let p = theta_star.len();
    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let prob = sigmoid(dot(&x, theta_star));
        labels.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
        features.extend(x);
    }
    Dataset::new(features, labels, p).expect("generated data is finite")
}

/// One-dimensional normal `N(μ₀, σ₀²)` fitted to scalar data, parameterized
/// as θ = (μ₀, log σ₀) under a flat prior.
#[derive(Clone, Debug)]
pub struct MisspecifiedGaussian {
    data: Vec<f64>,
}

impl MisspecifiedGaussian {
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Maximum-likelihood point: (sample mean, log of population std).
    pub fn mode(&self) -> [f64; 2] {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        [mean, 0.5 * var.ln()]
    }

    pub fn closed_form_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (mu, lambda) = (theta[0], theta[1]);
        let prec = (-2.0 * lambda).exp();
        let n = self.data.len() as f64;
        let s1: f64 = self.data.iter().map(|x| x - mu).sum();
        let s2: f64 = self.data.iter().map(|x| (x - mu).powi(2)).sum();
        vec![-s1 * prec, n - s2 * prec]
    }
}

impl GradientModel for MisspecifiedGaussian {
    fn n_terms(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn term_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        let (mu, lambda) = (theta[0], theta[1]);
        let prec = (-2.0 * lambda).exp();
        let dev = self.data[i] - mu;
        out[0] = -dev * prec;
        out[1] = 1.0 - dev * dev * prec;
    }

    fn term_potential(&self, i: usize, theta: &[f64]) -> Option<f64> {
        let (mu, lambda) = (theta[0], theta[1]);
        Some(lambda + 0.5 * (self.data[i] - mu).powi(2) * (-2.0 * lambda).exp())
    }

    fn name(&self) -> &str {
        "misspecified"
    }
}

pub fn misspecified_gaussian_model(data: Vec<f64>) -> Result<MisspecifiedGaussian> {
    if data.len() < 2 {
        return Err(Error::TooFew {
            what: "data points",
            required: 2,
            found: data.len(),
        });
    }
    ensure_finite(&data, "data")?;
    Ok(MisspecifiedGaussian { data })
}

/// Scalar `Vᵢ(θ) = (θ − μᵢ)²/(2n)` with centered offsets, so `V = θ²/2 + const`.
#[derive(Clone, Debug)]
pub struct QuadraticScalar {
    offsets: Vec<f64>,
    recentered: bool,
    target: GaussianTarget,
}

impl QuadraticScalar {
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// True when the supplied offsets did not sum to zero and were shifted.
    pub fn was_recentered(&self) -> bool {
        self.recentered
    }
}

impl GradientModel for QuadraticScalar {
    fn n_terms(&self) -> usize {
        self.offsets.len()
    }

    fn dim(&self) -> usize {
        1
    }

    #[inline]
    fn term_gradient(&self, i: usize, theta: &[f64], out: &mut [f64]) {
        out[0] = (theta[0] - self.offsets[i]) / self.offsets.len() as f64;
    }

    fn term_potential(&self, i: usize, theta: &[f64]) -> Option<f64> {
        Some((theta[0] - self.offsets[i]).powi(2) / (2.0 * self.offsets.len() as f64))
    }

    fn analytic_target(&self) -> Option<&GaussianTarget> {
        Some(&self.target)
    }

    fn name(&self) -> &str {
        "quadratic-scalar"
    }
}

pub fn quadratic_scalar_model(offsets: Vec<f64>) -> Result<QuadraticScalar> {
    if offsets.is_empty() {
        return Err(Error::Empty("offsets"));
    }
    ensure_finite(&offsets, "offsets")?;
    let n = offsets.len() as f64;
    let sum: f64 = offsets.iter().sum();
    let scale = offsets.iter().map(|m| m.abs()).fold(1.0, f64::max);
    let recentered = sum.abs() > 1e-12 * n * scale;
    let offsets = if recentered {
        let mean = sum / n;
        offsets.iter().map(|m| m - mean).collect()
    } else {
        offsets
    };
    Ok(QuadraticScalar {
        offsets,
        recentered,
        target: GaussianTarget {
            mean: vec![0.0],
            covariance: DMatrix::identity(1, 1),
        },
    })
}
