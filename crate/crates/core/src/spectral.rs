//! Second-order dynamical-system view of the recurrence.
//!
//! Freezing the gates at one step, the stacked (S, M) update is linear with
//! block transition matrix
//!
//!   A = [ alpha I - alpha beta eta k k^T , -beta mu I ]
//!       [ alpha eta k k^T               ,  mu I       ]
//!
//! whose spectrum is alpha and mu (each d-1 times) plus the root pair of
//! lambda^2 - p lambda + alpha mu with p = alpha + mu - alpha beta eta |k|^2.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discriminants within this band of zero collapse to a repeated real root.
const REPEATED_ROOT_BAND: f64 = 1e-14;

/// (re, im) pair; the crate carries no complex-number dependency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexPair {
    pub re: f64,
    pub im: f64,
}

impl ComplexPair {
    pub fn magnitude(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Full spectrum of the 2d x 2d transition matrix with stability flags.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub lambda_plus: ComplexPair,
    pub lambda_minus: ComplexPair,
    /// Bulk eigenvalue alpha, multiplicity d - 1.
    pub bulk_alpha: f64,
    /// Bulk eigenvalue mu, multiplicity d - 1.
    pub bulk_mu: f64,
    pub dim: usize,
    pub spectral_radius: f64,
    /// The boundedness inequality on (alpha, mu, alpha beta eta |k|^2).
    pub stable: bool,
    /// All eigenvalues have nonnegative real part.
    pub right_half_plane: bool,
}

impl SpectralReport {
    /// The eigenvalue multiset as (re, im, multiplicity); cardinality
    /// counted with multiplicity is 2d.
    pub fn eigenvalues(&self) -> Vec<(f64, f64, usize)> {
        let mut v = vec![
            (self.lambda_plus.re, self.lambda_plus.im, 1),
            (self.lambda_minus.re, self.lambda_minus.im, 1),
        ];
        if self.dim > 1 {
            v.push((self.bulk_alpha, 0.0, self.dim - 1));
            v.push((self.bulk_mu, 0.0, self.dim - 1));
        }
        v
    }
}

/// Explicit 2d x 2d block transition matrix for gates (alpha, beta, mu,
/// eta) and key vector k.
pub fn transition_matrix(alpha: f64, beta: f64, mu: f64, eta: f64, k: &[f64]) -> Tensor<f64> {
    let d = k.len();
    let n = 2 * d;
    let mut a = vec![0.0; n * n];
    for i in 0..d {
        for j in 0..d {
            let kk = k[i] * k[j];
            // Top-left: alpha I - alpha beta eta k k^T
            a[i * n + j] = -alpha * beta * eta * kk;
            // Bottom-left: alpha eta k k^T
            a[(d + i) * n + j] = alpha * eta * kk;
        }
        a[i * n + i] += alpha;
        // Top-right: -beta mu I ; bottom-right: mu I.
        a[i * n + (d + i)] = -beta * mu;
        a[(d + i) * n + (d + i)] = mu;
    }
    Tensor::from_vec(&[n, n], a).expect("square by construction")
}

/// Boundedness test: all eigenvalues of the transition matrix satisfy
/// |lambda| <= 1 iff |alpha| <= 1, |mu| <= 1 and
/// -(1 - alpha)(1 - mu) <= alpha beta eta |k|^2 <= (1 + alpha)(1 + mu).
pub fn stability_condition(alpha: f64, beta: f64, mu: f64, eta: f64, knorm2: f64) -> bool {
    let x = alpha * beta * eta * knorm2;
    alpha.abs() <= 1.0
        && mu.abs() <= 1.0
        && -(1.0 - alpha) * (1.0 - mu) <= x
        && x <= (1.0 + alpha) * (1.0 + mu)
}

/// Closed-form spectrum for key norm squared `knorm2` and head dimension
/// `d` (the pair lives on span{(k,0),(0,k)}; the bulk is alpha and mu).
pub fn closed_form_spectrum(
    alpha: f64,
    beta: f64,
    mu: f64,
    eta: f64,
    knorm2: f64,
    d: usize,
) -> Result<SpectralReport> {
    if knorm2 < 0.0 {
        return Err(Error::Precondition(format!(
            "knorm2 must be >= 0, got {knorm2}"
        )));
    }
    if d < 1 {
        return Err(Error::Precondition("d must be >= 1".into()));
    }
    let p = alpha + mu - alpha * beta * eta * knorm2;
    let disc = p * p - 4.0 * alpha * mu;
    let (lambda_plus, lambda_minus) = if disc.abs() <= REPEATED_ROOT_BAND {
        let r = p / 2.0;
        (ComplexPair { re: r, im: 0.0 }, ComplexPair { re: r, im: 0.0 })
    } else if disc > 0.0 {
        let s = disc.sqrt();
        (
            ComplexPair {
                re: (p + s) / 2.0,
                im: 0.0,
            },
            ComplexPair {
                re: (p - s) / 2.0,
                im: 0.0,
            },
        )
    } else {
        let s = (-disc).sqrt();
        (
            ComplexPair {
                re: p / 2.0,
                im: s / 2.0,
            },
            ComplexPair {
                re: p / 2.0,
                im: -s / 2.0,
            },
        )
    };

    let mut radius = lambda_plus.magnitude().max(lambda_minus.magnitude());
    if d > 1 {
        radius = radius.max(alpha.abs()).max(mu.abs());
    }
    let right_half_plane =
        lambda_plus.re >= 0.0 && lambda_minus.re >= 0.0 && alpha >= 0.0 && mu >= 0.0;

    Ok(SpectralReport {
        lambda_plus,
        lambda_minus,
        bulk_alpha: alpha,
        bulk_mu: mu,
        dim: d,
        spectral_radius: radius,
        stable: stability_condition(alpha, beta, mu, eta, knorm2),
        right_half_plane,
    })
}

/// Inclusive linear grid over one parameter.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.lo];
        }
        let d = (self.hi - self.lo) / (self.steps - 1) as f64;
        (0..self.steps).map(|i| self.lo + d * i as f64).collect()
    }
}

/// Coefficient sweep specification over (alpha, beta, mu, eta) with unit
/// key norm. `constrained` keeps only points with beta <= 1 - alpha and
/// mu in [e^-1, 1).
#[derive(Debug, Clone, Serialize)]
pub struct SweepSpec {
    pub alpha: GridAxis,
    pub beta: GridAxis,
    pub mu: GridAxis,
    pub eta: GridAxis,
    pub constrained: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub eta: f64,
    pub report: SpectralReport,
}

pub const SWEEP_CSV_HEADER: &str = "alpha,beta,mu,eta,re_lp,im_lp,re_lm,im_lm,stable,rhp";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.alpha,
            self.beta,
            self.mu,
            self.eta,
            self.report.lambda_plus.re,
            self.report.lambda_plus.im,
            self.report.lambda_minus.re,
            self.report.lambda_minus.im,
            self.report.stable as u8,
            self.report.right_half_plane as u8,
        )
    }
}

/// Evaluate the closed form across the grid (d = 1, |k| = 1).
pub fn spectrum_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in &spec.alpha.values() {
        for &beta in &spec.beta.values() {
            for &mu in &spec.mu.values() {
                for &eta in &spec.eta.values() {
                    if spec.constrained
                        && !(beta <= 1.0 - alpha && ((-1.0f64).exp()..1.0).contains(&mu))
                    {
                        continue;
                    }
                    let report = closed_form_spectrum(alpha, beta, mu, eta, 1.0, 1)?;
                    rows.push(SweepRow {
                        alpha,
                        beta,
                        mu,
                        eta,
                        report,
                    });
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Precondition("sweep grid is empty".into()));
    }
    Ok(rows)
}
