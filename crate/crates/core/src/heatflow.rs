//! Forward heat-flow quantities of an empirical measure in closed form.
//!
//! The flow of a Dirac sum is a Gaussian mixture, so the log-density and its
//! first two derivatives reduce to the posterior statistics of the atoms
//! under Gaussian responsibilities. Everything here is evaluated through a
//! shifted log-sum-exp so probes at t down to 1e-12 neither overflow nor
//! collapse to -inf.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erf;

use crate::measures::EmpiricalMeasure;

#[derive(Debug, thiserror::Error)]
pub enum HeatflowError {
    #[error("time must be strictly positive, got {0}")]
    NonPositiveTime(f64),
    #[error("point has dimension {found}, measure has dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("sample count must be at least 1")]
    EmptySample,
}

/// A space-time probe with strictly positive time.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatPoint {
    pub x: DVector<f64>,
    pub t: f64,
}

impl HeatPoint {
    pub fn new(x: DVector<f64>, t: f64) -> Result<Self, HeatflowError> {
        if !(t > 0.0) {
            return Err(HeatflowError::NonPositiveTime(t));
        }
        Ok(Self { x, t })
    }
}

/// Value, gradient, and Hessian of `log u(., t)` at one probe.
#[derive(Debug, Clone)]
pub struct LogDensityJet {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Gaussian posterior of the atoms at a probe `(x, t)`: responsibilities
/// `r_k` proportional to `w_k exp(-|x - y_k|^2 / 4t)`, their mean, and the
/// shifted log normalizer.
#[derive(Debug, Clone)]
pub(crate) struct Posterior {
    /// log sum_k w_k exp(-|x - y_k|^2 / 4t), computed as max + log-sum-exp.
    pub log_kernel_sum: f64,
    pub responsibilities: Vec<f64>,
    pub mean: DVector<f64>,
}

pub(crate) fn posterior(mu: &EmpiricalMeasure, x: &DVector<f64>, t: f64) -> Posterior {
    let inv4t = 1.0 / (4.0 * t);
    let mut exponents = Vec::with_capacity(mu.len());
    let mut max_exp = f64::NEG_INFINITY;
    for (y, &w) in mu.points().iter().zip(mu.weights()) {
        let e = w.ln() - (x - y).norm_squared() * inv4t;
        if e > max_exp {
            max_exp = e;
        }
        exponents.push(e);
    }
    let mut responsibilities: Vec<f64> = exponents.iter().map(|e| (e - max_exp).exp()).collect();
    let sum: f64 = responsibilities.iter().sum();
    for r in &mut responsibilities {
        *r /= sum;
    }
    let mut mean = DVector::zeros(mu.dim());
    for (y, &r) in mu.points().iter().zip(&responsibilities) {
        mean.axpy(r, y, 1.0);
    }
    Posterior {
        log_kernel_sum: max_exp + sum.ln(),
        responsibilities,
        mean,
    }
}

fn check_probe(mu: &EmpiricalMeasure, x: &DVector<f64>, t: f64) -> Result<(), HeatflowError> {
    if !(t > 0.0) {
        return Err(HeatflowError::NonPositiveTime(t));
    }
    if x.len() != mu.dim() {
        return Err(HeatflowError::DimensionMismatch {
            found: x.len(),
            expected: mu.dim(),
        });
    }
    Ok(())
}

/// `log u(x, t)` for the heat flow of `mu`.
pub fn log_density(mu: &EmpiricalMeasure, x: &DVector<f64>, t: f64) -> Result<f64, HeatflowError> {
    check_probe(mu, x, t)?;
    Ok(log_density_unchecked(mu, x, t))
}

pub(crate) fn log_density_unchecked(mu: &EmpiricalMeasure, x: &DVector<f64>, t: f64) -> f64 {
    let d = mu.dim() as f64;
    posterior(mu, x, t).log_kernel_sum - 0.5 * d * (4.0 * std::f64::consts::PI * t).ln()
}

/// Value, gradient `(m(x,t) - x) / 2t`, and Hessian
/// `-I/2t + Cov/(4 t^2)` of the log-density, where `Cov` is the posterior
/// covariance of the atoms.
pub fn log_density_jet(
    mu: &EmpiricalMeasure,
    x: &DVector<f64>,
    t: f64,
) -> Result<LogDensityJet, HeatflowError> {
    check_probe(mu, x, t)?;
    let d = mu.dim();
    let post = posterior(mu, x, t);
    let value = post.log_kernel_sum - 0.5 * d as f64 * (4.0 * std::f64::consts::PI * t).ln();
    let gradient = (&post.mean - x) / (2.0 * t);

    let mut cov = DMatrix::zeros(d, d);
    for (y, &r) in mu.points().iter().zip(&post.responsibilities) {
        if r == 0.0 {
            continue;
        }
        let dev = y - &post.mean;
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += r * dev[i] * dev[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let mut hessian = cov / (4.0 * t * t);
    for i in 0..d {
        hessian[(i, i)] -= 1.0 / (2.0 * t);
    }
    Ok(LogDensityJet {
        value,
        gradient,
        hessian,
    })
}

/// Pointwise Gaussian envelope of the heat flow for a measure supported in
/// the ball of radius `R = mu.radius()`:
///
/// `(4 pi t)^{-d/2} exp(-(|x|+R)^2 / 4t) <= u(x,t) <= (4 pi t)^{-d/2} exp(-max(|x|-R, 0)^2 / 4t)`.
///
/// The upper exponent uses the distance from `x` to the support ball, which
/// is zero inside it; with the raw `(|x|-R)^2` the bound fails there.
pub fn gaussian_bounds(
    mu: &EmpiricalMeasure,
    x: &DVector<f64>,
    t: f64,
) -> Result<(f64, f64), HeatflowError> {
    check_probe(mu, x, t)?;
    let d = mu.dim() as f64;
    let r = mu.radius();
    let norm_x = x.norm();
    let prefactor = (4.0 * std::f64::consts::PI * t).powf(-0.5 * d);
    let lower = prefactor * (-(norm_x + r).powi(2) / (4.0 * t)).exp();
    let upper = prefactor * (-(norm_x - r).max(0.0).powi(2) / (4.0 * t)).exp();
    Ok((lower, upper))
}

/// Monte-Carlo estimate of `int e^{|x|} u(x,t) dx` with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Estimates the exponential moment of `u(., t)` by sampling an atom from
/// the weights and a Gaussian displacement of variance `2t` per axis.
pub fn exp_moment_estimate(
    mu: &EmpiricalMeasure,
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MomentEstimate, HeatflowError> {
    if !(t > 0.0) {
        return Err(HeatflowError::NonPositiveTime(t));
    }
    if n_samples == 0 {
        return Err(HeatflowError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atom_dist = rand::distr::weighted::WeightedIndex::new(mu.weights())
        .expect("measure weights are positive");
    let sigma = (2.0 * t).sqrt();
    let d = mu.dim();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let y = &mu.points()[atom_dist.sample(&mut rng)];
        let mut norm_sq = 0.0;
        for i in 0..d {
            let xi: f64 = StandardNormal.sample(&mut rng);
            let coord = y[i] + sigma * xi;
            norm_sq += coord * coord;
        }
        let v = norm_sq.sqrt().exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    Ok(MomentEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        n_samples,
    })
}

/// Closed-form upper bound `e^R (2 e^t Phi(sqrt(2t)))^d` on the exponential
/// moment, from `e^{|x|} <= e^{|y|} e^{|x-y|}` and the per-axis one-sided
/// Gaussian moment `E e^{|Z|} = 2 e^{sigma^2/2} Phi(sigma)`, `sigma^2 = 2t`.
pub fn exp_moment_bound(mu: &EmpiricalMeasure, t: f64) -> Result<f64, HeatflowError> {
    if !(t > 0.0) {
        return Err(HeatflowError::NonPositiveTime(t));
    }
    let sigma = (2.0 * t).sqrt();
    let phi = 0.5 * (1.0 + erf(sigma / std::f64::consts::SQRT_2));
    let one_axis = 2.0 * (0.5 * sigma * sigma).exp() * phi;
    Ok(mu.radius().exp() * one_axis.powi(mu.dim() as i32))
}
