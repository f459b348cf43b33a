//! Monte-Carlo evaluation of the score-matching family of training
//! objectives on common random numbers.
//!
//! A `PairSample` fixes the draws `(atom k, time t, noise z)` once; every
//! objective is then a deterministic average over the same noisy points
//! `x = 2t z + y_k`, so algebraic identities between objectives (denoising
//! score matching vs noise prediction, the integration-by-parts shift of the
//! Hyvarinen form) hold to the bit or within tight statistical error rather
//! than as loose Monte-Carlo comparisons.
//!
//! Times are drawn uniformly on `(t_floor, T)`. The exact objective's time
//! integral starts at 0, but the `1/2t` regression target has infinite
//! variance there; `t_floor` (default 1e-3) is the declared deviation.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::io::{self, Write};

use crate::measures::EmpiricalMeasure;
use crate::score::ScoreField;

/// Default lower cutoff of the time integral.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("pair sample needs at least one draw")]
    EmptySample,
    #[error("time floor {t_floor} must satisfy 0 < t_floor < horizon {t_horizon}")]
    BadTimeWindow { t_floor: f64, t_horizon: f64 },
    #[error("penalty weight must be nonnegative, got {0}")]
    NegativeLambda(f64),
}

/// One draw: atom index, time, the raw noise `z ~ N(0, I/(2t))`, and the
/// noisy point `x = 2t z + y_k`.
#[derive(Debug, Clone)]
pub struct Pair {
    pub atom: usize,
    pub t: f64,
    pub z: DVector<f64>,
    pub x: DVector<f64>,
}

/// Common random numbers shared by all objectives.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub pairs: Vec<Pair>,
    pub t_horizon: f64,
    pub t_floor: f64,
    pub seed: u64,
}

impl PairSample {
    /// Length of the sampled time window; the Monte-Carlo measure factor.
    pub fn time_span(&self) -> f64 {
        self.t_horizon - self.t_floor
    }
}

/// Draws `n` pairs: `t ~ U(t_floor, T)`, `k ~ weights`,
/// `z ~ N(0, I/(2t))`, deterministic under the seed.
pub fn sample_pairs(
    mu: &EmpiricalMeasure,
    t_horizon: f64,
    t_floor: f64,
    n: usize,
    seed: u64,
) -> Result<PairSample, LossError> {
    if n == 0 {
        return Err(LossError::EmptySample);
    }
    if !(t_floor > 0.0 && t_floor < t_horizon) {
        return Err(LossError::BadTimeWindow { t_floor, t_horizon });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atom_dist = rand::distr::weighted::WeightedIndex::new(mu.weights())
        .expect("measure weights are positive");
    let d = mu.dim();
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let t = t_floor + (t_horizon - t_floor) * rng.random::<f64>();
        let atom = atom_dist.sample(&mut rng);
        let scale = 1.0 / (2.0 * t).sqrt();
        let mut z = DVector::zeros(d);
        for c in z.iter_mut() {
            let xi: f64 = StandardNormal.sample(&mut rng);
            *c = scale * xi;
        }
        let x = &z * (2.0 * t) + &mu.points()[atom];
        pairs.push(Pair { atom, t, z, x });
    }
    Ok(PairSample {
        pairs,
        t_horizon,
        t_floor,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    ScoreMatching,
    Ddpm,
    Hyvarinen,
    Penalized,
}

/// A Monte-Carlo objective value with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub objective: Objective,
    /// Penalty weight; zero for the other objectives.
    pub lambda: f64,
}

fn estimate_from(
    values: impl Iterator<Item = f64>,
    factor: f64,
    objective: Objective,
) -> LossEstimate {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for v in values {
        n += 1;
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    LossEstimate {
        value: factor * mean,
        std_error: factor * (var / nf).sqrt(),
        n_samples: n,
        objective,
        lambda: 0.0,
    }
}

/// Denoising score matching: average of `|s_theta(x,t) - (y_k - x)/2t|^2`
/// times the time-window factor.
pub fn score_matching_loss(
    field: &dyn ScoreField,
    mu: &EmpiricalMeasure,
    sample: &PairSample,
) -> LossEstimate {
    estimate_from(
        sample.pairs.iter().map(|p| {
            let target = (&mu.points()[p.atom] - &p.x) / (2.0 * p.t);
            (field.eval(&p.x, p.t) - target).norm_squared()
        }),
        sample.time_span(),
        Objective::ScoreMatching,
    )
}

/// Noise-prediction form: average of `|s_theta(2t z + y_k, t) + z|^2` with
/// `z` recovered from the stored noisy point. The change of variables is the
/// identity on the draws, so this matches [`score_matching_loss`] bit for
/// bit on a shared sample.
pub fn ddpm_loss(
    field: &dyn ScoreField,
    mu: &EmpiricalMeasure,
    sample: &PairSample,
) -> LossEstimate {
    estimate_from(
        sample.pairs.iter().map(|p| {
            let z = (&p.x - &mu.points()[p.atom]) / (2.0 * p.t);
            (field.eval(&p.x, p.t) + z).norm_squared()
        }),
        sample.time_span(),
        Objective::Ddpm,
    )
}

/// Integration-by-parts form: average of `|s_theta|^2 + 2 div s_theta`.
pub fn hyvarinen_loss(field: &dyn ScoreField, sample: &PairSample) -> LossEstimate {
    estimate_from(
        sample.pairs.iter().map(|p| {
            field.eval(&p.x, p.t).norm_squared() + 2.0 * field.divergence(&p.x, p.t)
        }),
        sample.time_span(),
        Objective::Hyvarinen,
    )
}

/// Score matching plus `lambda * (div s_theta)^2`. With `lambda = 0` the
/// value equals [`score_matching_loss`] bitwise.
pub fn penalized_loss(
    field: &dyn ScoreField,
    mu: &EmpiricalMeasure,
    lambda: f64,
    sample: &PairSample,
) -> Result<LossEstimate, LossError> {
    if lambda < 0.0 {
        return Err(LossError::NegativeLambda(lambda));
    }
    let mut est = estimate_from(
        sample.pairs.iter().map(|p| {
            let target = (&mu.points()[p.atom] - &p.x) / (2.0 * p.t);
            let sm = (field.eval(&p.x, p.t) - target).norm_squared();
            let div = field.divergence(&p.x, p.t);
            sm + lambda * (div * div)
        }),
        sample.time_span(),
        Objective::Penalized,
    );
    est.lambda = lambda;
    Ok(est)
}

/// JSON record of one objective evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub objective: Objective,
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub lambda: f64,
    pub t_floor: f64,
    pub seed: u64,
}

impl LossReport {
    pub fn new(estimate: &LossEstimate, sample: &PairSample) -> Self {
        Self {
            objective: estimate.objective,
            value: estimate.value,
            std_error: estimate.std_error,
            n: estimate.n_samples,
            lambda: estimate.lambda,
            t_floor: sample.t_floor,
            seed: sample.seed,
        }
    }
}

/// Writes a list of loss reports as pretty JSON.
pub fn write_loss_reports_json<W: Write>(out: W, reports: &[LossReport]) -> io::Result<()> {
    serde_json::to_writer_pretty(out, reports)?;
    Ok(())
}
