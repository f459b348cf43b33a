//! Score fields: the exact empirical score with analytic divergence, the
//! Gaussian mean-shift map, and algebraic wrappers used as candidate fields.

use nalgebra::DVector;

use crate::heatflow::{self, HeatflowError};
use crate::measures::EmpiricalMeasure;

/// Finite-difference step for divergences of fields without an analytic one.
pub const FD_DIVERGENCE_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    EmpiricalExact,
    Scaled,
    Biased,
    Custom,
}

/// An evaluable score field `s(x, t)` with a divergence.
///
/// Evaluation requires `t > 0`; schedules and public entry points enforce
/// this, so implementations may assume it. The default divergence is a
/// central finite-difference trace of the Jacobian with step
/// [`FD_DIVERGENCE_STEP`].
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;

    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        let h = FD_DIVERGENCE_STEP;
        let mut trace = 0.0;
        let mut probe = x.clone();
        for i in 0..self.dim() {
            probe[i] = x[i] + h;
            let plus = self.eval(&probe, t)[i];
            probe[i] = x[i] - h;
            let minus = self.eval(&probe, t)[i];
            probe[i] = x[i];
            trace += (plus - minus) / (2.0 * h);
        }
        trace
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::Custom
    }
}

impl<S: ScoreField + ?Sized> ScoreField for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, t)
    }
    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        (**self).divergence(x, t)
    }
    fn kind(&self) -> ScoreKind {
        (**self).kind()
    }
}

impl<S: ScoreField + ?Sized> ScoreField for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, t)
    }
    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        (**self).divergence(x, t)
    }
    fn kind(&self) -> ScoreKind {
        (**self).kind()
    }
}

/// Gaussian posterior mean of the atoms at `(x, t)` together with the
/// responsibilities that produced it. The mean is a convex combination of
/// the atoms, hence always inside their convex hull.
#[derive(Debug, Clone)]
pub struct MeanShift {
    pub mean: DVector<f64>,
    pub responsibilities: Vec<f64>,
}

/// Responsibility-weighted atom average `m(x, t)`.
pub fn mean_shift(
    mu: &EmpiricalMeasure,
    x: &DVector<f64>,
    t: f64,
) -> Result<MeanShift, HeatflowError> {
    if !(t > 0.0) {
        return Err(HeatflowError::NonPositiveTime(t));
    }
    if x.len() != mu.dim() {
        return Err(HeatflowError::DimensionMismatch {
            found: x.len(),
            expected: mu.dim(),
        });
    }
    let post = heatflow::posterior(mu, x, t);
    Ok(MeanShift {
        mean: post.mean,
        responsibilities: post.responsibilities,
    })
}

/// Exact score of the heat flow of `mu`: `s(x,t) = (m(x,t) - x) / 2t`.
pub fn empirical_score(
    mu: &EmpiricalMeasure,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, HeatflowError> {
    let shift = mean_shift(mu, x, t)?;
    Ok((shift.mean - x) / (2.0 * t))
}

/// Analytic divergence `div s = -d/2t + tr Cov(posterior) / 4t^2`.
///
/// The covariance trace is a sum of nonnegative terms, so the value never
/// drops below `-d/2t`.
pub fn empirical_divergence(
    mu: &EmpiricalMeasure,
    x: &DVector<f64>,
    t: f64,
) -> Result<f64, HeatflowError> {
    if !(t > 0.0) {
        return Err(HeatflowError::NonPositiveTime(t));
    }
    if x.len() != mu.dim() {
        return Err(HeatflowError::DimensionMismatch {
            found: x.len(),
            expected: mu.dim(),
        });
    }
    let post = heatflow::posterior(mu, x, t);
    let mut cov_trace = 0.0;
    for (y, &r) in mu.points().iter().zip(&post.responsibilities) {
        if r > 0.0 {
            cov_trace += r * (y - &post.mean).norm_squared();
        }
    }
    Ok(-(mu.dim() as f64) / (2.0 * t) + cov_trace / (4.0 * t * t))
}

/// `div s(x,t) + d/2t`: nonnegative for exact empirical scores, signed for
/// arbitrary candidate fields.
pub fn li_yau_margin(field: &dyn ScoreField, x: &DVector<f64>, t: f64) -> f64 {
    field.divergence(x, t) + field.dim() as f64 / (2.0 * t)
}

/// The exact empirical score as a [`ScoreField`].
#[derive(Debug, Clone)]
pub struct EmpiricalScore {
    measure: EmpiricalMeasure,
}

impl EmpiricalScore {
    pub fn new(measure: EmpiricalMeasure) -> Self {
        Self { measure }
    }

    pub fn measure(&self) -> &EmpiricalMeasure {
        &self.measure
    }
}

impl ScoreField for EmpiricalScore {
    fn dim(&self) -> usize {
        self.measure.dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let post = heatflow::posterior(&self.measure, x, t);
        (post.mean - x) / (2.0 * t)
    }

    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        empirical_divergence(&self.measure, x, t).expect("t > 0 by contract")
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::EmpiricalExact
    }
}

/// `scale * base`: both the field and its divergence scale.
pub struct ScaledScore<S> {
    base: S,
    scale: f64,
}

impl<S: ScoreField> ScaledScore<S> {
    pub fn new(base: S, scale: f64) -> Self {
        Self { base, scale }
    }
}

impl<S: ScoreField> ScoreField for ScaledScore<S> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.base.eval(x, t) * self.scale
    }
    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.scale * self.base.divergence(x, t)
    }
    fn kind(&self) -> ScoreKind {
        ScoreKind::Scaled
    }
}

/// `base + constant`: the divergence is untouched by a constant shift.
pub struct BiasedScore<S> {
    base: S,
    bias: DVector<f64>,
}

impl<S: ScoreField> BiasedScore<S> {
    pub fn new(base: S, bias: DVector<f64>) -> Self {
        assert_eq!(bias.len(), base.dim(), "bias dimension mismatch");
        Self { base, bias }
    }
}

impl<S: ScoreField> ScoreField for BiasedScore<S> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.base.eval(x, t) + &self.bias
    }
    fn divergence(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.base.divergence(x, t)
    }
    fn kind(&self) -> ScoreKind {
        ScoreKind::Biased
    }
}

/// A score field defined by a closure; divergence falls back to finite
/// differences unless one is supplied.
pub struct FnScore<F> {
    dim: usize,
    eval: F,
}

impl<F> FnScore<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, eval: F) -> Self {
        Self { dim, eval }
    }
}

impl<F> ScoreField for FnScore<F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.eval)(x, t)
    }
}

/// Algebraic transform applied by [`make_candidate`].
#[derive(Debug, Clone)]
pub enum CandidateTransform {
    Scale(f64),
    Bias(DVector<f64>),
}

/// Wraps a base field into a candidate field for loss evaluation.
pub fn make_candidate(
    base: Box<dyn ScoreField>,
    transform: CandidateTransform,
) -> Box<dyn ScoreField> {
    match transform {
        CandidateTransform::Scale(scale) => Box::new(ScaledScore::new(base, scale)),
        CandidateTransform::Bias(bias) => Box::new(BiasedScore::new(base, bias)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::EmpiricalMeasure;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn v2(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    fn three_atom_line() -> EmpiricalMeasure {
        EmpiricalMeasure::new(
            vec![v1(-5.0), v1(0.0), v1(5.0)],
            Some(vec![0.7, 0.3, 0.1]),
        )
        .unwrap()
    }

    #[test]
    fn single_dirac_score_is_linear_pull() {
        let mu = EmpiricalMeasure::new(vec![v1(0.0)], None).unwrap();
        let s = empirical_score(&mu, &v1(2.0), 0.5).unwrap();
        assert!((s[0] + 2.0).abs() <= 1e-15);
    }

    #[test]
    fn symmetric_pair_scores_toward_axis_midpoint() {
        let mu = EmpiricalMeasure::new(vec![v2(-1.0, 0.0), v2(1.0, 0.0)], None).unwrap();
        let s = empirical_score(&mu, &v2(0.0, 1.0), 0.25).unwrap();
        assert!(s[0].abs() <= 1e-15);
        assert!((s[1] + 2.0).abs() <= 1e-12);
    }

    #[test]
    fn score_matches_finite_difference_gradient() {
        let mu = three_atom_line();
        let h = 1e-5;
        for &(x, t) in &[(-5.0, 0.01), (2.0, 0.4), (-1.0, 1.3)] {
            let s = empirical_score(&mu, &v1(x), t).unwrap()[0];
            let fp = heatflow::log_density(&mu, &v1(x + h), t).unwrap();
            let fm = heatflow::log_density(&mu, &v1(x - h), t).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (s - fd).abs() / s.abs().max(1.0) <= 1e-6,
                "x={x} t={t}: {s} vs {fd}"
            );
        }
    }

    #[test]
    fn score_agrees_with_jet_gradient() {
        let mu = three_atom_line();
        for &(x, t) in &[(-3.3, 0.07), (0.4, 0.9), (7.7, 0.2)] {
            let s = empirical_score(&mu, &v1(x), t).unwrap();
            let jet = heatflow::log_density_jet(&mu, &v1(x), t).unwrap();
            let rel = (s[0] - jet.gradient[0]).abs() / jet.gradient[0].abs().max(1e-300);
            assert!(rel <= 1e-12);
        }
    }

    #[test]
    fn mean_shift_is_barycentric() {
        let mu = three_atom_line();
        let shift = mean_shift(&mu, &v1(1.2), 0.3).unwrap();
        let sum: f64 = shift.responsibilities.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(shift.responsibilities.iter().all(|&r| r >= 0.0));
        assert!(shift.mean[0] >= -5.0 && shift.mean[0] <= 5.0);
    }

    #[test]
    fn mean_shift_fixed_points() {
        let mu = EmpiricalMeasure::new(vec![v1(3.0)], None).unwrap();
        let shift = mean_shift(&mu, &v1(-10.0), 0.01).unwrap();
        assert_eq!(shift.mean[0], 3.0);

        let pair = EmpiricalMeasure::new(vec![v2(-1.0, 0.0), v2(1.0, 0.0)], None).unwrap();
        let shift = mean_shift(&pair, &v2(0.0, 0.7), 0.2).unwrap();
        assert!(shift.mean[0].abs() <= 1e-15);
        assert!(shift.mean[1].abs() <= 1e-15);
    }

    #[test]
    fn divergence_of_single_dirac_is_exactly_contractive() {
        let mu = EmpiricalMeasure::new(vec![v2(0.0, 0.0)], None).unwrap();
        let div = empirical_divergence(&mu, &v2(1.0, 1.0), 0.5).unwrap();
        assert_eq!(div, -2.0);
    }

    #[test]
    fn divergence_never_falls_below_contraction_floor() {
        let mu = three_atom_line();
        for &(x, t) in &[(-5.0, 0.01), (0.0, 0.05), (2.5, 0.7), (9.0, 1.0)] {
            let div = empirical_divergence(&mu, &v1(x), t).unwrap();
            assert!(div + 1.0 / (2.0 * t) >= 0.0, "x={x} t={t}");
        }
    }

    #[test]
    fn analytic_divergence_matches_finite_differences() {
        let mu = three_atom_line();
        let field = EmpiricalScore::new(mu.clone());
        for &(x, t) in &[(-4.0, 0.3), (1.0, 0.8), (4.0, 0.15)] {
            let analytic = field.divergence(&v1(x), t);
            // Default-trait path: finite differences of eval.
            struct Raw<'a>(&'a EmpiricalScore);
            impl ScoreField for Raw<'_> {
                fn dim(&self) -> usize {
                    self.0.dim()
                }
                fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
                    self.0.eval(x, t)
                }
            }
            let fd = Raw(&field).divergence(&v1(x), t);
            assert!(
                (analytic - fd).abs() / analytic.abs().max(1.0) <= 1e-5,
                "x={x} t={t}: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn two_atom_margin_equals_posterior_variance_rate() {
        // Closed-form 2-point posterior at the midpoint: equal
        // responsibilities, variance = 1, margin = 1/(4 t^2).
        let mu = EmpiricalMeasure::new(vec![v1(-1.0), v1(1.0)], None).unwrap();
        let field = EmpiricalScore::new(mu);
        let t = 0.05;
        let margin = li_yau_margin(&field, &v1(0.0), t);
        let expected = 1.0 / (4.0 * t * t);
        assert!((margin - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn dirac_margin_is_zero() {
        let mu = EmpiricalMeasure::new(vec![v1(2.0)], None).unwrap();
        let field = EmpiricalScore::new(mu);
        assert_eq!(li_yau_margin(&field, &v1(-3.0), 0.2), 0.0);
    }

    #[test]
    fn candidate_wrappers_transform_consistently() {
        let mu = three_atom_line();
        let base = EmpiricalScore::new(mu);
        let x = v1(1.7);
        let t = 0.4;

        let identity = ScaledScore::new(&base, 1.0);
        assert_eq!(identity.eval(&x, t), base.eval(&x, t));
        assert_eq!(identity.divergence(&x, t), base.divergence(&x, t));

        let zero = ScaledScore::new(&base, 0.0);
        assert_eq!(zero.eval(&x, t)[0], 0.0);
        assert_eq!(zero.divergence(&x, t), 0.0);

        let biased = BiasedScore::new(&base, v1(1.0));
        assert_eq!(biased.divergence(&x, t), base.divergence(&x, t));
        assert!((biased.eval(&x, t)[0] - base.eval(&x, t)[0] - 1.0).abs() <= 1e-15);

        // An amplified field can undershoot the contraction floor; the
        // margin is reported with its sign either way.
        let amplified = ScaledScore::new(&base, 1.5);
        let m = li_yau_margin(&amplified, &v1(0.0), 0.01);
        assert!(m < 0.0);
        let damped = ScaledScore::new(&base, 0.5);
        assert!(li_yau_margin(&damped, &v1(0.0), 0.01).is_finite());
    }

    #[test]
    fn make_candidate_boxes_compose() {
        let mu = three_atom_line();
        let base: Box<dyn ScoreField> = Box::new(EmpiricalScore::new(mu));
        let x = v1(0.3);
        let probe = base.eval(&x, 0.5)[0];
        let scaled = make_candidate(base, CandidateTransform::Scale(2.0));
        assert!((scaled.eval(&x, 0.5)[0] - 2.0 * probe).abs() <= 1e-15);
        assert_eq!(scaled.kind(), ScoreKind::Scaled);
    }
}
