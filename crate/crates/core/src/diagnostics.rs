//! Trajectory- and ensemble-level checks of the reverse-time dynamics:
//! distances to the support and its convex hull, the sqrt-t imitation-rate
//! fit, gamma-Voronoi core machinery, neighborhood-mass concentration, and
//! the coordinate change between the confined and plain heat flows.

use nalgebra::DVector;
use std::io::{self, Write};

use crate::geometry;
use crate::measures::{EmpiricalMeasure, SupportGeometry};
use crate::reverse::{Ensemble, Trajectory};

/// Initializations whose squared-distance gap to the second-nearest atom is
/// below this are reported as bisector cases.
pub const BISECTOR_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("atom index {index} out of range for {len} atoms")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("all recorded distances are below the floor; the trajectory hit the target exactly")]
    ExactHit,
    #[error("rate fit needs at least {needed} usable nodes, found {found}")]
    TooFewNodes { needed: usize, found: usize },
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
}

/// `min_k |x - y_k|`.
pub fn dist_to_support(mu: &EmpiricalMeasure, x: &DVector<f64>) -> f64 {
    mu.points()
        .iter()
        .map(|y| (x - y).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Euclidean distance to the convex hull of the support: exact interval and
/// polygon projections for d <= 2, Frank-Wolfe projection over the hull
/// vertices in higher dimension.
pub fn dist_to_hull(geom: &SupportGeometry, x: &DVector<f64>) -> f64 {
    let hull = geom.hull_points();
    match geom.dim() {
        1 => {
            let lo = hull.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let hi = hull.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            (lo - x[0]).max(x[0] - hi).max(0.0)
        }
        2 => geometry::dist_to_polygon(x, hull),
        _ => geometry::project_onto_hull(hull, x).1,
    }
}

/// Node-wise audit of the hull contraction bound
/// `d(X_t, K) <= d(x_T, K) sqrt(t/T) + slack`.
#[derive(Debug, Clone)]
pub struct HullRateReport {
    pub initial_dist: f64,
    pub slack: f64,
    /// Largest `d(X_t,K) - d(x_T,K) sqrt(t/T) - slack` over nodes;
    /// nonpositive when the bound holds everywhere.
    pub worst_violation: f64,
    pub worst_node: usize,
}

/// Checks the square-root contraction of the hull distance along a
/// deterministic trajectory, with integrator slack
/// `1e-4 + 1e-3 d(x_T, K)`.
pub fn hull_rate_check(traj: &Trajectory, geom: &SupportGeometry) -> HullRateReport {
    let t_horizon = traj.times[0];
    let initial_dist = dist_to_hull(geom, traj.initial_state());
    let slack = 1e-4 + 1e-3 * initial_dist;
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_node = 0;
    for (k, (t, state)) in traj.times.iter().zip(&traj.states).enumerate() {
        let bound = initial_dist * (t / t_horizon).sqrt();
        let violation = dist_to_hull(geom, state) - bound - slack;
        if violation > worst_violation {
            worst_violation = violation;
            worst_node = k;
        }
    }
    HullRateReport {
        initial_dist,
        slack,
        worst_violation,
        worst_node,
    }
}

/// The gamma-Voronoi core of one atom: points whose squared-distance gap to
/// every other atom is at least gamma.
#[derive(Debug, Clone)]
pub struct VoronoiCore {
    pub index: usize,
    /// `gamma = min_j (|y_i - y_j|^2) / 2`; infinite for a single atom.
    pub gamma: f64,
    /// Mean-shift prefactor `C_i = sum_j (w_j / w_i) |y_j - y_i|`.
    pub prefactor: f64,
}

/// Canonical core of atom `i`.
pub fn voronoi_core(mu: &EmpiricalMeasure, index: usize) -> Result<VoronoiCore, DiagnosticsError> {
    if index >= mu.len() {
        return Err(DiagnosticsError::IndexOutOfRange {
            index,
            len: mu.len(),
        });
    }
    let yi = &mu.points()[index];
    let wi = mu.weights()[index];
    let mut gamma = f64::INFINITY;
    let mut prefactor = 0.0;
    for (j, (yj, &wj)) in mu.points().iter().zip(mu.weights()).enumerate() {
        if j == index {
            continue;
        }
        let dist = (yi - yj).norm();
        gamma = gamma.min(0.5 * dist * dist);
        prefactor += wj / wi * dist;
    }
    Ok(VoronoiCore {
        index,
        gamma,
        prefactor,
    })
}

/// `psi_j(x) = |x - y_j|^2 - |x - y_i|^2 >= gamma` for all `j != i`.
/// With `gamma = 0` this is the classical Voronoi cell of `y_i`.
pub fn voronoi_membership(mu: &EmpiricalMeasure, index: usize, gamma: f64, x: &DVector<f64>) -> bool {
    let di = (x - &mu.points()[index]).norm_squared();
    for (j, yj) in mu.points().iter().enumerate() {
        if j == index {
            continue;
        }
        if (x - yj).norm_squared() - di < gamma {
            return false;
        }
    }
    true
}

impl VoronoiCore {
    pub fn contains(&self, mu: &EmpiricalMeasure, x: &DVector<f64>) -> bool {
        if self.gamma.is_infinite() {
            return true;
        }
        voronoi_membership(mu, self.index, self.gamma, x)
    }

    /// Mean-shift deviation bound `C_i exp(-gamma / 4t)` valid inside the core.
    pub fn mean_shift_bound(&self, t: f64) -> f64 {
        self.prefactor * (-self.gamma / (4.0 * t)).exp()
    }
}

/// Outcome of the late-time core-invariance check along one trajectory.
#[derive(Debug, Clone)]
pub struct CoreInvarianceReport {
    pub entered: bool,
    /// First node (largest t) inside the core.
    pub first_entry_time: Option<f64>,
    /// First node after which all later nodes stay inside.
    pub last_entry_time: Option<f64>,
    /// True if the trajectory left the core after first entering it.
    pub re_exited: bool,
    /// `C_i exp(-gamma/4t*) <= min_j d_ij / 8` at the last entry time.
    pub threshold_ok: bool,
}

/// Finds the entry of a trajectory into the gamma-Voronoi core of atom `i`
/// and verifies the recorded nodes never leave again.
pub fn claim_core_invariance(
    traj: &Trajectory,
    mu: &EmpiricalMeasure,
    index: usize,
) -> Result<CoreInvarianceReport, DiagnosticsError> {
    let core = voronoi_core(mu, index)?;
    let membership: Vec<bool> = traj
        .states
        .iter()
        .map(|x| core.contains(mu, x))
        .collect();
    let first_entry = membership.iter().position(|&m| m);
    let last_entry = match first_entry {
        None => None,
        Some(_) => {
            // First index from which membership holds for every later node.
            let mut idx = membership.len();
            for k in (0..membership.len()).rev() {
                if membership[k] {
                    idx = k;
                } else {
                    break;
                }
            }
            if idx < membership.len() {
                Some(idx)
            } else {
                None
            }
        }
    };
    let re_exited = match (first_entry, last_entry) {
        (Some(f), Some(l)) => f != l,
        (Some(_), None) => true,
        _ => false,
    };
    let threshold_ok = match last_entry {
        None => false,
        Some(k) => {
            let t_star = traj.times[k];
            let yi = &mu.points()[index];
            let min_dist = mu
                .points()
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != index)
                .map(|(_, yj)| (yi - yj).norm())
                .fold(f64::INFINITY, f64::min);
            core.mean_shift_bound(t_star) <= min_dist / 8.0
        }
    };
    Ok(CoreInvarianceReport {
        entered: first_entry.is_some(),
        first_entry_time: first_entry.map(|k| traj.times[k]),
        last_entry_time: last_entry.map(|k| traj.times[k]),
        re_exited,
        threshold_ok,
    })
}

/// Fitted power law `|X_t - target| ~ C t^alpha`.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub alpha: f64,
    pub prefactor: f64,
    pub n_nodes: usize,
}

/// Floor below which a distance counts as an exact hit.
const DISTANCE_FLOOR: f64 = 1e-14;

/// Least-squares fit of `log |X_t - target|` against `log t` over the last
/// decade of nodes (`t <= 10 t_min`).
pub fn fit_rate(traj: &Trajectory, target: &DVector<f64>) -> Result<RateFit, DiagnosticsError> {
    let t_min = *traj.times.last().unwrap();
    let mut log_t = Vec::new();
    let mut log_d = Vec::new();
    let mut any_in_decade = false;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        if *t > 10.0 * t_min {
            continue;
        }
        any_in_decade = true;
        let dist = (state - target).norm();
        if dist > DISTANCE_FLOOR {
            log_t.push(t.ln());
            log_d.push(dist.ln());
        }
    }
    if any_in_decade && log_t.is_empty() {
        return Err(DiagnosticsError::ExactHit);
    }
    if log_t.len() < 10 {
        return Err(DiagnosticsError::TooFewNodes {
            needed: 10,
            found: log_t.len(),
        });
    }
    let n = log_t.len() as f64;
    let mean_t: f64 = log_t.iter().sum::<f64>() / n;
    let mean_d: f64 = log_d.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (lt, ld) in log_t.iter().zip(&log_d) {
        sxy += (lt - mean_t) * (ld - mean_d);
        sxx += (lt - mean_t) * (lt - mean_t);
    }
    let alpha = sxy / sxx;
    let prefactor = (mean_d - alpha * mean_t).exp();
    Ok(RateFit {
        alpha,
        prefactor,
        n_nodes: log_t.len(),
    })
}

/// Fraction of ensemble terminal states within `delta` of the support.
pub fn neighborhood_mass(ens: &Ensemble, mu: &EmpiricalMeasure, delta: f64) -> f64 {
    let hits = ens
        .trajectories
        .iter()
        .filter(|t| dist_to_support(mu, t.terminal_state()) <= delta)
        .count();
    hits as f64 / ens.len() as f64
}

/// Maps a state of the confined (Ornstein-Uhlenbeck) flow at time `tau` to
/// the plain heat flow: `t = (e^{2 tau} - 1)/2`, `x_heat = x_ou e^{tau}`.
pub fn ou_to_heat(x_ou: &DVector<f64>, tau: f64) -> Result<(DVector<f64>, f64), DiagnosticsError> {
    if tau < 0.0 {
        return Err(DiagnosticsError::NegativeTime(tau));
    }
    let scale = tau.exp();
    Ok((x_ou * scale, ((2.0 * tau).exp() - 1.0) / 2.0))
}

/// Inverse of [`ou_to_heat`]: `tau = log(2t + 1)/2`, `x_ou = x_heat / sqrt(2t+1)`.
pub fn heat_to_ou(
    x_heat: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, f64), DiagnosticsError> {
    if t < 0.0 {
        return Err(DiagnosticsError::NegativeTime(t));
    }
    let scale = (2.0 * t + 1.0).sqrt();
    Ok((x_heat / scale, (2.0 * t + 1.0).ln() / 2.0))
}

/// Composite-Simpson value of `int_R e^{s/2} exp(-(gamma/4) e^s) ds`, whose
/// closed form is `2 sqrt(pi / gamma)`.
pub fn gamma_integral_quadrature(gamma: f64) -> f64 {
    assert!(gamma > 0.0, "gamma must be positive");
    let (lo, hi) = (-80.0, 20.0);
    let n = 200_000; // even
    let h = (hi - lo) / n as f64;
    let f = |s: f64| (0.5 * s).exp() * (-(gamma / 4.0) * s.exp()).exp();
    let mut sum = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + k as f64 * h);
    }
    sum * h / 3.0
}

/// Per-trajectory summary used by the experiment drivers.
#[derive(Debug, Clone)]
pub struct TrajectoryDiagnostics {
    pub x_horizon: DVector<f64>,
    /// Nearest atom at the final node.
    pub limit_index: usize,
    pub dist_support: Vec<f64>,
    pub dist_hull: Vec<f64>,
    pub rate: Option<RateFit>,
    pub exact_hit: bool,
    pub worst_hull_violation: Option<f64>,
    pub core_entry_time: Option<f64>,
    pub core_re_exited: bool,
    /// True when the initialization sits on (or within [`BISECTOR_TOL`] of)
    /// a squared-distance bisector between the two nearest atoms.
    pub bisector: bool,
}

/// Runs every per-trajectory check. The hull-rate audit only applies to
/// deterministic trajectories and is skipped when `epsilon > 0`.
pub fn analyze_trajectory(
    traj: &Trajectory,
    mu: &EmpiricalMeasure,
    geom: &SupportGeometry,
) -> TrajectoryDiagnostics {
    let terminal = traj.terminal_state();
    let limit_index = (0..mu.len())
        .min_by(|&a, &b| {
            (terminal - &mu.points()[a])
                .norm()
                .partial_cmp(&(terminal - &mu.points()[b]).norm())
                .unwrap()
        })
        .unwrap();
    let dist_support: Vec<f64> = traj
        .states
        .iter()
        .map(|x| dist_to_support(mu, x))
        .collect();
    let dist_hull: Vec<f64> = traj.states.iter().map(|x| dist_to_hull(geom, x)).collect();

    let x0 = traj.initial_state();
    let di = (x0 - &mu.points()[limit_index]).norm_squared();
    let bisector = mu
        .points()
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != limit_index)
        .any(|(_, yj)| ((x0 - yj).norm_squared() - di).abs() <= BISECTOR_TOL);

    let (rate, exact_hit) = match fit_rate(traj, &mu.points()[limit_index]) {
        Ok(fit) => (Some(fit), false),
        Err(DiagnosticsError::ExactHit) => (None, true),
        Err(_) => (None, false),
    };
    let worst_hull_violation = if traj.epsilon == 0.0 {
        Some(hull_rate_check(traj, geom).worst_violation)
    } else {
        None
    };
    let core = claim_core_invariance(traj, mu, limit_index).expect("limit index in range");
    TrajectoryDiagnostics {
        x_horizon: x0.clone(),
        limit_index,
        dist_support,
        dist_hull,
        rate,
        exact_hit,
        worst_hull_violation,
        core_entry_time: core.last_entry_time,
        core_re_exited: core.re_exited,
        bisector,
    }
}

/// One CSV row per trajectory: initialization, limit atom, fitted rate,
/// worst hull violation, and core entry time.
pub fn write_diagnostics_csv<W: Write>(
    mut out: W,
    records: &[TrajectoryDiagnostics],
) -> io::Result<()> {
    let dim = records.first().map_or(0, |r| r.x_horizon.len());
    write!(out, "traj_id")?;
    for i in 1..=dim {
        write!(out, ",xT{i}")?;
    }
    writeln!(
        out,
        ",limit_index,alpha,prefactor,worst_hull_violation,core_entry_time,bisector,exact_hit"
    )?;
    for (id, r) in records.iter().enumerate() {
        write!(out, "{id}")?;
        for c in r.x_horizon.iter() {
            write!(out, ",{c}")?;
        }
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        writeln!(
            out,
            ",{},{},{},{},{},{},{}",
            r.limit_index,
            fmt_opt(r.rate.map(|f| f.alpha)),
            fmt_opt(r.rate.map(|f| f.prefactor)),
            fmt_opt(r.worst_hull_violation),
            fmt_opt(r.core_entry_time),
            r.bisector,
            r.exact_hit
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::support_geometry;
    use crate::reverse::{integrate_ode, Spacing, TimeSchedule};
    use crate::score::EmpiricalScore;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn v2(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    fn v3(x: f64, y: f64, z: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y, z])
    }

    fn two_atoms_1d() -> EmpiricalMeasure {
        EmpiricalMeasure::new(vec![v1(-1.0), v1(1.0)], None).unwrap()
    }

    fn three_atom_line() -> EmpiricalMeasure {
        EmpiricalMeasure::new(
            vec![v1(-5.0), v1(0.0), v1(5.0)],
            Some(vec![0.7, 0.3, 0.1]),
        )
        .unwrap()
    }

    #[test]
    fn support_distance_basics() {
        let mu = two_atoms_1d();
        assert_eq!(dist_to_support(&mu, &v1(-1.0)), 0.0);
        assert_eq!(dist_to_support(&mu, &v1(0.0)), 1.0);
        // Brute-force oracle on a random probe.
        let x = v1(0.37);
        let brute = mu
            .points()
            .iter()
            .map(|y| (&x - y).norm())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(dist_to_support(&mu, &x), brute);
    }

    #[test]
    fn hull_distance_matches_exact_cases() {
        let mu = EmpiricalMeasure::new(vec![v2(-1.0, 0.0), v2(1.0, 0.0)], None).unwrap();
        let geom = support_geometry(&mu);
        assert_eq!(dist_to_hull(&geom, &v2(0.0, 0.0)), 0.0);
        assert!((dist_to_hull(&geom, &v2(0.0, 2.0)) - 2.0).abs() <= 1e-12);

        let square = EmpiricalMeasure::new(
            vec![v2(-1.0, -1.0), v2(1.0, -1.0), v2(1.0, 1.0), v2(-1.0, 1.0)],
            None,
        )
        .unwrap();
        let geom = support_geometry(&square);
        assert_eq!(dist_to_hull(&geom, &v2(0.3, -0.2)), 0.0);
        assert!((dist_to_hull(&geom, &v2(2.0, 0.0)) - 1.0).abs() <= 1e-12);
        assert!((dist_to_hull(&geom, &v2(2.0, 2.0)) - 2.0_f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn hull_distance_3d_matches_dense_sampling_oracle() {
        let pts = vec![
            v3(0.0, 0.0, 0.0),
            v3(1.0, 0.0, 0.0),
            v3(0.0, 1.0, 0.0),
            v3(0.0, 0.0, 1.0),
            v3(1.0, 1.0, 1.0),
        ];
        let mu = EmpiricalMeasure::new(pts.clone(), None).unwrap();
        let geom = support_geometry(&mu);

        // Exhaustive face oracle: the nearest point of a polytope lies on
        // the convex hull of some vertex subset of size <= d + 1; project
        // onto every subset's affine hull and keep feasible candidates.
        let exact_dist = |x: &DVector<f64>| -> f64 {
            let n = pts.len();
            let mut best = f64::INFINITY;
            for mask in 1u32..(1 << n) {
                let subset: Vec<&DVector<f64>> =
                    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &pts[i]).collect();
                if subset.len() > 4 {
                    continue;
                }
                if subset.len() == 1 {
                    best = best.min((x - subset[0]).norm());
                    continue;
                }
                let k = subset.len() - 1;
                let mut basis = nalgebra::DMatrix::zeros(3, k);
                for (c, p) in subset[1..].iter().enumerate() {
                    basis.set_column(c, &(*p - subset[0]));
                }
                let rhs = x - subset[0];
                let svd = basis.clone().svd(true, true);
                let Ok(u) = svd.solve(&rhs, 1e-12) else {
                    continue;
                };
                let lam0 = 1.0 - u.iter().sum::<f64>();
                if lam0 < -1e-10 || u.iter().any(|&l| l < -1e-10) {
                    continue;
                }
                best = best.min((&rhs - basis * u).norm());
            }
            best
        };

        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let probe = v3(
                rng.random::<f64>() * 4.0 - 1.5,
                rng.random::<f64>() * 4.0 - 1.5,
                rng.random::<f64>() * 4.0 - 1.5,
            );
            let fast = dist_to_hull(&geom, &probe);
            let oracle = exact_dist(&probe);
            assert!(
                (fast - oracle).abs() <= 1e-4,
                "probe {probe:?}: projection {fast} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn hull_rate_bound_holds_on_ode_runs() {
        let mu = two_atoms_1d();
        let geom = support_geometry(&mu);
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-4, 120, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(3.0), &sched).unwrap();
        let report = hull_rate_check(&traj, &geom);
        assert!((report.initial_dist - 2.0).abs() <= 1e-12);
        assert!(
            report.worst_violation <= 0.0,
            "bound violated by {}",
            report.worst_violation
        );
    }

    #[test]
    fn interior_start_stays_interior() {
        let mu = two_atoms_1d();
        let geom = support_geometry(&mu);
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-4, 80, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(0.5), &sched).unwrap();
        for state in &traj.states {
            assert!(dist_to_hull(&geom, state) <= 1e-4);
        }
    }

    #[test]
    fn dirac_trajectory_saturates_the_bound() {
        let mu = EmpiricalMeasure::new(vec![v1(0.0)], None).unwrap();
        let geom = support_geometry(&mu);
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-3, 60, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(2.0), &sched).unwrap();
        let report = hull_rate_check(&traj, &geom);
        // Closed form d = |x_T| sqrt(t/T): the bound is met with equality
        // up to integrator error, never exceeded beyond the slack.
        assert!(report.worst_violation <= 0.0);
        assert!(report.worst_violation >= -report.slack - 1e-6);
    }

    #[test]
    fn voronoi_core_of_two_atoms() {
        let mu = two_atoms_1d();
        let core = voronoi_core(&mu, 1).unwrap();
        assert_eq!(core.gamma, 2.0);
        assert_eq!(core.prefactor, 2.0);
        assert!(core.contains(&mu, &v1(1.0)));
        assert!(!core.contains(&mu, &v1(0.0)));
        assert!(voronoi_core(&mu, 5).is_err());
    }

    #[test]
    fn zero_gamma_recovers_classical_voronoi() {
        let mu = two_atoms_1d();
        assert!(voronoi_membership(&mu, 1, 0.0, &v1(0.1)));
        assert!(!voronoi_membership(&mu, 1, 0.0, &v1(-0.1)));
        assert!(voronoi_membership(&mu, 1, 0.0, &v1(0.0)));
    }

    #[test]
    fn single_atom_core_is_everything() {
        let mu = EmpiricalMeasure::new(vec![v1(3.0)], None).unwrap();
        let core = voronoi_core(&mu, 0).unwrap();
        assert!(core.gamma.is_infinite());
        assert!(core.contains(&mu, &v1(-100.0)));
    }

    #[test]
    fn mean_shift_respects_core_bound() {
        // Varadhan-type bound, exact inequality inside the core.
        let mu = three_atom_line();
        for index in 0..3 {
            let core = voronoi_core(&mu, index).unwrap();
            let yi = &mu.points()[index];
            for dt in [-0.4, 0.0, 0.3] {
                let x = v1(yi[0] + dt);
                if !core.contains(&mu, &x) {
                    continue;
                }
                for t in [0.05, 0.2, 1.0] {
                    let m = crate::score::mean_shift(&mu, &x, t).unwrap().mean;
                    let lhs = (&m - yi).norm();
                    assert!(
                        lhs <= core.mean_shift_bound(t) + 1e-12,
                        "atom {index}, x {x:?}, t {t}: {lhs} vs {}",
                        core.mean_shift_bound(t)
                    );
                }
            }
        }
    }

    #[test]
    fn core_invariance_along_three_atom_flow() {
        // Fine-schedule trajectory oracle: start left of the heaviest atom.
        let mu = three_atom_line();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-5, 400, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(-6.0), &sched).unwrap();
        let report = claim_core_invariance(&traj, &mu, 0).unwrap();
        assert!(report.entered);
        assert!(!report.re_exited);
        assert!(report.threshold_ok);
    }

    #[test]
    fn bisector_start_never_enters_either_core() {
        let mu = EmpiricalMeasure::new(vec![v2(-1.0, 0.0), v2(1.0, 0.0)], None).unwrap();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-6, 200, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v2(0.0, 2.0), &sched).unwrap();
        for index in 0..2 {
            let report = claim_core_invariance(&traj, &mu, index).unwrap();
            assert!(!report.entered, "bisector flow entered core {index}");
        }
        // The flow still converges to the barycenter.
        assert!(traj.terminal_state().norm() <= 1e-2);
    }

    #[test]
    fn rate_fit_recovers_closed_form_exponent() {
        let y = 0.0;
        let mu = EmpiricalMeasure::new(vec![v1(y)], None).unwrap();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-6, 600, Spacing::Geometric).unwrap();
        let x0 = 2.5;
        let traj = integrate_ode(&field, &v1(x0), &sched).unwrap();
        let fit = fit_rate(&traj, &v1(y)).unwrap();
        assert!((fit.alpha - 0.5).abs() <= 1e-3, "alpha {}", fit.alpha);
        assert!(
            (fit.prefactor - x0).abs() <= 1e-3,
            "prefactor {} vs {x0}",
            fit.prefactor
        );
    }

    #[test]
    fn rate_fit_on_three_atom_flow_stays_near_half() {
        let mu = three_atom_line();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-6, 600, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(2.2), &sched).unwrap();
        let diag = analyze_trajectory(&traj, &mu, &support_geometry(&mu));
        let fit = diag.rate.unwrap();
        assert!(
            fit.alpha >= 0.45 && fit.alpha <= 0.55,
            "alpha {}",
            fit.alpha
        );
        assert!(!diag.bisector);
    }

    #[test]
    fn separatrix_rate_toward_barycenter() {
        let mu = EmpiricalMeasure::new(vec![v2(-1.0, 0.0), v2(1.0, 0.0)], None).unwrap();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-6, 600, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v2(0.0, 2.0), &sched).unwrap();
        let fit = fit_rate(&traj, &v2(0.0, 0.0)).unwrap();
        assert!((fit.alpha - 0.5).abs() <= 0.05, "alpha {}", fit.alpha);
    }

    #[test]
    fn rate_fit_degenerate_cases() {
        let times: Vec<f64> = (0..20).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let states: Vec<DVector<f64>> = times.iter().map(|_| v1(0.0)).collect();
        let traj = Trajectory {
            times,
            states,
            epsilon: 0.0,
            seed: None,
        };
        assert!(matches!(
            fit_rate(&traj, &v1(0.0)),
            Err(DiagnosticsError::ExactHit)
        ));

        // Five nodes cannot support a last-decade fit.
        let times = vec![1.0, 0.8, 0.6, 0.4, 0.2];
        let states: Vec<DVector<f64>> = times.iter().map(|&t| v1(t)).collect();
        let short = Trajectory {
            times,
            states,
            epsilon: 0.0,
            seed: None,
        };
        assert!(matches!(
            fit_rate(&short, &v1(5.0)),
            Err(DiagnosticsError::TooFewNodes { .. })
        ));
    }

    #[test]
    fn neighborhood_mass_monotone_in_delta() {
        use crate::reverse::{run_ensemble, InitSpec};
        let mu = two_atoms_1d();
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-3, 80, Spacing::Geometric).unwrap();
        let init = InitSpec::Gaussian {
            mean: v1(0.0),
            sigma: 1.5,
        };
        let ens = run_ensemble(&field, &init, &sched, 0.2, 400, 31).unwrap();
        let m_inf = neighborhood_mass(&ens, &mu, f64::INFINITY);
        assert_eq!(m_inf, 1.0);
        let m1 = neighborhood_mass(&ens, &mu, 0.5);
        let m2 = neighborhood_mass(&ens, &mu, 0.1);
        assert!(m2 <= m1 && m1 <= m_inf);
        // Reproducible under the same master seed.
        let ens2 = run_ensemble(&field, &init, &sched, 0.2, 400, 31).unwrap();
        assert_eq!(neighborhood_mass(&ens2, &mu, 0.1), m2);
    }

    #[test]
    fn coordinate_change_spot_values_and_round_trip() {
        // tau = 0 is the identity.
        let (x, t) = ou_to_heat(&v1(0.7), 0.0).unwrap();
        assert_eq!(x[0], 0.7);
        assert_eq!(t, 0.0);

        // t = 1 maps to tau = ln 3 / 2 with scaling sqrt 3.
        let (x_ou, tau) = heat_to_ou(&v1(1.0), 1.0).unwrap();
        assert!((tau - 3.0_f64.ln() / 2.0).abs() <= 1e-15);
        assert!((x_ou[0] - 1.0 / 3.0_f64.sqrt()).abs() <= 1e-15);

        assert!(ou_to_heat(&v1(0.0), -0.1).is_err());
        assert!(heat_to_ou(&v1(0.0), -0.1).is_err());

        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x = v2(rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0);
            let t = rng.random::<f64>() * 10.0;
            let (x_ou, tau) = heat_to_ou(&x, t).unwrap();
            let (x_back, t_back) = ou_to_heat(&x_ou, tau).unwrap();
            assert!((t_back - t).abs() <= 1e-12);
            assert!((x_back - &x).norm() <= 1e-12);
        }
    }

    #[test]
    fn gamma_integral_matches_closed_form() {
        for gamma in [0.5, 1.0, 2.0, 10.0] {
            let quad = gamma_integral_quadrature(gamma);
            let closed = 2.0 * (std::f64::consts::PI / gamma).sqrt();
            assert!(
                (quad - closed).abs() <= 1e-8,
                "gamma {gamma}: {quad} vs {closed}"
            );
        }
    }

    #[test]
    fn diagnostics_csv_layout() {
        let mu = two_atoms_1d();
        let geom = support_geometry(&mu);
        let field = EmpiricalScore::new(mu.clone());
        let sched = TimeSchedule::new(1.0, 1e-5, 200, Spacing::Geometric).unwrap();
        let traj = integrate_ode(&field, &v1(1.8), &sched).unwrap();
        let rec = analyze_trajectory(&traj, &mu, &geom);
        assert_eq!(rec.limit_index, 1);
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("traj_id,xT1,limit_index,alpha"));
        assert_eq!(text.lines().count(), 2);
    }
}
