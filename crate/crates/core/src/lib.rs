//! Exact score-based diffusion dynamics for empirical data measures.
//!
//! The forward process is the heat flow of a weighted Dirac sum `u_0`. Its
//! density, score `s = grad log u`, and all derived quantities are available
//! in closed form, which makes every stability and concentration estimate of
//! the reverse-time dynamics numerically checkable:
//!
//! * [`measures`] — data measures (Dirac sums, benchmark datasets, support
//!   geometry).
//! * [`heatflow`] — log-density, gradient, Hessian, and a-priori bounds of
//!   the forward heat flow.
//! * [`score`] — score fields with analytic divergence, the Gaussian
//!   mean-shift map, and candidate-field wrappers.
//! * [`reverse`] — reverse-time ODE/SDE integrators over singularity-aware
//!   schedules, plus ensembles.
//! * [`fpgrid`] — a truncated-domain finite-volume solver for the backward
//!   Fokker-Planck equation with L^p/KL/Fisher functionals.
//! * [`losses`] — Monte-Carlo evaluation of the score-matching family of
//!   training objectives on common random numbers.
//! * [`diagnostics`] — trajectory-level checks: hull rates, Voronoi cores,
//!   imitation-rate fits, neighborhood mass, OU/heat coordinate change.

pub mod diagnostics;
pub mod fpgrid;
pub mod geometry;
pub mod heatflow;
pub mod losses;
pub mod measures;
pub mod reverse;
pub mod score;

pub use measures::{EmpiricalMeasure, SupportGeometry};
pub use reverse::{Ensemble, Spacing, TimeSchedule, Trajectory};
pub use score::{EmpiricalScore, ScoreField, ScoreKind};
