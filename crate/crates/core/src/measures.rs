//! Data measures: weighted Dirac sums and their support geometry.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::geometry;

/// Tolerance for the weights-sum-to-one invariant.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("measure needs at least one point")]
    Empty,
    #[error("weight {value} at index {index} is not strictly positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("{n_points} points but {n_weights} weights")]
    LengthMismatch { n_points: usize, n_weights: usize },
    #[error("weight {value} at index {index} is not finite")]
    NonFiniteWeight { index: usize, value: f64 },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("half_width must be positive, got {0}")]
    NonPositiveHalfWidth(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed measure file: {0}")]
    Json(#[from] serde_json::Error),
}

/// A probability measure given as a finite weighted sum of Dirac atoms.
///
/// Construction normalizes the weights to unit sum and merges coordinate-wise
/// identical atoms by adding their weights, so atoms are pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
    dim: usize,
    radius: f64,
}

impl EmpiricalMeasure {
    /// Builds a measure from atom locations; `weights = None` means uniform.
    pub fn new(
        points: Vec<DVector<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, MeasureError> {
        if points.is_empty() {
            return Err(MeasureError::Empty);
        }
        let dim = points[0].len();
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(MeasureError::DimensionMismatch {
                    index,
                    found: p.len(),
                    expected: dim,
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(MeasureError::NonFinitePoint { index });
            }
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != points.len() {
                    return Err(MeasureError::LengthMismatch {
                        n_points: points.len(),
                        n_weights: w.len(),
                    });
                }
                for (index, &value) in w.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(MeasureError::NonFiniteWeight { index, value });
                    }
                    if value <= 0.0 {
                        return Err(MeasureError::NonPositiveWeight { index, value });
                    }
                }
                w
            }
            None => vec![1.0 / points.len() as f64; points.len()],
        };

        // Merge exactly coincident atoms by summing their weights.
        let mut merged_points: Vec<DVector<f64>> = Vec::with_capacity(points.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(points.len());
        for (p, w) in points.into_iter().zip(weights) {
            match merged_points.iter().position(|q| q == &p) {
                Some(i) => merged_weights[i] += w,
                None => {
                    merged_points.push(p);
                    merged_weights.push(w);
                }
            }
        }
        let total: f64 = merged_weights.iter().sum();
        for w in &mut merged_weights {
            *w /= total;
        }
        let radius = merged_points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        Ok(Self {
            points: merged_points,
            weights: merged_weights,
            dim,
            radius,
        })
    }

    /// Uniform-weight convenience constructor.
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self, MeasureError> {
        Self::new(points, None)
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Radius of the smallest origin-centered ball containing all atoms.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Reads a measure from JSON: `{"dim": d, "points": [[..]], "weights": [..]}`.
    /// The `weights` field may be omitted for uniform weights.
    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self, MeasureError> {
        let file: MeasureFile = serde_json::from_reader(reader)?;
        let points: Vec<DVector<f64>> = file
            .points
            .into_iter()
            .map(DVector::from_vec)
            .collect::<Vec<_>>();
        let measure = Self::new(points, file.weights)?;
        if measure.dim() != file.dim {
            return Err(MeasureError::DimensionMismatch {
                index: 0,
                found: measure.dim(),
                expected: file.dim,
            });
        }
        Ok(measure)
    }

    pub fn from_json_file<P: AsRef<Path>>(path: P) -> Result<Self, MeasureError> {
        Self::from_json_reader(std::fs::File::open(path)?)
    }

    pub fn to_json_writer<W: Write>(&self, writer: W) -> Result<(), MeasureError> {
        let file = MeasureFile {
            dim: self.dim,
            points: self.points.iter().map(|p| p.iter().copied().collect()).collect(),
            weights: Some(self.weights.clone()),
        };
        serde_json::to_writer_pretty(writer, &file)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    dim: usize,
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

/// Atoms sampled on the lemniscate of Bernoulli
/// `(x^2 + y^2)^2 = a^2 (x^2 - y^2)` with `a = half_width`.
///
/// The sampler draws the polar angle uniformly on [0, 2pi) and rejects angles
/// outside the two lobes (`cos 2theta <= 0`), then sets `r = a sqrt(cos 2theta)`.
/// Deterministic for a fixed seed; weights are uniform.
pub fn lemniscate_dataset(
    n: usize,
    half_width: f64,
    seed: u64,
) -> Result<EmpiricalMeasure, MeasureError> {
    if n == 0 {
        return Err(MeasureError::EmptyDataset);
    }
    if !(half_width > 0.0) {
        return Err(MeasureError::NonPositiveHalfWidth(half_width));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let c = (2.0 * theta).cos();
        if c <= 0.0 {
            continue;
        }
        let r = half_width * c.sqrt();
        points.push(DVector::from_vec(vec![r * theta.cos(), r * theta.sin()]));
    }
    EmpiricalMeasure::new(points, None)
}

/// Support geometry of a measure: enclosing radius and convex-hull vertices.
#[derive(Debug, Clone)]
pub struct SupportGeometry {
    radius: f64,
    hull_indices: Vec<usize>,
    hull_points: Vec<DVector<f64>>,
    dim: usize,
}

impl SupportGeometry {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Indices (into the source measure) of the hull vertices. For d = 2 the
    /// order is counter-clockwise.
    pub fn hull_indices(&self) -> &[usize] {
        &self.hull_indices
    }

    pub fn hull_points(&self) -> &[DVector<f64>] {
        &self.hull_points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Computes the enclosing radius and the convex-hull vertex set of the atoms.
///
/// Hulls are exact for d <= 2. In higher dimensions a point is kept as a
/// vertex iff its Frank-Wolfe projection distance to the hull of the other
/// points exceeds a scaled tolerance.
pub fn support_geometry(mu: &EmpiricalMeasure) -> SupportGeometry {
    let points = mu.points();
    let dim = mu.dim();
    let hull_indices = match dim {
        1 => geometry::hull_indices_1d(points),
        2 => geometry::hull_indices_2d(points),
        _ => {
            let scale = mu.radius().max(1.0);
            let mut keep = Vec::new();
            for i in 0..points.len() {
                if points.len() == 1 {
                    keep.push(i);
                    continue;
                }
                let others: Vec<DVector<f64>> = points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, p)| p.clone())
                    .collect();
                let (_, dist) = geometry::project_onto_hull(&others, &points[i]);
                if dist > 1e-10 * scale {
                    keep.push(i);
                }
            }
            keep
        }
    };
    let hull_points = hull_indices.iter().map(|&i| points[i].clone()).collect();
    SupportGeometry {
        radius: mu.radius(),
        hull_indices,
        hull_points,
        dim,
    }
}
