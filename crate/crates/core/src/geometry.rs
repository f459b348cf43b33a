//! Convex-hull primitives shared by the measure and diagnostics modules.
//!
//! Hulls are exact for d <= 2 (monotone chain, polygon projection). Higher
//! dimensions use pairwise Frank-Wolfe projection onto the convex hull of a
//! finite point set, which converges linearly for this strongly convex
//! objective.

use nalgebra::DVector;

/// Duality-gap threshold for Frank-Wolfe termination (squared-distance scale).
const FW_GAP_TOL: f64 = 1e-18;
const FW_MAX_ITER: usize = 100_000;

/// Indices of the convex-hull vertices of a 1D point set: argmin and argmax.
pub fn hull_indices_1d(points: &[DVector<f64>]) -> Vec<usize> {
    let mut lo = 0;
    let mut hi = 0;
    for (i, p) in points.iter().enumerate() {
        if p[0] < points[lo][0] {
            lo = i;
        }
        if p[0] > points[hi][0] {
            hi = i;
        }
    }
    if lo == hi {
        vec![lo]
    } else {
        vec![lo, hi]
    }
}

/// Monotone-chain convex hull in 2D. Returns vertex indices in
/// counter-clockwise order; collinear interior points are dropped.
pub fn hull_indices_2d(points: &[DVector<f64>]) -> Vec<usize> {
    let n = points.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        (points[a][0], points[a][1])
            .partial_cmp(&(points[b][0], points[b][1]))
            .unwrap()
    });
    let cross = |o: usize, a: usize, b: usize| -> f64 {
        let (ox, oy) = (points[o][0], points[o][1]);
        (points[a][0] - ox) * (points[b][1] - oy) - (points[a][1] - oy) * (points[b][0] - ox)
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * n);
    for &i in &idx {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    let lower_len = hull.len() + 1;
    for &i in idx.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0
        {
            hull.pop();
        }
        hull.push(i);
    }
    hull.pop();
    hull
}

/// Euclidean distance from `x` to the segment [a, b].
pub fn dist_to_segment(x: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (x - a).norm();
    }
    let s = ((x - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (x - (a + ab * s)).norm()
}

/// True if `x` lies inside (or within `tol` of) the CCW polygon `poly`.
pub fn inside_polygon(x: &DVector<f64>, poly: &[DVector<f64>], tol: f64) -> bool {
    match poly.len() {
        0 => false,
        1 => (x - &poly[0]).norm() <= tol,
        2 => dist_to_segment(x, &poly[0], &poly[1]) <= tol,
        n => {
            // CCW polygon: inside iff every edge cross product is >= -tol
            // (scaled by edge length to keep the tolerance metric).
            for i in 0..n {
                let a = &poly[i];
                let b = &poly[(i + 1) % n];
                let cross = (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0]);
                let edge_len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                if cross < -tol * edge_len.max(1.0) {
                    return false;
                }
            }
            true
        }
    }
}

/// Distance from `x` to the convex hull of a CCW polygon (exact).
pub fn dist_to_polygon(x: &DVector<f64>, poly: &[DVector<f64>]) -> f64 {
    match poly.len() {
        0 => f64::NAN,
        1 => (x - &poly[0]).norm(),
        2 => dist_to_segment(x, &poly[0], &poly[1]),
        n => {
            if inside_polygon(x, poly, 0.0) {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for i in 0..n {
                best = best.min(dist_to_segment(x, &poly[i], &poly[(i + 1) % n]));
            }
            best
        }
    }
}

/// Projects `x` onto conv(points) by pairwise Frank-Wolfe over the vertex
/// set. Returns the projection and its distance to `x`.
pub fn project_onto_hull(points: &[DVector<f64>], x: &DVector<f64>) -> (DVector<f64>, f64) {
    assert!(!points.is_empty(), "projection needs at least one point");
    if points.len() == 1 {
        return (points[0].clone(), (x - &points[0]).norm());
    }
    // Start from the nearest vertex.
    let mut weights = vec![0.0; points.len()];
    let start = (0..points.len())
        .min_by(|&a, &b| {
            (x - &points[a])
                .norm_squared()
                .partial_cmp(&(x - &points[b]).norm_squared())
                .unwrap()
        })
        .unwrap();
    weights[start] = 1.0;
    let mut z = points[start].clone();

    for _ in 0..FW_MAX_ITER {
        let grad = &z - x;
        // Frank-Wolfe vertex: minimizes <grad, v>.
        let mut fw = 0;
        let mut fw_val = f64::INFINITY;
        for (i, p) in points.iter().enumerate() {
            let v = grad.dot(p);
            if v < fw_val {
                fw_val = v;
                fw = i;
            }
        }
        let gap = grad.dot(&z) - fw_val;
        if gap <= FW_GAP_TOL {
            break;
        }
        // Away vertex: maximizes <grad, v> over the active set.
        let mut aw = fw;
        let mut aw_val = f64::NEG_INFINITY;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                let v = grad.dot(&points[i]);
                if v > aw_val {
                    aw_val = v;
                    aw = i;
                }
            }
        }
        let dir = &points[fw] - &points[aw];
        let denom = dir.norm_squared();
        if denom == 0.0 {
            break;
        }
        let step = (-grad.dot(&dir) / denom).clamp(0.0, weights[aw]);
        if step == 0.0 {
            break;
        }
        z += &dir * step;
        weights[fw] += step;
        weights[aw] -= step;
    }
    let dist = (x - &z).norm();
    (z, dist)
}
