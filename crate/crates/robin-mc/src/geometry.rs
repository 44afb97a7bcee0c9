//! Bounded domains and the geometric queries the simulator needs.
//!
//! Two shapes ship: balls and axis-aligned boxes. Both admit exact signed
//! distances, boundary projections and inward normals, which keeps geometric
//! error out of the convergence experiments. New shapes plug in by extending
//! [`Shape`] and the four queries.

use crate::error::Error;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Relative factor for the default boundary tolerance (times the diameter).
const DEFAULT_BOUNDARY_TOL_REL: f64 = 1e-12;

/// Classification of a point relative to the closed domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Interior,
    Boundary,
    Exterior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Shape {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// A bounded domain with exact geometric queries.
///
/// The signed distance convention is negative inside, zero on the boundary,
/// positive outside. Points within `boundary_tolerance` of the boundary
/// classify as [`Region::Boundary`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Domain {
    shape: Shape,
    dim: usize,
    boundary_tolerance: f64,
}

impl Domain {
    /// Ball with the given center and radius. Dimension is `center.len()`.
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidDomain(format!("ball radius must be positive, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidDomain("ball center must be finite".into()));
        }
        let dim = center.len();
        Self::check_dim(dim)?;
        let tol = DEFAULT_BOUNDARY_TOL_REL * 2.0 * radius;
        Ok(Domain { shape: Shape::Ball { center, radius }, dim, boundary_tolerance: tol })
    }

    /// Axis-aligned box `[lower_1, upper_1] x ... x [lower_d, upper_d]`.
    pub fn axis_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        let dim = lower.len();
        Self::check_dim(dim)?;
        for i in 0..dim {
            if !(lower[i] < upper[i]) || !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::InvalidDomain(format!(
                    "box must satisfy lower[{i}] < upper[{i}], got [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        let diam: f64 = lower.iter().zip(&upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt();
        let tol = DEFAULT_BOUNDARY_TOL_REL * diam;
        Ok(Domain { shape: Shape::Box { lower, upper }, dim, boundary_tolerance: tol })
    }

    fn check_dim(dim: usize) -> Result<()> {
        if dim < 3 {
            return Err(Error::InvalidDomain(format!("dimension must be at least 3, got {dim}")));
        }
        Ok(())
    }

    /// Override the boundary tolerance (defaults to 1e-12 of the diameter).
    pub fn with_boundary_tolerance(mut self, tol: f64) -> Result<Self> {
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(Error::InvalidDomain(format!("boundary tolerance must be positive, got {tol}")));
        }
        self.boundary_tolerance = tol;
        Ok(self)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boundary_tolerance(&self) -> f64 {
        self.boundary_tolerance
    }

    /// Euclidean diameter of the domain.
    pub fn diameter(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => 2.0 * radius,
            Shape::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
            }
        }
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            Shape::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Shape::Box { lower, upper } => (lower.clone(), upper.clone()),
        }
    }

    /// Signed distance to the boundary: negative inside, positive outside,
    /// zero on the boundary. Exact for both shapes.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "signed_distance: dimension mismatch");
        match &self.shape {
            Shape::Ball { center, radius } => dist(x, center) - radius,
            Shape::Box { lower, upper } => {
                // q_i < 0 inside along axis i, > 0 outside.
                let mut inside_max = f64::NEG_INFINITY;
                let mut outside_sq = 0.0;
                for i in 0..self.dim {
                    let q = (lower[i] - x[i]).max(x[i] - upper[i]);
                    if q > 0.0 {
                        outside_sq += q * q;
                    }
                    inside_max = inside_max.max(q);
                }
                if outside_sq > 0.0 {
                    outside_sq.sqrt()
                } else {
                    inside_max
                }
            }
        }
    }

    /// Partition of space into interior, boundary (within tolerance) and
    /// exterior.
    pub fn classify(&self, x: &[f64]) -> Result<Region> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("classify: point must be finite, got {x:?}")));
        }
        Ok(self.classify_unchecked(x))
    }

    /// `classify` without the finiteness/dimension checks; used in stepping
    /// loops where the inputs are produced internally.
    #[inline]
    pub(crate) fn classify_unchecked(&self, x: &[f64]) -> Region {
        let sd = self.signed_distance(x);
        if sd < -self.boundary_tolerance {
            Region::Interior
        } else if sd <= self.boundary_tolerance {
            Region::Boundary
        } else {
            Region::Exterior
        }
    }

    /// Nearest boundary point of an exterior (or boundary) point, and the
    /// distance to it. Strictly interior points are a contract violation.
    pub fn project_to_boundary(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut p = vec![0.0; self.dim];
        let overshoot = self.project_to_boundary_into(x, &mut p)?;
        Ok((p, overshoot))
    }

    /// Buffer-reusing form of [`Self::project_to_boundary`].
    #[inline]
    pub(crate) fn project_to_boundary_into(&self, x: &[f64], p: &mut [f64]) -> Result<f64> {
        let sd = self.signed_distance(x);
        if sd < -self.boundary_tolerance {
            return Err(Error::InteriorProjection { signed_distance: sd });
        }
        match &self.shape {
            Shape::Ball { center, radius } => {
                let r = dist(x, center);
                // x is at least at distance radius - tol from the center.
                let scale = radius / r;
                for i in 0..self.dim {
                    p[i] = center[i] + scale * (x[i] - center[i]);
                }
            }
            Shape::Box { lower, upper } => {
                for i in 0..self.dim {
                    p[i] = x[i].clamp(lower[i], upper[i]);
                }
                if self.signed_distance(p) < 0.0 {
                    // x was inside within tolerance: snap the nearest face.
                    let mut best_axis = 0;
                    let mut best_face = lower[0];
                    let mut best_dist = f64::INFINITY;
                    for i in 0..self.dim {
                        let dl = x[i] - lower[i];
                        if dl < best_dist {
                            best_dist = dl;
                            best_axis = i;
                            best_face = lower[i];
                        }
                        let du = upper[i] - x[i];
                        if du < best_dist {
                            best_dist = du;
                            best_axis = i;
                            best_face = upper[i];
                        }
                    }
                    p[best_axis] = best_face;
                }
            }
        }
        Ok(dist(x, p))
    }

    /// Unit vector at a boundary point pointing into the domain.
    ///
    /// For boxes the normal is undefined within tolerance of an edge or
    /// corner; callers retry the offending step with fresh noise.
    pub fn inward_normal(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: p.len() });
        }
        let mut n = vec![0.0; self.dim];
        self.inward_normal_into(p, &mut n)?;
        Ok(n)
    }

    /// Buffer-reusing form of [`Self::inward_normal`].
    #[inline]
    pub(crate) fn inward_normal_into(&self, p: &[f64], n: &mut [f64]) -> Result<()> {
        let sd = self.signed_distance(p);
        if sd.abs() > self.boundary_tolerance {
            return Err(Error::NotOnBoundary { signed_distance: sd });
        }
        match &self.shape {
            Shape::Ball { center, radius: _ } => {
                let r = dist(p, center);
                for i in 0..self.dim {
                    n[i] = (center[i] - p[i]) / r;
                }
            }
            Shape::Box { lower, upper } => {
                let mut active = 0usize;
                for i in 0..self.dim {
                    n[i] = 0.0;
                    if (p[i] - lower[i]).abs() <= self.boundary_tolerance {
                        n[i] = 1.0;
                        active += 1;
                    } else if (upper[i] - p[i]).abs() <= self.boundary_tolerance {
                        n[i] = -1.0;
                        active += 1;
                    }
                }
                if active == 0 {
                    return Err(Error::NotOnBoundary { signed_distance: sd });
                }
                if active > 1 {
                    return Err(Error::NormalUndefined(format!(
                        "{active} faces active within tolerance at {p:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Uniform sample from the interior (rejection sampling for balls).
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.bounding_box();
        loop {
            let x: Vec<f64> = (0..self.dim).map(|i| rng.gen_range(lo[i]..hi[i])).collect();
            if self.classify_unchecked(&x) == Region::Interior {
                return x;
            }
        }
    }
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_ball() -> Domain {
        Domain::ball(vec![0.0, 0.0, 0.0], 1.0).unwrap()
    }

    fn unit_box() -> Domain {
        Domain::axis_box(vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn classify_unit_ball() {
        let d = unit_ball();
        assert_eq!(d.classify(&[0.0, 0.0, 0.0]).unwrap(), Region::Interior);
        assert_eq!(d.classify(&[1.0, 0.0, 0.0]).unwrap(), Region::Boundary);
        assert_eq!(d.classify(&[2.0, 0.0, 0.0]).unwrap(), Region::Exterior);
    }

    #[test]
    fn classify_dimension_mismatch() {
        let d = unit_ball();
        assert!(matches!(
            d.classify(&[0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn signed_distance_examples() {
        assert_eq!(unit_ball().signed_distance(&[0.0, 0.0, 0.0]), -1.0);
        assert_eq!(unit_ball().signed_distance(&[2.0, 0.0, 0.0]), 1.0);
        assert_eq!(unit_box().signed_distance(&[0.5, 0.5, 0.5]), -0.5);
    }

    #[test]
    fn projection_examples() {
        let (p, overshoot) = unit_ball().project_to_boundary(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        assert_eq!(overshoot, 1.0);

        let (p, overshoot) = unit_ball().project_to_boundary(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        assert_eq!(overshoot, 0.0);

        let (p, overshoot) = unit_box().project_to_boundary(&[0.5, 0.5, -0.2]).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        assert!((overshoot - 0.2).abs() < 1e-15);
    }

    #[test]
    fn projecting_interior_point_is_rejected() {
        assert!(matches!(
            unit_ball().project_to_boundary(&[0.1, 0.0, 0.0]),
            Err(Error::InteriorProjection { .. })
        ));
    }

    #[test]
    fn inward_normal_examples() {
        assert_eq!(unit_ball().inward_normal(&[1.0, 0.0, 0.0]).unwrap(), vec![-1.0, 0.0, 0.0]);
        assert_eq!(unit_ball().inward_normal(&[0.0, 0.0, -1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(unit_box().inward_normal(&[0.5, 0.5, 0.0]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn box_edge_normal_is_undefined() {
        let d = unit_box();
        assert!(matches!(
            d.inward_normal(&[0.0, 0.0, 0.5]),
            Err(Error::NormalUndefined(_))
        ));
        assert!(matches!(
            d.inward_normal(&[0.0, 0.0, 0.0]),
            Err(Error::NormalUndefined(_))
        ));
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        assert!(Domain::ball(vec![0.0, 0.0, 0.0], 0.0).is_err());
        assert!(Domain::ball(vec![0.0, 0.0], 1.0).is_err());
        assert!(Domain::axis_box(vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn ball_projection_lands_on_sphere() {
        // 10^4 random exterior points: |p - center| = radius within 1e-10.
        let d = Domain::ball(vec![0.25, -0.5, 1.0], 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-6.0..6.0)).collect();
            if d.classify(&x).unwrap() != Region::Exterior {
                continue;
            }
            let (p, overshoot) = d.project_to_boundary(&x).unwrap();
            let r = ((p[0] - 0.25).powi(2) + (p[1] + 0.5).powi(2) + (p[2] - 1.0).powi(2)).sqrt();
            assert!((r - 2.0).abs() < 1e-10, "projection off sphere: {r}");
            assert!(overshoot >= 0.0);
            // Normal points away from the exterior point.
            let n = d.inward_normal(&p).unwrap();
            let dot: f64 = n.iter().zip(&x).zip(&p).map(|((ni, xi), pi)| ni * (xi - pi)).sum();
            assert!(dot <= 1e-12, "normal not opposed to exterior point: {dot}");
            checked += 1;
        }
    }

    #[test]
    fn box_face_normal_opposes_exterior_point() {
        let d = unit_box();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..2.0)).collect();
            if d.classify(&x).unwrap() != Region::Exterior {
                continue;
            }
            let (p, _) = d.project_to_boundary(&x).unwrap();
            let Ok(n) = d.inward_normal(&p) else {
                continue; // edge or corner projection
            };
            let dot: f64 = n.iter().zip(&x).zip(&p).map(|((ni, xi), pi)| ni * (xi - pi)).sum();
            assert!(dot <= 1e-12);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn normals_are_unit_vectors(x in proptest::collection::vec(-3.0f64..3.0, 3)) {
            for d in [unit_ball(), unit_box()] {
                if d.classify(&x).unwrap() == Region::Exterior {
                    let (p, _) = d.project_to_boundary(&x).unwrap();
                    if let Ok(n) = d.inward_normal(&p) {
                        let norm: f64 = n.iter().map(|v| v * v).sum::<f64>().sqrt();
                        prop_assert!((norm - 1.0).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn classify_is_consistent_with_signed_distance(
            x in proptest::collection::vec(-3.0f64..3.0, 3)
        ) {
            for d in [unit_ball(), unit_box()] {
                let sd = d.signed_distance(&x);
                let region = d.classify(&x).unwrap();
                let tol = d.boundary_tolerance();
                match region {
                    Region::Interior => prop_assert!(sd < -tol),
                    Region::Boundary => prop_assert!(sd.abs() <= tol),
                    Region::Exterior => prop_assert!(sd > tol),
                }
            }
        }

        #[test]
        fn projection_is_on_boundary(x in proptest::collection::vec(-4.0f64..4.0, 3)) {
            for d in [unit_ball(), unit_box()] {
                if d.classify(&x).unwrap() != Region::Interior {
                    let (p, overshoot) = d.project_to_boundary(&x).unwrap();
                    prop_assert!(d.signed_distance(&p).abs() <= d.boundary_tolerance());
                    prop_assert!(overshoot >= 0.0);
                }
            }
        }
    }
}
