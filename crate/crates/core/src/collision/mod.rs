//! Convex proximity queries: GJK distance, EPA penetration depth, and the
//! robot/obstacle pair sweep used by the collision constraints.

mod gjk;
mod pairs;
mod shape;

use nalgebra::Vector3;
use thiserror::Error;

pub use gjk::{EPA_TOLERANCE, GJK_MAX_ITERATIONS, GJK_TOLERANCE};
pub use pairs::{collision_pairs, pairwise_distances, BodyRef, CollisionPair, PairDistance};
pub use shape::{ConvexShape, Primitive};

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("support query with a zero direction")]
    ZeroDirection,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{algorithm} did not converge within {iterations} iterations (ill-conditioned shapes?)")]
    IterationCap { algorithm: &'static str, iterations: usize },
    #[error("shapes overlap; use a penetration query")]
    Overlapping,
    #[error("shapes do not overlap")]
    NotOverlapping,
    #[error("degenerate Minkowski difference")]
    Degenerate,
    #[error(transparent)]
    Kinematics(#[from] crate::kinemodel::KinematicsError),
}

/// Signed distance between two shapes with witness points.
///
/// `witness_b - witness_a == distance * normal` in both the separated and the
/// penetrating case; `normal` points from `a` towards `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityResult {
    pub distance: f64,
    pub witness_a: Vector3<f64>,
    pub witness_b: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Normal used when EPA cannot provide one (coincident centers).
fn fallback_normal(a: &ConvexShape, b: &ConvexShape) -> Vector3<f64> {
    let d = b.pose.translation.vector - a.pose.translation.vector;
    if d.norm() > 1e-12 {
        d.normalize()
    } else {
        Vector3::z()
    }
}

enum Query {
    Separated(ProximityResult),
    Penetrating(ProximityResult),
}

fn query(a: &ConvexShape, b: &ConvexShape) -> Result<Query, CollisionError> {
    let r = a.radius() + b.radius();
    match gjk::gjk_cores(a, b)? {
        gjk::GjkOutcome::Separated { pa, pb, distance } => {
            let normal = (pb - pa) / distance;
            let res = ProximityResult { distance: distance - r, witness_a: pa + normal * a.radius(), witness_b: pb - normal * b.radius(), normal };
            Ok(if res.distance >= 0.0 { Query::Separated(res) } else { Query::Penetrating(res) })
        }
        gjk::GjkOutcome::Intersecting { simplex } => {
            let e = gjk::epa_cores(a, b, simplex)?;
            let normal = if e.normal.norm() > 0.5 { e.normal } else { fallback_normal(a, b) };
            Ok(Query::Penetrating(ProximityResult { distance: -e.depth, witness_a: e.pa, witness_b: e.pb, normal }))
        }
    }
}

/// Distance between non-overlapping shapes.
pub fn gjk_distance(a: &ConvexShape, b: &ConvexShape) -> Result<ProximityResult, CollisionError> {
    match query(a, b)? {
        Query::Separated(r) => Ok(r),
        Query::Penetrating(_) => Err(CollisionError::Overlapping),
    }
}

/// Penetration depth (as a negative distance) of overlapping shapes.
pub fn epa_penetration(a: &ConvexShape, b: &ConvexShape) -> Result<ProximityResult, CollisionError> {
    match query(a, b)? {
        Query::Penetrating(r) => Ok(r),
        Query::Separated(_) => Err(CollisionError::NotOverlapping),
    }
}

/// Signed distance: positive when separated, minus the penetration depth otherwise.
pub fn signed_distance(a: &ConvexShape, b: &ConvexShape) -> Result<ProximityResult, CollisionError> {
    match query(a, b)? {
        Query::Separated(r) | Query::Penetrating(r) => Ok(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};

    fn boxed(h: [f64; 3], pos: [f64; 3], rpy: [f64; 3]) -> ConvexShape {
        ConvexShape::cuboid(
            Vector3::from(h),
            Isometry3::from_parts(Translation3::from(Vector3::from(pos)), UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2])),
        )
    }

    #[test]
    fn unit_spheres_three_apart() {
        let a = ConvexShape::sphere(1.0, Vector3::zeros());
        let b = ConvexShape::sphere(1.0, Vector3::new(3.0, 0.0, 0.0));
        let r = gjk_distance(&a, &b).unwrap();
        assert_relative_eq!(r.distance, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.witness_a, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(r.witness_b, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn sphere_above_box_face() {
        let a = ConvexShape::sphere(0.5, Vector3::new(0.1, -0.2, 1.0 + 2.0));
        let b = boxed([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0; 3]);
        let r = gjk_distance(&a, &b).unwrap();
        assert_relative_eq!(r.distance, 1.5, epsilon = 1e-12);
        assert_relative_eq!(r.normal, -Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn unit_spheres_one_apart_penetrate_by_one() {
        let a = ConvexShape::sphere(1.0, Vector3::zeros());
        let b = ConvexShape::sphere(1.0, Vector3::new(1.0, 0.0, 0.0));
        let r = epa_penetration(&a, &b).unwrap();
        assert_relative_eq!(r.distance, -1.0, epsilon = 1e-12);
        assert!(gjk_distance(&a, &b).is_err());
    }

    #[test]
    fn coincident_boxes_depth_is_smallest_extent() {
        let a = boxed([0.3, 0.5, 0.2], [0.1, 0.2, 0.3], [0.2, -0.1, 0.4]);
        let r = epa_penetration(&a, &a.clone()).unwrap();
        assert_relative_eq!(r.distance, -0.4, epsilon = 1e-6);
    }

    #[test]
    fn separated_input_rejected_by_epa() {
        let a = ConvexShape::sphere(0.5, Vector3::zeros());
        let b = ConvexShape::sphere(0.5, Vector3::new(2.0, 0.0, 0.0));
        assert!(matches!(epa_penetration(&a, &b), Err(CollisionError::NotOverlapping)));
    }

    #[test]
    fn concentric_spheres() {
        let a = ConvexShape::sphere(0.4, Vector3::new(1.0, 1.0, 1.0));
        let b = ConvexShape::sphere(0.3, Vector3::new(1.0, 1.0, 1.0));
        let r = signed_distance(&a, &b).unwrap();
        assert_relative_eq!(r.distance, -0.7, epsilon = 1e-5);
    }

    #[test]
    fn box_box_deep_overlap_along_x() {
        let a = boxed([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0; 3]);
        let b = boxed([1.0, 2.0, 2.0], [1.5, 0.0, 0.0], [0.0; 3]);
        let r = epa_penetration(&a, &b).unwrap();
        assert_relative_eq!(r.distance, -0.5, epsilon = 1e-6);
        assert_relative_eq!(r.normal, Vector3::x(), epsilon = 1e-6);
        assert_relative_eq!(r.witness_b - r.witness_a, r.normal * r.distance, epsilon = 1e-6);
    }

    #[test]
    fn capsule_segment_distance() {
        let cap = ConvexShape::new(Primitive::Capsule { radius: 0.1, half_length: 0.5 }, 0.0, Isometry3::identity());
        let s = ConvexShape::sphere(0.2, Vector3::new(1.0, 0.0, 0.3));
        let r = gjk_distance(&cap, &s).unwrap();
        assert_relative_eq!(r.distance, 0.7, epsilon = 1e-12);
    }
}
