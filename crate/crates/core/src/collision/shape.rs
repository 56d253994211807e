use nalgebra::{Isometry3, Vector3};

use super::CollisionError;

/// Convex core of a collision primitive.
///
/// Spheres and capsules are stored as a point or segment core plus an
/// inflation radius; boxes and hulls are polytopes. Keeping the rounded part
/// separate lets distance queries run GJK on the cores and subtract the radii
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere {
        radius: f64,
    },
    /// Segment along the local z axis from `-half_length` to `+half_length`.
    Capsule {
        radius: f64,
        half_length: f64,
    },
    Box {
        half_extents: Vector3<f64>,
    },
    ConvexHull {
        vertices: Vec<Vector3<f64>>,
    },
}

impl Primitive {
    pub fn validate(&self) -> Result<(), CollisionError> {
        let bad = |msg: &str| Err(CollisionError::InvalidShape(msg.to_string()));
        match self {
            Primitive::Sphere { radius } if !(*radius > 0.0) => bad("sphere radius must be positive"),
            Primitive::Capsule { radius, half_length } if !(*radius > 0.0 && *half_length > 0.0) => {
                bad("capsule radius and half-length must be positive")
            }
            Primitive::Box { half_extents } if !half_extents.iter().all(|h| *h > 0.0) => bad("box half-extents must be positive"),
            Primitive::ConvexHull { vertices } => {
                if vertices.len() < 4 {
                    return bad("convex hull needs at least 4 vertices");
                }
                if !hull_has_volume(vertices) {
                    return bad("convex hull vertices are coplanar");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Radius that belongs to the primitive itself (sphere/capsule rounding).
    pub fn rounding(&self) -> f64 {
        match self {
            Primitive::Sphere { radius } | Primitive::Capsule { radius, .. } => *radius,
            _ => 0.0,
        }
    }

    /// Support point of the unrounded core in local coordinates.
    pub fn core_support(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Primitive::Sphere { .. } => Vector3::zeros(),
            Primitive::Capsule { half_length, .. } => {
                let z = if dir.z >= 0.0 { *half_length } else { -*half_length };
                Vector3::new(0.0, 0.0, z)
            }
            Primitive::Box { half_extents } => {
                Vector3::new(half_extents.x.copysign(dir.x), half_extents.y.copysign(dir.y), half_extents.z.copysign(dir.z))
            }
            Primitive::ConvexHull { vertices } => {
                let mut best = vertices[0];
                let mut best_dot = best.dot(dir);
                for v in &vertices[1..] {
                    let d = v.dot(dir);
                    if d > best_dot {
                        best_dot = d;
                        best = *v;
                    }
                }
                best
            }
        }
    }

    /// Whether the core spans three dimensions (required by EPA on cores).
    pub fn core_is_solid(&self) -> bool {
        matches!(self, Primitive::Box { .. } | Primitive::ConvexHull { .. })
    }
}

fn hull_has_volume(vertices: &[Vector3<f64>]) -> bool {
    let p0 = vertices[0];
    let scale = vertices.iter().map(|v| (v - p0).norm()).fold(0.0, f64::max).max(1e-12);
    for i in 1..vertices.len() {
        for j in i + 1..vertices.len() {
            let n = (vertices[i] - p0).cross(&(vertices[j] - p0));
            if n.norm() < 1e-12 * scale * scale {
                continue;
            }
            if vertices.iter().any(|v| (v - p0).dot(&n).abs() > 1e-9 * scale * n.norm()) {
                return true;
            }
        }
    }
    false
}

/// A convex primitive inflated by `swept_radius`, placed in the world.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexShape {
    pub primitive: Primitive,
    pub swept_radius: f64,
    pub pose: Isometry3<f64>,
}

impl ConvexShape {
    pub fn new(primitive: Primitive, swept_radius: f64, pose: Isometry3<f64>) -> Self {
        Self { primitive, swept_radius, pose }
    }

    pub fn sphere(radius: f64, center: Vector3<f64>) -> Self {
        Self::new(Primitive::Sphere { radius }, 0.0, Isometry3::translation(center.x, center.y, center.z))
    }

    pub fn cuboid(half_extents: Vector3<f64>, pose: Isometry3<f64>) -> Self {
        Self::new(Primitive::Box { half_extents }, 0.0, pose)
    }

    pub fn validate(&self) -> Result<(), CollisionError> {
        if !(self.swept_radius >= 0.0) {
            return Err(CollisionError::InvalidShape("swept radius must be non-negative".into()));
        }
        self.primitive.validate()
    }

    /// Total inflation applied around the core.
    pub fn radius(&self) -> f64 {
        self.primitive.rounding() + self.swept_radius
    }

    pub fn with_pose(&self, pose: Isometry3<f64>) -> Self {
        Self { pose, ..self.clone() }
    }

    /// World-frame support point of the core (no inflation).
    pub fn core_support(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let local_dir = self.pose.rotation.inverse_transform_vector(dir);
        self.pose.transform_point(&self.primitive.core_support(&local_dir).into()).coords
    }

    /// World-frame endpoints of a point or segment core.
    pub(crate) fn core_segment(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let h = match self.primitive {
            Primitive::Sphere { .. } => 0.0,
            Primitive::Capsule { half_length, .. } => half_length,
            _ => return None,
        };
        let p = |z: f64| self.pose.transform_point(&Vector3::new(0.0, 0.0, z).into()).coords;
        Some((p(-h), p(h)))
    }

    /// World-frame support point of the full inflated shape.
    pub fn support(&self, dir: &Vector3<f64>) -> Result<Vector3<f64>, CollisionError> {
        let n = dir.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(CollisionError::ZeroDirection);
        }
        Ok(self.core_support(dir) + dir * (self.radius() / n))
    }
}
