use std::f64::consts::PI;

use nalgebra::Vector3;

use super::KinematicsError;

/// HAA, HFE, KFE angles in radians.
pub type LegAngles = [f64; 3];

/// Three-joint leg: HAA about the base x axis, then HFE and KFE about y.
///
/// The HAA-to-HFE offset points outwards (sign of the hip's y coordinate).
#[derive(Debug, Clone, PartialEq)]
pub struct LegModel {
    pub name: String,
    pub hip_offset: Vector3<f64>,
    /// HAA-to-HFE offset, upper link, lower link.
    pub link_lengths: [f64; 3],
    /// (lower, upper) per joint.
    pub joint_limits: [[f64; 2]; 3],
}

impl LegModel {
    pub fn new(name: &str, hip_offset: Vector3<f64>, link_lengths: [f64; 3], joint_limits: [[f64; 2]; 3]) -> Result<Self, KinematicsError> {
        if link_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(KinematicsError::InvalidModel(format!("leg `{name}` link lengths must be positive")));
        }
        if joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(KinematicsError::InvalidModel(format!("leg `{name}` limits must satisfy lower < upper")));
        }
        Ok(Self { name: name.to_string(), hip_offset, link_lengths, joint_limits })
    }

    fn side(&self) -> f64 {
        if self.hip_offset.y >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn within_limits(&self, angles: &LegAngles) -> bool {
        angles.iter().zip(&self.joint_limits).all(|(a, [lo, hi])| *a >= *lo && *a <= *hi)
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Foot position in the base frame.
pub fn leg_fk(leg: &LegModel, angles: &LegAngles) -> Vector3<f64> {
    let [l0, l1, l2] = leg.link_lengths;
    let [haa, hfe, kfe] = *angles;
    let u = -l2 * kfe.sin();
    let w = -l1 - l2 * kfe.cos();
    let (sb, cb) = hfe.sin_cos();
    let xp = u * cb + w * sb;
    let zp = -u * sb + w * cb;
    let yp = leg.side() * l0;
    let (sa, ca) = haa.sin_cos();
    leg.hip_offset + Vector3::new(xp, yp * ca - zp * sa, yp * sa + zp * ca)
}

/// Closed-form inverse kinematics, knee-backward branch (KFE ≤ 0).
///
/// Returns `None` when the foot is outside the leg's workspace or the
/// solution violates a joint limit.
pub fn leg_ik(leg: &LegModel, foot_in_base: &Vector3<f64>) -> Option<LegAngles> {
    let [l0, l1, l2] = leg.link_lengths;
    let p = foot_in_base - leg.hip_offset;
    let r2 = p.y * p.y + p.z * p.z;
    if r2 < l0 * l0 {
        return None;
    }
    let zp = -(r2 - l0 * l0).sqrt();
    let yp = leg.side() * l0;
    let haa = wrap(p.z.atan2(p.y) - zp.atan2(yp));

    let d2 = p.x * p.x + zp * zp;
    let mut c = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if c.abs() > 1.0 {
        if c.abs() > 1.0 + 1e-12 {
            return None;
        }
        c = c.signum();
    }
    let kfe = -c.acos();
    let u = -l2 * kfe.sin();
    let w = -l1 - l2 * kfe.cos();
    let hfe = wrap(p.x.atan2(zp) - u.atan2(w));

    let angles = [haa, hfe, kfe];
    leg.within_limits(&angles).then_some(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_leg() -> LegModel {
        LegModel::new("lf", Vector3::new(0.44, 0.16, 0.0), [0.08, 0.36, 0.38], [[-0.6, 0.6], [-1.5, 2.0], [-2.7, 0.0]]).unwrap()
    }

    #[test]
    fn fully_extended_below_hip() {
        let leg = test_leg();
        let foot = leg.hip_offset + Vector3::new(0.0, 0.08, -(0.36 + 0.38));
        let a = leg_ik(&leg, &foot).expect("boundary of annulus is reachable");
        assert_relative_eq!(a[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(a[1], 0.0, epsilon = 1e-6);
        assert_relative_eq!(a[2], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn beyond_reach_is_infeasible() {
        let leg = test_leg();
        let foot = leg.hip_offset + Vector3::new(0.0, 0.08, -0.75);
        assert!(leg_ik(&leg, &foot).is_none());
        assert!(leg_ik(&leg, &(leg.hip_offset + Vector3::new(3.0, 0.0, -0.2))).is_none());
    }

    #[test]
    fn limit_violation_is_infeasible() {
        let mut leg = test_leg();
        leg.joint_limits[2] = [-2.7, -0.5];
        let foot = leg.hip_offset + Vector3::new(0.0, 0.08, -0.74);
        assert!(leg_ik(&leg, &foot).is_none());
    }

    #[test]
    fn right_leg_mirrors_left() {
        let left = test_leg();
        let mut right = left.clone();
        right.hip_offset.y = -left.hip_offset.y;
        let a = [0.2, 0.7, -1.4];
        let fl = leg_fk(&left, &a);
        let fr = leg_fk(&right, &[-a[0], a[1], a[2]]);
        assert_relative_eq!(fl.x, fr.x, epsilon = 1e-12);
        assert_relative_eq!(fl.y, -fr.y, epsilon = 1e-12);
        assert_relative_eq!(fl.z, fr.z, epsilon = 1e-12);
    }

    #[test]
    fn ik_inverts_fk_on_random_in_limit_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sign in [1.0, -1.0] {
            let mut leg = test_leg();
            leg.hip_offset.y *= sign;
            for _ in 0..1000 {
                // Stay clear of the fully extended knee, where acos loses precision.
                let a: [f64; 3] = [rng.gen_range(-0.6..0.6), rng.gen_range(-1.5..2.0), rng.gen_range(-2.7..-0.05)];
                // The knee-backward branch assumes the foot is below the hip in the leg plane.
                let (l1, l2) = (0.36, 0.38);
                let planar_z = l2 * a[2].sin() * a[1].sin() + (-l1 - l2 * a[2].cos()) * a[1].cos();
                if planar_z > -0.02 {
                    continue;
                }
                let foot = leg_fk(&leg, &a);
                let sol = leg_ik(&leg, &foot).expect("in-limit sample must be feasible");
                assert!((leg_fk(&leg, &sol) - foot).norm() < 1e-9);
                for k in 0..3 {
                    assert_relative_eq!(sol[k], a[k], epsilon = 1e-7);
                }
            }
        }
    }
}
