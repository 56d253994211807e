//! Reduced kinematic model of the legged manipulator: a floating base box
//! carrying a serial arm, plus analytic 3-DOF legs used only for
//! reachability.

mod leg;

use std::fmt;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Matrix3xX, Translation3, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::collision::{ConvexShape, Primitive};
use crate::config::RobotConfig;

pub use leg::{leg_fk, leg_ik, LegAngles, LegModel};

/// Pitch must stay this far away from ±π/2.
pub const GIMBAL_MARGIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("configuration has {got} arm joints, model has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("base pitch {pitch:.4} rad is too close to the ±π/2 gimbal singularity")]
    GimbalLock { pitch: f64 },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// World-from-base rotation for extrinsic roll-pitch-yaw: `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rotation_from_euler(euler: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(euler.z) * rot_y(euler.y) * rot_x(euler.x)
}

/// Base-from-world rotation (transpose of the world-from-base matrix).
pub fn base_rotation(q: &Configuration) -> Matrix3<f64> {
    rotation_from_euler(&q.base_euler).transpose()
}

/// Partial derivatives of the base-from-world rotation with respect to roll, pitch and yaw.
pub fn base_rotation_derivatives(euler: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(euler.x), rot_y(euler.y), rot_z(euler.z));
    [(rz * ry * drot_x(euler.x)).transpose(), (rz * drot_y(euler.y) * rx).transpose(), (drot_z(euler.z) * ry * rx).transpose()]
}

/// World angular velocity produced by a unit rate of each Euler angle.
pub fn euler_rate_axes(euler: &Vector3<f64>) -> [Vector3<f64>; 3] {
    let rz = rot_z(euler.z);
    let ry = rot_y(euler.y);
    [rz * ry * Vector3::x(), rz * Vector3::y(), Vector3::z()]
}

/// Planning state: base position, base Euler angles (extrinsic XYZ) and arm joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub base_pos: Vector3<f64>,
    pub base_euler: Vector3<f64>,
    pub arm_q: DVector<f64>,
}

impl Configuration {
    pub fn new(base_pos: Vector3<f64>, base_euler: Vector3<f64>, arm_q: DVector<f64>) -> Self {
        Self { base_pos, base_euler, arm_q }
    }

    pub fn dim(&self) -> usize {
        6 + self.arm_q.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.fixed_rows_mut::<3>(0).copy_from(&self.base_pos);
        v.fixed_rows_mut::<3>(3).copy_from(&self.base_euler);
        v.rows_mut(6, self.arm_q.len()).copy_from(&self.arm_q);
        v
    }

    /// Inverse of [`Configuration::to_vector`]; `v` must hold at least 6 entries.
    pub fn from_slice(v: &[f64]) -> Self {
        Self { base_pos: Vector3::new(v[0], v[1], v[2]), base_euler: Vector3::new(v[3], v[4], v[5]), arm_q: DVector::from_column_slice(&v[6..]) }
    }

    pub fn check_pitch(&self) -> Result<(), KinematicsError> {
        let pitch = self.base_euler.y;
        if !pitch.is_finite() || pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN {
            return Err(KinematicsError::GimbalLock { pitch });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkId {
    Base,
    /// Child link of arm joint `i`.
    Arm(usize),
    /// Gripper frame.
    Ee,
    /// Extra fixed frame (attached objects).
    Frame(usize),
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::Base => write!(f, "base"),
            LinkId::Arm(i) => write!(f, "arm{i}"),
            LinkId::Ee => write!(f, "ee"),
            LinkId::Frame(i) => write!(f, "frame{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmJoint {
    pub name: String,
    /// Parent-link-to-joint transform at zero angle.
    pub origin: Isometry3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedFrame {
    pub name: String,
    pub parent: LinkId,
    pub offset: Isometry3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionBody {
    pub name: String,
    pub link: LinkId,
    pub offset: Isometry3<f64>,
    pub primitive: Primitive,
    pub swept_radius: f64,
}

impl CollisionBody {
    pub fn shape_at(&self, link_pose: &Isometry3<f64>) -> ConvexShape {
        ConvexShape::new(self.primitive.clone(), self.swept_radius, link_pose * self.offset)
    }
}

/// Object rigidly attached to a link after grasping.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedObject {
    pub name: String,
    pub primitive: Primitive,
    pub swept_radius: f64,
}

/// Nominal stance: base height and world foot positions with the base at the xy origin.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalStance {
    pub height: f64,
    pub feet: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub name: String,
    pub base_half_extents: Vector3<f64>,
    pub arm: Vec<ArmJoint>,
    pub ee_offset: Isometry3<f64>,
    pub legs: Vec<LegModel>,
    pub frames: Vec<FixedFrame>,
    pub bodies: Vec<CollisionBody>,
    pub self_exclusions: Vec<(LinkId, LinkId)>,
    pub stance: NominalStance,
}

impl KinematicModel {
    pub fn from_config(cfg: &RobotConfig) -> Result<Self, KinematicsError> {
        let invalid = |m: String| KinematicsError::InvalidModel(m);
        if cfg.arm.joints.is_empty() {
            return Err(invalid("arm needs at least one joint".into()));
        }
        let mut arm = Vec::with_capacity(cfg.arm.joints.len());
        for j in &cfg.arm.joints {
            let axis = Vector3::from(j.axis);
            if axis.norm() < 1e-9 {
                return Err(invalid(format!("joint `{}` has a zero axis", j.name)));
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(invalid(format!("joint `{}` limits must satisfy lower < upper", j.name)));
            }
            arm.push(ArmJoint {
                name: j.name.clone(),
                origin: j.origin.to_isometry(),
                axis: Unit::new_normalize(axis),
                lower: j.limits[0],
                upper: j.limits[1],
            });
        }
        let legs =
            cfg.legs.iter().map(|l| LegModel::new(&l.name, Vector3::from(l.hip_offset), l.link_lengths, l.limits)).collect::<Result<Vec<_>, _>>()?;
        if cfg.stance.feet.len() != legs.len() {
            return Err(invalid(format!("stance lists {} feet for {} legs", cfg.stance.feet.len(), legs.len())));
        }
        let half = Vector3::from(cfg.base.half_extents);
        if !half.iter().all(|h| *h > 0.0) {
            return Err(invalid("base half-extents must be positive".into()));
        }
        let mut model = KinematicModel {
            name: cfg.name.clone(),
            base_half_extents: half,
            arm,
            ee_offset: cfg.arm.ee_offset.to_isometry(),
            legs,
            frames: Vec::new(),
            bodies: Vec::new(),
            self_exclusions: Vec::new(),
            stance: NominalStance { height: cfg.stance.nominal_height, feet: cfg.stance.feet.iter().map(|f| Vector3::from(*f)).collect() },
        };
        for b in &cfg.bodies {
            let link = model.link_by_name(&b.link)?;
            let primitive = b.shape.to_primitive();
            primitive.validate().map_err(|e| invalid(format!("body `{}`: {e}", b.name)))?;
            if b.swept_radius < 0.0 {
                return Err(invalid(format!("body `{}` has a negative swept radius", b.name)));
            }
            model.bodies.push(CollisionBody { name: b.name.clone(), link, offset: b.pose.to_isometry(), primitive, swept_radius: b.swept_radius });
        }
        for [a, b] in &cfg.self_collision_exclude {
            let pair = (model.link_by_name(a)?, model.link_by_name(b)?);
            model.self_exclusions.push(pair);
        }
        Ok(model)
    }

    pub fn n_arm(&self) -> usize {
        self.arm.len()
    }

    /// Dimension of the planning configuration, `6 + n_a`.
    pub fn dim(&self) -> usize {
        6 + self.arm.len()
    }

    pub fn arm_lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.arm.len(), self.arm.iter().map(|j| j.lower))
    }

    pub fn arm_upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.arm.len(), self.arm.iter().map(|j| j.upper))
    }

    pub fn link_by_name(&self, name: &str) -> Result<LinkId, KinematicsError> {
        match name {
            "base" => return Ok(LinkId::Base),
            "ee" => return Ok(LinkId::Ee),
            _ => {}
        }
        if let Some(i) = self.arm.iter().position(|j| j.name == name) {
            return Ok(LinkId::Arm(i));
        }
        if let Some(i) = self.frames.iter().position(|f| f.name == name) {
            return Ok(LinkId::Frame(i));
        }
        Err(KinematicsError::UnknownLink(name.to_string()))
    }

    pub fn link_name(&self, link: LinkId) -> String {
        match link {
            LinkId::Arm(i) if i < self.arm.len() => self.arm[i].name.clone(),
            LinkId::Frame(i) if i < self.frames.len() => self.frames[i].name.clone(),
            other => other.to_string(),
        }
    }

    fn check_link(&self, link: LinkId) -> Result<(), KinematicsError> {
        let ok = match link {
            LinkId::Base | LinkId::Ee => true,
            LinkId::Arm(i) => i < self.arm.len(),
            LinkId::Frame(i) => i < self.frames.len(),
        };
        if ok {
            Ok(())
        } else {
            Err(KinematicsError::UnknownLink(link.to_string()))
        }
    }

    /// Number of leading arm joints that move `link`.
    pub fn chain_depth(&self, link: LinkId) -> usize {
        match link {
            LinkId::Base => 0,
            LinkId::Arm(i) => i + 1,
            LinkId::Ee => self.arm.len(),
            LinkId::Frame(i) => self.chain_depth(self.frames[i].parent),
        }
    }

    pub fn check_configuration(&self, q: &Configuration) -> Result<(), KinematicsError> {
        if q.arm_q.len() != self.arm.len() {
            return Err(KinematicsError::DimensionMismatch { expected: self.arm.len(), got: q.arm_q.len() });
        }
        Ok(())
    }

    /// Evaluate all link frames for `q`.
    pub fn forward(&self, q: &Configuration) -> Result<Kinematics<'_>, KinematicsError> {
        self.check_configuration(q)?;
        let base = Isometry3::from_parts(
            Translation3::from(q.base_pos),
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rotation_from_euler(&q.base_euler))),
        );
        let mut joint_origins = Vec::with_capacity(self.arm.len());
        let mut joint_axes = Vec::with_capacity(self.arm.len());
        let mut links = Vec::with_capacity(self.arm.len());
        let mut frame = base;
        for (joint, angle) in self.arm.iter().zip(q.arm_q.iter()) {
            let pre = frame * joint.origin;
            joint_origins.push(pre.translation.vector);
            joint_axes.push(pre.rotation * joint.axis.into_inner());
            frame = pre * UnitQuaternion::from_axis_angle(&joint.axis, *angle);
            links.push(frame);
        }
        let ee = frame * self.ee_offset;
        let mut kin = Kinematics {
            model: self,
            base_pos: q.base_pos,
            euler_axes: euler_rate_axes(&q.base_euler),
            base,
            joint_origins,
            joint_axes,
            links,
            ee,
            frames: Vec::with_capacity(self.frames.len()),
        };
        for f in &self.frames {
            let parent = kin.pose(f.parent)?;
            kin.frames.push(parent * f.offset);
        }
        Ok(kin)
    }

    pub fn fk_frame(&self, q: &Configuration, link: LinkId) -> Result<Isometry3<f64>, KinematicsError> {
        self.check_link(link)?;
        self.forward(q)?.pose(link)
    }

    /// 6×(6+n_a) Jacobian: rows 0..3 are d(position)/dq, rows 3..6 the world
    /// angular velocity per unit rate of each coordinate.
    pub fn fk_jacobian(&self, q: &Configuration, link: LinkId) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_link(link)?;
        self.forward(q)?.frame_jacobian(link)
    }

    /// Copy of the model with an object rigidly attached to `grasp_link`.
    pub fn attach_object(
        &self,
        grasp_link: LinkId,
        object_pose_in_link: Isometry3<f64>,
        object: &AttachedObject,
    ) -> Result<KinematicModel, KinematicsError> {
        self.check_link(grasp_link)?;
        object.primitive.validate().map_err(|e| KinematicsError::InvalidModel(format!("object `{}`: {e}", object.name)))?;
        if self.frames.iter().any(|f| f.name == object.name) || self.link_by_name(&object.name).is_ok() {
            return Err(KinematicsError::InvalidModel(format!("frame `{}` already exists", object.name)));
        }
        let mut model = self.clone();
        let id = LinkId::Frame(model.frames.len());
        model.frames.push(FixedFrame { name: object.name.clone(), parent: grasp_link, offset: object_pose_in_link });
        model.bodies.push(CollisionBody {
            name: object.name.clone(),
            link: id,
            offset: Isometry3::identity(),
            primitive: object.primitive.clone(),
            swept_radius: object.swept_radius,
        });
        // The held object touches the gripper and the links carrying it.
        let mut holders = vec![grasp_link, LinkId::Ee];
        let depth = model.chain_depth(grasp_link);
        holders.extend((depth.saturating_sub(2)..depth).map(LinkId::Arm));
        for h in holders {
            model.self_exclusions.push((id, h));
        }
        Ok(model)
    }

    pub fn is_excluded(&self, a: LinkId, b: LinkId) -> bool {
        a == b || self.self_exclusions.iter().any(|(x, y)| (*x == a && *y == b) || (*x == b && *y == a))
    }
}

/// Link poses for one configuration, with geometric Jacobians.
#[derive(Debug, Clone)]
pub struct Kinematics<'m> {
    model: &'m KinematicModel,
    base_pos: Vector3<f64>,
    euler_axes: [Vector3<f64>; 3],
    base: Isometry3<f64>,
    joint_origins: Vec<Vector3<f64>>,
    joint_axes: Vec<Vector3<f64>>,
    links: Vec<Isometry3<f64>>,
    ee: Isometry3<f64>,
    frames: Vec<Isometry3<f64>>,
}

impl Kinematics<'_> {
    pub fn pose(&self, link: LinkId) -> Result<Isometry3<f64>, KinematicsError> {
        let missing = || KinematicsError::UnknownLink(link.to_string());
        Ok(match link {
            LinkId::Base => self.base,
            LinkId::Arm(i) => *self.links.get(i).ok_or_else(missing)?,
            LinkId::Ee => self.ee,
            LinkId::Frame(i) => *self.frames.get(i).ok_or_else(missing)?,
        })
    }

    /// World joint axis of arm joint `j`.
    pub fn joint_axis(&self, j: usize) -> Vector3<f64> {
        self.joint_axes[j]
    }

    /// 3×(6+n_a) Jacobian of a world point rigidly attached to `link`.
    pub fn point_jacobian(&self, link: LinkId, point: &Vector3<f64>) -> Matrix3xX<f64> {
        let dim = self.model.dim();
        let mut jac = Matrix3xX::zeros(dim);
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let lever = point - self.base_pos;
        for (k, axis) in self.euler_axes.iter().enumerate() {
            jac.set_column(3 + k, &axis.cross(&lever));
        }
        for j in 0..self.model.chain_depth(link) {
            jac.set_column(6 + j, &self.joint_axes[j].cross(&(point - self.joint_origins[j])));
        }
        jac
    }

    pub fn frame_jacobian(&self, link: LinkId) -> Result<DMatrix<f64>, KinematicsError> {
        let p = self.pose(link)?.translation.vector;
        let dim = self.model.dim();
        let mut jac = DMatrix::zeros(6, dim);
        jac.view_mut((0, 0), (3, dim)).copy_from(&self.point_jacobian(link, &p));
        for (k, axis) in self.euler_axes.iter().enumerate() {
            jac.view_mut((3, 3 + k), (3, 1)).copy_from(axis);
        }
        for j in 0..self.model.chain_depth(link) {
            jac.view_mut((3, 6 + j), (3, 1)).copy_from(&self.joint_axes[j]);
        }
        Ok(jac)
    }

    /// World-placed collision shape of body `index`.
    pub fn body_shape(&self, index: usize) -> Result<ConvexShape, KinematicsError> {
        let body = &self.model.bodies[index];
        Ok(body.shape_at(&self.pose(body.link)?))
    }
}
