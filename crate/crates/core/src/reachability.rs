//! Numeric reachability oracle.
//!
//! The reachable region is the set of horizontal base displacements, at fixed
//! base orientation and height, for which every stance foot admits an
//! in-limits leg IK solution. It is found by casting rays from the current
//! base projection and bisecting each ray's first feasibility change. The
//! reachability margin is the minimum distance from the base projection to
//! the infinite lines through the region's edges.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::kinemodel::{base_rotation, leg_ik, Configuration, KinematicModel, LegAngles};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReachabilityError {
    #[error("start outside region: base projection is infeasible for query {0:?}")]
    StartOutsideRegion(Box<RegionQuery>),
    #[error("degenerate edge line (a = {a}, b = {b})")]
    DegenerateEdge { a: f64, b: f64 },
    #[error("invalid region query: {0}")]
    InvalidQuery(String),
    #[error("invalid region parameters: {0}")]
    InvalidParams(String),
}

/// Margin input: world z axis and stance feet, all expressed in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionQuery {
    pub ez_in_base: Vector3<f64>,
    pub feet_in_base: Vec<Vector3<f64>>,
}

impl RegionQuery {
    pub fn new(ez_in_base: Vector3<f64>, feet_in_base: Vec<Vector3<f64>>) -> Result<Self, ReachabilityError> {
        let q = Self { ez_in_base, feet_in_base };
        q.validate()?;
        Ok(q)
    }

    /// Build the query for a base configuration and world-frame foot positions:
    /// `b_x_f = bRw (w_x_f - w_x_b)`.
    pub fn from_configuration(q: &Configuration, feet_world: &[Vector3<f64>]) -> Self {
        let r_bw = base_rotation(q);
        Self { ez_in_base: r_bw * Vector3::z(), feet_in_base: feet_world.iter().map(|f| r_bw * (f - q.base_pos)).collect() }
    }

    pub fn validate(&self) -> Result<(), ReachabilityError> {
        if (self.ez_in_base.norm() - 1.0).abs() > 1e-9 {
            return Err(ReachabilityError::InvalidQuery(format!("|ez_in_base| = {} (expected 1)", self.ez_in_base.norm())));
        }
        if self.feet_in_base.len() < 3 {
            return Err(ReachabilityError::InvalidQuery(format!("{} feet given, need at least 3", self.feet_in_base.len())));
        }
        Ok(())
    }

    /// Flattened network input `[ez, foot_1, ..., foot_Nc]`.
    pub fn to_input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 + 3 * self.feet_in_base.len());
        x.extend(self.ez_in_base.iter());
        for f in &self.feet_in_base {
            x.extend(f.iter());
        }
        x
    }

    /// Orthonormal horizontal basis (world x', y') expressed in the base frame.
    ///
    /// x' is the base x axis projected onto the ground plane, so region
    /// coordinates are heading-aligned.
    pub fn horizontal_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let ez = self.ez_in_base;
        let mut e1 = Vector3::x() - ez * ez.x;
        if e1.norm() < 1e-9 {
            e1 = Vector3::y() - ez * ez.y;
        }
        let e1 = e1.normalize();
        (e1, ez.cross(&e1))
    }

    /// Feet relative to a base displaced horizontally by `offset` (heading frame).
    fn displaced_feet(&self, offset: &Vector2<f64>) -> impl Iterator<Item = Vector3<f64>> + '_ {
        let (e1, e2) = self.horizontal_basis();
        let shift = e1 * offset.x + e2 * offset.y;
        self.feet_in_base.iter().map(move |f| f - shift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionParams {
    pub n_rays: usize,
    /// Bisection stops once the bracket is shorter than this.
    pub tolerance: f64,
    pub max_ray_length: f64,
    /// Spacing of the feasibility samples along each ray before bisection.
    pub ray_step: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self { n_rays: 32, tolerance: 1e-3, max_ray_length: 1.5, ray_step: 0.02 }
    }
}

impl RegionParams {
    pub fn with_rays(n_rays: usize) -> Self {
        Self { n_rays, ..Self::default() }
    }

    fn validate(&self) -> Result<(), ReachabilityError> {
        if self.n_rays < 8 {
            return Err(ReachabilityError::InvalidParams(format!("n_rays = {} (need at least 8)", self.n_rays)));
        }
        if !(self.tolerance > 0.0 && self.max_ray_length > 0.0 && self.ray_step > 0.0) {
            return Err(ReachabilityError::InvalidParams("tolerance, ray length and step must be positive".into()));
        }
        Ok(())
    }
}

/// Line `a x + b y + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EdgeLine {
    pub fn through(p: &Vector2<f64>, q: &Vector2<f64>) -> Self {
        let a = q.y - p.y;
        let b = p.x - q.x;
        Self { a, b, c: -(a * p.x + b * p.y) }
    }
}

/// Point-to-line distance `|a x + b y + c| / sqrt(a² + b²)`.
pub fn edge_distance(edge: &EdgeLine, point: &Vector2<f64>) -> Result<f64, ReachabilityError> {
    let n2 = edge.a * edge.a + edge.b * edge.b;
    if n2 < 1e-18 {
        return Err(ReachabilityError::DegenerateEdge { a: edge.a, b: edge.b });
    }
    Ok((edge.a * point.x + edge.b * point.y + edge.c).abs() / n2.sqrt())
}

/// Polygon of feasible base positions, vertices ordered by ray angle.
///
/// Coordinates are horizontal offsets from the queried base projection in the
/// heading-aligned frame of [`RegionQuery::horizontal_basis`]; use
/// [`ReachableRegion::to_world`] for world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachableRegion {
    pub vertices: Vec<Vector2<f64>>,
}

impl ReachableRegion {
    pub fn edges(&self) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Edge lines; consecutive coincident vertices produce no line.
    pub fn edge_lines(&self) -> Vec<EdgeLine> {
        self.edges().filter(|(p, q)| (p - q).norm() > 1e-12).map(|(p, q)| EdgeLine::through(&p, &q)).collect()
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(p, q)| p.x * q.y - q.x * p.y).sum::<f64>().abs()
    }

    /// Minimum edge-line distance from `point`.
    pub fn margin_at(&self, point: &Vector2<f64>) -> Result<f64, ReachabilityError> {
        let mut m = f64::INFINITY;
        for e in self.edge_lines() {
            m = m.min(edge_distance(&e, point)?);
        }
        Ok(m)
    }

    /// Rotate by `heading` (world yaw of the region's x axis) and translate to `origin`.
    pub fn to_world(&self, heading: f64, origin: &Vector2<f64>) -> Self {
        let (s, c) = heading.sin_cos();
        Self { vertices: self.vertices.iter().map(|v| Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y) + origin).collect() }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y")?;
        for v in &self.vertices {
            writeln!(out, "{},{}", v.x, v.y)?;
        }
        Ok(())
    }
}

/// Leg angles for every foot, if all are in limits.
pub fn stance_ik(model: &KinematicModel, feet_in_base: impl Iterator<Item = Vector3<f64>>) -> Option<Vec<LegAngles>> {
    model.legs.iter().zip(feet_in_base).map(|(leg, f)| leg_ik(leg, &f)).collect()
}

/// Whether every leg reaches its foot when the base is shifted by `offset`.
pub fn feasible(model: &KinematicModel, query: &RegionQuery, offset: &Vector2<f64>) -> bool {
    model.legs.iter().zip(query.displaced_feet(offset)).all(|(leg, f)| leg_ik(leg, &f).is_some())
}

fn ray_boundary(model: &KinematicModel, query: &RegionQuery, dir: &Vector2<f64>, params: &RegionParams) -> f64 {
    let mut lo = 0.0;
    let mut hi = None;
    let steps = (params.max_ray_length / params.ray_step).ceil() as usize;
    for k in 1..=steps {
        let t = (k as f64 * params.ray_step).min(params.max_ray_length);
        if feasible(model, query, &(dir * t)) {
            lo = t;
        } else {
            hi = Some(t);
            break;
        }
    }
    let Some(mut hi) = hi else { return lo };
    while hi - lo > params.tolerance {
        let mid = 0.5 * (lo + hi);
        if feasible(model, query, &(dir * mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn ray_direction(k: usize, n_rays: usize) -> Vector2<f64> {
    let theta = 2.0 * PI * k as f64 / n_rays as f64;
    Vector2::new(theta.cos(), theta.sin())
}

pub fn compute_region(model: &KinematicModel, query: &RegionQuery, params: &RegionParams) -> Result<ReachableRegion, ReachabilityError> {
    query.validate()?;
    params.validate()?;
    if query.feet_in_base.len() != model.legs.len() {
        return Err(ReachabilityError::InvalidQuery(format!("{} feet for {} legs", query.feet_in_base.len(), model.legs.len())));
    }
    if !feasible(model, query, &Vector2::zeros()) {
        return Err(ReachabilityError::StartOutsideRegion(Box::new(query.clone())));
    }
    let vertices = (0..params.n_rays)
        .map(|k| {
            let dir = ray_direction(k, params.n_rays);
            dir * ray_boundary(model, query, &dir, params)
        })
        .collect();
    Ok(ReachableRegion { vertices })
}

/// Reachability margin of the current base position.
pub fn margin_oracle(model: &KinematicModel, query: &RegionQuery, params: &RegionParams) -> Result<f64, ReachabilityError> {
    compute_region(model, query, params)?.margin_at(&Vector2::zeros())
}
