//! Residual features. Each sees the window `q_{t-k}, ..., q_t` and returns a
//! residual with its Jacobian, columns ordered by window slot.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, Vector3, Vector6};

use super::SolverError;
use crate::collision::{pairwise_distances, CollisionPair, ConvexShape};
use crate::kinemodel::{Configuration, KinematicModel, LinkId};
use crate::surrogate::{margin_and_gradient_wrt_config, MlpModel};

pub type Residual = (DVector<f64>, DMatrix<f64>);

pub trait Feature: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn order(&self) -> usize;
    fn dim(&self) -> usize;
    /// `window.len() == order() + 1`; the Jacobian has `dim()` rows and `window.len() * n` columns.
    fn eval(&self, window: &[DVector<f64>]) -> Result<Residual, SolverError>;
    /// Residual only; features with an expensive Jacobian override this for line-search trials.
    fn value(&self, window: &[DVector<f64>]) -> Result<DVector<f64>, SolverError> {
        Ok(self.eval(window)?.0)
    }
}

/// `s ⊙ (q_t - q_ref)`.
#[derive(Debug, Clone)]
pub struct PositionBias {
    pub reference: DVector<f64>,
    pub scale: DVector<f64>,
}

impl PositionBias {
    /// Per-coordinate weights become `sqrt(weight)` scales so the cost is `Σ wᵢ (q - q_ref)ᵢ²`.
    pub fn new(reference: DVector<f64>, weights: &DVector<f64>) -> Self {
        Self { reference, scale: weights.map(f64::sqrt) }
    }
}

impl Feature for PositionBias {
    fn name(&self) -> &str {
        "position_bias"
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        self.reference.len()
    }
    fn eval(&self, window: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let r = (&window[0] - &self.reference).component_mul(&self.scale);
        Ok((r, DMatrix::from_diagonal(&self.scale)))
    }
}

/// Finite-difference acceleration `q_t - 2 q_{t-1} + q_{t-2}`.
#[derive(Debug, Clone)]
pub struct Smoothness {
    pub dim: usize,
}

impl Feature for Smoothness {
    fn name(&self) -> &str {
        "smoothness"
    }
    fn order(&self) -> usize {
        2
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let n = self.dim;
        let r = &w[2] - &w[1] * 2.0 + &w[0];
        let mut j = DMatrix::zeros(n, 3 * n);
        for i in 0..n {
            j[(i, i)] = 1.0;
            j[(i, n + i)] = -2.0;
            j[(i, 2 * n + i)] = 1.0;
        }
        Ok((r, j))
    }
}

/// World position of a link frame minus a target: equality `H(q_t) - z`.
#[derive(Debug, Clone)]
pub struct LinkPosition {
    pub label: String,
    pub model: Arc<KinematicModel>,
    pub link: LinkId,
    pub target: Vector3<f64>,
}

impl Feature for LinkPosition {
    fn name(&self) -> &str {
        &self.label
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        3
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let q = Configuration::from_slice(w[0].as_slice());
        let kin = self.model.forward(&q)?;
        let p = kin.pose(self.link)?.translation.vector;
        let jac = kin.point_jacobian(self.link, &p);
        Ok((DVector::from_column_slice((p - self.target).as_slice()), DMatrix::from_column_slice(3, jac.ncols(), jac.as_slice())))
    }
}

/// Arm limits as inequalities `q - upper <= 0` and `lower - q <= 0`.
#[derive(Debug, Clone)]
pub struct JointLimits {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Feature for JointLimits {
    fn name(&self) -> &str {
        "joint_limits"
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        2 * self.lower.len()
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let na = self.lower.len();
        let n = w[0].len();
        let arm = w[0].rows(6, na);
        let mut r = DVector::zeros(2 * na);
        let mut j = DMatrix::zeros(2 * na, n);
        for i in 0..na {
            r[i] = arm[i] - self.upper[i];
            r[na + i] = self.lower[i] - arm[i];
            j[(i, 6 + i)] = 1.0;
            j[(na + i, 6 + i)] = -1.0;
        }
        Ok((r, j))
    }
}

/// Collision inequalities `margin - d_pair(q_t) <= 0`, one row per pair.
#[derive(Debug, Clone)]
pub struct Collisions {
    pub model: Arc<KinematicModel>,
    pub obstacles: Arc<Vec<ConvexShape>>,
    pub pairs: Vec<CollisionPair>,
    pub margin: f64,
}

impl Feature for Collisions {
    fn name(&self) -> &str {
        "collisions"
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        self.pairs.len()
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let q = Configuration::from_slice(w[0].as_slice());
        let d = pairwise_distances(&self.model, &q, &self.obstacles, &self.pairs)?;
        let mut r = DVector::zeros(d.len());
        let mut j = DMatrix::zeros(d.len(), w[0].len());
        for (i, pd) in d.iter().enumerate() {
            r[i] = self.margin - pd.result.distance;
            j.row_mut(i).copy_from(&(-pd.gradient.transpose()));
        }
        Ok((r, j))
    }
}

/// How the surrogate margin enters the problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginUse {
    /// Residual `ε* - m̂(q_t)` for the squared cost.
    Cost { target: f64 },
    /// Inequality `ε_lower - m̂(q_t) <= 0`.
    Floor { lower: f64 },
}

impl MarginUse {
    fn level(self) -> f64 {
        match self {
            MarginUse::Cost { target } => target,
            MarginUse::Floor { lower } => lower,
        }
    }
}

/// Surrogate outputs keyed by the exact base pose, shared by the cost and floor
/// terms so each pose is pushed through the network once.
#[derive(Debug, Default)]
pub struct MarginCache {
    entries: Mutex<HashMap<[u64; 6], CachedMargin>>,
}

/// Margin, plus its base-pose gradient once one has been requested.
type CachedMargin = (f64, Option<Vector6<f64>>);

impl MarginCache {
    const CAPACITY: usize = 4096;

    fn key(q: &Configuration) -> [u64; 6] {
        let (p, e) = (q.base_pos, q.base_euler);
        [p.x, p.y, p.z, e.x, e.y, e.z].map(f64::to_bits)
    }

    fn get(&self, q: &Configuration, need_gradient: bool) -> Option<CachedMargin> {
        let entries = self.entries.lock().unwrap();
        entries.get(&Self::key(q)).filter(|(_, g)| g.is_some() || !need_gradient).copied()
    }

    fn put(&self, q: &Configuration, value: CachedMargin) {
        let mut entries = self.entries.lock().unwrap();
        if entries.len() >= Self::CAPACITY {
            entries.clear();
        }
        entries.insert(Self::key(q), value);
    }
}

/// Surrogate reachability margin; depends only on the base block of `q_t`.
#[derive(Debug, Clone)]
pub struct Margin {
    pub net: Arc<MlpModel>,
    pub model: Arc<KinematicModel>,
    pub feet_world: Vec<Vector3<f64>>,
    pub usage: MarginUse,
    pub cache: Arc<MarginCache>,
}

impl Margin {
    fn margin_and_gradient(&self, q: &Configuration) -> Result<(f64, Vector6<f64>), SolverError> {
        if let Some((m, Some(g))) = self.cache.get(q, true) {
            return Ok((m, g));
        }
        let (m, g) = margin_and_gradient_wrt_config(&self.net, &self.model, q, &self.feet_world)?;
        self.cache.put(q, (m, Some(g)));
        Ok((m, g))
    }

    fn margin(&self, q: &Configuration) -> Result<f64, SolverError> {
        if let Some((m, _)) = self.cache.get(q, false) {
            return Ok(m);
        }
        let m = self.net.margin(q, &self.feet_world)?;
        self.cache.put(q, (m, None));
        Ok(m)
    }
}

impl Feature for Margin {
    fn name(&self) -> &str {
        match self.usage {
            MarginUse::Cost { .. } => "margin_cost",
            MarginUse::Floor { .. } => "margin_floor",
        }
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let q = Configuration::from_slice(w[0].as_slice());
        let (m, g) = self.margin_and_gradient(&q)?;
        Ok(margin_residual(self.usage, m, &g, q.dim()))
    }
    fn value(&self, w: &[DVector<f64>]) -> Result<DVector<f64>, SolverError> {
        let m = self.margin(&Configuration::from_slice(w[0].as_slice()))?;
        Ok(DVector::from_element(1, self.usage.level() - m))
    }
}

/// Residual `c - m̂(q)` with `c` = ε* or ε_lower, and Jacobian `-∂m̂/∂q` (arm columns zero).
pub fn margin_feature(
    q: &Configuration,
    net: &MlpModel,
    model: &KinematicModel,
    feet_world: &[Vector3<f64>],
    usage: MarginUse,
) -> Result<Residual, SolverError> {
    let (m, g) = margin_and_gradient_wrt_config(net, model, q, feet_world)?;
    Ok(margin_residual(usage, m, &g, q.dim()))
}

fn margin_residual(usage: MarginUse, m: f64, g: &Vector6<f64>, dim: usize) -> Residual {
    let mut j = DMatrix::zeros(1, dim);
    for k in 0..6 {
        j[(0, k)] = -g[k];
    }
    (DVector::from_element(1, usage.level() - m), j)
}
