use nalgebra::DVector;

use super::{signed_distance, CollisionError, ConvexShape, ProximityResult};
use crate::kinemodel::{Configuration, KinematicModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BodyRef {
    /// Index into `KinematicModel::bodies`.
    Robot(usize),
    /// Index into the obstacle list.
    Obstacle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CollisionPair {
    pub a: BodyRef,
    pub b: BodyRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub pair: CollisionPair,
    pub result: ProximityResult,
    /// d(distance)/dq, length `6 + n_a`.
    pub gradient: DVector<f64>,
}

/// Robot-robot pairs whose links are not excluded, then every robot-obstacle pair.
pub fn collision_pairs(model: &KinematicModel, n_obstacles: usize) -> Vec<CollisionPair> {
    let mut pairs = Vec::new();
    for (i, bi) in model.bodies.iter().enumerate() {
        for (j, bj) in model.bodies.iter().enumerate().skip(i + 1) {
            if !model.is_excluded(bi.link, bj.link) {
                pairs.push(CollisionPair { a: BodyRef::Robot(i), b: BodyRef::Robot(j) });
            }
        }
    }
    for i in 0..model.bodies.len() {
        for k in 0..n_obstacles {
            pairs.push(CollisionPair { a: BodyRef::Robot(i), b: BodyRef::Obstacle(k) });
        }
    }
    pairs
}

/// Signed distance of each pair and its gradient `nᵀ (J_b(w_b) - J_a(w_a))`.
pub fn pairwise_distances(
    model: &KinematicModel,
    q: &Configuration,
    obstacles: &[ConvexShape],
    pairs: &[CollisionPair],
) -> Result<Vec<PairDistance>, CollisionError> {
    let kin = model.forward(q)?;
    let shape = |r: BodyRef| -> Result<ConvexShape, CollisionError> {
        match r {
            BodyRef::Robot(i) => Ok(kin.body_shape(i)?),
            BodyRef::Obstacle(k) => Ok(obstacles[k].clone()),
        }
    };
    pairs
        .iter()
        .map(|pair| {
            let result = signed_distance(&shape(pair.a)?, &shape(pair.b)?)?;
            let mut gradient = DVector::zeros(model.dim());
            if let BodyRef::Robot(i) = pair.b {
                let jb = kin.point_jacobian(model.bodies[i].link, &result.witness_b);
                gradient += jb.transpose() * result.normal;
            }
            if let BodyRef::Robot(i) = pair.a {
                let ja = kin.point_jacobian(model.bodies[i].link, &result.witness_a);
                gradient -= ja.transpose() * result.normal;
            }
            Ok(PairDistance { pair: *pair, result, gradient })
        })
        .collect()
}
