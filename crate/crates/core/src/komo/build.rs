use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::features::{Collisions, JointLimits, LinkPosition, Margin, MarginCache, MarginUse, PositionBias, Smoothness};
use super::{FeatureTerm, PathProblem, SolverError, Trajectory};
use crate::collision::{collision_pairs, ConvexShape};
use crate::kinemodel::{AttachedObject, KinematicModel};
use crate::scenario::{Mode, Scenario};
use crate::surrogate::MlpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemWeights {
    pub base_bias: f64,
    /// Defaults to a tenth of the base weight.
    pub arm_bias: f64,
    pub smoothness: f64,
    pub margin: f64,
}

impl Default for ProblemWeights {
    fn default() -> Self {
        Self { base_bias: 1.0, arm_bias: 0.1, smoothness: 10.0, margin: 5.0 }
    }
}

impl ProblemWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.base_bias, self.arm_bias, self.smoothness, self.margin].iter().any(|w| !(*w > 0.0)) {
            return Err("weights must be positive".into());
        }
        Ok(())
    }
}

/// Set of objects held at each slice `0..=N`.
fn held_objects(scenario: &Scenario) -> Vec<BTreeSet<String>> {
    let n = scenario.file.planner.n_slices;
    let mut held = vec![BTreeSet::new(); n + 1];
    for t in &scenario.file.targets {
        if let Some(obj) = &t.grasp {
            let release = scenario.file.targets.iter().filter(|r| r.release.as_deref() == Some(obj.as_str())).map(|r| r.slice).min().unwrap_or(n + 1);
            for set in held.iter_mut().take(release.min(n + 1)).skip(t.slice + 1) {
                set.insert(obj.clone());
            }
        }
    }
    held
}

fn model_holding(kin: &KinematicModel, scenario: &Scenario, held: &BTreeSet<String>) -> Result<KinematicModel, SolverError> {
    let mut model = kin.clone();
    for name in held {
        let obj = scenario.file.objects.iter().find(|o| &o.name == name).expect("validated object name");
        let target = scenario.file.targets.iter().find(|t| t.grasp.as_deref() == Some(name)).expect("validated grasp");
        let link = kin.link_by_name(&target.link)?;
        let attached = AttachedObject { name: name.clone(), primitive: obj.shape.to_primitive(), swept_radius: obj.swept_radius };
        model = model.attach_object(link, target.grasp_pose.to_isometry(), &attached)?;
    }
    Ok(model)
}

pub fn obstacles(scenario: &Scenario) -> Vec<ConvexShape> {
    scenario.file.obstacles.iter().map(|o| ConvexShape::new(o.shape.to_primitive(), o.swept_radius, o.pose.to_isometry())).collect()
}

/// Assemble the path problem for the scenario's mode; returns the constant-hold initial guess.
///
/// The margin terms need a surrogate and are only added in [`Mode::Rakomo`].
pub fn build_problem(scenario: &Scenario, kin: &KinematicModel, surrogate: Option<Arc<MlpModel>>) -> Result<(Trajectory, PathProblem), SolverError> {
    let f = &scenario.file;
    let n = f.planner.n_slices;
    let q0 = scenario.initial_configuration();
    kin.check_configuration(&q0)?;
    q0.check_pitch()?;
    let dim = kin.dim();
    let all: Vec<usize> = (1..=n).collect();
    let mut terms = Vec::new();

    let w = &f.weights;
    let mut bias = DVector::from_element(dim, w.arm_bias);
    bias.rows_mut(0, 6).fill(w.base_bias);
    terms.push(FeatureTerm::cost(Arc::new(PositionBias::new(q0.to_vector(), &bias)), all.clone(), 1.0));
    terms.push(FeatureTerm::cost(Arc::new(Smoothness { dim }), (2..=n).collect(), w.smoothness));

    if scenario.mode() == Mode::Rakomo {
        let net = surrogate.ok_or_else(|| SolverError::InvalidProblem("rakomo mode needs a surrogate model".into()))?;
        let model = Arc::new(kin.clone());
        let feet_world = scenario.feet_world();
        let cache = Arc::new(MarginCache::default());
        let margin = |usage| Margin { net: net.clone(), model: model.clone(), feet_world: feet_world.clone(), usage, cache: cache.clone() };
        terms.push(FeatureTerm::cost(Arc::new(margin(MarginUse::Cost { target: f.planner.eps_star })), all.clone(), w.margin));
        terms.push(FeatureTerm::ineq(Arc::new(margin(MarginUse::Floor { lower: f.planner.eps_lower })), all.clone()));
    }

    let base_model = Arc::new(kin.clone());
    for (i, t) in f.targets.iter().enumerate() {
        let feature = LinkPosition {
            label: format!("target_{i}"),
            model: base_model.clone(),
            link: kin.link_by_name(&t.link)?,
            target: Vector3::from(t.position),
        };
        terms.push(FeatureTerm::eq(Arc::new(feature), vec![t.slice]));
    }

    terms.push(FeatureTerm::ineq(Arc::new(JointLimits { lower: kin.arm_lower(), upper: kin.arm_upper() }), all.clone()));

    // One collision term per run of slices sharing the same held objects.
    let world = Arc::new(obstacles(scenario));
    let held = held_objects(scenario);
    let mut start = 1;
    while start <= n {
        let mut end = start;
        while end < n && held[end + 1] == held[start] {
            end += 1;
        }
        let model = model_holding(kin, scenario, &held[start])?;
        let pairs = collision_pairs(&model, world.len());
        if !pairs.is_empty() {
            let feature = Collisions { model: Arc::new(model), obstacles: world.clone(), pairs, margin: f.planner.collision_margin };
            terms.push(FeatureTerm::ineq(Arc::new(feature), (start..=end).collect()));
        }
        start = end + 1;
    }

    Ok((Trajectory::constant(&q0, n), PathProblem { dim, n_slices: n, terms }))
}
