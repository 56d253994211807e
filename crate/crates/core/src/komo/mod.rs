//! k-order Markov path optimization.
//!
//! The decision variables are `q_1..q_N` (`q_0` is fixed). Every term touches
//! at most `k + 1` consecutive slices, so the Gauss-Newton system is banded
//! with bandwidth below `(k_max + 1) · dim(q)`. Equalities and inequalities
//! are handled by an augmented Lagrangian outer loop; inequalities use a
//! squared-hinge penalty so the inner problem stays smooth.

mod banded;
mod build;
pub mod features;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use banded::{BandedCholesky, BandedMatrix, OutOfBand};
pub use build::{build_problem, obstacles, ProblemWeights};
pub use features::{margin_feature, Feature, MarginUse};

use crate::collision::CollisionError;
use crate::kinemodel::{Configuration, KinematicsError};
use crate::surrogate::SurrogateError;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("term `{term}` produced a non-finite value at slice {slice}")]
    NonFinite { term: String, slice: usize },
    #[error("term `{term}` at slice {slice} writes outside the band ({row}, {col})")]
    BandViolation { term: String, slice: usize, row: usize, col: usize },
    #[error("term `{term}` returned a {rows}×{cols} Jacobian, expected {expected_rows}×{expected_cols}")]
    JacobianShape { term: String, rows: usize, cols: usize, expected_rows: usize, expected_cols: usize },
    #[error("term `{term}` has invalid slice {slice} (order {order}, N = {n})")]
    InvalidSlice { term: String, slice: usize, order: usize, n: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Cost,
    Eq,
    Ineq,
}

#[derive(Debug, Clone)]
pub struct FeatureTerm {
    pub kind: TermKind,
    pub feature: Arc<dyn Feature>,
    pub slices: Vec<usize>,
    /// Cost weight; ignored for constraints.
    pub weight: f64,
}

impl FeatureTerm {
    pub fn cost(feature: Arc<dyn Feature>, slices: Vec<usize>, weight: f64) -> Self {
        Self { kind: TermKind::Cost, feature, slices, weight }
    }

    pub fn eq(feature: Arc<dyn Feature>, slices: Vec<usize>) -> Self {
        Self { kind: TermKind::Eq, feature, slices, weight: 1.0 }
    }

    pub fn ineq(feature: Arc<dyn Feature>, slices: Vec<usize>) -> Self {
        Self { kind: TermKind::Ineq, feature, slices, weight: 1.0 }
    }

    pub fn name(&self) -> &str {
        self.feature.name()
    }
}

/// Terms over a trajectory `q_0..q_N` of configurations of dimension `dim`.
#[derive(Debug, Clone)]
pub struct PathProblem {
    pub dim: usize,
    pub n_slices: usize,
    pub terms: Vec<FeatureTerm>,
}

impl PathProblem {
    pub fn k_max(&self) -> usize {
        self.terms.iter().map(|t| t.feature.order()).max().unwrap_or(0)
    }

    /// Lower bandwidth of the Gauss-Newton matrix over `q_1..q_N`.
    pub fn bandwidth(&self) -> usize {
        (self.k_max() + 1) * self.dim - 1
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.n_slices < 1 {
            return Err(SolverError::InvalidProblem("need at least one free slice".into()));
        }
        for t in &self.terms {
            let k = t.feature.order();
            if k > 2 {
                return Err(SolverError::InvalidProblem(format!("term `{}` has order {k} > 2", t.name())));
            }
            if !(t.weight > 0.0) {
                return Err(SolverError::InvalidProblem(format!("term `{}` has non-positive weight", t.name())));
            }
            for &s in &t.slices {
                if s < k.max(1) || s > self.n_slices {
                    return Err(SolverError::InvalidSlice { term: t.name().to_string(), slice: s, order: k, n: self.n_slices });
                }
            }
        }
        Ok(())
    }

    /// Total number of slices covered by terms named `name`.
    pub fn count_slices(&self, name: &str) -> usize {
        self.terms.iter().filter(|t| t.name() == name).map(|t| t.slices.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub configs: Vec<Configuration>,
}

impl Trajectory {
    /// `q_0` held at every slice.
    pub fn constant(q0: &Configuration, n: usize) -> Self {
        Self { configs: vec![q0.clone(); n + 1] }
    }

    /// Number of steps `N`.
    pub fn n(&self) -> usize {
        self.configs.len() - 1
    }

    fn vectors(&self) -> Vec<DVector<f64>> {
        self.configs.iter().map(Configuration::to_vector).collect()
    }

    fn from_vectors(v: &[DVector<f64>]) -> Self {
        Self { configs: v.iter().map(|x| Configuration::from_slice(x.as_slice())).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    pub max_outer: usize,
    pub max_inner: usize,
    pub mu_init: f64,
    pub mu_growth: f64,
    pub mu_max: f64,
    /// Multipliers are clamped to `[-lambda_max, lambda_max]`.
    pub lambda_max: f64,
    pub armijo: f64,
    pub shrink: f64,
    pub max_line_search: usize,
    pub tol_step: f64,
    pub tol_con: f64,
    pub damping: f64,
    /// Extra damping as a fraction of the largest Hessian diagonal; keeps large-penalty systems factorable.
    pub relative_damping: f64,
    pub damping_growth: f64,
    pub max_damping: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_inner: 50,
            mu_init: 1.0,
            mu_growth: 5.0,
            mu_max: 1e7,
            lambda_max: 1e6,
            armijo: 0.01,
            shrink: 0.5,
            max_line_search: 30,
            tol_step: 1e-4,
            tol_con: 1e-4,
            damping: 1e-8,
            relative_damping: 1e-10,
            damping_growth: 10.0,
            max_damping: 1e6,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive =
            [self.mu_init, self.mu_max, self.lambda_max, self.armijo, self.shrink, self.tol_step, self.tol_con, self.damping, self.max_damping];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(self.relative_damping >= 0.0)
            || self.max_outer == 0
            || self.max_inner == 0
            || self.max_line_search == 0
        {
            return Err(SolverError::InvalidProblem("solver parameters must be positive".into()));
        }
        if !(self.mu_growth > 1.0) || !(self.damping_growth > 1.0) || !(self.shrink < 1.0) || !(self.armijo < 1.0) {
            return Err(SolverError::InvalidProblem("growth factors must exceed 1; shrink and armijo must be below 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Σ w‖r‖² over cost terms.
    pub cost: f64,
    pub max_eq_violation: f64,
    pub max_ineq_violation: f64,
    pub lambda_eq_norm: f64,
    pub lambda_ineq_norm: f64,
    pub final_mu: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub systems_assembled: usize,
    pub bandwidth: usize,
    pub converged: bool,
    pub flags: Vec<String>,
    /// Largest violation per constraint term name.
    pub term_violations: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    /// `(outer iteration, merit)` after every accepted inner step.
    #[serde(skip)]
    pub merit_trace: Vec<(usize, f64)>,
}

/// Multipliers per term and slice, plus the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AlState {
    pub mu: f64,
    pub lambda: Vec<Vec<DVector<f64>>>,
}

impl AlState {
    pub fn new(problem: &PathProblem, mu: f64) -> Self {
        let lambda = problem.terms.iter().map(|t| vec![DVector::zeros(t.feature.dim()); t.slices.len()]).collect();
        Self { mu, lambda }
    }
}

/// Residuals of every term at every slice.
type Evaluation = Vec<Vec<features::Residual>>;

fn window(traj: &[DVector<f64>], t: usize, k: usize) -> &[DVector<f64>] {
    &traj[t - k..=t]
}

fn evaluate(problem: &PathProblem, traj: &[DVector<f64>], with_jacobian: bool) -> Result<Evaluation, SolverError> {
    let n = problem.dim;
    problem
        .terms
        .iter()
        .map(|term| {
            let k = term.feature.order();
            term.slices
                .iter()
                .map(|&t| {
                    let (r, j) = if with_jacobian {
                        term.feature.eval(window(traj, t, k))?
                    } else {
                        (term.feature.value(window(traj, t, k))?, DMatrix::zeros(0, 0))
                    };
                    let bad = || SolverError::NonFinite { term: term.name().to_string(), slice: t };
                    if r.len() != term.feature.dim() || (with_jacobian && (j.nrows() != r.len() || j.ncols() != (k + 1) * n)) {
                        return Err(SolverError::JacobianShape {
                            term: term.name().to_string(),
                            rows: j.nrows(),
                            cols: j.ncols(),
                            expected_rows: term.feature.dim(),
                            expected_cols: (k + 1) * n,
                        });
                    }
                    if r.iter().any(|v| !v.is_finite()) || (with_jacobian && j.iter().any(|v| !v.is_finite())) {
                        return Err(bad());
                    }
                    Ok((r, j))
                })
                .collect()
        })
        .collect()
}

/// Merit contribution of one residual row, its derivative in `r`, and the Gauss-Newton curvature.
fn penalty(kind: TermKind, weight: f64, r: f64, lambda: f64, mu: f64) -> (f64, f64, f64) {
    match kind {
        TermKind::Cost => (weight * r * r, 2.0 * weight * r, 2.0 * weight),
        TermKind::Eq => (mu * r * r + lambda * r, 2.0 * mu * r + lambda, 2.0 * mu),
        TermKind::Ineq => {
            let s = r + lambda / (2.0 * mu);
            if s > 0.0 {
                (mu * s * s - lambda * lambda / (4.0 * mu), 2.0 * mu * s, 2.0 * mu)
            } else {
                (-lambda * lambda / (4.0 * mu), 0.0, 0.0)
            }
        }
    }
}

fn merit(problem: &PathProblem, eval: &Evaluation, al: &AlState) -> f64 {
    let mut total = 0.0;
    for (ti, term) in problem.terms.iter().enumerate() {
        for (si, (r, _)) in eval[ti].iter().enumerate() {
            for (i, ri) in r.iter().enumerate() {
                total += penalty(term.kind, term.weight, *ri, al.lambda[ti][si][i], al.mu).0;
            }
        }
    }
    total
}

/// Gauss-Newton matrix and gradient of the augmented Lagrangian over `q_1..q_N`.
pub fn assemble_gn_system(problem: &PathProblem, traj: &Trajectory, al: &AlState) -> Result<(BandedMatrix, DVector<f64>, f64), SolverError> {
    let x = traj.vectors();
    let eval = evaluate(problem, &x, true)?;
    assemble(problem, &eval, al)
}

fn assemble(problem: &PathProblem, eval: &Evaluation, al: &AlState) -> Result<(BandedMatrix, DVector<f64>, f64), SolverError> {
    let n = problem.dim;
    let nvar = n * problem.n_slices;
    let mut h = BandedMatrix::zeros(nvar, problem.bandwidth());
    let mut g = DVector::zeros(nvar);
    for (ti, term) in problem.terms.iter().enumerate() {
        let k = term.feature.order();
        for (si, &t) in term.slices.iter().enumerate() {
            let (r, j) = &eval[ti][si];
            let lambda = &al.lambda[ti][si];
            // Window column c maps to slice t - k + c / n; slice 0 is fixed.
            let first_col = if t == k { n } else { 0 };
            let var = |c: usize| (t - k) * n + c - n;
            for row in 0..r.len() {
                let (_, dr, curv) = penalty(term.kind, term.weight, r[row], lambda[row], al.mu);
                if dr == 0.0 && curv == 0.0 {
                    continue;
                }
                let jr = j.row(row);
                // Only the lower triangle is visited; `add` stores the symmetric pair once.
                for a in first_col..j.ncols() {
                    let ja = jr[a];
                    if ja == 0.0 {
                        continue;
                    }
                    g[var(a)] += dr * ja;
                    for b in first_col..=a {
                        let jb = jr[b];
                        if jb == 0.0 {
                            continue;
                        }
                        h.add(var(a), var(b), curv * ja * jb).map_err(|e| SolverError::BandViolation {
                            term: term.name().to_string(),
                            slice: t,
                            row: e.row,
                            col: e.col,
                        })?;
                    }
                }
            }
        }
    }
    let m = merit(problem, eval, al);
    Ok((h, g, m))
}

fn violations(problem: &PathProblem, eval: &Evaluation) -> (f64, f64, f64) {
    let (mut cost, mut eq, mut ineq) = (0.0, 0.0f64, 0.0f64);
    for (ti, term) in problem.terms.iter().enumerate() {
        for (r, _) in &eval[ti] {
            match term.kind {
                TermKind::Cost => cost += term.weight * r.norm_squared(),
                TermKind::Eq => eq = eq.max(r.amax()),
                TermKind::Ineq => ineq = ineq.max(r.max().max(0.0)),
            }
        }
    }
    (cost, eq, ineq)
}

fn add_step(x: &[DVector<f64>], step: &DVector<f64>, alpha: f64, n: usize) -> Vec<DVector<f64>> {
    let mut out = x.to_vec();
    for (t, q) in out.iter_mut().enumerate().skip(1) {
        *q += step.rows((t - 1) * n, n) * alpha;
    }
    out
}

/// Augmented-Lagrangian Gauss-Newton solve starting from `init`.
pub fn solve(init: &Trajectory, problem: &PathProblem, params: &SolverParams) -> Result<(Trajectory, KktReport), SolverError> {
    let start = Instant::now();
    problem.validate()?;
    params.validate()?;
    if init.n() != problem.n_slices || init.configs.iter().any(|c| c.dim() != problem.dim) {
        return Err(SolverError::InvalidProblem(format!(
            "initial trajectory has {} steps of dimension {}, problem expects {} of {}",
            init.n(),
            init.configs[0].dim(),
            problem.n_slices,
            problem.dim
        )));
    }
    let n = problem.dim;
    let mut x = init.vectors();
    let mut al = AlState::new(problem, params.mu_init);
    let mut report = KktReport {
        cost: 0.0,
        max_eq_violation: 0.0,
        max_ineq_violation: 0.0,
        lambda_eq_norm: 0.0,
        lambda_ineq_norm: 0.0,
        final_mu: al.mu,
        outer_iterations: 0,
        inner_iterations: 0,
        systems_assembled: 0,
        bandwidth: problem.bandwidth(),
        converged: false,
        flags: Vec::new(),
        term_violations: BTreeMap::new(),
        wall_time_s: 0.0,
        merit_trace: Vec::new(),
    };
    let flag = |report: &mut KktReport, f: &str| {
        if !report.flags.iter().any(|x| x == f) {
            report.flags.push(f.to_string());
        }
    };

    let mut eval = evaluate(problem, &x, true)?;
    let mut prev_violation = f64::INFINITY;
    for outer in 0..params.max_outer {
        report.outer_iterations = outer + 1;
        let mut damping = params.damping;
        let mut last_step = f64::INFINITY;
        // Backtracking restarts from twice the last accepted step length.
        let mut alpha_start: f64 = 1.0;
        for _ in 0..params.max_inner {
            let (h, grad, m0) = assemble(problem, &eval, &al)?;
            report.systems_assembled += 1;
            let floor = params.relative_damping * (0..h.n()).map(|i| h.get(i, i)).fold(0.0, f64::max);
            let factor = loop {
                let mut hd = h.clone();
                hd.add_diagonal(damping + floor);
                if let Some(f) = hd.cholesky() {
                    break Some(f);
                }
                damping *= params.damping_growth;
                if damping > params.max_damping {
                    break None;
                }
            };
            let Some(factor) = factor else {
                flag(&mut report, "cholesky_failed");
                break;
            };
            let step = factor.solve(&(-&grad));
            let slope = grad.dot(&step);
            report.inner_iterations += 1;
            let small = step.amax() < params.tol_step;
            let mut alpha = if small { 1.0 } else { alpha_start };
            let mut accepted = None;
            let attempts = if small { 1 } else { params.max_line_search };
            for _ in 0..attempts {
                let trial = add_step(&x, &step, alpha, n);
                match evaluate(problem, &trial, false) {
                    Ok(e) => {
                        let m = merit(problem, &e, &al);
                        if m <= m0 + params.armijo * alpha * slope {
                            accepted = Some((trial, m));
                            break;
                        }
                    }
                    // Trial points may leave the model's domain (e.g. gimbal lock); shrink and retry.
                    Err(SolverError::Kinematics(_)) | Err(SolverError::Surrogate(SurrogateError::Kinematics(_))) => {}
                    Err(e) => return Err(e),
                }
                alpha *= params.shrink;
            }
            let Some((trial, m)) = accepted else {
                // A tiny step that cannot improve the merit means the inner problem is solved.
                if !small {
                    flag(&mut report, "line_search_failed");
                }
                last_step = 0.0;
                break;
            };
            x = trial;
            alpha_start = (2.0 * alpha).min(1.0);
            eval = evaluate(problem, &x, true)?;
            report.merit_trace.push((outer, m));
            last_step = alpha * step.amax();
            damping = (damping / params.damping_growth).max(params.damping);
            if last_step < params.tol_step {
                break;
            }
        }
        if last_step >= params.tol_step {
            flag(&mut report, "inner_iteration_cap");
        }

        let (_, eq, ineq) = violations(problem, &eval);
        if eq < params.tol_con && ineq < params.tol_con && last_step < params.tol_step {
            report.converged = true;
            break;
        }
        for (ti, term) in problem.terms.iter().enumerate() {
            for (si, (r, _)) in eval[ti].iter().enumerate() {
                let lambda = &mut al.lambda[ti][si];
                match term.kind {
                    TermKind::Cost => {}
                    TermKind::Eq => {
                        for i in 0..r.len() {
                            lambda[i] = (lambda[i] + 2.0 * al.mu * r[i]).clamp(-params.lambda_max, params.lambda_max);
                        }
                    }
                    TermKind::Ineq => {
                        for i in 0..r.len() {
                            lambda[i] = (lambda[i] + 2.0 * al.mu * r[i]).clamp(0.0, params.lambda_max);
                        }
                    }
                }
            }
        }
        // Raise the penalty only when the multipliers alone are not shrinking the violation.
        let violation = eq.max(ineq);
        if violation > 0.25 * prev_violation {
            al.mu = (al.mu * params.mu_growth).min(params.mu_max);
        }
        prev_violation = violation;
    }
    if !report.converged {
        flag(&mut report, "outer_iteration_cap");
    }

    let (cost, eq, ineq) = violations(problem, &eval);
    report.cost = cost;
    report.max_eq_violation = eq;
    report.max_ineq_violation = ineq;
    report.final_mu = al.mu;
    let norm = |kind: TermKind| -> f64 {
        problem.terms.iter().zip(&al.lambda).filter(|(t, _)| t.kind == kind).flat_map(|(_, l)| l.iter()).map(|l| l.norm_squared()).sum::<f64>().sqrt()
    };
    for (ti, term) in problem.terms.iter().enumerate() {
        let worst = match term.kind {
            TermKind::Cost => continue,
            TermKind::Eq => eval[ti].iter().map(|(r, _)| r.amax()).fold(0.0, f64::max),
            TermKind::Ineq => eval[ti].iter().map(|(r, _)| r.max().max(0.0)).fold(0.0, f64::max),
        };
        let entry = report.term_violations.entry(term.name().to_string()).or_insert(0.0);
        *entry = entry.max(worst);
    }
    report.lambda_eq_norm = norm(TermKind::Eq);
    report.lambda_ineq_norm = norm(TermKind::Ineq);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((Trajectory::from_vectors(&x), report))
}
