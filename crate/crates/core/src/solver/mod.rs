//! Damped nonlinear least squares over pose and point variables.
//!
//! Pose variables are updated on the left (`X <- exp(xi) X`, `xi = [omega; v]`);
//! point variables additively. Residual blocks may carry a Huber kernel, which
//! is applied by iteratively reweighting the normal equations.

mod factors;
mod ransac;

pub use factors::{
    CameraReprojection, FixedPointReprojection, MotionSmoothness, ObjectReprojection, PointMotion,
    StereoReprojection,
};
pub use ransac::{ransac_pnp, PnpParams, PnpResult};

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("problem has no residual blocks")]
    EmptyProblem,
    #[error("residual block references unknown variable {0}")]
    UnknownVariable(usize),
    #[error("residual block {block} reports {found} Jacobians for {expected} variables")]
    JacobianMismatch {
        block: usize,
        expected: usize,
        found: usize,
    },
    #[error("residual block {0} cannot be evaluated at the initial state")]
    InvalidInitialState(usize),
    #[error("normal equations are not positive definite (lambda {0:e})")]
    NumericalFailure(f64),
    #[error("{0} correspondences given, at least {1} required")]
    TooFewCorrespondences(usize, usize),
    #[error("no consensus: best hypothesis has {0} inliers")]
    NoConsensus(usize),
}

pub type VarId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variable {
    Pose(Pose),
    Point(Vector3<f64>),
}

impl Variable {
    pub fn dof(&self) -> usize {
        match self {
            Variable::Pose(_) => 6,
            Variable::Point(_) => 3,
        }
    }

    fn retract(&self, delta: &[f64]) -> Variable {
        match self {
            Variable::Pose(p) => {
                let d = nalgebra::Vector6::from_column_slice(delta);
                Variable::Pose(p.retract(&d))
            }
            Variable::Point(p) => Variable::Point(p + Vector3::from_column_slice(delta)),
        }
    }

    pub fn as_pose(&self) -> &Pose {
        match self {
            Variable::Pose(p) => p,
            Variable::Point(_) => panic!("variable is a point, not a pose"),
        }
    }

    pub fn as_point(&self) -> &Vector3<f64> {
        match self {
            Variable::Point(p) => p,
            Variable::Pose(_) => panic!("variable is a pose, not a point"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    Huber(f64),
}

impl RobustKernel {
    pub fn from_delta(delta: Option<f64>) -> Self {
        delta.map_or(RobustKernel::None, RobustKernel::Huber)
    }

    /// Robustified cost of a residual with the given norm.
    pub fn cost(&self, norm: f64) -> f64 {
        match *self {
            RobustKernel::None => norm * norm,
            RobustKernel::Huber(delta) if norm > delta => 2.0 * delta * norm - delta * delta,
            RobustKernel::Huber(_) => norm * norm,
        }
    }

    pub fn weight(&self, norm: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::Huber(delta) => robust_weight(norm, delta),
        }
    }
}

/// Huber IRLS weight: 1 inside the threshold, `delta / r` outside.
pub fn robust_weight(residual_norm: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    if residual_norm <= delta {
        1.0
    } else {
        delta / residual_norm
    }
}

/// A residual over a fixed list of variables.
pub trait ResidualBlock: Send + Sync {
    fn variables(&self) -> &[VarId];

    fn dim(&self) -> usize;

    fn kernel(&self) -> RobustKernel {
        RobustKernel::None
    }

    /// Residual at the given variable values (same order as `variables`);
    /// `None` when the block is undefined there (e.g. a point behind the camera).
    fn residual(&self, values: &[&Variable]) -> Option<DVector<f64>>;

    /// Residual plus one `dim x dof` Jacobian per variable.
    fn linearize(&self, values: &[&Variable]) -> Option<(DVector<f64>, Vec<DMatrix<f64>>)>;
}

struct VariableSlot {
    value: Variable,
    fixed: bool,
}

#[derive(Default)]
pub struct LeastSquaresProblem {
    variables: Vec<VariableSlot>,
    blocks: Vec<Box<dyn ResidualBlock>>,
}

impl LeastSquaresProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> VarId {
        self.variables.push(VariableSlot {
            value: Variable::Pose(pose),
            fixed,
        });
        self.variables.len() - 1
    }

    pub fn add_point(&mut self, point: Vector3<f64>, fixed: bool) -> VarId {
        self.variables.push(VariableSlot {
            value: Variable::Point(point),
            fixed,
        });
        self.variables.len() - 1
    }

    pub fn add_residual(&mut self, block: Box<dyn ResidualBlock>) -> Result<usize, SolverError> {
        for &v in block.variables() {
            if v >= self.variables.len() {
                return Err(SolverError::UnknownVariable(v));
            }
        }
        self.blocks.push(block);
        Ok(self.blocks.len() - 1)
    }

    pub fn set_fixed(&mut self, id: VarId, fixed: bool) {
        self.variables[id].fixed = fixed;
    }

    pub fn is_fixed(&self, id: VarId) -> bool {
        self.variables[id].fixed
    }

    pub fn variable(&self, id: VarId) -> &Variable {
        &self.variables[id].value
    }

    pub fn pose(&self, id: VarId) -> Pose {
        *self.variables[id].value.as_pose()
    }

    pub fn point(&self, id: VarId) -> Vector3<f64> {
        *self.variables[id].value.as_point()
    }

    pub fn set_pose(&mut self, id: VarId, pose: Pose) {
        self.variables[id].value = Variable::Pose(pose);
    }

    pub fn set_point(&mut self, id: VarId, point: Vector3<f64>) {
        self.variables[id].value = Variable::Point(point);
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Box<dyn ResidualBlock>] {
        &self.blocks
    }

    fn values_of<'a>(&self, state: &'a [Variable], block: &dyn ResidualBlock) -> Vec<&'a Variable> {
        block.variables().iter().map(|&v| &state[v]).collect()
    }

    fn state(&self) -> Vec<Variable> {
        self.variables.iter().map(|s| s.value).collect()
    }

    /// Robust cost of every block at `state`, `None` if any block is undefined.
    fn cost_at(&self, state: &[Variable]) -> Option<f64> {
        let mut total = 0.0;
        for b in &self.blocks {
            let r = b.residual(&self.values_of(state, b.as_ref()))?;
            total += b.kernel().cost(r.norm());
        }
        Some(total)
    }

    /// Current robust cost.
    pub fn cost(&self) -> Option<f64> {
        self.cost_at(&self.state())
    }

    /// Per-block residual norms at the current state.
    pub fn residual_norms(&self) -> Vec<Option<f64>> {
        let state = self.state();
        self.blocks
            .iter()
            .map(|b| b.residual(&self.values_of(&state, b.as_ref())).map(|r| r.norm()))
            .collect()
    }
}

/// How the damped normal equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolverKind {
    /// One dense Cholesky over every free variable.
    Dense,
    /// Eliminate point blocks first (Schur complement), solve the reduced pose system.
    SchurPoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
    pub linear_solver: LinearSolverKind,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            initial_lambda: 1e-4,
            linear_solver: LinearSolverKind::Dense,
        }
    }
}

impl LmConfig {
    pub fn from_params(params: &crate::dataio::LmParams) -> Self {
        Self {
            max_iterations: params.max_iterations,
            tolerance: params.tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostChange,
    Gradient,
    ZeroCost,
    MaxIterations,
    /// No step could reduce the cost before damping saturated.
    DampingSaturated,
    NoFreeVariables,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Linearizations performed.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

impl SolveReport {
    pub fn is_monotone(&self) -> bool {
        self.cost_trace.windows(2).all(|w| w[1] <= w[0])
    }
}

const MAX_LAMBDA: f64 = 1e8;
const MIN_LAMBDA: f64 = 1e-12;

/// Layout of the free variables inside the linear system.
pub(crate) struct Layout {
    /// Offset of each variable in the system, `None` when fixed.
    pub offsets: Vec<Option<usize>>,
    pub size: usize,
}

impl Layout {
    fn new(problem: &LeastSquaresProblem) -> Self {
        let mut offsets = Vec::with_capacity(problem.variables.len());
        let mut size = 0;
        for slot in &problem.variables {
            if slot.fixed {
                offsets.push(None);
            } else {
                offsets.push(Some(size));
                size += slot.value.dof();
            }
        }
        Self { offsets, size }
    }
}

/// Weighted Jacobians of one block, ready to be accumulated.
pub(crate) struct LinearizedBlock {
    pub vars: Vec<VarId>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub residual: DVector<f64>,
    pub weight: f64,
}

fn linearize_all(
    problem: &LeastSquaresProblem,
    state: &[Variable],
) -> Result<Vec<LinearizedBlock>, SolverError> {
    problem
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let values = problem.values_of(state, b.as_ref());
            let (residual, jacobians) = b.linearize(&values).ok_or(SolverError::InvalidInitialState(i))?;
            if jacobians.len() != b.variables().len() {
                return Err(SolverError::JacobianMismatch {
                    block: i,
                    expected: b.variables().len(),
                    found: jacobians.len(),
                });
            }
            let weight = b.kernel().weight(residual.norm());
            Ok(LinearizedBlock {
                vars: b.variables().to_vec(),
                jacobians,
                residual,
                weight,
            })
        })
        .collect()
}

fn dense_system(layout: &Layout, blocks: &[LinearizedBlock]) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.size;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for b in blocks {
        for (a, ja) in b.vars.iter().zip(&b.jacobians) {
            let Some(oa) = layout.offsets[*a] else { continue };
            let jtr = ja.transpose() * &b.residual * b.weight;
            g.rows_mut(oa, ja.ncols()).add_assign(&jtr);
            for (c, jc) in b.vars.iter().zip(&b.jacobians) {
                let Some(oc) = layout.offsets[*c] else { continue };
                let block = ja.transpose() * jc * b.weight;
                h.view_mut((oa, oc), (ja.ncols(), jc.ncols())).add_assign(&block);
            }
        }
    }
    (h, g)
}

/// Damping added to a diagonal entry: multiplicative (Marquardt) with a floor.
#[inline]
pub(crate) fn damped(diag: f64, lambda: f64) -> f64 {
    diag + lambda * diag.max(1e-6)
}

fn solve_dense(h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] = damped(h[(i, i)], lambda);
    }
    let chol = a.cholesky()?;
    let step = chol.solve(&(-g));
    step.iter().all(|x| x.is_finite()).then_some(step)
}

fn apply_step(problem: &LeastSquaresProblem, layout: &Layout, state: &[Variable], step: &DVector<f64>) -> Vec<Variable> {
    state
        .iter()
        .zip(&layout.offsets)
        .zip(&problem.variables)
        .map(|((value, off), _)| match off {
            Some(o) => value.retract(&step.as_slice()[*o..*o + value.dof()]),
            None => *value,
        })
        .collect()
}

/// Levenberg-Marquardt with multiplicative damping.
///
/// Accepted steps never increase the robust cost; the updated variables are
/// written back into `problem`.
pub fn lm_minimize(problem: &mut LeastSquaresProblem, config: &LmConfig) -> Result<SolveReport, SolverError> {
    if problem.blocks.is_empty() {
        return Err(SolverError::EmptyProblem);
    }
    let layout = Layout::new(problem);
    let mut state = problem.state();
    let mut cost = match problem.cost_at(&state) {
        Some(c) => c,
        None => {
            let bad = problem
                .blocks
                .iter()
                .position(|b| b.residual(&problem.values_of(&state, b.as_ref())).is_none())
                .unwrap_or(0);
            return Err(SolverError::InvalidInitialState(bad));
        }
    };
    let mut report = SolveReport {
        iterations: 0,
        initial_cost: cost,
        final_cost: cost,
        converged: false,
        termination: Termination::MaxIterations,
        cost_trace: vec![cost],
    };
    if layout.size == 0 {
        report.converged = true;
        report.termination = Termination::NoFreeVariables;
        return Ok(report);
    }

    let mut lambda = config.initial_lambda;
    'outer: while report.iterations < config.max_iterations {
        if cost == 0.0 {
            report.converged = true;
            report.termination = Termination::ZeroCost;
            break;
        }
        let blocks = linearize_all(problem, &state)?;
        let system = match config.linear_solver {
            LinearSolverKind::Dense => {
                let (h, g) = dense_system(&layout, &blocks);
                System::Dense(h, g)
            }
            LinearSolverKind::SchurPoints => System::Schur(crate::backend::schur::SchurSystem::build(
                problem, &layout, &blocks,
            )),
        };
        if system.gradient_norm() < config.gradient_tolerance {
            report.converged = true;
            report.termination = Termination::Gradient;
            break;
        }
        report.iterations += 1;
        loop {
            let step = system.solve(lambda);
            let Some(step) = step else {
                if lambda >= MAX_LAMBDA {
                    return Err(SolverError::NumericalFailure(lambda));
                }
                lambda *= 10.0;
                continue;
            };
            let candidate = apply_step(problem, &layout, &state, &step);
            match problem.cost_at(&candidate) {
                Some(new_cost) if new_cost < cost => {
                    let relative = (cost - new_cost) / cost;
                    state = candidate;
                    cost = new_cost;
                    report.cost_trace.push(cost);
                    lambda = (lambda / 10.0).max(MIN_LAMBDA);
                    if relative < config.tolerance {
                        report.converged = true;
                        report.termination = Termination::CostChange;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    if lambda >= MAX_LAMBDA {
                        report.converged = true;
                        report.termination = Termination::DampingSaturated;
                        break 'outer;
                    }
                    lambda *= 10.0;
                }
            }
        }
    }
    report.final_cost = cost;
    for (slot, value) in problem.variables.iter_mut().zip(state) {
        slot.value = value;
    }
    Ok(report)
}

enum System {
    Dense(DMatrix<f64>, DVector<f64>),
    Schur(crate::backend::schur::SchurSystem),
}

impl System {
    fn gradient_norm(&self) -> f64 {
        match self {
            System::Dense(_, g) => g.amax(),
            System::Schur(s) => s.gradient_norm(),
        }
    }

    fn solve(&self, lambda: f64) -> Option<DVector<f64>> {
        match self {
            System::Dense(h, g) => solve_dense(h, g, lambda),
            System::Schur(s) => s.solve(lambda),
        }
    }
}
