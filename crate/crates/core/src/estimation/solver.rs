//! Damped Gauss-Newton (Levenberg-Marquardt) driver shared by every optimizer.

use nalgebra::{DMatrix, DVector};

use super::SolverConfig;

/// Below this robustified cost the problem is treated as solved exactly.
pub const COST_FLOOR: f64 = 1e-24;
const STEP_FLOOR: f64 = 1e-15;

/// A nonlinear least-squares problem over some manifold-valued state.
pub trait LeastSquares {
    type State: Clone;
    type System;

    /// Robustified cost `1/2 sum rho(|e|^2)`, or `INFINITY` if the state is
    /// outside the valid domain.
    fn cost(&self, state: &Self::State) -> f64;

    /// Normal equations at `state`.
    fn linearize(&self, state: &Self::State) -> Self::System;

    /// Solves `(H + lambda * diag(H)) step = -g`.
    fn solve(&self, system: &Self::System, lambda: f64) -> Option<DVector<f64>>;

    fn retract(&self, state: &Self::State, step: &DVector<f64>) -> Self::State;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    /// Cost after the iteration (unchanged when the step was rejected).
    pub cost: f64,
    /// Damping used for the attempted step.
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome<S> {
    pub state: S,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationLog>,
}

pub fn levenberg_marquardt<P: LeastSquares>(
    problem: &P,
    initial: P::State,
    cfg: &SolverConfig,
) -> SolveOutcome<P::State> {
    levenberg_marquardt_observed(problem, initial, cfg, |_, _| {})
}

/// Same as [`levenberg_marquardt`], calling `observe` after every attempted
/// step with the log entry and the (possibly unchanged) current state.
pub fn levenberg_marquardt_observed<P: LeastSquares>(
    problem: &P,
    initial: P::State,
    cfg: &SolverConfig,
    mut observe: impl FnMut(&IterationLog, &P::State),
) -> SolveOutcome<P::State> {
    let mut state = initial;
    let initial_cost = problem.cost(&state);
    let mut cost = initial_cost;
    let mut lambda = cfg.damping_init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut system: Option<P::System> = None;

    for _ in 0..cfg.max_iterations {
        if cost <= COST_FLOOR {
            converged = true;
            break;
        }
        let sys = system.get_or_insert_with(|| problem.linearize(&state));
        let Some(step) = problem.solve(sys, lambda) else {
            history.push(IterationLog {
                cost,
                lambda,
                accepted: false,
            });
            observe(history.last().unwrap(), &state);
            lambda *= cfg.damping_scale;
            continue;
        };
        let candidate = problem.retract(&state, &step);
        let new_cost = problem.cost(&candidate);
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost;
            history.push(IterationLog {
                cost: new_cost,
                lambda,
                accepted: true,
            });
            state = candidate;
            cost = new_cost;
            lambda /= cfg.damping_scale;
            system = None;
            observe(history.last().unwrap(), &state);
            if decrease < cfg.convergence_tol || step.norm() < STEP_FLOOR {
                converged = true;
                break;
            }
        } else {
            history.push(IterationLog {
                cost,
                lambda,
                accepted: false,
            });
            observe(history.last().unwrap(), &state);
            lambda *= cfg.damping_scale;
            if step.norm() < STEP_FLOOR {
                converged = true;
                break;
            }
        }
    }
    if cost <= COST_FLOOR {
        converged = true;
    }
    SolveOutcome {
        state,
        initial_cost,
        cost,
        iterations: history.len(),
        converged,
        history,
    }
}

/// Dense damped solve used by the small problems.
pub fn solve_dense(h: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = h.clone();
    damp_diagonal(&mut a, lambda);
    let rhs = -g;
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(&rhs));
    }
    a.lu().solve(&rhs)
}

/// Adds `lambda * max(diag, eps)` to the diagonal.
pub fn damp_diagonal(a: &mut DMatrix<f64>, lambda: f64) {
    for i in 0..a.nrows() {
        let d = a[(i, i)].max(1e-12);
        a[(i, i)] += lambda * d;
    }
}
