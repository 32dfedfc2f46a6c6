//! Cross-module checks: the nonlinear solver against the linear evolution
//! and the Lagrangian geometry it is built on.

use cnslab_core::grid::{Grid, ScalarField, VectorField};
use cnslab_core::lagrangian::{neumann_bounds_check, GeometryNorms, TrajectoryStore};
use cnslab_core::lincns::{solve_lcns, LinCNSState, StateNorms, Strategy};
use cnslab_core::semigroup::Forcing;
use cnslab_core::solver::{picard_global, GlobalProblem, SolverConfig, ViscosityLaw};
use cnslab_core::Error;
use std::f64::consts::PI;

fn data(grid: Grid, amp: f64) -> (ScalarField, VectorField) {
    let a = ScalarField::from_fn(grid, |x| (PI * x[0]).cos() * (PI * x[1]).cos());
    let u = VectorField::from_fn(grid, |x, c| (PI * x[0]).sin() * (PI * x[1]).sin() * if c == 0 { 1.0 } else { 0.5 });
    let norms = StateNorms::new(&grid, 2.0).unwrap();
    let s = amp / (norms.density(&a.values, 0.0).unwrap() + norms.velocity(&u.data, 0.0).unwrap());
    (a.map(|v| v * s), u.scaled(s))
}

fn problem(amp: f64) -> GlobalProblem {
    let grid = Grid::cube(2, 10, 1.0).unwrap();
    let (a, u) = data(grid, amp);
    let cfg = SolverConfig {
        alpha: 1e-3,
        t_end: 0.5,
        steps: 20,
        viscosity: ViscosityLaw::constant(0.5, 0.0),
        c_weight: Some(0.0),
        ..SolverConfig::default()
    };
    GlobalProblem::new(a, u, cfg).unwrap()
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn tiny_data_follows_the_linearization() {
    let prob = problem(1e-5);
    let run = picard_global(&prob).unwrap();
    let traj = &run.rescaled;
    let x0 = LinCNSState::from_slice(prob.grid, &traj.states[0]).unwrap();
    let t_end = *traj.times.last().unwrap();
    let lin = solve_lcns(&prob.op, &x0, &Forcing::Zero, t_end, traj.states.len() - 1, Strategy::Duhamel).unwrap().trajectory;
    let scale = max_abs(traj.states.iter().flatten().copied());
    let diff = max_abs(traj.states.iter().flatten().zip(lin.states.iter().flatten()).map(|(p, q)| p - q));
    // Quadratic terms are O(amp) relative to the solution.
    assert!(diff <= 1e-3 * scale, "diff {diff:e} scale {scale:e}");
}

#[test]
fn global_velocity_satisfies_the_neumann_bounds() {
    let prob = problem(5e-4);
    let run = picard_global(&prob).unwrap();
    let n = prob.grid.len();
    let us: Vec<Vec<f64>> = run.rescaled.states.iter().map(|s| s[n..].to_vec()).collect();
    let store = TrajectoryStore::from_samples(prob.grid, &run.rescaled.times, &us).unwrap();
    let norms = GeometryNorms::new(&prob.grid, 2.0).unwrap();
    let t = *run.rescaled.times.last().unwrap();
    let r = neumann_bounds_check(&store, t, &norms, 0.1, 10.0).unwrap();
    assert!(r.passes && r.du_integral < 0.1, "{r:?}");
    assert!(run.report.invariants.density <= 1e-14);
}

#[test]
fn data_above_the_threshold_is_rejected() {
    let grid = Grid::cube(2, 8, 1.0).unwrap();
    let (a, u) = data(grid, 2e-3);
    let cfg = SolverConfig { alpha: 1e-3, ..SolverConfig::default() };
    assert!(matches!(GlobalProblem::new(a, u, cfg), Err(Error::Precondition(_))));
}
