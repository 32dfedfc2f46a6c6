//! Nonlinear fixed-point drivers in Lagrangian coordinates.
//!
//! The global map solves the linearized system with quadratic right-hand
//! sides built from the previous iterate; the local maps do the same for
//! the momentum equation alone, against the constant Lame operator (small
//! density variation) or against the frozen operator `L_{rho0}` (general
//! density). Time derivatives, flows and averages are taken at step
//! midpoints so the forcing matches the piecewise-constant convention of
//! the linear solvers.

use crate::besov::{BesovParams, DyadicFilterBank, ExtensionMode};
use crate::error::{arg, Error, Result};
use crate::grid::{self, Ghost, Grid, ScalarField, TensorField, VectorField};
use crate::lagrangian::{
    advance_flow, contract, du_integral, interpolate, inverse_map, smallness_monitor, tensor_apply, tensor_product,
    twisted_from_jacobian, Extension, FlowMap, GeometryNorms, TrajectoryStore, EPSILON_DEFAULT,
};
use crate::lame::{assemble_lame, heat_maxreg_solve, LameCoefficients};
use crate::lincns::{
    assemble_coupled_scaled, decay_measure, l2, solve_lcns, spectral_bound, Coupling, CoupledOperator, LinCNSState,
    StateNorms, Strategy,
};
use crate::semigroup::{solve_cauchy, Forcing, LinearOperator, Trajectory};
use crate::varcoef::CoefficientFields;
use serde::{Deserialize, Serialize};

/// Consecutive non-contracting iterations tolerated before giving up.
const DIVERGENCE_STREAK: usize = 3;
/// Smallest horizon the local driver will try.
const T_MIN: f64 = 1e-6;

/// `P(rho) = kappa (rho^gamma - 1)`, so `P(1) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pressure {
    pub kappa: f64,
    pub gamma: f64,
}

impl Pressure {
    pub fn new(kappa: f64, gamma: f64) -> Result<Self> {
        if !kappa.is_finite() || !gamma.is_finite() {
            return arg("pressure parameters must be finite");
        }
        Ok(Pressure { kappa, gamma })
    }
    /// `P(rho) = rho - 1`.
    pub fn linear() -> Self {
        Pressure { kappa: 1.0, gamma: 1.0 }
    }
    pub fn value(&self, rho: f64) -> f64 {
        self.kappa * (rho.powf(self.gamma) - 1.0)
    }
    pub fn slope(&self, rho: f64) -> f64 {
        self.kappa * self.gamma * rho.powf(self.gamma - 1.0)
    }
}

impl Default for Pressure {
    fn default() -> Self {
        Pressure::linear()
    }
}

/// `mu(rho) = mu rho^beta`, `lambda(rho) = lambda rho^beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViscosityLaw {
    pub mu: f64,
    pub lambda: f64,
    pub exponent: f64,
}

impl ViscosityLaw {
    pub fn constant(mu: f64, lambda: f64) -> Self {
        ViscosityLaw { mu, lambda, exponent: 0.0 }
    }
    pub fn mu_at(&self, rho: f64) -> f64 {
        self.mu * rho.powf(self.exponent)
    }
    pub fn lambda_at(&self, rho: f64) -> f64 {
        self.lambda * rho.powf(self.exponent)
    }
    fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.lambda + 2.0 * self.mu > 0.0) || !self.exponent.is_finite() {
            return arg("viscosities need mu > 0 and lambda + 2 mu > 0");
        }
        Ok(())
    }
}

impl Default for ViscosityLaw {
    fn default() -> Self {
        ViscosityLaw::constant(1.0, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Data smallness `||a0|| + ||u0|| <= alpha`.
    pub alpha: f64,
    /// Ball radius; the local driver halves `t_end` until the free
    /// evolution uses at most `r / 2` of it.
    pub r: f64,
    pub t_end: f64,
    pub steps: usize,
    pub epsilon_du: f64,
    /// Exponential weight in the global norm; `None` takes half the
    /// spectral bound of the linearized operator.
    pub c_weight: Option<f64>,
    pub max_picard: usize,
    pub contraction_tol: f64,
    pub pressure: Pressure,
    pub viscosity: ViscosityLaw,
    pub p: f64,
    pub strategy: Strategy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 0.01,
            r: 0.5,
            t_end: 4.0,
            steps: 32,
            epsilon_du: EPSILON_DEFAULT,
            c_weight: None,
            max_picard: 30,
            contraction_tol: 1e-10,
            pressure: Pressure::default(),
            viscosity: ViscosityLaw::default(),
            p: 2.0,
            strategy: Strategy::Duhamel,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return arg("alpha must lie in (0, 1)");
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return arg("R must lie in (0, 1)");
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return arg("T must be positive");
        }
        if self.steps < 2 {
            return arg("at least two time steps are required");
        }
        if !(self.epsilon_du > 0.0) {
            return arg("epsilon_du must be positive");
        }
        if let Some(c) = self.c_weight {
            if !(c >= 0.0) {
                return arg("c_weight must be non-negative");
            }
        }
        if self.max_picard == 0 {
            return arg("max_picard must be at least 1");
        }
        if !(self.contraction_tol > 0.0) {
            return arg("contraction_tol must be positive");
        }
        if !(self.p > 1.0) || !self.p.is_finite() {
            return arg(format!("p must be in (1, \u{221e}), got {}", self.p));
        }
        self.viscosity.validate()
    }
}

/// Monotone smooth map equal to the identity on `[-w, w]`, constant beyond
/// `2w`, joined by a quintic with matching first and second derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothClamp {
    pub width: f64,
}

impl SmoothClamp {
    pub fn apply(&self, z: f64) -> f64 {
        let w = self.width;
        let a = z.abs();
        if a <= w {
            return z;
        }
        let t = ((a - w) / w).min(1.0);
        // H(0) = 0, H'(0) = 1, H''(0) = 0, H'(1) = H''(1) = 0.
        let h = t - t.powi(4) + 0.6 * t.powi(5);
        z.signum() * (w + w * h)
    }
    /// Largest `|z|` at which the map still moves.
    pub fn limit(&self) -> f64 {
        2.0 * self.width
    }
}

/// Right-hand side of one midpoint together with its constituent terms.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearRHS {
    /// Density source (empty terms for the local maps).
    pub f_bar: ScalarField,
    pub g_bar: VectorField,
    pub f_terms: Vec<(String, ScalarField)>,
    pub g_terms: Vec<(String, VectorField)>,
}

impl NonlinearRHS {
    fn from_terms(grid: Grid, f_terms: Vec<(String, ScalarField)>, g_terms: Vec<(String, VectorField)>) -> Self {
        let mut f_bar = ScalarField::zeros(grid);
        for (_, f) in &f_terms {
            f_bar.values.iter_mut().zip(&f.values).for_each(|(s, v)| *s += v);
        }
        let mut g_bar = VectorField::zeros(grid);
        for (_, g) in &g_terms {
            g_bar.data.iter_mut().zip(&g.data).for_each(|(s, v)| *s += v);
        }
        NonlinearRHS { f_bar, g_bar, f_terms, g_terms }
    }

    /// Besov norm of every term: density terms in `B^{d/p}`, momentum terms
    /// in `B^{d/p-1}`.
    pub fn term_breakdown(&self, norms: &StateNorms) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for (name, f) in &self.f_terms {
            out.push((name.clone(), norms.density(&f.values, 0.0)?));
        }
        for (name, g) in &self.g_terms {
            out.push((name.clone(), norms.velocity(&g.data, 0.0)?));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Norm of the iterate (global: weighted `E_p`; local: `F_p(T)`).
    pub norm: f64,
    /// Norm of the difference to the previous iterate.
    pub update: f64,
    /// `update_n / update_{n-1}`, from the second iteration on.
    pub contraction: Option<f64>,
    pub du_integral: f64,
    pub min_density: f64,
    pub eulerian_residual: Option<f64>,
}

/// Nodewise Lagrangian identities over every stored time of an iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    /// `max |rho J - rho0| / |rho0|`.
    pub density: f64,
    /// `|sum rho J - sum rho0| / sum rho0`.
    pub mass: f64,
    /// `max |DX A - Id|`.
    pub inverse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    /// Fitted `l2` decay rate in original time units.
    pub decay_rate: Option<f64>,
    /// `||e^{ct} (a, u)||_{E_p} / (||a0|| + ||u0||)`.
    pub bound_constant: Option<f64>,
    pub invariants: InvariantReport,
    /// Horizon actually used (original time units).
    pub t_end: f64,
}

impl IterationReport {
    pub fn max_contraction(&self) -> Option<f64> {
        self.iterations.iter().filter_map(|r| r.contraction).reduce(f64::max)
    }
    pub fn min_density(&self) -> f64 {
        self.iterations.iter().map(|r| r.min_density).fold(f64::INFINITY, f64::min)
    }
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

fn difference(a: &[f64], b: &[f64], dt: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (y - x) / dt).collect()
}

fn scale_tensor(t: &TensorField, s: &[f64]) -> TensorField {
    let n = s.len();
    let data = t.data.iter().enumerate().map(|(i, v)| v * s[i % n]).collect();
    TensorField { grid: t.grid, data }
}

fn sub_tensor(a: &TensorField, b: &TensorField) -> TensorField {
    TensorField { grid: a.grid, data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect() }
}

fn scale_vector(v: &VectorField, s: &[f64]) -> VectorField {
    let n = s.len();
    VectorField { grid: v.grid, data: v.data.iter().enumerate().map(|(i, x)| x * s[i % n]).collect() }
}

/// `2 div(mu_b adj D_A v - mu_ref D v)` and `grad(lam_b div_A v - lam_ref div v)`.
fn viscous_commutators(
    flow: &FlowMap,
    v: &VectorField,
    mu_b: &[f64],
    lam_b: &[f64],
    mu_ref: &[f64],
    lam_ref: &[f64],
) -> (VectorField, VectorField) {
    let dv = grid::jacobian(v);
    let (da, diva) = twisted_from_jacobian(&dv, &flow.a);
    let sym = TensorField { grid: v.grid, data: dv.data.iter().zip(&dv.transpose().data).map(|(p, q)| 0.5 * (p + q)).collect() };
    let div = grid::divergence(v);
    let twisted = scale_tensor(&tensor_product(&flow.adj, &da), mu_b);
    let plain = scale_tensor(&sym, mu_ref);
    let mut g2 = grid::tensor_divergence(&sub_tensor(&twisted, &plain), Ghost::Extrapolate);
    g2.data.iter_mut().for_each(|x| *x *= 2.0);
    let s: Vec<f64> = (0..div.values.len()).map(|k| lam_b[k] * diva.values[k] - lam_ref[k] * div.values[k]).collect();
    let g3 = grid::gradient(&ScalarField { grid: v.grid, values: s }, Ghost::Extrapolate);
    (g2, g3)
}

fn identity_minus(t: &TensorField) -> TensorField {
    let mut out = TensorField::identity(t.grid);
    out.data.iter_mut().zip(&t.data).for_each(|(o, x)| *o -= x);
    out
}

// ---- global problem ------------------------------------------------------------

/// Data and rescaled coefficients of the global small-data problem.
///
/// Velocities and times are rescaled by `c = sqrt(P'(1))` so the pressure
/// slope is one; `mu`, `lambda` are divided by `c` and `Pi(z) = P'(1+z)/P'(1)`.
#[derive(Debug)]
pub struct GlobalProblem {
    pub grid: Grid,
    pub a0: ScalarField,
    pub u0: VectorField,
    pub cfg: SolverConfig,
    pub op: CoupledOperator,
    pub norms: StateNorms,
    pub geometry: GeometryNorms,
    pub clamp: SmoothClamp,
    /// `||a0||_{B^{d/p}} + ||u0||_{B^{d/p-1}}` in original units.
    pub data_norm: f64,
    pub c_weight: f64,
    slope: f64,
}

impl GlobalProblem {
    pub fn new(a0: ScalarField, u0: VectorField, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let g = a0.grid;
        if u0.grid != g {
            return arg("initial density and velocity live on different grids");
        }
        if a0.values.iter().chain(&u0.data).any(|v| !v.is_finite()) {
            return Err(Error::Data("initial data must be finite".into()));
        }
        let amax = a0.max_abs().max(1.0);
        if grid::mean(&a0.values).abs() > 1e-12 * amax {
            return Err(Error::Precondition("the initial density perturbation must be mean-free".into()));
        }
        let slope = cfg.pressure.slope(1.0);
        if !(slope > 0.0) {
            return Err(Error::Precondition("global runs need P'(1) > 0".into()));
        }
        let norms = StateNorms::new(&g, cfg.p)?;
        let data_norm = norms.density(&a0.values, 0.0)? + norms.velocity(&u0.data, 0.0)?;
        if data_norm > cfg.alpha {
            return Err(Error::Precondition(format!("data norm {data_norm:.3e} exceeds alpha = {:.3e}", cfg.alpha)));
        }
        let coeffs = LameCoefficients::from_viscosities(cfg.viscosity.mu, cfg.viscosity.lambda)?;
        let op = assemble_coupled_scaled(&g, &coeffs, slope, Coupling::Full)?;
        let c_weight = match cfg.c_weight {
            Some(c) => c,
            None => 0.5 * spectral_bound(&op)?.c,
        };
        let width = (2.0 * a0.max_abs().max(cfg.alpha)).min(0.45);
        Ok(GlobalProblem {
            grid: g,
            geometry: GeometryNorms::new(&g, cfg.p)?,
            a0,
            u0,
            cfg,
            op,
            norms,
            clamp: SmoothClamp { width },
            data_norm,
            c_weight,
            slope,
        })
    }

    pub fn time_scale(&self) -> f64 {
        self.op.time_scale
    }

    /// Horizon in rescaled time.
    pub fn horizon(&self) -> f64 {
        self.cfg.t_end * self.time_scale()
    }

    fn mu_bar(&self) -> f64 {
        self.op.coeffs.mu
    }

    fn lambda_bar(&self) -> f64 {
        self.op.coeffs.z.re - self.op.coeffs.mu
    }

    fn mu_tilde(&self, z: f64) -> f64 {
        self.cfg.viscosity.mu_at(1.0 + self.clamp.apply(z)) / self.time_scale()
    }

    fn lambda_tilde(&self, z: f64) -> f64 {
        self.cfg.viscosity.lambda_at(1.0 + self.clamp.apply(z)) / self.time_scale()
    }

    fn pi(&self, z: f64) -> f64 {
        self.cfg.pressure.slope(1.0 + self.clamp.apply(z)) / self.slope
    }

    /// Initial state in rescaled units.
    pub fn initial_state(&self) -> LinCNSState {
        LinCNSState { a: self.a0.clone(), u: self.u0.scaled(1.0 / self.time_scale()) }
    }
}

/// Quadratic sources of the global problem at one midpoint (rescaled
/// units). `b`, `v` are the midpoint averages of the previous iterate,
/// `bt`, `vt` its difference quotients and `flow` the flow of `v` there.
pub fn assemble_global_rhs(
    prob: &GlobalProblem,
    b: &ScalarField,
    bt: &ScalarField,
    v: &VectorField,
    vt: &VectorField,
    flow: &FlowMap,
) -> Result<NonlinearRHS> {
    let g = prob.grid;
    if [b.grid, bt.grid, v.grid, vt.grid, *flow.grid()].iter().any(|x| *x != g) {
        return arg("fields live on different grids");
    }
    let bmax = b.max_abs();
    if bmax > prob.clamp.limit() {
        return Err(Error::Precondition(format!(
            "density perturbation {bmax:.3e} left the extension window {:.3e}",
            prob.clamp.limit()
        )));
    }
    let n = g.len();
    let dv = grid::jacobian(v);
    let one_minus_j: Vec<f64> = flow.j.values.iter().map(|j| 1.0 - j).collect();
    let f1 = ScalarField { grid: g, values: (0..n).map(|k| one_minus_j[k] * bt.values[k]).collect() };
    let f2 = contract(&dv, &identity_minus(&flow.adj));
    let dv_adj = contract(&dv, &flow.adj);
    let f3 = ScalarField { grid: g, values: (0..n).map(|k| -b.values[k] * dv_adj.values[k]).collect() };

    let neg_a0: Vec<f64> = prob.a0.values.iter().map(|a| -a).collect();
    let g1 = scale_vector(vt, &neg_a0);
    let mu_b: Vec<f64> = b.values.iter().map(|z| prob.mu_tilde(*z)).collect();
    let lam_b: Vec<f64> = b.values.iter().map(|z| prob.lambda_tilde(*z)).collect();
    let (g2, g3) = viscous_commutators(flow, v, &mu_b, &lam_b, &vec![prob.mu_bar(); n], &vec![prob.lambda_bar(); n]);
    let grad_b = grid::gradient(b, Ghost::Extrapolate);
    let pi: Vec<f64> = b.values.iter().map(|z| prob.pi(*z)).collect();
    let one_minus_pi: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let g4 = scale_vector(&grad_b, &one_minus_pi);
    let g5 = scale_vector(&tensor_apply(&identity_minus(&flow.adj.transpose()), &grad_b), &pi);
    Ok(NonlinearRHS::from_terms(
        g,
        vec![("f1".into(), f1), ("f2".into(), f2), ("f3".into(), f3)],
        vec![("g1".into(), g1), ("g2".into(), g2), ("g3".into(), g3), ("g4".into(), g4), ("g5".into(), g5)],
    ))
}

/// Result of a global run. `rescaled` holds states `[a; u]` in rescaled
/// units; `trajectory` is the same in original units.
#[derive(Clone, Debug)]
pub struct GlobalRun {
    pub trajectory: Trajectory,
    pub rescaled: Trajectory,
    pub report: IterationReport,
}

fn velocity_store(grid: Grid, traj: &Trajectory) -> Result<TrajectoryStore> {
    let n = grid.len();
    let us: Vec<Vec<f64>> = traj.states.iter().map(|s| s[s.len() - grid.dim() * n..].to_vec()).collect();
    TrajectoryStore::from_samples(grid, &traj.times, &us)
}

fn zero_trajectory(t_end: f64, steps: usize, len: usize) -> Trajectory {
    let dt = t_end / steps as f64;
    Trajectory { times: (0..=steps).map(|k| k as f64 * dt).collect(), states: vec![vec![0.0; len]; steps + 1] }
}

fn trajectory_difference(a: &Trajectory, b: &Trajectory) -> Trajectory {
    Trajectory {
        times: a.times.clone(),
        states: a.states.iter().zip(&b.states).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect(),
    }
}

/// One application of the global map to `w` (rescaled units).
pub fn global_map(prob: &GlobalProblem, w: &Trajectory) -> Result<Trajectory> {
    let g = prob.grid;
    let n = g.len();
    let steps = prob.cfg.steps;
    let t_end = prob.horizon();
    if w.states.len() != steps + 1 {
        return arg("iterate does not match the configured time grid");
    }
    let dt = t_end / steps as f64;
    let store = velocity_store(g, w)?;
    let smallness = smallness_monitor(&store, &prob.geometry, prob.cfg.epsilon_du)?;
    if !smallness.passes {
        return Err(Error::Precondition(format!(
            "integrated velocity gradient {:.3e} exceeds epsilon {:.3e}",
            smallness.integral, smallness.epsilon
        )));
    }
    let mut forcing = Vec::with_capacity(steps);
    let mut means = vec![0.0; steps + 1];
    for k in 0..steps {
        let (s0, s1) = (&w.states[k], &w.states[k + 1]);
        let b = ScalarField { grid: g, values: midpoint(&s0[..n], &s1[..n]) };
        let bt = ScalarField { grid: g, values: difference(&s0[..n], &s1[..n], dt) };
        let v = VectorField { grid: g, data: midpoint(&s0[n..], &s1[n..]) };
        let vt = VectorField { grid: g, data: difference(&s0[n..], &s1[n..], dt) };
        let flow = advance_flow(&store, (k as f64 + 0.5) * dt)?;
        let rhs = assemble_global_rhs(prob, &b, &bt, &v, &vt, &flow)?;
        let (m, f) = grid::mean_and_project(&rhs.f_bar);
        means[k + 1] = means[k] + dt * m;
        let mut x = f.values;
        x.extend_from_slice(&rhs.g_bar.data);
        forcing.push(x);
    }
    let forcing = if forcing.iter().all(|x| x.iter().all(|v| *v == 0.0)) { Forcing::Zero } else { Forcing::Midpoint(forcing) };
    let mut run = solve_lcns(&prob.op, &prob.initial_state(), &forcing, t_end, steps, prob.cfg.strategy)?.trajectory;
    // Constants lie in the kernel of the extrapolated gradient, so the mean
    // of the density source only shifts the density.
    for (s, m) in run.states.iter_mut().zip(&means) {
        s[..n].iter_mut().for_each(|a| *a += m);
    }
    Ok(run)
}

/// `rho0 / J` along an iterate with the nodewise identities.
fn density_diagnostics(rho0: &ScalarField, traj: &Trajectory) -> Result<(f64, InvariantReport)> {
    let g = rho0.grid;
    let store = velocity_store(g, traj)?;
    let total0: f64 = rho0.values.iter().sum();
    let mut min_density = f64::INFINITY;
    let mut inv = InvariantReport::default();
    for &t in &traj.times {
        let flow = advance_flow(&store, t)?;
        let mut mass = 0.0;
        for k in 0..g.len() {
            let rho = rho0.values[k] / flow.j.values[k];
            min_density = min_density.min(rho);
            let back = rho * flow.j.values[k];
            inv.density = inv.density.max((back - rho0.values[k]).abs() / rho0.values[k].abs());
            mass += back;
        }
        inv.mass = inv.mass.max((mass - total0).abs() / total0.abs());
        inv.inverse = inv.inverse.max(flow.invariant_defects().0);
    }
    Ok((min_density, inv))
}

fn check_divergence(streak: &mut usize, factor: Option<f64>) -> Result<()> {
    if let Some(f) = factor {
        if f >= 1.0 {
            *streak += 1;
            if *streak >= DIVERGENCE_STREAK {
                return Err(Error::Divergence(format!("contraction factor {f:.3} >= 1 for {DIVERGENCE_STREAK} iterations")));
            }
        } else {
            *streak = 0;
        }
    }
    Ok(())
}

pub fn picard_global(prob: &GlobalProblem) -> Result<GlobalRun> {
    picard_global_from(prob, None)
}

/// Picard iteration of the global map from `seed` (zero when `None`).
pub fn picard_global_from(prob: &GlobalProblem, seed: Option<&Trajectory>) -> Result<GlobalRun> {
    let g = prob.grid;
    let len = (g.dim() + 1) * g.len();
    let mut w = match seed {
        Some(s) => s.clone(),
        None => zero_trajectory(prob.horizon(), prob.cfg.steps, len),
    };
    let rho0 = prob.a0.map(|a| 1.0 + a);
    let mut records = Vec::new();
    let mut last_update: Option<f64> = None;
    let mut streak = 0;
    let mut converged = false;
    for it in 1..=prob.cfg.max_picard {
        // Past the first step the input is an iterate, not the data: leaving
        // the admissible set there means the iteration is running away.
        let next = match global_map(prob, &w) {
            Err(Error::Precondition(m)) if it >= 2 => {
                return Err(Error::Divergence(format!("iterate {} left the admissible set: {m}", it - 1)))
            }
            r => r?,
        };
        let update = prob.norms.ep_norm(&trajectory_difference(&next, &w), prob.c_weight)?.total;
        let norm = prob.norms.ep_norm(&next, prob.c_weight)?.total;
        let contraction = last_update.filter(|_| it >= 2).map(|u| if u > 0.0 { update / u } else { 0.0 });
        let store = velocity_store(g, &next)?;
        let du = du_integral(&store, &prob.geometry, prob.horizon())?;
        let (min_density, _) = density_diagnostics(&rho0, &next)?;
        records.push(IterationRecord {
            iteration: it,
            norm,
            update,
            contraction,
            du_integral: du,
            min_density,
            eulerian_residual: None,
        });
        w = next;
        check_divergence(&mut streak, contraction)?;
        last_update = Some(update);
        if update <= prob.cfg.contraction_tol * norm || update == 0.0 {
            converged = true;
            break;
        }
    }
    let (_, invariants) = density_diagnostics(&rho0, &w)?;
    let residual = eulerian_residual(prob, &w)?;
    if let Some(r) = records.last_mut() {
        r.eulerian_residual = Some(residual.total);
    }
    let c = prob.time_scale();
    let decay_rate = if w.states.len() >= 16 && w.last().iter().any(|v| *v != 0.0) {
        Some(decay_measure(&w, &l2)?.rate * c)
    } else {
        None
    };
    let bound_constant = if prob.data_norm > 0.0 {
        let scaled = prob.norms.state(&prob.initial_state().to_vec())?;
        Some(prob.norms.ep_norm(&w, prob.c_weight)?.total / scaled)
    } else {
        None
    };
    let n = g.len();
    let trajectory = Trajectory {
        times: w.times.iter().map(|t| t / c).collect(),
        states: w
            .states
            .iter()
            .map(|s| s.iter().enumerate().map(|(i, v)| if i < n { *v } else { v * c }).collect())
            .collect(),
    };
    Ok(GlobalRun {
        trajectory,
        rescaled: w,
        report: IterationReport { iterations: records, converged, decay_rate, bound_constant, invariants, t_end: prob.cfg.t_end },
    })
}

// ---- Eulerian residual -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Space-time `L^1` norm of both residuals.
    pub total: f64,
    pub mass: f64,
    pub momentum: f64,
    /// Lookups that left the box, summed over time nodes.
    pub clamped: usize,
}

/// Strong-form residual of the Eulerian system for a rescaled global
/// trajectory `[a; u]`: the density is `rho0 / J` along the trajectory's own
/// flow, and both fields are composed with the inverse flow. Time
/// derivatives are centered at the step midpoints.
pub fn eulerian_residual(prob: &GlobalProblem, traj: &Trajectory) -> Result<ResidualReport> {
    let g = prob.grid;
    let n = g.len();
    let d = g.dim();
    let store = velocity_store(g, traj)?;
    let smallness = smallness_monitor(&store, &prob.geometry, prob.cfg.epsilon_du)?;
    if !smallness.passes {
        return Err(Error::Precondition("velocity too large for the Eulerian conversion".into()));
    }
    let rho0 = prob.a0.map(|a| 1.0 + a);
    let mut rho = Vec::with_capacity(traj.states.len());
    let mut vel = Vec::with_capacity(traj.states.len());
    let mut clamped = 0;
    for (k, &t) in traj.times.iter().enumerate() {
        let flow = advance_flow(&store, t)?;
        let (pre, cl, _) = inverse_map(&flow, Extension::Zero)?;
        clamped += cl;
        let rbar: Vec<f64> = (0..n).map(|i| rho0.values[i] / flow.j.values[i]).collect();
        let u = &traj.states[k][n..];
        let mut r = vec![0.0; n];
        let mut v = vec![0.0; d * n];
        for (i, y) in pre.iter().enumerate() {
            r[i] = interpolate(&g, &rbar, &y[..d], Extension::Reflect).0;
            for c in 0..d {
                v[c * n + i] = interpolate(&g, &u[c * n..(c + 1) * n], &y[..d], Extension::Zero).0;
            }
        }
        rho.push(r);
        vel.push(v);
    }
    let c = prob.time_scale();
    let (mu_bar, lam_bar) = (prob.mu_bar(), prob.lambda_bar());
    let h = g.cell_volume();
    let dt = traj.dt();
    let (mut mass, mut momentum) = (0.0, 0.0);
    for k in 0..traj.states.len() - 1 {
        let rm = ScalarField { grid: g, values: midpoint(&rho[k], &rho[k + 1]) };
        let rt = difference(&rho[k], &rho[k + 1], dt);
        let um = VectorField { grid: g, data: midpoint(&vel[k], &vel[k + 1]) };
        let ut = difference(&vel[k], &vel[k + 1], dt);
        let flux = scale_vector(&um, &rm.values);
        let div_flux = grid::divergence(&flux);
        mass += dt * h * (0..n).map(|i| (rt[i] + div_flux.values[i]).abs()).sum::<f64>();

        let conv = tensor_apply(&grid::jacobian(&um), &um);
        let lin = prob.op.lame.apply(&um.data);
        let dmu: Vec<f64> = rm.values.iter().map(|r| prob.cfg.viscosity.mu_at(*r) / c - mu_bar).collect();
        let dlam: Vec<f64> = rm.values.iter().map(|r| prob.cfg.viscosity.lambda_at(*r) / c - lam_bar).collect();
        let flow = FlowMap::identity(g);
        let (var_mu, var_lam) = viscous_commutators(&flow, &um, &dmu, &dlam, &vec![0.0; n], &vec![0.0; n]);
        let p = rm.map(|r| prob.cfg.pressure.value(r) / prob.slope);
        let gp = grid::gradient(&p, Ghost::Extrapolate);
        for i in 0..d * n {
            let node = i % n;
            let r = rm.values[node] * (ut[i] + conv.data[i]) + lin[i] - var_mu.data[i] - var_lam.data[i] + gp.data[i];
            momentum += dt * h * r.abs();
        }
    }
    Ok(ResidualReport { total: mass + momentum, mass, momentum, clamped })
}

// ---- local problems ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalMode {
    /// `rho0` close to 1; constant Lame operator, `h1 = -a0 v_t` kept.
    SmallVariation,
    /// Arbitrary positive `rho0`; frozen operator `L_{rho0}`.
    GeneralDensity,
}

#[derive(Debug)]
pub struct LocalProblem {
    pub grid: Grid,
    pub rho0: ScalarField,
    pub u0: VectorField,
    pub mode: LocalMode,
    pub cfg: SolverConfig,
    pub op: LinearOperator,
    pub norms: StateNorms,
    pub geometry: GeometryNorms,
    mu0: Vec<f64>,
    lam0: Vec<f64>,
}

impl LocalProblem {
    pub fn new(rho0: ScalarField, u0: VectorField, mode: LocalMode, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let g = rho0.grid;
        if u0.grid != g {
            return arg("initial density and velocity live on different grids");
        }
        if rho0.values.iter().chain(&u0.data).any(|v| !v.is_finite()) {
            return Err(Error::Data("initial data must be finite".into()));
        }
        if !(rho0.min() > 0.0) {
            return Err(Error::Precondition("the initial density must be bounded below by a positive constant".into()));
        }
        let vis = cfg.viscosity;
        let n = g.len();
        let (op, mu0, lam0) = match mode {
            LocalMode::SmallVariation => {
                let bank = DyadicFilterBank::new(&g, ExtensionMode::EvenReflection)?;
                let dev = bank.besov_norm(&rho0.map(|r| r - 1.0), &BesovParams::critical(cfg.p, g.dim())?)?;
                if dev > cfg.alpha {
                    return Err(Error::Precondition(format!(
                        "density variation {dev:.3e} exceeds alpha = {:.3e}",
                        cfg.alpha
                    )));
                }
                let op = assemble_lame(&g, &LameCoefficients::from_viscosities(vis.mu, vis.lambda)?)?;
                (op, vec![vis.mu_at(1.0); n], vec![vis.lambda_at(1.0); n])
            }
            LocalMode::GeneralDensity => {
                let mu = rho0.map(|r| vis.mu_at(r));
                let lam = rho0.map(|r| vis.lambda_at(r));
                let coeffs = CoefficientFields::new(rho0.clone(), mu.clone(), lam.clone())?;
                (coeffs.operator()?, mu.values, lam.values)
            }
        };
        Ok(LocalProblem {
            norms: StateNorms::new(&g, cfg.p)?,
            geometry: GeometryNorms::new(&g, cfg.p)?,
            grid: g,
            rho0,
            u0,
            mode,
            cfg,
            op,
            mu0,
            lam0,
        })
    }
}

/// Momentum sources of the local maps at one midpoint: `v`, `vt` are the
/// midpoint average and difference quotient of the previous iterate and
/// `flow` its flow there.
pub fn assemble_local_rhs(prob: &LocalProblem, v: &VectorField, vt: &VectorField, flow: &FlowMap) -> Result<NonlinearRHS> {
    let g = prob.grid;
    if v.grid != g || vt.grid != g || *flow.grid() != g {
        return arg("fields live on different grids");
    }
    let n = g.len();
    let vis = prob.cfg.viscosity;
    let rho: Vec<f64> = (0..n).map(|k| prob.rho0.values[k] / flow.j.values[k]).collect();
    if let Some(k) = rho.iter().position(|r| !(*r > 0.0)) {
        return Err(Error::Degeneracy(format!("density lost positivity at node {k}")));
    }
    let mu_b: Vec<f64> = rho.iter().map(|r| vis.mu_at(*r)).collect();
    let lam_b: Vec<f64> = rho.iter().map(|r| vis.lambda_at(*r)).collect();
    let (mut h2, mut h3) = viscous_commutators(flow, v, &mu_b, &lam_b, &prob.mu0, &prob.lam0);
    let p = ScalarField { grid: g, values: rho.iter().map(|r| prob.cfg.pressure.value(*r)).collect() };
    let gp = grid::gradient(&p, Ghost::Extrapolate);
    let mut h4 = tensor_apply(&flow.adj.transpose(), &gp);
    h4.data.iter_mut().for_each(|x| *x = -*x);
    let terms = match prob.mode {
        LocalMode::SmallVariation => {
            let neg_a0: Vec<f64> = prob.rho0.values.iter().map(|r| -(r - 1.0)).collect();
            let h1 = scale_vector(vt, &neg_a0);
            vec![("h1".into(), h1), ("h2".into(), h2), ("h3".into(), h3), ("h4".into(), h4)]
        }
        LocalMode::GeneralDensity => {
            let inv: Vec<f64> = prob.rho0.values.iter().map(|r| 1.0 / r).collect();
            for f in [&mut h2, &mut h3, &mut h4] {
                *f = scale_vector(f, &inv);
            }
            vec![("h2".into(), h2), ("h3".into(), h3), ("h4".into(), h4)]
        }
    };
    Ok(NonlinearRHS::from_terms(g, vec![], terms))
}

#[derive(Clone, Debug)]
pub struct LocalRun {
    /// States `[rho0/J - 1; u]` in original units.
    pub trajectory: Trajectory,
    pub report: IterationReport,
    /// Horizons tried, largest first; the last one was used.
    pub horizons: Vec<f64>,
}

fn as_state(traj: &Trajectory, n: usize) -> Trajectory {
    Trajectory {
        times: traj.times.clone(),
        states: traj
            .states
            .iter()
            .map(|u| {
                let mut s = vec![0.0; n];
                s.extend_from_slice(u);
                s
            })
            .collect(),
    }
}

fn local_map(prob: &LocalProblem, w: &Trajectory, t_end: f64) -> Result<Trajectory> {
    let g = prob.grid;
    let steps = prob.cfg.steps;
    let dt = t_end / steps as f64;
    let store = TrajectoryStore::from_samples(g, &w.times, &w.states)?;
    let mut forcing = Vec::with_capacity(steps);
    for k in 0..steps {
        let v = VectorField { grid: g, data: midpoint(&w.states[k], &w.states[k + 1]) };
        let vt = VectorField { grid: g, data: difference(&w.states[k], &w.states[k + 1], dt) };
        let flow = advance_flow(&store, (k as f64 + 0.5) * dt)?;
        forcing.push(assemble_local_rhs(prob, &v, &vt, &flow)?.g_bar.data);
    }
    let forcing = if forcing.iter().all(|x| x.iter().all(|v| *v == 0.0)) { Forcing::Zero } else { Forcing::Midpoint(forcing) };
    solve_cauchy(&prob.op, &prob.u0.data, &forcing, t_end, steps)
}

fn local_iterate(prob: &LocalProblem, t_end: f64, free: &Trajectory) -> Result<(Trajectory, Vec<IterationRecord>, bool)> {
    let g = prob.grid;
    let n = g.len();
    let mut w = free.clone();
    let mut records = Vec::new();
    let mut last_update: Option<f64> = None;
    let mut streak = 0;
    let mut converged = false;
    for it in 1..=prob.cfg.max_picard {
        let next = local_map(prob, &w, t_end)?;
        let update = prob.norms.ep_norm(&as_state(&trajectory_difference(&next, &w), n), 0.0)?.total;
        let norm = prob.norms.ep_norm(&as_state(&next, n), 0.0)?.total;
        let contraction = last_update.filter(|_| it >= 2).map(|u| if u > 0.0 { update / u } else { 0.0 });
        let store = TrajectoryStore::from_samples(g, &next.times, &next.states)?;
        let du = du_integral(&store, &prob.geometry, t_end)?;
        let (min_density, _) = density_diagnostics(&prob.rho0, &as_state(&next, n))?;
        if !(min_density > 0.0) {
            return Err(Error::Degeneracy("density lost positivity".into()));
        }
        records.push(IterationRecord { iteration: it, norm, update, contraction, du_integral: du, min_density, eulerian_residual: None });
        w = next;
        check_divergence(&mut streak, contraction)?;
        last_update = Some(update);
        if update <= prob.cfg.contraction_tol * norm || update == 0.0 {
            converged = true;
            break;
        }
    }
    Ok((w, records, converged))
}

/// Local solution: picks the horizon from the free evolution, then runs the
/// Picard iteration around it. A divergent or degenerate iteration halves
/// the horizon and starts over.
pub fn picard_local(prob: &LocalProblem) -> Result<LocalRun> {
    let g = prob.grid;
    let n = g.len();
    let params = BesovParams::new(g.dim() as f64 / prob.cfg.p - 1.0, prob.cfg.p, 1.0, g.dim())?;
    let mu_min = prob.mu0.iter().zip(&prob.rho0.values).map(|(m, r)| m / r).fold(f64::INFINITY, f64::min);
    let mut t_end = prob.cfg.t_end;
    let mut horizons = Vec::new();
    loop {
        if t_end < T_MIN {
            return Err(Error::Precondition(format!("cannot establish a horizon: T fell below {T_MIN:e}")));
        }
        horizons.push(t_end);
        let free = heat_maxreg_solve(&prob.op, &prob.u0, &Forcing::Zero, t_end, prob.cfg.steps, mu_min, &params)?.trajectory;
        let store = TrajectoryStore::from_samples(g, &free.times, &free.states)?;
        if du_integral(&store, &prob.geometry, t_end)? > 0.5 * prob.cfg.r {
            t_end *= 0.5;
            continue;
        }
        match local_iterate(prob, t_end, &free) {
            Ok((w, iterations, converged)) => {
                let full = density_trajectory(prob, &w)?;
                let (_, invariants) = density_diagnostics(&prob.rho0, &as_state(&w, n))?;
                let report = IterationReport { iterations, converged, decay_rate: None, bound_constant: None, invariants, t_end };
                return Ok(LocalRun { trajectory: full, report, horizons });
            }
            Err(Error::Divergence(_)) | Err(Error::Degeneracy(_)) => t_end *= 0.5,
            Err(e) => return Err(e),
        }
    }
}

fn density_trajectory(prob: &LocalProblem, w: &Trajectory) -> Result<Trajectory> {
    let g = prob.grid;
    let store = TrajectoryStore::from_samples(g, &w.times, &w.states)?;
    let mut states = Vec::with_capacity(w.states.len());
    for (t, u) in w.times.iter().zip(&w.states) {
        let flow = advance_flow(&store, *t)?;
        let mut s: Vec<f64> = (0..g.len()).map(|k| prob.rho0.values[k] / flow.j.values[k] - 1.0).collect();
        s.extend_from_slice(u);
        states.push(s);
    }
    Ok(Trajectory { times: w.times.clone(), states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn g(n: usize) -> Grid {
        Grid::cube(2, n, 1.0).unwrap()
    }

    fn bump(x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        (-r2 / 0.02).exp()
    }

    /// Single-mode data scaled to `||a0|| + ||u0|| = amp`.
    fn mode_data(grid: Grid, amp: f64, p: f64) -> (ScalarField, VectorField) {
        let a = ScalarField::from_fn(grid, |x| (PI * x[0]).cos());
        let u = VectorField::from_fn(grid, |x, c| (PI * x[0]).sin() * (PI * x[1]).sin() * if c == 0 { 1.0 } else { -0.5 });
        let norms = StateNorms::new(&grid, p).unwrap();
        let s = amp / (norms.density(&a.values, 0.0).unwrap() + norms.velocity(&u.data, 0.0).unwrap());
        (a.map(|v| v * s), u.scaled(s))
    }

    fn midpoint_inputs(grid: Grid, s: f64) -> (ScalarField, ScalarField, VectorField, VectorField, FlowMap) {
        let b = ScalarField::from_fn(grid, |x| s * (PI * x[0]).cos() * x[1]);
        let bt = ScalarField::from_fn(grid, |x| s * (2.0 * PI * x[1]).sin());
        let v = VectorField::from_fn(grid, |x, c| s * (PI * x[0]).sin() * (PI * x[1]).sin() * (1.0 + c as f64));
        let vt = VectorField::from_fn(grid, |x, c| s * (2.0 * PI * x[c]).sin() * x[1 - c]);
        let mut store = TrajectoryStore::new(grid);
        store.push(0.0, &v.data).unwrap();
        store.push(1.0, &v.data).unwrap();
        let flow = advance_flow(&store, 1.0).unwrap();
        (b, bt, v, vt, flow)
    }

    fn problem(n: usize, cfg: SolverConfig) -> GlobalProblem {
        let grid = g(n);
        GlobalProblem::new(ScalarField::zeros(grid), VectorField::zeros(grid), SolverConfig { c_weight: Some(0.0), ..cfg })
            .unwrap()
    }

    #[test]
    fn clamp_is_smooth_and_monotone() {
        let c = SmoothClamp { width: 0.2 };
        assert_eq!(c.apply(0.1), 0.1);
        assert_eq!(c.apply(-0.2), -0.2);
        assert!((c.apply(0.4) - 0.32).abs() < 1e-15);
        assert_eq!(c.apply(5.0), c.apply(0.4));
        let h = 1e-6;
        for z in [0.2, 0.4] {
            let left = (c.apply(z) - c.apply(z - h)) / h;
            let right = (c.apply(z + h) - c.apply(z)) / h;
            assert!((left - right).abs() < 1e-4, "{z}: {left} {right}");
        }
        let mut last = f64::NEG_INFINITY;
        for k in -100..=100 {
            let v = c.apply(k as f64 * 0.01);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn global_rhs_vanishes_at_origin() {
        let prob = problem(8, SolverConfig::default());
        let grid = prob.grid;
        let z = ScalarField::zeros(grid);
        let v = VectorField::zeros(grid);
        let rhs = assemble_global_rhs(&prob, &z, &z, &v, &v, &FlowMap::identity(grid)).unwrap();
        assert!(rhs.f_bar.values.iter().chain(&rhs.g_bar.data).all(|x| *x == 0.0));
    }

    #[test]
    fn global_rhs_is_quadratic() {
        let grid = g(16);
        let a0 = ScalarField::from_fn(grid, |x| (PI * x[0]).cos());
        let cfg = SolverConfig {
            alpha: 0.9,
            c_weight: Some(0.0),
            viscosity: ViscosityLaw { mu: 1.0, lambda: 0.3, exponent: 1.0 },
            pressure: Pressure::new(1.0, 1.4).unwrap(),
            ..SolverConfig::default()
        };
        let norms = |s: f64| {
            let (b, bt, v, vt, flow) = midpoint_inputs(grid, s);
            let prob = GlobalProblem::new(a0.map(|a| a * s), VectorField::zeros(grid), cfg).unwrap();
            let rhs = assemble_global_rhs(&prob, &b, &bt, &v, &vt, &flow).unwrap();
            rhs.term_breakdown(&prob.norms).unwrap()
        };
        let base = norms(1e-2);
        for sigma in [0.5, 0.25] {
            let scaled = norms(1e-2 * sigma);
            for ((name, a), (_, b)) in base.iter().zip(&scaled) {
                if *a < 1e-14 {
                    continue;
                }
                let r = b / a;
                assert!(r >= 0.75 * sigma * sigma && r <= 1.25 * sigma * sigma, "{name}: {r} at sigma {sigma}");
            }
        }
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let grid = g(12);
        let prob = problem(12, SolverConfig { viscosity: ViscosityLaw { mu: 0.7, lambda: 0.2, exponent: 0.5 }, ..SolverConfig::default() });
        let (b, bt, v, vt, flow) = midpoint_inputs(grid, 0.01);
        let rhs = assemble_global_rhs(&prob, &b, &bt, &v, &vt, &flow).unwrap();
        let mut f = vec![0.0; grid.len()];
        for (_, t) in &rhs.f_terms {
            f.iter_mut().zip(&t.values).for_each(|(s, x)| *s += x);
        }
        let mut gs = vec![0.0; 2 * grid.len()];
        for (_, t) in &rhs.g_terms {
            gs.iter_mut().zip(&t.data).for_each(|(s, x)| *s += x);
        }
        let scale = rhs.f_bar.max_abs().max(rhs.g_bar.max_abs());
        assert!(f.iter().zip(&rhs.f_bar.values).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
        assert!(gs.iter().zip(&rhs.g_bar.data).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
        assert_eq!(rhs.term_breakdown(&prob.norms).unwrap().len(), 8);
    }

    #[test]
    fn linear_pressure_has_no_g4() {
        let grid = g(10);
        let prob = problem(10, SolverConfig { pressure: Pressure::linear(), ..SolverConfig::default() });
        let (b, bt, v, vt, flow) = midpoint_inputs(grid, 0.01);
        let rhs = assemble_global_rhs(&prob, &b, &bt, &v, &vt, &flow).unwrap();
        assert!(rhs.g_terms[3].1.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn density_outside_window_is_rejected() {
        let grid = g(8);
        let prob = problem(8, SolverConfig::default());
        let b = ScalarField::constant(grid, 3.0 * prob.clamp.width);
        let v = VectorField::zeros(grid);
        let r = assemble_global_rhs(&prob, &b, &b, &v, &v, &FlowMap::identity(grid));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig { p: 0.5, ..SolverConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("p must be in (1, \u{221e})"));
        assert!(SolverConfig { alpha: 1.0, ..SolverConfig::default() }.validate().is_err());
        assert!(SolverConfig { r: 0.0, ..SolverConfig::default() }.validate().is_err());
        assert!(SolverConfig { t_end: -1.0, ..SolverConfig::default() }.validate().is_err());
    }

    #[test]
    fn global_data_preconditions() {
        let grid = g(8);
        let cfg = SolverConfig { c_weight: Some(0.0), ..SolverConfig::default() };
        let a = ScalarField::constant(grid, 1e-4);
        assert!(matches!(GlobalProblem::new(a, VectorField::zeros(grid), cfg), Err(Error::Precondition(_))));
        let (a, u) = mode_data(grid, 0.5, 2.0);
        assert!(matches!(GlobalProblem::new(a, u, cfg), Err(Error::Precondition(_))));
        let flat = SolverConfig { pressure: Pressure::new(0.0, 1.0).unwrap(), ..cfg };
        assert!(GlobalProblem::new(ScalarField::zeros(grid), VectorField::zeros(grid), flat).is_err());
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let prob = problem(8, SolverConfig { steps: 8, t_end: 1.0, ..SolverConfig::default() });
        let run = picard_global(&prob).unwrap();
        assert!(run.report.converged);
        assert_eq!(run.report.iterations.len(), 1);
        assert!(run.trajectory.states.iter().flatten().all(|x| *x == 0.0));
        assert_eq!(run.report.iterations[0].eulerian_residual, Some(0.0));
    }

    #[test]
    fn small_data_contracts() {
        let grid = g(8);
        let (a0, u0) = mode_data(grid, 1e-3, 2.0);
        let cfg = SolverConfig { alpha: 2e-3, t_end: 1.0, steps: 16, ..SolverConfig::default() };
        let prob = GlobalProblem::new(a0, u0, cfg).unwrap();
        let run = picard_global(&prob).unwrap();
        assert!(run.report.converged);
        assert!(run.report.iterations.len() <= 8);
        assert!(run.report.max_contraction().unwrap() <= 0.5);
        let inv = run.report.invariants;
        assert!(inv.density <= 1e-14 && inv.mass <= 1e-13 && inv.inverse <= 1e-10, "{inv:?}");
        assert!(run.report.min_density() > 0.99);
    }

    #[test]
    fn seeds_reach_the_same_fixed_point() {
        let grid = g(8);
        let (a0, u0) = mode_data(grid, 1e-3, 2.0);
        let cfg = SolverConfig { alpha: 2e-3, t_end: 1.0, steps: 16, contraction_tol: 1e-12, ..SolverConfig::default() };
        let prob = GlobalProblem::new(a0, u0, cfg).unwrap();
        let a = picard_global(&prob).unwrap();
        let mut seed = a.rescaled.clone();
        seed.states.iter_mut().skip(1).for_each(|s| s.iter_mut().for_each(|v| *v *= 1.5));
        let b = picard_global_from(&prob, Some(&seed)).unwrap();
        let diff = prob.norms.ep_norm(&trajectory_difference(&a.rescaled, &b.rescaled), prob.c_weight).unwrap().total;
        let size = prob.norms.ep_norm(&a.rescaled, prob.c_weight).unwrap().total;
        assert!(diff <= 10.0 * cfg.contraction_tol * size, "{diff} vs {size}");
    }

    #[test]
    fn runaway_iterates_are_divergence_not_precondition() {
        let grid = g(12);
        let u = VectorField::from_fn(grid, |x, c| {
            let (k0, k1) = if c == 0 { (2.0, 1.0) } else { (1.0, 2.0) };
            (k0 * PI * x[0]).sin() * (k1 * PI * x[1]).sin()
        });
        let norms = StateNorms::new(&grid, 2.0).unwrap();
        let u = u.scaled(0.3 / norms.velocity(&u.data, 0.0).unwrap());
        let cfg = SolverConfig {
            alpha: 0.99,
            epsilon_du: 100.0,
            t_end: 1.0,
            steps: 32,
            viscosity: ViscosityLaw::constant(0.01, 0.0),
            ..SolverConfig::default()
        };
        let prob = GlobalProblem::new(ScalarField::zeros(grid), u, cfg).unwrap();
        assert!(matches!(picard_global(&prob), Err(Error::Divergence(_))));
    }

    #[test]
    fn corrupted_velocity_raises_residual() {
        let grid = g(12);
        let (a0, u0) = mode_data(grid, 1e-3, 2.0);
        let cfg = SolverConfig { alpha: 2e-3, t_end: 1.0, steps: 32, viscosity: ViscosityLaw::constant(0.1, 0.0), ..SolverConfig::default() };
        let prob = GlobalProblem::new(a0, u0, cfg).unwrap();
        let run = picard_global(&prob).unwrap();
        let clean = eulerian_residual(&prob, &run.rescaled).unwrap();
        let mut bad = run.rescaled.clone();
        let n = grid.len();
        bad.states.iter_mut().for_each(|s| s[n..].iter_mut().for_each(|v| *v *= 1.1));
        let dirty = eulerian_residual(&prob, &bad).unwrap();
        assert!(dirty.total >= 10.0 * clean.total, "{} vs {}", dirty.total, clean.total);
    }

    fn local(n: usize, rho0: impl Fn(&[f64]) -> f64, mode: LocalMode, cfg: SolverConfig) -> LocalProblem {
        let grid = g(n);
        let u0 = VectorField::from_fn(grid, |x, c| 0.2 * (PI * x[0]).sin() * (PI * x[1]).sin() * (1.0 - c as f64));
        LocalProblem::new(ScalarField::from_fn(grid, rho0), u0, mode, cfg).unwrap()
    }

    #[test]
    fn local_rhs_identity_flow_is_pressure_only() {
        let grid = g(10);
        let cfg = SolverConfig { pressure: Pressure::new(2.0, 1.4).unwrap(), ..SolverConfig::default() };
        let prob = local(10, |x| 1.0 + 0.3 * bump(x), LocalMode::GeneralDensity, cfg);
        let v = VectorField::zeros(grid);
        let rhs = assemble_local_rhs(&prob, &v, &v, &FlowMap::identity(grid)).unwrap();
        let p = prob.rho0.map(|r| cfg.pressure.value(r));
        let gp = grid::gradient(&p, Ghost::Extrapolate);
        let expect: Vec<f64> = gp.data.iter().enumerate().map(|(i, x)| -x * (1.0 / prob.rho0.values[i % grid.len()])).collect();
        assert_eq!(rhs.g_bar.data, expect);
        assert!(rhs.g_terms[0].1.data.iter().chain(&rhs.g_terms[1].1.data).all(|x| *x == 0.0));
    }

    #[test]
    fn constant_pressure_drops_h4() {
        let grid = g(10);
        let cfg = SolverConfig { alpha: 0.5, pressure: Pressure::new(0.0, 1.0).unwrap(), ..SolverConfig::default() };
        let prob = local(10, |x| 1.0 + 0.01 * bump(x), LocalMode::SmallVariation, cfg);
        let (_, _, v, vt, flow) = midpoint_inputs(grid, 0.05);
        let rhs = assemble_local_rhs(&prob, &v, &vt, &flow).unwrap();
        assert!(rhs.g_terms[3].1.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn general_mode_with_unit_density_drops_h1() {
        let grid = g(10);
        let cfg = SolverConfig { alpha: 0.5, viscosity: ViscosityLaw { mu: 0.8, lambda: 0.1, exponent: 1.0 }, ..SolverConfig::default() };
        let small = local(10, |_| 1.0, LocalMode::SmallVariation, cfg);
        let general = local(10, |_| 1.0, LocalMode::GeneralDensity, cfg);
        let (_, _, v, vt, flow) = midpoint_inputs(grid, 0.05);
        let a = assemble_local_rhs(&small, &v, &vt, &flow).unwrap();
        let b = assemble_local_rhs(&general, &v, &vt, &flow).unwrap();
        let h1 = &a.g_terms[0].1;
        for i in 0..a.g_bar.data.len() {
            let without: f64 = a.g_terms[1..].iter().map(|(_, t)| t.data[i]).sum();
            assert_eq!(b.g_bar.data[i], without);
            assert_eq!(a.g_bar.data[i], without + h1.data[i]);
        }
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let grid = g(8);
        let prob = LocalProblem::new(
            ScalarField::constant(grid, 1.0),
            VectorField::zeros(grid),
            LocalMode::GeneralDensity,
            SolverConfig { t_end: 0.5, steps: 8, ..SolverConfig::default() },
        )
        .unwrap();
        let run = picard_local(&prob).unwrap();
        assert!(run.report.converged);
        assert_eq!(run.report.iterations.len(), 1);
        assert!(run.trajectory.states.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn large_density_variation_converges() {
        let cfg = SolverConfig { t_end: 0.5, steps: 16, pressure: Pressure::new(1.0, 1.4).unwrap(), ..SolverConfig::default() };
        let prob = local(12, |x| 1.0 + 0.5 * bump(x), LocalMode::GeneralDensity, cfg);
        let run = picard_local(&prob).unwrap();
        assert!(run.report.converged, "{:?}", run.report.iterations);
        assert!(run.report.min_density() > 0.0);
        assert!(run.report.t_end <= 0.5);
        let inv = run.report.invariants;
        assert!(inv.density <= 1e-14 && inv.mass <= 1e-13 && inv.inverse <= 1e-10, "{inv:?}");
    }

    #[test]
    fn modes_agree_for_small_variation() {
        let cfg = SolverConfig { alpha: 0.5, t_end: 0.25, steps: 16, contraction_tol: 1e-12, ..SolverConfig::default() };
        let a = picard_local(&local(10, |x| 1.0 + 1e-3 * bump(x), LocalMode::SmallVariation, cfg)).unwrap();
        let b = picard_local(&local(10, |x| 1.0 + 1e-3 * bump(x), LocalMode::GeneralDensity, cfg)).unwrap();
        assert_eq!(a.report.t_end, b.report.t_end);
        let scale = b.trajectory.states.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a
            .trajectory
            .states
            .iter()
            .flatten()
            .zip(b.trajectory.states.iter().flatten())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err <= 1e-4 * scale, "{err} vs {scale}");
    }

    #[test]
    fn small_mode_rejects_large_variation() {
        let grid = g(8);
        let r = LocalProblem::new(
            ScalarField::from_fn(grid, |x| 1.0 + 0.5 * bump(x)),
            VectorField::zeros(grid),
            LocalMode::SmallVariation,
            SolverConfig { alpha: 0.01, ..SolverConfig::default() },
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
        let r = LocalProblem::new(ScalarField::constant(grid, 0.0), VectorField::zeros(grid), LocalMode::GeneralDensity, SolverConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn clamp_bounded_and_odd(z in -10.0f64..10.0, w in 0.01f64..0.45) {
            let c = SmoothClamp { width: w };
            let v = c.apply(z);
            prop_assert!(v.abs() <= 1.6 * w + 1e-15);
            prop_assert!((c.apply(-z) + v).abs() <= 1e-15);
            prop_assert!(v.abs() <= z.abs() + 1e-15);
        }
    }
}
