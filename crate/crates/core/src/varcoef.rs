//! Variable-coefficient Lamé flow `u_t + rho^{-1} K(mu, lambda) u = f`:
//! partitions of unity with frozen coefficients, the oscillation-driven
//! choice of the patch size, the continuity method in `theta`, and
//! patchwise maximal-regularity reports.

use crate::besov::{BesovParams, DyadicFilterBank, ExtensionMode};
use crate::error::{arg, Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::lagrangian::{interpolate, Extension};
use crate::lame::{assemble_variable, check_ellipticity};
use crate::semigroup::taylor::{solve_linear, PolyPath, TaylorGrid};
use crate::semigroup::{solve_cauchy, Forcing, LinearOperator, Trajectory};
use crate::sparse;
use serde::{Deserialize, Serialize};

/// Half-width of the transition zone of the base bump, in units of `delta`.
const RAMP: f64 = 0.25;
/// Tolerance on the partition-of-unity residual.
pub const PARTITION_TOL: f64 = 1e-12;
/// Default oscillation threshold for [`choose_delta`].
pub const OSCILLATION_EPS: f64 = 0.05;
/// Initial homotopy step.
pub const THETA_STEP: f64 = 0.25;
const THETA_STEP_MIN: f64 = 1.0 / 64.0;
const CONTINUITY_TOL: f64 = 1e-11;
const CONTINUITY_MAX_ITERS: usize = 200;

/// Quintic smoothstep `6t^5 - 15t^4 + 10t^3` clamped to `[0, 1]`, with its
/// first two derivatives. `S(t) + S(1 - t) = 1`.
fn smoothstep(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let t2 = t * t;
        (t2 * t * (10.0 - 15.0 * t + 6.0 * t2), 30.0 * t2 * (1.0 - t) * (1.0 - t), 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t))
    }
}

/// One-dimensional bump equal to 1 on `|s| <= flat` and 0 on `|s| >= flat + 2 RAMP`,
/// with derivatives in `s`.
fn bump1(s: f64, flat: f64) -> (f64, f64, f64) {
    let w = 2.0 * RAMP;
    let (v, d1, d2) = smoothstep((flat + w - s.abs()) / w);
    let sg = s.signum();
    (v, -sg * d1 / w, d2 / (w * w))
}

/// Flat radius (in units of `delta`) of the three nested bump families.
const FLAT_PHI: f64 = 0.5 - RAMP;
const FLAT_CHECK: f64 = FLAT_PHI + 2.0 * RAMP;
const FLAT_TILDE: f64 = FLAT_CHECK + 2.0 * RAMP;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBounds {
    /// `max_k ||grad^a phi_k||_inf * delta^a` for `a = 0, 1, 2`.
    pub c: [f64; 3],
    /// Largest raw gradient sup-norm (no `delta` scaling).
    pub grad_sup: f64,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub grid: Grid,
    pub delta: f64,
    pub centers: Vec<[f64; 3]>,
    pub phi: Vec<ScalarField>,
    pub phi_check: Vec<ScalarField>,
    pub phi_tilde: Vec<ScalarField>,
    /// `grad phi_k`.
    pub grad_phi: Vec<VectorField>,
    pub unity_residual: f64,
    pub bounds: DerivativeBounds,
}

impl Partition {
    pub fn count(&self) -> usize {
        self.centers.len()
    }
}

/// Tensor bump at `x` around `center` with flat radius `flat`: value,
/// gradient and the largest second partial.
fn tensor_bump(x: &[f64], center: &[f64], delta: f64, flat: f64) -> (f64, [f64; 3], f64) {
    let d = x.len();
    let parts: Vec<(f64, f64, f64)> = (0..d).map(|a| bump1((x[a] - center[a]) / delta, flat)).collect();
    let value: f64 = parts.iter().map(|p| p.0).product();
    let mut grad = [0.0; 3];
    let mut hess: f64 = 0.0;
    for a in 0..d {
        let others: f64 = (0..d).filter(|&b| b != a).map(|b| parts[b].0).product();
        grad[a] = parts[a].1 * others / delta;
        for b in 0..d {
            let h = if a == b {
                parts[a].2 * others
            } else {
                let rest: f64 = (0..d).filter(|&c| c != a && c != b).map(|c| parts[c].0).product();
                parts[a].1 * parts[b].1 * rest
            };
            hess = hess.max(h.abs() / (delta * delta));
        }
    }
    (value, grad, hess)
}

/// Partition of unity from `delta`-spaced translates of a tensor quintic
/// bump, keeping the translates that meet a grid node.
pub fn build_partition(grid: &Grid, delta: f64) -> Result<Partition> {
    let d = grid.dim();
    let lmin = grid.lengths().iter().cloned().fold(f64::INFINITY, f64::min);
    if !(delta > 0.0) || delta > lmin / 4.0 * (1.0 + 1e-12) {
        return arg(format!("delta must lie in (0, {}], got {delta}", lmin / 4.0));
    }
    let n = grid.len();
    let reach = FLAT_PHI + 2.0 * RAMP;
    let counts: Vec<usize> = (0..d).map(|a| (grid.lengths()[a] / delta).ceil() as usize + 1).collect();
    let total: usize = counts.iter().product();
    let mut centers = Vec::new();
    let mut phi = Vec::new();
    let mut phi_check = Vec::new();
    let mut phi_tilde = Vec::new();
    let mut grad_phi = Vec::new();
    let mut c = [0.0; 3];
    let mut grad_sup: f64 = 0.0;
    let mut hess_sup: f64 = 0.0;
    let mut val_sup: f64 = 0.0;
    for lin in 0..total {
        let mut r = lin;
        let mut center = [0.0; 3];
        for a in 0..d {
            center[a] = (r % counts[a]) as f64 * delta;
            r /= counts[a];
        }
        let meets = (0..n).any(|k| {
            let x = grid.coords(k);
            (0..d).all(|a| (x[a] - center[a]).abs() < reach * delta)
        });
        if !meets {
            continue;
        }
        let mut f = ScalarField::zeros(*grid);
        let mut g = VectorField::zeros(*grid);
        for k in 0..n {
            let x = grid.coords(k);
            let (v, gr, h) = tensor_bump(&x[..d], &center[..d], delta, FLAT_PHI);
            f.values[k] = v;
            for a in 0..d {
                g.component_mut(a)[k] = gr[a];
            }
            val_sup = val_sup.max(v.abs());
            grad_sup = grad_sup.max((0..d).map(|a| gr[a] * gr[a]).sum::<f64>().sqrt());
            hess_sup = hess_sup.max(h);
        }
        let check = ScalarField::from_fn(*grid, |x| tensor_bump(x, &center[..d], delta, FLAT_CHECK).0);
        let tilde = ScalarField::from_fn(*grid, |x| tensor_bump(x, &center[..d], delta, FLAT_TILDE).0);
        centers.push(center);
        phi.push(f);
        phi_check.push(check);
        phi_tilde.push(tilde);
        grad_phi.push(g);
    }
    let mut sum = vec![0.0; n];
    for f in &phi {
        sum.iter_mut().zip(&f.values).for_each(|(s, v)| *s += v);
    }
    let unity_residual = sum.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    if unity_residual > PARTITION_TOL {
        return Err(Error::Numerical(format!("partition of unity residual {unity_residual:.3e}")));
    }
    for k in 0..phi.len() {
        for i in 0..n {
            if phi[k].values[i] > 0.0 && phi_check[k].values[i] != 1.0 {
                return Err(Error::Numerical("enlarged bump is not 1 on the support".into()));
            }
            if phi_check[k].values[i] > 0.0 && phi_tilde[k].values[i] != 1.0 {
                return Err(Error::Numerical("outer bump is not 1 on the enlarged support".into()));
            }
        }
    }
    c[0] = val_sup;
    c[1] = grad_sup * delta;
    c[2] = hess_sup * delta * delta;
    Ok(Partition {
        grid: *grid,
        delta,
        centers,
        phi,
        phi_check,
        phi_tilde,
        grad_phi,
        unity_residual,
        bounds: DerivativeBounds { c, grad_sup },
    })
}

/// Largest `||phi_k||_{B^{d/p}}` and `delta ||grad phi_k||_{B^{d/p}}` over patches.
pub fn partition_besov_bounds(part: &Partition, p: f64) -> Result<(f64, f64)> {
    let bank = DyadicFilterBank::new(&part.grid, ExtensionMode::EvenReflection)?;
    let params = BesovParams::critical(p, part.grid.dim())?;
    let mut a: f64 = 0.0;
    let mut b: f64 = 0.0;
    for (f, g) in part.phi.iter().zip(&part.grad_phi) {
        a = a.max(bank.besov_norm(f, &params)?);
        b = b.max(part.delta * bank.besov_norm(g, &params)?);
    }
    Ok((a, b))
}

// ---- coefficients --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientFields {
    pub rho: ScalarField,
    pub mu: ScalarField,
    pub lam: ScalarField,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientAggregates {
    /// `1 + ||lambda / mu||_inf`.
    pub zeta: f64,
    /// `inf mu / rho`.
    pub mu_rho_min: f64,
    /// `sup mu / rho`.
    pub mu_rho_max: f64,
    pub rho_min: f64,
}

impl CoefficientFields {
    pub fn new(rho: ScalarField, mu: ScalarField, lam: ScalarField) -> Result<Self> {
        if rho.grid != mu.grid || rho.grid != lam.grid {
            return arg("coefficient fields live on different grids");
        }
        check_ellipticity(&rho.values, &mu.values, &lam.values)?;
        Ok(CoefficientFields { rho, mu, lam })
    }

    pub fn constant(grid: Grid, rho: f64, mu: f64, lam: f64) -> Result<Self> {
        Self::new(ScalarField::constant(grid, rho), ScalarField::constant(grid, mu), ScalarField::constant(grid, lam))
    }

    pub fn grid(&self) -> &Grid {
        &self.rho.grid
    }

    pub fn aggregates(&self) -> CoefficientAggregates {
        let n = self.rho.values.len();
        let mut agg = CoefficientAggregates { zeta: 1.0, mu_rho_min: f64::INFINITY, mu_rho_max: 0.0, rho_min: f64::INFINITY };
        let mut ratio: f64 = 0.0;
        for k in 0..n {
            let (r, m, l) = (self.rho.values[k], self.mu.values[k], self.lam.values[k]);
            ratio = ratio.max((l / m).abs());
            agg.mu_rho_min = agg.mu_rho_min.min(m / r);
            agg.mu_rho_max = agg.mu_rho_max.max(m / r);
            agg.rho_min = agg.rho_min.min(r);
        }
        agg.zeta = 1.0 + ratio;
        agg
    }

    /// `(rho, mu, lambda)` at `x`, read by multilinear interpolation with
    /// nearest-node extension.
    pub fn frozen(&self, x: &[f64]) -> (f64, f64, f64) {
        let g = self.grid();
        let at = |f: &ScalarField| interpolate(g, &f.values, x, Extension::Reflect).0;
        (at(&self.rho), at(&self.mu), at(&self.lam))
    }

    /// Coefficients on the homotopy `rho_t = 1 - t + t rho`,
    /// `mu_t = 1 - t + t mu`, `lambda_t = t lambda`.
    pub fn at_theta(&self, theta: f64) -> Result<CoefficientFields> {
        let lin = |f: &ScalarField, base: f64| f.map(|v| (1.0 - theta) * base + theta * v);
        CoefficientFields::new(lin(&self.rho, 1.0), lin(&self.mu, 1.0), lin(&self.lam, 0.0))
    }

    pub fn operator(&self) -> Result<LinearOperator> {
        assemble_variable(self.grid(), &self.rho, &self.mu, &self.lam)
    }

    pub fn is_constant(&self) -> bool {
        [&self.rho, &self.mu, &self.lam].iter().all(|f| f.values.iter().all(|v| *v == f.values[0]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub delta: f64,
    pub patches: usize,
    /// Largest of the three oscillation norms on each patch.
    pub margins: Vec<f64>,
    pub max_margin: f64,
    /// `(delta, max_margin)` for every size tried.
    pub history: Vec<(f64, f64)>,
}

/// Per-patch oscillation norms of the coefficients against their frozen values.
pub fn oscillation_margins(coeffs: &CoefficientFields, part: &Partition, p: f64) -> Result<Vec<f64>> {
    let g = coeffs.grid();
    let bank = DyadicFilterBank::new(g, ExtensionMode::EvenReflection)?;
    let params = BesovParams::critical(p, g.dim())?;
    let mut out = Vec::with_capacity(part.count());
    for (c, t) in part.centers.iter().zip(&part.phi_tilde) {
        let (rk, mk, lk) = coeffs.frozen(&c[..g.dim()]);
        let a = bank.besov_norm(&t.zip(&coeffs.rho, |w, r| w * (1.0 - r / rk)), &params)?;
        let b = bank.besov_norm(&t.zip(&coeffs.mu, |w, m| w * (m - mk)), &params)? / mk;
        let l = bank.besov_norm(&t.zip(&coeffs.lam, |w, l| w * (l - lk)), &params)? / mk;
        out.push(a.max(b).max(l));
    }
    Ok(out)
}

/// Halves `delta` from a quarter of the shortest side until every patch
/// oscillation is at most `epsilon`.
pub fn choose_delta(coeffs: &CoefficientFields, epsilon: f64, p: f64) -> Result<DeltaReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return arg("epsilon must lie in (0, 1)");
    }
    let g = coeffs.grid();
    let lmin = g.lengths().iter().cloned().fold(f64::INFINITY, f64::min);
    let hmax = g.spacing().iter().cloned().fold(0.0, f64::max);
    let mut delta = lmin / 4.0;
    let mut history = Vec::new();
    loop {
        if delta < 2.0 * hmax {
            return Err(Error::Resolution(format!(
                "patch size fell below two grid cells before the oscillation reached {epsilon}; last {:?}",
                history.last()
            )));
        }
        let part = build_partition(g, delta)?;
        let margins = oscillation_margins(coeffs, &part, p)?;
        let max_margin = margins.iter().cloned().fold(0.0, f64::max);
        history.push((delta, max_margin));
        if max_margin <= epsilon {
            return Ok(DeltaReport { delta, patches: part.count(), margins, max_margin, history });
        }
        delta *= 0.5;
    }
}

// ---- solvers -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Continuity,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaStep {
    pub from: f64,
    pub to: f64,
    pub iterations: usize,
    /// Last observed ratio of successive updates.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityInfo {
    pub steps: Vec<ThetaStep>,
    pub halvings: usize,
}

#[derive(Clone, Debug)]
pub struct VarcoefRun {
    pub trajectory: Trajectory,
    pub continuity: Option<ContinuityInfo>,
}

/// Solves `u_t + L u = f`, `u(0) = u0`, with `f` constant on each step.
pub fn solve_varcoef(
    coeffs: &CoefficientFields,
    forcing: &Forcing,
    u0: &VectorField,
    t_end: f64,
    steps: usize,
    method: Method,
) -> Result<VarcoefRun> {
    if u0.grid != *coeffs.grid() {
        return arg("initial velocity grid does not match the coefficients");
    }
    if method == Method::Direct || coeffs.is_constant() {
        let op = coeffs.operator()?;
        let trajectory = solve_cauchy(&op, &u0.data, forcing, t_end, steps)?;
        let continuity = (method == Method::Continuity).then(|| ContinuityInfo { steps: vec![], halvings: 0 });
        return Ok(VarcoefRun { trajectory, continuity });
    }
    if steps < 8 {
        return arg("at least 8 time steps are required");
    }
    if !(t_end > 0.0) {
        return arg("final time must be positive");
    }
    let dim = u0.data.len();
    if let Forcing::Midpoint(v) = forcing {
        if v.len() != steps || v.iter().any(|f| f.len() != dim) {
            return arg("forcing must hold one sample per step");
        }
    }
    continuity(coeffs, forcing, &u0.data, t_end, steps)
}

fn continuity(coeffs: &CoefficientFields, forcing: &Forcing, u0: &[f64], t_end: f64, steps: usize) -> Result<VarcoefRun> {
    let dim = u0.len();
    for k in 0..=16 {
        coeffs.at_theta(k as f64 / 16.0)?;
    }
    let norm = coeffs.at_theta(0.0)?.operator()?.norm_inf().max(coeffs.operator()?.norm_inf());
    let tgrid = TaylorGrid::for_norm(t_end, steps, norm);
    let f_path = match forcing {
        Forcing::Zero => PolyPath::zeros(dim, tgrid),
        Forcing::Midpoint(v) => PolyPath::piecewise_constant(v, tgrid)?,
    };
    let mut theta0 = 0.0;
    let mut op0 = coeffs.at_theta(0.0)?.operator()?;
    let mut u_path = {
        let m = op0.matrix().clone();
        solve_linear(&|x, y| sparse::matvec_into(&m, x, y), &f_path, u0)
    };
    let mut step = THETA_STEP;
    let mut info = ContinuityInfo { steps: vec![], halvings: 0 };
    while theta0 < 1.0 {
        let theta = (theta0 + step).min(1.0);
        let op = coeffs.at_theta(theta)?.operator()?;
        let diff = sparse::lincomb(1.0, op0.matrix(), -1.0, op.matrix());
        match continuity_step(op0.matrix(), &diff, &f_path, &u_path, u0, steps) {
            Ok((path, iterations, ratio)) => {
                info.steps.push(ThetaStep { from: theta0, to: theta, iterations, ratio });
                u_path = path;
                theta0 = theta;
                op0 = op;
            }
            Err(Error::Divergence(msg)) => {
                step *= 0.5;
                info.halvings += 1;
                if step < THETA_STEP_MIN {
                    return Err(Error::Divergence(format!("continuity step underflow at theta = {theta0}: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let dt = t_end / steps as f64;
    let trajectory = Trajectory {
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        states: u_path.coarse_values(u0, steps),
    };
    Ok(VarcoefRun { trajectory, continuity: Some(info) })
}

/// Fixed point of `v -> u` with `u_t + L0 u = f + (L0 - L) v`.
fn continuity_step(
    l0: &sparse::Csr,
    diff: &sparse::Csr,
    f_path: &PolyPath,
    start: &PolyPath,
    u0: &[f64],
    steps: usize,
) -> Result<(PolyPath, usize, f64)> {
    let dim = u0.len();
    let apply = |x: &[f64], y: &mut [f64]| sparse::matvec_into(l0, x, y);
    let mut v = start.clone();
    let mut prev = v.coarse_values(u0, steps);
    let mut last_change = f64::INFINITY;
    let mut ratio = 0.0;
    for it in 1..=CONTINUITY_MAX_ITERS {
        let mut h = f_path.clone();
        h.axpy(1.0, &v.map(dim, |x, y| sparse::matvec_into(diff, x, y)));
        let u = solve_linear(&apply, &h, u0);
        drop(h);
        let coarse = u.coarse_values(u0, steps);
        let scale = coarse.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        let delta = coarse.iter().flatten().zip(prev.iter().flatten()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let change = if scale > 0.0 { delta / scale } else { 0.0 };
        if change <= CONTINUITY_TOL {
            return Ok((u, it, ratio));
        }
        if last_change.is_finite() {
            ratio = change / last_change;
            if ratio >= 1.0 {
                return Err(Error::Divergence(format!("update ratio {ratio:.3} at iteration {it}")));
            }
        }
        last_change = change;
        prev = coarse;
        v = u;
    }
    Err(Error::Divergence("continuity fixed point did not reach tolerance".into()))
}

// ---- patchwise estimates -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub sup_state: f64,
    pub time_derivative: f64,
    pub top_regularity: f64,
    /// `||u0|| + int ||f||` in patched norms.
    pub data: f64,
    /// `mu_*^{-1} delta^{-2} rho_*^{-2} zeta^2 ||(lambda, mu)||^2 T`.
    pub exponent: f64,
    /// Smallest `C` with `lhs <= C data exp(C exponent)`.
    pub c_meas: Option<f64>,
    /// Range of `||u||_{s,phi} / ||u||_s` over the stored states.
    pub equivalence: (f64, f64),
}

/// `sum_k ||phi_k u||_{B^s}` with odd reflection (Dirichlet fields).
pub fn patched_norm(part: &Partition, bank: &DyadicFilterBank, params: &BesovParams, u: &[f64]) -> Result<f64> {
    let g = part.grid;
    let n = g.len();
    let mut total = 0.0;
    let mut buf = vec![0.0; u.len()];
    for f in &part.phi {
        for (c, chunk) in buf.chunks_mut(n).enumerate() {
            for i in 0..n {
                chunk[i] = f.values[i] * u[c * n + i];
            }
        }
        if buf.iter().all(|v| *v == 0.0) {
            continue;
        }
        total += bank.besov_norm(&VectorField { grid: g, data: buf.clone() }, params)?;
    }
    Ok(total)
}

pub fn patch_estimate(
    coeffs: &CoefficientFields,
    part: &Partition,
    traj: &Trajectory,
    forcing: &Forcing,
    p: f64,
) -> Result<PatchReport> {
    let g = *coeffs.grid();
    if part.grid != g {
        return arg("partition and coefficients live on different grids");
    }
    let d = g.dim();
    let bank = DyadicFilterBank::new(&g, ExtensionMode::OddReflection)?;
    let s = d as f64 / p - 1.0;
    let params = BesovParams::new(s, p, 1.0, d)?;
    let top = params.with_s(s + 2.0);
    let agg = coeffs.aggregates();
    let steps = traj.states.len() - 1;
    let dt = traj.dt();
    let mut sup_state: f64 = 0.0;
    let mut tops = Vec::with_capacity(steps + 1);
    let mut eq_lo = f64::INFINITY;
    let mut eq_hi: f64 = 0.0;
    for u in &traj.states {
        let pn = patched_norm(part, &bank, &params, u)?;
        sup_state = sup_state.max(pn);
        tops.push(agg.mu_rho_min * patched_norm(part, &bank, &top, u)?);
        let plain = bank.besov_norm(&VectorField { grid: g, data: u.clone() }, &params)?;
        if plain > 0.0 {
            eq_lo = eq_lo.min(pn / plain);
            eq_hi = eq_hi.max(pn / plain);
        }
    }
    let mut time_derivative = 0.0;
    for k in 0..steps {
        let du: Vec<f64> = traj.states[k + 1].iter().zip(&traj.states[k]).map(|(a, b)| (a - b) / dt).collect();
        time_derivative += dt * patched_norm(part, &bank, &params, &du)?;
    }
    let top_regularity = dt * (0.5 * tops[0] + tops[1..steps].iter().sum::<f64>() + 0.5 * tops[steps]);
    let mut data = patched_norm(part, &bank, &params, &traj.states[0])?;
    if let Forcing::Midpoint(v) = forcing {
        for f in v {
            data += dt * patched_norm(part, &bank, &params, f)?;
        }
    }
    let even = DyadicFilterBank::new(&g, ExtensionMode::EvenReflection)?;
    let crit = BesovParams::critical(p, d)?;
    let coef_norm = even.besov_norm(&centered(&coeffs.lam), &crit)? + even.besov_norm(&centered(&coeffs.mu), &crit)?;
    let t_end = traj.times[steps];
    let exponent = t_end * agg.zeta * agg.zeta * coef_norm * coef_norm
        / (agg.mu_rho_min * part.delta * part.delta * agg.rho_min * agg.rho_min);
    let lhs = sup_state + time_derivative + top_regularity;
    let c_meas = (data > 0.0).then(|| smallest_constant(lhs, data, exponent));
    let equivalence = if eq_lo.is_finite() { (eq_lo, eq_hi) } else { (0.0, 0.0) };
    Ok(PatchReport { sup_state, time_derivative, top_regularity, data, exponent, c_meas, equivalence })
}

/// Homogeneous norms do not see constants; only the fluctuation enters the exponent.
fn centered(f: &ScalarField) -> ScalarField {
    let m = f.values.iter().sum::<f64>() / f.values.len() as f64;
    ScalarField { grid: f.grid, values: f.values.iter().map(|v| v - m).collect() }
}

/// Smallest `C > 0` with `lhs <= C data e^{C e}` (the right side increases in `C`).
fn smallest_constant(lhs: f64, data: f64, e: f64) -> f64 {
    let f = |c: f64| c * data * (c * e).exp() - lhs;
    if f(0.0) >= 0.0 {
        return 0.0;
    }
    let mut hi = (lhs / data).max(1e-300);
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lame::heat_maxreg_solve;
    use crate::lincns::{decay_measure, l2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bump(x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        (-r2 / 0.02).exp()
    }

    #[test]
    fn smoothstep_symmetry() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert!((smoothstep(t).0 + smoothstep(1.0 - t).0 - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn partition_of_unity_on_32() {
        let g = Grid::cube(2, 32, 1.0).unwrap();
        let p = build_partition(&g, 0.25).unwrap();
        assert_eq!(p.count(), 25);
        assert!(p.unity_residual <= 1e-12);
        let (a, b) = partition_besov_bounds(&p, 2.0).unwrap();
        assert!(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0);
    }

    #[test]
    fn gradient_scales_inversely_with_delta() {
        let g = Grid::cube(2, 32, 1.0).unwrap();
        let a = build_partition(&g, 0.25).unwrap();
        let b = build_partition(&g, 0.125).unwrap();
        let r = b.bounds.grad_sup / a.bounds.grad_sup;
        assert!((r / 2.0 - 1.0).abs() <= 0.2, "ratio {r}");
    }

    #[test]
    fn partition_rejects_oversized_delta() {
        let g = Grid::cube(2, 16, 1.0).unwrap();
        assert!(build_partition(&g, 1.0).is_err());
        assert!(build_partition(&g, 0.0).is_err());
    }

    #[test]
    fn three_dimensional_partition() {
        let g = Grid::cube(3, 8, 1.0).unwrap();
        let p = build_partition(&g, 0.25).unwrap();
        assert!(p.unity_residual <= 1e-12);
    }

    #[test]
    fn constant_coefficients_keep_initial_delta() {
        let g = Grid::cube(2, 16, 1.0).unwrap();
        let c = CoefficientFields::constant(g, 2.0, 1.5, 0.3).unwrap();
        let r = choose_delta(&c, OSCILLATION_EPS, 2.0).unwrap();
        assert_eq!(r.delta, 0.25);
        assert!(r.max_margin <= 1e-14);
    }

    #[test]
    fn oscillation_decreases_with_delta() {
        let g = Grid::cube(2, 32, 1.0).unwrap();
        let rho = ScalarField::from_fn(g, |x| 1.0 + 0.3 * (2.0 * PI * x[0]).sin());
        let c = CoefficientFields::new(rho, ScalarField::constant(g, 1.0), ScalarField::constant(g, 0.0)).unwrap();
        let mut last = f64::INFINITY;
        for delta in [0.25, 0.125, 0.0625] {
            let part = build_partition(&g, delta).unwrap();
            let m = oscillation_margins(&c, &part, 2.0).unwrap().into_iter().fold(0.0, f64::max);
            assert!(m < last, "delta {delta}: {m} >= {last}");
            last = m;
        }
        let r = choose_delta(&c, 0.3, 2.0).unwrap();
        assert!(r.max_margin <= 0.3);
    }

    #[test]
    fn sharp_ramp_needs_resolution() {
        let ramp = |x: &[f64]| 1.0 + 0.5 * (1.0 + ((x[0] - 0.5) / 0.1).tanh());
        let coarse = Grid::cube(2, 16, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(coarse, ramp),
            ScalarField::constant(coarse, 1.0),
            ScalarField::constant(coarse, 0.0),
        )
        .unwrap();
        assert!(matches!(choose_delta(&c, 0.3, 2.0), Err(Error::Resolution(_))));
        let fine = Grid::cube(2, 64, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(fine, ramp),
            ScalarField::constant(fine, 1.0),
            ScalarField::constant(fine, 0.0),
        )
        .unwrap();
        let r = choose_delta(&c, 0.3, 2.0).unwrap();
        assert!(r.max_margin <= 0.3);
    }

    #[test]
    fn homotopy_stays_elliptic() {
        let g = Grid::cube(2, 8, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(g, |x| 0.2 + x[0]),
            ScalarField::from_fn(g, |x| 0.5 + x[1]),
            ScalarField::constant(g, -0.9),
        )
        .unwrap();
        for k in 0..=20 {
            assert!(c.at_theta(k as f64 / 20.0).is_ok());
        }
    }

    #[test]
    fn constant_coefficients_match_heat_solver() {
        let g = Grid::cube(2, 8, 1.0).unwrap();
        let c = CoefficientFields::constant(g, 1.0, 1.0, 0.5).unwrap();
        let u0 = VectorField::from_fn(g, |x, k| (PI * x[0]).sin() * (PI * x[1]).sin() * (k as f64 + 1.0));
        let run = solve_varcoef(&c, &Forcing::Zero, &u0, 0.5, 16, Method::Continuity).unwrap();
        let op = c.operator().unwrap();
        let heat = heat_maxreg_solve(&op, &u0, &Forcing::Zero, 0.5, 16, 1.0, &BesovParams::new(0.0, 2.0, 1.0, 2).unwrap())
            .unwrap();
        assert_eq!(run.trajectory, heat.trajectory);
    }

    #[test]
    fn continuity_matches_direct() {
        let g = Grid::cube(2, 8, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(g, |x| 1.0 + 0.3 * bump(x)),
            ScalarField::from_fn(g, |x| 1.0 + 0.2 * x[0]),
            ScalarField::constant(g, 0.5),
        )
        .unwrap();
        let u0 = VectorField::from_fn(g, |x, k| (PI * x[0]).sin() * (2.0 * PI * x[1]).sin() * (k as f64 + 1.0));
        let forcing = Forcing::sample(0.5, 16, |t| VectorField::from_fn(g, |x, _| (t * 3.0).cos() * x[0] * (1.0 - x[0])).data);
        let a = solve_varcoef(&c, &forcing, &u0, 0.5, 16, Method::Continuity).unwrap();
        let b = solve_varcoef(&c, &forcing, &u0, 0.5, 16, Method::Direct).unwrap();
        let scale = b.trajectory.states.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a
            .trajectory
            .states
            .iter()
            .flatten()
            .zip(b.trajectory.states.iter().flatten())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err <= 1e-6 * scale, "{err}");
        assert!(a.continuity.unwrap().steps.last().unwrap().to == 1.0);
    }

    #[test]
    fn unforced_decay_matches_spectral_abscissa() {
        let g = Grid::cube(2, 8, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(g, |x| 1.0 + 0.3 * bump(x)),
            ScalarField::constant(g, 0.05),
            ScalarField::constant(g, 0.02),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = VectorField::from_data(g, (0..2 * g.len()).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let run = solve_varcoef(&c, &Forcing::Zero, &u0, 16.0, 128, Method::Direct).unwrap();
        let fit = decay_measure(&run.trajectory, &l2).unwrap();
        let abscissa = c.operator().unwrap().spectral_abscissa().unwrap();
        assert!((fit.rate / abscissa - 1.0).abs() <= 0.05, "{} vs {abscissa}", fit.rate);
    }

    #[test]
    fn patched_norm_of_localized_field() {
        let g = Grid::cube(2, 32, 1.0).unwrap();
        let part = build_partition(&g, 0.25).unwrap();
        let bank = DyadicFilterBank::new(&g, ExtensionMode::OddReflection).unwrap();
        let params = BesovParams::new(0.0, 2.0, 1.0, 2).unwrap();
        // flat region of the patch at (0.5, 0.5) is |x - 0.5| <= 1/16
        let u = VectorField::from_fn(g, |x, _| {
            let r = ((x[0] - 0.5).abs()).max((x[1] - 0.5).abs());
            if r < 0.06 {
                (1.0 - r / 0.06).powi(3)
            } else {
                0.0
            }
        });
        let patched = patched_norm(&part, &bank, &params, &u.data).unwrap();
        let plain = bank.besov_norm(&u, &params).unwrap();
        assert!((patched - plain).abs() <= 1e-10 * plain);
        assert_eq!(patched_norm(&part, &bank, &params, &vec![0.0; u.data.len()]).unwrap(), 0.0);
    }

    #[test]
    fn patch_estimate_reports() {
        let g = Grid::cube(2, 16, 1.0).unwrap();
        let c = CoefficientFields::new(
            ScalarField::from_fn(g, |x| 1.0 + 0.3 * bump(x)),
            ScalarField::constant(g, 1.0),
            ScalarField::constant(g, 0.5),
        )
        .unwrap();
        let u0 = VectorField::from_fn(g, |x, k| (PI * x[0]).sin() * (PI * x[1]).sin() * (k as f64 + 1.0));
        let run = solve_varcoef(&c, &Forcing::Zero, &u0, 0.2, 16, Method::Direct).unwrap();
        let part = build_partition(&g, 0.25).unwrap();
        let r = patch_estimate(&c, &part, &run.trajectory, &Forcing::Zero, 2.0).unwrap();
        assert!(r.c_meas.unwrap() > 0.0);
        assert!(r.equivalence.0 >= 0.5 && r.equivalence.1 <= part.count() as f64);

        let zero = Trajectory { times: run.trajectory.times.clone(), states: vec![vec![0.0; u0.data.len()]; 17] };
        let z = patch_estimate(&c, &part, &zero, &Forcing::Zero, 2.0).unwrap();
        assert_eq!(z.sup_state + z.time_derivative + z.top_regularity + z.data, 0.0);
        assert!(z.c_meas.is_none());
    }

    #[test]
    fn constant_coefficient_constant_is_delta_stable() {
        let g = Grid::cube(2, 16, 1.0).unwrap();
        let c = CoefficientFields::constant(g, 1.0, 1.0, 0.5).unwrap();
        let u0 = VectorField::from_fn(g, |x, k| (PI * x[0]).sin() * (PI * x[1]).sin() * (k as f64 + 1.0));
        let run = solve_varcoef(&c, &Forcing::Zero, &u0, 0.2, 16, Method::Direct).unwrap();
        let a = patch_estimate(&c, &build_partition(&g, 0.25).unwrap(), &run.trajectory, &Forcing::Zero, 2.0).unwrap();
        let b = patch_estimate(&c, &build_partition(&g, 0.125).unwrap(), &run.trajectory, &Forcing::Zero, 2.0).unwrap();
        let r = a.c_meas.unwrap() / b.c_meas.unwrap();
        assert!((0.5..=2.0).contains(&r), "{r}");
    }
}
