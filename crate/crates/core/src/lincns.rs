//! The linearized compressible system `a_t + div u = f`,
//! `u_t + L u + grad a = g`, with mean-free `a` and Dirichlet `u`.
//!
//! State vectors are laid out as `[a; u]` (length `(d+1) N`). The
//! `a`-row is followed by the projection onto mean-free vectors.

use crate::besov::{BesovParams, DyadicFilterBank, ExtensionMode};
use crate::error::{arg, Error, Result};
use crate::grid::{self, Ghost, Grid, ScalarField, VectorField};
use crate::lame::{assemble_lame, LameCoefficients, LameParts};
use crate::semigroup::taylor::{solve_linear, PolyPath, TaylorGrid};
use crate::semigroup::{sectoriality_scan, solve_cauchy, Forcing, LinearOperator, SymmetryHint, Trajectory};
use crate::sparse::{self, Csr};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coupling {
    Full,
    /// Drops the `grad a` and `div u` blocks (ablation).
    Decoupled,
}

#[derive(Clone, Debug)]
pub struct CoupledOperator {
    pub grid: Grid,
    /// Coefficients after the rescaling to unit pressure slope.
    pub coeffs: LameCoefficients,
    /// `c = sqrt(P'(1))`: rates in original time units are `c` times the
    /// rescaled ones.
    pub time_scale: f64,
    pub lame: LinearOperator,
    /// `grad`, `d N x N`, quadratic-extrapolation walls.
    pub grad: Csr,
    /// `div`, `N x d N`, zero walls.
    pub div: Csr,
    pub op: LinearOperator,
}

impl CoupledOperator {
    pub fn a_len(&self) -> usize {
        self.grid.len()
    }
    pub fn u_len(&self) -> usize {
        self.grid.dim() * self.grid.len()
    }
    pub fn dim(&self) -> usize {
        self.a_len() + self.u_len()
    }
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.op.apply(x)
    }
}

/// Assembles the operator with `P'(1) = 1`.
pub fn assemble_coupled(grid: &Grid, coeffs: &LameCoefficients) -> Result<CoupledOperator> {
    assemble_coupled_scaled(grid, coeffs, 1.0, Coupling::Full)
}

/// General pressure slope: `(rho, u)(t) -> (rho~, c u~)(c t)` with
/// `c = sqrt(P'(1))` reduces to unit slope with viscosities divided by `c`.
pub fn assemble_coupled_scaled(
    grid: &Grid,
    coeffs: &LameCoefficients,
    pressure_slope: f64,
    coupling: Coupling,
) -> Result<CoupledOperator> {
    if !(pressure_slope > 0.0) {
        return arg("pressure slope P'(1) must be positive");
    }
    if !coeffs.is_real() {
        return arg("the coupled operator takes real coefficients");
    }
    let c = pressure_slope.sqrt();
    let scaled = LameCoefficients::real(coeffs.mu / c, coeffs.z.re / c)?;
    let lame = assemble_lame(grid, &scaled)?;
    let n = grid.len();
    let m = grid.dim() * n;
    let grad = grid.gradient(Ghost::Extrapolate);
    let div = grid.divergence();
    let lm = lame.matrix().clone();
    let matrix = match coupling {
        Coupling::Full => sparse::block(&[n, m], &[n, m], &[None, Some(&div), Some(&grad), Some(&lm)]),
        Coupling::Decoupled => sparse::block(&[n, m], &[n, m], &[None, None, None, Some(&lm)]),
    };
    let op = LinearOperator::new(matrix, SymmetryHint::General)?.with_mean_projection(0..n)?;
    Ok(CoupledOperator { grid: *grid, coeffs: scaled, time_scale: c, lame, grad, div, op })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinCNSState {
    pub a: ScalarField,
    pub u: VectorField,
}

impl LinCNSState {
    pub fn new(a: ScalarField, u: VectorField) -> Result<Self> {
        if a.grid != u.grid {
            return arg("density and velocity grids differ");
        }
        let mean = grid::mean(&a.values);
        if mean.abs() > 1e-12 * a.max_abs().max(1.0) {
            return arg(format!("density perturbation must be mean-free (mean {mean:.3e})"));
        }
        Ok(LinCNSState { a, u })
    }

    pub fn zeros(grid: Grid) -> Self {
        LinCNSState { a: ScalarField::zeros(grid), u: VectorField::zeros(grid) }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.a.values.clone();
        v.extend_from_slice(&self.u.data);
        v
    }

    pub fn from_slice(grid: Grid, x: &[f64]) -> Result<Self> {
        let n = grid.len();
        if x.len() != (grid.dim() + 1) * n {
            return arg("state length does not match the grid");
        }
        Ok(LinCNSState {
            a: ScalarField::from_values(grid, x[..n].to_vec())?,
            u: VectorField::from_data(grid, x[n..].to_vec())?,
        })
    }

    /// Random smooth-ish state with mean-free density, seeded.
    pub fn random(grid: Grid, seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len();
        let d = grid.dim();
        let a: Vec<f64> = (0..n).map(|_| amplitude * (rng.gen::<f64>() - 0.5)).collect();
        let (_, a) = grid::mean_and_project(&ScalarField::from_values(grid, a).unwrap());
        let u: Vec<f64> = (0..d * n).map(|_| amplitude * (rng.gen::<f64>() - 0.5)).collect();
        LinCNSState { a, u: VectorField::from_data(grid, u).unwrap() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBound {
    /// Smallest real part on the mean-free x Dirichlet subspace (rescaled time).
    pub c: f64,
    /// The same in original time units.
    pub c_original: f64,
    /// Eigenvalue attaining `c`.
    pub extremal: (f64, f64),
}

pub fn spectral_bound(op: &CoupledOperator) -> Result<SpectralBound> {
    let spec = op.op.spectrum()?;
    let e = spec
        .iter()
        .copied()
        .min_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
        .ok_or_else(|| Error::Numerical("empty spectrum".into()))?;
    if !(e.re > 0.0) {
        return Err(Error::Degeneracy(format!(
            "spectral abscissa {:.3e} is not positive (eigenvalue {:.4e}{:+.4e}i)",
            e.re, e.re, e.im
        )));
    }
    Ok(SpectralBound { c: e.re, c_original: e.re * op.time_scale, extremal: (e.re, e.im) })
}

/// `Re a_lambda(u, u) / <-Delta u, u>` for
/// `a_lambda(u, v) = mu <grad u, grad v> + (z + 1/lambda) <div u, div v>`,
/// sampled over random complex `u` and `Re lambda >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub trials: usize,
    pub min_ratio: f64,
    /// `min(mu, mu + z)`.
    pub predicted: f64,
}

pub fn coercivity_probe(grid: &Grid, coeffs: &LameCoefficients, trials: usize, seed: u64) -> Result<CoercivityReport> {
    if !coeffs.is_real() {
        return arg("coercivity probe takes real coefficients");
    }
    let parts = LameParts::new(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    for _ in 0..trials {
        let u: Vec<Complex64> = (0..parts.dim()).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let lam = Complex64::from_polar(10f64.powf(rng.gen_range(-3.0..3.0)), rng.gen_range(-1.0..1.0) * std::f64::consts::FRAC_PI_2);
        let lu = sparse::matvec_complex(&parts.neg_laplacian, &u);
        let bu = sparse::matvec_complex(&parts.grad_div, &u);
        let dot = |x: &[Complex64]| x.iter().zip(&u).map(|(a, b)| a * b.conj()).sum::<Complex64>();
        let grad2 = dot(&lu).re;
        let div2 = dot(&bu).re;
        let form = coeffs.mu * grad2 + (coeffs.z + 1.0 / lam).re * div2;
        min_ratio = min_ratio.min(form / grad2);
    }
    Ok(CoercivityReport { trials, min_ratio, predicted: coeffs.mu.min(coeffs.mu + coeffs.z.re) })
}

/// `sup_k ||lambda (lambda + A)^{-1}||` over `lambda = i 2^k`.
pub fn imaginary_axis_resolvent(op: &CoupledOperator, k_range: std::ops::RangeInclusive<i32>) -> Result<f64> {
    let radii: Vec<f64> = k_range.map(|k| 2f64.powi(k)).collect();
    let rep = sectoriality_scan(&op.op, &[std::f64::consts::FRAC_PI_2], &radii)?;
    if rep.excluded > 0 {
        return Err(Error::Numerical("resolvent singular on the imaginary axis".into()));
    }
    Ok(rep.sup_bound)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Duhamel,
    KShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KShiftInfo {
    pub k: f64,
    pub doublings: usize,
    pub windows: usize,
    pub iterations: usize,
    /// Static estimate of the Neumann contraction factor at the final `K`.
    pub contraction_estimate: f64,
    pub update_ratios: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearRun {
    pub trajectory: Trajectory,
    pub kshift: Option<KShiftInfo>,
}

fn check_forcing(op: &CoupledOperator, forcing: &Forcing, steps: usize) -> Result<()> {
    if let Forcing::Midpoint(v) = forcing {
        if v.len() != steps || v.iter().any(|f| f.len() != op.dim()) {
            return arg("forcing must hold one full state sample per step");
        }
        let n = op.a_len();
        for f in v {
            let mean = grid::mean(&f[..n]);
            let scale = f[..n].iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
            if mean.abs() > 1e-12 * scale {
                return arg("density forcing must be mean-free at every sample");
            }
        }
    }
    Ok(())
}

/// Solves the linearized system with forcing held constant on each step
/// (the midpoint sample). Both strategies solve the same semi-discrete
/// problem exactly up to their tolerances.
pub fn solve_lcns(
    op: &CoupledOperator,
    initial: &LinCNSState,
    forcing: &Forcing,
    t_end: f64,
    steps: usize,
    strategy: Strategy,
) -> Result<LinearRun> {
    check_forcing(op, forcing, steps)?;
    if initial.a.grid != op.grid {
        return arg("initial state grid does not match the operator");
    }
    let x0 = initial.to_vec();
    match strategy {
        Strategy::Duhamel => Ok(LinearRun { trajectory: solve_cauchy(&op.op, &x0, forcing, t_end, steps)?, kshift: None }),
        Strategy::KShift => {
            if steps < 8 {
                return arg("at least 8 time steps are required");
            }
            if !(t_end > 0.0) {
                return arg("final time must be positive");
            }
            let (trajectory, info) = kshift_solve(op, &x0, forcing, t_end, steps)?;
            Ok(LinearRun { trajectory, kshift: Some(info) })
        }
    }
}

const KSHIFT_TOL: f64 = 1e-10;
const KSHIFT_MAX_ITERS: usize = 400;
const KSHIFT_TARGET: f64 = 0.1;
/// Largest `K * window` so the `e^{Kt}` reweighting stays well conditioned.
const KSHIFT_WINDOW_EXPONENT: f64 = 4.0;

fn project_mean(v: &mut [f64]) {
    let m = grid::mean(v);
    v.iter_mut().for_each(|x| *x -= m);
}

/// Power-iteration estimate of `||G K^{-1} P D (K + L)^{-1}||_2`, the
/// zero-frequency size of the Neumann composite.
pub fn kshift_composite_norm(op: &CoupledOperator, k: f64) -> Result<f64> {
    let m = op.u_len();
    let gt = sparse::transpose(&op.grad);
    let dt = sparse::transpose(&op.div);
    let fwd = |x: &[f64]| -> Result<Vec<f64>> {
        let y = op.lame.solve(k, x)?;
        let mut a = sparse::matvec(&op.div, &y);
        project_mean(&mut a);
        Ok(sparse::matvec(&op.grad, &a).iter().map(|v| v / k).collect())
    };
    let bwd = |x: &[f64]| -> Result<Vec<f64>> {
        let mut a: Vec<f64> = sparse::matvec(&gt, x).iter().map(|v| v / k).collect();
        project_mean(&mut a);
        op.lame.solve(k, &sparse::matvec(&dt, &a))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut x: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut sigma = 0.0;
    for _ in 0..60 {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= nx);
        let y = fwd(&x)?;
        let s = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = bwd(&y)?;
        let done = (s - sigma).abs() <= 1e-6 * s;
        sigma = s;
        if done {
            break;
        }
    }
    Ok(sigma)
}

fn kshift_solve(op: &CoupledOperator, x0: &[f64], forcing: &Forcing, t_end: f64, steps: usize) -> Result<(Trajectory, KShiftInfo)> {
    // K starts at twice the composite size at K = 1 and is doubled until the
    // static contraction estimate reaches the target.
    let mut k = (2.0 * kshift_composite_norm(op, 1.0)?).max(1.0);
    let mut est = kshift_composite_norm(op, k)?;
    let mut guard = 0;
    while est > KSHIFT_TARGET && guard < 40 {
        k *= 2.0;
        est = kshift_composite_norm(op, k)?;
        guard += 1;
    }
    let mut doublings = 0;
    loop {
        match kshift_with(op, x0, forcing, t_end, steps, k) {
            Ok((traj, windows, iterations, update_ratios)) => {
                let info = KShiftInfo { k, doublings, windows, iterations, contraction_estimate: est, update_ratios };
                return Ok((traj, info));
            }
            Err(Error::Divergence(msg)) => {
                if doublings == 8 {
                    return Err(Error::Divergence(format!("K-shift iteration not contracting after 8 doublings: {msg}")));
                }
                doublings += 1;
                k *= 2.0;
                est = kshift_composite_norm(op, k)?;
            }
            Err(e) => return Err(e),
        }
    }
}

type WindowResult = (Trajectory, usize, usize, Vec<f64>);

fn kshift_with(op: &CoupledOperator, x0: &[f64], forcing: &Forcing, t_end: f64, steps: usize, k: f64) -> Result<WindowResult> {
    let need = ((k * t_end / KSHIFT_WINDOW_EXPONENT).ceil() as usize).max(1);
    let windows = (need..=steps).find(|w| steps % w == 0).unwrap_or(steps);
    let per = steps / windows;
    let tw = t_end / windows as f64;
    let dt = t_end / steps as f64;
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    let mut total_iters = 0;
    let mut ratios = Vec::new();
    for w in 0..windows {
        let start = states.last().unwrap().clone();
        let samples: Option<Vec<Vec<f64>>> = match forcing {
            Forcing::Zero => None,
            Forcing::Midpoint(v) => Some(v[w * per..(w + 1) * per].to_vec()),
        };
        let (coarse, iters, r) = kshift_window(op, &start, samples.as_deref(), tw, per, k)?;
        total_iters += iters;
        ratios.extend(r);
        for (j, s) in coarse.into_iter().enumerate().skip(1) {
            times.push((w * per + j) as f64 * dt);
            states.push(s);
        }
    }
    Ok((Trajectory { times, states }, windows, total_iters, ratios))
}

/// Neumann iteration on one window; returns unweighted coarse states.
fn kshift_window(
    op: &CoupledOperator,
    x0: &[f64],
    samples: Option<&[Vec<f64>]>,
    tw: f64,
    per: usize,
    k: f64,
) -> Result<(Vec<Vec<f64>>, usize, Vec<f64>)> {
    let n = op.a_len();
    let m = op.u_len();
    let tgrid = TaylorGrid::for_norm(tw, per, k + op.lame.norm_inf());
    let (fa, gu) = match samples {
        None => (PolyPath::zeros(n, tgrid), PolyPath::zeros(m, tgrid)),
        Some(s) => {
            let fa: Vec<Vec<f64>> = s.iter().map(|v| v[..n].to_vec()).collect();
            let gu: Vec<Vec<f64>> = s.iter().map(|v| v[n..].to_vec()).collect();
            (
                PolyPath::piecewise_constant(&fa, tgrid)?.times_exp(k),
                PolyPath::piecewise_constant(&gu, tgrid)?.times_exp(k),
            )
        }
    };
    let (a0, u0) = x0.split_at(n);
    let lame_k = |x: &[f64], y: &mut [f64]| {
        op.lame.apply_into(x, y);
        y.iter_mut().zip(x).for_each(|(a, b)| *a += k * b);
    };
    let shift = |x: &[f64], y: &mut [f64]| y.iter_mut().zip(x).for_each(|(a, b)| *a = k * b);
    let weights: Vec<f64> = (0..=per).map(|j| (k * tw * j as f64 / per as f64).exp()).collect();
    let mut v = gu.clone();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut last_change = f64::INFINITY;
    let mut ratios = Vec::new();
    for it in 1..=KSHIFT_MAX_ITERS {
        let u_path = solve_linear(&lame_k, &v, u0);
        let mut rhs = fa.clone();
        let du = u_path.map(n, |x, y| {
            sparse::matvec_into(&op.div, x, y);
            project_mean(y);
        });
        rhs.axpy(-1.0, &du);
        drop(du);
        let a_path = solve_linear(&shift, &rhs, a0);
        drop(rhs);
        let ga = a_path.map(m, |x, y| sparse::matvec_into(&op.grad, x, y));
        let ca = a_path.coarse_values(a0, per);
        let cu = u_path.coarse_values(u0, per);
        drop(a_path);
        drop(u_path);
        let coarse: Vec<Vec<f64>> = ca
            .into_iter()
            .zip(cu)
            .zip(&weights)
            .map(|((mut a, u), w)| {
                a.extend_from_slice(&u);
                a.iter_mut().for_each(|x| *x *= w);
                a
            })
            .collect();
        v = gu.clone();
        v.axpy(-1.0, &ga);
        if let Some(p) = &prev {
            let scale = coarse.iter().flatten().fold(0.0f64, |s, x| s.max(x.abs()));
            let diff = coarse.iter().flatten().zip(p.iter().flatten()).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
            let change = if scale > 0.0 { diff / scale } else { 0.0 };
            if change <= KSHIFT_TOL {
                return Ok((coarse, it, ratios));
            }
            if last_change.is_finite() {
                let r = change / last_change;
                ratios.push(r);
                if r >= 1.0 {
                    return Err(Error::Divergence(format!("update ratio {r:.3} at iteration {it}")));
                }
            }
            last_change = change;
        }
        prev = Some(coarse);
    }
    Err(Error::Divergence("K-shift iteration did not reach tolerance".into()))
}

/// Norms on states `[a; u]`: `a` in `B^{d/p}_{p,1}` (even reflection),
/// `u` in `B^{d/p-1}_{p,1}` (odd reflection), higher norms with `u` in
/// `B^{d/p+1}_{p,1}`.
#[derive(Debug)]
pub struct StateNorms {
    pub grid: Grid,
    pub p: f64,
    bank_a: DyadicFilterBank,
    bank_u: DyadicFilterBank,
}

impl StateNorms {
    pub fn new(grid: &Grid, p: f64) -> Result<Self> {
        BesovParams::critical(p, grid.dim())?;
        Ok(StateNorms {
            grid: *grid,
            p,
            bank_a: DyadicFilterBank::new(grid, ExtensionMode::EvenReflection)?,
            bank_u: DyadicFilterBank::new(grid, ExtensionMode::OddReflection)?,
        })
    }

    fn crit(&self) -> BesovParams {
        BesovParams::critical(self.p, self.grid.dim()).unwrap()
    }

    pub fn bank_a(&self) -> &DyadicFilterBank {
        &self.bank_a
    }
    pub fn bank_u(&self) -> &DyadicFilterBank {
        &self.bank_u
    }

    pub fn density(&self, a: &[f64], shift: f64) -> Result<f64> {
        let p = self.crit();
        self.bank_a.besov_norm(&ScalarField::from_values(self.grid, a.to_vec())?, &p.with_s(p.s + shift))
    }

    pub fn velocity(&self, u: &[f64], shift: f64) -> Result<f64> {
        let p = self.crit();
        self.bank_u.besov_norm(&VectorField::from_data(self.grid, u.to_vec())?, &p.with_s(p.s - 1.0 + shift))
    }

    /// `||a||_{B^{d/p}} + ||u||_{B^{d/p-1}}`.
    pub fn state(&self, x: &[f64]) -> Result<f64> {
        let n = self.grid.len();
        Ok(self.density(&x[..n], 0.0)? + self.velocity(&x[n..], 0.0)?)
    }

    /// `||a||_{B^{d/p}} + ||u||_{B^{d/p+1}}`.
    pub fn higher(&self, x: &[f64]) -> Result<f64> {
        let n = self.grid.len();
        Ok(self.density(&x[..n], 0.0)? + self.velocity(&x[n..], 2.0)?)
    }

    /// Discrete `E_p` norm of `e^{ct} x(t)`: sup of the state norm plus the
    /// `L^1` norms of the time difference and of the higher norm.
    pub fn ep_norm(&self, traj: &Trajectory, c_weight: f64) -> Result<EpNorm> {
        let steps = traj.states.len() - 1;
        let dt = traj.dt();
        let weighted: Vec<Vec<f64>> = traj
            .states
            .iter()
            .zip(&traj.times)
            .map(|(s, t)| s.iter().map(|v| v * (c_weight * t).exp()).collect())
            .collect();
        let mut sup: f64 = 0.0;
        let mut top = Vec::with_capacity(steps + 1);
        for s in &weighted {
            sup = sup.max(self.state(s)?);
            top.push(self.higher(s)?);
        }
        let mut time = 0.0;
        for k in 0..steps {
            let d: Vec<f64> = weighted[k + 1].iter().zip(&weighted[k]).map(|(a, b)| (a - b) / dt).collect();
            time += dt * self.state(&d)?;
        }
        let higher = if steps > 0 { dt * (0.5 * top[0] + top[1..steps].iter().sum::<f64>() + 0.5 * top[steps]) } else { 0.0 };
        Ok(EpNorm { sup, time_derivative: time, higher, total: sup + time + higher })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpNorm {
    pub sup: f64,
    pub time_derivative: f64,
    pub higher: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub constant: f64,
}

/// Least-squares fit of `log ||x(t)|| = log C - rate t` over the second half
/// of the trajectory.
pub fn decay_measure(traj: &Trajectory, norm: &dyn Fn(&[f64]) -> Result<f64>) -> Result<DecayFit> {
    let n = traj.states.len();
    if n < 16 {
        return arg("decay fit needs at least 16 samples");
    }
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for i in n / 2..n {
        let v = norm(&traj.states[i])?;
        if !(v > 0.0) {
            return Err(Error::Degeneracy("trajectory norm vanishes; decay fit is degenerate".into()));
        }
        ts.push(traj.times[i]);
        ys.push(v.ln());
    }
    let k = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = ts.iter().map(|t| (t - tm).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(DecayFit { rate: -slope, constant: (ym - slope * tm).exp() })
}

/// Plain `l2` norm of a state vector.
pub fn l2(x: &[f64]) -> Result<f64> {
    Ok(x.iter().map(|v| v * v).sum::<f64>().sqrt())
}
