//! The Lame operator `L = -mu Delta - z grad div` with Dirichlet walls and
//! its variable-coefficient relative `-2 div(mu D(u)) - grad(lambda div u)`.
//!
//! The vector Laplacian is the compact Dirichlet stencil. The grad-div part
//! is `B^T B`, with `B` the divergence evaluated at cell corners (walls
//! included), which keeps `L` symmetric and consistent up to the walls.

use crate::besov::{BesovParams, DyadicFilterBank, ExtensionMode};
use crate::error::{arg, Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::semigroup::{solve_cauchy, Forcing, LinearOperator, SymmetryHint, Trajectory};
use crate::sparse::{self, Csr};
use faer::complex_native::c64;
use faer::prelude::*;
use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LameCoefficients {
    pub mu: f64,
    pub z: Complex64,
}

impl LameCoefficients {
    pub fn new(mu: f64, z: Complex64) -> Result<Self> {
        if !(mu > 0.0) || !z.re.is_finite() || !z.im.is_finite() {
            return arg("mu must be positive and z finite");
        }
        if !(mu + z.re > 0.0) {
            return arg(format!("mu + Re z must be positive (mu = {mu}, z = {z})"));
        }
        Ok(LameCoefficients { mu, z })
    }

    pub fn real(mu: f64, z: f64) -> Result<Self> {
        Self::new(mu, Complex64::new(z, 0.0))
    }

    /// Physical coefficients: `z = lambda + mu`.
    pub fn from_viscosities(mu: f64, lambda: f64) -> Result<Self> {
        Self::real(mu, lambda + mu)
    }

    pub fn mu_prime_ratio(&self) -> f64 {
        self.z.re / self.mu
    }

    pub fn is_real(&self) -> bool {
        self.z.im == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolProbe {
    pub xi: Vec<f64>,
    pub delta: f64,
}

impl SymbolProbe {
    pub fn new(xi: Vec<f64>, delta: f64, coeffs: &LameCoefficients) -> Result<Self> {
        if !(xi.len() == 2 || xi.len() == 3) {
            return arg("xi must have 2 or 3 components");
        }
        if xi.iter().all(|v| *v == 0.0) {
            return arg("xi must be nonzero");
        }
        if !(delta > 0.0 && delta < 1.0) || delta * coeffs.mu + coeffs.z.re < 0.0 {
            return arg("delta must lie in (0,1) with delta*mu + Re z >= 0");
        }
        Ok(SymbolProbe { xi, delta })
    }
}

/// `det(mu |xi|^2 Id + z xi (x) xi)`, by cofactor expansion of the symbol.
pub fn symbol_det(probe: &SymbolProbe, coeffs: &LameCoefficients) -> Complex64 {
    let xi = &probe.xi;
    let d = xi.len();
    let r2: f64 = xi.iter().map(|v| v * v).sum();
    let s = |i: usize, j: usize| {
        let diag = if i == j { coeffs.mu * r2 } else { 0.0 };
        Complex64::new(diag, 0.0) + coeffs.z * xi[i] * xi[j]
    };
    if d == 2 {
        s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0)
    } else {
        s(0, 0) * (s(1, 1) * s(2, 2) - s(1, 2) * s(2, 1)) - s(0, 1) * (s(1, 0) * s(2, 2) - s(1, 2) * s(2, 0))
            + s(0, 2) * (s(1, 0) * s(2, 1) - s(1, 1) * s(2, 0))
    }
}

/// Two-sided bounds `mu^d (1-delta)^d 2^{-d/2} |xi|^{2d} <= |det| <= (mu + |z|)^d |xi|^{2d}`.
pub fn symbol_bounds(probe: &SymbolProbe, coeffs: &LameCoefficients) -> (f64, f64) {
    let d = probe.xi.len() as i32;
    let r2d = probe.xi.iter().map(|v| v * v).sum::<f64>().powi(d);
    let lower = coeffs.mu.powi(d) * (1.0 - probe.delta).powi(d) * 2f64.powf(-0.5 * d as f64) * r2d;
    let upper = (coeffs.mu + coeffs.z.norm()).powi(d) * r2d;
    (lower, upper)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolReport {
    pub samples: usize,
    pub violations: Vec<Vec<f64>>,
    /// Smallest `|det| / lower` over the samples.
    pub lower_margin: f64,
    /// Smallest `upper / |det|` over the samples.
    pub upper_margin: f64,
}

impl SymbolReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn symbol_bounds_check(coeffs: &LameCoefficients, xi_samples: &[Vec<f64>], delta: f64) -> Result<SymbolReport> {
    let mut rep = SymbolReport {
        samples: xi_samples.len(),
        violations: Vec::new(),
        lower_margin: f64::INFINITY,
        upper_margin: f64::INFINITY,
    };
    for xi in xi_samples {
        let probe = SymbolProbe::new(xi.clone(), delta, coeffs)?;
        let det = symbol_det(&probe, coeffs).norm();
        let (lo, hi) = symbol_bounds(&probe, coeffs);
        if !(lo <= det && det <= hi) {
            rep.violations.push(xi.clone());
        }
        rep.lower_margin = rep.lower_margin.min(det / lo);
        rep.upper_margin = rep.upper_margin.min(hi / det);
    }
    Ok(rep)
}

/// The two stencil pieces of `L`: the Dirichlet `-Delta` and `B^T B`.
#[derive(Clone, Debug)]
pub struct LameParts {
    pub grid: Grid,
    pub neg_laplacian: Csr,
    pub grad_div: Csr,
}

impl LameParts {
    pub fn new(grid: &Grid) -> Self {
        let neg_laplacian = sparse::scale(&grid.vector_laplacian(), -1.0);
        let b = grid.corner_divergence();
        let grad_div = sparse::product(&sparse::transpose(&b), &b);
        LameParts { grid: *grid, neg_laplacian, grad_div }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim() * self.grid.len()
    }

    /// Real matrix `mu (-Delta) + z B^T B`.
    pub fn matrix(&self, mu: f64, z: f64) -> Csr {
        sparse::lincomb(mu, &self.neg_laplacian, z, &self.grad_div)
    }

    /// Dense complex matrix of `L + lambda` for complex `z` and `lambda`.
    pub fn complex_dense(&self, coeffs: &LameCoefficients, lambda: Complex64) -> Mat<c64> {
        let n = self.dim();
        let mut m = Mat::<c64>::zeros(n, n);
        for (v, (i, j)) in self.neg_laplacian.iter() {
            let e = m.read(i, j);
            m.write(i, j, e + c64::new(coeffs.mu * v, 0.0));
        }
        for (v, (i, j)) in self.grad_div.iter() {
            let e = m.read(i, j);
            m.write(i, j, e + c64::new(coeffs.z.re * v, coeffs.z.im * v));
        }
        for i in 0..n {
            let e = m.read(i, i);
            m.write(i, i, e + c64::new(lambda.re, lambda.im));
        }
        m
    }

    pub fn apply_complex(&self, coeffs: &LameCoefficients, u: &[Complex64]) -> Vec<Complex64> {
        let a = sparse::matvec_complex(&self.neg_laplacian, u);
        let b = sparse::matvec_complex(&self.grad_div, u);
        a.iter().zip(&b).map(|(x, y)| x * coeffs.mu + y * coeffs.z).collect()
    }

    /// `(L + lambda)^{-1} b` for complex coefficients, dense LU.
    pub fn complex_solve(&self, coeffs: &LameCoefficients, lambda: Complex64, b: &[Complex64]) -> Result<Vec<Complex64>> {
        if b.len() != self.dim() {
            return arg("right-hand side length does not match the operator");
        }
        let m = self.complex_dense(coeffs, lambda);
        let rhs = Mat::<c64>::from_fn(b.len(), 1, |i, _| c64::new(b[i].re, b[i].im));
        let x = m.partial_piv_lu().solve(&rhs);
        let out: Vec<Complex64> = (0..x.nrows()).map(|i| Complex64::new(x.read(i, 0).re, x.read(i, 0).im)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("singular complex Lame system".into()));
        }
        Ok(out)
    }
}

/// Real Lame operator as a self-adjoint [`LinearOperator`]. Complex `z`
/// goes through [`LameParts`].
pub fn assemble_lame(grid: &Grid, coeffs: &LameCoefficients) -> Result<LinearOperator> {
    LameCoefficients::new(coeffs.mu, coeffs.z)?;
    if !coeffs.is_real() {
        return arg("assemble_lame takes real z; use LameParts for complex coefficients");
    }
    let parts = LameParts::new(grid);
    LinearOperator::new(parts.matrix(coeffs.mu, coeffs.z.re), SymmetryHint::SelfAdjoint)
}

/// Stiffness of `-2 div(mu D(u)) - grad(lambda div u)` with nodal
/// coefficients `mu`, `lambda`.
///
/// `-div(mu grad u_k)` uses face-averaged `mu`; `-div(mu (grad u)^T)` and
/// the `lambda` term live on corners. For constant coefficients the result
/// equals `mu (-Delta) + (mu + lambda) B^T B`.
pub fn variable_stiffness(grid: &Grid, mu: &[f64], lambda: &[f64]) -> Result<Csr> {
    let n = grid.len();
    let d = grid.dim();
    if mu.len() != n || lambda.len() != n {
        return arg("coefficient fields must be nodal");
    }
    let mut blocks_store: Vec<Csr> = Vec::new();
    let mut diag = None;
    for a in 0..d {
        let f = grid.flux_second(a, &grid.face_average(mu, a));
        diag = Some(match diag {
            None => f,
            Some(acc) => sparse::lincomb(1.0, &acc, 1.0, &f),
        });
    }
    let diag = diag.unwrap();
    let mu_c = grid.corner_average(mu);
    let lam_c = grid.corner_average(lambda);
    let parts: Vec<Csr> = (0..d).map(|a| grid.corner_partial(a)).collect();
    let parts_t: Vec<Csr> = parts.iter().map(sparse::transpose).collect();
    // block (i, j): P_j^T M P_i + P_i^T Lambda P_j, plus the diagonal flux term
    for i in 0..d {
        for j in 0..d {
            let tw = sparse::product(&parts_t[j], &sparse::scale_rows(&parts[i], &mu_c));
            let lw = sparse::product(&parts_t[i], &sparse::scale_rows(&parts[j], &lam_c));
            let mut b = sparse::lincomb(1.0, &tw, 1.0, &lw);
            if i == j {
                b = sparse::lincomb(1.0, &b, 1.0, &diag);
            }
            blocks_store.push(b);
        }
    }
    let blocks: Vec<Option<&Csr>> = blocks_store.iter().map(Some).collect();
    Ok(sparse::block(&vec![n; d], &vec![n; d], &blocks))
}

/// Checks the ellipticity conditions `inf rho > 0`, `inf mu > 0`,
/// `inf(lambda + 2 mu) > 0`.
pub fn check_ellipticity(rho: &[f64], mu: &[f64], lambda: &[f64]) -> Result<()> {
    if rho.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Precondition("density must be positive".into()));
    }
    if mu.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Precondition("shear viscosity must be positive".into()));
    }
    if mu.iter().zip(lambda).any(|(m, l)| !(l + 2.0 * m > 0.0)) {
        return Err(Error::Precondition("lambda + 2 mu must be positive".into()));
    }
    Ok(())
}

/// `rho^{-1} (-2 div(mu D u) - grad(lambda div u))`, self-adjoint in the
/// `rho`-weighted inner product.
pub fn assemble_variable(grid: &Grid, rho: &ScalarField, mu: &ScalarField, lambda: &ScalarField) -> Result<LinearOperator> {
    check_ellipticity(&rho.values, &mu.values, &lambda.values)?;
    let k = variable_stiffness(grid, &mu.values, &lambda.values)?;
    let d = grid.dim();
    let w: Vec<f64> = (0..d).flat_map(|_| rho.values.iter().copied()).collect();
    let inv: Vec<f64> = w.iter().map(|v| 1.0 / v).collect();
    let a = sparse::scale_rows(&k, &inv);
    if rho.values.iter().all(|v| *v == 1.0) {
        LinearOperator::new(a, SymmetryHint::SelfAdjoint)
    } else {
        LinearOperator::new(a, SymmetryHint::SelfAdjointWeighted(w))
    }
}

/// Solves `L u = f`; the relative residual must not exceed `1e-9`.
pub fn elliptic_solve(op: &LinearOperator, f: &VectorField) -> Result<VectorField> {
    if f.data.iter().any(|v| !v.is_finite()) {
        return arg("right-hand side must be finite");
    }
    if f.data.len() != op.dim() {
        return arg("right-hand side does not match the operator");
    }
    let fnorm = f.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 {
        return Ok(VectorField::zeros(f.grid));
    }
    let u = op.solve(0.0, &f.data)?;
    let r = op.apply(&u);
    let res = r.iter().zip(&f.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if res > 1e-9 * fnorm {
        return Err(Error::Numerical(format!("elliptic residual {:.3e} too large", res / fnorm)));
    }
    VectorField::from_data(f.grid, u)
}

/// Pieces of the maximal-regularity ratio of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxRegMeasure {
    pub sup_state: f64,
    pub time_derivative: f64,
    pub top_regularity: f64,
    pub initial: f64,
    pub forcing: f64,
    /// `None` when the data side vanishes.
    pub ratio: Option<f64>,
}

/// `[sup ||u||_{B^s} + int(||u_t||_{B^s} + mu ||u||_{B^{s+2}})] / [||u0||_{B^s} + int ||f||_{B^s}]`
/// for a vector trajectory. `u_t` is a forward difference, the top term
/// uses the trapezoid rule and the forcing integral the midpoint rule.
pub fn maxreg_measure(
    bank: &DyadicFilterBank,
    params: &BesovParams,
    mu: f64,
    traj: &Trajectory,
    forcing: &Forcing,
) -> Result<MaxRegMeasure> {
    let grid = *bank.grid();
    let norm = |v: &[f64], s: f64| -> Result<f64> {
        let f = VectorField::from_data(grid, v.to_vec())?;
        bank.besov_norm(&f, &BesovParams { s, ..*params })
    };
    let s = params.s;
    let steps = traj.states.len() - 1;
    let dt = traj.dt();
    let mut sup_state: f64 = 0.0;
    let mut top = Vec::with_capacity(steps + 1);
    for u in &traj.states {
        sup_state = sup_state.max(norm(u, s)?);
        top.push(mu * norm(u, s + 2.0)?);
    }
    let mut time_derivative = 0.0;
    for k in 0..steps {
        let du: Vec<f64> = traj.states[k + 1].iter().zip(&traj.states[k]).map(|(a, b)| (a - b) / dt).collect();
        time_derivative += dt * norm(&du, s)?;
    }
    let top_regularity = dt * (0.5 * top[0] + top[1..steps].iter().sum::<f64>() + 0.5 * top[steps]);
    let initial = norm(&traj.states[0], s)?;
    let mut forcing_int = 0.0;
    if let Forcing::Midpoint(v) = forcing {
        for f in v {
            forcing_int += dt * norm(f, s)?;
        }
    }
    let den = initial + forcing_int;
    let ratio = (den > 0.0).then(|| (sup_state + time_derivative + top_regularity) / den);
    Ok(MaxRegMeasure { sup_state, time_derivative, top_regularity, initial, forcing: forcing_int, ratio })
}

#[derive(Clone, Debug)]
pub struct HeatRun {
    pub trajectory: Trajectory,
    pub measure: MaxRegMeasure,
}

/// Solves `u_t + L u = f`, `u(0) = u0`, and measures the maximal-regularity
/// ratio in `B^s_{p,1}` (odd-reflection extension) with viscosity `mu`.
pub fn heat_maxreg_solve(
    op: &LinearOperator,
    u0: &VectorField,
    forcing: &Forcing,
    t_end: f64,
    steps: usize,
    mu: f64,
    params: &BesovParams,
) -> Result<HeatRun> {
    let trajectory = solve_cauchy(op, &u0.data, forcing, t_end, steps)?;
    let bank = DyadicFilterBank::new(&u0.grid, ExtensionMode::OddReflection)?;
    let measure = maxreg_measure(&bank, params, mu, &trajectory, forcing)?;
    Ok(HeatRun { trajectory, measure })
}
