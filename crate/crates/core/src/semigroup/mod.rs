//! Finite-dimensional generators `A`: semigroup action `e^{-tA}`,
//! resolvents, Cauchy problems and the interpolation / maximal-regularity
//! measurements built on them.

mod analysis;
pub mod expm;
pub mod krylov;
pub mod taylor;

pub use analysis::*;

use crate::error::{arg, Error, Result};
use crate::sparse::{self, Csr};
use faer::prelude::*;
use faer::{Mat, Side};
use num_complex::Complex64;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

/// Dimension up to which self-adjoint operators use a dense eigendecomposition.
pub const EIGEN_LIMIT: usize = 4096;
/// Default dimension up to which general operators use dense exponentials.
pub const DENSE_LIMIT: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub enum SymmetryHint {
    General,
    SelfAdjoint,
    /// `A = W^{-1} K` with `K` symmetric and `W = diag(weights) > 0`.
    SelfAdjointWeighted(Vec<f64>),
}

/// Eigendecomposition of the symmetrized operator `W^{1/2} A W^{-1/2} = V diag(values) V^T`.
#[derive(Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
    sqrt_w: Option<Vec<f64>>,
}

impl SymEig {
    /// `g(A) x`.
    pub fn apply_fn(&self, g: impl Fn(f64) -> f64, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let xs: Vec<f64> = match &self.sqrt_w {
            Some(s) => x.iter().zip(s).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        };
        let c = self.project(&xs);
        let gc: Vec<f64> = c.iter().zip(&self.values).map(|(c, l)| c * g(*l)).collect();
        let mut y = self.expand(&gc);
        if let Some(s) = &self.sqrt_w {
            y.iter_mut().zip(s).for_each(|(a, b)| *a /= b);
        }
        debug_assert_eq!(y.len(), n);
        y
    }

    /// Coordinates `V^T x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let xm = Mat::<f64>::from_fn(x.len(), 1, |i, _| x[i]);
        let c = self.vectors.transpose() * &xm;
        (0..c.nrows()).map(|i| c.read(i, 0)).collect()
    }

    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        let cm = Mat::<f64>::from_fn(c.len(), 1, |i, _| c[i]);
        let y = &self.vectors * &cm;
        (0..y.nrows()).map(|i| y.read(i, 0)).collect()
    }

    pub fn is_weighted(&self) -> bool {
        self.sqrt_w.is_some()
    }
}

/// `(E, Phi1) = (e^{-dt A}, phi1(-dt A))` for one step size.
#[derive(Debug)]
struct DenseStep {
    dt: f64,
    e: Mat<f64>,
    phi: Mat<f64>,
}

#[derive(Debug, Default)]
struct Cache {
    dense: OnceLock<Mat<f64>>,
    restricted: OnceLock<Mat<f64>>,
    eig: OnceLock<std::result::Result<Arc<SymEig>, Error>>,
    spectrum: OnceLock<std::result::Result<Vec<Complex64>, Error>>,
    steps: Mutex<Vec<Arc<DenseStep>>>,
}

/// A real square generator `A`, optionally followed by the projection of
/// a row range onto mean-free vectors.
#[derive(Debug)]
pub struct LinearOperator {
    matrix: Csr,
    projection: Option<Range<usize>>,
    hint: SymmetryHint,
    dense_limit: usize,
    cache: Cache,
}

impl Clone for LinearOperator {
    fn clone(&self) -> Self {
        LinearOperator {
            matrix: self.matrix.clone(),
            projection: self.projection.clone(),
            hint: self.hint.clone(),
            dense_limit: self.dense_limit,
            cache: Cache::default(),
        }
    }
}

impl LinearOperator {
    pub fn new(matrix: Csr, hint: SymmetryHint) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return arg("operator matrix must be square");
        }
        match &hint {
            SymmetryHint::SelfAdjoint => {
                let asym = sparse::asymmetry(&matrix);
                if asym > 1e-10 * sparse::norm_inf(&matrix).max(1.0) {
                    return arg(format!("matrix is not symmetric (defect {asym:.3e})"));
                }
            }
            SymmetryHint::SelfAdjointWeighted(w) => {
                if w.len() != matrix.rows() || w.iter().any(|v| !(*v > 0.0)) {
                    return arg("weights must be positive, one per row");
                }
                let k = sparse::scale_rows(&matrix, w);
                let asym = sparse::asymmetry(&k);
                if asym > 1e-10 * sparse::norm_inf(&k).max(1.0) {
                    return arg(format!("weighted form is not symmetric (defect {asym:.3e})"));
                }
            }
            SymmetryHint::General => {}
        }
        Ok(LinearOperator { matrix, projection: None, hint, dense_limit: DENSE_LIMIT, cache: Cache::default() })
    }

    /// Projects the output rows in `range` onto vectors with zero mean.
    pub fn with_mean_projection(mut self, range: Range<usize>) -> Result<Self> {
        if range.end > self.matrix.rows() || range.len() < 2 {
            return arg("projection range out of bounds");
        }
        if self.hint != SymmetryHint::General {
            return arg("mean projection is only supported for general operators");
        }
        self.projection = Some(range);
        self.cache = Cache::default();
        Ok(self)
    }

    pub fn with_dense_limit(mut self, limit: usize) -> Self {
        self.dense_limit = limit;
        self
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
    pub fn matrix(&self) -> &Csr {
        &self.matrix
    }
    pub fn hint(&self) -> &SymmetryHint {
        &self.hint
    }
    pub fn projection(&self) -> Option<&Range<usize>> {
        self.projection.as_ref()
    }
    pub fn is_self_adjoint(&self) -> bool {
        self.hint != SymmetryHint::General
    }

    fn project_in_place(&self, y: &mut [f64]) {
        if let Some(r) = &self.projection {
            let m = crate::grid::mean(&y[r.clone()]);
            y[r.clone()].iter_mut().for_each(|v| *v -= m);
        }
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        sparse::matvec_into(&self.matrix, x, y);
        self.project_in_place(y);
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply_into(x, &mut y);
        y
    }

    /// Infinity norm of the matrix (projection adds at most a factor 2).
    pub fn norm_inf(&self) -> f64 {
        let n = sparse::norm_inf(&self.matrix);
        if self.projection.is_some() {
            2.0 * n
        } else {
            n
        }
    }

    /// Dense form of the full action (projection included).
    pub fn dense(&self) -> &Mat<f64> {
        self.cache.dense.get_or_init(|| {
            let mut m = sparse::to_dense(&self.matrix);
            if let Some(r) = &self.projection {
                let len = r.len() as f64;
                for j in 0..m.ncols() {
                    let mean = r.clone().map(|i| m.read(i, j)).sum::<f64>() / len;
                    for i in r.clone() {
                        m.write(i, j, m.read(i, j) - mean);
                    }
                }
            }
            m
        })
    }

    /// The operator on its invariant subspace: `Q^T A Q` with `Q` an
    /// orthonormal basis of {mean-free on the projected range}, or `A` itself.
    pub fn restricted_dense(&self) -> &Mat<f64> {
        self.cache.restricted.get_or_init(|| match &self.projection {
            None => self.dense().clone(),
            Some(r) => {
                let q = self.mean_free_basis(r);
                q.transpose() * self.dense() * &q
            }
        })
    }

    fn mean_free_basis(&self, r: &Range<usize>) -> Mat<f64> {
        let n = self.dim();
        let m = r.len();
        let s = 1.0 / (m as f64).sqrt();
        // Householder reflector mapping e_{r.start} to the normalised ones vector.
        let mut v = vec![s; m];
        v[0] -= 1.0;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut q = Mat::<f64>::zeros(n, n - 1);
        let mut col = 0;
        for j in 0..n {
            if j == r.start {
                continue;
            }
            if r.contains(&j) {
                let jj = j - r.start;
                for ii in 0..m {
                    let e = if ii == jj { 1.0 } else { 0.0 };
                    q.write(r.start + ii, col, e - 2.0 * v[ii] * v[jj] / vv);
                }
            } else {
                q.write(j, col, 1.0);
            }
            col += 1;
        }
        q
    }

    /// Cached eigendecomposition for self-adjoint hints.
    pub fn sym_eig(&self) -> Result<Arc<SymEig>> {
        if !self.is_self_adjoint() {
            return Err(Error::Precondition("eigendecomposition needs a self-adjoint hint".into()));
        }
        if self.dim() > EIGEN_LIMIT {
            return Err(Error::Precondition("operator too large for a dense eigendecomposition".into()));
        }
        self.cache
            .eig
            .get_or_init(|| {
                let (sym, sqrt_w) = match &self.hint {
                    SymmetryHint::SelfAdjointWeighted(w) => {
                        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
                        let d = self.dense();
                        let s = Mat::<f64>::from_fn(d.nrows(), d.ncols(), |i, j| {
                            sw[i] * d.read(i, j) / sw[j]
                        });
                        // symmetrize rounding
                        let s = Mat::<f64>::from_fn(s.nrows(), s.ncols(), |i, j| 0.5 * (s.read(i, j) + s.read(j, i)));
                        (s, Some(sw))
                    }
                    _ => (self.dense().clone(), None),
                };
                let evd = sym.selfadjoint_eigendecomposition(Side::Lower);
                let values: Vec<f64> = (0..sym.nrows()).map(|i| evd.s().column_vector().read(i)).collect();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("eigensolver returned non-finite values".into()));
                }
                Ok(Arc::new(SymEig { values, vectors: evd.u().to_owned(), sqrt_w }))
            })
            .clone()
    }

    /// Eigenvalues of the restricted operator.
    pub fn spectrum(&self) -> Result<Vec<Complex64>> {
        if self.is_self_adjoint() {
            return Ok(self.sym_eig()?.values.iter().map(|v| Complex64::new(*v, 0.0)).collect());
        }
        if self.dim() > EIGEN_LIMIT {
            return Err(Error::Precondition("operator too large for a dense eigensolve".into()));
        }
        self.cache
            .spectrum
            .get_or_init(|| {
                let ev: Vec<faer::complex_native::c64> = self.restricted_dense().eigenvalues();
                let out: Vec<Complex64> = ev.iter().map(|c| Complex64::new(c.re, c.im)).collect();
                if out.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                    return Err(Error::Numerical("eigensolver returned non-finite values".into()));
                }
                Ok(out)
            })
            .clone()
    }

    /// Smallest real part of the restricted spectrum.
    pub fn spectral_abscissa(&self) -> Result<f64> {
        Ok(self.spectrum()?.iter().map(|c| c.re).fold(f64::INFINITY, f64::min))
    }

    fn dense_step(&self, dt: f64) -> Arc<DenseStep> {
        let mut steps = self.cache.steps.lock().unwrap();
        if let Some(s) = steps.iter().find(|s| s.dt == dt) {
            return s.clone();
        }
        let x = self.dense() * faer::scale(-dt);
        let (e, phi) = expm::expm_phi1(&x);
        let s = Arc::new(DenseStep { dt, e, phi });
        if steps.len() >= 4 {
            steps.remove(0);
        }
        steps.push(s.clone());
        s
    }

    fn path(&self) -> Path {
        if self.is_self_adjoint() && self.dim() <= EIGEN_LIMIT {
            Path::Eigen
        } else if self.dim() <= self.dense_limit {
            Path::Dense
        } else {
            Path::Krylov
        }
    }

    /// `e^{-dt A} u + dt phi1(-dt A) f`.
    pub fn step(&self, u: &[f64], f: Option<&[f64]>, dt: f64) -> Result<Vec<f64>> {
        match self.path() {
            Path::Eigen => {
                let eig = self.sym_eig()?;
                let mut y = eig.apply_fn(|l| (-dt * l).exp(), u);
                if let Some(f) = f {
                    let w = eig.apply_fn(|l| dt * phi1(-dt * l), f);
                    y.iter_mut().zip(w).for_each(|(a, b)| *a += b);
                }
                Ok(y)
            }
            Path::Dense => {
                let s = self.dense_step(dt);
                let mut y = matvec_dense(&s.e, u);
                if let Some(f) = f {
                    let w = matvec_dense(&s.phi, f);
                    y.iter_mut().zip(w).for_each(|(a, b)| *a += dt * b);
                }
                Ok(y)
            }
            Path::Krylov => {
                let apply = |x: &[f64], y: &mut [f64]| self.apply_into(x, y);
                krylov::expmv_phi(&apply, u, f, dt, 1e-10)
            }
        }
    }

    /// `(lambda I + A)^{-1} b` for real `lambda`.
    pub fn solve(&self, lambda: f64, b: &[f64]) -> Result<Vec<f64>> {
        if self.is_self_adjoint() && self.dim() <= EIGEN_LIMIT {
            let eig = self.sym_eig()?;
            if eig.values.iter().any(|l| (l + lambda).abs() < 1e-14 * l.abs().max(1.0)) {
                return Err(Error::Numerical("lambda is an eigenvalue".into()));
            }
            return Ok(eig.apply_fn(|l| 1.0 / (lambda + l), b));
        }
        if self.projection.is_some() || self.dim() <= self.dense_limit {
            let mut m = self.dense().clone();
            for i in 0..m.nrows() {
                m.write(i, i, m.read(i, i) + lambda);
            }
            let lu = m.partial_piv_lu();
            let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
            let x = lu.solve(&rhs);
            let out: Vec<f64> = (0..x.nrows()).map(|i| x.read(i, 0)).collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("singular resolvent".into()));
            }
            return Ok(out);
        }
        let shifted = sparse::lincomb(1.0, &self.matrix, lambda, &sparse::identity(self.dim()));
        sparse_solve(&shifted, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Path {
    Eigen,
    Dense,
    Krylov,
}

/// `phi1(z) = (e^z - 1) / z`.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

pub(crate) fn matvec_dense(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let xm = Mat::<f64>::from_fn(x.len(), 1, |i, _| x[i]);
    let y = m * &xm;
    (0..y.nrows()).map(|i| y.read(i, 0)).collect()
}

/// Sparse LU solve of a square CSR system.
pub fn sparse_solve(m: &Csr, b: &[f64]) -> Result<Vec<f64>> {
    use faer::sparse::linalg::solvers::SpSolver as _;
    let trip: Vec<(usize, usize, f64)> = m.iter().map(|(v, (i, j))| (i, j, *v)).collect();
    let a = faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(m.rows(), m.cols(), &trip)
        .map_err(|e| Error::Numerical(format!("sparse assembly failed: {e:?}")))?;
    let lu = a.sp_lu().map_err(|e| Error::Numerical(format!("sparse LU failed: {e:?}")))?;
    let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    let out: Vec<f64> = (0..x.nrows()).map(|i| x.read(i, 0)).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("singular sparse system".into()));
    }
    Ok(out)
}

/// `e^{-tA} x0`.
pub fn propagate(op: &LinearOperator, x0: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return arg("propagation time must be non-negative");
    }
    if x0.len() != op.dim() {
        return arg("vector length does not match the operator");
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    op.step(x0, None, t)
}

/// Forcing for [`solve_cauchy`]: absent, or one sample per step taken at
/// the step midpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Forcing {
    Zero,
    Midpoint(Vec<Vec<f64>>),
}

impl Forcing {
    /// Samples `f` at the midpoints of `steps` uniform steps on `[0, t_end]`.
    pub fn sample(t_end: f64, steps: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let dt = t_end / steps as f64;
        Forcing::Midpoint((0..steps).map(|n| f((n as f64 + 0.5) * dt)).collect())
    }

    pub fn at(&self, n: usize) -> Option<&[f64]> {
        match self {
            Forcing::Zero => None,
            Forcing::Midpoint(v) => Some(&v[n]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }
    pub fn last(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

/// Exponential-integrator midpoint rule:
/// `u_{n+1} = e^{-dt A} u_n + dt phi1(-dt A) f_{n+1/2}`.
pub fn solve_cauchy(
    op: &LinearOperator,
    x0: &[f64],
    forcing: &Forcing,
    t_end: f64,
    steps: usize,
) -> Result<Trajectory> {
    if steps < 8 {
        return arg("at least 8 time steps are required");
    }
    if !(t_end > 0.0) {
        return arg("final time must be positive");
    }
    if x0.len() != op.dim() {
        return arg("initial vector length does not match the operator");
    }
    if let Forcing::Midpoint(v) = forcing {
        if v.len() != steps || v.iter().any(|f| f.len() != op.dim()) {
            return arg("forcing must hold one sample of full length per step");
        }
    }
    let dt = t_end / steps as f64;
    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    for n in 0..steps {
        let next = op.step(&states[n], forcing.at(n), dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite state in time stepping".into()));
        }
        states.push(next);
        times.push((n + 1) as f64 * dt);
    }
    Ok(Trajectory { times, states })
}
