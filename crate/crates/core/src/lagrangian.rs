//! Lagrangian geometry: flow maps built from time-integrated velocity,
//! their Jacobian, adjugate and inverse gradient, twisted operators,
//! density reconstruction and the conversion back to Eulerian fields.

use crate::besov::{BesovParams, DyadicFilterBank, ExtensionMode};
use crate::error::{arg, Error, Result};
use crate::grid::{self, Grid, ScalarField, TensorField, VectorField};
use crate::sparse::{self, Csr};
use serde::{Deserialize, Serialize};

/// Smallest admissible Jacobian determinant.
pub const J_FLOOR: f64 = 0.1;
/// Default threshold for the integrated velocity gradient.
pub const EPSILON_DEFAULT: f64 = 0.1;
/// Default ceiling for the empirical Neumann constant.
pub const NEUMANN_CEILING: f64 = 10.0;

const INVERSE_TOL: f64 = 1e-10;
const INVERSE_MAX_ITER: usize = 100;

/// Velocity history with trapezoid running integrals of `u` and `Du`.
#[derive(Clone, Debug)]
pub struct TrajectoryStore {
    grid: Grid,
    jac: Csr,
    times: Vec<f64>,
    velocities: Vec<Vec<f64>>,
    gradients: Vec<Vec<f64>>,
    int_u: Vec<Vec<f64>>,
    int_du: Vec<Vec<f64>>,
}

impl TrajectoryStore {
    pub fn new(grid: Grid) -> Self {
        TrajectoryStore {
            jac: grid.jacobian(),
            grid,
            times: vec![],
            velocities: vec![],
            gradients: vec![],
            int_u: vec![],
            int_du: vec![],
        }
    }

    /// Store built from velocity samples at increasing times starting at 0.
    pub fn from_samples(grid: Grid, times: &[f64], velocities: &[Vec<f64>]) -> Result<Self> {
        if times.len() != velocities.len() {
            return arg("one velocity sample per time is required");
        }
        let mut s = TrajectoryStore::new(grid);
        for (t, u) in times.iter().zip(velocities) {
            s.push(*t, u)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, t: f64, u: &[f64]) -> Result<()> {
        let d = self.grid.dim();
        let n = self.grid.len();
        if u.len() != d * n {
            return arg("velocity sample does not match the grid");
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("velocity sample is not finite".into()));
        }
        let du = sparse::matvec(&self.jac, u);
        match self.times.last() {
            None => {
                if t != 0.0 {
                    return arg("the first sample must be at t = 0");
                }
                self.int_u.push(vec![0.0; d * n]);
                self.int_du.push(vec![0.0; d * d * n]);
            }
            Some(&last) => {
                if !(t > last) {
                    return arg("sample times must be strictly increasing");
                }
                let h = 0.5 * (t - last);
                let k = self.times.len() - 1;
                let iu = trapezoid(&self.int_u[k], h, &self.velocities[k], u);
                let idu = trapezoid(&self.int_du[k], h, &self.gradients[k], &du);
                self.int_u.push(iu);
                self.int_du.push(idu);
            }
        }
        self.times.push(t);
        self.velocities.push(u.to_vec());
        self.gradients.push(du);
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn velocity(&self, k: usize) -> VectorField {
        VectorField { grid: self.grid, data: self.velocities[k].clone() }
    }
    pub fn gradient(&self, k: usize) -> TensorField {
        TensorField { grid: self.grid, data: self.gradients[k].clone() }
    }
    pub fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Interval index `k` with `t_k <= t <= t_{k+1}` and the local weight.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if self.times.is_empty() {
            return arg("empty trajectory store");
        }
        let last = self.last_time();
        if !(t >= 0.0 && t <= last * (1.0 + 1e-14)) {
            return arg(format!("time {t} outside the stored range [0, {last}]"));
        }
        let t = t.min(last);
        let k = match self.times.iter().position(|&s| s >= t) {
            Some(0) => return Ok((0, 0.0)),
            Some(k) => k - 1,
            None => self.times.len() - 2,
        };
        let h = self.times[k + 1] - self.times[k];
        Ok((k, (t - self.times[k]) / h))
    }

    /// `(u(t), Du(t))` by linear interpolation between samples.
    pub fn sample(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok((self.velocities[k].clone(), self.gradients[k].clone()));
        }
        Ok((
            lerp(&self.velocities[k], &self.velocities[k + 1], w),
            lerp(&self.gradients[k], &self.gradients[k + 1], w),
        ))
    }

    /// `(int_0^t u, int_0^t Du)`, exact integrals of the piecewise-linear
    /// interpolant (the trapezoid values at sample times).
    pub fn integrals(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (k, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok((self.int_u[k].clone(), self.int_du[k].clone()));
        }
        let h = 0.5 * w * (self.times[k + 1] - self.times[k]);
        let um = lerp(&self.velocities[k], &self.velocities[k + 1], w);
        let dm = lerp(&self.gradients[k], &self.gradients[k + 1], w);
        Ok((trapezoid(&self.int_u[k], h, &self.velocities[k], &um), trapezoid(&self.int_du[k], h, &self.gradients[k], &dm)))
    }
}

fn trapezoid(acc: &[f64], h: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    acc.iter().zip(a.iter().zip(b)).map(|(s, (x, y))| s + h * (x + y)).collect()
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

// ---- flow maps ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    /// `X - y`.
    pub displacement: VectorField,
    /// Positions `X(y)`.
    pub x: VectorField,
    pub dx: TensorField,
    pub j: ScalarField,
    pub adj: TensorField,
    /// `DX^{-1}`.
    pub a: TensorField,
}

type M3 = [[f64; 3]; 3];

fn det(m: &M3, d: usize) -> f64 {
    if d == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Closed-form adjugate in two dimensions.
pub fn adjugate2(m: &M3) -> M3 {
    let mut r = [[0.0; 3]; 3];
    r[0][0] = m[1][1];
    r[0][1] = -m[0][1];
    r[1][0] = -m[1][0];
    r[1][1] = m[0][0];
    r
}

/// Transposed cofactor matrix for `d = 2` or `3`.
pub fn cofactor_adjugate(m: &M3, d: usize) -> M3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..d {
        for j in 0..d {
            let rows: Vec<usize> = (0..d).filter(|&k| k != i).collect();
            let cols: Vec<usize> = (0..d).filter(|&k| k != j).collect();
            let minor = if d == 2 {
                m[rows[0]][cols[0]]
            } else {
                m[rows[0]][cols[0]] * m[rows[1]][cols[1]] - m[rows[0]][cols[1]] * m[rows[1]][cols[0]]
            };
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            r[j][i] = sign * minor;
        }
    }
    r
}

impl FlowMap {
    pub fn identity(grid: Grid) -> Self {
        let zero = VectorField::zeros(grid);
        FlowMap {
            x: positions(&grid, &zero.data),
            displacement: zero,
            dx: TensorField::identity(grid),
            j: ScalarField::constant(grid, 1.0),
            adj: TensorField::identity(grid),
            a: TensorField::identity(grid),
        }
    }

    /// Flow with `X = y + displacement` and `DX = Id + int_du`.
    pub fn from_parts(displacement: VectorField, int_du: TensorField) -> Result<Self> {
        let grid = displacement.grid;
        if int_du.grid != grid {
            return arg("displacement and gradient live on different grids");
        }
        let d = grid.dim();
        let mut dx = int_du;
        for i in 0..d {
            dx.entry_mut(i, i).iter_mut().for_each(|v| *v += 1.0);
        }
        let mut j = ScalarField::zeros(grid);
        let mut adj = TensorField::zeros(grid);
        let mut a = TensorField::zeros(grid);
        for k in 0..grid.len() {
            let m = dx.at(k);
            let det_k = det(&m, d);
            if !(det_k > J_FLOOR) {
                return Err(Error::Degeneracy(format!("Jacobian {det_k:.3e} at node {k} is below {J_FLOOR}")));
            }
            let ad = if d == 2 { adjugate2(&m) } else { cofactor_adjugate(&m, 3) };
            let mut inv = ad;
            inv.iter_mut().flatten().for_each(|v| *v /= det_k);
            j.values[k] = det_k;
            adj.set(k, &ad);
            a.set(k, &inv);
        }
        Ok(FlowMap { x: positions(&grid, &displacement.data), displacement, dx, j, adj, a })
    }

    pub fn grid(&self) -> &Grid {
        &self.j.grid
    }

    /// Largest nodewise defects of `DX A = Id` and `adj = J A`.
    pub fn invariant_defects(&self) -> (f64, f64) {
        let g = self.grid();
        let d = g.dim();
        let (mut inv, mut adj) = (0.0_f64, 0.0_f64);
        for k in 0..g.len() {
            let m = self.dx.at(k);
            let a = self.a.at(k);
            let ad = self.adj.at(k);
            for i in 0..d {
                for l in 0..d {
                    let p: f64 = (0..d).map(|r| m[i][r] * a[r][l]).sum();
                    let id = if i == l { 1.0 } else { 0.0 };
                    inv = inv.max((p - id).abs());
                    adj = adj.max((ad[i][l] - self.j.values[k] * a[i][l]).abs());
                }
            }
        }
        (inv, adj)
    }
}

fn positions(grid: &Grid, disp: &[f64]) -> VectorField {
    let n = grid.len();
    let mut x = disp.to_vec();
    for c in 0..grid.dim() {
        for i in 0..n {
            x[c * n + i] += grid.coord(i, c);
        }
    }
    VectorField { grid: *grid, data: x }
}

/// Flow map at time `t` from the stored history.
pub fn advance_flow(store: &TrajectoryStore, t: f64) -> Result<FlowMap> {
    let (iu, idu) = store.integrals(t)?;
    let g = *store.grid();
    FlowMap::from_parts(VectorField { grid: g, data: iu }, TensorField { grid: g, data: idu })
}

/// `rho0 / J`.
pub fn density_from_flow(rho0: &ScalarField, flow: &FlowMap) -> Result<ScalarField> {
    if rho0.grid != *flow.grid() {
        return arg("density and flow live on different grids");
    }
    if let Some(k) = flow.j.values.iter().position(|&j| !(j > J_FLOOR)) {
        return Err(Error::Degeneracy(format!("degenerate flow at node {k}")));
    }
    Ok(rho0.zip(&flow.j, |r, j| r / j))
}

/// `(D_A z, div_A z)` with `D_A z = sym(Dz A)` and `div_A z = tr(Dz A)`.
pub fn twisted_ops(flow: &FlowMap, z: &VectorField) -> Result<(TensorField, ScalarField)> {
    if z.grid != *flow.grid() {
        return arg("field and flow live on different grids");
    }
    let dz = grid::jacobian(z);
    Ok(twisted_from_jacobian(&dz, &flow.a))
}

/// Twisted operators from a precomputed Jacobian.
pub fn twisted_from_jacobian(dz: &TensorField, a: &TensorField) -> (TensorField, ScalarField) {
    let g = dz.grid;
    let d = g.dim();
    let n = g.len();
    let mut prod = TensorField::zeros(g);
    for i in 0..d {
        for l in 0..d {
            let out = prod.entry_mut(i, l);
            for r in 0..d {
                let (x, y) = (dz.entry(i, r), a.entry(r, l));
                for k in 0..n {
                    out[k] += x[k] * y[k];
                }
            }
        }
    }
    let tr = prod.transpose();
    let sym = TensorField { grid: g, data: prod.data.iter().zip(&tr.data).map(|(p, q)| 0.5 * (p + q)).collect() };
    let mut div = ScalarField::zeros(g);
    for i in 0..d {
        div.values.iter_mut().zip(prod.entry(i, i)).for_each(|(s, v)| *s += v);
    }
    (sym, div)
}

/// Matrix-field product `M N` nodewise.
pub fn tensor_product(m: &TensorField, nn: &TensorField) -> TensorField {
    let g = m.grid;
    let d = g.dim();
    let n = g.len();
    let mut out = TensorField::zeros(g);
    for i in 0..d {
        for l in 0..d {
            let o = out.entry_mut(i, l);
            for r in 0..d {
                let (x, y) = (m.entry(i, r), nn.entry(r, l));
                for k in 0..n {
                    o[k] += x[k] * y[k];
                }
            }
        }
    }
    out
}

/// Contraction `M : N = tr(M N)` nodewise.
pub fn contract(m: &TensorField, nn: &TensorField) -> ScalarField {
    let g = m.grid;
    let d = g.dim();
    let mut out = ScalarField::zeros(g);
    for i in 0..d {
        for r in 0..d {
            out.values.iter_mut().zip(m.entry(i, r).iter().zip(nn.entry(r, i))).for_each(|(s, (x, y))| *s += x * y);
        }
    }
    out
}

/// `M v` nodewise.
pub fn tensor_apply(m: &TensorField, v: &VectorField) -> VectorField {
    let g = m.grid;
    let d = g.dim();
    let mut out = VectorField::zeros(g);
    for i in 0..d {
        for r in 0..d {
            let src = v.component(r).to_vec();
            out.component_mut(i).iter_mut().zip(m.entry(i, r).iter().zip(&src)).for_each(|(s, (x, y))| *s += x * y);
        }
    }
    out
}

// ---- smallness and Neumann bounds -------------------------------------------

/// Even-reflection bank and the critical exponent for tensor and scalar
/// geometric fields.
#[derive(Clone, Debug)]
pub struct GeometryNorms {
    bank: DyadicFilterBank,
    params: BesovParams,
}

impl GeometryNorms {
    pub fn new(grid: &Grid, p: f64) -> Result<Self> {
        Ok(GeometryNorms {
            bank: DyadicFilterBank::new(grid, ExtensionMode::EvenReflection)?,
            params: BesovParams::critical(p, grid.dim())?,
        })
    }
    pub fn params(&self) -> &BesovParams {
        &self.params
    }
    pub fn tensor(&self, t: &TensorField) -> Result<f64> {
        self.bank.besov_norm(t, &self.params)
    }
    pub fn scalar(&self, s: &ScalarField) -> Result<f64> {
        self.bank.besov_norm(s, &self.params)
    }
}

/// `int_0^t ||Du||_{B^{d/p}_{p,1}}` by the trapezoid rule on stored samples.
pub fn du_integral(store: &TrajectoryStore, norms: &GeometryNorms, t: f64) -> Result<f64> {
    let (k, w) = store.locate(t)?;
    let g = *store.grid();
    let norm = |data: Vec<f64>| norms.tensor(&TensorField { grid: g, data });
    let mut prev = norm(store.gradients[0].clone())?;
    let mut total = 0.0;
    for m in 0..k {
        let next = norm(store.gradients[m + 1].clone())?;
        total += 0.5 * (store.times[m + 1] - store.times[m]) * (prev + next);
        prev = next;
    }
    if w > 0.0 {
        let mid = norm(lerp(&store.gradients[k], &store.gradients[k + 1], w))?;
        total += 0.5 * w * (store.times[k + 1] - store.times[k]) * (prev + mid);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessReport {
    pub integral: f64,
    pub epsilon: f64,
    pub passes: bool,
    /// `integral / epsilon` when the check fails, else 0.
    pub overshoot: f64,
}

pub fn smallness_monitor(store: &TrajectoryStore, norms: &GeometryNorms, epsilon: f64) -> Result<SmallnessReport> {
    if !(epsilon > 0.0) {
        return arg("epsilon must be positive");
    }
    let integral = du_integral(store, norms, store.last_time())?;
    let passes = integral <= epsilon;
    Ok(SmallnessReport { integral, epsilon, passes, overshoot: if passes { 0.0 } else { integral / epsilon } })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannReport {
    pub lhs: f64,
    pub du_integral: f64,
    pub c_emp: f64,
    pub passes: bool,
}

fn minus_identity(t: &TensorField) -> TensorField {
    let mut out = t.clone();
    for i in 0..t.grid.dim() {
        out.entry_mut(i, i).iter_mut().for_each(|v| *v -= 1.0);
    }
    out
}

fn diff_tensor(a: &TensorField, b: &TensorField) -> TensorField {
    TensorField { grid: a.grid, data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect() }
}

fn report(lhs: f64, du: f64, ceiling: f64) -> NeumannReport {
    let c_emp = if du > 0.0 { lhs / du } else { 0.0 };
    let passes = if du > 0.0 { c_emp <= ceiling } else { lhs == 0.0 };
    NeumannReport { lhs, du_integral: du, c_emp, passes }
}

/// `||1 - J|| + ||A - Id|| + ||adj - Id||` against `int_0^t ||Du||`.
pub fn neumann_bounds_check(
    store: &TrajectoryStore,
    t: f64,
    norms: &GeometryNorms,
    epsilon: f64,
    ceiling: f64,
) -> Result<NeumannReport> {
    let du = du_integral(store, norms, t)?;
    if du > epsilon {
        return Err(Error::Precondition(format!("integrated gradient {du:.3e} exceeds epsilon {epsilon}")));
    }
    let flow = advance_flow(store, t)?;
    let lhs = norms.scalar(&flow.j.map(|v| 1.0 - v))?
        + norms.tensor(&minus_identity(&flow.a))?
        + norms.tensor(&minus_identity(&flow.adj))?;
    Ok(report(lhs, du, ceiling))
}

/// Difference form for two histories on the same time grid:
/// `||A2 - A1|| + ||adj2 - adj1|| + ||J2 - J1|| + ||1/J2 - 1/J1||`
/// against `int_0^t ||D(u2 - u1)||`.
pub fn neumann_difference_check(
    s1: &TrajectoryStore,
    s2: &TrajectoryStore,
    t: f64,
    norms: &GeometryNorms,
    ceiling: f64,
) -> Result<NeumannReport> {
    if s1.times != s2.times {
        return arg("difference check needs a common time grid");
    }
    let delta: Vec<Vec<f64>> =
        s1.velocities.iter().zip(&s2.velocities).map(|(a, b)| b.iter().zip(a).map(|(x, y)| x - y).collect()).collect();
    let ds = TrajectoryStore::from_samples(*s1.grid(), &s1.times, &delta)?;
    let du = du_integral(&ds, norms, t)?;
    let f1 = advance_flow(s1, t)?;
    let f2 = advance_flow(s2, t)?;
    let lhs = norms.tensor(&diff_tensor(&f2.a, &f1.a))?
        + norms.tensor(&diff_tensor(&f2.adj, &f1.adj))?
        + norms.scalar(&f2.j.zip(&f1.j, |x, y| x - y))?
        + norms.scalar(&f2.j.zip(&f1.j, |x, y| 1.0 / x - 1.0 / y))?;
    Ok(report(lhs, du, ceiling))
}

// ---- Eulerian conversion ------------------------------------------------------

/// Values assumed outside the stored nodes when interpolating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extension {
    /// Wall value 0 (Dirichlet fields).
    Zero,
    /// Wall value equal to the nearest node.
    Reflect,
    /// Periodic on the node lattice (period `N h`).
    Periodic,
}

/// Multilinear interpolation of nodal values at `point`. Returns the value
/// and whether the point had to be clamped into the box.
pub fn interpolate(grid: &Grid, values: &[f64], point: &[f64], ext: Extension) -> (f64, bool) {
    let d = grid.dim();
    let dims = grid.dims();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    let mut clamped = false;
    for a in 0..d {
        let n = dims[a] as f64;
        let mut s = point[a] / grid.spacing()[a] - 1.0;
        if ext == Extension::Periodic {
            s = s.rem_euclid(n);
        } else if !(-1.0..=n).contains(&s) {
            clamped = true;
            s = s.clamp(-1.0, n);
        }
        let r = s.round();
        if (s - r).abs() < 1e-9 {
            s = r;
        }
        let f = s.floor().min(n - 1.0);
        base[a] = f as i64;
        frac[a] = s - f;
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut wall = false;
        for a in 0..d {
            let bit = (corner >> a) & 1;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            let i = base[a] + bit as i64;
            let n = dims[a] as i64;
            idx[a] = match ext {
                Extension::Periodic => i.rem_euclid(n) as usize,
                _ => {
                    if i < 0 || i >= n {
                        wall = true;
                    }
                    i.clamp(0, n - 1) as usize
                }
            };
        }
        if w == 0.0 || (wall && ext == Extension::Zero) {
            continue;
        }
        total += w * values[grid.index(&idx[..d])];
    }
    (total, clamped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EulerianField {
    /// Component-major values at the grid nodes.
    pub data: Vec<f64>,
    /// Nodes whose preimage or sample point left the box.
    pub clamped: usize,
    pub max_iterations: usize,
}

/// Preimages `y` with `X(y) = x` for every grid node `x`.
pub fn inverse_map(flow: &FlowMap, ext: Extension) -> Result<(Vec<[f64; 3]>, usize, usize)> {
    let g = *flow.grid();
    let d = g.dim();
    let disp = &flow.displacement;
    let mut out = Vec::with_capacity(g.len());
    let mut clamped = 0;
    let mut max_it = 0;
    let eval = |y: &[f64; 3], clamp: &mut bool| -> [f64; 3] {
        let mut r = [0.0; 3];
        for c in 0..d {
            let (v, cl) = interpolate(&g, disp.component(c), &y[..d], ext);
            *clamp |= cl;
            r[c] = v;
        }
        r
    };
    for k in 0..g.len() {
        let x = g.coords(k);
        let mut y = x;
        let mut omega = 1.0;
        let mut cl = false;
        let mut res = f64::INFINITY;
        let mut it = 0;
        loop {
            let u = eval(&y, &mut cl);
            let r: f64 = (0..d).map(|c| (y[c] + u[c] - x[c]).abs()).fold(0.0, f64::max);
            if r <= INVERSE_TOL {
                break;
            }
            if r > res {
                omega *= 0.5;
            }
            res = r;
            it += 1;
            if it > INVERSE_MAX_ITER {
                return Err(Error::Degeneracy(format!("inverse map stalled at node {k}, residual {r:.3e}")));
            }
            for c in 0..d {
                y[c] += omega * (x[c] - u[c] - y[c]);
            }
        }
        if cl {
            clamped += 1;
        }
        max_it = max_it.max(it);
        out.push(y);
    }
    Ok((out, clamped, max_it))
}

/// Composes a Lagrangian field (any number of component blocks) with the
/// inverse flow.
pub fn to_eulerian(flow: &FlowMap, field: &[f64], ext: Extension) -> Result<EulerianField> {
    let g = *flow.grid();
    let n = g.len();
    if field.is_empty() || field.len() % n != 0 {
        return arg("field length must be a multiple of the node count");
    }
    let (pre, mut clamped, max_iterations) = inverse_map(flow, ext)?;
    let comps = field.len() / n;
    let mut data = vec![0.0; field.len()];
    for (k, y) in pre.iter().enumerate() {
        let mut cl = false;
        for c in 0..comps {
            let (v, c2) = interpolate(&g, &field[c * n..(c + 1) * n], &y[..g.dim()], ext);
            cl |= c2;
            data[c * n + k] = v;
        }
        if cl {
            clamped += 1;
        }
    }
    Ok(EulerianField { data, clamped, max_iterations })
}

/// Samples an Eulerian field along `X`, the inverse of [`to_eulerian`].
pub fn to_lagrangian(flow: &FlowMap, field: &[f64], ext: Extension) -> Vec<f64> {
    let g = *flow.grid();
    let n = g.len();
    let d = g.dim();
    let mut out = vec![0.0; field.len()];
    for k in 0..n {
        let p: Vec<f64> = (0..d).map(|c| flow.x.component(c)[k]).collect();
        for c in 0..field.len() / n {
            out[c * n + k] = interpolate(&g, &field[c * n..(c + 1) * n], &p, ext).0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use faer::prelude::SolverCore;
    use faer::Mat;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn g2(n: usize) -> Grid {
        Grid::cube(2, n, 1.0).unwrap()
    }

    fn bump_velocity(g: Grid, amp: f64) -> VectorField {
        VectorField::from_fn(g, |x, c| {
            let s = (PI * x[0]).sin() * (PI * x[1]).sin();
            amp * s * s * if c == 0 { (2.0 * PI * x[1]).sin() } else { (PI * x[0]).cos() }
        })
    }

    fn steady_store(u: &VectorField, times: &[f64]) -> TrajectoryStore {
        let samples = vec![u.data.clone(); times.len()];
        TrajectoryStore::from_samples(u.grid, times, &samples).unwrap()
    }

    #[test]
    fn identity_flow() {
        let g = g2(8);
        let store = steady_store(&VectorField::zeros(g), &[0.0, 0.5, 1.0]);
        let f = advance_flow(&store, 0.7).unwrap();
        assert_eq!(f, FlowMap { x: f.x.clone(), ..FlowMap::identity(g) });
        assert!(f.j.values.iter().all(|&v| v == 1.0));
        let f0 = advance_flow(&store, 0.0).unwrap();
        assert_eq!(f0.dx, TensorField::identity(g));
    }

    #[test]
    fn unipotent_closed_form() {
        let g = g2(6);
        let eps = 0.3;
        let mut du = TensorField::zeros(g);
        du.entry_mut(0, 1).iter_mut().for_each(|v| *v = eps);
        let f = FlowMap::from_parts(VectorField::zeros(g), du).unwrap();
        for k in 0..g.len() {
            assert_eq!(f.j.values[k], 1.0);
            let ad = f.adj.at(k);
            assert_eq!([ad[0][0], ad[0][1], ad[1][0], ad[1][1]], [1.0, -eps, 0.0, 1.0]);
            assert_eq!(f.a.at(k), ad);
        }
    }

    #[test]
    fn closed_form_matches_cofactor_path() {
        let mut rng = 0.37_f64;
        for _ in 0..200 {
            let mut m = [[0.0; 3]; 3];
            for v in m.iter_mut().flatten().take(9) {
                rng = (rng * 997.0 + 0.123).fract();
                *v = rng - 0.5;
            }
            assert_eq!(adjugate2(&m), cofactor_adjugate(&m, 2));
        }
    }

    #[test]
    fn degeneracy_detected() {
        let g = g2(6);
        let mut du = TensorField::zeros(g);
        du.entry_mut(0, 0).iter_mut().for_each(|v| *v = -0.95);
        assert!(matches!(FlowMap::from_parts(VectorField::zeros(g), du), Err(Error::Degeneracy(_))));
    }

    #[test]
    fn store_rejects_bad_times() {
        let g = g2(6);
        let u = vec![0.0; 2 * g.len()];
        let mut s = TrajectoryStore::new(g);
        assert!(s.push(0.1, &u).is_err());
        s.push(0.0, &u).unwrap();
        assert!(s.push(0.0, &u).is_err());
        assert!(advance_flow(&s, 0.5).is_err());
    }

    #[test]
    fn trapezoid_integral_of_linear_history_is_exact() {
        let g = g2(6);
        let u1 = bump_velocity(g, 1.0);
        let times = [0.0, 0.25, 0.5, 1.0];
        let samples: Vec<Vec<f64>> = times.iter().map(|t| u1.scaled(*t).data).collect();
        let s = TrajectoryStore::from_samples(g, &times, &samples).unwrap();
        let (iu, _) = s.integrals(0.8).unwrap();
        for (a, b) in iu.iter().zip(&u1.data) {
            assert!((a - 0.32 * b).abs() < 1e-15);
        }
    }

    fn direct_inverse(m: &M3, d: usize) -> M3 {
        let a = Mat::<f64>::from_fn(d, d, |i, j| m[i][j]);
        let inv = a.partial_piv_lu().inverse();
        let mut r = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                r[i][j] = inv.read(i, j);
            }
        }
        r
    }

    #[test]
    fn inverse_gradient_first_order_and_invariants() {
        for d in [2usize, 3] {
            let g = Grid::cube(d, 6, 1.0).unwrap();
            for amp in [0.02, 0.04] {
                let u = VectorField::from_fn(g, |x, c| {
                    let s: f64 = x.iter().map(|v| (PI * v).sin()).product();
                    amp * s * (1.0 + c as f64 + x[0])
                });
                let s = steady_store(&u, &[0.0, 0.5, 1.0]);
                let f = advance_flow(&s, 1.0).unwrap();
                let (inv, adj) = f.invariant_defects();
                assert!(inv < 1e-10 && adj < 1e-10);
                let int_du = s.integrals(1.0).unwrap().1;
                let n = g.len();
                for k in 0..n {
                    let direct = direct_inverse(&f.dx.at(k), d);
                    let a = f.a.at(k);
                    for i in 0..d {
                        for j in 0..d {
                            assert!((direct[i][j] - a[i][j]).abs() < 1e-12);
                        }
                    }
                }
                // second-order remainder: ||A - Id + int Du|| <= C ||int Du||^2
                let mut rem: f64 = 0.0;
                let mut size: f64 = 0.0;
                for k in 0..n {
                    let a = f.a.at(k);
                    for i in 0..d {
                        for j in 0..d {
                            let e = int_du[(i * d + j) * n + k];
                            let id = if i == j { 1.0 } else { 0.0 };
                            rem = rem.max((a[i][j] - id + e).abs());
                            size = size.max(e.abs());
                        }
                    }
                }
                assert!(rem <= 2.0 * (d as f64) * size * size, "d={d} rem={rem} size={size}");
            }
        }
    }

    #[test]
    fn density_reconstruction() {
        let g = g2(8);
        let rho0 = ScalarField::from_fn(g, |x| 1.0 + 0.3 * (PI * x[0]).cos() * x[1]);
        let id = FlowMap::identity(g);
        assert_eq!(density_from_flow(&rho0, &id).unwrap(), rho0);

        let eps = 0.05;
        let mut du = TensorField::zeros(g);
        for i in 0..2 {
            du.entry_mut(i, i).iter_mut().for_each(|v| *v = eps);
        }
        let f = FlowMap::from_parts(VectorField::zeros(g), du).unwrap();
        let rho = density_from_flow(&rho0, &f).unwrap();
        for k in 0..g.len() {
            let exact = rho0.values[k] / ((1.0 + eps) * (1.0 + eps));
            assert!((rho.values[k] / exact - 1.0).abs() < 1e-15);
        }

        let s = steady_store(&bump_velocity(g, 0.1), &[0.0, 0.5, 1.0]);
        let f = advance_flow(&s, 1.0).unwrap();
        let rho = density_from_flow(&rho0, &f).unwrap();
        let mut m1 = 0.0;
        let mut m0 = 0.0;
        for k in 0..g.len() {
            let back = rho.values[k] * f.j.values[k];
            assert!((back / rho0.values[k] - 1.0).abs() < 1e-14);
            m1 += back;
            m0 += rho0.values[k];
        }
        assert!((m1 / m0 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn twisted_ops_reduce_at_identity() {
        let g = g2(10);
        let z = bump_velocity(g, 1.0);
        let (da, diva) = twisted_ops(&FlowMap::identity(g), &z).unwrap();
        assert_eq!(da, grid::sym_gradient(&z));
        let div = grid::divergence(&z);
        for (a, b) in diva.values.iter().zip(&div.values) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }

        let mut two = FlowMap::identity(g);
        two.a.data.iter_mut().for_each(|v| *v *= 2.0);
        let (_, div2) = twisted_ops(&two, &z).unwrap();
        for (a, b) in div2.values.iter().zip(&diva.values) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn twisted_trace_identity() {
        let g = g2(10);
        let s = steady_store(&bump_velocity(g, 0.2), &[0.0, 1.0]);
        let f = advance_flow(&s, 1.0).unwrap();
        let z = VectorField::from_fn(g, |x, c| (x[0] + 2.0 * x[1] * c as f64).sin() * x[0] * (1.0 - x[0]));
        let (da, diva) = twisted_ops(&f, &z).unwrap();
        for k in 0..g.len() {
            let tr = da.entry(0, 0)[k] + da.entry(1, 1)[k];
            assert!((tr - diva.values[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn smallness_monitor_cases() {
        let g = g2(16);
        let norms = GeometryNorms::new(&g, 2.0).unwrap();
        let zero = steady_store(&VectorField::zeros(g), &[0.0, 1.0]);
        let r = smallness_monitor(&zero, &norms, EPSILON_DEFAULT).unwrap();
        assert_eq!(r.integral, 0.0);
        assert!(r.passes);

        let u = bump_velocity(g, 0.01);
        let single = norms.tensor(&grid::jacobian(&u)).unwrap();
        let s = steady_store(&u, &[0.0, 0.5, 1.5, 2.0]);
        let r = smallness_monitor(&s, &norms, EPSILON_DEFAULT).unwrap();
        assert!((r.integral - 2.0 * single).abs() < 1e-12 * single);

        let big = steady_store(&bump_velocity(g, 5.0), &[0.0, 1.0]);
        let r = smallness_monitor(&big, &norms, EPSILON_DEFAULT).unwrap();
        assert!(!r.passes && r.overshoot > 1.0);
    }

    #[test]
    fn neumann_bounds() {
        let g = g2(16);
        let norms = GeometryNorms::new(&g, 2.0).unwrap();
        let zero = steady_store(&VectorField::zeros(g), &[0.0, 1.0]);
        let r = neumann_bounds_check(&zero, 1.0, &norms, EPSILON_DEFAULT, NEUMANN_CEILING).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.passes);

        let u = bump_velocity(g, 0.002);
        let r1 = neumann_bounds_check(&steady_store(&u, &[0.0, 0.5, 1.0]), 1.0, &norms, 0.1, NEUMANN_CEILING).unwrap();
        let r2 =
            neumann_bounds_check(&steady_store(&u.scaled(2.0), &[0.0, 0.5, 1.0]), 1.0, &norms, 0.1, NEUMANN_CEILING)
                .unwrap();
        assert!(r1.passes && r2.passes, "{r1:?} {r2:?}");
        let ratio = r2.lhs / r1.lhs;
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");

        let big = steady_store(&bump_velocity(g, 5.0), &[0.0, 1.0]);
        assert!(matches!(
            neumann_bounds_check(&big, 1.0, &norms, 0.1, NEUMANN_CEILING),
            Err(Error::Precondition(_))
        ));

        let s = steady_store(&u, &[0.0, 0.5, 1.0]);
        let d = neumann_difference_check(&s, &s, 1.0, &norms, NEUMANN_CEILING).unwrap();
        assert_eq!(d.lhs, 0.0);
        let s2 = steady_store(&u.scaled(1.5), &[0.0, 0.5, 1.0]);
        let d = neumann_difference_check(&s, &s2, 1.0, &norms, NEUMANN_CEILING).unwrap();
        assert!(d.passes && d.lhs > 0.0, "{d:?}");
    }

    #[test]
    fn eulerian_identity_and_roundtrip() {
        let f0 = |x: &[f64]| (PI * x[0]).sin() * (PI * x[1]).sin() + 0.5 * x[0] * x[1];
        let g = g2(8);
        let field = ScalarField::from_fn(g, f0);
        let e = to_eulerian(&FlowMap::identity(g), &field.values, Extension::Reflect).unwrap();
        assert_eq!(e.data, field.values);

        let mut errs = vec![];
        for n in [16usize, 32] {
            let g = g2(n);
            let field = ScalarField::from_fn(g, f0);
            let s = steady_store(&bump_velocity(g, 0.05), &[0.0, 1.0]);
            let f = advance_flow(&s, 1.0).unwrap();
            let e = to_eulerian(&f, &field.values, Extension::Reflect).unwrap();
            assert_eq!(e.clamped, 0);
            let back = to_lagrangian(&f, &e.data, Extension::Reflect);
            // compare away from the wall cell, where the extension is first order
            let mut err: f64 = 0.0;
            for k in 0..g.len() {
                if g.wall_distance(k) >= 1 {
                    err = err.max((back[k] - field.values[k]).abs());
                }
            }
            errs.push(err);
        }
        assert!(errs[0] < 0.05, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
    }

    #[test]
    fn eulerian_roundtrip_three_dims() {
        let g = Grid::cube(3, 10, 1.0).unwrap();
        let field = ScalarField::from_fn(g, |x| (x[0] + x[1] * x[2]).cos());
        let u = VectorField::from_fn(g, |x, c| {
            let s: f64 = x.iter().map(|v| (PI * v).sin()).product();
            0.03 * s * (c as f64 + 1.0)
        });
        let f = advance_flow(&steady_store(&u, &[0.0, 1.0]), 1.0).unwrap();
        let e = to_eulerian(&f, &field.values, Extension::Reflect).unwrap();
        let back = to_lagrangian(&f, &e.data, Extension::Reflect);
        let err = (0..g.len())
            .filter(|&k| g.wall_distance(k) >= 1)
            .map(|k| (back[k] - field.values[k]).abs())
            .fold(0.0, f64::max);
        let h = g.spacing()[0];
        assert!(err < 2.0 * h * h, "{err}");
    }

    #[test]
    fn translation_matches_shift() {
        let g = g2(16);
        let h = g.spacing()[0];
        let n = g.len();
        let field = ScalarField::from_fn(g, |x| (2.0 * PI * (x[0] - h) / (16.0 * h)).sin() + x[1]);
        let shift = [3.0 * h, -2.0 * h];
        let mut disp = VectorField::zeros(g);
        for c in 0..2 {
            disp.component_mut(c).iter_mut().for_each(|v| *v = shift[c]);
        }
        let f = FlowMap::from_parts(disp, TensorField::zeros(g)).unwrap();
        let e = to_eulerian(&f, &field.values, Extension::Periodic).unwrap();
        for k in 0..n {
            let m = g.multi_index(k);
            let src = [(m[0] + 16 - 3) % 16, (m[1] + 2) % 16];
            assert!((e.data[k] - field.values[g.index(&src)]).abs() < 1e-12);
        }
    }

    #[test]
    fn clamping_is_counted() {
        let g = g2(8);
        let mut disp = VectorField::zeros(g);
        disp.component_mut(0).iter_mut().for_each(|v| *v = 0.3);
        let f = FlowMap::from_parts(disp, TensorField::zeros(g)).unwrap();
        let field = vec![1.0; g.len()];
        let e = to_eulerian(&f, &field, Extension::Reflect).unwrap();
        assert!(e.clamped > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flow_invariants_hold(a in -0.3f64..0.3, b in -0.3f64..0.3, c in -0.3f64..0.3, e in -0.3f64..0.3) {
            let g = Grid::cube(3, 4, 1.0).unwrap();
            let mut du = TensorField::zeros(g);
            let vals = [a, b, c, e, a * b, c - e, b + e, a - c, e * c];
            for i in 0..3 {
                for j in 0..3 {
                    du.entry_mut(i, j).iter_mut().enumerate().for_each(|(k, v)| *v = vals[i * 3 + j] * (1.0 + 0.01 * k as f64) / 3.0);
                }
            }
            if let Ok(f) = FlowMap::from_parts(VectorField::zeros(g), du) {
                let (inv, adj) = f.invariant_defects();
                prop_assert!(inv < 1e-10 && adj < 1e-10);
            }
        }
    }
}
