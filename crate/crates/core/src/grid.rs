//! Box grids with interior-node storage, collocated fields and
//! finite-difference stencils assembled as sparse matrices.
//!
//! Node `i` on axis `a` sits at `x = (i + 1) h_a`; the wall nodes `x = 0`
//! and `x = L_a` are not stored. Stencils that reach a wall node read a
//! ghost value chosen by [`Ghost`].

use crate::error::{arg, Result};
use crate::sparse::{self, Csr};
use serde::{Deserialize, Serialize};

/// How a stencil reads the (unstored) wall node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ghost {
    /// Wall value 0: Dirichlet fields (velocity).
    Zero,
    /// Wall value equals the nearest interior value.
    Reflect,
    /// Quadratic extrapolation from the three nearest interior values.
    Extrapolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    d: usize,
    dims: [usize; 3],
    lengths: [f64; 3],
    spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: &[usize], lengths: &[f64]) -> Result<Grid> {
        let d = dims.len();
        if !(d == 2 || d == 3) {
            return arg(format!("grid dimension must be 2 or 3, got {d}"));
        }
        if lengths.len() != d {
            return arg("dims and lengths differ in length");
        }
        if dims.iter().any(|&n| n < 4) {
            return arg("every axis needs at least 4 interior nodes");
        }
        if lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return arg("box lengths must be positive");
        }
        let mut g = Grid { d, dims: [1; 3], lengths: [1.0; 3], spacing: [1.0; 3] };
        for a in 0..d {
            g.dims[a] = dims[a];
            g.lengths[a] = lengths[a];
            g.spacing[a] = lengths[a] / (dims[a] + 1) as f64;
        }
        Ok(g)
    }

    /// `n^d` nodes on the box `[0, len]^d`.
    pub fn cube(d: usize, n: usize, len: f64) -> Result<Grid> {
        Grid::new(&vec![n; d], &vec![len; d])
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.d]
    }
    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.d]
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.d]
    }
    /// Number of stored nodes.
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Quadrature weight of one node, `prod h_a`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }
    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Linear index, axis 0 fastest.
    pub fn index(&self, m: &[usize]) -> usize {
        let mut idx = 0;
        for a in (0..self.d).rev() {
            idx = idx * self.dims[a] + m[a];
        }
        idx
    }

    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let mut m = [0; 3];
        for a in 0..self.d {
            m[a] = idx % self.dims[a];
            idx /= self.dims[a];
        }
        m
    }

    pub fn coord(&self, idx: usize, axis: usize) -> f64 {
        (self.multi_index(idx)[axis] + 1) as f64 * self.spacing[axis]
    }

    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let m = self.multi_index(idx);
        let mut x = [0.0; 3];
        for a in 0..self.d {
            x[a] = (m[a] + 1) as f64 * self.spacing[a];
        }
        x
    }

    /// Per axis, whether the node touches the low / high wall.
    pub fn boundary_mask(&self, idx: usize) -> [[bool; 2]; 3] {
        let m = self.multi_index(idx);
        let mut out = [[false; 2]; 3];
        for a in 0..self.d {
            out[a] = [m[a] == 0, m[a] + 1 == self.dims[a]];
        }
        out
    }

    /// Number of nodes between this node and the nearest wall (0 = adjacent).
    pub fn wall_distance(&self, idx: usize) -> usize {
        let m = self.multi_index(idx);
        (0..self.d).map(|a| m[a].min(self.dims[a] - 1 - m[a])).min().unwrap()
    }

    /// Same box with every axis refined to `dims * factor` nodes.
    pub fn with_dims(&self, dims: &[usize]) -> Result<Grid> {
        Grid::new(dims, self.lengths())
    }

    // ---- 1D stencil machinery -------------------------------------------

    fn ghost_low(ghost: Ghost, n: usize) -> Vec<(usize, f64)> {
        match ghost {
            Ghost::Zero => vec![],
            Ghost::Reflect => vec![(0, 1.0)],
            Ghost::Extrapolate => {
                debug_assert!(n >= 3);
                vec![(0, 3.0), (1, -3.0), (2, 1.0)]
            }
        }
    }

    fn ghost_high(ghost: Ghost, n: usize) -> Vec<(usize, f64)> {
        match ghost {
            Ghost::Zero => vec![],
            Ghost::Reflect => vec![(n - 1, 1.0)],
            Ghost::Extrapolate => vec![(n - 1, 3.0), (n - 2, -3.0), (n - 3, 1.0)],
        }
    }

    /// Entries of `sum_k c_k * v[i + k]` with out-of-range reads replaced by ghosts.
    fn stencil_row(i: usize, n: usize, taps: &[(isize, f64)], ghost: Ghost) -> Vec<(usize, f64)> {
        let mut row = Vec::new();
        for &(k, c) in taps {
            let j = i as isize + k;
            if j >= 0 && (j as usize) < n {
                row.push((j as usize, c));
            } else if j == -1 {
                row.extend(Grid::ghost_low(ghost, n).into_iter().map(|(jj, w)| (jj, c * w)));
            } else if j == n as isize {
                row.extend(Grid::ghost_high(ghost, n).into_iter().map(|(jj, w)| (jj, c * w)));
            } else {
                panic!("stencil reaches beyond one ghost layer");
            }
        }
        row
    }

    /// Lifts a 1D operator (given row-wise) to the full grid along `axis`.
    fn along_axis(&self, axis: usize, row: impl Fn(usize) -> Vec<(usize, f64)>) -> Csr {
        let n = self.len();
        let na = self.dims[axis];
        let rows: Vec<Vec<(usize, f64)>> = (0..na).map(&row).collect();
        let mut entries = Vec::new();
        for idx in 0..n {
            let mut m = self.multi_index(idx);
            let i = m[axis];
            for &(j, c) in &rows[i] {
                m[axis] = j;
                entries.push((idx, self.index(&m), c));
            }
        }
        sparse::from_triplets(n, n, &entries)
    }

    /// Centered first derivative along `axis`.
    pub fn partial(&self, axis: usize, ghost: Ghost) -> Csr {
        let n = self.dims[axis];
        let h = self.spacing[axis];
        let taps = [(1, 0.5 / h), (-1, -0.5 / h)];
        self.along_axis(axis, |i| Grid::stencil_row(i, n, &taps, ghost))
    }

    /// Forward difference `(v[i+1] - v[i]) / h`.
    pub fn forward(&self, axis: usize, ghost: Ghost) -> Csr {
        let n = self.dims[axis];
        let h = self.spacing[axis];
        let taps = [(1, 1.0 / h), (0, -1.0 / h)];
        self.along_axis(axis, |i| Grid::stencil_row(i, n, &taps, ghost))
    }

    /// Backward difference `(v[i] - v[i-1]) / h`.
    pub fn backward(&self, axis: usize, ghost: Ghost) -> Csr {
        let n = self.dims[axis];
        let h = self.spacing[axis];
        let taps = [(0, 1.0 / h), (-1, -1.0 / h)];
        self.along_axis(axis, |i| Grid::stencil_row(i, n, &taps, ghost))
    }

    /// Compact second difference along `axis`.
    pub fn second(&self, axis: usize, ghost: Ghost) -> Csr {
        let n = self.dims[axis];
        let h2 = self.spacing[axis].powi(2);
        let taps = [(1, 1.0 / h2), (0, -2.0 / h2), (-1, 1.0 / h2)];
        self.along_axis(axis, |i| Grid::stencil_row(i, n, &taps, ghost))
    }

    /// Compact Laplacian on scalars.
    pub fn laplacian(&self, ghost: Ghost) -> Csr {
        let mut acc = self.second(0, ghost);
        for a in 1..self.d {
            acc = &acc + &self.second(a, ghost);
        }
        acc
    }

    /// Scalar gradient, `d*N x N`, components stacked.
    pub fn gradient(&self, ghost: Ghost) -> Csr {
        let parts: Vec<Csr> = (0..self.d).map(|a| self.partial(a, ghost)).collect();
        let n = self.len();
        let blocks: Vec<Option<&Csr>> = parts.iter().map(Some).collect();
        sparse::block(&vec![n; self.d], &[n], &blocks)
    }

    /// Centered divergence of a Dirichlet vector field, `N x d*N`.
    pub fn divergence(&self) -> Csr {
        let parts: Vec<Csr> = (0..self.d).map(|a| self.partial(a, Ghost::Zero)).collect();
        let n = self.len();
        let blocks: Vec<Option<&Csr>> = parts.iter().map(Some).collect();
        sparse::block(&[n], &vec![n; self.d], &blocks)
    }

    /// Block-diagonal compact Laplacian on Dirichlet vector fields.
    pub fn vector_laplacian(&self) -> Csr {
        let lap = self.laplacian(Ghost::Zero);
        let n = self.len();
        let mut blocks: Vec<Option<&Csr>> = vec![None; self.d * self.d];
        for a in 0..self.d {
            blocks[a * self.d + a] = Some(&lap);
        }
        sparse::block(&vec![n; self.d], &vec![n; self.d], &blocks)
    }

    /// Jacobian `(Du)_{ij} = d_j u_i` of a Dirichlet vector field, `d^2 N x d N`,
    /// entry `(i, j)` stored in block `i*d + j`.
    pub fn jacobian(&self) -> Csr {
        let parts: Vec<Csr> = (0..self.d).map(|a| self.partial(a, Ghost::Zero)).collect();
        let n = self.len();
        let d = self.d;
        let mut blocks: Vec<Option<&Csr>> = vec![None; d * d * d];
        for i in 0..d {
            for j in 0..d {
                blocks[(i * d + j) * d + i] = Some(&parts[j]);
            }
        }
        sparse::block(&vec![n; d * d], &vec![n; d], &blocks)
    }

    // ---- corner (dual-cell) operators ------------------------------------

    /// Dimensions of the corner lattice (cell corners of the primal nodes
    /// together with the walls): `dims[a] + 1` per axis.
    pub fn corner_dims(&self) -> Vec<usize> {
        self.dims().iter().map(|n| n + 1).collect()
    }

    pub fn corner_len(&self) -> usize {
        self.corner_dims().iter().product()
    }

    fn corner_index(&self, c: &[usize]) -> usize {
        let cd = self.corner_dims();
        let mut idx = 0;
        for a in (0..self.d).rev() {
            idx = idx * cd[a] + c[a];
        }
        idx
    }

    /// For corner `c` (corner k on an axis sits between nodes k-1 and k),
    /// the surrounding `2^d` node offsets, with `None` for wall nodes.
    fn corner_stencil(&self, c: &[usize], mut visit: impl FnMut(Option<usize>, &[usize; 3])) {
        let d = self.d;
        for mask in 0..(1usize << d) {
            let mut m = [0usize; 3];
            let mut side = [0usize; 3];
            let mut inside = true;
            for a in 0..d {
                let s = (mask >> a) & 1;
                side[a] = s;
                let k = c[a] as isize - 1 + s as isize;
                if k < 0 || k >= self.dims[a] as isize {
                    inside = false;
                } else {
                    m[a] = k as usize;
                }
            }
            let node = if inside { Some(self.index(&m)) } else { None };
            visit(node, &side);
        }
    }

    /// Corner derivative along `axis` of a Dirichlet scalar (wall values 0):
    /// forward difference along `axis`, average along the others.
    /// Shape `corner_len x N`.
    pub fn corner_partial(&self, axis: usize) -> Csr {
        let d = self.d;
        let h = self.spacing[axis];
        let w = 1.0 / (1usize << (d - 1)) as f64;
        let cd = self.corner_dims();
        let nc = self.corner_len();
        let mut entries = Vec::new();
        for ci in 0..nc {
            let mut c = [0usize; 3];
            let mut r = ci;
            for a in 0..d {
                c[a] = r % cd[a];
                r /= cd[a];
            }
            self.corner_stencil(&c[..d], |node, side| {
                if let Some(j) = node {
                    let sgn = if side[axis] == 1 { 1.0 } else { -1.0 };
                    entries.push((ci, j, sgn * w / h));
                }
            });
        }
        sparse::from_triplets(nc, self.len(), &entries)
    }

    /// Corner divergence `B` of a Dirichlet vector field, `corner_len x d N`.
    pub fn corner_divergence(&self) -> Csr {
        let parts: Vec<Csr> = (0..self.d).map(|a| self.corner_partial(a)).collect();
        let blocks: Vec<Option<&Csr>> = parts.iter().map(Some).collect();
        sparse::block(&[self.corner_len()], &vec![self.len(); self.d], &blocks)
    }

    /// Average of a nodal scalar onto corners; wall nodes read the nearest
    /// interior node (coefficient sampling, not a Dirichlet field).
    pub fn corner_average(&self, values: &[f64]) -> Vec<f64> {
        let d = self.d;
        let cd = self.corner_dims();
        let nc = self.corner_len();
        let w = 1.0 / (1usize << d) as f64;
        let mut out = vec![0.0; nc];
        for (ci, o) in out.iter_mut().enumerate() {
            let mut c = [0usize; 3];
            let mut r = ci;
            for a in 0..d {
                c[a] = r % cd[a];
                r /= cd[a];
            }
            let mut acc = 0.0;
            for mask in 0..(1usize << d) {
                let mut m = [0usize; 3];
                for a in 0..d {
                    let k = c[a] as isize - 1 + ((mask >> a) & 1) as isize;
                    m[a] = k.clamp(0, self.dims[a] as isize - 1) as usize;
                }
                acc += values[self.index(&m)];
            }
            *o = w * acc;
        }
        let _ = self.corner_index(&[0; 3][..d]);
        out
    }

    /// Average of a nodal scalar onto the half-points `i + 1/2` along `axis`
    /// (the `dims[axis] + 1` faces including both walls); wall nodes read the
    /// nearest interior node. Indexed like the grid with `dims[axis] + 1` on `axis`.
    pub fn face_average(&self, values: &[f64], axis: usize) -> Vec<f64> {
        let d = self.d;
        let mut fd = self.dims;
        fd[axis] += 1;
        let nf: usize = fd[..d].iter().product();
        let mut out = vec![0.0; nf];
        for (fi, o) in out.iter_mut().enumerate() {
            let mut f = [0usize; 3];
            let mut r = fi;
            for a in 0..d {
                f[a] = r % fd[a];
                r /= fd[a];
            }
            let lo = f[axis].saturating_sub(1).min(self.dims[axis] - 1);
            let hi = f[axis].min(self.dims[axis] - 1);
            let mut m = f;
            m[axis] = lo;
            let a = values[self.index(&m)];
            m[axis] = hi;
            let b = values[self.index(&m)];
            *o = 0.5 * (a + b);
        }
        out
    }

    /// `-d_a (k d_a u)` on a Dirichlet scalar with face coefficients `k`
    /// (layout of [`Grid::face_average`]).
    pub fn flux_second(&self, axis: usize, face_coef: &[f64]) -> Csr {
        let d = self.d;
        let h2 = self.spacing[axis].powi(2);
        let mut fd = self.dims;
        fd[axis] += 1;
        let face_index = |m: &[usize; 3]| {
            let mut idx = 0;
            for a in (0..d).rev() {
                idx = idx * fd[a] + m[a];
            }
            idx
        };
        let n = self.len();
        let na = self.dims[axis];
        let mut entries = Vec::new();
        for idx in 0..n {
            let m = self.multi_index(idx);
            let i = m[axis];
            let mut fl = m;
            fl[axis] = i;
            let kl = face_coef[face_index(&fl)];
            let mut fr = m;
            fr[axis] = i + 1;
            let kr = face_coef[face_index(&fr)];
            entries.push((idx, idx, (kl + kr) / h2));
            if i > 0 {
                let mut mm = m;
                mm[axis] = i - 1;
                entries.push((idx, self.index(&mm), -kl / h2));
            }
            if i + 1 < na {
                let mut mm = m;
                mm[axis] = i + 1;
                entries.push((idx, self.index(&mm), -kr / h2));
            }
        }
        sparse::from_triplets(n, n, &entries)
    }
}

// ---- fields ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    /// Component-major: component `c` occupies `data[c*N..(c+1)*N]`.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    /// Entry `(i, j)` occupies block `i*d + j`.
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { values: vec![0.0; grid.len()], grid }
    }
    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { values: vec![c; grid.len()], grid }
    }
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i)[..grid.dim()])).collect();
        ScalarField { grid, values }
    }
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return arg("value count does not match the grid");
        }
        Ok(ScalarField { grid, values })
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }
    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        ScalarField { grid: self.grid, values }
    }
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        VectorField { data: vec![0.0; grid.dim() * grid.len()], grid }
    }
    /// `f(x, c)` gives component `c` at position `x`.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64], usize) -> f64) -> Self {
        let n = grid.len();
        let d = grid.dim();
        let mut data = vec![0.0; d * n];
        for c in 0..d {
            for i in 0..n {
                data[c * n + i] = f(&grid.coords(i)[..d], c);
            }
        }
        VectorField { grid, data }
    }
    pub fn from_data(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.dim() * grid.len() {
            return arg("vector data length does not match the grid");
        }
        Ok(VectorField { grid, data })
    }
    pub fn from_components(comps: &[ScalarField]) -> Result<Self> {
        let grid = comps[0].grid;
        if comps.len() != grid.dim() || comps.iter().any(|c| c.grid != grid) {
            return arg("components must share one grid and match its dimension");
        }
        let data = comps.iter().flat_map(|c| c.values.iter().cloned()).collect();
        Ok(VectorField { grid, data })
    }
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }
    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }
    pub fn component_field(&self, c: usize) -> ScalarField {
        ScalarField { grid: self.grid, values: self.component(c).to_vec() }
    }
    pub fn scaled(&self, s: f64) -> Self {
        VectorField { grid: self.grid, data: self.data.iter().map(|v| s * v).collect() }
    }
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.data.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl TensorField {
    pub fn zeros(grid: Grid) -> Self {
        let d = grid.dim();
        TensorField { data: vec![0.0; d * d * grid.len()], grid }
    }
    pub fn identity(grid: Grid) -> Self {
        let mut t = TensorField::zeros(grid);
        for i in 0..grid.dim() {
            t.entry_mut(i, i).iter_mut().for_each(|v| *v = 1.0);
        }
        t
    }
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let n = self.grid.len();
        let b = i * self.grid.dim() + j;
        &self.data[b * n..(b + 1) * n]
    }
    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let n = self.grid.len();
        let b = i * self.grid.dim() + j;
        &mut self.data[b * n..(b + 1) * n]
    }
    /// The `d x d` matrix at node `k`, row-major.
    pub fn at(&self, k: usize) -> [[f64; 3]; 3] {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut m = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                m[i][j] = self.data[(i * d + j) * n + k];
            }
        }
        m
    }
    pub fn set(&mut self, k: usize, m: &[[f64; 3]; 3]) {
        let d = self.grid.dim();
        let n = self.grid.len();
        for i in 0..d {
            for j in 0..d {
                self.data[(i * d + j) * n + k] = m[i][j];
            }
        }
    }
    pub fn transpose(&self) -> Self {
        let d = self.grid.dim();
        let mut t = TensorField::zeros(self.grid);
        for i in 0..d {
            for j in 0..d {
                t.entry_mut(j, i).copy_from_slice(self.entry(i, j));
            }
        }
        t
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.data.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }
}

// ---- differential operators ------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffKind {
    Gradient,
    Divergence,
    Laplacian,
    SymGradient,
    Jacobian,
}

#[derive(Clone, Copy, Debug)]
pub enum FieldRef<'a> {
    Scalar(&'a ScalarField),
    Vector(&'a VectorField),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Vector(VectorField),
    Tensor(TensorField),
}

impl Field {
    pub fn into_scalar(self) -> Option<ScalarField> {
        match self {
            Field::Scalar(s) => Some(s),
            _ => None,
        }
    }
    pub fn into_vector(self) -> Option<VectorField> {
        match self {
            Field::Vector(v) => Some(v),
            _ => None,
        }
    }
    pub fn into_tensor(self) -> Option<TensorField> {
        match self {
            Field::Tensor(t) => Some(t),
            _ => None,
        }
    }
}

/// Second-order finite-difference operators. `ghost` applies to scalar
/// inputs; vector inputs are Dirichlet fields and always read zero walls.
pub fn diff_op(kind: DiffKind, field: FieldRef<'_>, ghost: Ghost) -> Result<Field> {
    match (kind, field) {
        (DiffKind::Gradient, FieldRef::Scalar(s)) => Ok(Field::Vector(gradient(s, ghost))),
        (DiffKind::Laplacian, FieldRef::Scalar(s)) => {
            let values = sparse::matvec(&s.grid.laplacian(ghost), &s.values);
            Ok(Field::Scalar(ScalarField { grid: s.grid, values }))
        }
        (DiffKind::Laplacian, FieldRef::Vector(v)) => {
            let data = sparse::matvec(&v.grid.vector_laplacian(), &v.data);
            Ok(Field::Vector(VectorField { grid: v.grid, data }))
        }
        (DiffKind::Divergence, FieldRef::Vector(v)) => Ok(Field::Scalar(divergence(v))),
        (DiffKind::Jacobian, FieldRef::Vector(v)) => Ok(Field::Tensor(jacobian(v))),
        (DiffKind::SymGradient, FieldRef::Vector(v)) => Ok(Field::Tensor(sym_gradient(v))),
        (k, FieldRef::Scalar(_)) => arg(format!("{k:?} needs a vector field")),
        (k, FieldRef::Vector(_)) => arg(format!("{k:?} needs a scalar field")),
    }
}

pub fn gradient(s: &ScalarField, ghost: Ghost) -> VectorField {
    VectorField { grid: s.grid, data: sparse::matvec(&s.grid.gradient(ghost), &s.values) }
}

pub fn divergence(v: &VectorField) -> ScalarField {
    ScalarField { grid: v.grid, values: sparse::matvec(&v.grid.divergence(), &v.data) }
}

pub fn jacobian(v: &VectorField) -> TensorField {
    TensorField { grid: v.grid, data: sparse::matvec(&v.grid.jacobian(), &v.data) }
}

pub fn sym_gradient(v: &VectorField) -> TensorField {
    let j = jacobian(v);
    let jt = j.transpose();
    let data = j.data.iter().zip(&jt.data).map(|(a, b)| 0.5 * (a + b)).collect();
    TensorField { grid: v.grid, data }
}

/// Row-wise divergence `(div M)_i = sum_k d_k M_{ki}` (divergence on the
/// first index). Wall values of `M` are read with `ghost`.
pub fn tensor_divergence(m: &TensorField, ghost: Ghost) -> VectorField {
    let g = m.grid;
    let d = g.dim();
    let n = g.len();
    let parts: Vec<Csr> = (0..d).map(|a| g.partial(a, ghost)).collect();
    let mut out = VectorField::zeros(g);
    for i in 0..d {
        let o = &mut out.data[i * n..(i + 1) * n];
        for (k, p) in parts.iter().enumerate() {
            sparse::matvec_acc(p, 1.0, m.entry(k, i), o);
        }
    }
    out
}

/// Box average with trapezoid weights on the stored nodes (all equal), and
/// the field minus that average.
pub fn mean_and_project(field: &ScalarField) -> (f64, ScalarField) {
    let mean = mean(&field.values);
    (mean, field.map(|v| v - mean))
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Dirichlet data are stored on interior nodes only and every velocity
/// stencil reads zero walls, so this is the identity on the stored values.
pub fn enforce_dirichlet(field: &VectorField) -> VectorField {
    field.clone()
}

/// Weighted `l2` inner product `h^d sum a b`.
pub fn inner(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    grid.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}
