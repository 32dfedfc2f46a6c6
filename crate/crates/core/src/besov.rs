//! Discrete Littlewood-Paley decomposition and Besov norms of grid fields.
//!
//! A field is extended to a periodic lattice (even reflection, odd
//! reflection or zero padding), transformed with an FFT, split into dyadic
//! annuli by raised-cosine cutoffs, and each band is measured in `L^p` on
//! the box. Frequencies are counted in units of the cosine/sine series
//! index, so a fixed smooth function has grid-independent band content.

use crate::error::{arg, Error, Result};
use crate::grid::{Grid, ScalarField, TensorField, VectorField};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtensionMode {
    /// `[f, reverse f]`, period `2N`: scalars with no boundary condition.
    EvenReflection,
    /// `[0, f, 0, -reverse f]`, period `2(N+1)`: Dirichlet fields.
    OddReflection,
    /// `[f, 0, .., 0]`, period `2N`.
    ZeroPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BesovParams {
    pub s: f64,
    pub p: f64,
    pub q: f64,
    pub d: usize,
}

impl BesovParams {
    pub fn new(s: f64, p: f64, q: f64, d: usize) -> Result<Self> {
        let b = BesovParams { s, p, q, d };
        b.validate()?;
        Ok(b)
    }

    /// `B^{d/p}_{p,1}`, the critical space for the density perturbation.
    pub fn critical(p: f64, d: usize) -> Result<Self> {
        BesovParams::new(d as f64 / p, p, 1.0, d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return arg(format!("p must be in [1, inf], got {}", self.p));
        }
        if !(self.q >= 1.0) {
            return arg(format!("q must be in [1, inf], got {}", self.q));
        }
        if !self.s.is_finite() {
            return arg("s must be finite");
        }
        if !(self.d == 2 || self.d == 3) {
            return arg("d must be 2 or 3");
        }
        Ok(())
    }

    pub fn with_s(&self, s: f64) -> Self {
        BesovParams { s, ..*self }
    }

    /// Conjugate exponent `p' = p / (p - 1)`.
    pub fn p_conjugate(&self) -> f64 {
        if self.p == 1.0 {
            f64::INFINITY
        } else if self.p.is_infinite() {
            1.0
        } else {
            self.p / (self.p - 1.0)
        }
    }
}

/// Anything stored as a list of nodal component arrays on one grid.
pub trait GridData {
    fn grid(&self) -> &Grid;
    fn components(&self) -> Vec<&[f64]>;
}

impl GridData for ScalarField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn components(&self) -> Vec<&[f64]> {
        vec![&self.values]
    }
}

impl GridData for VectorField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn components(&self) -> Vec<&[f64]> {
        self.data.chunks(self.grid.len()).collect()
    }
}

impl GridData for TensorField {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn components(&self) -> Vec<&[f64]> {
        self.data.chunks(self.grid.len()).collect()
    }
}

/// Raised-cosine low-pass profile: 1 on `[0, 1/2]`, 0 on `[1, inf)`.
pub fn chi(r: f64) -> f64 {
    if r <= 0.5 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (2.0 * r - 1.0)).cos())
    }
}

/// Annulus profile of block `j >= 0`, supported in `(2^{j-1}, 2^{j+1})`.
pub fn phi(j: i32, r: f64) -> f64 {
    chi(r / 2f64.powi(j + 1)) - chi(r / 2f64.powi(j))
}

#[derive(Clone)]
pub struct DyadicFilterBank {
    grid: Grid,
    mode: ExtensionMode,
    ext_dims: Vec<usize>,
    j_max: i32,
    /// `filters[b]` is the multiplier of block `j = b - 1` on the extended lattice.
    filters: Vec<Vec<f64>>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for DyadicFilterBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DyadicFilterBank")
            .field("mode", &self.mode)
            .field("ext_dims", &self.ext_dims)
            .field("j_max", &self.j_max)
            .finish()
    }
}

/// One band-limited piece of a field, restricted to the box.
#[derive(Clone, Debug)]
pub struct LpBlock {
    pub j: i32,
    /// Component-major nodal data, same layout as the input field.
    pub data: Vec<f64>,
}

impl DyadicFilterBank {
    pub fn new(grid: &Grid, mode: ExtensionMode) -> Result<Self> {
        let d = grid.dim();
        let ext_dims: Vec<usize> = grid
            .dims()
            .iter()
            .map(|&n| match mode {
                ExtensionMode::OddReflection => 2 * (n + 1),
                _ => 2 * n,
            })
            .collect();
        let min_n = *grid.dims().iter().min().unwrap();
        let j_max = (min_n as f64).log2().floor() as i32 - 1;
        if j_max < 0 {
            return Err(Error::Resolution("grid too coarse for a dyadic decomposition".into()));
        }
        let total: usize = ext_dims.iter().product();
        let mut radius = vec![0.0; total];
        for (lin, r) in radius.iter_mut().enumerate() {
            let mut rem = lin;
            let mut acc = 0.0;
            for &m in &ext_dims {
                let k = rem % m;
                rem /= m;
                // FFT index k on period m is series index min(k, m-k).
                let kk = k.min(m - k) as f64;
                acc += kk * kk;
            }
            *r = acc.sqrt();
        }
        let mut filters = Vec::new();
        for j in -1..=j_max {
            let f: Vec<f64> = radius
                .iter()
                .map(|&r| {
                    if j == -1 {
                        chi(r)
                    } else if j == j_max {
                        1.0 - chi(r / 2f64.powi(j))
                    } else {
                        phi(j, r)
                    }
                })
                .collect();
            filters.push(f);
        }
        let mut planner = FftPlanner::<f64>::new();
        let fwd = ext_dims[..d].iter().map(|&m| planner.plan_fft_forward(m)).collect();
        let inv = ext_dims[..d].iter().map(|&m| planner.plan_fft_inverse(m)).collect();
        Ok(DyadicFilterBank { grid: *grid, mode, ext_dims, j_max, filters, fwd, inv })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn mode(&self) -> ExtensionMode {
        self.mode
    }
    pub fn j_max(&self) -> i32 {
        self.j_max
    }
    pub fn block_count(&self) -> usize {
        self.filters.len()
    }

    /// Largest deviation of the summed multipliers from 1 on the lattice.
    pub fn partition_defect(&self) -> f64 {
        let n = self.filters[0].len();
        (0..n)
            .map(|i| (self.filters.iter().map(|f| f[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn extend(&self, values: &[f64]) -> Vec<Complex64> {
        let g = &self.grid;
        let d = g.dim();
        let total: usize = self.ext_dims.iter().product();
        let mut out = vec![Complex64::new(0.0, 0.0); total];
        for (lin, o) in out.iter_mut().enumerate() {
            let mut rem = lin;
            let mut m = [0usize; 3];
            let mut sign = 1.0;
            let mut inside = true;
            for a in 0..d {
                let e = self.ext_dims[a];
                let k = rem % e;
                rem /= e;
                let n = g.dims()[a];
                match self.mode {
                    ExtensionMode::EvenReflection => {
                        m[a] = if k < n { k } else { 2 * n - 1 - k };
                    }
                    ExtensionMode::ZeroPad => {
                        if k < n {
                            m[a] = k;
                        } else {
                            inside = false;
                        }
                    }
                    ExtensionMode::OddReflection => {
                        if k == 0 || k == n + 1 {
                            inside = false;
                        } else if k <= n {
                            m[a] = k - 1;
                        } else {
                            m[a] = 2 * n + 1 - k;
                            sign = -sign;
                        }
                    }
                }
            }
            if inside {
                *o = Complex64::new(sign * values[g.index(&m)], 0.0);
            }
        }
        out
    }

    /// Box node `m` position on the extended lattice.
    fn box_offset(&self, a: usize) -> usize {
        match self.mode {
            ExtensionMode::OddReflection => 1,
            _ => {
                let _ = a;
                0
            }
        }
    }

    fn restrict(&self, ext: &[Complex64]) -> Vec<f64> {
        let g = &self.grid;
        let d = g.dim();
        (0..g.len())
            .map(|idx| {
                let m = g.multi_index(idx);
                let mut lin = 0;
                for a in (0..d).rev() {
                    lin = lin * self.ext_dims[a] + m[a] + self.box_offset(a);
                }
                ext[lin].re
            })
            .collect()
    }

    fn fft_nd(&self, data: &mut [Complex64], inverse: bool) {
        let d = self.grid.dim();
        let mut stride = 1;
        for a in 0..d {
            let m = self.ext_dims[a];
            let plan = if inverse { &self.inv[a] } else { &self.fwd[a] };
            let total = data.len();
            let mut line = vec![Complex64::new(0.0, 0.0); m];
            let outer = total / (m * stride);
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * m * stride + s;
                    for (k, l) in line.iter_mut().enumerate() {
                        *l = data[base + k * stride];
                    }
                    plan.process(&mut line);
                    for (k, l) in line.iter().enumerate() {
                        data[base + k * stride] = *l;
                    }
                }
            }
            stride *= m;
        }
        if inverse {
            let scale = 1.0 / data.len() as f64;
            data.iter_mut().for_each(|v| *v *= scale);
        }
    }

    fn spectra<F: GridData + ?Sized>(&self, field: &F) -> Result<Vec<Vec<Complex64>>> {
        if field.grid() != &self.grid {
            return arg("field grid does not match the filter bank");
        }
        field
            .components()
            .into_iter()
            .map(|c| {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("field contains non-finite values".into()));
                }
                let mut e = self.extend(c);
                self.fft_nd(&mut e, false);
                Ok(e)
            })
            .collect()
    }

    fn band(&self, spec: &[Complex64], b: usize) -> Vec<f64> {
        let mut e: Vec<Complex64> =
            spec.iter().zip(&self.filters[b]).map(|(v, f)| v * *f).collect();
        self.fft_nd(&mut e, true);
        self.restrict(&e)
    }

    /// Band-limited pieces `j = -1 .. j_max`, restricted to the box.
    pub fn lp_blocks<F: GridData + ?Sized>(&self, field: &F) -> Result<Vec<LpBlock>> {
        let specs = self.spectra(field)?;
        Ok((0..self.block_count())
            .map(|b| LpBlock {
                j: b as i32 - 1,
                data: specs.iter().flat_map(|s| self.band(s, b)).collect(),
            })
            .collect())
    }

    /// `L^p` norms (pointwise Euclidean magnitude over components) of every block.
    pub fn block_norms<F: GridData + ?Sized>(&self, field: &F, p: f64) -> Result<Vec<f64>> {
        if !(p >= 1.0) {
            return arg(format!("p must be in [1, inf], got {p}"));
        }
        let specs = self.spectra(field)?;
        let n = self.grid.len();
        let vol = self.grid.cell_volume();
        Ok((0..self.block_count())
            .map(|b| {
                let mut mag2 = vec![0.0; n];
                for s in &specs {
                    for (m, v) in mag2.iter_mut().zip(self.band(s, b)) {
                        *m += v * v;
                    }
                }
                lp_of_squares(&mag2, p, vol)
            })
            .collect())
    }

    pub fn besov_norm<F: GridData + ?Sized>(&self, field: &F, params: &BesovParams) -> Result<f64> {
        params.validate()?;
        let blocks = self.block_norms(field, params.p)?;
        Ok(norm_from_blocks(&blocks, params.s, params.q))
    }
}

fn lp_of_squares(mag2: &[f64], p: f64, vol: f64) -> f64 {
    if p.is_infinite() {
        mag2.iter().fold(0.0_f64, |m, v| m.max(*v)).sqrt()
    } else {
        (vol * mag2.iter().map(|v| v.powf(0.5 * p)).sum::<f64>()).powf(1.0 / p)
    }
}

/// `L^p` norm with node weights `h^d` of the pointwise magnitude.
pub fn lp_norm<F: GridData + ?Sized>(field: &F, p: f64) -> f64 {
    let comps = field.components();
    let n = field.grid().len();
    let mut mag2 = vec![0.0; n];
    for c in comps {
        for (m, v) in mag2.iter_mut().zip(c) {
            *m += v * v;
        }
    }
    lp_of_squares(&mag2, p, field.grid().cell_volume())
}

/// `(sum_j (2^{js} n_j)^q)^{1/q}` with `blocks[b]` the norm of block `j = b - 1`.
pub fn norm_from_blocks(blocks: &[f64], s: f64, q: f64) -> f64 {
    let w = blocks.iter().enumerate().map(|(b, n)| 2f64.powf((b as f64 - 1.0) * s) * n);
    if q.is_infinite() {
        w.fold(0.0, f64::max)
    } else if q == 1.0 {
        w.sum()
    } else {
        w.map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Measures `||uv||_{B^s_{p,1}}` against `||u||_{B^s_{p,1}} ||v||_{B^{d/p}_{p,1}}`.
pub fn verify_product_estimate(
    bank: &DyadicFilterBank,
    u: &ScalarField,
    v: &ScalarField,
    s: f64,
    params: &BesovParams,
) -> Result<EstimateCheck> {
    params.validate()?;
    let d = params.d as f64;
    let lo = -(d / params.p).min(d / params.p_conjugate());
    if !(s > lo && s <= d / params.p + 1e-12) {
        return arg(format!("s = {s} outside the product range ({lo}, {}]", d / params.p));
    }
    let uv = u.zip(v, |a, b| a * b);
    let lhs = bank.besov_norm(&uv, &BesovParams { s, q: 1.0, ..*params })?;
    let nu = bank.besov_norm(u, &BesovParams { s, q: 1.0, ..*params })?;
    let nv = bank.besov_norm(v, &BesovParams { s: d / params.p, q: 1.0, ..*params })?;
    let rhs = nu * nv;
    Ok(EstimateCheck { lhs, rhs, ratio: lhs / rhs })
}

/// Measures `||K(z)||_{B^{d/p}_{p,1}}` against `(1 + ||z||_inf)^k ||z||_{B^{d/p}_{p,1}}`,
/// `k = ceil(d/p)`.
pub fn verify_composition_estimate(
    bank: &DyadicFilterBank,
    k_fn: &dyn Fn(f64) -> f64,
    z: &ScalarField,
    params: &BesovParams,
) -> Result<EstimateCheck> {
    params.validate()?;
    if k_fn(0.0).abs() > 1e-12 {
        return arg("K must vanish at 0");
    }
    let crit = BesovParams { s: params.d as f64 / params.p, q: 1.0, ..*params };
    let kz = z.map(k_fn);
    if kz.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("K(z) is not finite on the sampled range".into()));
    }
    let lhs = bank.besov_norm(&kz, &crit)?;
    let nz = bank.besov_norm(z, &crit)?;
    let k = (params.d as f64 / params.p).ceil() as i32;
    let rhs = (1.0 + z.max_abs()).powi(k) * nz;
    Ok(EstimateCheck { lhs, rhs, ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 } })
}
