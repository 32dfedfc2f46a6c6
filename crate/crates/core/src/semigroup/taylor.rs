//! Piecewise-polynomial time functions and the Taylor-substep solver for
//! `y' + M y = h`.
//!
//! `[0, T]` is cut into substeps of length `delta`; on substep `k` a path
//! is stored as the coefficients of a polynomial in `theta` in `[0, 1]`
//! (`t = t_k + theta delta`). With `delta ||M|| <= 8` and degree 48 the
//! truncated Taylor recursion reproduces the exact flow to rounding.

use crate::error::{arg, Result};

pub const DEGREE: usize = 48;
pub const RHO: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorGrid {
    pub t_end: f64,
    pub substeps: usize,
    pub degree: usize,
}

impl TaylorGrid {
    /// Smallest substep count that is a multiple of `coarse` and keeps
    /// `delta * norm <= RHO`.
    pub fn for_norm(t_end: f64, coarse: usize, norm: f64) -> Self {
        let per = ((t_end * norm / coarse as f64 / RHO).ceil() as usize).max(1);
        TaylorGrid { t_end, substeps: per * coarse, degree: DEGREE }
    }
    pub fn delta(&self) -> f64 {
        self.t_end / self.substeps as f64
    }
    pub fn start(&self, k: usize) -> f64 {
        k as f64 * self.delta()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyPath {
    pub dim: usize,
    pub grid: TaylorGrid,
    /// `coef[(k * (degree + 1) + p) * dim + i]`.
    pub coef: Vec<f64>,
}

impl PolyPath {
    pub fn zeros(dim: usize, grid: TaylorGrid) -> Self {
        PolyPath { dim, grid, coef: vec![0.0; dim * (grid.degree + 1) * grid.substeps] }
    }

    fn stride(&self) -> usize {
        self.dim * (self.grid.degree + 1)
    }

    pub fn coeff(&self, k: usize, p: usize) -> &[f64] {
        let o = k * self.stride() + p * self.dim;
        &self.coef[o..o + self.dim]
    }

    pub fn coeff_mut(&mut self, k: usize, p: usize) -> &mut [f64] {
        let o = k * self.stride() + p * self.dim;
        let d = self.dim;
        &mut self.coef[o..o + d]
    }

    /// Piecewise-constant path from one value per coarse step.
    pub fn piecewise_constant(values: &[Vec<f64>], grid: TaylorGrid) -> Result<Self> {
        let coarse = values.len();
        if coarse == 0 || grid.substeps % coarse != 0 {
            return arg("substeps must be a multiple of the coarse step count");
        }
        let dim = values[0].len();
        let per = grid.substeps / coarse;
        let mut out = PolyPath::zeros(dim, grid);
        for k in 0..grid.substeps {
            out.coeff_mut(k, 0).copy_from_slice(&values[k / per]);
        }
        Ok(out)
    }

    /// Value at `theta = 1` of substep `k`.
    pub fn end_value(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for p in 0..=self.grid.degree {
            v.iter_mut().zip(self.coeff(k, p)).for_each(|(a, b)| *a += b);
        }
        v
    }

    /// Values at the `coarse + 1` coarse nodes, starting with `initial`.
    pub fn coarse_values(&self, initial: &[f64], coarse: usize) -> Vec<Vec<f64>> {
        let per = self.grid.substeps / coarse;
        let mut out = vec![initial.to_vec()];
        for c in 0..coarse {
            out.push(self.end_value((c + 1) * per - 1));
        }
        out
    }

    /// Time derivative, a path of the same shape.
    pub fn derivative(&self) -> Self {
        let mut out = PolyPath::zeros(self.dim, self.grid);
        let inv = 1.0 / self.grid.delta();
        for k in 0..self.grid.substeps {
            for p in 1..=self.grid.degree {
                let c = p as f64 * inv;
                let src = self.coeff(k, p).to_vec();
                out.coeff_mut(k, p - 1).iter_mut().zip(src).for_each(|(a, b)| *a = c * b);
            }
        }
        out
    }

    /// Coefficient-wise linear map `x -> F x` into dimension `out_dim`.
    pub fn map(&self, out_dim: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let mut out = PolyPath::zeros(out_dim, self.grid);
        for k in 0..self.grid.substeps {
            for p in 0..=self.grid.degree {
                let src = self.coeff(k, p);
                if src.iter().all(|v| *v == 0.0) {
                    continue;
                }
                f(src, out.coeff_mut(k, p));
            }
        }
        out
    }

    pub fn axpy(&mut self, a: f64, x: &PolyPath) {
        self.coef.iter_mut().zip(&x.coef).for_each(|(s, v)| *s += a * v);
    }

    /// Multiplies by `e^{-K t}` (exact up to series truncation when `K delta <= RHO`).
    pub fn times_exp(&self, k_rate: f64) -> Self {
        let d = self.grid.degree;
        let delta = self.grid.delta();
        let mut series = vec![1.0; d + 1];
        for p in 1..=d {
            series[p] = series[p - 1] * (-k_rate * delta) / p as f64;
        }
        let mut out = PolyPath::zeros(self.dim, self.grid);
        for k in 0..self.grid.substeps {
            let w = (-k_rate * self.grid.start(k)).exp();
            for p in 0..=d {
                let src = self.coeff(k, p).to_vec();
                if src.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for q in 0..=(d - p) {
                    let c = w * series[q];
                    out.coeff_mut(k, p + q).iter_mut().zip(&src).for_each(|(a, b)| *a += c * b);
                }
            }
        }
        out
    }

    /// Largest absolute coefficient sum over substeps (a sup-norm bound).
    pub fn sup_bound(&self) -> f64 {
        let mut best: f64 = 0.0;
        for k in 0..self.grid.substeps {
            for i in 0..self.dim {
                let s: f64 = (0..=self.grid.degree).map(|p| self.coeff(k, p)[i].abs()).sum();
                best = best.max(s);
            }
        }
        best
    }
}

/// Solves `y' + M y = h`, `y(0) = y0` on the path grid; `m(x, y)` writes `M x`.
pub fn solve_linear(m: &dyn Fn(&[f64], &mut [f64]), h: &PolyPath, y0: &[f64]) -> PolyPath {
    let grid = h.grid;
    let dim = y0.len();
    let delta = grid.delta();
    let mut out = PolyPath::zeros(dim, grid);
    let mut state = y0.to_vec();
    let mut my = vec![0.0; dim];
    for k in 0..grid.substeps {
        out.coeff_mut(k, 0).copy_from_slice(&state);
        for p in 0..grid.degree {
            let yp = out.coeff(k, p).to_vec();
            m(&yp, &mut my);
            let hp = h.coeff(k, p);
            let c = delta / (p + 1) as f64;
            let next = out.coeff_mut(k, p + 1);
            for i in 0..dim {
                next[i] = c * (hp[i] - my[i]);
            }
        }
        state = out.end_value(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_decay_with_constant_forcing() {
        // y' + a y = c: y(t) = c/a + (y0 - c/a) e^{-at}
        let a = 37.0;
        let grid = TaylorGrid::for_norm(1.0, 4, a);
        let h = PolyPath::piecewise_constant(&vec![vec![2.0]; 4], grid).unwrap();
        let y = solve_linear(&|x, y| y[0] = a * x[0], &h, &[1.0]);
        let vals = y.coarse_values(&[1.0], 4);
        for (n, v) in vals.iter().enumerate() {
            let t = n as f64 * 0.25;
            let exact = 2.0 / a + (1.0 - 2.0 / a) * (-a * t).exp();
            assert!((v[0] - exact).abs() < 1e-14);
        }
        let dy = y.derivative();
        let end = dy.end_value(grid.substeps - 1)[0];
        let exact = -a * (1.0 - 2.0 / a) * (-a as f64).exp();
        assert!((end - exact).abs() < 1e-12);
    }

    #[test]
    fn exponential_weight_is_exact() {
        let grid = TaylorGrid::for_norm(2.0, 2, 5.0);
        let one = PolyPath::piecewise_constant(&[vec![1.0], vec![3.0]], grid).unwrap();
        let w = one.times_exp(5.0);
        let vals = w.coarse_values(&[1.0], 2);
        assert!((vals[1][0] / (-5f64).exp() - 1.0).abs() < 1e-12);
        assert!((vals[2][0] / (3.0 * (-10f64).exp()) - 1.0).abs() < 1e-12);
    }
}
