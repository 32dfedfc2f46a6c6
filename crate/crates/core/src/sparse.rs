//! Thin helpers around `sprs` CSR matrices.

use faer::Mat;
use num_complex::Complex64;
use sprs::{CsMat, TriMat};

pub type Csr = CsMat<f64>;

/// Builds a CSR matrix from `(row, col, value)` triplets, summing duplicates.
pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Csr {
    let mut tri = TriMat::with_capacity((rows, cols), entries.len());
    for &(i, j, v) in entries {
        if v != 0.0 {
            tri.add_triplet(i, j, v);
        }
    }
    tri.to_csr()
}

pub fn identity(n: usize) -> Csr {
    CsMat::eye(n)
}

/// `y = M x`.
pub fn matvec(m: &Csr, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.rows()];
    matvec_into(m, x, &mut y);
    y
}

/// `y = M x`, overwriting `y`.
pub fn matvec_into(m: &Csr, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), m.cols());
    debug_assert_eq!(y.len(), m.rows());
    let ip = m.indptr();
    let ip = ip.raw_storage();
    let idx = m.indices();
    let val = m.data();
    for (r, yr) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in ip[r]..ip[r + 1] {
            acc += val[k] * x[idx[k]];
        }
        *yr = acc;
    }
}

/// `y += alpha M x`.
pub fn matvec_acc(m: &Csr, alpha: f64, x: &[f64], y: &mut [f64]) {
    let ip = m.indptr();
    let ip = ip.raw_storage();
    let idx = m.indices();
    let val = m.data();
    for (r, yr) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in ip[r]..ip[r + 1] {
            acc += val[k] * x[idx[k]];
        }
        *yr += alpha * acc;
    }
}

/// Real matrix acting on a complex vector.
pub fn matvec_complex(m: &Csr, x: &[Complex64]) -> Vec<Complex64> {
    let ip = m.indptr();
    let ip = ip.raw_storage();
    let idx = m.indices();
    let val = m.data();
    (0..m.rows())
        .map(|r| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in ip[r]..ip[r + 1] {
                acc += x[idx[k]] * val[k];
            }
            acc
        })
        .collect()
}

pub fn transpose(m: &Csr) -> Csr {
    m.transpose_view().to_csr()
}

/// `a M + b N`.
pub fn lincomb(a: f64, m: &Csr, b: f64, n: &Csr) -> Csr {
    assert_eq!(m.shape(), n.shape());
    let mut entries = Vec::with_capacity(m.nnz() + n.nnz());
    for (v, (i, j)) in m.iter() {
        entries.push((i, j, a * v));
    }
    for (v, (i, j)) in n.iter() {
        entries.push((i, j, b * v));
    }
    from_triplets(m.rows(), m.cols(), &entries)
}

/// Sparse product `M N`.
pub fn product(m: &Csr, n: &Csr) -> Csr {
    assert_eq!(m.cols(), n.rows());
    m * n
}

pub fn scale(m: &Csr, a: f64) -> Csr {
    m.map(|v| a * v)
}

/// Multiplies row `i` by `w[i]`.
pub fn scale_rows(m: &Csr, w: &[f64]) -> Csr {
    let mut out = m.clone();
    let rows = out.rows();
    for r in 0..rows {
        if let Some(mut row) = out.outer_view_mut(r) {
            for (_, v) in row.iter_mut() {
                *v *= w[r];
            }
        }
    }
    out
}

/// Block matrix from a grid of optional blocks with given row/column sizes.
pub fn block(row_sizes: &[usize], col_sizes: &[usize], blocks: &[Option<&Csr>]) -> Csr {
    assert_eq!(blocks.len(), row_sizes.len() * col_sizes.len());
    let nr: usize = row_sizes.iter().sum();
    let nc: usize = col_sizes.iter().sum();
    let mut entries = Vec::new();
    let mut r0 = 0;
    for (bi, &rs) in row_sizes.iter().enumerate() {
        let mut c0 = 0;
        for (bj, &cs) in col_sizes.iter().enumerate() {
            if let Some(b) = blocks[bi * col_sizes.len() + bj] {
                assert_eq!(b.shape(), (rs, cs));
                for (v, (i, j)) in b.iter() {
                    entries.push((r0 + i, c0 + j, *v));
                }
            }
            c0 += cs;
        }
        r0 += rs;
    }
    from_triplets(nr, nc, &entries)
}

pub fn to_dense(m: &Csr) -> Mat<f64> {
    let mut d = Mat::<f64>::zeros(m.rows(), m.cols());
    for (v, (i, j)) in m.iter() {
        d.write(i, j, d.read(i, j) + *v);
    }
    d
}

/// Max-norm of `M - M^T`.
pub fn asymmetry(m: &Csr) -> f64 {
    let t = transpose(m);
    let diff = lincomb(1.0, m, -1.0, &t);
    diff.data().iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Infinity norm (max absolute row sum).
pub fn norm_inf(m: &Csr) -> f64 {
    m.outer_iterator()
        .map(|row| row.iter().map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
