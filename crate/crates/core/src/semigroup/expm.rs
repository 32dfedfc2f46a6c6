//! Dense matrix exponential and first phi-function by Taylor scaling and squaring.

use faer::Mat;

fn norm1(x: &Mat<f64>) -> f64 {
    (0..x.ncols())
        .map(|j| (0..x.nrows()).map(|i| x.read(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const DEGREE: usize = 16;

/// `(e^X, phi1(X))` with `phi1(X) = sum_k X^k / (k+1)!`.
///
/// `X` is scaled to norm at most 1/2, the truncated series are summed, and
/// the results are squared back with `e^{2Y} = (e^Y)^2` and
/// `phi1(2Y) = phi1(Y) (e^Y + I) / 2`.
pub fn expm_phi1(x: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
    let n = x.nrows();
    let nrm = norm1(x);
    let s = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as i32 } else { 0 };
    let y = x * faer::scale(0.5f64.powi(s));
    let id = Mat::<f64>::identity(n, n);
    let mut e = id.clone();
    let mut p = id.clone();
    let mut term = id.clone();
    for k in 1..=DEGREE {
        term = &term * &y * faer::scale(1.0 / k as f64);
        e += &term;
        p += &term * faer::scale(1.0 / (k + 1) as f64);
    }
    for _ in 0..s {
        p = &p * (&e + &id) * faer::scale(0.5);
        e = &e * &e;
    }
    (e, p)
}

/// `e^X` alone (skips the phi-function products).
pub fn expm(x: &Mat<f64>) -> Mat<f64> {
    let n = x.nrows();
    let nrm = norm1(x);
    let s = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as i32 } else { 0 };
    let y = x * faer::scale(0.5f64.powi(s));
    let mut e = Mat::<f64>::identity(n, n);
    let mut term = e.clone();
    for k in 1..=DEGREE {
        term = &term * &y * faer::scale(1.0 / k as f64);
        e += &term;
    }
    for _ in 0..s {
        e = &e * &e;
    }
    e
}
