//! Arnoldi approximation of `e^{-tA} u + t phi1(-tA) f` for large operators.

use super::expm::expm;
use crate::error::{Error, Result};
use faer::Mat;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Advances `w' = -A w + f`, `w(0) = u` to time `t` with adaptive Krylov
/// substeps on the augmented system `[w; 1]`. `apply(x, y)` writes `A x`.
pub fn expmv_phi(
    apply: &dyn Fn(&[f64], &mut [f64]),
    u: &[f64],
    f: Option<&[f64]>,
    t: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let n = u.len();
    let na = n + 1;
    let m_max = 40.min(na);
    let mut w: Vec<f64> = u.iter().cloned().chain(std::iter::once(1.0)).collect();
    if f.is_none() {
        w[n] = 0.0;
    }
    let aug = |x: &[f64], y: &mut [f64]| {
        apply(&x[..n], &mut y[..n]);
        for v in y[..n].iter_mut() {
            *v = -*v;
        }
        if let Some(f) = f {
            for (yi, fi) in y[..n].iter_mut().zip(f) {
                *yi += fi * x[n];
            }
        }
        y[n] = 0.0;
    };
    let mut done = 0.0;
    let mut tau = t;
    let mut rejections = 0usize;
    while done < t * (1.0 - 1e-14) {
        tau = tau.min(t - done);
        let beta = norm(&w);
        if beta == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut basis: Vec<Vec<f64>> = vec![w.iter().map(|x| x / beta).collect()];
        let mut h = Mat::<f64>::zeros(m_max + 1, m_max);
        let mut m = m_max;
        let mut happy = false;
        let mut z = vec![0.0; na];
        for j in 0..m_max {
            aug(&basis[j], &mut z);
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let c: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
                    h.write(i, j, h.read(i, j) + c);
                    z.iter_mut().zip(v).for_each(|(zi, vi)| *zi -= c * vi);
                }
            }
            let hn = norm(&z);
            h.write(j + 1, j, hn);
            let scale = (0..=j).map(|i| h.read(i, j).abs()).fold(0.0, f64::max).max(1.0);
            if hn <= 1e-13 * scale {
                m = j + 1;
                happy = true;
                break;
            }
            basis.push(z.iter().map(|x| x / hn).collect());
        }
        let h_next = h.read(m, m - 1);
        loop {
            let hm = Mat::<f64>::from_fn(m, m, |i, j| tau * h.read(i, j));
            let e = expm(&hm);
            let err = if happy { 0.0 } else { beta * h_next * tau * e.read(m - 1, 0).abs() };
            if err <= tol * beta * (tau / t).max(1e-3) || tau < t * 1e-12 {
                let mut next = vec![0.0; na];
                for (k, v) in basis.iter().take(m).enumerate() {
                    let c = beta * e.read(k, 0);
                    next.iter_mut().zip(v).for_each(|(a, b)| *a += c * b);
                }
                w = next;
                done += tau;
                tau *= 2.0;
                break;
            }
            tau *= 0.5;
            rejections += 1;
            if rejections > 200_000 {
                return Err(Error::Numerical("Krylov step size collapsed".into()));
            }
        }
    }
    w.truncate(n);
    Ok(w)
}
