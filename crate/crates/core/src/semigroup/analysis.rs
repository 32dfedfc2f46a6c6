use super::{krylov, solve_cauchy, Forcing, LinearOperator, SymmetryHint, EIGEN_LIMIT};
use crate::error::{arg, Error, Result};
use faer::complex_native::c64;
use faer::prelude::*;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorPoint {
    pub angle: f64,
    pub radius: f64,
    /// `||lambda (lambda + A)^{-1}||`, `None` when the solve was singular.
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorReport {
    pub angles_tested: Vec<f64>,
    pub radii: Vec<f64>,
    pub points: Vec<SectorPoint>,
    pub sup_bound: f64,
    pub spectral_abscissa: f64,
    /// Largest tested `|arg lambda|` up to which the bound stays within twice
    /// its value on the positive real axis.
    pub empirical_angle: f64,
    pub excluded: usize,
}

const POWER_ITERS: usize = 200;
const POWER_STALL: f64 = 1e-10;
/// Below this size the smallest singular value is computed directly.
const EXACT_SVD_LIMIT: usize = 256;

/// Largest singular value of `m^{-1}`, by power iteration on `R^H R` for
/// large matrices.
fn inverse_norm(m: &Mat<c64>, seed: u64) -> Option<f64> {
    let n = m.nrows();
    if n <= EXACT_SVD_LIMIT {
        let smin = m.singular_values().into_iter().fold(f64::INFINITY, f64::min);
        return (smin > 0.0).then(|| 1.0 / smin);
    }
    let lu = m.partial_piv_lu();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Mat::<c64>::from_fn(n, 1, |_, _| c64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    let nx = x.norm_l2();
    x = &x * faer::scale(c64::new(1.0 / nx, 0.0));
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERS {
        let y = lu.solve(&x);
        let s = y.norm_l2();
        if !s.is_finite() {
            return None;
        }
        let z = lu.solve_conj_transpose(&y);
        let nz = z.norm_l2();
        if !(nz.is_finite() && nz > 0.0) {
            return None;
        }
        x = &z * faer::scale(c64::new(1.0 / nz, 0.0));
        let done = (s - sigma).abs() <= POWER_STALL * s;
        sigma = s;
        if done {
            break;
        }
    }
    Some(sigma)
}

/// Evaluates `||lambda (lambda + A)^{-1}||` on the polar lattice
/// `lambda = r e^{i phi}`.
pub fn sectoriality_scan(op: &LinearOperator, angles: &[f64], radii: &[f64]) -> Result<SectorReport> {
    if radii.iter().any(|r| !(*r > 0.0)) {
        return arg("radii must be positive");
    }
    if angles.is_empty() || radii.is_empty() {
        return arg("need at least one angle and one radius");
    }
    if op.dim() > EIGEN_LIMIT {
        return Err(Error::Precondition("operator too large for a resolvent scan".into()));
    }
    let abscissa = op.spectral_abscissa()?;
    let exact_values = match op.hint() {
        SymmetryHint::SelfAdjoint => Some(op.sym_eig()?.values.clone()),
        _ => None,
    };
    let r = op.restricted_dense();
    let n = r.nrows();
    let mut points = Vec::new();
    for (ia, &phi) in angles.iter().enumerate() {
        for (ir, &rad) in radii.iter().enumerate() {
            let lam = num_complex::Complex64::from_polar(rad, phi);
            let bound = match &exact_values {
                Some(vals) => {
                    let m = vals.iter().map(|l| (lam + l).norm()).fold(f64::INFINITY, f64::min);
                    if m <= 1e-14 * rad {
                        None
                    } else {
                        Some(rad / m)
                    }
                }
                None => {
                    let shifted = Mat::<c64>::from_fn(n, n, |i, j| {
                        let v = r.read(i, j);
                        if i == j {
                            c64::new(v + lam.re, lam.im)
                        } else {
                            c64::new(v, 0.0)
                        }
                    });
                    inverse_norm(&shifted, (ia * 1000 + ir) as u64).map(|s| rad * s)
                }
            };
            let bound = bound.filter(|b| b.is_finite() && *b < 1e14);
            points.push(SectorPoint { angle: phi, radius: rad, bound });
        }
    }
    let sup_bound = points.iter().filter_map(|p| p.bound).fold(0.0, f64::max);
    let excluded = points.iter().filter(|p| p.bound.is_none()).count();
    let sup_at = |phi: f64| {
        points.iter().filter(|p| p.angle == phi).filter_map(|p| p.bound).fold(0.0, f64::max)
    };
    let mut sorted: Vec<f64> = angles.to_vec();
    sorted.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let base = sup_at(sorted[0]);
    let mut empirical_angle = sorted[0].abs();
    for &phi in &sorted {
        if sup_at(phi) <= 2.0 * base && points.iter().filter(|p| p.angle == phi).all(|p| p.bound.is_some()) {
            empirical_angle = phi.abs();
        } else {
            break;
        }
    }
    Ok(SectorReport {
        angles_tested: angles.to_vec(),
        radii: radii.to_vec(),
        points,
        sup_bound,
        spectral_abscissa: abscissa,
        empirical_angle,
        excluded,
    })
}

/// Norm on the state space used inside the interpolation integral.
#[derive(Clone, Copy)]
pub enum BaseNorm<'a> {
    /// `sqrt(weight * sum x_i^2)`.
    L2 { weight: f64 },
    Custom(&'a dyn Fn(&[f64]) -> f64),
}

impl BaseNorm<'_> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BaseNorm::L2 { weight } => (weight * x.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            BaseNorm::Custom(f) => f(x),
        }
    }
}

pub const DECADES: f64 = 8.0;
pub const POINTS_PER_DECADE: usize = 64;

/// Geometric quadrature nodes and weights covering `DECADES` decades
/// centred at `center`, midpoint rule in `log t`.
pub fn log_grid(center: f64) -> (Vec<f64>, Vec<f64>) {
    let n = (DECADES as usize) * POINTS_PER_DECADE;
    let ds = std::f64::consts::LN_10 / POINTS_PER_DECADE as f64;
    let s0 = center.ln() - 0.5 * DECADES * std::f64::consts::LN_10;
    let t: Vec<f64> = (0..n).map(|k| (s0 + (k as f64 + 0.5) * ds).exp()).collect();
    let w = t.iter().map(|t| t * ds).collect();
    (t, w)
}

/// `int_0^inf t^{-theta} ||A T(t) x|| dt` (the `q = 1` semigroup seminorm).
///
/// Quadrature on the geometric grid plus the small-time tail
/// `t_min^{1-theta} / (1-theta) ||A x||`.
pub fn interpolation_seminorm(op: &LinearOperator, x: &[f64], theta: f64, base: BaseNorm<'_>) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return arg("theta must lie in (0, 1)");
    }
    if x.len() != op.dim() {
        return arg("vector length does not match the operator");
    }
    let c = op.spectral_abscissa()?;
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("spectral abscissa {c:.3e} is not positive")));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let (ts, ws) = log_grid(1.0 / c);
    let t_min = ts[0] * (-0.5 * std::f64::consts::LN_10 / POINTS_PER_DECADE as f64).exp();
    let ax = op.apply(x);
    let mut total = t_min.powf(1.0 - theta) / (1.0 - theta) * base.eval(&ax);

    match (op.hint(), base) {
        (SymmetryHint::SelfAdjoint, BaseNorm::L2 { weight }) => {
            let eig = op.sym_eig()?;
            let coords = eig.project(x);
            for (t, w) in ts.iter().zip(&ws) {
                let s: f64 = coords
                    .iter()
                    .zip(&eig.values)
                    .map(|(c, l)| (l * (-t * l).exp() * c).powi(2))
                    .sum();
                total += w * t.powf(-theta) * (weight * s).sqrt();
            }
        }
        (SymmetryHint::SelfAdjoint, _) | (SymmetryHint::SelfAdjointWeighted(_), _) => {
            let eig = op.sym_eig()?;
            for (t, w) in ts.iter().zip(&ws) {
                let y = eig.apply_fn(|l| l * (-t * l).exp(), x);
                total += w * t.powf(-theta) * base.eval(&y);
            }
        }
        (SymmetryHint::General, _) => {
            let apply = |u: &[f64], y: &mut [f64]| op.apply_into(u, y);
            let mut state = x.to_vec();
            let mut now = 0.0;
            for (t, w) in ts.iter().zip(&ws) {
                state = krylov::expmv_phi(&apply, &state, None, t - now, 1e-10)?;
                now = *t;
                let y = op.apply(&state);
                total += w * t.powf(-theta) * base.eval(&y);
            }
        }
    }
    Ok(total)
}

/// `||x|| + [x]_{theta,1}`.
pub fn interpolation_norm(op: &LinearOperator, x: &[f64], theta: f64, base: BaseNorm<'_>) -> Result<f64> {
    Ok(base.eval(x) + interpolation_seminorm(op, x, theta, base)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxRegTrial {
    /// `(||u'|| + ||Au||) / ||f||` in `L^1` of the interpolation norm.
    pub total: f64,
    /// Time-derivative part alone.
    pub time_part: f64,
    /// Operator part alone.
    pub operator_part: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxRegReport {
    pub trials: Vec<Option<MaxRegTrial>>,
    /// Max of `total` over non-degenerate trials.
    pub constant: f64,
    pub operator_constant: f64,
}

/// Empirical maximal `L^1`-regularity constant over trial forcings with
/// zero initial data. Time integrals are left-endpoint Riemann sums and
/// `u'` is a forward difference.
pub fn maxreg_constant(
    op: &LinearOperator,
    theta: f64,
    trials: &[Forcing],
    t_end: f64,
    steps: usize,
    base: BaseNorm<'_>,
) -> Result<MaxRegReport> {
    let c = op.spectral_abscissa()?;
    if !(c > 0.0) {
        return Err(Error::Precondition(format!("spectral abscissa {c:.3e} is not positive")));
    }
    let n = op.dim();
    let dt = t_end / steps as f64;
    let mut out = Vec::new();
    for f in trials {
        let samples = match f {
            Forcing::Zero => {
                out.push(None);
                continue;
            }
            Forcing::Midpoint(v) => v,
        };
        let mut sf = 0.0;
        for s in samples {
            sf += interpolation_norm(op, s, theta, base)?;
        }
        if sf == 0.0 {
            out.push(None);
            continue;
        }
        let tr = solve_cauchy(op, &vec![0.0; n], f, t_end, steps)?;
        let (mut su, mut sa) = (0.0, 0.0);
        for k in 0..steps {
            let du: Vec<f64> = tr.states[k + 1].iter().zip(&tr.states[k]).map(|(a, b)| (a - b) / dt).collect();
            su += interpolation_norm(op, &du, theta, base)?;
            let au = op.apply(&tr.states[k]);
            sa += interpolation_norm(op, &au, theta, base)?;
        }
        out.push(Some(MaxRegTrial { total: (su + sa) / sf, time_part: su / sf, operator_part: sa / sf }));
    }
    let constant = out.iter().flatten().map(|t| t.total).fold(0.0, f64::max);
    let operator_constant = out.iter().flatten().map(|t| t.operator_part).fold(0.0, f64::max);
    Ok(MaxRegReport { trials: out, constant, operator_constant })
}
