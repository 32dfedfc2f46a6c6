//! One pipeline per scenario kind.

use crate::config::{Kind, Scenario};
use crate::error::CliError;
use crate::report::{Relation, RunReport, Series};
use cnslab_core::besov::{verify_composition_estimate, verify_product_estimate, BesovParams, DyadicFilterBank, ExtensionMode};
use cnslab_core::grid::{mean_and_project, Grid, ScalarField, VectorField};
use cnslab_core::lame::{assemble_lame, symbol_bounds_check, symbol_det, LameCoefficients, SymbolProbe};
use cnslab_core::lincns::{assemble_coupled_scaled, decay_measure, l2, solve_lcns, spectral_bound, Coupling, LinCNSState, StateNorms};
use cnslab_core::semigroup::{sectoriality_scan, Forcing, Trajectory};
use cnslab_core::solver::{picard_global, picard_local, GlobalProblem, IterationReport, LocalProblem};
use cnslab_core::varcoef::{build_partition, choose_delta, solve_varcoef, CoefficientFields, Method};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const DENSITY_INVARIANT_TOL: f64 = 1e-14;
pub const MASS_INVARIANT_TOL: f64 = 1e-13;
pub const INVERSE_INVARIANT_TOL: f64 = 1e-10;

/// Runs one scenario end to end. Deterministic in the scenario contents.
pub fn run_scenario(sc: &Scenario) -> Result<RunReport, CliError> {
    sc.validate()?;
    let num = |e| CliError::numerics(&sc.name, e);
    let grid = sc.grid()?;
    let mut rep = RunReport::new(&sc.name, sc.kind, sc.seed);
    match sc.kind {
        Kind::LameSpectrum => lame_spectrum(sc, grid, &mut rep).map_err(num)?,
        Kind::LinearDecay => linear_decay(sc, grid, &mut rep)?,
        Kind::GlobalSmall => global_small(sc, grid, &mut rep)?,
        Kind::LocalWellposed => local_wellposed(sc, grid, &mut rep).map_err(num)?,
        Kind::VarcoefSolve => varcoef_solve(sc, grid, &mut rep)?,
        Kind::BesovCheck => besov_check(sc, grid, &mut rep)?,
        Kind::SymbolCheck => symbol_check(sc, grid.dim(), &mut rep).map_err(num)?,
    }
    Ok(rep)
}

type CoreResult<T> = cnslab_core::Result<T>;

fn lame_spectrum(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> CoreResult<()> {
    let c = &sc.coefficients;
    let op = assemble_lame(&grid, &LameCoefficients::from_viscosities(c.mu, c.lambda)?)?;
    let angles = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];
    let radii: Vec<f64> = (-2..=4).map(|k| 10f64.powi(k)).collect();
    let scan = sectoriality_scan(&op, &angles, &radii)?;
    let mut table = Series::new(&["angle", "radius", "bound"]);
    for p in &scan.points {
        table.push_opt(vec![Some(p.angle), Some(p.radius), p.bound]);
    }
    rep.tables.insert("sector".into(), table);
    rep.metric("spectral_abscissa", scan.spectral_abscissa);
    rep.metric("sector_sup_bound", scan.sup_bound);
    rep.metric("empirical_angle", scan.empirical_angle);
    rep.metric("excluded_points", scan.excluded as f64);
    rep.check("spectral_abscissa_positive", scan.spectral_abscissa, Relation::Gt, 0.0);
    // Self-adjoint and positive: |lambda (lambda + A)^{-1}| <= 1 / sin(pi - |arg lambda|).
    rep.check("sector_bound", scan.sup_bound, Relation::Le, 1.0 / (PI / 4.0).sin() + 1e-9);
    Ok(())
}

/// Density perturbation and velocity with optional rescaling to a target
/// critical norm. The density part is made mean-free when `mean_free`.
fn initial_data(sc: &Scenario, grid: Grid, mean_free: bool) -> Result<(ScalarField, VectorField, f64), CliError> {
    let (mut a, mut u) = sc.fields(grid);
    if mean_free {
        a = mean_and_project(&a).1;
    }
    let norms = StateNorms::new(&grid, sc.solver.p).map_err(|e| CliError::numerics(&sc.name, e))?;
    let size = |a: &ScalarField, u: &VectorField| -> Result<f64, CliError> {
        let da = norms.density(&a.values, 0.0).map_err(|e| CliError::numerics(&sc.name, e))?;
        let du = norms.velocity(&u.data, 0.0).map_err(|e| CliError::numerics(&sc.name, e))?;
        Ok(da + du)
    };
    let mut n = size(&a, &u)?;
    if let Some(target) = sc.data.scale_to {
        if n == 0.0 {
            return Err(CliError::Validation("data.scale_to: the initial data is zero".into()));
        }
        let s = target / n;
        a = a.map(|v| v * s);
        u = u.scaled(s);
        n = size(&a, &u)?;
    }
    Ok((a, u, n))
}

fn linear_decay(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> Result<(), CliError> {
    let num = |e| CliError::numerics(&sc.name, e);
    let (a, u, n0) = initial_data(sc, grid, true)?;
    if n0 == 0.0 {
        return Err(CliError::Validation("linear_decay needs nonzero initial data".into()));
    }
    let c = &sc.coefficients;
    let coeffs = LameCoefficients::from_viscosities(c.mu, c.lambda).map_err(num)?;
    let op = assemble_coupled_scaled(&grid, &coeffs, sc.pressure().slope(1.0), Coupling::Full).map_err(num)?;
    let ts = op.time_scale;
    let bound = spectral_bound(&op).map_err(num)?;
    let init = LinCNSState::new(a, u.scaled(1.0 / ts)).map_err(num)?;
    let run = solve_lcns(&op, &init, &Forcing::Zero, sc.solver.t_end * ts, sc.solver.steps, sc.strategy()).map_err(num)?;
    let fit = decay_measure(&run.trajectory, &l2).map_err(num)?;
    let norms = StateNorms::new(&grid, sc.solver.p).map_err(num)?;
    let mut series = Series::new(&["time", "l2", "density_norm", "velocity_norm"]);
    let na = grid.len();
    for (t, x) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let da = norms.density(&x[..na], 0.0).map_err(num)?;
        let du = norms.velocity(&x[na..], 0.0).map_err(num)? * ts;
        series.push(&[t / ts, l2(x).map_err(num)?, da, du]);
    }
    rep.set_series(series);
    rep.metric("spectral_bound", bound.c_original);
    rep.metric("decay_rate", fit.rate * ts);
    rep.metric("decay_constant", fit.constant);
    rep.metric("rate_over_bound", fit.rate / bound.c);
    rep.check("spectral_bound_positive", bound.c, Relation::Gt, 0.0);
    rep.check("decay_rate_over_bound", fit.rate / bound.c, Relation::Ge, 0.9);
    Ok(())
}

fn iteration_table(report: &IterationReport) -> Series {
    let mut t = Series::new(&["iteration", "norm", "update", "contraction", "du_integral", "min_density", "eulerian_residual"]);
    for r in &report.iterations {
        t.push_opt(vec![
            Some(r.iteration as f64),
            Some(r.norm),
            Some(r.update),
            r.contraction,
            Some(r.du_integral),
            Some(r.min_density),
            r.eulerian_residual,
        ]);
    }
    t
}

fn invariant_checks(rep: &mut RunReport, report: &IterationReport) {
    let inv = &report.invariants;
    rep.metric("invariant_density", inv.density);
    rep.metric("invariant_mass", inv.mass);
    rep.metric("invariant_inverse", inv.inverse);
    rep.check("density_identity", inv.density, Relation::Le, DENSITY_INVARIANT_TOL);
    rep.check("mass_conservation", inv.mass, Relation::Le, MASS_INVARIANT_TOL);
    rep.check("inverse_identity", inv.inverse, Relation::Le, INVERSE_INVARIANT_TOL);
}

fn state_series(grid: Grid, traj: &Trajectory, norms: &StateNorms) -> CoreResult<Series> {
    let na = grid.len();
    let mut series = Series::new(&["time", "l2", "density_norm", "velocity_norm", "min_density"]);
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let min = x[..na].iter().cloned().fold(f64::INFINITY, f64::min) + 1.0;
        series.push(&[*t, l2(x)?, norms.density(&x[..na], 0.0)?, norms.velocity(&x[na..], 0.0)?, min]);
    }
    Ok(series)
}

fn global_small(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> Result<(), CliError> {
    let num = |e| CliError::numerics(&sc.name, e);
    let (a, u, n0) = initial_data(sc, grid, true)?;
    let prob = GlobalProblem::new(a, u, sc.solver_config()).map_err(num)?;
    let bound = spectral_bound(&prob.op).map_err(num)?;
    let run = picard_global(&prob).map_err(num)?;
    let report = &run.report;
    rep.set_series(state_series(grid, &run.trajectory, &prob.norms).map_err(num)?);
    rep.tables.insert("iterations".into(), iteration_table(report));
    rep.metric("data_norm", n0);
    rep.metric("spectral_bound", bound.c_original);
    rep.metric("iterations", report.iterations.len() as f64);
    let contraction = report.max_contraction().unwrap_or(0.0);
    rep.metric("max_contraction", contraction);
    rep.check("converged", report.converged as u8 as f64, Relation::Ge, 1.0);
    rep.check("max_contraction", contraction, Relation::Le, 0.5);
    if let Some(rate) = report.decay_rate {
        rep.metric("decay_rate", rate);
        rep.check("decay_rate_over_bound", rate / bound.c_original, Relation::Ge, 0.8);
    }
    if let Some(c) = report.bound_constant {
        rep.metric("bound_constant", c);
    }
    if let Some(r) = report.iterations.last().and_then(|r| r.eulerian_residual) {
        rep.metric("eulerian_residual", r);
    }
    invariant_checks(rep, report);
    Ok(())
}

fn local_wellposed(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> CoreResult<()> {
    let (a, u) = sc.fields(grid);
    let rho0 = a.map(|v| 1.0 + v);
    let prob = LocalProblem::new(rho0, u, sc.local_mode(), sc.solver_config())?;
    let run = picard_local(&prob)?;
    let report = &run.report;
    rep.set_series(state_series(grid, &run.trajectory, &StateNorms::new(&grid, sc.solver.p)?)?);
    rep.tables.insert("iterations".into(), iteration_table(report));
    let mut horizons = Series::new(&["attempt", "horizon"]);
    for (k, h) in run.horizons.iter().enumerate() {
        horizons.push(&[k as f64, *h]);
    }
    rep.tables.insert("horizons".into(), horizons);
    rep.metric("horizon", report.t_end);
    rep.metric("iterations", report.iterations.len() as f64);
    rep.metric("min_density", report.min_density());
    if let Some(c) = report.max_contraction() {
        rep.metric("max_contraction", c);
    }
    rep.check("converged", report.converged as u8 as f64, Relation::Ge, 1.0);
    rep.check("min_density_positive", report.min_density(), Relation::Gt, 0.0);
    invariant_checks(rep, report);
    Ok(())
}

fn relative_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (x, y) in a.states.iter().zip(&b.states) {
        num = num.max(x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt());
        den = den.max(y.iter().map(|q| q * q).sum::<f64>().sqrt());
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn varcoef_solve(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> Result<(), CliError> {
    let num = |e| CliError::numerics(&sc.name, e);
    let (a, u) = sc.fields(grid);
    let law = sc.viscosity();
    let rho = a.map(|v| 1.0 + v);
    let coeffs = CoefficientFields::new(rho.clone(), rho.map(|r| law.mu_at(r)), rho.map(|r| law.lambda_at(r))).map_err(num)?;
    let choice = choose_delta(&coeffs, sc.solver.oscillation, sc.solver.p).map_err(num)?;
    let part = build_partition(&grid, choice.delta).map_err(num)?;
    let (t, steps) = (sc.solver.t_end, sc.solver.steps);
    let direct = solve_varcoef(&coeffs, &Forcing::Zero, &u, t, steps, Method::Direct).map_err(num)?;
    let cont = solve_varcoef(&coeffs, &Forcing::Zero, &u, t, steps, sc.method()).map_err(num)?;
    let gap = relative_gap(&cont.trajectory, &direct.trajectory);
    let mut series = Series::new(&["time", "l2", "l2_direct"]);
    for ((t, x), y) in cont.trajectory.times.iter().zip(&cont.trajectory.states).zip(&direct.trajectory.states) {
        series.push(&[*t, l2(x).map_err(num)?, l2(y).map_err(num)?]);
    }
    rep.set_series(series);
    let mut hist = Series::new(&["delta", "max_margin"]);
    for (d, m) in &choice.history {
        hist.push(&[*d, *m]);
    }
    rep.tables.insert("delta_search".into(), hist);
    rep.metric("delta", choice.delta);
    rep.metric("patches", choice.patches as f64);
    rep.metric("max_margin", choice.max_margin);
    rep.metric("unity_residual", part.unity_residual);
    rep.metric("method_gap", gap);
    if let Some(info) = &cont.continuity {
        rep.metric("theta_steps", info.steps.len() as f64);
        rep.metric("theta_halvings", info.halvings as f64);
    }
    rep.check("partition_of_unity", part.unity_residual, Relation::Le, 1e-12);
    rep.check("oscillation_margin", choice.max_margin, Relation::Le, sc.solver.oscillation);
    rep.check("continuity_matches_direct", gap, Relation::Le, 1e-6);
    Ok(())
}

fn besov_check(sc: &Scenario, grid: Grid, rep: &mut RunReport) -> Result<(), CliError> {
    let num = |e| CliError::numerics(&sc.name, e);
    let (a, _) = sc.fields(grid);
    if a.max_abs() == 0.0 {
        return Err(CliError::Validation("besov_check needs a nonzero density field".into()));
    }
    let d = grid.dim();
    let bank = DyadicFilterBank::new(&grid, ExtensionMode::EvenReflection).map_err(num)?;
    let blocks = bank.lp_blocks(&a).map_err(num)?;
    let mut sum = vec![0.0; grid.len()];
    for b in &blocks {
        sum.iter_mut().zip(&b.data).for_each(|(s, v)| *s += v);
    }
    let residual = ScalarField { grid, values: sum }.zip(&a, |x, y| x - y).l2_norm() / a.l2_norm();
    let mut table = Series::new(&["j", "block_norm"]);
    for (b, n) in blocks.iter().zip(bank.block_norms(&a, sc.solver.p).map_err(num)?) {
        table.push(&[b.j as f64, n]);
    }
    rep.tables.insert("blocks".into(), table);
    let params = BesovParams::critical(sc.solver.p, d).map_err(num)?;
    let v = a.map(|x| (1.0 + x).ln_1p());
    let prod = verify_product_estimate(&bank, &a, &v, 0.0, &params).map_err(num)?;
    let comp = verify_composition_estimate(&bank, &|z| z.sin() + z * z, &a, &params).map_err(num)?;
    rep.metric("critical_norm", bank.besov_norm(&a, &params).map_err(num)?);
    rep.metric("reconstruction_residual", residual);
    rep.metric("product_ratio", prod.ratio);
    rep.metric("composition_ratio", comp.ratio);
    rep.metric("partition_defect", bank.partition_defect());
    rep.check("reconstruction", residual, Relation::Le, 1e-10);
    rep.check("product_ratio_finite", prod.ratio, Relation::Lt, f64::MAX);
    rep.check("composition_ratio_finite", comp.ratio, Relation::Lt, f64::MAX);
    Ok(())
}

/// Random admissible `(mu, z, delta, xi)`: `delta mu + Re z >= 0`.
fn symbol_check(sc: &Scenario, d: usize, rep: &mut RunReport) -> CoreResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let (mut violations, mut lower, mut upper, mut identity) = (0usize, f64::INFINITY, f64::INFINITY, 0.0f64);
    for _ in 0..sc.solver.samples {
        let mu = 10f64.powf(rng.gen_range(-2.0..2.0));
        let delta = rng.gen_range(0.01..0.99);
        let z = Complex64::new(mu * rng.gen_range(-delta..10.0), mu * rng.gen_range(-3.0..3.0));
        let coeffs = LameCoefficients::new(mu, z)?;
        let xi: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let r = symbol_bounds_check(&coeffs, &[xi.clone()], delta)?;
        violations += r.violations.len();
        lower = lower.min(r.lower_margin);
        upper = upper.min(r.upper_margin);
        if d == 2 {
            let det = symbol_det(&SymbolProbe::new(xi.clone(), delta, &coeffs)?, &coeffs);
            let r2: f64 = xi.iter().map(|v| v * v).sum();
            let exact = (z + mu) * mu * r2 * r2;
            identity = identity.max((det - exact).norm() / exact.norm());
        }
    }
    rep.metric("samples", sc.solver.samples as f64);
    rep.metric("lower_margin", lower);
    rep.metric("upper_margin", upper);
    rep.check("bound_violations", violations as f64, Relation::Le, 0.0);
    if d == 2 {
        rep.metric("identity_error", identity);
        rep.check("two_dim_identity", identity, Relation::Le, 1e-12);
    }
    Ok(())
}
