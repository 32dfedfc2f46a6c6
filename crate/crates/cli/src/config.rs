//! Scenario files: one TOML table per run.

use crate::error::CliError;
use cnslab_core::grid::{Grid, ScalarField, VectorField};
use cnslab_core::lincns::Strategy;
use cnslab_core::solver::{LocalMode, Pressure, SolverConfig, ViscosityLaw};
use cnslab_core::varcoef::{Method, OSCILLATION_EPS};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    LameSpectrum,
    LinearDecay,
    GlobalSmall,
    LocalWellposed,
    VarcoefSolve,
    BesovCheck,
    SymbolCheck,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::LameSpectrum,
        Kind::LinearDecay,
        Kind::GlobalSmall,
        Kind::LocalWellposed,
        Kind::VarcoefSolve,
        Kind::BesovCheck,
        Kind::SymbolCheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Kind::LameSpectrum => "lame_spectrum",
            Kind::LinearDecay => "linear_decay",
            Kind::GlobalSmall => "global_small",
            Kind::LocalWellposed => "local_wellposed",
            Kind::VarcoefSolve => "varcoef_solve",
            Kind::BesovCheck => "besov_check",
            Kind::SymbolCheck => "symbol_check",
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Kind::LameSpectrum => "spectrum and resolvent sector scan of the Lame operator",
            Kind::LinearDecay => "unforced linearized system: spectral bound and fitted decay",
            Kind::GlobalSmall => "global small-data Picard iteration with Eulerian residual",
            Kind::LocalWellposed => "local Picard iteration for small or general density",
            Kind::VarcoefSolve => "variable-coefficient Lame flow: partition, continuity vs direct",
            Kind::BesovCheck => "Besov layer: reconstruction, product and composition constants",
            Kind::SymbolCheck => "randomized two-sided bounds on the Lame symbol determinant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    #[serde(default)]
    pub lengths: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientSpec {
    pub mu: f64,
    pub lambda: f64,
    /// `mu(rho) = mu rho^exponent`, same for `lambda`.
    pub exponent: f64,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec { mu: 1.0, lambda: 0.0, exponent: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PressureSpec {
    pub kappa: f64,
    pub gamma: f64,
}

impl Default for PressureSpec {
    fn default() -> Self {
        PressureSpec { kappa: 1.0, gamma: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Density,
    Velocity,
}

/// `amplitude prod cos(k_i pi x_i / L_i)` for densities,
/// `amplitude prod sin(k_i pi x_i / L_i)` in one velocity component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub field: Target,
    #[serde(default)]
    pub component: usize,
    pub k: Vec<u32>,
    pub amplitude: f64,
}

/// `amplitude exp(-|x - center|^2 / width^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub field: Target,
    #[serde(default)]
    pub component: usize,
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub modes: Vec<Mode>,
    pub bumps: Vec<Bump>,
    /// Amplitude of seeded uniform noise added to every unknown.
    pub noise: f64,
    /// Rescale `(a0, u0)` so that `||a0||_{B^{d/p}} + ||u0||_{B^{d/p-1}}` equals this.
    pub scale_to: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub p: f64,
    pub alpha: f64,
    pub r: f64,
    pub t_end: f64,
    pub steps: usize,
    pub epsilon_du: f64,
    pub c_weight: Option<f64>,
    pub max_picard: usize,
    pub contraction_tol: f64,
    pub strategy: StrategySpec,
    pub local_mode: LocalModeSpec,
    pub method: MethodSpec,
    /// Oscillation threshold for the patch-size search.
    pub oscillation: f64,
    /// Sample count for randomized checks.
    pub samples: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let c = SolverConfig::default();
        SolverSpec {
            p: c.p,
            alpha: c.alpha,
            r: c.r,
            t_end: c.t_end,
            steps: c.steps,
            epsilon_du: c.epsilon_du,
            c_weight: c.c_weight,
            max_picard: c.max_picard,
            contraction_tol: c.contraction_tol,
            strategy: StrategySpec::Duhamel,
            local_mode: LocalModeSpec::General,
            method: MethodSpec::Continuity,
            oscillation: OSCILLATION_EPS,
            samples: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    Duhamel,
    Kshift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalModeSpec {
    Small,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    Continuity,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Relative paths are taken from the directory holding the config file.
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: Kind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default)]
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub pressure: PressureSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seed() -> u64 {
    1
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let s: Scenario = toml::from_str(text).map_err(|e| CliError::Validation(format!("config parse error: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut s = Scenario::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if s.output.dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            s.output.dir = base.join(&s.output.dir);
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(invalid("name", "must be non-empty and use only [A-Za-z0-9_-]"));
        }
        let d = self.grid.dims.len();
        if !(d == 2 || d == 3) {
            return Err(invalid("grid.dims", "needs 2 or 3 entries"));
        }
        if self.grid.dims.iter().any(|n| *n < 4) {
            return Err(invalid("grid.dims", "every axis needs at least 4 interior nodes"));
        }
        if let Some(l) = &self.grid.lengths {
            if l.len() != d || l.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(invalid("grid.lengths", "needs one positive length per axis"));
            }
        }
        let sv = &self.solver;
        if !(sv.p > 1.0 && sv.p.is_finite()) {
            return Err(invalid(
                "solver.p",
                format!("p must be in (1, \u{221e}) for the critical Besov spaces B^(d/p)_(p,1), got {}", sv.p),
            ));
        }
        let c = &self.coefficients;
        if ![c.mu, c.lambda, c.exponent].iter().all(|v| v.is_finite()) || !(c.mu > 0.0) || !(c.lambda + 2.0 * c.mu > 0.0) {
            return Err(invalid("coefficients", "need finite values with mu > 0 and lambda + 2 mu > 0"));
        }
        if !self.pressure.kappa.is_finite() || !self.pressure.gamma.is_finite() {
            return Err(invalid("pressure", "kappa and gamma must be finite"));
        }
        for (i, m) in self.data.modes.iter().enumerate() {
            let f = format!("data.modes[{i}]");
            if !m.amplitude.is_finite() {
                return Err(invalid(&f, "amplitude must be finite"));
            }
            if m.k.len() != d {
                return Err(invalid(&f, "k needs one entry per axis"));
            }
            if m.field == Target::Velocity && m.component >= d {
                return Err(invalid(&f, "component out of range"));
            }
        }
        for (i, b) in self.data.bumps.iter().enumerate() {
            let f = format!("data.bumps[{i}]");
            if !b.amplitude.is_finite() || !(b.width > 0.0) || b.center.len() != d || b.center.iter().any(|v| !v.is_finite()) {
                return Err(invalid(&f, "needs a finite amplitude, positive width and one center coordinate per axis"));
            }
            if b.field == Target::Velocity && b.component >= d {
                return Err(invalid(&f, "component out of range"));
            }
        }
        if !self.data.noise.is_finite() || self.data.noise < 0.0 {
            return Err(invalid("data.noise", "must be finite and non-negative"));
        }
        if let Some(s) = self.data.scale_to {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(invalid("data.scale_to", "must be finite and non-negative"));
            }
        }
        if self.output.formats.is_empty() {
            return Err(invalid("output.formats", "list at least one of csv, json"));
        }
        match self.kind {
            Kind::GlobalSmall | Kind::LocalWellposed => {
                self.solver_config().validate().map_err(|e| invalid("solver", e))?;
            }
            Kind::LinearDecay | Kind::VarcoefSolve => {
                if !(sv.t_end > 0.0) || sv.steps < 16 {
                    return Err(invalid("solver", "needs t_end > 0 and at least 16 steps"));
                }
            }
            Kind::SymbolCheck => {
                if sv.samples == 0 {
                    return Err(invalid("solver.samples", "must be positive"));
                }
            }
            Kind::LameSpectrum | Kind::BesovCheck => {}
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        let d = self.grid.dims.len();
        let lengths = self.grid.lengths.clone().unwrap_or_else(|| vec![1.0; d]);
        Grid::new(&self.grid.dims, &lengths).map_err(|e| invalid("grid", e))
    }

    pub fn pressure(&self) -> Pressure {
        Pressure { kappa: self.pressure.kappa, gamma: self.pressure.gamma }
    }

    pub fn viscosity(&self) -> ViscosityLaw {
        ViscosityLaw { mu: self.coefficients.mu, lambda: self.coefficients.lambda, exponent: self.coefficients.exponent }
    }

    pub fn strategy(&self) -> Strategy {
        match self.solver.strategy {
            StrategySpec::Duhamel => Strategy::Duhamel,
            StrategySpec::Kshift => Strategy::KShift,
        }
    }

    pub fn local_mode(&self) -> LocalMode {
        match self.solver.local_mode {
            LocalModeSpec::Small => LocalMode::SmallVariation,
            LocalModeSpec::General => LocalMode::GeneralDensity,
        }
    }

    pub fn method(&self) -> Method {
        match self.solver.method {
            MethodSpec::Continuity => Method::Continuity,
            MethodSpec::Direct => Method::Direct,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            alpha: s.alpha,
            r: s.r,
            t_end: s.t_end,
            steps: s.steps,
            epsilon_du: s.epsilon_du,
            c_weight: s.c_weight,
            max_picard: s.max_picard,
            contraction_tol: s.contraction_tol,
            pressure: self.pressure(),
            viscosity: self.viscosity(),
            p: s.p,
            strategy: self.strategy(),
        }
    }

    /// Density perturbation and velocity built from modes and bumps, plus
    /// seeded noise (not yet rescaled).
    pub fn fields(&self, grid: Grid) -> (ScalarField, VectorField) {
        let d = grid.dim();
        let lengths = grid.lengths().to_vec();
        let mut a = ScalarField::zeros(grid);
        let mut u = VectorField::zeros(grid);
        let n = grid.len();
        for m in &self.data.modes {
            let profile = |x: &[f64], trig: fn(f64) -> f64| -> f64 {
                (0..d).map(|i| trig(m.k[i] as f64 * PI * x[i] / lengths[i])).product::<f64>() * m.amplitude
            };
            match m.field {
                Target::Density => {
                    let f = ScalarField::from_fn(grid, |x| profile(x, f64::cos));
                    a.values.iter_mut().zip(&f.values).for_each(|(s, v)| *s += v);
                }
                Target::Velocity => {
                    let f = ScalarField::from_fn(grid, |x| profile(x, f64::sin));
                    u.component_mut(m.component).iter_mut().zip(&f.values).for_each(|(s, v)| *s += v);
                }
            }
        }
        for b in &self.data.bumps {
            let f = ScalarField::from_fn(grid, |x| {
                let r2: f64 = (0..d).map(|i| (x[i] - b.center[i]).powi(2)).sum();
                b.amplitude * (-r2 / (b.width * b.width)).exp()
            });
            let target = match b.field {
                Target::Density => &mut a.values[..],
                Target::Velocity => u.component_mut(b.component),
            };
            target.iter_mut().zip(&f.values).for_each(|(s, v)| *s += v);
        }
        if self.data.noise > 0.0 {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
            for v in a.values.iter_mut().chain(u.data.iter_mut()) {
                *v += self.data.noise * (rng.gen::<f64>() - 0.5);
            }
        }
        debug_assert_eq!(u.data.len(), d * n);
        (a, u)
    }
}
