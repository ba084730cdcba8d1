//! Experiment configuration: TOML schema, named presets and the builders that
//! turn them into problems.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degenerate::{map_membrane_to_toy, regularize, ToyProblem};
use crate::error::{LabError, Result};
use crate::grid::{Field, FieldBundle, Grid2D, SpacetimeField};
use crate::membrane::MembraneProblem;
use crate::nash_moser::{schedule, IterationSchedule, NashMoserConfig};
use crate::rescale::factorization_check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    NondegenerateSmall,
    NondegenerateStiff,
    DegenerateZero,
    DegenerateTiny,
    RelaxedLevi,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::NondegenerateSmall,
        Preset::NondegenerateStiff,
        Preset::DegenerateZero,
        Preset::DegenerateTiny,
        Preset::RelaxedLevi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::NondegenerateSmall => "nondegenerate-small",
            Preset::NondegenerateStiff => "nondegenerate-stiff",
            Preset::DegenerateZero => "degenerate-zero",
            Preset::DegenerateTiny => "degenerate-tiny",
            Preset::RelaxedLevi => "relaxed-levi",
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Preset::DegenerateZero | Preset::DegenerateTiny | Preset::RelaxedLevi)
    }

    /// Outside the Levi/factorization hypotheses; results are labeled as such.
    pub fn outside_hypotheses(self) -> bool {
        self == Preset::RelaxedLevi
    }

    pub fn config(self) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.problem.preset = self;
        match self {
            Preset::NondegenerateSmall => {}
            Preset::NondegenerateStiff => {
                c.problem.radius = 0.2;
                c.problem.amplitude = 2e-4;
                c.solver.dt = 5e-4;
            }
            Preset::DegenerateZero => {
                c.problem.gamma0 = 0.0;
                c.solver.delta0 = 1e-2;
            }
            Preset::DegenerateTiny => {
                c.problem.gamma0 = 1e-3;
                c.solver.delta0 = 1e-2;
            }
            Preset::RelaxedLevi => {
                c.problem.heuristic_gamma0 = true;
                c.problem.radius = 0.1;
                c.solver.delta0 = 1e-2;
            }
        }
        c
    }
}

impl std::str::FromStr for Preset {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown preset '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub preset: Preset,
    /// grid points per direction on the 2pi-torus
    pub grid: usize,
    pub epsilon: f64,
    /// horizon on the rescaled clock
    pub horizon: f64,
    /// radius of the base torus
    pub radius: f64,
    /// amplitude of the rescaled Cauchy data
    pub amplitude: f64,
    /// constant `gamma0` of the factorization
    pub gamma0: f64,
    /// extract `gamma0` from the metric instead of using the constant
    pub heuristic_gamma0: bool,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            preset: Preset::NondegenerateSmall,
            grid: 32,
            epsilon: 1e-3,
            horizon: 0.5,
            radius: 0.1,
            amplitude: 1e-4,
            gamma0: 1.0,
            heuristic_gamma0: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub dt: f64,
    pub levels: usize,
    pub delta0: f64,
    pub ball_radius: f64,
    pub smallness: f64,
    pub s_bar: f64,
    pub s: f64,
    pub s0: f64,
    pub k: f64,
    pub d: f64,
    pub no_smoothing: bool,
    /// oracle step on the original clock, as a multiple of `dt / sqrt(eps)`
    pub oracle_step_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            levels: 6,
            delta0: 0.0,
            ball_radius: 0.9,
            smallness: 1.0,
            s_bar: 2.0,
            s: 4.0,
            s0: 1.0,
            k: 5.0,
            d: 0.5,
            no_smoothing: false,
            oracle_step_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// `"2.3"`, `"2.4"`, `"2.5"` or `"2.6"`
    pub lemma: String,
    /// a number or `"auto"` for the empirical threshold
    pub lambda: String,
    pub constant: f64,
    pub sobolev: f64,
    pub dt: f64,
    pub horizon: f64,
    /// regularization of degenerate coefficients
    pub delta: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lemma: "2.5".into(),
            lambda: "auto".into(),
            constant: 50.0,
            sobolev: 2.0,
            dt: 2e-3,
            horizon: 1.0,
            delta: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub energy: EnergyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seed: 7, problem: ProblemConfig::default(), solver: SolverConfig::default(), energy: EnergyConfig::default() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Lists every schema violation.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let p = &self.problem;
        let s = &self.solver;
        if p.grid < 8 || p.grid % 2 != 0 {
            errs.push(format!("problem.grid = {} must be even and >= 8", p.grid));
        }
        if !(p.epsilon > 0.0 && p.epsilon < 1.0) {
            errs.push(format!("problem.epsilon = {} must lie in (0, 1)", p.epsilon));
        }
        if !(p.horizon > 0.0) {
            errs.push(format!("problem.horizon = {} must be positive", p.horizon));
        }
        if !(p.radius > 0.0) {
            errs.push(format!("problem.radius = {} must be positive", p.radius));
        }
        if !(p.amplitude >= 0.0) {
            errs.push(format!("problem.amplitude = {} must be >= 0", p.amplitude));
        }
        if !(0.0..=1.0).contains(&p.gamma0) {
            errs.push(format!("problem.gamma0 = {} must lie in [0, 1]", p.gamma0));
        }
        if !(s.dt > 0.0) {
            errs.push(format!("solver.dt = {} must be positive", s.dt));
        }
        if !(s.delta0 >= 0.0) {
            errs.push(format!("solver.delta0 = {} must be >= 0", s.delta0));
        }
        if !(s.oracle_step_ratio > 0.0) {
            errs.push(format!("solver.oracle_step_ratio = {} must be positive", s.oracle_step_ratio));
        }
        if let Err(e) = schedule(s.s_bar, s.s, s.s0, s.k, s.d, s.levels) {
            errs.push(format!("solver: {e}"));
        }
        if let Err(e) = self.energy.lemma.parse::<crate::degenerate::Lemma>() {
            errs.push(format!("energy.lemma: {e}"));
        }
        if self.energy.lambda != "auto" && self.energy.lambda.parse::<f64>().map(|x| !(x > 0.0)).unwrap_or(true) {
            errs.push(format!("energy.lambda = '{}' must be a positive number or 'auto'", self.energy.lambda));
        }
        if !(self.energy.dt > 0.0 && self.energy.horizon > 0.0) {
            errs.push("energy.dt and energy.horizon must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("; ")))
        }
    }

    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::square(self.problem.grid)
    }

    pub fn schedule(&self) -> Result<IterationSchedule> {
        let s = &self.solver;
        schedule(s.s_bar, s.s, s.s0, s.k, s.d, s.levels)
    }

    pub fn nash_moser(&self, grid: &Grid2D) -> NashMoserConfig {
        NashMoserConfig {
            dt: self.solver.dt,
            delta0: self.solver.delta0,
            ball_radius: self.solver.ball_radius,
            smallness: self.solver.smallness,
            gamma0: self.gamma0_field(grid),
            no_smoothing: self.solver.no_smoothing,
            seed: self.seed,
        }
    }

    pub fn gamma0_field(&self, grid: &Grid2D) -> Option<Field> {
        (!self.problem.heuristic_gamma0).then(|| Field::constant(grid, self.problem.gamma0))
    }

    /// Base configuration of the preset.
    pub fn u0(&self, grid: &Grid2D) -> FieldBundle {
        let p = &self.problem;
        match p.preset {
            Preset::NondegenerateSmall | Preset::NondegenerateStiff | Preset::DegenerateTiny => {
                let r = if p.preset == Preset::DegenerateTiny { p.radius * p.gamma0.sqrt() } else { p.radius };
                clifford(grid, r)
            }
            Preset::DegenerateZero => FieldBundle::new(vec![
                Field::constant(grid, p.radius),
                Field::zeros(grid),
                Field::zeros(grid),
                Field::zeros(grid),
            ])
            .unwrap(),
            Preset::RelaxedLevi => FieldBundle::new(vec![
                Field::from_fn(grid, |x, _| p.radius * x.sin()),
                Field::from_fn(grid, |_, y| p.radius * y.sin()),
            ])
            .unwrap(),
        }
    }

    /// Rescaled Cauchy data `(v0, v1)` satisfying the constraint and its rate.
    pub fn data(&self, grid: &Grid2D) -> (FieldBundle, FieldBundle) {
        let a = self.problem.amplitude;
        let u0 = self.u0(grid);
        match self.problem.preset {
            Preset::RelaxedLevi => {
                let v0 = FieldBundle::new(vec![
                    Field::from_fn(grid, |x, _| a * (x.cos() + 0.5 * (2.0 * x).sin())),
                    Field::from_fn(grid, |_, y| a * y.sin()),
                ])
                .unwrap();
                let v1 = FieldBundle::new(vec![
                    Field::from_fn(grid, |x, _| a * x.sin()),
                    Field::from_fn(grid, |_, y| -a * (2.0 * y).cos()),
                ])
                .unwrap();
                (v0, v1)
            }
            _ => {
                // separated components plus a radial modulation of the torus
                let m = Field::from_fn(grid, |x, y| (x + y).cos());
                let radial = u0.map(|c| c.mul(&m));
                let scale_r = if radial.max_abs() > 0.0 { 1.0 / radial.max_abs() } else { 0.0 };
                let sep = |f1: &dyn Fn(f64) -> f64, f2: &dyn Fn(f64) -> f64| {
                    FieldBundle::new(vec![
                        Field::from_fn(grid, |x, _| f1(x)),
                        Field::from_fn(grid, |x, _| f2(x)),
                        Field::from_fn(grid, |_, y| f2(y)),
                        Field::from_fn(grid, |_, y| f1(y)),
                    ])
                    .unwrap()
                };
                let mut v0 = sep(&|x| x.cos(), &|x| 0.5 * (2.0 * x).sin());
                v0.axpy(0.5 * scale_r, &radial);
                let mut v1 = sep(&|x| x.sin(), &|x| -0.5 * x.cos());
                v1.axpy(-0.3 * scale_r, &radial);
                (v0.scale(a), v1.scale(a))
            }
        }
    }

    pub fn membrane_problem(&self) -> Result<MembraneProblem> {
        let grid = self.grid()?;
        let u0 = self.u0(&grid);
        let (v0, v1) = self.data(&grid);
        MembraneProblem::new(&grid, u0, v0, v1, self.problem.epsilon, self.problem.horizon, 1e-10)
    }

    /// Toy problem from the linearization at `u0` (memory term off), with a
    /// smooth forcing; degenerate presets are regularized by `energy.delta`.
    pub fn toy_problem(&self) -> Result<ToyProblem> {
        let mut p = self.base_toy_problem()?;
        if self.problem.preset.is_degenerate() {
            p.coeffs = regularize(&p.coeffs, self.energy.delta)?;
        }
        Ok(p)
    }

    /// The toy problem without any regularization.
    pub fn base_toy_problem(&self) -> Result<ToyProblem> {
        let grid = self.grid()?;
        let u0 = self.u0(&grid);
        let gamma0 = self.gamma0_field(&grid);
        let fac = factorization_check(&grid, &u0, gamma0.as_ref(), self.problem.radius.powi(2))?;
        let coeffs = map_membrane_to_toy(&grid, &u0, &fac, None, 0.0)?;
        let e = &self.energy;
        let steps = (e.horizon / e.dt).round() as usize;
        let phi = Field::from_fn(&grid, |x, y| (x - y).sin() + 0.5 * (2.0 * y).cos());
        let forcing = SpacetimeField::sample(e.dt, steps, |t| {
            FieldBundle::new(vec![phi.scale((2.0 * t).cos())]).unwrap()
        })?;
        Ok(ToyProblem {
            grid: grid.clone(),
            coeffs,
            forcing: Some(forcing),
            h0: FieldBundle::new(vec![Field::from_fn(&grid, |x, y| x.sin() * y.cos())]).unwrap(),
            h1: FieldBundle::new(vec![Field::from_fn(&grid, |x, _| 0.5 * (2.0 * x).cos())]).unwrap(),
            horizon: e.horizon,
        })
    }
}

pub fn clifford(grid: &Grid2D, r: f64) -> FieldBundle {
    FieldBundle::new(vec![
        Field::from_fn(grid, |x, _| r * x.cos()),
        Field::from_fn(grid, |x, _| r * x.sin()),
        Field::from_fn(grid, |_, y| r * y.cos()),
        Field::from_fn(grid, |_, y| r * y.sin()),
    ])
    .unwrap()
}
