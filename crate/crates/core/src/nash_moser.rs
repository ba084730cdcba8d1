//! Nash-Moser iteration for the rescaled membrane problem.
//!
//! With `v = W + v0 + v1 t` the unknown `W` has zero Cauchy data and solves
//! `G(W) = W_tt - A v / eps - eps^2 F(v) = 0`. Level `l` smooths `F` with the
//! dyadic window `N_{l+1} = 2^{l+1}`, solves the linearization against the
//! current residual and updates the residual from the exact Taylor remainder.
//!
//! Time is discretized with the leapfrog second difference on `n = 0..N-1`,
//! using `2 W_1 / dt^2` at `n = 0`, so the linear solves invert the discrete
//! operator exactly.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::brackets::MetricField;
use crate::degenerate::{check_levi, map_membrane_to_toy, march, WaveOperator};
use crate::error::{LabError, Result};
use crate::grid::{cumulative_integrals, spacetime_norm, Axis, Field, FieldBundle, Grid2D, SpacetimeField};
use crate::membrane::{MembraneProblem, MembraneSystem};
use crate::rescale::{factorization_check, Factorization};

/// Sobolev indices `s_l = s_bar + (s - s_bar)/2^l` and windows `N_l = 2^l`.
#[derive(Debug, Clone, Serialize)]
pub struct IterationSchedule {
    pub s_bar: f64,
    pub s: f64,
    pub s0: f64,
    pub k: f64,
    pub d: f64,
    pub max_levels: usize,
    pub floor_tolerance: f64,
    pub s_l: Vec<f64>,
    pub alpha_l: Vec<f64>,
    pub n_l: Vec<usize>,
}

pub fn schedule(s_bar: f64, s: f64, s0: f64, k: f64, d: f64, max_levels: usize) -> Result<IterationSchedule> {
    if !(s0 >= 0.0 && s0 < s_bar && s_bar >= 2.0 && s_bar < s && s <= k - 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "index chain 0 <= s0 < s_bar < s <= k - 1 with s_bar >= 2 violated: s0={s0}, s_bar={s_bar}, s={s}, k={k}"
        )));
    }
    if !(d > 0.0 && d < 1.0) {
        return Err(LabError::InvalidArgument(format!("decay base {d} outside (0, 1)")));
    }
    if max_levels > 60 {
        return Err(LabError::InvalidArgument("at most 60 levels".into()));
    }
    let count = max_levels + 2;
    let s_l: Vec<f64> = (0..count).map(|l| s_bar + (s - s_bar) / 2f64.powi(l as i32)).collect();
    let alpha_l = (0..count).map(|l| if l == 0 { 0.0 } else { s_l[l - 1] - s_l[l] }).collect();
    let n_l = (0..count).map(|l| 1usize << l).collect();
    Ok(IterationSchedule { s_bar, s, s0, k, d, max_levels, floor_tolerance: 1e-10, s_l, alpha_l, n_l })
}

impl IterationSchedule {
    pub fn sobolev(&self, l: usize) -> f64 {
        self.s_bar + (self.s - self.s_bar) / 2f64.powi(l as i32)
    }

    pub fn window(&self, l: usize) -> usize {
        1usize.checked_shl(l as u32).unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone)]
pub struct NashMoserConfig {
    pub dt: f64,
    /// upper bound `delta_0` for the level regularization; zero disables it
    pub delta0: f64,
    pub ball_radius: f64,
    /// bound on `|||W^0|||` and `|||E^0|||` at index `max(s0, 2)`
    pub smallness: f64,
    /// supplied `gamma0` of the factorization; the heuristic is used otherwise
    pub gamma0: Option<Field>,
    /// use the full spectrum at every level
    pub no_smoothing: bool,
    pub seed: u64,
}

impl Default for NashMoserConfig {
    fn default() -> Self {
        Self { dt: 1e-3, delta0: 0.0, ball_radius: 0.9, smallness: 1.0, gamma0: None, no_smoothing: false, seed: 7 }
    }
}

/// Full velocity `v_n = W_n + v0 + v1 t_n` and its running integral.
fn full_history(p: &MembraneProblem, w: &SpacetimeField) -> Result<(Vec<FieldBundle>, Vec<FieldBundle>)> {
    let v = crate::rescale::from_w(w, &p.v0, &p.v1)?;
    let u = cumulative_integrals(&v);
    Ok((v.into_snapshots(), u))
}

fn steps_for(p: &MembraneProblem, dt: f64) -> Result<usize> {
    let steps = (p.horizon / dt).round() as usize;
    if steps == 0 || ((steps as f64) * dt - p.horizon).abs() > 1e-9 * p.horizon {
        return Err(LabError::InvalidArgument(format!("dt {dt} does not divide the horizon {}", p.horizon)));
    }
    Ok(steps)
}

fn smooth(grid: &Grid2D, f: &FieldBundle, n: usize) -> FieldBundle {
    if n >= grid.nyquist() {
        f.clone()
    } else {
        grid.low_pass_bundle(f, n)
    }
}

fn second_difference(w: &SpacetimeField, n: usize) -> FieldBundle {
    let inv = 1.0 / (w.dt() * w.dt());
    if n == 0 {
        w.at(1).sub(w.at(0)).scale(2.0 * inv)
    } else {
        let mut d = w.at(n + 1).add(w.at(n - 1));
        d.axpy(-2.0, w.at(n));
        d.scale(inv)
    }
}

/// `G_N(W)` on `n = 0..N-1` (one snapshot fewer than `W`).
pub fn approx_operator(w: &SpacetimeField, p: &MembraneProblem, window: usize) -> Result<SpacetimeField> {
    if w.len() < 2 {
        return Err(LabError::InvalidArgument("history needs at least two snapshots".into()));
    }
    let scale = w.max_abs();
    if w.at(0).max_abs() > 1e-12 * scale.max(1e-300) {
        return Err(LabError::Condition(format!("W(0) = {:e} is not zero", w.at(0).max_abs())));
    }
    let sys = p.system();
    let (v, u) = full_history(p, w)?;
    let snaps = (0..w.len() - 1)
        .map(|n| {
            let mut g = second_difference(w, n);
            g.axpy(-1.0 / p.epsilon, &sys.linear_part(&v[n]));
            if p.nonlinear {
                let f = sys.nonlinear_f(&v[n], &u[n], p.epsilon);
                g.axpy(-p.epsilon * p.epsilon, &smooth(&p.grid, &f, window));
            }
            g
        })
        .collect();
    SpacetimeField::new(w.t0(), w.dt(), snaps)
}

/// `div(rho grad f)` for each component.
fn divergence_form(grid: &Grid2D, rho: &MetricField, f: &FieldBundle) -> FieldBundle {
    f.map(|c| {
        let [d1, d2] = grid.gradient(c);
        let q1 = rho.g11.mul(&d1).add(&rho.g12.mul(&d2));
        let q2 = rho.g12.mul(&d1).add(&rho.g22.mul(&d2));
        grid.derivative(&q1, Axis::X1).add(&grid.derivative(&q2, Axis::X2))
    })
}

/// `h -> A h / eps + eps^2 Pi_N dF(v_n) h + delta div(rho grad h) / eps`.
struct Linearized<'a> {
    sys: &'a MembraneSystem,
    grid: &'a Grid2D,
    eps: f64,
    v: &'a [FieldBundle],
    u: &'a [FieldBundle],
    window: usize,
    nonlinear: bool,
    delta: f64,
    rho: &'a MetricField,
}

impl WaveOperator for Linearized<'_> {
    fn acceleration(&self, n: usize, _t: f64, h: &FieldBundle, memory: &FieldBundle) -> FieldBundle {
        let mut a = self.sys.linear_part(h).scale(1.0 / self.eps);
        if self.nonlinear {
            let df = self.sys.frechet(&self.v[n], &self.u[n], h, memory, self.eps);
            a.axpy(self.eps * self.eps, &smooth(self.grid, &df, self.window));
        }
        if self.delta > 0.0 {
            a.axpy(self.delta / self.eps, &divergence_form(self.grid, self.rho, h));
        }
        a
    }
}

/// Spectral radius estimate of `h -> A h / eps + delta div(rho grad h) / eps`
/// by power iteration from a seeded random start.
pub fn spectral_radius(p: &MembraneProblem, delta: f64, rho: &MetricField, seed: u64) -> f64 {
    let sys = p.system();
    let grid = &p.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = FieldBundle::new(
        (0..p.num_components())
            .map(|_| Field::from_values(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect(),
    )
    .unwrap();
    let apply = |x: &FieldBundle| {
        let mut a = sys.linear_part(x).scale(1.0 / p.epsilon);
        if delta > 0.0 {
            a.axpy(delta / p.epsilon, &divergence_form(grid, rho, x));
        }
        a
    };
    let norm = |x: &FieldBundle| crate::grid::bundle_l2(grid, x);
    let mut est = 0.0;
    for _ in 0..60 {
        let nx = norm(&x);
        if nx == 0.0 {
            return 0.0;
        }
        let y = apply(&x);
        let ny = norm(&y);
        est = ny / nx;
        if ny == 0.0 {
            return 0.0;
        }
        x = y.scale(1.0 / ny);
    }
    est
}

/// Leapfrog stability limit `1.8 / sqrt(rho)` with a 10% margin on the estimate.
pub fn cfl_limit(p: &MembraneProblem, delta: f64, rho: &MetricField, seed: u64) -> f64 {
    let r = spectral_radius(p, delta, rho, seed) * 1.1;
    if r == 0.0 {
        f64::INFINITY
    } else {
        1.8 / r.sqrt()
    }
}

/// Solves `L h = -E` with zero Cauchy data, linearized around `W`.
pub fn linearized_solve(
    p: &MembraneProblem,
    w: &SpacetimeField,
    e: &SpacetimeField,
    window: usize,
    delta: f64,
    rho: &MetricField,
) -> Result<SpacetimeField> {
    let sys = p.system();
    let (v, u) = full_history(p, w)?;
    let op = Linearized {
        sys: &sys,
        grid: &p.grid,
        eps: p.epsilon,
        v: &v,
        u: &u,
        window,
        nonlinear: p.nonlinear,
        delta,
        rho,
    };
    let zero = FieldBundle::zeros(&p.grid, p.num_components());
    march(&op, &zero, &zero, Some(&e.scale(-1.0)), w.dt(), w.len() - 1)
}

/// Default starting iterate: the linear solution minus `v0 + v1 t`.
pub fn linear_start(p: &MembraneProblem, dt: f64) -> Result<SpacetimeField> {
    let steps = steps_for(p, dt)?;
    let zero = SpacetimeField::sample(dt, steps, |_| FieldBundle::zeros(&p.grid, p.num_components()))?;
    let mut lin = p.clone();
    lin.nonlinear = false;
    let e = approx_operator(&zero, &lin, usize::MAX)?;
    let rho = MetricField::identity(&p.grid);
    let h = linearized_solve(&lin, &zero, &e, usize::MAX, 0.0, &rho)?;
    Ok(h)
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRecord {
    pub l: usize,
    #[serde(rename = "N_l")]
    pub n_l: usize,
    pub s_l: f64,
    pub norm_h: f64,
    #[serde(rename = "norm_E")]
    pub norm_e: f64,
    pub delta_l: f64,
    pub wallclock_ms: f64,
    #[serde(rename = "norm_W")]
    pub norm_w: f64,
    /// `|||eps^2 (Pi_{N_{l+1}} - Pi_{N_l}) F|||` contained in `E^l`
    pub window_term: f64,
    /// `|||eps^2 Pi R(h^l)|||` contained in `E^l`
    pub remainder_term: f64,
    /// `max |E_stored - G(W)| / max |G parts|` when re-applied
    pub consistency: f64,
    /// `|||E_stored - G(W)|||`, the resolution of a re-applied residual
    pub reapplication_noise: f64,
    pub floor: f64,
    pub levi_c5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxLevels,
    Divergence,
    BallExit,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelRecord>,
    pub converged: bool,
    pub status: RunStatus,
    pub failure_level: Option<usize>,
    pub d_fit: f64,
    pub slope_fit: f64,
    pub epsilon: f64,
    pub dt: f64,
    pub cfl_limit: f64,
    pub factorization: Option<crate::rescale::FactorizationBounds>,
    pub notes: Vec<String>,
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("l,N_l,s_l,norm_h,norm_E,delta_l,wallclock_ms,norm_W,window_term,remainder_term,floor\n");
        for r in &self.levels {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:.3},{:e},{:e},{:e},{:e}\n",
                r.l, r.n_l, r.s_l, r.norm_h, r.norm_e, r.delta_l, r.wallclock_ms, r.norm_w, r.window_term, r.remainder_term, r.floor
            ));
        }
        s
    }

    /// Levels whose residual lies above the floor.
    pub fn above_floor(&self) -> Vec<&LevelRecord> {
        self.levels.iter().filter(|r| r.norm_e > r.floor && r.norm_e > 0.0).collect()
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `(slope of log log(1/|||E^l|||) in l, d)` over the levels above the floor
/// with `|||E^l||| < 1`, where `log |||E^l||| ~ 2^l log d`.
pub fn quadratic_signature(levels: &[&LevelRecord]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = levels.iter().filter(|r| r.norm_e < 1.0).map(|r| (r.l as f64, r.norm_e)).collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let lls: Vec<f64> = pts.iter().map(|p| (1.0 / p.1).ln().ln()).collect();
    let pow: Vec<f64> = pts.iter().map(|p| 2f64.powf(p.0)).collect();
    let logs: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    (fit_slope(&xs, &lls), fit_slope(&pow, &logs).exp())
}

/// Iterate, residual and bookkeeping after level `l`.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub level: usize,
    pub w: SpacetimeField,
    pub e: SpacetimeField,
    pub increments: Vec<SpacetimeField>,
    pub records: Vec<LevelRecord>,
    pub ball_radius: f64,
}

/// Shared per-run data: factorization, regularization metric, CFL.
pub struct Driver<'a> {
    pub problem: &'a MembraneProblem,
    pub schedule: &'a IterationSchedule,
    pub config: &'a NashMoserConfig,
    factorization: Option<Factorization>,
    rho: MetricField,
    pub cfl_limit: f64,
    pub notes: Vec<String>,
}

impl<'a> Driver<'a> {
    pub fn new(problem: &'a MembraneProblem, schedule: &'a IterationSchedule, config: &'a NashMoserConfig) -> Result<Self> {
        let mut notes = Vec::new();
        let factorization = match factorization_check(&problem.grid, &problem.u0, config.gamma0.as_ref(), 1.0) {
            Ok(f) => Some(f),
            Err(e) => {
                notes.push(format!("factorization: {e}"));
                None
            }
        };
        let rho = factorization
            .as_ref()
            .map(|f| f.gamma_cd.conjugated())
            .unwrap_or_else(|| MetricField::identity(&problem.grid));
        let cfl = cfl_limit(problem, config.delta0, &rho, config.seed);
        if !(config.dt > 0.0) || config.dt > cfl {
            return Err(LabError::Cfl { dt: config.dt, limit: cfl });
        }
        steps_for(problem, config.dt)?;
        Ok(Self { problem, schedule, config, factorization, rho, cfl_limit: cfl, notes })
    }

    fn window(&self, l: usize) -> usize {
        if self.config.no_smoothing {
            usize::MAX
        } else {
            self.schedule.window(l)
        }
    }

    fn norm(&self, f: &SpacetimeField, s: f64) -> Result<f64> {
        spacetime_norm(&self.problem.grid, f, s.max(2.0), f.end_time())
    }

    fn levi(&self, w: &SpacetimeField) -> f64 {
        let Some(fac) = &self.factorization else { return f64::NAN };
        let p = self.problem;
        match crate::rescale::from_w(w, &p.v0, &p.v1)
            .and_then(|v| map_membrane_to_toy(&p.grid, &p.u0, fac, Some(&v), p.epsilon))
        {
            Ok(c) => check_levi(&p.grid, &c),
            Err(_) => f64::NAN,
        }
    }

    /// Relative sup difference between the stored residual and `G(W)` applied
    /// afresh, and the norm of that difference (roundoff amplified by the time
    /// differences inside the norm).
    fn consistency(&self, w: &SpacetimeField, e: &SpacetimeField, window: usize, s: f64) -> Result<(f64, f64)> {
        let p = self.problem;
        let again = approx_operator(w, p, window)?;
        let diff = again.sub(e)?;
        let scale = (0..w.len() - 1).fold(0.0f64, |m, n| m.max(second_difference(w, n).max_abs())).max(e.max_abs());
        let rel = if scale > 0.0 { diff.max_abs() / scale } else { 0.0 };
        Ok((rel, self.norm(&diff, s)?))
    }

    fn delta(&self, norm_e: f64) -> f64 {
        if self.config.delta0 > 0.0 {
            self.config.delta0.min(norm_e)
        } else {
            0.0
        }
    }

    pub fn start(&self, w0: SpacetimeField) -> Result<IterationState> {
        let e = approx_operator(&w0, self.problem, self.window(1))?;
        self.start_with(w0, e)
    }

    /// Starts from the linear solution, whose residual is exactly
    /// `-eps^2 Pi_{N_1} F(v)` because the linear solve inverts the discrete operator.
    pub fn start_linear(&self) -> Result<IterationState> {
        let p = self.problem;
        let w0 = linear_start(p, self.config.dt)?;
        let window = self.window(1);
        let e = if p.nonlinear {
            let sys = p.system();
            let (v, u) = full_history(p, &w0)?;
            let eps2 = p.epsilon * p.epsilon;
            let snaps = (0..w0.len() - 1)
                .map(|n| smooth(&p.grid, &sys.nonlinear_f(&v[n], &u[n], p.epsilon), window).scale(-eps2))
                .collect();
            SpacetimeField::new(0.0, w0.dt(), snaps)?
        } else {
            SpacetimeField::sample(w0.dt(), w0.len() - 2, |_| FieldBundle::zeros(&p.grid, p.num_components()))?
        };
        self.start_with(w0, e)
    }

    fn start_with(&self, w0: SpacetimeField, e: SpacetimeField) -> Result<IterationState> {
        let t0 = Instant::now();
        let window = self.window(1);
        let s0 = self.schedule.s0.max(2.0);
        let (nw, ne) = (self.norm(&w0, s0)?, self.norm(&e, s0)?);
        if nw > self.config.smallness || ne > self.config.smallness {
            return Err(LabError::Condition(format!(
                "starting iterate not small: |||W0||| = {nw:e}, |||E0||| = {ne:e}, bound {:e}",
                self.config.smallness
            )));
        }
        let s_l = self.schedule.sobolev(0);
        let (consistency, noise) = self.consistency(&w0, &e, window, s_l)?;
        let record = LevelRecord {
            l: 0,
            n_l: self.schedule.window(0),
            s_l,
            norm_h: self.norm(&w0, s_l)?,
            norm_e: self.norm(&e, s_l)?,
            delta_l: self.delta(ne),
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
            norm_w: self.norm(&w0, self.schedule.s_bar)?,
            window_term: 0.0,
            remainder_term: 0.0,
            consistency,
            reapplication_noise: noise,
            floor: self.schedule.floor_tolerance,
            levi_c5: self.levi(&w0),
        };
        Ok(IterationState {
            level: 0,
            w: w0.clone(),
            e,
            increments: vec![w0],
            records: vec![record],
            ball_radius: self.config.ball_radius,
        })
    }

    /// One level: `L h = -E^l`, `W^{l+1} = W^l + h`, and
    /// `E^{l+1} = -eps^2 Pi R(h) + delta div(rho grad h)/eps - eps^2 (Pi' - Pi) F(W^{l+1})`.
    pub fn step(&self, state: &IterationState) -> Result<IterationState> {
        let t0 = Instant::now();
        let p = self.problem;
        let grid = &p.grid;
        let l = state.level;
        let window = self.window(l + 1);
        let next_window = self.window(l + 2);
        let delta = self.delta(state.records[l].norm_e);
        let h = linearized_solve(p, &state.w, &state.e, window, delta, &self.rho)?;
        let w = state.w.add(&h)?;
        let sys = p.system();
        let (v_old, u_old) = full_history(p, &state.w)?;
        let (v_new, u_new) = full_history(p, &w)?;
        let hh = cumulative_integrals(&h);
        let eps2 = p.epsilon * p.epsilon;
        let mut rem = Vec::with_capacity(h.len() - 1);
        let mut win = Vec::with_capacity(h.len() - 1);
        let mut e = Vec::with_capacity(h.len() - 1);
        for n in 0..h.len() - 1 {
            let mut en = FieldBundle::zeros(grid, p.num_components());
            let mut r_part = FieldBundle::zeros(grid, p.num_components());
            let mut w_part = FieldBundle::zeros(grid, p.num_components());
            if p.nonlinear {
                let r = sys.remainder(&v_old[n], &u_old[n], h.at(n), &hh[n], p.epsilon);
                r_part = smooth(grid, &r, window).scale(-eps2);
                if next_window != window {
                    let f = sys.nonlinear_f(&v_new[n], &u_new[n], p.epsilon);
                    w_part = smooth(grid, &f, next_window).sub(&smooth(grid, &f, window)).scale(-eps2);
                }
            }
            en.axpy(1.0, &r_part);
            en.axpy(1.0, &w_part);
            if delta > 0.0 {
                en.axpy(delta / p.epsilon, &divergence_form(grid, &self.rho, h.at(n)));
            }
            rem.push(r_part);
            win.push(w_part);
            e.push(en);
        }
        let e = SpacetimeField::new(0.0, h.dt(), e)?;
        let s_l = self.schedule.sobolev(l + 1);
        let (consistency, noise) = self.consistency(&w, &e, next_window, s_l)?;
        let record = LevelRecord {
            l: l + 1,
            n_l: self.schedule.window(l + 1),
            s_l,
            norm_h: self.norm(&h, s_l)?,
            norm_e: self.norm(&e, s_l)?,
            delta_l: delta,
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
            norm_w: self.norm(&w, self.schedule.s_bar)?,
            window_term: self.norm(&SpacetimeField::new(0.0, h.dt(), win)?, s_l)?,
            remainder_term: self.norm(&SpacetimeField::new(0.0, h.dt(), rem)?, s_l)?,
            consistency,
            reapplication_noise: noise,
            floor: self.schedule.floor_tolerance,
            levi_c5: self.levi(&w),
        };
        let mut records = state.records.clone();
        records.push(record);
        let mut increments = state.increments.clone();
        increments.push(h);
        Ok(IterationState { level: l + 1, w, e, increments, records, ball_radius: state.ball_radius })
    }

    pub fn run(&self, w0: Option<SpacetimeField>) -> Result<(IterationState, ConvergenceReport)> {
        let mut state = match w0 {
            Some(w) => self.start(w)?,
            None => self.start_linear()?,
        };
        let mut status = RunStatus::MaxLevels;
        let mut failure = None;
        let mut growth = 0;
        loop {
            let last = state.records.last().unwrap();
            if last.norm_e <= last.floor {
                status = RunStatus::Converged;
                break;
            }
            if last.norm_w >= state.ball_radius {
                status = RunStatus::BallExit;
                failure = Some(state.level);
                break;
            }
            if state.level >= self.schedule.max_levels {
                break;
            }
            let next = self.step(&state)?;
            let (prev, cur) = (state.records.last().unwrap().norm_e, next.records.last().unwrap().norm_e);
            growth = if cur > prev { growth + 1 } else { 0 };
            state = next;
            if growth >= 2 {
                status = RunStatus::Divergence;
                failure = Some(state.level);
                break;
            }
        }
        let report = self.report(&state, status, failure);
        Ok((state, report))
    }

    pub fn report(&self, state: &IterationState, status: RunStatus, failure_level: Option<usize>) -> ConvergenceReport {
        let mut shell = ConvergenceReport {
            levels: state.records.clone(),
            converged: status == RunStatus::Converged,
            status,
            failure_level,
            d_fit: f64::NAN,
            slope_fit: f64::NAN,
            epsilon: self.problem.epsilon,
            dt: self.config.dt,
            cfl_limit: self.cfl_limit,
            factorization: self.factorization.as_ref().map(|f| f.bounds.clone()),
            notes: self.notes.clone(),
        };
        let above = shell.above_floor();
        let (slope, d) = quadratic_signature(&above);
        let count = above.len();
        shell.slope_fit = slope;
        shell.d_fit = d;
        shell.notes.push(format!("{count} level(s) above the floor"));
        shell
    }
}

/// Runs the iteration from `w0` (the linear start when `None`).
pub fn run(
    problem: &MembraneProblem,
    schedule: &IterationSchedule,
    config: &NashMoserConfig,
    w0: Option<SpacetimeField>,
) -> Result<(SpacetimeField, ConvergenceReport)> {
    let driver = Driver::new(problem, schedule, config)?;
    let (state, report) = driver.run(w0)?;
    Ok((state.w, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    /// `|||W_a^l - W_b^l|||_{s_l}` for the levels both runs reached
    pub difference_norms: Vec<f64>,
    pub limit_difference_l2: f64,
    pub relative_difference: f64,
    pub agree: bool,
    pub tolerance: f64,
    pub report_a: ConvergenceReport,
    pub report_b: ConvergenceReport,
}

/// Runs two starts in lockstep and compares the iterates level by level.
pub fn uniqueness_check(
    problem: &MembraneProblem,
    schedule: &IterationSchedule,
    config: &NashMoserConfig,
    w0_a: Option<SpacetimeField>,
    w0_b: Option<SpacetimeField>,
    tolerance: f64,
) -> Result<(SpacetimeField, SpacetimeField, UniquenessReport)> {
    let driver = Driver::new(problem, schedule, config)?;
    let (sa, ra) = driver.run(w0_a)?;
    let (sb, rb) = driver.run(w0_b)?;
    let grid = &problem.grid;
    let levels = sa.increments.len().min(sb.increments.len());
    let mut diffs = Vec::with_capacity(levels);
    let (mut wa, mut wb) = (sa.increments[0].clone(), sb.increments[0].clone());
    for l in 0..levels {
        if l > 0 {
            wa = wa.add(&sa.increments[l])?;
            wb = wb.add(&sb.increments[l])?;
        }
        diffs.push(spacetime_norm(grid, &wa.sub(&wb)?, schedule.sobolev(l).max(2.0), wa.end_time())?);
    }
    let diff = sa.w.sub(&sb.w)?;
    let va = crate::rescale::from_w(&sa.w, &problem.v0, &problem.v1)?;
    let num = crate::degenerate::l2_spacetime(grid, &diff);
    let den = crate::degenerate::l2_spacetime(grid, &va);
    let rel = if den > 0.0 { num / den } else { num };
    Ok((
        sa.w,
        sb.w,
        UniquenessReport {
            difference_norms: diffs,
            limit_difference_l2: num,
            relative_difference: rel,
            agree: rel <= tolerance,
            tolerance,
            report_a: ra,
            report_b: rb,
        },
    ))
}

/// A second admissible start: `W0 + (t/T)^2 phi(x)` with a smooth low-mode
/// `phi` drawn from the seed, of size `amplitude * max|W0|`.
pub fn perturbed_start(grid: &Grid2D, w0: &SpacetimeField, amplitude: f64, seed: u64) -> Result<SpacetimeField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = w0.max_abs().max(1e-300) * amplitude;
    let phi = FieldBundle::new(
        (0..w0.num_components())
            .map(|_| {
                let k = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
                Field::from_fn(grid, |x, y| k[0] * x.cos() + k[1] * y.sin() + k[2] * (x + y).cos() + k[3] * (2.0 * x).sin())
            })
            .collect(),
    )?;
    let t_end = w0.end_time().max(1e-300);
    Ok(w0.map_indexed(|_, t, s| {
        let mut out = s.clone();
        out.axpy(scale * (t / t_end).powi(2), &phi);
        out
    }))
}

/// Fitted constants of the smoothing estimates for one field:
/// `||Pi_N f||_{s1} / (N^{s1-s2} ||f||_{s2})` and
/// `||Pi_N f - f||_{s1} / (N^{s1-s2} ||f||_{s2})`.
pub fn smoothing_ratios(grid: &Grid2D, f: &Field, n: usize, s1: f64, s2: f64) -> Result<(f64, f64)> {
    let low = grid.low_pass(f, n);
    let base = grid.sobolev_norm(f, s2)? * (n as f64).powf(s1 - s2);
    if base == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok((grid.sobolev_norm(&low, s1)? / base, grid.sobolev_norm(&low.sub(f), s1)? / base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn small_problem(horizon: f64) -> MembraneProblem {
        let mut cfg = Preset::NondegenerateSmall.config();
        cfg.problem.grid = 8;
        cfg.problem.horizon = horizon;
        cfg.membrane_problem().unwrap()
    }

    fn zeros(p: &MembraneProblem, dt: f64) -> SpacetimeField {
        let steps = steps_for(p, dt).unwrap();
        SpacetimeField::sample(dt, steps, |_| FieldBundle::zeros(&p.grid, p.num_components())).unwrap()
    }

    #[test]
    fn schedule_indices() {
        let s = schedule(2.0, 4.0, 1.0, 5.0, 0.5, 6).unwrap();
        assert_eq!(s.s_l[1], 3.0);
        assert_eq!(s.s_l[2], 2.5);
        assert_eq!(s.alpha_l[2], 0.5);
        assert_eq!(s.n_l[3], 8);
        assert_eq!(s.window(3), 8);
        assert!(s.s_l.windows(2).all(|w| w[1] < w[0] && w[1] > 2.0));
        assert!(schedule(2.0, 4.0, 1.0, 4.5, 0.5, 6).is_err());
        assert!(schedule(2.0, 4.0, 2.5, 5.0, 0.5, 6).is_err());
        assert!(schedule(2.0, 4.0, 1.0, 5.0, 1.0, 6).is_err());
    }

    #[test]
    fn operator_vanishes_on_zero_problem() {
        let mut p = small_problem(0.01).linear();
        p.v0 = FieldBundle::zeros(&p.grid, 4);
        p.v1 = p.v0.clone();
        let g = approx_operator(&zeros(&p, 1e-3), &p, 4).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn linearized_solve_inverts_the_discrete_operator() {
        let p = small_problem(0.01);
        let lin = p.clone().linear();
        let mut zero_data = lin.clone();
        zero_data.v0 = FieldBundle::zeros(&p.grid, 4);
        zero_data.v1 = zero_data.v0.clone();
        let w = zeros(&p, 1e-3);
        let rho = MetricField::identity(&p.grid);
        let e = w.truncated(w.len() - 1).map_indexed(|_, t, _| p.v0.scale(1.0 + t));
        let h = linearized_solve(&lin, &w, &e, usize::MAX, 0.0, &rho).unwrap();
        let g = approx_operator(&h, &zero_data, usize::MAX).unwrap();
        let err = g.add(&e).unwrap().max_abs() / e.max_abs();
        assert!(err < 1e-9, "{err}");
        let none = linearized_solve(&lin, &w, &e.scale(0.0), usize::MAX, 0.0, &rho).unwrap();
        assert_eq!(none.max_abs(), 0.0);
    }

    #[test]
    fn linear_problem_converges_at_once() {
        let p = small_problem(0.01).linear();
        let s = schedule(2.0, 4.0, 1.0, 5.0, 0.5, 3).unwrap();
        let cfg = NashMoserConfig::default();
        let driver = Driver::new(&p, &s, &cfg).unwrap();
        let (state, report) = driver.run(None).unwrap();
        assert!(report.converged);
        assert_eq!(state.level, 0);
        let (_, report) = driver.run(Some(zeros(&p, 1e-3))).unwrap();
        assert!(report.converged, "{:?}", report.levels.iter().map(|r| r.norm_e).collect::<Vec<_>>());
        assert_eq!(report.levels.len(), 2);
    }

    #[test]
    fn iterate_telescopes_over_increments() {
        let p = small_problem(0.01);
        let s = schedule(2.0, 4.0, 1.0, 5.0, 0.5, 2).unwrap();
        let cfg = NashMoserConfig::default();
        let driver = Driver::new(&p, &s, &cfg).unwrap();
        let mut state = driver.start(zeros(&p, 1e-3)).unwrap();
        for _ in 0..2 {
            state = driver.step(&state).unwrap();
        }
        let mut sum = state.increments[0].clone();
        for h in &state.increments[1..] {
            sum = sum.add(h).unwrap();
        }
        assert!(sum.sub(&state.w).unwrap().max_abs() <= 1e-15 * state.w.max_abs().max(1e-300));
        assert!(state.records[2].norm_e < state.records[0].norm_e);
    }

    #[test]
    fn smoothing_constants() {
        let g = Grid2D::square(32).unwrap();
        let f = Field::from_fn(&g, |x, y| (x.sin() * (2.0 * y).cos()).exp() + (5.0 * x - 3.0 * y).sin());
        for n in [2, 4, 8] {
            let (up, down) = smoothing_ratios(&g, &f, n, 3.0, 1.0).unwrap();
            assert!(up <= 3.0, "{up}");
            let (_, tail) = smoothing_ratios(&g, &f, n, 1.0, 3.0).unwrap();
            assert!(tail <= 1.0, "{tail}");
            assert!(down.is_finite());
        }
    }

    #[test]
    fn perturbed_start_keeps_zero_cauchy_data() {
        let p = small_problem(0.01);
        let w0 = linear_start(&p, 1e-3).unwrap();
        let w1 = perturbed_start(&p.grid, &w0, 0.1, 3).unwrap();
        assert_eq!(w1.at(0).max_abs(), 0.0);
        let d = w1.sub(&w0).unwrap();
        assert!(d.max_abs() > 0.0 && d.max_abs() <= 0.1 * w0.max_abs() * 4.0 + 1e-300);
    }
}
