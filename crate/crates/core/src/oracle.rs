//! Direct method-of-lines integrator for the modified membrane system, used
//! as a reference against the Nash-Moser iterate.
//!
//! The state is `(U, v, p)` with `U_t = v`, `v_t = p` and
//! `p_t = c * [ {{v^m,u^n},u^n} + 2 {{u^m,u^n},v^n} ]`, `u = u0 + c_u U`.
//! Brackets are evaluated with eighth-order central differences on a grid
//! refined twice by spectral interpolation, then truncated back.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::brackets::{constraint_residual, reduced_hamiltonian};
use crate::error::{LabError, Result};
use crate::grid::{bundle_l2, Field, FieldBundle, Grid2D, SpacetimeField};
use crate::membrane::MembraneProblem;
use crate::rescale::amplitude;

/// Time variable of the integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Clock {
    /// Physical time: `c = 1`, `c_u = 1`.
    Original,
    /// `s = sqrt(eps) t` with `v = eps^{7/2} v~`: `c = 1/eps`, `c_u = eps^3`.
    Rescaled { epsilon: f64 },
}

impl Clock {
    fn coefficients(self) -> (f64, f64) {
        match self {
            Clock::Original => (1.0, 1.0),
            Clock::Rescaled { epsilon } => (1.0 / epsilon, epsilon.powi(3)),
        }
    }

    /// Factor turning the solver's `v` into the physical velocity.
    fn velocity_scale(self) -> f64 {
        match self {
            Clock::Original => 1.0,
            Clock::Rescaled { epsilon } => amplitude(epsilon),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Classical fourth-order Runge-Kutta.
    Rk4,
    /// Heun's second-order method.
    Rk2,
}

impl Scheme {
    fn stability(self) -> f64 {
        match self {
            Scheme::Rk4 => 2.5,
            Scheme::Rk2 => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub dt: f64,
    pub steps: usize,
    pub clock: Clock,
    pub scheme: Scheme,
    /// Abort when any state entry exceeds this magnitude.
    pub blowup_threshold: f64,
    pub seed: u64,
}

impl OracleConfig {
    pub fn new(dt: f64, steps: usize, clock: Clock) -> Self {
        Self { dt, steps, clock, scheme: Scheme::Rk4, blowup_threshold: 1e8, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub t: f64,
    /// `sup |sum_m {v^m, u^m}|` in the solver's variables.
    pub constraint_sup: f64,
    /// Reduced Hamiltonian of the physical `(u, u_t)`.
    pub hamiltonian: f64,
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub clock: Clock,
    pub scheme: Scheme,
    pub v: SpacetimeField,
    pub big_u: SpacetimeField,
    pub diagnostics: Vec<Diagnostic>,
    pub cfl_limit: f64,
}

impl OracleSolution {
    pub fn max_constraint(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.constraint_sup).fold(0.0, f64::max)
    }

    pub fn hamiltonian_drift(&self) -> f64 {
        let Some(h0) = self.diagnostics.first().map(|d| d.hamiltonian) else {
            return 0.0;
        };
        let scale = h0.abs().max(f64::MIN_POSITIVE);
        self.diagnostics.iter().map(|d| (d.hamiltonian - h0).abs() / scale).fold(0.0, f64::max)
    }
}

/// Where a source mode `i` of an `n_src` axis lands on an `n_dst` axis.
fn map_axis(i: usize, n_src: usize, n_dst: usize) -> Vec<(usize, f64)> {
    let k = if i < n_src / 2 { i as i64 } else { i as i64 - n_src as i64 };
    let wrap = |k: i64| k.rem_euclid(n_dst as i64) as usize;
    if n_dst == n_src {
        vec![(i, 1.0)]
    } else if n_dst > n_src {
        if k == -(n_src as i64) / 2 {
            vec![(n_src / 2, 0.5), (wrap(k), 0.5)]
        } else {
            vec![(wrap(k), 1.0)]
        }
    } else {
        let h = n_dst as i64 / 2;
        if k.abs() < h {
            vec![(wrap(k), 1.0)]
        } else if k.abs() == h {
            vec![(h as usize, 1.0)]
        } else {
            vec![]
        }
    }
}

/// Trigonometric interpolation (or truncation) between grids of one torus.
pub fn resample(from: &Grid2D, to: &Grid2D, f: &Field) -> Field {
    let spec = from.spectrum(f);
    let mut out = vec![Complex64::new(0.0, 0.0); to.len()];
    let rows: Vec<_> = (0..from.n1()).map(|i| map_axis(i, from.n1(), to.n1())).collect();
    let cols: Vec<_> = (0..from.n2()).map(|j| map_axis(j, from.n2(), to.n2())).collect();
    for (i1, r) in rows.iter().enumerate() {
        for (i2, c) in cols.iter().enumerate() {
            let s = spec[i1 * from.n2() + i2];
            for &(d1, w1) in r {
                for &(d2, w2) in c {
                    out[d1 * to.n2() + d2] += s * (w1 * w2);
                }
            }
        }
    }
    to.from_spectrum(out)
}

const FD8: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];

/// Eighth-order periodic central differences on a row-major `n1 x n2` array.
fn fd_gradient(n1: usize, n2: usize, h: (f64, f64), f: &[f64]) -> [Vec<f64>; 2] {
    let mut d1 = vec![0.0; n1 * n2];
    let mut d2 = vec![0.0; n1 * n2];
    for i in 0..n1 {
        for j in 0..n2 {
            let (mut a, mut b) = (0.0, 0.0);
            for (o, c) in FD8.iter().enumerate() {
                let o = o + 1;
                a += c * (f[((i + o) % n1) * n2 + j] - f[((i + n1 - o) % n1) * n2 + j]);
                b += c * (f[i * n2 + (j + o) % n2] - f[i * n2 + (j + n2 - o) % n2]);
            }
            d1[i * n2 + j] = a / h.0;
            d2[i * n2 + j] = b / h.1;
        }
    }
    [d1, d2]
}

/// Reference integrator bound to one grid and one base map `u0`.
pub struct DirectSolver {
    grid: Grid2D,
    fine: Grid2D,
    u0: FieldBundle,
    inv_sqrt_w: Option<Vec<f64>>,
}

impl DirectSolver {
    pub fn new(grid: &Grid2D, u0: &FieldBundle) -> Result<Self> {
        let (l1, l2) = grid.lengths();
        let fine = Grid2D::new(2 * grid.n1(), 2 * grid.n2(), l1, l2)?;
        let inv_sqrt_w = (!grid.is_uniform_weight()).then(|| {
            resample(grid, &fine, &grid.weight()).values().iter().map(|w| 1.0 / w.max(1e-300).sqrt()).collect()
        });
        for c in &u0.components {
            grid.check(c)?;
        }
        Ok(Self { grid: grid.clone(), fine, u0: u0.clone(), inv_sqrt_w })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn bracket(&self, f: &[[Vec<f64>; 2]], g: &[[Vec<f64>; 2]], (a, b): (usize, usize)) -> Vec<f64> {
        let (fa, gb) = (&f[a], &g[b]);
        let mut out: Vec<f64> = (0..fa[0].len()).map(|i| fa[0][i] * gb[1][i] - fa[1][i] * gb[0][i]).collect();
        if let Some(iw) = &self.inv_sqrt_w {
            out.iter_mut().zip(iw).for_each(|(o, w)| *o *= w);
        }
        out
    }

    /// `{{v^m,u^n},u^n} + 2 {{u^m,u^n},v^n}` summed over `n`.
    pub fn rhs(&self, v: &FieldBundle, u: &FieldBundle) -> FieldBundle {
        let (n1, n2) = (self.fine.n1(), self.fine.n2());
        let h = self.fine.spacing();
        let grad = |x: &Field| {
            let xf = resample(&self.grid, &self.fine, x);
            fd_gradient(n1, n2, h, xf.values())
        };
        let gu: Vec<_> = u.components.iter().map(grad).collect();
        let gv: Vec<_> = v.components.iter().map(grad).collect();
        let m = u.num_components();
        let mut uu = vec![vec![None; m]; m];
        for a in 0..m {
            for b in (a + 1)..m {
                let g = fd_gradient(n1, n2, h, &self.bracket(&gu, &gu, (a, b)));
                let neg = [g[0].iter().map(|x| -x).collect(), g[1].iter().map(|x| -x).collect()];
                uu[a][b] = Some(g);
                uu[b][a] = Some(neg);
            }
        }
        let components = (0..m)
            .map(|a| {
                let mut acc = vec![0.0; n1 * n2];
                for b in 0..m {
                    let vu = [fd_gradient(n1, n2, h, &self.bracket(&gv, &gu, (a, b)))];
                    let t1 = self.bracket(&vu, &gu, (0, b));
                    acc.iter_mut().zip(&t1).for_each(|(x, y)| *x += y);
                    if let Some(g) = &uu[a][b] {
                        let t2 = self.bracket(std::slice::from_ref(g), &gv, (0, b));
                        acc.iter_mut().zip(&t2).for_each(|(x, y)| *x += 2.0 * y);
                    }
                }
                let fine_field = Field::from_values(&self.fine, acc).unwrap_or_else(|_| Field::constant(&self.fine, f64::NAN));
                resample(&self.fine, &self.grid, &fine_field)
            })
            .collect();
        FieldBundle { components }
    }

    fn acceleration(&self, clock: Clock, big_u: &FieldBundle, v: &FieldBundle) -> FieldBundle {
        let (c, cu) = clock.coefficients();
        let u = self.u0.zip_map(big_u, |a, b| {
            let mut s = a.clone();
            s.axpy(cu, b);
            s
        });
        self.rhs(v, &u).scale(c)
    }

    /// Largest eigenvalue magnitude of `v -> c * rhs(v, u0)` by power iteration.
    pub fn spectral_radius(&self, clock: Clock, seed: u64) -> f64 {
        let (c, _) = clock.coefficients();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = FieldBundle {
            components: (0..self.u0.num_components())
                .map(|_| {
                    let vals = (0..self.grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Field::from_values(&self.grid, vals).expect("finite samples")
                })
                .collect(),
        };
        let mut est = 0.0;
        for _ in 0..60 {
            let nx = bundle_l2(&self.grid, &x);
            if nx == 0.0 {
                return 0.0;
            }
            let y = self.rhs(&x, &self.u0).scale(c);
            let ny = bundle_l2(&self.grid, &y);
            let next = ny / nx;
            if (next - est).abs() <= 1e-4 * next {
                return next;
            }
            est = next;
            x = y.scale(1.0 / ny);
        }
        est
    }

    pub fn cfl_limit(&self, clock: Clock, scheme: Scheme, seed: u64) -> f64 {
        let rho = self.spectral_radius(clock, seed);
        if rho == 0.0 {
            f64::INFINITY
        } else {
            scheme.stability() / (1.1 * rho).sqrt()
        }
    }

    fn diagnostic(&self, clock: Clock, t: f64, big_u: &FieldBundle, v: &FieldBundle) -> Diagnostic {
        let (_, cu) = clock.coefficients();
        let mut u = self.u0.clone();
        u.axpy(cu, big_u);
        let constraint_sup = constraint_residual(&self.grid, v, &u).max_abs();
        let hamiltonian = reduced_hamiltonian(&self.grid, &u, &v.scale(clock.velocity_scale()));
        Diagnostic { t, constraint_sup, hamiltonian }
    }

    /// Integrates from `v(0) = v0`, `v_t(0) = v1`, `U(0) = 0`.
    pub fn solve(&self, v0: &FieldBundle, v1: &FieldBundle, cfg: &OracleConfig) -> Result<OracleSolution> {
        v0.check_matches(v1)?;
        if v0.num_components() != self.u0.num_components() {
            return Err(LabError::ShapeMismatch("data and u0 differ in component count".into()));
        }
        if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
            return Err(LabError::InvalidArgument(format!("dt must be positive, got {}", cfg.dt)));
        }
        let cfl_limit = self.cfl_limit(cfg.clock, cfg.scheme, cfg.seed);
        if cfg.dt > cfl_limit {
            return Err(LabError::Cfl { dt: cfg.dt, limit: cfl_limit });
        }
        let dt = cfg.dt;
        let m = v0.num_components();
        let mut state = (FieldBundle::zeros(&self.grid, m), v0.clone(), v1.clone());
        let mut vs = vec![state.1.clone()];
        let mut us = vec![state.0.clone()];
        let mut diagnostics = vec![self.diagnostic(cfg.clock, 0.0, &state.0, &state.1)];
        let deriv = |s: &(FieldBundle, FieldBundle, FieldBundle)| {
            (s.1.clone(), s.2.clone(), self.acceleration(cfg.clock, &s.0, &s.1))
        };
        let shifted = |s: &(FieldBundle, FieldBundle, FieldBundle), k: &(FieldBundle, FieldBundle, FieldBundle), a: f64| {
            let mut o = s.clone();
            o.0.axpy(a, &k.0);
            o.1.axpy(a, &k.1);
            o.2.axpy(a, &k.2);
            o
        };
        for n in 0..cfg.steps {
            let t = (n + 1) as f64 * dt;
            let k1 = deriv(&state);
            state = match cfg.scheme {
                Scheme::Rk4 => {
                    let k2 = deriv(&shifted(&state, &k1, dt / 2.0));
                    let k3 = deriv(&shifted(&state, &k2, dt / 2.0));
                    let k4 = deriv(&shifted(&state, &k3, dt));
                    let mut s = shifted(&state, &k1, dt / 6.0);
                    s = shifted(&s, &k2, dt / 3.0);
                    s = shifted(&s, &k3, dt / 3.0);
                    shifted(&s, &k4, dt / 6.0)
                }
                Scheme::Rk2 => {
                    let k2 = deriv(&shifted(&state, &k1, dt));
                    let s = shifted(&state, &k1, dt / 2.0);
                    shifted(&s, &k2, dt / 2.0)
                }
            };
            let size = state.0.max_abs().max(state.1.max_abs()).max(state.2.max_abs());
            if !(size.is_finite() && size <= cfg.blowup_threshold) {
                return Err(LabError::BlowUp { t });
            }
            diagnostics.push(self.diagnostic(cfg.clock, t, &state.0, &state.1));
            vs.push(state.1.clone());
            us.push(state.0.clone());
        }
        Ok(OracleSolution {
            clock: cfg.clock,
            scheme: cfg.scheme,
            v: SpacetimeField::new(0.0, dt, vs)?,
            big_u: SpacetimeField::new(0.0, dt, us)?,
            diagnostics,
            cfl_limit,
        })
    }

    /// `max_n ||D^2 v_n - c rhs(v_n, u_n)||_{L2}` over interior steps.
    pub fn discrete_residual(&self, sol: &OracleSolution) -> f64 {
        let dt = sol.v.dt();
        let mut worst: f64 = 0.0;
        for n in 1..sol.v.len().saturating_sub(1) {
            let mut d2 = sol.v.at(n + 1).add(sol.v.at(n - 1));
            d2.axpy(-2.0, sol.v.at(n));
            let d2 = d2.scale(1.0 / (dt * dt));
            let r = d2.sub(&self.acceleration(sol.clock, sol.big_u.at(n), sol.v.at(n)));
            worst = worst.max(bundle_l2(&self.grid, &r));
        }
        worst
    }
}

/// Integrates a rescaled problem on its own clock with step `dt`.
pub fn direct_solve(p: &MembraneProblem, dt: f64, scheme: Scheme) -> Result<OracleSolution> {
    let steps = (p.horizon / dt).round() as usize;
    if steps == 0 || ((steps as f64) * dt - p.horizon).abs() > 1e-9 * p.horizon {
        return Err(LabError::InvalidArgument(format!("dt {dt} does not divide the horizon {}", p.horizon)));
    }
    let mut cfg = OracleConfig::new(dt, steps, Clock::Rescaled { epsilon: p.epsilon });
    cfg.scheme = scheme;
    DirectSolver::new(&p.grid, &p.u0)?.solve(&p.v0, &p.v1, &cfg)
}

pub fn write_diagnostics_csv<W: Write>(mut out: W, sol: &OracleSolution) -> Result<()> {
    writeln!(out, "t,constraint_sup,hamiltonian")?;
    for d in &sol.diagnostics {
        writeln!(out, "{},{:e},{:e}", d.t, d.constraint_sup, d.hamiltonian)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotError {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
    pub sup: f64,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub snapshots: Vec<SnapshotError>,
    /// `(sum ||a-b||^2 dt)^{1/2} / (sum ||b||^2 dt)^{1/2}`
    pub relative_l2: f64,
    pub max_l2: f64,
    pub max_h1: f64,
    pub max_sup: f64,
    /// Set when `b` had to be interpolated onto the times of `a`.
    pub interpolated: bool,
}

/// Differences between two histories on the times of `a`; `b` is the reference.
pub fn compare(grid: &Grid2D, a: &SpacetimeField, b: &SpacetimeField) -> Result<CompareReport> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::InvalidArgument("empty history".into()));
    }
    let tol = 1e-9 * a.dt().max(b.dt());
    if a.time(0) > b.end_time() + tol || b.time(0) > a.end_time() + tol {
        return Err(LabError::InvalidArgument(format!(
            "disjoint time ranges [{}, {}] and [{}, {}]",
            a.time(0),
            a.end_time(),
            b.time(0),
            b.end_time()
        )));
    }
    let aligned = (a.dt() - b.dt()).abs() <= tol && (a.t0() - b.t0()).abs() <= tol;
    let mut snapshots = Vec::new();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..a.len() {
        let t = a.time(i);
        if t < b.time(0) - tol || t > b.end_time() + tol {
            continue;
        }
        let rb = if aligned && i < b.len() {
            b.at(i).clone()
        } else {
            b.interpolate(t.clamp(b.time(0), b.end_time()))?
        };
        let diff = a.at(i).sub(&rb);
        let l2 = bundle_l2(grid, &diff);
        let nb = bundle_l2(grid, &rb);
        num += l2 * l2;
        den += nb * nb;
        snapshots.push(SnapshotError {
            t,
            l2,
            h1: grid.bundle_sobolev_norm(&diff, 1.0)?,
            sup: diff.max_abs(),
            rel_l2: if nb > 0.0 { l2 / nb } else { l2 },
        });
    }
    let fold = |f: fn(&SnapshotError) -> f64| snapshots.iter().map(f).fold(0.0, f64::max);
    Ok(CompareReport {
        relative_l2: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        max_l2: fold(|s| s.l2),
        max_h1: fold(|s| s.h1),
        max_sup: fold(|s| s.sup),
        interpolated: !aligned,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brackets::membrane_rhs;
    use std::f64::consts::PI;

    fn clifford(grid: &Grid2D, r: f64) -> FieldBundle {
        FieldBundle {
            components: vec![
                Field::from_fn(grid, |x, _| r * x.cos()),
                Field::from_fn(grid, |x, _| r * x.sin()),
                Field::from_fn(grid, |_, y| r * y.cos()),
                Field::from_fn(grid, |_, y| r * y.sin()),
            ],
        }
    }

    #[test]
    fn resample_round_trip_and_interpolation() {
        let g = Grid2D::square(8).unwrap();
        let f = Grid2D::square(16).unwrap();
        let a = Field::from_fn(&g, |x, y| (2.0 * x).sin() + (x - 3.0 * y).cos() + 0.5);
        let up = resample(&g, &f, &a);
        let exact = Field::from_fn(&f, |x, y| (2.0 * x).sin() + (x - 3.0 * y).cos() + 0.5);
        assert!(up.sub(&exact).max_abs() < 1e-12);
        assert!(resample(&f, &g, &up).sub(&a).max_abs() < 1e-12);
        // Nyquist cosine survives the round trip
        let nyq = Field::from_fn(&g, |x, _| (4.0 * x).cos());
        let back = resample(&f, &g, &resample(&g, &f, &nyq));
        assert!(back.sub(&nyq).max_abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_of_trig_polynomial() {
        let g = Grid2D::square(32).unwrap();
        let f = Field::from_fn(&g, |x, y| (x + 2.0 * y).sin());
        let [d1, d2] = fd_gradient(32, 32, g.spacing(), f.values());
        let e1 = Field::from_fn(&g, |x, y| (x + 2.0 * y).cos());
        let err1 = d1.iter().zip(e1.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let err2 = d2.iter().zip(e1.values()).map(|(a, b)| (a - 2.0 * b).abs()).fold(0.0, f64::max);
        assert!(err1 < 1e-8 && err2 < 5e-6, "{err1} {err2}");
    }

    #[test]
    fn rhs_on_clifford_torus() {
        // v = u0 on the Clifford torus: {{u0,u0},u0} = -r^2 u0, so the total is -3 r^2 u0.
        let g = Grid2D::square(16).unwrap();
        let r = 0.7;
        let u0 = clifford(&g, r);
        let s = DirectSolver::new(&g, &u0).unwrap();
        let out = s.rhs(&u0, &u0);
        let err = out.sub(&u0.scale(-3.0 * r * r)).max_abs();
        assert!(err < 1e-7, "{err}");
        let spectral = membrane_rhs(&g, &u0);
        let f = s.rhs(&u0, &u0).scale(1.0 / 3.0);
        assert!(f.sub(&spectral).max_abs() < 1e-7);
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = Grid2D::square(8).unwrap();
        let u0 = clifford(&g, 0.2);
        let s = DirectSolver::new(&g, &u0).unwrap();
        let z = FieldBundle::zeros(&g, 4);
        let sol = s.solve(&z, &z, &OracleConfig::new(1e-2, 10, Clock::Original)).unwrap();
        assert_eq!(sol.v.max_abs(), 0.0);
        assert_eq!(sol.max_constraint(), 0.0);
    }

    #[test]
    fn radial_mode_oscillates_at_closed_form_frequency() {
        // v = a(t) u0 with a'' = -3 r^2 a on the original clock for small U.
        let g = Grid2D::square(8).unwrap();
        let r = 0.5;
        let u0 = clifford(&g, r);
        let s = DirectSolver::new(&g, &u0).unwrap();
        let z = FieldBundle::zeros(&g, 4);
        let v0 = u0.scale(1e-6);
        let omega = 3.0f64.sqrt() * r;
        let steps = 200;
        let dt = 2.0 * PI / omega / steps as f64;
        let sol = s.solve(&v0, &z, &OracleConfig::new(dt, steps, Clock::Original)).unwrap();
        let end = sol.v.at(steps);
        let err = end.sub(&v0).max_abs() / v0.max_abs();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn clocks_agree_under_rescaling() {
        let g = Grid2D::square(8).unwrap();
        let eps = 1e-2;
        let u0 = clifford(&g, 0.3);
        let s = DirectSolver::new(&g, &u0).unwrap();
        let v0 = FieldBundle {
            components: vec![
                Field::from_fn(&g, |x, _| 1e-3 * x.sin()),
                Field::zeros(&g),
                Field::from_fn(&g, |_, y| 1e-3 * y.cos()),
                Field::zeros(&g),
            ],
        };
        let z = FieldBundle::zeros(&g, 4);
        let ds = 0.01;
        let res = s.solve(&v0, &z, &OracleConfig::new(ds, 50, Clock::Rescaled { epsilon: eps })).unwrap();
        let (ov0, ov1) = crate::rescale::data_backward(&v0, &z, eps);
        let orig = s.solve(&ov0, &ov1, &OracleConfig::new(ds / eps.sqrt(), 50, Clock::Original)).unwrap();
        let back = crate::rescale::rescale_forward(&orig.v, eps).unwrap();
        let rep = compare(&g, &back, &res.v).unwrap();
        assert!(!rep.interpolated);
        assert!(rep.relative_l2 < 1e-8, "{}", rep.relative_l2);
    }

    #[test]
    fn cfl_refusal_and_blowup() {
        let g = Grid2D::square(8).unwrap();
        let u0 = clifford(&g, 1.0);
        let s = DirectSolver::new(&g, &u0).unwrap();
        let z = FieldBundle::zeros(&g, 4);
        let limit = s.cfl_limit(Clock::Original, Scheme::Rk4, 1);
        assert!(limit.is_finite() && limit > 0.0);
        let err = s.solve(&u0, &z, &OracleConfig::new(2.0 * limit, 5, Clock::Original));
        assert!(matches!(err, Err(LabError::Cfl { .. })));
        let mut cfg = OracleConfig::new(0.5 * limit, 50, Clock::Original);
        cfg.blowup_threshold = 1e-3;
        assert!(matches!(s.solve(&u0, &z, &cfg), Err(LabError::BlowUp { .. })));
    }

    #[test]
    fn compare_rejects_disjoint_and_flags_interpolation() {
        let g = Grid2D::square(4).unwrap();
        let one = FieldBundle { components: vec![Field::constant(&g, 1.0)] };
        let a = SpacetimeField::new(0.0, 0.1, vec![one.clone(); 5]).unwrap();
        let b = SpacetimeField::new(1.0, 0.1, vec![one.clone(); 5]).unwrap();
        assert!(compare(&g, &a, &b).is_err());
        let c = SpacetimeField::new(0.0, 0.05, vec![one.clone(); 9]).unwrap();
        let rep = compare(&g, &a, &c).unwrap();
        assert!(rep.interpolated);
        assert!(rep.max_l2 < 1e-14);
        let rep = compare(&g, &a, &a).unwrap();
        assert_eq!(rep.relative_l2, 0.0);
    }
}
