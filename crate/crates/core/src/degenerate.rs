//! Degenerate linear wave equations
//!
//! `h_tt - rho~ d_a(rho_ab d_b h) + B^a d_a h - eps f^a \int_0^t d_a h = g`
//!
//! with `0 <= rho~ <= 1`, the leapfrog stepper shared with the membrane
//! linearization, and weighted-energy audits.

use std::io::Write;

use serde::Serialize;

use crate::brackets::MetricField;
use crate::error::{LabError, Result};
use crate::rescale::Factorization;
use crate::grid::{bundle_l2, epsilon_symbol, Axis, Field, FieldBundle, Grid2D, SpacetimeField};

/// Linear interpolation between two coefficient samples.
pub trait Lerp: Clone {
    fn lerp(&self, other: &Self, s: f64) -> Self;
}

impl Lerp for Field {
    fn lerp(&self, other: &Self, s: f64) -> Self {
        self.zip_map(other, |a, b| (1.0 - s) * a + s * b)
    }
}

impl Lerp for [Field; 2] {
    fn lerp(&self, other: &Self, s: f64) -> Self {
        [self[0].lerp(&other[0], s), self[1].lerp(&other[1], s)]
    }
}

impl Lerp for MetricField {
    fn lerp(&self, other: &Self, s: f64) -> Self {
        MetricField { g11: self.g11.lerp(&other.g11, s), g12: self.g12.lerp(&other.g12, s), g22: self.g22.lerp(&other.g22, s) }
    }
}

/// A coefficient that is either constant in time or sampled on a uniform time grid.
#[derive(Debug, Clone)]
pub enum Schedule<T> {
    Static(T),
    Sampled { t0: f64, dt: f64, samples: Vec<T> },
}

impl<T: Lerp> Schedule<T> {
    pub fn at(&self, t: f64) -> T {
        match self {
            Schedule::Static(v) => v.clone(),
            Schedule::Sampled { t0, dt, samples } => {
                let x = ((t - t0) / dt).clamp(0.0, (samples.len() - 1) as f64);
                let i = (x.floor() as usize).min(samples.len() - 1);
                if i + 1 >= samples.len() {
                    return samples[i].clone();
                }
                let s = x - i as f64;
                if s < 1e-12 {
                    samples[i].clone()
                } else {
                    samples[i].lerp(&samples[i + 1], s)
                }
            }
        }
    }

    pub fn samples(&self) -> Vec<&T> {
        match self {
            Schedule::Static(v) => vec![v],
            Schedule::Sampled { samples, .. } => samples.iter().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DegenerateCoefficients {
    pub varrho: Field,
    pub rho: Schedule<MetricField>,
    pub b: Schedule<[Field; 2]>,
    pub f_mem: Schedule<[Field; 2]>,
    pub epsilon: f64,
    /// Regularization already folded into `varrho`.
    pub delta: f64,
}

impl DegenerateCoefficients {
    /// `rho~ = 1`, `rho = identity`, no lower-order terms.
    pub fn wave(grid: &Grid2D) -> Self {
        Self {
            varrho: Field::constant(grid, 1.0),
            rho: Schedule::Static(MetricField::identity(grid)),
            b: Schedule::Static([Field::zeros(grid), Field::zeros(grid)]),
            f_mem: Schedule::Static([Field::zeros(grid), Field::zeros(grid)]),
            epsilon: 0.0,
            delta: 0.0,
        }
    }

    /// Ellipticity bounds `(rho0, rho1)` of `rho_ab` over all samples.
    pub fn ellipticity(&self) -> (f64, f64) {
        self.rho.samples().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), m| {
            let (a, b) = m.eigen_bounds();
            (lo.min(a), hi.max(b))
        })
    }

    pub fn varrho_range(&self) -> (f64, f64) {
        let v = self.varrho.values();
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// `B^b - rho~ sum_a d_a rho_ab` as a vector field.
fn levi_defect(grid: &Grid2D, varrho: &Field, rho: &MetricField, b: &[Field; 2]) -> [Field; 2] {
    let mut out = [b[0].clone(), b[1].clone()];
    for (bi, out_b) in out.iter_mut().enumerate() {
        let mut div = Field::zeros(grid);
        for (ai, axis) in Axis::BOTH.iter().enumerate() {
            div.axpy(1.0, &grid.derivative(rho.component(ai, bi), *axis));
        }
        out_b.axpy(-1.0, &varrho.mul(&div));
    }
    out
}

/// Smallest `c5` with `|B - rho~ d_a rho_ab| <= c5 rho~` at every node; `+inf`
/// when the defect is nonzero where `rho~` vanishes.
pub fn check_levi(grid: &Grid2D, c: &DegenerateCoefficients) -> f64 {
    let mut c5: f64 = 0.0;
    let rhos = c.rho.samples();
    let bs = c.b.samples();
    let count = rhos.len().max(bs.len());
    for k in 0..count {
        let rho = rhos[k.min(rhos.len() - 1)];
        let b = bs[k.min(bs.len() - 1)];
        let d = levi_defect(grid, &c.varrho, rho, b);
        let scale = b[0].max_abs().max(b[1].max_abs()).max(1.0);
        for i in 0..grid.len() {
            let num = (d[0].values()[i].powi(2) + d[1].values()[i].powi(2)).sqrt();
            let den = c.varrho.values()[i];
            if num <= 1e-12 * scale {
                continue;
            }
            if den <= 0.0 {
                return f64::INFINITY;
            }
            c5 = c5.max(num / den);
        }
    }
    c5
}

/// Replaces `rho~` by `rho~ + delta`.
pub fn regularize(c: &DegenerateCoefficients, delta: f64) -> Result<DegenerateCoefficients> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(LabError::InvalidArgument(format!("regularization {delta} must be positive")));
    }
    let mut out = c.clone();
    out.varrho = c.varrho.map(|x| x + delta);
    out.delta = c.delta + delta;
    Ok(out)
}

/// Right-hand side `a(t, h, H)` of `h_tt = a` for a linear second-order system.
pub trait WaveOperator {
    fn acceleration(&self, step: usize, t: f64, h: &FieldBundle, memory: &FieldBundle) -> FieldBundle;
}

/// Leapfrog march of `h_tt = a(t, h, \int h) + g`:
/// `h_1 = h_0 + dt h_t(0) + dt^2/2 a_0`, `h_{n+1} = 2h_n - h_{n-1} + dt^2 a_n`,
/// with the memory integral updated by the trapezoidal rule.
pub fn march<O: WaveOperator + ?Sized>(
    op: &O,
    h0: &FieldBundle,
    h1: &FieldBundle,
    forcing: Option<&SpacetimeField>,
    dt: f64,
    steps: usize,
) -> Result<SpacetimeField> {
    h0.check_matches(h1)?;
    if let Some(g) = forcing {
        if g.len() < steps {
            return Err(LabError::OutOfHistory { t: steps as f64 * dt, start: g.t0(), end: g.end_time() });
        }
    }
    let accel = |n: usize, h: &FieldBundle, mem: &FieldBundle| {
        let mut a = op.acceleration(n, n as f64 * dt, h, mem);
        if let Some(g) = forcing {
            a.axpy(1.0, g.at(n));
        }
        a
    };
    let mut snaps = Vec::with_capacity(steps + 1);
    snaps.push(h0.clone());
    if steps == 0 {
        return SpacetimeField::new(0.0, dt, snaps);
    }
    let mut mem = h0.scale(0.0);
    let a0 = accel(0, h0, &mem);
    let mut next = h0.clone();
    next.axpy(dt, h1);
    next.axpy(0.5 * dt * dt, &a0);
    snaps.push(next);
    for n in 1..steps {
        mem.axpy(0.5 * dt, &snaps[n - 1]);
        mem.axpy(0.5 * dt, &snaps[n]);
        let a = accel(n, &snaps[n], &mem);
        let mut next = snaps[n].scale(2.0);
        next.axpy(-1.0, &snaps[n - 1]);
        next.axpy(dt * dt, &a);
        if !next.is_finite() {
            return Err(LabError::BlowUp { t: (n + 1) as f64 * dt });
        }
        snaps.push(next);
    }
    SpacetimeField::new(0.0, dt, snaps)
}

/// Residual of the leapfrog relations for a stored trajectory, one entry per
/// step `n = 0..N-1` (the first uses the starting relation).
pub fn discrete_residual<O: WaveOperator + ?Sized>(
    op: &O,
    sol: &SpacetimeField,
    h1: &FieldBundle,
    forcing: Option<&SpacetimeField>,
) -> Vec<FieldBundle> {
    let dt = sol.dt();
    let mut mem = sol.at(0).scale(0.0);
    let mut out = Vec::with_capacity(sol.len().saturating_sub(1));
    for n in 0..sol.len().saturating_sub(1) {
        if n > 0 {
            mem.axpy(0.5 * dt, sol.at(n - 1));
            mem.axpy(0.5 * dt, sol.at(n));
        }
        let mut a = op.acceleration(n, n as f64 * dt, sol.at(n), &mem);
        if let Some(g) = forcing {
            a.axpy(1.0, g.at(n));
        }
        let second = if n == 0 {
            let mut d = sol.at(1).sub(sol.at(0));
            d.axpy(-dt, h1);
            d.scale(2.0 / (dt * dt))
        } else {
            let mut d = sol.at(n + 1).add(sol.at(n - 1));
            d.axpy(-2.0, sol.at(n));
            d.scale(1.0 / (dt * dt))
        };
        out.push(second.sub(&a));
    }
    out
}

/// The toy operator `rho~ d_a(rho_ab d_b h) - B^a d_a h + eps f^a d_a H`.
pub struct ToyOperator<'a> {
    pub grid: &'a Grid2D,
    pub coeffs: &'a DegenerateCoefficients,
}

impl ToyOperator<'_> {
    fn apply_scalar(&self, t: f64, h: &Field, mem: &Field) -> Field {
        let g = self.grid;
        let c = self.coeffs;
        let rho = c.rho.at(t);
        let b = c.b.at(t);
        let [h1, h2] = g.gradient(h);
        let q1 = rho.g11.mul(&h1).add(&rho.g12.mul(&h2));
        let q2 = rho.g12.mul(&h1).add(&rho.g22.mul(&h2));
        let div = g.derivative(&q1, Axis::X1).add(&g.derivative(&q2, Axis::X2));
        let mut out = c.varrho.mul(&div);
        out.axpy(-1.0, &b[0].mul(&h1));
        out.axpy(-1.0, &b[1].mul(&h2));
        if c.epsilon != 0.0 {
            let f = c.f_mem.at(t);
            let [m1, m2] = g.gradient(mem);
            out.axpy(c.epsilon, &f[0].mul(&m1));
            out.axpy(c.epsilon, &f[1].mul(&m2));
        }
        out
    }
}

impl WaveOperator for ToyOperator<'_> {
    fn acceleration(&self, _step: usize, t: f64, h: &FieldBundle, memory: &FieldBundle) -> FieldBundle {
        h.zip_map(memory, |a, m| self.apply_scalar(t, a, m))
    }
}

/// Stability limit `1.8 / (k_max sqrt(rho1 max rho~) + |B|_inf)` of the leapfrog march.
pub fn cfl_limit(grid: &Grid2D, c: &DegenerateCoefficients) -> f64 {
    let (_, rho1) = c.ellipticity();
    let (_, vmax) = c.varrho_range();
    let bmax = c.b.samples().iter().fold(0.0f64, |m, b| m.max(b[0].max_abs()).max(b[1].max_abs()));
    let omega = grid.max_wavenumber() * (rho1.max(0.0) * vmax.max(0.0)).sqrt() + bmax;
    if omega == 0.0 {
        f64::INFINITY
    } else {
        1.8 / omega
    }
}

/// Cauchy problem for the toy equation.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub grid: Grid2D,
    pub coeffs: DegenerateCoefficients,
    pub forcing: Option<SpacetimeField>,
    pub h0: FieldBundle,
    pub h1: FieldBundle,
    pub horizon: f64,
}

impl ToyProblem {
    pub fn operator(&self) -> ToyOperator<'_> {
        ToyOperator { grid: &self.grid, coeffs: &self.coeffs }
    }

    pub fn steps(&self, dt: f64) -> usize {
        (self.horizon / dt).round() as usize
    }
}

pub fn solve_linear(p: &ToyProblem, dt: f64) -> Result<SpacetimeField> {
    let limit = cfl_limit(&p.grid, &p.coeffs);
    if !(dt > 0.0) || dt > limit {
        return Err(LabError::Cfl { dt, limit });
    }
    let steps = p.steps(dt);
    if ((steps as f64) * dt - p.horizon).abs() > 1e-9 * p.horizon.max(1.0) {
        return Err(LabError::InvalidArgument(format!("dt {dt} does not divide the horizon {}", p.horizon)));
    }
    march(&p.operator(), &p.h0, &p.h1, p.forcing.as_ref(), dt, steps)
}

/// `\int_0^T \|h\|^2` by the trapezoidal rule, square-rooted.
pub fn l2_spacetime(grid: &Grid2D, h: &SpacetimeField) -> f64 {
    let n = h.len();
    let mut acc = 0.0;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * bundle_l2(grid, h.at(i)).powi(2);
    }
    (acc * h.dt()).sqrt()
}

/// Spatial weight `phi` of the weighted energy.
#[derive(Debug, Clone)]
pub enum Weight {
    One,
    InverseVarrho,
    Field(Field),
}

fn weight_field(grid: &Grid2D, c: &DegenerateCoefficients, phi: &Weight) -> Result<Field> {
    match phi {
        Weight::One => Ok(Field::constant(grid, 1.0)),
        Weight::InverseVarrho => {
            let (lo, _) = c.varrho_range();
            if lo <= 0.0 {
                return Err(LabError::Condition(format!(
                    "weight 1/rho~ requested but min rho~ = {lo}; regularize first"
                )));
            }
            Ok(c.varrho.map(|x| 1.0 / x))
        }
        Weight::Field(f) => {
            if f.values().iter().any(|x| !(*x > 0.0)) {
                return Err(LabError::Condition("weight must be positive".into()));
            }
            Ok(f.clone())
        }
    }
}

fn time_weights(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * dt } else { dt }).collect()
}

/// Pointwise energy density `h_t^2 + rho~ |Dh|^2 + h^2` at snapshot `i`.
fn density(grid: &Grid2D, h: &SpacetimeField, i: usize, varrho: Option<&Field>) -> Field {
    let (ht, _) = h.time_derivatives(i);
    let mut out = Field::zeros(grid);
    for (hc, htc) in h.at(i).components.iter().zip(&ht.components) {
        let [d1, d2] = grid.gradient(hc);
        let grad = d1.mul(&d1).add(&d2.mul(&d2));
        let grad = match varrho {
            Some(v) => grad.mul(v),
            None => grad,
        };
        out.axpy(1.0, &htc.mul(htc).add(&grad).add(&hc.mul(hc)));
    }
    out
}

/// `\int_0^t e^{-lambda s} \int phi (h_t^2 + rho~ |Dh|^2 + h^2) sqrt(w)`.
pub fn weighted_energy(
    grid: &Grid2D,
    h: &SpacetimeField,
    c: &DegenerateCoefficients,
    phi: &Weight,
    lambda: f64,
    t: f64,
) -> Result<f64> {
    let w = weight_field(grid, c, phi)?;
    let last = h.index_of(t)?;
    let tw = time_weights(last + 1, h.dt());
    let mut acc = 0.0;
    for i in 0..=last {
        if last == 0 {
            break;
        }
        let e = density(grid, h, i, Some(&c.varrho));
        acc += tw[i] * (-lambda * h.time(i)).exp() * grid.integrate(&e.mul(&w));
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Lemma {
    #[serde(rename = "2.3")]
    WeightedPhi,
    #[serde(rename = "2.4")]
    InverseVarrho,
    #[serde(rename = "2.5")]
    Unweighted,
    #[serde(rename = "2.6")]
    Induction,
}

impl std::str::FromStr for Lemma {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("lemma").trim_start_matches('_') {
            "2.3" | "2_3" => Ok(Lemma::WeightedPhi),
            "2.4" | "2_4" => Ok(Lemma::InverseVarrho),
            "2.5" | "2_5" => Ok(Lemma::Unweighted),
            "2.6" | "2_6" => Ok(Lemma::Induction),
            other => Err(LabError::InvalidArgument(format!("unknown lemma {other}"))),
        }
    }
}

/// Outcome of an energy audit. `margins[k]` is right side minus left side of
/// the inequality on `[0, t_k]` with the configured constant.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub lemma: Lemma,
    pub lambda: f64,
    pub constants: std::collections::BTreeMap<String, f64>,
    pub margins: Vec<f64>,
    pub energies: Vec<f64>,
    pub pass: bool,
}

/// Constants assumed by an audit: the one the inequality is checked against
/// and the Sobolev index for the induction bound.
#[derive(Debug, Clone, Copy)]
pub struct AuditConfig {
    pub constant: f64,
    pub sobolev: f64,
    pub residual_tolerance: f64,
    /// number of horizons `t_k` at which margins are reported
    pub checkpoints: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { constant: 50.0, sobolev: 2.0, residual_tolerance: 1e-8, checkpoints: 10 }
    }
}

/// Per-snapshot integrals needed by the inequalities.
struct Integrands {
    /// `\int phi (h_t^2 + rho~|Dh|^2 + h^2)` (lemmas 2.3/2.4) or the unweighted density (2.5)
    energy: Vec<f64>,
    /// `\int phi eps f^2 (\int_0^t d_a h)^2`
    memory: Vec<f64>,
    /// `\int phi g^2` or `\int g^2 + |Dg|^2`
    forcing: Vec<f64>,
}

fn integrands(p: &ToyProblem, sol: &SpacetimeField, lemma: Lemma) -> Result<Integrands> {
    let grid = &p.grid;
    let c = &p.coeffs;
    let (phi, varrho) = match lemma {
        Lemma::WeightedPhi => (Field::constant(grid, 1.0), Some(c.varrho.clone())),
        Lemma::InverseVarrho => (weight_field(grid, c, &Weight::InverseVarrho)?, None),
        _ => (Field::constant(grid, 1.0), None),
    };
    let with_dg = matches!(lemma, Lemma::Unweighted);
    let dt = sol.dt();
    let mut mem = sol.at(0).scale(0.0);
    let mut out = Integrands { energy: vec![], memory: vec![], forcing: vec![] };
    for i in 0..sol.len() {
        if i > 0 {
            mem.axpy(0.5 * dt, sol.at(i - 1));
            mem.axpy(0.5 * dt, sol.at(i));
        }
        let e = density(grid, sol, i, varrho.as_ref());
        out.energy.push(grid.integrate(&e.mul(&phi)));
        let t = sol.time(i);
        let mut m = 0.0;
        if c.epsilon != 0.0 {
            let f = c.f_mem.at(t);
            let f2 = f[0].mul(&f[0]).add(&f[1].mul(&f[1]));
            for mc in &mem.components {
                let [d1, d2] = grid.gradient(mc);
                let grad = d1.mul(&d1).add(&d2.mul(&d2));
                m += grid.integrate(&f2.mul(&grad).mul(&phi));
            }
            m *= c.epsilon;
        }
        out.memory.push(m);
        let mut gsum = 0.0;
        if let Some(g) = &p.forcing {
            if i < g.len() {
                for gc in &g.at(i).components {
                    gsum += grid.integrate(&gc.mul(gc).mul(&phi));
                    if with_dg {
                        let [d1, d2] = grid.gradient(gc);
                        gsum += grid.integrate(&d1.mul(&d1).add(&d2.mul(&d2)));
                    }
                }
            }
        }
        out.forcing.push(gsum);
    }
    Ok(out)
}

fn initial_data_norm(grid: &Grid2D, p: &ToyProblem) -> f64 {
    let mut acc = 0.0;
    for h in [&p.h0, &p.h1] {
        for c in &h.components {
            let [d1, d2] = grid.gradient(c);
            acc += grid.integrate(&c.mul(c).add(&d1.mul(&d1)).add(&d2.mul(&d2)));
        }
    }
    acc
}

fn checkpoints(n: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, n.max(2) - 1);
    (1..=count).map(|k| (k * (n - 1)) / count).collect()
}

/// Lemma 2.3/2.4 left and right sides on `[0, t_k]` without the constant:
/// returns `(X, Y)` with the inequality `(lambda - c) X <= Y`.
fn weighted_sides(ints: &Integrands, dt: f64, lambda: f64, upto: usize) -> (f64, f64) {
    let tw = time_weights(upto + 1, dt);
    let mut x = 0.0;
    let mut y = ints.energy[0];
    for i in 0..=upto {
        let e = (-lambda * i as f64 * dt).exp();
        x += tw[i] * e * ints.energy[i];
        y += tw[i] * e * (ints.memory[i] + ints.forcing[i]);
    }
    (x, y)
}

/// Lemma 2.5: `lambda X <= c (Y0 + Yg + Yf)`; returns `(lambda X, Y)`.
fn unweighted_sides(ints: &Integrands, y0: f64, dt: f64, lambda: f64, upto: usize) -> (f64, f64) {
    let tw = time_weights(upto + 1, dt);
    let mut x = 0.0;
    let mut y = y0;
    for i in 0..=upto {
        let e = (-lambda * i as f64 * dt).exp();
        x += tw[i] * e * ints.energy[i];
        y += tw[i] * e * (ints.forcing[i] + ints.memory[i]);
    }
    (lambda * x, y)
}

/// Checks that `sol` solves the problem, then evaluates one energy inequality.
pub fn verify_energy_inequality(
    p: &ToyProblem,
    sol: &SpacetimeField,
    lemma: Lemma,
    lambda: f64,
    cfg: &AuditConfig,
) -> Result<EnergyReport> {
    let op = p.operator();
    let res = discrete_residual(&op, sol, &p.h1, p.forcing.as_ref());
    let scale = sol.max_abs().max(1e-300) / (sol.dt() * sol.dt());
    let worst = res.iter().fold(0.0f64, |m, r| m.max(r.max_abs()));
    if sol.max_abs() > 0.0 && worst > cfg.residual_tolerance * scale {
        return Err(LabError::ResidualTooLarge { residual: worst / scale, tolerance: cfg.residual_tolerance });
    }
    let grid = &p.grid;
    let mut constants = std::collections::BTreeMap::new();
    let mut margins = Vec::new();
    let n = sol.len();
    let points = checkpoints(n, cfg.checkpoints);
    let energies;
    match lemma {
        Lemma::WeightedPhi | Lemma::InverseVarrho => {
            let ints = integrands(p, sol, lemma)?;
            let mut fitted: f64 = f64::NEG_INFINITY;
            for &k in &points {
                let (x, y) = weighted_sides(&ints, sol.dt(), lambda, k);
                margins.push(y - (lambda - cfg.constant) * x);
                if x > 0.0 {
                    fitted = fitted.max(lambda - y / x);
                }
            }
            let name = if lemma == Lemma::WeightedPhi { "c10" } else { "c11" };
            constants.insert(name.to_string(), fitted.max(0.0));
            energies = ints.energy;
        }
        Lemma::Unweighted => {
            let ints = integrands(p, sol, lemma)?;
            let y0 = initial_data_norm(grid, p);
            let mut fitted: f64 = 0.0;
            for &k in &points {
                let (lx, y) = unweighted_sides(&ints, y0, sol.dt(), lambda, k);
                margins.push(cfg.constant * y - lx);
                if y > 0.0 {
                    fitted = fitted.max(lx / y);
                } else if lx > 0.0 {
                    fitted = f64::INFINITY;
                }
            }
            constants.insert("c12".to_string(), fitted);
            // auxiliary problem bound: lambda \int e^{-lambda t}(h~^2 + h~_t^2) <= c17 (data + forcing)
            let zero = SpacetimeField::sample(sol.dt(), n - 1, |_| p.h0.scale(0.0))?;
            let g = p.forcing.clone().unwrap_or(zero);
            let aux = auxiliary_tilde_solve(&g, &p.h0, &p.h1, p.horizon, sol.dt())?;
            let tw = time_weights(aux.len(), aux.dt());
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for (i, w) in tw.iter().enumerate() {
                let e = (-lambda * aux.time(i)).exp();
                let (d1, _) = aux.time_derivatives(i);
                lhs += w * e * (bundle_l2(grid, aux.at(i)).powi(2) + bundle_l2(grid, &d1).powi(2));
                if i < g.len() {
                    rhs += w * e * bundle_l2(grid, g.at(i)).powi(2);
                }
            }
            rhs += bundle_l2(grid, &p.h0).powi(2) + bundle_l2(grid, &p.h1).powi(2);
            constants.insert("c17".to_string(), if rhs > 0.0 { lambda * lhs / rhs } else { 0.0 });
            energies = ints.energy;
        }
        Lemma::Induction => {
            let s = cfg.sobolev;
            let h = spacetime_norm_any(grid, sol, s)?;
            let d0 = grid.bundle_sobolev_norm(&p.h0, s)?;
            let d1 = grid.bundle_sobolev_norm(&p.h1, s)?;
            let dg = match &p.forcing {
                Some(g) => spacetime_norm_any(grid, &g.truncated(n), s)?,
                None => 0.0,
            };
            let data = d0 + d1 + dg;
            let fitted = if data > 0.0 { h / data } else if h > 0.0 { f64::INFINITY } else { 0.0 };
            constants.insert("c20".to_string(), fitted);
            margins.push(cfg.constant * data - h);
            energies = (0..n).map(|i| grid.bundle_sobolev_norm(sol.at(i), s).unwrap_or(f64::NAN)).collect();
        }
    }
    let pass = margins.iter().all(|m| *m >= -1e-12 * m.abs().max(1.0));
    Ok(EnergyReport { lemma, lambda, constants, margins, energies, pass })
}

fn spacetime_norm_any(grid: &Grid2D, u: &SpacetimeField, s: f64) -> Result<f64> {
    crate::grid::spacetime_norm(grid, u, s.max(2.0), u.end_time())
}

/// Smallest `lambda` on `[lo, hi]` above which the inequality holds with the
/// configured constant (bisection after a logarithmic scan). Returns `lo` when
/// it holds everywhere and `+inf` when it fails at `hi`.
pub fn empirical_lambda0(
    p: &ToyProblem,
    sol: &SpacetimeField,
    lemma: Lemma,
    cfg: &AuditConfig,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let holds = |l: f64| -> Result<bool> { Ok(verify_energy_inequality(p, sol, lemma, l, cfg)?.pass) };
    if !holds(hi)? {
        return Ok(f64::INFINITY);
    }
    let scan = 24;
    let mut last_fail = None;
    for k in 0..=scan {
        let l = lo * (hi / lo).powf(k as f64 / scan as f64);
        if !holds(l)? {
            last_fail = Some(l);
        }
    }
    let Some(mut a) = last_fail else { return Ok(lo) };
    let mut b = a * (hi / lo).powf(1.0 / scan as f64);
    for _ in 0..40 {
        let mid = 0.5 * (a + b);
        if holds(mid)? {
            b = mid;
        } else {
            a = mid;
        }
        if (b - a) < 1e-6 * b {
            break;
        }
    }
    Ok(b)
}

/// Solves `h~'' - h~' - h~ = g` at every node by RK4, with the forcing at
/// half steps from cubic interpolation of the samples.
pub fn auxiliary_tilde_solve(
    g: &SpacetimeField,
    h0: &FieldBundle,
    h1: &FieldBundle,
    horizon: f64,
    dt: f64,
) -> Result<SpacetimeField> {
    h0.check_matches(h1)?;
    let steps = (horizon / dt).round() as usize;
    if g.len() < steps + 1 || (g.dt() - dt).abs() > 1e-12 * dt {
        return Err(LabError::InvalidArgument("forcing history does not match the time grid".into()));
    }
    let mid = |n: usize| -> FieldBundle {
        let last = g.len() - 1;
        if n >= 1 && n + 2 <= last {
            let mut m = g.at(n).add(g.at(n + 1)).scale(9.0 / 16.0);
            m.axpy(-1.0 / 16.0, g.at(n - 1));
            m.axpy(-1.0 / 16.0, g.at(n + 2));
            m
        } else if n == 0 && last >= 2 {
            // quadratic through g0, g1, g2
            let mut m = g.at(0).scale(3.0 / 8.0);
            m.axpy(6.0 / 8.0, g.at(1));
            m.axpy(-1.0 / 8.0, g.at(2));
            m
        } else if last >= 2 {
            let mut m = g.at(n + 1).scale(3.0 / 8.0);
            m.axpy(6.0 / 8.0, g.at(n));
            m.axpy(-1.0 / 8.0, g.at(n - 1));
            m
        } else {
            g.at(n).add(g.at(n + 1)).scale(0.5)
        }
    };
    let rhs = |y: &FieldBundle, yp: &FieldBundle, gv: &FieldBundle| -> FieldBundle { yp.add(y).add(gv) };
    let mut y = h0.clone();
    let mut yp = h1.clone();
    let mut snaps = vec![y.clone()];
    for n in 0..steps {
        let (ga, gm, gb) = (g.at(n).clone(), mid(n), g.at(n + 1).clone());
        let k1y = yp.clone();
        let k1p = rhs(&y, &yp, &ga);
        let y2 = { let mut t = y.clone(); t.axpy(0.5 * dt, &k1y); t };
        let p2 = { let mut t = yp.clone(); t.axpy(0.5 * dt, &k1p); t };
        let k2y = p2.clone();
        let k2p = rhs(&y2, &p2, &gm);
        let y3 = { let mut t = y.clone(); t.axpy(0.5 * dt, &k2y); t };
        let p3 = { let mut t = yp.clone(); t.axpy(0.5 * dt, &k2p); t };
        let k3y = p3.clone();
        let k3p = rhs(&y3, &p3, &gm);
        let y4 = { let mut t = y.clone(); t.axpy(dt, &k3y); t };
        let p4 = { let mut t = yp.clone(); t.axpy(dt, &k3p); t };
        let k4y = p4.clone();
        let k4p = rhs(&y4, &p4, &gb);
        for (k, c) in [(&k1y, 1.0), (&k2y, 2.0), (&k3y, 2.0), (&k4y, 1.0)] {
            y.axpy(c * dt / 6.0, k);
        }
        for (k, c) in [(&k1p, 1.0), (&k2p, 2.0), (&k3p, 2.0), (&k4p, 1.0)] {
            yp.axpy(c * dt / 6.0, k);
        }
        snaps.push(y.clone());
    }
    SpacetimeField::new(0.0, dt, snaps)
}

/// `(delta, ||h_delta - h_{delta/2}||_{L^2([0,T] x M)})` for each `delta`.
pub fn delta_sweep(p: &ToyProblem, deltas: &[f64], dt: f64) -> Result<Vec<(f64, f64)>> {
    use rayon::prelude::*;
    deltas
        .par_iter()
        .map(|&d| {
            let mut a = p.clone();
            a.coeffs = regularize(&p.coeffs, d)?;
            let mut b = p.clone();
            b.coeffs = regularize(&p.coeffs, 0.5 * d)?;
            let ha = solve_linear(&a, dt)?;
            let hb = solve_linear(&b, dt)?;
            Ok((d, l2_spacetime(&p.grid, &ha.sub(&hb)?)))
        })
        .collect()
}

/// Standard energy `\int h_t^2 + |Dh|^2` at every snapshot.
pub fn standard_energy(grid: &Grid2D, h: &SpacetimeField) -> Vec<f64> {
    (0..h.len())
        .map(|i| {
            let (ht, _) = h.time_derivatives(i);
            let mut acc = 0.0;
            for (c, ct) in h.at(i).components.iter().zip(&ht.components) {
                let [d1, d2] = grid.gradient(c);
                acc += grid.integrate(&ct.mul(ct).add(&d1.mul(&d1)).add(&d2.mul(&d2)));
            }
            acc
        })
        .collect()
}

/// CSV time series with columns `t,E_weighted,E_standard,residual`.
pub fn write_energy_csv<W: Write>(
    mut out: W,
    p: &ToyProblem,
    sol: &SpacetimeField,
    lambda: f64,
) -> Result<()> {
    let grid = &p.grid;
    let standard = standard_energy(grid, sol);
    let res = discrete_residual(&p.operator(), sol, &p.h1, p.forcing.as_ref());
    writeln!(out, "t,E_weighted,E_standard,residual")?;
    for i in 0..sol.len() {
        let t = sol.time(i);
        let e = density(grid, sol, i, Some(&p.coeffs.varrho));
        let weighted = (-lambda * t).exp() * grid.integrate(&e);
        let r = res.get(i).map(|r| r.max_abs()).unwrap_or(0.0);
        writeln!(out, "{t},{weighted:e},{:e},{r:e}", standard[i])?;
    }
    Ok(())
}

/// Toy coefficients of the membrane linearization around `u0` and a history `v`:
/// `rho~ = gamma0`, `rho_ab = eps^{ac} eps^{bd} gamma_cd`,
/// `B^b = -d_a gamma0 rho_ab`, and the memory coefficient
/// `f^d = sum_m eps^{ac} eps^{bd} d_c u0^m d_a d_b v^m`.
pub fn map_membrane_to_toy(
    grid: &Grid2D,
    u0: &FieldBundle,
    factorization: &Factorization,
    v: Option<&SpacetimeField>,
    epsilon: f64,
) -> Result<DegenerateCoefficients> {
    let gamma0 = factorization.gamma0.clone();
    grid.check(&gamma0)?;
    let rho = factorization.gamma_cd.conjugated();
    let dg = grid.gradient(&gamma0);
    let b = [0, 1].map(|bi| {
        let mut out = dg[0].mul(rho.component(0, bi));
        out.axpy(1.0, &dg[1].mul(rho.component(1, bi)));
        out.scale(-1.0)
    });
    let u0_grads: Vec<[Field; 2]> = u0.components.iter().map(|c| grid.gradient(c)).collect();
    let memory = |snap: &FieldBundle| -> [Field; 2] {
        let mut f = [Field::zeros(grid), Field::zeros(grid)];
        for (vm, du) in snap.components.iter().zip(&u0_grads) {
            let dv = grid.gradient(vm);
            let hess = [
                [grid.derivative(&dv[0], Axis::X1), grid.derivative(&dv[0], Axis::X2)],
                [grid.derivative(&dv[1], Axis::X1), grid.derivative(&dv[1], Axis::X2)],
            ];
            for (d, fd) in f.iter_mut().enumerate() {
                for a in 0..2 {
                    for bb in 0..2 {
                        for c in 0..2 {
                            let e = epsilon_symbol(a, c) * epsilon_symbol(bb, d);
                            if e != 0.0 {
                                fd.axpy(e, &du[c].mul(&hess[a][bb]));
                            }
                        }
                    }
                }
            }
        }
        f
    };
    let f_mem = match v {
        None => Schedule::Static([Field::zeros(grid), Field::zeros(grid)]),
        Some(h) => Schedule::Sampled { t0: h.t0(), dt: h.dt(), samples: h.snapshots().iter().map(memory).collect() },
    };
    Ok(DegenerateCoefficients {
        varrho: gamma0,
        rho: Schedule::Static(rho),
        b: Schedule::Static(b),
        f_mem,
        epsilon,
        delta: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scalar(f: Field) -> FieldBundle {
        FieldBundle::new(vec![f]).unwrap()
    }

    fn wave_problem(g: &Grid2D, h0: Field, h1: Field, horizon: f64) -> ToyProblem {
        ToyProblem {
            grid: g.clone(),
            coeffs: DegenerateCoefficients::wave(g),
            forcing: None,
            h0: scalar(h0),
            h1: scalar(h1),
            horizon,
        }
    }

    #[test]
    fn levi_examples() {
        let g = Grid2D::square(16).unwrap();
        let mut c = DegenerateCoefficients::wave(&g);
        c.rho = Schedule::Static(MetricField {
            g11: Field::from_fn(&g, |x, _| 2.0 + x.sin()),
            g12: Field::zeros(&g),
            g22: Field::constant(&g, 1.0),
        });
        c.b = Schedule::Static([Field::from_fn(&g, |x, _| x.cos()), Field::zeros(&g)]);
        assert!(check_levi(&g, &c) < 1e-12);
        c.b = Schedule::Static([Field::from_fn(&g, |x, _| x.cos() + 0.3), Field::zeros(&g)]);
        assert!((check_levi(&g, &c) - 0.3).abs() < 1e-12);
        c.varrho = Field::zeros(&g);
        assert_eq!(check_levi(&g, &c), f64::INFINITY);
    }

    #[test]
    fn regularize_examples() {
        let g = Grid2D::square(8).unwrap();
        let mut c = DegenerateCoefficients::wave(&g);
        c.varrho = Field::zeros(&g);
        let r = regularize(&c, 1e-2).unwrap();
        assert!(r.varrho.values().iter().all(|&x| x == 1e-2));
        assert!(regularize(&c, 0.0).is_err());
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = Grid2D::square(16).unwrap();
        let p = wave_problem(&g, Field::zeros(&g), Field::zeros(&g), 0.5);
        let h = solve_linear(&p, 1e-2).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn plane_wave_mode() {
        let g = Grid2D::square(32).unwrap();
        // h = cos(x1 + 2 x2 - sqrt(5) t)
        let w = 5f64.sqrt();
        let p = wave_problem(
            &g,
            Field::from_fn(&g, |x, y| (x + 2.0 * y).cos()),
            Field::from_fn(&g, |x, y| w * (x + 2.0 * y).sin()),
            1.0,
        );
        let h = solve_linear(&p, 1e-3).unwrap();
        let exact = Field::from_fn(&g, |x, y| (x + 2.0 * y - w).cos());
        let err = g.l2_norm(&h.at(h.len() - 1).components[0].sub(&exact)) / g.l2_norm(&exact);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cfl_violation_refused() {
        let g = Grid2D::square(32).unwrap();
        let p = wave_problem(&g, Field::zeros(&g), Field::zeros(&g), 1.0);
        assert!(matches!(solve_linear(&p, 0.5), Err(LabError::Cfl { .. })));
    }

    #[test]
    fn weighted_energy_constant_in_time() {
        let g = Grid2D::square(16).unwrap();
        let f = scalar(Field::from_fn(&g, |x, _| x.sin()));
        let h = SpacetimeField::sample(1e-3, 1000, |_| f.clone()).unwrap();
        let c = DegenerateCoefficients::wave(&g);
        let lambda = 1.3;
        let e = weighted_energy(&g, &h, &c, &Weight::One, lambda, 1.0).unwrap();
        // density sin^2 + cos^2 = 1, integral 4 pi^2
        let exact = (1.0 - (-lambda).exp()) / lambda * 4.0 * PI * PI;
        assert!((e - exact).abs() < 1e-6 * exact);
        let e2 = weighted_energy(&g, &h, &c, &Weight::One, 2.0 * lambda, 1.0).unwrap();
        assert!(e2 < e);
    }

    #[test]
    fn auxiliary_examples() {
        let g = Grid2D::square(4).unwrap();
        let one = scalar(Field::constant(&g, 1.0));
        let steady = SpacetimeField::sample(1e-2, 100, |_| one.scale(-1.0)).unwrap();
        let h = auxiliary_tilde_solve(&steady, &one, &one.scale(0.0), 1.0, 1e-2).unwrap();
        assert!(h.at(100).sub(&one).max_abs() < 1e-12);
        let dt = 1e-3;
        let exp = SpacetimeField::sample(dt, 1000, |t| one.scale((2.0 * t).exp())).unwrap();
        let h = auxiliary_tilde_solve(&exp, &one, &one.scale(2.0), 1.0, dt).unwrap();
        let exact = 2f64.exp();
        assert!((h.at(1000).components[0].get(0, 0) - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn lemma_parse() {
        assert_eq!("2.5".parse::<Lemma>().unwrap(), Lemma::Unweighted);
        assert_eq!("lemma2_6".parse::<Lemma>().unwrap(), Lemma::Induction);
        assert!("3.1".parse::<Lemma>().is_err());
    }

    #[test]
    fn standard_energy_drift() {
        let g = Grid2D::square(16).unwrap();
        let p = wave_problem(
            &g,
            Field::from_fn(&g, |x, y| x.sin() + 0.5 * y.cos()),
            Field::from_fn(&g, |x, y| (x + y).cos()),
            1.0,
        );
        let h = solve_linear(&p, 1e-3).unwrap();
        let e = standard_energy(&g, &h);
        let e0 = e[1];
        let drift = e[1..e.len() - 1].iter().fold(0.0f64, |m, x| m.max((x - e0).abs())) / e0;
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn manufactured_forcing() {
        // h = sin t sin x1 on rho~ = 1/2 + cos^2(x2)/4 solves h_tt - rho~ dd h = g
        let g = Grid2D::square(32).unwrap();
        let varrho = Field::from_fn(&g, |_, y| 0.5 + 0.25 * y.cos().powi(2));
        let dt = 1e-3;
        let forcing = SpacetimeField::sample(dt, 1000, |t| {
            scalar(Field::from_fn(&g, |x, y| (-1.0 + 0.5 + 0.25 * y.cos().powi(2)) * t.sin() * x.sin()))
        })
        .unwrap();
        let mut c = DegenerateCoefficients::wave(&g);
        c.varrho = varrho;
        let p = ToyProblem {
            grid: g.clone(),
            coeffs: c,
            forcing: Some(forcing),
            h0: scalar(Field::zeros(&g)),
            h1: scalar(Field::from_fn(&g, |x, _| x.sin())),
            horizon: 1.0,
        };
        let h = solve_linear(&p, dt).unwrap();
        let exact = Field::from_fn(&g, |x, _| 1f64.sin() * x.sin());
        let err = g.l2_norm(&h.at(1000).components[0].sub(&exact)) / g.l2_norm(&exact);
        assert!(err < 1e-5, "{err}");
        let res = discrete_residual(&p.operator(), &h, &p.h1, p.forcing.as_ref());
        assert!(res.iter().all(|r| r.max_abs() < 1e-8));
    }

    #[test]
    fn delta_sweep_decreases() {
        let g = Grid2D::square(16).unwrap();
        let mut c = DegenerateCoefficients::wave(&g);
        c.varrho = Field::zeros(&g);
        let p = ToyProblem {
            grid: g.clone(),
            coeffs: c,
            forcing: None,
            h0: scalar(Field::from_fn(&g, |x, y| x.sin() * y.cos())),
            h1: scalar(Field::zeros(&g)),
            horizon: 1.0,
        };
        let sweep = delta_sweep(&p, &[1e-1, 1e-2, 1e-3, 1e-4], 1e-2).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].1 < w[0].1, "{sweep:?}");
        }
    }

    #[test]
    fn lemma_audits_on_wave() {
        let g = Grid2D::square(16).unwrap();
        let p = wave_problem(&g, Field::from_fn(&g, |x, _| x.sin()), Field::from_fn(&g, |_, y| y.cos()), 1.0);
        let h = solve_linear(&p, 1e-2).unwrap();
        let cfg = AuditConfig::default();
        for lemma in [Lemma::WeightedPhi, Lemma::InverseVarrho, Lemma::Unweighted, Lemma::Induction] {
            let r = verify_energy_inequality(&p, &h, lemma, 5.0, &cfg).unwrap();
            assert!(r.pass, "{lemma:?} {r:?}");
        }
        let l0 = empirical_lambda0(&p, &h, Lemma::Unweighted, &cfg, 1e-2, 1e2).unwrap();
        assert!(l0.is_finite());
        let json = serde_json::to_value(verify_energy_inequality(&p, &h, Lemma::Unweighted, 5.0, &cfg).unwrap()).unwrap();
        for key in ["lambda", "constants", "margins", "pass"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn membrane_map_on_unit_metric() {
        let g = Grid2D::square(16).unwrap();
        let u0 = FieldBundle::new(vec![
            Field::from_fn(&g, |x, _| x.cos()),
            Field::from_fn(&g, |x, _| x.sin()),
            Field::from_fn(&g, |_, y| y.cos()),
            Field::from_fn(&g, |_, y| y.sin()),
        ])
        .unwrap();
        let fac = crate::rescale::factorization_check(&g, &u0, Some(&Field::constant(&g, 1.0)), 1.0).unwrap();
        let w = SpacetimeField::sample(0.1, 5, |_| u0.scale(0.0)).unwrap();
        let c = map_membrane_to_toy(&g, &u0, &fac, Some(&w), 0.0).unwrap();
        assert!(c.varrho.sub(&Field::constant(&g, 1.0)).max_abs() < 1e-14);
        let rho = c.rho.at(0.0);
        assert!(rho.g11.sub(&Field::constant(&g, 1.0)).max_abs() < 1e-12);
        assert!(rho.g12.max_abs() < 1e-12);
        assert!(c.b.at(0.0)[0].max_abs() < 1e-12 && c.f_mem.at(0.2)[1].max_abs() == 0.0);
        assert!(check_levi(&g, &c) < 1e-10);
    }
}
