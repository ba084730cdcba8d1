//! The time-differentiated membrane system for `v = u_t`:
//!
//! `v_tt = {{v^m,u^n},u^n} + 2{{u^m,u^n},v^n}`, `u = u0 + U`, `U = \int_0^t v`,
//!
//! split exactly into a part linear in `v` with coefficients frozen at `u0`,
//!
//! `A v = {{v^m,u0^n},u0^n} + 2{{u0^m,u0^n},v^n}`,
//!
//! a quadratic part `Q(U, v)` and a cubic part `C(U, U, v)`. On the rescaled
//! clock the system reads `v_tt = A v / eps + eps^2 F(v)` with
//! `F = Q(U, v) + eps^3 C(U, U, v)`.
//!
//! Every bracket is assembled from padded gradients; inner brackets are
//! formed once per operand pair and shared between terms.

use crate::brackets::{constraint_residual, membrane_rhs};
use crate::error::{LabError, Result};
use crate::grid::{time_integral, Field, FieldBundle, Grid2D, PaddedGrad, SpacetimeField};

/// Named contribution to one of the assembled operators.
#[derive(Debug, Clone)]
pub struct Term {
    pub name: &'static str,
    pub value: FieldBundle,
}

pub fn sum_terms(grid: &Grid2D, m: usize, terms: &[Term]) -> FieldBundle {
    let mut acc = FieldBundle::zeros(grid, m);
    for t in terms {
        acc.axpy(1.0, &t.value);
    }
    acc
}

/// Padded gradients of the inner brackets `{x^m, y^n}`.
struct Inner {
    grads: Vec<Vec<PaddedGrad>>,
}

/// Bracket assembly with the base configuration `u0` frozen.
#[derive(Clone)]
pub struct MembraneSystem {
    grid: Grid2D,
    u0: FieldBundle,
    u0_grads: Vec<PaddedGrad>,
    u0u0: std::sync::Arc<Vec<Vec<PaddedGrad>>>,
}

impl std::fmt::Debug for MembraneSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MembraneSystem").field("components", &self.u0.num_components()).finish()
    }
}

impl MembraneSystem {
    pub fn new(grid: &Grid2D, u0: &FieldBundle) -> Self {
        let u0_grads: Vec<PaddedGrad> = u0.components.iter().map(|c| grid.padded_gradient(c)).collect();
        let mut sys = Self {
            grid: grid.clone(),
            u0: u0.clone(),
            u0_grads,
            u0u0: std::sync::Arc::new(Vec::new()),
        };
        let inner = sys.inner_antisymmetric(&sys.u0_grads);
        sys.u0u0 = std::sync::Arc::new(inner.grads);
        sys
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn u0(&self) -> &FieldBundle {
        &self.u0
    }

    pub fn num_components(&self) -> usize {
        self.u0.num_components()
    }

    pub fn grads(&self, x: &FieldBundle) -> Vec<PaddedGrad> {
        x.components.iter().map(|c| self.grid.padded_gradient(c)).collect()
    }

    fn inner(&self, x: &[PaddedGrad], y: &[PaddedGrad]) -> Inner {
        let len = self.grid.padded_len();
        let grads = x
            .iter()
            .map(|xm| {
                y.iter()
                    .map(|yn| {
                        let mut acc = vec![0.0; len];
                        xm.jacobian_into(yn, 1.0, &mut acc);
                        self.grid.bracket_gradient(&acc)
                    })
                    .collect()
            })
            .collect();
        Inner { grads }
    }

    fn inner_antisymmetric(&self, x: &[PaddedGrad]) -> Inner {
        let m = x.len();
        let len = self.grid.padded_len();
        let mut grads: Vec<Vec<Option<PaddedGrad>>> = vec![vec![None; m]; m];
        for a in 0..m {
            grads[a][a] = Some(PaddedGrad { d1: vec![0.0; len], d2: vec![0.0; len] });
            for b in (a + 1)..m {
                let mut acc = vec![0.0; len];
                x[a].jacobian_into(&x[b], 1.0, &mut acc);
                let g = self.grid.bracket_gradient(&acc);
                grads[b][a] = Some(g.negated());
                grads[a][b] = Some(g);
            }
        }
        Inner { grads: grads.into_iter().map(|r| r.into_iter().map(Option::unwrap).collect()).collect() }
    }

    /// `coef * sum_n {I^{mn}, z^n}`; with `transpose` the inner matrix is read as
    /// `-I^{nm}`, i.e. the brackets `{y^m, x^n}`.
    fn outer(&self, inner: &[Vec<PaddedGrad>], transpose: bool, z: &[PaddedGrad], coef: f64) -> FieldBundle {
        let m = z.len();
        let len = self.grid.padded_len();
        let components = (0..m)
            .map(|a| {
                let mut acc = vec![0.0; len];
                for (b, zb) in z.iter().enumerate() {
                    if transpose {
                        inner[b][a].jacobian_into(zb, -coef, &mut acc);
                    } else {
                        inner[a][b].jacobian_into(zb, coef, &mut acc);
                    }
                }
                self.grid.finish_bracket(&acc)
            })
            .collect();
        FieldBundle { components }
    }

    /// Terms of the frozen-coefficient operator `A v`.
    pub fn linear_terms(&self, v: &FieldBundle) -> Vec<Term> {
        let gv = self.grads(v);
        let vu = self.inner(&gv, &self.u0_grads);
        vec![
            Term { name: "A1 {{v^m,u0^n},u0^n}", value: self.outer(&vu.grads, false, &self.u0_grads, 1.0) },
            Term { name: "A2 2{{u0^m,u0^n},v^n}", value: self.outer(&self.u0u0, false, &gv, 2.0) },
        ]
    }

    pub fn linear_part(&self, v: &FieldBundle) -> FieldBundle {
        sum_terms(&self.grid, self.num_components(), &self.linear_terms(v))
    }

    fn q_terms(&self, x: &[PaddedGrad], z: &[PaddedGrad], zu0: &Inner, names: [&'static str; 4]) -> Vec<Term> {
        let zx = self.inner(z, x);
        let u0x = self.inner(&self.u0_grads, x);
        vec![
            Term { name: names[0], value: self.outer(&zu0.grads, false, x, 1.0) },
            Term { name: names[1], value: self.outer(&zx.grads, false, &self.u0_grads, 1.0) },
            Term { name: names[2], value: self.outer(&u0x.grads, false, z, 2.0) },
            Term { name: names[3], value: self.outer(&u0x.grads, true, z, 2.0) },
        ]
    }

    /// `Q(U, v)` term by term.
    pub fn quadratic_terms(&self, v: &FieldBundle, u: &FieldBundle) -> Vec<Term> {
        let gv = self.grads(v);
        let gu = self.grads(u);
        let vu0 = self.inner(&gv, &self.u0_grads);
        self.q_terms(
            &gu,
            &gv,
            &vu0,
            ["Q1 {{v^m,u0^n},U^n}", "Q2 {{v^m,U^n},u0^n}", "Q3 2{{u0^m,U^n},v^n}", "Q4 2{{U^m,u0^n},v^n}"],
        )
    }

    /// `C(X, Y, z) = {{z^m,X^n},Y^n} + 2{{X^m,Y^n},z^n}`, scaled by `coef`.
    fn c_terms(
        &self,
        y: &[PaddedGrad],
        z: &[PaddedGrad],
        zx: &Inner,
        xy: &Inner,
        coef: f64,
        names: [&'static str; 2],
    ) -> Vec<Term> {
        vec![
            Term { name: names[0], value: self.outer(&zx.grads, false, y, coef) },
            Term { name: names[1], value: self.outer(&xy.grads, false, z, 2.0 * coef) },
        ]
    }

    /// The rescaled nonlinearity `F = Q(U, v) + eps^3 C(U, U, v)` term by term.
    pub fn f_terms(&self, v: &FieldBundle, u: &FieldBundle, eps: f64) -> Vec<Term> {
        let gv = self.grads(v);
        let gu = self.grads(u);
        let vu0 = self.inner(&gv, &self.u0_grads);
        let mut terms = self.q_terms(
            &gu,
            &gv,
            &vu0,
            ["Q1 {{v^m,u0^n},U^n}", "Q2 {{v^m,U^n},u0^n}", "Q3 2{{u0^m,U^n},v^n}", "Q4 2{{U^m,u0^n},v^n}"],
        );
        let vu = self.inner(&gv, &gu);
        let uu = self.inner_antisymmetric(&gu);
        let e3 = eps.powi(3);
        terms.extend(self.c_terms(&gu, &gv, &vu, &uu, e3, ["C1 e^3{{v^m,U^n},U^n}", "C2 2e^3{{U^m,U^n},v^n}"]));
        terms
    }

    pub fn nonlinear_f(&self, v: &FieldBundle, u: &FieldBundle, eps: f64) -> FieldBundle {
        sum_terms(&self.grid, self.num_components(), &self.f_terms(v, u, eps))
    }

    /// Directional derivative of `F` at `(v, U)` along `(h, H)`, term by term.
    pub fn frechet_terms(
        &self,
        v: &FieldBundle,
        u: &FieldBundle,
        h: &FieldBundle,
        hh: &FieldBundle,
        eps: f64,
    ) -> Vec<Term> {
        let gv = self.grads(v);
        let gu = self.grads(u);
        let gh = self.grads(h);
        let ghh = self.grads(hh);
        let e3 = eps.powi(3);
        let vu0 = self.inner(&gv, &self.u0_grads);
        let hu0 = self.inner(&gh, &self.u0_grads);
        let mut terms = self.q_terms(
            &ghh,
            &gv,
            &vu0,
            ["dQ1 {{v^m,u0^n},H^n}", "dQ2 {{v^m,H^n},u0^n}", "dQ3 2{{u0^m,H^n},v^n}", "dQ4 2{{H^m,u0^n},v^n}"],
        );
        terms.extend(self.q_terms(
            &gu,
            &gh,
            &hu0,
            ["dQ5 {{h^m,u0^n},U^n}", "dQ6 {{h^m,U^n},u0^n}", "dQ7 2{{u0^m,U^n},h^n}", "dQ8 2{{U^m,u0^n},h^n}"],
        ));
        let v_hh = self.inner(&gv, &ghh);
        let v_u = self.inner(&gv, &gu);
        let h_u = self.inner(&gh, &gu);
        let hh_u = self.inner(&ghh, &gu);
        let u_u = self.inner_antisymmetric(&gu);
        // C(H, U, v)
        terms.extend(self.c_terms(&gu, &gv, &v_hh, &hh_u, e3, ["dC1 e^3{{v^m,H^n},U^n}", "dC2 2e^3{{H^m,U^n},v^n}"]));
        // C(U, H, v): {{v^m,U^n},H^n} + 2{{U^m,H^n},v^n}, with {U^m,H^n} = -{H^n,U^m}
        terms.push(Term { name: "dC3 e^3{{v^m,U^n},H^n}", value: self.outer(&v_u.grads, false, &ghh, e3) });
        terms.push(Term { name: "dC4 2e^3{{U^m,H^n},v^n}", value: self.outer(&hh_u.grads, true, &gv, 2.0 * e3) });
        // C(U, U, h)
        terms.extend(self.c_terms(&gu, &gh, &h_u, &u_u, e3, ["dC5 e^3{{h^m,U^n},U^n}", "dC6 2e^3{{U^m,U^n},h^n}"]));
        terms
    }

    pub fn frechet(&self, v: &FieldBundle, u: &FieldBundle, h: &FieldBundle, hh: &FieldBundle, eps: f64) -> FieldBundle {
        sum_terms(&self.grid, self.num_components(), &self.frechet_terms(v, u, h, hh, eps))
    }

    /// `F(v+h) - F(v) - dF(v)h` assembled from its own term list:
    /// `Q(H,h) + eps^3 [C(H,H,v) + C(H,U,h) + C(U,H,h) + C(H,H,h)]`.
    pub fn remainder_terms(
        &self,
        v: &FieldBundle,
        u: &FieldBundle,
        h: &FieldBundle,
        hh: &FieldBundle,
        eps: f64,
    ) -> Vec<Term> {
        let gv = self.grads(v);
        let gu = self.grads(u);
        let gh = self.grads(h);
        let ghh = self.grads(hh);
        let e3 = eps.powi(3);
        let hu0 = self.inner(&gh, &self.u0_grads);
        let mut terms = self.q_terms(
            &ghh,
            &gh,
            &hu0,
            ["R1 {{h^m,u0^n},H^n}", "R2 {{h^m,H^n},u0^n}", "R3 2{{u0^m,H^n},h^n}", "R4 2{{H^m,u0^n},h^n}"],
        );
        let v_hh = self.inner(&gv, &ghh);
        let h_hh = self.inner(&gh, &ghh);
        let h_u = self.inner(&gh, &gu);
        let hh_hh = self.inner_antisymmetric(&ghh);
        let hh_u = self.inner(&ghh, &gu);
        // C(H,H,v)
        terms.extend(self.c_terms(&ghh, &gv, &v_hh, &hh_hh, e3, ["R5 e^3{{v^m,H^n},H^n}", "R6 2e^3{{H^m,H^n},v^n}"]));
        // C(H,U,h)
        terms.extend(self.c_terms(&gu, &gh, &h_hh, &hh_u, e3, ["R7 e^3{{h^m,H^n},U^n}", "R8 2e^3{{H^m,U^n},h^n}"]));
        // C(U,H,h)
        terms.push(Term { name: "R9 e^3{{h^m,U^n},H^n}", value: self.outer(&h_u.grads, false, &ghh, e3) });
        terms.push(Term { name: "R10 2e^3{{U^m,H^n},h^n}", value: self.outer(&hh_u.grads, true, &gh, 2.0 * e3) });
        // C(H,H,h)
        terms.extend(self.c_terms(&ghh, &gh, &h_hh, &hh_hh, e3, ["R11 e^3{{h^m,H^n},H^n}", "R12 2e^3{{H^m,H^n},h^n}"]));
        terms
    }

    pub fn remainder(&self, v: &FieldBundle, u: &FieldBundle, h: &FieldBundle, hh: &FieldBundle, eps: f64) -> FieldBundle {
        sum_terms(&self.grid, self.num_components(), &self.remainder_terms(v, u, h, hh, eps))
    }

    /// Right-hand side of the unscaled time-differentiated system,
    /// `A v + Q(U, v) + C(U, U, v)`.
    pub fn modified_rhs_at(&self, v: &FieldBundle, u: &FieldBundle) -> FieldBundle {
        let mut out = self.linear_part(v);
        out.axpy(1.0, &self.nonlinear_f(v, u, 1.0));
        out
    }
}

fn snapshot_and_memory(hist: &SpacetimeField, t: f64) -> Result<(FieldBundle, FieldBundle)> {
    let v = hist.interpolate(t)?;
    let u = time_integral(hist, t)?;
    Ok((v, u))
}

fn check_history(sys: &MembraneSystem, hist: &SpacetimeField) -> Result<()> {
    if hist.num_components() != sys.num_components() {
        return Err(LabError::ShapeMismatch(format!(
            "history has {} components, base configuration has {}",
            hist.num_components(),
            sys.num_components()
        )));
    }
    Ok(())
}

/// `A v + Q(U, v) + C(U, U, v)` at time `t` with `U = \int_0^t v` from the history.
pub fn modified_rhs(grid: &Grid2D, u0: &FieldBundle, v_hist: &SpacetimeField, t: f64) -> Result<FieldBundle> {
    let sys = MembraneSystem::new(grid, u0);
    check_history(&sys, v_hist)?;
    let (v, u) = snapshot_and_memory(v_hist, t)?;
    Ok(sys.modified_rhs_at(&v, &u))
}

/// Rescaled nonlinearity `F` at time `t` of the history.
pub fn nonlinear_f(sys: &MembraneSystem, w_hist: &SpacetimeField, eps: f64, t: f64) -> Result<FieldBundle> {
    check_history(sys, w_hist)?;
    let (v, u) = snapshot_and_memory(w_hist, t)?;
    Ok(sys.nonlinear_f(&v, &u, eps))
}

pub fn frechet_derivative(
    sys: &MembraneSystem,
    w_hist: &SpacetimeField,
    h_hist: &SpacetimeField,
    eps: f64,
    t: f64,
) -> Result<FieldBundle> {
    check_history(sys, w_hist)?;
    w_hist.check_aligned(h_hist)?;
    let (v, u) = snapshot_and_memory(w_hist, t)?;
    let (h, hh) = snapshot_and_memory(h_hist, t)?;
    Ok(sys.frechet(&v, &u, &h, &hh, eps))
}

pub fn remainder_r(
    sys: &MembraneSystem,
    w_hist: &SpacetimeField,
    h_hist: &SpacetimeField,
    eps: f64,
    t: f64,
) -> Result<FieldBundle> {
    check_history(sys, w_hist)?;
    w_hist.check_aligned(h_hist)?;
    let (v, u) = snapshot_and_memory(w_hist, t)?;
    let (h, hh) = snapshot_and_memory(h_hist, t)?;
    Ok(sys.remainder(&v, &u, &h, &hh, eps))
}

/// Initial data and parameters of the rescaled problem
/// `v_tt = A v / eps + eps^2 F(v)`, `v(0) = v0`, `v_t(0) = v1`, on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct MembraneProblem {
    pub grid: Grid2D,
    pub u0: FieldBundle,
    pub v0: FieldBundle,
    pub v1: FieldBundle,
    pub epsilon: f64,
    pub horizon: f64,
    /// `false` switches `F` off, leaving the linear problem.
    pub nonlinear: bool,
}

/// Sup norms of the constraint `sum {v0^m, u0^m}` and of its time derivative
/// `sum {v1^m, u0^m}` at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compatibility {
    pub constraint: f64,
    pub constraint_rate: f64,
}

impl MembraneProblem {
    pub fn new(
        grid: &Grid2D,
        u0: FieldBundle,
        v0: FieldBundle,
        v1: FieldBundle,
        epsilon: f64,
        horizon: f64,
        tolerance: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(LabError::InvalidArgument(format!("epsilon {epsilon} must lie in (0, 1)")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::InvalidArgument(format!("horizon {horizon} must be positive")));
        }
        u0.check_matches(&v0)?;
        u0.check_matches(&v1)?;
        if let Some(c) = u0.components.first() {
            grid.check(c)?;
        }
        let p = Self { grid: grid.clone(), u0, v0, v1, epsilon, horizon, nonlinear: true };
        let c = p.compatibility();
        let scale = p.v0.max_abs().max(p.v1.max_abs()).max(1.0) * p.u0.max_abs().max(1.0);
        if c.constraint > tolerance * scale || c.constraint_rate > tolerance * scale {
            return Err(LabError::Condition(format!(
                "initial data violate the constraint: {:e} (rate {:e})",
                c.constraint, c.constraint_rate
            )));
        }
        Ok(p)
    }

    pub fn linear(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn compatibility(&self) -> Compatibility {
        Compatibility {
            constraint: constraint_residual(&self.grid, &self.v0, &self.u0).max_abs(),
            constraint_rate: constraint_residual(&self.grid, &self.v1, &self.u0).max_abs(),
        }
    }

    /// Mismatch `v1 - {{u0^m,u0^n},u0^n}` mapped to the unscaled clock, i.e.
    /// how far the data are from solving the undifferentiated equation.
    pub fn acceleration_mismatch(&self, amplitude_rate: f64) -> FieldBundle {
        self.v1.scale(amplitude_rate).sub(&membrane_rhs(&self.grid, &self.u0))
    }

    pub fn system(&self) -> MembraneSystem {
        MembraneSystem::new(&self.grid, &self.u0)
    }

    pub fn num_components(&self) -> usize {
        self.u0.num_components()
    }
}

/// The scalar field `sum_m {v^m, u^m}` along a trajectory given as
/// velocity history plus base configuration.
pub fn constraint_history(grid: &Grid2D, u0: &FieldBundle, v_hist: &SpacetimeField) -> Vec<Field> {
    let mut out = Vec::with_capacity(v_hist.len());
    let mut mem = u0.scale(0.0);
    for i in 0..v_hist.len() {
        if i > 0 {
            mem.axpy(0.5 * v_hist.dt(), v_hist.at(i - 1));
            mem.axpy(0.5 * v_hist.dt(), v_hist.at(i));
        }
        out.push(constraint_residual(grid, v_hist.at(i), &u0.add(&mem)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brackets::poisson_bracket;

    fn clifford(g: &Grid2D, r: f64) -> FieldBundle {
        FieldBundle::new(vec![
            Field::from_fn(g, |x, _| r * x.cos()),
            Field::from_fn(g, |x, _| r * x.sin()),
            Field::from_fn(g, |_, y| r * y.cos()),
            Field::from_fn(g, |_, y| r * y.sin()),
        ])
        .unwrap()
    }

    fn smooth(g: &Grid2D, seed: f64) -> FieldBundle {
        FieldBundle::new(
            (0..4)
                .map(|m| {
                    let k = m as f64 + seed;
                    Field::from_fn(g, move |x, y| {
                        0.3 * (x + k).sin() * (y - 0.5 * k).cos() + 0.2 * (2.0 * y + k * x.cos()).sin()
                    })
                })
                .collect(),
        )
        .unwrap()
    }

    /// Direct nested-bracket evaluation, one bracket call per pair.
    fn naive_nested(g: &Grid2D, x: &FieldBundle, y: &FieldBundle, z: &FieldBundle) -> FieldBundle {
        let m = x.num_components();
        FieldBundle::new(
            (0..m)
                .map(|a| {
                    let mut acc = Field::zeros(g);
                    for b in 0..m {
                        let inner = poisson_bracket(g, &x.components[a], &y.components[b]);
                        acc.axpy(1.0, &poisson_bracket(g, &inner, &z.components[b]));
                    }
                    acc
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn f_terms_match_direct_evaluation() {
        let g = Grid2D::square(16).unwrap();
        let u0 = clifford(&g, 0.4);
        let v = smooth(&g, 0.3);
        let u = smooth(&g, 1.7);
        let eps = 0.2;
        let sys = MembraneSystem::new(&g, &u0);
        let terms = sys.f_terms(&v, &u, eps);
        let expect = [
            naive_nested(&g, &v, &u0, &u),
            naive_nested(&g, &v, &u, &u0),
            naive_nested(&g, &u0, &u, &v).scale(2.0),
            naive_nested(&g, &u, &u0, &v).scale(2.0),
            naive_nested(&g, &v, &u, &u).scale(eps.powi(3)),
            naive_nested(&g, &u, &u, &v).scale(2.0 * eps.powi(3)),
        ];
        for (t, e) in terms.iter().zip(&expect) {
            assert!(t.value.sub(e).max_abs() <= 1e-12 * e.max_abs().max(1e-3), "{}", t.name);
        }
    }

    #[test]
    fn linear_part_of_clifford_direction() {
        let g = Grid2D::square(16).unwrap();
        let r = 0.5;
        let u0 = clifford(&g, r);
        let sys = MembraneSystem::new(&g, &u0);
        // v = u0: {{u0,u0},u0} + 2{{u0,u0},u0} = 3 rhs(u0) = -3 r^2 u0
        let a = sys.linear_part(&u0);
        assert!(a.add(&u0.scale(3.0 * r * r)).max_abs() < 1e-13);
    }

    #[test]
    fn exact_split_reproduces_full_system() {
        let g = Grid2D::square(16).unwrap();
        let u0 = clifford(&g, 0.4);
        let v = smooth(&g, 0.3);
        let u = smooth(&g, 1.1);
        let sys = MembraneSystem::new(&g, &u0);
        let full_u = u0.add(&u);
        let direct = naive_nested(&g, &v, &full_u, &full_u).add(&naive_nested(&g, &full_u, &full_u, &v).scale(2.0));
        let split = sys.modified_rhs_at(&v, &u);
        assert!(split.sub(&direct).max_abs() < 1e-12 * direct.max_abs());
    }

    #[test]
    fn taylor_identity_single_draw() {
        let g = Grid2D::square(16).unwrap();
        let sys = MembraneSystem::new(&g, &clifford(&g, 0.7));
        let (v, u) = (smooth(&g, 0.1), smooth(&g, 0.9));
        let (h, hh) = (smooth(&g, 2.3).scale(0.5), smooth(&g, 3.1).scale(0.4));
        let eps = 0.3;
        let lhs = sys.nonlinear_f(&v.add(&h), &u.add(&hh), eps);
        let rhs = sys
            .nonlinear_f(&v, &u, eps)
            .add(&sys.frechet(&v, &u, &h, &hh, eps))
            .add(&sys.remainder(&v, &u, &h, &hh, eps));
        assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * lhs.max_abs());
    }

    #[test]
    fn f_vanishes_without_memory_or_velocity() {
        let g = Grid2D::square(16).unwrap();
        let sys = MembraneSystem::new(&g, &clifford(&g, 0.5));
        let z = FieldBundle::zeros(&g, 4);
        assert_eq!(sys.nonlinear_f(&z, &z, 0.1).max_abs(), 0.0);
        assert_eq!(sys.frechet(&smooth(&g, 0.2), &smooth(&g, 0.4), &z, &z, 0.1).max_abs(), 0.0);
        assert_eq!(sys.remainder(&smooth(&g, 0.2), &smooth(&g, 0.4), &z, &z, 0.1).max_abs(), 0.0);
    }

    #[test]
    fn modified_rhs_with_zero_history() {
        let g = Grid2D::square(16).unwrap();
        let u0 = clifford(&g, 0.5);
        let zero = SpacetimeField::sample(0.1, 4, |_| FieldBundle::zeros(&g, 4)).unwrap();
        assert_eq!(modified_rhs(&g, &u0, &zero, 0.2).unwrap().max_abs(), 0.0);
        assert!(modified_rhs(&g, &u0, &zero, 0.5).is_err());
    }

    #[test]
    fn problem_rejects_incompatible_data() {
        let g = Grid2D::square(16).unwrap();
        let u0 = clifford(&g, 0.5);
        let bad = smooth(&g, 0.4);
        assert!(MembraneProblem::new(&g, u0.clone(), bad, FieldBundle::zeros(&g, 4), 0.1, 1.0, 1e-10).is_err());
        let ok = MembraneProblem::new(&g, u0.clone(), u0.scale(0.3), u0.scale(-1.0), 0.1, 1.0, 1e-10);
        assert!(ok.is_ok());
        assert!(MembraneProblem::new(&g, u0.clone(), u0.clone(), u0.clone(), 1.5, 1.0, 1e-10).is_err());
    }
}
