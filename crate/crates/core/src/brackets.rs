//! Poisson-bracket algebra on the torus and the membrane equations built from it.
//!
//! `{f, g} = w^{-1/2} eps^{ab} d_a f d_b g`. The Jacobian is formed on the
//! 3/2-padded grid so the bracket of band-limited inputs is exact up to the
//! retained modes, and swapping the operands negates every floating-point
//! operation, which makes antisymmetry bit-exact.

use crate::grid::{epsilon_symbol, Axis, Field, FieldBundle, Grid2D};

pub fn poisson_bracket(grid: &Grid2D, f: &Field, g: &Field) -> Field {
    grid.apply_inv_sqrt_w(grid.jacobian(f, g))
}

/// Cyclic sum `{{f,g},h} + {{g,h},f} + {{h,f},g}`.
pub fn jacobi_residual(grid: &Grid2D, f: &Field, g: &Field, h: &Field) -> Field {
    let a = poisson_bracket(grid, &poisson_bracket(grid, f, g), h);
    let b = poisson_bracket(grid, &poisson_bracket(grid, g, h), f);
    let c = poisson_bracket(grid, &poisson_bracket(grid, h, f), g);
    a.add(&b).add(&c)
}

/// Symmetric 2x2 tensor field `(g11, g12, g22)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub g11: Field,
    pub g12: Field,
    pub g22: Field,
}

impl MetricField {
    pub fn identity(grid: &Grid2D) -> Self {
        Self { g11: Field::constant(grid, 1.0), g12: Field::zeros(grid), g22: Field::constant(grid, 1.0) }
    }

    pub fn component(&self, a: usize, b: usize) -> &Field {
        match (a, b) {
            (0, 0) => &self.g11,
            (1, 1) => &self.g22,
            _ => &self.g12,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { g11: self.g11.scale(c), g12: self.g12.scale(c), g22: self.g22.scale(c) }
    }

    /// Pointwise product with a scalar field.
    pub fn weighted(&self, f: &Field) -> Self {
        Self { g11: self.g11.mul(f), g12: self.g12.mul(f), g22: self.g22.mul(f) }
    }

    /// `eps^{ac} eps^{bd} g_cd`, the cofactor tensor (`g22, -g12, g11`).
    pub fn conjugated(&self) -> Self {
        Self { g11: self.g22.clone(), g12: self.g12.scale(-1.0), g22: self.g11.clone() }
    }

    /// Per-node eigenvalues `(min, max)`.
    pub fn eigenvalues(&self) -> (Field, Field) {
        let mean = self.g11.add(&self.g22).scale(0.5);
        let disc = self.g11.zip_map(&self.g22, |a, b| 0.25 * (a - b) * (a - b));
        let rad = disc.zip_map(&self.g12, |d, c| (d + c * c).sqrt());
        (mean.sub(&rad), mean.add(&rad))
    }

    /// Extreme eigenvalues over the grid `(min over x of lambda_min, max over x of lambda_max)`.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.eigenvalues();
        let min = lo.values().iter().copied().fold(f64::INFINITY, f64::min);
        let max = hi.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    pub fn determinant(&self) -> Field {
        self.g11.mul(&self.g22).sub(&self.g12.mul(&self.g12))
    }
}

/// `gamma_cd = sum_m d_c u^m d_d u^m`, with pointwise products so that the
/// result is positive semi-definite at every node.
pub fn induced_metric(grid: &Grid2D, u: &FieldBundle) -> MetricField {
    let mut g11 = Field::zeros(grid);
    let mut g12 = Field::zeros(grid);
    let mut g22 = Field::zeros(grid);
    for c in &u.components {
        let [d1, d2] = grid.gradient(c);
        g11.axpy(1.0, &d1.mul(&d1));
        g12.axpy(1.0, &d1.mul(&d2));
        g22.axpy(1.0, &d2.mul(&d2));
    }
    MetricField { g11, g12, g22 }
}

/// `{{u^m, u^n}, u^n}` summed over `n`.
pub fn membrane_rhs(grid: &Grid2D, u: &FieldBundle) -> FieldBundle {
    let m = u.num_components();
    let mut inner = vec![vec![None; m]; m];
    for a in 0..m {
        for b in (a + 1)..m {
            let ab = poisson_bracket(grid, &u.components[a], &u.components[b]);
            inner[b][a] = Some(ab.scale(-1.0));
            inner[a][b] = Some(ab);
        }
    }
    let components = (0..m)
        .map(|a| {
            let mut acc = Field::zeros(grid);
            for b in 0..m {
                if let Some(ab) = &inner[a][b] {
                    acc.axpy(1.0, &poisson_bracket(grid, ab, &u.components[b]));
                }
            }
            acc
        })
        .collect();
    FieldBundle { components }
}

/// The same right-hand side expanded in local coordinates:
/// `s^2 eps^{ab} eps^{cd} (gamma_db d_a d_c u^m + d_c u^m d_a d_d u^n d_b u^n)
///  + s (d_a s) eps^{ab} eps^{cd} d_c u^m gamma_db` with `s = w^{-1/2}`.
pub fn membrane_rhs_local(grid: &Grid2D, u: &FieldBundle) -> FieldBundle {
    let sigma = grid.weight().map(|w| 1.0 / w.sqrt());
    let sigma_sq = sigma.mul(&sigma);
    let dsigma = if grid.is_uniform_weight() { None } else { Some(grid.gradient(&sigma)) };
    let first: Vec<[Field; 2]> = u.components.iter().map(|c| grid.gradient(c)).collect();
    let second: Vec<[[Field; 2]; 2]> = first
        .iter()
        .map(|[d1, d2]| {
            let d11 = grid.derivative(d1, Axis::X1);
            let d12 = grid.derivative(d1, Axis::X2);
            let d22 = grid.derivative(d2, Axis::X2);
            [[d11, d12.clone()], [d12, d22]]
        })
        .collect();
    let gamma = induced_metric(grid, u);
    let pairs = [(0usize, 1usize), (1, 0)];
    let components = (0..u.num_components())
        .map(|m| {
            let mut acc = Field::zeros(grid);
            for &(a, b) in &pairs {
                let eab = epsilon_symbol(a, b);
                for &(c, d) in &pairs {
                    let e = eab * epsilon_symbol(c, d);
                    // gamma_db d_a d_c u^m
                    let mut term = gamma.component(d, b).mul(&second[m][a][c]);
                    // d_c u^m sum_n d_a d_d u^n d_b u^n
                    let mut cross = Field::zeros(grid);
                    for n in 0..u.num_components() {
                        cross.axpy(1.0, &second[n][a][d].mul(&first[n][b]));
                    }
                    term.axpy(1.0, &first[m][c].mul(&cross));
                    acc.axpy(e, &term.mul(&sigma_sq));
                    if let Some(ds) = &dsigma {
                        let lot = sigma.mul(&ds[a]).mul(&first[m][c]).mul(gamma.component(d, b));
                        acc.axpy(e, &lot);
                    }
                }
            }
            acc
        })
        .collect();
    FieldBundle { components }
}

/// `sum_m {v^m, u^m}`.
pub fn constraint_residual(grid: &Grid2D, v: &FieldBundle, u: &FieldBundle) -> Field {
    let mut acc = Field::zeros(grid);
    for (vm, um) in v.components.iter().zip(&u.components) {
        acc.axpy(1.0, &poisson_bracket(grid, vm, um));
    }
    acc
}

/// Residuals of the two compatibility conditions on `(u0, v0, v1)`: the
/// constraint `sum_m {v0^m, u0^m}` and `v1 - {{u0^m, u0^n}, u0^n}`.
pub fn initial_data_compatibility(
    grid: &Grid2D,
    u0: &FieldBundle,
    v0: &FieldBundle,
    v1: &FieldBundle,
) -> (Field, FieldBundle) {
    (constraint_residual(grid, v0, u0), v1.sub(&membrane_rhs(grid, u0)))
}

/// The acceleration compatible with `u0`.
pub fn compatible_v1(grid: &Grid2D, u0: &FieldBundle) -> FieldBundle {
    membrane_rhs(grid, u0)
}

/// `\int (sqrt(w)/4) (2 p.p / w + sum_{m,n} {u^m,u^n}^2)`, with the gauge term dropped.
pub fn reduced_hamiltonian(grid: &Grid2D, u: &FieldBundle, p: &FieldBundle) -> f64 {
    let inv_w = grid.weight().map(|w| 1.0 / w);
    let mut density = Field::zeros(grid);
    for pm in &p.components {
        density.axpy(0.5, &pm.mul(pm).mul(&inv_w));
    }
    let m = u.num_components();
    for a in 0..m {
        for b in (a + 1)..m {
            let ab = poisson_bracket(grid, &u.components[a], &u.components[b]);
            // ordered pairs (a,b) and (b,a) contribute equally
            density.axpy(0.5, &ab.mul(&ab));
        }
    }
    grid.integrate(&density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn bundle(cs: Vec<Field>) -> FieldBundle {
        FieldBundle::new(cs).unwrap()
    }

    #[test]
    fn bracket_of_coordinate_modes() {
        let g = Grid2D::square(32).unwrap();
        let f = Field::from_fn(&g, |x, _| x.sin());
        let h = Field::from_fn(&g, |_, y| y.sin());
        let b = poisson_bracket(&g, &f, &h);
        let exact = Field::from_fn(&g, |x, y| x.cos() * y.cos());
        assert!(b.sub(&exact).max_abs() <= 1e-10);
        assert_eq!(poisson_bracket(&g, &f, &f).max_abs(), 0.0);
        assert!(poisson_bracket(&g, &f, &Field::constant(&g, 2.5)).max_abs() < 1e-14);
    }

    #[test]
    fn antisymmetry_is_bit_exact() {
        let g = Grid2D::square(16).unwrap();
        let f = Field::from_fn(&g, |x, y| (x + y.sin()).cos());
        let h = Field::from_fn(&g, |x, y| (2.0 * x).sin() * y.cos() + 0.1 * x.cos());
        let ab = poisson_bracket(&g, &f, &h);
        let ba = poisson_bracket(&g, &h, &f);
        assert_eq!(ab, ba.scale(-1.0));
    }

    #[test]
    fn weighted_bracket_scales_pointwise() {
        let base = Grid2D::square(16).unwrap();
        let w = Field::from_fn(&base, |x, _| 2.0 + x.cos());
        let g = Grid2D::with_weight(16, 16, 2.0 * PI, 2.0 * PI, w.values().to_vec()).unwrap();
        let f = Field::from_fn(&g, |x, _| x.sin());
        let h = Field::from_fn(&g, |_, y| y.sin());
        let b = poisson_bracket(&g, &f, &h);
        let exact = Field::from_fn(&g, |x, y| x.cos() * y.cos() / (2.0 + x.cos()).sqrt());
        assert!(b.sub(&exact).max_abs() < 1e-12);
    }

    #[test]
    fn induced_metric_single_component() {
        let g = Grid2D::square(16).unwrap();
        let u = bundle(vec![Field::from_fn(&g, |x, _| x.sin())]);
        let m = induced_metric(&g, &u);
        assert!(m.g11.sub(&Field::from_fn(&g, |x, _| x.cos().powi(2))).max_abs() < 1e-13);
        assert!(m.g12.max_abs() < 1e-14 && m.g22.max_abs() < 1e-14);
    }

    #[test]
    fn clifford_metric_and_rhs() {
        let g = Grid2D::square(16).unwrap();
        let r = 0.3;
        let u = bundle(vec![
            Field::from_fn(&g, |x, _| r * x.cos()),
            Field::from_fn(&g, |x, _| r * x.sin()),
            Field::from_fn(&g, |_, y| r * y.cos()),
            Field::from_fn(&g, |_, y| r * y.sin()),
        ]);
        let m = induced_metric(&g, &u);
        let (lo, hi) = m.eigen_bounds();
        assert!((lo - r * r).abs() < 1e-13 && (hi - r * r).abs() < 1e-13);
        let rhs = membrane_rhs(&g, &u);
        assert!(rhs.add(&u.scale(r * r)).max_abs() < 1e-13);
        assert!(membrane_rhs_local(&g, &u).sub(&rhs).max_abs() < 1e-13);
    }

    #[test]
    fn rhs_paths_agree_on_two_modes() {
        let g = Grid2D::square(32).unwrap();
        let u = bundle(vec![Field::from_fn(&g, |x, _| x.sin()), Field::from_fn(&g, |_, y| y.sin())]);
        let a = membrane_rhs(&g, &u);
        let b = membrane_rhs_local(&g, &u);
        assert!(a.sub(&b).max_abs() <= 1e-8 * a.max_abs());
        assert!(a.max_abs() > 0.1);
    }

    #[test]
    fn rhs_paths_agree_with_weight() {
        let base = Grid2D::square(32).unwrap();
        let w = Field::from_fn(&base, |x, y| 1.5 + 0.4 * x.cos() * y.sin());
        let g = Grid2D::with_weight(32, 32, 2.0 * PI, 2.0 * PI, w.values().to_vec()).unwrap();
        let u = bundle(vec![
            Field::from_fn(&g, |x, y| x.sin() + 0.3 * y.cos()),
            Field::from_fn(&g, |x, y| y.sin() - 0.2 * x.cos()),
            Field::from_fn(&g, |x, y| 0.5 * (x + y).sin()),
        ]);
        let a = membrane_rhs(&g, &u);
        let b = membrane_rhs_local(&g, &u);
        assert!(a.sub(&b).max_abs() <= 1e-8 * a.max_abs(), "{}", a.sub(&b).max_abs());
    }

    #[test]
    fn hamiltonian_closed_form() {
        let g = Grid2D::square(32).unwrap();
        let u = bundle(vec![Field::from_fn(&g, |x, _| x.sin()), Field::from_fn(&g, |_, y| y.sin())]);
        let zero = FieldBundle::zeros(&g, 2);
        // {u1,u2}^2 and {u2,u1}^2 both count: (1/4) * 2 * pi^2
        assert!((reduced_hamiltonian(&g, &u, &zero) - PI * PI / 2.0).abs() < 1e-12);
        let p = bundle(vec![Field::from_fn(&g, |x, y| x.cos() + y.sin()), Field::constant(&g, 0.5)]);
        let h0 = reduced_hamiltonian(&g, &u, &zero);
        let h1 = reduced_hamiltonian(&g, &u, &p);
        let h2 = reduced_hamiltonian(&g, &u, &p.scale(2.0));
        assert!(((h2 - h0) - 4.0 * (h1 - h0)).abs() < 1e-12 * h2);
    }

    #[test]
    fn compatibility_builder() {
        let g = Grid2D::square(16).unwrap();
        let u0 = bundle(vec![Field::from_fn(&g, |x, y| x.sin() + 0.2 * y.cos()), Field::from_fn(&g, |_, y| y.sin())]);
        let v1 = compatible_v1(&g, &u0);
        let (c, r) = initial_data_compatibility(&g, &u0, &FieldBundle::zeros(&g, 2), &v1);
        assert_eq!(c.max_abs(), 0.0);
        assert_eq!(r.max_abs(), 0.0);
    }
}
