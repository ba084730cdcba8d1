//! Amplitude/time rescaling between the physical problem on `[0, T/sqrt(eps)]`
//! and the unit-time problem, reconstruction of the embedding and the
//! degenerate-metric factorization audit.
//!
//! Physical `v(t) = alpha ṽ(sqrt(eps) t)` with `alpha = eps^{7/2}`, so that the
//! rescaled system reads `ṽ_ss = eps^{-1} A ṽ + eps^2 (Q + eps^3 C)`.

use serde::Serialize;

use crate::brackets::{induced_metric, MetricField};
use crate::error::{LabError, Result};
use crate::grid::{time_integral, Axis, Field, FieldBundle, Grid2D, SpacetimeField};

pub fn amplitude(eps: f64) -> f64 {
    eps.powf(3.5)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(LabError::InvalidArgument(format!("epsilon {eps} outside (0, 1]")))
    }
}

/// Physical history to the rescaled clock: `ṽ(s) = v(s / sqrt(eps)) / alpha`.
/// The time grid is stretched, so no interpolation is involved.
pub fn rescale_forward(v: &SpacetimeField, eps: f64) -> Result<SpacetimeField> {
    check_eps(eps)?;
    let r = eps.sqrt();
    let a = amplitude(eps);
    SpacetimeField::new(v.t0() * r, v.dt() * r, v.snapshots().iter().map(|s| s.scale(1.0 / a)).collect())
}

/// Rescaled history to the physical clock: `v(t) = alpha ṽ(sqrt(eps) t)`.
pub fn rescale_backward(v: &SpacetimeField, eps: f64) -> Result<SpacetimeField> {
    check_eps(eps)?;
    let r = eps.sqrt();
    let a = amplitude(eps);
    SpacetimeField::new(v.t0() / r, v.dt() / r, v.snapshots().iter().map(|s| s.scale(a)).collect())
}

/// Physical Cauchy data `(v(0), v_t(0))` of a rescaled pair.
pub fn data_backward(v0: &FieldBundle, v1: &FieldBundle, eps: f64) -> (FieldBundle, FieldBundle) {
    let a = amplitude(eps);
    (v0.scale(a), v1.scale(a * eps.sqrt()))
}

pub fn data_forward(v0: &FieldBundle, v1: &FieldBundle, eps: f64) -> (FieldBundle, FieldBundle) {
    let a = amplitude(eps);
    (v0.scale(1.0 / a), v1.scale(1.0 / (a * eps.sqrt())))
}

/// `W = v - v0 - v1 t`.
pub fn to_w(v: &SpacetimeField, v0: &FieldBundle, v1: &FieldBundle) -> Result<SpacetimeField> {
    v0.check_matches(v1)?;
    v.at(0).check_matches(v0)?;
    Ok(v.map_indexed(|_, t, s| {
        let mut w = s.sub(v0);
        w.axpy(-t, v1);
        w
    }))
}

pub fn from_w(w: &SpacetimeField, v0: &FieldBundle, v1: &FieldBundle) -> Result<SpacetimeField> {
    v0.check_matches(v1)?;
    w.at(0).check_matches(v0)?;
    Ok(w.map_indexed(|_, t, s| {
        let mut v = s.add(v0);
        v.axpy(t, v1);
        v
    }))
}

/// `u(t) = u0 + \int_0^t v`.
pub fn reconstruct_u(u0: &FieldBundle, v: &SpacetimeField, t: f64) -> Result<FieldBundle> {
    v.at(0).check_matches(u0)?;
    Ok(u0.add(&time_integral(v, t)?))
}

/// `u0 + \int_0^{t_i} v` at every stored time.
pub fn reconstruct_history(u0: &FieldBundle, v: &SpacetimeField) -> Result<SpacetimeField> {
    v.at(0).check_matches(u0)?;
    let snaps = crate::grid::cumulative_integrals(v).into_iter().map(|i| u0.add(&i)).collect();
    SpacetimeField::new(v.t0(), v.dt(), snaps)
}

/// `gamma(u0)_cd = gamma0 gamma_cd` with the derived constants.
#[derive(Debug, Clone, Serialize)]
pub struct FactorizationBounds {
    /// smallest `c0` with `|d_a gamma0| <= c0 gamma0`
    pub c0: f64,
    pub gamma0_min: f64,
    pub gamma0_max: f64,
    /// ellipticity bounds of `gamma_cd`
    pub gamma1: f64,
    pub gamma2: f64,
    /// eigenvalue bounds of `d_a gamma_cd` over both directions
    pub gamma3: f64,
    pub gamma4: f64,
    /// smallest `c2` with `|d_a(gamma(u0)_cd) xi_c xi_d| <= c2 gamma0 |xi|^2`
    pub levi_c2: f64,
    /// `max |gamma(u0) - gamma0 gamma|` relative to `max |gamma(u0)|`
    pub residual: f64,
    pub heuristic: bool,
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub gamma0: Field,
    pub gamma_cd: MetricField,
    pub bounds: FactorizationBounds,
}

fn max_abs_eigen(m: &MetricField) -> Field {
    let (lo, hi) = m.eigenvalues();
    lo.zip_map(&hi, |a, b| a.abs().max(b.abs()))
}

/// Ratio bound `max |num| / den` where `den >= 0`; infinite if `num` is
/// nonzero where `den` vanishes.
fn ratio_bound(num: &Field, den: &Field, tol: f64) -> f64 {
    let mut c: f64 = 0.0;
    for (n, d) in num.values().iter().zip(den.values()) {
        if n.abs() <= tol {
            continue;
        }
        if *d <= 0.0 {
            return f64::INFINITY;
        }
        c = c.max(n.abs() / d);
    }
    c
}

/// Factorizes `gamma(u0)`. With `gamma0` supplied, `gamma_cd = gamma(u0) / gamma0`
/// where `gamma0 > 0` and the identity elsewhere. Without it, the heuristic
/// `gamma0 = min(1, lambda_min(gamma(u0)) / lambda_ref)` is used.
pub fn factorization_check(
    grid: &Grid2D,
    u0: &FieldBundle,
    gamma0: Option<&Field>,
    lambda_ref: f64,
) -> Result<Factorization> {
    let g = induced_metric(grid, u0);
    let heuristic = gamma0.is_none();
    let gamma0 = match gamma0 {
        Some(f) => {
            grid.check(f)?;
            f.clone()
        }
        None => {
            if !(lambda_ref > 0.0) {
                return Err(LabError::InvalidArgument("reference eigenvalue must be positive".into()));
            }
            g.eigenvalues().0.map(|l| (l / lambda_ref).clamp(0.0, 1.0))
        }
    };
    let bad: Vec<usize> = gamma0.values().iter().enumerate().filter(|(_, x)| !(**x >= 0.0 && **x <= 1.0)).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        let pts: Vec<String> = bad.iter().take(5).map(|i| format!("({}, {})", i / grid.n2(), i % grid.n2())).collect();
        return Err(LabError::Condition(format!("gamma0 outside [0, 1] at {} nodes, e.g. {}", bad.len(), pts.join(" "))));
    }
    let unit = |f: &Field, id: f64| f.zip_map(&gamma0, move |a, z| if z > 0.0 { a / z } else { id });
    let gamma_cd = MetricField { g11: unit(&g.g11, 1.0), g12: unit(&g.g12, 0.0), g22: unit(&g.g22, 1.0) };
    let scale = g.g11.max_abs().max(g.g12.max_abs()).max(g.g22.max_abs());
    let recon = gamma_cd.weighted(&gamma0);
    let residual = [(&recon.g11, &g.g11), (&recon.g12, &g.g12), (&recon.g22, &g.g22)]
        .iter()
        .map(|(a, b)| a.sub(b).max_abs())
        .fold(0.0, f64::max)
        / scale.max(1e-300);
    let dg = grid.gradient(&gamma0);
    let grad_norm = dg[0].zip_map(&dg[1], |a, b| a.hypot(b));
    let gscale = grad_norm.max_abs();
    let c0 = ratio_bound(&grad_norm, &gamma0, 1e-10 * gscale.max(1e-300).max(gamma0.max_abs() * 1e-8));
    let (gamma1, gamma2) = gamma_cd.eigen_bounds();
    let (mut gamma3, mut gamma4) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut levi = Field::zeros(grid);
    for axis in Axis::BOTH {
        let d = |m: &MetricField| MetricField {
            g11: grid.derivative(&m.g11, axis),
            g12: grid.derivative(&m.g12, axis),
            g22: grid.derivative(&m.g22, axis),
        };
        let (lo, hi) = d(&gamma_cd).eigen_bounds();
        gamma3 = gamma3.min(lo);
        gamma4 = gamma4.max(hi);
        levi = levi.zip_map(&max_abs_eigen(&d(&g)), f64::max);
    }
    let levi_c2 = ratio_bound(&levi, &gamma0, 1e-10 * levi.max_abs().max(scale).max(1e-300));
    let (lo, hi) = (
        gamma0.values().iter().copied().fold(f64::INFINITY, f64::min),
        gamma0.values().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    Ok(Factorization {
        gamma0,
        gamma_cd,
        bounds: FactorizationBounds {
            c0,
            gamma0_min: lo,
            gamma0_max: hi,
            gamma1,
            gamma2,
            gamma3,
            gamma4,
            levi_c2,
            residual,
            heuristic,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clifford(g: &Grid2D, r: f64) -> FieldBundle {
        FieldBundle::new(vec![
            Field::from_fn(g, |x, _| r * x.cos()),
            Field::from_fn(g, |x, _| r * x.sin()),
            Field::from_fn(g, |_, y| r * y.cos()),
            Field::from_fn(g, |_, y| r * y.sin()),
        ])
        .unwrap()
    }

    fn sample(g: &Grid2D) -> SpacetimeField {
        let f = FieldBundle::new(vec![Field::from_fn(g, |x, y| x.sin() * y.cos())]).unwrap();
        SpacetimeField::sample(0.01, 100, |t| f.scale(t.sin())).unwrap()
    }

    #[test]
    fn round_trip_and_identity() {
        let g = Grid2D::square(8).unwrap();
        let v = sample(&g);
        let back = rescale_backward(&rescale_forward(&v, 1e-3).unwrap(), 1e-3).unwrap();
        assert!(back.sub(&v).unwrap().max_abs() <= 1e-8 * v.max_abs());
        assert!((back.dt() - v.dt()).abs() < 1e-15);
        let same = rescale_forward(&v, 1.0).unwrap();
        assert_eq!(same.sub(&v).unwrap().max_abs(), 0.0);
        assert!(rescale_forward(&v, 0.0).is_err());
    }

    #[test]
    fn w_shift() {
        let g = Grid2D::square(8).unwrap();
        let v0 = FieldBundle::new(vec![Field::from_fn(&g, |x, _| x.cos())]).unwrap();
        let v1 = FieldBundle::new(vec![Field::from_fn(&g, |_, y| y.sin())]).unwrap();
        let v = SpacetimeField::sample(0.1, 10, |t| {
            let mut s = v0.clone();
            s.axpy(t, &v1);
            s
        })
        .unwrap();
        let w = to_w(&v, &v0, &v1).unwrap();
        assert!(w.max_abs() < 1e-15);
        let r = sample(&g);
        let z = r.at(0).scale(0.0);
        assert_eq!(to_w(&r, &z, &z).unwrap().sub(&r).unwrap().max_abs(), 0.0);
        let back = from_w(&to_w(&r, &v0, &v1).unwrap(), &v0, &v1).unwrap();
        assert!(back.sub(&r).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn reconstruction() {
        let g = Grid2D::square(8).unwrap();
        let u0 = clifford(&g, 1.0);
        let c = u0.scale(0.5);
        let v = SpacetimeField::sample(0.1, 10, |_| c.clone()).unwrap();
        let u = reconstruct_u(&u0, &v, 0.7).unwrap();
        assert!(u.sub(&u0.add(&c.scale(0.7))).max_abs() < 1e-14);
        assert_eq!(reconstruct_u(&u0, &v, 0.0).unwrap().sub(&u0).max_abs(), 0.0);
        assert!(reconstruct_u(&u0, &v, 2.0).is_err());
    }

    #[test]
    fn reconstruction_difference_matches_v() {
        let g = Grid2D::square(8).unwrap();
        let v = sample(&g);
        let u0 = v.at(0).scale(0.0);
        let u = reconstruct_history(&u0, &v).unwrap();
        let mut worst: f64 = 0.0;
        for i in 1..u.len() - 1 {
            let (d1, _) = u.time_derivatives(i);
            worst = worst.max(d1.sub(v.at(i)).max_abs());
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn factorization_unit_gamma0() {
        let g = Grid2D::square(16).unwrap();
        let u0 = clifford(&g, 0.5);
        let f = factorization_check(&g, &u0, Some(&Field::constant(&g, 1.0)), 1.0).unwrap();
        assert_eq!(f.bounds.c0, 0.0);
        assert!((f.bounds.gamma1 - 0.25).abs() < 1e-12 && (f.bounds.gamma2 - 0.25).abs() < 1e-12);
        assert!(f.bounds.residual < 1e-14);
        // homogeneity: the heuristic picks up the r^2 scale
        let h = factorization_check(&g, &u0, None, 1.0).unwrap();
        assert!(h.gamma0.values().iter().all(|x| (x - 0.25).abs() < 1e-12));
        assert!(h.bounds.heuristic);
    }

    #[test]
    fn factorization_recovers_c0() {
        // gamma(u0) = I split as gamma0 * (I / gamma0)
        let g = Grid2D::square(32).unwrap();
        let gamma0 = Field::from_fn(&g, |x, _| (0.5 + 0.25 * x.sin()).exp() / 2f64.exp());
        let u0 = clifford(&g, 1.0);
        let f = factorization_check(&g, &u0, Some(&gamma0), 1.0).unwrap();
        // |d gamma0| / gamma0 = 0.25 |cos x1|
        assert!((f.bounds.c0 - 0.25).abs() < 0.05 * 0.25);
        assert!(f.bounds.levi_c2.is_finite());
    }

    #[test]
    fn degenerate_metric_bounds() {
        let g = Grid2D::square(16).unwrap();
        let u0 = FieldBundle::new(vec![Field::from_fn(&g, |x, _| x.sin()), Field::from_fn(&g, |_, y| y.sin())]).unwrap();
        let f = factorization_check(&g, &u0, None, 1.0).unwrap();
        assert!(f.bounds.gamma0_min < 1e-12);
        let zero = FieldBundle::new(vec![Field::constant(&g, 0.3)]).unwrap();
        let f = factorization_check(&g, &zero, None, 1.0).unwrap();
        assert_eq!(f.bounds.c0, 0.0);
        assert_eq!(f.bounds.gamma0_max, 0.0);
        assert!(factorization_check(&g, &zero, Some(&Field::constant(&g, 2.0)), 1.0).is_err());
    }
}
