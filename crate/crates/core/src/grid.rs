//! Periodic 2-torus discretization: fields, spectral calculus, Sobolev and
//! spacetime norms, the dyadic low-pass filter and memory-integral quadrature.
//!
//! Fields are stored row-major with the first axis (`x1`) as the slow index.
//! Spectral coefficients are normalized on the forward transform, so the
//! zero mode of a field is its grid mean.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X1,
    X2,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::X1, Axis::X2];

    pub fn index(self) -> usize {
        match self {
            Axis::X1 => 0,
            Axis::X2 => 1,
        }
    }
}

/// The antisymmetric symbol with `eps(0, 1) = 1`.
pub fn epsilon_symbol(a: usize, b: usize) -> f64 {
    match (a, b) {
        (0, 1) => 1.0,
        (1, 0) => -1.0,
        _ => 0.0,
    }
}

/// Complex 2D FFT on an `n1 x n2` row-major buffer.
struct Fft2 {
    n1: usize,
    n2: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(planner: &mut FftPlanner<f64>, n1: usize, n2: usize) -> Self {
        Self {
            n1,
            n2,
            row_fwd: planner.plan_fft_forward(n2),
            row_inv: planner.plan_fft_inverse(n2),
            col_fwd: planner.plan_fft_forward(n1),
            col_inv: planner.plan_fft_inverse(n1),
        }
    }

    fn run(&self, buf: &mut [Complex64], forward: bool) {
        let (n1, n2) = (self.n1, self.n2);
        let (row, col) = if forward { (&self.row_fwd, &self.col_fwd) } else { (&self.row_inv, &self.col_inv) };
        SCRATCH.with(|cell| {
            let (t, scratch) = &mut *cell.borrow_mut();
            let need = row.get_inplace_scratch_len().max(col.get_inplace_scratch_len());
            scratch.resize(need, Complex64::new(0.0, 0.0));
            row.process_with_scratch(buf, &mut scratch[..row.get_inplace_scratch_len()]);
            t.resize(n1 * n2, Complex64::new(0.0, 0.0));
            for i in 0..n1 {
                for j in 0..n2 {
                    t[j * n1 + i] = buf[i * n2 + j];
                }
            }
            col.process_with_scratch(&mut t[..n1 * n2], &mut scratch[..col.get_inplace_scratch_len()]);
            for i in 0..n1 {
                for j in 0..n2 {
                    buf[i * n2 + j] = t[j * n1 + i];
                }
            }
        });
        if forward {
            let s = 1.0 / (n1 * n2) as f64;
            buf.iter_mut().for_each(|c| *c *= s);
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<Complex64>, Vec<Complex64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

struct GridInner {
    n1: usize,
    n2: usize,
    l1: f64,
    l2: f64,
    w: Option<Vec<f64>>,
    inv_sqrt_w: Option<Vec<f64>>,
    fft: Fft2,
    fft_pad: Fft2,
    /// signed mode indices per axis
    idx1: Vec<i64>,
    idx2: Vec<i64>,
    /// physical wavenumbers per axis
    k1: Vec<f64>,
    k2: Vec<f64>,
}

/// Periodic `n1 x n2` grid on the torus `[0, L1) x [0, L2)` with volume form `sqrt(w)`.
///
/// Cloning is cheap; clones share FFT plans.
#[derive(Clone)]
pub struct Grid2D {
    inner: Arc<GridInner>,
}

impl fmt::Debug for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid2D")
            .field("n1", &self.inner.n1)
            .field("n2", &self.inner.n2)
            .field("l1", &self.inner.l1)
            .field("l2", &self.inner.l2)
            .field("uniform_w", &self.inner.w.is_none())
            .finish()
    }
}

fn signed_indices(n: usize) -> Vec<i64> {
    (0..n)
        .map(|i| if i < n / 2 { i as i64 } else { i as i64 - n as i64 })
        .collect()
}

impl Grid2D {
    /// Flat torus with `w == 1`.
    pub fn new(n1: usize, n2: usize, l1: f64, l2: f64) -> Result<Self> {
        Self::build(n1, n2, l1, l2, None)
    }

    /// The `2*pi`-periodic square torus.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, 2.0 * PI, 2.0 * PI)
    }

    /// Torus with a non-uniform positive weight `w`.
    pub fn with_weight(n1: usize, n2: usize, l1: f64, l2: f64, w: Vec<f64>) -> Result<Self> {
        if w.len() != n1 * n2 {
            return Err(LabError::InvalidGrid(format!(
                "weight has {} entries, expected {}",
                w.len(),
                n1 * n2
            )));
        }
        if let Some(i) = w.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(LabError::InvalidGrid(format!("w must be positive, w[{i}] = {}", w[i])));
        }
        Self::build(n1, n2, l1, l2, Some(w))
    }

    fn build(n1: usize, n2: usize, l1: f64, l2: f64, w: Option<Vec<f64>>) -> Result<Self> {
        for n in [n1, n2] {
            if n < 4 || !n.is_power_of_two() {
                return Err(LabError::InvalidGrid(format!("{n} is not a power of two >= 4")));
            }
        }
        if !(l1 > 0.0 && l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
            return Err(LabError::InvalidGrid("periods must be positive".into()));
        }
        let mut planner = FftPlanner::new();
        let fft = Fft2::new(&mut planner, n1, n2);
        let fft_pad = Fft2::new(&mut planner, 3 * n1 / 2, 3 * n2 / 2);
        let idx1 = signed_indices(n1);
        let idx2 = signed_indices(n2);
        let k1 = idx1.iter().map(|&k| 2.0 * PI * k as f64 / l1).collect();
        let k2 = idx2.iter().map(|&k| 2.0 * PI * k as f64 / l2).collect();
        let inv_sqrt_w = w.as_ref().map(|w| w.iter().map(|x| 1.0 / x.sqrt()).collect());
        Ok(Self {
            inner: Arc::new(GridInner {
                n1,
                n2,
                l1,
                l2,
                w,
                inv_sqrt_w,
                fft,
                fft_pad,
                idx1,
                idx2,
                k1,
                k2,
            }),
        })
    }

    pub fn n1(&self) -> usize {
        self.inner.n1
    }

    pub fn n2(&self) -> usize {
        self.inner.n2
    }

    pub fn len(&self) -> usize {
        self.inner.n1 * self.inner.n2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lengths(&self) -> (f64, f64) {
        (self.inner.l1, self.inner.l2)
    }

    pub fn area(&self) -> f64 {
        self.inner.l1 * self.inner.l2
    }

    pub fn cell_area(&self) -> f64 {
        self.area() / self.len() as f64
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.inner.l1 / self.inner.n1 as f64, self.inner.l2 / self.inner.n2 as f64)
    }

    /// Largest resolved physical wavenumber magnitude (Euclidean).
    pub fn max_wavenumber(&self) -> f64 {
        let k1 = PI * self.inner.n1 as f64 / self.inner.l1;
        let k2 = PI * self.inner.n2 as f64 / self.inner.l2;
        (k1 * k1 + k2 * k2).sqrt()
    }

    /// Nyquist index along the coarser axis; `low_pass` with `N >= nyquist()` is the identity.
    pub fn nyquist(&self) -> usize {
        self.inner.n1.max(self.inner.n2) / 2
    }

    pub fn is_uniform_weight(&self) -> bool {
        self.inner.w.is_none()
    }

    pub fn weight(&self) -> Field {
        match &self.inner.w {
            Some(w) => Field::raw(self.n1(), self.n2(), w.clone()),
            None => Field::constant(self, 1.0),
        }
    }

    pub fn coords(&self, i1: usize, i2: usize) -> (f64, f64) {
        let (d1, d2) = self.spacing();
        (i1 as f64 * d1, i2 as f64 * d2)
    }

    pub fn same_shape(&self, f: &Field) -> bool {
        f.n1 == self.n1() && f.n2 == self.n2()
    }

    pub fn check(&self, f: &Field) -> Result<()> {
        if self.same_shape(f) {
            Ok(())
        } else {
            Err(LabError::ShapeMismatch(format!(
                "field is {}x{}, grid is {}x{}",
                f.n1,
                f.n2,
                self.n1(),
                self.n2()
            )))
        }
    }

    pub fn compatible(&self, other: &Grid2D) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.n1() == other.n1()
                && self.n2() == other.n2()
                && self.lengths() == other.lengths()
                && self.inner.w == other.inner.w)
    }

    // ---- spectral transforms ----

    pub fn spectrum(&self, f: &Field) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.inner.fft.run(&mut buf, true);
        buf
    }

    pub fn from_spectrum(&self, mut spec: Vec<Complex64>) -> Field {
        self.inner.fft.run(&mut spec, false);
        Field::raw(self.n1(), self.n2(), spec.into_iter().map(|c| c.re).collect())
    }

    fn wavenumber(&self, axis: Axis, i1: usize, i2: usize) -> (f64, bool) {
        match axis {
            Axis::X1 => (self.inner.k1[i1], i1 == self.inner.n1 / 2),
            Axis::X2 => (self.inner.k2[i2], i2 == self.inner.n2 / 2),
        }
    }

    fn differentiate_spectrum(&self, spec: &[Complex64], axis: Axis) -> Vec<Complex64> {
        let n2 = self.n2();
        let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
        for i1 in 0..self.n1() {
            for i2 in 0..n2 {
                let (k, nyq) = self.wavenumber(axis, i1, i2);
                if !nyq {
                    out[i1 * n2 + i2] = spec[i1 * n2 + i2] * Complex64::new(0.0, k);
                }
            }
        }
        out
    }

    /// Spectral partial derivative along `axis`; the Nyquist mode is dropped.
    pub fn derivative(&self, f: &Field, axis: Axis) -> Field {
        let spec = self.spectrum(f);
        self.from_spectrum(self.differentiate_spectrum(&spec, axis))
    }

    pub fn gradient(&self, f: &Field) -> [Field; 2] {
        let spec = self.spectrum(f);
        [
            self.from_spectrum(self.differentiate_spectrum(&spec, Axis::X1)),
            self.from_spectrum(self.differentiate_spectrum(&spec, Axis::X2)),
        ]
    }

    /// Zero-pads a spectrum onto the 3/2 grid and returns padded physical values.
    fn pad(&self, spec: &[Complex64]) -> Vec<Complex64> {
        let (n1, n2) = (self.n1(), self.n2());
        let (m1, m2) = (3 * n1 / 2, 3 * n2 / 2);
        let mut out = vec![Complex64::new(0.0, 0.0); m1 * m2];
        // the Nyquist row and column are split evenly between +n/2 and -n/2
        let split = |k: i64, nyq: bool, m: usize| -> ([(usize, f64); 2], usize) {
            let w = |k: i64| k.rem_euclid(m as i64) as usize;
            if nyq {
                ([(w(k), 0.5), (w(-k), 0.5)], 2)
            } else {
                ([(w(k), 1.0), (0, 0.0)], 1)
            }
        };
        let cols: Vec<_> = (0..n2).map(|i2| split(self.inner.idx2[i2], i2 == n2 / 2, m2)).collect();
        for i1 in 0..n1 {
            let (rows, nr) = split(self.inner.idx1[i1], i1 == n1 / 2, m1);
            for (i2, (cs, nc)) in cols.iter().enumerate() {
                let c = spec[i1 * n2 + i2];
                for &(p1, wr) in &rows[..nr] {
                    for &(p2, wq) in &cs[..*nc] {
                        out[p1 * m2 + p2] += c * (wr * wq);
                    }
                }
            }
        }
        self.inner.fft_pad.run(&mut out, false);
        out
    }

    /// Transforms padded physical values back and truncates to the base grid spectrum.
    fn unpad(&self, mut padded: Vec<Complex64>) -> Vec<Complex64> {
        let (n1, n2) = (self.n1(), self.n2());
        let (m1, m2) = (3 * n1 / 2, 3 * n2 / 2);
        self.inner.fft_pad.run(&mut padded, true);
        let mut spec = vec![Complex64::new(0.0, 0.0); n1 * n2];
        for p1 in 0..m1 {
            let k1 = if p1 <= m1 / 2 { p1 as i64 } else { p1 as i64 - m1 as i64 };
            if k1.abs() > n1 as i64 / 2 {
                continue;
            }
            for p2 in 0..m2 {
                let k2 = if p2 <= m2 / 2 { p2 as i64 } else { p2 as i64 - m2 as i64 };
                if k2.abs() > n2 as i64 / 2 {
                    continue;
                }
                let i1 = k1.rem_euclid(n1 as i64) as usize;
                let i2 = k2.rem_euclid(n2 as i64) as usize;
                spec[i1 * n2 + i2] += padded[p1 * m2 + p2];
            }
        }
        spec
    }

    /// Product of two fields de-aliased with the 3/2 rule.
    pub fn product(&self, f: &Field, g: &Field) -> Field {
        let pf = self.pad(&self.spectrum(f));
        let pg = self.pad(&self.spectrum(g));
        let prod: Vec<Complex64> = pf.iter().zip(&pg).map(|(a, b)| a * b).collect();
        self.from_spectrum(self.unpad(prod))
    }

    /// De-aliased `eps^{ab} d_a f d_b g` (no volume factor).
    pub(crate) fn jacobian(&self, f: &Field, g: &Field) -> Field {
        let a = self.padded_gradient(f);
        let b = self.padded_gradient(g);
        let mut acc = vec![0.0; a.d1.len()];
        a.jacobian_into(&b, 1.0, &mut acc);
        self.from_spectrum(self.unpad_real(&acc))
    }

    /// Both first derivatives on the padded grid. They are packed as the real
    /// and imaginary parts of a single inverse transform.
    pub fn padded_gradient(&self, f: &Field) -> PaddedGrad {
        self.padded_gradient_spec(&self.spectrum(f))
    }

    fn padded_gradient_spec(&self, spec: &[Complex64]) -> PaddedGrad {
        let s1 = self.differentiate_spectrum(spec, Axis::X1);
        let s2 = self.differentiate_spectrum(spec, Axis::X2);
        let packed: Vec<Complex64> =
            s1.iter().zip(&s2).map(|(a, b)| a + Complex64::new(0.0, 1.0) * b).collect();
        let phys = self.pad(&packed);
        PaddedGrad {
            d1: phys.iter().map(|c| c.re).collect(),
            d2: phys.iter().map(|c| c.im).collect(),
        }
    }

    fn unpad_real(&self, acc: &[f64]) -> Vec<Complex64> {
        self.unpad(acc.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    /// Turns a padded Jacobian accumulator into the bracket field `w^{-1/2} J`.
    pub fn finish_bracket(&self, acc: &[f64]) -> Field {
        self.apply_inv_sqrt_w(self.from_spectrum(self.unpad_real(acc)))
    }

    /// Padded gradient of the bracket `w^{-1/2} J` held in a padded accumulator,
    /// without materializing the bracket when `w == 1`.
    pub fn bracket_gradient(&self, acc: &[f64]) -> PaddedGrad {
        if self.is_uniform_weight() {
            self.padded_gradient_spec(&self.unpad_real(acc))
        } else {
            self.padded_gradient(&self.finish_bracket(acc))
        }
    }

    pub fn padded_len(&self) -> usize {
        9 * self.len() / 4
    }

    /// Multiplies by `w^{-1/2}` pointwise (identity when `w == 1`).
    pub fn apply_inv_sqrt_w(&self, f: Field) -> Field {
        match &self.inner.inv_sqrt_w {
            None => f,
            Some(s) => {
                let values = f.values.iter().zip(s).map(|(a, b)| a * b).collect();
                Field::raw(f.n1, f.n2, values)
            }
        }
    }

    // ---- quadrature and norms ----

    /// `\int_M f sqrt(w)` by the (spectrally exact) grid rule.
    pub fn integrate(&self, f: &Field) -> f64 {
        let da = self.cell_area();
        match &self.inner.w {
            None => f.values.iter().sum::<f64>() * da,
            Some(w) => f.values.iter().zip(w).map(|(a, b)| a * b.sqrt()).sum::<f64>() * da,
        }
    }

    pub fn l2_norm(&self, f: &Field) -> f64 {
        self.integrate(&f.map(|x| x * x)).max(0.0).sqrt()
    }

    fn sobolev_sq_unchecked(&self, f: &Field, s: f64) -> f64 {
        let g = match &self.inner.w {
            None => None,
            Some(w) => Some(Field::raw(
                f.n1,
                f.n2,
                f.values.iter().zip(w).map(|(a, b)| a * b.powf(0.25)).collect(),
            )),
        };
        let spec = self.spectrum(g.as_ref().unwrap_or(f));
        let n2 = self.n2();
        let mut acc = 0.0;
        for i1 in 0..self.n1() {
            let k1 = self.inner.k1[i1];
            for i2 in 0..n2 {
                let k2 = self.inner.k2[i2];
                let weight = if s == 0.0 { 1.0 } else { (1.0 + k1 * k1 + k2 * k2).powf(s) };
                acc += weight * spec[i1 * n2 + i2].norm_sqr();
            }
        }
        acc * self.area()
    }

    /// Fourier Sobolev norm `(A sum_k (1+|k|^2)^s |f_k|^2)^{1/2}`, equal to the
    /// `sqrt(w)`-weighted L2 norm at `s = 0`.
    pub fn sobolev_norm(&self, f: &Field, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(LabError::InvalidArgument(format!("Sobolev index {s} must be >= 0")));
        }
        self.check(f)?;
        Ok(self.sobolev_sq_unchecked(f, s).sqrt())
    }

    pub fn bundle_sobolev_norm(&self, u: &FieldBundle, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(LabError::InvalidArgument(format!("Sobolev index {s} must be >= 0")));
        }
        Ok(u.components.iter().map(|f| self.sobolev_sq_unchecked(f, s)).sum::<f64>().sqrt())
    }

    /// Sharp Fourier cutoff keeping modes with `max(|k1|, |k2|) <= n` (integer mode indices).
    pub fn low_pass(&self, f: &Field, n: usize) -> Field {
        if n >= self.nyquist() {
            return f.clone();
        }
        let mut spec = self.spectrum(f);
        let n2 = self.n2();
        for i1 in 0..self.n1() {
            for i2 in 0..n2 {
                let k = self.inner.idx1[i1].abs().max(self.inner.idx2[i2].abs());
                if k as usize > n {
                    spec[i1 * n2 + i2] = Complex64::new(0.0, 0.0);
                }
            }
        }
        self.from_spectrum(spec)
    }

    pub fn low_pass_bundle(&self, u: &FieldBundle, n: usize) -> FieldBundle {
        u.map(|f| self.low_pass(f, n))
    }
}

/// First derivatives of a field sampled on the 3/2-padded grid.
#[derive(Debug, Clone)]
pub struct PaddedGrad {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl PaddedGrad {
    /// `acc += coef * (d1 self * d2 other - d2 self * d1 other)`.
    pub fn jacobian_into(&self, other: &PaddedGrad, coef: f64, acc: &mut [f64]) {
        for i in 0..acc.len() {
            acc[i] += coef * (self.d1[i] * other.d2[i] - self.d2[i] * other.d1[i]);
        }
    }

    pub fn negated(&self) -> PaddedGrad {
        PaddedGrad {
            d1: self.d1.iter().map(|x| -x).collect(),
            d2: self.d2.iter().map(|x| -x).collect(),
        }
    }
}

/// Real grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n1: usize,
    n2: usize,
    values: Vec<f64>,
}

impl Field {
    pub(crate) fn raw(n1: usize, n2: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n1 * n2);
        Self { n1, n2, values }
    }

    /// Builds a field from external data, rejecting NaN and infinities.
    pub fn from_values(grid: &Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.n1(),
                grid.n2()
            )));
        }
        if let Some(index) = values.iter().position(|x| !x.is_finite()) {
            return Err(LabError::NonFinite { index });
        }
        Ok(Self::raw(grid.n1(), grid.n2(), values))
    }

    pub fn zeros(grid: &Grid2D) -> Self {
        Self::raw(grid.n1(), grid.n2(), vec![0.0; grid.len()])
    }

    pub fn constant(grid: &Grid2D, c: f64) -> Self {
        Self::raw(grid.n1(), grid.n2(), vec![c; grid.len()])
    }

    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i1 in 0..grid.n1() {
            for i2 in 0..grid.n2() {
                let (x1, x2) = grid.coords(i1, i2);
                values.push(f(x1, x2));
            }
        }
        Self::raw(grid.n1(), grid.n2(), values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn get(&self, i1: usize, i2: usize) -> f64 {
        self.values[i1 * self.n2 + i2]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Self::raw(self.n1, self.n2, self.values.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(self.shape(), other.shape());
        Self::raw(
            self.n1,
            self.n2,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a - b)
    }

    /// Pointwise (aliased) product.
    pub fn mul(&self, other: &Field) -> Field {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Field {
        self.map(|x| c * x)
    }

    pub fn axpy(&mut self, a: f64, x: &Field) {
        debug_assert_eq!(self.shape(), x.shape());
        self.values.iter_mut().zip(&x.values).for_each(|(y, &xv)| *y += a * xv);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// The transverse components of a map, or of any vector-valued quantity on M.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBundle {
    pub components: Vec<Field>,
}

impl FieldBundle {
    pub fn new(components: Vec<Field>) -> Result<Self> {
        if let Some(first) = components.first() {
            if components.iter().any(|c| c.shape() != first.shape()) {
                return Err(LabError::ShapeMismatch("bundle components differ in shape".into()));
            }
        }
        Ok(Self { components })
    }

    pub fn zeros(grid: &Grid2D, m: usize) -> Self {
        Self { components: (0..m).map(|_| Field::zeros(grid)).collect() }
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn map(&self, f: impl Fn(&Field) -> Field) -> FieldBundle {
        FieldBundle { components: self.components.iter().map(f).collect() }
    }

    pub fn zip_map(&self, other: &FieldBundle, f: impl Fn(&Field, &Field) -> Field) -> FieldBundle {
        debug_assert_eq!(self.num_components(), other.num_components());
        FieldBundle {
            components: self.components.iter().zip(&other.components).map(|(a, b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &FieldBundle) -> FieldBundle {
        self.zip_map(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &FieldBundle) -> FieldBundle {
        self.zip_map(other, |a, b| a.sub(b))
    }

    pub fn scale(&self, c: f64) -> FieldBundle {
        self.map(|f| f.scale(c))
    }

    pub fn axpy(&mut self, a: f64, x: &FieldBundle) {
        for (y, xc) in self.components.iter_mut().zip(&x.components) {
            y.axpy(a, xc);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.components.iter().fold(0.0, |m, f| m.max(f.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(Field::is_finite)
    }

    pub fn check_matches(&self, other: &FieldBundle) -> Result<()> {
        if self.num_components() != other.num_components() {
            return Err(LabError::ShapeMismatch(format!(
                "bundles have {} and {} components",
                self.num_components(),
                other.num_components()
            )));
        }
        if let (Some(a), Some(b)) = (self.components.first(), other.components.first()) {
            if a.shape() != b.shape() {
                return Err(LabError::ShapeMismatch("bundles live on different grids".into()));
            }
        }
        Ok(())
    }
}

/// Grid-quadrature L2 norm of a bundle.
pub fn bundle_l2(grid: &Grid2D, u: &FieldBundle) -> f64 {
    u.components.iter().map(|f| grid.l2_norm(f).powi(2)).sum::<f64>().sqrt()
}

/// Time-ordered snapshots at uniform spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacetimeField {
    t0: f64,
    dt: f64,
    snapshots: Vec<FieldBundle>,
}

impl SpacetimeField {
    pub fn new(t0: f64, dt: f64, snapshots: Vec<FieldBundle>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LabError::InvalidArgument(format!("time step {dt} must be positive")));
        }
        if snapshots.is_empty() {
            return Err(LabError::InvalidArgument("empty history".into()));
        }
        for s in &snapshots[1..] {
            s.check_matches(&snapshots[0])?;
        }
        Ok(Self { t0, dt, snapshots })
    }

    /// Samples `f(t)` at `steps + 1` uniformly spaced times starting at 0.
    pub fn sample(dt: f64, steps: usize, f: impl Fn(f64) -> FieldBundle) -> Result<Self> {
        Self::new(0.0, dt, (0..=steps).map(|n| f(n as f64 * dt)).collect())
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn num_components(&self) -> usize {
        self.snapshots[0].num_components()
    }

    pub fn snapshots(&self) -> &[FieldBundle] {
        &self.snapshots
    }

    pub fn at(&self, i: usize) -> &FieldBundle {
        &self.snapshots[i]
    }

    pub fn into_snapshots(self) -> Vec<FieldBundle> {
        self.snapshots
    }

    fn tolerance(&self) -> f64 {
        1e-9 * self.dt
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = self.tolerance();
        if t < self.t0 - tol || t > self.end_time() + tol || !t.is_finite() {
            return Err(LabError::OutOfHistory { t, start: self.t0, end: self.end_time() });
        }
        Ok(())
    }

    /// Snapshot index of a time that lies on the grid (within roundoff).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.check_time(t)?;
        let x = (t - self.t0) / self.dt;
        let i = x.round();
        if (x - i).abs() > 1e-6 {
            return Err(LabError::InvalidArgument(format!("time {t} is not on the snapshot grid")));
        }
        Ok(i as usize)
    }

    /// Linear interpolation in time.
    pub fn interpolate(&self, t: f64) -> Result<FieldBundle> {
        self.check_time(t)?;
        let x = ((t - self.t0) / self.dt).max(0.0);
        let i = (x.floor() as usize).min(self.len() - 1);
        let frac = x - i as f64;
        if i + 1 >= self.len() || frac.abs() < 1e-12 {
            return Ok(self.snapshots[i].clone());
        }
        let mut out = self.snapshots[i].scale(1.0 - frac);
        out.axpy(frac, &self.snapshots[i + 1]);
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(&FieldBundle) -> FieldBundle) -> SpacetimeField {
        SpacetimeField { t0: self.t0, dt: self.dt, snapshots: self.snapshots.iter().map(f).collect() }
    }

    pub fn map_indexed(&self, f: impl Fn(usize, f64, &FieldBundle) -> FieldBundle) -> SpacetimeField {
        SpacetimeField {
            t0: self.t0,
            dt: self.dt,
            snapshots: self
                .snapshots
                .iter()
                .enumerate()
                .map(|(i, s)| f(i, self.time(i), s))
                .collect(),
        }
    }

    pub fn check_aligned(&self, other: &SpacetimeField) -> Result<()> {
        if self.len() != other.len()
            || (self.dt - other.dt).abs() > 1e-12 * self.dt
            || (self.t0 - other.t0).abs() > 1e-12 * self.dt.max(1.0)
        {
            return Err(LabError::ShapeMismatch(format!(
                "histories differ: {} snapshots at dt {} vs {} at dt {}",
                self.len(),
                self.dt,
                other.len(),
                other.dt
            )));
        }
        self.snapshots[0].check_matches(&other.snapshots[0])
    }

    pub fn add(&self, other: &SpacetimeField) -> Result<SpacetimeField> {
        self.check_aligned(other)?;
        Ok(self.map_indexed(|i, _, s| s.add(&other.snapshots[i])))
    }

    pub fn sub(&self, other: &SpacetimeField) -> Result<SpacetimeField> {
        self.check_aligned(other)?;
        Ok(self.map_indexed(|i, _, s| s.sub(&other.snapshots[i])))
    }

    pub fn scale(&self, c: f64) -> SpacetimeField {
        self.map(|s| s.scale(c))
    }

    /// Keeps the first `count` snapshots.
    pub fn truncated(&self, count: usize) -> SpacetimeField {
        SpacetimeField {
            t0: self.t0,
            dt: self.dt,
            snapshots: self.snapshots[..count.min(self.len()).max(1)].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.snapshots.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }

    /// Time derivatives of order 1 and 2 at snapshot `i`: centered in the
    /// interior, second-order one-sided at the ends.
    pub fn time_derivatives(&self, i: usize) -> (FieldBundle, FieldBundle) {
        let n = self.len();
        let dt = self.dt;
        let s = &self.snapshots;
        let zero = s[0].scale(0.0);
        if n == 1 {
            return (zero.clone(), zero);
        }
        if n == 2 {
            let d1 = s[1].sub(&s[0]).scale(1.0 / dt);
            return (d1, zero);
        }
        let comb = |coefs: &[(usize, f64)], scale: f64| {
            let mut out = zero.clone();
            for &(j, c) in coefs {
                out.axpy(c * scale, &s[j]);
            }
            out
        };
        let first = if i == 0 {
            comb(&[(0, -1.5), (1, 2.0), (2, -0.5)], 1.0 / dt)
        } else if i == n - 1 {
            comb(&[(n - 1, 1.5), (n - 2, -2.0), (n - 3, 0.5)], 1.0 / dt)
        } else {
            comb(&[(i + 1, 0.5), (i - 1, -0.5)], 1.0 / dt)
        };
        let inv = 1.0 / (dt * dt);
        let second = if i > 0 && i < n - 1 {
            comb(&[(i + 1, 1.0), (i, -2.0), (i - 1, 1.0)], inv)
        } else if n >= 4 {
            if i == 0 {
                comb(&[(0, 2.0), (1, -5.0), (2, 4.0), (3, -1.0)], inv)
            } else {
                comb(&[(n - 1, 2.0), (n - 2, -5.0), (n - 3, 4.0), (n - 4, -1.0)], inv)
            }
        } else if i == 0 {
            comb(&[(0, 1.0), (1, -2.0), (2, 1.0)], inv)
        } else {
            comb(&[(n - 1, 1.0), (n - 2, -2.0), (n - 3, 1.0)], inv)
        };
        (first, second)
    }
}

/// `|||u|||_{l,T} = sup_{t <= T} (sum_{i<=2} ||d_t^i u(t)||^2_{H^{l-i}})^{1/2}`.
pub fn spacetime_norm(grid: &Grid2D, u: &SpacetimeField, l: f64, t_end: f64) -> Result<f64> {
    if !(l >= 2.0) {
        return Err(LabError::InvalidArgument(format!("spacetime index {l} must be >= 2")));
    }
    u.check_time(t_end)?;
    let last = (((t_end - u.t0) / u.dt) + 1e-9).floor() as usize;
    let mut sup: f64 = 0.0;
    for i in 0..=last.min(u.len() - 1) {
        let (d1, d2) = u.time_derivatives(i);
        let sq = grid.bundle_sobolev_norm(u.at(i), l)?.powi(2)
            + grid.bundle_sobolev_norm(&d1, l - 1.0)?.powi(2)
            + grid.bundle_sobolev_norm(&d2, l - 2.0)?.powi(2);
        sup = sup.max(sq);
    }
    Ok(sup.sqrt())
}

/// Running trapezoidal integrals `\int_0^{t_i} u` for every snapshot.
pub fn cumulative_integrals(u: &SpacetimeField) -> Vec<FieldBundle> {
    let mut out = Vec::with_capacity(u.len());
    let mut acc = u.at(0).scale(0.0);
    out.push(acc.clone());
    for i in 1..u.len() {
        acc.axpy(0.5 * u.dt, u.at(i - 1));
        acc.axpy(0.5 * u.dt, u.at(i));
        out.push(acc.clone());
    }
    out
}

/// Trapezoidal `\int_{t0}^t u`; partial trailing intervals use linear interpolation.
pub fn time_integral(u: &SpacetimeField, t: f64) -> Result<FieldBundle> {
    u.check_time(t)?;
    let x = ((t - u.t0) / u.dt).max(0.0);
    let mut i = x.floor() as usize;
    let mut frac = x - i as f64;
    if frac > 1.0 - 1e-9 {
        i += 1;
        frac = 0.0;
    }
    let i = i.min(u.len() - 1);
    let mut acc = u.at(0).scale(0.0);
    for j in 1..=i {
        acc.axpy(0.5 * u.dt, u.at(j - 1));
        acc.axpy(0.5 * u.dt, u.at(j));
    }
    if frac > 1e-9 && i + 1 < u.len() {
        let h = frac * u.dt;
        let end = u.interpolate(t)?;
        acc.axpy(0.5 * h, u.at(i));
        acc.axpy(0.5 * h, &end);
    }
    Ok(acc)
}

// ---- serialization ----

/// Writes fields in the flat binary layout: little-endian header
/// `n1: u64, n2: u64, L1: f64, L2: f64`, then each field row-major as `f64`.
pub fn write_fields_binary<W: Write>(mut out: W, grid: &Grid2D, fields: &[&Field]) -> Result<()> {
    let (l1, l2) = grid.lengths();
    out.write_all(&(grid.n1() as u64).to_le_bytes())?;
    out.write_all(&(grid.n2() as u64).to_le_bytes())?;
    out.write_all(&l1.to_le_bytes())?;
    out.write_all(&l2.to_le_bytes())?;
    for f in fields {
        grid.check(f)?;
        for v in &f.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads back the binary layout; returns the header and all stored fields.
pub fn read_fields_binary<R: Read>(mut input: R) -> Result<(Grid2D, Vec<Field>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return Err(LabError::InvalidArgument("truncated field header".into()));
    }
    let word = |i: usize| -> [u8; 8] { bytes[i * 8..i * 8 + 8].try_into().unwrap() };
    let n1 = u64::from_le_bytes(word(0)) as usize;
    let n2 = u64::from_le_bytes(word(1)) as usize;
    let l1 = f64::from_le_bytes(word(2));
    let l2 = f64::from_le_bytes(word(3));
    let grid = Grid2D::new(n1, n2, l1, l2)?;
    let body = &bytes[32..];
    let per = n1 * n2 * 8;
    if body.len() % per != 0 {
        return Err(LabError::InvalidArgument("field payload is not a whole number of fields".into()));
    }
    let fields = body
        .chunks(per)
        .map(|chunk| {
            let values = chunk.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Field::from_values(&grid, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, fields))
}

/// CSV with columns `i1,i2,x1,x2,value`.
pub fn write_field_csv<W: Write>(mut out: W, grid: &Grid2D, f: &Field) -> Result<()> {
    grid.check(f)?;
    writeln!(out, "i1,i2,x1,x2,value")?;
    for i1 in 0..grid.n1() {
        for i2 in 0..grid.n2() {
            let (x1, x2) = grid.coords(i1, i2);
            writeln!(out, "{i1},{i2},{x1},{x2},{:e}", f.get(i1, i2))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid64() -> Grid2D {
        Grid2D::square(64).unwrap()
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(Grid2D::square(24).is_err());
        assert!(Grid2D::new(16, 16, -1.0, 1.0).is_err());
        assert!(Grid2D::with_weight(4, 4, 1.0, 1.0, vec![0.0; 16]).is_err());
    }

    #[test]
    fn epsilon_is_antisymmetric() {
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(epsilon_symbol(a, b), -epsilon_symbol(b, a));
            }
        }
        assert_eq!(epsilon_symbol(0, 1), 1.0);
    }

    #[test]
    fn derivative_of_single_mode_is_exact() {
        let g = Grid2D::new(32, 32, 3.0, 5.0).unwrap();
        let k = 2.0 * PI / 3.0;
        let f = Field::from_fn(&g, |x, _| (k * x).sin());
        let d = g.derivative(&f, Axis::X1);
        let exact = Field::from_fn(&g, |x, _| k * (k * x).cos());
        assert!(d.sub(&exact).max_abs() <= 1e-12 * k);
        let c = g.derivative(&Field::constant(&g, 3.0), Axis::X2);
        assert!(c.max_abs() < 1e-14);
    }

    #[test]
    fn derivative_matches_finite_difference_band() {
        let g = grid64();
        let f = Field::from_fn(&g, |x, y| x.sin() * (2.0 * y).cos());
        let d = g.derivative(&f, Axis::X2);
        let (_, h) = g.spacing();
        // centered difference oracle, error O(h^2) with constant ~ |f'''|/6 = 8/6
        let fd = Field::from_fn(&g, |x, y| (x.sin() * (2.0 * (y + h)).cos() - x.sin() * (2.0 * (y - h)).cos()) / (2.0 * h));
        let band = 8.0 / 6.0 * h * h * 1.01;
        assert!(d.sub(&fd).max_abs() <= band);
        assert!(d.sub(&fd).max_abs() > 0.1 * band);
    }

    #[test]
    fn sobolev_examples() {
        let unit = Grid2D::new(16, 16, 1.0, 1.0).unwrap();
        let one = Field::constant(&unit, 1.0);
        for s in [0.0, 1.0, 3.5] {
            assert!((unit.sobolev_norm(&one, s).unwrap() - 1.0).abs() < 1e-13);
        }
        let g = Grid2D::square(16).unwrap();
        let f = Field::from_fn(&g, |x, _| x.sin());
        let l2 = g.l2_norm(&f);
        let h1 = g.sobolev_norm(&f, 1.0).unwrap();
        assert!((h1 - 2f64.sqrt() * l2).abs() < 1e-12 * h1);
        assert!(g.sobolev_norm(&f, -0.5).is_err());
    }

    #[test]
    fn parseval_uniform_weight() {
        let g = Grid2D::square(32).unwrap();
        let f = Field::from_fn(&g, |x, y| (x + 2.0 * y).cos() + 0.3 * (3.0 * x).sin() + 0.1);
        let quad = g.l2_norm(&f);
        let four = g.sobolev_norm(&f, 0.0).unwrap();
        assert!((quad - four).abs() <= 1e-10 * quad);
    }

    #[test]
    fn weighted_l2_matches_fourier_at_zero() {
        let g0 = Grid2D::square(32).unwrap();
        let w = Field::from_fn(&g0, |x, y| 1.0 + 0.3 * x.cos() * y.sin());
        let g = Grid2D::with_weight(32, 32, 2.0 * PI, 2.0 * PI, w.values().to_vec()).unwrap();
        let f = Field::from_fn(&g, |x, y| x.sin() + y.cos());
        assert!((g.l2_norm(&f) - g.sobolev_norm(&f, 0.0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn low_pass_examples() {
        let g = Grid2D::square(32).unwrap();
        let k3 = Field::from_fn(&g, |x, _| (3.0 * x).cos());
        assert!(g.low_pass(&k3, 4).sub(&k3).max_abs() < 1e-13);
        let k9 = Field::from_fn(&g, |x, _| (9.0 * x).cos());
        assert!(g.low_pass(&k9, 8).max_abs() < 1e-13);
        let mix = k3.add(&k9);
        let once = g.low_pass(&mix, 5);
        assert!(g.low_pass(&once, 5).sub(&once).max_abs() < 1e-14);
        assert_eq!(g.low_pass(&mix, g.nyquist()), mix);
    }

    #[test]
    fn low_pass_commutes_with_derivative() {
        let g = Grid2D::square(32).unwrap();
        let f = Field::from_fn(&g, |x, y| (x.sin() * y.cos()).exp());
        let a = g.low_pass(&g.derivative(&f, Axis::X1), 6);
        let b = g.derivative(&g.low_pass(&f, 6), Axis::X1);
        assert!(a.sub(&b).max_abs() < 1e-12);
    }

    #[test]
    fn dealiased_product_is_exact_for_band_limited_factors() {
        let g = Grid2D::square(16).unwrap();
        // modes up to 7 each, product up to 14: aliased on 16 points, exact after truncation
        let f = Field::from_fn(&g, |x, y| (7.0 * x).cos() + y.sin());
        let h = Field::from_fn(&g, |x, _| (6.0 * x).cos());
        let p = g.product(&f, &h);
        // exact product truncated to |k| < 8: cos7x cos6x = (cos13x + cos x)/2 -> keep cos x / 2
        let exact = Field::from_fn(&g, |x, y| 0.5 * x.cos() + y.sin() * (6.0 * x).cos());
        assert!(p.sub(&exact).max_abs() < 1e-13);
    }

    #[test]
    fn time_integral_examples() {
        let g = Grid2D::square(8).unwrap();
        let f = FieldBundle::new(vec![Field::from_fn(&g, |x, _| x.cos())]).unwrap();
        let dt = 1e-3;
        let steps = 2000;
        let constant = SpacetimeField::sample(dt, steps, |_| f.clone()).unwrap();
        let i = time_integral(&constant, 1.5).unwrap();
        assert!(i.sub(&f.scale(1.5)).max_abs() < 1e-12);
        assert_eq!(time_integral(&constant, 0.0).unwrap().max_abs(), 0.0);
        let cosine = SpacetimeField::sample(dt, steps, |t| f.scale(t.cos())).unwrap();
        let half_pi = time_integral(&cosine, PI / 2.0).unwrap();
        assert!(half_pi.sub(&f).max_abs() < 1e-6);
        let a = time_integral(&cosine, 0.7).unwrap();
        let b = time_integral(&cosine, 1.9).unwrap();
        let tail = SpacetimeField::new(0.7, dt, cosine.snapshots()[700..].to_vec()).unwrap();
        let c = time_integral(&tail, 1.9).unwrap();
        assert!(a.add(&c).sub(&b).max_abs() < 1e-12);
        assert!(time_integral(&cosine, 2.5).is_err());
    }

    #[test]
    fn spacetime_norm_examples() {
        let g = Grid2D::square(16).unwrap();
        let f = FieldBundle::new(vec![Field::from_fn(&g, |x, y| x.sin() + (2.0 * y).cos())]).unwrap();
        let hl = g.bundle_sobolev_norm(&f, 3.0).unwrap();
        let hl1 = g.bundle_sobolev_norm(&f, 2.0).unwrap();
        let constant = SpacetimeField::sample(0.01, 50, |_| f.clone()).unwrap();
        let n = spacetime_norm(&g, &constant, 3.0, 0.5).unwrap();
        assert!((n - hl).abs() < 1e-12 * hl);
        let linear = SpacetimeField::sample(0.01, 50, |t| f.scale(t)).unwrap();
        let n = spacetime_norm(&g, &linear, 3.0, 0.5).unwrap();
        let expect = (0.25 * hl * hl + hl1 * hl1).sqrt();
        assert!((n - expect).abs() < 1e-10 * expect);
        assert!(spacetime_norm(&g, &linear, 3.0, 0.6).is_err());
        assert!(spacetime_norm(&g, &linear, 1.0, 0.5).is_err());
    }

    #[test]
    fn binary_roundtrip_and_csv() {
        let g = Grid2D::new(8, 4, 1.0, 2.0).unwrap();
        let f = Field::from_fn(&g, |x, y| x + 10.0 * y);
        let h = f.scale(-2.0);
        let mut buf = Vec::new();
        write_fields_binary(&mut buf, &g, &[&f, &h]).unwrap();
        assert_eq!(buf.len(), 32 + 2 * 32 * 8);
        let (g2, back) = read_fields_binary(&buf[..]).unwrap();
        assert_eq!(g2.lengths(), (1.0, 2.0));
        assert_eq!(back, vec![f.clone(), h]);
        let mut csv = Vec::new();
        write_field_csv(&mut csv, &g, &f).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 33);
        assert!(text.starts_with("i1,i2,x1,x2,value"));
    }

    #[test]
    fn from_values_rejects_nan() {
        let g = Grid2D::square(4).unwrap();
        let mut v = vec![0.0; 16];
        v[5] = f64::NAN;
        assert!(matches!(Field::from_values(&g, v), Err(LabError::NonFinite { index: 5 })));
    }
}
