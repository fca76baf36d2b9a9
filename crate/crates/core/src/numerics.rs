//! Fixed-step integration and polynomial stability checks.
//!
//! Everything here is pure: the integrator keeps no state between calls and
//! the Routh test works on the coefficient list only.

use nalgebra::Complex;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value in state entry {index} at t = {t}")]
    NonFinite { index: usize, t: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("polynomial has zero leading coefficient")]
    ZeroLeading,
    #[error("polynomial degree must be at least 1")]
    DegreeTooLow,
    #[error("derivative evaluation failed: {0}")]
    Derivative(String),
}

/// Polynomial `c_0 + c_1 w + ... + c_m w^m` in a free variable, stored low to high.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    /// Builds a polynomial from ascending coefficients. Trailing zeros are
    /// rejected so the leading coefficient is always nonzero.
    pub fn new(coeffs: Vec<f64>) -> Result<Self, NumericsError> {
        match coeffs.last() {
            Some(c) if *c != 0.0 => Ok(Self { coeffs }),
            _ => Err(NumericsError::ZeroLeading),
        }
    }

    /// `w^m + rest[m-1] w^{m-1} + ... + rest[0]`.
    pub fn monic(rest: &[f64]) -> Self {
        let mut coeffs = rest.to_vec();
        coeffs.push(1.0);
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Result<Self, NumericsError> {
        Self::new(vec![c])
    }

    /// `w^k`.
    pub fn power(k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[k] = 1.0;
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[self.coeffs.len() - 1]
    }

    pub fn is_monic(&self) -> bool {
        self.leading() == 1.0
    }

    pub fn eval(&self, w: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * w + c)
    }

    pub fn eval_complex(&self, w: Complex<f64>) -> Complex<f64> {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex::new(0.0, 0.0), |acc, c| acc * w + Complex::new(*c, 0.0))
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial { coeffs: out }
    }

    pub fn scale(&self, k: f64) -> Polynomial {
        Polynomial {
            coeffs: self.coeffs.iter().map(|c| c * k).collect(),
        }
    }

    /// Sum of two polynomials; errors if the leading terms cancel exactly.
    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, NumericsError> {
        let len = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![0.0; len];
        for (i, c) in self.coeffs.iter().enumerate() {
            out[i] += c;
        }
        for (i, c) in other.coeffs.iter().enumerate() {
            out[i] += c;
        }
        while out.len() > 1 && out[out.len() - 1] == 0.0 {
            out.pop();
        }
        Polynomial::new(out)
    }

    /// Product of `(w - r)` over the given real roots.
    pub fn from_real_roots(roots: &[f64]) -> Polynomial {
        roots.iter().fold(Polynomial { coeffs: vec![1.0] }, |acc, r| {
            acc.mul(&Polynomial {
                coeffs: vec![-r, 1.0],
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl Stability {
    pub fn is_stable(self) -> bool {
        self == Stability::Stable
    }
}

/// Routh–Hurwitz test. A coefficient of the wrong sign means unstable; a zero
/// pivot is reported as marginal rather than repaired.
pub fn routh_hurwitz(poly: &Polynomial) -> Result<Stability, NumericsError> {
    let m = poly.degree();
    if m < 1 {
        return Err(NumericsError::DegreeTooLow);
    }
    let lead = poly.leading();
    if lead == 0.0 {
        return Err(NumericsError::ZeroLeading);
    }
    let sign = lead.signum();
    let c: Vec<f64> = poly.coeffs().iter().map(|x| x * sign).collect();
    if c.iter().any(|x| *x < 0.0) {
        return Ok(Stability::Unstable);
    }
    let scale = c.iter().fold(0.0_f64, |a, x| a.max(x.abs()));

    let width = m / 2 + 1;
    let mut prev: Vec<f64> = (0..width)
        .map(|j| if m >= 2 * j { c[m - 2 * j] } else { 0.0 })
        .collect();
    let mut cur: Vec<f64> = (0..width)
        .map(|j| if m > 2 * j { c[m - 2 * j - 1] } else { 0.0 })
        .collect();

    let tiny = |x: f64, s: f64| x.abs() <= 1e-12 * s.max(f64::MIN_POSITIVE);
    if tiny(cur[0], scale) {
        return Ok(Stability::Marginal);
    }
    for _ in 2..=m {
        let row_scale = prev
            .iter()
            .chain(cur.iter())
            .fold(0.0_f64, |a, x| a.max(x.abs()));
        let mut next = vec![0.0; width];
        for j in 0..width - 1 {
            next[j] = (cur[0] * prev[j + 1] - prev[0] * cur[j + 1]) / cur[0];
        }
        if tiny(next[0], row_scale) {
            return Ok(Stability::Marginal);
        }
        if next[0] < 0.0 {
            return Ok(Stability::Unstable);
        }
        prev = cur;
        cur = next;
    }
    Ok(Stability::Stable)
}

/// Reusable buffers for classical fourth-order Runge–Kutta.
#[derive(Debug, Clone, Default)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `x` in place by one step of size `h` starting at time `t`.
    pub fn step<F>(&mut self, deriv: &mut F, x: &mut [f64], t: f64, h: f64) -> Result<(), NumericsError>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), NumericsError>,
    {
        if !(h > 0.0 && h.is_finite()) {
            return Err(NumericsError::InvalidStep(h));
        }
        let n = x.len();
        if self.k1.len() != n {
            *self = Rk4::new(n);
        }
        let half = 0.5 * h;

        deriv(t, x, &mut self.k1)?;
        check_finite(&self.k1, t)?;
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        deriv(t + half, &self.tmp, &mut self.k2)?;
        check_finite(&self.k2, t + half)?;
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        deriv(t + half, &self.tmp, &mut self.k3)?;
        check_finite(&self.k3, t + half)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        deriv(t + h, &self.tmp, &mut self.k4)?;
        check_finite(&self.k4, t + h)?;
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        check_finite(x, t + h)
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<(), NumericsError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { index, t }),
        None => Ok(()),
    }
}

/// One classical RK4 step; convenience wrapper that allocates its own buffers.
pub fn rk4_step<F>(mut deriv: F, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), NumericsError>,
{
    let mut out = x.to_vec();
    Rk4::new(x.len()).step(&mut deriv, &mut out, t, h)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp_deriv(_t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), NumericsError> {
        dx.copy_from_slice(x);
        Ok(())
    }

    #[test]
    fn zero_derivative_is_identity() {
        let out = rk4_step(
            |_, _, dx: &mut [f64]| {
                dx.fill(0.0);
                Ok(())
            },
            &[1.0, 2.0],
            0.0,
            0.1,
        )
        .unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn exponential_single_step() {
        let out = rk4_step(exp_deriv, &[1.0], 0.0, 0.1).unwrap();
        assert!((out[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut x = vec![1.0, 0.0];
        let mut rk = Rk4::new(2);
        let mut f = |_t: f64, x: &[f64], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = -x[0];
            Ok(())
        };
        for k in 0..628 {
            rk.step(&mut f, &mut x, k as f64 * 0.01, 0.01).unwrap();
        }
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-8, "norm {norm}");
    }

    #[test]
    fn local_error_is_fifth_order() {
        let err = |h: f64| (rk4_step(exp_deriv, &[1.0], 0.0, h).unwrap()[0] - h.exp()).abs();
        let ratio = err(0.1) / err(0.05);
        // exact factor is 32; 10% tolerance on the 28 floor
        assert!(ratio >= 28.0 * 0.9, "ratio {ratio}");
    }

    #[test]
    fn non_finite_derivative_names_index() {
        let e = rk4_step(
            |_, _, dx: &mut [f64]| {
                dx[0] = 0.0;
                dx[1] = f64::NAN;
                Ok(())
            },
            &[0.0, 0.0],
            0.0,
            0.1,
        )
        .unwrap_err();
        assert_eq!(e, NumericsError::NonFinite { index: 1, t: 0.0 });
    }

    #[test]
    fn rejects_bad_step() {
        assert!(matches!(
            rk4_step(exp_deriv, &[1.0], 0.0, 0.0),
            Err(NumericsError::InvalidStep(_))
        ));
    }

    #[test]
    fn routh_examples() {
        let p = |c: &[f64]| Polynomial::new(c.to_vec()).unwrap();
        assert_eq!(routh_hurwitz(&p(&[1.0, 2.0, 1.0])).unwrap(), Stability::Stable);
        assert_eq!(routh_hurwitz(&p(&[-1.0, 0.0, 1.0])).unwrap(), Stability::Unstable);
        // (w+1)(w+2)(w+3)
        let cubic = Polynomial::from_real_roots(&[-1.0, -2.0, -3.0]);
        assert_eq!(cubic.coeffs(), &[6.0, 11.0, 6.0, 1.0]);
        assert_eq!(routh_hurwitz(&cubic).unwrap(), Stability::Stable);
        // w^2 + 1: roots on the imaginary axis
        assert_eq!(routh_hurwitz(&p(&[1.0, 0.0, 1.0])).unwrap(), Stability::Marginal);
        // negated leading sign is normalised
        assert_eq!(routh_hurwitz(&p(&[-1.0, -2.0, -1.0])).unwrap(), Stability::Stable);
    }

    #[test]
    fn routh_errors() {
        assert_eq!(Polynomial::new(vec![1.0, 0.0]), Err(NumericsError::ZeroLeading));
        assert_eq!(
            routh_hurwitz(&Polynomial::constant(3.0).unwrap()),
            Err(NumericsError::DegreeTooLow)
        );
    }

    #[test]
    fn routh_matches_constructed_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut poly = Polynomial::new(vec![1.0]).unwrap();
            let mut stable = true;
            let factors = rng.gen_range(1..=4);
            for _ in 0..factors {
                let unstable = rng.gen_bool(0.25);
                // real part magnitude bounded away from zero
                let re = rng.gen_range(0.1..3.0) * if unstable { 1.0 } else { -1.0 };
                stable &= !unstable;
                if rng.gen_bool(0.5) {
                    poly = poly.mul(&Polynomial::new(vec![-re, 1.0]).unwrap());
                } else {
                    let im: f64 = rng.gen_range(0.1..3.0);
                    // (w - re)^2 + im^2
                    poly = poly.mul(&Polynomial::new(vec![re * re + im * im, -2.0 * re, 1.0]).unwrap());
                }
            }
            let verdict = routh_hurwitz(&poly).unwrap();
            let expected = if stable { Stability::Stable } else { Stability::Unstable };
            assert_eq!(verdict, expected, "poly {:?}", poly.coeffs());
        }
    }

    proptest! {
        #[test]
        fn rk4_is_deterministic(x0 in -10.0f64..10.0, h in 1e-4f64..0.5) {
            let f = |_t: f64, x: &[f64], dx: &mut [f64]| { dx[0] = -x[0] * x[0].cos(); Ok(()) };
            let a = rk4_step(f, &[x0], 0.0, h).unwrap();
            let b = rk4_step(f, &[x0], 0.0, h).unwrap();
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }
}
