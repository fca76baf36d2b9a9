//! Proper rational operators in the differential variable p, realized in
//! controllable canonical form.
//!
//! Filters hold coefficients only. Their states live in the shared simulation
//! state vector, so one filter value can drive many channels.

use crate::numerics::{routh_hurwitz, NumericsError, Polynomial, Stability};
use crate::refdyn::HurwitzCoeffs;
use nalgebra::{Complex, DMatrix};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("improper operator: numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },
    #[error("denominator {0:?} is not Hurwitz")]
    Unstable(Vec<f64>),
    #[error("gain matrix must be diagonal (entry ({row}, {col}) = {value})")]
    NonDiagonal { row: usize, col: usize, value: f64 },
    #[error("derivative order {k} exceeds relative degree {rel}")]
    RelativeDegree { k: usize, rel: usize },
    #[error("output filter does not share the bank's denominator")]
    DenominatorMismatch,
    #[error("operator {0:?} needs ℓ ≥ 2")]
    NeedsHigherOrder(OperatorKind),
    #[error("invalid operator parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationalFilter {
    num: Polynomial,
    den: Polynomial,
    c: Vec<f64>,
    d: f64,
}

impl RationalFilter {
    /// Generic constructor; an unstable denominator is allowed but logged.
    pub fn new(num: Polynomial, den: Polynomial) -> Result<Self, FilterError> {
        let f = Self::build(num, den)?;
        if !routh_hurwitz(&f.den)?.is_stable() {
            log::warn!("filter denominator {:?} is not Hurwitz", f.den.coeffs());
        }
        Ok(f)
    }

    /// Rejects denominators that fail the Routh test.
    pub fn stable(num: Polynomial, den: Polynomial) -> Result<Self, FilterError> {
        let f = Self::build(num, den)?;
        if f.order() > 0 && routh_hurwitz(&f.den)? != Stability::Stable {
            return Err(FilterError::Unstable(f.den.coeffs().to_vec()));
        }
        Ok(f)
    }

    fn build(num: Polynomial, den: Polynomial) -> Result<Self, FilterError> {
        if num.degree() > den.degree() {
            return Err(FilterError::Improper { num: num.degree(), den: den.degree() });
        }
        let lead = den.leading();
        let den = den.scale(1.0 / lead);
        let num = num.scale(1.0 / lead);
        let n = den.degree();
        let b: Vec<f64> = (0..=n).map(|i| num.coeffs().get(i).copied().unwrap_or(0.0)).collect();
        let d = b[n];
        let c = (0..n).map(|i| b[i] - d * den.coeffs()[i]).collect();
        Ok(Self { num, den, c, d })
    }

    pub fn order(&self) -> usize {
        self.den.degree()
    }

    pub fn num(&self) -> &Polynomial {
        &self.num
    }

    pub fn den(&self) -> &Polynomial {
        &self.den
    }

    pub fn feedthrough(&self) -> f64 {
        self.d
    }

    pub fn is_biproper(&self) -> bool {
        self.d != 0.0
    }

    pub fn relative_degree(&self) -> usize {
        self.den.degree() - self.num.degree()
    }

    /// Same denominator (and therefore the same state) with another numerator.
    pub fn with_numerator(&self, num: Polynomial) -> Result<Self, FilterError> {
        Self::build(num, self.den.clone())
    }

    /// Realization of `p^k · num/den` on the shared state; `k ≤` relative degree.
    pub fn output_derivative(&self, k: usize) -> Result<Self, FilterError> {
        let rel = self.relative_degree();
        if k > rel {
            return Err(FilterError::RelativeDegree { k, rel });
        }
        self.with_numerator(self.num.mul(&Polynomial::power(k)))
    }

    pub fn derivative(&self, x: &[f64], u: f64, dx: &mut [f64]) {
        let n = self.order();
        if n == 0 {
            return;
        }
        dx[..n - 1].copy_from_slice(&x[1..n]);
        let a = self.den.coeffs();
        dx[n - 1] = u - (0..n).map(|i| a[i] * x[i]).sum::<f64>();
    }

    pub fn output(&self, x: &[f64], u: f64) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>() + self.d * u
    }

    /// Transfer function value at complex frequency `p`.
    pub fn eval(&self, p: Complex<f64>) -> Complex<f64> {
        self.num.eval_complex(p) / self.den.eval_complex(p)
    }
}

/// A grid of filter cells applied entrywise to a matrix signal.
///
/// All cells of a row share one set of coefficients. Extra outputs reuse the
/// same states through alternative numerators over the same denominator.
#[derive(Debug, Clone)]
pub struct FilterBank {
    rows: usize,
    cols: usize,
    order: usize,
    outputs: Vec<Vec<RationalFilter>>,
}

impl FilterBank {
    pub fn per_row(filters: Vec<RationalFilter>, cols: usize) -> Result<Self, FilterError> {
        let order = filters.first().map_or(0, |f| f.order());
        if filters.iter().any(|f| f.order() != order) {
            return Err(FilterError::DenominatorMismatch);
        }
        Ok(Self { rows: filters.len(), cols, order, outputs: vec![filters] })
    }

    pub fn uniform(filter: RationalFilter, rows: usize, cols: usize) -> Self {
        let order = filter.order();
        Self { rows, cols, order, outputs: vec![vec![filter; rows]] }
    }

    /// Registers another output over the same states and returns its index.
    pub fn add_output(&mut self, filters: Vec<RationalFilter>) -> Result<usize, FilterError> {
        if filters.len() != self.rows || filters.iter().zip(&self.outputs[0]).any(|(a, b)| a.den() != b.den()) {
            return Err(FilterError::DenominatorMismatch);
        }
        self.outputs.push(filters);
        Ok(self.outputs.len() - 1)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn state_len(&self) -> usize {
        self.rows * self.cols * self.order
    }

    fn cell(&self, r: usize, c: usize) -> std::ops::Range<usize> {
        let start = (r * self.cols + c) * self.order;
        start..start + self.order
    }

    pub fn derivative(&self, x: &[f64], u: &DMatrix<f64>, dx: &mut [f64]) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = self.cell(r, c);
                self.outputs[0][r].derivative(&x[cell.clone()], u[(r, c)], &mut dx[cell]);
            }
        }
    }

    pub fn output(&self, idx: usize, x: &[f64], u: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.outputs[idx][r].output(&x[self.cell(r, c)], u[(r, c)]))
    }
}

/// Extracts the diagonal of a gain matrix, rejecting any off-diagonal entry.
pub fn diagonal_of(m: &DMatrix<f64>) -> Result<Vec<f64>, FilterError> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if r != c && m[(r, c)] != 0.0 {
                return Err(FilterError::NonDiagonal { row: r, col: c, value: m[(r, c)] });
            }
        }
    }
    Ok(m.diagonal().iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    G,
    GStar,
    HStar,
    G1,
    G2,
    G3,
    G1Star,
    G2Star,
    G2StarStar,
}

/// Coefficients feeding the named operators for one joint channel.
#[derive(Debug, Clone, Copy)]
pub struct OperatorParams<'a> {
    /// `P_ℓ(p) = p^{ℓ+1} + α_ℓ p^ℓ + … + α_0`.
    pub coeffs: &'a HurwitzCoeffs,
    /// `[α_0*, α_1*]`.
    pub star: [f64; 2],
    /// `α*` in `(p + α*)`.
    pub alpha_star: f64,
    /// Channel entries of K and Λ.
    pub k: f64,
    pub lambda: f64,
    /// `[κ_0*, κ_1*]`.
    pub kappa_star: [f64; 2],
    /// `[α_0*, …, α_{2n*−1}*]` of the monic H* denominator.
    pub hstar_den: &'a [f64],
}

fn lin(a: f64) -> Polynomial {
    Polynomial::monic(&[a])
}

pub fn named_operator(kind: OperatorKind, p: &OperatorParams) -> Result<RationalFilter, FilterError> {
    for (name, v) in [("k", p.k), ("lambda", p.lambda), ("alpha_star", p.alpha_star)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(FilterError::BadParam(format!("{name} must be positive, got {v}")));
        }
    }
    let ell = p.coeffs.ell();
    let pl = p.coeffs.polynomial();
    let b_star = Polynomial::monic(&p.star);
    let g_star_tail = |extra: Polynomial, den_extra: Polynomial| {
        RationalFilter::stable(b_star.mul(&extra), pl.mul(&den_extra))
    };
    let mixed = lin(p.alpha_star).mul(&lin(p.k));
    let a_star = || Polynomial::monic(p.hstar_den);
    let lam = Polynomial::constant(p.lambda)?;
    match kind {
        OperatorKind::G => g_star_tail(Polynomial::power(ell - 1).mul(&lam), lin(p.k)),
        OperatorKind::GStar => g_star_tail(Polynomial::constant(1.0)?, Polynomial::constant(1.0)?),
        OperatorKind::HStar => RationalFilter::stable(Polynomial::monic(&p.kappa_star), a_star()),
        OperatorKind::G1 => {
            if ell < 2 {
                return Err(FilterError::NeedsHigherOrder(kind));
            }
            let extra = Polynomial::power(ell - 2).mul(&lin(p.lambda));
            g_star_tail(extra, Polynomial::constant(1.0)?)
        }
        OperatorKind::G2 => {
            if ell < 2 {
                return Err(FilterError::NeedsHigherOrder(kind));
            }
            g_star_tail(Polynomial::power(ell - 2).mul(&lam), mixed)
        }
        OperatorKind::G3 => g_star_tail(Polynomial::power(ell).mul(&lam), mixed),
        OperatorKind::G1Star => RationalFilter::stable(Polynomial::power(2), a_star()),
        OperatorKind::G2Star => RationalFilter::stable(Polynomial::power(ell - 1), pl),
        OperatorKind::G2StarStar => RationalFilter::stable(Polynomial::constant(1.0)?, pl),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rk4;
    use crate::refdyn::critically_damped_coeffs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly(c: &[f64]) -> Polynomial {
        Polynomial::new(c.to_vec()).unwrap()
    }

    /// Simulates a filter on `u(t)` and returns output samples.
    fn simulate(f: &RationalFilter, x0: &[f64], u: &dyn Fn(f64) -> f64, dt: f64, steps: usize) -> Vec<f64> {
        let mut x = x0.to_vec();
        let mut rk = Rk4::new(x.len());
        let mut out = vec![f.output(&x, u(0.0))];
        let mut deriv = |t: f64, x: &[f64], dx: &mut [f64]| {
            f.derivative(x, u(t), dx);
            Ok(())
        };
        for k in 0..steps {
            if !x.is_empty() {
                rk.step(&mut deriv, &mut x, k as f64 * dt, dt).unwrap();
            }
            out.push(f.output(&x, u((k + 1) as f64 * dt)));
        }
        out
    }

    fn params<'a>(c: &'a HurwitzCoeffs, hstar: &'a [f64]) -> OperatorParams<'a> {
        OperatorParams {
            coeffs: c,
            star: [4.0, 4.0],
            alpha_star: 2.0,
            k: 20.0,
            lambda: 2.0,
            kappa_star: [4.0, 4.0],
            hstar_den: hstar,
        }
    }

    #[test]
    fn first_order_lag_structure() {
        let f = RationalFilter::new(poly(&[1.0]), poly(&[1.0, 1.0])).unwrap();
        assert_eq!(f.order(), 1);
        assert!(!f.is_biproper());
        let id = RationalFilter::new(poly(&[2.0, 3.0, 1.0]), poly(&[2.0, 3.0, 1.0])).unwrap();
        assert_eq!(id.feedthrough(), 1.0);
        assert!(id.c.iter().all(|c| *c == 0.0));
        assert_eq!(
            RationalFilter::new(poly(&[0.0, 0.0, 1.0]), poly(&[1.0, 1.0])),
            Err(FilterError::Improper { num: 2, den: 1 })
        );
        assert!(matches!(RationalFilter::stable(poly(&[1.0]), poly(&[-1.0, 1.0])), Err(FilterError::Unstable(_))));
        assert!(RationalFilter::new(poly(&[1.0]), poly(&[-1.0, 1.0])).is_ok());
    }

    #[test]
    fn unit_step_response() {
        let f = RationalFilter::new(poly(&[1.0]), poly(&[1.0, 1.0])).unwrap();
        let y = simulate(&f, &[0.0], &|_| 1.0, 1e-3, 1000);
        assert!((y[1000] - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
        let zero = simulate(&f, &[0.0], &|_| 0.0, 1e-3, 100);
        assert!(zero.iter().all(|y| *y == 0.0));
    }

    fn steady_response(f: &RationalFilter, w: f64, settle: f64) -> Complex<f64> {
        let dt = 1e-3;
        let period = 2.0 * std::f64::consts::PI / w;
        let cycles = (10.0 / period).ceil().max(1.0);
        let window = cycles * period;
        let steps = ((settle + window) / dt).round() as usize;
        let y = simulate(f, &vec![0.0; f.order()], &|t| (w * t).sin(), dt, steps);
        let start = steps - (window / dt).round() as usize;
        let (mut a, mut b) = (0.0, 0.0);
        for (i, yi) in y.iter().enumerate().take(steps).skip(start) {
            let t = i as f64 * dt;
            a += yi * (w * t).sin();
            b += yi * (w * t).cos();
        }
        let scale = 2.0 / (steps - start) as f64;
        // y ≈ |H| sin(ωt + φ) = Re(H) sin + Im(H) cos
        Complex::new(a * scale, b * scale)
    }

    #[test]
    fn sinusoidal_gain_of_first_order_lag() {
        let f = RationalFilter::new(poly(&[1.0]), poly(&[1.0, 1.0])).unwrap();
        let h = steady_response(&f, 2.0, 15.0);
        assert!((h.norm() - 1.0 / 5f64.sqrt()).abs() < 0.01 / 5f64.sqrt());
    }

    #[test]
    fn frequency_response_matches_transfer_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let order = rng.gen_range(1..=4);
            let roots: Vec<f64> = (0..order).map(|_| -rng.gen_range(0.8..3.0)).collect();
            let den = Polynomial::from_real_roots(&roots);
            let num_deg = rng.gen_range(0..=order);
            let num: Vec<f64> = (0..=num_deg).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut num = num;
            if num[num_deg] == 0.0 {
                num[num_deg] = 1.0;
            }
            let f = RationalFilter::stable(poly(&num), den).unwrap();
            for &w in &[0.3, 1.0, 2.0, 5.0, 10.0] {
                let sim = steady_response(&f, w, 25.0);
                let exact = f.eval(Complex::new(0.0, w));
                assert!((sim - exact).norm() <= 0.01 * exact.norm().max(1e-3), "ω = {w}: {sim} vs {exact}");
            }
        }
    }

    #[test]
    fn output_derivative_matches_finite_difference() {
        let f = RationalFilter::stable(poly(&[1.0, 0.5]), poly(&[2.0, 3.0, 3.0, 1.0])).unwrap();
        let d1 = f.output_derivative(1).unwrap();
        let d2 = f.output_derivative(2).unwrap();
        assert!(f.output_derivative(3).is_err());
        let u = |t: f64| (1.7 * t).sin() + 0.3;
        let dt = 1e-3;
        let y = simulate(&f, &[0.0; 3], &u, dt, 3000);
        let y1 = simulate(&d1, &[0.0; 3], &u, dt, 3000);
        let y2 = simulate(&d2, &[0.0; 3], &u, dt, 3000);
        for i in (10..2990).step_by(97) {
            assert!(((y[i + 1] - y[i - 1]) / (2.0 * dt) - y1[i]).abs() < 1e-5);
            assert!(((y1[i + 1] - y1[i - 1]) / (2.0 * dt) - y2[i]).abs() < 1e-5);
        }
    }

    fn bank_run(bank: &FilterBank, x0: Vec<f64>, u: &dyn Fn(f64) -> DMatrix<f64>, dt: f64, steps: usize) -> Vec<f64> {
        let mut x = x0;
        let mut rk = Rk4::new(x.len());
        let mut deriv = |t: f64, x: &[f64], dx: &mut [f64]| {
            bank.derivative(x, &u(t), dx);
            Ok(())
        };
        for k in 0..steps {
            rk.step(&mut deriv, &mut x, k as f64 * dt, dt).unwrap();
        }
        x
    }

    #[test]
    fn swap_identity_for_constant_parameters() {
        let c = critically_damped_coeffs(4.0, 2).unwrap();
        let g = named_operator(OperatorKind::G, &params(&c, &[])).unwrap();
        let theta = DMatrix::from_row_slice(3, 1, &[0.7, -1.2, 2.0]);
        let y = |t: f64| DMatrix::from_row_slice(2, 3, &[t.sin(), (2.0 * t).cos(), 1.0, t.cos() * 0.5, 0.0, (3.0 * t).sin()]);
        let ybank = FilterBank::uniform(g.clone(), 2, 3);
        let vbank = FilterBank::uniform(g, 2, 1);
        let joint = |t: f64| {
            let yt = y(t);
            let mut m = DMatrix::zeros(2, 4);
            m.view_mut((0, 0), (2, 3)).copy_from(&yt);
            m.view_mut((0, 3), (2, 1)).copy_from(&(&yt * &theta));
            m
        };
        let both = FilterBank::uniform(ybank.outputs[0][0].clone(), 2, 4);
        let swap = |x: &[f64], t: f64| {
            let out = both.output(0, x, &joint(t));
            let w = out.view((0, 0), (2, 3)) * &theta;
            (w - out.view((0, 3), (2, 1))).amax()
        };
        let dt = 1e-3;
        let zero = bank_run(&both, vec![0.0; both.state_len()], &joint, dt, 5000);
        assert!(swap(&zero, 5.0) <= 1e-12);
        // from arbitrary states the mismatch decays with the slowest pole (rate 4 here)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vec<f64> = (0..both.state_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e0 = swap(&x0, 0.0);
        let x = bank_run(&both, x0, &joint, dt, 10_000);
        assert!(e0 > 1e-3 && swap(&x, 10.0) <= 1e-8, "{e0} → {}", swap(&x, 10.0));
        assert_eq!(ybank.state_len() + vbank.state_len(), both.state_len());
    }

    #[test]
    fn bank_is_linear() {
        let f = RationalFilter::stable(poly(&[1.0, 2.0]), poly(&[2.0, 3.0, 1.0])).unwrap();
        let bank = FilterBank::uniform(f, 2, 1);
        let u = |t: f64| DMatrix::from_row_slice(2, 1, &[t.sin(), 1.0]);
        let v = |t: f64| DMatrix::from_row_slice(2, 1, &[t * t, (3.0 * t).cos()]);
        let (a, b) = (0.3, -1.7);
        let dt = 1e-3;
        let xu = bank_run(&bank, vec![0.0; 4], &u, dt, 2000);
        let xv = bank_run(&bank, vec![0.0; 4], &v, dt, 2000);
        let w = |t: f64| u(t) * a + v(t) * b;
        let xw = bank_run(&bank, vec![0.0; 4], &w, dt, 2000);
        for i in 0..4 {
            assert!((xw[i] - (a * xu[i] + b * xv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn named_operator_structure() {
        let c2 = critically_damped_coeffs(4.0, 2).unwrap();
        let g = named_operator(OperatorKind::G, &params(&c2, &[])).unwrap();
        assert_eq!((g.num().degree(), g.den().degree()), (3, 4));
        for ell in 1..=6 {
            let c = critically_damped_coeffs(4.0, ell).unwrap();
            assert_eq!(named_operator(OperatorKind::G, &params(&c, &[])).unwrap().relative_degree(), 1);
        }
        let c1 = critically_damped_coeffs(4.0, 1).unwrap();
        let mut p = params(&c1, &[]);
        p.star = [p.alpha_star * p.alpha_star, 2.0 * p.alpha_star];
        let gs = named_operator(OperatorKind::GStar, &p).unwrap();
        assert_eq!(gs.num().coeffs(), &[4.0, 4.0, 1.0]);
        assert_eq!(gs.den().coeffs(), &[16.0, 8.0, 1.0]);
        let h = named_operator(OperatorKind::HStar, &params(&c1, &[4.0, 4.0])).unwrap();
        assert_eq!(h.den().degree(), 2);
        assert_eq!(
            named_operator(OperatorKind::G1, &params(&c1, &[])),
            Err(FilterError::NeedsHigherOrder(OperatorKind::G1))
        );
        let g1 = named_operator(OperatorKind::G1, &params(&c2, &[])).unwrap();
        assert!(g1.is_biproper());
        let g3 = named_operator(OperatorKind::G3, &params(&c2, &[])).unwrap();
        assert_eq!(g3.relative_degree(), 1);
        let g2 = named_operator(OperatorKind::G2, &params(&c2, &[])).unwrap();
        assert_eq!(g2.den(), g3.den());
        assert!(matches!(
            named_operator(OperatorKind::G1Star, &params(&c2, &[1.0, -1.0])),
            Err(FilterError::Unstable(_))
        ));
        assert_eq!(named_operator(OperatorKind::G2Star, &params(&c2, &[])).unwrap().relative_degree(), 2);
        assert_eq!(named_operator(OperatorKind::G2StarStar, &params(&c2, &[])).unwrap().relative_degree(), 3);
    }

    #[test]
    fn g_matches_factor_product_at_test_points() {
        let c = critically_damped_coeffs(3.0, 3).unwrap();
        let p = params(&c, &[]);
        let g = named_operator(OperatorKind::G, &p).unwrap();
        for &w in &[0.1, 1.0, 7.0] {
            let s = Complex::new(0.2, w);
            let star = s.powu(4) + s.powu(3) * p.star[1] + s.powu(2) * p.star[0];
            let expect = star / c.polynomial().eval_complex(s) * p.lambda / (s + p.k);
            assert!((g.eval(s) - expect).norm() < 1e-12 * expect.norm());
        }
    }

    #[test]
    fn non_diagonal_gain_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 2.0]);
        assert_eq!(diagonal_of(&m), Err(FilterError::NonDiagonal { row: 0, col: 1, value: 0.1 }));
        assert_eq!(diagonal_of(&DMatrix::from_diagonal_element(2, 2, 3.0)).unwrap(), vec![3.0, 3.0]);
    }
}
