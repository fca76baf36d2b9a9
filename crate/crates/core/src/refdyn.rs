//! Reference dynamics of order ℓ+1 and their first-order (degree-reduced) realizations.
//!
//! State layout is `[X_0 = z, X_1, …, X_{ℓ−1}]`, each an n-vector, so a realization
//! always carries exactly `ℓ·n` states. `X_k` for `k ≥ 1` are the bracketed
//! combinations of `z^(k)` and error derivatives that make every right-hand side
//! depend only on measured signals.

use crate::numerics::{routh_hurwitz, NumericsError, Polynomial, Stability};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ELL: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefError {
    #[error("ℓ must be between 1 and {MAX_ELL}, got {0}")]
    BadEll(usize),
    #[error("time scale κ must be positive and finite, got {0}")]
    BadKappa(f64),
    #[error("rate α must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("{which} polynomial {coeffs:?} is not Hurwitz ({verdict:?})")]
    NotHurwitz { which: &'static str, coeffs: Vec<f64>, verdict: Stability },
    #[error("correction gain Λ must have {expected} positive entries, got {got:?}")]
    BadLambda { expected: usize, got: Vec<f64> },
    #[error("{variant:?} reference dynamics: {problem}")]
    Availability { variant: Availability, problem: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Coefficients of `w^{ℓ+1} + α_ℓ w^ℓ + … + α_0` under a time scale κ.
///
/// The stored base coefficients are never modified; the effective coefficient
/// is `α_k / κ^{ℓ+1−k}`, so repeated scaling composes by multiplying κ.
#[derive(Debug, Clone, PartialEq)]
pub struct HurwitzCoeffs {
    base: Vec<f64>,
    kappa: f64,
}

fn check_hurwitz(which: &'static str, poly: &Polynomial) -> Result<(), RefError> {
    let verdict = routh_hurwitz(poly)?;
    if verdict != Stability::Stable {
        return Err(RefError::NotHurwitz { which, coeffs: poly.coeffs().to_vec(), verdict });
    }
    Ok(())
}

impl HurwitzCoeffs {
    /// `alphas = [α_0, …, α_ℓ]`.
    pub fn new(alphas: Vec<f64>) -> Result<Self, RefError> {
        Self::with_kappa(alphas, 1.0)
    }

    pub fn with_kappa(alphas: Vec<f64>, kappa: f64) -> Result<Self, RefError> {
        let ell = alphas.len().saturating_sub(1);
        if !(1..=MAX_ELL).contains(&ell) {
            return Err(RefError::BadEll(ell));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(RefError::BadKappa(kappa));
        }
        let c = Self { base: alphas, kappa };
        check_hurwitz("reference", &Polynomial::monic(&c.base))?;
        check_hurwitz("time-scaled reference", &c.polynomial())?;
        Ok(c)
    }

    pub fn ell(&self) -> usize {
        self.base.len() - 1
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Effective α_k after time scaling.
    pub fn alpha(&self, k: usize) -> f64 {
        self.base[k] / self.kappa.powi((self.ell() + 1 - k) as i32)
    }

    pub fn alphas(&self) -> Vec<f64> {
        (0..=self.ell()).map(|k| self.alpha(k)).collect()
    }

    /// Effective monic polynomial `P_ℓ(w)`.
    pub fn polynomial(&self) -> Polynomial {
        Polynomial::monic(&self.alphas())
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Coefficients of `(w + α)^{ℓ+1}`.
pub fn critically_damped_coeffs(alpha: f64, ell: usize) -> Result<HurwitzCoeffs, RefError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(RefError::BadRate(alpha));
    }
    if !(1..=MAX_ELL).contains(&ell) {
        return Err(RefError::BadEll(ell));
    }
    let m = ell as u64 + 1;
    let alphas = (0..=ell as u64)
        .map(|k| binomial(m, k) as f64 * alpha.powi((m - k) as i32))
        .collect();
    HurwitzCoeffs::new(alphas)
}

/// Applies the time scale κ on top of any scale already present.
pub fn scale_coeffs(coeffs: &HurwitzCoeffs, kappa: f64) -> Result<HurwitzCoeffs, RefError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(RefError::BadKappa(kappa));
    }
    HurwitzCoeffs::with_kappa(coeffs.base.clone(), coeffs.kappa * kappa)
}

/// Which derivatives of the desired position the reference may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    /// Only `q_d`.
    Position,
    /// `q_d` and `q̇_d`.
    Velocity,
    /// `q_d`, `q̇_d` and `q̈_d`.
    Full,
    /// As `Full`, plus the `Λ (q̇ − z)` correction term.
    FullCorrected,
}

impl Availability {
    pub fn needs_velocity(self) -> bool {
        !matches!(self, Availability::Position)
    }

    pub fn needs_acceleration(self) -> bool {
        matches!(self, Availability::Full | Availability::FullCorrected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub coeffs: HurwitzCoeffs,
    pub availability: Availability,
    /// Diagonal of Λ; only read by `FullCorrected`.
    pub lambda: Vec<f64>,
}

impl ReferenceConfig {
    pub fn new(coeffs: HurwitzCoeffs, availability: Availability, lambda: Vec<f64>, n: usize) -> Result<Self, RefError> {
        if availability == Availability::FullCorrected
            && (lambda.len() != n || lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())))
        {
            return Err(RefError::BadLambda { expected: n, got: lambda });
        }
        Ok(Self { coeffs, availability, lambda })
    }
}

/// Signals available to the reference at one instant.
#[derive(Debug, Clone, Copy)]
pub struct RefInputs<'a> {
    pub q: &'a DVector<f64>,
    pub qdot: &'a DVector<f64>,
    pub qd: &'a DVector<f64>,
    pub qd_dot: Option<&'a DVector<f64>>,
    pub qd_ddot: Option<&'a DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Realization {
    config: ReferenceConfig,
    n: usize,
}

impl Realization {
    pub fn new(config: ReferenceConfig, n: usize) -> Self {
        Self { config, n }
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn ell(&self) -> usize {
        self.config.coeffs.ell()
    }

    pub fn state_len(&self) -> usize {
        self.ell() * self.n
    }

    pub fn z(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&x[..self.n])
    }

    fn check_inputs(&self, inp: &RefInputs) -> Result<(), RefError> {
        let av = self.config.availability;
        let fail = |problem: &str| Err(RefError::Availability { variant: av, problem: problem.to_string() });
        if av.needs_velocity() != inp.qd_dot.is_some() {
            return fail(if av.needs_velocity() { "q̇_d required" } else { "q̇_d must not be supplied" });
        }
        if av.needs_acceleration() != inp.qd_ddot.is_some() {
            return fail(if av.needs_acceleration() { "q̈_d required" } else { "q̈_d must not be supplied" });
        }
        let mut dims = vec![inp.q.len(), inp.qdot.len(), inp.qd.len()];
        dims.extend(inp.qd_dot.map(|v| v.len()));
        dims.extend(inp.qd_ddot.map(|v| v.len()));
        if let Some(&got) = dims.iter().find(|&&d| d != self.n) {
            return Err(RefError::Dimension { expected: self.n, got });
        }
        Ok(())
    }

    /// Rest-consistent initial state: `z(0) = q̇_d(0)` when known, else 0, and the
    /// brackets set as if every unmeasured higher derivative were zero.
    pub fn init(&self, inp: &RefInputs, x: &mut [f64]) -> Result<(), RefError> {
        self.check_inputs(inp)?;
        if x.len() != self.state_len() {
            return Err(RefError::Dimension { expected: self.state_len(), got: x.len() });
        }
        let (n, ell) = (self.n, self.ell());
        let c = &self.config.coeffs;
        let av = self.config.availability;
        for i in 0..n {
            let z0 = inp.qd_dot.map_or(0.0, |v| v[i]);
            x[i] = z0;
            let dqd = inp.qdot[i] - z0;
            for k in 1..ell {
                x[k * n + i] = match av {
                    Availability::Position => c.alpha(ell - k + 1) * inp.qdot[i] - c.alpha(ell - k) * inp.qd[i],
                    _ => c.alpha(ell - k + 1) * dqd,
                };
            }
            if av == Availability::FullCorrected && ell > 1 {
                x[n + i] -= self.config.lambda[i] * (inp.qdot[i] - z0);
            }
        }
        Ok(())
    }

    /// Writes the cascade derivative into `dx` and returns `ż`.
    pub fn derivative(&self, x: &[f64], inp: &RefInputs, dx: &mut [f64]) -> Result<DVector<f64>, RefError> {
        self.check_inputs(inp)?;
        let (n, ell) = (self.n, self.ell());
        let c = &self.config.coeffs;
        let av = self.config.availability;
        for i in 0..n {
            let dq = inp.q[i] - inp.qd[i];
            let dqdot = inp.qdot[i] - inp.qd_dot.map_or(0.0, |v| v[i]);
            for k in 0..ell {
                let next = if k + 1 < ell { x[(k + 1) * n + i] } else { 0.0 };
                let mut d = if k + 1 < ell {
                    match av {
                        Availability::Position => next - c.alpha(ell - k) * inp.qdot[i] + c.alpha(ell - k - 1) * inp.qd[i],
                        _ => next - c.alpha(ell - k) * dqdot,
                    }
                } else {
                    let v = if av == Availability::Position { inp.qdot[i] } else { dqdot };
                    -c.alpha(1) * v - c.alpha(0) * dq
                };
                if k == 0 {
                    if let Some(a) = inp.qd_ddot {
                        d += a[i];
                    }
                    if av == Availability::FullCorrected {
                        d += self.config.lambda[i] * (inp.qdot[i] - x[i]);
                    }
                }
                dx[k * n + i] = d;
            }
        }
        Ok(DVector::from_column_slice(&dx[..n]))
    }
}

/// Independent integration of the literal high-order reference equations.
pub mod oracle {
    use super::*;
    use crate::numerics::Rk4;

    /// Analytic signal: `f(t, k)` returns the k-th derivative.
    pub type Signal<'a> = &'a dyn Fn(f64, usize) -> DVector<f64>;

    fn inputs_at<'a>(
        av: Availability,
        buf: &'a [DVector<f64>; 5],
    ) -> RefInputs<'a> {
        RefInputs {
            q: &buf[0],
            qdot: &buf[1],
            qd: &buf[2],
            qd_dot: av.needs_velocity().then_some(&buf[3]),
            qd_ddot: av.needs_acceleration().then_some(&buf[4]),
        }
    }

    fn sample(q: Signal, qd: Signal, t: f64) -> [DVector<f64>; 5] {
        [q(t, 0), q(t, 1), qd(t, 0), qd(t, 1), qd(t, 2)]
    }

    /// Integrates the realization itself, driven by exact samples of `q` and `q_d`
    /// restricted to what the availability declares. Returns z at every grid point.
    pub fn realization_run(
        realization: &Realization,
        q: Signal,
        qd: Signal,
        dt: f64,
        steps: usize,
    ) -> Result<(Vec<f64>, Vec<DVector<f64>>), RefError> {
        let av = realization.config.availability;
        let mut x = vec![0.0; realization.state_len()];
        let buf = sample(q, qd, 0.0);
        realization.init(&inputs_at(av, &buf), &mut x)?;
        let x0 = x.clone();
        let mut out = vec![realization.z(&x)];
        let mut rk = Rk4::new(x.len());
        let mut err = None;
        let mut f = |t: f64, x: &[f64], dx: &mut [f64]| {
            let buf = sample(q, qd, t);
            if let Err(e) = realization.derivative(x, &inputs_at(av, &buf), dx) {
                err = Some(e);
                dx.fill(0.0);
            }
            Ok(())
        };
        for k in 0..steps {
            rk.step(&mut f, &mut x, k as f64 * dt, dt)?;
            out.push(realization.z(&x));
        }
        if let Some(e) = err {
            return Err(e);
        }
        Ok((x0, out))
    }

    /// Recovers `z, ż, …, z^(ℓ−1)` at t = 0 from a realization state by inverting
    /// the bracket definitions with exact derivatives of `q` and `q_d`.
    pub fn initial_derivatives(config: &ReferenceConfig, x0: &[f64], q: Signal, qd: Signal, n: usize) -> Vec<DVector<f64>> {
        let c = &config.coeffs;
        let ell = c.ell();
        let dq = |k: usize| q(0.0, k) - qd(0.0, k);
        let mut z: Vec<DVector<f64>> = vec![DVector::from_column_slice(&x0[..n])];
        for k in 1..ell {
            let xk = DVector::from_column_slice(&x0[k * n..(k + 1) * n]);
            let zk = match config.availability {
                Availability::Position => {
                    let mut v = xk - q(0.0, k) * c.alpha(ell) + qd(0.0, 0) * c.alpha(ell - k);
                    for j in 1..k {
                        v -= dq(k - j) * c.alpha(ell - j);
                    }
                    v
                }
                av => {
                    let mut v = xk;
                    for j in 0..k {
                        v -= dq(k - j) * c.alpha(ell - j);
                    }
                    if av.needs_acceleration() {
                        v += qd(0.0, k + 1);
                    }
                    if av == Availability::FullCorrected {
                        let s = q(0.0, k) - &z[k - 1];
                        v += s.component_mul(&DVector::from_column_slice(&config.lambda));
                    }
                    v
                }
            };
            z.push(zk);
        }
        z
    }

    /// Integrates the order-ℓ ODE in z written directly from its definition.
    pub fn direct_highorder(
        config: &ReferenceConfig,
        init: &[DVector<f64>],
        q: Signal,
        qd: Signal,
        dt: f64,
        steps: usize,
    ) -> Result<Vec<DVector<f64>>, RefError> {
        let c = &config.coeffs;
        let ell = c.ell();
        let n = init[0].len();
        let lambda = DVector::from_column_slice(if config.lambda.is_empty() { &[] } else { &config.lambda });
        let mut x: Vec<f64> = init.iter().flat_map(|v| v.iter().copied()).collect();
        let mut out = vec![init[0].clone()];
        let mut rk = Rk4::new(x.len());
        let mut f = |t: f64, x: &[f64], dx: &mut [f64]| {
            for k in 0..ell - 1 {
                dx[k * n..(k + 1) * n].copy_from_slice(&x[(k + 1) * n..(k + 2) * n]);
            }
            let top_q = if config.availability == Availability::Position { q(t, ell) } else { q(t, ell) - qd(t, ell) };
            let mut top = -top_q * c.alpha(ell);
            for k in 0..ell {
                top -= (q(t, k) - qd(t, k)) * c.alpha(k);
            }
            if config.availability.needs_acceleration() {
                top += qd(t, ell + 1);
            }
            if config.availability == Availability::FullCorrected {
                let zl = DVector::from_column_slice(&x[(ell - 1) * n..ell * n]);
                top += (q(t, ell) - zl).component_mul(&lambda);
            }
            dx[(ell - 1) * n..].copy_from_slice(top.as_slice());
            Ok(())
        };
        for k in 0..steps {
            rk.step(&mut f, &mut x, k as f64 * dt, dt)?;
            out.push(DVector::from_column_slice(&x[..n]));
        }
        Ok(out)
    }

    /// Largest `‖z_realization − z_oracle‖_∞` over the run.
    pub fn equivalence_error(realization: &Realization, q: Signal, qd: Signal, dt: f64, steps: usize, n: usize) -> Result<f64, RefError> {
        let (x0, zr) = realization_run(realization, q, qd, dt, steps)?;
        let init = initial_derivatives(realization.config(), &x0, q, qd, n);
        let zo = direct_highorder(realization.config(), &init, q, qd, dt, steps)?;
        Ok(zr.iter().zip(&zo).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
    }

    /// Solution of `y^(ℓ+1) + α_ℓ y^(ℓ) + … + α_0 y = 0` sampled on the grid.
    pub fn homogeneous_response(coeffs: &HurwitzCoeffs, y0: &[f64], dt: f64, steps: usize) -> Result<Vec<f64>, RefError> {
        let m = coeffs.ell() + 1;
        if y0.len() != m {
            return Err(RefError::Dimension { expected: m, got: y0.len() });
        }
        let a = coeffs.alphas();
        let mut x = y0.to_vec();
        let mut out = vec![x[0]];
        let mut rk = Rk4::new(m);
        let mut f = |_t: f64, x: &[f64], dx: &mut [f64]| {
            dx[..m - 1].copy_from_slice(&x[1..]);
            dx[m - 1] = -(0..m).map(|k| a[k] * x[k]).sum::<f64>();
            Ok(())
        };
        for k in 0..steps {
            rk.step(&mut f, &mut x, k as f64 * dt, dt)?;
            out.push(x[0]);
        }
        Ok(out)
    }
}
