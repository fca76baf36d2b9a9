//! Desired trajectories, disturbance torques and the frequency-to-parameter map.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub const MAX_POLY_DEGREE: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("expected {expected} joints, got {got} in `{field}`")]
    JointCount { field: &'static str, expected: usize, got: usize },
    #[error("polynomial degree {0} exceeds the maximum of {MAX_POLY_DEGREE}")]
    DegreeTooHigh(usize),
    #[error("tone frequency must be positive and finite, got {0}")]
    BadFrequency(f64),
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
    #[error("disturbance frequencies must be distinct, {0} repeats")]
    RepeatedFrequency(f64),
    #[error("annihilator residual needs a zero-bias disturbance")]
    NonZeroBias,
    #[error("joint {joint} has {tones} tones but only {n_star} parameters were supplied")]
    TooManyTones { joint: usize, tones: usize, n_star: usize },
    #[error("at least one frequency is required")]
    Empty,
}

/// One sinusoid `A sin(ωt + φ)`, written as `[A, ω, φ]` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tone(pub f64, pub f64, pub f64);

impl Tone {
    pub fn amplitude(&self) -> f64 {
        self.0
    }

    pub fn omega(&self) -> f64 {
        self.1
    }

    pub fn phase(&self) -> f64 {
        self.2
    }

    /// k-th time derivative at `t`.
    pub fn derivative(&self, t: f64, k: usize) -> f64 {
        let Tone(a, w, phi) = *self;
        a * w.powi(k as i32) * (w * t + phi + k as f64 * FRAC_PI_2).sin()
    }

    fn check(&self) -> Result<(), SignalError> {
        if !(self.0.is_finite() && self.2.is_finite()) {
            return Err(SignalError::NonFinite("tones"));
        }
        if !(self.1 > 0.0 && self.1.is_finite()) {
            return Err(SignalError::BadFrequency(self.1));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    #[default]
    Polynomial,
    Multisine,
}

/// Desired joint trajectory `q_d(t)`.
///
/// `poly[j]` holds ascending coefficients for joint `j`; `offset` and `tones`
/// are used by the multisine kind. Empty per-joint lists mean zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    #[serde(default)]
    pub poly: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Vec<f64>,
    #[serde(default)]
    pub tones: Vec<Vec<Tone>>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Polynomial,
            poly: vec![vec![0.5, 0.1], vec![-0.3, 0.05]],
            offset: Vec::new(),
            tones: Vec::new(),
        }
    }
}

fn check_rows<T>(field: &'static str, rows: &[T], n: usize) -> Result<(), SignalError> {
    if !rows.is_empty() && rows.len() != n {
        return Err(SignalError::JointCount { field, expected: n, got: rows.len() });
    }
    Ok(())
}

fn poly_derivative(c: &[f64], t: f64, k: usize) -> f64 {
    // Horner on the k-th derivative coefficients
    let mut acc = 0.0;
    for i in (k..c.len()).rev() {
        let falling: f64 = ((i - k + 1)..=i).map(|x| x as f64).product();
        acc = acc * t + c[i] * falling;
    }
    acc
}

impl TrajectorySpec {
    pub fn polynomial(poly: Vec<Vec<f64>>) -> Self {
        Self { kind: TrajectoryKind::Polynomial, poly, offset: Vec::new(), tones: Vec::new() }
    }

    pub fn multisine(offset: Vec<f64>, tones: Vec<Vec<Tone>>) -> Self {
        Self { kind: TrajectoryKind::Multisine, poly: Vec::new(), offset, tones }
    }

    pub fn validate(&self, n: usize) -> Result<(), SignalError> {
        match self.kind {
            TrajectoryKind::Polynomial => {
                check_rows("trajectory.poly", &self.poly, n)?;
                for row in &self.poly {
                    if row.len() > MAX_POLY_DEGREE + 1 {
                        return Err(SignalError::DegreeTooHigh(row.len() - 1));
                    }
                    if row.iter().any(|c| !c.is_finite()) {
                        return Err(SignalError::NonFinite("trajectory.poly"));
                    }
                }
            }
            TrajectoryKind::Multisine => {
                check_rows("trajectory.offset", &self.offset, n)?;
                check_rows("trajectory.tones", &self.tones, n)?;
                if self.offset.iter().any(|c| !c.is_finite()) {
                    return Err(SignalError::NonFinite("trajectory.offset"));
                }
                for tone in self.tones.iter().flatten() {
                    tone.check()?;
                }
            }
        }
        Ok(())
    }

    /// Degree of the polynomial kind (highest over joints); `None` for multisine.
    pub fn degree(&self) -> Option<usize> {
        match self.kind {
            TrajectoryKind::Polynomial => Some(
                self.poly
                    .iter()
                    .map(|r| r.iter().rposition(|c| *c != 0.0).unwrap_or(0))
                    .max()
                    .unwrap_or(0),
            ),
            TrajectoryKind::Multisine => None,
        }
    }

    /// `d^k q_d / dt^k` at time `t` for `n` joints.
    pub fn eval(&self, t: f64, k: usize, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |j, _| match self.kind {
            TrajectoryKind::Polynomial => self.poly.get(j).map_or(0.0, |c| poly_derivative(c, t, k)),
            TrajectoryKind::Multisine => {
                let base = if k == 0 { self.offset.get(j).copied().unwrap_or(0.0) } else { 0.0 };
                base + self
                    .tones
                    .get(j)
                    .map_or(0.0, |ts| ts.iter().map(|tone| tone.derivative(t, k)).sum())
            }
        })
    }
}

/// Disturbance torque `τ*(t)`: per-joint bias plus tones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    #[serde(default)]
    pub bias: Vec<f64>,
    #[serde(default)]
    pub tones: Vec<Vec<Tone>>,
}

impl DisturbanceSpec {
    pub fn validate(&self, n: usize) -> Result<(), SignalError> {
        check_rows("disturbance.bias", &self.bias, n)?;
        check_rows("disturbance.tones", &self.tones, n)?;
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(SignalError::NonFinite("disturbance.bias"));
        }
        for row in &self.tones {
            for (i, tone) in row.iter().enumerate() {
                tone.check()?;
                if row[..i].iter().any(|o| o.omega() == tone.omega()) {
                    return Err(SignalError::RepeatedFrequency(tone.omega()));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct tone frequencies across all joints.
    pub fn n_star(&self) -> usize {
        let mut ws: Vec<f64> = self.tones.iter().flatten().map(|t| t.omega()).collect();
        ws.sort_by(|a, b| a.total_cmp(b));
        ws.dedup();
        ws.len()
    }

    pub fn eval(&self, t: f64, n: usize) -> DVector<f64> {
        self.derivative(t, 0, n)
    }

    /// `d^k τ* / dt^k` at `t`.
    pub fn derivative(&self, t: f64, k: usize, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |j, _| {
            let base = if k == 0 { self.bias.get(j).copied().unwrap_or(0.0) } else { 0.0 };
            base + self
                .tones
                .get(j)
                .map_or(0.0, |ts| ts.iter().map(|tone| tone.derivative(t, k)).sum())
        })
    }
}

/// `θ_1..θ_{n*}`: coefficients of `∏(x + ω_i²)` below the leading one, constant term first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyParams {
    pub thetas: Vec<f64>,
}

pub fn vieta_theta(omegas: &[f64]) -> Result<FrequencyParams, SignalError> {
    if omegas.is_empty() {
        return Err(SignalError::Empty);
    }
    // c holds the ascending coefficients of the running product
    let mut c = vec![1.0];
    for &w in omegas {
        if !(w > 0.0 && w.is_finite()) {
            return Err(SignalError::BadFrequency(w));
        }
        let w2 = w * w;
        let mut next = vec![0.0; c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i] += w2 * ci;
            next[i + 1] += ci;
        }
        c = next;
    }
    c.pop();
    Ok(FrequencyParams { thetas: c })
}

/// `θ_1 τ* + θ_2 τ*^(2) + … + θ_{n*} τ*^(2n*−2) + τ*^(2n*)` evaluated analytically.
pub fn annihilator_residual(
    spec: &DisturbanceSpec,
    params: &FrequencyParams,
    t: f64,
    n: usize,
) -> Result<DVector<f64>, SignalError> {
    let n_star = params.thetas.len();
    if n_star == 0 {
        return Err(SignalError::Empty);
    }
    if spec.bias.iter().any(|b| *b != 0.0) {
        return Err(SignalError::NonZeroBias);
    }
    for (joint, row) in spec.tones.iter().enumerate() {
        if row.len() > n_star {
            return Err(SignalError::TooManyTones { joint, tones: row.len(), n_star });
        }
    }
    let mut r = spec.derivative(t, 2 * n_star, n);
    for (i, th) in params.thetas.iter().enumerate() {
        r += spec.derivative(t, 2 * i, n) * *th;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polynomial_annihilated_by_high_derivative() {
        let spec = TrajectorySpec::polynomial(vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0]]);
        assert_eq!(spec.eval(1.7, 3, 2), DVector::zeros(2));
        assert_eq!(spec.degree(), Some(2));
        let d1 = spec.eval(2.0, 1, 2);
        assert_eq!(d1[0], 2.0 + 6.0 * 2.0);
        assert_eq!(d1[1], -4.0);
    }

    #[test]
    fn sine_derivatives() {
        let (a, w) = (0.7, 1.9);
        let spec = TrajectorySpec::multisine(vec![], vec![vec![Tone(a, w, 0.0)]]);
        let t = 0.83;
        let d2 = spec.eval(t, 2, 1)[0];
        assert!((d2 + a * w * w * (w * t).sin()).abs() < 1e-14);
        let phased = TrajectorySpec::multisine(vec![0.0], vec![vec![Tone(a, w, 0.4)]]);
        assert!((phased.eval(0.0, 0, 1)[0] - a * 0.4f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let spec = TrajectorySpec::multisine(
            vec![0.2, -0.1],
            vec![vec![Tone(0.5, 0.5, 0.1), Tone(0.2, 1.3, -0.7)], vec![Tone(1.0, 0.9, 0.0)]],
        );
        let poly = TrajectorySpec::polynomial(vec![vec![0.1, 0.2, -0.3, 0.05, 0.01], vec![1.0]]);
        let h = 1e-4;
        for s in [&spec, &poly] {
            for k in 0..4 {
                for &t in &[0.0, 0.7, 3.1] {
                    let fd = (s.eval(t + h, k, 2) - s.eval(t - h, k, 2)) / (2.0 * h);
                    assert!((fd - s.eval(t, k + 1, 2)).amax() < 1e-6, "k = {k}");
                }
            }
        }
    }

    #[test]
    fn trajectory_validation() {
        let too_high = TrajectorySpec::polynomial(vec![vec![0.0; 8], vec![]]);
        assert_eq!(too_high.validate(2), Err(SignalError::DegreeTooHigh(7)));
        let bad = TrajectorySpec::multisine(vec![], vec![vec![Tone(1.0, 0.0, 0.0)], vec![]]);
        assert_eq!(bad.validate(2), Err(SignalError::BadFrequency(0.0)));
        let wrong_n = TrajectorySpec::polynomial(vec![vec![1.0]]);
        assert!(matches!(wrong_n.validate(2), Err(SignalError::JointCount { .. })));
    }

    #[test]
    fn disturbance_basic_cases() {
        let empty = DisturbanceSpec::default();
        assert_eq!(empty.eval(1.0, 2), DVector::zeros(2));
        let bias = DisturbanceSpec { bias: vec![0.3, -0.2], tones: vec![] };
        assert_eq!(bias.eval(0.0, 2), bias.eval(5.0, 2));
        let tone = DisturbanceSpec { bias: vec![], tones: vec![vec![Tone(0.4, 2.0, 0.3)], vec![]] };
        for &t in &[0.0, 1.1, 2.9] {
            let r = tone.derivative(t, 2, 2) + tone.eval(t, 2) * 4.0;
            assert!(r.amax() < 1e-14);
        }
        assert_eq!(tone.n_star(), 1);
    }

    #[test]
    fn repeated_joint_frequency_rejected() {
        let d = DisturbanceSpec { bias: vec![], tones: vec![vec![Tone(1.0, 2.0, 0.0), Tone(0.5, 2.0, 1.0)]] };
        assert_eq!(d.validate(1), Err(SignalError::RepeatedFrequency(2.0)));
    }

    #[test]
    fn vieta_examples() {
        assert_eq!(vieta_theta(&[3.0]).unwrap().thetas, vec![9.0]);
        assert_eq!(vieta_theta(&[1.0, 2.0]).unwrap().thetas, vec![4.0, 5.0]);
        assert_eq!(vieta_theta(&[1.0, 2.0, 3.0]).unwrap().thetas, vec![36.0, 49.0, 14.0]);
        assert_eq!(vieta_theta(&[]), Err(SignalError::Empty));
    }

    #[test]
    fn vieta_matches_elementary_symmetric_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.gen_range(1..=5);
            let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let sq: Vec<f64> = ws.iter().map(|w| w * w).collect();
            let th = vieta_theta(&ws).unwrap().thetas;
            // θ_{i+1} is e_{n−i}: the sum over subsets of size n − i
            for (i, got) in th.iter().enumerate() {
                let size = n - i;
                let mut e = 0.0;
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == size {
                        e += (0..n).filter(|b| mask & (1 << b) != 0).map(|b| sq[b]).product::<f64>();
                    }
                }
                assert!((got - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn annihilator_cases() {
        let ws = [1.3, 2.1];
        let params = vieta_theta(&ws).unwrap();
        let spec = DisturbanceSpec {
            bias: vec![],
            tones: vec![vec![Tone(0.5, 1.3, 0.2), Tone(0.3, 2.1, -1.0)], vec![Tone(0.7, 2.1, 0.0)]],
        };
        for k in 0..50 {
            let r = annihilator_residual(&spec, &params, 0.2 * k as f64, 2).unwrap();
            assert!(r.amax() < 1e-10);
        }
        let off = FrequencyParams { thetas: params.thetas.iter().map(|t| t * 1.1).collect() };
        let r = annihilator_residual(&spec, &off, 0.5, 2).unwrap();
        assert!(r.amax() > 1e-3);
        let zero = DisturbanceSpec::default();
        assert_eq!(annihilator_residual(&zero, &off, 0.5, 2).unwrap(), DVector::zeros(2));
        let biased = DisturbanceSpec { bias: vec![1.0, 0.0], tones: vec![] };
        assert_eq!(annihilator_residual(&biased, &params, 0.0, 2), Err(SignalError::NonZeroBias));
    }
}
