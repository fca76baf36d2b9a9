//! Rigid-body manipulator dynamics `M(q) q̈ + C(q, q̇) q̇ + g(q) = τ + τ*`.
//!
//! The shipped instance is the planar two-link arm with lumped parameters
//! `ϑ = [a1, a2, a3, b1, b2]`. Controllers only ever see a [`RegressorShape`],
//! which carries the structure of the regressor but no physical parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManipulatorError {
    #[error("inertia matrix is not positive definite at q = {0:?}")]
    SingularInertia(Vec<f64>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid physical parameter: {0}")]
    InvalidParam(String),
}

/// Structure of the linear-in-parameters map `Y(q, q̇, ζ, ζ̇) ϑ = M ζ̇ + C ζ + g`.
pub trait RegressorShape: Send + Sync {
    fn dof(&self) -> usize;
    fn param_count(&self) -> usize;
    fn regressor(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        zeta: &DVector<f64>,
        zetadot: &DVector<f64>,
    ) -> DMatrix<f64>;
}

pub trait Manipulator: Send + Sync {
    fn dof(&self) -> usize;
    fn shape(&self) -> &dyn RegressorShape;
    /// True lumped parameter vector ϑ.
    fn theta(&self) -> DVector<f64>;
    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// Time derivative of `M(q(t))` along velocity `q̇`.
    fn inertia_dot(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64>;
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64>;
    fn gravity(&self, q: &DVector<f64>) -> DVector<f64>;
    fn potential_energy(&self, q: &DVector<f64>) -> f64;

    fn kinetic_energy(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> f64 {
        0.5 * qdot.dot(&(self.inertia(q) * qdot))
    }

    /// `q̈ = M⁻¹ (τ + τ* − C q̇ − g)`.
    fn forward_dynamics(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        tau: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Result<DVector<f64>, ManipulatorError> {
        let n = self.dof();
        for v in [q, qdot, tau, tau_star] {
            if v.len() != n {
                return Err(ManipulatorError::Dimension {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        let rhs = tau + tau_star - self.coriolis(q, qdot) * qdot - self.gravity(q);
        let chol = self
            .inertia(q)
            .cholesky()
            .ok_or_else(|| ManipulatorError::SingularInertia(q.iter().copied().collect()))?;
        Ok(chol.solve(&rhs))
    }
}

/// Physical parameters of the planar two-link arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
    pub g0: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            l1: 1.0,
            l2: 1.0,
            lc1: 0.5,
            lc2: 0.5,
            i1: 0.1,
            i2: 0.1,
            g0: 9.81,
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<(), ManipulatorError> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("i1", self.i1),
            ("i2", self.i2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ManipulatorError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lc1", self.lc1), ("lc2", self.lc2), ("g0", self.g0)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ManipulatorError::InvalidParam(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Lumped parameters `[a1, a2, a3, b1, b2]`.
    pub fn lumped(&self) -> [f64; 5] {
        let a1 = self.i1 + self.m1 * self.lc1 * self.lc1 + self.i2 + self.m2 * (self.l1 * self.l1 + self.lc2 * self.lc2);
        let a2 = self.m2 * self.l1 * self.lc2;
        let a3 = self.i2 + self.m2 * self.lc2 * self.lc2;
        let b1 = (self.m1 * self.lc1 + self.m2 * self.l1) * self.g0;
        let b2 = self.m2 * self.lc2 * self.g0;
        [a1, a2, a3, b1, b2]
    }
}

/// Deliberate model corruption used to check that the validation suites catch it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFault {
    #[default]
    None,
    FlipCoriolis,
}

/// Regressor structure of the planar two-link arm; parameter free.
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoLinkShape;

impl RegressorShape for TwoLinkShape {
    fn dof(&self) -> usize {
        2
    }

    fn param_count(&self) -> usize {
        5
    }

    fn regressor(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        zeta: &DVector<f64>,
        zetadot: &DVector<f64>,
    ) -> DMatrix<f64> {
        let (c1, c2, s2) = (q[0].cos(), q[1].cos(), q[1].sin());
        let c12 = (q[0] + q[1]).cos();
        let mut y = DMatrix::zeros(2, 5);
        y[(0, 0)] = zetadot[0];
        y[(0, 1)] = c2 * (2.0 * zetadot[0] + zetadot[1]) - s2 * (qdot[1] * zeta[0] + (qdot[0] + qdot[1]) * zeta[1]);
        y[(0, 2)] = zetadot[1];
        y[(0, 3)] = c1;
        y[(0, 4)] = c12;
        y[(1, 1)] = c2 * zetadot[0] + s2 * qdot[0] * zeta[0];
        y[(1, 2)] = zetadot[0] + zetadot[1];
        y[(1, 4)] = c12;
        y
    }
}

/// Planar two-link arm with joint angles measured from the horizontal.
#[derive(Debug, Clone)]
pub struct TwoLinkArm {
    params: ArmParams,
    fault: ModelFault,
    shape: TwoLinkShape,
}

impl TwoLinkArm {
    pub fn new(params: ArmParams) -> Result<Self, ManipulatorError> {
        params.validate()?;
        Ok(Self {
            params,
            fault: ModelFault::None,
            shape: TwoLinkShape,
        })
    }

    pub fn with_fault(mut self, fault: ModelFault) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &ArmParams {
        &self.params
    }

    fn lumped(&self) -> [f64; 5] {
        self.params.lumped()
    }
}

impl Default for TwoLinkArm {
    fn default() -> Self {
        Self::new(ArmParams::default()).expect("default parameters are valid")
    }
}

impl Manipulator for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn shape(&self) -> &dyn RegressorShape {
        &self.shape
    }

    fn theta(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.lumped())
    }

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let [a1, a2, a3, _, _] = self.lumped();
        let c2 = q[1].cos();
        let m12 = a3 + a2 * c2;
        DMatrix::from_row_slice(2, 2, &[a1 + 2.0 * a2 * c2, m12, m12, a3])
    }

    fn inertia_dot(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let a2 = self.lumped()[1];
        let d = -a2 * q[1].sin() * qdot[1];
        DMatrix::from_row_slice(2, 2, &[2.0 * d, d, d, 0.0])
    }

    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        // Christoffel symbols of the first kind
        let h = -self.lumped()[1] * q[1].sin();
        let c = DMatrix::from_row_slice(2, 2, &[h * qdot[1], h * (qdot[0] + qdot[1]), -h * qdot[0], 0.0]);
        match self.fault {
            ModelFault::None => c,
            ModelFault::FlipCoriolis => -c,
        }
    }

    fn gravity(&self, q: &DVector<f64>) -> DVector<f64> {
        let [_, _, _, b1, b2] = self.lumped();
        let c12 = (q[0] + q[1]).cos();
        DVector::from_row_slice(&[b1 * q[0].cos() + b2 * c12, b2 * c12])
    }

    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let [_, _, _, b1, b2] = self.lumped();
        b1 * q[0].sin() + b2 * (q[0] + q[1]).sin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rk4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-r..r))
    }

    #[test]
    fn lumped_defaults() {
        let [a1, a2, a3, b1, b2] = ArmParams::default().lumped();
        assert!((a1 - 1.7).abs() < 1e-15);
        assert!((a2 - 0.5).abs() < 1e-15);
        assert!((a3 - 0.35).abs() < 1e-15);
        assert!((b1 - 1.5 * 9.81).abs() < 1e-12);
        assert!((b2 - 0.5 * 9.81).abs() < 1e-12);
    }

    #[test]
    fn inertia_off_diagonal_at_right_angle() {
        let arm = TwoLinkArm::default();
        let m = arm.inertia(&v(&[0.3, std::f64::consts::FRAC_PI_2]));
        let a3 = arm.params().lumped()[2];
        assert!((m[(0, 1)] - a3).abs() < 1e-15);
        assert!((m[(1, 0)] - a3).abs() < 1e-15);
    }

    #[test]
    fn inertia_constant_without_coupling() {
        // a2 = m2 l1 lc2 = 0 when lc2 = 0
        let arm = TwoLinkArm::new(ArmParams { lc2: 0.0, ..Default::default() }).unwrap();
        let m0 = arm.inertia(&v(&[0.0, 0.0]));
        let m1 = arm.inertia(&v(&[1.3, -2.2]));
        assert_eq!(m0, m1);
    }

    #[test]
    fn inertia_symmetric_and_positive_on_grid() {
        let arm = TwoLinkArm::default();
        let pi = std::f64::consts::PI;
        let mut worst_cond: f64 = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                let q = v(&[-pi + 2.0 * pi * i as f64 / 49.0, -pi + 2.0 * pi * j as f64 / 49.0]);
                let m = arm.inertia(&q);
                assert!((m[(0, 1)] - m[(1, 0)]).abs() <= 1e-14);
                let eig = m.clone().symmetric_eigen().eigenvalues;
                let (lo, hi) = (eig.min(), eig.max());
                assert!(lo > 0.0);
                worst_cond = worst_cond.max(hi / lo);
            }
        }
        assert!(worst_cond < 100.0, "condition number {worst_cond}");
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let arm = TwoLinkArm::default();
        assert_eq!(arm.coriolis(&v(&[0.4, 1.1]), &v(&[0.0, 0.0])), DMatrix::zeros(2, 2));
    }

    #[test]
    fn skew_symmetry() {
        let arm = TwoLinkArm::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = rand_vec(&mut rng, 2, 10.0);
            let qd = rand_vec(&mut rng, 2, 10.0);
            let x = rand_vec(&mut rng, 2, 10.0);
            let n = arm.inertia_dot(&q, &qd) - 2.0 * arm.coriolis(&q, &qd);
            assert!(x.dot(&(n * &x)).abs() <= 1e-10);
        }
    }

    #[test]
    fn flipped_coriolis_breaks_skew_symmetry() {
        let arm = TwoLinkArm::default().with_fault(ModelFault::FlipCoriolis);
        let q = v(&[0.2, 0.7]);
        let qd = v(&[1.0, -0.5]);
        let x = v(&[1.0, 0.3]);
        let n = arm.inertia_dot(&q, &qd) - 2.0 * arm.coriolis(&q, &qd);
        assert!(x.dot(&(n * &x)).abs() > 1e-3);
    }

    #[test]
    fn inertia_dot_matches_finite_difference() {
        let arm = TwoLinkArm::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..100 {
            let q = rand_vec(&mut rng, 2, 3.0);
            let qd = rand_vec(&mut rng, 2, 3.0);
            let fd = (arm.inertia(&(&q + &qd * h)) - arm.inertia(&(&q - &qd * h))) / (2.0 * h);
            assert!((fd - arm.inertia_dot(&q, &qd)).amax() < 1e-6);
        }
    }

    #[test]
    fn gravity_cases() {
        let flat = TwoLinkArm::new(ArmParams { g0: 0.0, ..Default::default() }).unwrap();
        assert_eq!(flat.gravity(&v(&[0.3, 0.9])), DVector::zeros(2));
        let arm = TwoLinkArm::default();
        let g = arm.gravity(&v(&[std::f64::consts::FRAC_PI_2, 0.0]));
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn gravity_is_potential_gradient() {
        let arm = TwoLinkArm::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..100 {
            let q = rand_vec(&mut rng, 2, 3.0);
            let g = arm.gravity(&q);
            for i in 0..2 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let fd = (arm.potential_energy(&qp) - arm.potential_energy(&qm)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn regressor_zero_case() {
        let shape = TwoLinkShape;
        let flat = TwoLinkArm::new(ArmParams { g0: 0.0, ..Default::default() }).unwrap();
        let z = DVector::zeros(2);
        let y = shape.regressor(&v(&[0.3, 0.2]), &v(&[1.0, 2.0]), &z, &z);
        // gravity columns carry cos terms; with g0 = 0 their parameters vanish
        assert!((y * flat.theta()).amax() == 0.0);
    }

    #[test]
    fn regressor_identity() {
        let arm = TwoLinkArm::default();
        let shape = TwoLinkShape;
        let theta = arm.theta();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let q = rand_vec(&mut rng, 2, 10.0);
            let qd = rand_vec(&mut rng, 2, 10.0);
            let zeta = rand_vec(&mut rng, 2, 10.0);
            let zetad = rand_vec(&mut rng, 2, 10.0);
            let lhs = shape.regressor(&q, &qd, &zeta, &zetad) * &theta;
            let rhs = arm.inertia(&q) * &zetad + arm.coriolis(&q, &qd) * &zeta + arm.gravity(&q);
            assert!((lhs - rhs).norm() <= 1e-10);
        }
    }

    #[test]
    fn regressor_linear_in_parameters() {
        let shape = TwoLinkShape;
        let y = shape.regressor(&v(&[0.5, -0.4]), &v(&[0.3, 0.8]), &v(&[1.0, -1.0]), &v(&[0.2, 0.1]));
        let base = DVector::from_row_slice(&[1.0, 0.5, 0.3, 2.0, 1.0]);
        for k in 0..5 {
            let mut bumped = base.clone();
            bumped[k] += 0.7;
            let delta = &y * bumped - &y * &base;
            let expected = y.column(k) * 0.7;
            assert!((delta - expected).amax() < 1e-14);
        }
    }

    #[test]
    fn gravity_compensation_holds_still() {
        let arm = TwoLinkArm::default();
        let q = v(&[0.4, -0.9]);
        let z = DVector::zeros(2);
        let acc = arm.forward_dynamics(&q, &z, &arm.gravity(&q), &z).unwrap();
        assert!(acc.amax() < 1e-14);
    }

    #[test]
    fn forward_dynamics_residual() {
        let arm = TwoLinkArm::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let q = rand_vec(&mut rng, 2, 3.0);
            let qd = rand_vec(&mut rng, 2, 3.0);
            let tau = rand_vec(&mut rng, 2, 10.0);
            let ts = rand_vec(&mut rng, 2, 10.0);
            let acc = arm.forward_dynamics(&q, &qd, &tau, &ts).unwrap();
            let r = arm.inertia(&q) * acc + arm.coriolis(&q, &qd) * &qd + arm.gravity(&q) - tau - ts;
            assert!(r.norm() <= 1e-10);
        }
    }

    #[test]
    fn forward_dynamics_rejects_bad_dimension() {
        let arm = TwoLinkArm::default();
        let e = arm
            .forward_dynamics(&v(&[0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 0.0]))
            .unwrap_err();
        assert_eq!(e, ManipulatorError::Dimension { expected: 2, got: 1 });
    }

    #[test]
    fn energy_rate_equals_input_power() {
        // passivity: dE/dt = q̇ᵀ(τ + τ*) with g0 = 0
        let arm = TwoLinkArm::new(ArmParams { g0: 0.0, ..Default::default() }).unwrap();
        let tau = |t: f64| v(&[0.5 * t.sin(), -0.3 * (2.0 * t).cos()]);
        let mut x = vec![0.2, -0.4, 0.5, 0.1, 0.0];
        let mut rk = Rk4::new(5);
        let mut f = |t: f64, x: &[f64], dx: &mut [f64]| {
            let q = v(&x[0..2]);
            let qd = v(&x[2..4]);
            let u = tau(t);
            let acc = arm.forward_dynamics(&q, &qd, &u, &DVector::zeros(2)).unwrap();
            dx[0] = qd[0];
            dx[1] = qd[1];
            dx[2] = acc[0];
            dx[3] = acc[1];
            dx[4] = qd.dot(&u);
            Ok(())
        };
        let energy = |x: &[f64]| arm.kinetic_energy(&v(&x[0..2]), &v(&x[2..4]));
        let e0 = energy(&x);
        for k in 0..2000 {
            rk.step(&mut f, &mut x, k as f64 * 1e-3, 1e-3).unwrap();
        }
        assert!((energy(&x) - e0 - x[4]).abs() < 1e-9);
    }
}
