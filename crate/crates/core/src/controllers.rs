//! Controller variants as ODE components.
//!
//! Each controller owns a slice of the shared state vector. `evaluate` returns
//! the torque and the signals worth logging, and writes its state derivative.
//! Controllers see the regressor shape only; the true parameters reach them
//! solely when a variant is explicitly given them (`FsKnown`). The residual and
//! Lyapunov diagnostics take the model and are the one place truth is read.

use crate::filters::{named_operator, FilterBank, FilterError, OperatorKind, OperatorParams, RationalFilter};
use crate::manipulator::{Manipulator, RegressorShape};
use crate::numerics::Polynomial;
use crate::refdyn::{Availability, HurwitzCoeffs, Realization, RefError, RefInputs, ReferenceConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Reference(#[from] RefError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("controller configuration: {0}")]
    Config(String),
    #[error("measurement: {0}")]
    Measurement(String),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ControlError> {
    Err(ControlError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FsAdaptive,
    FsPlain,
    PidReformulated,
    PidTextbook,
    FsKnown,
    FsNldamp,
    FsPassive,
    FsFwdAdapt,
    StackedSingle,
    StackedSeparated,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::FsAdaptive,
        Variant::FsPlain,
        Variant::PidReformulated,
        Variant::PidTextbook,
        Variant::FsKnown,
        Variant::FsNldamp,
        Variant::FsPassive,
        Variant::FsFwdAdapt,
        Variant::StackedSingle,
        Variant::StackedSeparated,
    ];

    /// Desired-trajectory derivatives the variant reads when not configurable.
    pub fn default_availability(self) -> Availability {
        match self {
            Variant::FsAdaptive => Availability::Position,
            Variant::PidTextbook => Availability::Velocity,
            _ => Availability::Full,
        }
    }
}

/// Resolved gains; all matrices diagonal and stored as their diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub k: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda_d: f64,
    pub lambda: f64,
    pub alpha_star: f64,
    pub lambda_d_star: f64,
    pub alpha_star_star: f64,
    pub kappa_star: f64,
    pub gamma_freq: Vec<f64>,
    pub kd: Vec<f64>,
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    /// `[α_0*, α_1*]`
    pub star: [f64; 2],
    /// `[α_0**, α_1**]`
    pub dstar: [f64; 2],
    /// `[κ_0*, κ_1*]`
    pub kappa_star_coeffs: [f64; 2],
    /// `[α_0*, …, α_{2n*−1}*]` of the H* denominator.
    pub hstar_den: Vec<f64>,
    /// Diagonal of Λ.
    pub lambda_ref: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Measurements<'a> {
    pub t: f64,
    pub q: &'a DVector<f64>,
    pub qdot: &'a DVector<f64>,
    pub qd: &'a DVector<f64>,
    pub qd_dot: Option<&'a DVector<f64>>,
    pub qd_ddot: Option<&'a DVector<f64>>,
}

impl Measurements<'_> {
    fn check(&self, av: Availability) -> Result<(), ControlError> {
        if av.needs_velocity() != self.qd_dot.is_some() || av.needs_acceleration() != self.qd_ddot.is_some() {
            return Err(ControlError::Measurement(format!(
                "controller declares {av:?} availability but received q̇_d: {}, q̈_d: {}",
                self.qd_dot.is_some(),
                self.qd_ddot.is_some()
            )));
        }
        Ok(())
    }

    fn qd_dot(&self) -> &DVector<f64> {
        self.qd_dot.expect("checked by availability")
    }

    fn qd_ddot(&self) -> &DVector<f64> {
        self.qd_ddot.expect("checked by availability")
    }

    fn dq(&self) -> DVector<f64> {
        self.q - self.qd
    }

    fn dqdot(&self) -> DVector<f64> {
        self.qdot - self.qd_dot()
    }
}

/// Signals produced by one controller evaluation.
#[derive(Debug, Clone)]
pub struct Output {
    pub tau: DVector<f64>,
    /// Input-side tracking signal (`s`, or `s*` for the single stacked structure).
    pub s: DVector<f64>,
    /// Reference velocity used in the regressor (`z` or `χ̇*`) and its derivative.
    pub zeta: DVector<f64>,
    pub zeta_dot: DVector<f64>,
    pub regressor: Option<DMatrix<f64>>,
    pub theta_hat: Option<DVector<f64>>,
    pub freq_hat: Vec<f64>,
    pub xi: Option<DVector<f64>>,
    pub aux: Vec<(&'static str, DVector<f64>)>,
}

impl Output {
    pub fn aux(&self, name: &str) -> Option<&DVector<f64>> {
        self.aux.iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lyapunov {
    Unsupported,
    Value { v: f64, v_star: Option<f64> },
}

pub trait Controller: Send + Sync {
    fn variant(&self) -> Variant;
    fn availability(&self) -> Availability;
    fn state_len(&self) -> usize;
    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError>;
    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError>;

    /// Residuals of the displayed closed-loop identities, given the plant acceleration.
    /// Diagnostic only: reads the true parameters from `model`.
    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)>;

    /// Lyapunov-like functions evaluated with the true parameters.
    fn lyapunov(&self, _out: &Output, _model: &dyn Manipulator, _meas: &Measurements) -> Lyapunov {
        Lyapunov::Unsupported
    }
}

/// `−Γ Wᵀ e`, the gradient step shared by every adaptation law.
pub fn gradient_update(gamma: &[f64], w: &DMatrix<f64>, e: &DVector<f64>) -> DVector<f64> {
    -dmul(gamma, &(w.transpose() * e))
}

fn dmul(d: &[f64], v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| d[i] * v[i])
}

fn vec_of(x: &[f64], r: &Range<usize>) -> DVector<f64> {
    DVector::from_column_slice(&x[r.clone()])
}

fn put(dx: &mut [f64], r: &Range<usize>, v: &DVector<f64>) {
    dx[r.clone()].copy_from_slice(v.as_slice());
}

#[derive(Default)]
struct Layout {
    len: usize,
}

impl Layout {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }
}

/// `M(q)(q̈ − ζ̇) + C(q, q̇)(q̇ − ζ)`, the left side of every input-side loop.
fn input_side(model: &dyn Manipulator, meas: &Measurements, qddot: &DVector<f64>, out: &Output) -> DVector<f64> {
    model.inertia(meas.q) * (qddot - &out.zeta_dot) + model.coriolis(meas.q, meas.qdot) * &out.s
}

fn passive_lyapunov(model: &dyn Manipulator, meas: &Measurements, out: &Output, g: &GainSet) -> Lyapunov {
    let kin = 0.5 * out.s.dot(&(model.inertia(meas.q) * &out.s));
    let xi2 = out.xi.as_ref().map_or(0.0, |x| x.norm_squared());
    Lyapunov::Value {
        v: kin + g.lambda_d / (2.0 * g.lambda) * xi2,
        v_star: Some(kin + g.lambda_d / (4.0 * g.lambda) * xi2),
    }
}

/// Everything needed to assemble a controller.
#[derive(Clone)]
pub struct ControllerSpec {
    pub variant: Variant,
    pub gains: GainSet,
    pub coeffs: HurwitzCoeffs,
    /// Only `FsAdaptive` may choose; other variants use their fixed availability.
    pub availability: Option<Availability>,
    pub theta_hat0: DVector<f64>,
    /// Parameters handed to `FsKnown`.
    pub theta_known: Option<DVector<f64>>,
    pub n_star: usize,
    pub freq_hat0: Vec<f64>,
    pub freeze_freq: bool,
    /// Carry a textbook PID alongside the reformulated one.
    pub pid_shadow: bool,
}

pub fn build(spec: &ControllerSpec, shape: Arc<dyn RegressorShape>) -> Result<Box<dyn Controller>, ControlError> {
    let n = shape.dof();
    let p = shape.param_count();
    let g = &spec.gains;
    for (name, v) in [("k", &g.k), ("kd", &g.kd), ("kp", &g.kp), ("ki", &g.ki), ("lambda_ref", &g.lambda_ref)] {
        if v.len() != n || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return config_err(format!("gain {name} needs {n} positive entries, got {v:?}"));
        }
    }
    if g.gamma.len() != p || g.gamma.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return config_err(format!("gain gamma needs {p} positive entries, got {:?}", g.gamma));
    }
    for (name, v) in [
        ("lambda_d", g.lambda_d),
        ("lambda", g.lambda),
        ("alpha_star", g.alpha_star),
        ("lambda_d_star", g.lambda_d_star),
        ("alpha_star_star", g.alpha_star_star),
        ("kappa_star", g.kappa_star),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return config_err(format!("gain {name} must be positive, got {v}"));
        }
    }
    if spec.theta_hat0.len() != p {
        return config_err(format!("theta_hat0 needs {p} entries, got {}", spec.theta_hat0.len()));
    }
    if spec.availability.is_some_and(|a| a != spec.variant.default_availability()) && spec.variant != Variant::FsAdaptive {
        return config_err(format!("{:?} has fixed availability {:?}", spec.variant, spec.variant.default_availability()));
    }
    let reference = |av: Availability| -> Result<Realization, ControlError> {
        Ok(Realization::new(ReferenceConfig::new(spec.coeffs.clone(), av, g.lambda_ref.clone(), n)?, n))
    };
    Ok(match spec.variant {
        Variant::FsAdaptive => {
            let av = spec.availability.unwrap_or(Availability::Position);
            if av == Availability::FullCorrected {
                return config_err("fs_adaptive uses the uncorrected reference dynamics");
            }
            Box::new(Forwardstepping::new(spec, shape, reference(av)?, FsKind::Adaptive))
        }
        Variant::FsPlain => Box::new(Forwardstepping::new(spec, shape, reference(Availability::Full)?, FsKind::Plain)),
        Variant::FsKnown => {
            let theta = spec
                .theta_known
                .clone()
                .ok_or_else(|| ControlError::Config("fs_known needs the parameter vector".into()))?;
            if theta.len() != p {
                return config_err(format!("known parameters need {p} entries"));
            }
            Box::new(Forwardstepping::new(spec, shape, reference(Availability::FullCorrected)?, FsKind::Known(theta)))
        }
        Variant::FsNldamp => {
            Box::new(Forwardstepping::new(spec, shape, reference(Availability::FullCorrected)?, FsKind::NlDamp))
        }
        Variant::FsPassive => {
            Box::new(Forwardstepping::new(spec, shape, reference(Availability::FullCorrected)?, FsKind::Passive))
        }
        Variant::PidReformulated => Box::new(Pid::new(g, n, spec.pid_shadow)),
        Variant::PidTextbook => Box::new(PidTextbook { gains: g.clone(), n }),
        Variant::FsFwdAdapt => Box::new(FwdAdapt::new(spec, shape, reference(Availability::FullCorrected)?)?),
        Variant::StackedSingle => Box::new(StackedSingle::new(spec, shape, reference(Availability::FullCorrected)?)?),
        Variant::StackedSeparated => {
            Box::new(StackedSeparated::new(spec, shape, reference(Availability::FullCorrected)?)?)
        }
    })
}

fn operator_params<'a>(spec: &'a ControllerSpec, c: usize) -> OperatorParams<'a> {
    let g = &spec.gains;
    OperatorParams {
        coeffs: &spec.coeffs,
        star: g.star,
        alpha_star: g.alpha_star,
        k: g.k[c],
        lambda: g.lambda_ref[c],
        kappa_star: g.kappa_star_coeffs,
        hstar_den: &g.hstar_den,
    }
}

fn channel_filters(spec: &ControllerSpec, n: usize, kind: OperatorKind) -> Result<Vec<RationalFilter>, ControlError> {
    (0..n).map(|c| Ok(named_operator(kind, &operator_params(spec, c))?)).collect()
}

// ---------------------------------------------------------------------------
// Single-reference family: adaptive, plain, known, nonlinear damping, passive

#[derive(Debug, Clone)]
enum FsKind {
    Adaptive,
    Plain,
    Known(DVector<f64>),
    NlDamp,
    Passive,
}

struct Forwardstepping {
    kind: FsKind,
    gains: GainSet,
    shape: Arc<dyn RegressorShape>,
    reference: Realization,
    theta_hat0: DVector<f64>,
    r_ref: Range<usize>,
    r_theta: Range<usize>,
    r_xi: Range<usize>,
    len: usize,
}

impl Forwardstepping {
    fn new(spec: &ControllerSpec, shape: Arc<dyn RegressorShape>, reference: Realization, kind: FsKind) -> Self {
        let p = shape.param_count();
        let mut l = Layout::default();
        let r_ref = l.take(reference.state_len());
        let r_theta = l.take(if matches!(kind, FsKind::Adaptive) { p } else { 0 });
        let r_xi = l.take(if matches!(kind, FsKind::Passive) { p } else { 0 });
        Self {
            kind,
            gains: spec.gains.clone(),
            shape,
            reference,
            theta_hat0: spec.theta_hat0.clone(),
            r_ref,
            r_theta,
            r_xi,
            len: l.len,
        }
    }

    fn theta_hat(&self, x: &[f64]) -> DVector<f64> {
        match &self.kind {
            FsKind::Adaptive => vec_of(x, &self.r_theta),
            FsKind::Known(t) => t.clone(),
            _ => self.theta_hat0.clone(),
        }
    }
}

fn ref_inputs<'a>(meas: &'a Measurements) -> RefInputs<'a> {
    RefInputs { q: meas.q, qdot: meas.qdot, qd: meas.qd, qd_dot: meas.qd_dot, qd_ddot: meas.qd_ddot }
}

impl Controller for Forwardstepping {
    fn variant(&self) -> Variant {
        match self.kind {
            FsKind::Adaptive => Variant::FsAdaptive,
            FsKind::Plain => Variant::FsPlain,
            FsKind::Known(_) => Variant::FsKnown,
            FsKind::NlDamp => Variant::FsNldamp,
            FsKind::Passive => Variant::FsPassive,
        }
    }

    fn availability(&self) -> Availability {
        self.reference.config().availability
    }

    fn state_len(&self) -> usize {
        self.len
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        self.reference.init(&ref_inputs(meas), &mut x[self.r_ref.clone()])?;
        x[self.r_theta.clone()].copy_from_slice(&self.theta_hat0.as_slice()[..self.r_theta.len()]);
        x[self.r_xi.clone()].fill(0.0);
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let g = &self.gains;
        let xr = &x[self.r_ref.clone()];
        let zdot = self.reference.derivative(xr, &ref_inputs(meas), &mut dx[self.r_ref.clone()])?;
        let z = self.reference.z(xr);
        let s = meas.qdot - &z;
        let ks = dmul(&g.k, &s);
        if let FsKind::Plain = self.kind {
            return Ok(Output {
                tau: -ks,
                s,
                zeta: z,
                zeta_dot: zdot,
                regressor: None,
                theta_hat: None,
                freq_hat: vec![],
                xi: None,
                aux: vec![],
            });
        }
        let y = self.shape.regressor(meas.q, meas.qdot, &z, &zdot);
        let theta = self.theta_hat(x);
        let mut tau = -ks + &y * &theta;
        let mut xi_out = None;
        match self.kind {
            FsKind::Adaptive => put(dx, &self.r_theta, &gradient_update(&g.gamma, &y, &s)),
            FsKind::NlDamp => tau -= &y * (y.transpose() * &s) * g.lambda_d,
            FsKind::Passive => {
                let xi = vec_of(x, &self.r_xi);
                tau -= &y * &xi * g.lambda_d;
                put(dx, &self.r_xi, &((y.transpose() * &s - &xi) * g.lambda));
                xi_out = Some(xi);
            }
            _ => {}
        }
        Ok(Output {
            tau,
            s,
            zeta: z,
            zeta_dot: zdot,
            regressor: Some(y),
            theta_hat: Some(theta),
            freq_hat: vec![],
            xi: xi_out,
            aux: vec![],
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let g = &self.gains;
        let ks = dmul(&g.k, &out.s);
        match &self.kind {
            FsKind::Plain => {
                // M q̈ + C q̇ + g = −K s + τ*
                let lhs = model.inertia(meas.q) * qddot
                    + model.coriolis(meas.q, meas.qdot) * meas.qdot
                    + model.gravity(meas.q);
                vec![("plant_loop", (lhs + ks - tau_star).amax())]
            }
            FsKind::Known(_) => vec![("input_loop", (input_side(model, meas, qddot, out) + ks - tau_star).amax())],
            kind => {
                let y = out.regressor.as_ref().expect("regressor present");
                let dtheta = out.theta_hat.as_ref().expect("estimate present") - model.theta();
                let mut rhs = -ks + y * &dtheta + tau_star;
                match kind {
                    FsKind::NlDamp => rhs -= y * (y.transpose() * &out.s) * g.lambda_d,
                    FsKind::Passive => rhs -= y * out.xi.as_ref().expect("xi present") * g.lambda_d,
                    _ => {}
                }
                let mut r = vec![("input_loop", (input_side(model, meas, qddot, out) - rhs).amax())];
                if let FsKind::Adaptive = kind {
                    // V̇ from the signals against −sᵀKs (Property 2 makes them equal when τ* = 0)
                    let mds = model.inertia(meas.q) * (qddot - &out.zeta_dot);
                    let mdot = model.inertia_dot(meas.q, meas.qdot);
                    let theta_rate = gradient_update(&g.gamma, y, &out.s);
                    let vdot = out.s.dot(&mds)
                        + 0.5 * out.s.dot(&(mdot * &out.s))
                        + (0..dtheta.len()).map(|i| dtheta[i] * theta_rate[i] / g.gamma[i]).sum::<f64>();
                    let target = -out.s.dot(&dmul(&g.k, &out.s)) + out.s.dot(tau_star);
                    r.push(("vdot", (vdot - target).abs() / target.abs().max(1e-12)));
                }
                r
            }
        }
    }

    fn lyapunov(&self, out: &Output, model: &dyn Manipulator, meas: &Measurements) -> Lyapunov {
        match self.kind {
            FsKind::Adaptive => {
                let dtheta = out.theta_hat.as_ref().expect("estimate present") - model.theta();
                let v = 0.5 * out.s.dot(&(model.inertia(meas.q) * &out.s))
                    + 0.5 * (0..dtheta.len()).map(|i| dtheta[i] * dtheta[i] / self.gains.gamma[i]).sum::<f64>();
                Lyapunov::Value { v, v_star: None }
            }
            FsKind::Passive => passive_lyapunov(model, meas, out, &self.gains),
            _ => Lyapunov::Unsupported,
        }
    }
}

// ---------------------------------------------------------------------------
// PID in reference-dynamics form and its textbook counterpart

struct Pid {
    gains: GainSet,
    n: usize,
    shadow: bool,
}

impl Pid {
    fn new(g: &GainSet, n: usize, shadow: bool) -> Self {
        Self { gains: g.clone(), n, shadow }
    }
}

fn textbook_pid(g: &GainSet, meas: &Measurements, integral: &DVector<f64>) -> DVector<f64> {
    -(dmul(&g.kd, &meas.dqdot()) + dmul(&g.kp, &meas.dq()) + dmul(&g.ki, integral))
}

impl Controller for Pid {
    fn variant(&self) -> Variant {
        Variant::PidReformulated
    }

    fn availability(&self) -> Availability {
        Availability::Full
    }

    fn state_len(&self) -> usize {
        if self.shadow {
            2 * self.n
        } else {
            self.n
        }
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        let g = &self.gains;
        let dq = meas.dq();
        for i in 0..self.n {
            x[i] = meas.qd_dot()[i] - g.kp[i] / g.kd[i] * dq[i];
        }
        x[self.n..].fill(0.0);
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let (g, n) = (&self.gains, self.n);
        let z = DVector::from_column_slice(&x[..n]);
        let (dq, dqdot) = (meas.dq(), meas.dqdot());
        let zdot = meas.qd_ddot() - DVector::from_fn(n, |i, _| (g.kp[i] * dqdot[i] + g.ki[i] * dq[i]) / g.kd[i]);
        dx[..n].copy_from_slice(zdot.as_slice());
        let s = meas.qdot - &z;
        let tau = -dmul(&g.kd, &s);
        let mut aux = vec![];
        if self.shadow {
            let integral = DVector::from_column_slice(&x[n..]);
            dx[n..].copy_from_slice(dq.as_slice());
            aux.push(("tau_textbook", textbook_pid(g, meas, &integral)));
        }
        Ok(Output {
            tau,
            s,
            zeta: z,
            zeta_dot: zdot,
            regressor: None,
            theta_hat: None,
            freq_hat: vec![],
            xi: None,
            aux,
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let g = &self.gains;
        // K_D Δq̈ + K_P Δq̇ + K_I Δq = K_D ṡ
        let sdot = qddot - &out.zeta_dot;
        let first = dmul(&g.kd, &(qddot - meas.qd_ddot())) + dmul(&g.kp, &meas.dqdot()) + dmul(&g.ki, &meas.dq())
            - dmul(&g.kd, &sdot);
        // M q̈ + C q̇ + g − τ* = −K_D s
        let second = model.inertia(meas.q) * qddot
            + model.coriolis(meas.q, meas.qdot) * meas.qdot
            + model.gravity(meas.q)
            - tau_star
            + dmul(&g.kd, &out.s);
        vec![("error_loop", first.amax()), ("plant_loop", second.amax())]
    }
}

struct PidTextbook {
    gains: GainSet,
    n: usize,
}

impl Controller for PidTextbook {
    fn variant(&self) -> Variant {
        Variant::PidTextbook
    }

    fn availability(&self) -> Availability {
        Availability::Velocity
    }

    fn state_len(&self) -> usize {
        self.n
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        x.fill(0.0);
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let integral = DVector::from_column_slice(x);
        let dq = meas.dq();
        dx.copy_from_slice(dq.as_slice());
        let zero = DVector::zeros(self.n);
        Ok(Output {
            tau: textbook_pid(&self.gains, meas, &integral),
            s: meas.dqdot(),
            zeta: meas.qd_dot().clone(),
            zeta_dot: zero,
            regressor: None,
            theta_hat: None,
            freq_hat: vec![],
            xi: None,
            aux: vec![],
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let lhs = model.inertia(meas.q) * qddot
            + model.coriolis(meas.q, meas.qdot) * meas.qdot
            + model.gravity(meas.q);
        vec![("plant_loop", (lhs - &out.tau - tau_star).amax())]
    }
}

// ---------------------------------------------------------------------------
// Shared pieces of the q_d* based variants

/// `(q_d*, q̇_d*)` states and the Eq.-56-style second-order law.
struct DesiredStar {
    r_pos: Range<usize>,
    r_vel: Range<usize>,
}

impl DesiredStar {
    fn new(l: &mut Layout, n: usize) -> Self {
        Self { r_pos: l.take(n), r_vel: l.take(n) }
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) {
        x[self.r_pos.clone()].copy_from_slice(meas.qd.as_slice());
        x[self.r_vel.clone()].copy_from_slice(meas.qd_dot().as_slice());
    }

    /// Returns `(q_d*, q̇_d*, q̈_d*)` and writes the two derivative blocks.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        x: &[f64],
        meas: &Measurements,
        coeffs: [f64; 2],
        h: &DVector<f64>,
        w: &DMatrix<f64>,
        e: &DVector<f64>,
        lambda_d_star: f64,
        dx: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let pos = vec_of(x, &self.r_pos);
        let vel = vec_of(x, &self.r_vel);
        let acc = meas.qd_ddot() + (meas.qd_dot() - &vel) * coeffs[1] + (meas.qd - &pos) * coeffs[0] + h
            - w * (w.transpose() * e) * lambda_d_star;
        put(dx, &self.r_pos, &vel);
        put(dx, &self.r_vel, &acc);
        (pos, vel, acc)
    }
}

fn star_inputs<'a>(meas: &'a Measurements, pos: &'a DVector<f64>, vel: &'a DVector<f64>, acc: &'a DVector<f64>) -> RefInputs<'a> {
    RefInputs { q: meas.q, qdot: meas.qdot, qd: pos, qd_dot: Some(vel), qd_ddot: Some(acc) }
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn as_vector(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn passive_rhs(out: &Output, model: &dyn Manipulator, g: &GainSet, tau_star: &DVector<f64>) -> DVector<f64> {
    let y = out.regressor.as_ref().expect("regressor present");
    let dtheta = out.theta_hat.as_ref().expect("estimate present") - model.theta();
    -dmul(&g.k, &out.s) + y * dtheta - y * out.xi.as_ref().expect("xi present") * g.lambda_d + tau_star
}

fn check_coupling(name: &str, got: [f64; 2], rate: f64) -> Result<(), ControlError> {
    let want = [rate * rate, 2.0 * rate];
    if got != want {
        return config_err(format!("{name} must equal [r², 2r] = {want:?} for rate {rate}, got {got:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forwardstepping adaptation

struct FwdAdapt {
    gains: GainSet,
    shape: Arc<dyn RegressorShape>,
    reference: Realization,
    theta_hat0: DVector<f64>,
    r_ref: Range<usize>,
    r_xi: Range<usize>,
    r_theta: Range<usize>,
    star: DesiredStar,
    gy: FilterBank,
    r_gy: Range<usize>,
    gyt: FilterBank,
    r_gyt: Range<usize>,
    len: usize,
}

impl FwdAdapt {
    fn new(spec: &ControllerSpec, shape: Arc<dyn RegressorShape>, reference: Realization) -> Result<Self, ControlError> {
        let (n, p) = (shape.dof(), shape.param_count());
        check_coupling("star_coeffs", spec.gains.star, spec.gains.alpha_star)?;
        let g = channel_filters(spec, n, OperatorKind::G)?;
        let gy = FilterBank::per_row(g.clone(), p)?;
        let gyt = FilterBank::per_row(g, 1)?;
        let mut l = Layout::default();
        let r_ref = l.take(reference.state_len());
        let r_xi = l.take(p);
        let r_theta = l.take(p);
        let star = DesiredStar::new(&mut l, n);
        let r_gy = l.take(gy.state_len());
        let r_gyt = l.take(gyt.state_len());
        Ok(Self {
            gains: spec.gains.clone(),
            shape,
            reference,
            theta_hat0: spec.theta_hat0.clone(),
            r_ref,
            r_xi,
            r_theta,
            star,
            gy,
            r_gy,
            gyt,
            r_gyt,
            len: l.len,
        })
    }
}

impl Controller for FwdAdapt {
    fn variant(&self) -> Variant {
        Variant::FsFwdAdapt
    }

    fn availability(&self) -> Availability {
        Availability::Full
    }

    fn state_len(&self) -> usize {
        self.len
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        x.fill(0.0);
        self.star.init(meas, x);
        let inp = star_inputs(meas, meas.qd, meas.qd_dot(), meas.qd_ddot());
        self.reference.init(&inp, &mut x[self.r_ref.clone()])?;
        x[self.r_theta.clone()].copy_from_slice(self.theta_hat0.as_slice());
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let g = &self.gains;
        let (n, p) = (self.shape.dof(), self.shape.param_count());
        let theta = vec_of(x, &self.r_theta);
        let xi = vec_of(x, &self.r_xi);
        // G(p) is strictly proper, so its outputs depend on state alone
        let w = self.gy.output(0, &x[self.r_gy.clone()], &DMatrix::zeros(n, p));
        let g_yt = as_vector(self.gyt.output(0, &x[self.r_gyt.clone()], &DMatrix::zeros(n, 1)));
        let h = &w * &theta - g_yt;
        let e = meas.dqdot() + meas.dq() * g.alpha_star;
        let (pos, vel, acc) = self.star.step(x, meas, g.star, &h, &w, &e, g.lambda_d_star, dx);
        let xr = &x[self.r_ref.clone()];
        let zdot = self.reference.derivative(xr, &star_inputs(meas, &pos, &vel, &acc), &mut dx[self.r_ref.clone()])?;
        let z = self.reference.z(xr);
        let s = meas.qdot - &z;
        let y = self.shape.regressor(meas.q, meas.qdot, &z, &zdot);
        let yt = &y * &theta;
        let tau = -dmul(&g.k, &s) + &yt - &y * &xi * g.lambda_d;
        put(dx, &self.r_xi, &((y.transpose() * &s - &xi) * g.lambda));
        put(dx, &self.r_theta, &gradient_update(&g.gamma, &w, &e));
        self.gy.derivative(&x[self.r_gy.clone()], &y, &mut dx[self.r_gy.clone()]);
        self.gyt.derivative(&x[self.r_gyt.clone()], &column(&yt), &mut dx[self.r_gyt.clone()]);
        Ok(Output {
            tau,
            s,
            zeta: z,
            zeta_dot: zdot,
            regressor: Some(y),
            theta_hat: Some(theta),
            freq_hat: vec![],
            xi: Some(xi),
            aux: vec![("qd_star", pos), ("h", h), ("e", e)],
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let rhs = passive_rhs(out, model, &self.gains, tau_star);
        vec![("input_loop", (input_side(model, meas, qddot, out) - rhs).amax())]
    }

    fn lyapunov(&self, out: &Output, model: &dyn Manipulator, meas: &Measurements) -> Lyapunov {
        passive_lyapunov(model, meas, out, &self.gains)
    }
}

// ---------------------------------------------------------------------------
// Stacked reference dynamics, single unknown frequency

struct StackedSingle {
    gains: GainSet,
    shape: Arc<dyn RegressorShape>,
    reference: Realization,
    theta_hat0: DVector<f64>,
    freq0: f64,
    freeze: bool,
    r_ref: Range<usize>,
    r_chi: Range<usize>,
    r_chid: Range<usize>,
    r_xi: Range<usize>,
    r_theta: Range<usize>,
    r_freq: Range<usize>,
    star: DesiredStar,
    g1: FilterBank,
    r_g1_psi: Range<usize>,
    r_g1_psit: Range<usize>,
    g23y: FilterBank,
    r_g23_y: Range<usize>,
    g23v: FilterBank,
    r_g23_yt: Range<usize>,
    len: usize,
}

impl StackedSingle {
    fn new(spec: &ControllerSpec, shape: Arc<dyn RegressorShape>, reference: Realization) -> Result<Self, ControlError> {
        let (n, p) = (shape.dof(), shape.param_count());
        if spec.coeffs.ell() < 2 {
            return config_err("stacked_single needs ℓ ≥ 2");
        }
        check_coupling("star_coeffs", spec.gains.star, spec.gains.alpha_star)?;
        if spec.gains.gamma_freq.is_empty() || spec.gains.gamma_freq[0] <= 0.0 {
            return config_err("stacked_single needs a positive gamma_freq");
        }
        let g1 = FilterBank::per_row(channel_filters(spec, n, OperatorKind::G1)?, 1)?;
        let g2 = channel_filters(spec, n, OperatorKind::G2)?;
        let g3 = channel_filters(spec, n, OperatorKind::G3)?;
        let mut g23y = FilterBank::per_row(g2.clone(), p)?;
        g23y.add_output(g3.clone())?;
        let mut g23v = FilterBank::per_row(g2, 1)?;
        g23v.add_output(g3)?;
        let mut l = Layout::default();
        let r_ref = l.take(reference.state_len());
        let r_chi = l.take(n);
        let r_chid = l.take(n);
        let r_xi = l.take(p);
        let r_theta = l.take(p);
        let r_freq = l.take(1);
        let star = DesiredStar::new(&mut l, n);
        let r_g1_psi = l.take(g1.state_len());
        let r_g1_psit = l.take(g1.state_len());
        let r_g23_y = l.take(g23y.state_len());
        let r_g23_yt = l.take(g23v.state_len());
        Ok(Self {
            gains: spec.gains.clone(),
            shape,
            reference,
            theta_hat0: spec.theta_hat0.clone(),
            freq0: spec.freq_hat0.first().copied().unwrap_or(0.0),
            freeze: spec.freeze_freq,
            r_ref,
            r_chi,
            r_chid,
            r_xi,
            r_theta,
            r_freq,
            star,
            g1,
            r_g1_psi,
            r_g1_psit,
            g23y,
            r_g23_y,
            g23v,
            r_g23_yt,
            len: l.len,
        })
    }
}

impl Controller for StackedSingle {
    fn variant(&self) -> Variant {
        Variant::StackedSingle
    }

    fn availability(&self) -> Availability {
        Availability::Full
    }

    fn state_len(&self) -> usize {
        self.len
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        x.fill(0.0);
        self.star.init(meas, x);
        let inp = star_inputs(meas, meas.qd, meas.qd_dot(), meas.qd_ddot());
        self.reference.init(&inp, &mut x[self.r_ref.clone()])?;
        x[self.r_chi.clone()].copy_from_slice(meas.q.as_slice());
        x[self.r_chid.clone()].copy_from_slice(meas.qdot.as_slice());
        x[self.r_theta.clone()].copy_from_slice(self.theta_hat0.as_slice());
        x[self.r_freq.start] = self.freq0;
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let g = &self.gains;
        let (n, p) = (self.shape.dof(), self.shape.param_count());
        let theta = vec_of(x, &self.r_theta);
        let xi = vec_of(x, &self.r_xi);
        let th = x[self.r_freq.start];
        let chi = vec_of(x, &self.r_chi);
        let chid = vec_of(x, &self.r_chid);
        let psi = meas.q - &chi;
        let psit = &psi * th;
        let w1 = as_vector(self.g1.output(0, &x[self.r_g1_psi.clone()], &column(&psi)));
        let g1_psit = as_vector(self.g1.output(0, &x[self.r_g1_psit.clone()], &column(&psit)));
        let zeros_y = DMatrix::zeros(n, p);
        let zeros_v = DMatrix::zeros(n, 1);
        let g2y = self.g23y.output(0, &x[self.r_g23_y.clone()], &zeros_y);
        let g3y = self.g23y.output(1, &x[self.r_g23_y.clone()], &zeros_y);
        let g2yt = as_vector(self.g23v.output(0, &x[self.r_g23_yt.clone()], &zeros_v));
        let g3yt = as_vector(self.g23v.output(1, &x[self.r_g23_yt.clone()], &zeros_v));
        let h = &w1 * th - g1_psit + (&g2y * &theta - g2yt) * th + &g3y * &theta - g3yt;
        let w_star = &g2y * th + &g3y;
        let e = meas.dqdot() + meas.dq() * g.alpha_star;
        let (pos, vel, acc) = self.star.step(x, meas, g.star, &h, &w_star, &e, g.lambda_d_star, dx);
        let xr = &x[self.r_ref.clone()];
        let zdot = self.reference.derivative(xr, &star_inputs(meas, &pos, &vel, &acc), &mut dx[self.r_ref.clone()])?;
        let z = self.reference.z(xr);
        let chidd = &zdot + &psi * th;
        let psid = meas.qdot - &chid;
        let chid_star = &chid - &psi * g.alpha_star;
        let chidd_star = &chidd - &psid * g.alpha_star;
        let s_star = meas.qdot - &chid_star;
        let y = self.shape.regressor(meas.q, meas.qdot, &chid_star, &chidd_star);
        let yt = &y * &theta;
        let tau = -dmul(&g.k, &s_star) + &yt - &y * &xi * g.lambda_d;
        put(dx, &self.r_chi, &chid);
        put(dx, &self.r_chid, &chidd);
        put(dx, &self.r_xi, &((y.transpose() * &s_star - &xi) * g.lambda));
        put(dx, &self.r_theta, &gradient_update(&g.gamma, &w_star, &e));
        dx[self.r_freq.start] = if self.freeze { 0.0 } else { -g.gamma_freq[0] * w1.dot(&e) };
        self.g1.derivative(&x[self.r_g1_psi.clone()], &column(&psi), &mut dx[self.r_g1_psi.clone()]);
        self.g1.derivative(&x[self.r_g1_psit.clone()], &column(&psit), &mut dx[self.r_g1_psit.clone()]);
        self.g23y.derivative(&x[self.r_g23_y.clone()], &y, &mut dx[self.r_g23_y.clone()]);
        self.g23v.derivative(&x[self.r_g23_yt.clone()], &column(&yt), &mut dx[self.r_g23_yt.clone()]);
        let s = meas.qdot - &z;
        Ok(Output {
            tau,
            s: s_star,
            zeta: chid_star,
            zeta_dot: chidd_star,
            regressor: Some(y),
            theta_hat: Some(theta),
            freq_hat: vec![th],
            xi: Some(xi),
            aux: vec![
                ("psi", psi),
                ("psi_dot", psid),
                ("s_ref", s),
                ("z_dot", zdot),
                ("chi_ddot", chidd),
                ("qd_star", pos),
            ],
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let aux = |k| out.aux(k).expect("aux signal present");
        let (psi, psid) = (aux("psi"), aux("psi_dot"));
        let th = out.freq_hat[0];
        // ψ̇ = −α* ψ + s*
        let third = psid + psi * self.gains.alpha_star - &out.s;
        // ṡ = θ̂ ψ + ψ̈ with ṡ = q̈ − ż and ψ̈ = q̈ − χ̈
        let second = (qddot - aux("z_dot")) - psi * th - (qddot - aux("chi_ddot"));
        let rhs = passive_rhs(out, model, &self.gains, tau_star);
        vec![
            ("chi_loop", second.amax()),
            ("psi_loop", third.amax()),
            ("input_loop", (input_side(model, meas, qddot, out) - rhs).amax()),
        ]
    }

    fn lyapunov(&self, out: &Output, model: &dyn Manipulator, meas: &Measurements) -> Lyapunov {
        passive_lyapunov(model, meas, out, &self.gains)
    }
}

// ---------------------------------------------------------------------------
// Stacked reference dynamics, n* separated frequencies

struct StackedSeparated {
    gains: GainSet,
    shape: Arc<dyn RegressorShape>,
    reference: Realization,
    theta_hat0: DVector<f64>,
    freq0: Vec<f64>,
    freeze: bool,
    n_star: usize,
    r_ref: Range<usize>,
    star: DesiredStar,
    r_chi1: Range<usize>,
    r_chi1d: Range<usize>,
    r_int: Range<usize>,
    r_beta: Range<usize>,
    r_betad: Range<usize>,
    r_xi: Range<usize>,
    r_theta: Range<usize>,
    r_freq: Range<usize>,
    wbank: FilterBank,
    r_w: Range<usize>,
    fy: FilterBank,
    r_fy: Range<usize>,
    fv: FilterBank,
    r_fv: Range<usize>,
    oy: FilterBank,
    r_oy: Range<usize>,
    ov: FilterBank,
    r_ov: Range<usize>,
    len: usize,
}

impl StackedSeparated {
    fn new(spec: &ControllerSpec, shape: Arc<dyn RegressorShape>, reference: Realization) -> Result<Self, ControlError> {
        let (n, p) = (shape.dof(), shape.param_count());
        let g = &spec.gains;
        let ns = spec.n_star;
        if ns == 0 {
            return config_err("stacked_separated needs n_star ≥ 1");
        }
        let m = 2 * ns;
        check_coupling("dstar_coeffs", g.dstar, g.alpha_star_star)?;
        check_coupling("kappa_star_coeffs", g.kappa_star_coeffs, g.kappa_star)?;
        if g.hstar_den.len() != m {
            return config_err(format!("hstar_den needs {m} coefficients for n_star = {ns}"));
        }
        if g.gamma_freq.len() != ns || g.gamma_freq.iter().any(|x| *x <= 0.0) {
            return config_err(format!("gamma_freq needs {ns} positive entries"));
        }
        if !(spec.freq_hat0.is_empty() || spec.freq_hat0.len() == ns) {
            return config_err(format!("freq_hat0 needs {ns} entries"));
        }
        let b = Polynomial::monic(&g.kappa_star_coeffs);
        let a_star = Polynomial::monic(&g.hstar_den);
        let h_star = named_operator(OperatorKind::HStar, &operator_params(spec, 0))?;
        let w_outputs: Vec<RationalFilter> = (1..=ns)
            .map(|i| h_star.with_numerator(b.mul(&Polynomial::power(2 * i - 2))))
            .collect::<Result<_, _>>()?;
        let mut wbank = FilterBank::uniform(w_outputs[0].clone(), n, 1);
        for w in &w_outputs[1..] {
            wbank.add_output(vec![w.clone(); n])?;
        }
        // F_i = p^{2i−2} H* G2* Λ (p + k)^{-1}, i = 1..n*, and F_0 with p^{2n*}
        let ell = spec.coeffs.ell();
        let mut f_rows: Vec<Vec<RationalFilter>> = vec![Vec::new(); ns + 1];
        for c in 0..n {
            let den = a_star.mul(&spec.coeffs.polynomial()).mul(&Polynomial::monic(&[g.k[c]]));
            let common = b.mul(&Polynomial::power(ell - 1)).scale(g.lambda_ref[c]);
            let base = RationalFilter::stable(common.clone(), den)?;
            for (i, row) in f_rows.iter_mut().enumerate() {
                let shift = if i == ns { m } else { 2 * i };
                row.push(base.with_numerator(common.mul(&Polynomial::power(shift)))?);
            }
        }
        let mut fy = FilterBank::per_row(f_rows[0].clone(), p)?;
        let mut fv = FilterBank::per_row(f_rows[0].clone(), 1)?;
        for row in &f_rows[1..] {
            fy.add_output(row.clone())?;
            fv.add_output(row.clone())?;
        }
        let outer = RationalFilter::stable(Polynomial::power(2), b)?;
        let oy = FilterBank::uniform(outer.clone(), n, p);
        let ov = FilterBank::uniform(outer, n, 1);
        let mut l = Layout::default();
        let r_ref = l.take(reference.state_len());
        let star = DesiredStar::new(&mut l, n);
        let r_chi1 = l.take(n);
        let r_chi1d = l.take(n);
        let r_int = l.take(m * n);
        let r_beta = l.take(n);
        let r_betad = l.take(n);
        let r_xi = l.take(p);
        let r_theta = l.take(p);
        let r_freq = l.take(ns);
        let r_w = l.take(wbank.state_len());
        let r_fy = l.take(fy.state_len());
        let r_fv = l.take(fv.state_len());
        let r_oy = l.take(oy.state_len());
        let r_ov = l.take(ov.state_len());
        Ok(Self {
            gains: g.clone(),
            shape,
            reference,
            theta_hat0: spec.theta_hat0.clone(),
            freq0: if spec.freq_hat0.is_empty() { vec![0.0; ns] } else { spec.freq_hat0.clone() },
            freeze: spec.freeze_freq,
            n_star: ns,
            r_ref,
            star,
            r_chi1,
            r_chi1d,
            r_int,
            r_beta,
            r_betad,
            r_xi,
            r_theta,
            r_freq,
            wbank,
            r_w,
            fy,
            r_fy,
            fv,
            r_fv,
            oy,
            r_oy,
            ov,
            r_ov,
            len: l.len,
        })
    }

    fn integrator(&self, x: &[f64], j: usize) -> DVector<f64> {
        let n = self.shape.dof();
        let start = self.r_int.start + (j - 1) * n;
        DVector::from_column_slice(&x[start..start + n])
    }
}

impl Controller for StackedSeparated {
    fn variant(&self) -> Variant {
        Variant::StackedSeparated
    }

    fn availability(&self) -> Availability {
        Availability::Full
    }

    fn state_len(&self) -> usize {
        self.len
    }

    fn init(&self, meas: &Measurements, x: &mut [f64]) -> Result<(), ControlError> {
        meas.check(self.availability())?;
        x.fill(0.0);
        self.star.init(meas, x);
        x[self.r_chi1.clone()].copy_from_slice(meas.q.as_slice());
        x[self.r_chi1d.clone()].copy_from_slice(meas.qdot.as_slice());
        // with ψ_1 = 0 and an empty chain, χ_2 = q and χ̇_2 = q̇
        let zero = DVector::zeros(meas.q.len());
        let inp = RefInputs { q: meas.q, qdot: meas.qdot, qd: meas.q, qd_dot: Some(meas.qdot), qd_ddot: Some(&zero) };
        self.reference.init(&inp, &mut x[self.r_ref.clone()])?;
        x[self.r_theta.clone()].copy_from_slice(self.theta_hat0.as_slice());
        x[self.r_freq.clone()].copy_from_slice(&self.freq0);
        Ok(())
    }

    fn evaluate(&self, x: &[f64], meas: &Measurements, dx: &mut [f64]) -> Result<Output, ControlError> {
        meas.check(self.availability())?;
        let g = &self.gains;
        let (n, p, ns) = (self.shape.dof(), self.shape.param_count(), self.n_star);
        let m = 2 * ns;
        let a = &g.hstar_den;
        let [k0, k1] = g.kappa_star_coeffs;
        let theta = vec_of(x, &self.r_theta);
        let xi = vec_of(x, &self.r_xi);
        let freq: Vec<f64> = x[self.r_freq.clone()].to_vec();

        // W* and h from the F and O banks; F is strictly proper, O is biproper
        let zeros_y = DMatrix::zeros(n, p);
        let zeros_v = DMatrix::zeros(n, 1);
        let xfy = &x[self.r_fy.clone()];
        let xfv = &x[self.r_fv.clone()];
        let mut vy = self.fy.output(ns, xfy, &zeros_y);
        let mut vv = self.fv.output(ns, xfv, &zeros_v);
        for (i, th) in freq.iter().enumerate() {
            vy += self.fy.output(i, xfy, &zeros_y) * *th;
            vv += self.fv.output(i, xfv, &zeros_v) * *th;
        }
        let w_star = self.oy.output(0, &x[self.r_oy.clone()], &vy);
        let h = &w_star * &theta - as_vector(self.ov.output(0, &x[self.r_ov.clone()], &vv));
        let e2 = meas.dqdot() + meas.dq() * g.alpha_star_star;
        let (pos, vel, acc) = self.star.step(x, meas, g.dstar, &h, &w_star, &e2, g.lambda_d_star, dx);

        // χ_1 layer
        let chi1 = vec_of(x, &self.r_chi1);
        let chi1d = vec_of(x, &self.r_chi1d);
        let chi1dd = &acc - (meas.qdot - &vel) * g.dstar[1] - (meas.q - &pos) * g.dstar[0];
        let psi1 = meas.q - &chi1;
        let psi1d = meas.qdot - &chi1d;

        // χ_2 chain: ψ_2 = (A*/p^m)[ψ_1 − β], β = B⁻¹ Σ θ̂_i W_i
        let beta = vec_of(x, &self.r_beta);
        let betad = vec_of(x, &self.r_betad);
        let e = &psi1 - &beta;
        let mut chi2 = &chi1 + &beta;
        let mut chi2d = &chi1d + &betad - &e * a[m - 1];
        for j in 1..=m {
            let ij = self.integrator(x, j);
            chi2 -= &ij * a[m - j];
            if j < m {
                chi2d -= &ij * a[m - 1 - j];
            }
        }
        let psi2 = meas.q - &chi2;
        let xw = &x[self.r_w.clone()];
        let w: Vec<DVector<f64>> = (0..ns).map(|i| as_vector(self.wbank.output(i, xw, &column(&psi2)))).collect();
        let u = w.iter().zip(&freq).fold(DVector::zeros(n), |acc, (wi, th)| acc + wi * *th);
        let betadd = &u - &betad * k1 - &beta * k0;
        let ed = &psi1d - &betad;
        let mut chi2dd = &chi1dd + &betadd - &ed * a[m - 1] - &e * a[m - 2];
        for j in 1..=m.saturating_sub(2) {
            chi2dd -= self.integrator(x, j) * a[m - 2 - j];
        }

        // reference and input-side torque
        let xr = &x[self.r_ref.clone()];
        let inp = RefInputs { q: meas.q, qdot: meas.qdot, qd: &chi2, qd_dot: Some(&chi2d), qd_ddot: Some(&chi2dd) };
        let zdot = self.reference.derivative(xr, &inp, &mut dx[self.r_ref.clone()])?;
        let z = self.reference.z(xr);
        let s = meas.qdot - &z;
        let y = self.shape.regressor(meas.q, meas.qdot, &z, &zdot);
        let yt = &y * &theta;
        let tau = -dmul(&g.k, &s) + &yt - &y * &xi * g.lambda_d;

        put(dx, &self.r_chi1, &chi1d);
        put(dx, &self.r_chi1d, &chi1dd);
        let start = self.r_int.start;
        dx[start..start + n].copy_from_slice(e.as_slice());
        for j in 2..=m {
            let prev = self.integrator(x, j - 1);
            let at = start + (j - 1) * n;
            dx[at..at + n].copy_from_slice(prev.as_slice());
        }
        put(dx, &self.r_beta, &betad);
        put(dx, &self.r_betad, &betadd);
        put(dx, &self.r_xi, &((y.transpose() * &s - &xi) * g.lambda));
        put(dx, &self.r_theta, &gradient_update(&g.gamma, &w_star, &e2));
        let e1 = &psi1d + &psi1 * g.kappa_star;
        for i in 0..ns {
            dx[self.r_freq.start + i] = if self.freeze { 0.0 } else { -g.gamma_freq[i] * w[i].dot(&e1) };
        }
        self.wbank.derivative(xw, &column(&psi2), &mut dx[self.r_w.clone()]);
        self.fy.derivative(xfy, &y, &mut dx[self.r_fy.clone()]);
        self.fv.derivative(xfv, &column(&yt), &mut dx[self.r_fv.clone()]);
        self.oy.derivative(&x[self.r_oy.clone()], &vy, &mut dx[self.r_oy.clone()]);
        self.ov.derivative(&x[self.r_ov.clone()], &vv, &mut dx[self.r_ov.clone()]);

        let mut aux = vec![
            ("chi1_ddot", chi1dd),
            ("chi2", chi2),
            ("chi2_dot", chi2d),
            ("chi2_ddot", chi2dd),
            ("psi2", psi2),
            ("qd_star", pos),
            ("qd_star_dot", vel),
            ("qd_star_ddot", acc),
        ];
        const W_NAMES: [&str; 4] = ["w1", "w2", "w3", "w4"];
        for (i, wi) in w.into_iter().enumerate().take(W_NAMES.len()) {
            aux.push((W_NAMES[i], wi));
        }
        Ok(Output {
            tau,
            s,
            zeta: z,
            zeta_dot: zdot,
            regressor: Some(y),
            theta_hat: Some(theta),
            freq_hat: freq,
            xi: Some(xi),
            aux,
        })
    }

    fn residuals(
        &self,
        out: &Output,
        model: &dyn Manipulator,
        meas: &Measurements,
        qddot: &DVector<f64>,
        tau_star: &DVector<f64>,
    ) -> Vec<(&'static str, f64)> {
        let aux = |k| out.aux(k).expect("aux signal present");
        let g = &self.gains;
        // Δq̈* = −α_1** Δq̇* − α_0** Δq* + ψ̈_1 with ψ̈_1 = q̈ − χ̈_1
        let qs = aux("qd_star");
        let qs_dd = aux("qd_star_ddot");
        let first = (qddot - qs_dd) + (meas.qdot - aux("qd_star_dot")) * g.dstar[1] + (meas.q - qs) * g.dstar[0]
            - (qddot - aux("chi1_ddot"));
        let rhs = passive_rhs(out, model, g, tau_star);
        vec![
            ("star_loop", first.amax()),
            ("input_loop", (input_side(model, meas, qddot, out) - rhs).amax()),
        ]
    }

    fn lyapunov(&self, out: &Output, model: &dyn Manipulator, meas: &Measurements) -> Lyapunov {
        passive_lyapunov(model, meas, out, &self.gains)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::manipulator::TwoLinkShape;
    use crate::numerics::Rk4;

    fn spec_of(text: &str, overrides: &[&str]) -> ControllerSpec {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::load(text, &o).unwrap().resolve().unwrap().controller
    }

    fn shape() -> Arc<dyn RegressorShape> {
        Arc::new(TwoLinkShape)
    }

    /// Initialise at the configured start and evaluate once.
    fn first_output(text: &str, overrides: &[&str]) -> Output {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let cfg = ExperimentConfig::load(text, &o).unwrap();
        let r = cfg.resolve().unwrap();
        let c = build(&r.controller, shape()).unwrap();
        let av = c.availability();
        let qd = cfg.trajectory.eval(0.0, 0, 2);
        let qd1 = cfg.trajectory.eval(0.0, 1, 2);
        let qd2 = cfg.trajectory.eval(0.0, 2, 2);
        let meas = Measurements {
            t: 0.0,
            q: &r.q0,
            qdot: &r.qdot0,
            qd: &qd,
            qd_dot: av.needs_velocity().then_some(&qd1),
            qd_ddot: av.needs_acceleration().then_some(&qd2),
        };
        let mut x = vec![0.0; c.state_len()];
        c.init(&meas, &mut x).unwrap();
        let mut dx = vec![0.0; x.len()];
        c.evaluate(&x, &meas, &mut dx).unwrap()
    }

    #[test]
    fn gradient_update_is_minus_gamma_w_transpose_e() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = DVector::from_vec(vec![1.0, 1.0]);
        // Wᵀe = [4, 6]
        assert_eq!(gradient_update(&[1.0, 0.5], &w, &e), DVector::from_vec(vec![-4.0, -3.0]));
    }

    #[test]
    fn adaptation_descends_the_linearised_error() {
        // e = W Δϑ with W frozen: d/dt ½‖e‖² = eᵀ W ϑ̂̇ must be non-positive
        let w = DMatrix::from_row_slice(2, 3, &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4]);
        for dtheta in [[1.0, 0.0, 0.0], [0.2, -3.0, 0.5], [-1.0, 1.0, 1.0]] {
            let e = &w * DVector::from_row_slice(&dtheta);
            let rate = e.dot(&(&w * gradient_update(&[2.0, 2.0, 2.0], &w, &e)));
            assert!(rate <= 0.0, "rate {rate}");
        }
    }

    #[test]
    fn undeclared_derivatives_are_rejected() {
        let c = build(&spec_of("", &["controller.availability=\"position\""]), shape()).unwrap();
        let v = DVector::zeros(2);
        let meas = Measurements { t: 0.0, q: &v, qdot: &v, qd: &v, qd_dot: Some(&v), qd_ddot: None };
        let mut x = vec![0.0; c.state_len()];
        assert!(matches!(c.init(&meas, &mut x), Err(ControlError::Measurement(_))));

        let pid = build(&spec_of("", &["controller.variant=\"pid_textbook\""]), shape()).unwrap();
        let meas = Measurements { t: 0.0, q: &v, qdot: &v, qd: &v, qd_dot: None, qd_ddot: None };
        let mut x = vec![0.0; pid.state_len()];
        assert!(matches!(pid.init(&meas, &mut x), Err(ControlError::Measurement(_))));
    }

    #[test]
    fn torque_ignores_hidden_truths() {
        let base = r#"
[controller]
theta_hat0 = [1.0, 0.4, 0.3, 10.0, 4.0]
n_star = 1
freq_hat0 = [0.5]
[trajectory]
kind = "multisine"
tones = [[[0.4, 0.5, 0.0]], [[0.3, 0.7, 0.5]]]
[run]
q0 = [0.2, -0.1]
qdot0 = [0.1, 0.3]
"#;
        let hidden = ["model.m1=3.0", "model.l2=0.7", "model.g0=1.6", "disturbance.tones=[[[1.0, 2.5, 0.0]], [[1.0, 2.5, 0.0]]]"];
        for v in Variant::ALL {
            if v == Variant::FsKnown {
                continue;
            }
            let var = format!("controller.variant={}", serde_json::to_string(&v).unwrap());
            let a = first_output(base, &[&var]);
            let mut o = vec![var.as_str()];
            o.extend(hidden);
            let b = first_output(base, &o);
            assert_eq!(a.tau, b.tau, "{v:?}");
        }
    }

    #[test]
    fn rest_at_constant_target_gives_zero_torque() {
        let base = "[model]\ng0 = 0.0\n[trajectory]\nkind = \"polynomial\"\npoly = [[0.3], [0.2]]\n";
        let a = first_output(base, &["controller.theta_hat0=[0.0, 0.0, 0.0, 0.0, 0.0]"]);
        assert!(a.tau.amax() < 1e-14, "{}", a.tau);
        let p = first_output(base, &["controller.variant=\"pid_reformulated\""]);
        assert!(p.tau.amax() < 1e-14, "{}", p.tau);
        let t = first_output(base, &["controller.variant=\"pid_textbook\""]);
        assert!(t.tau.amax() < 1e-14, "{}", t.tau);
    }

    fn separated(n_star: &str) -> StackedSeparated {
        let spec = spec_of("", &["controller.variant=\"stacked_separated\"", &format!("controller.n_star={n_star}")]);
        let reference = Realization::new(
            ReferenceConfig::new(spec.coeffs.clone(), Availability::FullCorrected, spec.gains.lambda_ref.clone(), 2).unwrap(),
            2,
        );
        StackedSeparated::new(&spec, shape(), reference).unwrap()
    }

    #[test]
    fn two_frequencies_use_four_integrators_per_joint() {
        assert_eq!(separated("2").r_int.len(), 4 * 2);
        assert_eq!(separated("1").r_int.len(), 2 * 2);
    }

    #[test]
    fn w2_matches_filtering_the_exact_second_derivative() {
        let s = separated("2");
        let h = named_operator(OperatorKind::HStar, &operator_params(&spec_of("", &["controller.variant=\"stacked_separated\"", "controller.n_star=2"]), 0)).unwrap();
        // ψ(0) = ψ̇(0) = 0, so p² commutes with the filter from rest
        let psi = |t: f64| (1.0 - t.cos()).powi(2);
        let psi_dd = |t: f64| 2.0 * t.sin().powi(2) + 2.0 * (1.0 - t.cos()) * t.cos();
        let nb = s.wbank.state_len();
        let nh = h.order();
        let mut x = vec![0.0; nb + nh];
        let mut rk = Rk4::new(x.len());
        let col = |t: f64| DMatrix::from_element(2, 1, psi(t));
        let mut f = |t: f64, x: &[f64], dx: &mut [f64]| {
            s.wbank.derivative(&x[..nb], &col(t), &mut dx[..nb]);
            h.derivative(&x[nb..], psi_dd(t), &mut dx[nb..]);
            Ok(())
        };
        let dt = 1e-3;
        let mut worst = 0.0_f64;
        for k in 0..10_000 {
            let t = k as f64 * dt;
            let w2 = s.wbank.output(1, &x[..nb], &col(t));
            let oracle = h.output(&x[nb..], psi_dd(t));
            worst = worst.max((w2[(0, 0)] - oracle).abs()).max((w2[(1, 0)] - oracle).abs());
            rk.step(&mut f, &mut x, t, dt).unwrap();
        }
        assert!(worst <= 1e-6, "max |W_2 − H*ψ̈| = {worst:e}");
    }

    #[test]
    fn fs_known_needs_parameters_and_stacked_single_needs_ell_two() {
        let mut spec = spec_of("", &["controller.variant=\"fs_known\""]);
        spec.theta_known = None;
        assert!(build(&spec, shape()).is_err());
        let spec = spec_of("", &["controller.variant=\"stacked_single\"", "controller.ell=2"]);
        let mut one = spec.clone();
        one.coeffs = HurwitzCoeffs::new(vec![4.0, 4.0]).unwrap();
        assert!(build(&one, shape()).is_err());
        assert!(build(&spec, shape()).is_ok());
    }
}
