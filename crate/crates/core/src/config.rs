//! Experiment configuration: TOML schema, dotted overrides and resolution.
//!
//! Every key has a default, so an empty file is a valid experiment. Empty lists
//! mean "derive the value" where a derivation exists (documented per field).

use crate::controllers::{ControlError, ControllerSpec, GainSet, Variant};
use crate::filters::diagonal_of;
use crate::manipulator::{ArmParams, Manipulator, ModelFault, RegressorShape, TwoLinkArm, TwoLinkShape};
use crate::numerics::{routh_hurwitz, Polynomial};
use crate::refdyn::{critically_damped_coeffs, scale_coeffs, Availability, HurwitzCoeffs, MAX_ELL};
use crate::signals::{DisturbanceSpec, TrajectorySpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Degrees of freedom of the simulated arm.
pub const DOF: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<ControlError> for ConfigError {
    fn from(e: ControlError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// A gain given as a scalar (times identity), a diagonal, or a full matrix that must be diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl GainValue {
    pub fn resolve(&self, name: &str, n: usize) -> Result<Vec<f64>, ConfigError> {
        let v = match self {
            GainValue::Scalar(x) => vec![*x; n],
            GainValue::Vector(v) => v.clone(),
            GainValue::Matrix(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return invalid(format!("gains.{name}: expected a {n}×{n} matrix"));
                }
                let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                diagonal_of(&m).map_err(|e| ConfigError::Invalid(format!("gains.{name}: {e}")))?
            }
        };
        if v.len() != n {
            return invalid(format!("gains.{name}: expected {n} entries, got {}", v.len()));
        }
        if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return invalid(format!("gains.{name}: entries must be positive, got {v:?}"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
    pub g0: f64,
    /// Test fixture: `flip_coriolis` corrupts the Coriolis matrix.
    pub fault: ModelFault,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = ArmParams::default();
        Self {
            m1: a.m1,
            m2: a.m2,
            l1: a.l1,
            l2: a.l2,
            lc1: a.lc1,
            lc2: a.lc2,
            i1: a.i1,
            i2: a.i2,
            g0: a.g0,
            fault: ModelFault::None,
        }
    }
}

impl ModelConfig {
    pub fn arm_params(&self) -> ArmParams {
        ArmParams {
            m1: self.m1,
            m2: self.m2,
            l1: self.l1,
            l2: self.l2,
            lc1: self.lc1,
            lc2: self.lc2,
            i1: self.i1,
            i2: self.i2,
            g0: self.g0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilityChoice {
    /// The variant's own fixed setting.
    #[default]
    Default,
    Position,
    Velocity,
    Full,
    FullCorrected,
}

impl AvailabilityChoice {
    fn resolve(self) -> Option<Availability> {
        match self {
            AvailabilityChoice::Default => None,
            AvailabilityChoice::Position => Some(Availability::Position),
            AvailabilityChoice::Velocity => Some(Availability::Velocity),
            AvailabilityChoice::Full => Some(Availability::Full),
            AvailabilityChoice::FullCorrected => Some(Availability::FullCorrected),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub availability: AvailabilityChoice,
    pub ell: usize,
    /// Rate of the critically damped coefficient set used when `alphas` is empty.
    pub alpha: f64,
    /// Explicit `[α_0, …, α_ℓ]`; must have `ell + 1` entries when given.
    pub alphas: Vec<f64>,
    /// Time scale applied to the coefficient set.
    pub kappa: f64,
    /// Number of separated frequencies; 0 counts the disturbance tones.
    pub n_star: usize,
    /// Initial parameter estimate; empty means half the true parameters.
    pub theta_hat0: Vec<f64>,
    /// Initial frequency estimates; empty means zeros.
    pub freq_hat0: Vec<f64>,
    pub freeze_freq: bool,
    /// Carry a textbook PID alongside `pid_reformulated` for comparison.
    pub pid_shadow: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FsAdaptive,
            availability: AvailabilityChoice::Default,
            ell: 2,
            alpha: 4.0,
            alphas: Vec::new(),
            kappa: 1.0,
            n_star: 0,
            theta_hat0: Vec::new(),
            freq_hat0: Vec::new(),
            freeze_freq: false,
            pid_shadow: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsConfig {
    pub k: GainValue,
    pub gamma: GainValue,
    pub lambda_d: f64,
    pub lambda: f64,
    pub alpha_star: f64,
    pub lambda_d_star: f64,
    pub alpha_star_star: f64,
    pub kappa_star: f64,
    pub gamma_freq: GainValue,
    pub kd: GainValue,
    pub kp: GainValue,
    pub ki: GainValue,
    /// Diagonal of Λ.
    pub lambda_ref: GainValue,
    /// `[α_0*, α_1*]`; empty means `[α*², 2α*]`.
    pub star: Vec<f64>,
    /// `[α_0**, α_1**]`; empty means `[α**², 2α**]`.
    pub dstar: Vec<f64>,
    /// `[κ_0*, κ_1*]`; empty means `[κ*², 2κ*]`.
    pub kappa_star_coeffs: Vec<f64>,
    /// `[α_0*, …, α_{2n*−1}*]`; empty means `(p + α*)^{2n*}`.
    pub hstar_den: Vec<f64>,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self {
            k: GainValue::Scalar(20.0),
            gamma: GainValue::Scalar(1.0),
            lambda_d: 1.0,
            lambda: 10.0,
            alpha_star: 2.0,
            lambda_d_star: 1.0,
            alpha_star_star: 2.0,
            kappa_star: 2.0,
            gamma_freq: GainValue::Scalar(1.0),
            kd: GainValue::Scalar(20.0),
            kp: GainValue::Scalar(100.0),
            ki: GainValue::Scalar(50.0),
            lambda_ref: GainValue::Scalar(2.0),
            star: Vec::new(),
            dstar: Vec::new(),
            kappa_star_coeffs: Vec::new(),
            hstar_den: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dt: f64,
    pub duration: f64,
    /// Persisted CSV keeps every `log_every`-th step outside the metric windows.
    pub log_every: usize,
    /// Closed-loop residuals are evaluated every `residual_every` steps; 0 disables them.
    pub residual_every: usize,
    /// Initial joint positions; empty means `q_d(0)`.
    pub q0: Vec<f64>,
    /// Initial joint velocities; empty means zero.
    pub qdot0: Vec<f64>,
    /// Recorded in outputs; the simulation itself draws no random numbers.
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 10.0,
            log_every: 10,
            residual_every: 100,
            q0: Vec::new(),
            qdot0: Vec::new(),
            seed: 0,
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub controller: ControllerConfig,
    pub gains: GainsConfig,
    pub trajectory: TrajectorySpec,
    pub disturbance: DisturbanceSpec,
    pub run: RunConfig,
}

/// A validated experiment, ready for simulation.
#[derive(Clone)]
pub struct Resolved {
    pub arm: TwoLinkArm,
    pub controller: ControllerSpec,
    pub q0: DVector<f64>,
    pub qdot0: DVector<f64>,
    pub steps: usize,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    /// Parse a file's text, apply `key=value` overrides, and validate.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply overrides to an already parsed config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        Self::load(&self.to_toml_string(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolve().map(|_| ())
    }

    pub fn coefficients(&self) -> Result<HurwitzCoeffs, ConfigError> {
        let c = &self.controller;
        if !(1..=MAX_ELL).contains(&c.ell) {
            return invalid(format!("controller.ell must be in 1..={MAX_ELL}, got {}", c.ell));
        }
        let coeffs = if c.alphas.is_empty() {
            critically_damped_coeffs(c.alpha, c.ell).and_then(|base| scale_coeffs(&base, c.kappa))
        } else {
            if c.alphas.len() != c.ell + 1 {
                return invalid(format!(
                    "controller.alphas has {} entries but controller.ell = {} needs {}",
                    c.alphas.len(),
                    c.ell,
                    c.ell + 1
                ));
            }
            HurwitzCoeffs::with_kappa(c.alphas.clone(), c.kappa)
        };
        coeffs.map_err(|e| ConfigError::Invalid(format!("controller coefficients: {e}")))
    }

    /// Effective number of separated frequencies.
    pub fn n_star(&self) -> usize {
        match self.controller.variant {
            Variant::StackedSingle => 1,
            _ if self.controller.n_star > 0 => self.controller.n_star,
            _ => self.disturbance.n_star(),
        }
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let n = DOF;
        let r = &self.run;
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return invalid(format!("run.dt must be positive, got {}", r.dt));
        }
        if !(r.duration.is_finite() && r.duration >= 10.0 * r.dt) {
            return invalid(format!("run.duration must be at least 10·dt = {}, got {}", 10.0 * r.dt, r.duration));
        }
        let steps = (r.duration / r.dt).round() as usize;
        if steps > 100_000_000 {
            return invalid(format!("run.duration / run.dt gives {steps} steps; the limit is 1e8"));
        }
        if r.log_every == 0 {
            return invalid("run.log_every must be at least 1");
        }
        let params = self.model.arm_params();
        let arm = TwoLinkArm::new(params)
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?
            .with_fault(self.model.fault);
        self.trajectory.validate(n).map_err(|e| ConfigError::Invalid(format!("trajectory: {e}")))?;
        self.disturbance.validate(n).map_err(|e| ConfigError::Invalid(format!("disturbance: {e}")))?;
        let q0 = joint_vector("run.q0", &r.q0, || self.trajectory.eval(0.0, 0, n))?;
        let qdot0 = joint_vector("run.qdot0", &r.qdot0, || DVector::zeros(n))?;

        let coeffs = self.coefficients()?;
        let c = &self.controller;
        let ns = self.n_star();
        let p = TwoLinkShape.param_count();
        let gains = self.gain_set(n, p, ns)?;
        let theta_hat0 = if c.theta_hat0.is_empty() {
            arm.theta() * 0.5
        } else if c.theta_hat0.len() == p && c.theta_hat0.iter().all(|x| x.is_finite()) {
            DVector::from_vec(c.theta_hat0.clone())
        } else {
            return invalid(format!("controller.theta_hat0 needs {p} finite entries"));
        };
        if c.freq_hat0.iter().any(|x| !x.is_finite()) {
            return invalid("controller.freq_hat0 must be finite");
        }
        let spec = ControllerSpec {
            variant: c.variant,
            gains,
            coeffs,
            availability: c.availability.resolve(),
            theta_hat0,
            theta_known: (c.variant == Variant::FsKnown).then(|| arm.theta()),
            n_star: ns,
            freq_hat0: c.freq_hat0.clone(),
            freeze_freq: c.freeze_freq,
            pid_shadow: c.pid_shadow,
        };
        // building once checks variant-specific invariants (gain couplings, ℓ, n*)
        crate::controllers::build(&spec, std::sync::Arc::new(TwoLinkShape))?;
        Ok(Resolved { arm, controller: spec, q0, qdot0, steps })
    }

    fn gain_set(&self, n: usize, p: usize, ns: usize) -> Result<GainSet, ConfigError> {
        let g = &self.gains;
        for (name, v) in [
            ("lambda_d", g.lambda_d),
            ("lambda", g.lambda),
            ("alpha_star", g.alpha_star),
            ("lambda_d_star", g.lambda_d_star),
            ("alpha_star_star", g.alpha_star_star),
            ("kappa_star", g.kappa_star),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("gains.{name} must be positive, got {v}"));
            }
        }
        let pair = |name: &str, v: &[f64], rate: f64| -> Result<[f64; 2], ConfigError> {
            match v {
                [] => Ok([rate * rate, 2.0 * rate]),
                [a0, a1] if *a0 > 0.0 && *a1 > 0.0 => Ok([*a0, *a1]),
                _ => invalid(format!("gains.{name} needs two positive entries [c0, c1], got {v:?}")),
            }
        };
        let m = 2 * ns;
        let hstar_den = if g.hstar_den.is_empty() {
            let poly = Polynomial::from_real_roots(&vec![-g.alpha_star; m]);
            poly.coeffs()[..m].to_vec()
        } else {
            if g.hstar_den.len() != m {
                return invalid(format!("gains.hstar_den needs 2·n* = {m} entries, got {}", g.hstar_den.len()));
            }
            let v = routh_hurwitz(&Polynomial::monic(&g.hstar_den))
                .map_err(|e| ConfigError::Invalid(format!("gains.hstar_den: {e}")))?;
            if !v.is_stable() {
                return invalid(format!("gains.hstar_den {:?} is not Hurwitz ({v:?})", g.hstar_den));
            }
            g.hstar_den.clone()
        };
        Ok(GainSet {
            k: g.k.resolve("k", n)?,
            gamma: g.gamma.resolve("gamma", p)?,
            lambda_d: g.lambda_d,
            lambda: g.lambda,
            alpha_star: g.alpha_star,
            lambda_d_star: g.lambda_d_star,
            alpha_star_star: g.alpha_star_star,
            kappa_star: g.kappa_star,
            gamma_freq: g.gamma_freq.resolve("gamma_freq", ns.max(1))?,
            kd: g.kd.resolve("kd", n)?,
            kp: g.kp.resolve("kp", n)?,
            ki: g.ki.resolve("ki", n)?,
            star: pair("star", &g.star, g.alpha_star)?,
            dstar: pair("dstar", &g.dstar, g.alpha_star_star)?,
            kappa_star_coeffs: pair("kappa_star_coeffs", &g.kappa_star_coeffs, g.kappa_star)?,
            hstar_den,
            lambda_ref: g.lambda_ref.resolve("lambda_ref", n)?,
        })
    }
}

fn joint_vector(name: &str, v: &[f64], default: impl FnOnce() -> DVector<f64>) -> Result<DVector<f64>, ConfigError> {
    match v.len() {
        0 => Ok(default()),
        DOF if v.iter().all(|x| x.is_finite()) => Ok(DVector::from_column_slice(v)),
        _ => invalid(format!("{name} needs {DOF} finite entries, got {v:?}")),
    }
}

/// Every dotted key of the schema with its default value, in declaration order.
pub fn schema_keys() -> Vec<(String, String)> {
    let value = toml::Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Parse `dotted.key=value`. The value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let bad = |msg: &str| ConfigError::Override(s.to_string(), msg.to_string());
    let (key, raw) = s.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let key = key.trim();
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    if !schema_keys().iter().any(|(k, _)| k == key) {
        return Err(bad("unknown key; run `fwdstep --help` for the list"));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

pub fn apply_override(table: &mut toml::Table, s: &str) -> Result<(), ConfigError> {
    let (path, value) = parse_override(s)?;
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(s.to_string(), format!("`{seg}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].clone(), value);
    Ok(())
}
