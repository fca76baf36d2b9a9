//! Property suites and acceptance checks behind `fwdstep validate`.

use crate::config::{ExperimentConfig, DOF};
use crate::controllers::Variant;
use crate::filters::{named_operator, OperatorKind, OperatorParams, RationalFilter};
use crate::harness::{compute_metrics, pid_compare, run_experiment, sweep, write_csv, HarnessError, MetricsReport};
use crate::manipulator::Manipulator;
use crate::numerics::{routh_hurwitz, Polynomial, Rk4, Stability};
use crate::refdyn::oracle::equivalence_error;
use crate::refdyn::{critically_damped_coeffs, Availability, Realization, ReferenceConfig};
use crate::signals::{annihilator_residual, vieta_theta, DisturbanceSpec, Tone, TrajectorySpec};
use nalgebra::{Complex, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::time::{Duration, Instant};

/// One pass/fail line.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} [{:.2} s", self.name, self.detail, self.elapsed.as_secs_f64())?;
        if let Some(l) = self.limit {
            write!(f, " / limit {:.0} s", l.as_secs_f64())?;
        }
        write!(f, "]")
    }
}

fn timed(name: &str, limit: Option<f64>, f: impl FnOnce() -> Result<(bool, String), HarnessError>) -> Result<Check, HarnessError> {
    let start = Instant::now();
    let (ok, detail) = f()?;
    let elapsed = start.elapsed();
    let limit = limit.map(Duration::from_secs_f64);
    let in_time = limit.is_none_or(|l| elapsed < l);
    let detail = if in_time { detail } else { format!("{detail}; over the runtime limit") };
    Ok(Check { name: name.to_string(), passed: ok && in_time, detail, elapsed, limit })
}

// ---------------------------------------------------------------------------
// Model properties

fn uniform_vec(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(DOF, |_, _| rng.gen_range(lo..hi))
}

/// Largest `|xᵀ(Ṁ − 2C)x|` over random samples.
pub fn skew_symmetry_error(model: &dyn Manipulator, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let q = uniform_vec(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
            let qdot = uniform_vec(&mut rng, -3.0, 3.0);
            let x = uniform_vec(&mut rng, -3.0, 3.0);
            let n = model.inertia_dot(&q, &qdot) - model.coriolis(&q, &qdot) * 2.0;
            x.dot(&(n * &x)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `‖Y(q, q̇, ζ, ζ̇)ϑ − (Mζ̇ + Cζ + g)‖_∞` over random samples.
pub fn regressor_error(model: &dyn Manipulator, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = model.theta();
    (0..samples)
        .map(|_| {
            let q = uniform_vec(&mut rng, -std::f64::consts::PI, std::f64::consts::PI);
            let qdot = uniform_vec(&mut rng, -3.0, 3.0);
            let zeta = uniform_vec(&mut rng, -3.0, 3.0);
            let zetadot = uniform_vec(&mut rng, -3.0, 3.0);
            let y = model.shape().regressor(&q, &qdot, &zeta, &zetadot);
            let rhs = model.inertia(&q) * &zetadot + model.coriolis(&q, &qdot) * &zeta + model.gravity(&q);
            (y * &theta - rhs).amax()
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Reference dynamics

/// Worst realization-vs-oracle discrepancy over all availabilities and `ℓ ∈ 1..=3`.
pub fn degree_reduction_error(dt: f64, duration: f64) -> Result<(f64, String), HarnessError> {
    let qd_spec = TrajectorySpec::multisine(
        vec![0.2, -0.1],
        vec![vec![Tone(0.5, 0.5, 0.0), Tone(0.1, 1.7, 0.3)], vec![Tone(0.3, 0.8, 1.0)]],
    );
    let wiggle = TrajectorySpec::multisine(vec![], vec![vec![Tone(0.3, 1.3, 0.0)], vec![Tone(0.2, 0.9, 0.4)]]);
    let qd = |t: f64, k: usize| qd_spec.eval(t, k, DOF);
    let q = |t: f64, k: usize| qd_spec.eval(t, k, DOF) + wiggle.eval(t, k, DOF);
    let steps = (duration / dt).round() as usize;
    let mut worst = (0.0_f64, String::new());
    for av in [Availability::Position, Availability::Velocity, Availability::Full, Availability::FullCorrected] {
        for ell in 1..=3 {
            let coeffs = critically_damped_coeffs(4.0, ell).map_err(|e| HarnessError::Internal(e.to_string()))?;
            let cfg = ReferenceConfig::new(coeffs, av, vec![2.0; DOF], DOF).map_err(|e| HarnessError::Internal(e.to_string()))?;
            let err = equivalence_error(&Realization::new(cfg, DOF), &q, &qd, dt, steps, DOF)
                .map_err(|e| HarnessError::Internal(e.to_string()))?;
            if err >= worst.0 {
                worst = (err, format!("{av:?}, ℓ = {ell}"));
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Filters

/// Steady-state response of `f` to `sin(ωt)` from simulation, as a complex gain.
/// The period must be a whole number of steps so the projection is exact.
fn simulated_gain(f: &RationalFilter, w: f64, dt: f64, settle_periods: usize, window_periods: usize) -> Complex<f64> {
    let per = (2.0 * std::f64::consts::PI / w / dt).round() as usize;
    let total = per * (settle_periods + window_periods);
    let mut x = vec![0.0; f.order()];
    let mut rk = Rk4::new(x.len());
    let mut deriv = |t: f64, x: &[f64], dx: &mut [f64]| {
        f.derivative(x, (w * t).sin(), dx);
        Ok(())
    };
    let (mut a, mut b) = (0.0, 0.0);
    for k in 0..total {
        let t = k as f64 * dt;
        if k >= per * settle_periods {
            let y = f.output(&x, (w * t).sin());
            a += y * (w * t).sin();
            b += y * (w * t).cos();
        }
        if !x.is_empty() {
            rk.step(&mut deriv, &mut x, t, dt).expect("finite filter response");
        }
    }
    let scale = 2.0 / (per * window_periods) as f64;
    Complex::new(a * scale, b * scale)
}

/// Worst relative frequency-response mismatch over the operators and two test frequencies.
pub fn filter_response_error() -> Result<(f64, String), HarnessError> {
    let coeffs = critically_damped_coeffs(4.0, 2).map_err(|e| HarnessError::Internal(e.to_string()))?;
    let hstar = [16.0, 32.0, 24.0, 8.0];
    let params = OperatorParams {
        coeffs: &coeffs,
        star: [4.0, 4.0],
        alpha_star: 2.0,
        k: 20.0,
        lambda: 2.0,
        kappa_star: [4.0, 4.0],
        hstar_den: &hstar,
    };
    let dt = 1e-3;
    let mut worst = (0.0_f64, String::new());
    for kind in [OperatorKind::G, OperatorKind::G1, OperatorKind::G2, OperatorKind::G3, OperatorKind::HStar] {
        let f = named_operator(kind, &params).map_err(|e| HarnessError::Internal(e.to_string()))?;
        // periods of 2 s and 0.5 s are whole numbers of steps
        for w in [std::f64::consts::PI, 4.0 * std::f64::consts::PI] {
            let sim = simulated_gain(&f, w, dt, 20, 5);
            let exact = f.eval(Complex::new(0.0, w));
            let err = (sim - exact).norm() / exact.norm().max(1e-3);
            if err >= worst.0 {
                worst = (err, format!("{kind:?} at ω = {w:.3}"));
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Frequency machinery

/// Elementary symmetric sums of the squared frequencies by subset enumeration.
pub fn brute_force_thetas(omegas: &[f64]) -> Vec<f64> {
    let m = omegas.len();
    let mut e = vec![0.0; m + 1];
    for mask in 0u32..(1 << m) {
        let prod: f64 = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| omegas[i] * omegas[i]).product();
        e[mask.count_ones() as usize] += prod;
    }
    // coefficient of x^j in ∏(x + ω_i²) is e_{m−j}
    (0..m).map(|j| e[m - j]).collect()
}

pub fn vieta_error(sets: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..sets {
        let m = rng.gen_range(1..=6);
        let omegas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..5.0)).collect();
        let got = vieta_theta(&omegas).map_err(|e| HarnessError::Internal(e.to_string()))?.thetas;
        for (a, b) in got.iter().zip(brute_force_thetas(&omegas)) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    Ok(worst)
}

/// Annihilator residual for matched parameters, relative to the largest term it cancels.
pub fn annihilator_error(seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let w = [rng.gen_range(0.2..3.0), rng.gen_range(3.2..6.0)];
        let spec = DisturbanceSpec {
            bias: vec![],
            tones: vec![
                vec![Tone(rng.gen_range(0.1..2.0), w[0], rng.gen_range(0.0..6.0)), Tone(0.3, w[1], 0.1)],
                vec![Tone(rng.gen_range(0.1..2.0), w[1], rng.gen_range(0.0..6.0))],
            ],
        };
        let params = vieta_theta(&w).map_err(|e| HarnessError::Internal(e.to_string()))?;
        let t = rng.gen_range(0.0..50.0);
        let r = annihilator_residual(&spec, &params, t, DOF).map_err(|e| HarnessError::Internal(e.to_string()))?;
        let mut scale = spec.derivative(t, 4, DOF).amax();
        for (i, th) in params.thetas.iter().enumerate() {
            scale = scale.max((spec.derivative(t, 2 * i, DOF) * *th).amax());
        }
        worst = worst.max(r.amax() / scale.max(1e-300));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Routh–Hurwitz

/// Number of verdict mismatches against polynomials built from known roots.
pub fn routh_mismatches(cases: usize, seed: u64) -> Result<usize, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..cases {
        let unstable = i % 2 == 1;
        let mut poly = Polynomial::constant(1.0).map_err(|e| HarnessError::Internal(e.to_string()))?;
        let pairs = rng.gen_range(0..=2);
        let reals = rng.gen_range(1..=3);
        for _ in 0..pairs {
            let (re, im): (f64, f64) = (rng.gen_range(-3.0..-0.2), rng.gen_range(0.2..3.0));
            poly = poly.mul(&Polynomial::monic(&[re * re + im * im, -2.0 * re]));
        }
        for j in 0..reals {
            let r = if unstable && j == 0 { rng.gen_range(0.2..3.0) } else { rng.gen_range(-3.0..-0.2) };
            poly = poly.mul(&Polynomial::monic(&[-r]));
        }
        let verdict = routh_hurwitz(&poly).map_err(|e| HarnessError::Internal(e.to_string()))?;
        if (verdict == Stability::Stable) == unstable {
            bad += 1;
        }
    }
    Ok(bad)
}

// ---------------------------------------------------------------------------
// Property suites

pub const PROPERTY_SUITES: [&str; 6] = ["skew-symmetry", "regressor", "degree-reduction", "filter-response", "vieta", "routh"];

/// Run the named property suite, or all of them. The model comes from `cfg`.
pub fn property_suites(cfg: &ExperimentConfig, which: &str) -> Result<Vec<Check>, HarnessError> {
    let names: Vec<&str> = if which == "all" {
        PROPERTY_SUITES.to_vec()
    } else if PROPERTY_SUITES.contains(&which) {
        vec![which]
    } else {
        return Err(crate::config::ConfigError::Invalid(format!(
            "unknown suite `{which}`; choose all, {}, or ac-1 … ac-10",
            PROPERTY_SUITES.join(", ")
        ))
        .into());
    };
    let arm = cfg.resolve()?.arm;
    names
        .into_iter()
        .map(|name| match name {
            "skew-symmetry" => timed(name, None, || {
                let e = skew_symmetry_error(&arm, 1000, 1);
                Ok((e <= 1e-10, format!("max |xᵀ(Ṁ−2C)x| = {e:.2e} (≤ 1e-10)")))
            }),
            "regressor" => timed(name, None, || {
                let e = regressor_error(&arm, 1000, 2);
                Ok((e <= 1e-10, format!("max regressor residual = {e:.2e} (≤ 1e-10)")))
            }),
            "degree-reduction" => timed(name, None, || {
                let (e, at) = degree_reduction_error(1e-3, 10.0)?;
                Ok((e <= 1e-6, format!("max ‖z − z_oracle‖∞ = {e:.2e} at {at} (≤ 1e-6)")))
            }),
            "filter-response" => timed(name, None, || {
                let (e, at) = filter_response_error()?;
                Ok((e <= 1e-6, format!("max relative gain error = {e:.2e} at {at} (≤ 1e-6)")))
            }),
            "vieta" => timed(name, None, || {
                let e = vieta_error(100, 3)?;
                let r = annihilator_error(4)?;
                Ok((e <= 1e-12 && r <= 1e-12, format!("vieta rel. error = {e:.2e}, annihilator rel. residual = {r:.2e} (≤ 1e-12)")))
            }),
            _ => timed(name, None, || {
                let bad = routh_mismatches(400, 5)?;
                Ok((bad == 0, format!("{bad} of 400 verdicts disagree with the constructed roots")))
            }),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Acceptance scenarios

/// Fixed scenario files for the simulation-based checks.
pub mod scenarios {
    pub const PID: &str = r#"
[controller]
variant = "pid_reformulated"
[trajectory]
kind = "multisine"
offset = [0.3, -0.2]
tones = [[[0.4, 0.7, 0.0]], [[0.3, 1.1, 0.5]]]
[disturbance]
bias = [0.5, -0.3]
[run]
duration = 10.0
q0 = [0.0, 0.0]
"#;

    pub const ELL_SWEEP: &str = r#"
[controller]
variant = "fs_known"
[trajectory]
kind = "multisine"
tones = [[[0.5, 0.5, 0.0]], [[0.5, 0.5, 0.0]]]
[disturbance]
tones = [[[0.2, 0.5, 0.0]], [[0.2, 0.5, 0.0]]]
[run]
duration = 40.0
residual_every = 0
"#;

    pub const LYAPUNOV: &str = r#"
[controller]
variant = "fs_adaptive"
availability = "position"
[trajectory]
kind = "polynomial"
poly = [[0.5, 0.1], [-0.3, 0.05]]
[run]
duration = 20.0
q0 = [0.7, -0.1]
residual_every = 0
"#;

    pub const TIME_SCALING: &str = r#"
[controller]
variant = "fs_plain"
ell = 4
[trajectory]
kind = "multisine"
tones = [[[0.5, 2.0, 0.0]], [[0.5, 2.0, 0.0]]]
[run]
duration = 60.0
residual_every = 0
"#;

    /// Regulation under a single unknown tone. With ℓ = 2 the cascade loses its
    /// integral action once θ̂ ≠ 0, so the constant gravity mismatch leaks in.
    pub const STACKED_SINGLE: &str = r#"
[controller]
variant = "stacked_single"
ell = 3
[gains]
gamma_freq = 1.0e4
[trajectory]
kind = "polynomial"
poly = [[0.5], [-0.3]]
[disturbance]
tones = [[[2.0, 1.5, 0.0]], [[2.0, 1.5, 1.0]]]
[run]
duration = 60.0
residual_every = 0
"#;

    pub const STACKED_SEPARATED: &str = r#"
[controller]
variant = "stacked_separated"
n_star = 2
[gains]
gamma_freq = [50.0, 50.0]
[trajectory]
kind = "multisine"
tones = [[[0.3, 0.3, 0.0]], [[0.3, 0.3, 0.5]]]
[disturbance]
tones = [[[1.0, 1.3, 0.0], [1.0, 2.1, 0.3]], [[1.0, 1.3, 1.0], [1.0, 2.1, 0.7]]]
[run]
duration = 60.0
residual_every = 0
"#;

    /// Shared base for the residual and determinism checks; the variant is set per run.
    pub const RESIDUALS: &str = r#"
[trajectory]
kind = "multisine"
tones = [[[0.4, 0.5, 0.0]], [[0.3, 0.7, 0.5]]]
[disturbance]
tones = [[[0.5, 1.3, 0.0]], [[0.5, 1.3, 1.0]]]
[run]
duration = 5.0
q0 = [0.1, 0.1]
residual_every = 1
"#;
}

fn scenario(text: &str, overrides: &[String]) -> Result<ExperimentConfig, HarnessError> {
    Ok(ExperimentConfig::load(text, overrides)?)
}

fn run_metrics(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    compute_metrics(&run_experiment(cfg)?)
}

/// Late-window RMS per value of a swept key; divergence maps to `None`.
fn swept(cfg: &ExperimentConfig, axis: &str, values: &[&str]) -> Result<Vec<Option<MetricsReport>>, HarnessError> {
    let vals: Vec<String> = values.iter().map(|s| s.to_string()).collect();
    sweep(cfg, axis, &vals)
        .into_iter()
        .map(|row| match row.report {
            Ok(m) if m.diverged => Ok(None),
            Ok(m) => Ok(Some(m)),
            Err(e) => Err(HarnessError::Internal(format!("{axis} = {}: {e}", row.value))),
        })
        .collect()
}

/// Variants whose displayed closed-loop identity is checked, with the identity names.
pub const RESIDUAL_VARIANTS: [(Variant, &str); 6] = [
    (Variant::FsAdaptive, "input_loop"),
    (Variant::FsKnown, "input_loop"),
    (Variant::FsPassive, "input_loop"),
    (Variant::FsFwdAdapt, "input_loop"),
    (Variant::StackedSingle, "psi_loop"),
    (Variant::StackedSeparated, "input_loop"),
];

fn variant_name(v: Variant) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

/// Acceptance check `id` (1–10) with its scenario and tolerance.
pub fn acceptance(id: usize) -> Result<Check, HarnessError> {
    let name = format!("AC-{id}");
    let default = ExperimentConfig::default().resolve()?.arm;
    match id {
        1 => timed(&name, Some(1.0), || {
            let s = skew_symmetry_error(&default, 1000, 11);
            let r = regressor_error(&default, 1000, 12);
            Ok((s <= 1e-10 && r <= 1e-10, format!("skew {s:.2e}, regressor {r:.2e} (both ≤ 1e-10, 1000 samples)")))
        }),
        2 => timed(&name, Some(10.0), || {
            let (e, at) = degree_reduction_error(1e-3, 10.0)?;
            Ok((e <= 1e-6, format!("max ‖z − z_oracle‖∞ = {e:.2e} at {at} (≤ 1e-6), 4 variants × ℓ ∈ 1..3")))
        }),
        3 => timed(&name, Some(2.0), || {
            let cmp = pid_compare(&scenario(scenarios::PID, &[])?)?;
            Ok((cmp.max_discrepancy <= 1e-9, format!("max torque discrepancy = {:.2e} (≤ 1e-9) over 10 s", cmp.max_discrepancy)))
        }),
        4 => timed(&name, Some(30.0), || {
            let rows = swept(&scenario(scenarios::ELL_SWEEP, &[])?, "ell", &["1", "2", "3", "4"])?;
            let rms: Vec<Option<f64>> = rows.iter().map(|r| r.as_ref().map(|m| m.rms_last)).collect();
            let ok = rms.iter().all(Option::is_some) && rms.windows(2).all(|w| w[1] < w[0]);
            let shown: Vec<String> = rms.iter().map(|r| r.map_or("diverged".into(), |x| format!("{x:.3e}"))).collect();
            Ok((ok, format!("late-window RMS for ℓ = 1..4: [{}] (strictly decreasing)", shown.join(", "))))
        }),
        5 => timed(&name, Some(5.0), || {
            let m = run_metrics(&scenario(scenarios::LYAPUNOV, &[])?)?;
            let inc = m.v_max_increase.unwrap_or(f64::INFINITY);
            let ok = !m.diverged && inc <= 1e-8 && m.final_dq_norm <= 1e-3;
            Ok((ok, format!("max V step increase = {inc:.2e} (≤ 1e-8), final ‖Δq‖ = {:.2e} (≤ 1e-3)", m.final_dq_norm)))
        }),
        6 => timed(&name, Some(20.0), || {
            let rows = swept(&scenario(scenarios::TIME_SCALING, &[])?, "kappa", &["1", "4"])?;
            let (slow, fast) = (&rows[0], &rows[1]);
            let ok = match (slow, fast) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b.rms_last < a.rms_last,
            };
            let show = |r: &Option<MetricsReport>| r.as_ref().map_or("diverged".into(), |m| format!("{:.3e}", m.rms_last));
            Ok((ok, format!("late-window RMS κ = 1: {}, κ = 4: {} (κ = 4 finite and lower)", show(slow), show(fast))))
        }),
        7 => timed(&name, Some(1.0), || {
            let e = vieta_error(100, 13)?;
            let r = annihilator_error(14)?;
            Ok((e <= 1e-12 && r <= 1e-12, format!("vieta rel. error {e:.2e} (≤ 1e-12), annihilator rel. residual {r:.2e}")))
        }),
        8 => timed(&name, Some(60.0), || {
            let base = scenario(scenarios::STACKED_SINGLE, &[])?;
            let frozen = base.with_overrides(&["controller.freeze_freq=true".into(), "controller.freq_hat0=[0.0]".into()])?;
            let (a, b) = std::thread::scope(|s| {
                let ha = s.spawn(|| run_metrics(&base));
                let hb = s.spawn(|| run_metrics(&frozen));
                (ha.join(), hb.join())
            });
            let (a, b) = (a.map_err(|_| HarnessError::Internal("run panicked".into()))??, b.map_err(|_| HarnessError::Internal("run panicked".into()))??);
            let single_ok = !a.diverged && !b.diverged && a.max_abs_freq_hat.is_finite() && 2.0 * a.rms_last <= b.rms_last;
            let sep = run_metrics(&scenario(scenarios::STACKED_SEPARATED, &[])?)?;
            let sep_ok = !sep.diverged && sep.max_abs_freq_hat.is_finite() && sep.rms_last < sep.rms_first;
            Ok((
                single_ok && sep_ok,
                format!(
                    "single: adaptive {:.3e} vs frozen {:.3e} (≥ 2× smaller), max |θ̂| {:.3}; separated: late {:.3e} < early {:.3e}, max |θ̂_i| {:.3}",
                    a.rms_last, b.rms_last, a.max_abs_freq_hat, sep.rms_last, sep.rms_first, sep.max_abs_freq_hat
                ),
            ))
        }),
        9 => timed(&name, Some(5.0 * RESIDUAL_VARIANTS.len() as f64), || {
            let mut ok = true;
            let mut parts = Vec::new();
            for (v, identity) in RESIDUAL_VARIANTS {
                let cfg = scenario(scenarios::RESIDUALS, &[format!("controller.variant={}", variant_name(v))])?;
                let m = run_metrics(&cfg)?;
                let r = m.max_residuals.get(identity).copied().unwrap_or(f64::INFINITY);
                ok &= !m.diverged && r <= 1e-9;
                parts.push(format!("{} {r:.1e}", variant_name(v)));
            }
            Ok((ok, format!("max residual (≤ 1e-9): {}", parts.join(", "))))
        }),
        10 => timed(&name, None, || {
            let cfg = scenario(scenarios::RESIDUALS, &["controller.variant=stacked_separated".into(), "controller.n_star=1".into()])?;
            let mut outs = Vec::new();
            for _ in 0..2 {
                let mut buf = Vec::new();
                write_csv(&run_experiment(&cfg)?, &mut buf, cfg.run.log_every)?;
                outs.push(buf);
            }
            Ok((outs[0] == outs[1], format!("two runs, {} CSV bytes each, identical: {}", outs[0].len(), outs[0] == outs[1])))
        }),
        _ => Err(crate::config::ConfigError::Invalid(format!("no acceptance check ac-{id}; use 1 … 10")).into()),
    }
}
