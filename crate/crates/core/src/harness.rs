//! Closed-loop simulation, logs, metrics and sweeps.

use crate::config::{ConfigError, ExperimentConfig};
use crate::controllers::{build, ControlError, Controller, Lyapunov, Measurements, Output, Variant};
use crate::manipulator::{Manipulator, TwoLinkArm, TwoLinkShape};
use crate::numerics::{NumericsError, Rk4};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Any state entry beyond this magnitude counts as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Internal(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("log csv: {0}")]
    Log(String),
    #[error("metrics: {0}")]
    Metrics(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            _ => EXIT_INTERNAL,
        }
    }
}

impl From<ControlError> for HarnessError {
    fn from(e: ControlError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Everything visible at one grid point; handed to run observers.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub meas: &'a Measurements<'a>,
    pub out: &'a Output,
    pub qddot: &'a DVector<f64>,
    pub tau_star: &'a DVector<f64>,
    pub model: &'a dyn Manipulator,
    pub controller: &'a dyn Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Time of the first state that failed the check.
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub steps_completed: usize,
    pub divergence: Option<Divergence>,
}

pub struct Simulation {
    config: ExperimentConfig,
    arm: TwoLinkArm,
    controller: Box<dyn Controller>,
    q0: DVector<f64>,
    qdot0: DVector<f64>,
    steps: usize,
}

struct Eval {
    out: Output,
    qddot: DVector<f64>,
    tau_star: DVector<f64>,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let r = config.resolve()?;
        let controller = build(&r.controller, Arc::new(TwoLinkShape)).map_err(ConfigError::from)?;
        Ok(Self { config: config.clone(), arm: r.arm, controller, q0: r.q0, qdot0: r.qdot0, steps: r.steps })
    }

    pub fn controller(&self) -> &dyn Controller {
        self.controller.as_ref()
    }

    pub fn model(&self) -> &TwoLinkArm {
        &self.arm
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn n(&self) -> usize {
        self.q0.len()
    }

    fn with_measurements<R>(&self, t: f64, x: &[f64], f: impl FnOnce(&Measurements) -> R) -> R {
        let n = self.n();
        let traj = &self.config.trajectory;
        let av = self.controller.availability();
        let q = DVector::from_column_slice(&x[..n]);
        let qdot = DVector::from_column_slice(&x[n..2 * n]);
        let qd = traj.eval(t, 0, n);
        let qd_dot = av.needs_velocity().then(|| traj.eval(t, 1, n));
        let qd_ddot = av.needs_acceleration().then(|| traj.eval(t, 2, n));
        let meas = Measurements { t, q: &q, qdot: &qdot, qd: &qd, qd_dot: qd_dot.as_ref(), qd_ddot: qd_ddot.as_ref() };
        f(&meas)
    }

    fn eval(&self, meas: &Measurements, xc: &[f64], dxc: &mut [f64]) -> Result<Eval, HarnessError> {
        let n = self.n();
        let out = self.controller.evaluate(xc, meas, dxc)?;
        let tau_star = self.config.disturbance.eval(meas.t, n);
        let qddot = self
            .arm
            .forward_dynamics(meas.q, meas.qdot, &out.tau, &tau_star)
            .map_err(|e| HarnessError::Internal(format!("forward dynamics at t = {}: {e}", meas.t)))?;
        Ok(Eval { out, qddot, tau_star })
    }

    /// Integrate the augmented plant + controller ODE, calling `observer` at every grid point.
    pub fn run(&self, mut observer: impl FnMut(&StepView)) -> Result<Outcome, HarnessError> {
        let n = self.n();
        let dt = self.config.run.dt;
        let mut x = vec![0.0; 2 * n + self.controller.state_len()];
        x[..n].copy_from_slice(self.q0.as_slice());
        x[n..2 * n].copy_from_slice(self.qdot0.as_slice());
        {
            let (plant, ctrl) = x.split_at_mut(2 * n);
            self.with_measurements(0.0, plant, |m| self.controller.init(m, ctrl))?;
        }
        let mut scratch = vec![0.0; self.controller.state_len()];
        let mut rk4 = Rk4::new(x.len());
        for k in 0..=self.steps {
            let t = k as f64 * dt;
            self.with_measurements(t, &x, |meas| -> Result<(), HarnessError> {
                let e = self.eval(meas, &x[2 * n..], &mut scratch)?;
                observer(&StepView {
                    step: k,
                    t,
                    meas,
                    out: &e.out,
                    qddot: &e.qddot,
                    tau_star: &e.tau_star,
                    model: &self.arm,
                    controller: self.controller.as_ref(),
                });
                Ok(())
            })?;
            if k == self.steps {
                break;
            }
            let mut internal = None;
            let mut deriv = |t: f64, x: &[f64], dx: &mut [f64]| -> Result<(), NumericsError> {
                let (dplant, dctrl) = dx.split_at_mut(2 * n);
                let r = self.with_measurements(t, x, |meas| self.eval(meas, &x[2 * n..], dctrl));
                match r {
                    Ok(e) => {
                        dplant[..n].copy_from_slice(&x[n..2 * n]);
                        dplant[n..].copy_from_slice(e.qddot.as_slice());
                        Ok(())
                    }
                    Err(err) => {
                        let msg = err.to_string();
                        internal = Some(err);
                        Err(NumericsError::Derivative(msg))
                    }
                }
            };
            let stepped = rk4.step(&mut deriv, &mut x, t, dt);
            let diverged = Outcome { steps_completed: k + 1, divergence: Some(Divergence { t: t + dt }) };
            match stepped {
                Ok(()) => {}
                Err(NumericsError::NonFinite { .. }) => return Ok(diverged),
                Err(e) => {
                    // blow-ups surface as failed Cholesky or non-finite controller signals
                    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) || is_blowup(&internal) {
                        return Ok(diverged);
                    }
                    return Err(internal.unwrap_or_else(|| HarnessError::Internal(e.to_string())));
                }
            }
            if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                return Ok(diverged);
            }
        }
        Ok(Outcome { steps_completed: self.steps + 1, divergence: None })
    }
}

fn is_blowup(e: &Option<HarnessError>) -> bool {
    matches!(e, Some(HarnessError::Internal(m)) if m.contains("forward dynamics"))
}

// ---------------------------------------------------------------------------
// Logs

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qd: Vec<f64>,
    pub dq: Vec<f64>,
    pub zeta: Vec<f64>,
    pub s: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_star: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub freq_hat: Vec<f64>,
    /// NaN when the variant has no Lyapunov diagnostic.
    pub v: f64,
    pub v_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub t: f64,
    pub name: String,
    pub value: f64,
}

/// Full-rate, uniform-grid record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesLog {
    pub n: usize,
    pub p: usize,
    pub n_freq: usize,
    pub records: Vec<Record>,
    pub divergence: Option<Divergence>,
    pub residuals: Vec<ResidualSample>,
}

impl Record {
    fn from_view(v: &StepView) -> Self {
        let m = v.meas;
        let (lv, lvs) = match v.controller.lyapunov(v.out, v.model, m) {
            Lyapunov::Unsupported => (f64::NAN, f64::NAN),
            Lyapunov::Value { v, v_star } => (v, v_star.unwrap_or(f64::NAN)),
        };
        Record {
            t: v.t,
            q: m.q.as_slice().to_vec(),
            qdot: m.qdot.as_slice().to_vec(),
            qd: m.qd.as_slice().to_vec(),
            dq: (m.q - m.qd).as_slice().to_vec(),
            zeta: v.out.zeta.as_slice().to_vec(),
            s: v.out.s.as_slice().to_vec(),
            tau: v.out.tau.as_slice().to_vec(),
            tau_star: v.tau_star.as_slice().to_vec(),
            theta_hat: v.out.theta_hat.as_ref().map_or_else(Vec::new, |t| t.as_slice().to_vec()),
            freq_hat: v.out.freq_hat.clone(),
            v: lv,
            v_star: lvs,
        }
    }

    pub fn dq_norm(&self) -> f64 {
        self.dq.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Run a validated config and keep every grid point.
pub fn run_experiment(config: &ExperimentConfig) -> Result<TimeSeriesLog, HarnessError> {
    let sim = Simulation::new(config)?;
    let every = config.run.residual_every;
    let mut records = Vec::with_capacity(sim.steps() + 1);
    let mut residuals = Vec::new();
    let outcome = sim.run(|v| {
        records.push(Record::from_view(v));
        if every > 0 && v.step % every == 0 {
            for (name, value) in v.controller.residuals(v.out, v.model, v.meas, v.qddot, v.tau_star) {
                residuals.push(ResidualSample { t: v.t, name: name.to_string(), value });
            }
        }
    })?;
    let first = &records[0];
    Ok(TimeSeriesLog {
        n: first.q.len(),
        p: first.theta_hat.len(),
        n_freq: first.freq_hat.len(),
        divergence: outcome.divergence,
        residuals,
        records,
    })
}

/// Column names in the fixed persisted order.
pub fn csv_header(n: usize, p: usize, n_freq: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for group in ["q", "qdot", "qd", "dq", "zeta", "s", "tau", "tau_star"] {
        h.extend((1..=n).map(|i| format!("{group}{i}")));
    }
    h.extend((1..=p).map(|i| format!("theta_hat{i}")));
    h.extend((1..=n_freq).map(|i| format!("freq_hat{i}")));
    h.push("v".into());
    h.push("v_star".into());
    h
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:e}")
    }
}

/// Indices kept on disk: every `log_every`-th step plus the full first and last 20% windows.
pub fn persisted_indices(len: usize, log_every: usize) -> Vec<usize> {
    let w = len / 5;
    (0..len)
        .filter(|&i| i % log_every.max(1) == 0 || i < w || i >= len - w || i + 1 == len)
        .collect()
}

pub fn write_csv(log: &TimeSeriesLog, out: impl Write, log_every: usize) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Log(e.to_string());
    w.write_record(csv_header(log.n, log.p, log.n_freq)).map_err(err)?;
    for i in persisted_indices(log.records.len(), log_every) {
        let r = &log.records[i];
        let mut row = vec![fmt(r.t)];
        for g in [&r.q, &r.qdot, &r.qd, &r.dq, &r.zeta, &r.s, &r.tau, &r.tau_star, &r.theta_hat, &r.freq_hat] {
            row.extend(g.iter().map(|x| fmt(*x)));
        }
        row.push(fmt(r.v));
        row.push(fmt(r.v_star));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Log(e.to_string()))
}

fn count_prefix(header: &csv::StringRecord, prefix: &str) -> usize {
    header
        .iter()
        .filter(|h| h.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())))
        .count()
}

/// Read a log written by [`write_csv`]. Residual samples are not persisted.
pub fn read_log_csv(input: impl Read) -> Result<TimeSeriesLog, HarnessError> {
    let bad = |m: String| HarnessError::Log(m);
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let n = count_prefix(&header, "q");
    let p = count_prefix(&header, "theta_hat");
    let n_freq = count_prefix(&header, "freq_hat");
    if n == 0 {
        return Err(bad("header has no joint columns".into()));
    }
    let want = csv_header(n, p, n_freq);
    if header.len() != want.len() || header.iter().zip(&want).any(|(a, b)| a != b) {
        return Err(bad(format!("header does not match the log layout for n = {n}, p = {p}, n_freq = {n_freq}")));
    }
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != want.len() {
            return Err(bad(format!("row {} has {} fields, expected {}", line + 1, row.len(), want.len())));
        }
        let vals: Vec<f64> = row
            .iter()
            .map(|f| if f.is_empty() { Ok(f64::NAN) } else { f.trim().parse::<f64>() })
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        let mut it = vals.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let t = take(1)[0];
        let rec = Record {
            t,
            q: take(n),
            qdot: take(n),
            qd: take(n),
            dq: take(n),
            zeta: take(n),
            s: take(n),
            tau: take(n),
            tau_star: take(n),
            theta_hat: take(p),
            freq_hat: take(n_freq),
            v: take(1)[0],
            v_star: take(1)[0],
        };
        if !rec.t.is_finite() || records.last().is_some_and(|prev: &Record| prev.t >= rec.t) {
            return Err(bad(format!("row {}: time must be finite and increasing", line + 1)));
        }
        records.push(rec);
    }
    Ok(TimeSeriesLog { n, p, n_freq, records, divergence: None, residuals: Vec::new() })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: usize,
    pub t_end: f64,
    pub rms_first: f64,
    pub rms_last: f64,
    pub final_dq_norm: f64,
    pub max_tau: f64,
    pub final_v: Option<f64>,
    /// Largest one-step increase of V; negative when V decreases everywhere.
    pub v_max_increase: Option<f64>,
    pub theta_hat_final: Vec<f64>,
    pub freq_hat_final: Vec<f64>,
    pub max_abs_theta_hat: f64,
    pub max_abs_freq_hat: f64,
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    /// Largest value seen per closed-loop identity.
    pub max_residuals: BTreeMap<String, f64>,
}

fn window_rms(records: &[Record]) -> f64 {
    (records.iter().map(|r| r.dq_norm().powi(2)).sum::<f64>() / records.len() as f64).sqrt()
}

pub fn compute_metrics(log: &TimeSeriesLog) -> Result<MetricsReport, HarnessError> {
    let recs = &log.records;
    if recs.len() < 10 {
        return Err(HarnessError::Metrics(format!("log has {} samples, at least 10 are needed", recs.len())));
    }
    let w = recs.len() / 5;
    let last = recs.last().expect("non-empty");
    let vs: Vec<f64> = recs.iter().map(|r| r.v).collect();
    let has_v = vs.iter().all(|v| v.is_finite());
    let max_abs = |f: &dyn Fn(&Record) -> &Vec<f64>| {
        recs.iter().flat_map(|r| f(r).iter().map(|x| x.abs())).fold(0.0, f64::max)
    };
    let mut max_residuals = BTreeMap::new();
    for s in &log.residuals {
        let e = max_residuals.entry(s.name.clone()).or_insert(0.0_f64);
        *e = e.max(s.value);
    }
    Ok(MetricsReport {
        steps: recs.len(),
        t_end: last.t,
        rms_first: window_rms(&recs[..w]),
        rms_last: window_rms(&recs[recs.len() - w..]),
        final_dq_norm: last.dq_norm(),
        max_tau: recs
            .iter()
            .map(|r| r.tau.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max),
        final_v: has_v.then_some(last.v),
        v_max_increase: has_v.then(|| vs.windows(2).map(|p| p[1] - p[0]).fold(f64::NEG_INFINITY, f64::max)),
        theta_hat_final: last.theta_hat.clone(),
        freq_hat_final: last.freq_hat.clone(),
        max_abs_theta_hat: max_abs(&|r| &r.theta_hat),
        max_abs_freq_hat: max_abs(&|r| &r.freq_hat),
        diverged: log.divergence.is_some(),
        divergence_time: log.divergence.map(|d| d.t),
        max_residuals,
    })
}

/// Write `run.csv` and `metrics.json` into `dir`.
pub fn write_outputs(
    log: &TimeSeriesLog,
    report: &MetricsReport,
    dir: &Path,
    log_every: usize,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("run.csv");
    let f = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_csv(log, std::io::BufWriter::new(f), log_every)?;
    let json_path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Internal(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    Ok((csv_path, json_path))
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: Result<MetricsReport, String>,
}

/// Named axes map onto config keys; any other name is taken as a dotted key.
pub fn axis_key(axis: &str) -> String {
    match axis {
        "ell" => "controller.ell".into(),
        "kappa" => "controller.kappa".into(),
        other if other.contains('.') => other.into(),
        gain => format!("gains.{gain}"),
    }
}

/// One run per value, executed concurrently; rows come back in input order.
pub fn sweep(config: &ExperimentConfig, axis: &str, values: &[String]) -> Vec<SweepRow> {
    let key = axis_key(axis);
    let run_one = |value: &String| -> Result<MetricsReport, String> {
        let cfg = config.with_overrides(&[format!("{key}={value}")]).map_err(|e| e.to_string())?;
        let log = run_experiment(&cfg).map_err(|e| e.to_string())?;
        compute_metrics(&log).map_err(|e| e.to_string())
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = values.iter().map(|v| s.spawn(move || run_one(v))).collect();
        values
            .iter()
            .zip(handles)
            .map(|(v, h)| SweepRow {
                value: v.clone(),
                report: h.join().unwrap_or_else(|_| Err("run panicked".into())),
            })
            .collect()
    })
}

pub fn write_sweep_csv(axis: &str, rows: &[SweepRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Log(e.to_string());
    w.write_record([axis, "rms_first", "rms_last", "final_dq_norm", "max_tau", "diverged", "divergence_time", "error"])
        .map_err(err)?;
    for row in rows {
        let rec = match &row.report {
            Ok(m) => vec![
                row.value.clone(),
                fmt(m.rms_first),
                fmt(m.rms_last),
                fmt(m.final_dq_norm),
                fmt(m.max_tau),
                m.diverged.to_string(),
                m.divergence_time.map_or_else(String::new, fmt),
                String::new(),
            ],
            Err(e) => {
                let mut r = vec![row.value.clone()];
                r.extend(std::iter::repeat_n(String::new(), 6));
                r.push(e.clone());
                r
            }
        };
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Log(e.to_string()))
}

// ---------------------------------------------------------------------------
// PID comparison and plot series

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidComparison {
    pub max_discrepancy: f64,
    pub max_tau: f64,
    pub steps: usize,
}

/// Run the reformulated PID with a textbook PID riding along on the same trajectory.
pub fn pid_compare(config: &ExperimentConfig) -> Result<PidComparison, HarnessError> {
    let mut cfg = config.clone();
    cfg.controller.variant = Variant::PidReformulated;
    cfg.controller.pid_shadow = true;
    let sim = Simulation::new(&cfg)?;
    let (mut worst, mut max_tau, mut steps) = (0.0_f64, 0.0_f64, 0);
    let outcome = sim.run(|v| {
        let text = v.out.aux("tau_textbook").expect("shadow PID enabled");
        worst = worst.max((&v.out.tau - text).amax());
        max_tau = max_tau.max(v.out.tau.amax());
        steps += 1;
    })?;
    if let Some(d) = outcome.divergence {
        return Err(HarnessError::Internal(format!("PID comparison diverged at t = {}", d.t)));
    }
    Ok(PidComparison { max_discrepancy: worst, max_tau, steps })
}

fn interp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * w).collect()
}

/// Linear re-sampling onto a uniform grid of period `period`.
pub fn resample(log: &TimeSeriesLog, period: f64) -> Result<Vec<Record>, HarnessError> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(HarnessError::Log(format!("resample period must be positive, got {period}")));
    }
    let recs = &log.records;
    let (Some(first), Some(last)) = (recs.first(), recs.last()) else {
        return Ok(Vec::new());
    };
    let count = ((last.t - first.t) / period).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for k in 0..count {
        let t = first.t + k as f64 * period;
        while j + 2 < recs.len() && recs[j + 1].t < t {
            j += 1;
        }
        let (a, b) = (&recs[j], &recs[(j + 1).min(recs.len() - 1)]);
        let w = if b.t > a.t { ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0) } else { 0.0 };
        out.push(Record {
            t,
            q: interp(&a.q, &b.q, w),
            qdot: interp(&a.qdot, &b.qdot, w),
            qd: interp(&a.qd, &b.qd, w),
            dq: interp(&a.dq, &b.dq, w),
            zeta: interp(&a.zeta, &b.zeta, w),
            s: interp(&a.s, &b.s, w),
            tau: interp(&a.tau, &b.tau, w),
            tau_star: interp(&a.tau_star, &b.tau_star, w),
            theta_hat: interp(&a.theta_hat, &b.theta_hat, w),
            freq_hat: interp(&a.freq_hat, &b.freq_hat, w),
            v: a.v + (b.v - a.v) * w,
            v_star: a.v_star + (b.v_star - a.v_star) * w,
        });
    }
    Ok(out)
}

/// Write `tracking.csv`, `lyapunov.csv` and `estimates.csv` series into `dir`.
pub fn write_plot_series(records: &[Record], dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let Some(first) = records.first() else {
        return Err(HarnessError::Log("no samples to plot".into()));
    };
    let (n, p, nf) = (first.q.len(), first.theta_hat.len(), first.freq_hat.len());
    type Row = fn(&Record) -> Vec<f64>;
    let mut tracking_header = vec!["t".to_string()];
    tracking_header.extend((1..=n).map(|i| format!("dq{i}")));
    tracking_header.push("dq_norm".into());
    let mut est_header = vec!["t".to_string()];
    est_header.extend((1..=p).map(|i| format!("theta_hat{i}")));
    est_header.extend((1..=nf).map(|i| format!("freq_hat{i}")));
    let series: [(&str, Vec<String>, Row); 3] = [
        ("tracking.csv", tracking_header, |r| {
            let mut v = r.dq.clone();
            v.push(r.dq_norm());
            v
        }),
        ("lyapunov.csv", vec!["t".into(), "v".into(), "v_star".into()], |r| vec![r.v, r.v_star]),
        ("estimates.csv", est_header, |r| [r.theta_hat.clone(), r.freq_hat.clone()].concat()),
    ];
    let mut paths = Vec::new();
    for (name, header, row) in series {
        let path = dir.join(name);
        let f = std::fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
        let err = |e: csv::Error| HarnessError::Log(e.to_string());
        w.write_record(&header).map_err(err)?;
        for r in records {
            let mut rec = vec![fmt(r.t)];
            rec.extend(row(r).into_iter().map(fmt));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::load(text, &[]).unwrap()
    }

    fn synthetic(dq: impl Fn(f64) -> [f64; 2], len: usize) -> TimeSeriesLog {
        let records = (0..len)
            .map(|i| {
                let t = i as f64 * 0.01;
                let d = dq(t);
                Record {
                    t,
                    q: d.to_vec(),
                    qdot: vec![0.0; 2],
                    qd: vec![0.0; 2],
                    dq: d.to_vec(),
                    zeta: vec![0.0; 2],
                    s: vec![0.0; 2],
                    tau: vec![0.0; 2],
                    tau_star: vec![0.0; 2],
                    theta_hat: vec![],
                    freq_hat: vec![],
                    v: f64::NAN,
                    v_star: f64::NAN,
                }
            })
            .collect();
        TimeSeriesLog { n: 2, p: 0, n_freq: 0, records, divergence: None, residuals: vec![] }
    }

    #[test]
    fn constant_error_gives_equal_windows() {
        let m = compute_metrics(&synthetic(|_| [0.3, 0.4], 100)).unwrap();
        assert!((m.rms_first - 0.5).abs() < 1e-15 && (m.rms_last - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decaying_error_shrinks_late_window() {
        let m = compute_metrics(&synthetic(|t| [(-t).exp(), 0.0], 500)).unwrap();
        assert!(m.rms_last < m.rms_first);
    }

    #[test]
    fn short_logs_are_rejected() {
        assert!(compute_metrics(&synthetic(|_| [0.0, 0.0], 9)).is_err());
    }

    #[test]
    fn divergence_flag_reaches_the_report() {
        let mut log = synthetic(|_| [0.0, 0.0], 20);
        log.divergence = Some(Divergence { t: 0.2 });
        let m = compute_metrics(&log).unwrap();
        assert!(m.diverged);
        assert_eq!(m.divergence_time, Some(0.2));
    }

    #[test]
    fn zero_gain_gravity_free_rest_is_constant() {
        // gains must be positive, so the smallest representable one stands in for zero
        let c = cfg("[model]\ng0 = 0.0\n[controller]\nvariant = \"fs_plain\"\n[gains]\nk = 1e-300\n\
                     [trajectory]\nkind = \"polynomial\"\npoly = [[0.2], [-0.1]]\n[run]\nduration = 1.0\n");
        let log = run_experiment(&c).unwrap();
        let r0 = &log.records[0];
        for r in &log.records {
            assert_eq!(r.q, r0.q);
            assert_eq!(r.qdot, r0.qdot);
            assert!(r.tau.iter().all(|x| x.abs() < 1e-290));
        }
    }

    #[test]
    fn csv_round_trips_and_is_deterministic() {
        let c = cfg("[run]\nduration = 0.5\n");
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        write_csv(&a, &mut wa, 1).unwrap();
        write_csv(&b, &mut wb, 1).unwrap();
        assert_eq!(wa, wb);
        let back = read_log_csv(&wa[..]).unwrap();
        assert_eq!(back.records.len(), a.records.len());
        assert_eq!(back.records[7].tau, a.records[7].tau);
        assert_eq!(back.records[7].theta_hat, a.records[7].theta_hat);
    }

    #[test]
    fn persistence_keeps_windows_at_full_rate() {
        let idx = persisted_indices(1000, 10);
        assert!((0..200).all(|i| idx.contains(&i)));
        assert!((800..1000).all(|i| idx.contains(&i)));
        assert!(!idx.contains(&401) && idx.contains(&400));
    }

    #[test]
    fn csv_reader_rejects_malformed_input() {
        assert!(read_log_csv("a,b\n1,2\n".as_bytes()).is_err());
        let header = csv_header(2, 0, 0).join(",");
        let row = vec!["1.0"; 18].join(",");
        assert!(read_log_csv(format!("{header}\n{row}\n").as_bytes()).is_err());
        let good = vec!["0"; 19].join(",");
        assert!(read_log_csv(format!("{header}\n{good}\n{good}\n").as_bytes()).is_err());
    }

    #[test]
    fn empty_sweep_is_empty() {
        assert!(sweep(&ExperimentConfig::default(), "ell", &[]).is_empty());
    }

    #[test]
    fn sweep_reports_per_value_errors_in_order() {
        let c = cfg("[run]\nduration = 0.2\n");
        let rows = sweep(&c, "ell", &["1".into(), "9".into(), "2".into()]);
        assert_eq!(rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["1", "9", "2"]);
        assert!(rows[0].report.is_ok() && rows[1].report.is_err() && rows[2].report.is_ok());
    }

    #[test]
    fn resampling_hits_the_grid() {
        let log = synthetic(|t| [t, 0.0], 101);
        let r = resample(&log, 0.25).unwrap();
        assert_eq!(r.len(), 5);
        assert!((r[2].dq[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_detected_not_raised() {
        // a stiff gain on a coarse step makes RK4 itself unstable
        let c = cfg("[controller]\nvariant = \"fs_plain\"\n[gains]\nk = 1e6\n[trajectory]\nkind = \"polynomial\"\n\
                     poly = [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1e9], [0.0]]\n[run]\ndt = 0.05\nduration = 5.0\n");
        let log = run_experiment(&c).unwrap();
        assert!(log.divergence.is_some());
        assert!(compute_metrics(&log).map(|m| m.diverged).unwrap_or(true));
    }
}
