//! Command-line front end.

use crate::config::{schema_keys, ConfigError, ExperimentConfig};
use crate::harness::{
    compute_metrics, pid_compare, read_log_csv, resample, run_experiment, sweep, write_csv, write_outputs, write_plot_series,
    write_sweep_csv, HarnessError, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTERNAL, EXIT_OK,
};
use crate::validation::{self, Check};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "fwdstep", version, about = "Simulate and validate forwardstepping manipulator controllers")]
pub struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment file; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set gains.k=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write run.csv plus metrics.json.
    Run(ConfigArgs),
    /// Repeat an experiment over values of one key and write sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `ell`, `kappa`, a gain name such as `k`, or any dotted key.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run the property suites, or one acceptance check with `--suite ac-N`.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `all` (default), a property suite name, or `ac-1` … `ac-10`.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Compare the reformulated PID with a textbook PID on the same run.
    PidCompare(ConfigArgs),
    /// Re-sample a run.csv into tracking, Lyapunov and estimate series.
    PlotData {
        /// A run.csv written by `run`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        /// Sampling period of the series in seconds.
        #[arg(long, default_value_t = 0.05)]
        period: f64,
    },
}

/// Help epilogue listing every override key with its default.
pub fn keys_help() -> String {
    let mut s = String::from("Override keys (--set KEY=VALUE) and defaults:\n");
    for (k, v) in schema_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nExit codes: 0 ok, 1 validation failure, 2 config error, 3 divergence, 4 internal error.");
    s
}

pub fn parse_args<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let help = keys_help();
    let matches = Cli::command().after_help(help.clone()).after_long_help(help).try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, HarnessError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    Ok(ExperimentConfig::load(&text, &args.overrides)?)
}

fn out_dir(args: &ConfigArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir))
}

// A closed pipe downstream (e.g. `| head`) is not an error worth a panic.
fn out_line(msg: &str) {
    let _ = writeln!(std::io::stdout(), "{msg}");
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        out_line(msg.as_ref());
    }
}

fn fail(e: &HarnessError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

pub fn cmd_run(args: &ConfigArgs, quiet: bool) -> i32 {
    let result = (|| -> Result<i32, HarnessError> {
        let cfg = load(args)?;
        let log = run_experiment(&cfg)?;
        let dir = out_dir(args, &cfg);
        let report = match (compute_metrics(&log), log.divergence) {
            (Ok(r), _) => r,
            // too short to summarise; keep the log so the blow-up can be inspected
            (Err(_), Some(d)) => {
                std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
                let path = dir.join("run.csv");
                let f = std::fs::File::create(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                write_csv(&log, std::io::BufWriter::new(f), cfg.run.log_every)?;
                eprintln!("diverged at t = {}; wrote {}", d.t, path.display());
                return Ok(EXIT_DIVERGED);
            }
            (Err(e), None) => return Err(e),
        };
        let (csv, json) = write_outputs(&log, &report, &dir, cfg.run.log_every)?;
        say(quiet, format!("wrote {} and {}", csv.display(), json.display()));
        say(
            quiet,
            format!(
                "rms ‖Δq‖ first 20% = {:.3e}, last 20% = {:.3e}, max ‖τ‖ = {:.3e}",
                report.rms_first, report.rms_last, report.max_tau
            ),
        );
        if let Some(t) = report.divergence_time {
            eprintln!("diverged at t = {t}");
            return Ok(EXIT_DIVERGED);
        }
        Ok(EXIT_OK)
    })();
    result.unwrap_or_else(|e| fail(&e))
}

pub fn cmd_sweep(args: &ConfigArgs, axis: &str, values: &[String], quiet: bool) -> i32 {
    let result = (|| -> Result<i32, HarnessError> {
        let cfg = load(args)?;
        let rows = sweep(&cfg, axis, values);
        let dir = out_dir(args, &cfg);
        std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        let path = dir.join("sweep.csv");
        let f = std::fs::File::create(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
        write_sweep_csv(axis, &rows, f)?;
        say(quiet, format!("wrote {}", path.display()));
        let mut code = EXIT_OK;
        for row in &rows {
            match &row.report {
                Ok(m) => {
                    say(quiet, format!("{axis} = {}: last-window rms {:.4e}{}", row.value, m.rms_last, if m.diverged { " (diverged)" } else { "" }));
                    if m.diverged && code == EXIT_OK {
                        code = EXIT_DIVERGED;
                    }
                }
                Err(e) => {
                    eprintln!("{axis} = {}: {e}", row.value);
                    code = EXIT_CONFIG;
                }
            }
        }
        Ok(code)
    })();
    result.unwrap_or_else(|e| fail(&e))
}

fn print_checks(checks: &[Check], quiet: bool) -> i32 {
    for c in checks {
        if !quiet || !c.passed {
            out_line(&c.to_string());
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    say(quiet, format!("{} suites, {failed} failed", checks.len()));
    if failed == 0 {
        EXIT_OK
    } else {
        1
    }
}

pub fn cmd_validate(args: &ConfigArgs, suite: &str, quiet: bool) -> i32 {
    let result = (|| -> Result<i32, HarnessError> {
        if let Some(id) = suite.strip_prefix("ac-").and_then(|n| n.parse::<usize>().ok()) {
            if args.config.is_some() || !args.overrides.is_empty() {
                return Err(ConfigError::Invalid("acceptance checks use their own fixed scenarios".into()).into());
            }
            let check = validation::acceptance(id)?;
            return Ok(print_checks(&[check], quiet));
        }
        let cfg = load(args)?;
        let checks = validation::property_suites(&cfg, suite)?;
        Ok(print_checks(&checks, quiet))
    })();
    result.unwrap_or_else(|e| fail(&e))
}

pub fn cmd_pid_compare(args: &ConfigArgs, quiet: bool) -> i32 {
    let result = (|| -> Result<i32, HarnessError> {
        let cfg = load(args)?;
        let cmp = pid_compare(&cfg)?;
        let dir = out_dir(args, &cfg);
        std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        let path = dir.join("pid_compare.json");
        let json = serde_json::to_string_pretty(&cmp).map_err(|e| HarnessError::Internal(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|source| HarnessError::Io { path: path.clone(), source })?;
        say(
            quiet,
            format!("max |τ_reformulated − τ_textbook| = {:.3e} over {} samples (max |τ| = {:.3e})", cmp.max_discrepancy, cmp.steps, cmp.max_tau),
        );
        Ok(EXIT_OK)
    })();
    result.unwrap_or_else(|e| fail(&e))
}

pub fn cmd_plot_data(log: &Path, out: &Path, period: f64, quiet: bool) -> i32 {
    let result = (|| -> Result<i32, HarnessError> {
        let f = std::fs::File::open(log).map_err(|e| ConfigError::Parse(format!("cannot read {}: {e}", log.display())))?;
        let parsed = read_log_csv(std::io::BufReader::new(f))?;
        let series = resample(&parsed, period)?;
        for p in write_plot_series(&series, out)? {
            say(quiet, format!("wrote {}", p.display()));
        }
        Ok(EXIT_OK)
    })();
    result.unwrap_or_else(|e| fail(&e))
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let q = cli.quiet;
    let code = match &cli.command {
        Command::Run(a) => cmd_run(a, q),
        Command::Sweep { cfg, axis, values } => cmd_sweep(cfg, axis, values, q),
        Command::Validate { cfg, suite } => cmd_validate(cfg, suite, q),
        Command::PidCompare(a) => cmd_pid_compare(a, q),
        Command::PlotData { log, out, period } => cmd_plot_data(log, out, *period, q),
    };
    debug_assert!([EXIT_OK, 1, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTERNAL].contains(&code));
    code
}
