//! Command-line front end.
//!
//! Exit codes: 0 success without alarm, 1 runtime failure, 2 configuration
//! error, 3 alarm raised, 4 simulation diverged (takes precedence over 3).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attacks::{AttackSpec, ChannelSet};
use crate::config::{OutputPaths, ScenarioFile};
use crate::detector::{Calibration, Thresholds, DEFAULT_KAPPA_PRIME, DEFAULT_MC_SAMPLES, DEFAULT_THETA0, DEFAULT_T_INF};
use crate::eval::{self, NrgRow};
use crate::sim::Scenario;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ALARM: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Injection bound on a frequency channel used by the sweeps: the ±0.03 Hz
/// normal band on a 60 Hz base, in pu.
pub const SWEEP_FREQ_BOUND: f64 = 0.03 / 60.0;

#[derive(Debug, Parser)]
#[command(name = "agc-watermark", version, about = "Watermark-based attack detection for multi-area AGC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Empirical,
    Np,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate thresholds on an honest run and write them next to the
    /// scenario.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        kappa_prime: Option<f64>,
        #[arg(long)]
        theta0: Option<f64>,
    },
    /// Simulate the scenario and run the detector.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// θ for replay and injection at the given non-responsive-unit counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated counts; empty gives an empty table.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        counts: Vec<usize>,
    },
    /// θ table over every count from zero to all AGC units of the monitored
    /// area.
    Robustness {
        #[command(flatten)]
        common: Common,
    },
    /// Regression baseline against the watermark detector under the
    /// regression-evading attack.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Honest samples used to fit the regression.
        #[arg(long, default_value_t = 3600)]
        train_steps: usize,
        #[arg(long, default_value_t = crate::baseline::DEFAULT_ORDER)]
        order: usize,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::ReplayWindow { .. } | Error::DisconnectedGrid => {
            EXIT_CONFIG
        }
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Calibrate {
            common,
            mode,
            kappa_prime,
            theta0,
        } => cmd_calibrate(&common, mode, kappa_prime, theta0),
        Command::Run { common } => cmd_run(&common),
        Command::Sweep { common, counts } => cmd_sweep(&common, &counts, "sweep.csv"),
        Command::Robustness { common } => {
            let (_, scenario) = load(&common)?;
            let n = scenario.grid.areas[scenario.monitored_area]
                .generators
                .iter()
                .filter(|g| g.on_agc)
                .count();
            let counts: Vec<usize> = (0..=n).collect();
            cmd_sweep(&common, &counts, "robustness.csv")
        }
        Command::Compare {
            common,
            train_steps,
            order,
        } => cmd_compare(&common, train_steps, order),
    }
}

fn load(common: &Common) -> Result<(ScenarioFile, Scenario)> {
    let mut file = ScenarioFile::load(&common.scenario)?;
    file.apply_seed_env()?;
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    let scenario = file.scenario()?;
    Ok((file, scenario))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CalibrationRecord {
    mode: &'static str,
    eta1: f64,
    eta2: f64,
    xi1_inf: Option<f64>,
    xi2_inf: Option<f64>,
    kappa_prime: Option<f64>,
    t_inf: Option<usize>,
    theta0: Option<f64>,
    mc_samples: Option<usize>,
    /// Quantile level the Monte Carlo thresholds target.
    quantile: Option<f64>,
}

fn cmd_calibrate(common: &Common, mode: Option<Mode>, kappa_prime: Option<f64>, theta0: Option<f64>) -> Result<i32> {
    let (mut file, mut scenario) = load(common)?;
    if !scenario.attack.is_none() {
        return Err(Error::Config("calibration needs an honest scenario (attack kind = \"none\")".into()));
    }
    let current = scenario.detector.calibration;
    let mode = mode.unwrap_or(match current {
        Calibration::Empirical { .. } => Mode::Empirical,
        Calibration::NeymanPearson { .. } => Mode::Np,
    });
    scenario.detector.calibration = match (mode, current) {
        (Mode::Empirical, Calibration::Empirical { kappa_prime: k, t_inf }) => Calibration::Empirical {
            kappa_prime: kappa_prime.unwrap_or(k),
            t_inf,
        },
        (Mode::Empirical, _) => Calibration::Empirical {
            kappa_prime: kappa_prime.unwrap_or(DEFAULT_KAPPA_PRIME),
            t_inf: DEFAULT_T_INF,
        },
        (Mode::Np, Calibration::NeymanPearson { theta0: t, samples }) => Calibration::NeymanPearson {
            theta0: theta0.unwrap_or(t),
            samples,
        },
        (Mode::Np, _) => Calibration::NeymanPearson {
            theta0: theta0.unwrap_or(DEFAULT_THETA0),
            samples: DEFAULT_MC_SAMPLES,
        },
    };
    let model = eval::detector_model(&scenario)?;
    let thresholds = eval::calibrate(&scenario, &model)?;
    let record = match scenario.detector.calibration {
        Calibration::Empirical { kappa_prime, t_inf } => CalibrationRecord {
            mode: "empirical",
            eta1: thresholds.eta1,
            eta2: thresholds.eta2,
            xi1_inf: thresholds.xi1_inf,
            xi2_inf: thresholds.xi2_inf,
            kappa_prime: Some(kappa_prime),
            t_inf: Some(t_inf),
            theta0: None,
            mc_samples: None,
            quantile: None,
        },
        Calibration::NeymanPearson { theta0, samples } => CalibrationRecord {
            mode: "neyman_pearson",
            eta1: thresholds.eta1,
            eta2: thresholds.eta2,
            xi1_inf: None,
            xi2_inf: None,
            kappa_prime: None,
            t_inf: None,
            theta0: Some(theta0),
            mc_samples: Some(samples),
            quantile: Some(1.0 - theta0),
        },
    };
    prepare_out(&common.out)?;
    write_json(&common.out.join("thresholds.json"), &record)?;
    file.detector = scenario.detector;
    file.thresholds = Some(thresholds);
    file.save(&common.out.join("calibrated.toml"))?;
    println!("eta1 = {:e}\neta2 = {:e}", thresholds.eta1, thresholds.eta2);
    Ok(EXIT_OK)
}

fn cmd_run(common: &Common) -> Result<i32> {
    let (file, scenario) = load(common)?;
    let model = eval::detector_model(&scenario)?;
    let thresholds: Thresholds = match file.thresholds {
        Some(t) => Thresholds::new(t.eta1, t.eta2).map(|mut n| {
            n.xi1_inf = t.xi1_inf;
            n.xi2_inf = t.xi2_inf;
            n
        })?,
        None => {
            log::info!("no [thresholds] in the scenario file; calibrating first");
            eval::calibrate(&scenario, &model)?
        }
    };
    let (trace, report) = eval::run_experiment(&scenario, &model, thresholds)?;
    prepare_out(&common.out)?;
    let paths = file.output.clone().unwrap_or_default();
    let resolve = |p: &Option<PathBuf>, default: &str| common.out.join(p.clone().unwrap_or_else(|| default.into()));
    let OutputPaths {
        trace_csv,
        blocks_csv,
        report_json,
    } = &paths;
    std::fs::write(resolve(trace_csv, "trace.csv"), trace.to_csv(scenario.monitored_area))?;
    std::fs::write(resolve(blocks_csv, "blocks.csv"), report.blocks_csv())?;
    write_json(&resolve(report_json, "report.json"), &report)?;
    let alarms = report.blocks.iter().filter(|b| b.alarm).count();
    println!(
        "blocks = {}\nalarms = {alarms}\ndetection_delay_blocks = {}\ndiverged_at = {}",
        report.blocks.len(),
        report.detection_delay_blocks.map_or("none".into(), |d| d.to_string()),
        report.diverged_at.map_or("none".into(), |d| d.to_string())
    );
    Ok(if report.diverged_at.is_some() {
        EXIT_DIVERGED
    } else if report.any_alarm() {
        EXIT_ALARM
    } else {
        EXIT_OK
    })
}

/// Replay of every channel and bounded injection on frequency, both starting
/// at the block boundary nearest the middle of the run.
pub fn sweep_attacks(scenario: &Scenario) -> (AttackSpec, AttackSpec) {
    let t = scenario.detector.block_t;
    let start = (scenario.duration_steps / 2 / t).max(1) * t;
    let area = scenario.monitored_area;
    (
        AttackSpec::Replay {
            area,
            channels: ChannelSet::All,
            record_start: 0,
            record_len: start,
            attack_start: start,
        },
        AttackSpec::NoiseInjection {
            area,
            channels: ChannelSet::Frequency,
            bound: SWEEP_FREQ_BOUND,
            attack_start: start,
        },
    )
}

fn cmd_sweep(common: &Common, counts: &[usize], name: &str) -> Result<i32> {
    let (_, scenario) = load(common)?;
    let (replay, injection) = sweep_attacks(&scenario);
    let rows: Vec<NrgRow> = if counts.is_empty() {
        Vec::new()
    } else {
        eval::nrg_sweep(&scenario, counts, &replay, &injection)?
    };
    prepare_out(&common.out)?;
    let csv = eval::nrg_csv(&rows);
    std::fs::write(common.out.join(name), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_compare(common: &Common, train_steps: usize, order: usize) -> Result<i32> {
    let (_, scenario) = load(common)?;
    let t = scenario.detector.block_t;
    let start = (scenario.duration_steps / 2 / t).max(1) * t;
    let cmp = eval::compare(&scenario, train_steps, order, start)?;
    prepare_out(&common.out)?;
    write_json(&common.out.join("comparison.json"), &cmp)?;
    let (b, w, n) = cmp.attacked_alarms();
    println!("attacked_blocks = {n}\nbaseline_alarmed = {b}\nwatermark_alarmed = {w}");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands() {
        let cli = Cli::try_parse_from([
            "agc-watermark",
            "calibrate",
            "--scenario",
            "s.toml",
            "--mode",
            "np",
            "--theta0",
            "0.1",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::Calibrate {
                mode: Some(Mode::Np),
                theta0: Some(_),
                ..
            }
        ));
        let cli = Cli::try_parse_from(["agc-watermark", "sweep", "--scenario", "s.toml", "--counts", "0,2,5"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep { ref counts, .. } if counts == &[0, 2, 5]));
        assert!(Cli::try_parse_from(["agc-watermark", "run"]).is_err());
    }

    #[test]
    fn missing_file_is_a_config_error() {
        assert_eq!(
            main_with_args(["agc-watermark", "run", "--scenario", "/nonexistent/s.toml"]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn sweep_attacks_start_on_a_block_boundary() {
        let s = Scenario::four_area();
        let (r, i) = sweep_attacks(&s);
        assert_eq!(r.attack_start(), Some(1800));
        assert_eq!(i.attack_start(), Some(1800));
    }
}
