//! TOML scenario files.
//!
//! A file names either a built-in `grid_preset` or spells out a `[grid]`
//! table, never both. Unknown keys are rejected. Calibrated thresholds and
//! output paths are optional sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::detector::{DetectorConfig, Thresholds};
use crate::grid::{four_area_preset, two_area_nrg_preset, GridSpec};
use crate::sim::{Scenario, DEFAULT_SIGMA_E2};
use crate::{Error, Result};

/// Environment variable that overrides the file's seed when set.
pub const SEED_ENV: &str = "AGCWM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    FourArea,
    TwoAreaNrg,
}

impl GridPreset {
    pub fn build(self) -> GridSpec {
        match self {
            GridPreset::FourArea => four_area_preset(),
            GridPreset::TwoAreaNrg => two_area_nrg_preset(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub trace_csv: Option<PathBuf>,
    pub blocks_csv: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
}

fn default_tau() -> f64 {
    2.0
}

fn default_sigma_e2() -> f64 {
    DEFAULT_SIGMA_E2
}

fn default_attack() -> AttackSpec {
    AttackSpec::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub duration_steps: usize,
    #[serde(default = "default_sigma_e2")]
    pub sigma_e2: f64,
    #[serde(default)]
    pub monitored_area: usize,
    #[serde(default)]
    pub honor_stop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_preset: Option<GridPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_attack")]
    pub attack: AttackSpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputPaths>,
}

impl ScenarioFile {
    /// A file carrying `scenario` with its grid written out in full.
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            seed: scenario.seed,
            tau: scenario.tau,
            duration_steps: scenario.duration_steps,
            sigma_e2: scenario.sigma_e2,
            monitored_area: scenario.monitored_area,
            honor_stop: scenario.honor_stop,
            grid_preset: None,
            grid: Some(scenario.grid.clone()),
            attack: scenario.attack.clone(),
            detector: scenario.detector,
            thresholds: None,
            output: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.scenario()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// The validated scenario described by the file.
    pub fn scenario(&self) -> Result<Scenario> {
        let grid = match (&self.grid_preset, &self.grid) {
            (Some(p), None) => p.build(),
            (None, Some(g)) => g.clone(),
            (Some(_), Some(_)) => return Err(Error::Config("give either grid_preset or [grid], not both".into())),
            (None, None) => return Err(Error::Config("missing grid_preset or [grid]".into())),
        };
        let scenario = Scenario {
            grid,
            tau: self.tau,
            duration_steps: self.duration_steps,
            seed: self.seed,
            sigma_e2: self.sigma_e2,
            attack: self.attack.clone(),
            detector: self.detector,
            monitored_area: self.monitored_area,
            honor_stop: self.honor_stop,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Applies the seed override from [`SEED_ENV`], if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ChannelSet;
    use crate::detector::Calibration;

    const MINIMAL: &str = r#"
        seed = 3
        duration_steps = 600
        grid_preset = "four_area"
    "#;

    #[test]
    fn minimal_file_uses_defaults() {
        let s = ScenarioFile::parse(MINIMAL).unwrap().scenario().unwrap();
        let mut want = Scenario::four_area();
        want.seed = 3;
        want.duration_steps = 600;
        assert_eq!(s, want);
    }

    #[test]
    fn attack_and_detector_sections() {
        let text = format!(
            "{MINIMAL}\n[attack]\nkind = \"replay\"\narea = 0\nchannels = \"frequency\"\nrecord_start = 0\nrecord_len = 100\nattack_start = 300\n\
             [detector]\nblock_t = 20\n[detector.calibration]\nmode = \"neyman_pearson\"\ntheta0 = 0.05\nsamples = 10000\n"
        );
        let s = ScenarioFile::parse(&text).unwrap().scenario().unwrap();
        assert_eq!(
            s.attack,
            AttackSpec::Replay {
                area: 0,
                channels: ChannelSet::Frequency,
                record_start: 0,
                record_len: 100,
                attack_start: 300
            }
        );
        assert_eq!(s.detector.block_t, 20);
        assert_eq!(
            s.detector.calibration,
            Calibration::NeymanPearson {
                theta0: 0.05,
                samples: 10_000
            }
        );
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ScenarioFile::parse(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
        assert!(ScenarioFile::parse("seed = 1\nduration_steps = 600\n").is_err());
        let both = ScenarioFile::from_scenario(&Scenario::four_area());
        let mut text = both.to_toml().unwrap();
        text = format!("grid_preset = \"four_area\"\n{text}");
        assert!(ScenarioFile::parse(&text).is_err());
        assert!(ScenarioFile::parse(&format!("{MINIMAL}\nmonitored_area = 9\n")).is_err());
    }

    #[test]
    fn full_round_trip() {
        let mut s = Scenario::four_area();
        s.attack = AttackSpec::NoiseInjection {
            area: 1,
            channels: ChannelSet::Rows(vec![0, 2]),
            bound: 1.5e-4,
            attack_start: 1800,
        };
        s.grid.areas[0].generators[1].deadband = f64::INFINITY;
        let text = ScenarioFile::from_scenario(&s).to_toml().unwrap();
        assert_eq!(ScenarioFile::parse(&text).unwrap().scenario().unwrap(), s);
    }
}
