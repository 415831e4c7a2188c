//! Experiment metrics and orchestration: calibration, detection runs, the
//! robustness indicator θ, detection delay, baseline comparison and
//! non-responsive-generator sweeps.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::AttackSpec;
use crate::baseline::{self, ArxModel};
use crate::detector::{
    calibrate_empirical, calibrate_neyman_pearson, run_detector, BlockReport, Calibration, Detector, DetectorModel,
    Thresholds,
};
use crate::rng::{stream_rng, Stream};
use crate::sim::{run, run_monitored, Scenario, SimTrace};
use crate::{Error, Result};

/// `min` of ξ₁ over blocks after `start_block` divided by its `max` over
/// blocks `1..=start_block`. `xi1[0]` belongs to block 1.
pub fn theta(xi1: &[f64], start_block: usize) -> Result<f64> {
    if start_block == 0 || start_block >= xi1.len() {
        return Err(Error::InsufficientData(format!(
            "θ needs blocks on both sides of block {start_block}, series has {}",
            xi1.len()
        )));
    }
    let pre = xi1[..start_block].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let post = xi1[start_block..].iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(post / pre)
}

/// Blocks from the last honest block `start_block` to the first alarm after
/// it; an alarm in the first attacked block gives 1.
pub fn detection_delay(reports: &[BlockReport], start_block: usize) -> Option<usize> {
    reports
        .iter()
        .find(|r| r.j > start_block && r.alarm)
        .map(|r| r.j - start_block)
}

pub fn false_alarms(reports: &[BlockReport], start_block: usize) -> usize {
    reports.iter().filter(|r| r.j <= start_block && r.alarm).count()
}

/// Number of blocks that end before `attack_start` (the fully honest ones).
pub fn attack_start_block(attack_start: usize, block_t: usize) -> usize {
    attack_start / block_t
}

/// 64-bit FNV-1a of the scenario's JSON form, as hex.
pub fn scenario_digest(scenario: &Scenario) -> String {
    let json = serde_json::to_string(scenario).expect("scenarios always serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub theta: Option<f64>,
    pub detection_delay_blocks: Option<usize>,
    pub false_alarms: usize,
    pub diverged_at: Option<usize>,
    pub stopped_at: Option<usize>,
    pub thresholds: Thresholds,
    pub blocks: Vec<BlockReport>,
}

impl ExperimentReport {
    pub fn any_alarm(&self) -> bool {
        self.blocks.iter().any(|b| b.alarm)
    }

    /// `j,t_start_s,xi1,xi2,eta1,eta2,alarm`.
    pub fn blocks_csv(&self) -> String {
        let mut out = String::from("j,t_start_s,xi1,xi2,eta1,eta2,alarm\n");
        for b in &self.blocks {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                b.j,
                b.t_start_s,
                b.xi1,
                b.xi2,
                b.eta1,
                b.eta2,
                u8::from(b.alarm)
            ));
        }
        out
    }
}

/// Seed of the honest run used for empirical calibration, derived from the
/// scenario seed so that calibration never reuses the evaluation noise.
pub fn calibration_seed(seed: u64) -> u64 {
    stream_rng(seed, Stream::Calibration).random()
}

pub fn detector_model(scenario: &Scenario) -> Result<DetectorModel> {
    scenario.validate()?;
    DetectorModel::for_area(&scenario.grid, scenario.tau, scenario.sigma_e2, scenario.monitored_area)
}

/// Honest run of `steps` samples on the calibration seed.
pub fn honest_trace(scenario: &Scenario, steps: usize) -> Result<SimTrace> {
    let mut s = scenario.clone();
    s.attack = AttackSpec::None;
    s.honor_stop = false;
    s.seed = calibration_seed(scenario.seed);
    s.duration_steps = steps;
    run(&s)
}

/// Thresholds for the scenario's monitored area per its calibration mode.
pub fn calibrate(scenario: &Scenario, model: &DetectorModel) -> Result<Thresholds> {
    let cfg = &scenario.detector;
    match cfg.calibration {
        Calibration::Empirical { kappa_prime, t_inf } => {
            let trace = honest_trace(scenario, t_inf)?;
            calibrate_empirical(model, cfg.residual, &trace, t_inf, kappa_prime)
        }
        Calibration::NeymanPearson { theta0, samples } => calibrate_neyman_pearson(
            model,
            cfg.residual,
            scenario.sigma_e2,
            cfg.block_t,
            theta0,
            samples,
            scenario.seed,
        ),
    }
}

/// Simulates the scenario and evaluates the monitored area's detector. With
/// `honor_stop` the detector runs online and freezes the AGC on its first
/// alarm.
pub fn run_experiment(
    scenario: &Scenario,
    model: &DetectorModel,
    thresholds: Thresholds,
) -> Result<(SimTrace, ExperimentReport)> {
    let cfg = &scenario.detector;
    let (trace, blocks) = if scenario.honor_stop {
        let mut det = Detector::new(model.clone(), thresholds, cfg.block_t, cfg.residual)?;
        let trace = run_monitored(scenario, Some(&mut det))?;
        (trace, det.into_reports())
    } else {
        let trace = run(scenario)?;
        let blocks = run_detector(model, thresholds, cfg.block_t, cfg.residual, &trace)?;
        (trace, blocks)
    };
    let start = scenario
        .attack
        .attack_start()
        .map(|s| attack_start_block(s, cfg.block_t));
    let xi1: Vec<f64> = blocks.iter().map(|b| b.xi1).collect();
    let report = ExperimentReport {
        scenario: scenario_digest(scenario),
        theta: start.and_then(|s| theta(&xi1, s).ok()),
        detection_delay_blocks: start.and_then(|s| detection_delay(&blocks, s)),
        false_alarms: false_alarms(&blocks, start.unwrap_or(usize::MAX)),
        diverged_at: trace.diverged_at,
        stopped_at: trace.stopped_at,
        thresholds,
        blocks,
    };
    Ok((trace, report))
}

/// Convenience: model, calibration and run in one call.
pub fn evaluate(scenario: &Scenario) -> Result<(SimTrace, ExperimentReport)> {
    let model = detector_model(scenario)?;
    let thresholds = calibrate(scenario, &model)?;
    run_experiment(scenario, &model, thresholds)
}

/// Fitted regression baseline and its trained bound `η′`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBaseline {
    pub model: ArxModel,
    pub eta_prime: f64,
}

/// Fits the regression of the monitored area's frequency on all load
/// channels over an honest window of `steps` samples.
pub fn train_baseline(scenario: &Scenario, steps: usize, order: usize) -> Result<TrainedBaseline> {
    let trace = honest_trace(scenario, steps)?;
    let row = trace.frequency_row(scenario.monitored_area);
    let omega: Vec<f64> = trace.z.iter().map(|z| z[row]).collect();
    let model = baseline::fit_arx(&trace.u_load, &omega, order)?;
    let eta_prime = baseline::train_threshold(&model, &trace.u_load, &omega)?;
    Ok(TrainedBaseline { model, eta_prime })
}

/// The scenario with its attack replaced by the regression-evading attack
/// built from `trained`, starting at `attack_start`.
pub fn with_regression_attack(scenario: &Scenario, trained: &TrainedBaseline, attack_start: usize) -> Scenario {
    let mut s = scenario.clone();
    s.attack = AttackSpec::RegressionEvading {
        area: scenario.monitored_area,
        eta_prime: trained.eta_prime,
        attack_start,
        model: Some(trained.model.clone()),
    };
    s
}

/// Baseline alarm per detector block: set when any step in the block alarms.
/// Steps before the regression has a full lag window are skipped.
pub fn baseline_block_alarms(
    trained: &TrainedBaseline,
    trace: &SimTrace,
    area: usize,
    block_t: usize,
) -> Result<Vec<bool>> {
    let row = trace.frequency_row(area);
    let blocks = trace.len() / block_t;
    let mut out = vec![false; blocks];
    for k in trained.model.order - 1..blocks * block_t {
        let d = baseline::detect(&trained.model, trace.z[k][row], &trace.u_load[..=k], trained.eta_prime)?;
        if d.alarm {
            out[k / block_t] = true;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonBlock {
    pub j: usize,
    pub baseline_alarmed: bool,
    pub watermark_alarmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub eta_prime: f64,
    pub attack_start_block: usize,
    pub blocks: Vec<ComparisonBlock>,
}

impl Comparison {
    /// `(baseline, watermark)` alarm counts over the attacked blocks.
    pub fn attacked_alarms(&self) -> (usize, usize, usize) {
        let attacked: Vec<&ComparisonBlock> =
            self.blocks.iter().filter(|b| b.j > self.attack_start_block).collect();
        (
            attacked.iter().filter(|b| b.baseline_alarmed).count(),
            attacked.iter().filter(|b| b.watermark_alarmed).count(),
            attacked.len(),
        )
    }
}

/// Paired baseline and watermark evaluation under the regression-evading
/// attack. The regression is trained on the calibration seed.
pub fn compare(scenario: &Scenario, train_steps: usize, order: usize, attack_start: usize) -> Result<Comparison> {
    let trained = train_baseline(scenario, train_steps, order)?;
    let attacked = with_regression_attack(scenario, &trained, attack_start);
    let model = detector_model(&attacked)?;
    let thresholds = calibrate(&attacked, &model)?;
    let (trace, report) = run_experiment(&attacked, &model, thresholds)?;
    let t = attacked.detector.block_t;
    let base = baseline_block_alarms(&trained, &trace, attacked.monitored_area, t)?;
    let blocks = report
        .blocks
        .iter()
        .map(|b| ComparisonBlock {
            j: b.j,
            baseline_alarmed: base[b.j - 1],
            watermark_alarmed: b.alarm,
        })
        .collect();
    Ok(Comparison {
        eta_prime: trained.eta_prime,
        attack_start_block: attack_start_block(attack_start, t),
        blocks,
    })
}

/// Makes the first `count` AGC units of `area` ignore setpoint changes.
pub fn mark_non_responsive(scenario: &Scenario, area: usize, count: usize) -> Result<Scenario> {
    let mut s = scenario.clone();
    let units = s
        .grid
        .areas
        .get_mut(area)
        .ok_or_else(|| Error::InvalidParameter(format!("area {area} does not exist")))?
        .generators
        .iter_mut()
        .filter(|g| g.on_agc);
    let mut marked = 0;
    for g in units.take(count) {
        g.deadband = f64::INFINITY;
        marked += 1;
    }
    if marked < count {
        return Err(Error::InvalidParameter(format!(
            "area {area} has {marked} AGC units, cannot mark {count} non-responsive"
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NrgRow {
    pub nrg_count: usize,
    pub theta_replay: f64,
    pub theta_injection: f64,
}

/// θ under `replay` and `injection` for each count of non-responsive units in
/// the monitored area. Thresholds do not enter θ, so none are calibrated.
pub fn nrg_sweep(scenario: &Scenario, counts: &[usize], replay: &AttackSpec, injection: &AttackSpec) -> Result<Vec<NrgRow>> {
    let model = detector_model(scenario)?;
    let t = scenario.detector.block_t;
    let theta_for = |s: &Scenario, attack: &AttackSpec| -> Result<f64> {
        let mut s = s.clone();
        s.attack = attack.clone();
        s.honor_stop = false;
        let start = attack
            .attack_start()
            .ok_or_else(|| Error::InvalidParameter("sweep attacks need an onset".into()))?;
        let trace = run(&s)?;
        let blocks = run_detector(&model, Thresholds::new(f64::MAX, f64::MAX)?, t, s.detector.residual, &trace)?;
        let xi1: Vec<f64> = blocks.iter().map(|b| b.xi1).collect();
        theta(&xi1, attack_start_block(start, t))
    };
    counts
        .par_iter()
        .map(|&count| {
            let s = mark_non_responsive(scenario, scenario.monitored_area, count)?;
            Ok(NrgRow {
                nrg_count: count,
                theta_replay: theta_for(&s, replay)?,
                theta_injection: theta_for(&s, injection)?,
            })
        })
        .collect()
}

/// Rows as CSV: `nrg_count,theta_replay,theta_injection`.
pub fn nrg_csv(rows: &[NrgRow]) -> String {
    let mut out = String::from("nrg_count,theta_replay,theta_injection\n");
    for r in rows {
        out.push_str(&format!("{},{:.16e},{:.16e}\n", r.nrg_count, r.theta_replay, r.theta_injection));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(j: usize, alarm: bool) -> BlockReport {
        BlockReport {
            j,
            t_start_s: 0.0,
            samples: 30,
            xi1: 0.0,
            xi2: 0.0,
            eta1: 1.0,
            eta2: 1.0,
            alarm,
            w: nalgebra::DMatrix::zeros(0, 0),
            v: nalgebra::DMatrix::zeros(0, 0),
        }
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta(&[2.0; 6], 3).unwrap(), 1.0);
        assert_eq!(theta(&[1.0, 2.0, 6.0, 8.0], 2).unwrap(), 3.0);
        assert!(theta(&[1.0, 2.0], 2).is_err());
        assert!(theta(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn delay_examples() {
        let mut r: Vec<BlockReport> = (1..=6).map(|j| block(j, false)).collect();
        assert_eq!(detection_delay(&r, 3), None);
        r[3].alarm = true;
        assert_eq!(detection_delay(&r, 3), Some(1));
        r[0].alarm = true;
        assert_eq!(false_alarms(&r, 3), 1);
        assert_eq!(detection_delay(&r, 3), Some(1));
    }

    #[test]
    fn marking_respects_agc_membership() {
        let s = Scenario::four_area();
        let m = mark_non_responsive(&s, 0, 2).unwrap();
        let d: Vec<f64> = m.grid.areas[0].generators.iter().map(|g| g.deadband).collect();
        assert_eq!(d, vec![f64::INFINITY, f64::INFINITY, 0.0]);
        assert_eq!(mark_non_responsive(&s, 0, 0).unwrap(), s);
        assert!(mark_non_responsive(&s, 0, 4).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = Scenario::four_area();
        let mut b = a.clone();
        assert_eq!(scenario_digest(&a), scenario_digest(&b));
        b.seed = 1;
        assert_ne!(scenario_digest(&a), scenario_digest(&b));
    }
}
