//! Seeded closed-loop simulation of the sampled grid under AGC.
//!
//! Step `k` runs, in order:
//! 1. draw load deviations `u(k)`;
//! 2. measure `y(k) = C x(k) + n(k)`;
//! 3. let the attack turn `y(k)` into the reported `z(k)`;
//! 4. each AGC consumes its area's rows of `z(k)` and commands `f(k)`;
//! 5. add the watermark `e(k)` to form `p(k) = f(k) + e(k)`;
//! 6. pass `p(k)` through each unit's deadband;
//! 7. advance `x(k+1) = A x(k) + B_ref p_applied(k) + B_load u(k) + w(k)`.
//!
//! Loads, process noise, sensor noise, each area's watermark and the attack
//! draw from separate substreams of the scenario seed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agc::{AgcController, WatermarkSource};
use crate::attacks::{AttackSpec, AttackState};
use crate::detector::DetectorConfig;
use crate::grid::{build_discrete, four_area_preset, GridSpec};
use crate::lti::{psd_factor, Channel, DiscreteStateSpace};
use crate::rng::{standard_normal_vec, stream_rng, Stream};
use crate::{Error, Result};

/// States larger than this in magnitude end the run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const DEFAULT_SIGMA_E2: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridSpec,
    /// Sampling period in seconds.
    pub tau: f64,
    pub duration_steps: usize,
    pub seed: u64,
    /// Watermark variance per AGC unit, shared by all areas.
    pub sigma_e2: f64,
    pub attack: AttackSpec,
    pub detector: DetectorConfig,
    /// Area whose detector is evaluated and whose signals are exported.
    pub monitored_area: usize,
    /// Freeze the monitored area's AGC output once its detector alarms.
    pub honor_stop: bool,
}

impl Scenario {
    /// Four-area preset, 2 s sampling, 120 blocks of 30 samples, no attack.
    pub fn four_area() -> Self {
        Self {
            grid: four_area_preset(),
            tau: 2.0,
            duration_steps: 3600,
            seed: 0,
            sigma_e2: DEFAULT_SIGMA_E2,
            attack: AttackSpec::None,
            detector: DetectorConfig::default(),
            monitored_area: 0,
            honor_stop: false,
        }
    }

    pub fn block_t(&self) -> usize {
        self.detector.block_t
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.detector.block_t < 2 {
            return Err(Error::InvalidParameter("block_t must be at least 2".into()));
        }
        if self.duration_steps < self.detector.block_t {
            return Err(Error::InvalidParameter("duration_steps must cover at least one block".into()));
        }
        if self.monitored_area >= self.grid.areas.len() {
            return Err(Error::InvalidParameter(format!("monitored_area {} does not exist", self.monitored_area)));
        }
        if !(self.sigma_e2 >= 0.0 && self.sigma_e2.is_finite()) {
            return Err(Error::InvalidParameter("sigma_e2 must be finite and non-negative".into()));
        }
        if let Some(a) = self.attack.area() {
            if a >= self.grid.areas.len() {
                return Err(Error::InvalidParameter(format!("attack targets missing area {a}")));
            }
        }
        Ok(())
    }
}

/// Everything recorded during a run. Vectors are indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub tau: f64,
    pub output_labels: Vec<Channel>,
    pub ref_labels: Vec<Channel>,
    pub load_labels: Vec<Channel>,
    /// True state `x(k)` before the update of step `k`.
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub u_load: Vec<DVector<f64>>,
    /// Policy output `f(k)` per AGC unit.
    pub f: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    /// Setpoints after each unit's deadband.
    pub p_applied: Vec<DVector<f64>>,
    /// Scalar AGC command per area; zero for areas without AGC.
    pub command: Vec<Vec<f64>>,
    /// Step whose update produced a non-finite or oversized state.
    pub diverged_at: Option<usize>,
    /// Step at which the monitored area's AGC was frozen.
    pub stopped_at: Option<usize>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn area_rows(&self, area: usize) -> Vec<usize> {
        (0..self.output_labels.len())
            .filter(|&r| self.output_labels[r].area() == Some(area))
            .collect()
    }

    pub fn area_cols(&self, area: usize) -> Vec<usize> {
        (0..self.ref_labels.len())
            .filter(|&c| self.ref_labels[c].area() == Some(area))
            .collect()
    }

    /// Row of `area`'s frequency measurement.
    pub fn frequency_row(&self, area: usize) -> usize {
        self.output_labels
            .iter()
            .position(|l| *l == Channel::Frequency { area })
            .expect("every area measures its frequency")
    }

    /// One row per step for `area`:
    /// `k,t_s,area,y_freq,z_freq,y_tie_<l>,z_tie_<l>,cmd,e_<g>,uload_<b>`.
    pub fn to_csv(&self, area: usize) -> String {
        let freq = self.frequency_row(area);
        let ties: Vec<(usize, usize)> = self
            .output_labels
            .iter()
            .enumerate()
            .filter_map(|(r, l)| match l {
                Channel::TieFlow { area: a, tie } if *a == area => Some((r, *tie)),
                _ => None,
            })
            .collect();
        let cols = self.area_cols(area);
        let mut out = String::from("k,t_s,area,y_freq,z_freq");
        for (_, l) in &ties {
            let _ = write!(out, ",y_tie_{l},z_tie_{l}");
        }
        out.push_str(",cmd");
        for &c in &cols {
            if let Channel::Setpoint { unit, .. } = self.ref_labels[c] {
                let _ = write!(out, ",e_{unit}");
            }
        }
        for l in &self.load_labels {
            if let Channel::Load { bus, reactive, .. } = l {
                let _ = write!(out, ",{}_{bus}", if *reactive { "qload" } else { "uload" });
            }
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(
                out,
                "{k},{:.16e},{area},{:.16e},{:.16e}",
                k as f64 * self.tau,
                self.y[k][freq],
                self.z[k][freq]
            );
            for (r, _) in &ties {
                let _ = write!(out, ",{:.16e},{:.16e}", self.y[k][*r], self.z[k][*r]);
            }
            let _ = write!(out, ",{:.16e}", self.command[k][area]);
            for &c in &cols {
                let _ = write!(out, ",{:.16e}", self.e[k][c]);
            }
            for v in self.u_load[k].iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Observer called after every step; returning `true` asks the simulator to
/// stop the monitored area's AGC.
pub trait Monitor {
    fn observe(&mut self, trace: &SimTrace, k: usize) -> Result<bool>;
}

fn scaled_normal(rng: &mut ChaCha8Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let z = standard_normal_vec(rng, factor.ncols());
    factor * z
}

pub fn run(scenario: &Scenario) -> Result<SimTrace> {
    run_monitored(scenario, None)
}

pub fn run_monitored(scenario: &Scenario, mut monitor: Option<&mut dyn Monitor>) -> Result<SimTrace> {
    scenario.validate()?;
    let plant = build_discrete(&scenario.grid, scenario.tau)?;
    simulate(scenario, &plant, &mut monitor)
}

fn simulate(scenario: &Scenario, plant: &DiscreteStateSpace, monitor: &mut Option<&mut dyn Monitor>) -> Result<SimTrace> {
    let grid = &scenario.grid;
    let seed = scenario.seed;
    let n_areas = grid.areas.len();
    let q_factor = psd_factor(&plant.q);
    let r_factor = psd_factor(&plant.r);
    let load_sd = grid.load_sigma2.sqrt();

    let mut trace = SimTrace {
        tau: scenario.tau,
        output_labels: plant.output_labels.clone(),
        ref_labels: plant.ref_labels.clone(),
        load_labels: plant.load_labels.clone(),
        x: Vec::with_capacity(scenario.duration_steps),
        y: Vec::with_capacity(scenario.duration_steps),
        z: Vec::with_capacity(scenario.duration_steps),
        u_load: Vec::with_capacity(scenario.duration_steps),
        f: Vec::with_capacity(scenario.duration_steps),
        e: Vec::with_capacity(scenario.duration_steps),
        p_applied: Vec::with_capacity(scenario.duration_steps),
        command: Vec::with_capacity(scenario.duration_steps),
        diverged_at: None,
        stopped_at: None,
    };
    let rows: Vec<Vec<usize>> = (0..n_areas).map(|i| trace.area_rows(i)).collect();
    let cols: Vec<Vec<usize>> = (0..n_areas).map(|i| trace.area_cols(i)).collect();
    let mut controllers: Vec<Option<AgcController>> = grid
        .areas
        .iter()
        .map(|a| AgcController::for_area(a, scenario.tau))
        .collect::<Result<_>>()?;
    let mut watermarks: Vec<WatermarkSource> = (0..n_areas)
        .map(|i| WatermarkSource::new(scenario.sigma_e2, cols[i].len(), seed, i))
        .collect::<Result<_>>()?;
    let deadband: Vec<f64> = grid
        .generators()
        .filter(|(_, g)| g.on_agc)
        .map(|(_, g)| g.deadband)
        .collect();
    let mut attack = AttackState::new(&scenario.attack, &plant.output_labels, seed)?;
    let mut load_rng = stream_rng(seed, Stream::Loads);
    let mut process_rng = stream_rng(seed, Stream::Process);
    let mut meas_rng = stream_rng(seed, Stream::Measurement);

    let n_ref = plant.n_ref();
    let mut x = DVector::<f64>::zeros(plant.order());
    let mut applied = DVector::<f64>::zeros(n_ref);
    let mut frozen: Option<DVector<f64>> = None;

    for k in 0..scenario.duration_steps {
        let u = standard_normal_vec(&mut load_rng, plant.n_load()) * load_sd;
        trace.u_load.push(u);
        let y = &plant.c * &x + scaled_normal(&mut meas_rng, &r_factor);
        let z = attack.interpose(k, &y, &trace.u_load)?;

        let mut f = DVector::<f64>::zeros(n_ref);
        let mut e = DVector::<f64>::zeros(n_ref);
        let mut command = vec![0.0; n_areas];
        for i in 0..n_areas {
            let wm = watermarks[i].draw();
            let Some(ctrl) = controllers[i].as_mut() else { continue };
            let z_area: Vec<f64> = rows[i].iter().map(|&r| z[r]).collect();
            let setpoints = ctrl.step(&z_area, k);
            command[i] = ctrl.last_command();
            for (j, &c) in cols[i].iter().enumerate() {
                f[c] = setpoints[j];
                e[c] = wm[j];
            }
        }
        let mut commanded = &f + &e;
        if let Some(held) = &frozen {
            for &c in &cols[scenario.monitored_area] {
                commanded[c] = held[c];
            }
        }
        for c in 0..n_ref {
            if (commanded[c] - applied[c]).abs() >= deadband[c] {
                applied[c] = commanded[c];
            }
        }
        let w = scaled_normal(&mut process_rng, &q_factor);
        let x_next = &plant.a * &x + &plant.b_ref * &applied + &plant.b_load * &trace.u_load[k] + w;

        trace.x.push(std::mem::replace(&mut x, x_next));
        trace.y.push(y);
        trace.z.push(z);
        trace.f.push(f);
        trace.e.push(e);
        trace.p_applied.push(applied.clone());
        trace.command.push(command);

        if let Some(m) = monitor.as_deref_mut() {
            if m.observe(&trace, k)? && scenario.honor_stop && frozen.is_none() {
                frozen = Some(applied.clone());
                trace.stopped_at = Some(k);
            }
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            trace.diverged_at = Some(k);
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceImpact {
    /// Relative change of the monitored area's AGC command variance, percent.
    pub command_var_change_pct: f64,
    /// Relative change of the monitored area's measured frequency variance,
    /// percent.
    pub freq_var_change_pct: f64,
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Paired runs with and without the watermark on common random numbers.
pub fn variance_impact(scenario: &Scenario) -> Result<VarianceImpact> {
    let mut on = scenario.clone();
    on.attack = AttackSpec::None;
    on.honor_stop = false;
    let mut off = on.clone();
    off.sigma_e2 = 0.0;
    let a = scenario.monitored_area;
    let t_on = run(&on)?;
    let t_off = run(&off)?;
    let freq = t_on.frequency_row(a);
    let pct = |x: f64, y: f64| if y == 0.0 { 0.0 } else { (x / y - 1.0) * 100.0 };
    Ok(VarianceImpact {
        command_var_change_pct: pct(
            variance(t_on.command.iter().map(|c| c[a])),
            variance(t_off.command.iter().map(|c| c[a])),
        ),
        freq_var_change_pct: pct(variance(t_on.y.iter().map(|y| y[freq])), variance(t_off.y.iter().map(|y| y[freq]))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::ChannelSet;

    fn short(seed: u64) -> Scenario {
        let mut s = Scenario::four_area();
        s.duration_steps = 300;
        s.seed = seed;
        s
    }

    #[test]
    fn noiseless_run_stays_at_equilibrium() {
        let mut s = short(1);
        s.grid.load_sigma2 = 0.0;
        s.grid.process_cov_scale = 0.0;
        s.grid.freq_meas_sigma2 = 0.0;
        s.grid.tieflow_snr_db = 400.0;
        s.sigma_e2 = 0.0;
        let t = run(&s).unwrap();
        for k in 0..t.len() {
            assert!(t.x[k].iter().chain(t.y[k].iter()).chain(t.p_applied[k].iter()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn runs_are_reproducible_and_honest() {
        let a = run(&short(5)).unwrap();
        let b = run(&short(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.y, a.z);
        assert_ne!(run(&short(6)).unwrap().y, a.y);
    }

    #[test]
    fn truncation_preserves_prefix() {
        let full = run(&short(2)).unwrap();
        let mut s = short(2);
        s.duration_steps = 120;
        let part = run(&s).unwrap();
        assert_eq!(&full.x[..120], &part.x[..]);
        assert_eq!(&full.z[..120], &part.z[..]);
    }

    #[test]
    fn zero_deadband_is_transparent() {
        let base = run(&short(3)).unwrap();
        for e in 0..base.len() {
            assert_eq!(base.p_applied[e], &base.f[e] + &base.e[e]);
        }
        let mut s = short(3);
        for a in &mut s.grid.areas {
            for g in &mut a.generators {
                g.deadband = f64::INFINITY;
            }
        }
        let frozen = run(&s).unwrap();
        assert!(frozen.p_applied.iter().all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn attack_does_not_shift_noise_streams() {
        let honest = run(&short(4)).unwrap();
        let mut s = short(4);
        s.attack = AttackSpec::NoiseInjection {
            area: 0,
            channels: ChannelSet::Frequency,
            bound: 1e-4,
            attack_start: 150,
        };
        let attacked = run(&s).unwrap();
        assert_eq!(honest.u_load, attacked.u_load);
        assert_eq!(&honest.x[..=150], &attacked.x[..=150]);
        assert_eq!(honest.e, attacked.e);
        assert_ne!(honest.x[200], attacked.x[200]);
    }

    #[test]
    fn frequency_stays_in_band() {
        let mut s = Scenario::four_area();
        s.duration_steps = 1800;
        let t = run(&s).unwrap();
        let band = 0.03 / 60.0;
        for area in 0..4 {
            let row = t.frequency_row(area);
            let inside = t.y.iter().filter(|y| y[row].abs() <= band).count();
            assert!(inside as f64 >= 0.99 * t.len() as f64, "area {area}: {inside}");
        }
    }

    #[test]
    fn destabilized_run_reports_divergence() {
        let mut s = short(7);
        s.duration_steps = 3000;
        s.attack = AttackSpec::Destabilization {
            area: 0,
            channels: ChannelSet::TieFlows,
            lambda: -20.0,
            attack_start: 10,
        };
        let t = run(&s).unwrap();
        let k = t.diverged_at.expect("diverges");
        assert_eq!(t.len(), k + 1);
    }

    #[test]
    fn csv_layout() {
        let t = run(&short(8)).unwrap();
        let csv = t.to_csv(0);
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "k,t_s,area,y_freq,z_freq,y_tie_0,z_tie_0,y_tie_3,z_tie_3,cmd,e_0,e_1,e_2,\
             uload_0,uload_1,uload_2,uload_3,uload_4,uload_5,uload_6,uload_7"
        );
        assert_eq!(csv.lines().count(), t.len() + 1);
        let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(first.len(), header.split(',').count());
    }

    #[test]
    fn watermark_cost_is_small_and_monotone() {
        let mut s = Scenario::four_area();
        s.duration_steps = 1800;
        let zero = {
            let mut z = s.clone();
            z.sigma_e2 = 0.0;
            variance_impact(&z).unwrap()
        };
        assert_eq!(zero.command_var_change_pct, 0.0);
        assert_eq!(zero.freq_var_change_pct, 0.0);
        let base = variance_impact(&s).unwrap();
        s.sigma_e2 *= 2.0;
        let doubled = variance_impact(&s).unwrap();
        assert!(doubled.command_var_change_pct > base.command_var_change_pct);
    }
}
