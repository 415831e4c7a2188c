//! Sensor-side attack templates. Each transforms the true measurement vector
//! `y(k)` into the reported vector `z(k)` on a chosen subset of one area's
//! measurement rows.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agc::controller_blocks;
use crate::baseline::{evading_report, ArxModel};
use crate::grid::{build_discrete, GridSpec};
use crate::lti::{close_all_loops, reachable_spectral_radius, Channel, DEFAULT_PBH_TOL};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Rows of one area's measurement vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSet {
    Frequency,
    TieFlows,
    All,
    /// Positions within the area's measurement vector (ties first, frequency
    /// last).
    Rows(Vec<usize>),
}

impl ChannelSet {
    /// Global measurement rows selected in `area`.
    pub fn resolve(&self, labels: &[Channel], area: usize) -> Result<Vec<usize>> {
        let area_rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r].area() == Some(area)).collect();
        let picked: Vec<usize> = match self {
            ChannelSet::Frequency => area_rows
                .iter()
                .copied()
                .filter(|&r| matches!(labels[r], Channel::Frequency { .. }))
                .collect(),
            ChannelSet::TieFlows => area_rows
                .iter()
                .copied()
                .filter(|&r| matches!(labels[r], Channel::TieFlow { .. }))
                .collect(),
            ChannelSet::All => area_rows.clone(),
            ChannelSet::Rows(local) => {
                let mut out = Vec::with_capacity(local.len());
                for &i in local {
                    let r = *area_rows.get(i).ok_or_else(|| {
                        Error::InvalidParameter(format!("area {area} has no measurement row {i}"))
                    })?;
                    out.push(r);
                }
                out
            }
        };
        if picked.is_empty() {
            return Err(Error::InvalidParameter(format!("attack selects no measurement rows of area {area}")));
        }
        Ok(picked)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    None,
    /// Records `record_len` samples from `record_start`, then replays them
    /// cyclically from `attack_start`.
    Replay {
        area: usize,
        channels: ChannelSet,
        record_start: usize,
        record_len: usize,
        attack_start: usize,
    },
    /// Adds uniform noise on `[−bound, bound]`.
    NoiseInjection {
        area: usize,
        channels: ChannelSet,
        bound: f64,
        attack_start: usize,
    },
    /// Reports `λ·y` on the selected rows.
    Destabilization {
        area: usize,
        channels: ChannelSet,
        lambda: f64,
        attack_start: usize,
    },
    /// Reports the regression prediction minus `eta_prime` as the area
    /// frequency. The model is learned from honest data before the run.
    RegressionEvading {
        area: usize,
        eta_prime: f64,
        attack_start: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<ArxModel>,
    },
}

impl AttackSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, AttackSpec::None)
    }

    pub fn attack_start(&self) -> Option<usize> {
        match self {
            AttackSpec::None => None,
            AttackSpec::Replay { attack_start, .. }
            | AttackSpec::NoiseInjection { attack_start, .. }
            | AttackSpec::Destabilization { attack_start, .. }
            | AttackSpec::RegressionEvading { attack_start, .. } => Some(*attack_start),
        }
    }

    pub fn area(&self) -> Option<usize> {
        match self {
            AttackSpec::None => None,
            AttackSpec::Replay { area, .. }
            | AttackSpec::NoiseInjection { area, .. }
            | AttackSpec::Destabilization { area, .. }
            | AttackSpec::RegressionEvading { area, .. } => Some(*area),
        }
    }
}

#[derive(Debug, Clone)]
enum Template {
    None,
    Replay {
        record_start: usize,
        record_len: usize,
        buffer: Vec<Vec<f64>>,
    },
    Noise {
        bound: f64,
        rng: ChaCha8Rng,
    },
    Scale {
        lambda: f64,
    },
    Evading {
        eta_prime: f64,
        model: ArxModel,
    },
}

/// Per-run attack state: recording buffer, random stream and target rows.
#[derive(Debug, Clone)]
pub struct AttackState {
    rows: Vec<usize>,
    attack_start: usize,
    template: Template,
}

impl AttackState {
    pub fn new(spec: &AttackSpec, labels: &[Channel], seed: u64) -> Result<Self> {
        let (rows, attack_start, template) = match spec {
            AttackSpec::None => (Vec::new(), usize::MAX, Template::None),
            AttackSpec::Replay {
                area,
                channels,
                record_start,
                record_len,
                attack_start,
            } => {
                if *record_len == 0 || attack_start < &(record_start + record_len) {
                    return Err(Error::ReplayWindow {
                        record_start: *record_start,
                        record_end: record_start + record_len,
                        attack_start: *attack_start,
                    });
                }
                (
                    channels.resolve(labels, *area)?,
                    *attack_start,
                    Template::Replay {
                        record_start: *record_start,
                        record_len: *record_len,
                        buffer: Vec::with_capacity(*record_len),
                    },
                )
            }
            AttackSpec::NoiseInjection {
                area,
                channels,
                bound,
                attack_start,
            } => {
                if !(*bound >= 0.0 && bound.is_finite()) {
                    return Err(Error::InvalidParameter(format!("noise bound {bound} must be finite and non-negative")));
                }
                (
                    channels.resolve(labels, *area)?,
                    *attack_start,
                    Template::Noise {
                        bound: *bound,
                        rng: stream_rng(seed, Stream::Attack),
                    },
                )
            }
            AttackSpec::Destabilization {
                area,
                channels,
                lambda,
                attack_start,
            } => (channels.resolve(labels, *area)?, *attack_start, Template::Scale { lambda: *lambda }),
            AttackSpec::RegressionEvading {
                area,
                eta_prime,
                attack_start,
                model,
            } => {
                let model = model.clone().ok_or_else(|| {
                    Error::Config("the regression-evading attack needs a fitted regression model".into())
                })?;
                (
                    ChannelSet::Frequency.resolve(labels, *area)?,
                    *attack_start,
                    Template::Evading {
                        eta_prime: *eta_prime,
                        model,
                    },
                )
            }
        };
        Ok(Self {
            rows,
            attack_start,
            template,
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn is_active(&self, k: usize) -> bool {
        !matches!(self.template, Template::None) && k >= self.attack_start
    }

    /// Reported measurements at step `k`. `loads` holds the load history up
    /// to and including step `k`. Called once per step, in order.
    pub fn interpose(&mut self, k: usize, y: &DVector<f64>, loads: &[DVector<f64>]) -> Result<DVector<f64>> {
        let mut z = y.clone();
        let active = k >= self.attack_start;
        match &mut self.template {
            Template::None => {}
            Template::Replay {
                record_start,
                record_len,
                buffer,
            } => {
                if k >= *record_start && k < *record_start + *record_len {
                    buffer.push(self.rows.iter().map(|&r| y[r]).collect());
                }
                if active {
                    if buffer.len() < *record_len {
                        return Err(Error::ReplayWindow {
                            record_start: *record_start,
                            record_end: *record_start + *record_len,
                            attack_start: self.attack_start,
                        });
                    }
                    let sample = &buffer[(k - self.attack_start) % *record_len];
                    for (&r, &v) in self.rows.iter().zip(sample) {
                        z[r] = v;
                    }
                }
            }
            Template::Noise { bound, rng } => {
                if active {
                    for &r in &self.rows {
                        z[r] += if *bound > 0.0 { rng.random_range(-*bound..=*bound) } else { 0.0 };
                    }
                }
            }
            Template::Scale { lambda } => {
                if active {
                    for &r in &self.rows {
                        z[r] = *lambda * y[r];
                    }
                }
            }
            Template::Evading { eta_prime, model } => {
                if active {
                    let predicted = model.predict(loads)?;
                    z[self.rows[0]] = evading_report(predicted, *eta_prime);
                }
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTuning {
    /// First λ, sweeping from the top of the range down, whose closed loop has
    /// spectral radius ≥ 1.
    pub destabilizing: f64,
    pub destabilizing_radius: f64,
    /// λ with radius in [0.999, 1.001], refined by bisection on the stability
    /// boundary next to `destabilizing`.
    pub oscillatory: Option<f64>,
    pub oscillatory_radius: Option<f64>,
    /// Every `(λ, radius)` evaluated on the grid.
    pub sweep: Vec<(f64, f64)>,
}

/// Spectral radius of the fully closed deterministic loop when the selected
/// rows reach the AGC scaled by `lambda`.
///
/// Modes that no setpoint or load reaches (for example the circulating flow
/// around a tie ring) are ignored, since they are marginal regardless of the
/// attack.
pub fn closed_loop_radius(grid: &GridSpec, tau: f64, area: usize, channels: &ChannelSet, lambda: f64) -> Result<f64> {
    let plant = build_discrete(grid, tau)?;
    let blocks = controller_blocks(grid, tau, 0.0)?;
    let rows = channels.resolve(&plant.output_labels, area)?;
    let mut gains = DVector::from_element(plant.n_outputs(), 1.0);
    for r in rows {
        gains[r] = lambda;
    }
    let cl = close_all_loops(&plant, &blocks, Some(&gains))?;
    Ok(reachable_spectral_radius(&cl, DEFAULT_PBH_TOL))
}

/// Sweeps λ over `range` with spacing `step`, from the upper end downward.
pub fn tune_lambda(
    grid: &GridSpec,
    tau: f64,
    area: usize,
    channels: &ChannelSet,
    range: (f64, f64),
    step: f64,
) -> Result<LambdaTuning> {
    let (lo, hi) = range;
    if !(step > 0.0) || !(lo <= hi) {
        return Err(Error::InvalidParameter("lambda sweep needs lo ≤ hi and a positive step".into()));
    }
    let radius = |l: f64| closed_loop_radius(grid, tau, area, channels, l);
    let mut sweep = Vec::new();
    let count = ((hi - lo) / step).floor() as usize;
    let mut previous: Option<(f64, f64)> = None;
    for i in 0..=count {
        let lambda = hi - i as f64 * step;
        let rho = radius(lambda)?;
        sweep.push((lambda, rho));
        if rho >= 1.0 {
            let oscillatory = match previous {
                Some((l_stable, _)) => Some(bisect_boundary(&radius, l_stable, lambda)?),
                None if (rho - 1.0).abs() <= 1e-3 => Some((lambda, rho)),
                None => None,
            };
            return Ok(LambdaTuning {
                destabilizing: lambda,
                destabilizing_radius: rho,
                oscillatory: oscillatory.map(|o| o.0),
                oscillatory_radius: oscillatory.map(|o| o.1),
                sweep,
            });
        }
        previous = Some((lambda, rho));
    }
    Err(Error::NoDestabilizingScaling { lo, hi })
}

/// Bisects between a stable and an unstable λ until the radius is within
/// 1e-3 of one, preferring the stable side.
fn bisect_boundary(radius: &dyn Fn(f64) -> Result<f64>, mut stable: f64, mut unstable: f64) -> Result<(f64, f64)> {
    let mut best = (unstable, radius(unstable)?);
    for _ in 0..60 {
        let mid = 0.5 * (stable + unstable);
        let rho = radius(mid)?;
        if (rho - 1.0).abs() < (best.1 - 1.0).abs() {
            best = (mid, rho);
        }
        if rho >= 1.0 {
            unstable = mid;
        } else {
            stable = mid;
        }
        if (rho - 1.0).abs() <= 2e-4 {
            return Ok((mid, rho));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::four_area_preset;
    use rand::SeedableRng;

    fn labels() -> Vec<Channel> {
        vec![
            Channel::TieFlow { area: 0, tie: 0 },
            Channel::TieFlow { area: 0, tie: 1 },
            Channel::Frequency { area: 0 },
            Channel::TieFlow { area: 1, tie: 0 },
            Channel::Frequency { area: 1 },
        ]
    }

    fn templates() -> Vec<AttackSpec> {
        let model = ArxModel {
            order: 1,
            alpha: vec![vec![1e-3]],
            fit_residual: 0.0,
        };
        vec![
            AttackSpec::Replay {
                area: 0,
                channels: ChannelSet::All,
                record_start: 0,
                record_len: 10,
                attack_start: 50,
            },
            AttackSpec::NoiseInjection {
                area: 0,
                channels: ChannelSet::Frequency,
                bound: 0.1,
                attack_start: 50,
            },
            AttackSpec::Destabilization {
                area: 0,
                channels: ChannelSet::TieFlows,
                lambda: -0.8,
                attack_start: 50,
            },
            AttackSpec::RegressionEvading {
                area: 1,
                eta_prime: 1e-4,
                attack_start: 50,
                model: Some(model),
            },
        ]
    }

    fn random_y(rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_before_onset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in templates() {
            let mut st = AttackState::new(&spec, &labels(), 1).unwrap();
            let mut loads = Vec::new();
            for k in 0..50 {
                loads.push(DVector::from_element(1, rng.random_range(-1.0..1.0)));
                let y = random_y(&mut rng);
                assert_eq!(st.interpose(k, &y, &loads).unwrap(), y);
            }
        }
    }

    #[test]
    fn replay_index_arithmetic_and_exactness() {
        let spec = AttackSpec::Replay {
            area: 0,
            channels: ChannelSet::All,
            record_start: 0,
            record_len: 10,
            attack_start: 10,
        };
        let mut st = AttackState::new(&spec, &labels(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ys: Vec<DVector<f64>> = (0..40).map(|_| random_y(&mut rng)).collect();
        let zs: Vec<DVector<f64>> = ys.iter().enumerate().map(|(k, y)| st.interpose(k, y, &[]).unwrap()).collect();
        for r in 0..3 {
            assert_eq!(zs[12][r].to_bits(), ys[2][r].to_bits());
            assert_eq!(zs[37][r].to_bits(), ys[7][r].to_bits());
        }
        // other areas stay honest
        assert_eq!(zs[12][3], ys[12][3]);
    }

    #[test]
    fn replay_window_must_precede_onset() {
        let spec = AttackSpec::Replay {
            area: 0,
            channels: ChannelSet::Frequency,
            record_start: 5,
            record_len: 10,
            attack_start: 12,
        };
        assert!(matches!(AttackState::new(&spec, &labels(), 0), Err(Error::ReplayWindow { .. })));
    }

    #[test]
    fn injected_noise_is_bounded() {
        let spec = AttackSpec::NoiseInjection {
            area: 0,
            channels: ChannelSet::All,
            bound: 0.05,
            attack_start: 0,
        };
        let mut st = AttackState::new(&spec, &labels(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut largest = 0.0f64;
        for k in 0..2000 {
            let y = random_y(&mut rng);
            let z = st.interpose(k, &y, &[]).unwrap();
            largest = largest.max((z - y).amax());
        }
        assert!(largest <= 0.05 && largest > 0.04);
    }

    #[test]
    fn scaling_and_evading_reports() {
        let mut st = AttackState::new(&templates()[2], &labels(), 0).unwrap();
        let y = DVector::from_vec(vec![0.1, -0.2, 0.003, 0.4, 0.5]);
        let z = st.interpose(60, &y, &[]).unwrap();
        assert_eq!(z.as_slice(), &[-0.08000000000000002, 0.16000000000000003, 0.003, 0.4, 0.5]);

        let mut st = AttackState::new(&templates()[3], &labels(), 0).unwrap();
        let loads = vec![DVector::from_element(1, 0.2)];
        let z = st.interpose(60, &y, &loads).unwrap();
        let predicted = 2e-4;
        assert!(((z[4] - predicted).abs() - 1e-4).abs() < 1e-18);
        assert!((z[4] - predicted).abs() <= 1e-4);
    }

    #[test]
    fn channel_sets_resolve() {
        let l = labels();
        assert_eq!(ChannelSet::Frequency.resolve(&l, 0).unwrap(), vec![2]);
        assert_eq!(ChannelSet::TieFlows.resolve(&l, 0).unwrap(), vec![0, 1]);
        assert_eq!(ChannelSet::All.resolve(&l, 1).unwrap(), vec![3, 4]);
        assert_eq!(ChannelSet::Rows(vec![1]).resolve(&l, 1).unwrap(), vec![4]);
        assert!(ChannelSet::Rows(vec![2]).resolve(&l, 1).is_err());
    }

    #[test]
    fn identity_scaling_keeps_nominal_radius() {
        let grid = four_area_preset();
        let plant = build_discrete(&grid, 2.0).unwrap();
        let blocks = controller_blocks(&grid, 2.0, 0.0).unwrap();
        let nominal = close_all_loops(&plant, &blocks, None).unwrap();
        let nominal = reachable_spectral_radius(&nominal, DEFAULT_PBH_TOL);
        let rho = closed_loop_radius(&grid, 2.0, 0, &ChannelSet::TieFlows, 1.0).unwrap();
        assert!((rho - nominal).abs() < 1e-12);
        assert!(rho < 1.0);
    }

    #[test]
    fn zero_scaling_matches_controller_blind_to_those_rows() {
        let grid = four_area_preset();
        let plant = build_discrete(&grid, 2.0).unwrap();
        let mut blocks = controller_blocks(&grid, 2.0, 0.0).unwrap();
        // area 0 measures two ties then frequency: drop the tie inputs
        for col in 0..2 {
            blocks[0].realization.b_ref.column_mut(col).fill(0.0);
            blocks[0].realization.d_ref.column_mut(col).fill(0.0);
        }
        let blind = close_all_loops(&plant, &blocks, None).unwrap();
        let want = reachable_spectral_radius(&blind, DEFAULT_PBH_TOL);
        let got = closed_loop_radius(&grid, 2.0, 0, &ChannelSet::TieFlows, 0.0).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn sweep_finds_destabilizing_scale() {
        let tuning = tune_lambda(&four_area_preset(), 2.0, 0, &ChannelSet::TieFlows, (-5.0, 0.0), 0.05).unwrap();
        assert!(tuning.destabilizing_radius >= 1.0);
        assert!(tuning.destabilizing <= 0.0);
        let osc = tuning.oscillatory_radius.unwrap();
        assert!((0.999..=1.001).contains(&osc));
    }
}
