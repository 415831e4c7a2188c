//! Parametric multi-area load-frequency-control model.
//!
//! Each area is treated as coherent: one frequency-deviation state driven by
//! the aggregate swing equation on the system base. Every generator carries a
//! governor-valve and a turbine state on its own machine base, scaled into the
//! area balance by its `rating`. Each tie line adds one flow-deviation
//! integrator. Loads enter as power deficits, so a load increase lowers
//! frequency. Setpoints are on the system base, like the ACE they correct.
//!
//! Measurements per area are the flows on its incident ties (signed as export
//! from the area) followed by its frequency deviation. Both ends of a tie
//! measure the same flow with independent sensor noise.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::lti::{discrete_lyapunov, discretize_zoh, spectral_radius_of, Channel, ContinuousStateSpace, DiscreteStateSpace};
use crate::{Error, Result};

/// Sampling step used to size tie-flow sensor noise from its SNR.
pub const TIE_NOISE_CALIBRATION_STEP_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Swing-equation inertia 2H in seconds.
    pub inertia_2h: f64,
    pub damping: f64,
    /// Speed regulation R in pu.
    pub droop: f64,
    pub gov_t: f64,
    pub turb_t: f64,
    /// Machine base over system base.
    #[serde(default = "one")]
    pub rating: f64,
    #[serde(default = "yes")]
    pub on_agc: bool,
    /// Share of the area AGC command; ignored when `on_agc` is false.
    #[serde(default)]
    pub participation: f64,
    /// Smallest setpoint change the unit acts on; 0 is fully responsive,
    /// `inf` never moves.
    #[serde(default)]
    pub deadband: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Area description together with its AGC settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSpec {
    pub generators: Vec<GeneratorSpec>,
    /// Frequency-bias factor; defaults to the area's composite frequency
    /// response `Σ rating·(D + 1/R)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub load_buses: usize,
    /// Samples between AGC commands.
    #[serde(default = "one_usize")]
    pub kappa: usize,
    #[serde(default = "default_kp")]
    pub kp: f64,
    #[serde(default = "default_ki")]
    pub ki: f64,
    #[serde(default = "default_alpha")]
    pub smooth_alpha: f64,
}

fn one_usize() -> usize {
    1
}

pub const DEFAULT_KP: f64 = -0.0745;
pub const DEFAULT_KI: f64 = -0.0333;
pub const DEFAULT_SMOOTH_ALPHA: f64 = 0.8;

fn default_kp() -> f64 {
    DEFAULT_KP
}

fn default_ki() -> f64 {
    DEFAULT_KI
}

fn default_alpha() -> f64 {
    DEFAULT_SMOOTH_ALPHA
}

impl AreaSpec {
    pub fn effective_beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| {
            self.generators
                .iter()
                .map(|g| g.rating * (g.damping + 1.0 / g.droop))
                .sum()
        })
    }

    pub fn has_agc(&self) -> bool {
        self.generators.iter().any(|g| g.on_agc)
    }

    /// Participation factors of the AGC units, in generator order.
    pub fn participation(&self) -> Vec<f64> {
        self.generators
            .iter()
            .filter(|g| g.on_agc)
            .map(|g| g.participation)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TieLineSpec {
    pub area_a: usize,
    pub area_b: usize,
    /// Synchronizing coefficient in pu power per radian.
    pub sync_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub areas: Vec<AreaSpec>,
    pub ties: Vec<TieLineSpec>,
    #[serde(default = "default_base_freq")]
    pub base_freq: f64,
    /// Per-bus load-deviation variance, pu².
    pub load_sigma2: f64,
    /// Frequency sensor noise variance, pu².
    pub freq_meas_sigma2: f64,
    pub tieflow_snr_db: f64,
    /// Q′ = scale · I.
    pub process_cov_scale: f64,
    /// Adds zero-gain reactive-load input channels, one per load bus.
    #[serde(default)]
    pub reactive_loads: bool,
}

fn default_base_freq() -> f64 {
    60.0
}

/// Index bookkeeping for a built model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    /// State index of each area's frequency deviation.
    pub freq_state: Vec<usize>,
    /// (valve, turbine) state indices per generator, global generator order.
    pub gen_states: Vec<(usize, usize)>,
    pub tie_states: Vec<usize>,
    /// Area of each generator, global order.
    pub gen_area: Vec<usize>,
    /// Area of each active load bus, global order.
    pub load_area: Vec<usize>,
    pub n_states: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.areas.is_empty() {
            return bad("grid has no areas".into());
        }
        for (i, area) in self.areas.iter().enumerate() {
            if area.generators.is_empty() {
                return bad(format!("area {i} has no generators"));
            }
            if area.kappa < 1 {
                return bad(format!("area {i}: kappa must be at least 1"));
            }
            if !(area.smooth_alpha > 0.0 && area.smooth_alpha <= 1.0) {
                return bad(format!("area {i}: smooth_alpha must lie in (0, 1]"));
            }
            if area.effective_beta().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return bad(format!("area {i}: beta must be positive"));
            }
            for (g, gen) in area.generators.iter().enumerate() {
                let positive = [gen.inertia_2h, gen.droop, gen.gov_t, gen.turb_t, gen.rating];
                if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad(format!("area {i} generator {g}: 2H, R, time constants and rating must be positive"));
                }
                if !(gen.damping >= 0.0) || !(gen.deadband >= 0.0) {
                    return bad(format!("area {i} generator {g}: damping and deadband must be non-negative"));
                }
            }
            if area.has_agc() {
                let total: f64 = area.participation().iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("area {i}: AGC participation sums to {total}, not 1"));
                }
            }
        }
        for (l, tie) in self.ties.iter().enumerate() {
            if tie.area_a == tie.area_b || tie.area_a >= self.areas.len() || tie.area_b >= self.areas.len() {
                return bad(format!("tie {l} must join two distinct existing areas"));
            }
            if !(tie.sync_t > 0.0) {
                return bad(format!("tie {l}: sync_t must be positive"));
            }
        }
        for (name, v) in [
            ("load_sigma2", self.load_sigma2),
            ("freq_meas_sigma2", self.freq_meas_sigma2),
            ("process_cov_scale", self.process_cov_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.base_freq > 0.0) || !self.tieflow_snr_db.is_finite() {
            return bad("base_freq must be positive and tieflow_snr_db finite".into());
        }
        if !self.is_connected() {
            return Err(Error::DisconnectedGrid);
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let r = self.areas.len();
        let mut seen = BTreeSet::from([0usize]);
        let mut stack = vec![0usize];
        while let Some(a) = stack.pop() {
            for t in &self.ties {
                let other = if t.area_a == a {
                    t.area_b
                } else if t.area_b == a {
                    t.area_a
                } else {
                    continue;
                };
                if seen.insert(other) {
                    stack.push(other);
                }
            }
        }
        seen.len() == r
    }

    pub fn n_generators(&self) -> usize {
        self.areas.iter().map(|a| a.generators.len()).sum()
    }

    pub fn n_agc_generators(&self) -> usize {
        self.areas.iter().map(|a| a.generators.iter().filter(|g| g.on_agc).count()).sum()
    }

    pub fn n_load_buses(&self) -> usize {
        self.areas.iter().map(|a| a.load_buses).sum()
    }

    /// Generators in global order with their area index.
    pub fn generators(&self) -> impl Iterator<Item = (usize, &GeneratorSpec)> {
        self.areas
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.generators.iter().map(move |g| (i, g)))
    }

    /// Ties incident to `area` as (tie index, +1 when the area is `area_a`).
    pub fn incident_ties(&self, area: usize) -> Vec<(usize, f64)> {
        self.ties
            .iter()
            .enumerate()
            .filter_map(|(l, t)| {
                if t.area_a == area {
                    Some((l, 1.0))
                } else if t.area_b == area {
                    Some((l, -1.0))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn layout(&self) -> GridLayout {
        let mut freq_state = Vec::new();
        let mut gen_states = Vec::new();
        let mut gen_area = Vec::new();
        let mut load_area = Vec::new();
        let mut idx = 0;
        for (i, area) in self.areas.iter().enumerate() {
            freq_state.push(idx);
            idx += 1;
            for _ in &area.generators {
                gen_states.push((idx, idx + 1));
                gen_area.push(i);
                idx += 2;
            }
            load_area.extend(std::iter::repeat_n(i, area.load_buses));
        }
        let tie_states = (idx..idx + self.ties.len()).collect();
        idx += self.ties.len();
        GridLayout {
            freq_state,
            gen_states,
            tie_states,
            gen_area,
            load_area,
            n_states: idx,
        }
    }
}

struct Matrices {
    a: DMatrix<f64>,
    b_ref: DMatrix<f64>,
    b_load: DMatrix<f64>,
    ref_labels: Vec<Channel>,
    load_labels: Vec<Channel>,
}

fn dynamics(spec: &GridSpec, layout: &GridLayout) -> Matrices {
    let n = layout.n_states;
    let mut a = DMatrix::zeros(n, n);
    let n_agc = spec.n_agc_generators();
    let n_loads = spec.n_load_buses();
    let mut b_ref = DMatrix::zeros(n, n_agc);
    let mut b_load = DMatrix::zeros(n, n_loads);
    let mut ref_labels = Vec::with_capacity(n_agc);
    let mut load_labels = Vec::with_capacity(n_loads);

    let mut gen_idx = 0;
    let mut load_idx = 0;
    for (i, area) in spec.areas.iter().enumerate() {
        let w = layout.freq_state[i];
        let m: f64 = area.generators.iter().map(|g| g.rating * g.inertia_2h).sum();
        let d: f64 = area.generators.iter().map(|g| g.rating * g.damping).sum();
        a[(w, w)] = -d / m;
        for gen in &area.generators {
            let (v, t) = layout.gen_states[gen_idx];
            a[(w, t)] = gen.rating / m;
            a[(v, v)] = -1.0 / gen.gov_t;
            a[(v, w)] = -1.0 / (gen.droop * gen.gov_t);
            a[(t, t)] = -1.0 / gen.turb_t;
            a[(t, v)] = 1.0 / gen.turb_t;
            if gen.on_agc {
                b_ref[(v, ref_labels.len())] = 1.0 / (gen.gov_t * gen.rating);
                ref_labels.push(Channel::Setpoint { area: i, unit: gen_idx });
            }
            gen_idx += 1;
        }
        for (l, sign) in spec.incident_ties(i) {
            a[(w, layout.tie_states[l])] = -sign / m;
        }
        for _ in 0..area.load_buses {
            b_load[(w, load_idx)] = -1.0 / m;
            load_labels.push(Channel::Load { area: i, bus: load_idx, reactive: false });
            load_idx += 1;
        }
    }
    for (l, tie) in spec.ties.iter().enumerate() {
        let s = layout.tie_states[l];
        let k = 2.0 * PI * spec.base_freq * tie.sync_t;
        a[(s, layout.freq_state[tie.area_a])] = k;
        a[(s, layout.freq_state[tie.area_b])] = -k;
    }
    if spec.reactive_loads {
        let reactive = DMatrix::zeros(n, n_loads);
        b_load = crate::lti::hstack(&[&b_load, &reactive]);
        for (bus, &area) in layout.load_area.iter().enumerate() {
            load_labels.push(Channel::Load { area, bus, reactive: true });
        }
    }
    Matrices {
        a,
        b_ref,
        b_load,
        ref_labels,
        load_labels,
    }
}

/// Measurement matrix and labels, area by area.
fn measurements(spec: &GridSpec, layout: &GridLayout) -> (DMatrix<f64>, Vec<Channel>, Vec<usize>) {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut tie_of_row = Vec::new();
    for i in 0..spec.areas.len() {
        for (l, sign) in spec.incident_ties(i) {
            rows.push(vec![(layout.tie_states[l], sign)]);
            labels.push(Channel::TieFlow { area: i, tie: l });
            tie_of_row.push(l);
        }
        rows.push(vec![(layout.freq_state[i], 1.0)]);
        labels.push(Channel::Frequency { area: i });
        tie_of_row.push(usize::MAX);
    }
    let mut c = DMatrix::zeros(rows.len(), layout.n_states);
    for (r, entries) in rows.iter().enumerate() {
        for &(col, v) in entries {
            c[(r, col)] = v;
        }
    }
    (c, labels, tie_of_row)
}

/// Open-loop state matrix without validation or noise assembly.
pub fn state_matrix(spec: &GridSpec) -> DMatrix<f64> {
    dynamics(spec, &spec.layout()).a
}

/// Stationary variance of each tie flow under white loads, without AGC or
/// process noise, sampled at the calibration step.
pub fn open_loop_tie_variance(spec: &GridSpec) -> Result<Vec<f64>> {
    let layout = spec.layout();
    let mats = dynamics(spec, &layout);
    let n = layout.n_states;
    let css = ContinuousStateSpace::new(
        mats.a,
        mats.b_load.clone(),
        DMatrix::zeros(0, n),
        DMatrix::zeros(n, n),
        DMatrix::zeros(0, 0),
        mats.load_labels,
        vec![],
    )?;
    let d = discretize_zoh(&css, TIE_NOISE_CALIBRATION_STEP_S)?;
    if spectral_radius_of(&d.a) > 1.0 + 1e-9 {
        return Err(Error::InvalidParameter(
            "open-loop grid is unstable, so tie-flow signal variance is undefined".into(),
        ));
    }
    let w = &d.b_load * d.b_load.transpose() * spec.load_sigma2;
    let x = discrete_lyapunov(&d.a, &w);
    Ok(layout.tie_states.iter().map(|&s| x[(s, s)]).collect())
}

/// Continuous model with Q′ and R′ assembled from the noise settings.
pub fn build_continuous(spec: &GridSpec) -> Result<ContinuousStateSpace> {
    spec.validate()?;
    let layout = spec.layout();
    let mats = dynamics(spec, &layout);
    let (c, output_labels, tie_of_row) = measurements(spec, &layout);
    let tie_var = open_loop_tie_variance(spec)?;
    let snr = 10f64.powf(spec.tieflow_snr_db / 10.0);
    let meas_var: Vec<f64> = tie_of_row
        .iter()
        .map(|&l| if l == usize::MAX { spec.freq_meas_sigma2 } else { tie_var[l] / snr })
        .collect();
    let n = layout.n_states;
    let b = crate::lti::hstack(&[&mats.b_ref, &mats.b_load]);
    let mut input_labels = mats.ref_labels;
    input_labels.extend(mats.load_labels);
    ContinuousStateSpace::new(
        mats.a,
        b,
        c,
        DMatrix::identity(n, n) * spec.process_cov_scale,
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(meas_var)),
        input_labels,
        output_labels,
    )
}

/// Zero-order-hold discretization of [`build_continuous`].
pub fn build_discrete(spec: &GridSpec, tau: f64) -> Result<DiscreteStateSpace> {
    discretize_zoh(&build_continuous(spec)?, tau)
}

fn machine(on_agc: bool, participation: f64) -> GeneratorSpec {
    GeneratorSpec {
        inertia_2h: 10.0,
        damping: 1.0,
        droop: 0.05,
        gov_t: 0.2,
        turb_t: 0.5,
        rating: 9.0,
        on_agc,
        participation: if on_agc { participation } else { 0.0 },
        deadband: 0.0,
    }
}

fn area(units: usize, load_buses: usize) -> AreaSpec {
    AreaSpec {
        generators: (0..units).map(|_| machine(true, 1.0 / units as f64)).collect(),
        beta: None,
        load_buses,
        kappa: 1,
        kp: DEFAULT_KP,
        ki: DEFAULT_KI,
        smooth_alpha: DEFAULT_SMOOTH_ALPHA,
    }
}

/// Synchronizing coefficient of every preset tie.
pub const PRESET_SYNC_T: f64 = 0.5;

/// Four areas in a ring with 3, 3, 2 and 2 generators and two load buses each.
pub fn four_area_preset() -> GridSpec {
    GridSpec {
        areas: vec![area(3, 2), area(3, 2), area(2, 2), area(2, 2)],
        ties: (0..4)
            .map(|i| TieLineSpec {
                area_a: i,
                area_b: (i + 1) % 4,
                sync_t: PRESET_SYNC_T,
            })
            .collect(),
        base_freq: 60.0,
        load_sigma2: 0.0025,
        freq_meas_sigma2: 9.1891e-12,
        tieflow_snr_db: 20.0,
        process_cov_scale: 1e-9,
        reactive_loads: false,
    }
}

/// Two areas joined by one equivalent tie. Area 0 runs AGC on nine units and
/// has three more units off AGC; area 1 has no AGC.
pub fn two_area_nrg_preset() -> GridSpec {
    let mut a0 = area(9, 4);
    a0.generators.extend((0..3).map(|_| machine(false, 0.0)));
    a0.kp = -0.0451;
    a0.ki = -0.0451;
    let mut a1 = area(1, 4);
    a1.generators = (0..10).map(|_| machine(false, 0.0)).collect();
    GridSpec {
        areas: vec![a0, a1],
        ties: vec![TieLineSpec {
            area_a: 0,
            area_b: 1,
            sync_t: PRESET_SYNC_T,
        }],
        base_freq: 60.0,
        load_sigma2: 0.001,
        freq_meas_sigma2: 9.1891e-12,
        tieflow_snr_db: 20.0,
        process_cov_scale: 1e-9,
        reactive_loads: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn single_area(gens: Vec<GeneratorSpec>) -> GridSpec {
        GridSpec {
            areas: vec![AreaSpec {
                generators: gens,
                beta: None,
                load_buses: 1,
                kappa: 1,
                kp: DEFAULT_KP,
                ki: DEFAULT_KI,
                smooth_alpha: DEFAULT_SMOOTH_ALPHA,
            }],
            ties: vec![],
            base_freq: 60.0,
            load_sigma2: 0.0,
            freq_meas_sigma2: 1e-12,
            tieflow_snr_db: 20.0,
            process_cov_scale: 0.0,
            reactive_loads: false,
        }
    }

    #[test]
    fn single_generator_load_step_settles_at_droop_value() {
        let mut g = machine(true, 1.0);
        g.rating = 1.0;
        let css = build_continuous(&single_area(vec![g])).unwrap();
        // dense explicit time stepping to steady state
        let dt = 1e-3;
        let mut x = DVector::<f64>::zeros(css.order());
        let mut u = DVector::<f64>::zeros(2);
        u[1] = 0.01;
        for _ in 0..200_000 {
            let dx = &css.a * &x + &css.b * &u;
            x += dx * dt;
        }
        assert!((x[0] + 0.01 / 21.0).abs() < 1e-9, "{}", x[0]);
        assert!((x[0] + 4.7619e-4).abs() < 1e-7);
    }

    #[test]
    fn state_and_output_counts() {
        let spec = four_area_preset();
        let css = build_continuous(&spec).unwrap();
        assert_eq!(css.order(), 2 * 10 + 4 + 4);
        assert_eq!(css.output_labels.len(), 4 * 3);
        assert_eq!(spec.areas.len(), 4);
        assert_eq!(spec.n_generators(), 10);
        assert_eq!(css.b.ncols(), 10 + 8);
    }

    #[test]
    fn open_loop_spectrum() {
        for spec in [four_area_preset(), two_area_nrg_preset()] {
            let css = build_continuous(&spec).unwrap();
            let eig = crate::lti::eigenvalues(&css.a);
            let zeros = eig.iter().filter(|z| z.norm() < 1e-8).count();
            // one marginal mode per independent tie cycle
            let cycles = spec.ties.len() + 1 - spec.areas.len();
            assert_eq!(zeros, cycles);
            assert!(eig.iter().filter(|z| z.norm() >= 1e-8).all(|z| z.re < 0.0));
        }
    }

    #[test]
    fn symmetric_areas_keep_tie_at_zero() {
        let mut spec = four_area_preset();
        spec.areas.truncate(2);
        spec.areas[1] = spec.areas[0].clone();
        spec.ties = vec![TieLineSpec { area_a: 0, area_b: 1, sync_t: 2.0 }];
        let css = build_continuous(&spec).unwrap();
        let layout = spec.layout();
        let d = discretize_zoh(&css, 0.1).unwrap();
        let mut x = DVector::<f64>::zeros(css.order());
        let u = DVector::from_element(d.n_load(), 0.02);
        let p = DVector::from_element(d.n_ref(), -0.01);
        for _ in 0..500 {
            x = &d.a * &x + &d.b_ref * &p + &d.b_load * &u;
            let scale = x[layout.freq_state[0]].abs();
            assert!(x[layout.tie_states[0]].abs() <= 1e-10 * scale, "{} {}", x[layout.tie_states[0]], scale);
        }
    }

    #[test]
    fn deadband_is_not_part_of_the_linear_model() {
        let spec = four_area_preset();
        let mut marked = spec.clone();
        for a in &mut marked.areas {
            for g in &mut a.generators {
                g.deadband = 0.5;
            }
        }
        let x = build_continuous(&spec).unwrap();
        let y = build_continuous(&marked).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn measurement_noise_from_settings() {
        let spec = four_area_preset();
        let css = build_continuous(&spec).unwrap();
        let var = open_loop_tie_variance(&spec).unwrap();
        for (r, label) in css.output_labels.iter().enumerate() {
            match label {
                Channel::Frequency { .. } => assert_eq!(css.meas_cov[(r, r)], 9.1891e-12),
                Channel::TieFlow { tie, .. } => {
                    assert!((css.meas_cov[(r, r)] - var[*tie] / 100.0).abs() < 1e-18);
                    assert!(var[*tie] > 0.0);
                }
                _ => unreachable!(),
            }
        }
        assert_eq!(css.process_cov, DMatrix::identity(css.order(), css.order()) * 1e-9);
    }

    #[test]
    fn rejects_disconnected_and_bad_participation() {
        let mut spec = four_area_preset();
        spec.ties.truncate(1);
        assert!(matches!(build_continuous(&spec), Err(Error::DisconnectedGrid)));
        let mut spec = four_area_preset();
        spec.areas[0].generators[0].participation = 0.9;
        assert!(matches!(build_continuous(&spec), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn reactive_channels_have_zero_gain() {
        let mut spec = four_area_preset();
        spec.reactive_loads = true;
        let css = build_continuous(&spec).unwrap();
        assert_eq!(css.b.ncols(), 10 + 16);
        for (j, label) in css.input_labels.iter().enumerate() {
            if let Channel::Load { reactive: true, .. } = label {
                assert!(css.b.column(j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn default_beta_is_composite_response() {
        let spec = four_area_preset();
        assert!((spec.areas[0].effective_beta() - 3.0 * 9.0 * 21.0).abs() < 1e-12);
    }
}
