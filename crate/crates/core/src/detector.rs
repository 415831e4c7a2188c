//! Per-area watermark detector.
//!
//! The area's controller is left open and every other loop is closed, giving
//! a model driven by the area's setpoints and all loads. A steady-state Kalman
//! filter on that model produces
//! `ζ_k = x̂(k|k) − A x̂(k−1|k−1) − B_ref (f + e)(k−1) − B_load u(k−1)`,
//! which is white with covariance `H = L Σ Lᵀ` and uncorrelated with
//! `e(k−1)` while the reported measurements are honest. Over each block of `T`
//! samples the detector forms
//! `W = (1/T) Σ ζ ζᵀ − H` and `V = (1/T) Σ e(k−1) ζᵀ`
//! and alarms when `|tr W| ≥ η₁` or `‖V‖_F ≥ η₂`.
//!
//! Block `j` (from 1) holds the residuals of steps `(j−1)T ≤ k < jT` with
//! `k ≥ 1`, so the first block has `T − 1` samples.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agc::controller_blocks;
use crate::grid::{build_discrete, GridSpec};
use crate::lti::{close_loop_except, minimal_realization, solve_dare, DiscreteStateSpace, RiccatiSolution, DEFAULT_REALIZATION_TOL};
use crate::rng::{stream_rng, Stream};
use crate::sim::{Monitor, SimTrace};
use crate::{Error, Result};

pub const DEFAULT_BLOCK_T: usize = 30;
pub const DEFAULT_KAPPA_PRIME: f64 = 7.0;
pub const DEFAULT_T_INF: usize = 1800;
pub const DEFAULT_THETA0: f64 = 0.05;
pub const DEFAULT_MC_SAMPLES: usize = 20_000;

/// Which residual the statistics are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpace {
    /// `ζ = L ν` in model coordinates, covariance `H = L Σ Lᵀ`.
    #[default]
    State,
    /// The innovation `ν = z − C x̂(k|k−1)` itself, covariance `Σ`.
    Innovation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Calibration {
    /// `η = κ′ ξ∞`, with `ξ∞` measured over an honest window of `t_inf`
    /// samples.
    Empirical { kappa_prime: f64, t_inf: usize },
    /// Monte Carlo `(1 − θ₀)` quantiles of the block statistics under the
    /// honest model.
    NeymanPearson { theta0: f64, samples: usize },
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration::Empirical {
            kappa_prime: DEFAULT_KAPPA_PRIME,
            t_inf: DEFAULT_T_INF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_block_t")]
    pub block_t: usize,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub residual: ResidualSpace,
}

fn default_block_t() -> usize {
    DEFAULT_BLOCK_T
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            block_t: DEFAULT_BLOCK_T,
            calibration: Calibration::default(),
            residual: ResidualSpace::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eta1: f64,
    pub eta2: f64,
    /// Long-window statistics behind empirical thresholds.
    pub xi1_inf: Option<f64>,
    pub xi2_inf: Option<f64>,
}

impl Thresholds {
    pub fn new(eta1: f64, eta2: f64) -> Result<Self> {
        for (name, v) in [("eta1", eta1), ("eta2", eta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(Self {
            eta1,
            eta2,
            xi1_inf: None,
            xi2_inf: None,
        })
    }

    /// `η = κ′ ξ∞` for both statistics.
    pub fn from_long_window(xi1_inf: f64, xi2_inf: f64, kappa_prime: f64) -> Result<Self> {
        if !(kappa_prime > 0.0 && kappa_prime.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa_prime must be positive, got {kappa_prime}")));
        }
        let mut t = Self::new(kappa_prime * xi1_inf, kappa_prime * xi2_inf)?;
        t.xi1_inf = Some(xi1_inf);
        t.xi2_inf = Some(xi2_inf);
        Ok(t)
    }
}

/// Open-loop model of one area together with its steady-state filter.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub area: usize,
    pub sys: DiscreteStateSpace,
    pub riccati: RiccatiSolution,
    /// `L Σ Lᵀ`.
    pub h: DMatrix<f64>,
    i_minus_lc: DMatrix<f64>,
}

impl DetectorModel {
    /// Builds the model seen by `area`'s detector when every other area runs
    /// its AGC with watermark variance `sigma_e2`.
    pub fn for_area(grid: &GridSpec, tau: f64, sigma_e2: f64, area: usize) -> Result<Self> {
        if area >= grid.areas.len() {
            return Err(Error::InvalidParameter(format!("area {area} does not exist")));
        }
        if !grid.areas[area].has_agc() {
            return Err(Error::InvalidParameter(format!("area {area} has no AGC to watermark")));
        }
        let plant = build_discrete(grid, tau)?;
        let blocks = controller_blocks(grid, tau, sigma_e2)?;
        let open = close_loop_except(&plant, &blocks, area)?;
        let sys = minimal_realization(&open, DEFAULT_REALIZATION_TOL);
        log::debug!("area {area}: detector model order {} (from {})", sys.order(), open.order());
        Self::from_system(area, sys)
    }

    pub fn from_system(area: usize, sys: DiscreteStateSpace) -> Result<Self> {
        let riccati = solve_dare(&sys)?;
        let l = &riccati.l;
        let h = crate::lti::symmetrize(&(l * &riccati.sigma * l.transpose()));
        let n = sys.order();
        let i_minus_lc = DMatrix::identity(n, n) - l * &sys.c;
        Ok(Self {
            area,
            sys,
            riccati,
            h,
            i_minus_lc,
        })
    }

    /// Covariance of the residual in `space` under honest operation.
    pub fn residual_covariance(&self, space: ResidualSpace) -> &DMatrix<f64> {
        match space {
            ResidualSpace::State => &self.h,
            ResidualSpace::Innovation => &self.riccati.sigma,
        }
    }

    /// Eigenvalues of the residual covariance, clipped at zero.
    pub fn residual_weights(&self, space: ResidualSpace) -> Vec<f64> {
        let cov = self.residual_covariance(space).clone();
        cov.symmetric_eigenvalues().iter().map(|&v| v.max(0.0)).collect()
    }
}

/// Steady-state Kalman filter driven by the known inputs.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    /// `x̂(k|k−1)`.
    x_pred: DVector<f64>,
    /// `x̂(k−1|k−1)`, `p_s(k−1)`, `u(k−1)`.
    prev: Option<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

/// Output of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub x_filt: DVector<f64>,
    pub innovation: DVector<f64>,
    /// `ζ_k`; absent at the first step.
    pub zeta: Option<DVector<f64>>,
}

impl KalmanFilter {
    pub fn new(model: &DetectorModel) -> Self {
        Self {
            x_pred: DVector::zeros(model.sys.order()),
            prev: None,
        }
    }

    /// Consumes `z(k)` and the inputs `p_s(k) = f(k) + e(k)` and `u(k)`
    /// applied at step `k`.
    pub fn step(&mut self, model: &DetectorModel, z: &DVector<f64>, p_s: &DVector<f64>, u: &DVector<f64>) -> FilterStep {
        let sys = &model.sys;
        let innovation = z - &sys.c * &self.x_pred - &sys.d_ref * p_s;
        let x_filt = &model.i_minus_lc * &self.x_pred + &model.riccati.l * (z - &sys.d_ref * p_s);
        let zeta = self
            .prev
            .as_ref()
            .map(|(xf, p, up)| &x_filt - &sys.a * xf - &sys.b_ref * p - &sys.b_load * up);
        self.x_pred = &sys.a * &x_filt + &sys.b_ref * p_s + &sys.b_load * u;
        self.prev = Some((x_filt.clone(), p_s.clone(), u.clone()));
        FilterStep {
            x_filt,
            innovation,
            zeta,
        }
    }
}

/// `(W, V)` from residuals `ζ_k` and the watermarks `e(k−1)` paired with them.
pub fn block_statistics(
    residuals: &[DVector<f64>],
    watermarks: &[DVector<f64>],
    cov: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if residuals.len() != watermarks.len() {
        return Err(Error::Dimension(format!(
            "{} residuals but {} watermark samples",
            residuals.len(),
            watermarks.len()
        )));
    }
    if residuals.is_empty() {
        return Err(Error::InsufficientData("a block needs at least one residual".into()));
    }
    let n = cov.nrows();
    let d = watermarks[0].len();
    let mut w = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(d, n);
    for (z, e) in residuals.iter().zip(watermarks) {
        if z.len() != n || e.len() != d {
            return Err(Error::Dimension("residual or watermark length changed within a block".into()));
        }
        w.ger(1.0, z, z, 1.0);
        v.ger(1.0, e, z, 1.0);
    }
    let t = residuals.len() as f64;
    Ok((w / t - cov, v / t))
}

/// `(ξ₁, ξ₂) = (|tr W|, ‖V‖_F)`.
pub fn indicators(w: &DMatrix<f64>, v: &DMatrix<f64>) -> (f64, f64) {
    (w.trace().abs(), v.norm())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    /// Block index, from 1.
    pub j: usize,
    pub t_start_s: f64,
    pub samples: usize,
    pub xi1: f64,
    pub xi2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub alarm: bool,
    #[serde(skip)]
    pub w: DMatrix<f64>,
    #[serde(skip)]
    pub v: DMatrix<f64>,
}

/// Area `area`'s slice of step `k`: `(z, p_s, e, u)`.
pub fn area_signals(
    trace: &SimTrace,
    area: usize,
    k: usize,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let rows = trace.area_rows(area);
    let cols = trace.area_cols(area);
    let z = DVector::from_iterator(rows.len(), rows.iter().map(|&r| trace.z[k][r]));
    let f = DVector::from_iterator(cols.len(), cols.iter().map(|&c| trace.f[k][c]));
    let e = DVector::from_iterator(cols.len(), cols.iter().map(|&c| trace.e[k][c]));
    (z, f + &e, e, trace.u_load[k].clone())
}

/// Online detector: feed one step at a time, get a report per full block.
#[derive(Debug, Clone)]
pub struct Detector {
    model: DetectorModel,
    thresholds: Thresholds,
    block_t: usize,
    space: ResidualSpace,
    filter: KalmanFilter,
    k: usize,
    prev_e: Option<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
    watermarks: Vec<DVector<f64>>,
    tau: f64,
    reports: Vec<BlockReport>,
}

impl Detector {
    pub fn new(model: DetectorModel, thresholds: Thresholds, block_t: usize, space: ResidualSpace) -> Result<Self> {
        if block_t < 2 {
            return Err(Error::InvalidParameter("block_t must be at least 2".into()));
        }
        let filter = KalmanFilter::new(&model);
        let tau = model.sys.tau;
        Ok(Self {
            model,
            thresholds,
            block_t,
            space,
            filter,
            k: 0,
            prev_e: None,
            residuals: Vec::with_capacity(block_t),
            watermarks: Vec::with_capacity(block_t),
            tau,
            reports: Vec::new(),
        })
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn reports(&self) -> &[BlockReport] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<BlockReport> {
        self.reports
    }

    /// Processes step `k` and returns the report of the block it completes.
    pub fn push(
        &mut self,
        z: &DVector<f64>,
        p_s: &DVector<f64>,
        e: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<Option<BlockReport>> {
        let step = self.filter.step(&self.model, z, p_s, u);
        if let (Some(zeta), Some(e_prev)) = (step.zeta, self.prev_e.take()) {
            let r = match self.space {
                ResidualSpace::State => zeta,
                ResidualSpace::Innovation => step.innovation,
            };
            self.residuals.push(r);
            self.watermarks.push(e_prev);
        }
        self.prev_e = Some(e.clone());
        self.k += 1;
        if self.k % self.block_t != 0 {
            return Ok(None);
        }
        let (w, v) = block_statistics(&self.residuals, &self.watermarks, self.model.residual_covariance(self.space))?;
        let (xi1, xi2) = indicators(&w, &v);
        let j = self.k / self.block_t;
        let report = BlockReport {
            j,
            t_start_s: ((j - 1) * self.block_t) as f64 * self.tau,
            samples: self.residuals.len(),
            xi1,
            xi2,
            eta1: self.thresholds.eta1,
            eta2: self.thresholds.eta2,
            alarm: xi1 >= self.thresholds.eta1 || xi2 >= self.thresholds.eta2,
            w,
            v,
        };
        self.residuals.clear();
        self.watermarks.clear();
        self.reports.push(report.clone());
        Ok(Some(report))
    }
}

impl Monitor for Detector {
    fn observe(&mut self, trace: &SimTrace, k: usize) -> Result<bool> {
        let (z, p, e, u) = area_signals(trace, self.model.area, k);
        Ok(self.push(&z, &p, &e, &u)?.is_some_and(|r| r.alarm))
    }
}

/// Runs a detector over a recorded trace; a trailing partial block is
/// dropped.
pub fn run_detector(
    model: &DetectorModel,
    thresholds: Thresholds,
    block_t: usize,
    space: ResidualSpace,
    trace: &SimTrace,
) -> Result<Vec<BlockReport>> {
    let mut det = Detector::new(model.clone(), thresholds, block_t, space)?;
    for k in 0..trace.len() {
        let (z, p, e, u) = area_signals(trace, model.area, k);
        det.push(&z, &p, &e, &u)?;
    }
    Ok(det.into_reports())
}

/// `(ξ₁, ξ₂)` over the first `window` steps of an honest trace treated as a
/// single block.
pub fn long_window_statistics(
    model: &DetectorModel,
    space: ResidualSpace,
    trace: &SimTrace,
    window: usize,
) -> Result<(f64, f64)> {
    if trace.len() < window || window < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs {window} honest samples, trace has {}",
            trace.len()
        )));
    }
    let report = run_detector(model, Thresholds::new(f64::MAX, f64::MAX)?, window, space, trace)?;
    Ok((report[0].xi1, report[0].xi2))
}

/// Empirical thresholds `η = κ′ ξ∞` from an honest trace.
pub fn calibrate_empirical(
    model: &DetectorModel,
    space: ResidualSpace,
    trace: &SimTrace,
    t_inf: usize,
    kappa_prime: f64,
) -> Result<Thresholds> {
    let (xi1, xi2) = long_window_statistics(model, space, trace, t_inf)?;
    Thresholds::from_long_window(xi1, xi2, kappa_prime)
}

fn upper_quantile(mut draws: Vec<f64>, theta0: f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let m = draws.len();
    let rank = ((1.0 - theta0) * m as f64).ceil() as usize;
    draws[rank.clamp(1, m) - 1]
}

fn check_np(theta0: f64, samples: usize, block_t: usize) -> Result<()> {
    if !(theta0 > 0.0 && theta0 <= 1.0) {
        return Err(Error::InvalidParameter(format!("theta0 must lie in (0, 1], got {theta0}")));
    }
    if samples == 0 || block_t == 0 {
        return Err(Error::InvalidParameter("Monte Carlo needs samples and a block length".into()));
    }
    Ok(())
}

/// `(1 − θ₀)` quantile of `|Σᵢ λᵢ (χ²_T,ᵢ / T − 1)|`, the law of `|tr W|` for
/// white Gaussian residuals whose covariance has eigenvalues `weights`.
pub fn np_threshold_trace(weights: &[f64], block_t: usize, theta0: f64, samples: usize, seed: u64) -> Result<f64> {
    check_np(theta0, samples, block_t)?;
    let t = block_t as f64;
    let chi = ChiSquared::new(t).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Calibration);
    let draws = (0..samples)
        .map(|_| {
            weights
                .iter()
                .map(|&l| l * (rng.sample(chi) / t - 1.0))
                .sum::<f64>()
                .abs()
        })
        .collect();
    Ok(upper_quantile(draws, theta0))
}

/// `(1 − θ₀)` quantile of `‖(1/T) Σ e ζᵀ‖_F` with `e ~ N(0, σ_e² I_d)`
/// independent of `ζ`, whose covariance has eigenvalues `weights`.
pub fn np_threshold_correlation(
    weights: &[f64],
    sigma_e2: f64,
    d: usize,
    block_t: usize,
    theta0: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_np(theta0, samples, block_t)?;
    let sd_e = sigma_e2.sqrt();
    let t = block_t as f64;
    // a separate substream index keeps the two calibrations independent
    let mut rng = stream_rng(seed ^ 0x9e37_79b9_7f4a_7c15, Stream::Calibration);
    let mut e = vec![0.0; d * block_t];
    let mut z = vec![0.0; block_t];
    let draws = (0..samples)
        .map(|_| {
            for v in e.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal) * sd_e;
            }
            let mut total = 0.0;
            for &l in weights {
                for v in z.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal);
                }
                for row in e.chunks_exact(block_t) {
                    let s: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    total += l * s * s;
                }
            }
            total.sqrt() / t
        })
        .collect();
    Ok(upper_quantile(draws, theta0))
}

/// Neyman-Pearson thresholds for `model` at false-alarm level `theta0` per
/// statistic.
pub fn calibrate_neyman_pearson(
    model: &DetectorModel,
    space: ResidualSpace,
    sigma_e2: f64,
    block_t: usize,
    theta0: f64,
    samples: usize,
    seed: u64,
) -> Result<Thresholds> {
    let weights = model.residual_weights(space);
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidParameter("residual covariance is zero; nothing to calibrate".into()));
    }
    let d = model.sys.n_ref();
    let eta1 = np_threshold_trace(&weights, block_t, theta0, samples, seed)?;
    let eta2 = np_threshold_correlation(&weights, sigma_e2, d, block_t, theta0, samples, seed)?;
    Thresholds::new(eta1, eta2)
}
