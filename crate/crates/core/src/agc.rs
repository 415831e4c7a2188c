//! Per-area AGC chain and the private watermark added to its commands.
//!
//! The chain computes the area control error from the reported tie flows and
//! frequency, smooths it with a first-order filter, applies a PI law every
//! `kappa` samples and splits the scalar command among the AGC units by
//! participation factor.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::grid::{AreaSpec, GridSpec};
use crate::lti::{Channel, ControllerBlock, DiscreteStateSpace};
use crate::rng::{standard_normal_vec, stream_rng, Stream};
use crate::{Error, Result};

/// `Σ tie flows + β·ω`.
pub fn compute_ace(tie_flows: &[f64], omega: f64, beta: f64) -> f64 {
    tie_flows.iter().sum::<f64>() + beta * omega
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcController {
    pub beta: f64,
    pub smooth_alpha: f64,
    pub kp: f64,
    pub ki: f64,
    pub participation: Vec<f64>,
    pub kappa: usize,
    /// Sampling period in seconds; the integrator advances by `kappa·tau`.
    pub tau: f64,
    ace_filtered: f64,
    integral: f64,
    last_command: f64,
}

impl AgcController {
    pub fn new(
        beta: f64,
        smooth_alpha: f64,
        kp: f64,
        ki: f64,
        participation: Vec<f64>,
        kappa: usize,
        tau: f64,
    ) -> Result<Self> {
        if !(smooth_alpha > 0.0 && smooth_alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("smoothing coefficient {smooth_alpha} outside (0, 1]")));
        }
        if kappa < 1 {
            return Err(Error::InvalidParameter("kappa must be at least 1".into()));
        }
        let total: f64 = participation.iter().sum();
        if participation.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("participation sums to {total}, not 1")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("sampling period must be positive, got {tau}")));
        }
        Ok(Self {
            beta,
            smooth_alpha,
            kp,
            ki,
            participation,
            kappa,
            tau,
            ace_filtered: 0.0,
            integral: 0.0,
            last_command: 0.0,
        })
    }

    /// Controller for an area with AGC units, or `None` for an area without.
    pub fn for_area(area: &AreaSpec, tau: f64) -> Result<Option<Self>> {
        if !area.has_agc() {
            return Ok(None);
        }
        Self::new(
            area.effective_beta(),
            area.smooth_alpha,
            area.kp,
            area.ki,
            area.participation(),
            area.kappa,
            tau,
        )
        .map(Some)
    }

    pub fn reset(&mut self) {
        self.ace_filtered = 0.0;
        self.integral = 0.0;
        self.last_command = 0.0;
    }

    pub fn last_command(&self) -> f64 {
        self.last_command
    }

    /// Consumes the area's reported measurements (incident tie flows, then
    /// frequency) at step `k` and returns one setpoint per AGC unit.
    pub fn step(&mut self, z: &[f64], k: usize) -> DVector<f64> {
        let (omega, ties) = z.split_last().expect("area measurement vector is never empty");
        let ace = compute_ace(ties, *omega, self.beta);
        let a = self.smooth_alpha;
        self.ace_filtered = (1.0 - a) * self.ace_filtered + a * ace;
        if k % self.kappa == 0 {
            self.integral += self.ace_filtered * (self.kappa as f64 * self.tau);
            self.last_command = self.kp * self.ace_filtered + self.ki * self.integral;
        }
        self.dispatch(self.last_command)
    }

    pub fn dispatch(&self, command: f64) -> DVector<f64> {
        DVector::from_iterator(self.participation.len(), self.participation.iter().map(|p| p * command))
    }

    /// Two-state realization `(filter, integrator)` of the chain; exact for
    /// `kappa == 1`.
    pub fn realize_as_lti(&self, n_ties: usize) -> Result<DiscreteStateSpace> {
        if self.kappa != 1 {
            return Err(Error::Unsupported(format!(
                "an LTI realization needs commands every sample, got kappa = {}",
                self.kappa
            )));
        }
        let a = self.smooth_alpha;
        let h = self.tau;
        let m = n_ties + 1;
        let mut g = DMatrix::from_element(1, m, 1.0);
        g[(0, n_ties)] = self.beta;
        let gain = self.kp + self.ki * h;
        let part = DMatrix::from_column_slice(self.participation.len(), 1, &self.participation);

        let a_k = DMatrix::from_row_slice(2, 2, &[1.0 - a, 0.0, h * (1.0 - a), 1.0]);
        let b_k = DMatrix::from_row_slice(2, 1, &[a, h * a]) * &g;
        let c_k = &part * DMatrix::from_row_slice(1, 2, &[gain * (1.0 - a), self.ki]);
        let d_k = &part * (&g * (gain * a));
        let np = self.participation.len();
        DiscreteStateSpace::new(
            a_k,
            b_k,
            DMatrix::zeros(2, 0),
            c_k,
            d_k,
            DMatrix::zeros(2, 2),
            DMatrix::identity(np, np),
            self.tau,
            (0..m).map(Channel::Signal).collect(),
            vec![],
            (0..np).map(Channel::Signal).collect(),
        )
    }

    pub fn controller_block(&self, area: usize, n_ties: usize, excitation_var: f64) -> Result<ControllerBlock> {
        Ok(ControllerBlock {
            area,
            realization: self.realize_as_lti(n_ties)?,
            excitation_var,
        })
    }
}

/// LTI blocks for every area that runs AGC, each carrying the watermark
/// variance `sigma_e2`.
pub fn controller_blocks(grid: &GridSpec, tau: f64, sigma_e2: f64) -> Result<Vec<ControllerBlock>> {
    let mut blocks = Vec::new();
    for (i, area) in grid.areas.iter().enumerate() {
        if let Some(ctrl) = AgcController::for_area(area, tau)? {
            blocks.push(ctrl.controller_block(i, grid.incident_ties(i).len(), sigma_e2)?);
        }
    }
    Ok(blocks)
}

/// Seeded i.i.d. Gaussian excitation for one area's AGC units.
#[derive(Debug, Clone)]
pub struct WatermarkSource {
    pub sigma_e2: f64,
    pub dimension: usize,
    rng: ChaCha8Rng,
}

impl WatermarkSource {
    pub fn new(sigma_e2: f64, dimension: usize, seed: u64, area: usize) -> Result<Self> {
        if !(sigma_e2 >= 0.0 && sigma_e2.is_finite()) {
            return Err(Error::InvalidParameter(format!("watermark variance {sigma_e2} must be non-negative")));
        }
        Ok(Self {
            sigma_e2,
            dimension,
            rng: stream_rng(seed, Stream::Watermark(area)),
        })
    }

    /// Next excitation vector. The stream advances even when the variance is
    /// zero, so paired runs stay aligned.
    pub fn draw(&mut self) -> DVector<f64> {
        let z = standard_normal_vec(&mut self.rng, self.dimension);
        if self.sigma_e2 == 0.0 {
            DVector::zeros(self.dimension)
        } else {
            z * self.sigma_e2.sqrt()
        }
    }

    /// `(setpoints + e, e)`.
    pub fn apply(&mut self, setpoints: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let e = self.draw();
        (setpoints + &e, e)
    }
}
