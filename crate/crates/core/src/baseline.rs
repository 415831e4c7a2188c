//! Regression baseline: frequency predicted as a finite lagged combination of
//! the telemetered load deviations, with an alarm when the prediction error
//! exceeds a trained bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub order: usize,
    /// `alpha[h]` weights the load vector lagged by `h` samples.
    pub alpha: Vec<Vec<f64>>,
    /// Root-mean-square fit error on the training data.
    pub fit_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub gamma: f64,
    pub alarm: bool,
}

impl ArxModel {
    pub fn n_loads(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    /// `ω̂(k)` from `loads`, ordered oldest to newest with `u(k)` last.
    pub fn predict(&self, loads: &[DVector<f64>]) -> Result<f64> {
        if loads.len() < self.order {
            return Err(Error::InsufficientData(format!(
                "prediction needs {} load samples, got {}",
                self.order,
                loads.len()
            )));
        }
        let newest = loads.len() - 1;
        let mut acc = 0.0;
        for (h, coeffs) in self.alpha.iter().enumerate() {
            let u = &loads[newest - h];
            acc += coeffs.iter().zip(u.iter()).map(|(a, v)| a * v).sum::<f64>();
        }
        Ok(acc)
    }

    /// Coefficients as CSV, one row per lag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag");
        for j in 0..self.n_loads() {
            out.push_str(&format!(",load_{j}"));
        }
        out.push('\n');
        for (h, row) in self.alpha.iter().enumerate() {
            out.push_str(&h.to_string());
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Least-squares fit of `ω(k) ≈ Σ_h α_hᵀ u(k−h)` for `h < order`.
///
/// A rank-deficient design yields the minimum-norm solution.
pub fn fit_arx(loads: &[DVector<f64>], omega: &[f64], order: usize) -> Result<ArxModel> {
    if order == 0 {
        return Err(Error::InvalidParameter("regression order must be at least 1".into()));
    }
    if loads.len() != omega.len() {
        return Err(Error::Dimension(format!("{} load samples but {} frequency samples", loads.len(), omega.len())));
    }
    let n_loads = loads.first().map_or(0, |u| u.len());
    let cols = order * n_loads;
    if loads.len() < order || loads.len() - order + 1 < cols {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot identify {cols} coefficients",
            loads.len()
        )));
    }
    let rows = loads.len() - order + 1;
    let design = DMatrix::from_fn(rows, cols, |r, c| {
        let k = r + order - 1;
        let (h, j) = (c / n_loads, c % n_loads);
        loads[k - h][j]
    });
    let target = DVector::from_iterator(rows, omega[order - 1..].iter().cloned());
    let svd = design.clone().svd(true, true);
    let top = svd.singular_values.max();
    let cutoff = top * 1e-12 * rows.max(cols) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < cols {
        log::warn!("regression design has rank {rank} < {cols}; using the minimum-norm solution");
    }
    let theta = svd
        .solve(&target, cutoff)
        .map_err(|e| Error::InvalidParameter(format!("least squares failed: {e}")))?;
    let residual = (&design * &theta - &target).norm() / (rows as f64).sqrt();
    let alpha = (0..order)
        .map(|h| theta.rows(h * n_loads, n_loads).iter().cloned().collect())
        .collect();
    Ok(ArxModel {
        order,
        alpha,
        fit_residual: residual,
    })
}

/// `γ = ω − ω̂`, alarm when `|γ| > η′`.
pub fn detect(model: &ArxModel, omega: f64, loads: &[DVector<f64>], eta_prime: f64) -> Result<Detection> {
    let gamma = omega - model.predict(loads)?;
    Ok(Detection {
        gamma,
        alarm: gamma.abs() > eta_prime,
    })
}

/// The report `ω̂ − η′`, moved toward `ω̂` by the fewest ulps needed for the
/// rounded residual to satisfy `|γ| ≤ η′`.
pub fn evading_report(omega_hat: f64, eta_prime: f64) -> f64 {
    let mut w = omega_hat - eta_prime;
    while (w - omega_hat).abs() > eta_prime {
        w = if w < omega_hat { w.next_up() } else { w.next_down() };
    }
    w
}

/// Largest `|γ(k)|` over the window, starting once `order` loads are known.
pub fn train_threshold(model: &ArxModel, loads: &[DVector<f64>], omega: &[f64]) -> Result<f64> {
    if loads.len() != omega.len() {
        return Err(Error::Dimension(format!("{} load samples but {} frequency samples", loads.len(), omega.len())));
    }
    if loads.len() < model.order {
        return Err(Error::InsufficientData("training window is shorter than the regression order".into()));
    }
    let mut eta = 0.0f64;
    for k in model.order - 1..loads.len() {
        let gamma = omega[k] - model.predict(&loads[..=k])?;
        eta = eta.max(gamma.abs());
    }
    Ok(eta)
}
