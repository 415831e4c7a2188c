//! Filtering-form discrete algebraic Riccati equation
//! `P = A P Aᵀ + Q − A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ`, solved by the structured
//! doubling algorithm.

use nalgebra::DMatrix;

use super::{symmetrize, DiscreteStateSpace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    /// Stop when the relative Frobenius change of the iterate drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

/// Steady-state prediction covariance `P`, Kalman gain `L = P Cᵀ Σ⁻¹` and
/// innovation covariance `Σ = C P Cᵀ + R`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// `‖Riccati(P) − P‖_F / max(‖P‖_F, ‖Q‖_F)`.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// One application of the filtering Riccati map.
pub fn riccati_map(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = c * p * c.transpose() + r;
    let apc = a * p * c.transpose();
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "innovation covariance" })?;
    let gain_t = chol.solve(&apc.transpose());
    Ok(symmetrize(&(a * p * a.transpose() + q - apc * gain_t)))
}

pub fn solve_dare(dss: &DiscreteStateSpace) -> Result<RiccatiSolution> {
    solve_dare_with(&dss.a, &dss.c, &dss.q, &dss.r, DareOptions::default())
}

pub fn solve_dare_with(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    let r_chol = symmetrize(r)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "measurement covariance" })?;
    let ident = DMatrix::<f64>::identity(n, n);

    // Doubling on the dual (control-form) equation X = Fᵀ X (I + G X)⁻¹ F + H
    // with F = Aᵀ, G = Cᵀ R⁻¹ C, H = Q. H_k converges to P.
    let mut f = a.transpose();
    let mut g = symmetrize(&(c.transpose() * r_chol.solve(c)));
    let mut h = symmetrize(q);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let w = &ident + &g * &h;
        let lu = w.lu();
        let w_inv_f = lu.solve(&f).ok_or(Error::NotPositiveDefinite { what: "doubling step" })?;
        let w_inv_g = lu.solve(&g).ok_or(Error::NotPositiveDefinite { what: "doubling step" })?;
        let f_next = &f * &w_inv_f;
        let g_next = symmetrize(&(&g + &f * &w_inv_g * f.transpose()));
        let h_next = symmetrize(&(&h + f.transpose() * &h * &w_inv_f));
        if h_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotConverged {
                iterations,
                residual,
            });
        }
        let change = (&h_next - &h).norm();
        let scale = h_next.norm().max(f64::MIN_POSITIVE);
        residual = change / scale;
        f = f_next;
        g = g_next;
        h = h_next;
        if residual < opts.tol || change == 0.0 {
            break;
        }
    }
    if !(residual < opts.tol || residual == 0.0) {
        return Err(Error::NotConverged {
            iterations,
            residual,
        });
    }

    let p = h;
    let sigma = symmetrize(&(c * &p * c.transpose() + r));
    let sigma_chol = sigma
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "innovation covariance" })?;
    let l = sigma_chol.solve(&(c * &p)).transpose();
    let mapped = riccati_map(a, c, q, r, &p)?;
    let residual_norm = (&mapped - &p).norm() / p.norm().max(q.norm()).max(f64::MIN_POSITIVE);
    Ok(RiccatiSolution {
        p,
        l,
        sigma,
        residual_norm,
        iterations,
    })
}
