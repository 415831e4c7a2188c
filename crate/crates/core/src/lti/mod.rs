//! Linear time-invariant systems: containers, zero-order-hold discretization,
//! interconnection, minimal realization and the filtering Riccati equation.

mod expm;
mod interconnect;
mod realization;
mod riccati;

pub use expm::expm;
pub use interconnect::{close_all_loops, close_loop_except, ControllerBlock};
pub use realization::{minimal_realization, DEFAULT_REALIZATION_TOL};

/// Relative singular-value floor for the PBH test in
/// [`reachable_spectral_radius`].
pub const DEFAULT_PBH_TOL: f64 = 1e-9;
pub use riccati::{riccati_map, solve_dare, solve_dare_with, DareOptions, RiccatiSolution};

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Meaning of one input column or output row of a state-space model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Load-reference setpoint of generator `unit` (global generator index).
    Setpoint { area: usize, unit: usize },
    /// Active (`reactive == false`) or reactive load deviation at a load bus.
    Load { area: usize, bus: usize, reactive: bool },
    /// Flow on tie `tie`, signed as export from `area`.
    TieFlow { area: usize, tie: usize },
    /// Frequency deviation of an area.
    Frequency { area: usize },
    /// Anonymous signal, used by controller realizations.
    Signal(usize),
}

impl Channel {
    pub fn area(&self) -> Option<usize> {
        match *self {
            Channel::Setpoint { area, .. }
            | Channel::Load { area, .. }
            | Channel::TieFlow { area, .. }
            | Channel::Frequency { area } => Some(area),
            Channel::Signal(_) => None,
        }
    }

    pub fn is_load(&self) -> bool {
        matches!(self, Channel::Load { .. })
    }
}

/// Continuous model `ẋ = A x + B u + γ'`, `y = C x + n'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Process-noise intensity Q′.
    pub process_cov: DMatrix<f64>,
    /// Measurement-noise covariance R′.
    pub meas_cov: DMatrix<f64>,
    pub input_labels: Vec<Channel>,
    pub output_labels: Vec<Channel>,
}

impl ContinuousStateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        process_cov: DMatrix<f64>,
        meas_cov: DMatrix<f64>,
        input_labels: Vec<Channel>,
        output_labels: Vec<Channel>,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dims("A", &a, n, n)?;
        check_dims("B", &b, n, input_labels.len())?;
        check_dims("C", &c, output_labels.len(), n)?;
        check_dims("Q'", &process_cov, n, n)?;
        check_dims("R'", &meas_cov, output_labels.len(), output_labels.len())?;
        check_symmetric_psd("Q'", &process_cov)?;
        check_symmetric_psd("R'", &meas_cov)?;
        Ok(Self {
            a,
            b,
            c,
            process_cov,
            meas_cov,
            input_labels,
            output_labels,
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
}

/// Discrete model
/// `x(k+1) = A x + B_ref p + B_load u + γ`, `y = C x + D_ref p + n`.
///
/// Plants have `D_ref = 0`; controller realizations use the feedthrough term.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub a: DMatrix<f64>,
    pub b_ref: DMatrix<f64>,
    pub b_load: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_ref: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Sampling period in seconds.
    pub tau: f64,
    pub ref_labels: Vec<Channel>,
    pub load_labels: Vec<Channel>,
    pub output_labels: Vec<Channel>,
}

impl DiscreteStateSpace {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b_ref: DMatrix<f64>,
        b_load: DMatrix<f64>,
        c: DMatrix<f64>,
        d_ref: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        tau: f64,
        ref_labels: Vec<Channel>,
        load_labels: Vec<Channel>,
        output_labels: Vec<Channel>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = output_labels.len();
        check_dims("A_d", &a, n, n)?;
        check_dims("B_ref", &b_ref, n, ref_labels.len())?;
        check_dims("B_load", &b_load, n, load_labels.len())?;
        check_dims("C_d", &c, m, n)?;
        check_dims("D_ref", &d_ref, m, ref_labels.len())?;
        check_dims("Q", &q, n, n)?;
        check_dims("R", &r, m, m)?;
        for (name, mat) in [("A_d", &a), ("B_ref", &b_ref), ("B_load", &b_load), ("C_d", &c)] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        check_symmetric_psd("Q", &q)?;
        check_symmetric_psd("R", &r)?;
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("sampling period must be positive, got {tau}")));
        }
        let dss = Self {
            a,
            b_ref,
            b_load,
            c,
            d_ref,
            q,
            r,
            tau,
            ref_labels,
            load_labels,
            output_labels,
        };
        dss.check_rank_condition();
        Ok(dss)
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_ref(&self) -> usize {
        self.b_ref.ncols()
    }

    pub fn n_load(&self) -> usize {
        self.b_load.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `[B_ref B_load]`.
    pub fn b_all(&self) -> DMatrix<f64> {
        hstack(&[&self.b_ref, &self.b_load])
    }

    /// Whether `rank(C B_ref)` equals the number of outputs. Violations are
    /// logged, never rejected.
    pub fn check_rank_condition(&self) -> bool {
        let m = self.n_outputs();
        if m == 0 || self.n_ref() == 0 || self.order() == 0 {
            return true;
        }
        let cb = &self.c * &self.b_ref;
        let rank = numerical_rank(&cb, 1e-10);
        if rank != m {
            log::debug!("rank(C_d B_ref) = {rank} but the model has {m} outputs");
        }
        rank == m
    }

    /// Markov parameters `C A^k [B_ref B_load]` for `k = 0..count`.
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let b = self.b_all();
        let mut out = Vec::with_capacity(count);
        let mut ak_b = b;
        for _ in 0..count {
            out.push(&self.c * &ak_b);
            ak_b = &self.a * &ak_b;
        }
        out
    }

    /// Copy with the process-noise covariance cleared.
    pub fn without_process_noise(&self) -> Self {
        let mut out = self.clone();
        out.q.fill(0.0);
        out
    }
}

/// Zero-order-hold discretization.
///
/// `A_d = exp(Aτ)` and `B_d = ∫₀^τ exp(As) ds · B` come from one augmented
/// exponential; `Q = ∫₀^τ exp(As) Q' exp(Aᵀs) ds` from van Loan's block
/// construction. `R` is carried unchanged.
pub fn discretize_zoh(css: &ContinuousStateSpace, tau: f64) -> Result<DiscreteStateSpace> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("sampling period must be positive, got {tau}")));
    }
    for (name, mat) in [("A", &css.a), ("B", &css.b), ("C", &css.c), ("Q'", &css.process_cov)] {
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    let n = css.order();
    let d = css.b.ncols();

    let mut aug = DMatrix::<f64>::zeros(n + d, n + d);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&css.a * tau));
    aug.view_mut((0, n), (n, d)).copy_from(&(&css.b * tau));
    let phi = expm(&aug);
    let a_d = phi.view((0, 0), (n, n)).into_owned();
    let b_d = phi.view((0, n), (n, d)).into_owned();

    let q_d = van_loan_noise(&css.a, &css.process_cov, tau);

    let (ref_idx, load_idx): (Vec<usize>, Vec<usize>) =
        (0..d).partition(|&j| !css.input_labels[j].is_load());
    let b_ref = select_columns(&b_d, &ref_idx);
    let b_load = select_columns(&b_d, &load_idx);
    let ref_labels = ref_idx.iter().map(|&j| css.input_labels[j]).collect();
    let load_labels = load_idx.iter().map(|&j| css.input_labels[j]).collect();
    let m = css.c.nrows();

    DiscreteStateSpace::new(
        a_d,
        b_ref,
        b_load,
        css.c.clone(),
        DMatrix::zeros(m, ref_idx.len()),
        q_d,
        css.meas_cov.clone(),
        tau,
        ref_labels,
        load_labels,
        css.output_labels.clone(),
    )
}

/// `∫₀^τ exp(As) Q exp(Aᵀs) ds` via van Loan's method.
pub fn van_loan_noise(a: &DMatrix<f64>, q: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * tau));
    m.view_mut((0, n), (n, n)).copy_from(&(q * tau));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * tau));
    let f = expm(&m);
    let f12 = f.view((0, n), (n, n)).into_owned();
    let f22 = f.view((n, n), (n, n)).into_owned();
    symmetrize(&(f22.transpose() * f12))
}

/// Largest eigenvalue modulus of `A_d`.
pub fn spectral_radius(dss: &DiscreteStateSpace) -> f64 {
    spectral_radius_of(&dss.a)
}

pub fn spectral_radius_of(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest modulus among the eigenvalues that are both reachable from
/// `[B_ref, B_load]` and observable through `C`, by the PBH rank test:
/// λ is dropped when `[A − λI, B]` or `[A − λI; C]` has a singular value below
/// `tol` times the Frobenius norm of the stacked matrix.
pub fn reachable_spectral_radius(dss: &DiscreteStateSpace, tol: f64) -> f64 {
    let n = dss.order();
    let to_c = |m: &DMatrix<f64>| m.map(|v| Complex::new(v, 0.0));
    let a = to_c(&dss.a);
    let b = to_c(&dss.b_all());
    let c = to_c(&dss.c);
    let degenerate = |m: DMatrix<Complex<f64>>| {
        let scale = m.norm();
        let smin = m.singular_values().min();
        smin <= tol * scale.max(f64::MIN_POSITIVE)
    };
    let mut rho = 0.0f64;
    for lambda in eigenvalues(&dss.a) {
        if lambda.norm() <= rho {
            continue;
        }
        let shifted = &a - DMatrix::<Complex<f64>>::identity(n, n) * lambda;
        let mut wide = DMatrix::zeros(n, n + b.ncols());
        wide.columns_mut(0, n).copy_from(&shifted);
        wide.columns_mut(n, b.ncols()).copy_from(&b);
        let mut tall = DMatrix::zeros(n + c.nrows(), n);
        tall.rows_mut(0, n).copy_from(&shifted);
        tall.rows_mut(n, c.nrows()).copy_from(&c);
        if !degenerate(wide) && !degenerate(tall) {
            rho = lambda.norm();
        }
    }
    rho
}

/// Eigenvalues of a real square matrix.
///
/// Delegates to faer's Hessenberg QR, which handles the clustered near-zero
/// and unit-modulus spectra of discretized grid models reliably.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let m = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    m.eigenvalues()
        .expect("Hessenberg QR converges for finite matrices")
        .into_iter()
        .map(|z| Complex::new(z.re, z.im))
        .collect()
}

/// Solution of `X = A X Aᵀ + W` for a matrix whose excited modes are stable,
/// by Smith doubling. Undriven marginal modes are tolerated.
pub fn discrete_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = w.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let next = &x + &ak * &x * ak.transpose();
        let change = (&next - &x).norm();
        x = next;
        ak = &ak * &ak;
        if change <= 1e-15 * x.norm() || ak.norm() == 0.0 {
            break;
        }
    }
    symmetrize(&x)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        if b.ncols() > 0 {
            out.view_mut((0, at), (b.nrows(), b.ncols())).copy_from(*b);
        }
        at += b.ncols();
    }
    out
}

pub(crate) fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

pub(crate) fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub(crate) fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Symmetric square-root factor `S` with `S Sᵀ = M` for a PSD matrix.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = symmetrize(m).symmetric_eigen();
    let mut s = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        s.column_mut(j).scale_mut(root);
    }
    s
}

fn check_dims(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_symmetric_psd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
    }
    if m.nrows() > 0 {
        let min_eig = symmetrize(m).symmetric_eigenvalues().min();
        if min_eig < -1e-9 * scale {
            return Err(Error::InvalidParameter(format!("{name} is not positive semidefinite")));
        }
    }
    Ok(())
}
