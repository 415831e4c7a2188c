//! Minimal realization by orthogonal projection onto the reachable, then the
//! observable, Krylov subspace.
//!
//! Process noise counts as an input for reachability so that modes excited
//! only by noise survive; those modes matter to a Kalman filter.

use nalgebra::{DMatrix, DVector};

use super::{hstack, psd_factor, symmetrize, DiscreteStateSpace};

pub const DEFAULT_REALIZATION_TOL: f64 = 1e-8;

/// Orthonormal basis of span{B, AB, A²B, ...}, built by block Arnoldi with
/// two-pass Gram-Schmidt. A candidate is kept when its component orthogonal to
/// the current basis exceeds `tol` relative to the candidate's own norm.
pub(crate) fn krylov_basis(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let floor = 1e-14 * a.norm().max(1.0);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut frontier: Vec<DVector<f64>> = Vec::new();

    let try_add = |candidate: DVector<f64>, basis: &mut Vec<DVector<f64>>| -> Option<DVector<f64>> {
        let norm = candidate.norm();
        if norm == 0.0 || basis.len() == n {
            return None;
        }
        let mut w = candidate;
        for _ in 0..2 {
            for q in basis.iter() {
                let proj = q.dot(&w);
                w.axpy(-proj, q, 1.0);
            }
        }
        let wn = w.norm();
        if wn > tol * norm && wn > floor {
            let q = w / wn;
            basis.push(q.clone());
            Some(q)
        } else {
            None
        }
    };

    for col in b.column_iter() {
        if let Some(q) = try_add(col.into_owned(), &mut basis) {
            frontier.push(q);
        }
    }
    while let Some(q) = frontier.pop() {
        if let Some(next) = try_add(a * q, &mut basis) {
            frontier.push(next);
        }
    }
    // breadth order is irrelevant to the spanned subspace
    let mut out = DMatrix::zeros(n, basis.len());
    for (j, q) in basis.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

fn project(dss: &DiscreteStateSpace, v: &DMatrix<f64>) -> DiscreteStateSpace {
    let vt = v.transpose();
    DiscreteStateSpace {
        a: &vt * &dss.a * v,
        b_ref: &vt * &dss.b_ref,
        b_load: &vt * &dss.b_load,
        c: &dss.c * v,
        d_ref: dss.d_ref.clone(),
        q: symmetrize(&(&vt * &dss.q * v)),
        r: dss.r.clone(),
        tau: dss.tau,
        ref_labels: dss.ref_labels.clone(),
        load_labels: dss.load_labels.clone(),
        output_labels: dss.output_labels.clone(),
    }
}

/// Reachable-and-observable part of `dss` with the same input-output map and
/// the noise covariance projected onto the retained coordinates.
pub fn minimal_realization(dss: &DiscreteStateSpace, tol: f64) -> DiscreteStateSpace {
    let n = dss.order();
    if n == 0 {
        return dss.clone();
    }
    let drivers = hstack(&[&dss.b_ref, &dss.b_load, &psd_factor(&dss.q)]);
    let v = krylov_basis(&dss.a, &drivers, tol);
    let reach = if v.ncols() < n { project(dss, &v) } else { dss.clone() };

    let u = krylov_basis(&reach.a.transpose(), &reach.c.transpose(), tol);
    let out = if u.ncols() < reach.order() { project(&reach, &u) } else { reach };
    if out.order() < n {
        log::debug!("minimal realization reduced order {n} -> {}", out.order());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{Channel, DiscreteStateSpace};

    fn model(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>) -> DiscreteStateSpace {
        let n_in = b.ncols();
        let m = c.nrows();
        DiscreteStateSpace::new(
            a,
            b,
            DMatrix::zeros(q.nrows(), 0),
            c,
            DMatrix::zeros(m, n_in),
            q,
            DMatrix::identity(m, m),
            1.0,
            (0..n_in).map(Channel::Signal).collect(),
            vec![],
            (0..m).map(Channel::Signal).collect(),
        )
        .unwrap()
    }

    fn markov_match(x: &DiscreteStateSpace, y: &DiscreteStateSpace, count: usize, tol: f64) {
        for (k, (mx, my)) in x.markov_parameters(count).iter().zip(y.markov_parameters(count)).enumerate() {
            let scale = mx.norm().max(1e-300);
            assert!((mx - &my).norm() <= tol * scale.max(1.0), "Markov parameter {k} differs");
        }
    }

    #[test]
    fn minimal_system_keeps_order() {
        let m = model(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DMatrix::zeros(2, 2),
        );
        let r = minimal_realization(&m, DEFAULT_REALIZATION_TOL);
        assert_eq!(r.order(), 2);
        markov_match(&m, &r, 50, 1e-10);
    }

    #[test]
    fn drops_unreachable_mode() {
        let m = model(
            DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.3]),
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 5.0]),
            DMatrix::zeros(3, 3),
        );
        let r = minimal_realization(&m, DEFAULT_REALIZATION_TOL);
        assert_eq!(r.order(), 2);
        markov_match(&m, &r, 50, 1e-9);
    }

    #[test]
    fn noise_driven_mode_is_kept() {
        let mut q = DMatrix::zeros(3, 3);
        q[(2, 2)] = 1.0;
        let m = model(
            DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.3]),
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 5.0]),
            q,
        );
        assert_eq!(minimal_realization(&m, DEFAULT_REALIZATION_TOL).order(), 3);
    }

    #[test]
    fn pole_zero_cancellation() {
        // 1/(z-0.5) followed by (z-0.5)/(z-0.2) = 1 - 0.3/(z-0.2):
        // x1+ = 0.5 x1 + u, x2+ = 0.2 x2 + x1, y = x1 - 0.3 x2.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 1.0, 0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, -0.3]);
        let m = model(a, b, c, DMatrix::zeros(2, 2));
        let r = minimal_realization(&m, DEFAULT_REALIZATION_TOL);
        assert_eq!(r.order(), 1);
        assert!((r.a[(0, 0)] - 0.2).abs() < 1e-12);
        markov_match(&m, &r, 50, 1e-9);
    }

    #[test]
    fn unobservable_mode_dropped() {
        let m = model(
            DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.6]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
        );
        let r = minimal_realization(&m, DEFAULT_REALIZATION_TOL);
        assert_eq!(r.order(), 1);
        markov_match(&m, &r, 50, 1e-10);
    }
}
