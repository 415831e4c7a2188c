//! Feedback interconnection of a whole-grid plant with per-area controllers.

use nalgebra::{DMatrix, DVector};

use super::{select_block, select_columns, select_rows, symmetrize, DiscreteStateSpace};
use crate::{Error, Result};

/// A discrete controller for one area.
///
/// The realization reads the area's measurement rows (plant order) through
/// `b_ref`/`d_ref` and emits the area's setpoint columns (plant order).
/// `excitation_var` is the variance of the watermark added to each output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBlock {
    pub area: usize,
    pub realization: DiscreteStateSpace,
    pub excitation_var: f64,
}

fn area_rows(plant: &DiscreteStateSpace, area: usize) -> Vec<usize> {
    (0..plant.n_outputs())
        .filter(|&r| plant.output_labels[r].area() == Some(area))
        .collect()
}

fn area_cols(plant: &DiscreteStateSpace, area: usize) -> Vec<usize> {
    (0..plant.n_ref())
        .filter(|&c| plant.ref_labels[c].area() == Some(area))
        .collect()
}

/// Closes every controller except the one for `open_area`.
///
/// The result takes the open area's setpoints and all loads as inputs and
/// emits the open area's measurements. Measurement noise and watermarks of the
/// closed areas enter its process-noise covariance.
pub fn close_loop_except(
    plant: &DiscreteStateSpace,
    controllers: &[ControllerBlock],
    open_area: usize,
) -> Result<DiscreteStateSpace> {
    interconnect(plant, controllers, Some(open_area), None)
}

/// Closes every controller. Inputs are all setpoint channels (where the
/// watermarks enter) and all loads; outputs are all plant measurements.
///
/// `row_gains`, when given, scales each measurement row on its way into the
/// controllers, which models a sensor reporting `λ·y`.
pub fn close_all_loops(
    plant: &DiscreteStateSpace,
    controllers: &[ControllerBlock],
    row_gains: Option<&DVector<f64>>,
) -> Result<DiscreteStateSpace> {
    interconnect(plant, controllers, None, row_gains)
}

fn interconnect(
    plant: &DiscreteStateSpace,
    controllers: &[ControllerBlock],
    open_area: Option<usize>,
    row_gains: Option<&DVector<f64>>,
) -> Result<DiscreteStateSpace> {
    let n = plant.order();
    let m = plant.n_outputs();
    if let Some(g) = row_gains {
        if g.len() != m {
            return Err(Error::Dimension(format!("{} row gains for {m} measurement rows", g.len())));
        }
    }
    if let Some(i) = open_area {
        if area_rows(plant, i).is_empty() {
            return Err(Error::InvalidParameter(format!("area {i} has no measurement rows")));
        }
    }
    let closed: Vec<&ControllerBlock> = controllers.iter().filter(|c| Some(c.area) != open_area).collect();

    let nc_total: usize = closed.iter().map(|c| c.realization.order()).sum();
    let big = n + nc_total;
    let mut a = DMatrix::<f64>::zeros(big, big);
    a.view_mut((0, 0), (n, n)).copy_from(&plant.a);
    let mut q = DMatrix::<f64>::zeros(big, big);
    q.view_mut((0, 0), (n, n)).copy_from(&plant.q);

    let mut offset = n;
    for ctrl in &closed {
        let k = &ctrl.realization;
        let rows = area_rows(plant, ctrl.area);
        let cols = area_cols(plant, ctrl.area);
        if k.n_ref() != rows.len() || k.n_outputs() != cols.len() {
            return Err(Error::Dimension(format!(
                "controller for area {} is {}x{} but the plant exposes {} measurements and {} setpoints",
                ctrl.area,
                k.n_outputs(),
                k.n_ref(),
                rows.len(),
                cols.len()
            )));
        }
        let nc = k.order();
        let gains = DMatrix::from_diagonal(&DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&r| row_gains.map_or(1.0, |g| g[r])),
        ));
        let c_area = &gains * select_rows(&plant.c, &rows);
        let b_area = select_columns(&plant.b_ref, &cols);
        let r_area = select_block(&plant.r, &rows, &rows);

        // x⁺ += B_a (D_k G C_a x + C_k x_k)
        let bd = &b_area * &k.d_ref;
        let mut top = a.view_mut((0, 0), (n, n));
        top += &bd * &c_area;
        a.view_mut((0, offset), (n, nc)).copy_from(&(&b_area * &k.c));
        // x_k⁺ = A_k x_k + B_k G C_a x
        a.view_mut((offset, 0), (nc, n)).copy_from(&(&k.b_ref * &c_area));
        a.view_mut((offset, offset), (nc, nc)).copy_from(&k.a);

        // measurement noise routed through the controller
        let mut route = DMatrix::<f64>::zeros(big, rows.len());
        route.view_mut((0, 0), (n, rows.len())).copy_from(&(&bd * &gains));
        route.view_mut((offset, 0), (nc, rows.len())).copy_from(&(&k.b_ref * &gains));
        q += &route * &r_area * route.transpose();
        if open_area.is_some() && ctrl.excitation_var > 0.0 {
            let mut e_route = DMatrix::<f64>::zeros(big, cols.len());
            e_route.view_mut((0, 0), (n, cols.len())).copy_from(&b_area);
            q += &e_route * e_route.transpose() * ctrl.excitation_var;
        }
        offset += nc;
    }

    let (ref_cols, out_rows) = match open_area {
        Some(i) => (area_cols(plant, i), area_rows(plant, i)),
        None => ((0..plant.n_ref()).collect(), (0..m).collect()),
    };
    let mut b_ref = DMatrix::zeros(big, ref_cols.len());
    b_ref.view_mut((0, 0), (n, ref_cols.len())).copy_from(&select_columns(&plant.b_ref, &ref_cols));
    let mut b_load = DMatrix::zeros(big, plant.n_load());
    b_load.view_mut((0, 0), (n, plant.n_load())).copy_from(&plant.b_load);
    let mut c = DMatrix::zeros(out_rows.len(), big);
    c.view_mut((0, 0), (out_rows.len(), n)).copy_from(&select_rows(&plant.c, &out_rows));

    DiscreteStateSpace::new(
        a,
        b_ref,
        b_load,
        c,
        DMatrix::zeros(out_rows.len(), ref_cols.len()),
        symmetrize(&q),
        select_block(&plant.r, &out_rows, &out_rows),
        plant.tau,
        ref_cols.iter().map(|&j| plant.ref_labels[j]).collect(),
        plant.load_labels.clone(),
        out_rows.iter().map(|&r| plant.output_labels[r]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{spectral_radius, Channel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two scalar areas coupled through the state matrix. Area a has output
    /// `Frequency{a}` and setpoint `Setpoint{a, a}`; one shared load.
    fn two_area_plant() -> DiscreteStateSpace {
        DiscreteStateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.05, 0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.3, -0.2]),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2) * 1e-3,
            DMatrix::identity(2, 2) * 1e-2,
            1.0,
            vec![Channel::Setpoint { area: 0, unit: 0 }, Channel::Setpoint { area: 1, unit: 1 }],
            vec![Channel::Load { area: 0, bus: 0, reactive: false }],
            vec![Channel::Frequency { area: 0 }, Channel::Frequency { area: 1 }],
        )
        .unwrap()
    }

    fn pi_block(area: usize, kp: f64, ki: f64) -> ControllerBlock {
        // x_k⁺ = x_k + z, cmd = ki x_k + (kp + ki) z
        ControllerBlock {
            area,
            realization: DiscreteStateSpace::new(
                DMatrix::identity(1, 1),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::zeros(1, 0),
                DMatrix::from_element(1, 1, ki),
                DMatrix::from_element(1, 1, kp + ki),
                DMatrix::zeros(1, 1),
                DMatrix::identity(1, 1),
                1.0,
                vec![Channel::Signal(0)],
                vec![],
                vec![Channel::Signal(0)],
            )
            .unwrap(),
            excitation_var: 0.0,
        }
    }

    #[test]
    fn single_area_is_unchanged() {
        let plant = DiscreteStateSpace::new(
            DMatrix::from_element(1, 1, 0.7),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 0.2),
            2.0,
            vec![Channel::Setpoint { area: 0, unit: 0 }],
            vec![Channel::Load { area: 0, bus: 0, reactive: false }],
            vec![Channel::Frequency { area: 0 }],
        )
        .unwrap();
        let out = close_loop_except(&plant, &[pi_block(0, -0.1, -0.01)], 0).unwrap();
        assert_eq!(out, plant);
    }

    #[test]
    fn matches_cosimulation() {
        let plant = two_area_plant();
        let ctrl = pi_block(1, -0.2, -0.05);
        let cl = close_loop_except(&plant, std::slice::from_ref(&ctrl), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = DVector::<f64>::zeros(2);
        let mut xk = 0.0;
        let mut xc = DVector::<f64>::zeros(3);
        for _ in 0..500 {
            let p0: f64 = rng.random_range(-1.0..1.0);
            let u: f64 = rng.random_range(-1.0..1.0);
            // co-simulation
            let y = &plant.c * &x;
            let cmd = -0.05 * xk - 0.25 * y[1];
            let y_cl = &cl.c * &xc;
            assert!((y_cl[0] - y[0]).abs() < 1e-10);
            xk += y[1];
            x = &plant.a * &x + plant.b_ref.column(0) * p0 + plant.b_ref.column(1) * cmd + plant.b_load.column(0) * u;
            xc = &cl.a * &xc + cl.b_ref.column(0) * p0 + cl.b_load.column(0) * u;
        }
    }

    #[test]
    fn stabilizes_unstable_plant() {
        // x⁺ = [[1.2, 1], [0, 0.5]] x + [0; 1] u, y = x; gain places poles at 0.3, 0.4
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 1.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        // char poly of A + B K with K = [k1 k2]: z² − (1.7 + k2) z + (0.6 + 1.2 k2 − k1)
        // target z² − 0.7 z + 0.12 → k2 = −1, k1 = 0.6 − 1.2 − 0.12 = −0.72
        let plant = DiscreteStateSpace::new(
            a.clone(),
            b,
            DMatrix::zeros(2, 0),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            1.0,
            vec![Channel::Setpoint { area: 0, unit: 0 }],
            vec![],
            vec![Channel::TieFlow { area: 0, tie: 0 }, Channel::Frequency { area: 0 }],
        )
        .unwrap();
        assert!(spectral_radius(&plant) > 1.0);
        let gain = ControllerBlock {
            area: 0,
            realization: DiscreteStateSpace::new(
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, 2),
                DMatrix::zeros(0, 0),
                DMatrix::zeros(1, 0),
                DMatrix::from_row_slice(1, 2, &[-0.72, -1.0]),
                DMatrix::zeros(0, 0),
                DMatrix::identity(1, 1),
                1.0,
                vec![Channel::Signal(0), Channel::Signal(1)],
                vec![],
                vec![Channel::Signal(0)],
            )
            .unwrap(),
            excitation_var: 0.0,
        };
        let cl = close_all_loops(&plant, &[gain], None).unwrap();
        let rho = spectral_radius(&cl);
        assert!(rho < 1.0);
        assert!((rho - 0.4).abs() < 1e-10);
    }

    #[test]
    fn noise_of_closed_areas_enters_q() {
        let plant = two_area_plant();
        let mut ctrl = pi_block(1, -0.2, -0.05);
        ctrl.excitation_var = 1e-4;
        let cl = close_loop_except(&plant, &[ctrl], 0).unwrap();
        // controller state picks up area-2 sensor noise: variance 1e-2
        assert!((cl.q[(2, 2)] - 1e-2).abs() < 1e-15);
        // plant state 2 gets (kp+ki)² · 0.5² · 1e-2 plus watermark 0.5² · 1e-4 plus Q
        let want = 1e-3 + 0.25f64.powi(2) * 0.25 * 1e-2 + 0.25 * 1e-4;
        assert!((cl.q[(1, 1)] - want).abs() < 1e-15);
    }

    #[test]
    fn controller_shape_is_checked() {
        let plant = two_area_plant();
        let mut bad = pi_block(1, 0.0, 0.0);
        bad.realization.b_ref = DMatrix::zeros(1, 2);
        bad.realization.d_ref = DMatrix::zeros(1, 2);
        bad.realization.ref_labels = vec![Channel::Signal(0), Channel::Signal(1)];
        assert!(matches!(close_loop_except(&plant, &[bad], 0), Err(Error::Dimension(_))));
    }
}
