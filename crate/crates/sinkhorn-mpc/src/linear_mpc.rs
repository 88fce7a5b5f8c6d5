//! Closed-form finite-horizon minimum-energy MPC for discrete-time linear
//! plants `x(k+1) = A x(k) + B u(k)` with square invertible `B`.
//!
//! For the energy stage cost `||u - B^{-1}(x_hat - A x_hat)||^2` and the
//! terminal constraint `x(T_h) = x_hat`, the optimal first input has the
//! explicit form
//!
//! ```text
//! u(x, x_hat) = -B^T (A^T)^{T_h-1} G^{-1} A^{T_h} (x - x_hat) + B^{-1}(x_hat - A x_hat)
//! ```
//!
//! where `G` is the horizon-`T_h` controllability Gramian. [`mpc_gains`]
//! packages the derived matrices (Gramian, cost weight, closed-loop matrix,
//! feedback gain); [`brute_force_horizon`] solves the same problem as a
//! stacked least-norm system and serves as the validation oracle.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("state matrix A must be square, got {rows}x{cols}")]
    NonSquareState { rows: usize, cols: usize },
    #[error("input matrix B must be square with the state dimension {state}, got {rows}x{cols}")]
    InputShape {
        state: usize,
        rows: usize,
        cols: usize,
    },
    #[error("input matrix B must be invertible")]
    SingularInput,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error(
        "Gramian numerically singular at horizon {horizon} (condition estimate {condition:.3e}); \
         shorten the horizon or rescale the plant"
    )]
    UncontrollableHorizon { horizon: usize, condition: f64 },
    #[error("closed-loop spectral radius {rho} >= 1 at horizon {horizon}: numerical breakdown")]
    UnstableClosedLoop { rho: f64, horizon: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Discrete-time linear plant `(A, B)` with square invertible `B`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    b_inv: DMatrix<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self, MpcError> {
        if a.nrows() != a.ncols() {
            return Err(MpcError::NonSquareState {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let n = a.nrows();
        if b.nrows() != n || b.ncols() != n {
            return Err(MpcError::InputShape {
                state: n,
                rows: b.nrows(),
                cols: b.ncols(),
            });
        }
        let b_inv = b.clone().try_inverse().ok_or(MpcError::SingularInput)?;
        if b_inv.iter().any(|x| !x.is_finite()) {
            return Err(MpcError::SingularInput);
        }
        Ok(Self { a, b, b_inv })
    }

    /// Scalar plant `x(k+1) = a x(k) + b u(k)`.
    pub fn scalar(a: f64, b: f64) -> Result<Self, MpcError> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn b_inv(&self) -> &DMatrix<f64> {
        &self.b_inv
    }

    /// The constant input holding `x_hat` fixed: `B^{-1}(x_hat - A x_hat)`.
    pub fn holding_input(&self, x_hat: &DVector<f64>) -> DVector<f64> {
        &self.b_inv * (x_hat - &self.a * x_hat)
    }
}

fn matrix_power(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

pub(crate) fn spectral_radius_of(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Horizon-`T_h` controllability Gramian
/// `G = sum_{k=0}^{T_h-1} A^k B B^T (A^T)^k`, symmetrized against roundoff.
pub fn gramian(plant: &LinearPlant, horizon: usize) -> Result<DMatrix<f64>, MpcError> {
    if horizon == 0 {
        return Err(MpcError::ZeroHorizon);
    }
    let n = plant.state_dim();
    let bbt = plant.b() * plant.b().transpose();
    let mut g = DMatrix::zeros(n, n);
    let mut a_pow = DMatrix::identity(n, n);
    for _ in 0..horizon {
        g += &a_pow * &bbt * a_pow.transpose();
        a_pow = &a_pow * plant.a();
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// Matrices derived from `(A, B, T_h)` that define the control law and the
/// closed loop: Gramian `G`, cost weight `W = (A^{T_h})^T G^{-1} A^{T_h}`,
/// feedback gain `F = B^T (A^T)^{T_h-1} G^{-1} A^{T_h}`, and closed-loop
/// matrix `A_cl = A - B F` (spectral radius < 1 for invertible `B`).
#[derive(Debug, Clone)]
pub struct MpcGains {
    horizon: usize,
    plant: LinearPlant,
    gramian: DMatrix<f64>,
    gramian_condition: f64,
    cost_weight: DMatrix<f64>,
    feedback: DMatrix<f64>,
    closed_loop: DMatrix<f64>,
    rho: f64,
}

impl MpcGains {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn plant(&self) -> &LinearPlant {
        &self.plant
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn gramian(&self) -> &DMatrix<f64> {
        &self.gramian
    }

    /// Condition estimate of the Gramian (eigenvalue ratio).
    pub fn gramian_condition(&self) -> f64 {
        self.gramian_condition
    }

    /// `W` in the stage value `||x - x_hat||_W^2`; symmetric positive
    /// semidefinite, positive definite when `A` is invertible.
    pub fn cost_weight(&self) -> &DMatrix<f64> {
        &self.cost_weight
    }

    pub fn feedback(&self) -> &DMatrix<f64> {
        &self.feedback
    }

    pub fn closed_loop(&self) -> &DMatrix<f64> {
        &self.closed_loop
    }

    /// Spectral radius of the closed-loop matrix.
    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// Assembles [`MpcGains`] for a plant and horizon, verifying that the Gramian
/// is positive definite and the closed loop is stable.
pub fn mpc_gains(plant: &LinearPlant, horizon: usize) -> Result<MpcGains, MpcError> {
    let g = gramian(plant, horizon)?;

    let eigs = g.clone().symmetric_eigen().eigenvalues;
    let (emin, emax) = eigs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
            (lo.min(e), hi.max(e))
        });
    let condition = if emin > 0.0 { emax / emin } else { f64::INFINITY };

    let chol = g
        .clone()
        .cholesky()
        .ok_or(MpcError::UncontrollableHorizon { horizon, condition })?;
    let g_inv = chol.inverse();

    let a_h = matrix_power(plant.a(), horizon);
    let a_hm1_t = matrix_power(plant.a(), horizon - 1).transpose();

    let feedback = plant.b().transpose() * &a_hm1_t * &g_inv * &a_h;
    let closed_loop = plant.a() - plant.b() * &feedback;
    let cost_weight = a_h.transpose() * &g_inv * &a_h;
    let cost_weight = (&cost_weight + cost_weight.transpose()) * 0.5;

    let rho = spectral_radius_of(&closed_loop);
    if rho.is_nan() || rho >= 1.0 {
        return Err(MpcError::UnstableClosedLoop { rho, horizon });
    }

    Ok(MpcGains {
        horizon,
        plant: plant.clone(),
        gramian: g,
        gramian_condition: condition,
        cost_weight,
        feedback,
        closed_loop,
        rho,
    })
}

/// The explicit control law
/// `u = -F (x - x_hat) + B^{-1}(x_hat - A x_hat)`; applying it satisfies
/// `A x + B u = A_cl x + (I - A_cl) x_hat`.
pub fn mpc_input(gains: &MpcGains, x: &DVector<f64>, x_hat: &DVector<f64>) -> DVector<f64> {
    assert_eq!(x.len(), gains.state_dim(), "state dimension mismatch");
    assert_eq!(x_hat.len(), gains.state_dim(), "target dimension mismatch");
    gains.feedback() * (x_hat - x) + gains.plant.holding_input(x_hat)
}

/// Minimum energy needed to park `x` on `x_hat` in `T_h` steps:
/// `(x - x_hat)^T W (x - x_hat)`, clamped at zero against roundoff.
pub fn finite_horizon_cost(gains: &MpcGains, x: &DVector<f64>, x_hat: &DVector<f64>) -> f64 {
    let d = x - x_hat;
    d.dot(&(gains.cost_weight() * &d)).max(0.0)
}

/// Oracle for the horizon problem: solves the stacked reachability system
/// for the shifted inputs `v(k) = u(k) - B^{-1}(x_hat - A x_hat)` by a
/// minimum-norm least-squares (SVD) solve, independent of the Gramian-based
/// closed form. Returns the full input sequence and its energy
/// `sum ||v(k)||^2`.
pub fn brute_force_horizon(
    plant: &LinearPlant,
    horizon: usize,
    x: &DVector<f64>,
    x_hat: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, f64), MpcError> {
    if horizon == 0 {
        return Err(MpcError::ZeroHorizon);
    }
    let n = plant.state_dim();
    if x.len() != n || x_hat.len() != n {
        return Err(MpcError::DimensionMismatch(format!(
            "states must have length {n}"
        )));
    }

    // reach = [A^{T_h-1} B | A^{T_h-2} B | ... | B], block k multiplies v(k).
    let mut reach = DMatrix::zeros(n, n * horizon);
    for k in 0..horizon {
        let block = matrix_power(plant.a(), horizon - 1 - k) * plant.b();
        reach.view_mut((0, k * n), (n, n)).copy_from(&block);
    }
    let rhs = -(matrix_power(plant.a(), horizon) * (x - x_hat));

    let svd = reach.svd(true, true);
    let sv_max = svd.singular_values.max();
    let cutoff = sv_max * 1e-12;
    if svd.singular_values.iter().filter(|s| **s > cutoff).count() < n {
        return Err(MpcError::UncontrollableHorizon {
            horizon,
            condition: f64::INFINITY,
        });
    }
    let v_stacked = svd
        .solve(&rhs, cutoff)
        .map_err(|e| MpcError::DimensionMismatch(e.to_string()))?;

    let hold = plant.holding_input(x_hat);
    let energy = v_stacked.norm_squared();
    let inputs = (0..horizon)
        .map(|k| DVector::from(v_stacked.rows(k * n, n)) + &hold)
        .collect();
    Ok((inputs, energy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_plant_2d() -> LinearPlant {
        LinearPlant::new(
            DMatrix::from_row_slice(2, 2, &[1.2, 0.13, -0.05, 1.1]),
            DMatrix::identity(2, 2) * 0.1,
        )
        .unwrap()
    }

    #[test]
    fn gramian_scalar_accumulates() {
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let g = gramian(&plant, 10).unwrap();
        assert_relative_eq!(g[(0, 0)], 0.1, max_relative = 1e-14);
    }

    #[test]
    fn gramian_single_step_is_bbt() {
        let plant = paper_plant_2d();
        let g = gramian(&plant, 1).unwrap();
        let bbt = plant.b() * plant.b().transpose();
        assert_relative_eq!(g[(0, 0)], bbt[(0, 0)], max_relative = 1e-15);
        assert_relative_eq!(g[(1, 1)], bbt[(1, 1)], max_relative = 1e-15);
    }

    #[test]
    fn gramian_matches_term_by_term_oracle() {
        // Independent route: evaluate each A^k B B^T (A^T)^k from scratch.
        let plant = paper_plant_2d();
        let horizon = 10;
        let n = 2;
        let mut oracle = DMatrix::<f64>::zeros(n, n);
        for k in 0..horizon {
            let mut a_pow = DMatrix::<f64>::identity(n, n);
            for _ in 0..k {
                a_pow = &a_pow * plant.a();
            }
            oracle += &a_pow * plant.b() * plant.b().transpose() * a_pow.transpose();
        }
        let g = gramian(&plant, horizon).unwrap();
        for (lhs, rhs) in g.iter().zip(oracle.iter()) {
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn gains_scalar_closed_form() {
        // G = 0.1, W = 10, F = 0.1 * 10 = 1, A_cl = 1 - 0.1*1 = 0.9.
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let gains = mpc_gains(&plant, 10).unwrap();
        assert_relative_eq!(gains.closed_loop()[(0, 0)], 0.9, max_relative = 1e-12);
        assert_relative_eq!(gains.cost_weight()[(0, 0)], 10.0, max_relative = 1e-12);
        assert_relative_eq!(gains.feedback()[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(gains.rho(), 0.9, max_relative = 1e-12);
    }

    #[test]
    fn gains_deadbeat_plant() {
        // A = 0 makes the feedback term vanish: A_cl = 0.
        let plant = LinearPlant::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let gains = mpc_gains(&plant, 3).unwrap();
        assert!(gains.closed_loop().iter().all(|x| x.abs() < 1e-15));
        assert_eq!(gains.rho(), 0.0);
    }

    #[test]
    fn gains_paper_plant_is_stable() {
        let gains = mpc_gains(&paper_plant_2d(), 10).unwrap();
        assert!(gains.rho() < 1.0, "rho = {}", gains.rho());
    }

    #[test]
    fn gains_reject_numerically_singular_gramian() {
        let plant = LinearPlant::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-200]),
        )
        .unwrap();
        assert!(matches!(
            mpc_gains(&plant, 4),
            Err(MpcError::UncontrollableHorizon { horizon: 4, .. })
        ));
    }

    #[test]
    fn plant_rejects_singular_b() {
        let r = LinearPlant::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2));
        assert!(matches!(r, Err(MpcError::SingularInput)));
    }

    #[test]
    fn input_scalar_example() {
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let gains = mpc_gains(&plant, 10).unwrap();
        let x = DVector::from_element(1, 1.0);
        let x_hat = DVector::zeros(1);
        let u = mpc_input(&gains, &x, &x_hat);
        assert_relative_eq!(u[0], -1.0, max_relative = 1e-12);
        let next = plant.a() * &x + plant.b() * &u;
        assert_relative_eq!(next[0], 0.9, max_relative = 1e-12);
    }

    #[test]
    fn input_at_target_is_holding_input() {
        let plant = paper_plant_2d();
        let gains = mpc_gains(&plant, 10).unwrap();
        let x_hat = DVector::from_vec(vec![0.7, -1.3]);
        let u = mpc_input(&gains, &x_hat, &x_hat);
        let hold = plant.holding_input(&x_hat);
        assert_relative_eq!((u - hold).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn closed_loop_identity_holds() {
        let plant = paper_plant_2d();
        let gains = mpc_gains(&plant, 10).unwrap();
        let x = DVector::from_vec(vec![2.0, -0.5]);
        let x_hat = DVector::from_vec(vec![-1.0, 1.5]);
        let u = mpc_input(&gains, &x, &x_hat);
        let direct = plant.a() * &x + plant.b() * &u;
        let closed =
            gains.closed_loop() * &x + (DMatrix::identity(2, 2) - gains.closed_loop()) * &x_hat;
        assert!((direct - closed).amax() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let gains = mpc_gains(&plant, 10).unwrap();
        let x = DVector::from_element(1, 1.0);
        let x_hat = DVector::zeros(1);
        assert_eq!(finite_horizon_cost(&gains, &x_hat, &x_hat), 0.0);
        assert_relative_eq!(
            finite_horizon_cost(&gains, &x, &x_hat),
            10.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn oracle_at_target_holds_still() {
        let plant = paper_plant_2d();
        let x_hat = DVector::from_vec(vec![0.4, 0.9]);
        let (inputs, energy) = brute_force_horizon(&plant, 6, &x_hat, &x_hat).unwrap();
        assert!(energy < 1e-18);
        let hold = plant.holding_input(&x_hat);
        for u in &inputs {
            assert!((u - &hold).amax() < 1e-9);
        }
    }

    #[test]
    fn oracle_scalar_energy() {
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let x = DVector::from_element(1, 1.0);
        let x_hat = DVector::zeros(1);
        let (inputs, energy) = brute_force_horizon(&plant, 10, &x, &x_hat).unwrap();
        assert_relative_eq!(energy, 10.0, max_relative = 1e-9);
        let gains = mpc_gains(&plant, 10).unwrap();
        assert_relative_eq!(
            inputs[0][0],
            mpc_input(&gains, &x, &x_hat)[0],
            max_relative = 1e-9
        );
    }

    #[test]
    fn oracle_terminal_state_reaches_target() {
        let plant = paper_plant_2d();
        let x = DVector::from_vec(vec![3.0, -2.0]);
        let x_hat = DVector::from_vec(vec![-0.5, 0.25]);
        let horizon = 7;
        let (inputs, _) = brute_force_horizon(&plant, horizon, &x, &x_hat).unwrap();
        let mut state = x.clone();
        for u in &inputs {
            state = plant.a() * &state + plant.b() * u;
        }
        assert!((state - x_hat).amax() < 1e-8);
    }
}
