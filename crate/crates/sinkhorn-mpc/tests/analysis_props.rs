//! End-to-end properties of the diagnostics: bound certificates over
//! simulated runs, fixed-point residuals, uniqueness of the equilibrium
//! scaling, and the componentwise equilibrium identity.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkhorn_mpc::analysis::{
    default_delta, default_nu, equilibrium_map_h, find_equilibrium, ultimate_bound,
};
use sinkhorn_mpc::controller::{simulate, SwarmConfig};
use sinkhorn_mpc::linear_mpc::LinearPlant;
use sinkhorn_mpc::transport::hilbert_metric_log;

fn scalar_swarm(targets: &[f64], epsilon: f64) -> SwarmConfig {
    let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
    let targets = targets
        .iter()
        .map(|t| DVector::from_element(1, *t))
        .collect();
    SwarmConfig::homogeneous(&plant, 10, targets, epsilon).unwrap()
}

#[test]
fn bound_certificate_holds_on_random_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for trial in 0..10 {
        let targets: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let config = scalar_swarm(&targets, rng.random_range(0.3..2.0));
        let x0: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_element(1, rng.random_range(-6.0..6.0)))
            .collect();
        let traj = simulate(&config, x0, 250).unwrap();
        let nu = default_nu(config.agents());
        let r_upp = config.r_upp();
        let report = ultimate_bound(config.agents(), r_upp, &nu, default_delta(r_upp).max(1e-6))
            .unwrap()
            .scan_trajectory(&traj);
        let tau = report
            .entry_time
            .unwrap_or_else(|| panic!("trial {trial}: never entered the bound"));
        for v in &report.violations {
            assert!(v.k < tau, "violation at k = {} after tau = {tau}", v.k);
        }
    }
}

#[test]
fn fixed_point_residual_reproduces_under_h() {
    let config = scalar_swarm(&[0.0, 1.0, 2.0], 0.8);
    let tol = 1e-11;
    let eq = find_equilibrium(&config, config.targets(), tol, 1000).unwrap();
    assert!(eq.converged);
    assert!(eq.residual < tol);
    // Re-evaluating h at the fixed point reproduces it within tol.
    let hx = equilibrium_map_h(&eq.x_e, &config).unwrap();
    for (x, h) in eq.x_e.iter().zip(&hx) {
        assert!((x - h).amax() < tol);
    }
}

#[test]
fn equilibrium_identity_holds_componentwise() {
    let config = scalar_swarm(&[-1.0, 0.5, 2.0], 0.6);
    let tol = 1e-11;
    let eq = find_equilibrium(&config, config.targets(), tol, 1000).unwrap();
    assert!(eq.converged);
    let n = config.n_agents() as f64;
    let p = eq.coupling.entries();
    for (i, xe) in eq.x_e.iter().enumerate() {
        let mut bary = DVector::zeros(1);
        for (j, t) in config.targets().iter().enumerate() {
            bary += t * (n * p[(i, j)]);
        }
        assert!(
            (xe - &bary).amax() < tol,
            "identity defect {} at agent {i}",
            (xe - &bary).amax()
        );
    }
}

#[test]
fn equilibrium_scaling_is_unique_across_starts() {
    // Moderate epsilon keeps every cross coupling numerically visible, so
    // the scaling ray at the fixed point is pinned to full accuracy.
    let config = scalar_swarm(&[0.0, 1.0, 2.0], 2.0);
    let tol = 1e-12;
    let eq1 = find_equilibrium(&config, config.targets(), tol, 2000).unwrap();
    // Second start inside the same basin (a far start may legitimately find
    // a different equilibrium; only same-x_e runs must agree on beta).
    let offsets = [0.4, -0.25, 0.15];
    let shifted: Vec<DVector<f64>> = config
        .targets()
        .iter()
        .zip(offsets)
        .map(|(t, o)| t + DVector::from_element(1, o))
        .collect();
    let eq2 = find_equilibrium(&config, &shifted, tol, 2000).unwrap();
    assert!(eq1.converged && eq2.converged);

    let x_gap = eq1
        .x_e
        .iter()
        .zip(&eq2.x_e)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0f64, f64::max);
    assert!(x_gap < 1e-9, "starts found different equilibria: {x_gap}");

    let beta_gap =
        hilbert_metric_log(eq1.scalings.log_beta(), eq2.scalings.log_beta()).unwrap();
    assert!(beta_gap < 1e-8, "beta rays differ by {beta_gap}");
}
