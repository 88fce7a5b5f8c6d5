//! Embedded experiment presets.
//!
//! The planar preset runs 150 agents with the unstable 2-D plant
//! `A = [[1.2, 0.13], [-0.05, 1.1]]`, `B = 0.1 I`, `eps = 1`, horizon 10,
//! 3000 steps; the scalar preset runs 10 integrator agents (`A = 1`,
//! `B = 0.1`) at `eps` 0.5 and 1.0 to expose the stationary/transient
//! trade-off. Initial states come from seeded generators declared here; the
//! seeds are fixed so runs reproduce byte-for-byte.

use crate::config::{ExperimentConfig, PlantSpec, PointSpec, ProbeConfig, CONFIG_VERSION};

pub const FIG1_STEPS: usize = 3000;
pub const FIG2_STEPS: usize = 300;
pub const FIG2_EPSILONS: [f64; 2] = [0.5, 1.0];

/// 150-agent planar swarm.
pub fn fig1() -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        epsilon: 1.0,
        horizon: 10,
        steps: FIG1_STEPS,
        sinkhorn_iters_per_tick: 1,
        alpha0: None,
        plant: Some(PlantSpec {
            a: vec![vec![1.2, 0.13], vec![-0.05, 1.1]],
            b: vec![vec![0.1, 0.0], vec![0.0, 0.1]],
        }),
        plants: None,
        // A lattice keeps every pair of targets at least 0.8 apart, so the
        // eps = 1 coupling resolves each agent onto its own target; uniform
        // random target clouds at this density contain near-coincident pairs
        // whose basins stay blurred at this regularization.
        targets: PointSpec::Grid {
            nx: 15,
            ny: 10,
            spacing: 0.8,
            origin: vec![-5.6, -3.6],
        },
        initial: PointSpec::Random {
            count: 150,
            seed: 714,
            low: vec![-5.0, -5.0],
            high: vec![5.0, 5.0],
        },
        probe: ProbeConfig::default(),
    }
}

/// 10-agent scalar swarm at the given regularization weight.
pub fn fig2(epsilon: f64) -> ExperimentConfig {
    ExperimentConfig {
        version: CONFIG_VERSION,
        epsilon,
        horizon: 10,
        steps: FIG2_STEPS,
        sinkhorn_iters_per_tick: 1,
        alpha0: None,
        plant: Some(PlantSpec {
            a: vec![vec![1.0]],
            b: vec![vec![0.1]],
        }),
        plants: None,
        targets: PointSpec::Explicit {
            points: (0..10).map(|j| vec![j as f64]).collect(),
        },
        initial: PointSpec::Random {
            count: 10,
            seed: 12,
            low: vec![-3.0],
            high: vec![12.0],
        },
        probe: ProbeConfig::default(),
    }
}
