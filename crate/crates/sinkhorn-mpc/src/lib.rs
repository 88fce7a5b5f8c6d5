//! Closed-loop transport control for swarms of linear agents.
//!
//! The crate couples two classical pieces of machinery into one feedback loop:
//!
//! * [`transport`] — entropic optimal transport: Gibbs kernels, Sinkhorn
//!   scaling iterations (plain and log-domain), the Hilbert projective metric
//!   with its contraction coefficient, and an exact assignment solver used as
//!   a validation oracle.
//! * [`linear_mpc`] — closed-form finite-horizon minimum-energy control for
//!   discrete-time linear plants: controllability Gramians, cost-weight
//!   matrices, closed-loop matrices, and the explicit control law.
//! * [`controller`] — the closed loop itself: each tick rebuilds the transport
//!   kernel from the current agent states, advances the Sinkhorn scalings by
//!   one (configurable) iteration, projects the coupling onto temporary
//!   targets, and applies the per-agent control law.
//! * [`analysis`] — diagnostics for the loop: ultimate-bound certificates,
//!   equilibrium computation by damped fixed-point iteration, small-epsilon
//!   limit probes, and empirical Lyapunov/stability checks.

pub mod analysis;
pub mod controller;
pub mod linear_mpc;
pub mod transport;

pub use analysis::{BoundReport, EquilibriumResult};
pub use controller::{SwarmConfig, SwarmState, Trajectory};
pub use linear_mpc::{LinearPlant, MpcGains};
pub use transport::{Coupling, CostMatrix, GibbsKernel, Histogram, ScalingPair};
