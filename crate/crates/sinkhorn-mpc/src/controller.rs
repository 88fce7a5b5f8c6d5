//! The closed transport-control loop.
//!
//! Each tick `k`, with collective state `x(k)` and scaling `alpha(k)`:
//!
//! 1. rebuild the Gibbs kernel from the current states,
//!    `K_ij = exp(-||x_i - t_j||^2_{W_i} / eps)`;
//! 2. advance the scalings, `beta(k) = (1/N) ./ (K^T alpha(k))` then
//!    `alpha(k+1) = (1/N) ./ (K beta(k))` (repeated
//!    `sinkhorn_iters_per_tick` times);
//! 3. form the coupling `P(k) = diag(alpha(k+1)) K diag(beta(k))`;
//! 4. project targets, by default the barycentric policy
//!    `t_i = N sum_j P_ij t_j`;
//! 5. apply the per-agent control law,
//!    `x_i(k+1) = A_cl_i x_i(k) + (I - A_cl_i) t_i`.
//!
//! The scaling state is carried in logarithms so the loop survives the
//! small-epsilon regime where kernel entries underflow `f64`; ticks run in
//! plain arithmetic whenever that is provably safe and in log-sum-exp
//! arithmetic otherwise.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linear_mpc::{mpc_input, MpcError, MpcGains};
use crate::transport::{
    coupling_from_log_scalings, gibbs_kernel, CostMatrix, Coupling, GibbsKernel, TransportError,
};

/// Column count from which kernel assembly fans out across threads. Cell
/// values are independent, so the result is identical for any thread count.
const PAR_KERNEL_THRESHOLD: usize = 64;

/// Plain-arithmetic ticks require every kernel log-entry and log-scaling
/// entry above this, so products of their exponentials cannot underflow.
const PLAIN_TICK_LOG_FLOOR: f64 = -350.0;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("invalid swarm configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical failure at tick {tick}: {source}")]
    TickFailed {
        tick: usize,
        source: Box<ControlError>,
    },
}

fn at_tick(tick: usize, e: ControlError) -> ControlError {
    ControlError::TickFailed {
        tick,
        source: Box::new(e),
    }
}

/// Policy mapping a coupling to one temporary target per agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// Coupling-weighted average of the targets, `N sum_j P_ij t_j`.
    Barycentric,
}

impl TargetPolicy {
    pub fn temp_targets(&self, coupling: &Coupling, targets: &[DVector<f64>]) -> Vec<DVector<f64>> {
        match self {
            TargetPolicy::Barycentric => barycentric_targets(coupling, targets),
        }
    }
}

/// Barycentric projection `t_i = N sum_j P_ij t_j`. With exact row sums
/// `1/N` each output lies in the convex hull of the targets.
pub fn barycentric_targets(coupling: &Coupling, targets: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = coupling.nrows();
    assert_eq!(coupling.ncols(), targets.len(), "coupling vs target count");
    let dim = targets[0].len();
    let p = coupling.entries();
    (0..n)
        .map(|i| {
            let mut out = DVector::zeros(dim);
            for (j, t) in targets.iter().enumerate() {
                out.axpy(n as f64 * p[(i, j)], t, 1.0);
            }
            out
        })
        .collect()
}

/// Immutable description of the swarm: per-agent gains (which embed the
/// plants), target states, regularization weight, and controller options.
#[derive(Debug, Clone)]
pub struct SwarmConfig {
    agents: Vec<MpcGains>,
    targets: Vec<DVector<f64>>,
    epsilon: f64,
    sinkhorn_iters_per_tick: usize,
    /// Initial scaling in log scale, canonical `max = 0`.
    log_alpha0: DVector<f64>,
    target_policy: TargetPolicy,
}

impl SwarmConfig {
    pub fn new(
        agents: Vec<MpcGains>,
        targets: Vec<DVector<f64>>,
        epsilon: f64,
    ) -> Result<Self, ControlError> {
        if agents.is_empty() {
            return Err(ControlError::InvalidConfig("need at least one agent".into()));
        }
        if agents.len() != targets.len() {
            return Err(ControlError::InvalidConfig(format!(
                "{} agents vs {} targets; counts must match",
                agents.len(),
                targets.len()
            )));
        }
        let dim = agents[0].state_dim();
        if agents.iter().any(|g| g.state_dim() != dim) {
            return Err(ControlError::InvalidConfig(
                "all agents must share one state dimension".into(),
            ));
        }
        if targets.iter().any(|t| t.len() != dim) {
            return Err(ControlError::InvalidConfig(format!(
                "every target must have dimension {dim}"
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(ControlError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        let n = agents.len();
        Ok(Self {
            agents,
            targets,
            epsilon,
            sinkhorn_iters_per_tick: 1,
            log_alpha0: DVector::zeros(n),
            target_policy: TargetPolicy::Barycentric,
        })
    }

    /// All agents share one plant and horizon.
    pub fn homogeneous(
        plant: &crate::linear_mpc::LinearPlant,
        horizon: usize,
        targets: Vec<DVector<f64>>,
        epsilon: f64,
    ) -> Result<Self, ControlError> {
        let gains = crate::linear_mpc::mpc_gains(plant, horizon)?;
        let agents = vec![gains; targets.len()];
        Self::new(agents, targets, epsilon)
    }

    pub fn with_sinkhorn_iters(mut self, iters: usize) -> Result<Self, ControlError> {
        if iters == 0 {
            return Err(ControlError::InvalidConfig(
                "sinkhorn_iters_per_tick must be at least 1".into(),
            ));
        }
        self.sinkhorn_iters_per_tick = iters;
        Ok(self)
    }

    /// Initial scaling vector (any positive vector; the loop only sees its
    /// ray, so it is canonicalized to `max = 1` on ingestion).
    pub fn with_alpha0(self, alpha0: DVector<f64>) -> Result<Self, ControlError> {
        if alpha0.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(ControlError::InvalidConfig(
                "alpha0 entries must be positive and finite".into(),
            ));
        }
        self.with_log_alpha0(alpha0.map(f64::ln))
    }

    /// [`Self::with_alpha0`] in log scale, usable when the linear-scale
    /// vector would under- or overflow (e.g. restarting from an equilibrium
    /// scaling in the small-epsilon regime).
    pub fn with_log_alpha0(mut self, log_alpha0: DVector<f64>) -> Result<Self, ControlError> {
        if log_alpha0.len() != self.agents.len() {
            return Err(ControlError::InvalidConfig(format!(
                "alpha0 must have length {}",
                self.agents.len()
            )));
        }
        if log_alpha0.iter().any(|a| !a.is_finite()) {
            return Err(ControlError::InvalidConfig(
                "log_alpha0 entries must be finite".into(),
            ));
        }
        self.log_alpha0 = canonical_log(log_alpha0);
        Ok(self)
    }

    /// Same swarm with a different regularization weight.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, ControlError> {
        if epsilon.is_nan() || epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(ControlError::InvalidConfig(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_target_policy(mut self, policy: TargetPolicy) -> Self {
        self.target_policy = policy;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn state_dim(&self) -> usize {
        self.agents[0].state_dim()
    }

    pub fn agents(&self) -> &[MpcGains] {
        &self.agents
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn horizon(&self) -> usize {
        self.agents[0].horizon()
    }

    pub fn sinkhorn_iters_per_tick(&self) -> usize {
        self.sinkhorn_iters_per_tick
    }

    /// Linear-scale initial scaling, canonical `max = 1`.
    pub fn alpha0(&self) -> DVector<f64> {
        self.log_alpha0.map(f64::exp)
    }

    pub fn log_alpha0(&self) -> &DVector<f64> {
        &self.log_alpha0
    }

    pub fn target_policy(&self) -> TargetPolicy {
        self.target_policy
    }

    /// Radius bound on the target hull, `max_j ||t_j||`. Barycentric targets
    /// never exceed it.
    pub fn r_upp(&self) -> f64 {
        self.targets.iter().map(|t| t.norm()).fold(0.0, f64::max)
    }

    /// SHA-256 over a canonical rendering of the resolved numeric content;
    /// embedded in trajectories and run outputs.
    pub fn digest(&self) -> String {
        let mut text = String::new();
        let push_f64 = |s: &mut String, v: f64| {
            s.push_str(&format!("{v:.17e};"));
        };
        text.push_str(&format!(
            "v1|n={}|dim={}|iters={}|policy={:?}|",
            self.n_agents(),
            self.state_dim(),
            self.sinkhorn_iters_per_tick,
            self.target_policy
        ));
        push_f64(&mut text, self.epsilon);
        for g in &self.agents {
            text.push_str(&format!("|agent(h={})A=", g.horizon()));
            for v in g.plant().a().iter() {
                push_f64(&mut text, *v);
            }
            text.push_str("B=");
            for v in g.plant().b().iter() {
                push_f64(&mut text, *v);
            }
        }
        text.push_str("|targets=");
        for t in &self.targets {
            for v in t.iter() {
                push_f64(&mut text, *v);
            }
        }
        text.push_str("|log_alpha0=");
        for v in self.log_alpha0.iter() {
            push_f64(&mut text, *v);
        }
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Kernel of the per-tick transport problem at collective state `x`:
/// `C_ij = (x_i - t_j)^T W_i (x_i - t_j)` exponentiated through
/// [`gibbs_kernel`]. Heterogeneous weights `W_i` are supported.
pub fn cost_kernel(x: &[DVector<f64>], config: &SwarmConfig) -> Result<GibbsKernel, ControlError> {
    let n = config.n_agents();
    let dim = config.state_dim();
    if x.len() != n {
        return Err(ControlError::InvalidConfig(format!(
            "expected {n} agent states, got {}",
            x.len()
        )));
    }
    let mut c = DMatrix::zeros(n, n);
    let assemble_col = |j: usize, col: &mut [f64]| {
        let t = &config.targets[j];
        for (i, xi) in x.iter().enumerate() {
            let w = config.agents[i].cost_weight();
            let mut acc = 0.0;
            for r in 0..dim {
                let dr = xi[r] - t[r];
                let mut row_dot = 0.0;
                for cc in 0..dim {
                    row_dot += w[(r, cc)] * (xi[cc] - t[cc]);
                }
                acc += dr * row_dot;
            }
            col[i] = acc.max(0.0);
        }
    };
    // DMatrix is column-major: chunks of `n` are whole columns.
    if n >= PAR_KERNEL_THRESHOLD {
        c.as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(j, col)| assemble_col(j, col));
    } else {
        for (j, col) in c.as_mut_slice().chunks_mut(n).enumerate() {
            assemble_col(j, col);
        }
    }
    let cost = CostMatrix::new(c).map_err(ControlError::Transport)?;
    Ok(gibbs_kernel(&cost, config.epsilon)?)
}

/// Snapshot of the loop after a tick: the collective state together with the
/// controller quantities produced by the most recent tick. At `k = 0` the
/// coupling fields hold uniform placeholders since no tick has run.
#[derive(Debug, Clone)]
pub struct SwarmState {
    pub k: usize,
    pub x: Vec<DVector<f64>>,
    /// Log of the scaling carried into the next tick, canonical `max = 0`.
    pub log_alpha: DVector<f64>,
    /// Log of the scaling computed in the last tick, canonical `max = 0`.
    pub log_beta: DVector<f64>,
    pub coupling: Coupling,
    pub temp_targets: Vec<DVector<f64>>,
    /// Inputs applied in the tick that produced this state; empty at `k = 0`.
    pub inputs: Vec<DVector<f64>>,
}

impl SwarmState {
    pub fn initial(config: &SwarmConfig, x0: Vec<DVector<f64>>) -> Result<Self, ControlError> {
        let n = config.n_agents();
        if x0.len() != n {
            return Err(ControlError::InvalidConfig(format!(
                "expected {n} initial states, got {}",
                x0.len()
            )));
        }
        let dim = config.state_dim();
        if x0.iter().any(|x| x.len() != dim) {
            return Err(ControlError::InvalidConfig(format!(
                "every initial state must have dimension {dim}"
            )));
        }
        if x0.iter().flat_map(|x| x.iter()).any(|v| !v.is_finite()) {
            return Err(ControlError::InvalidConfig(
                "initial states must be finite".into(),
            ));
        }
        let uniform = Coupling::new(DMatrix::from_element(n, n, 1.0 / (n * n) as f64))
            .expect("uniform coupling is valid");
        let temp_targets = config.target_policy.temp_targets(&uniform, &config.targets);
        Ok(Self {
            k: 0,
            x: x0,
            log_alpha: config.log_alpha0.clone(),
            log_beta: DVector::zeros(n),
            coupling: uniform,
            temp_targets,
            inputs: Vec::new(),
        })
    }

    /// Linear-scale `alpha`, canonical `max = 1`.
    pub fn alpha(&self) -> DVector<f64> {
        self.log_alpha.map(f64::exp)
    }

    /// Linear-scale `beta`, canonical `max = 1`.
    pub fn beta(&self) -> DVector<f64> {
        self.log_beta.map(f64::exp)
    }
}

struct TickOutcome {
    log_beta: DVector<f64>,
    log_alpha_next: DVector<f64>,
    coupling: Coupling,
    temp_targets: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
    x_next: Vec<DVector<f64>>,
    kernel_nanos: u64,
    sinkhorn_nanos: u64,
    mpc_nanos: u64,
    log_domain: bool,
}

fn canonical_log(mut v: DVector<f64>) -> DVector<f64> {
    let m = v.max();
    v.add_scalar_mut(-m);
    v
}

/// Plain-arithmetic scaling updates; `None` when any denominator degenerates.
fn scaling_updates_plain(
    kernel: &GibbsKernel,
    log_alpha: &DVector<f64>,
    iters: usize,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = kernel.nrows();
    let mass = 1.0 / n as f64;
    let mut alpha = log_alpha.map(f64::exp);
    let mut beta = DVector::zeros(n);
    for _ in 0..iters {
        let kt_a = kernel.entries().tr_mul(&alpha);
        if kt_a.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return None;
        }
        beta = kt_a.map(|d| mass / d);
        let k_b = kernel.entries() * &beta;
        if k_b.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return None;
        }
        alpha = k_b.map(|d| mass / d);
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return None;
        }
    }
    Some((alpha.map(f64::ln), beta.map(f64::ln)))
}

/// Log-sum-exp scaling updates; total for finite inputs.
fn scaling_updates_log(
    kernel: &GibbsKernel,
    log_alpha: &DVector<f64>,
    iters: usize,
) -> (DVector<f64>, DVector<f64>) {
    let n = kernel.nrows();
    let log_mass = -(n as f64).ln();
    let logs = kernel.log_entries();
    let mut la = log_alpha.clone();
    let mut lb = DVector::zeros(n);
    for _ in 0..iters {
        for j in 0..n {
            lb[j] =
                log_mass - crate::transport::logsumexp((0..n).map(|i| logs[(i, j)] + la[i]));
        }
        for i in 0..n {
            la[i] =
                log_mass - crate::transport::logsumexp((0..n).map(|j| logs[(i, j)] + lb[j]));
        }
    }
    (la, lb)
}

fn run_tick(
    config: &SwarmConfig,
    x: &[DVector<f64>],
    log_alpha: &DVector<f64>,
) -> Result<TickOutcome, ControlError> {
    let t0 = Instant::now();
    let kernel = cost_kernel(x, config)?;
    let t1 = Instant::now();

    let iters = config.sinkhorn_iters_per_tick;
    let plain_safe = kernel.plain_mode_safe() && log_alpha.min() >= PLAIN_TICK_LOG_FLOOR;
    let mut log_domain = false;
    let updates = if plain_safe {
        scaling_updates_plain(&kernel, log_alpha, iters)
    } else {
        None
    };
    let (log_alpha_next, log_beta) = match updates {
        Some(pair) => pair,
        None => {
            log_domain = true;
            scaling_updates_log(&kernel, log_alpha, iters)
        }
    };
    if log_alpha_next
        .iter()
        .chain(log_beta.iter())
        .any(|v| !v.is_finite())
    {
        return Err(ControlError::InvalidConfig(
            "scaling update produced non-finite values even in log domain".into(),
        ));
    }
    let coupling = coupling_from_log_scalings(&log_alpha_next, &kernel, &log_beta)?;
    let t2 = Instant::now();

    let temp_targets = config.target_policy.temp_targets(&coupling, &config.targets);
    let dim = config.state_dim();
    let eye = DMatrix::identity(dim, dim);
    let mut inputs = Vec::with_capacity(x.len());
    let mut x_next = Vec::with_capacity(x.len());
    for (i, (xi, target)) in x.iter().zip(temp_targets.iter()).enumerate() {
        let gains = &config.agents[i];
        inputs.push(mpc_input(gains, xi, target));
        let a_cl = gains.closed_loop();
        x_next.push(a_cl * xi + (&eye - a_cl) * target);
    }
    let t3 = Instant::now();

    Ok(TickOutcome {
        log_beta,
        log_alpha_next,
        coupling,
        temp_targets,
        inputs,
        x_next,
        kernel_nanos: (t1 - t0).as_nanos() as u64,
        sinkhorn_nanos: (t2 - t1).as_nanos() as u64,
        mpc_nanos: (t3 - t2).as_nanos() as u64,
        log_domain,
    })
}

/// Advances the loop by one tick.
pub fn step(state: &SwarmState, config: &SwarmConfig) -> Result<SwarmState, ControlError> {
    let tick = run_tick(config, &state.x, &state.log_alpha).map_err(|e| at_tick(state.k, e))?;
    Ok(SwarmState {
        k: state.k + 1,
        x: tick.x_next,
        log_alpha: canonical_log(tick.log_alpha_next),
        log_beta: canonical_log(tick.log_beta),
        coupling: tick.coupling,
        temp_targets: tick.temp_targets,
        inputs: tick.inputs,
    })
}

/// Wall-clock split of one tick.
#[derive(Debug, Clone, Copy)]
pub struct TickTiming {
    pub kernel_nanos: u64,
    pub sinkhorn_nanos: u64,
    pub mpc_nanos: u64,
    /// Whether the scaling update ran in log-sum-exp arithmetic.
    pub log_domain: bool,
}

/// Everything tick `k` computed at state `x(k)`: the scaling `beta(k)`,
/// the temporary targets, the applied inputs, and the coupling entropy.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<DVector<f64>>,
    /// `beta(k)` in logs, canonical `max = 0`; aligned with `x(k)`.
    pub log_beta: DVector<f64>,
    pub temp_targets: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub coupling_entropy: f64,
}

impl StepRecord {
    pub fn beta(&self) -> DVector<f64> {
        self.log_beta.map(f64::exp)
    }
}

/// Deterministic rollout of the closed loop.
///
/// `records` has one entry per `k` in `0..=steps`; the entry at the final
/// `k` reports the controller quantities evaluated at the terminal state
/// (its inputs are the ones the loop would apply next, not applied ones).
#[derive(Debug, Clone)]
pub struct Trajectory {
    records: Vec<StepRecord>,
    final_coupling: Coupling,
    timings: Vec<TickTiming>,
    config_digest: String,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.records.len() - 1
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Coupling `P` computed at the terminal state.
    pub fn final_coupling(&self) -> &Coupling {
        &self.final_coupling
    }

    pub fn timings(&self) -> &[TickTiming] {
        &self.timings
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn final_states(&self) -> &[DVector<f64>] {
        &self.records[self.records.len() - 1].x
    }
}

/// Rolls the loop forward `steps` ticks from `x0`, recording every tick.
pub fn simulate(
    config: &SwarmConfig,
    x0: Vec<DVector<f64>>,
    steps: usize,
) -> Result<Trajectory, ControlError> {
    let state0 = SwarmState::initial(config, x0)?;
    let mut x = state0.x;
    let mut log_alpha = state0.log_alpha;

    let mut records = Vec::with_capacity(steps + 1);
    let mut timings = Vec::with_capacity(steps + 1);
    let mut final_coupling = None;

    for k in 0..=steps {
        let tick = run_tick(config, &x, &log_alpha).map_err(|e| at_tick(k, e))?;
        records.push(StepRecord {
            k,
            x: x.clone(),
            log_beta: canonical_log(tick.log_beta.clone()),
            temp_targets: tick.temp_targets,
            inputs: tick.inputs,
            coupling_entropy: tick.coupling.entropy(),
        });
        timings.push(TickTiming {
            kernel_nanos: tick.kernel_nanos,
            sinkhorn_nanos: tick.sinkhorn_nanos,
            mpc_nanos: tick.mpc_nanos,
            log_domain: tick.log_domain,
        });
        if k == steps {
            final_coupling = Some(tick.coupling);
        } else {
            x = tick.x_next;
            log_alpha = canonical_log(tick.log_alpha_next);
        }
    }

    Ok(Trajectory {
        records,
        final_coupling: final_coupling.expect("loop ran at least once"),
        timings,
        config_digest: config.digest(),
    })
}
