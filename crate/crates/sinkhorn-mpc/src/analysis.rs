//! Diagnostics for the closed loop: ultimate-bound certificates, equilibrium
//! computation by damped fixed-point iteration on the target map `h`,
//! small-epsilon limit probes, and empirical Lyapunov/stability checks.
//!
//! The equilibrium map sends a collective state to the stack of barycentric
//! targets under the exact entropic coupling at that state,
//! `h(x)_i = N sum_j P*_ij(x) t_j`; its fixed points are exactly the
//! equilibria of the loop, and the scaling `beta` at a fixed point is
//! determined up to scale.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::controller::{
    barycentric_targets, cost_kernel, ControlError, SwarmConfig, Trajectory,
};
use crate::linear_mpc::MpcGains;
use crate::transport::{
    hilbert_metric_log, sinkhorn_solve, sinkhorn_solve_from_log, Coupling, Histogram, ScalingPair,
    SinkhornSolution, TransportError,
};

/// Hilbert-metric tolerance of the inner transport solves; equilibrium
/// definitions use the exact optimal coupling, so this sits far below any
/// outer residual tolerance.
const INNER_TOL: f64 = 1e-12;
const INNER_MAX_ITER: usize = 500_000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("inner transport solve did not converge within {iterations} iterations")]
    SinkhornNotConverged { iterations: usize },
    #[error("equilibrium iteration did not converge at epsilon {epsilon}: residual {residual:.3e}")]
    EquilibriumNotConverged { epsilon: f64, residual: f64 },
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    crate::linear_mpc::spectral_radius_of(m)
}

/// `sqrt(sum v_i^2)` factored by the largest magnitude, so inputs far below
/// the normal range do not underflow when squared.
fn stable_norm(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let s: f64 = values.map(|v| (v / m) * (v / m)).sum();
    m * s.sqrt()
}

/// Ordinary least-squares line through `(x, y)` pairs; `None` when fewer
/// than two distinct abscissae. Returns `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Per-agent pieces of the ultimate-bound certificate
/// `||x_i(k)|| < delta + r_upp ||I - A_cl_i||_2 / (1 - (rho_i + nu_i))`.
#[derive(Debug, Clone)]
pub struct AgentBound {
    pub rho: f64,
    pub nu: f64,
    /// Spectral norm `||I - A_cl_i||_2`.
    pub gain_norm: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct BoundViolation {
    pub k: usize,
    pub agent: usize,
    pub norm: f64,
    pub bound: f64,
}

/// Ultimate-bound certificate, optionally checked against a trajectory.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub delta: f64,
    pub r_upp: f64,
    pub per_agent: Vec<AgentBound>,
    /// First step after which every state satisfied its bound for the rest
    /// of the scanned trajectory; `None` if the final step still violated.
    pub entry_time: Option<usize>,
    /// Violations observed before `entry_time` (diagnostics; by construction
    /// there are none after it).
    pub violations: Vec<BoundViolation>,
}

/// Margin defaults `(1 - rho_i) / 2`.
pub fn default_nu(gains: &[MpcGains]) -> Vec<f64> {
    gains.iter().map(|g| 0.5 * (1.0 - g.rho())).collect()
}

/// Slack default `1e-2 * r_upp`.
pub fn default_delta(r_upp: f64) -> f64 {
    1e-2 * r_upp
}

/// Evaluates the bound for each agent. `nu` must pair with `gains` and keep
/// `rho_i + nu_i < 1`.
pub fn ultimate_bound(
    gains: &[MpcGains],
    r_upp: f64,
    nu: &[f64],
    delta: f64,
) -> Result<BoundReport, AnalysisError> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(AnalysisError::InvalidParameter(format!(
            "delta must be > 0, got {delta}"
        )));
    }
    if r_upp.is_nan() || r_upp < 0.0 || !r_upp.is_finite() {
        return Err(AnalysisError::InvalidParameter(format!(
            "r_upp must be finite and nonnegative, got {r_upp}"
        )));
    }
    if nu.len() != gains.len() {
        return Err(AnalysisError::InvalidParameter(format!(
            "need one nu per agent ({} agents, {} margins)",
            gains.len(),
            nu.len()
        )));
    }
    let mut per_agent = Vec::with_capacity(gains.len());
    for (g, &nu_i) in gains.iter().zip(nu) {
        let rho = g.rho();
        if nu_i.is_nan() || nu_i <= 0.0 || rho + nu_i >= 1.0 {
            return Err(AnalysisError::InvalidParameter(format!(
                "margin nu = {nu_i} must satisfy 0 < nu and rho + nu < 1 (rho = {rho})"
            )));
        }
        let dim = g.state_dim();
        let gain_norm = (DMatrix::identity(dim, dim) - g.closed_loop())
            .svd(false, false)
            .singular_values
            .max();
        let bound = delta + r_upp * gain_norm / (1.0 - (rho + nu_i));
        per_agent.push(AgentBound {
            rho,
            nu: nu_i,
            gain_norm,
            bound,
        });
    }
    Ok(BoundReport {
        delta,
        r_upp,
        per_agent,
        entry_time: None,
        violations: Vec::new(),
    })
}

impl BoundReport {
    /// Scans a trajectory for the entry time into the bound and the
    /// violations preceding it.
    pub fn scan_trajectory(mut self, trajectory: &Trajectory) -> Self {
        let mut violations = Vec::new();
        for rec in trajectory.records() {
            for (i, (x, ab)) in rec.x.iter().zip(&self.per_agent).enumerate() {
                let norm = x.norm();
                if norm >= ab.bound {
                    violations.push(BoundViolation {
                        k: rec.k,
                        agent: i,
                        norm,
                        bound: ab.bound,
                    });
                }
            }
        }
        let last_k = trajectory.records().len() - 1;
        self.entry_time = match violations.last() {
            None => Some(0),
            Some(v) if v.k == last_k => None,
            Some(v) => Some(v.k + 1),
        };
        self.violations = violations;
        self
    }
}

/// Exact entropic coupling at state `x` (inner solve to `1e-12` in the
/// Hilbert metric), optionally warm-started.
fn coupling_at(
    config: &SwarmConfig,
    x: &[DVector<f64>],
    warm_log_beta: Option<&DVector<f64>>,
) -> Result<SinkhornSolution, AnalysisError> {
    let kernel = cost_kernel(x, config)?;
    let mass = Histogram::uniform(config.n_agents());
    let sol = match warm_log_beta {
        Some(lb) => sinkhorn_solve_from_log(&kernel, &mass, &mass, lb, INNER_TOL, INNER_MAX_ITER)?,
        None => sinkhorn_solve(&kernel, &mass, &mass, INNER_TOL, INNER_MAX_ITER)?,
    };
    if !sol.converged {
        return Err(AnalysisError::SinkhornNotConverged {
            iterations: sol.iterations,
        });
    }
    Ok(sol)
}

/// The equilibrium map: barycentric targets under the exact coupling at `x`.
/// Every block of the output lies in the convex hull of the targets.
pub fn equilibrium_map_h(
    x: &[DVector<f64>],
    config: &SwarmConfig,
) -> Result<Vec<DVector<f64>>, AnalysisError> {
    let sol = coupling_at(config, x, None)?;
    Ok(barycentric_targets(&sol.coupling, config.targets()))
}

/// A fixed point of the equilibrium map with its scaling and coupling.
#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub x_e: Vec<DVector<f64>>,
    /// Scalings of the coupling at `x_e`; `beta` is the equilibrium scaling,
    /// unique up to scale.
    pub scalings: ScalingPair,
    pub coupling: Coupling,
    /// `||x_e - h(x_e)||_inf` at the returned point.
    pub residual: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Damped Picard iteration `x <- (1 - theta) x + theta h(x)` from `x_init`
/// until `||x - h(x)||_inf < tol`. The damping halves whenever the residual
/// grows and doubles back after a stretch of monotone progress, which keeps
/// oscillatory regimes (where the map's local slope is negative) from
/// pinning the step size at the floor. Exhaustion of `max_iter` yields a
/// result flagged not-converged (existence of a fixed point is guaranteed,
/// so the caller may retry from another start).
pub fn find_equilibrium(
    config: &SwarmConfig,
    x_init: &[DVector<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumResult, AnalysisError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(AnalysisError::InvalidParameter(format!(
            "tol must be > 0, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(AnalysisError::InvalidParameter(
            "max_iter must be >= 1".into(),
        ));
    }

    let mut x = x_init.to_vec();
    let mut theta = 1.0f64;
    let mut res_prev = f64::INFINITY;
    let mut calm_streak = 0usize;
    let mut warm: Option<DVector<f64>> = None;
    let mut history = Vec::new();

    let mut iterations = 0;
    loop {
        iterations += 1;
        let sol = coupling_at(config, &x, warm.as_ref())?;
        warm = Some(sol.scalings.log_beta().clone());
        let hx = barycentric_targets(&sol.coupling, config.targets());
        let residual = x
            .iter()
            .zip(&hx)
            .map(|(xi, hi)| (xi - hi).amax())
            .fold(0.0f64, f64::max);
        history.push(residual);

        let converged = residual < tol;
        if converged || iterations >= max_iter {
            return Ok(EquilibriumResult {
                x_e: x,
                scalings: sol.scalings,
                coupling: sol.coupling,
                residual,
                epsilon: config.epsilon(),
                iterations,
                converged,
                residual_history: history,
            });
        }

        if residual > res_prev {
            theta = (0.5 * theta).max(1.0 / 64.0);
            calm_streak = 0;
        } else {
            calm_streak += 1;
            if calm_streak >= 8 && theta < 1.0 {
                theta = (2.0 * theta).min(1.0);
                calm_streak = 0;
            }
        }
        for (xi, hi) in x.iter_mut().zip(&hx) {
            *xi = &*xi * (1.0 - theta) + hi * theta;
        }
        res_prev = residual;
    }
}

/// One row of the small-epsilon probe table.
#[derive(Debug, Clone)]
pub struct EpsilonProbeRow {
    pub epsilon: f64,
    /// `min_sigma ||x_e - x_d(sigma)||_2`, evaluated through the equilibrium
    /// identity `x_e_i - t_sigma(i) = N sum_{j != sigma(i)} P_ij (t_j - t_sigma(i))`,
    /// which keeps full relative accuracy when the displacement sits below
    /// one ulp of the target coordinates.
    pub state_distance: f64,
    /// `||P_e - P_sigma||_F` with the matched cells measured by their
    /// off-permutation row mass.
    pub coupling_distance: f64,
    pub sigma: Vec<usize>,
    pub residual: f64,
}

fn permutations_of(n: usize) -> Vec<Vec<usize>> {
    fn heap(perm: &mut Vec<usize>, k: usize, all: &mut Vec<Vec<usize>>) {
        if k == perm.len() {
            all.push(perm.clone());
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            heap(perm, k + 1, all);
            perm.swap(k, i);
        }
    }
    let mut all = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    heap(&mut perm, 0, &mut all);
    all
}

/// Displacement of the equilibrium from the permutation arrangement, via the
/// fixed-point identity; exact to the coupling's relative accuracy even far
/// below one ulp of the targets.
fn identity_state_distance(
    coupling: &Coupling,
    targets: &[DVector<f64>],
    sigma: &[usize],
) -> f64 {
    let n = targets.len();
    let dim = targets[0].len();
    let p = coupling.entries();
    let mut comps = Vec::with_capacity(n * dim);
    for (i, &si) in sigma.iter().enumerate() {
        for l in 0..dim {
            let mut acc = 0.0f64;
            for (j, t) in targets.iter().enumerate() {
                if j != si {
                    acc += n as f64 * p[(i, j)] * (t[l] - targets[si][l]);
                }
            }
            comps.push(acc);
        }
    }
    stable_norm(comps.iter().copied())
}

fn coupling_permutation_distance(coupling: &Coupling, sigma: &[usize]) -> f64 {
    let n = sigma.len();
    let p = coupling.entries();
    let mut comps = Vec::with_capacity(n * n);
    for (i, &si) in sigma.iter().enumerate() {
        let mut off_mass = 0.0;
        for j in 0..n {
            if j != si {
                off_mass += p[(i, j)];
                comps.push(p[(i, j)]);
            }
        }
        // Matched cell: P_ij - 1/N = -(off-row mass) up to the row-sum defect.
        comps.push(off_mass);
    }
    stable_norm(comps.iter().copied())
}

/// For each `epsilon` (visited in the given order, warm-starting from the
/// previous equilibrium), finds the equilibrium and reports its distance to
/// the nearest permutation arrangement of the targets. Exhaustive search
/// over permutations up to `N = 8`, argmax rounding beyond.
pub fn epsilon_limit_probe(
    config: &SwarmConfig,
    epsilons: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<EpsilonProbeRow>, AnalysisError> {
    if epsilons.is_empty() {
        return Err(AnalysisError::InvalidParameter(
            "need at least one epsilon".into(),
        ));
    }
    let targets = config.targets();
    let n = targets.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if (&targets[i] - &targets[j]).norm() == 0.0 {
                return Err(AnalysisError::InvalidParameter(format!(
                    "targets {i} and {j} coincide; the probe needs pairwise distinct targets"
                )));
            }
        }
    }

    let mut rows = Vec::with_capacity(epsilons.len());
    let mut x_start = targets.to_vec();
    for &eps in epsilons {
        let cfg = config.clone().with_epsilon(eps)?;
        let eq = find_equilibrium(&cfg, &x_start, tol, max_iter)?;
        if !eq.converged {
            return Err(AnalysisError::EquilibriumNotConverged {
                epsilon: eps,
                residual: eq.residual,
            });
        }
        let sigma = if n <= 8 {
            permutations_of(n)
                .into_iter()
                .min_by(|a, b| {
                    identity_state_distance(&eq.coupling, targets, a)
                        .total_cmp(&identity_state_distance(&eq.coupling, targets, b))
                })
                .expect("at least one permutation")
        } else {
            let rounded = eq.coupling.argmax_rows();
            if !eq.coupling.rounds_to_permutation() {
                return Err(AnalysisError::InvalidParameter(format!(
                    "coupling at epsilon {eps} does not round to a permutation; \
                     argmax selection needs the sharp regime for N > 8"
                )));
            }
            rounded
        };
        rows.push(EpsilonProbeRow {
            epsilon: eps,
            state_distance: identity_state_distance(&eq.coupling, targets, &sigma),
            coupling_distance: coupling_permutation_distance(&eq.coupling, &sigma),
            sigma,
            residual: eq.residual,
        });
        x_start = eq.x_e;
    }
    Ok(rows)
}

/// Value of `V_x(x) = sum_i ||x_i - N sum_j P_ij t_j||^2_{W_i}` for a frozen
/// coupling `P`.
pub fn state_lyapunov(x: &[DVector<f64>], coupling: &Coupling, config: &SwarmConfig) -> f64 {
    let bary = barycentric_targets(coupling, config.targets());
    x.iter()
        .zip(&bary)
        .zip(config.agents())
        .map(|((xi, bi), g)| {
            let d = xi - bi;
            d.dot(&(g.cost_weight() * &d)).max(0.0)
        })
        .sum()
}

/// Per-step values of `V(x, beta) = V_x(x) + gamma d_H(beta, beta_e)` along
/// a trajectory, with the frozen coupling inside `V_x` taken as the
/// equilibrium coupling.
#[derive(Debug, Clone)]
pub struct LyapunovSeries {
    pub values: Vec<f64>,
    pub gamma: f64,
    /// First index after which the series never rises above the numerical
    /// resolution slack; `None` if the last step still rose.
    pub nonincreasing_after: Option<usize>,
}

pub fn lyapunov_probe(
    trajectory: &Trajectory,
    equilibrium: &EquilibriumResult,
    config: &SwarmConfig,
    gamma: Option<f64>,
) -> Result<LyapunovSeries, AnalysisError> {
    let recs = trajectory.records();
    if recs.is_empty() {
        return Err(AnalysisError::InvalidParameter("empty trajectory".into()));
    }
    if recs[0].x.len() != config.n_agents() {
        return Err(AnalysisError::InvalidParameter(
            "trajectory and config disagree on the agent count".into(),
        ));
    }

    let bary = barycentric_targets(&equilibrium.coupling, config.targets());
    let v_x = |x: &[DVector<f64>]| -> f64 {
        x.iter()
            .zip(&bary)
            .zip(config.agents())
            .map(|((xi, bi), g)| {
                let d = xi - bi;
                d.dot(&(g.cost_weight() * &d)).max(0.0)
            })
            .sum()
    };

    let log_beta_e = equilibrium.scalings.log_beta();
    let d_h0 = hilbert_metric_log(&recs[0].log_beta, log_beta_e)?;
    let gamma = match gamma {
        Some(g) if g > 0.0 => g,
        Some(g) => {
            return Err(AnalysisError::InvalidParameter(format!(
                "gamma must be > 0, got {g}"
            )))
        }
        None => v_x(&recs[0].x) / d_h0.max(1e-12),
    };

    let mut values = Vec::with_capacity(recs.len());
    for rec in recs {
        let dh = hilbert_metric_log(&rec.log_beta, log_beta_e)?;
        values.push(v_x(&rec.x) + gamma * dh);
    }

    // Allow for the resolution floor of each term: the metric term is a
    // spread of logs (absolute resolution ~1e-13) amplified by gamma.
    let slack = 1e-12 * values[0].max(1.0) + gamma * 1e-13;
    let mut last_rise = None;
    for (k, w) in values.windows(2).enumerate() {
        if w[1] > w[0] + slack {
            last_rise = Some(k + 1);
        }
    }
    let nonincreasing_after = match last_rise {
        None => Some(0),
        Some(k) if k == values.len() - 1 => None,
        Some(k) => Some(k),
    };

    Ok(LyapunovSeries {
        values,
        gamma,
        nonincreasing_after,
    })
}

#[derive(Debug, Clone)]
pub struct StabilityTrial {
    pub initial_distance: f64,
    pub terminal_distance: f64,
    pub ratio: f64,
}

/// Outcome of perturbing the equilibrium and letting the loop run.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub radius: f64,
    pub steps: usize,
    pub trials: Vec<StabilityTrial>,
    /// Largest terminal/initial distance ratio over the trials.
    pub contraction_ratio: f64,
    pub max_terminal_distance: f64,
    /// True when every trial contracted and the terminal distance fell below
    /// `1e-6 * max(radius, 1)`. A diverging run reports `false`, never an
    /// error.
    pub stable: bool,
}

/// Perturbs `x_e` by `trials` random collective displacements of norm
/// `radius` (scaling restarted at the equilibrium scaling), simulates
/// `steps` ticks, and reports the contraction of the distance to `x_e`.
pub fn stability_probe(
    config: &SwarmConfig,
    equilibrium: &EquilibriumResult,
    radius: f64,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<StabilityReport, AnalysisError> {
    if radius.is_nan() || radius < 0.0 || !radius.is_finite() {
        return Err(AnalysisError::InvalidParameter(format!(
            "radius must be finite and nonnegative, got {radius}"
        )));
    }
    if steps == 0 || trials == 0 {
        return Err(AnalysisError::InvalidParameter(
            "steps and trials must be at least 1".into(),
        ));
    }

    // Restart the dynamic controller at the equilibrium scaling: with
    // alpha(0) = alpha_e, tick 0 reproduces beta_e at x_e exactly.
    let cfg = config
        .clone()
        .with_log_alpha0(equilibrium.scalings.log_alpha().clone())?;

    let n = config.n_agents();
    let dim = config.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials_out = Vec::with_capacity(trials);

    for _ in 0..trials {
        let mut pert = DVector::<f64>::zeros(n * dim);
        if radius > 0.0 {
            loop {
                for v in pert.iter_mut() {
                    *v = rng.random_range(-1.0..=1.0);
                }
                let norm = pert.norm();
                if norm > 1e-6 {
                    pert *= radius / norm;
                    break;
                }
            }
        }
        let x0: Vec<DVector<f64>> = equilibrium
            .x_e
            .iter()
            .enumerate()
            .map(|(i, xe)| xe + DVector::from(pert.rows(i * dim, dim)))
            .collect();
        let initial_distance = radius;
        let traj = crate::controller::simulate(&cfg, x0, steps)?;
        let diffs: Vec<f64> = traj
            .final_states()
            .iter()
            .zip(&equilibrium.x_e)
            .flat_map(|(xf, xe)| (xf - xe).iter().copied().collect::<Vec<_>>())
            .collect();
        let terminal_distance = stable_norm(diffs.into_iter());
        let ratio = if radius > 0.0 {
            terminal_distance / initial_distance
        } else {
            0.0
        };
        trials_out.push(StabilityTrial {
            initial_distance,
            terminal_distance,
            ratio,
        });
    }

    let contraction_ratio = trials_out.iter().map(|t| t.ratio).fold(0.0, f64::max);
    let max_terminal_distance = trials_out
        .iter()
        .map(|t| t.terminal_distance)
        .fold(0.0, f64::max);
    let stable = if radius > 0.0 {
        contraction_ratio < 1.0 && max_terminal_distance < 1e-6 * radius.max(1.0)
    } else {
        true
    };

    Ok(StabilityReport {
        radius,
        steps,
        trials: trials_out,
        contraction_ratio,
        max_terminal_distance,
        stable,
    })
}
