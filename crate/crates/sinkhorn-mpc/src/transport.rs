//! Entropic optimal transport between discrete distributions.
//!
//! Provides the Gibbs kernel `K = exp(-C/eps)`, Sinkhorn scaling iterations in
//! plain and log-sum-exp arithmetic, the Hilbert projective metric together
//! with the contraction coefficient of a positive kernel, and an exact
//! linear-assignment solver used as a validation oracle and timing baseline.
//!
//! Scaling vectors are projective objects: `(alpha, beta)` and
//! `(r*alpha, beta/r)` describe the same coupling. [`ScalingPair`] therefore
//! stores logarithms and keeps the canonical representative `max(beta) = 1`,
//! which stays representable even in the small-epsilon regime where the
//! linear-scale vectors overflow or underflow `f64`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Kernel log-entries below this trigger the log-domain path in auto mode;
/// products of `exp` factors above the threshold cannot underflow to zero.
const PLAIN_MODE_LOG_FLOOR: f64 = -350.0;

/// Iterations between extrapolation attempts in [`sinkhorn_solve_from_log`].
const ACCEL_PERIOD: usize = 16;
/// Extrapolation engages only for contraction-rate estimates in this window;
/// the upper cap bounds the `rho / (1 - rho)` amplification.
const ACCEL_RHO_MIN: f64 = 0.9;
const ACCEL_RHO_MAX: f64 = 1.0 - 1e-10;


#[derive(Debug, Error)]
pub enum TransportError {
    #[error("epsilon must be strictly positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} must have strictly positive, finite entries")]
    NonPositiveVector(&'static str),
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("plain-mode Sinkhorn underflowed (zero or non-finite denominator); use log-domain")]
    Underflow,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn check_positive(v: &DVector<f64>, what: &'static str) -> Result<(), TransportError> {
    if v.iter().all(|x| x.is_finite() && *x > 0.0) {
        Ok(())
    } else {
        Err(TransportError::NonPositiveVector(what))
    }
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<(), TransportError> {
    if len == expected {
        Ok(())
    } else {
        Err(TransportError::DimensionMismatch(format!(
            "{what}: expected length {expected}, got {len}"
        )))
    }
}

/// `log(sum(exp(x)))` over the values yielded by `iter`, stable under large
/// negative magnitudes. Empty input and all `-inf` both give `-inf`.
pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Probability vector on `N` points: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    weights: DVector<f64>,
}

impl Histogram {
    /// Tolerance on the unit-mass constraint.
    pub const MASS_TOL: f64 = 1e-12;

    pub fn new(weights: DVector<f64>) -> Result<Self, TransportError> {
        if weights.is_empty() {
            return Err(TransportError::InvalidHistogram("empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TransportError::InvalidHistogram(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let mass: f64 = weights.sum();
        if (mass - 1.0).abs() > Self::MASS_TOL {
            return Err(TransportError::InvalidHistogram(format!(
                "weights sum to {mass}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    /// The uniform histogram `1_N / N`.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "histogram needs at least one point");
        Self {
            weights: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
}

/// Pairwise transport costs `C[i][j]` from source point `i` to target `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, TransportError> {
        if entries.is_empty() {
            return Err(TransportError::DimensionMismatch(
                "cost matrix must be non-empty".into(),
            ));
        }
        for j in 0..entries.ncols() {
            for i in 0..entries.nrows() {
                if !entries[(i, j)].is_finite() {
                    return Err(TransportError::NonFiniteCost { row: i, col: j });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

/// Elementwise exponential `K = exp(-C/eps)` of a scaled cost matrix.
///
/// `log_entries` keeps `-C/eps` exactly; `entries` is its elementwise `exp`,
/// where entries below the smallest positive double round to zero. Every
/// log-domain routine works from `log_entries` and is immune to that
/// underflow.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    entries: DMatrix<f64>,
    log_entries: DMatrix<f64>,
    epsilon: f64,
}

impl GibbsKernel {
    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn log_entries(&self) -> &DMatrix<f64> {
        &self.log_entries
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// True when every entry is comfortably representable in linear scale, so
    /// the plain Sinkhorn path cannot lose mass to underflow.
    pub fn plain_mode_safe(&self) -> bool {
        self.log_entries.iter().all(|l| *l >= PLAIN_MODE_LOG_FLOOR)
    }
}

/// Builds the Gibbs kernel `K[i][j] = exp(-C[i][j]/epsilon)`.
pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel, TransportError> {
    if epsilon.is_nan() || epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(TransportError::NonPositiveEpsilon(epsilon));
    }
    let log_entries = cost.entries().map(|c| -c / epsilon);
    let entries = log_entries.map(f64::exp);
    Ok(GibbsKernel {
        entries,
        log_entries,
        epsilon,
    })
}

/// Sinkhorn scaling pair, stored in log scale and canonicalized to
/// `max(beta) = 1` (`max(log_beta) = 0`). Canonicalization rescales both
/// vectors jointly, so the induced coupling `diag(alpha) K diag(beta)` is
/// untouched.
#[derive(Debug, Clone)]
pub struct ScalingPair {
    log_alpha: DVector<f64>,
    log_beta: DVector<f64>,
}

impl ScalingPair {
    pub fn from_linear(alpha: &DVector<f64>, beta: &DVector<f64>) -> Result<Self, TransportError> {
        check_positive(alpha, "alpha")?;
        check_positive(beta, "beta")?;
        Ok(Self::canonicalized(
            alpha.map(f64::ln),
            beta.map(f64::ln),
        ))
    }

    pub fn from_log(log_alpha: DVector<f64>, log_beta: DVector<f64>) -> Result<Self, TransportError> {
        if log_alpha.iter().chain(log_beta.iter()).any(|x| !x.is_finite()) {
            return Err(TransportError::NonPositiveVector("log scalings"));
        }
        Ok(Self::canonicalized(log_alpha, log_beta))
    }

    fn canonicalized(mut log_alpha: DVector<f64>, mut log_beta: DVector<f64>) -> Self {
        let shift = log_beta.max();
        log_beta.add_scalar_mut(-shift);
        log_alpha.add_scalar_mut(shift);
        Self { log_alpha, log_beta }
    }

    pub fn log_alpha(&self) -> &DVector<f64> {
        &self.log_alpha
    }

    pub fn log_beta(&self) -> &DVector<f64> {
        &self.log_beta
    }

    /// Linear-scale `alpha`; entries may underflow to zero for extreme
    /// kernels. Prefer the log accessors for arithmetic.
    pub fn alpha(&self) -> DVector<f64> {
        self.log_alpha.map(f64::exp)
    }

    /// Linear-scale `beta` with `max(beta) = 1`.
    pub fn beta(&self) -> DVector<f64> {
        self.log_beta.map(f64::exp)
    }
}

/// Transport plan: nonnegative matrix whose marginals match the source and
/// target histograms once the scalings have converged.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    entries: DMatrix<f64>,
}

impl Coupling {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, TransportError> {
        if entries
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(TransportError::InvalidParameter(
                "coupling entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn row_sums(&self) -> DVector<f64> {
        let ones = DVector::from_element(self.entries.ncols(), 1.0);
        &self.entries * ones
    }

    pub fn col_sums(&self) -> DVector<f64> {
        let ones = DVector::from_element(self.entries.nrows(), 1.0);
        self.entries.tr_mul(&ones)
    }

    /// Entropy `-sum P_ij (log P_ij - 1)` with the `0 log 0 = 0` convention.
    pub fn entropy(&self) -> f64 {
        self.entries
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * (p.ln() - 1.0))
            .sum()
    }

    /// Column index of the largest entry in each row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.entries.nrows())
            .map(|i| {
                let mut best = 0;
                for j in 1..self.entries.ncols() {
                    if self.entries[(i, j)] > self.entries[(i, best)] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// True when `argmax_rows` hits every column exactly once.
    pub fn rounds_to_permutation(&self) -> bool {
        if self.entries.nrows() != self.entries.ncols() {
            return false;
        }
        let rows = self.argmax_rows();
        let mut seen = vec![false; self.entries.ncols()];
        for j in rows {
            if seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }
}

/// `P = diag(alpha) K diag(beta)` from linear-scale scalings.
pub fn coupling_from_scalings(
    alpha: &DVector<f64>,
    kernel: &GibbsKernel,
    beta: &DVector<f64>,
) -> Result<Coupling, TransportError> {
    check_positive(alpha, "alpha")?;
    check_positive(beta, "beta")?;
    check_len(alpha.len(), kernel.nrows(), "alpha vs kernel rows")?;
    check_len(beta.len(), kernel.ncols(), "beta vs kernel cols")?;
    let mut entries = kernel.entries().clone();
    for j in 0..entries.ncols() {
        for i in 0..entries.nrows() {
            entries[(i, j)] *= alpha[i] * beta[j];
        }
    }
    Coupling::new(entries)
}

/// `P = exp(log_alpha_i + log K_ij + log_beta_j)`, the log-domain route to the
/// same coupling. Entries keep full relative accuracy however small.
pub fn coupling_from_log_scalings(
    log_alpha: &DVector<f64>,
    kernel: &GibbsKernel,
    log_beta: &DVector<f64>,
) -> Result<Coupling, TransportError> {
    check_len(log_alpha.len(), kernel.nrows(), "log_alpha vs kernel rows")?;
    check_len(log_beta.len(), kernel.ncols(), "log_beta vs kernel cols")?;
    let logs = kernel.log_entries();
    let entries = DMatrix::from_fn(kernel.nrows(), kernel.ncols(), |i, j| {
        (log_alpha[i] + logs[(i, j)] + log_beta[j]).exp()
    });
    Coupling::new(entries)
}

/// One Sinkhorn iteration in linear arithmetic:
/// `alpha_next = a ./ (K beta)`, then `beta_next = b ./ (K^T alpha_next)`,
/// with the output pair canonicalized to `max(beta_next) = 1`.
///
/// Fails with [`TransportError::Underflow`] instead of returning infinities
/// when a denominator degenerates; callers then switch to
/// [`sinkhorn_step_log`].
pub fn sinkhorn_step(
    kernel: &GibbsKernel,
    a: &Histogram,
    b: &Histogram,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), TransportError> {
    check_len(a.len(), kernel.nrows(), "a vs kernel rows")?;
    check_len(b.len(), kernel.ncols(), "b vs kernel cols")?;
    check_len(beta.len(), kernel.ncols(), "beta vs kernel cols")?;
    check_positive(beta, "beta")?;

    let k_beta = kernel.entries() * beta;
    if k_beta.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(TransportError::Underflow);
    }
    let alpha_next = a.weights().component_div(&k_beta);
    let kt_alpha = kernel.entries().tr_mul(&alpha_next);
    if kt_alpha.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(TransportError::Underflow);
    }
    let beta_next = b.weights().component_div(&kt_alpha);
    if alpha_next.iter().chain(beta_next.iter()).any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(TransportError::Underflow);
    }

    // Joint rescale: beta to max 1, alpha compensated, coupling unchanged.
    let s = beta_next.max();
    Ok((alpha_next * s, beta_next / s))
}

/// Log-domain twin of [`sinkhorn_step`]: same iteration computed with
/// log-sum-exp reductions. Takes and returns logarithms of the scalings,
/// canonicalized to `max(log_beta_next) = 0`.
pub fn sinkhorn_step_log(
    kernel: &GibbsKernel,
    a: &Histogram,
    b: &Histogram,
    log_beta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), TransportError> {
    check_len(a.len(), kernel.nrows(), "a vs kernel rows")?;
    check_len(b.len(), kernel.ncols(), "b vs kernel cols")?;
    check_len(log_beta.len(), kernel.ncols(), "log_beta vs kernel cols")?;

    let logs = kernel.log_entries();
    let (n, m) = (kernel.nrows(), kernel.ncols());

    let log_alpha_next = DVector::from_fn(n, |i, _| {
        a.weights()[i].ln() - logsumexp((0..m).map(|j| logs[(i, j)] + log_beta[j]))
    });
    let mut log_beta_next = DVector::from_fn(m, |j, _| {
        b.weights()[j].ln() - logsumexp((0..n).map(|i| logs[(i, j)] + log_alpha_next[i]))
    });

    let shift = log_beta_next.max();
    log_beta_next.add_scalar_mut(-shift);
    Ok((log_alpha_next.add_scalar(shift), log_beta_next))
}

/// Result of a [`sinkhorn_solve`] run.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub scalings: ScalingPair,
    pub coupling: Coupling,
    pub iterations: usize,
    /// False when the Hilbert-metric stopping rule was not met in `max_iter`.
    pub converged: bool,
    /// `max(||P 1 - a||_inf, ||P^T 1 - b||_inf)` of the returned coupling.
    pub marginal_error: f64,
}

/// Iterates [`sinkhorn_step`] from `beta = 1` until successive betas are
/// closer than `tol` in the Hilbert projective metric, switching to the
/// log-domain iteration up front for extreme kernels and on underflow
/// otherwise. Non-convergence is reported in the result, not as an error.
pub fn sinkhorn_solve(
    kernel: &GibbsKernel,
    a: &Histogram,
    b: &Histogram,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution, TransportError> {
    let log_beta0 = DVector::zeros(kernel.ncols());
    sinkhorn_solve_from_log(kernel, a, b, &log_beta0, tol, max_iter)
}

/// [`sinkhorn_solve`] from a caller-supplied initial `beta` (linear scale).
pub fn sinkhorn_solve_from(
    kernel: &GibbsKernel,
    a: &Histogram,
    b: &Histogram,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution, TransportError> {
    check_positive(beta0, "beta0")?;
    sinkhorn_solve_from_log(kernel, a, b, &beta0.map(f64::ln), tol, max_iter)
}

/// [`sinkhorn_solve`] from an initial `beta` given in log scale, usable when
/// the linear-scale vector would underflow.
pub fn sinkhorn_solve_from_log(
    kernel: &GibbsKernel,
    a: &Histogram,
    b: &Histogram,
    log_beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution, TransportError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(TransportError::InvalidParameter(format!(
            "tol must be > 0, got {tol}"
        )));
    }
    if max_iter == 0 {
        return Err(TransportError::InvalidParameter("max_iter must be >= 1".into()));
    }
    check_len(log_beta0.len(), kernel.ncols(), "log_beta0 vs kernel cols")?;
    if log_beta0.iter().any(|x| !x.is_finite()) {
        return Err(TransportError::NonPositiveVector("log_beta0"));
    }

    let mut log_beta = log_beta0.add_scalar(-log_beta0.max());
    let mut plain = kernel.plain_mode_safe() && log_beta.min() >= PLAIN_MODE_LOG_FLOOR;
    let mut log_alpha = DVector::zeros(kernel.nrows());
    let mut iterations = 0;
    let mut converged = false;
    let mut gap_last = f64::INFINITY;
    // Mean-centered history of recent log-betas for extrapolation.
    let mut hist: Vec<DVector<f64>> = Vec::new();

    let center = |v: &DVector<f64>| v.add_scalar(-v.mean());

    while iterations < max_iter {
        let mut stepped = None;
        if plain && log_beta.min() >= PLAIN_MODE_LOG_FLOOR {
            let beta = log_beta.map(f64::exp);
            match sinkhorn_step(kernel, a, b, &beta) {
                Ok((alpha_next, beta_next)) => {
                    stepped = Some((alpha_next.map(f64::ln), beta_next.map(f64::ln)));
                }
                Err(TransportError::Underflow) => plain = false,
                Err(e) => return Err(e),
            }
        }
        let (la, lb) = match stepped {
            Some(pair) => pair,
            None => sinkhorn_step_log(kernel, a, b, &log_beta)?,
        };
        iterations += 1;
        gap_last = hilbert_metric_log(&lb, &log_beta)?;
        log_alpha = la;
        log_beta = lb;
        if gap_last < tol {
            converged = true;
            break;
        }

        // Near-decoupled kernels contract at rate 1 - O(w) with w the weakest
        // cross-cluster weight, stalling the gap for ~1/w iterations. The
        // asymptotic error is linear in log scale, so a safeguarded Aitken
        // jump along the dominant mode removes it.
        hist.push(center(&log_beta));
        if hist.len() > 3 {
            hist.remove(0);
        }
        if iterations % ACCEL_PERIOD == 0 && hist.len() == 3 && iterations < max_iter {
            if let Some(cand) = aitken_candidate(&hist) {
                let cand = cand.add_scalar(-cand.max());
                let (la_c, lb_c) = sinkhorn_step_log(kernel, a, b, &cand)?;
                iterations += 1;
                let gap_c = hilbert_metric_log(&lb_c, &cand)?;
                if gap_c < gap_last {
                    log_alpha = la_c;
                    log_beta = lb_c;
                    gap_last = gap_c;
                    hist.clear();
                    if gap_c < tol {
                        converged = true;
                        break;
                    }
                }
            }
        }
    }
    let _ = gap_last;

    let scalings = ScalingPair::from_log(log_alpha, log_beta)?;
    let coupling = coupling_from_log_scalings(scalings.log_alpha(), kernel, scalings.log_beta())?;
    let marginal_error = marginal_violation(&coupling, a, b);

    Ok(SinkhornSolution {
        scalings,
        coupling,
        iterations,
        converged,
        marginal_error,
    })
}

/// Vector Aitken extrapolation from three consecutive (mean-centered)
/// iterates: estimates the dominant linear contraction rate `rho` from the
/// last two differences and jumps to the predicted limit. `None` outside the
/// slow regime or when the estimate is unusable.
fn aitken_candidate(hist: &[DVector<f64>]) -> Option<DVector<f64>> {
    let d0 = &hist[1] - &hist[0];
    let d1 = &hist[2] - &hist[1];
    let den = d0.dot(&d0);
    if den == 0.0 || !den.is_finite() {
        return None;
    }
    let rho = d1.dot(&d0) / den;
    if !(ACCEL_RHO_MIN..=ACCEL_RHO_MAX).contains(&rho) {
        return None;
    }
    let cand = &hist[2] + d1 * (rho / (1.0 - rho));
    if cand.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(cand)
}

fn marginal_violation(coupling: &Coupling, a: &Histogram, b: &Histogram) -> f64 {
    let row_err = (coupling.row_sums() - a.weights()).amax();
    let col_err = (coupling.col_sums() - b.weights()).amax();
    row_err.max(col_err)
}

/// Hilbert projective metric
/// `d_H(beta, beta') = log max_{i,j} (beta_i beta'_j) / (beta_j beta'_i)`,
/// computed as the spread of `log(beta) - log(beta')`. Zero exactly when the
/// two vectors are proportional.
pub fn hilbert_metric(beta: &DVector<f64>, beta_prime: &DVector<f64>) -> Result<f64, TransportError> {
    check_positive(beta, "beta")?;
    check_positive(beta_prime, "beta_prime")?;
    hilbert_metric_log(&beta.map(f64::ln), &beta_prime.map(f64::ln))
}

/// [`hilbert_metric`] on vectors already in log scale.
pub fn hilbert_metric_log(
    log_beta: &DVector<f64>,
    log_beta_prime: &DVector<f64>,
) -> Result<f64, TransportError> {
    check_len(log_beta_prime.len(), log_beta.len(), "log_beta_prime vs log_beta")?;
    if log_beta
        .iter()
        .chain(log_beta_prime.iter())
        .any(|x| !x.is_finite())
    {
        return Err(TransportError::NonPositiveVector("log scalings"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (lb, lbp) in log_beta.iter().zip(log_beta_prime.iter()) {
        let r = lb - lbp;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(hi - lo)
}

/// Contraction data of a positive kernel: returns `(lambda, eta)` with
/// `eta = max_{i,j,k,l} K_ik K_jl / (K_jk K_il)` and
/// `lambda = (sqrt(eta) - 1) / (sqrt(eta) + 1)`.
///
/// The cross-ratio maximum is taken exactly over all index quadruples in log
/// space, so huge entry ratios cannot overflow; `eta` itself may round to
/// `inf` for extreme kernels while `lambda` stays in `[0, 1]`.
pub fn contraction_coefficient(kernel: &GibbsKernel) -> (f64, f64) {
    let logs = kernel.log_entries();
    let (n, m) = (logs.nrows(), logs.ncols());
    let mut log_eta = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..m {
                for l in (k + 1)..m {
                    let cross = logs[(i, k)] + logs[(j, l)] - logs[(j, k)] - logs[(i, l)];
                    log_eta = log_eta.max(cross.abs());
                }
            }
        }
    }
    // lambda = (sqrt(eta)-1)/(sqrt(eta)+1) = (1-u)/(1+u), u = eta^{-1/2}.
    let u = (-0.5 * log_eta).exp();
    let lambda = (1.0 - u) / (1.0 + u);
    (lambda, log_eta.exp())
}

/// Minimum-cost assignment for a square cost matrix under uniform marginals.
///
/// Returns the permutation `sigma` (row `i` is assigned column `sigma[i]`)
/// minimizing `(1/N) sum_i C[i][sigma(i)]`, and that minimum. Among
/// cost-equal optima the lexicographically smallest permutation is returned,
/// which pins the output for degenerate matrices.
///
/// Shortest-augmenting-path primal-dual solve, `O(N^3)`, followed by a
/// lexicographic sweep over the zero-reduced-cost subgraph.
pub fn exact_lp_assignment(cost: &CostMatrix) -> Result<(Vec<usize>, f64), TransportError> {
    if cost.nrows() != cost.ncols() {
        return Err(TransportError::DimensionMismatch(format!(
            "assignment needs a square matrix, got {}x{}",
            cost.nrows(),
            cost.ncols()
        )));
    }
    let c = cost.entries();
    let n = c.nrows();

    // Dual potentials and col -> row matching; index n is the virtual start
    // column of each augmentation.
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![usize::MAX; n + 1];

    for row in 0..n {
        col_row[n] = row;
        let mut j_cur = n;
        let mut min_slack = vec![f64::INFINITY; n];
        let mut prev_col = vec![n; n];
        let mut used = vec![false; n + 1];

        loop {
            used[j_cur] = true;
            let i_cur = col_row[j_cur];
            let mut delta = f64::INFINITY;
            let mut j_next = usize::MAX;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let slack = c[(i_cur, j)] - u[i_cur] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    prev_col[j] = j_cur;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j_next = j;
                }
            }
            for j in 0..n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            u[col_row[n]] += delta;
            v[n] -= delta;

            j_cur = j_next;
            if col_row[j_cur] == usize::MAX {
                break;
            }
        }
        // Augment along the recorded path back to the virtual column.
        loop {
            let j_prev = prev_col[j_cur];
            col_row[j_cur] = col_row[j_prev];
            j_cur = j_prev;
            if j_cur == n {
                break;
            }
        }
    }

    let mut row_col = vec![usize::MAX; n];
    for j in 0..n {
        row_col[col_row[j]] = j;
    }

    lexicographic_refine(c, &u, &v, &mut row_col);

    let total: f64 = (0..n).map(|i| c[(i, row_col[i])]).sum();
    Ok((row_col.clone(), total / n as f64))
}

/// Rewrites the optimal matching into the lexicographically smallest one over
/// the tight (zero reduced cost) edges, which by complementary slackness is
/// exactly the set of optimal assignments.
fn lexicographic_refine(c: &DMatrix<f64>, u: &[f64], v: &[f64], row_col: &mut [usize]) {
    let n = row_col.len();
    let scale = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);

    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (c[(i, j)] - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();

    let mut col_row = vec![usize::MAX; n];
    for (i, &j) in row_col.iter().enumerate() {
        col_row[j] = i;
    }

    // Greedy per row: take the smallest tight column that still admits a
    // perfect matching for the remaining rows. Attempts run on scratch
    // copies and are installed only on success.
    for i in 0..n {
        for &j in &tight[i] {
            if j >= row_col[i] {
                break;
            }
            let owner = col_row[j];
            if owner < i {
                continue; // column locked by an earlier row
            }
            let mut rc = row_col.to_vec();
            let mut cr = col_row.clone();
            let j_old = rc[i];
            rc[i] = j;
            cr[j] = i;
            rc[owner] = usize::MAX;
            cr[j_old] = usize::MAX;
            let mut visited = vec![false; n];
            if rematch(owner, i, &tight, &mut rc, &mut cr, &mut visited) {
                row_col.copy_from_slice(&rc);
                col_row = cr;
                break;
            }
        }
    }
}

/// Kuhn augmenting search over the tight graph: rows `<= fixed_limit` are
/// immovable. Updates both sides of the matching on success.
fn rematch(
    row: usize,
    fixed_limit: usize,
    tight: &[Vec<usize>],
    row_col: &mut [usize],
    col_row: &mut [usize],
    visited: &mut [bool],
) -> bool {
    for &j in &tight[row] {
        if visited[j] {
            continue;
        }
        visited[j] = true;
        let owner = col_row[j];
        if owner != usize::MAX
            && (owner <= fixed_limit || !rematch(owner, fixed_limit, tight, row_col, col_row, visited))
        {
            continue;
        }
        col_row[j] = row;
        row_col[row] = j;
        return true;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kernel_from(rows: &[&[f64]], epsilon: f64) -> GibbsKernel {
        let n = rows.len();
        let m = rows[0].len();
        let entries = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
        let cost = CostMatrix::new(entries.map(|k: f64| -epsilon * k.ln())).unwrap();
        gibbs_kernel(&cost, epsilon).unwrap()
    }

    #[test]
    fn gibbs_kernel_diagonal_cost() {
        let eps = 0.7;
        let cost = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, eps, eps, 0.0])).unwrap();
        let k = gibbs_kernel(&cost, eps).unwrap();
        assert_relative_eq!(k.entries()[(0, 0)], 1.0);
        assert_relative_eq!(k.entries()[(1, 1)], 1.0);
        assert_relative_eq!(k.entries()[(0, 1)], (-1.0f64).exp());
        assert_relative_eq!(k.entries()[(1, 0)], (-1.0f64).exp());
        assert_relative_eq!(k.log_entries()[(0, 1)], -1.0);
    }

    #[test]
    fn gibbs_kernel_zero_cost_is_all_ones() {
        let cost = CostMatrix::new(DMatrix::zeros(3, 4)).unwrap();
        let k = gibbs_kernel(&cost, 2.5).unwrap();
        assert!(k.entries().iter().all(|x| *x == 1.0));
    }

    #[test]
    fn gibbs_kernel_direct_evaluation() {
        let cost = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let k = gibbs_kernel(&cost, 0.5).unwrap();
        assert_relative_eq!(k.entries()[(0, 1)], (-2.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(k.entries()[(1, 0)], (-2.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn gibbs_kernel_rejects_bad_epsilon() {
        let cost = CostMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            gibbs_kernel(&cost, 0.0),
            Err(TransportError::NonPositiveEpsilon(_))
        ));
        assert!(matches!(
            gibbs_kernel(&cost, -1.0),
            Err(TransportError::NonPositiveEpsilon(_))
        ));
    }

    #[test]
    fn cost_matrix_rejects_nan() {
        let mut m = DMatrix::zeros(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(matches!(
            CostMatrix::new(m),
            Err(TransportError::NonFiniteCost { row: 1, col: 0 })
        ));
    }

    #[test]
    fn sinkhorn_step_symmetric_fixed_point() {
        // alpha = beta = 1/sqrt(3) solves alpha = 0.5 / (1.5 alpha) for this
        // kernel, so the step must reproduce the pair projectively.
        let k = kernel_from(&[&[1.0, 0.5], &[0.5, 1.0]], 1.0);
        let a = Histogram::uniform(2);
        let beta = DVector::from_element(2, 1.0 / 3.0f64.sqrt());
        let (alpha_next, beta_next) = sinkhorn_step(&k, &a, &a, &beta).unwrap();
        assert!(hilbert_metric(&beta_next, &beta).unwrap() < 1e-14);
        assert!((beta_next.max() - 1.0).abs() < 1e-15);
        let p = coupling_from_scalings(&alpha_next, &k, &beta_next).unwrap();
        assert_relative_eq!(p.entries()[(0, 0)], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(p.entries()[(0, 1)], 1.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn sinkhorn_step_all_ones_kernel() {
        let k = kernel_from(&[&[1.0, 1.0], &[1.0, 1.0]], 1.0);
        let a = Histogram::uniform(2);
        let beta = DVector::from_element(2, 1.0);
        let (alpha_next, beta_next) = sinkhorn_step(&k, &a, &a, &beta).unwrap();
        assert_relative_eq!(alpha_next[0], 0.25);
        assert_relative_eq!(alpha_next[1], 0.25);
        assert_relative_eq!(beta_next[0], 1.0);
        assert_relative_eq!(beta_next[1], 1.0);
    }

    #[test]
    fn sinkhorn_single_cell() {
        let k = kernel_from(&[&[0.37]], 1.0);
        let a = Histogram::uniform(1);
        let beta = DVector::from_element(1, 5.0);
        let (alpha_next, beta_next) = sinkhorn_step(&k, &a, &a, &beta).unwrap();
        let p = coupling_from_scalings(&alpha_next, &k, &beta_next).unwrap();
        assert_relative_eq!(p.entries()[(0, 0)], 1.0, max_relative = 1e-14);
    }

    #[test]
    fn sinkhorn_step_signals_underflow() {
        // Kernel entries round to zero in linear scale.
        let cost = CostMatrix::new(DMatrix::from_element(2, 2, 800.0)).unwrap();
        let k = gibbs_kernel(&cost, 1.0).unwrap();
        let a = Histogram::uniform(2);
        let beta = DVector::from_element(2, 1.0);
        assert!(matches!(
            sinkhorn_step(&k, &a, &a, &beta),
            Err(TransportError::Underflow)
        ));
        // The log-domain twin handles the same input.
        let (la, lb) = sinkhorn_step_log(&k, &a, &a, &beta.map(f64::ln)).unwrap();
        assert!(la.iter().all(|x| x.is_finite()));
        assert!(lb.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn log_and_plain_steps_agree() {
        let k = kernel_from(&[&[1.0, 0.3, 0.7], &[0.2, 1.0, 0.5], &[0.9, 0.4, 1.0]], 1.0);
        let a = Histogram::uniform(3);
        let beta = DVector::from_vec(vec![0.4, 1.3, 0.8]);
        let (alpha_p, beta_p) = sinkhorn_step(&k, &a, &a, &beta).unwrap();
        let (log_alpha, log_beta) = sinkhorn_step_log(&k, &a, &a, &beta.map(f64::ln)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(alpha_p[i], log_alpha[i].exp(), max_relative = 1e-10);
            assert_relative_eq!(beta_p[i], log_beta[i].exp(), max_relative = 1e-10);
        }
    }

    #[test]
    fn coupling_rejects_nonpositive_scalings() {
        let k = kernel_from(&[&[1.0, 0.5], &[0.5, 1.0]], 1.0);
        let zero = DVector::from_vec(vec![0.0, 1.0]);
        let one = DVector::from_element(2, 1.0);
        assert!(coupling_from_scalings(&zero, &k, &one).is_err());
    }

    #[test]
    fn coupling_scalar_product() {
        let k = kernel_from(&[&[0.5]], 1.0);
        let p = coupling_from_scalings(
            &DVector::from_element(1, 2.0),
            &k,
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(p.entries()[(0, 0)], 1.0);
    }

    #[test]
    fn solve_reaches_analytic_fixed_point() {
        let k = kernel_from(&[&[1.0, 0.5], &[0.5, 1.0]], 1.0);
        let a = Histogram::uniform(2);
        let sol = sinkhorn_solve(&k, &a, &a, 1e-12, 1000).unwrap();
        assert!(sol.converged);
        assert_relative_eq!(sol.coupling.entries()[(0, 0)], 1.0 / 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.coupling.entries()[(1, 0)], 1.0 / 6.0, epsilon = 1e-10);
        assert!(sol.marginal_error < 1e-10);
    }

    #[test]
    fn solve_uniform_kernel_gives_uniform_coupling() {
        let n = 5;
        let cost = CostMatrix::new(DMatrix::zeros(n, n)).unwrap();
        let k = gibbs_kernel(&cost, 1.0).unwrap();
        let a = Histogram::uniform(n);
        let sol = sinkhorn_solve(&k, &a, &a, 1e-12, 100).unwrap();
        for p in sol.coupling.entries().iter() {
            assert_relative_eq!(*p, 1.0 / (n * n) as f64, max_relative = 1e-12);
        }
    }

    #[test]
    fn solve_small_epsilon_matches_assignment() {
        let cost = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let k = gibbs_kernel(&cost, 1e-3).unwrap();
        let a = Histogram::uniform(2);
        let sol = sinkhorn_solve(&k, &a, &a, 1e-12, 10_000).unwrap();
        assert!(sol.converged);
        let p = sol.coupling.entries();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((p[(1, 1)] - 0.5).abs() < 1e-6);
        assert!(p[(0, 1)] < 1e-6);
        let (sigma, lp_cost) = exact_lp_assignment(&cost).unwrap();
        assert_eq!(sigma, vec![0, 1]);
        assert_relative_eq!(lp_cost, 0.0);
        assert_eq!(sol.coupling.argmax_rows(), sigma);
    }

    #[test]
    fn solve_reports_nonconvergence() {
        // Asymmetric kernel: one iteration from the uniform start cannot
        // land on the fixed ray.
        let k = kernel_from(&[&[1.0, 0.3], &[0.7, 1.0]], 1.0);
        let a = Histogram::uniform(2);
        let sol = sinkhorn_solve(&k, &a, &a, 1e-15, 1).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn hilbert_metric_identity_and_scale() {
        let b = DVector::from_vec(vec![0.3, 1.7, 0.9]);
        assert_eq!(hilbert_metric(&b, &b).unwrap(), 0.0);
        let scaled = &b * 3.0;
        assert!(hilbert_metric(&b, &scaled).unwrap().abs() < 1e-15);
    }

    #[test]
    fn hilbert_metric_log_two() {
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let bp = DVector::from_vec(vec![2.0, 1.0]);
        assert_relative_eq!(hilbert_metric(&b, &bp).unwrap(), 2.0f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn hilbert_metric_rejects_nonpositive() {
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let bp = DVector::from_vec(vec![1.0, 1.0]);
        assert!(hilbert_metric(&b, &bp).is_err());
    }

    #[test]
    fn contraction_of_uniform_kernel_is_zero() {
        let cost = CostMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let k = gibbs_kernel(&cost, 1.0).unwrap();
        let (lambda, eta) = contraction_coefficient(&k);
        assert_eq!(lambda, 0.0);
        assert_eq!(eta, 1.0);
    }

    #[test]
    fn contraction_two_by_two() {
        // Cross ratios of [[1, .5], [.5, 1]] peak at 1/(0.5*0.5) = 4.
        let k = kernel_from(&[&[1.0, 0.5], &[0.5, 1.0]], 1.0);
        let (lambda, eta) = contraction_coefficient(&k);
        assert_relative_eq!(eta, 4.0, max_relative = 1e-12);
        assert_relative_eq!(lambda, 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn lp_zero_diagonal_prefers_identity() {
        let cost = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let (sigma, total) = exact_lp_assignment(&cost).unwrap();
        assert_eq!(sigma, vec![0, 1]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn lp_zero_antidiagonal_swaps() {
        let cost = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let (sigma, total) = exact_lp_assignment(&cost).unwrap();
        assert_eq!(sigma, vec![1, 0]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn lp_all_zero_costs_break_ties_lexicographically() {
        let cost = CostMatrix::new(DMatrix::zeros(4, 4)).unwrap();
        let (sigma, total) = exact_lp_assignment(&cost).unwrap();
        assert_eq!(sigma, vec![0, 1, 2, 3]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn lp_tie_block_resolves_to_smallest_permutation() {
        // Rows 0 and 1 can take columns {0, 1} at equal cost; lexicographic
        // order demands row 0 gets column 0.
        let cost = CostMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[5.0, 5.0, 9.0, 5.0, 5.0, 9.0, 9.0, 9.0, 1.0],
        ))
        .unwrap();
        let (sigma, total) = exact_lp_assignment(&cost).unwrap();
        assert_eq!(sigma, vec![0, 1, 2]);
        assert_relative_eq!(total, 11.0 / 3.0);
    }

    /// Brute-force oracle: enumerate every permutation of `0..n`.
    fn brute_force_assignment(c: &DMatrix<f64>) -> (Vec<usize>, f64) {
        let n = c.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        permute(&mut perm, 0, &mut |p| {
            let cost: f64 = (0..n).map(|i| c[(i, p[i])]).sum();
            match &best {
                Some((_, b)) if cost >= *b => {}
                _ => best = Some((p.to_vec(), cost)),
            }
        });
        let (p, cost) = best.unwrap();
        (p, cost / n as f64)
    }

    fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            visit(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, visit);
            perm.swap(k, i);
        }
    }

    #[test]
    fn lp_matches_brute_force_on_random_matrices() {
        // Deterministic LCG so the frozen cases never move.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let c = DMatrix::from_fn(6, 6, |_, _| next());
            let cost = CostMatrix::new(c.clone()).unwrap();
            let (sigma, total) = exact_lp_assignment(&cost).unwrap();
            let (_, oracle_total) = brute_force_assignment(&c);
            assert_relative_eq!(total, oracle_total, max_relative = 1e-12);
            // Returned permutation must be valid and achieve the optimum.
            let mut seen = [false; 6];
            for &j in &sigma {
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn histogram_validation() {
        assert!(Histogram::new(DVector::from_vec(vec![0.5, 0.5])).is_ok());
        assert!(Histogram::new(DVector::from_vec(vec![0.6, 0.5])).is_err());
        assert!(Histogram::new(DVector::from_vec(vec![-0.5, 1.5])).is_err());
        assert_eq!(Histogram::uniform(4).weights()[0], 0.25);
    }

    #[test]
    fn scaling_pair_canonical_representative() {
        let alpha = DVector::from_vec(vec![2.0, 4.0]);
        let beta = DVector::from_vec(vec![0.5, 2.0]);
        let pair = ScalingPair::from_linear(&alpha, &beta).unwrap();
        assert_relative_eq!(pair.beta().max(), 1.0);
        // Joint rescale keeps the products alpha_i * beta_j.
        assert_relative_eq!(pair.alpha()[0] * pair.beta()[1], 4.0, max_relative = 1e-14);
        assert_relative_eq!(pair.alpha()[1] * pair.beta()[0], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn coupling_entropy_of_uniform() {
        let n = 3;
        let p = Coupling::new(DMatrix::from_element(n, n, 1.0 / (n * n) as f64)).unwrap();
        let expected = 2.0 * (n as f64).ln() + 1.0;
        assert_relative_eq!(p.entropy(), expected, max_relative = 1e-12);
    }
}
