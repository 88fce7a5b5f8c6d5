//! Wall-clock scaling harness: per-size timings of one Sinkhorn iteration
//! (matvec pair plus divisions), the Gibbs kernel build, and the exact
//! assignment solve. Only scaling ratios are meaningful; absolute times are
//! hardware-bound and never asserted.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sinkhorn_mpc::transport::{
    exact_lp_assignment, gibbs_kernel, sinkhorn_step, CostMatrix, Histogram,
};

use crate::CliError;

pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub phase: String,
    pub min_seconds: f64,
    pub median_seconds: f64,
    pub repetitions: usize,
}

fn summarize(n: usize, phase: &str, mut times: Vec<f64>) -> BenchRecord {
    times.sort_by(f64::total_cmp);
    BenchRecord {
        n,
        phase: phase.to_string(),
        min_seconds: times[0],
        median_seconds: times[times.len() / 2],
        repetitions: times.len(),
    }
}

/// Times the three phases on random instances of each size. Two warmup
/// evaluations precede each measurement loop.
pub fn run_bench(sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRecord>, CliError> {
    if sizes.len() < 2 {
        return Err(CliError::Config(
            "bench needs at least two sizes to compare scaling".into(),
        ));
    }
    if reps < MIN_REPETITIONS {
        return Err(CliError::Config(format!(
            "bench needs at least {MIN_REPETITIONS} repetitions, got {reps}"
        )));
    }
    if sizes.contains(&0) {
        return Err(CliError::Config("bench sizes must be positive".into()));
    }

    let mut records = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let cost = CostMatrix::new(c).unwrap();

        // Kernel build.
        let mut kernel = gibbs_kernel(&cost, 1.0)?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..2 {
            kernel = gibbs_kernel(&cost, 1.0)?;
        }
        for _ in 0..reps {
            let t0 = Instant::now();
            kernel = gibbs_kernel(&cost, 1.0)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        records.push(summarize(n, "kernel-build", times));

        // One Sinkhorn iteration.
        let mass = Histogram::uniform(n);
        let beta = DVector::from_element(n, 1.0);
        for _ in 0..2 {
            let _ = sinkhorn_step(&kernel, &mass, &mass, &beta)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let pair = sinkhorn_step(&kernel, &mass, &mass, &beta)?;
            times.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(pair);
        }
        records.push(summarize(n, "sinkhorn-iteration", times));

        // Exact assignment.
        for _ in 0..2.min(reps) {
            let _ = exact_lp_assignment(&cost)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let sol = exact_lp_assignment(&cost)?;
            times.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(sol);
        }
        records.push(summarize(n, "lp-assignment", times));
    }
    Ok(records)
}

pub fn median_of(records: &[BenchRecord], n: usize, phase: &str) -> Option<f64> {
    records
        .iter()
        .find(|r| r.n == n && r.phase == phase)
        .map(|r| r.median_seconds)
}

pub fn write_csv(path: &std::path::Path, records: &[BenchRecord]) -> Result<(), CliError> {
    let mut out = String::from("n,phase,min_seconds,median_seconds,repetitions\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n,
            r.phase,
            crate::export::fmt_f64(r.min_seconds),
            crate::export::fmt_f64(r.median_seconds),
            r.repetitions
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
