//! Command-line driver: `simulate`, `reproduce`, `bench`, and `analyze`.
//!
//! `SINKHORN_MPC_THREADS` caps the worker threads used for kernel assembly;
//! results are identical for any thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sinkhorn_mpc::analysis::{
    default_delta, default_nu, epsilon_limit_probe, find_equilibrium, linear_fit, lyapunov_probe,
    stability_probe, ultimate_bound,
};
use sinkhorn_mpc::controller::simulate;
use sinkhorn_mpc_cli::config::ExperimentConfig;
use sinkhorn_mpc_cli::export::{trade_off_metrics, write_summary_json, write_trajectory_csv};
use sinkhorn_mpc_cli::{bench, plot, presets, CliError};

#[derive(Parser)]
#[command(
    name = "sinkhorn-mpc",
    version,
    about = "Closed-loop transport control for linear agent swarms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Figure {
    Fig1,
    Fig2,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AnalyzeTask {
    Equilibrium,
    Bound,
    Sweep,
    Stability,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the closed loop from a config file; writes trajectory CSV,
    /// summary JSON, and (with --plot) an SVG.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: bool,
    },
    /// Run an embedded experiment preset.
    Reproduce {
        figure: Figure,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one Sinkhorn iteration, the kernel build, and the exact
    /// assignment solve over problem sizes.
    Bench {
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equilibrium, bound, epsilon-sweep, and stability reports.
    Analyze {
        task: AnalyzeTask,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("SINKHORN_MPC_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SINKHORN_MPC_THREADS must be a positive integer");
                return ExitCode::FAILURE;
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, plot } => cmd_simulate(&config, &out, plot),
        Command::Reproduce { figure, out } => match figure {
            Figure::Fig1 => cmd_reproduce_fig1(&out),
            Figure::Fig2 => cmd_reproduce_fig2(&out),
        },
        Command::Bench { sizes, reps, out } => cmd_bench(&sizes, reps, &out),
        Command::Analyze { task, config, out } => cmd_analyze(task, &config, &out),
    }
}

/// Runs one resolved experiment into `dir` under the given stem.
fn run_experiment(
    experiment: &ExperimentConfig,
    dir: &Path,
    stem: &str,
    with_plot: bool,
) -> Result<(sinkhorn_mpc::controller::Trajectory, sinkhorn_mpc::controller::SwarmConfig), CliError>
{
    fs::create_dir_all(dir)?;
    let digest = experiment.digest()?;
    let (swarm, x0) = experiment.resolve()?;
    let trajectory = simulate(&swarm, x0, experiment.steps)?;

    fs::write(dir.join(format!("{stem}.config.toml")), experiment.to_toml()?)?;
    write_trajectory_csv(&dir.join(format!("{stem}.csv")), &trajectory, &swarm)?;
    write_summary_json(
        &dir.join(format!("{stem}.summary.json")),
        &trajectory,
        &swarm,
        &digest,
    )?;
    if with_plot {
        let plot_path = dir.join(format!("{stem}.svg"));
        match swarm.state_dim() {
            2 => plot::plot_trajectories_2d(&plot_path, &trajectory, &swarm)?,
            1 => plot::plot_trajectories_1d(
                &plot_path,
                &[(&trajectory, &format!("eps={}", swarm.epsilon()))],
                &swarm,
            )?,
            d => eprintln!("note: no plot emitted for state dimension {d}"),
        }
    }
    Ok((trajectory, swarm))
}

fn cmd_simulate(config_path: &Path, out: &Path, with_plot: bool) -> Result<(), CliError> {
    let experiment = ExperimentConfig::load(config_path)?;
    let (trajectory, _) = run_experiment(&experiment, out, "trajectory", with_plot)?;
    println!(
        "simulated {} steps, wrote {}",
        trajectory.steps(),
        out.display()
    );
    Ok(())
}

fn cmd_reproduce_fig1(out: &Path) -> Result<(), CliError> {
    let experiment = presets::fig1();
    let (trajectory, swarm) = run_experiment(&experiment, out, "fig1", true)?;
    let (_, is_permutation, mean_assigned, _) =
        sinkhorn_mpc_cli::export::final_state_stats(&trajectory, &swarm);
    println!(
        "fig1: {} steps, assignment {}, mean final distance {mean_assigned:.3e}",
        trajectory.steps(),
        if is_permutation {
            "is a permutation"
        } else {
            "did not resolve"
        },
    );
    Ok(())
}

fn cmd_reproduce_fig2(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut runs = Vec::new();
    for eps in presets::FIG2_EPSILONS {
        let experiment = presets::fig2(eps);
        let stem = format!("fig2_eps{eps}");
        let (trajectory, swarm) = run_experiment(&experiment, out, &stem, false)?;
        let metrics = trade_off_metrics(&trajectory, &swarm);
        runs.push((eps, trajectory, swarm, metrics));
    }

    // Overlaid time plot of both runs.
    let labels: Vec<String> = runs.iter().map(|(e, ..)| format!("eps={e}")).collect();
    let overlay: Vec<(&sinkhorn_mpc::controller::Trajectory, &str)> = runs
        .iter()
        .zip(&labels)
        .map(|((_, t, _, _), l)| (t, l.as_str()))
        .collect();
    plot::plot_trajectories_1d(&out.join("fig2.svg"), &overlay, &runs[0].2)?;

    let metrics = json!({
        "per_epsilon": runs.iter().map(|(eps, _, _, m)| json!({
            "epsilon": eps,
            "stationary_offset": m.stationary_offset,
            "max_overshoot": m.max_overshoot,
        })).collect::<Vec<_>>(),
    });
    fs::write(
        out.join("fig2.metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    for (eps, _, _, m) in &runs {
        println!(
            "fig2 eps={eps}: stationary offset {:.3e}, max overshoot {:.3e}",
            m.stationary_offset, m.max_overshoot
        );
    }
    Ok(())
}

fn cmd_bench(sizes: &[usize], reps: usize, out: &Path) -> Result<(), CliError> {
    let records = bench::run_bench(sizes, reps, 0xBEEF)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    bench::write_csv(out, &records)?;
    let json_path = out.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&records)?)?;
    for r in &records {
        println!(
            "N={:5} {:18} median {:.3e} s (min {:.3e} s, {} reps)",
            r.n, r.phase, r.median_seconds, r.min_seconds, r.repetitions
        );
    }
    Ok(())
}

fn cmd_analyze(task: AnalyzeTask, config_path: &Path, out: &Path) -> Result<(), CliError> {
    let experiment = ExperimentConfig::load(config_path)?;
    let digest = experiment.digest()?;
    let (swarm, x0) = experiment.resolve()?;
    let probe = &experiment.probe;
    fs::create_dir_all(out)?;

    match task {
        AnalyzeTask::Equilibrium => {
            // Fixed points live in the target hull; the hull is the robust
            // starting region regardless of where the agents begin.
            let eq = find_equilibrium(&swarm, swarm.targets(), probe.tol, probe.max_iter)?;
            let report = json!({
                "config_digest": digest,
                "epsilon": eq.epsilon,
                "converged": eq.converged,
                "iterations": eq.iterations,
                "residual": eq.residual,
                "residual_history": eq.residual_history,
                "x_e": eq.x_e.iter().map(|x| x.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "log_beta_e": eq.scalings.log_beta().iter().copied().collect::<Vec<_>>(),
            });
            fs::write(
                out.join("equilibrium.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "equilibrium: residual {:.3e} after {} iterations (converged: {})",
                eq.residual, eq.iterations, eq.converged
            );
        }
        AnalyzeTask::Bound => {
            let trajectory = simulate(&swarm, x0, experiment.steps)?;
            let r_upp = swarm.r_upp();
            let nu = probe
                .nu
                .clone()
                .unwrap_or_else(|| default_nu(swarm.agents()));
            let delta = probe.delta.unwrap_or_else(|| default_delta(r_upp));
            let report =
                ultimate_bound(swarm.agents(), r_upp, &nu, delta)?.scan_trajectory(&trajectory);
            let payload = json!({
                "config_digest": digest,
                "r_upp": report.r_upp,
                "delta": report.delta,
                "per_agent": report.per_agent.iter().map(|a| json!({
                    "rho": a.rho, "nu": a.nu, "gain_norm": a.gain_norm, "bound": a.bound,
                })).collect::<Vec<_>>(),
                "entry_time": report.entry_time,
                "violations_before_entry": report.violations.len(),
            });
            fs::write(out.join("bound.json"), serde_json::to_string_pretty(&payload)?)?;
            match report.entry_time {
                Some(tau) => println!(
                    "bound: entered at k = {tau} with {} earlier violations",
                    report.violations.len()
                ),
                None => println!("bound: not entered within the simulated horizon"),
            }
        }
        AnalyzeTask::Sweep => {
            let rows =
                epsilon_limit_probe(&swarm, &probe.sweep_epsilons, probe.tol, probe.max_iter)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.state_distance > 0.0)
                .map(|r| (1.0 / r.epsilon, r.state_distance.ln()))
                .unzip();
            let fit = linear_fit(&xs, &ys);
            let payload = json!({
                "config_digest": digest,
                "rows": rows.iter().map(|r| json!({
                    "epsilon": r.epsilon,
                    "state_distance": r.state_distance,
                    "coupling_distance": r.coupling_distance,
                    "sigma": r.sigma,
                    "residual": r.residual,
                })).collect::<Vec<_>>(),
                "log_distance_vs_inverse_epsilon_slope": fit.map(|(s, _)| s),
            });
            fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&payload)?)?;
            for r in &rows {
                println!(
                    "eps = {:8.4}: |x_e - x_d(sigma)| = {:.3e}, |P_e - P_sigma| = {:.3e}",
                    r.epsilon, r.state_distance, r.coupling_distance
                );
            }
            if let Some((slope, _)) = fit {
                println!("log-distance vs 1/eps slope: {slope:.4}");
            }
        }
        AnalyzeTask::Stability => {
            let eq = find_equilibrium(&swarm, swarm.targets(), probe.tol, probe.max_iter)?;
            if !eq.converged {
                return Err(CliError::Config(format!(
                    "equilibrium did not converge (residual {:.3e}); stability probe needs one",
                    eq.residual
                )));
            }
            let report = stability_probe(
                &swarm,
                &eq,
                probe.radius,
                probe.probe_steps,
                probe.trials,
                probe.seed,
            )?;
            // Lyapunov series along an unperturbed restart at the equilibrium.
            let cfg = swarm
                .clone()
                .with_log_alpha0(eq.scalings.log_alpha().clone())?;
            let perturbed = simulate(&cfg, eq.x_e.clone(), probe.probe_steps)?;
            let series = lyapunov_probe(&perturbed, &eq, &swarm, probe.gamma)?;
            let payload = json!({
                "config_digest": digest,
                "radius": report.radius,
                "steps": report.steps,
                "contraction_ratio": report.contraction_ratio,
                "max_terminal_distance": report.max_terminal_distance,
                "stable": report.stable,
                "trials": report.trials.iter().map(|t| json!({
                    "initial_distance": t.initial_distance,
                    "terminal_distance": t.terminal_distance,
                    "ratio": t.ratio,
                })).collect::<Vec<_>>(),
                "lyapunov": {
                    "gamma": series.gamma,
                    "nonincreasing_after": series.nonincreasing_after,
                    "head": series.values.iter().take(20).collect::<Vec<_>>(),
                },
            });
            fs::write(
                out.join("stability.json"),
                serde_json::to_string_pretty(&payload)?,
            )?;
            println!(
                "stability: verdict {}, contraction ratio {:.3e}, terminal {:.3e}",
                if report.stable {
                    "stable"
                } else {
                    "not observed stable"
                },
                report.contraction_ratio,
                report.max_terminal_distance
            );
        }
    }
    Ok(())
}
