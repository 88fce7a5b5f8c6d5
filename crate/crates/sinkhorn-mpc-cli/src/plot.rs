//! Static SVG plots: agent trajectories with target markers. No display
//! server or plotting dependency; the files are written directly with
//! deterministic formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sinkhorn_mpc::controller::{SwarmConfig, Trajectory};

use crate::CliError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 720.0;
const MARGIN: f64 = 40.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, width: f64, height: f64) -> Self {
        let pad = |lo: f64, hi: f64| {
            let spread = (hi - lo).max(1e-9);
            (lo - 0.05 * spread, hi + 0.05 * spread)
        };
        let (x_min, x_max) = pad(x_min, x_max);
        let (y_min, y_max) = pad(y_min, y_max);
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
            width,
            height,
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x_min) / (self.x_max - self.x_min) * (self.width - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        // SVG y grows downward.
        self.height - MARGIN - (v - self.y_min) / (self.y_max - self.y_min) * (self.height - 2.0 * MARGIN)
    }
}

fn agent_color(i: usize, n: usize) -> String {
    // Evenly spaced hues, fixed saturation/lightness.
    let hue = 360.0 * i as f64 / n.max(1) as f64;
    format!("hsl({hue:.1},70%,45%)")
}

/// Planar trajectories: one polyline per agent, initial states as filled
/// circles, targets as open black circles.
pub fn plot_trajectories_2d(
    path: &Path,
    trajectory: &Trajectory,
    config: &SwarmConfig,
) -> Result<(), CliError> {
    assert_eq!(config.state_dim(), 2, "planar plot needs 2-D states");
    let records = trajectory.records();
    let n = config.n_agents();

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for rec in records {
        for x in &rec.x {
            x_min = x_min.min(x[0]);
            x_max = x_max.max(x[0]);
            y_min = y_min.min(x[1]);
            y_max = y_max.max(x[1]);
        }
    }
    for t in config.targets() {
        x_min = x_min.min(t[0]);
        x_max = x_max.max(t[0]);
        y_min = y_min.min(t[1]);
        y_max = y_max.max(t[1]);
    }
    let frame = Frame::new(x_min, x_max, y_min, y_max, WIDTH, HEIGHT);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for i in 0..n {
        let mut points = String::new();
        for rec in records {
            let _ = write!(points, "{:.2},{:.2} ", frame.x(rec.x[i][0]), frame.y(rec.x[i][1]));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="0.7" opacity="0.55"/>"#,
            points.trim_end(),
            agent_color(i, n)
        );
    }
    for (i, rec0) in records[0].x.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.4" fill="{}"/>"#,
            frame.x(rec0[0]),
            frame.y(rec0[1]),
            agent_color(i, n)
        );
    }
    for t in config.targets() {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.2" fill="none" stroke="black" stroke-width="1.2"/>"#,
            frame.x(t[0]),
            frame.y(t[1])
        );
    }
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg)?;
    Ok(())
}

/// Scalar trajectories against time, one curve per agent per run, overlaid
/// for several runs (solid, dashed, ...); targets as open circles on the
/// right edge.
pub fn plot_trajectories_1d(
    path: &Path,
    runs: &[(&Trajectory, &str)],
    config: &SwarmConfig,
) -> Result<(), CliError> {
    assert_eq!(config.state_dim(), 1, "time plot needs scalar states");
    let n = config.n_agents();
    let steps = runs
        .iter()
        .map(|(t, _)| t.records().len())
        .max()
        .unwrap_or(1) as f64;

    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for (traj, _) in runs {
        for rec in traj.records() {
            for x in &rec.x {
                v_min = v_min.min(x[0]);
                v_max = v_max.max(x[0]);
            }
        }
    }
    for t in config.targets() {
        v_min = v_min.min(t[0]);
        v_max = v_max.max(t[0]);
    }
    let frame = Frame::new(0.0, steps - 1.0, v_min, v_max, WIDTH, HEIGHT);

    let dashes = ["none", "6,4", "2,3", "8,2,2,2"];
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    for (run_idx, (traj, label)) in runs.iter().enumerate() {
        let dash = dashes[run_idx % dashes.len()];
        for i in 0..n {
            let mut points = String::new();
            for rec in traj.records() {
                let _ = write!(
                    points,
                    "{:.2},{:.2} ",
                    frame.x(rec.k as f64),
                    frame.y(rec.x[i][0])
                );
            }
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.0" stroke-dasharray="{}" opacity="0.8"/>"#,
                points.trim_end(),
                agent_color(i, n),
                dash
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" font-family="sans-serif">{} ({})</text>"#,
            MARGIN + 4.0,
            MARGIN + 16.0 * (run_idx as f64 + 1.0),
            label,
            if dash == "none" { "solid" } else { "dashed" }
        );
    }
    for t in config.targets() {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.2" fill="none" stroke="black" stroke-width="1.2"/>"#,
            frame.x(steps - 1.0),
            frame.y(t[0])
        );
    }
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use sinkhorn_mpc::controller::simulate;
    use sinkhorn_mpc::linear_mpc::LinearPlant;

    #[test]
    fn svg_files_are_written_and_deterministic() {
        let plant = LinearPlant::scalar(1.0, 0.1).unwrap();
        let targets = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)];
        let config = SwarmConfig::homogeneous(&plant, 5, targets, 0.5).unwrap();
        let x0 = vec![DVector::from_element(1, 2.0), DVector::from_element(1, -1.0)];
        let traj = simulate(&config, x0, 5).unwrap();

        let dir = std::env::temp_dir().join("smpc_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.svg");
        let p2 = dir.join("b.svg");
        plot_trajectories_1d(&p1, &[(&traj, "eps=0.5")], &config).unwrap();
        plot_trajectories_1d(&p2, &[(&traj, "eps=0.5")], &config).unwrap();
        let s1 = std::fs::read(&p1).unwrap();
        let s2 = std::fs::read(&p2).unwrap();
        assert!(!s1.is_empty());
        assert_eq!(s1, s2);
    }
}
