//! Experiment configuration: a versioned TOML schema with seeded point
//! generators, resolved into a [`SwarmConfig`] plus initial states. The
//! resolved form round-trips through serialization unchanged, and its
//! SHA-256 digest is embedded in every run output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sinkhorn_mpc::controller::SwarmConfig;
use sinkhorn_mpc::linear_mpc::{mpc_gains, LinearPlant};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Dense row-major matrix pair defining one plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl PlantSpec {
    fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(CliError::Config(format!("matrix {name} must be non-empty")));
        }
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(CliError::Config(format!("matrix {name} must be rectangular")));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn build(&self) -> Result<LinearPlant, CliError> {
        let a = Self::matrix(&self.a, "a")?;
        let b = Self::matrix(&self.b, "b")?;
        Ok(LinearPlant::new(a, b)?)
    }
}

/// Point sets are either listed explicitly or produced by a generator fully
/// determined by its parameters (and seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointSpec {
    Explicit {
        points: Vec<Vec<f64>>,
    },
    /// Uniform samples in the box `[low, high]`, componentwise.
    Random {
        count: usize,
        seed: u64,
        low: Vec<f64>,
        high: Vec<f64>,
    },
    /// `nx * ny` grid in the plane.
    Grid {
        nx: usize,
        ny: usize,
        spacing: f64,
        origin: Vec<f64>,
    },
    /// Equally spaced points on a circle (2-D).
    Circle {
        count: usize,
        radius: f64,
        center: Vec<f64>,
    },
}

impl PointSpec {
    pub fn generate(&self) -> Result<Vec<DVector<f64>>, CliError> {
        match self {
            PointSpec::Explicit { points } => {
                if points.is_empty() {
                    return Err(CliError::Config("explicit point list is empty".into()));
                }
                let dim = points[0].len();
                if dim == 0 || points.iter().any(|p| p.len() != dim) {
                    return Err(CliError::Config(
                        "explicit points must share one nonzero dimension".into(),
                    ));
                }
                Ok(points
                    .iter()
                    .map(|p| DVector::from_vec(p.clone()))
                    .collect())
            }
            PointSpec::Random {
                count,
                seed,
                low,
                high,
            } => {
                if *count == 0 {
                    return Err(CliError::Config("random generator needs count >= 1".into()));
                }
                if low.len() != high.len() || low.is_empty() {
                    return Err(CliError::Config(
                        "random generator needs matching non-empty low/high".into(),
                    ));
                }
                if low.iter().zip(high).any(|(l, h)| l >= h) {
                    return Err(CliError::Config("random box needs low < high".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok((0..*count)
                    .map(|_| {
                        DVector::from_iterator(
                            low.len(),
                            low.iter().zip(high).map(|(l, h)| rng.random_range(*l..*h)),
                        )
                    })
                    .collect())
            }
            PointSpec::Grid {
                nx,
                ny,
                spacing,
                origin,
            } => {
                if *nx == 0 || *ny == 0 || *spacing <= 0.0 || origin.len() != 2 {
                    return Err(CliError::Config(
                        "grid generator needs nx, ny >= 1, spacing > 0, 2-D origin".into(),
                    ));
                }
                let mut out = Vec::with_capacity(nx * ny);
                for iy in 0..*ny {
                    for ix in 0..*nx {
                        out.push(DVector::from_vec(vec![
                            origin[0] + *spacing * ix as f64,
                            origin[1] + *spacing * iy as f64,
                        ]));
                    }
                }
                Ok(out)
            }
            PointSpec::Circle {
                count,
                radius,
                center,
            } => {
                if *count == 0 || *radius <= 0.0 || center.len() != 2 {
                    return Err(CliError::Config(
                        "circle generator needs count >= 1, radius > 0, 2-D center".into(),
                    ));
                }
                Ok((0..*count)
                    .map(|i| {
                        let theta = 2.0 * std::f64::consts::PI * i as f64 / *count as f64;
                        DVector::from_vec(vec![
                            center[0] + radius * theta.cos(),
                            center[1] + radius * theta.sin(),
                        ])
                    })
                    .collect())
            }
        }
    }
}

/// Parameters of the `analyze` subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Per-agent stability margins; default `(1 - rho_i)/2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<f64>>,
    /// Bound slack; default `1e-2 * r_upp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Lyapunov mixing weight; default balances the two terms at start.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub sweep_epsilons: Vec<f64>,
    pub radius: f64,
    pub trials: usize,
    pub probe_steps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            nu: None,
            delta: None,
            gamma: None,
            sweep_epsilons: vec![1.0, 0.5, 0.2, 0.1, 0.05],
            radius: 1e-3,
            trials: 5,
            probe_steps: 200,
            seed: 17,
            tol: 1e-11,
            max_iter: 500,
        }
    }
}

fn default_iters() -> usize {
    1
}

/// Complete description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; must equal [`CONFIG_VERSION`].
    pub version: u32,
    pub epsilon: f64,
    pub horizon: usize,
    pub steps: usize,
    #[serde(default = "default_iters")]
    pub sinkhorn_iters_per_tick: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<Vec<f64>>,
    /// Shared plant; exactly one of `plant` / `plants` must be present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plants: Option<Vec<PlantSpec>>,
    pub targets: PointSpec,
    pub initial: PointSpec,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("schema: {e}")))?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialize: {e}")))
    }

    /// SHA-256 hex digest of the canonical serialized form.
    pub fn digest(&self) -> Result<String, CliError> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Builds the swarm and the initial states.
    pub fn resolve(&self) -> Result<(SwarmConfig, Vec<DVector<f64>>), CliError> {
        let targets = self.targets.generate()?;
        let x0 = self.initial.generate()?;
        if targets.len() != x0.len() {
            return Err(CliError::Config(format!(
                "{} targets vs {} initial states; counts must match",
                targets.len(),
                x0.len()
            )));
        }

        let agents = match (&self.plant, &self.plants) {
            (Some(shared), None) => {
                let gains = mpc_gains(&shared.build()?, self.horizon)?;
                vec![gains; targets.len()]
            }
            (None, Some(list)) => {
                if list.len() != targets.len() {
                    return Err(CliError::Config(format!(
                        "{} plants vs {} targets; counts must match",
                        list.len(),
                        targets.len()
                    )));
                }
                list.iter()
                    .map(|spec| Ok(mpc_gains(&spec.build()?, self.horizon)?))
                    .collect::<Result<Vec<_>, CliError>>()?
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either a shared [plant] or per-agent [[plants]], not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "missing plant definition: add [plant] or [[plants]]".into(),
                ))
            }
        };

        let mut swarm = SwarmConfig::new(agents, targets, self.epsilon)?
            .with_sinkhorn_iters(self.sinkhorn_iters_per_tick)?;
        if let Some(alpha0) = &self.alpha0 {
            swarm = swarm.with_alpha0(DVector::from_vec(alpha0.clone()))?;
        }
        Ok((swarm, x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
epsilon = 0.5
horizon = 10
steps = 50

[plant]
a = [[1.0]]
b = [[0.1]]

[targets]
kind = "explicit"
points = [[0.0], [1.0]]

[initial]
kind = "random"
count = 2
seed = 3
low = [-2.0]
high = [2.0]
"#;

    #[test]
    fn parse_resolve_roundtrip_is_identity() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let serialized = config.to_toml().unwrap();
        let reparsed = ExperimentConfig::from_toml(&serialized).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(config.digest().unwrap(), reparsed.digest().unwrap());
    }

    #[test]
    fn version_field_is_mandatory() {
        let text = MINIMAL.replace("version = 1", "");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("version = 1", "version = 2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{MINIMAL}\nbogus_field = 3\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let spec = PointSpec::Random {
            count: 5,
            seed: 11,
            low: vec![-1.0, 0.0],
            high: vec![1.0, 2.0],
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p[0] >= -1.0 && p[0] < 1.0);
            assert!(p[1] >= 0.0 && p[1] < 2.0);
        }
    }

    #[test]
    fn grid_and_circle_generators() {
        let grid = PointSpec::Grid {
            nx: 2,
            ny: 3,
            spacing: 0.5,
            origin: vec![1.0, -1.0],
        };
        let pts = grid.generate().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], DVector::from_vec(vec![1.0, -1.0]));
        assert_eq!(pts[5], DVector::from_vec(vec![1.5, 0.0]));

        let circle = PointSpec::Circle {
            count: 4,
            radius: 2.0,
            center: vec![0.0, 0.0],
        };
        let pts = circle.generate().unwrap();
        assert_eq!(pts.len(), 4);
        assert!((pts[0][0] - 2.0).abs() < 1e-12);
        assert!((pts[1][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn resolve_builds_matching_swarm() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let (swarm, x0) = config.resolve().unwrap();
        assert_eq!(swarm.n_agents(), 2);
        assert_eq!(x0.len(), 2);
        assert_eq!(swarm.horizon(), 10);
        assert_eq!(swarm.epsilon(), 0.5);
    }

    #[test]
    fn resolve_rejects_plant_ambiguity() {
        let both = format!(
            "{MINIMAL}\n[[plants]]\na = [[1.0]]\nb = [[0.1]]\n\n[[plants]]\na = [[1.0]]\nb = [[0.1]]\n"
        );
        let config = ExperimentConfig::from_toml(&both).unwrap();
        assert!(config.resolve().is_err());
    }
}
