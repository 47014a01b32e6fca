//! Experiment configuration: one TOML file names the system, the source and
//! target ensembles, the training hyperparameters, and the propagation grid.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use swarmflow_core::ensemble::{self, Ensemble, MixtureComponent, Shape};
use swarmflow_core::lti::LtiSystem;
use swarmflow_core::model::Activation;
use swarmflow_core::propagate::PropagationPlan;
use swarmflow_core::train::{Coupling, LossWeighting, TrainConfig};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub system: SystemSpec,
    pub source: EnsembleSpec,
    pub target: EnsembleSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub propagate: PropagateSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Config seed, overridden by SWARMFLOW_SEED when set.
    pub fn seed(&self) -> Result<u64, CliError> {
        match std::env::var("SWARMFLOW_SEED") {
            Ok(text) => text
                .trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("SWARMFLOW_SEED is not a u64: {text:?}"))),
            Err(_) => Ok(self.seed.unwrap_or(0)),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn system(&self) -> Result<LtiSystem, CliError> {
        let sys = self.system.build()?;
        sys.require_controllable()
            .map_err(|_| CliError::Config("system (A, B) is not controllable".into()))?;
        Ok(sys)
    }

    /// Source and target clouds, seeded off the experiment seed so the whole
    /// run is a function of (config, seed).
    pub fn ensembles(&self, sys: &LtiSystem) -> Result<(Ensemble, Ensemble), CliError> {
        let seed = self.seed()?;
        let source = self.source.build("source", seed.wrapping_add(101))?;
        let target = self.target.build("target", seed.wrapping_add(202))?;
        for (role, e) in [("source", &source), ("target", &target)] {
            if e.dim() != sys.dim() {
                return Err(CliError::Config(format!(
                    "{role} ensemble has dimension {} but the system has dimension {}",
                    e.dim(),
                    sys.dim()
                )));
            }
        }
        Ok((source, target))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let seed = self.seed()?;
        let cfg = self.train.to_train_config(seed);
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// Propagation plan; a CLI `--steps` flag wins over the config, an
    /// explicit grid wins over a step count.
    pub fn plan(&self, steps_override: Option<usize>) -> Result<PropagationPlan, CliError> {
        if let Some(k) = steps_override {
            return PropagationPlan::uniform(k).map_err(CliError::from);
        }
        if let Some(grid) = &self.propagate.grid {
            return PropagationPlan::from_grid(grid.clone()).map_err(CliError::from);
        }
        PropagationPlan::uniform(self.propagate.steps.unwrap_or(16)).map_err(CliError::from)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(CliError::Config(format!("{what} matrix is empty")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!("{what} matrix rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// System block: either a named preset (with its parameters as sibling
/// keys or inline, e.g. `preset = "rotation2d(1.5708)"`), or explicit
/// row-major `a` and `b` matrix literals.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub preset: Option<String>,
    pub dim: Option<usize>,
    pub omega: Option<f64>,
    pub omega1: Option<f64>,
    pub omega2: Option<f64>,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
}

impl SystemSpec {
    fn build(&self) -> Result<LtiSystem, CliError> {
        if let Some(name) = &self.preset {
            if self.a.is_some() || self.b.is_some() {
                return Err(CliError::Config(
                    "give either a preset or explicit a/b matrices, not both".into(),
                ));
            }
            return self.build_preset(name);
        }
        match (&self.a, &self.b) {
            (Some(a), Some(b)) => {
                let a = matrix_from_rows(a, "a")?;
                let b = matrix_from_rows(b, "b")?;
                LtiSystem::new(a, b).map_err(CliError::from)
            }
            _ => Err(CliError::Config(
                "system needs a preset or both a and b matrices".into(),
            )),
        }
    }

    fn build_preset(&self, name: &str) -> Result<LtiSystem, CliError> {
        let (head, args) = split_preset(name)?;
        let arg = |i: usize, key: Option<f64>, what: &str| -> Result<f64, CliError> {
            args.get(i).copied().or(key).ok_or_else(|| {
                CliError::Config(format!("preset {head:?} needs {what} (inline or as a key)"))
            })
        };
        match head.as_str() {
            "identity-channel" => {
                let d = args
                    .first()
                    .map(|&x| x as usize)
                    .or(self.dim)
                    .ok_or_else(|| CliError::Config("identity-channel needs dim".into()))?;
                if d == 0 {
                    return Err(CliError::Config("identity-channel dim must be >= 1".into()));
                }
                Ok(LtiSystem::identity_channel(d))
            }
            "double-integrator" => Ok(LtiSystem::double_integrator()),
            "rotation2d" => Ok(LtiSystem::rotation2d(arg(0, self.omega, "omega")?)),
            "rotation3d" => Ok(LtiSystem::rotation3d(
                arg(0, self.omega1, "omega1")?,
                arg(1, self.omega2, "omega2")?,
            )),
            other => Err(CliError::Config(format!(
                "unknown system preset {other:?} (have identity-channel, double-integrator, rotation2d, rotation3d)"
            ))),
        }
    }
}

/// "rotation2d(1.57)" -> ("rotation2d", [1.57]); bare names pass through.
fn split_preset(name: &str) -> Result<(String, Vec<f64>), CliError> {
    let name = name.trim();
    let Some(open) = name.find('(') else {
        return Ok((name.to_string(), Vec::new()));
    };
    let close = name
        .rfind(')')
        .ok_or_else(|| CliError::Config(format!("unbalanced parentheses in preset {name:?}")))?;
    let head = name[..open].trim().to_string();
    let inner = &name[open + 1..close];
    let args = inner
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad preset argument {s:?} in {name:?}")))
        })
        .collect::<Result<Vec<f64>, CliError>>()?;
    Ok((head, args))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// One ensemble: a seeded generator, a fixed point cloud, or a CSV file.
#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    Gaussian {
        n: usize,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Ring {
        n: usize,
        center: Vec<f64>,
        radius: f64,
        thickness: f64,
    },
    Pyramid {
        n: usize,
        base_half_width: f64,
        height: f64,
    },
    Torus {
        n: usize,
        major: f64,
        minor: f64,
    },
    Mixture {
        n: usize,
        components: Vec<MixtureSpec>,
    },
    /// A single point, optionally replicated.
    Point {
        point: Vec<f64>,
        #[serde(default = "default_point_count")]
        n: usize,
    },
    Csv { path: PathBuf },
}

fn default_point_count() -> usize {
    1
}

impl EnsembleSpec {
    fn build(&self, label: &str, seed: u64) -> Result<Ensemble, CliError> {
        match self {
            EnsembleSpec::Gaussian { n, mean, cov } => {
                let mean = DVector::from_row_slice(mean);
                let cov = matrix_from_rows(cov, "cov")?;
                ensemble::gaussian(*n, &mean, &cov, seed).map_err(CliError::from)
            }
            EnsembleSpec::Ring {
                n,
                center,
                radius,
                thickness,
            } => ensemble::shape(
                &Shape::Ring {
                    center: DVector::from_row_slice(center),
                    radius: *radius,
                    thickness: *thickness,
                },
                *n,
                seed,
            )
            .map_err(CliError::from),
            EnsembleSpec::Pyramid {
                n,
                base_half_width,
                height,
            } => ensemble::shape(
                &Shape::Pyramid {
                    base_half_width: *base_half_width,
                    height: *height,
                },
                *n,
                seed,
            )
            .map_err(CliError::from),
            EnsembleSpec::Torus { n, major, minor } => ensemble::shape(
                &Shape::Torus {
                    major: *major,
                    minor: *minor,
                },
                *n,
                seed,
            )
            .map_err(CliError::from),
            EnsembleSpec::Mixture { n, components } => {
                let comps = components
                    .iter()
                    .map(|c| {
                        Ok(MixtureComponent {
                            weight: c.weight,
                            mean: DVector::from_row_slice(&c.mean),
                            cov: matrix_from_rows(&c.cov, "component cov")?,
                        })
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                ensemble::shape(&Shape::Mixture(comps), *n, seed).map_err(CliError::from)
            }
            EnsembleSpec::Point { point, n } => {
                if point.is_empty() || *n == 0 {
                    return Err(CliError::Config("point spec needs coordinates and n >= 1".into()));
                }
                let m = DMatrix::from_fn(*n, point.len(), |_, j| point[j]);
                Ensemble::from_points(m, label).map_err(CliError::from)
            }
            EnsembleSpec::Csv { path } => {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "ensemble CSV not found: {}",
                        path.display()
                    )));
                }
                ensemble::load_csv(path).map_err(CliError::from)
            }
        }
    }
}

/// Training hyperparameters; every field defaults to the library default.
#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_betas: Option<(f64, f64)>,
    pub adam_eps: Option<f64>,
    pub window_gap_min: Option<f64>,
    pub coupling: Option<CouplingSpec>,
    pub loss_weighting: Option<WeightingSpec>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub log_interval: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingSpec {
    Independent,
    MinibatchAssignment,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingSpec {
    Plain,
    Adaptive,
}

impl TrainSection {
    fn to_train_config(&self, seed: u64) -> TrainConfig {
        let base = TrainConfig::default();
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            steps: self.steps.unwrap_or(base.steps),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            adam_betas: self.adam_betas.unwrap_or(base.adam_betas),
            adam_eps: self.adam_eps.unwrap_or(base.adam_eps),
            window_gap_min: self.window_gap_min.unwrap_or(base.window_gap_min),
            coupling: match self.coupling {
                Some(CouplingSpec::MinibatchAssignment) => Coupling::MinibatchAssignment,
                Some(CouplingSpec::Independent) => Coupling::Independent,
                None => base.coupling,
            },
            seed,
            loss_weighting: match self.loss_weighting {
                Some(WeightingSpec::Adaptive) => LossWeighting::Adaptive,
                Some(WeightingSpec::Plain) => LossWeighting::Plain,
                None => base.loss_weighting,
            },
            hidden: self.hidden.clone().unwrap_or(base.hidden),
            activation: self.activation.unwrap_or(base.activation),
            log_interval: self.log_interval.unwrap_or(base.log_interval),
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PropagateSection {
    /// Interval count for a uniform grid (default 16).
    pub steps: Option<usize>,
    /// Explicit grid; wins over `steps`.
    pub grid: Option<Vec<f64>>,
    /// Emit an SVG scatter next to each snapshot CSV.
    pub svg: bool,
    /// Record per-interval oracle residuals (needs |source| == |target|).
    pub eta: bool,
}
