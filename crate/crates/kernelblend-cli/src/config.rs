//! The run-config JSON schema. Unknown keys are rejected everywhere so a
//! typo'd option can never be silently ignored.

use serde::{Deserialize, Serialize};

use kernelblend_core::{LikelihoodModel, ObjectiveKind, SolverConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of mkl | map | gau | mapgau | rr | vb.
    pub objective: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub likelihood: LikelihoodConfig,
    pub kernels: Vec<KernelConfig>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub normalize_kernels: bool,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "SolverOverrides::is_empty")]
    pub solver: SolverOverrides,
    /// Evaluation weights for `taxonomy-check` (skips the fit when given).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "OracleConfig::is_default")]
    pub oracle: OracleConfig,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    /// gaussian | laplace | logistic (hinge and epsilon-insensitive are
    /// recognised only to produce a precise rejection).
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// linear | squared-exponential | precomputed.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal_variance: Option<f64>,
    /// Dense CSV matrix for the precomputed kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training CSV with header `x1,..,xd,y`.
    pub train: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_newton_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_t0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_mult: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_t_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

impl SolverOverrides {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self) -> SolverConfig {
        let mut c = SolverConfig::default();
        if let Some(v) = self.outer_tol {
            c.outer_tol = v;
        }
        if let Some(v) = self.max_outer {
            c.max_outer = v;
        }
        if let Some(v) = self.inner_newton_steps {
            c.inner_newton_steps = v;
        }
        if let Some(v) = self.barrier_t0 {
            c.barrier_t0 = v;
        }
        if let Some(v) = self.barrier_mult {
            c.barrier_mult = v;
        }
        if let Some(v) = self.barrier_every {
            c.barrier_every = v;
        }
        if let Some(v) = self.barrier_t_max {
            c.barrier_t_max = v;
        }
        if let Some(v) = self.jitter {
            c.jitter = v;
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub theta_star: Vec<f64>,
    #[serde(default = "default_x_dim")]
    pub x_dim: usize,
    #[serde(default = "default_x_low")]
    pub x_low: f64,
    #[serde(default = "default_x_high")]
    pub x_high: f64,
}

fn default_x_dim() -> usize {
    1
}
fn default_x_low() -> f64 {
    -2.0
}
fn default_x_high() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_gh_nodes")]
    pub gh_nodes: usize,
}

fn default_mc_samples() -> usize {
    300_000
}
fn default_gh_nodes() -> usize {
    300
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { mc_samples: default_mc_samples(), gh_nodes: default_gh_nodes() }
    }
}

impl OracleConfig {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.likelihood()?;
        self.objective_kind()?;
        if self.kernels.is_empty() {
            return Err(CliError::config("at least one kernel is required"));
        }
        for k in &self.kernels {
            match k.kind.as_str() {
                "linear" => {}
                "squared-exponential" => {
                    if k.lengthscale.is_none() || k.signal_variance.is_none() {
                        return Err(CliError::config(
                            "squared-exponential kernels need lengthscale and signal_variance",
                        ));
                    }
                }
                "precomputed" => {
                    if k.path.is_none() {
                        return Err(CliError::config("precomputed kernels need a path"));
                    }
                }
                other => {
                    return Err(CliError::config(format!("unknown kernel kind '{other}'")));
                }
            }
        }
        if let Some(theta) = &self.theta {
            if theta.len() != self.kernels.len() {
                return Err(CliError::config(format!(
                    "theta has {} entries but there are {} kernels",
                    theta.len(),
                    self.kernels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn likelihood(&self) -> Result<LikelihoodModel, CliError> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| {
                CliError::config(format!("likelihood '{}' needs {what}", self.likelihood.name))
            })
        };
        match self.likelihood.name.as_str() {
            "gaussian" => LikelihoodModel::gaussian(need(self.likelihood.sigma2, "sigma2")?)
                .map_err(CliError::from_core_config),
            "laplace" => LikelihoodModel::laplace(need(self.likelihood.tau, "tau")?)
                .map_err(CliError::from_core_config),
            "logistic" => LikelihoodModel::logistic(need(self.likelihood.tau, "tau")?)
                .map_err(CliError::from_core_config),
            "hinge" => Err(CliError::config(
                "the hinge loss has no likelihood counterpart in the loss/likelihood \
                 correspondence (no normalisable density induces it); likelihood-based \
                 objectives cannot use it",
            )),
            "epsilon-insensitive" => Err(CliError::config(
                "the epsilon-insensitive loss has no likelihood counterpart in the \
                 loss/likelihood correspondence (no normalisable density induces it); \
                 likelihood-based objectives cannot use it",
            )),
            other => Err(CliError::config(format!("unknown likelihood '{other}'"))),
        }
    }

    pub fn objective_kind(&self) -> Result<ObjectiveKind, CliError> {
        let p_lambda = || -> Result<(f64, f64), CliError> {
            match (self.p, self.lambda) {
                (Some(p), Some(lambda)) => Ok((p, lambda)),
                _ => Err(CliError::config(format!(
                    "objective '{}' needs both p and lambda",
                    self.objective
                ))),
            }
        };
        match self.objective.as_str() {
            "mkl" => {
                let (p, lambda) = p_lambda()?;
                Ok(ObjectiveKind::Mkl { p, lambda })
            }
            "rr" => {
                let (p, lambda) = p_lambda()?;
                Ok(ObjectiveKind::Rr { p, lambda })
            }
            "map" => Ok(ObjectiveKind::Map),
            "gau" => Ok(ObjectiveKind::Gau),
            "mapgau" => Ok(ObjectiveKind::MapGau),
            "vb" => Ok(ObjectiveKind::Vb),
            other => Err(CliError::config(format!("unknown objective '{other}'"))),
        }
    }

    pub fn has_precomputed_kernels(&self) -> bool {
        self.kernels.iter().any(|k| k.kind == "precomputed")
    }
}
