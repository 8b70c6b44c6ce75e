//! The machine-readable fit report.

use serde::{Deserialize, Serialize};

use kernelblend_core::{FitResult, InnerState};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub objective: String,
    pub status: String,
    pub theta_hat: Vec<f64>,
    /// Indices reported as zero under the relative sparsity threshold.
    pub zero_weights: Vec<usize>,
    pub sparsity_threshold: f64,
    pub objective_value: f64,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub inner_state: InnerStateReport,
    pub wall_time_seconds: f64,
    pub trace_path: String,
    pub config_echo: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InnerStateReport {
    /// u | gamma | none
    pub kind: String,
    /// Posterior mean latent values (always present; used by predict).
    pub u_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<Vec<f64>>,
}

impl RunReport {
    pub fn new(
        config: &RunConfig,
        fitted: &FitResult,
        wall_time_seconds: f64,
        trace_path: String,
    ) -> Self {
        let (kind, gamma_hat) = match &fitted.inner {
            InnerState::U(_) => ("u", None),
            InnerState::Gamma(g) => ("gamma", Some(g.iter().copied().collect())),
            InnerState::None => ("none", None),
        };
        let zero_weights = fitted
            .sparsity_pattern()
            .iter()
            .enumerate()
            .filter_map(|(i, &z)| z.then_some(i))
            .collect();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            objective: config.objective.clone(),
            status: fitted.status.as_str().to_string(),
            theta_hat: fitted.theta_hat.as_slice().to_vec(),
            zero_weights,
            sparsity_threshold: kernelblend_core::solver::SPARSITY_RTOL,
            objective_value: fitted.value,
            projected_grad_norm: fitted.projected_grad_norm,
            iterations: fitted.iterations,
            inner_state: InnerStateReport {
                kind: kind.to_string(),
                u_hat: fitted.u_hat.iter().copied().collect(),
                gamma_hat,
            },
            wall_time_seconds,
            trace_path,
            config_echo: config.clone(),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read report {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("invalid report {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
