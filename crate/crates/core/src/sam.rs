//! Sharpness-aware two-step update.
//!
//! One normalised ascent step `theta_a = theta + rho * g / |g|` followed by a
//! plain gradient step at the perturbed point. The adaptive variant rescales
//! the ascent direction elementwise by `|theta|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;

pub const DEFAULT_RHO: f64 = 0.05;
pub const DEFAULT_ADAPTIVE_RHO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    /// Learning rate of the descent step.
    pub eta: f64,
    pub adaptive: bool,
    pub grad_eps: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            eta: 0.1,
            adaptive: false,
            grad_eps: 1e-12,
        }
    }
}

impl SamConfig {
    pub fn adaptive(eta: f64) -> Self {
        Self {
            rho: DEFAULT_ADAPTIVE_RHO,
            eta,
            adaptive: true,
            ..Self::default()
        }
    }

    /// `rho = 0` is accepted and reduces the update to plain gradient descent.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} must be positive, got {v}")));
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad("sam.rho", self.rho);
        }
        if !(self.eta > 0.0) {
            return bad("optimizer.lr", self.eta);
        }
        if !(self.grad_eps > 0.0) {
            return bad("sam.grad_eps", self.grad_eps);
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Perturbation `delta` of the ascent step. Returns zeros when the (scaled)
/// gradient norm falls below `grad_eps`.
pub fn ascent_perturbation(grad: &[f64], params: &[f64], config: &SamConfig) -> Vec<f64> {
    if config.adaptive {
        let scale: Vec<f64> = params.iter().map(|p| p.abs().max(config.grad_eps)).collect();
        let scaled: Vec<f64> = grad.iter().zip(&scale).map(|(g, s)| g * s).collect();
        let n = norm(&scaled);
        if n < config.grad_eps {
            return vec![0.0; grad.len()];
        }
        scaled
            .iter()
            .zip(&scale)
            .map(|(sg, s)| config.rho * s * sg / n)
            .collect()
    } else {
        let n = norm(grad);
        if n < config.grad_eps {
            return vec![0.0; grad.len()];
        }
        grad.iter().map(|g| config.rho * g / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub params: Vec<f64>,
    /// Objective value at the starting point.
    pub loss: f64,
    pub perturbation: Vec<f64>,
}

fn checked_eval(objective: &dyn Objective, params: &[f64], step: usize, at: &str) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = objective.value_and_grad(params).map_err(|e| Error::Optimizer {
        step,
        reason: format!("{at}: {e}"),
    })?;
    if !value.is_finite() {
        return Err(Error::Optimizer {
            step,
            reason: format!("non-finite loss {value} {at}"),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer {
            step,
            reason: format!("non-finite gradient {at}"),
        });
    }
    Ok((value, grad))
}

/// One sharpness-aware update; evaluates the gradient exactly twice.
pub fn sam_step(
    params: &[f64],
    objective: &dyn Objective,
    config: &SamConfig,
    step: usize,
) -> Result<StepOutcome> {
    let (loss, g) = checked_eval(objective, params, step, "at the current parameters")?;
    let delta = ascent_perturbation(&g, params, config);
    let perturbed: Vec<f64> = if delta.iter().all(|d| *d == 0.0) {
        params.to_vec()
    } else {
        params.iter().zip(&delta).map(|(p, d)| p + d).collect()
    };
    let (_, g_perturbed) = checked_eval(objective, &perturbed, step, "at the perturbed parameters")?;
    let updated = params
        .iter()
        .zip(&g_perturbed)
        .map(|(p, g)| p - config.eta * g)
        .collect();
    Ok(StepOutcome {
        params: updated,
        loss,
        perturbation: delta,
    })
}

/// Plain gradient step with a single gradient evaluation.
pub fn sgd_step(params: &[f64], objective: &dyn Objective, eta: f64, step: usize) -> Result<StepOutcome> {
    let (loss, g) = checked_eval(objective, params, step, "at the current parameters")?;
    let updated = params.iter().zip(&g).map(|(p, g)| p - eta * g).collect();
    Ok(StepOutcome {
        params: updated,
        loss,
        perturbation: vec![0.0; params.len()],
    })
}
