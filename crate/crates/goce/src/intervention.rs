//! Do-style interventions: clamp selection, and the loss that compares the
//! observational output distribution against the clamped, temperature-
//! sharpened one (KL plus a weighted absolute gap in label expectation).
//!
//! The paired forward passes themselves live in the model module, which owns
//! the backbone; this module defines the spec, the selection policies, and
//! the loss.

use crate::error::{GoceError, Result};
use crate::numerics::{Tape, TensorId};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ClampPolicy {
    /// |S| = max(1, round(rho * T)) indices without replacement; values
    /// i.i.d. Normal(0, sigma_clamp^2).
    RandomUniform,
    /// Caller-supplied indices and values pass through unchanged.
    Targeted {
        indices: Vec<usize>,
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub policy: ClampPolicy,
    pub rho: f64,
    pub sigma_clamp: f64,
    pub tau_cf: f64,
    pub lambda_delta: f64,
    pub n_draws: usize,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self {
            policy: ClampPolicy::RandomUniform,
            rho: 0.125,
            sigma_clamp: 1.0,
            tau_cf: 0.5,
            lambda_delta: 1.0,
            n_draws: 1,
        }
    }
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_cf > 0.0 && self.tau_cf <= 1.0) {
            return Err(GoceError::Config(format!(
                "tau_cf must lie in (0, 1], got {}",
                self.tau_cf
            )));
        }
        if self.lambda_delta < 0.0 {
            return Err(GoceError::Config(
                "lambda_delta must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One concrete clamp: which latent rows to overwrite and with what.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clamp {
    pub indices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// Draws (S, v) according to the spec's policy for a sequence of length `t`
/// with latent width `d`.
pub fn select_clamp(
    t: usize,
    d: usize,
    spec: &InterventionSpec,
    rng: &mut impl Rng,
) -> Result<Clamp> {
    match &spec.policy {
        ClampPolicy::Targeted { indices, values } => {
            for &i in indices {
                if i >= t {
                    return Err(GoceError::IndexOutOfRange { index: i, len: t });
                }
            }
            if indices.len() != values.len() || values.iter().any(|v| v.len() != d) {
                return Err(GoceError::Config(
                    "targeted clamp values must be one d-vector per index".into(),
                ));
            }
            Ok(Clamp {
                indices: indices.clone(),
                values: values.clone(),
            })
        }
        ClampPolicy::RandomUniform => {
            let count = ((spec.rho * t as f64).round() as usize).max(1).min(t);
            let mut pool: Vec<usize> = (0..t).collect();
            let mut indices = Vec::with_capacity(count);
            for _ in 0..count {
                let pick = rng.gen_range(0..pool.len());
                indices.push(pool.swap_remove(pick));
            }
            indices.sort_unstable();
            let normal = Normal::new(0.0, spec.sigma_clamp).map_err(|e| {
                GoceError::Config(format!("bad sigma_clamp {}: {e}", spec.sigma_clamp))
            })?;
            let values = indices
                .iter()
                .map(|_| (0..d).map(|_| normal.sample(rng)).collect())
                .collect();
            Ok(Clamp { indices, values })
        }
    }
}

/// KL(p_obs || p_do) + lambda_delta * |E[y]_obs - E[y]_do| on the tape, with
/// E[y] the class-index-weighted expectation. Both inputs are 1 x C
/// probability rows.
pub fn intervention_loss(
    tape: &mut Tape,
    p_obs: TensorId,
    p_do: TensorId,
    lambda_delta: f64,
) -> Result<TensorId> {
    let (_, c) = tape.shape(p_obs);
    if tape.shape(p_do) != (1, c) {
        return Err(GoceError::ShapeMismatch {
            op: "intervention_loss",
            lhs: tape.shape(p_obs),
            rhs: tape.shape(p_do),
        });
    }
    let kl = tape.kl_divergence_rows(p_obs, p_do)?;
    if lambda_delta == 0.0 {
        return Ok(kl);
    }
    let idx = tape.constant(c, 1, (0..c).map(|i| i as f64).collect());
    let e_obs = tape.matmul(p_obs, idx)?;
    let e_do = tape.matmul(p_do, idx)?;
    let diff = tape.sub(e_obs, e_do)?;
    let gap = tape.abs(diff);
    let weighted = tape.scale(gap, lambda_delta);
    tape.add(kl, weighted)
}
