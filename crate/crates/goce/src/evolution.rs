//! Derivative-free self-evolution: Gaussian mutation of the flat parameter
//! vector, fitness F = -reward + alpha * intervention-loss + beta * sparsity,
//! Metropolis acceptance, and accept/reject-driven annealing of both the
//! temperature and the mutation scale.
//!
//! The Metropolis rule can accept a worse candidate, and the working point
//! follows it exactly; a separate running-minimum checkpoint is tracked so
//! the best-ever parameters are never lost.

use crate::error::{GoceError, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GateConfig {
    pub alpha: f64,
    pub beta: f64,
    pub initial_temperature: f64,
    pub initial_mutation_scale: f64,
    pub temperature_decay: f64,
    pub mutation_decay: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            initial_temperature: 1.0,
            initial_mutation_scale: 0.01,
            temperature_decay: 0.95,
            mutation_decay: 0.95,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_temperature <= 0.0 || self.initial_mutation_scale <= 0.0 {
            return Err(GoceError::Config(
                "initial temperature and mutation scale must be positive".into(),
            ));
        }
        for (name, v) in [
            ("temperature_decay", self.temperature_decay),
            ("mutation_decay", self.mutation_decay),
        ] {
            if !(0.0 < v && v < 1.0) {
                return Err(GoceError::Config(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Fitness terms: held-out reward, intervention loss, sparsity. Combined as
/// F = -reward + alpha * cf_loss + beta * sparsity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitnessTerms {
    pub reward: f64,
    pub cf_loss: f64,
    pub sparsity: f64,
}

impl FitnessTerms {
    pub fn combine(&self, cfg: &GateConfig) -> f64 {
        -self.reward + cfg.alpha * self.cf_loss + cfg.beta * self.sparsity
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionState {
    pub theta_best: Vec<f64>,
    pub f_best: f64,
    pub temperature: f64,
    pub mutation_scale: f64,
    pub round: usize,
    /// Best fitness ever seen among accepted candidates (running minimum).
    pub theta_min: Vec<f64>,
    pub f_min: f64,
}

impl EvolutionState {
    pub fn new(theta: Vec<f64>, f: f64, cfg: &GateConfig) -> Self {
        Self {
            theta_min: theta.clone(),
            f_min: f,
            theta_best: theta,
            f_best: f,
            temperature: cfg.initial_temperature,
            mutation_scale: cfg.initial_mutation_scale,
            round: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub round: usize,
    pub fitness: f64,
    pub accepted: bool,
    pub temperature: f64,
    pub mutation_scale: f64,
    /// Snapshot kept for accepted rounds only; rejected candidates are
    /// discarded.
    pub theta: Option<Vec<f64>>,
}

/// Append-only record of every round.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointArchive {
    pub entries: Vec<ArchiveEntry>,
}

impl CheckpointArchive {
    pub fn last_accepted(&self) -> Option<&ArchiveEntry> {
        self.entries.iter().rev().find(|e| e.accepted)
    }

    pub fn running_min_accepted(&self) -> Option<&ArchiveEntry> {
        self.entries
            .iter()
            .filter(|e| e.accepted)
            .min_by(|a, b| a.fitness.partial_cmp(&b.fitness).unwrap())
    }
}

/// theta' = theta_best + epsilon * Gamma, Gamma ~ N(0, I).
pub fn mutate(theta_best: &[f64], epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    theta_best
        .iter()
        .map(|&x| {
            let g: f64 = StandardNormal.sample(rng);
            x + epsilon * g
        })
        .collect()
}

/// Metropolis rule: always accept strict improvements, otherwise accept with
/// probability exp(-dF / T). The uniform draw happens inside even for strict
/// improvements so the consumed randomness per round is constant.
pub fn accept(delta_f: f64, temperature: f64, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.gen_range(0.0..1.0);
    delta_f < 0.0 || u < (-delta_f / temperature).exp()
}

/// Applies one round's outcome: on accept, adopt the candidate and reset the
/// schedules to their initial values; on reject, decay both.
pub fn anneal_step(
    state: &mut EvolutionState,
    candidate: &[f64],
    candidate_f: f64,
    accepted: bool,
    cfg: &GateConfig,
    archive: &mut CheckpointArchive,
) {
    state.round += 1;
    if accepted {
        state.theta_best = candidate.to_vec();
        state.f_best = candidate_f;
        state.temperature = cfg.initial_temperature;
        state.mutation_scale = cfg.initial_mutation_scale;
        if candidate_f < state.f_min {
            state.f_min = candidate_f;
            state.theta_min = candidate.to_vec();
        }
    } else {
        state.temperature *= cfg.temperature_decay;
        state.mutation_scale *= cfg.mutation_decay;
    }
    archive.entries.push(ArchiveEntry {
        round: state.round,
        fitness: candidate_f,
        accepted,
        temperature: state.temperature,
        mutation_scale: state.mutation_scale,
        theta: accepted.then(|| candidate.to_vec()),
    });
}

/// Full loop over a caller-supplied deterministic fitness evaluator.
pub fn evolve(
    rounds: usize,
    initial_theta: Vec<f64>,
    mut fitness: impl FnMut(&[f64]) -> Result<f64>,
    cfg: &GateConfig,
    rng: &mut impl Rng,
) -> Result<(EvolutionState, CheckpointArchive)> {
    cfg.validate()?;
    let f0 = fitness(&initial_theta).map_err(|e| GoceError::Evaluator {
        round: 0,
        source: Box::new(e),
    })?;
    let mut state = EvolutionState::new(initial_theta, f0, cfg);
    let mut archive = CheckpointArchive::default();
    for round in 1..=rounds {
        let candidate = mutate(&state.theta_best, state.mutation_scale, rng);
        let f = fitness(&candidate).map_err(|e| GoceError::Evaluator {
            round,
            source: Box::new(e),
        })?;
        let ok = accept(f - state.f_best, state.temperature, rng);
        anneal_step(&mut state, &candidate, f, ok, cfg, &mut archive);
    }
    Ok((state, archive))
}
