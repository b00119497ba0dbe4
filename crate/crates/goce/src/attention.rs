//! Causal-masked multi-head attention with shared K/V, plus the attention
//! loss terms: temperature-sharpened KL consistency and the expected-L0
//! penalty on row-gated Q/K projections.

use crate::error::{GoceError, Result};
use crate::graph::HardConcreteConfig;
use crate::numerics::{Tape, TensorId};
use serde::{Deserialize, Serialize};

/// Attention parameter handles on a tape. K and V are projected once
/// (d -> d_k) and shared by every head; only Q is per-head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub w_q: TensorId,           // d x (n_heads * d_k)
    pub w_k: TensorId,           // d x d_k
    pub w_v: TensorId,           // d x d_k
    pub w_o: TensorId,           // (n_heads * d_k) x d
    pub gate_logits_q: TensorId, // d x 1, one hard-concrete gate per W_Q row
    pub gate_logits_k: TensorId, // d x 1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CsailLossConfig {
    pub lambda_l0: f64,
    pub tau_cf: f64,
    pub lambda_kl: f64,
}

impl Default for CsailLossConfig {
    fn default() -> Self {
        Self {
            lambda_l0: 1e-4,
            tau_cf: 0.5,
            lambda_kl: 0.01,
        }
    }
}

impl CsailLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_cf > 0.0 && self.tau_cf <= 1.0) {
            return Err(GoceError::Config(format!(
                "tau_cf must lie in (0, 1], got {}",
                self.tau_cf
            )));
        }
        if self.lambda_l0 < 0.0 || self.lambda_kl < 0.0 {
            return Err(GoceError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Head mask over token pairs; identical across heads. `allow[i][j]` means
/// query i may attend to key j. Self-loops are always on so no softmax row
/// is empty.
#[derive(Debug, Clone)]
pub struct HeadMask {
    pub t: usize,
    pub n_heads: usize,
    pub allow: Vec<Vec<bool>>,
}

pub fn build_head_mask(adjacency: &[Vec<bool>], n_heads: usize) -> HeadMask {
    let t = adjacency.len();
    let mut allow = vec![vec![false; t]; t];
    for i in 0..t {
        for j in 0..t {
            allow[i][j] = i == j || adjacency[i][j];
        }
    }
    HeadMask { t, n_heads, allow }
}

impl HeadMask {
    fn additive(&self, tape: &mut Tape) -> TensorId {
        let mut data = vec![0.0; self.t * self.t];
        for i in 0..self.t {
            for j in 0..self.t {
                if !self.allow[i][j] {
                    data[i * self.t + j] = f64::NEG_INFINITY;
                }
            }
        }
        tape.constant(self.t, self.t, data)
    }
}

/// Output of one attention block: the projected result plus the per-head
/// masked, 1/sqrt(d_k)-scaled score tensors (inputs to the KL term) and the
/// per-head attention distributions (for dumps).
pub struct AttentionOut {
    pub z: TensorId,
    pub head_scores: Vec<TensorId>,
    pub head_probs: Vec<TensorId>,
}

/// Deterministic hard-concrete transform applied elementwise: stretched,
/// clamped sigmoid of logit / temperature.
pub fn hc_det_gates(tape: &mut Tape, logits: TensorId, cfg: &HardConcreteConfig) -> TensorId {
    let scaled = tape.scale(logits, 1.0 / cfg.temperature);
    let s = tape.sigmoid(scaled);
    let span = cfg.zeta_stretch - cfg.gamma_stretch;
    let stretched = tape.scale(s, span);
    let stretched = tape.add_const(stretched, cfg.gamma_stretch);
    tape.clamp01_st(stretched)
}

/// Multi-head attention over causally refined latents. `temp` divides the
/// scores (1.0 for the observational pass, tau_cf for the interventional
/// one). Masked pairs get exactly zero attention weight.
#[allow(clippy::too_many_arguments)]
pub fn csail_attention(
    tape: &mut Tape,
    h: TensorId,
    ids: AttentionIds,
    n_heads: usize,
    d_k: usize,
    mask: &HeadMask,
    hc: &HardConcreteConfig,
    temp: f64,
) -> Result<AttentionOut> {
    let (t, _d) = tape.shape(h);
    if mask.t != t {
        return Err(GoceError::ShapeMismatch {
            op: "csail_attention",
            lhs: (t, t),
            rhs: (mask.t, mask.t),
        });
    }
    let gq = hc_det_gates(tape, ids.gate_logits_q, hc);
    let gk = hc_det_gates(tape, ids.gate_logits_k, hc);
    let w_q = tape.mul_col_broadcast(ids.w_q, gq)?;
    let w_k = tape.mul_col_broadcast(ids.w_k, gk)?;
    let q = tape.matmul(h, w_q)?;
    let k = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, ids.w_v)?;
    let k_t = tape.transpose(k);
    let mask_add = mask.additive(tape);
    let inv_scale = 1.0 / ((d_k as f64).sqrt());
    let mut head_outs = Vec::with_capacity(n_heads);
    let mut head_scores = Vec::with_capacity(n_heads);
    let mut head_probs = Vec::with_capacity(n_heads);
    for hix in 0..n_heads {
        let q_h = tape.cols(q, hix * d_k, d_k)?;
        let raw = tape.matmul(q_h, k_t)?;
        let scaled = tape.scale(raw, inv_scale);
        let masked = tape.add(scaled, mask_add)?;
        head_scores.push(masked);
        let final_scores = if temp == 1.0 {
            masked
        } else {
            tape.scale(masked, 1.0 / temp)
        };
        let probs = tape.softmax_rows(final_scores)?;
        head_probs.push(probs);
        let z_h = tape.matmul(probs, v)?;
        head_outs.push(z_h);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let z = tape.matmul(concat, ids.w_o)?;
    Ok(AttentionOut {
        z,
        head_scores,
        head_probs,
    })
}

/// KL from the tau = 1 attention distribution to the tau_cf-sharpened one,
/// averaged over heads (each head term is already a mean over query rows).
pub fn kl_consistency_loss(
    tape: &mut Tape,
    head_scores: &[TensorId],
    tau_cf: f64,
) -> Result<TensorId> {
    if !(tau_cf > 0.0 && tau_cf <= 1.0) {
        return Err(GoceError::Config(format!(
            "tau_cf must lie in (0, 1], got {tau_cf}"
        )));
    }
    let mut total = tape.constant_scalar(0.0);
    for &scores in head_scores {
        let p = tape.softmax_rows(scores)?;
        let sharp = tape.scale(scores, 1.0 / tau_cf);
        let q = tape.softmax_rows(sharp)?;
        let kl = tape.kl_divergence_rows(p, q)?;
        total = tape.add(total, kl)?;
    }
    Ok(tape.scale(total, 1.0 / head_scores.len() as f64))
}

/// Sum over gate logits of the expected open probability,
/// sigmoid(logit - temperature * ln(-gamma/zeta)).
pub fn expected_open_sum(
    tape: &mut Tape,
    gate_logits: TensorId,
    cfg: &HardConcreteConfig,
) -> TensorId {
    let shift = -cfg.temperature * (-cfg.gamma_stretch / cfg.zeta_stretch).ln();
    let shifted = tape.add_const(gate_logits, shift);
    let probs = tape.sigmoid(shifted);
    tape.sum(probs)
}

/// lambda_L0 * (expected L0 of W_Q row gates + expected L0 of W_K row gates).
pub fn l0_penalty(
    tape: &mut Tape,
    gate_logits: &[TensorId],
    lambda_l0: f64,
    cfg: &HardConcreteConfig,
) -> Result<TensorId> {
    let mut total = tape.constant_scalar(0.0);
    for &g in gate_logits {
        let s = expected_open_sum(tape, g, cfg);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, lambda_l0))
}
