//! Differentiable sparse causal graph over token latents.
//!
//! Edges are scored pairwise by a tiny MLP, sampled through a hard-concrete
//! gate, binarized for the attention mask, and consumed by a topologically
//! ordered causal read-out. Acyclicity is structural: only j < i edges exist.

use crate::error::{GoceError, Result};
use crate::numerics::{sigmoid_scalar, Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sentinel for pairs excluded from sampling (j >= i).
pub const LOGIT_SENTINEL: f64 = f64::NEG_INFINITY;

/// Hard-concrete gate configuration: stretched, clamped sigmoid of logistic
/// noise. Defaults follow the standard parameterization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HardConcreteConfig {
    pub temperature: f64,
    pub gamma_stretch: f64,
    pub zeta_stretch: f64,
    pub deterministic: bool,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0 / 3.0,
            gamma_stretch: -0.1,
            zeta_stretch: 1.1,
            deterministic: false,
        }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(GoceError::Config(format!(
                "hard-concrete temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.gamma_stretch < 0.0 && self.zeta_stretch > 1.0) {
            return Err(GoceError::Config(format!(
                "stretch interval must satisfy gamma < 0 < 1 < zeta, got ({}, {})",
                self.gamma_stretch, self.zeta_stretch
            )));
        }
        Ok(())
    }

    /// Expected open probability of a gate with the given logit:
    /// sigmoid(logit - temperature * ln(-gamma/zeta)).
    pub fn expected_open(&self, logit: f64) -> f64 {
        sigmoid_scalar(logit - self.temperature * (-self.gamma_stretch / self.zeta_stretch).ln())
    }
}

/// Edge scorer: two-layer MLP, concat(h_i, h_j) in R^{2d} -> d_e -> 1.
/// Parameter ids refer to tensors already registered on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EdgeScorerIds {
    pub w1: TensorId, // 2d x d_e
    pub b1: TensorId, // 1 x d_e
    pub w2: TensorId, // d_e x 1
    pub b2: TensorId, // 1 x 1
}

/// Read-out fusion MLP: concat(h_i, parent_aggregate) in R^{2d} -> d -> d,
/// applied with a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct ReadoutIds {
    pub w1: TensorId, // 2d x d
    pub b1: TensorId, // 1 x d
    pub w2: TensorId, // d x d
    pub b2: TensorId, // 1 x d
}

/// Per-edge tape handles plus plain value matrices, strictly lower-triangular
/// support. `values[i][j]` is `LOGIT_SENTINEL` (logits) or 0.0 (gates) off
/// support.
#[derive(Debug, Clone)]
pub struct EdgeMatrix {
    pub t: usize,
    pub ids: Vec<Vec<Option<TensorId>>>,
    pub values: Vec<Vec<f64>>,
}

/// The built graph: soft gates for the read-out, binary adjacency for the
/// attention mask and router, and a verified topological order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalGraph {
    pub t: usize,
    pub logits: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<bool>>,
    pub topo_order: Vec<usize>,
}

impl CausalGraph {
    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|r| r.iter().filter(|&&b| b).count())
            .sum()
    }

    /// DOT rendering: one node per token, edge label = gate value.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph causal {\n");
        for i in 0..self.t {
            s.push_str(&format!("  n{i} [label=\"t{i}\"];\n"));
        }
        for i in 0..self.t {
            for j in 0..self.t {
                if self.adjacency[i][j] {
                    s.push_str(&format!(
                        "  n{j} -> n{i} [label=\"{:.3}\"];\n",
                        self.gates[i][j]
                    ));
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Scores every ordered pair (i, j) with j < i through the edge-scorer MLP.
/// `h_rows[i]` is the 1 x d latent of token i on the tape.
pub fn score_edges(tape: &mut Tape, h_rows: &[TensorId], scorer: EdgeScorerIds) -> Result<EdgeMatrix> {
    let t = h_rows.len();
    let mut ids = vec![vec![None; t]; t];
    let mut values = vec![vec![LOGIT_SENTINEL; t]; t];
    for i in 0..t {
        for j in 0..i {
            let pair = tape.concat_cols(&[h_rows[i], h_rows[j]])?;
            let z1 = tape.matmul(pair, scorer.w1)?;
            let z1 = tape.add_row_bias(z1, scorer.b1)?;
            let a1 = tape.tanh(z1);
            let z2 = tape.matmul(a1, scorer.w2)?;
            let logit = tape.add_row_bias(z2, scorer.b2)?;
            values[i][j] = tape.scalar(logit);
            ids[i][j] = Some(logit);
        }
    }
    Ok(EdgeMatrix { t, ids, values })
}

/// Hard-concrete gating of the edge logits. Sample mode draws one uniform per
/// edge; deterministic mode fixes u = 0.5 so the noise term vanishes.
pub fn hard_concrete(
    tape: &mut Tape,
    logits: &EdgeMatrix,
    cfg: &HardConcreteConfig,
    rng: &mut impl Rng,
) -> Result<EdgeMatrix> {
    cfg.validate()?;
    let t = logits.t;
    let span = cfg.zeta_stretch - cfg.gamma_stretch;
    let mut ids = vec![vec![None; t]; t];
    let mut values = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..i {
            let logit_id = logits.ids[i][j]
                .ok_or_else(|| GoceError::OrderMismatch(format!("missing logit at ({i},{j})")))?;
            let noise = if cfg.deterministic {
                0.0
            } else {
                let u: f64 = rng.gen_range(1e-9..1.0 - 1e-9);
                u.ln() - (1.0 - u).ln()
            };
            let shifted = tape.add_const(logit_id, noise);
            let scaled = tape.scale(shifted, 1.0 / cfg.temperature);
            let s = tape.sigmoid(scaled);
            let stretched = tape.scale(s, span);
            let stretched = tape.add_const(stretched, cfg.gamma_stretch);
            let gate = tape.clamp01_st(stretched);
            values[i][j] = tape.scalar(gate);
            ids[i][j] = Some(gate);
        }
    }
    Ok(EdgeMatrix { t, ids, values })
}

/// Thresholds soft gates into a binary adjacency; ties (== threshold) count
/// as present.
pub fn binarize(gates: &EdgeMatrix, threshold: f64) -> Vec<Vec<bool>> {
    let t = gates.t;
    let mut adj = vec![vec![false; t]; t];
    for i in 0..t {
        for j in 0..i {
            adj[i][j] = gates.values[i][j] >= threshold;
        }
    }
    adj
}

/// Kahn's algorithm over adjacency[i][j] == true meaning edge j -> i.
/// Ties broken by ascending node index. Callable on arbitrary square binary
/// matrices; cycles are reported with one offending node set.
pub fn topological_sort(adjacency: &[Vec<bool>]) -> Result<Vec<usize>> {
    let t = adjacency.len();
    let mut indegree = vec![0usize; t];
    for (i, row) in adjacency.iter().enumerate() {
        debug_assert_eq!(row.len(), t);
        indegree[i] = row.iter().filter(|&&b| b).count();
    }
    // BinaryHeap would invert order; a sorted scan is fine at this scale.
    let mut order = Vec::with_capacity(t);
    let mut placed = vec![false; t];
    while order.len() < t {
        let next = (0..t).find(|&i| !placed[i] && indegree[i] == 0);
        let Some(n) = next else {
            let remaining: Vec<usize> = (0..t).filter(|&i| !placed[i]).collect();
            return Err(GoceError::Cycle { nodes: remaining });
        };
        placed[n] = true;
        order.push(n);
        for i in 0..t {
            if adjacency[i][n] && !placed[i] {
                indegree[i] -= 1;
            }
        }
    }
    Ok(order)
}

/// Causal read-out: processes nodes in topological order, aggregating the
/// ALREADY-UPDATED parent latents weighted by their soft gates, then fusing
/// through a residual MLP. Returns one 1 x d row per token, original index
/// order.
pub fn causal_readout(
    tape: &mut Tape,
    h_rows: &[TensorId],
    gates: &EdgeMatrix,
    order: &[usize],
    readout: ReadoutIds,
) -> Result<Vec<TensorId>> {
    let t = h_rows.len();
    if order.len() != t || gates.t != t {
        return Err(GoceError::OrderMismatch(format!(
            "readout over {t} tokens got order of {} and gates of {}",
            order.len(),
            gates.t
        )));
    }
    let (_, d) = tape.shape(h_rows[0]);
    let mut updated: Vec<Option<TensorId>> = vec![None; t];
    for &i in order {
        let zero = tape.constant(1, d, vec![0.0; d]);
        let mut agg = zero;
        for j in 0..i {
            if let Some(gate_id) = gates.ids[i][j] {
                let parent = updated[j].ok_or_else(|| {
                    GoceError::OrderMismatch(format!("parent {j} of {i} not yet processed"))
                })?;
                let term = tape.scalar_mul(gate_id, parent)?;
                agg = tape.add(agg, term)?;
            }
        }
        let fused_in = tape.concat_cols(&[h_rows[i], agg])?;
        let z1 = tape.matmul(fused_in, readout.w1)?;
        let z1 = tape.add_row_bias(z1, readout.b1)?;
        let a1 = tape.tanh(z1);
        let z2 = tape.matmul(a1, readout.w2)?;
        let mlp_out = tape.add_row_bias(z2, readout.b2)?;
        let out = tape.add(h_rows[i], mlp_out)?;
        updated[i] = Some(out);
    }
    Ok(updated.into_iter().map(|o| o.unwrap()).collect())
}
