//! Causal-conditioned sparse-expert feed-forward: experts are eligible for a
//! token only if they were already active somewhere in its causal
//! neighborhood, routing is masked top-k over the router logits, and the
//! selected outputs are sigmoid-gated and summed with a residual.

use crate::error::{GoceError, Result};
use crate::numerics::{Tape, TensorId};
use serde::Serialize;
use std::collections::BTreeSet;

/// Router handles: one shared linear layer d -> n_experts.
#[derive(Debug, Clone, Copy)]
pub struct RouterIds {
    pub w: TensorId, // d x n_experts
    pub b: TensorId, // 1 x n_experts
}

/// One 2-layer FFN per expert, d -> d_ff -> d. Parameters are disjoint.
#[derive(Debug, Clone)]
pub struct ExpertIds {
    pub w1: Vec<TensorId>, // each d x d_ff
    pub b1: Vec<TensorId>, // each 1 x d_ff
    pub w2: Vec<TensorId>, // each d_ff x d
    pub b2: Vec<TensorId>, // each 1 x d
}

impl ExpertIds {
    pub fn n_experts(&self) -> usize {
        self.w1.len()
    }
}

/// What routing decided for one token; serialized in routing traces.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingDecision {
    pub token: usize,
    pub neighborhood: Vec<usize>,
    pub eligible: Vec<usize>,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Token t plus its direct in- and out-neighbors in the adjacency.
pub fn causal_neighborhood(adjacency: &[Vec<bool>], t: usize) -> Vec<usize> {
    let n = adjacency.len();
    let mut out = BTreeSet::new();
    out.insert(t);
    for j in 0..n {
        if adjacency[t][j] {
            out.insert(j); // parent of t
        }
        if adjacency[j][t] {
            out.insert(j); // child of t
        }
    }
    out.into_iter().collect()
}

/// Union of experts already selected at neighborhood tokens; all experts when
/// no neighbor has routed yet (bootstrap).
pub fn eligible_experts(
    route_history: &[Option<Vec<usize>>],
    neighborhood: &[usize],
    n_experts: usize,
) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for &j in neighborhood {
        if let Some(sel) = &route_history[j] {
            set.extend(sel.iter().copied());
        }
    }
    if set.is_empty() {
        (0..n_experts).collect()
    } else {
        set.into_iter().collect()
    }
}

/// Masked top-k over router logits for one token latent. Ineligible experts
/// never make the cut; ties break toward the lower expert index. If k exceeds
/// the eligible count, the whole eligible set is selected.
pub fn masked_topk_route(
    tape: &mut Tape,
    h_t: TensorId,
    router: RouterIds,
    eligible: &[usize],
    k: usize,
) -> Result<Vec<(usize, TensorId)>> {
    if k == 0 || eligible.is_empty() {
        return Err(GoceError::Config(format!(
            "routing needs k >= 1 and a nonempty eligible set (k={k}, eligible={eligible:?})"
        )));
    }
    let z = tape.matmul(h_t, router.w)?;
    let logits = tape.add_row_bias(z, router.b)?;
    let vals = tape.value(logits).to_vec();
    let mut ranked: Vec<usize> = eligible.to_vec();
    // stable sort keeps ascending-index tie order
    ranked.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    ranked.truncate(k.min(eligible.len()));
    ranked.sort_unstable();
    let mut out = Vec::with_capacity(ranked.len());
    for e in ranked {
        let logit_e = tape.gather(logits, vec![(0, e)])?;
        let gate = tape.sigmoid(logit_e);
        out.push((e, gate));
    }
    Ok(out)
}

/// Gated sum of the selected expert FFNs with a residual around the block.
/// Only selected experts are evaluated; the count is reported through
/// `eval_counter`.
pub fn expert_forward(
    tape: &mut Tape,
    h_t: TensorId,
    selected: &[(usize, TensorId)],
    experts: &ExpertIds,
    eval_counter: &mut usize,
) -> Result<TensorId> {
    let mut acc = h_t;
    for &(e, gate) in selected {
        let z1 = tape.matmul(h_t, experts.w1[e])?;
        let z1 = tape.add_row_bias(z1, experts.b1[e])?;
        let a1 = tape.tanh(z1);
        let z2 = tape.matmul(a1, experts.w2[e])?;
        let y = tape.add_row_bias(z2, experts.b2[e])?;
        *eval_counter += 1;
        let gated = tape.scalar_mul(gate, y)?;
        acc = tape.add(acc, gated)?;
    }
    Ok(acc)
}

/// Routes a whole sequence in topological order, maintaining the activation
/// history that defines eligibility. Returns updated rows (original index
/// order), the trace, and the number of expert evaluations.
pub fn route_sequence(
    tape: &mut Tape,
    h_rows: &[TensorId],
    adjacency: &[Vec<bool>],
    topo_order: &[usize],
    router: RouterIds,
    experts: &ExpertIds,
    k: usize,
) -> Result<(Vec<TensorId>, Vec<RoutingDecision>, usize)> {
    let t = h_rows.len();
    let n_experts = experts.n_experts();
    let mut history: Vec<Option<Vec<usize>>> = vec![None; t];
    let mut out_rows: Vec<Option<TensorId>> = vec![None; t];
    let mut trace = Vec::with_capacity(t);
    let mut evals = 0usize;
    for &tok in topo_order {
        let neighborhood = causal_neighborhood(adjacency, tok);
        let eligible = eligible_experts(&history, &neighborhood, n_experts);
        let selected = masked_topk_route(tape, h_rows[tok], router, &eligible, k)?;
        let out = expert_forward(tape, h_rows[tok], &selected, experts, &mut evals)?;
        history[tok] = Some(selected.iter().map(|&(e, _)| e).collect());
        trace.push(RoutingDecision {
            token: tok,
            neighborhood,
            eligible,
            selected: selected.iter().map(|&(e, _)| e).collect(),
            gates: selected.iter().map(|&(_, g)| tape.scalar(g)).collect(),
        });
        out_rows[tok] = Some(out);
    }
    Ok((
        out_rows.into_iter().map(|o| o.unwrap()).collect(),
        trace,
        evals,
    ))
}
