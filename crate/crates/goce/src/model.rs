//! Full backbone: embeddings, the causal graph builder, stacked
//! attention + sparse-expert blocks, the classification head, the composite
//! training objective, baseline mask modes, and the Adam training loop with
//! JSON checkpointing.

use crate::attention::{
    build_head_mask, csail_attention, kl_consistency_loss, l0_penalty, AttentionIds, HeadMask,
};
use crate::error::{GoceError, Result};
use crate::graph::{
    binarize, causal_readout, hard_concrete, score_edges, topological_sort, CausalGraph,
    EdgeScorerIds, HardConcreteConfig, ReadoutIds, LOGIT_SENTINEL,
};
use crate::intervention::{intervention_loss, select_clamp, Clamp, ClampPolicy, InterventionSpec};
use crate::moe::{route_sequence, ExpertIds, RouterIds, RoutingDecision};
use crate::numerics::{sigmoid_scalar, Tape, TensorId};
use crate::tasks::SyntheticExample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Learned causal graph from the builder.
    GoceGraph,
    /// Each token sees only its immediate predecessor (single-path chain).
    ChainPredecessor,
    /// Standard causal LM mask: all j < i.
    CausalFull,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_edge: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub n_experts: usize,
    pub k: usize,
    pub d_ff: usize,
    pub max_t: usize,
    pub n_classes: usize,
    pub mask_mode: MaskMode,
    pub lambda_l0: f64,
    pub lambda_kl: f64,
    pub lambda_int: f64,
    pub tau_cf: f64,
    pub lambda_delta: f64,
    pub clamp_rho: f64,
    pub sigma_clamp: f64,
    pub n_draws: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub hard_concrete: HardConcreteConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 13,
            d: 32,
            d_edge: 16,
            n_layers: 2,
            n_heads: 4,
            d_k: 8,
            n_experts: 4,
            k: 1,
            d_ff: 64,
            max_t: 32,
            n_classes: 4,
            mask_mode: MaskMode::GoceGraph,
            lambda_l0: 1e-4,
            lambda_kl: 0.01,
            lambda_int: 0.05,
            tau_cf: 0.5,
            lambda_delta: 1.0,
            clamp_rho: 0.125,
            sigma_clamp: 1.0,
            n_draws: 1,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            hard_concrete: HardConcreteConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("d_edge", self.d_edge),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("n_experts", self.n_experts),
            ("k", self.k),
            ("d_ff", self.d_ff),
            ("max_t", self.max_t),
            ("n_classes", self.n_classes),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(GoceError::Config(format!("{name} must be >= 1")));
            }
        }
        self.hard_concrete.validate()?;
        self.intervention_spec().validate()
    }

    pub fn intervention_spec(&self) -> InterventionSpec {
        InterventionSpec {
            policy: ClampPolicy::RandomUniform,
            rho: self.clamp_rho,
            sigma_clamp: self.sigma_clamp,
            tau_cf: self.tau_cf,
            lambda_delta: self.lambda_delta,
            n_draws: self.n_draws,
        }
    }
}

/// One named parameter array (row-major).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// All model parameters as an ordered, named, flat collection; the order is
/// the flattening order used by the evolution gate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GoceParams {
    pub entries: Vec<ParamArray>,
}

impl GoceParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut entries: Vec<ParamArray> = Vec::new();
        fn push(
            entries: &mut Vec<ParamArray>,
            name: String,
            rows: usize,
            cols: usize,
            rng: &mut impl Rng,
            scale: f64,
        ) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect();
            entries.push(ParamArray {
                name,
                rows,
                cols,
                data,
            });
        }
        let d = cfg.d;
        let emb_scale = 0.5;
        push(&mut entries, "embed.tok".into(), cfg.vocab_size, d, rng, emb_scale);
        push(&mut entries, "embed.pos".into(), cfg.max_t, d, rng, emb_scale / 2.0);
        let s2d = 1.0 / (2.0 * d as f64).sqrt();
        push(&mut entries, "graph.scorer.w1".into(), 2 * d, cfg.d_edge, rng, s2d);
        push(&mut entries, "graph.scorer.b1".into(), 1, cfg.d_edge, rng, 0.0);
        push(&mut entries, 
            "graph.scorer.w2".into(),
            cfg.d_edge,
            1,
            rng,
            1.0 / (cfg.d_edge as f64).sqrt(),
        );
        push(&mut entries, "graph.scorer.b2".into(), 1, 1, rng, 0.0);
        push(&mut entries, "graph.readout.w1".into(), 2 * d, d, rng, s2d);
        push(&mut entries, "graph.readout.b1".into(), 1, d, rng, 0.0);
        push(&mut entries, "graph.readout.w2".into(), d, d, rng, 1.0 / (d as f64).sqrt());
        push(&mut entries, "graph.readout.b2".into(), 1, d, rng, 0.0);
        let sd = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.n_layers {
            push(&mut entries, format!("layer{l}.attn.w_q"), d, cfg.n_heads * cfg.d_k, rng, sd);
            push(&mut entries, format!("layer{l}.attn.w_k"), d, cfg.d_k, rng, sd);
            push(&mut entries, format!("layer{l}.attn.w_v"), d, cfg.d_k, rng, sd);
            push(&mut entries, 
                format!("layer{l}.attn.w_o"),
                cfg.n_heads * cfg.d_k,
                d,
                rng,
                1.0 / (cfg.n_heads as f64 * cfg.d_k as f64).sqrt(),
            );
            // start with Q/K row gates mostly open
            entries.push(ParamArray {
                name: format!("layer{l}.attn.gate_q"),
                rows: d,
                cols: 1,
                data: vec![2.0; d],
            });
            entries.push(ParamArray {
                name: format!("layer{l}.attn.gate_k"),
                rows: d,
                cols: 1,
                data: vec![2.0; d],
            });
            push(&mut entries, format!("layer{l}.router.w"), d, cfg.n_experts, rng, sd);
            push(&mut entries, format!("layer{l}.router.b"), 1, cfg.n_experts, rng, 0.0);
            for e in 0..cfg.n_experts {
                push(&mut entries, format!("layer{l}.expert{e}.w1"), d, cfg.d_ff, rng, sd);
                push(&mut entries, format!("layer{l}.expert{e}.b1"), 1, cfg.d_ff, rng, 0.0);
                push(&mut entries, 
                    format!("layer{l}.expert{e}.w2"),
                    cfg.d_ff,
                    d,
                    rng,
                    1.0 / (cfg.d_ff as f64).sqrt(),
                );
                push(&mut entries, format!("layer{l}.expert{e}.b2"), 1, d, rng, 0.0);
            }
        }
        push(&mut entries, "head.w".into(), d, cfg.n_classes, rng, sd);
        push(&mut entries, "head.b".into(), 1, cfg.n_classes, rng, 0.0);
        GoceParams { entries }
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(GoceError::Config(format!(
                "flat vector has {} entries, parameters need {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.data.len();
            e.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter on a fresh tape; returns name -> id.
    pub fn register(&self, tape: &mut Tape) -> HashMap<String, TensorId> {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = tape.param(e.rows, e.cols, e.data.clone());
            map.insert(e.name.clone(), id);
        }
        map
    }
}

fn pid(map: &HashMap<String, TensorId>, name: &str) -> TensorId {
    *map.get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn attention_ids(map: &HashMap<String, TensorId>, l: usize) -> AttentionIds {
    AttentionIds {
        w_q: pid(map, &format!("layer{l}.attn.w_q")),
        w_k: pid(map, &format!("layer{l}.attn.w_k")),
        w_v: pid(map, &format!("layer{l}.attn.w_v")),
        w_o: pid(map, &format!("layer{l}.attn.w_o")),
        gate_logits_q: pid(map, &format!("layer{l}.attn.gate_q")),
        gate_logits_k: pid(map, &format!("layer{l}.attn.gate_k")),
    }
}

fn expert_ids(map: &HashMap<String, TensorId>, l: usize, n_experts: usize) -> ExpertIds {
    ExpertIds {
        w1: (0..n_experts)
            .map(|e| pid(map, &format!("layer{l}.expert{e}.w1")))
            .collect(),
        b1: (0..n_experts)
            .map(|e| pid(map, &format!("layer{l}.expert{e}.b1")))
            .collect(),
        w2: (0..n_experts)
            .map(|e| pid(map, &format!("layer{l}.expert{e}.w2")))
            .collect(),
        b2: (0..n_experts)
            .map(|e| pid(map, &format!("layer{l}.expert{e}.b2")))
            .collect(),
    }
}

/// Baseline adjacency for the non-learned mask modes.
pub fn build_baseline_mask(mode: MaskMode, t: usize) -> Result<Vec<Vec<bool>>> {
    let mut adj = vec![vec![false; t]; t];
    match mode {
        MaskMode::ChainPredecessor => {
            for i in 1..t {
                adj[i][i - 1] = true;
            }
        }
        MaskMode::CausalFull => {
            for (i, row) in adj.iter_mut().enumerate() {
                for cell in row.iter_mut().take(i) {
                    *cell = true;
                }
            }
        }
        MaskMode::GoceGraph => {
            return Err(GoceError::Config(
                "goce-graph mode uses the learned builder, not a baseline mask".into(),
            ))
        }
    }
    Ok(adj)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts<'a> {
    pub mask_mode: MaskMode,
    pub deterministic_gates: bool,
    /// Softmax temperature applied inside attention; tau_cf for the
    /// interventional pass, 1.0 otherwise.
    pub temp: f64,
    pub clamp: Option<&'a Clamp>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::GoceGraph,
            deterministic_gates: true,
            temp: 1.0,
            clamp: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub graph: CausalGraph,
    pub routing: Vec<Vec<RoutingDecision>>,
    /// Per layer, per head, flat T x T attention distribution.
    pub attention: Vec<Vec<Vec<f64>>>,
    pub expert_evals: usize,
}

/// Everything a single forward pass produced, tape included so losses can be
/// stacked on top.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_ids: HashMap<String, TensorId>,
    pub probs: TensorId,
    pub diagnostics: Diagnostics,
    stage1_rows: Vec<TensorId>,
    head_scores: Vec<Vec<TensorId>>,
}

impl ForwardPass {
    pub fn probabilities(&self) -> Vec<f64> {
        self.tape.value(self.probs).to_vec()
    }
}

struct Stage1 {
    rows: Vec<TensorId>,
    adjacency: Vec<Vec<bool>>,
    topo: Vec<usize>,
    graph: CausalGraph,
}

fn stage1(
    tape: &mut Tape,
    ids: &HashMap<String, TensorId>,
    tokens: &[usize],
    cfg: &ModelConfig,
    opts: &ForwardOpts,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1> {
    let t = tokens.len();
    if t == 0 || t > cfg.max_t {
        return Err(GoceError::Data(format!(
            "sequence length {t} outside [1, {}]",
            cfg.max_t
        )));
    }
    let emb = pid(ids, "embed.tok");
    let pos = pid(ids, "embed.pos");
    let mut rows = Vec::with_capacity(t);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(GoceError::Data(format!(
                "token id {tok} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        let e = tape.row(emb, tok)?;
        let p = tape.row(pos, i)?;
        rows.push(tape.add(e, p)?);
    }
    match opts.mask_mode {
        MaskMode::GoceGraph => {
            let scorer = EdgeScorerIds {
                w1: pid(ids, "graph.scorer.w1"),
                b1: pid(ids, "graph.scorer.b1"),
                w2: pid(ids, "graph.scorer.w2"),
                b2: pid(ids, "graph.scorer.b2"),
            };
            let logits = score_edges(tape, &rows, scorer)?;
            let hc = HardConcreteConfig {
                deterministic: opts.deterministic_gates,
                ..cfg.hard_concrete
            };
            let gates = hard_concrete(tape, &logits, &hc, rng)?;
            let adjacency = binarize(&gates, 0.5);
            let topo = topological_sort(&adjacency)?;
            let readout = ReadoutIds {
                w1: pid(ids, "graph.readout.w1"),
                b1: pid(ids, "graph.readout.b1"),
                w2: pid(ids, "graph.readout.w2"),
                b2: pid(ids, "graph.readout.b2"),
            };
            let refined = causal_readout(tape, &rows, &gates, &topo, readout)?;
            let graph = CausalGraph {
                t,
                logits: logits.values.clone(),
                gates: gates.values.clone(),
                adjacency: adjacency.clone(),
                topo_order: topo.clone(),
            };
            Ok(Stage1 {
                rows: refined,
                adjacency,
                topo,
                graph,
            })
        }
        mode => {
            // baselines bypass the learned builder and read-out entirely
            let adjacency = build_baseline_mask(mode, t)?;
            let topo = topological_sort(&adjacency)?;
            let gates: Vec<Vec<f64>> = adjacency
                .iter()
                .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect();
            let graph = CausalGraph {
                t,
                logits: vec![vec![LOGIT_SENTINEL; t]; t],
                gates,
                adjacency: adjacency.clone(),
                topo_order: topo.clone(),
            };
            Ok(Stage1 {
                rows,
                adjacency,
                topo,
                graph,
            })
        }
    }
}

struct Stage2Out {
    probs: TensorId,
    head_scores: Vec<Vec<TensorId>>,
    attention: Vec<Vec<Vec<f64>>>,
    routing: Vec<Vec<RoutingDecision>>,
    expert_evals: usize,
}

#[allow(clippy::too_many_arguments)]
fn stage2(
    tape: &mut Tape,
    ids: &HashMap<String, TensorId>,
    rows: &[TensorId],
    adjacency: &[Vec<bool>],
    topo: &[usize],
    cfg: &ModelConfig,
    temp: f64,
) -> Result<Stage2Out> {
    let t = rows.len();
    let mask: HeadMask = build_head_mask(adjacency, cfg.n_heads);
    let mut cur: Vec<TensorId> = rows.to_vec();
    let mut head_scores = Vec::with_capacity(cfg.n_layers);
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut routing = Vec::with_capacity(cfg.n_layers);
    let mut expert_evals = 0usize;
    for l in 0..cfg.n_layers {
        let h = tape.concat_rows(&cur)?;
        let out = csail_attention(
            tape,
            h,
            attention_ids(ids, l),
            cfg.n_heads,
            cfg.d_k,
            &mask,
            &cfg.hard_concrete,
            temp,
        )?;
        attention.push(
            out.head_probs
                .iter()
                .map(|&p| tape.value(p).to_vec())
                .collect(),
        );
        head_scores.push(out.head_scores);
        let post = tape.add(h, out.z)?;
        let mut new_rows = Vec::with_capacity(t);
        for i in 0..t {
            new_rows.push(tape.row(post, i)?);
        }
        let router = RouterIds {
            w: pid(ids, &format!("layer{l}.router.w")),
            b: pid(ids, &format!("layer{l}.router.b")),
        };
        let experts = expert_ids(ids, l, cfg.n_experts);
        let (routed, trace, evals) =
            route_sequence(tape, &new_rows, adjacency, topo, router, &experts, cfg.k)?;
        routing.push(trace);
        expert_evals += evals;
        cur = routed;
    }
    let h = tape.concat_rows(&cur)?;
    let pool_w = tape.constant(1, t, vec![1.0 / t as f64; t]);
    let pooled = tape.matmul(pool_w, h)?;
    let logits = tape.matmul(pooled, pid(ids, "head.w"))?;
    let logits = tape.add_row_bias(logits, pid(ids, "head.b"))?;
    let probs = tape.softmax_rows(logits)?;
    Ok(Stage2Out {
        probs,
        head_scores,
        attention,
        routing,
        expert_evals,
    })
}

fn apply_clamp(tape: &mut Tape, rows: &[TensorId], clamp: &Clamp) -> Result<Vec<TensorId>> {
    let mut out = rows.to_vec();
    for (pos, vals) in clamp.indices.iter().zip(&clamp.values) {
        if *pos >= rows.len() {
            return Err(GoceError::IndexOutOfRange {
                index: *pos,
                len: rows.len(),
            });
        }
        let (_, d) = tape.shape(rows[*pos]);
        if vals.len() != d {
            return Err(GoceError::Config(format!(
                "clamp value width {} != latent width {d}",
                vals.len()
            )));
        }
        // constants: gradients never flow into clamped values
        out[*pos] = tape.constant(1, d, vals.clone());
    }
    Ok(out)
}

/// Single forward pass. The clamp (if any) is applied to the latents between
/// the graph builder and the first attention layer, and `temp` sharpens
/// every attention softmax.
pub fn forward(
    tokens: &[usize],
    params: &GoceParams,
    cfg: &ModelConfig,
    opts: &ForwardOpts,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let param_ids = params.register(&mut tape);
    let s1 = stage1(&mut tape, &param_ids, tokens, cfg, opts, rng)?;
    let rows = match opts.clamp {
        Some(c) => apply_clamp(&mut tape, &s1.rows, c)?,
        None => s1.rows.clone(),
    };
    let s2 = stage2(
        &mut tape,
        &param_ids,
        &rows,
        &s1.adjacency,
        &s1.topo,
        cfg,
        opts.temp,
    )?;
    Ok(ForwardPass {
        probs: s2.probs,
        diagnostics: Diagnostics {
            graph: s1.graph,
            routing: s2.routing,
            attention: s2.attention,
            expert_evals: s2.expert_evals,
        },
        stage1_rows: s1.rows,
        head_scores: s2.head_scores,
        tape,
        param_ids,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub l0: f64,
    pub kl_consistency: f64,
    pub intervention: f64,
}

/// Composite objective for one example, built on top of a forward pass:
/// cross-entropy + lambda_l0 * L0 + lambda_kl * KL-consistency +
/// lambda_int * intervention loss. Returns the scalar id and the numeric
/// breakdown.
pub fn composite_loss(
    example: &SyntheticExample,
    params: &GoceParams,
    cfg: &ModelConfig,
    opts: &ForwardOpts,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardPass, TensorId, LossBreakdown)> {
    if example.label >= cfg.n_classes {
        return Err(GoceError::Data(format!(
            "label {} outside {} classes",
            example.label, cfg.n_classes
        )));
    }
    let mut pass = forward(&example.tokens, params, cfg, opts, rng)?;
    let tape = &mut pass.tape;

    // cross-entropy as KL(one-hot || probs), which equals -ln p_y
    let ce = {
        let mut onehot = vec![0.0; cfg.n_classes];
        onehot[example.label] = 1.0;
        let target = tape.constant(1, cfg.n_classes, onehot);
        tape.kl_divergence_rows(target, pass.probs)?
    };

    let mut gate_logits = Vec::new();
    for l in 0..cfg.n_layers {
        gate_logits.push(pid(&pass.param_ids, &format!("layer{l}.attn.gate_q")));
        gate_logits.push(pid(&pass.param_ids, &format!("layer{l}.attn.gate_k")));
    }
    let l0 = l0_penalty(tape, &gate_logits, cfg.lambda_l0, &cfg.hard_concrete)?;

    let mut kl_total = tape.constant_scalar(0.0);
    for layer_scores in &pass.head_scores {
        let kl = kl_consistency_loss(tape, layer_scores, cfg.tau_cf)?;
        kl_total = tape.add(kl_total, kl)?;
    }
    let kl_weighted = tape.scale(kl_total, cfg.lambda_kl / cfg.n_layers as f64);

    // intervention term: Monte-Carlo over clamp draws, each a second
    // (clamped, sharpened) pass through stage 2 on the same tape
    let spec = cfg.intervention_spec();
    let mut int_total = tape.constant_scalar(0.0);
    if cfg.lambda_int > 0.0 {
        let adjacency = pass.diagnostics.graph.adjacency.clone();
        let topo = pass.diagnostics.graph.topo_order.clone();
        for _ in 0..spec.n_draws.max(1) {
            let clamp = select_clamp(example.tokens.len(), cfg.d, &spec, rng)?;
            let rows = apply_clamp(tape, &pass.stage1_rows, &clamp)?;
            let s2 = stage2(
                tape,
                &pass.param_ids,
                &rows,
                &adjacency,
                &topo,
                cfg,
                spec.tau_cf,
            )?;
            let term = intervention_loss(tape, pass.probs, s2.probs, spec.lambda_delta)?;
            int_total = tape.add(int_total, term)?;
        }
        int_total = tape.scale(int_total, 1.0 / spec.n_draws.max(1) as f64);
    }
    let int_weighted = tape.scale(int_total, cfg.lambda_int);

    let mut total = tape.add(ce, l0)?;
    total = tape.add(total, kl_weighted)?;
    total = tape.add(total, int_weighted)?;
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        cross_entropy: tape.scalar(ce),
        l0: tape.scalar(l0),
        kl_consistency: tape.scalar(kl_weighted),
        intervention: tape.scalar(int_weighted),
    };
    Ok((pass, total, breakdown))
}

/// Observational vs. interventional distributions for a one-off report.
#[derive(Debug, Clone, Serialize)]
pub struct InterventionReport {
    pub clamp: Clamp,
    pub p_observational: Vec<f64>,
    pub p_interventional: Vec<f64>,
    pub loss: f64,
}

pub fn intervened_report(
    tokens: &[usize],
    params: &GoceParams,
    cfg: &ModelConfig,
    clamp_index: usize,
    seed: u64,
) -> Result<InterventionReport> {
    let spec = cfg.intervention_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clamp = {
        let targeted = InterventionSpec {
            policy: ClampPolicy::RandomUniform,
            ..spec.clone()
        };
        let mut c = select_clamp(tokens.len(), cfg.d, &targeted, &mut rng)?;
        if clamp_index < tokens.len() {
            c.indices = vec![clamp_index];
            c.values.truncate(1);
        }
        c
    };
    let mut pass = forward(
        tokens,
        params,
        cfg,
        &ForwardOpts {
            mask_mode: cfg.mask_mode,
            ..Default::default()
        },
        &mut rng,
    )?;
    let rows = apply_clamp(&mut pass.tape, &pass.stage1_rows, &clamp)?;
    let s2 = stage2(
        &mut pass.tape,
        &pass.param_ids,
        &rows,
        &pass.diagnostics.graph.adjacency.clone(),
        &pass.diagnostics.graph.topo_order.clone(),
        cfg,
        spec.tau_cf,
    )?;
    let loss = intervention_loss(&mut pass.tape, pass.probs, s2.probs, spec.lambda_delta)?;
    Ok(InterventionReport {
        clamp,
        p_observational: pass.tape.value(pass.probs).to_vec(),
        p_interventional: pass.tape.value(s2.probs).to_vec(),
        loss: pass.tape.scalar(loss),
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &GoceParams) -> Self {
        Self {
            step: 0,
            m: params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: params.entries.iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: LossBreakdown,
    pub edge_count: f64,
    pub expert_usage: Vec<usize>,
}

pub struct TrainOutcome {
    pub params: GoceParams,
    pub optimizer: AdamState,
    pub log: Vec<TrainLogEntry>,
    /// Step at which a non-finite loss forced an abort, if any; params hold
    /// the last good state.
    pub aborted_at: Option<usize>,
}

/// Splits a root seed into per-subsystem streams by tag.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the root
    let mut h: u64 = 0xcbf29ce484222325 ^ root;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seeded, deterministic Adam training over the composite loss.
pub fn train(dataset: &[SyntheticExample], cfg: &ModelConfig, steps: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GoceError::Data("training dataset is empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let params = GoceParams::init(cfg, &mut init_rng);
    let optimizer = AdamState::new(&params);
    train_from(dataset, cfg, steps, params, optimizer, 0)
}

/// Continues training from an existing state (checkpoint resume).
pub fn train_from(
    dataset: &[SyntheticExample],
    cfg: &ModelConfig,
    steps: usize,
    mut params: GoceParams,
    mut opt: AdamState,
    start_step: usize,
) -> Result<TrainOutcome> {
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gates"));
    // skip streams consumed by earlier steps on resume
    for _ in 0..start_step {
        for _ in 0..cfg.batch_size {
            let _ = batch_rng.gen_range(0..dataset.len());
        }
    }
    let mut log = Vec::with_capacity(steps);
    let opts = ForwardOpts {
        mask_mode: cfg.mask_mode,
        deterministic_gates: false,
        temp: 1.0,
        clamp: None,
    };
    for step in (start_step + 1)..=(start_step + steps) {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..dataset.len()))
            .collect();
        let mut grad_acc: Vec<Vec<f64>> = params
            .entries
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        let mut sum = LossBreakdown {
            total: 0.0,
            cross_entropy: 0.0,
            l0: 0.0,
            kl_consistency: 0.0,
            intervention: 0.0,
        };
        let mut edge_sum = 0.0;
        let mut usage = vec![0usize; cfg.n_experts];
        for &ix in &batch {
            let (mut pass, loss_id, breakdown) =
                composite_loss(&dataset[ix], &params, cfg, &opts, &mut noise_rng)?;
            if !breakdown.total.is_finite() {
                return Ok(TrainOutcome {
                    params,
                    optimizer: opt,
                    log,
                    aborted_at: Some(step),
                });
            }
            pass.tape.backward(loss_id)?;
            for (ei, e) in params.entries.iter().enumerate() {
                let id = pass.param_ids[&e.name];
                let g = pass.tape.grad(id);
                for (a, &b) in grad_acc[ei].iter_mut().zip(g) {
                    *a += b;
                }
            }
            sum.total += breakdown.total;
            sum.cross_entropy += breakdown.cross_entropy;
            sum.l0 += breakdown.l0;
            sum.kl_consistency += breakdown.kl_consistency;
            sum.intervention += breakdown.intervention;
            edge_sum += pass.diagnostics.graph.edge_count() as f64;
            for layer in &pass.diagnostics.routing {
                for dec in layer {
                    for &e in &dec.selected {
                        usage[e] += 1;
                    }
                }
            }
        }
        let bsz = batch.len() as f64;
        opt.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(opt.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(opt.step as i32);
        for (ei, e) in params.entries.iter_mut().enumerate() {
            for (j, x) in e.data.iter_mut().enumerate() {
                let g = grad_acc[ei][j] / bsz;
                let m = &mut opt.m[ei][j];
                let v = &mut opt.v[ei][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= cfg.lr * mhat / (vhat.sqrt() + 1e-8);
            }
        }
        log.push(TrainLogEntry {
            step,
            loss: LossBreakdown {
                total: sum.total / bsz,
                cross_entropy: sum.cross_entropy / bsz,
                l0: sum.l0 / bsz,
                kl_consistency: sum.kl_consistency / bsz,
                intervention: sum.intervention / bsz,
            },
            edge_count: edge_sum / bsz,
            expert_usage: usage,
        });
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        log,
        aborted_at: None,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn eval_one(
    ex: &SyntheticExample,
    params: &GoceParams,
    cfg: &ModelConfig,
    mask_mode: MaskMode,
) -> Result<Vec<f64>> {
    let opts = ForwardOpts {
        mask_mode,
        deterministic_gates: true,
        temp: 1.0,
        clamp: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in deterministic mode
    let pass = forward(&ex.tokens, params, cfg, &opts, &mut rng)?;
    Ok(pass.probabilities())
}

/// Sequential batch evaluation; the deterministic reference path.
pub fn eval_batch_sequential(
    examples: &[SyntheticExample],
    params: &GoceParams,
    cfg: &ModelConfig,
    mask_mode: MaskMode,
) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|ex| eval_one(ex, params, cfg, mask_mode))
        .collect()
}

/// Rayon-sharded batch evaluation; output order (and therefore every
/// downstream metric) is identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn eval_batch_parallel(
    examples: &[SyntheticExample],
    params: &GoceParams,
    cfg: &ModelConfig,
    mask_mode: MaskMode,
) -> Result<Vec<Vec<f64>>> {
    examples
        .par_iter()
        .map(|ex| eval_one(ex, params, cfg, mask_mode))
        .collect()
}

/// Batch evaluation through whichever backend the build enables.
pub fn eval_batch(
    examples: &[SyntheticExample],
    params: &GoceParams,
    cfg: &ModelConfig,
    mask_mode: MaskMode,
) -> Result<Vec<Vec<f64>>> {
    #[cfg(feature = "parallel")]
    {
        eval_batch_parallel(examples, params, cfg, mask_mode)
    }
    #[cfg(not(feature = "parallel"))]
    {
        eval_batch_sequential(examples, params, cfg, mask_mode)
    }
}

// ---------------------------------------------------------------------------
// Evolution-gate evaluators
// ---------------------------------------------------------------------------

/// Mean expected-open probability of the attention Q/K row gates.
pub fn attention_gate_sparsity(params: &GoceParams, cfg: &ModelConfig) -> f64 {
    let shift = -cfg.hard_concrete.temperature
        * (-cfg.hard_concrete.gamma_stretch / cfg.hard_concrete.zeta_stretch).ln();
    let mut total = 0.0;
    let mut count = 0usize;
    for l in 0..cfg.n_layers {
        for name in [format!("layer{l}.attn.gate_q"), format!("layer{l}.attn.gate_k")] {
            if let Some(e) = params.get(&name) {
                for &logit in &e.data {
                    total += sigmoid_scalar(logit + shift);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fitness terms on a frozen evaluation batch: Accuracy@1 reward, fixed-seed
/// intervention loss, and attention-gate sparsity. Deterministic gates
/// throughout so the result is a pure function of the parameters.
pub fn fitness_terms(
    params: &GoceParams,
    cfg: &ModelConfig,
    eval_set: &[SyntheticExample],
    cf_seed: u64,
) -> Result<crate::evolution::FitnessTerms> {
    let preds = eval_batch(eval_set, params, cfg, cfg.mask_mode)?;
    let labels: Vec<usize> = eval_set.iter().map(|e| e.label).collect();
    let report = crate::metrics::metrics(&preds, &labels)?;
    let spec = cfg.intervention_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cf_seed);
    let mut cf_total = 0.0;
    for ex in eval_set {
        let mut pass = forward(
            &ex.tokens,
            params,
            cfg,
            &ForwardOpts {
                mask_mode: cfg.mask_mode,
                ..Default::default()
            },
            &mut rng,
        )?;
        let clamp = select_clamp(ex.tokens.len(), cfg.d, &spec, &mut rng)?;
        let rows = apply_clamp(&mut pass.tape, &pass.stage1_rows, &clamp)?;
        let adjacency = pass.diagnostics.graph.adjacency.clone();
        let topo = pass.diagnostics.graph.topo_order.clone();
        let s2 = stage2(
            &mut pass.tape,
            &pass.param_ids,
            &rows,
            &adjacency,
            &topo,
            cfg,
            spec.tau_cf,
        )?;
        let loss = intervention_loss(&mut pass.tape, pass.probs, s2.probs, spec.lambda_delta)?;
        cf_total += pass.tape.scalar(loss);
    }
    Ok(crate::evolution::FitnessTerms {
        reward: report.accuracy_at_1,
        cf_loss: cf_total / eval_set.len() as f64,
        sparsity: attention_gate_sparsity(params, cfg),
    })
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: GoceParams,
    pub optimizer: AdamState,
    pub trained_steps: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GoceError::Config(format!(
                "checkpoint format {} unsupported (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}
