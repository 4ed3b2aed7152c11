//! Context-aware time-decay message passing over patient code graphs.
//!
//! Every node starts from the embedding row of its code. Edge weights
//! combine the source node's occurrence frequency with the rectified
//! cosine similarity of the two code embeddings, are normalized per
//! target node, and stay fixed across the rounds of one forward pass.
//! Messages decay exponentially with the gap between non-empty buckets.
//! After `depth` rounds the node features are mean-pooled and classified
//! by a two-layer head with layer normalization.
//!
//! The similarity factor (CS), frequency factor (CF), and time decay
//! (TD) can each be disabled independently; with CS and CF both off
//! every edge weighs the same and aggregation reduces to a plain mean.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Tape, ValueId};
use crate::graph::{GraphStats, IcdGraph};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("no incoming edges to normalize")]
    EmptyIncoming,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Network shape and ablation switches.
///
/// `cs` weighs edges by code-embedding similarity, `cf` by source
/// occurrence frequency, `td` applies exponential time decay to
/// messages. All three off except `td` off is meaningful on its own;
/// `cs = cf = false` makes aggregation uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_node: usize,
    pub d_graph: usize,
    pub depth: usize,
    pub lambda: f64,
    pub d_hidden: usize,
    #[serde(rename = "cs")]
    pub use_code_similarity: bool,
    #[serde(rename = "cf")]
    pub use_frequency: bool,
    #[serde(rename = "td")]
    pub use_time_decay: bool,
    pub sim_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_node: 64,
            d_graph: 256,
            depth: 3,
            lambda: 0.3,
            d_hidden: 128,
            use_code_similarity: true,
            use_frequency: true,
            use_time_decay: true,
            sim_floor: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_node < 1 || self.d_graph < 1 || self.d_hidden < 1 {
            return fail(format!(
                "widths must be at least 1 (d_node {}, d_graph {}, d_hidden {})",
                self.d_node, self.d_graph, self.d_hidden
            ));
        }
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.sim_floor > 0.0) {
            return fail(format!("sim_floor must be positive, got {}", self.sim_floor));
        }
        Ok(())
    }

    /// Short ablation label, e.g. "CS+CF+TD" or "Uniform" when neither
    /// similarity nor frequency weighting is active and decay is off.
    pub fn ablation_label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_code_similarity {
            parts.push("CS");
        }
        if self.use_frequency {
            parts.push("CF");
        }
        if self.use_time_decay {
            parts.push("TD");
        }
        if parts.is_empty() {
            "Uniform".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// The six canonical ablation configurations, from the full model down
/// to the uniform (mean-aggregation) baseline: CS+CF+TD, CS+CF, CS+TD,
/// CF+TD, TD, Uniform. Shape and schedule fields are taken from `base`.
pub fn canonical_ablations(base: &ModelConfig) -> Vec<ModelConfig> {
    [
        (true, true, true),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (false, false, true),
        (false, false, false),
    ]
    .into_iter()
    .map(|(cs, cf, td)| ModelConfig {
        use_code_similarity: cs,
        use_frequency: cf,
        use_time_decay: td,
        ..*base
    })
    .collect()
}

/// All learnable tensors, owned as flat `f64` buffers. The update stack
/// has `depth` layers: the first maps `d_node -> d_graph`, the rest
/// `d_graph -> d_graph`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n_codes: usize,
    pub d_node: usize,
    pub d_graph: usize,
    pub d_hidden: usize,
    pub embedding: Vec<f64>,
    pub update_w: Vec<Vec<f64>>,
    pub update_b: Vec<Vec<f64>>,
    pub head_fc1_w: Vec<f64>,
    pub head_fc1_b: Vec<f64>,
    pub head_ln_gamma: Vec<f64>,
    pub head_ln_beta: Vec<f64>,
    pub head_fc2_w: Vec<f64>,
    pub head_fc2_b: Vec<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_out * fan_in)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

impl ModelParams {
    /// Width of the input to update layer `s` (0-based).
    fn layer_in(&self, s: usize) -> usize {
        if s == 0 {
            self.d_node
        } else {
            self.d_graph
        }
    }

    /// Seeded initialization: uniform Glorot for linear weights, small
    /// uniform noise for the embedding, zeros for biases, ones for the
    /// layer-norm scale. Draw order is fixed, so a seed pins every value.
    pub fn init(config: &ModelConfig, n_codes: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if n_codes < 1 {
            return Err(ModelError::InvalidConfig("n_codes must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = (0..n_codes * config.d_node)
            .map(|_| rng.gen_range(-0.05..0.05))
            .collect();
        let mut update_w = Vec::with_capacity(config.depth);
        let mut update_b = Vec::with_capacity(config.depth);
        for s in 0..config.depth {
            let d_in = if s == 0 { config.d_node } else { config.d_graph };
            update_w.push(glorot(&mut rng, config.d_graph, d_in));
            update_b.push(vec![0.0; config.d_graph]);
        }
        let head_fc1_w = glorot(&mut rng, config.d_hidden, config.d_graph);
        let head_fc2_w = glorot(&mut rng, 1, config.d_hidden);
        Ok(Self {
            n_codes,
            d_node: config.d_node,
            d_graph: config.d_graph,
            d_hidden: config.d_hidden,
            embedding,
            update_w,
            update_b,
            head_fc1_w,
            head_fc1_b: vec![0.0; config.d_hidden],
            head_ln_gamma: vec![1.0; config.d_hidden],
            head_ln_beta: vec![0.0; config.d_hidden],
            head_fc2_w,
            head_fc2_b: vec![0.0; 1],
        })
    }

    /// Canonical (name, shape) listing; the order is the contract for
    /// optimizer slots, gradient reduction, and checkpoints.
    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embedding".to_string(), vec![self.n_codes, self.d_node])];
        for s in 0..self.update_w.len() {
            out.push((format!("update.{s}.w"), vec![self.d_graph, self.layer_in(s)]));
            out.push((format!("update.{s}.b"), vec![self.d_graph]));
        }
        out.push(("head.fc1.w".to_string(), vec![self.d_hidden, self.d_graph]));
        out.push(("head.fc1.b".to_string(), vec![self.d_hidden]));
        out.push(("head.ln.gamma".to_string(), vec![self.d_hidden]));
        out.push(("head.ln.beta".to_string(), vec![self.d_hidden]));
        out.push(("head.fc2.w".to_string(), vec![1, self.d_hidden]));
        out.push(("head.fc2.b".to_string(), vec![1]));
        out
    }

    /// Buffers in canonical order (same order as [`Self::named_shapes`]).
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for s in 0..self.update_w.len() {
            out.push(&self.update_w[s]);
            out.push(&self.update_b[s]);
        }
        out.push(&self.head_fc1_w);
        out.push(&self.head_fc1_b);
        out.push(&self.head_ln_gamma);
        out.push(&self.head_ln_beta);
        out.push(&self.head_fc2_w);
        out.push(&self.head_fc2_b);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embedding];
        for (w, b) in self.update_w.iter_mut().zip(self.update_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_fc1_w);
        out.push(&mut self.head_fc1_b);
        out.push(&mut self.head_ln_gamma);
        out.push(&mut self.head_ln_beta);
        out.push(&mut self.head_fc2_w);
        out.push(&mut self.head_fc2_b);
        out
    }

    pub fn n_params(&self) -> u64 {
        self.buffers().iter().map(|b| b.len() as u64).sum()
    }

    /// All parameters as one flat vector, canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.buffers().concat()
    }

    /// Overwrite every parameter from a flat vector laid out like
    /// [`Self::flatten`]. Panics on length mismatch.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for buf in self.buffers_mut() {
            buf.copy_from_slice(&flat[offset..offset + buf.len()]);
            offset += buf.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// Leaf every tensor onto a tape for one forward/backward pass.
    pub fn leaf_onto(&self, tape: &mut Tape) -> TapeParams {
        TapeParams {
            embedding: tape.leaf(&[self.n_codes, self.d_node], &self.embedding),
            update: self
                .update_w
                .iter()
                .zip(&self.update_b)
                .enumerate()
                .map(|(s, (w, b))| {
                    (
                        tape.leaf(&[self.d_graph, self.layer_in(s)], w),
                        tape.leaf(&[self.d_graph], b),
                    )
                })
                .collect(),
            fc1_w: tape.leaf(&[self.d_hidden, self.d_graph], &self.head_fc1_w),
            fc1_b: tape.leaf(&[self.d_hidden], &self.head_fc1_b),
            ln_gamma: tape.leaf(&[self.d_hidden], &self.head_ln_gamma),
            ln_beta: tape.leaf(&[self.d_hidden], &self.head_ln_beta),
            fc2_w: tape.leaf(&[1, self.d_hidden], &self.head_fc2_w),
            fc2_b: tape.leaf(&[1], &self.head_fc2_b),
        }
    }
}

/// Tape handles for one leafed copy of the parameters.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub embedding: ValueId,
    pub update: Vec<(ValueId, ValueId)>,
    pub fc1_w: ValueId,
    pub fc1_b: ValueId,
    pub ln_gamma: ValueId,
    pub ln_beta: ValueId,
    pub fc2_w: ValueId,
    pub fc2_b: ValueId,
}

impl TapeParams {
    /// Gradient buffers after backward, in canonical parameter order.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let mut out = vec![tape.grad(self.embedding).to_vec()];
        for &(w, b) in &self.update {
            out.push(tape.grad(w).to_vec());
            out.push(tape.grad(b).to_vec());
        }
        out.push(tape.grad(self.fc1_w).to_vec());
        out.push(tape.grad(self.fc1_b).to_vec());
        out.push(tape.grad(self.ln_gamma).to_vec());
        out.push(tape.grad(self.ln_beta).to_vec());
        out.push(tape.grad(self.fc2_w).to_vec());
        out.push(tape.grad(self.fc2_b).to_vec());
        out
    }

    /// Gradients concatenated to match [`ModelParams::flatten`].
    pub fn flat_grads(&self, tape: &Tape) -> Vec<f64> {
        self.grads(tape).concat()
    }
}

/// Message decay across a gap of `gap` non-empty-bucket units.
pub fn decay_factor(lambda: f64, gap: usize, use_time_decay: bool) -> f64 {
    if use_time_decay {
        (-lambda * gap as f64).exp()
    } else {
        1.0
    }
}

/// Raw weight of one edge: source frequency times rectified cosine
/// similarity of the two code embeddings, plus a small floor that keeps
/// normalization well defined. Ablations replace either factor with 1.
pub fn edge_weight(
    tape: &mut Tape,
    frequency: u32,
    src_embed: ValueId,
    dst_embed: ValueId,
    config: &ModelConfig,
) -> Result<ValueId, ModelError> {
    let freq = if config.use_frequency {
        f64::from(frequency)
    } else {
        1.0
    };
    let base = if config.use_code_similarity {
        let cos = tape.cosine_sim(src_embed, dst_embed)?;
        let rect = tape.relu(cos);
        tape.scale_const(rect, freq)
    } else {
        tape.scalar(freq)
    };
    Ok(tape.add_const(base, config.sim_floor))
}

/// Normalize raw incoming weights so they sum to one.
pub fn normalize_incoming(tape: &mut Tape, raw: &[ValueId]) -> Result<Vec<ValueId>, ModelError> {
    if raw.is_empty() {
        return Err(ModelError::EmptyIncoming);
    }
    let total = tape.sum_scalars(raw)?;
    raw.iter()
        .map(|&w| tape.div(w, total).map_err(ModelError::from))
        .collect()
}

fn head(tape: &mut Tape, tp: &TapeParams, pool: ValueId) -> Result<ValueId, DiffError> {
    let z = tape.linear(pool, tp.fc1_w, tp.fc1_b)?;
    let n = tape.layer_norm(z, tp.ln_gamma, tp.ln_beta)?;
    let a = tape.relu(n);
    tape.linear(a, tp.fc2_w, tp.fc2_b)
}

/// One differentiable forward pass over a patient graph, returning the
/// scalar logit.
///
/// Node states start from the embedding rows; normalized edge weights
/// are computed once from the embeddings and reused across all rounds;
/// each round every node adds its decayed incoming message (zero for
/// nodes in the first non-empty bucket) and passes through that round's
/// linear layer with ReLU. An empty graph pools a zero vector, so the
/// logit degrades to the head's response at zero.
pub fn forward(
    tape: &mut Tape,
    graph: &IcdGraph,
    tp: &TapeParams,
    config: &ModelConfig,
) -> Result<ValueId, ModelError> {
    config.validate()?;
    if graph.is_empty() {
        let zeros = vec![0.0; config.d_graph];
        let pool = tape.leaf(&[config.d_graph], &zeros);
        return head(tape, tp, pool).map_err(ModelError::from);
    }

    let nodes = graph.nodes();
    let spans = graph.spans();
    let gaps = graph.gaps();

    let h0: Vec<ValueId> = nodes
        .iter()
        .map(|n| tape.row(tp.embedding, n.code_id))
        .collect::<Result<_, _>>()?;

    let mut incoming: Vec<Vec<ValueId>> = vec![Vec::new(); nodes.len()];
    for pair in 0..spans.len().saturating_sub(1) {
        let src_span = spans[pair].clone();
        for d in spans[pair + 1].clone() {
            let mut raw = Vec::with_capacity(src_span.len());
            for s in src_span.clone() {
                raw.push(edge_weight(tape, nodes[s].frequency, h0[s], h0[d], config)?);
            }
            incoming[d] = normalize_incoming(tape, &raw)?;
        }
    }

    let mut h = h0;
    for round in 0..config.depth {
        let (w_id, b_id) = tp.update[round];
        let mut next = Vec::with_capacity(h.len());
        for (si, span) in spans.iter().enumerate() {
            let decay = if si == 0 {
                1.0
            } else {
                decay_factor(config.lambda, gaps[si - 1], config.use_time_decay)
            };
            for v in span.clone() {
                let input = if si == 0 {
                    h[v]
                } else {
                    let pairs: Vec<(ValueId, ValueId)> = incoming[v]
                        .iter()
                        .zip(spans[si - 1].clone())
                        .map(|(&w, u)| (w, h[u]))
                        .collect();
                    let m = tape.weighted_sum(&pairs)?;
                    let decayed = tape.scale_const(m, decay);
                    tape.add(h[v], decayed)?
                };
                let z = tape.linear(input, w_id, b_id)?;
                next.push(tape.relu(z));
            }
        }
        h = next;
    }

    let pool = tape.mean_pool(&h)?;
    head(tape, tp, pool).map_err(ModelError::from)
}

/// Exact learnable-parameter count for a config and vocabulary size:
/// embedding, `depth` update layers, and the classifier head.
pub fn count_params(config: &ModelConfig, n_codes: usize) -> u64 {
    let n = n_codes as u64;
    let dn = config.d_node as u64;
    let dg = config.d_graph as u64;
    let dh = config.d_hidden as u64;
    let s = config.depth as u64;
    n * dn
        + (dn * dg + dg)
        + (s - 1) * (dg * dg + dg)
        + (dg * dh + dh)
        + 2 * dh
        + (dh + 1)
}

/// Itemized floating-point-operation estimate for one forward pass.
///
/// Convention: multiply, add, subtract, divide, square root, exponential,
/// and comparison each count as one FLOP; a `d_out x d_in` linear layer
/// costs `2*d_out*d_in + d_out`; embedding lookups are free; decay and
/// self-connection terms are charged for every node in every round even
/// though first-bucket nodes skip them, keeping the count a closed form
/// of the summary statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub edge_weights: u64,
    pub normalization: u64,
    pub aggregation: u64,
    pub decay: u64,
    pub updates: u64,
    pub pooling: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.edge_weights
            + self.normalization
            + self.aggregation
            + self.decay
            + self.updates
            + self.pooling
            + self.head
    }
}

pub const FLOP_CONVENTION: &str = "multiply/add/divide/sqrt/exp/compare = 1 FLOP each; \
linear d_out x d_in = 2*d_out*d_in + d_out; embedding lookup = 0; \
decay and self-connection charged for all nodes in all rounds";

impl fmt::Display for FlopBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "edge weights   {:>14}", self.edge_weights)?;
        writeln!(f, "normalization  {:>14}", self.normalization)?;
        writeln!(f, "aggregation    {:>14}", self.aggregation)?;
        writeln!(f, "decay          {:>14}", self.decay)?;
        writeln!(f, "updates        {:>14}", self.updates)?;
        writeln!(f, "pooling        {:>14}", self.pooling)?;
        writeln!(f, "head           {:>14}", self.head)?;
        writeln!(f, "total          {:>14}", self.total())?;
        write!(f, "convention: {FLOP_CONVENTION}")
    }
}

/// FLOP count for one forward pass over a graph with the given summary
/// statistics, broken down by pipeline stage.
pub fn count_flops(config: &ModelConfig, stats: &GraphStats) -> FlopBreakdown {
    let e = stats.n_edges;
    let v = stats.n_nodes as u64;
    let dn = config.d_node as u64;
    let dg = config.d_graph as u64;
    let dh = config.d_hidden as u64;
    let s = config.depth as u64;

    // Cosine: three dot products (2*dn - 1 each), two sqrt, one multiply,
    // one epsilon add, one divide, one rectify compare; then one multiply
    // for the frequency factor and one add for the floor.
    let per_edge_weight = match (config.use_code_similarity, config.use_frequency) {
        (true, true) => 6 * dn + 5,
        (true, false) => 6 * dn + 4,
        (false, true) => 2,
        (false, false) => 0,
    };
    // Per-target sum and divide amortize to one add plus one divide per edge.
    let normalization = if e > 0 { 2 * e } else { 0 };
    // Weighted sum: one multiply and one add per feature component per edge,
    // at width d_node in round one and d_graph afterwards.
    let aggregation = e * (2 * dn + 2 * dg * (s - 1));
    // Per node per round: one exp, a scale multiply per component, and the
    // self-connection add per component.
    let decay = v * ((2 * dn + 1) + (s - 1) * (2 * dg + 1));
    // Linear plus ReLU per node per round.
    let updates = v * ((2 * dg * dn + dg + dg) + (s - 1) * (2 * dg * dg + dg + dg));
    let pooling = if v > 0 { v * dg + dg } else { 0 };
    // fc1 + layer norm (mean dn, variance 3*dh, inv-sigma 3, apply 4*dh)
    // + ReLU + fc2.
    let head = (2 * dh * dg + dh) + (8 * dh + 3) + dh + (2 * dh + 1);

    FlopBreakdown {
        edge_weights: e * per_edge_weight,
        normalization,
        aggregation,
        decay,
        updates,
        pooling,
        head,
    }
}
