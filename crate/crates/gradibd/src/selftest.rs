//! Built-in invariant suite: gradient checks against finite
//! differences, normalization sums, independent-oracle equivalences for
//! graphs, metrics, aggregation, and complexity accounting. Shipped in
//! the binary so any install can verify the numerical core; the
//! acceptance tests run the same checks at larger sizes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bucket::{bucketize, BucketMatrix};
use crate::codec::CodeVocab;
use crate::cohort::{CohortRecord, Visit};
use crate::diff::{finite_diff, Tape, LAYER_NORM_EPSILON};
use crate::graph::{GraphStats, IcdGraph};
use crate::metrics::{auroc, average_precision};
use crate::model::{
    self, canonical_ablations, count_flops, count_params, decay_factor, ModelConfig, ModelParams,
};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            detail,
        }
    }
}

const CODE_POOL: [&str; 10] = [
    "A00", "B12", "C34", "E11", "J45", "K50", "K51", "M05", "N18", "R10",
];

fn pool_vocab() -> CodeVocab {
    CodeVocab::build(CODE_POOL).expect("static pool is valid")
}

fn random_record(rng: &mut ChaCha8Rng, max_visits: usize) -> CohortRecord {
    let anchor = rng.gen_range(200..=1095);
    let n_visits = rng.gen_range(1..=max_visits);
    let mut days: Vec<i64> = (0..n_visits).map(|_| rng.gen_range(0..anchor)).collect();
    days.sort_unstable();
    let visits = days
        .into_iter()
        .map(|day_offset| {
            let n_codes = rng.gen_range(1..=3);
            let codes = (0..n_codes)
                .map(|_| CODE_POOL[rng.gen_range(0..CODE_POOL.len())].to_string())
                .collect();
            Visit { day_offset, codes }
        })
        .collect();
    CohortRecord::new(format!("selftest{}", rng.gen::<u32>()), rng.gen_range(0..2), anchor, visits)
        .expect("generated record is valid")
}

/// A random graph with at least `min_buckets` non-empty buckets (when
/// attainable within a handful of retries).
fn random_graph(rng: &mut ChaCha8Rng, vocab: &CodeVocab, min_buckets: usize) -> IcdGraph {
    let mut last = None;
    for _ in 0..20 {
        let record = random_record(rng, 8);
        let tau = *[7i64, 14, 30].get(rng.gen_range(0..3)).unwrap();
        let matrix = bucketize(&record, vocab, tau, 1095).expect("pool codes encode");
        let graph = IcdGraph::build(&matrix);
        if graph.spans().len() >= min_buckets {
            return graph;
        }
        last = Some(graph);
    }
    last.expect("at least one attempt")
}

/// A graph capped at 10 nodes across 2 to 4 non-empty buckets, so a full
/// finite-difference sweep over every parameter stays cheap.
fn small_graph(rng: &mut ChaCha8Rng, vocab: &CodeVocab) -> IcdGraph {
    let mut last = None;
    for _ in 0..40 {
        let record = random_record(rng, 4);
        let tau = *[7i64, 14, 30].get(rng.gen_range(0..3)).unwrap();
        let matrix = bucketize(&record, vocab, tau, 1095).expect("pool codes encode");
        let graph = IcdGraph::build(&matrix);
        let stats = graph.stats();
        if stats.n_nodes <= 10 && (2..=4).contains(&stats.n_buckets) {
            return graph;
        }
        last = Some(graph);
    }
    last.expect("at least one attempt")
}

fn small_config(rng: &mut ChaCha8Rng, variant: usize) -> ModelConfig {
    let ablations = canonical_ablations(&ModelConfig::default());
    let flags = ablations[variant % ablations.len()];
    ModelConfig {
        d_node: rng.gen_range(2..=4),
        d_graph: rng.gen_range(4..=8),
        depth: rng.gen_range(1..=3),
        d_hidden: rng.gen_range(3..=5),
        lambda: 0.3,
        ..flags
    }
}

/// Full-model gradient check: every parameter coordinate of the BCE
/// loss against central finite differences on random small graphs.
fn agrees(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    let rel = err / analytic.abs().max(numeric.abs()).max(1e-30);
    err <= 1e-8 || rel <= 1e-4
}

pub fn check_gradients(seed: u64, n_graphs: usize) -> CheckResult {
    const NAME: &str = "gradient-check";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = pool_vocab();
    let mut worst: f64 = 0.0;
    for i in 0..n_graphs {
        let graph = small_graph(&mut rng, &vocab);
        let config = small_config(&mut rng, i);
        let params = ModelParams::init(&config, vocab.n(), rng.gen()).expect("valid config");
        let label = (i % 2) as f64;

        let mut tape = Tape::new();
        let tp = params.leaf_onto(&mut tape);
        let logit = match model::forward(&mut tape, &graph, &tp, &config) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(NAME, format!("forward failed: {e}")),
        };
        let loss = match tape.bce_with_logit(logit, label) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(NAME, format!("loss failed: {e}")),
        };
        if let Err(e) = tape.backward(loss) {
            return CheckResult::fail(NAME, format!("backward failed: {e}"));
        }
        let analytic = tp.flat_grads(&tape);

        let flat = params.flatten();
        let loss_of = |values: &[f64]| {
            let mut probe = params.clone();
            probe.set_from_flat(values);
            let mut tape = Tape::new();
            let tp = probe.leaf_onto(&mut tape);
            let logit = model::forward(&mut tape, &graph, &tp, &config).expect("forward");
            let loss = tape.bce_with_logit(logit, label).expect("loss");
            tape.scalar_value(loss)
        };
        let numeric = finite_diff(&loss_of, &flat, 1e-5);

        for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            // ReLU makes the loss piecewise smooth, so a wide central
            // difference can straddle a kink; shrink the step before calling
            // a disagreement real.
            let mut best = n;
            for step in [1e-6, 1e-7] {
                if agrees(a, best) {
                    break;
                }
                let mut p = flat.clone();
                p[j] = flat[j] + step;
                let hi = loss_of(&p);
                p[j] = flat[j] - step;
                let lo = loss_of(&p);
                let refined = (hi - lo) / (2.0 * step);
                if (a - refined).abs() < (a - best).abs() {
                    best = refined;
                }
            }
            // Zero-initialized biases can park a dead node's pre-activation
            // exactly on a kink, where only a one-sided difference can match
            // the subgradient the backward pass reports.
            if !agrees(a, best) {
                let h = 1e-7;
                let f0 = loss_of(&flat);
                let mut p = flat.clone();
                p[j] = flat[j] + h;
                let fwd = (loss_of(&p) - f0) / h;
                p[j] = flat[j] - h;
                let bwd = (f0 - loss_of(&p)) / h;
                for sided in [fwd, bwd] {
                    if (a - sided).abs() < (a - best).abs() {
                        best = sided;
                    }
                }
            }
            let err = (a - best).abs();
            let rel = err / a.abs().max(best.abs()).max(1e-30);
            if err > 1e-8 {
                worst = worst.max(rel);
            }
            if !agrees(a, best) {
                return CheckResult::fail(
                    NAME,
                    format!(
                        "graph {i} ({}), param {j}: analytic {a:.9e} vs numeric {best:.9e}",
                        config.ablation_label()
                    ),
                );
            }
        }
    }
    CheckResult::pass(
        NAME,
        format!("{n_graphs} graphs, worst relative error {worst:.2e}"),
    )
}

/// Per-destination normalized incoming weights must sum to 1 across
/// every ablation configuration.
pub fn check_normalization(seed: u64, n_graphs: usize) -> CheckResult {
    const NAME: &str = "normalization";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = pool_vocab();
    let ablations = canonical_ablations(&ModelConfig {
        d_node: 3,
        d_graph: 6,
        d_hidden: 4,
        ..ModelConfig::default()
    });
    let mut checked = 0u64;
    for i in 0..n_graphs {
        let graph = random_graph(&mut rng, &vocab, 2);
        let params = ModelParams::init(&ablations[0], vocab.n(), rng.gen()).expect("valid config");
        for config in &ablations {
            let mut tape = Tape::new();
            let tp = params.leaf_onto(&mut tape);
            let nodes = graph.nodes();
            let spans = graph.spans();
            let h0: Vec<_> = match nodes
                .iter()
                .map(|n| tape.row(tp.embedding, n.code_id))
                .collect::<Result<_, _>>()
            {
                Ok(v) => v,
                Err(e) => return CheckResult::fail(NAME, format!("embedding rows: {e}")),
            };
            for pair in 0..spans.len().saturating_sub(1) {
                let src = spans[pair].clone();
                for d in spans[pair + 1].clone() {
                    let raw: Result<Vec<_>, _> = src
                        .clone()
                        .map(|s| {
                            model::edge_weight(&mut tape, nodes[s].frequency, h0[s], h0[d], config)
                        })
                        .collect();
                    let raw = match raw {
                        Ok(v) => v,
                        Err(e) => return CheckResult::fail(NAME, format!("edge weight: {e}")),
                    };
                    let normalized = match model::normalize_incoming(&mut tape, &raw) {
                        Ok(v) => v,
                        Err(e) => return CheckResult::fail(NAME, format!("normalize: {e}")),
                    };
                    let sum: f64 = normalized.iter().map(|&w| tape.scalar_value(w)).sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return CheckResult::fail(
                            NAME,
                            format!(
                                "graph {i} ({}): weights sum to {sum:.17}",
                                config.ablation_label()
                            ),
                        );
                    }
                    checked += 1;
                }
            }
        }
    }
    CheckResult::pass(
        NAME,
        format!("{checked} destination sums across {n_graphs} graphs x 6 ablations, all 1 +/- 1e-12"),
    )
}

fn relu_inplace(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn linear_plain(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let d_in = x.len();
    let mut out = b.to_vec();
    for o in 0..d_out {
        for i in 0..d_in {
            out[o] += w[o * d_in + i] * x[i];
        }
    }
    out
}

/// Plain-array mean-aggregation forward pass, written independently of
/// the tape engine: messages average the previous bucket's states.
fn mean_forward_oracle(graph: &IcdGraph, params: &ModelParams, config: &ModelConfig) -> f64 {
    let pooled = if graph.is_empty() {
        vec![0.0; params.d_graph]
    } else {
        let nodes = graph.nodes();
        let spans = graph.spans();
        let gaps = graph.gaps();
        let mut h: Vec<Vec<f64>> = nodes
            .iter()
            .map(|n| {
                let start = n.code_id * params.d_node;
                params.embedding[start..start + params.d_node].to_vec()
            })
            .collect();
        for round in 0..config.depth {
            let w = &params.update_w[round];
            let b = &params.update_b[round];
            let mut next = Vec::with_capacity(h.len());
            for (si, span) in spans.iter().enumerate() {
                let decay = if si == 0 {
                    1.0
                } else {
                    decay_factor(config.lambda, gaps[si - 1], config.use_time_decay)
                };
                for v in span.clone() {
                    let input = if si == 0 {
                        h[v].clone()
                    } else {
                        let prev = spans[si - 1].clone();
                        let n_prev = prev.len() as f64;
                        let mut mean = vec![0.0; h[v].len()];
                        for u in prev {
                            for (m, x) in mean.iter_mut().zip(&h[u]) {
                                *m += x;
                            }
                        }
                        let mut input = h[v].clone();
                        for (iv, m) in input.iter_mut().zip(&mean) {
                            *iv += decay * (m / n_prev);
                        }
                        input
                    };
                    let mut z = linear_plain(w, b, &input);
                    relu_inplace(&mut z);
                    next.push(z);
                }
            }
            h = next;
        }
        let mut pooled = vec![0.0; params.d_graph];
        for state in &h {
            for (p, x) in pooled.iter_mut().zip(state) {
                *p += x;
            }
        }
        for p in &mut pooled {
            *p /= h.len() as f64;
        }
        pooled
    };

    let mut z = linear_plain(&params.head_fc1_w, &params.head_fc1_b, &pooled);
    let d = z.len() as f64;
    let mu = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    let denom = (var + LAYER_NORM_EPSILON).sqrt();
    for (i, x) in z.iter_mut().enumerate() {
        *x = (*x - mu) / denom * params.head_ln_gamma[i] + params.head_ln_beta[i];
    }
    relu_inplace(&mut z);
    linear_plain(&params.head_fc2_w, &params.head_fc2_b, &z)[0]
}

/// With similarity and frequency off, the tape forward must equal the
/// independent mean-aggregator to near machine precision.
pub fn check_uniform_equals_mean(seed: u64, n_graphs: usize) -> CheckResult {
    const NAME: &str = "uniform-equals-mean";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = pool_vocab();
    let mut worst: f64 = 0.0;
    for i in 0..n_graphs {
        let graph = random_graph(&mut rng, &vocab, 2);
        let mut config = small_config(&mut rng, i);
        config.use_code_similarity = false;
        config.use_frequency = false;
        let params = ModelParams::init(&config, vocab.n(), rng.gen()).expect("valid config");

        let mut tape = Tape::new();
        let tp = params.leaf_onto(&mut tape);
        let logit = match model::forward(&mut tape, &graph, &tp, &config) {
            Ok(v) => tape.scalar_value(v),
            Err(e) => return CheckResult::fail(NAME, format!("forward failed: {e}")),
        };
        let oracle = mean_forward_oracle(&graph, &params, &config);
        let err = (logit - oracle).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            return CheckResult::fail(
                NAME,
                format!("graph {i}: tape {logit:.17} vs oracle {oracle:.17}"),
            );
        }
    }
    CheckResult::pass(NAME, format!("{n_graphs} graphs, worst gap {worst:.2e}"))
}

/// Dense recount of node and edge counts straight from the matrix.
fn graph_counts_oracle(matrix: &BucketMatrix) -> (usize, u64) {
    let mut per_bucket = vec![0u64; matrix.n_buckets()];
    let mut n_nodes = 0usize;
    for bucket in 0..matrix.n_buckets() {
        for code in 0..matrix.n_codes() {
            if matrix.get(code, bucket) > 0 {
                per_bucket[bucket] += 1;
                n_nodes += 1;
            }
        }
    }
    let sizes: Vec<u64> = per_bucket.into_iter().filter(|&c| c > 0).collect();
    let n_edges = sizes.windows(2).map(|w| w[0] * w[1]).sum();
    (n_nodes, n_edges)
}

/// Graph construction against a dense brute-force recount.
pub fn check_graph_oracle(seed: u64, n_matrices: usize) -> CheckResult {
    const NAME: &str = "graph-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = pool_vocab();
    for i in 0..n_matrices {
        let record = random_record(&mut rng, 10);
        let tau = *[1i64, 7, 30, 365].get(rng.gen_range(0..4)).unwrap();
        let matrix = bucketize(&record, &vocab, tau, 1095).expect("pool codes encode");
        let graph = IcdGraph::build(&matrix);
        let (nodes, edges) = graph_counts_oracle(&matrix);
        if graph.n_nodes() != nodes || graph.n_edges() != edges {
            return CheckResult::fail(
                NAME,
                format!(
                    "matrix {i}: graph says {}/{} nodes/edges, dense recount {nodes}/{edges}",
                    graph.n_nodes(),
                    graph.n_edges()
                ),
            );
        }
        if graph.n_nodes() != matrix.nnz() {
            return CheckResult::fail(
                NAME,
                format!("matrix {i}: nodes {} != nnz {}", graph.n_nodes(), matrix.nnz()),
            );
        }
    }
    CheckResult::pass(NAME, format!("{n_matrices} matrices recounted exactly"))
}

fn auroc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (&sp, &lp) in scores.iter().zip(labels) {
        if lp != 1 {
            continue;
        }
        for (&sn, &ln) in scores.iter().zip(labels) {
            if ln != 0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn ap_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            let hits = order[..=rank0].iter().filter(|&&j| labels[j] == 1).count();
            total += hits as f64 / (rank0 + 1) as f64;
        }
    }
    total / n_pos as f64
}

/// AUROC and AP against quadratic/rank-walk brute-force recomputation.
pub fn check_metric_oracles(seed: u64, n_vectors: usize) -> CheckResult {
    const NAME: &str = "metric-oracles";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_vectors {
        let n = rng.gen_range(4..=1000);
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Force some exact ties to exercise the tie policies.
        for j in 1..n {
            if rng.gen_bool(0.2) {
                scores[j] = scores[j - 1];
            }
        }
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;

        let fast = match auroc(&scores, &labels) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(NAME, format!("auroc failed: {e}")),
        };
        let brute = auroc_bruteforce(&scores, &labels);
        if (fast - brute).abs() > 1e-12 {
            return CheckResult::fail(
                NAME,
                format!("vector {i}: auroc {fast:.17} vs brute force {brute:.17}"),
            );
        }

        let fast = match average_precision(&scores, &labels) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(NAME, format!("ap failed: {e}")),
        };
        let brute = ap_bruteforce(&scores, &labels);
        if (fast - brute).abs() > 1e-12 {
            return CheckResult::fail(
                NAME,
                format!("vector {i}: ap {fast:.17} vs brute force {brute:.17}"),
            );
        }
    }
    CheckResult::pass(NAME, format!("{n_vectors} score vectors matched to 1e-12"))
}

/// Parameter count vs actual allocation, and FLOP linearity in edges.
pub fn check_complexity(seed: u64, n_configs: usize) -> CheckResult {
    const NAME: &str = "complexity";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_configs {
        let config = ModelConfig {
            d_node: rng.gen_range(1..=32),
            d_graph: rng.gen_range(2..=64),
            depth: rng.gen_range(1..=4),
            d_hidden: rng.gen_range(1..=32),
            ..small_config(&mut rng, i)
        };
        let n_codes = rng.gen_range(1..=200);
        let params = ModelParams::init(&config, n_codes, rng.gen()).expect("valid config");
        let formula = count_params(&config, n_codes);
        let allocated = params.flatten().len() as u64;
        if formula != allocated {
            return CheckResult::fail(
                NAME,
                format!("config {i}: count_params {formula} != allocated {allocated}"),
            );
        }

        let stats = GraphStats {
            n_nodes: rng.gen_range(1..=500),
            n_edges: rng.gen_range(0..=100_000u64),
            n_buckets: rng.gen_range(1..=100),
            mean_gap: 1.5,
            max_in_degree: 12,
        };
        let doubled = GraphStats {
            n_edges: stats.n_edges * 2,
            ..stats
        };
        let f1 = count_flops(&config, &stats);
        let f2 = count_flops(&config, &doubled);
        let linear_terms =
            |f: &model::FlopBreakdown| [f.edge_weights, f.normalization, f.aggregation];
        for (a, b) in linear_terms(&f1).iter().zip(linear_terms(&f2)) {
            if a * 2 != b {
                return CheckResult::fail(
                    NAME,
                    format!("config {i}: edge-linear FLOP term {a} does not double to {b}"),
                );
            }
        }
    }
    CheckResult::pass(NAME, format!("{n_configs} configs: params exact, FLOPs edge-linear"))
}

/// The full suite at sizes suitable for an interactive run.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_gradients(seed, 10),
        check_normalization(seed.wrapping_add(1), 200),
        check_uniform_equals_mean(seed.wrapping_add(2), 50),
        check_graph_oracle(seed.wrapping_add(3), 300),
        check_metric_oracles(seed.wrapping_add(4), 40),
        check_complexity(seed.wrapping_add(5), 20),
    ]
}
