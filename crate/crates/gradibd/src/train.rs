//! Stratified cross-validation training with the Adam schedule,
//! fold-ensemble test evaluation, and prediction-interval sweeps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bucket::bucketize;
use crate::codec::{CodeVocab, CodecError};
use crate::cohort::{stratified_split, CohortError, CohortRecord, MAX_LOOKBACK_DAYS};
use crate::diff::{adam_step, AdamConfig, AdamState, DiffError, Tape};
use crate::graph::IcdGraph;
use crate::metrics::{auroc, average_precision, f1_at_threshold, mean_ci95, Ci, MetricError};
use crate::model::{self, ModelConfig, ModelError, ModelParams};

/// Validation loss must drop by at least this much to count as an
/// improvement for the stagnation counters.
pub const IMPROVEMENT_EPSILON: f64 = 1e-5;

/// Decision threshold for the reported F1.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// CI formula note embedded in every report, since the choice of
/// interval is a convention rather than a given.
pub const CI_METHOD: &str = "95% Student-t over fold metrics, k-1 degrees of freedom";

const FOLD_SEED_STRIDE: u64 = 0x9E3779B97F4A7C15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{found} records cannot fill {k} folds")]
    TooFewRecords { k: usize, found: usize },
    #[error("loss became non-finite at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("malformed score row {line}: {message}")]
    MalformedScores { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

/// Optimizer schedule and cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub folds: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Consecutive stagnant epochs before the learning rate drops.
    pub patience_lr: usize,
    /// Consecutive stagnant epochs before training stops.
    pub patience_stop: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            lr: 1e-3,
            lr_decay_factor: 10.0,
            patience_lr: 3,
            patience_stop: 10,
            max_epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor >= 1.0) {
            return fail(format!(
                "lr_decay_factor must be at least 1, got {}",
                self.lr_decay_factor
            ));
        }
        if self.patience_lr == 0 {
            return fail("patience_lr must be at least 1".into());
        }
        if self.patience_stop < self.patience_lr {
            return fail(format!(
                "patience_stop ({}) must be at least patience_lr ({})",
                self.patience_stop, self.patience_lr
            ));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// A cohort turned into per-patient graphs, ready for the model.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub graphs: Vec<IcdGraph>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<String>,
    pub n_codes: usize,
}

/// Bucketize every record over the full lookback window and build its
/// graph. Unseen codes map to the vocabulary's unknown slot.
pub fn encode_cohort(
    records: &[CohortRecord],
    vocab: &CodeVocab,
    tau: i64,
) -> Result<Encoded, TrainError> {
    let graphs = records
        .par_iter()
        .map(|r| bucketize(r, vocab, tau, MAX_LOOKBACK_DAYS).map(|m| IcdGraph::build(&m)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Encoded {
        graphs,
        labels: records.iter().map(|r| r.label).collect(),
        patient_ids: records.iter().map(|r| r.patient_id.clone()).collect(),
        n_codes: vocab.n(),
    })
}

/// Build a vocabulary from every code mentioned in `records`.
pub fn vocab_from_records(records: &[CohortRecord]) -> Result<CodeVocab, TrainError> {
    let corpus = records
        .iter()
        .flat_map(|r| r.visits.iter())
        .flat_map(|v| v.codes.iter());
    Ok(CodeVocab::build(corpus)?)
}

/// Shuffled stratified k-fold split over record indices.
///
/// Each class is shuffled and dealt round-robin across folds with a
/// running cursor, so per-fold class counts differ from the even split
/// by at most one record and no fold is empty when `labels.len() >= k`.
/// Returns `(train, validation)` index pairs, both sorted ascending.
pub fn stratified_kfold(
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>, TrainError> {
    if k < 2 {
        return Err(TrainError::InvalidConfig(format!(
            "folds must be at least 2, got {k}"
        )));
    }
    if labels.len() < k {
        return Err(TrainError::TooFewRecords {
            k,
            found: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for label in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            val_folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for val in &mut val_folds {
        val.sort_unstable();
        let mut in_val = vec![false; labels.len()];
        for &i in val.iter() {
            in_val[i] = true;
        }
        let train: Vec<usize> = (0..labels.len()).filter(|&i| !in_val[i]).collect();
        folds.push((train, std::mem::take(val)));
    }
    Ok(folds)
}

/// One row of the per-epoch training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Result of training a single fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// Parameters from the best-validation-loss epoch.
    pub params: ModelParams,
    /// Optimizer moments snapshotted at the same epoch.
    pub adam: AdamState,
    pub trace: Vec<EpochStats>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

enum Verdict {
    Continue,
    Stop,
}

/// Two-counter stagnation tracker: the lr counter resets on improvement
/// and on every drop; the stop counter resets only on improvement.
struct Schedule {
    lr: f64,
    decay_factor: f64,
    patience_lr: usize,
    patience_stop: usize,
    lr_stagnant: usize,
    stop_stagnant: usize,
}

impl Schedule {
    fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr,
            decay_factor: config.lr_decay_factor,
            patience_lr: config.patience_lr,
            patience_stop: config.patience_stop,
            lr_stagnant: 0,
            stop_stagnant: 0,
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn observe(&mut self, improved: bool) -> Verdict {
        if improved {
            self.lr_stagnant = 0;
            self.stop_stagnant = 0;
            return Verdict::Continue;
        }
        self.lr_stagnant += 1;
        self.stop_stagnant += 1;
        if self.stop_stagnant >= self.patience_stop {
            return Verdict::Stop;
        }
        if self.lr_stagnant >= self.patience_lr {
            self.lr /= self.decay_factor;
            self.lr_stagnant = 0;
        }
        Verdict::Continue
    }
}

fn example_grads(
    params: &ModelParams,
    graph: &IcdGraph,
    label: u8,
    config: &ModelConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let tp = params.leaf_onto(&mut tape);
    let logit = model::forward(&mut tape, graph, &tp, config)?;
    let loss = tape.bce_with_logit(logit, label as f64)?;
    tape.backward(loss)?;
    Ok((tape.scalar_value(loss), tp.flat_grads(&tape)))
}

fn example_loss(
    params: &ModelParams,
    graph: &IcdGraph,
    label: u8,
    config: &ModelConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let tp = params.leaf_onto(&mut tape);
    let logit = model::forward(&mut tape, graph, &tp, config)?;
    let loss = tape.bce_with_logit(logit, label as f64)?;
    Ok(tape.scalar_value(loss))
}

fn mean_loss(
    params: &ModelParams,
    encoded: &Encoded,
    idx: &[usize],
    config: &ModelConfig,
) -> Result<f64, TrainError> {
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| example_loss(params, &encoded.graphs[i], encoded.labels[i], config))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

fn apply_update(
    params: &mut ModelParams,
    flat_grads: &[f64],
    adam: &AdamConfig,
    state: &mut AdamState,
) -> Result<(), DiffError> {
    let shapes = params.named_shapes();
    let mut grads: Vec<&[f64]> = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for (_, shape) in &shapes {
        let len: usize = shape.iter().product();
        grads.push(&flat_grads[offset..offset + len]);
        offset += len;
    }
    let mut buffers = params.buffers_mut();
    let mut named: Vec<(&str, &mut [f64])> = shapes
        .iter()
        .map(|(name, _)| name.as_str())
        .zip(buffers.drain(..))
        .collect();
    adam_step(adam, state, &mut named, &grads)
}

/// Train one fold with mini-batch Adam, early stopping, and the
/// drop-on-stagnation learning-rate schedule. Returns the parameters
/// from the epoch with the lowest validation loss.
///
/// Batch members run in parallel; their gradients are reduced in batch
/// order, so results are identical at any thread count. Batch ids in
/// `NonFiniteLoss` count from 0 across the whole fold; a non-finite
/// validation loss reports the id of the last trained batch.
pub fn train_fold(
    encoded: &Encoded,
    train_idx: &[usize],
    val_idx: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FoldOutcome, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::InvalidConfig(
            "train and validation splits must be non-empty".into(),
        ));
    }

    let mut params = ModelParams::init(model_config, encoded.n_codes, train_config.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(1));
    let mut state = AdamState::default();
    let mut schedule = Schedule::new(train_config);

    let mut best_val_loss = f64::INFINITY;
    let mut best_flat = params.flatten();
    let mut best_adam = state.clone();
    let mut best_epoch = 0;
    let mut trace = Vec::new();
    let mut batches_seen = 0usize;

    for epoch in 0..train_config.max_epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut shuffle_rng);

        let lr = schedule.lr();
        let adam_config = AdamConfig::with_lr(lr);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| example_grads(&params, &encoded.graphs[i], encoded.labels[i], model_config))
                .collect::<Result<_, _>>()?;
            let mut grad_sum = vec![0.0; results[0].1.len()];
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { batch: batches_seen });
                }
                train_loss_sum += loss;
                for (acc, g) in grad_sum.iter_mut().zip(grads) {
                    *acc += g;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grad_sum {
                *g *= scale;
            }
            apply_update(&mut params, &grad_sum, &adam_config, &mut state)?;
            batches_seen += 1;
        }
        let train_loss = train_loss_sum / train_idx.len() as f64;

        let val_loss = mean_loss(&params, encoded, val_idx, model_config)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                batch: batches_seen.saturating_sub(1),
            });
        }
        trace.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });

        let improved = best_val_loss - val_loss >= IMPROVEMENT_EPSILON;
        if improved {
            best_val_loss = val_loss;
            best_flat = params.flatten();
            best_adam = state.clone();
            best_epoch = epoch;
        }
        if let Verdict::Stop = schedule.observe(improved) {
            break;
        }
    }

    params.set_from_flat(&best_flat);
    Ok(FoldOutcome {
        params,
        adam: best_adam,
        trace,
        best_val_loss,
        best_epoch,
    })
}

/// Derive the seed for fold `i` so folds differ but remain a pure
/// function of the configured seed.
pub fn fold_seed(seed: u64, fold: u64) -> u64 {
    seed.wrapping_add((fold + 1).wrapping_mul(FOLD_SEED_STRIDE))
}

/// Stratified k-fold cross-validation: trains one model per fold, in
/// parallel, each seeded by [`fold_seed`].
pub fn cross_validate(
    encoded: &Encoded,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Vec<FoldOutcome>, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    let folds = stratified_kfold(&encoded.labels, train_config.folds, train_config.seed)?;
    folds
        .par_iter()
        .enumerate()
        .map(|(i, (train_idx, val_idx))| {
            let fold_config = TrainConfig {
                seed: fold_seed(train_config.seed, i as u64),
                ..train_config.clone()
            };
            train_fold(encoded, train_idx, val_idx, model_config, &fold_config)
        })
        .collect()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Score every graph with one model; outputs are probabilities.
pub fn score_graphs(
    params: &ModelParams,
    graphs: &[IcdGraph],
    config: &ModelConfig,
) -> Result<Vec<f64>, TrainError> {
    graphs
        .par_iter()
        .map(|g| {
            let mut tape = Tape::new();
            let tp = params.leaf_onto(&mut tape);
            let logit = model::forward(&mut tape, g, &tp, config)?;
            Ok(sigmoid(tape.scalar_value(logit)))
        })
        .collect()
}

/// Per-fold test metrics at the fixed decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Fold-ensemble evaluation: per-fold metrics plus t-interval
/// aggregates, stamped with config and cohort fingerprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_fold: Vec<FoldMetrics>,
    pub auroc: Ci,
    pub ap: Ci,
    pub f1: Ci,
    pub ci_method: String,
    pub config_fingerprint: String,
    pub cohort_fingerprint: String,
}

/// Hash of the exact model and training configuration.
pub fn config_fingerprint(model_config: &ModelConfig, train_config: &TrainConfig) -> String {
    let text = serde_json::to_string(&(model_config, train_config)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Hash of the encoded cohort: ids, labels, and graph shapes.
pub fn cohort_fingerprint(encoded: &Encoded) -> String {
    let mut hasher = Sha256::new();
    hasher.update(encoded.n_codes.to_le_bytes());
    for ((id, &label), graph) in encoded
        .patient_ids
        .iter()
        .zip(&encoded.labels)
        .zip(&encoded.graphs)
    {
        hasher.update(id.as_bytes());
        hasher.update([0u8, label]);
        hasher.update((graph.n_nodes() as u64).to_le_bytes());
        hasher.update(graph.n_edges().to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Assemble a report from per-fold score vectors. Kept separate from
/// scoring so a report can be recomputed bit-exactly from persisted
/// score files.
pub fn report_from_scores(
    fold_scores: &[Vec<f64>],
    labels: &[u8],
    config_fingerprint: String,
    cohort_fingerprint: String,
) -> Result<EvalReport, TrainError> {
    if fold_scores.len() < 2 {
        return Err(TrainError::InvalidConfig(format!(
            "ensemble evaluation needs at least 2 fold models, got {}",
            fold_scores.len()
        )));
    }
    let per_fold = fold_scores
        .iter()
        .map(|scores| -> Result<FoldMetrics, TrainError> {
            Ok(FoldMetrics {
                auroc: auroc(scores, labels)?,
                ap: average_precision(scores, labels)?,
                f1: f1_at_threshold(scores, labels, DECISION_THRESHOLD)?,
                threshold: DECISION_THRESHOLD,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let aurocs: Vec<f64> = per_fold.iter().map(|m| m.auroc).collect();
    let aps: Vec<f64> = per_fold.iter().map(|m| m.ap).collect();
    let f1s: Vec<f64> = per_fold.iter().map(|m| m.f1).collect();
    Ok(EvalReport {
        per_fold,
        auroc: mean_ci95(&aurocs)?,
        ap: mean_ci95(&aps)?,
        f1: mean_ci95(&f1s)?,
        ci_method: CI_METHOD.to_string(),
        config_fingerprint,
        cohort_fingerprint,
    })
}

/// Score the test set with every fold model and aggregate. Returns the
/// report and the per-fold score vectors (row order = test order).
pub fn evaluate_ensemble(
    fold_params: &[ModelParams],
    test: &Encoded,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(EvalReport, Vec<Vec<f64>>), TrainError> {
    if test.graphs.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    if fold_scores_len_mismatch(fold_params, test) {
        return Err(TrainError::InvalidConfig(
            "fold model vocabulary size does not match the test encoding".into(),
        ));
    }
    let fold_scores = fold_params
        .iter()
        .map(|p| score_graphs(p, &test.graphs, model_config))
        .collect::<Result<Vec<_>, _>>()?;
    let report = report_from_scores(
        &fold_scores,
        &test.labels,
        config_fingerprint(model_config, train_config),
        cohort_fingerprint(test),
    )?;
    Ok((report, fold_scores))
}

fn fold_scores_len_mismatch(fold_params: &[ModelParams], test: &Encoded) -> bool {
    fold_params.iter().any(|p| p.n_codes != test.n_codes)
}

/// Serialize one fold's test scores; `Display` for `f64` round-trips
/// exactly, so parsing the file back reproduces the same bits.
pub fn scores_to_csv(patient_ids: &[String], labels: &[u8], scores: &[f64]) -> String {
    let mut out = String::from("patient_id,label,score\n");
    for ((id, label), score) in patient_ids.iter().zip(labels).zip(scores) {
        out.push_str(&format!("{id},{label},{score}\n"));
    }
    out
}

pub fn scores_from_csv(text: &str) -> Result<(Vec<String>, Vec<u8>, Vec<f64>), TrainError> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "patient_id,label,score" {
                return Err(TrainError::MalformedScores {
                    line: 1,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fail = |message: String| TrainError::MalformedScores {
            line: i + 1,
            message,
        };
        let mut parts = line.splitn(3, ',');
        let id = parts.next().ok_or_else(|| fail("missing patient_id".into()))?;
        let label = parts
            .next()
            .ok_or_else(|| fail("missing label".into()))?
            .parse::<u8>()
            .map_err(|e| fail(format!("bad label: {e}")))?;
        let score = parts
            .next()
            .ok_or_else(|| fail("missing score".into()))?
            .parse::<f64>()
            .map_err(|e| fail(format!("bad score: {e}")))?;
        ids.push(id.to_string());
        labels.push(label);
        scores.push(score);
    }
    Ok((ids, labels, scores))
}

/// Serialize a training trace as CSV.
pub fn trace_to_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_loss, row.lr
        ));
    }
    out
}

/// For each lead time: truncate every record's history, rebuild the
/// vocabulary and graphs from the training split, run full
/// cross-validation, and evaluate the fold ensemble on the test split.
/// The train/test split is decided once per lead with the same seed, so
/// membership is identical across leads.
pub fn sensitivity_sweep(
    records: &[CohortRecord],
    leads: &[i64],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    tau: i64,
    test_fraction: f64,
) -> Result<Vec<(i64, EvalReport)>, TrainError> {
    if leads.is_empty() {
        return Err(TrainError::InvalidConfig("lead list is empty".into()));
    }
    let mut out = Vec::with_capacity(leads.len());
    for &lead in leads {
        let truncated: Vec<CohortRecord> = records
            .iter()
            .map(|r| r.apply_prediction_interval(lead))
            .collect();
        let (train, test) = stratified_split(&truncated, test_fraction, train_config.seed)?;
        let vocab = vocab_from_records(&train)?;
        let encoded_train = encode_cohort(&train, &vocab, tau)?;
        let encoded_test = encode_cohort(&test, &vocab, tau)?;
        let outcomes = cross_validate(&encoded_train, model_config, train_config)?;
        let fold_params: Vec<ModelParams> = outcomes.into_iter().map(|o| o.params).collect();
        let (report, _) = evaluate_ensemble(&fold_params, &encoded_test, model_config, train_config)?;
        out.push((lead, report));
    }
    Ok(out)
}

/// One CSV row per (lead, metric) with the t-interval bounds.
pub fn sweep_to_csv(rows: &[(i64, EvalReport)]) -> String {
    let mut out = String::from("lead_days,metric,mean,ci_lo,ci_hi\n");
    for (lead, report) in rows {
        for (name, ci) in [
            ("auroc", report.auroc),
            ("ap", report.ap),
            ("f1", report.f1),
        ] {
            out.push_str(&format!(
                "{lead},{name},{},{},{}\n",
                ci.mean, ci.lo, ci.hi
            ));
        }
    }
    out
}
