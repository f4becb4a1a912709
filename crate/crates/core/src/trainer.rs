//! Supervised training of the two-stage matching model, joint and
//! sequential regimes, and evaluation.
//!
//! Batches are data-parallel across pairs: each worker owns a tape, computes
//! the pair's loss and gradients independently, and a fixed-order reduction
//! averages gradients and batch-norm statistics before one Adam step, so
//! runs are reproducible regardless of scheduling.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{
    refine, ConsensusConfig, ConsensusError, IterStats, Normalization, RefineCtx, ScoreState,
};
use crate::correspondence::{
    feature_match_t, hits_at_k, hits_at_k_sparse, row_softmax_normalize_t, sinkhorn_normalize_t,
    topk_sparsify, CorrespondenceError, SparseCorrespondence, NEG_MASK,
};
use crate::diff::{adam_step, checkpoint, AdamParams, AdamState, BnBatchStat, DiffError, Tape, TensorId};
use crate::gnn::{gnn_bound_ids, gnn_forward, mlp_bound_ids, FwdCtx, GnnConfig, GnnParams, MlpParams};
use crate::graph::{degree_one_hot, GraphError, MatchPair, SyntheticConfig};
use crate::seeding::{rng_derived, rng_from, SeededRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("numeric fault in epoch {epoch}{}", checkpoint_note(.checkpoint))]
    Numeric { epoch: usize, checkpoint: Option<PathBuf> },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

fn checkpoint_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (state checkpointed to {})", p.display()),
        None => String::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Backpropagate the summed initial and refined losses end to end.
    Joint,
    /// Optimize the initial loss first, then freeze the matching network and
    /// optimize the refinement loss (`epochs` applies to each phase).
    Sequential,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub regime: Regime,
    /// Weights of (initial, refined) loss terms.
    pub loss_weights: (f64, f64),
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamHyper,
    /// Cap on eval pairs used for the per-epoch history rows.
    pub eval_subset: Option<usize>,
    /// Where to checkpoint state when a numeric fault aborts an epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Serde-friendly mirror of [`AdamParams`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        let d = AdamParams::default();
        Self { beta1: d.beta1, beta2: d.beta2, eps: d.eps }
    }
}

impl From<AdamHyper> for AdamParams {
    fn from(h: AdamHyper) -> Self {
        Self { beta1: h.beta1, beta2: h.beta2, eps: h.eps }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            regime: Regime::Joint,
            loss_weights: (1.0, 1.0),
            seed: 0,
            adam: AdamHyper::default(),
            eval_subset: Some(64),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The three trainable bundles: matching network, consensus network, and the
/// scalar update head.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub theta1: GnnParams,
    pub theta2: GnnParams,
    pub theta3: MlpParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    All,
    Theta1Only,
    ConsensusOnly,
}

impl ModelParams {
    /// Initialize all three bundles; the update head reads the consensus
    /// network's embedding difference and emits one score.
    pub fn init(
        gnn1: &GnnConfig,
        gnn2: &GnnConfig,
        theta3_depth: usize,
        theta3_hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, TrainError> {
        if gnn2.dropout != 0.0 {
            return Err(TrainError::Config("consensus network must not use dropout".into()));
        }
        gnn1.validate().map_err(TrainError::Config)?;
        gnn2.validate().map_err(TrainError::Config)?;
        let theta1 = GnnParams::init(gnn1, rng);
        let theta2 = GnnParams::init(gnn2, rng);
        let theta3 = MlpParams::with_linear_head(
            gnn2.output_dim(),
            theta3_hidden,
            theta3_depth,
            1,
            gnn2.use_norm,
            rng,
        );
        Ok(Self { theta1, theta2, theta3 })
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.theta1.named("theta1", &mut out);
        self.theta2.named("theta2", &mut out);
        self.theta3.named("theta3", &mut out);
        out
    }

    fn named_params_mut_filtered(&mut self, set: TrainableSet) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        if matches!(set, TrainableSet::All | TrainableSet::Theta1Only) {
            self.theta1.named_mut("theta1", &mut out);
        }
        if matches!(set, TrainableSet::All | TrainableSet::ConsensusOnly) {
            self.theta2.named_mut("theta2", &mut out);
            self.theta3.named_mut("theta3", &mut out);
        }
        out
    }

    /// All tensors persisted in a checkpoint: parameters plus batch-norm
    /// running statistics.
    pub fn checkpoint_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.named_params();
        self.theta1.bn_buffers("theta1", &mut out);
        self.theta2.bn_buffers("theta2", &mut out);
        self.theta3.bn_buffers("theta3", &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let named = self.checkpoint_tensors();
        let owned: Vec<(String, &Array2<f64>)> = named;
        checkpoint::save(path, &owned)?;
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<(), TrainError> {
        let loaded = checkpoint::load(path)?;
        {
            let mut dest = Vec::new();
            self.theta1.named_mut("theta1", &mut dest);
            self.theta2.named_mut("theta2", &mut dest);
            self.theta3.named_mut("theta3", &mut dest);
            checkpoint::restore_into(&loaded, &mut dest)?;
        }
        let mut buffers = Vec::new();
        self.theta1.bn_buffers_mut("theta1", &mut buffers);
        self.theta2.bn_buffers_mut("theta2", &mut buffers);
        self.theta3.bn_buffers_mut("theta3", &mut buffers);
        checkpoint::restore_into(&loaded, &mut buffers)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

/// Attach shared-width degree one-hot features to both graphs of a pair.
pub fn attach_degree_features(pair: MatchPair, max_degree: usize) -> Result<MatchPair, GraphError> {
    let xs = degree_one_hot(&pair.source, max_degree);
    let xt = degree_one_hot(&pair.target, max_degree);
    MatchPair::new(
        pair.source.with_node_features(xs)?,
        pair.target.with_node_features(xt)?,
        pair.ground_truth,
    )
}

/// Generate `count` featureful pairs from one synthetic family; pair i draws
/// its own stream from `(cfg.seed, i)`.
pub fn synthetic_dataset(
    cfg: &SyntheticConfig,
    count: usize,
    max_degree: usize,
) -> Result<Vec<MatchPair>, GraphError> {
    (0..count)
        .map(|i| {
            let mut rng = rng_derived(cfg.seed, &[0xDA7A, i as u64]);
            let pair = cfg.generate(&mut rng)?;
            attach_degree_features(pair, max_degree)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Per-pair forward
// ---------------------------------------------------------------------------

struct PairOutcome {
    loss: f64,
    grads: Vec<Array2<f64>>,
    bn_stats: Vec<BnBatchStat>,
}

/// Indices into a flat row-major matrix for `(row, col)` pairs.
fn flat_indices(width: usize, cols: &[usize]) -> Vec<usize> {
    cols.iter().enumerate().map(|(r, &c)| r * width + c).collect()
}

/// Build the sparse support tensor for the initial loss: stored candidates
/// plus the ground-truth slot plus `k` random negatives, deduplicated, with
/// additive masking for the ragged tail.
fn sparse_initial_support(
    pattern: &SparseCorrespondence,
    negatives: &[Vec<usize>],
) -> (Vec<usize>, Vec<usize>, Vec<usize>, usize) {
    let n = pattern.num_sources();
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut gt_pos = Vec::with_capacity(n);
    for r in 0..n {
        let mut support: Vec<usize> = pattern.candidates(r).to_vec();
        for &neg in &negatives[r] {
            if !support.contains(&neg) {
                support.push(neg);
            }
        }
        let gt_col = pattern.gt_col.as_ref().expect("training support requires gt")[r];
        gt_pos.push(gt_col);
        rows.push(support);
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mut idx = vec![0usize; n * width];
    let mut len = vec![0usize; n];
    for (r, row) in rows.iter().enumerate() {
        len[r] = row.len();
        for c in 0..width {
            idx[r * width + c] = *row.get(c).unwrap_or(&row[0]);
        }
    }
    (idx, len, gt_pos, width)
}

struct ForwardSpec<'a> {
    pair: &'a MatchPair,
    ccfg: &'a ConsensusConfig,
    iters: usize,
    training: bool,
    trainable: TrainableSet,
    loss_weights: (f64, f64),
    /// Per-row random negative target indices (sparse initial loss only).
    negatives: Option<&'a [Vec<usize>]>,
    rng_seed: u64,
    record_trace: bool,
}

struct ForwardArtifacts {
    loss_value: f64,
    loss_id: Option<TensorId>,
    tape: Tape,
    param_ids: Vec<TensorId>,
    /// Values needed for metrics.
    s0: Array2<f64>,
    refined_normalized: Array2<f64>,
    pattern: Option<SparseCorrespondence>,
    trace: Vec<IterStats>,
}

/// One full forward pass (and optionally the loss graph) for a pair.
fn forward_pair(model: &ModelParams, spec: &ForwardSpec) -> Result<ForwardArtifacts, TrainError> {
    let pair = spec.pair;
    let x_s = pair
        .source
        .node_features()
        .ok_or_else(|| TrainError::Config("pair is missing source node features".into()))?;
    let x_t = pair
        .target
        .node_features()
        .ok_or_else(|| TrainError::Config("pair is missing target node features".into()))?;

    let mut tape = Tape::new();
    let t1_trainable = spec.training && matches!(spec.trainable, TrainableSet::All | TrainableSet::Theta1Only);
    let t23_trainable = spec.training && matches!(spec.trainable, TrainableSet::All | TrainableSet::ConsensusOnly);
    let b1 = model.theta1.bind(&mut tape, "theta1", t1_trainable);
    let b2 = model.theta2.bind(&mut tape, "theta2", t23_trainable);
    let b3 = model.theta3.bind(&mut tape, "theta3", t23_trainable);
    let mut param_ids = Vec::new();
    if t1_trainable {
        gnn_bound_ids(&b1, &mut param_ids);
    }
    if t23_trainable {
        gnn_bound_ids(&b2, &mut param_ids);
        mlp_bound_ids(&b3, &mut param_ids);
    }

    let mut rng = rng_from(spec.rng_seed);
    let adj_s = pair.source.adjacency();
    let adj_t = pair.target.adjacency();
    let xs_id = tape.constant(x_s.clone());
    let xt_id = tape.constant(x_t.clone());

    // Stage one. A frozen matching network runs in eval mode (running batch
    // statistics, no dropout).
    let (h_s, h_t) = {
        let mut ctx = if t1_trainable || !spec.training {
            FwdCtx { training: spec.training, rng: Some(&mut rng) }
        } else {
            FwdCtx::eval()
        };
        let h_s = gnn_forward(&mut tape, &b1, xs_id, &adj_s, &mut ctx)?;
        let h_t = gnn_forward(&mut tape, &b1, xt_id, &adj_t, &mut ctx)?;
        (h_s, h_t)
    };
    let s0 = feature_match_t(&mut tape, h_s, h_t)?;
    let s0_values = tape.value(s0).clone();
    let n_t = pair.target.num_nodes();
    let gt = &pair.ground_truth;

    let mut ctx = FwdCtx { training: spec.training, rng: Some(&mut rng) };

    let (loss_init, refine_state, pattern, rc) = match spec.ccfg.sparse_k {
        None => {
            let (_, s0_log) = match spec.ccfg.normalization {
                Normalization::Sinkhorn => {
                    let (p, lp, _) = sinkhorn_normalize_t(
                        &mut tape,
                        s0,
                        spec.ccfg.sinkhorn_max_iters,
                        spec.ccfg.sinkhorn_tol,
                    )?;
                    (p, lp)
                }
                Normalization::RowSoftmax => row_softmax_normalize_t(&mut tape, s0)?,
            };
            let loss_init = tape.nll_from_log_probs(s0_log, gt)?;
            let rc = RefineCtx::dense(Arc::clone(&adj_s), Arc::clone(&adj_t));
            (loss_init, ScoreState::Dense { scores: s0 }, None, rc)
        }
        Some(k) => {
            let with_gt = spec.training.then_some(gt.as_slice());
            let pattern = topk_sparsify(&s0_values, k, with_gt)?;
            // Stored candidate scores as a tape tensor, gathered from the
            // dense scores then masked additively on the ragged tail.
            let flat = tape.reshape(s0, pair.source.num_nodes() * n_t, 1)?;
            let gather_idx: Vec<usize> = pattern
                .indices
                .iter()
                .enumerate()
                .map(|(slot, &j)| (slot / pattern.width) * n_t + j)
                .collect();
            let gathered = tape.gather_rows(flat, Arc::new(gather_idx))?;
            let stored = tape.reshape(gathered, pattern.num_sources(), pattern.width)?;
            let mask = Array2::from_shape_fn((pattern.num_sources(), pattern.width), |(r, c)| {
                if c < pattern.row_len[r] { 0.0 } else { NEG_MASK }
            });
            let mask_id = tape.constant(mask);
            let stored = tape.add(stored, mask_id)?;

            // Initial loss over candidates + gt + random negatives.
            let loss_init = match spec.negatives {
                Some(neg) => {
                    let (idx, lens, gt_pos, width) = sparse_initial_support(&pattern, neg);
                    let gidx: Vec<usize> = idx
                        .iter()
                        .enumerate()
                        .map(|(slot, &j)| (slot / width) * n_t + j)
                        .collect();
                    let g = tape.gather_rows(flat, Arc::new(gidx))?;
                    let sup = tape.reshape(g, pattern.num_sources(), width)?;
                    let mask = Array2::from_shape_fn((pattern.num_sources(), width), |(r, c)| {
                        if c < lens[r] { 0.0 } else { NEG_MASK }
                    });
                    let m = tape.constant(mask);
                    let sup = tape.add(sup, m)?;
                    let (_, log_sup) = row_softmax_normalize_t(&mut tape, sup)?;
                    let flat_gt = flat_indices(width, &gt_pos);
                    let picked = {
                        let f = tape.reshape(log_sup, pattern.num_sources() * width, 1)?;
                        tape.gather_rows(f, Arc::new(flat_gt))?
                    };
                    let total = tape.reduce_sum(picked)?;
                    tape.scale(total, -1.0)?
                }
                None => {
                    // Eval-style initial loss over the stored support.
                    let (_, log_stored) = row_softmax_normalize_t(&mut tape, stored)?;
                    match &pattern.gt_col {
                        Some(cols) => tape.nll_from_log_probs(log_stored, cols)?,
                        None => tape.scalar(f64::NAN),
                    }
                }
            };
            let rc = RefineCtx::sparse(Arc::clone(&adj_s), Arc::clone(&adj_t), &pattern);
            (loss_init, ScoreState::Sparse { scores: stored, pattern: pattern.clone() }, Some(pattern), rc)
        }
    };

    let trace_gt = spec.record_trace.then_some(gt.as_slice());
    let refined = refine(
        &mut tape,
        &rc,
        &b2,
        &b3,
        refine_state,
        spec.ccfg,
        spec.iters,
        &mut ctx,
        trace_gt,
    )?;

    let (loss_value, loss_id) = if spec.training {
        let loss_ref = match &pattern {
            Some(p) => {
                let cols = p.gt_col.as_ref().expect("training requires gt support");
                tape.nll_from_log_probs(refined.log_normalized, cols)?
            }
            None => tape.nll_from_log_probs(refined.log_normalized, gt)?,
        };
        let wi = tape.scale(loss_init, spec.loss_weights.0)?;
        let wr = tape.scale(loss_ref, spec.loss_weights.1)?;
        let loss = tape.add(wi, wr)?;
        (tape.value(loss)[[0, 0]], Some(loss))
    } else {
        let loss_ref = match &pattern {
            Some(p) => match &p.gt_col {
                Some(cols) => tape.nll_from_log_probs(refined.log_normalized, cols)?,
                None => tape.scalar(f64::NAN),
            },
            None => tape.nll_from_log_probs(refined.log_normalized, gt)?,
        };
        (tape.value(loss_ref)[[0, 0]], None)
    };

    Ok(ForwardArtifacts {
        loss_value,
        loss_id,
        refined_normalized: tape.value(refined.normalized).clone(),
        s0: s0_values,
        pattern,
        trace: refined.trace,
        param_ids,
        tape,
    })
}

fn pair_gradients(model: &ModelParams, spec: &ForwardSpec) -> Result<PairOutcome, TrainError> {
    let mut art = forward_pair(model, spec)?;
    let loss = art.loss_id.expect("training forward records a loss");
    if !art.loss_value.is_finite() {
        return Err(TrainError::Diff(DiffError::NumericFault { op: "loss" }));
    }
    art.tape.backward(loss)?;
    let grads = art
        .param_ids
        .iter()
        .map(|&id| {
            art.tape
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(art.tape.shape(id)))
        })
        .collect();
    Ok(PairOutcome { loss: art.loss_value, grads, bn_stats: art.tape.take_bn_stats() })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_hits1_l0: f64,
    pub eval_hits1_ltest: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,eval_hits1_L0,eval_hits1_Ltest";

pub fn write_history_csv(out: &mut dyn std::io::Write, rows: &[EpochStats]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.eval_hits1_l0, r.eval_hits1_ltest)?;
    }
    Ok(())
}

/// Train in place; returns per-epoch history. The sequential regime runs the
/// configured epoch budget twice, first on the initial loss (matching
/// network only), then on the refined loss with the matching network frozen.
pub fn train(
    dataset: &[MatchPair],
    eval_set: &[MatchPair],
    model: &mut ModelParams,
    tcfg: &TrainConfig,
    ccfg: &ConsensusConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    tcfg.validate()?;
    ccfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    match tcfg.regime {
        Regime::Joint => train_phase(dataset, eval_set, model, tcfg, ccfg, TrainableSet::All, 0),
        Regime::Sequential => {
            let mut history =
                train_phase(dataset, eval_set, model, tcfg, ccfg, TrainableSet::Theta1Only, 0)?;
            let second = train_phase(
                dataset,
                eval_set,
                model,
                tcfg,
                ccfg,
                TrainableSet::ConsensusOnly,
                tcfg.epochs,
            )?;
            history.extend(second);
            Ok(history)
        }
    }
}

fn train_phase(
    dataset: &[MatchPair],
    eval_set: &[MatchPair],
    model: &mut ModelParams,
    tcfg: &TrainConfig,
    ccfg: &ConsensusConfig,
    trainable: TrainableSet,
    epoch_offset: usize,
) -> Result<Vec<EpochStats>, TrainError> {
    let shapes: Vec<(usize, usize)> = {
        let named = model.named_params_mut_filtered(trainable);
        named.iter().map(|(_, a)| a.dim()).collect()
    };
    let mut adam = AdamState::new(&shapes);
    let mut history = Vec::with_capacity(tcfg.epochs);
    // Iterations and loss terms active in this phase.
    let (iters, loss_weights) = match trainable {
        TrainableSet::Theta1Only => (0, (tcfg.loss_weights.0, 0.0)),
        TrainableSet::ConsensusOnly => (ccfg.num_iters_train, (0.0, tcfg.loss_weights.1)),
        TrainableSet::All => (ccfg.num_iters_train, tcfg.loss_weights),
    };

    for epoch in 1..=tcfg.epochs {
        let global_epoch = epoch_offset + epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_derived(tcfg.seed, &[0xE70C, global_epoch as u64]));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let outcomes: Vec<Result<PairOutcome, TrainError>> = batch
                .par_iter()
                .map(|&idx| {
                    let pair = &dataset[idx];
                    let negatives = ccfg.sparse_k.map(|k| {
                        sample_negatives(pair, k, tcfg.seed, global_epoch as u64, idx as u64)
                    });
                    let spec = ForwardSpec {
                        pair,
                        ccfg,
                        iters,
                        training: true,
                        trainable,
                        loss_weights,
                        negatives: negatives.as_deref(),
                        rng_seed: crate::seeding::derive(
                            tcfg.seed,
                            &[0xF0, global_epoch as u64, idx as u64],
                        ),
                        record_trace: false,
                    };
                    pair_gradients(model, &spec)
                })
                .collect();

            let mut sum_grads: Option<Vec<Array2<f64>>> = None;
            let mut bn_acc: Vec<BnBatchStat> = Vec::new();
            let mut n_ok = 0usize;
            for outcome in outcomes {
                let out = match outcome {
                    Ok(o) => o,
                    Err(TrainError::Diff(DiffError::NumericFault { .. })) => {
                        let ckpt = fault_checkpoint(model, tcfg, global_epoch);
                        return Err(TrainError::Numeric { epoch: global_epoch, checkpoint: ckpt });
                    }
                    Err(e) => return Err(e),
                };
                epoch_loss += out.loss;
                n_ok += 1;
                match &mut sum_grads {
                    None => sum_grads = Some(out.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&out.grads) {
                            *a += g;
                        }
                    }
                }
                bn_acc.extend(out.bn_stats);
            }
            let Some(mut grads) = sum_grads else { continue };
            let scale = 1.0 / n_ok as f64;
            for g in &mut grads {
                g.mapv_inplace(|v| v * scale);
            }
            {
                let mut named = model.named_params_mut_filtered(trainable);
                let mut refs: Vec<&mut Array2<f64>> = named.iter_mut().map(|(_, a)| &mut **a).collect();
                adam_step(&mut refs, &grads, &mut adam, tcfg.learning_rate, tcfg.adam.into());
            }
            apply_bn_updates(model, &bn_acc);
        }

        let train_loss = epoch_loss / dataset.len() as f64;
        let eval_pairs = tcfg.eval_subset.map_or(eval_set, |cap| &eval_set[..eval_set.len().min(cap)]);
        let (l0, lt) = if eval_pairs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let rows = evaluate(eval_pairs, model, ccfg, ccfg.num_iters_test, &[1], tcfg.seed)?;
            let find = |name: &str| rows.iter().find(|r| r.metric == name && r.k == 1).map(|r| r.value);
            (find("hits_l0").unwrap_or(f64::NAN), find("hits_refined").unwrap_or(f64::NAN))
        };
        history.push(EpochStats {
            epoch: global_epoch,
            train_loss,
            eval_hits1_l0: l0,
            eval_hits1_ltest: lt,
        });
    }
    Ok(history)
}

fn fault_checkpoint(model: &ModelParams, tcfg: &TrainConfig, epoch: usize) -> Option<PathBuf> {
    let dir = tcfg.checkpoint_dir.as_ref()?;
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("fault_epoch{epoch}.ckpt.json"));
    model.save(&path).ok()?;
    Some(path)
}

/// Uniform negative target draws excluding the ground truth; fresh per epoch.
fn sample_negatives(pair: &MatchPair, k: usize, seed: u64, epoch: u64, idx: u64) -> Vec<Vec<usize>> {
    let n_t = pair.target.num_nodes();
    let mut rng = rng_derived(seed, &[0x9E6, epoch, idx]);
    pair.ground_truth
        .iter()
        .map(|&gt| {
            let mut row = Vec::with_capacity(k);
            while row.len() < k {
                let j = rng.random_range(0..n_t);
                if j != gt {
                    row.push(j);
                }
            }
            row
        })
        .collect()
}

/// Average per-key batch statistics and fold them into the running stats.
fn apply_bn_updates(model: &mut ModelParams, stats: &[BnBatchStat]) {
    if stats.is_empty() {
        return;
    }
    let mut sites = Vec::new();
    model.theta1.bn_sites_mut("theta1", &mut sites);
    model.theta2.bn_sites_mut("theta2", &mut sites);
    model.theta3.bn_sites_mut("theta3", &mut sites);
    for (key, site) in sites {
        let matching: Vec<&BnBatchStat> = stats.iter().filter(|s| s.key == key).collect();
        if matching.is_empty() {
            continue;
        }
        let n = matching.len() as f64;
        let mut mean = Array2::zeros(matching[0].mean.dim());
        let mut var = Array2::zeros(matching[0].var_unbiased.dim());
        for s in &matching {
            mean += &s.mean;
            var += &s.var_unbiased;
        }
        mean.mapv_inplace(|v| v / n);
        var.mapv_inplace(|v| v / n);
        site.update_running(&mean, &var);
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Hits@k for the first stage (L = 0) and after `l_test` refinement
/// iterations; deterministic given `seed`.
pub fn evaluate(
    dataset: &[MatchPair],
    model: &ModelParams,
    ccfg: &ConsensusConfig,
    l_test: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<MetricRow>, TrainError> {
    let evals: Vec<Result<(Vec<f64>, Vec<f64>), TrainError>> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, pair)| {
            let spec = ForwardSpec {
                pair,
                ccfg,
                iters: l_test,
                training: false,
                trainable: TrainableSet::All,
                loss_weights: (1.0, 1.0),
                negatives: None,
                rng_seed: crate::seeding::derive(seed, &[0xEA1, idx as u64]),
                record_trace: false,
            };
            let art = forward_pair(model, &spec)?;
            let gt = &pair.ground_truth;
            let l0: Vec<f64> = ks.iter().map(|&k| hits_at_k(&art.s0, gt, k)).collect();
            let lt: Vec<f64> = match &art.pattern {
                Some(p) => {
                    let sc = p.with_scores(art.refined_normalized.clone());
                    ks.iter().map(|&k| hits_at_k_sparse(&sc, gt, k)).collect()
                }
                None => ks.iter().map(|&k| hits_at_k(&art.refined_normalized, gt, k)).collect(),
            };
            Ok((l0, lt))
        })
        .collect();

    let mut l0_sum = vec![0.0; ks.len()];
    let mut lt_sum = vec![0.0; ks.len()];
    for e in evals {
        let (l0, lt) = e?;
        for i in 0..ks.len() {
            l0_sum[i] += l0[i];
            lt_sum[i] += lt[i];
        }
    }
    let n = dataset.len().max(1) as f64;
    let mut rows = Vec::new();
    for (i, &k) in ks.iter().enumerate() {
        rows.push(MetricRow { metric: "hits_l0".into(), k, value: l0_sum[i] / n });
    }
    for (i, &k) in ks.iter().enumerate() {
        rows.push(MetricRow { metric: "hits_refined".into(), k, value: lt_sum[i] / n });
    }
    Ok(rows)
}

/// Eval-style refinement of a single pair, exposing the per-iteration trace
/// and the final normalized correspondences.
pub fn refine_pair_with_trace(
    pair: &MatchPair,
    model: &ModelParams,
    ccfg: &ConsensusConfig,
    l: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<IterStats>), TrainError> {
    let spec = ForwardSpec {
        pair,
        ccfg,
        iters: l,
        training: false,
        trainable: TrainableSet::All,
        loss_weights: (1.0, 1.0),
        negatives: None,
        rng_seed: crate::seeding::derive(seed, &[0xEA1, 0]),
        record_trace: true,
    };
    let art = forward_pair(model, &spec)?;
    let dense = match &art.pattern {
        Some(p) => p.with_scores(art.refined_normalized.clone()).densify(0.0),
        None => art.refined_normalized.clone(),
    };
    Ok((dense, art.trace))
}

/// Central finite differences of the full (joint) loss against the tape
/// gradient over a deterministic sample of parameter coordinates; returns
/// the maximum relative error.
pub fn joint_loss_fd_check(
    pair: &MatchPair,
    model: &ModelParams,
    ccfg: &ConsensusConfig,
    iters: usize,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let make_spec = || ForwardSpec {
        pair,
        ccfg,
        iters,
        training: true,
        trainable: TrainableSet::All,
        loss_weights: (1.0, 1.0),
        negatives: None,
        rng_seed: crate::seeding::derive(seed, &[0xFD]),
        record_trace: false,
    };
    // Analytic gradients once.
    let out = pair_gradients(model, &make_spec())?;
    let shapes: Vec<(usize, usize)> = out.grads.iter().map(|g| g.dim()).collect();
    let total: usize = shapes.iter().map(|&(r, c)| r * c).sum();
    let mut rng = rng_from(seed ^ 0x5EED);
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let flat = rng.random_range(0..total);
        // Locate (tensor, row, col).
        let mut rest = flat;
        let mut which = 0;
        for (t, &(r, c)) in shapes.iter().enumerate() {
            if rest < r * c {
                which = t;
                break;
            }
            rest -= r * c;
        }
        let (rows, cols) = shapes[which];
        let (r, c) = (rest / cols, rest % cols);
        let _ = rows;

        let probe = |delta: f64| -> Result<f64, TrainError> {
            let mut m = model.clone();
            {
                let mut named = m.named_params_mut_filtered(TrainableSet::All);
                *named[which].1.get_mut((r, c)).expect("in range") += delta;
            }
            let art = forward_pair(&m, &make_spec())?;
            Ok(art.loss_value)
        };
        let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
        let analytic = out.grads[which][[r, c]];
        worst = worst.max(crate::diff::grad_rel_error(analytic, fd));
    }
    Ok(worst)
}
