//! Score normalization, sparsification, losses, and ranking metrics over
//! soft correspondence matrices.
//!
//! Normalizations run in the log domain on the tape: raw scores are treated
//! as logits, so arbitrarily signed inputs are safe and the negative
//! log-likelihood can read log-probabilities directly.

use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::diff::{DiffError, Tape, TensorId};

/// Score assigned to padding slots of a rectangularized sparse row; close
/// enough to -inf that softmax mass vanishes while staying finite.
pub const NEG_MASK: f64 = -1.0e30;

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("ground truth for row {row} is not in the stored support")]
    GtNotInSupport { row: usize },
    #[error("top-k parameter {k} outside 1..={num_targets}")]
    InvalidK { k: usize, num_targets: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Dense soft correspondences: raw scores and, once normalized, a
/// row-stochastic (column-substochastic) matrix.
#[derive(Clone, Debug)]
pub struct DenseCorrespondence {
    pub scores: Array2<f64>,
    pub normalized: Option<Array2<f64>>,
}

impl DenseCorrespondence {
    pub fn new(scores: Array2<f64>) -> Self {
        Self { scores, normalized: None }
    }

    pub fn num_sources(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_targets(&self) -> usize {
        self.scores.ncols()
    }
}

/// Per-row top-k candidates plus an optional appended ground-truth slot.
///
/// Rows are rectangularized to a shared `width`; slots beyond `row_len[r]`
/// are padding with score [`NEG_MASK`] and a duplicated index, so the padded
/// matrices can flow through dense tape ops without affecting softmax mass.
#[derive(Clone, Debug)]
pub struct SparseCorrespondence {
    pub k: usize,
    pub num_targets: usize,
    pub width: usize,
    /// Flat `num_sources x width` candidate target indices.
    pub indices: Vec<usize>,
    pub scores: Array2<f64>,
    pub row_len: Vec<usize>,
    /// Column of the ground-truth entry per row (present when built with gt).
    pub gt_col: Option<Vec<usize>>,
}

impl SparseCorrespondence {
    pub fn num_sources(&self) -> usize {
        self.row_len.len()
    }

    pub fn candidates(&self, row: usize) -> &[usize] {
        &self.indices[row * self.width..row * self.width + self.row_len[row]]
    }

    /// Scatter stored scores into a dense matrix; unstored entries get `fill`.
    pub fn densify(&self, fill: f64) -> Array2<f64> {
        let n = self.num_sources();
        let mut out = Array2::from_elem((n, self.num_targets), fill);
        for r in 0..n {
            for (c, &j) in self.candidates(r).iter().enumerate() {
                out[[r, j]] = self.scores[[r, c]];
            }
        }
        out
    }

    /// Replace stored scores (same sparsity pattern), e.g. after refinement.
    pub fn with_scores(&self, scores: Array2<f64>) -> Self {
        assert_eq!(scores.dim(), self.scores.dim());
        Self { scores, ..self.clone() }
    }
}

// ---------------------------------------------------------------------------
// Feature matching
// ---------------------------------------------------------------------------

/// Initial scores as pairwise inner products of node embeddings.
pub fn feature_match_t(
    tape: &mut Tape,
    h_s: TensorId,
    h_t: TensorId,
) -> Result<TensorId, DiffError> {
    tape.matmul_nt(h_s, h_t)
}

pub fn feature_match(h_s: &Array2<f64>, h_t: &Array2<f64>) -> Result<Array2<f64>, DiffError> {
    let mut tape = Tape::new();
    let a = tape.constant(h_s.clone());
    let b = tape.constant(h_t.clone());
    let s = feature_match_t(&mut tape, a, b)?;
    Ok(tape.value(s).clone())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Tape-level sinkhorn in the log domain.
///
/// Scores are exponentiated implicitly; the rectangular matrix is padded
/// with zero-logit dummy rows to square, then rows and columns are
/// alternately normalized until the column sums of the square matrix deviate
/// from 1 by less than `tol` (checked after each row pass) or `max_iters`
/// passes run out. Dummy rows are dropped on return, which yields row sums
/// of 1 and column sums of at most 1.
///
/// Returns `(probabilities, log probabilities, converged)`.
pub fn sinkhorn_normalize_t(
    tape: &mut Tape,
    scores: TensorId,
    max_iters: usize,
    tol: f64,
) -> Result<(TensorId, TensorId, bool), DiffError> {
    let (n_s, n_t) = tape.shape(scores);
    let pad = n_t.saturating_sub(n_s);
    let mut k = if pad > 0 {
        let dummy = tape.constant(Array2::zeros((pad, n_t)));
        tape.concat_rows(&[scores, dummy])?
    } else {
        scores
    };

    let mut converged = false;
    for _ in 0..max_iters {
        let lse = tape.logsumexp_row(k)?;
        k = tape.sub_col_broadcast(k, lse)?;
        let dev = max_col_sum_deviation(tape.value(k));
        if dev < tol {
            converged = true;
            break;
        }
        let kt = tape.transpose(k)?;
        let lse_c = tape.logsumexp_row(kt)?;
        let kt = tape.sub_col_broadcast(kt, lse_c)?;
        k = tape.transpose(kt)?;
    }
    if !converged {
        // Land on a row pass so returned rows always sum to one.
        let lse = tape.logsumexp_row(k)?;
        k = tape.sub_col_broadcast(k, lse)?;
    }
    let log_s = if pad > 0 {
        let keep: Vec<usize> = (0..n_s).collect();
        tape.gather_rows(k, Arc::new(keep))?
    } else {
        k
    };
    let s = tape.exp(log_s)?;
    Ok((s, log_s, converged))
}

fn max_col_sum_deviation(log_k: &Array2<f64>) -> f64 {
    let mut dev = 0.0f64;
    for c in 0..log_k.ncols() {
        let sum: f64 = log_k.column(c).iter().map(|&v| v.exp()).sum();
        dev = dev.max((sum - 1.0).abs());
    }
    dev
}

/// Plain sinkhorn over a score matrix; returns the normalized matrix and a
/// convergence flag.
pub fn sinkhorn_normalize(
    scores: &Array2<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<(Array2<f64>, bool), DiffError> {
    let mut tape = Tape::new();
    let id = tape.constant(scores.clone());
    let (s, _, converged) = sinkhorn_normalize_t(&mut tape, id, max_iters, tol)?;
    Ok((tape.value(s).clone(), converged))
}

/// Row-wise softmax on the tape; returns `(probabilities, log probabilities)`.
pub fn row_softmax_normalize_t(
    tape: &mut Tape,
    scores: TensorId,
) -> Result<(TensorId, TensorId), DiffError> {
    let lse = tape.logsumexp_row(scores)?;
    let log_s = tape.sub_col_broadcast(scores, lse)?;
    let s = tape.exp(log_s)?;
    Ok((s, log_s))
}

pub fn row_softmax_normalize(scores: &Array2<f64>) -> Result<Array2<f64>, DiffError> {
    let mut tape = Tape::new();
    let id = tape.constant(scores.clone());
    let (s, _) = row_softmax_normalize_t(&mut tape, id)?;
    Ok(tape.value(s).clone())
}

// ---------------------------------------------------------------------------
// Sparsification
// ---------------------------------------------------------------------------

/// Keep the k highest-scoring target indices per row (ties toward the lower
/// index). When `gt` is given and a row's ground truth is missing from its
/// top k, it is appended as an extra training-only slot.
pub fn topk_sparsify(
    scores: &Array2<f64>,
    k: usize,
    gt: Option<&[usize]>,
) -> Result<SparseCorrespondence, CorrespondenceError> {
    let (n, m) = scores.dim();
    if k == 0 || k > m {
        return Err(CorrespondenceError::InvalidK { k, num_targets: m });
    }
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut gt_col: Vec<usize> = Vec::with_capacity(n);
    let mut any_appended = false;
    for r in 0..n {
        let row = scores.row(r);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite scores").then(a.cmp(&b))
        });
        let mut cand: Vec<usize> = order[..k].to_vec();
        if let Some(gt) = gt {
            match cand.iter().position(|&j| j == gt[r]) {
                Some(pos) => gt_col.push(pos),
                None => {
                    cand.push(gt[r]);
                    gt_col.push(k);
                    any_appended = true;
                }
            }
        }
        rows.push(cand);
    }
    let width = if any_appended { k + 1 } else { k };
    let mut indices = vec![0usize; n * width];
    let mut padded = Array2::from_elem((n, width), NEG_MASK);
    let mut row_len = Vec::with_capacity(n);
    for (r, cand) in rows.iter().enumerate() {
        row_len.push(cand.len());
        for c in 0..width {
            // Padding duplicates the first candidate so gathers stay valid.
            indices[r * width + c] = *cand.get(c).unwrap_or(&cand[0]);
        }
        for (c, &j) in cand.iter().enumerate() {
            padded[[r, c]] = scores[[r, j]];
        }
    }
    Ok(SparseCorrespondence {
        k,
        num_targets: m,
        width,
        indices,
        scores: padded,
        row_len,
        gt_col: gt.map(|_| gt_col),
    })
}

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

/// `-sum_i log S[i, gt(i)]` over a dense row-normalized matrix.
pub fn nll_loss_dense(s: &Array2<f64>, gt: &[usize]) -> f64 {
    gt.iter().enumerate().map(|(i, &j)| -s[[i, j]].ln()).sum()
}

/// Sparse variant over the stored support; requires the gt slot.
pub fn nll_loss_sparse(
    s: &SparseCorrespondence,
    normalized: &Array2<f64>,
) -> Result<f64, CorrespondenceError> {
    let gt_col = s.gt_col.as_ref().ok_or(CorrespondenceError::GtNotInSupport { row: 0 })?;
    let mut total = 0.0;
    for (r, &c) in gt_col.iter().enumerate() {
        if c >= s.row_len[r] {
            return Err(CorrespondenceError::GtNotInSupport { row: r });
        }
        total -= normalized[[r, c]].ln();
    }
    Ok(total)
}

/// Rank of target `j` within a scored row under "ties break toward the lower
/// index": the number of entries ranked strictly ahead of (score, index).
fn dense_rank(row: ndarray::ArrayView1<f64>, j: usize) -> usize {
    let sj = row[j];
    let mut rank = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > sj || (v == sj && c < j) {
            rank += 1;
        }
    }
    rank
}

/// Fraction of source nodes whose ground-truth target ranks in the top k.
pub fn hits_at_k(s: &Array2<f64>, gt: &[usize], k: usize) -> f64 {
    let hits = gt
        .iter()
        .enumerate()
        .filter(|&(i, &j)| dense_rank(s.row(i), j) < k)
        .count();
    hits as f64 / gt.len().max(1) as f64
}

/// Sparse counterpart; ground truth missing from the stored support never
/// counts as a hit.
pub fn hits_at_k_sparse(s: &SparseCorrespondence, gt: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for (r, &j) in gt.iter().enumerate() {
        let cand = s.candidates(r);
        let Some(pos) = cand.iter().position(|&c| c == j) else { continue };
        let sj = s.scores[[r, pos]];
        let mut rank = 0;
        for (c, &idx) in cand.iter().enumerate() {
            let v = s.scores[[r, c]];
            if v > sj || (v == sj && idx < j) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    hits as f64 / gt.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// CSV dumps
// ---------------------------------------------------------------------------

pub const CORRESPONDENCE_CSV_HEADER: &str = "source_index,rank,target_index,score";
pub const METRICS_CSV_HEADER: &str = "metric,k,value";

/// Dump every entry of a dense correspondence, ranked per source row.
pub fn write_correspondence_csv(out: &mut dyn Write, s: &Array2<f64>) -> std::io::Result<()> {
    writeln!(out, "{CORRESPONDENCE_CSV_HEADER}")?;
    for (i, row) in s.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
        for (rank, &j) in order.iter().enumerate() {
            writeln!(out, "{i},{rank},{j},{}", row[j])?;
        }
    }
    Ok(())
}

pub fn write_metrics_csv(out: &mut dyn Write, rows: &[(String, usize, f64)]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for (metric, k, value) in rows {
        writeln!(out, "{metric},{k},{value}")?;
    }
    Ok(())
}
