//! Finite-difference validation of every differentiable primitive and of the
//! composite losses, all against the central-difference oracle.

use std::sync::Arc;

use gmatch_core::consensus::{ConsensusConfig, IndicatorKind, Normalization};
use gmatch_core::correspondence::{row_softmax_normalize_t, sinkhorn_normalize_t};
use gmatch_core::diff::{finite_difference_check, DiffError, SparseMatrix, Tape, TensorId};
use gmatch_core::gnn::{GnnConfig, OperatorKind};
use gmatch_core::graph::{generate_erdos_renyi, MatchPair};
use gmatch_core::seeding::rng_from;
use gmatch_core::trainer::{attach_degree_features, joint_loss_fd_check, ModelParams};
use ndarray::Array2;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(r: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
}

/// Random linear functional of the op output, so every output coordinate
/// contributes to the scalar loss.
fn readout(tape: &mut Tape, out: TensorId, seed: u64) -> Result<TensorId, DiffError> {
    let (r, c) = tape.shape(out);
    let probe = tape.constant(random(r, c, seed ^ 0xABCD));
    let prod = tape.mul(out, probe)?;
    tape.reduce_sum(prod)
}

fn check_over_seeds<F>(name: &str, seeds: std::ops::Range<u64>, f: F)
where
    F: Fn(&mut Tape, TensorId, u64) -> Result<TensorId, DiffError>,
{
    for seed in seeds {
        let x = random(3, 4, seed);
        let err = finite_difference_check(|t, xid| f(t, xid, seed), &x, H)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(err < TOL, "{name} seed {seed}: max relative error {err}");
    }
}

#[test]
fn matmul_all_transpose_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        check_over_seeds(&format!("matmul ta={ta} tb={tb}"), 0..20, move |t, x, seed| {
            // Shape the constant operand so every variant composes with 3x4.
            let other = match (ta, tb) {
                (false, false) => t.constant(random(4, 5, seed ^ 1)),
                (true, false) => t.constant(random(3, 5, seed ^ 1)),
                (false, true) => t.constant(random(5, 4, seed ^ 1)),
                (true, true) => t.constant(random(5, 3, seed ^ 1)),
            };
            let out = t.matmul_opts(x, other, ta, tb)?;
            readout(t, out, seed)
        });
        // Also as the right operand.
        check_over_seeds(&format!("matmul rhs ta={ta} tb={tb}"), 0..20, move |t, x, seed| {
            let other = match (ta, tb) {
                (false, false) => t.constant(random(5, 3, seed ^ 2)),
                (true, false) => t.constant(random(3, 5, seed ^ 2)),
                (false, true) => t.constant(random(5, 4, seed ^ 2)),
                (true, true) => t.constant(random(4, 5, seed ^ 2)),
            };
            let out = t.matmul_opts(other, x, ta, tb)?;
            readout(t, out, seed)
        });
    }
}

#[test]
fn sparse_matmul_both_orientations() {
    let mut rng = rng_from(5);
    let g = generate_erdos_renyi(3, 0.8, &mut rng).unwrap();
    let adj = g.adjacency();
    for transpose in [false, true] {
        check_over_seeds(&format!("sparse_matmul t={transpose}"), 0..20, {
            let adj: Arc<SparseMatrix> = Arc::clone(&adj);
            move |t, x, seed| {
                let out = t.sparse_matmul(&adj, x, transpose)?;
                readout(t, out, seed)
            }
        });
    }
}

#[test]
fn elementwise_and_broadcast_primitives() {
    check_over_seeds("add", 0..20, |t, x, seed| {
        let other = t.constant(random(3, 4, seed ^ 3));
        let out = t.add(x, other)?;
        readout(t, out, seed)
    });
    check_over_seeds("add_row_broadcast", 0..20, |t, x, seed| {
        let row = t.constant(random(1, 4, seed ^ 4));
        let out = t.add_row_broadcast(x, row)?;
        readout(t, out, seed)
    });
    // Gradient w.r.t. the broadcast row itself.
    for seed in 0..20 {
        let row = random(1, 4, seed);
        let err = finite_difference_check(
            |t, rid| {
                let base = t.constant(random(3, 4, seed ^ 5));
                let out = t.add_row_broadcast(base, rid)?;
                readout(t, out, seed)
            },
            &row,
            H,
        )
        .unwrap();
        assert!(err < TOL, "row broadcast grad: {err}");
    }
    check_over_seeds("scale", 0..20, |t, x, seed| {
        let out = t.scale(x, -1.7)?;
        readout(t, out, seed)
    });
    check_over_seeds("mul", 0..20, |t, x, seed| {
        let other = t.constant(random(3, 4, seed ^ 6));
        let out = t.mul(x, other)?;
        readout(t, out, seed)
    });
    check_over_seeds("mul_col_broadcast", 0..20, |t, x, seed| {
        let col = t.constant(random(3, 1, seed ^ 7));
        let out = t.mul_col_broadcast(x, col)?;
        readout(t, out, seed)
    });
    for seed in 0..20 {
        let col = random(3, 1, seed);
        let err = finite_difference_check(
            |t, cid| {
                let base = t.constant(random(3, 4, seed ^ 8));
                let out = t.mul_col_broadcast(base, cid)?;
                readout(t, out, seed)
            },
            &col,
            H,
        )
        .unwrap();
        assert!(err < TOL, "col broadcast grad: {err}");
    }
    check_over_seeds("mul_scalar", 0..20, |t, x, seed| {
        let s = t.constant(random(1, 1, seed ^ 9));
        let out = t.mul_scalar(x, s)?;
        readout(t, out, seed)
    });
    check_over_seeds("sub_col_broadcast", 0..20, |t, x, seed| {
        let col = t.constant(random(3, 1, seed ^ 10));
        let out = t.sub_col_broadcast(x, col)?;
        readout(t, out, seed)
    });
}

#[test]
fn nonlinear_primitives() {
    check_over_seeds("relu", 0..20, |t, x, seed| {
        // Inputs are comfortably away from the kink at this scale.
        let out = t.relu(x)?;
        readout(t, out, seed)
    });
    check_over_seeds("exp", 0..20, |t, x, seed| {
        let out = t.exp(x)?;
        readout(t, out, seed)
    });
    check_over_seeds("log", 0..20, |t, x, seed| {
        // Shift into the strictly positive range.
        let three = t.constant(Array2::from_elem((3, 4), 3.0));
        let pos = t.add(x, three)?;
        let out = t.log(pos)?;
        readout(t, out, seed)
    });
    check_over_seeds("row_softmax", 0..20, |t, x, seed| {
        let out = t.row_softmax(x)?;
        readout(t, out, seed)
    });
    check_over_seeds("logsumexp_row", 0..20, |t, x, seed| {
        let out = t.logsumexp_row(x)?;
        readout(t, out, seed)
    });
}

#[test]
fn structural_primitives() {
    check_over_seeds("transpose", 0..20, |t, x, seed| {
        let out = t.transpose(x)?;
        readout(t, out, seed)
    });
    check_over_seeds("concat_cols", 0..20, |t, x, seed| {
        let other = t.constant(random(3, 2, seed ^ 11));
        let out = t.concat_cols(&[x, other, x])?;
        readout(t, out, seed)
    });
    check_over_seeds("concat_rows", 0..20, |t, x, seed| {
        let other = t.constant(random(2, 4, seed ^ 12));
        let out = t.concat_rows(&[other, x])?;
        readout(t, out, seed)
    });
    check_over_seeds("gather_rows", 0..20, |t, x, seed| {
        let idx = Arc::new(vec![2, 0, 0, 1, 2]);
        let out = t.gather_rows(x, idx)?;
        readout(t, out, seed)
    });
    check_over_seeds("scatter_add_rows", 0..20, |t, x, seed| {
        let idx = Arc::new(vec![1, 4, 1]);
        let out = t.scatter_add_rows(x, idx, 5)?;
        readout(t, out, seed)
    });
    check_over_seeds("reduce_sum", 0..20, |t, x, _| t.reduce_sum(x));
    check_over_seeds("reshape", 0..20, |t, x, seed| {
        let out = t.reshape(x, 6, 2)?;
        readout(t, out, seed)
    });
    check_over_seeds("dropout", 0..20, |t, x, seed| {
        let mut rng = rng_from(seed ^ 13);
        let mask = Arc::new(Array2::from_shape_fn((3, 4), |_| {
            if rng.random::<f64>() < 0.75 { 1.0 / 0.75 } else { 0.0 }
        }));
        let out = t.dropout(x, mask)?;
        readout(t, out, seed)
    });
}

#[test]
fn batch_norm_train_and_eval() {
    // Gradient w.r.t. the normalized input.
    check_over_seeds("batch_norm_train x", 0..20, |t, x, seed| {
        let gamma = t.constant(random(1, 4, seed ^ 14));
        let beta = t.constant(random(1, 4, seed ^ 15));
        let out = t.batch_norm_train(x, gamma, beta, 1e-5, "bn")?;
        readout(t, out, seed)
    });
    // Gradient w.r.t. gamma and beta.
    for seed in 0..10 {
        for which in 0..2 {
            let p = random(1, 4, seed);
            let err = finite_difference_check(
                |t, pid| {
                    let x = t.constant(random(3, 4, seed ^ 16));
                    let other = t.constant(random(1, 4, seed ^ 17));
                    let (g, b) = if which == 0 { (pid, other) } else { (other, pid) };
                    let out = t.batch_norm_train(x, g, b, 1e-5, "bn")?;
                    readout(t, out, seed)
                },
                &p,
                H,
            )
            .unwrap();
            assert!(err < TOL, "bn affine grad: {err}");
        }
    }
    check_over_seeds("batch_norm_eval x", 0..10, |t, x, seed| {
        let gamma = t.constant(random(1, 4, seed ^ 18));
        let beta = t.constant(random(1, 4, seed ^ 19));
        let mean = random(1, 4, seed ^ 20);
        let var = random(1, 4, seed ^ 21).mapv(f64::abs) + 0.5;
        let out = t.batch_norm_eval(x, gamma, beta, 1e-5, &mean, &var)?;
        readout(t, out, seed)
    });
}

#[test]
fn normalization_composites() {
    // Negative log-likelihood of a row-softmax.
    for seed in 0..20 {
        let x = random(3, 4, seed);
        let err = finite_difference_check(
            |t, xid| {
                let (_, logp) = row_softmax_normalize_t(t, xid)?;
                t.nll_from_log_probs(logp, &[1, 3, 0])
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "softmax nll: {err}");
    }
    // Sinkhorn with a fixed pass count (tol = 0 keeps the unrolled graph
    // identical across probes).
    for seed in 0..20 {
        let x = random(3, 5, seed);
        let err = finite_difference_check(
            |t, xid| {
                let (_, logp, _) = sinkhorn_normalize_t(t, xid, 8, 0.0)?;
                t.nll_from_log_probs(logp, &[1, 3, 0])
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "sinkhorn nll: {err}");
    }
}

/// A 5-node pair whose nodes are all structurally distinguishable, so the
/// forward pass keeps pre-activations away from rectifier kinks where
/// central differences are invalid.
fn small_pair(seed: u64) -> MatchPair {
    for attempt in 0.. {
        let mut rng = rng_from(seed + attempt);
        let g = generate_erdos_renyi(5, 0.5, &mut rng).unwrap();
        let degrees: Vec<usize> = (0..5).map(|i| g.degree(i)).collect();
        if degrees.iter().any(|&d| d == 0) {
            continue;
        }
        if !wl_distinct(&g) {
            continue; // interchangeable nodes collapse under batch statistics
        }
        let pair = MatchPair::new(g.clone(), g, (0..5).collect()).unwrap();
        return attach_degree_features(pair, 6).unwrap();
    }
    unreachable!()
}

fn wl_distinct(g: &gmatch_core::Graph) -> bool {
    use std::collections::BTreeMap;
    let n = g.num_nodes();
    let mut colors: Vec<u64> = (0..n).map(|i| g.degree(i) as u64).collect();
    for _ in 0..n {
        let mut palette: BTreeMap<(u64, Vec<u64>), u64> = BTreeMap::new();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut nb: Vec<u64> = g.in_neighbors(i).iter().map(|&j| colors[j]).collect();
            nb.sort_unstable();
            let key = (colors[i], nb);
            let fresh = palette.len() as u64;
            next.push(*palette.entry(key).or_insert(fresh));
        }
        if next == colors {
            break;
        }
        colors = next;
    }
    let mut seen = colors;
    seen.sort_unstable();
    seen.dedup();
    seen.len() == n
}

fn model_for(pair_feature_dim: usize, theta2_in: usize, use_norm: bool, seed: u64) -> ModelParams {
    let g1 = GnnConfig {
        operator: OperatorKind::Gin,
        num_layers: 2,
        in_dim: pair_feature_dim,
        hidden_dim: 6,
        out_dim: 6,
        mlp_depth: 2,
        use_norm,
        jumping_knowledge: true,
        dropout: 0.0,
    };
    let g2 = GnnConfig { in_dim: theta2_in, ..g1.clone() };
    ModelParams::init(&g1, &g2, 2, 6, &mut rng_from(seed)).unwrap()
}

/// The full joint loss on a 5-node pair, two refinement iterations, over a
/// random subsample of parameter coordinates.
#[test]
fn joint_loss_full_gradient_check() {
    let pair = small_pair(3);
    for (indicator, norm, theta2_in, use_norm) in [
        (IndicatorKind::Identity, Normalization::Sinkhorn, 5, true),
        (IndicatorKind::Random, Normalization::RowSoftmax, 6, false),
    ] {
        let model = model_for(7, theta2_in, use_norm, 11);
        let ccfg = ConsensusConfig {
            num_iters_train: 2,
            num_iters_test: 2,
            indicator,
            random_dim: 6,
            normalization: norm,
            sparse_k: None,
            sinkhorn_max_iters: 6,
            sinkhorn_tol: 0.0,
        };
        let err = joint_loss_fd_check(&pair, &model, &ccfg, 2, 60, H, 99).unwrap();
        assert!(err < TOL, "joint loss ({indicator:?}, {norm:?}): max rel err {err}");
    }
}

#[test]
fn sparse_joint_loss_gradient_check() {
    let pair = small_pair(7);
    let model = model_for(7, 6, false, 13);
    let ccfg = ConsensusConfig {
        num_iters_train: 2,
        num_iters_test: 2,
        indicator: IndicatorKind::Random,
        random_dim: 6,
        normalization: Normalization::RowSoftmax,
        sparse_k: Some(3),
        sinkhorn_max_iters: 6,
        sinkhorn_tol: 0.0,
    };
    let err = joint_loss_fd_check(&pair, &model, &ccfg, 2, 60, H, 101).unwrap();
    assert!(err < TOL, "sparse joint loss: max rel err {err}");
}
