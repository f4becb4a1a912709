//! Temporary diagnostics for training dynamics (to be deleted).
use gmatch_core::consensus::{ConsensusConfig, IndicatorKind, Normalization};
use gmatch_core::gnn::{GnnConfig, OperatorKind};
use gmatch_core::graph::{generate_erdos_renyi, Graph, MatchPair};
use gmatch_core::seeding::{rng_derived, rng_from};
use gmatch_core::trainer::*;
use rand::seq::SliceRandom;

fn wl_distinct(g: &Graph) -> bool {
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
        if next == colors { break; }
        colors = next;
    }
    let mut seen = colors;
    seen.sort_unstable();
    seen.dedup();
    seen.len() == n
}

fn iso_dataset(count: usize, n: usize, seed: u64, max_degree: usize) -> Vec<MatchPair> {
    let mut out = Vec::new();
    let mut attempt = 0u64;
    while out.len() < count {
        let mut rng = rng_derived(seed, &[attempt]);
        attempt += 1;
        let g = generate_erdos_renyi(n, 0.4, &mut rng).unwrap();
        if !wl_distinct(&g) { continue; }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let gt = Graph::new(n, false, edges).unwrap();
        let pair = MatchPair::new(g, gt, perm).unwrap();
        out.push(attach_degree_features(pair, max_degree).unwrap());
    }
    out
}

#[test]
#[ignore]
fn training_diagnostics() {
    let dataset = iso_dataset(20, 10, 21, 12);
    for (tag, epochs, batch, use_norm, normalization, hidden) in [
        ("base", 50usize, 10usize, true, Normalization::Sinkhorn, 8usize),
        ("batch5", 50, 5, true, Normalization::Sinkhorn, 8),
        ("epochs150", 150, 10, true, Normalization::Sinkhorn, 8),
        ("nonorm", 50, 10, false, Normalization::Sinkhorn, 8),
        ("softmax", 50, 10, true, Normalization::RowSoftmax, 8),
        ("hidden16", 50, 10, true, Normalization::Sinkhorn, 16),
    ] {
        let g1 = GnnConfig {
            operator: OperatorKind::Gin, num_layers: 2, in_dim: 13, hidden_dim: hidden,
            out_dim: hidden, mlp_depth: 2, use_norm, jumping_knowledge: true, dropout: 0.0,
        };
        let g2 = GnnConfig { in_dim: 10, ..g1.clone() };
        let mut model = ModelParams::init(&g1, &g2, 2, hidden, &mut rng_from(22)).unwrap();
        let tcfg = TrainConfig { epochs, batch_size: batch, eval_subset: Some(20), ..Default::default() };
        let ccfg = ConsensusConfig {
            num_iters_train: 3, num_iters_test: 5,
            indicator: IndicatorKind::Identity, random_dim: 8,
            normalization, sparse_k: None,
            sinkhorn_max_iters: 15, sinkhorn_tol: 1e-6,
        };
        let t0 = std::time::Instant::now();
        let history = train(&dataset, &dataset, &mut model, &tcfg, &ccfg).unwrap();
        let best = history.iter().map(|e| e.eval_hits1_ltest).fold(0.0, f64::max);
        let last = history.last().unwrap();
        eprintln!(
            "{tag}: best {best:.3} last_l0 {:.3} last_lt {:.3} loss {:.3} ({:.1}s)",
            last.eval_hits1_l0, last.eval_hits1_ltest, last.train_loss, t0.elapsed().as_secs_f64()
        );
    }
}
