//! Brute-force reference implementations. Test and acceptance support only;
//! everything here favors literal transcription over speed.

use itertools::Itertools;
use ndarray::Array2;
use thiserror::Error;

use crate::graph::{Graph, MatchPair};

/// Hard cap for factorial enumeration (8! = 40320 permutations).
pub const MAX_BRUTE_FORCE_NODES: usize = 8;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("graph with {0} nodes exceeds the brute-force cap of {MAX_BRUTE_FORCE_NODES}")]
    TooLarge(usize),
    #[error("matrix is not a partial injection (row {0} or its column violates one-to-one)")]
    ConstraintViolation(usize),
}

/// Verdict plus a witness whenever the verdict affirms existence.
#[derive(Clone, Debug)]
pub struct OracleReport<W> {
    pub verdict: bool,
    pub witness: Option<W>,
}

/// The edge-preserving quadratic objective, written as the literal quadruple
/// sum over all node pairs of both graphs.
pub fn qap_objective(pair: &MatchPair, s: &Array2<f64>) -> f64 {
    let a_s = pair.source.dense_adjacency();
    let a_t = pair.target.dense_adjacency();
    let n_s = pair.source.num_nodes();
    let n_t = pair.target.num_nodes();
    let mut total = 0.0;
    for i in 0..n_s {
        for ip in 0..n_s {
            if a_s[[i, ip]] == 0.0 {
                continue;
            }
            for j in 0..n_t {
                for jp in 0..n_t {
                    total += a_s[[i, ip]] * a_t[[j, jp]] * s[[i, j]] * s[[ip, jp]];
                }
            }
        }
    }
    total
}

/// Does `perm` (source node i -> target node perm[i]) describe an
/// isomorphism between two equally sized graphs?
pub fn is_isomorphism(g1: &Graph, g2: &Graph, perm: &[usize]) -> bool {
    if g1.num_nodes() != g2.num_nodes() || g1.num_edges() != g2.num_edges() {
        return false;
    }
    g1.edges().iter().all(|&(i, j)| g2.has_edge(perm[i], perm[j]))
}

/// Enumerate all permutations of equally sized graphs; verdict true iff some
/// permutation maps edges exactly onto edges.
pub fn brute_force_isomorphism(
    g1: &Graph,
    g2: &Graph,
) -> Result<OracleReport<Vec<usize>>, OracleError> {
    let n = g1.num_nodes();
    if n > MAX_BRUTE_FORCE_NODES {
        return Err(OracleError::TooLarge(n));
    }
    if g2.num_nodes() > MAX_BRUTE_FORCE_NODES {
        return Err(OracleError::TooLarge(g2.num_nodes()));
    }
    if n != g2.num_nodes() || g1.num_edges() != g2.num_edges() {
        return Ok(OracleReport { verdict: false, witness: None });
    }
    for perm in (0..n).permutations(n) {
        if is_isomorphism(g1, g2, &perm) {
            return Ok(OracleReport { verdict: true, witness: Some(perm) });
        }
    }
    Ok(OracleReport { verdict: false, witness: None })
}

/// Maximum of the quadratic objective over all injective mappings, by
/// enumeration. Source and target must both respect the node cap.
pub fn brute_force_qap_optimum(pair: &MatchPair) -> Result<(f64, Vec<usize>), OracleError> {
    let n_s = pair.source.num_nodes();
    let n_t = pair.target.num_nodes();
    if n_t > MAX_BRUTE_FORCE_NODES {
        return Err(OracleError::TooLarge(n_t));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_map = Vec::new();
    for targets in (0..n_t).permutations(n_s) {
        let mut s = Array2::zeros((n_s, n_t));
        for (i, &j) in targets.iter().enumerate() {
            s[[i, j]] = 1.0;
        }
        let obj = qap_objective(pair, &s);
        if obj > best {
            best = obj;
            best_map = targets;
        }
    }
    Ok((best, best_map))
}

/// A violating triple: node pair (i, j) is matched but source neighbor
/// `i_prime` has no matched partner among j's neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConsensusViolation {
    pub i: usize,
    pub j: usize,
    pub i_prime: usize,
}

/// Check the neighborhood-consensus criterion for a binary matching: for
/// every matched (i, j) and every source neighbor i' of i there must be a
/// matched (i', j') with j' a neighbor of j.
pub fn check_neighborhood_consensus(
    pair: &MatchPair,
    s: &Array2<f64>,
) -> Result<OracleReport<ConsensusViolation>, OracleError> {
    let n_s = pair.source.num_nodes();
    let n_t = pair.target.num_nodes();
    // Validate the one-to-one constraints of a partial injection.
    let mut col_used = vec![false; n_t];
    let mut matched: Vec<Option<usize>> = vec![None; n_s];
    for i in 0..n_s {
        let mut row_count = 0;
        for j in 0..n_t {
            let v = s[[i, j]];
            if v != 0.0 && v != 1.0 {
                return Err(OracleError::ConstraintViolation(i));
            }
            if v == 1.0 {
                row_count += 1;
                if col_used[j] {
                    return Err(OracleError::ConstraintViolation(i));
                }
                col_used[j] = true;
                matched[i] = Some(j);
            }
        }
        if row_count > 1 {
            return Err(OracleError::ConstraintViolation(i));
        }
    }
    for i in 0..n_s {
        let Some(j) = matched[i] else { continue };
        for &ip in pair.source.in_neighbors(i) {
            let ok = matched[ip]
                .map(|jp| pair.target.has_edge(jp, j) || pair.target.has_edge(j, jp))
                .unwrap_or(false);
            if !ok {
                return Ok(OracleReport {
                    verdict: false,
                    witness: Some(ConsensusViolation { i, j, i_prime: ip }),
                });
            }
        }
    }
    Ok(OracleReport { verdict: true, witness: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_erdos_renyi;
    use crate::seeding::rng_from;
    use rand::seq::SliceRandom;

    fn triangle() -> Graph {
        Graph::undirected(3, &[(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    fn path3() -> Graph {
        Graph::undirected(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn qap_objective_examples() {
        let pair = MatchPair::new(triangle(), triangle(), vec![0, 1, 2]).unwrap();
        assert_eq!(qap_objective(&pair, &Array2::eye(3)), 6.0);
        assert_eq!(qap_objective(&pair, &Array2::zeros((3, 3))), 0.0);
    }

    #[test]
    fn qap_objective_matches_matrix_identity() {
        use rand::Rng;
        let mut rng = rng_from(5);
        let g_s = generate_erdos_renyi(5, 0.5, &mut rng).unwrap();
        let g_t = generate_erdos_renyi(5, 0.5, &mut rng).unwrap();
        let pair = MatchPair::new(g_s, g_t, vec![0, 1, 2, 3, 4]).unwrap();
        let s = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..1.0));
        let quad = qap_objective(&pair, &s);
        let mat = crate::consensus::qap_objective_matrix(&pair, &s);
        assert!((quad - mat).abs() < 1e-12);
    }

    #[test]
    fn triangle_vs_path_is_not_isomorphic() {
        let report = brute_force_isomorphism(&triangle(), &path3()).unwrap();
        assert!(!report.verdict);
        assert!(report.witness.is_none());
    }

    #[test]
    fn triangle_vs_triangle_is_isomorphic() {
        let report = brute_force_isomorphism(&triangle(), &triangle()).unwrap();
        assert!(report.verdict);
        assert!(is_isomorphism(&triangle(), &triangle(), &report.witness.unwrap()));
    }

    #[test]
    fn planted_permutation_is_recovered_up_to_automorphism() {
        let mut rng = rng_from(77);
        let g = generate_erdos_renyi(7, 0.3, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let g2 = Graph::new(7, false, edges).unwrap();
        let report = brute_force_isomorphism(&g, &g2).unwrap();
        assert!(report.verdict);
        let witness = report.witness.unwrap();
        assert!(is_isomorphism(&g, &g2, &witness));
    }

    #[test]
    fn brute_force_is_symmetric() {
        let mut rng = rng_from(123);
        for seed in 0..10 {
            let g1 = generate_erdos_renyi(5, 0.4, &mut rng).unwrap();
            let g2 = if seed % 2 == 0 {
                g1.clone()
            } else {
                generate_erdos_renyi(5, 0.4, &mut rng).unwrap()
            };
            let a = brute_force_isomorphism(&g1, &g2).unwrap().verdict;
            let b = brute_force_isomorphism(&g2, &g1).unwrap().verdict;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn size_cap_is_enforced() {
        let mut rng = rng_from(9);
        let big = generate_erdos_renyi(9, 0.3, &mut rng).unwrap();
        assert!(matches!(
            brute_force_isomorphism(&big, &big),
            Err(OracleError::TooLarge(9))
        ));
    }

    #[test]
    fn isomorphism_objective_attains_edge_count() {
        // For a true isomorphism P, the objective equals the directed edge
        // count of the source graph.
        let mut rng = rng_from(21);
        let g = generate_erdos_renyi(6, 0.5, &mut rng).unwrap();
        let pair = MatchPair::new(g.clone(), g.clone(), (0..6).collect()).unwrap();
        let obj = qap_objective(&pair, &Array2::eye(6));
        assert_eq!(obj, g.num_edges() as f64);
        let (best, _) = brute_force_qap_optimum(&pair).unwrap();
        assert_eq!(best, g.num_edges() as f64);
    }

    #[test]
    fn consensus_check_identity_matching() {
        let g = triangle();
        let pair = MatchPair::new(g.clone(), g, vec![0, 1, 2]).unwrap();
        let report = check_neighborhood_consensus(&pair, &Array2::eye(3)).unwrap();
        assert!(report.verdict);
    }

    #[test]
    fn consensus_check_finds_violation_after_edge_removal() {
        // 2-path matched crosswise onto a 2-path missing its edge.
        let p = Graph::undirected(2, &[(0, 1)]).unwrap();
        let broken = Graph::undirected(2, &[]).unwrap();
        let pair = MatchPair::new(p, broken, vec![0, 1]).unwrap();
        let report = check_neighborhood_consensus(&pair, &Array2::eye(2)).unwrap();
        assert!(!report.verdict);
        let w = report.witness.unwrap();
        assert_eq!((w.i, w.j), (0, 0));
        assert_eq!(w.i_prime, 1);
    }

    #[test]
    fn consensus_check_rejects_non_injection() {
        let g = triangle();
        let pair = MatchPair::new(g.clone(), g, vec![0, 1, 2]).unwrap();
        let mut s = Array2::zeros((3, 3));
        s[[0, 0]] = 1.0;
        s[[1, 0]] = 1.0;
        assert!(matches!(
            check_neighborhood_consensus(&pair, &s),
            Err(OracleError::ConstraintViolation(_))
        ));
    }
}
