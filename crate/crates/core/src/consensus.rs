//! Per-cluster doubly stochastic weight matrices and average consensus.

use thiserror::Error;

use crate::graphs::{members_connected, DirectedGraph};

/// Power-iteration stopping tolerance on the iterate change.
pub const POWER_TOL: f64 = 1e-10;
/// Power-iteration iteration cap.
pub const POWER_MAX_ITER: usize = 10_000;
/// Largest row/column-sum error accepted as doubly stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("communication graph is not undirected")]
    AsymmetricComm,
    #[error("member set of cluster {} is empty", .0 + 1)]
    EmptyMembers(usize),
    #[error("members of cluster {} are not connected in the communication graph", .cluster + 1)]
    Disconnected { cluster: usize },
    #[error("agent {} is out of range for {n} agents", .agent + 1)]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("block is not doubly stochastic (error {error:e})")]
    NotStochastic { error: f64 },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Consensus weights of one cluster: a dense block over its sorted member
/// set, extended by the identity to all other agents.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    cluster: usize,
    agent_count: usize,
    members: Vec<usize>,
    block: Vec<f64>,
    rho: f64,
}

impl WeightMatrix {
    /// Wraps an explicit `m x m` row-major block after checking that it is
    /// non-negative and doubly stochastic.
    pub fn from_block(
        cluster: usize,
        agent_count: usize,
        mut members: Vec<usize>,
        block: Vec<f64>,
    ) -> Result<Self, ConsensusError> {
        if members.is_empty() {
            return Err(ConsensusError::EmptyMembers(cluster));
        }
        if let Some(&agent) = members.iter().find(|&&a| a >= agent_count) {
            return Err(ConsensusError::AgentOutOfRange { agent, n: agent_count });
        }
        let m = members.len();
        if block.len() != m * m {
            return Err(ConsensusError::DimensionMismatch {
                expected: m * m,
                got: block.len(),
            });
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&k| members[k]);
        let block: Vec<f64> = order
            .iter()
            .flat_map(|&a| order.iter().map(move |&b| (a, b)))
            .map(|(a, b)| block[a * m + b])
            .collect();
        members.sort_unstable();
        let error = stochastic_error(&block, m);
        if block.iter().any(|&v| v < 0.0 || !v.is_finite()) || error > STOCHASTIC_TOL {
            return Err(ConsensusError::NotStochastic { error });
        }
        let rho = contraction_factor_of(&block, m);
        Ok(Self {
            cluster,
            agent_count,
            members,
            block,
            rho,
        })
    }

    pub fn cluster(&self) -> usize {
        self.cluster
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn block(&self) -> &[f64] {
        &self.block
    }

    /// `ρ_l = ‖C_0 - 11ᵀ/n_l‖₂`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Entry of the full `N x N` matrix.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match (self.members.binary_search(&i), self.members.binary_search(&j)) {
            (Ok(a), Ok(b)) => self.block[a * self.size() + b],
            _ if i == j => 1.0,
            _ => 0.0,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    /// Largest deviation of any row or column sum from one.
    pub fn doubly_stochastic_error(&self) -> f64 {
        stochastic_error(&self.block, self.size())
    }
}

fn stochastic_error(block: &[f64], m: usize) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..m {
        let row: f64 = (0..m).map(|b| block[a * m + b]).sum();
        let col: f64 = (0..m).map(|b| block[b * m + a]).sum();
        worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    worst
}

/// Metropolis weights `1 / (1 + max(d_i, d_j))` between communicating
/// members, with `d` the degree in the full communication graph; the
/// diagonal completes each row.
pub fn metropolis_weights(
    comm: &DirectedGraph,
    cluster: usize,
    members: &[usize],
) -> Result<WeightMatrix, ConsensusError> {
    if !comm.is_symmetric() {
        return Err(ConsensusError::AsymmetricComm);
    }
    let n = comm.vertex_count();
    if members.is_empty() {
        return Err(ConsensusError::EmptyMembers(cluster));
    }
    if let Some(&agent) = members.iter().find(|&&a| a >= n) {
        return Err(ConsensusError::AgentOutOfRange { agent, n });
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if !members_connected(comm, &sorted) {
        return Err(ConsensusError::Disconnected { cluster });
    }
    let m = sorted.len();
    let mut block = vec![0.0; m * m];
    for a in 0..m {
        let i = sorted[a];
        let mut off = 0.0;
        for b in 0..m {
            let j = sorted[b];
            if a != b && comm.has_edge(i, j) {
                let w = 1.0 / (1.0 + comm.out_degree(i).max(comm.out_degree(j)) as f64);
                block[a * m + b] = w;
                off += w;
            }
        }
        block[a * m + a] = 1.0 - off;
    }
    WeightMatrix::from_block(cluster, n, sorted, block)
}

/// `ρ = ‖C_0 - 11ᵀ/n‖₂` by power iteration on `MᵀM`.
pub fn contraction_factor(w: &WeightMatrix) -> Result<f64, ConsensusError> {
    let error = w.doubly_stochastic_error();
    if error > STOCHASTIC_TOL {
        return Err(ConsensusError::NotStochastic { error });
    }
    Ok(contraction_factor_of(w.block(), w.size()))
}

fn contraction_factor_of(block: &[f64], m: usize) -> f64 {
    let u = 1.0 / m as f64;
    let dev: Vec<f64> = block.iter().map(|c| c - u).collect();
    let apply = |x: &[f64], transpose: bool| -> Vec<f64> {
        (0..m)
            .map(|a| {
                (0..m)
                    .map(|b| {
                        let e = if transpose { dev[b * m + a] } else { dev[a * m + b] };
                        e * x[b]
                    })
                    .sum()
            })
            .collect()
    };
    // Deterministic start with no special alignment to any eigenvector.
    let mut x: Vec<f64> = (0..m).map(|k| 1.0 + 0.5 * ((k as f64) * 1.618_033_988_75 + 0.3).sin()).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let y = apply(&apply(&x, false), true);
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = y.iter().map(|v| v / ny).collect();
        lambda = ny;
        let change = norm(&next.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        x = next;
        if change < POWER_TOL {
            break;
        }
    }
    lambda.sqrt()
}

/// Member values `μ(v)` for `v = 0..=T_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRun {
    pub history: Vec<Vec<f64>>,
}

impl ConsensusRun {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn initial(&self) -> &[f64] {
        &self.history[0]
    }

    pub fn last(&self) -> &[f64] {
        self.history.last().expect("non-empty history")
    }

    /// `‖n μ(v) - 1 Σ μ(0)‖`.
    pub fn disagreement(&self, v: usize) -> f64 {
        let total: f64 = self.initial().iter().sum();
        let n = self.initial().len() as f64;
        self.history[v]
            .iter()
            .map(|x| (n * x - total).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest deviation of a final member value from the exact average.
    pub fn residual(&self) -> f64 {
        let n = self.initial().len() as f64;
        let mean = self.initial().iter().sum::<f64>() / n;
        self.last().iter().map(|x| (x - mean).abs()).fold(0.0, f64::max)
    }
}

/// `μ(v+1) = C μ(v)` on the member block, summing in ascending member order.
pub fn run_consensus(w: &WeightMatrix, initial: &[f64], iterations: usize) -> Result<ConsensusRun, ConsensusError> {
    let m = w.size();
    if initial.len() != m {
        return Err(ConsensusError::DimensionMismatch {
            expected: m,
            got: initial.len(),
        });
    }
    let mut history = Vec::with_capacity(iterations + 1);
    history.push(initial.to_vec());
    for _ in 0..iterations {
        let prev = history.last().unwrap();
        let next: Vec<f64> = (0..m)
            .map(|a| {
                let row = &w.block[a * m..(a + 1) * m];
                row.iter().zip(prev).fold(0.0, |acc, (c, x)| acc + c * x)
            })
            .collect();
        history.push(next);
    }
    Ok(ConsensusRun { history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn undirected(n: usize, edges: &[(usize, usize)]) -> DirectedGraph {
        DirectedGraph::from_edges(n, edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)])).unwrap()
    }

    /// Largest absolute eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
    fn jacobi_spectral_radius(mut a: Vec<f64>, m: usize) -> f64 {
        for _ in 0..100 {
            let off: f64 = (0..m)
                .flat_map(|p| (0..m).map(move |q| (p, q)))
                .filter(|(p, q)| p != q)
                .map(|(p, q)| a[p * m + q].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..m {
                for q in p + 1..m {
                    let apq = a[p * m + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..m {
                        let akp = a[k * m + p];
                        let akq = a[k * m + q];
                        a[k * m + p] = c * akp - s * akq;
                        a[k * m + q] = s * akp + c * akq;
                    }
                    for k in 0..m {
                        let apk = a[p * m + k];
                        let aqk = a[q * m + k];
                        a[p * m + k] = c * apk - s * aqk;
                        a[q * m + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..m).map(|k| a[k * m + k].abs()).fold(0.0, f64::max)
    }

    #[test]
    fn singleton_block_is_one_with_zero_rho() {
        let g = undirected(3, &[(0, 1)]);
        let w = metropolis_weights(&g, 0, &[2]).unwrap();
        assert_eq!(w.block(), &[1.0]);
        assert_eq!(w.rho(), 0.0);
    }

    #[test]
    fn two_members_average_in_one_step() {
        let g = undirected(2, &[(0, 1)]);
        let w = metropolis_weights(&g, 0, &[0, 1]).unwrap();
        assert_eq!(w.block(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(w.rho(), 0.0);
    }

    #[test]
    fn path_of_three_contracts() {
        let g = undirected(3, &[(0, 1), (1, 2)]);
        let w = metropolis_weights(&g, 0, &[0, 1, 2]).unwrap();
        assert!(w.doubly_stochastic_error() < 1e-12);
        assert!(w.rho() > 0.0 && w.rho() < 1.0);
        // Weights use full-graph degrees: max(1, 2) = 2 on both edges.
        assert!((w.entry(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.entry(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.entry(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn entries_outside_members_are_identity() {
        let g = undirected(4, &[(0, 1), (1, 2), (2, 3)]);
        let w = metropolis_weights(&g, 0, &[1, 2]).unwrap();
        assert_eq!(w.entry(0, 0), 1.0);
        assert_eq!(w.entry(0, 1), 0.0);
        assert_eq!(w.entry(3, 2), 0.0);
        // degree of agents 1 and 2 in the whole graph is 2
        assert!((w.entry(1, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_block_has_zero_rho() {
        let w = WeightMatrix::from_block(0, 3, vec![0, 1, 2], vec![1.0 / 3.0; 9]).unwrap();
        assert!(w.rho() < 1e-15);
    }

    #[test]
    fn identity_block_has_unit_rho() {
        let w = WeightMatrix::from_block(0, 2, vec![0, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((contraction_factor(&w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let asym = DirectedGraph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(metropolis_weights(&asym, 0, &[0, 1]), Err(ConsensusError::AsymmetricComm));
        let g = undirected(3, &[(0, 1)]);
        assert_eq!(
            metropolis_weights(&g, 4, &[0, 2]),
            Err(ConsensusError::Disconnected { cluster: 4 })
        );
        assert!(matches!(
            WeightMatrix::from_block(0, 2, vec![0, 1], vec![0.9, 0.1, 0.2, 0.8]),
            Err(ConsensusError::NotStochastic { .. })
        ));
        let w = metropolis_weights(&g, 0, &[0, 1]).unwrap();
        assert!(run_consensus(&w, &[1.0], 3).is_err());
    }

    #[test]
    fn uniform_values_are_a_fixed_point() {
        let g = undirected(4, &[(0, 1), (1, 2), (2, 3)]);
        let w = metropolis_weights(&g, 0, &[0, 1, 2, 3]).unwrap();
        let run = run_consensus(&w, &[2.5; 4], 10).unwrap();
        for v in &run.history {
            for x in v {
                assert!((x - 2.5).abs() < 1e-15);
            }
        }
        assert_eq!(run.iterations(), 10);
    }

    proptest! {
        #[test]
        fn metropolis_is_doubly_stochastic_and_rho_matches_jacobi(
            extra in proptest::collection::vec((0usize..8, 0usize..8), 0..12),
            values in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            // a spanning path keeps the set connected
            let mut edges: Vec<(usize, usize)> = (0..7).map(|i| (i, i + 1)).collect();
            edges.extend(extra);
            let g = undirected(8, &edges);
            let w = metropolis_weights(&g, 0, &(0..8).collect::<Vec<_>>()).unwrap();
            prop_assert!(w.doubly_stochastic_error() < 1e-12);
            let dev: Vec<f64> = w.block().iter().map(|c| c - 1.0 / 8.0).collect();
            let oracle = jacobi_spectral_radius(dev, 8);
            prop_assert!((w.rho() - oracle).abs() < 1e-8, "rho {} oracle {}", w.rho(), oracle);
            prop_assert!(w.rho() < 1.0);
            let run = run_consensus(&w, &values, 20).unwrap();
            let s0: f64 = values.iter().sum();
            for v in 0..=20 {
                let s: f64 = run.history[v].iter().sum();
                prop_assert!((s - s0).abs() < 1e-12);
                prop_assert!(run.disagreement(v) <= w.rho().powi(v as i32) * run.disagreement(0) + 1e-9);
            }
        }
    }
}
