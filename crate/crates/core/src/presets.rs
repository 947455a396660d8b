//! Named coupling-graph instances used by the tests and configs.
//!
//! Edge lists below are written with 1-based agent ids.

use crate::graphs::{CouplingGraphs, DirectedGraph, GraphError};

type Edges = Vec<(usize, usize)>;

fn graph(n: usize, one_based: &[(usize, usize)]) -> Result<DirectedGraph, GraphError> {
    let mut g = DirectedGraph::empty(n)?;
    for &(i, j) in one_based {
        if i == 0 || j == 0 {
            return Err(GraphError::AgentOutOfRange { agent: usize::MAX, n });
        }
        g.add_edge(i - 1, j - 1)?;
    }
    Ok(g)
}

/// Builds coupling graphs from 1-based edge lists. The communication graph
/// is the undirected closure of `state ∪ obs`.
pub fn with_symmetric_comm(
    n: usize,
    state: &[(usize, usize)],
    obs: &[(usize, usize)],
    reward: &[(usize, usize)],
) -> Result<CouplingGraphs, GraphError> {
    let so = graph(n, state)?.union(&graph(n, obs)?)?;
    let comm = so.union(&so.transpose())?;
    CouplingGraphs::new(graph(n, state)?, graph(n, obs)?, graph(n, reward)?, comm)
}

/// Builds coupling graphs from 1-based edge lists with an explicit communication graph.
pub fn from_one_based(
    n: usize,
    state: &[(usize, usize)],
    obs: &[(usize, usize)],
    reward: &[(usize, usize)],
    comm: &[(usize, usize)],
) -> Result<CouplingGraphs, GraphError> {
    CouplingGraphs::new(graph(n, state)?, graph(n, obs)?, graph(n, reward)?, graph(n, comm)?)
}

/// Nine warehouses in four clusters: `{1,2}`, `{3,4}`, `{5,6}` and `{7,8,9}`.
/// Agents 1, 4 and 6 are leaves of the state graph; only 2, 3 and 5 observe
/// other agents; reward couplings never cross clusters.
pub fn warehouse9() -> CouplingGraphs {
    let state = [(2, 1), (2, 3), (3, 4), (5, 6), (5, 4), (7, 5), (7, 8), (8, 9), (9, 7)];
    let obs = [(1, 2), (4, 3), (6, 5)];
    let mut reward: Edges = obs.to_vec();
    reward.extend([(2, 1), (7, 8), (9, 8)]);
    with_symmetric_comm(9, &state, &obs, &reward).expect("static instance")
}

/// Four agents where agent 1's learning set `{1,2,4}` differs from its
/// reach set `{1,2}` although the state-observation-reward graph is
/// strongly connected.
pub fn reward_link4() -> CouplingGraphs {
    let state = [(1, 2), (2, 1), (3, 1), (4, 3)];
    let reward = [(2, 4)];
    with_symmetric_comm(4, &state, &[], &reward).expect("static instance")
}

/// `n` warehouses where every odd agent feeds its two neighbours, plus
/// `1 -> n`; the reward graph is the transposed state graph.
pub fn odd_feed(n: usize) -> Result<CouplingGraphs, GraphError> {
    let mut state: Edges = Vec::new();
    for i in (1..=n).step_by(2) {
        if i > 1 {
            state.push((i, i - 1));
        }
        if i < n {
            state.push((i, i + 1));
        }
    }
    state.push((1, n));
    let reward: Edges = state.iter().map(|&(i, j)| (j, i)).collect();
    with_symmetric_comm(n, &state, &state, &reward)
}

/// Bidirectional ring of `n` warehouses with no reward couplings and
/// communication along the state graph.
pub fn ring(n: usize) -> Result<CouplingGraphs, GraphError> {
    let mut state: Edges = Vec::new();
    for i in 1..=n {
        let next = i % n + 1;
        state.push((i, next));
        state.push((next, i));
    }
    from_one_based(n, &state, &state, &[], &state)
}

/// Directed path `1 -> 2 -> ... -> n` in the state graph, no observation or
/// reward couplings, undirected communication along the path.
pub fn path(n: usize) -> Result<CouplingGraphs, GraphError> {
    let state: Edges = (1..n).map(|i| (i, i + 1)).collect();
    with_symmetric_comm(n, &state, &[], &[])
}

/// Three-agent directed chain `1 -> 2 -> 3`.
pub fn chain3() -> CouplingGraphs {
    path(3).expect("static instance")
}
