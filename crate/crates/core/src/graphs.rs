//! Coupling graphs and everything derived from them: reachability, the
//! learning graph, strongly connected clusters, distances and truncated
//! member sets, plus cluster-wise condensations.
//!
//! Agent ids are 0-based inside this crate. Front ends translate to the
//! 1-based ids used in configuration files and reports.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph must have at least one vertex")]
    Empty,
    #[error("agent {} is out of range for {n} agents", .agent + 1)]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("coupling graphs disagree on the vertex count: {0:?}")]
    VertexCountMismatch(Vec<usize>),
    #[error("partition does not cover agent {}", .0 + 1)]
    Uncovered(usize),
    #[error("agent {} appears in more than one part", .0 + 1)]
    Overlap(usize),
    #[error("part {} is empty", .0 + 1)]
    EmptyPart(usize),
    #[error("part {} is not strongly connected in the state-observation graph", .0 + 1)]
    NotStronglyConnected(usize),
}

/// Unweighted directed graph over agents `0..n`.
///
/// Duplicate edges collapse and self-loops are never stored; every
/// neighbour-set construction that needs `i` itself adds it explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    out: Vec<BTreeSet<usize>>,
    inc: Vec<BTreeSet<usize>>,
}

impl DirectedGraph {
    pub fn empty(n: usize) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        Ok(Self {
            out: vec![BTreeSet::new(); n],
            inc: vec![BTreeSet::new(); n],
        })
    }

    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = Self::empty(n)?;
        for (from, to) in edges {
            g.add_edge(from, to)?;
        }
        Ok(g)
    }

    /// Inserts `from -> to`. Returns `false` for self-loops and duplicates.
    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<bool, GraphError> {
        self.check(from)?;
        self.check(to)?;
        if from == to {
            return Ok(false);
        }
        self.inc[to].insert(from);
        Ok(self.out[from].insert(to))
    }

    pub fn vertex_count(&self) -> usize {
        self.out.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(BTreeSet::len).sum()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.out.get(from).is_some_and(|s| s.contains(&to))
    }

    pub fn out_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.out[i].iter().copied()
    }

    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.inc[i].iter().copied()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out[i].len()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.inc[i].len()
    }

    /// All edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
    }

    pub fn union(&self, other: &Self) -> Result<Self, GraphError> {
        if self.vertex_count() != other.vertex_count() {
            return Err(GraphError::VertexCountMismatch(vec![
                self.vertex_count(),
                other.vertex_count(),
            ]));
        }
        let mut g = self.clone();
        for (i, j) in other.edges() {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn transpose(&self) -> Self {
        Self {
            out: self.inc.clone(),
            inc: self.out.clone(),
        }
    }

    /// `true` when every edge has its reverse, i.e. the graph is undirected.
    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    pub fn is_subgraph_of(&self, other: &Self) -> bool {
        self.vertex_count() == other.vertex_count() && self.edges().all(|(i, j)| other.has_edge(i, j))
    }

    fn check(&self, agent: usize) -> Result<(), GraphError> {
        if agent < self.vertex_count() {
            Ok(())
        } else {
            Err(GraphError::AgentOutOfRange {
                agent,
                n: self.vertex_count(),
            })
        }
    }

    /// Graph with an edge `i -> j` whenever `j != i` is reachable from `i`.
    pub fn transitive_closure(&self) -> Self {
        let n = self.vertex_count();
        let mut out = Self {
            out: vec![BTreeSet::new(); n],
            inc: vec![BTreeSet::new(); n],
        };
        for i in 0..n {
            for (j, d) in self.bfs_lengths(i).into_iter().enumerate() {
                if d.is_some() {
                    out.add_edge(i, j).expect("in range");
                }
            }
        }
        out
    }

    /// Breadth-first hop counts from `source`; `None` marks unreachable vertices.
    pub fn bfs_lengths(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.vertex_count()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let next = dist[v].map(|d| d + 1);
            for w in self.out_neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = next;
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

/// The state, observation, reward and communication graphs over one agent set,
/// together with the unions `state ∪ obs` and `state ∪ obs ∪ reward`.
#[derive(Debug, Clone)]
pub struct CouplingGraphs {
    state: DirectedGraph,
    obs: DirectedGraph,
    reward: DirectedGraph,
    comm: DirectedGraph,
    so: DirectedGraph,
    sor: DirectedGraph,
}

impl CouplingGraphs {
    pub fn new(
        state: DirectedGraph,
        obs: DirectedGraph,
        reward: DirectedGraph,
        comm: DirectedGraph,
    ) -> Result<Self, GraphError> {
        let counts = [&state, &obs, &reward, &comm].map(DirectedGraph::vertex_count);
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(GraphError::VertexCountMismatch(counts.to_vec()));
        }
        let so = state.union(&obs)?;
        let sor = so.union(&reward)?;
        Ok(Self {
            state,
            obs,
            reward,
            comm,
            so,
            sor,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.state.vertex_count()
    }

    pub fn state(&self) -> &DirectedGraph {
        &self.state
    }

    pub fn obs(&self) -> &DirectedGraph {
        &self.obs
    }

    pub fn reward(&self) -> &DirectedGraph {
        &self.reward
    }

    pub fn comm(&self) -> &DirectedGraph {
        &self.comm
    }

    pub fn state_obs(&self) -> &DirectedGraph {
        &self.so
    }

    pub fn state_obs_reward(&self) -> &DirectedGraph {
        &self.sor
    }

    /// `{j : (j, i) ∈ E_state} ∪ {i}`.
    pub fn state_in_set(&self, i: usize) -> Vec<usize> {
        with_self(self.state.in_neighbors(i), i)
    }

    /// `{j : (j, i) ∈ E_obs} ∪ {i}`: the agents whose state `i` observes.
    pub fn obs_in_set(&self, i: usize) -> Vec<usize> {
        with_self(self.obs.in_neighbors(i), i)
    }

    /// `{j : (j, i) ∈ E_reward} ∪ {i}`: the agents entering `r_i`.
    pub fn reward_in_set(&self, i: usize) -> Vec<usize> {
        with_self(self.reward.in_neighbors(i), i)
    }

    /// `{j : (i, j) ∈ E_reward} ∪ {i}`: the agents whose reward reads agent `i`.
    pub fn reward_out_set(&self, i: usize) -> Vec<usize> {
        with_self(self.reward.out_neighbors(i), i)
    }
}

fn with_self(it: impl Iterator<Item = usize>, i: usize) -> Vec<usize> {
    let mut s: BTreeSet<usize> = it.collect();
    s.insert(i);
    s.into_iter().collect()
}

/// An ordered partition of the agents into strongly connected parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    clusters: Vec<Vec<usize>>,
    cluster_of: Vec<usize>,
    condensation_order: Option<Vec<usize>>,
}

impl Clustering {
    /// Validates a user-supplied partition against `g`: parts must be disjoint,
    /// cover every agent and each induce a strongly connected subgraph.
    pub fn from_parts(g: &DirectedGraph, parts: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let n = g.vertex_count();
        let mut cluster_of = vec![usize::MAX; n];
        for (l, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(GraphError::EmptyPart(l));
            }
            for &a in part {
                if a >= n {
                    return Err(GraphError::AgentOutOfRange { agent: a, n });
                }
                if cluster_of[a] != usize::MAX {
                    return Err(GraphError::Overlap(a));
                }
                cluster_of[a] = l;
            }
        }
        if let Some(a) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return Err(GraphError::Uncovered(a));
        }
        for (l, part) in parts.iter().enumerate() {
            if !induces_strongly_connected(g, part) {
                return Err(GraphError::NotStronglyConnected(l));
            }
        }
        Ok(Self::normalized(g, parts))
    }

    /// Every agent on its own. Single vertices are trivially strongly connected.
    pub fn singletons(n: usize) -> Self {
        Self {
            clusters: (0..n).map(|i| vec![i]).collect(),
            cluster_of: (0..n).collect(),
            condensation_order: None,
        }
    }

    fn normalized(g: &DirectedGraph, mut parts: Vec<Vec<usize>>) -> Self {
        for p in &mut parts {
            p.sort_unstable();
        }
        parts.sort_by_key(|p| p[0]);
        let mut cluster_of = vec![0; g.vertex_count()];
        for (l, p) in parts.iter().enumerate() {
            for &a in p {
                cluster_of[a] = l;
            }
        }
        let mut c = Self {
            clusters: parts,
            cluster_of,
            condensation_order: None,
        };
        c.condensation_order = topological_order(&condense(g, &c));
        c
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn members(&self, l: usize) -> &[usize] {
        &self.clusters[l]
    }

    pub fn cluster_of(&self, agent: usize) -> usize {
        self.cluster_of[agent]
    }

    /// Topological order of the cluster graph (sources first), or `None` when
    /// the parts are finer than the maximal components and the cluster graph
    /// has cycles.
    pub fn condensation_order(&self) -> Option<&[usize]> {
        self.condensation_order.as_deref()
    }
}

fn induces_strongly_connected(g: &DirectedGraph, part: &[usize]) -> bool {
    let inside: BTreeSet<usize> = part.iter().copied().collect();
    let reach_within = |reverse: bool| {
        let mut seen = BTreeSet::from([part[0]]);
        let mut stack = vec![part[0]];
        while let Some(v) = stack.pop() {
            let next: Vec<usize> = if reverse {
                g.in_neighbors(v).collect()
            } else {
                g.out_neighbors(v).collect()
            };
            for w in next {
                if inside.contains(&w) && seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.len() == inside.len()
    };
    reach_within(false) && reach_within(true)
}

/// Kahn's algorithm with smallest-index tie breaking; `None` on a cycle.
fn topological_order(g: &DirectedGraph) -> Option<Vec<usize>> {
    let n = g.vertex_count();
    let mut indeg: Vec<usize> = (0..n).map(|v| g.in_degree(v)).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for w in g.out_neighbors(v) {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.insert(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Maximal strongly connected components (iterative Tarjan), clusters sorted
/// by smallest member.
pub fn scc_decompose(g: &DirectedGraph) -> Clustering {
    const UNSEEN: usize = usize::MAX;
    let n = g.vertex_count();
    let adj: Vec<Vec<usize>> = (0..n).map(|v| g.out_neighbors(v).collect()).collect();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut parts = Vec::new();
    let mut next_index = 0;

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        // (vertex, position in its adjacency list)
        let mut call = vec![(root, 0usize)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if let Some(&w) = adj[v].get(*pos) {
                *pos += 1;
                if index[w] == UNSEEN {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut part = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    part.push(w);
                    if w == v {
                        break;
                    }
                }
                parts.push(part);
            }
        }
    }
    Clustering::normalized(g, parts)
}

/// `{j : i reaches j in g} ∪ {i}`, sorted.
pub fn reachable_set(g: &DirectedGraph, i: usize) -> Result<Vec<usize>, GraphError> {
    g.check(i)?;
    Ok(g.bfs_lengths(i)
        .iter()
        .enumerate()
        .filter_map(|(j, d)| d.map(|_| j))
        .collect())
}

/// Learning sets, the learning graph and the per-cluster LVF member sets.
#[derive(Debug, Clone)]
pub struct LearningStructure {
    clustering: Clustering,
    reach: Vec<Vec<usize>>,
    learning_sets: Vec<Vec<usize>>,
    cluster_sets: Vec<Vec<usize>>,
}

impl LearningStructure {
    /// The maximal-SCC clustering of the state-observation graph.
    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    /// Agents reachable from `i` in the state-observation graph, plus `i`.
    pub fn reach_set(&self, i: usize) -> &[usize] {
        &self.reach[i]
    }

    /// The agents whose rewards enter agent `i`'s local value function.
    pub fn learning_set(&self, i: usize) -> &[usize] {
        &self.learning_sets[i]
    }

    pub fn learning_sets(&self) -> &[Vec<usize>] {
        &self.learning_sets
    }

    pub fn cluster_set(&self, l: usize) -> &[usize] {
        &self.cluster_sets[l]
    }

    pub fn cluster_sets(&self) -> &[Vec<usize>] {
        &self.cluster_sets
    }

    pub fn cluster_size(&self, l: usize) -> usize {
        self.cluster_sets[l].len()
    }

    /// Edges `(j, i)` with `j` in agent `i`'s learning set. Self pairs are
    /// always members of the edge set; they are listed only on request.
    pub fn learning_edges(&self, include_self: bool) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .learning_sets
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&j| (j, i)))
            .filter(|&(j, i)| include_self || i != j)
            .collect();
        edges.sort_unstable();
        edges
    }

    pub fn learning_graph(&self) -> DirectedGraph {
        DirectedGraph::from_edges(self.learning_sets.len(), self.learning_edges(false))
            .expect("learning edges are in range")
    }
}

pub fn learning_sets(cg: &CouplingGraphs) -> LearningStructure {
    let n = cg.agent_count();
    let so = cg.state_obs();
    let reach: Vec<Vec<usize>> = (0..n)
        .map(|i| reachable_set(so, i).expect("agent in range"))
        .collect();
    let reward_out: Vec<Vec<usize>> = (0..n).map(|k| cg.reward_out_set(k)).collect();
    let learning: Vec<Vec<usize>> = reach
        .iter()
        .map(|r| {
            let set: BTreeSet<usize> = r.iter().flat_map(|&k| reward_out[k].iter().copied()).collect();
            set.into_iter().collect()
        })
        .collect();
    let clustering = scc_decompose(so);
    let cluster_sets = clustering
        .clusters()
        .iter()
        .map(|members| learning[members[0]].clone())
        .collect();
    LearningStructure {
        clustering,
        reach,
        learning_sets: learning,
        cluster_sets,
    }
}

/// Verdicts for the structural assumptions on a set of coupling graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssumptionReport {
    /// Agents whose learning set is a strict subset of all agents.
    pub agents_with_partial_lvf: Vec<usize>,
    pub so_scc_count: usize,
    pub sor_scc_count: usize,
    pub comm_undirected: bool,
    /// Per maximal cluster: are the LVF members connected in the communication graph?
    pub cluster_comm_connected: Vec<bool>,
    /// `E_SO ⊆ E_cm` with an undirected communication graph.
    pub so_within_comm: bool,
}

impl AssumptionReport {
    /// Some agent has a local value function that omits at least one agent.
    pub fn partial_lvf_exists(&self) -> bool {
        !self.agents_with_partial_lvf.is_empty()
    }

    /// Sufficient condition for [`Self::partial_lvf_exists`].
    pub fn sor_has_multiple_sccs(&self) -> bool {
        self.sor_scc_count > 1
    }

    /// Necessary condition for [`Self::partial_lvf_exists`].
    pub fn so_has_multiple_sccs(&self) -> bool {
        self.so_scc_count > 1
    }

    /// Undirected communication graph with every LVF member set connected.
    pub fn communication_ok(&self) -> bool {
        self.comm_undirected && self.cluster_comm_connected.iter().all(|&c| c)
    }
}

pub fn check_assumptions(cg: &CouplingGraphs, ls: &LearningStructure) -> AssumptionReport {
    let n = cg.agent_count();
    let comm_undirected = cg.comm().is_symmetric();
    AssumptionReport {
        agents_with_partial_lvf: (0..n).filter(|&i| ls.learning_set(i).len() < n).collect(),
        so_scc_count: ls.clustering().len(),
        sor_scc_count: scc_decompose(cg.state_obs_reward()).len(),
        comm_undirected,
        cluster_comm_connected: ls
            .cluster_sets()
            .iter()
            .map(|set| members_connected(cg.comm(), set))
            .collect(),
        so_within_comm: comm_undirected && cg.state_obs().is_subgraph_of(cg.comm()),
    }
}

/// Whether `members` form one connected piece of `g` when edges are read as undirected.
pub fn members_connected(g: &DirectedGraph, members: &[usize]) -> bool {
    let Some(&first) = members.first() else {
        return true;
    };
    let inside: BTreeSet<usize> = members.iter().copied().collect();
    let mut seen = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some(v) = stack.pop() {
        for w in g.out_neighbors(v).chain(g.in_neighbors(v)) {
            if inside.contains(&w) && seen.insert(w) {
                stack.push(w);
            }
        }
    }
    seen.len() == inside.len()
}

/// Hop distance with an explicit infinity. Serializes as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Distance {
    Finite(usize),
    Infinite,
}

impl Distance {
    pub fn finite(self) -> Option<usize> {
        match self {
            Distance::Finite(d) => Some(d),
            Distance::Infinite => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Distance::Finite(_))
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Finite(d) => write!(f, "{d}"),
            Distance::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Distance::Finite(d) => s.serialize_u64(*d as u64),
            Distance::Infinite => s.serialize_str("inf"),
        }
    }
}

/// Agent-to-agent and cluster-to-agent distances.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    agent: Vec<Vec<Distance>>,
    cluster: Vec<Vec<Distance>>,
    max_distance: Vec<usize>,
}

impl DistanceTable {
    /// `D(i, j)`: shortest path length from `i` to `j` in the
    /// state-observation-reward graph when `j` is in `i`'s learning set,
    /// infinite otherwise.
    pub fn agent(&self, i: usize, j: usize) -> Distance {
        self.agent[i][j]
    }

    pub fn agent_rows(&self) -> &[Vec<Distance>] {
        &self.agent
    }

    /// `D(V_l, j) = min_{i ∈ V_l} D(i, j)`.
    pub fn cluster(&self, l: usize, j: usize) -> Distance {
        self.cluster[l][j]
    }

    pub fn cluster_rows(&self) -> &[Vec<Distance>] {
        &self.cluster
    }

    /// Largest finite `D(V_l, j)` over all agents.
    pub fn max_distance(&self, l: usize) -> usize {
        self.max_distance[l]
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster.len()
    }
}

pub fn distances(cg: &CouplingGraphs, clustering: &Clustering, ls: &LearningStructure) -> DistanceTable {
    let n = cg.agent_count();
    let agent: Vec<Vec<Distance>> = (0..n)
        .map(|i| {
            let hops = cg.state_obs_reward().bfs_lengths(i);
            let mut row = vec![Distance::Infinite; n];
            for &j in ls.learning_set(i) {
                row[j] = match hops[j] {
                    Some(h) => Distance::Finite(h),
                    None => unreachable!("learning-set member {j} unreachable from {i}"),
                };
            }
            row[i] = Distance::Finite(0);
            row
        })
        .collect();
    let cluster: Vec<Vec<Distance>> = clustering
        .clusters()
        .iter()
        .map(|members| {
            (0..n)
                .map(|j| members.iter().map(|&i| agent[i][j]).min().expect("non-empty cluster"))
                .collect()
        })
        .collect();
    let max_distance = cluster
        .iter()
        .map(|row| row.iter().filter_map(|d| d.finite()).max().unwrap_or(0))
        .collect();
    DistanceTable {
        agent,
        cluster,
        max_distance,
    }
}

/// Truncated member sets for one truncation index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncationStructure {
    pub kappa: usize,
    /// `V_l^κ`: agents within distance κ of cluster `l`.
    pub reach: Vec<Vec<usize>>,
    /// `I_l^κ = I_l^cl ∩ V_l^κ`: the consensus group of the truncated LVF.
    pub members: Vec<Vec<usize>>,
    /// `|I_l^κ|`, the multiplier used by the gradient oracle.
    pub sizes: Vec<usize>,
    /// Closed form `|V_l| + κ` when `κ < D_l^*`, else `n_l`. Agrees with
    /// `sizes` when each distance shell around the cluster holds one agent.
    pub formula_sizes: Vec<usize>,
    /// `V̄_l^κ`: agents at finite distance strictly greater than κ.
    pub beyond: Vec<Vec<usize>>,
    pub max_distances: Vec<usize>,
    /// Untruncated LVF sizes `n_l`.
    pub full_sizes: Vec<usize>,
}

impl TruncationStructure {
    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn max_beyond(&self) -> usize {
        self.beyond.iter().map(Vec::len).max().unwrap_or(0)
    }
}

pub fn truncated_sets(dist: &DistanceTable, clustering: &Clustering, kappa: usize) -> TruncationStructure {
    let mut t = TruncationStructure {
        kappa,
        reach: Vec::new(),
        members: Vec::new(),
        sizes: Vec::new(),
        formula_sizes: Vec::new(),
        beyond: Vec::new(),
        max_distances: Vec::new(),
        full_sizes: Vec::new(),
    };
    for (l, row) in dist.cluster_rows().iter().enumerate() {
        let full: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_finite()).collect();
        let reach: Vec<usize> = (0..row.len())
            .filter(|&j| row[j] <= Distance::Finite(kappa))
            .collect();
        let beyond: Vec<usize> = (0..row.len())
            .filter(|&j| row[j] > Distance::Finite(kappa) && row[j].is_finite())
            .collect();
        let members: Vec<usize> = reach.iter().copied().filter(|j| full.binary_search(j).is_ok()).collect();
        let d_star = dist.max_distance(l);
        let formula = if kappa >= d_star {
            full.len()
        } else {
            clustering.members(l).len() + kappa
        };
        t.sizes.push(members.len());
        t.formula_sizes.push(formula);
        t.full_sizes.push(full.len());
        t.max_distances.push(d_star);
        t.reach.push(reach);
        t.members.push(members);
        t.beyond.push(beyond);
    }
    t
}

/// Cluster graph of `g`: edge `(l1, l2)`, `l1 ≠ l2`, whenever some agent edge
/// leaves cluster `l1` for cluster `l2`.
pub fn condense(g: &DirectedGraph, clustering: &Clustering) -> DirectedGraph {
    let mut out = DirectedGraph::empty(clustering.len().max(1)).expect("non-empty");
    for (i, j) in g.edges() {
        let (a, b) = (clustering.cluster_of(i), clustering.cluster_of(j));
        if a != b {
            out.add_edge(a, b).expect("cluster ids in range");
        }
    }
    out
}

/// Cluster-wise versions of the state-observation, state-observation-reward
/// and learning graphs under the maximal clustering.
#[derive(Debug, Clone)]
pub struct ClusterGraphs {
    pub state_obs: DirectedGraph,
    pub state_obs_reward: DirectedGraph,
    pub learning: DirectedGraph,
}

impl ClusterGraphs {
    /// `(E_SO^cl)^T ⊆ E_L^cl ⊆ (E_SOR^cl)^T`, with the cluster graphs on both
    /// sides taken up to reachability.
    pub fn sandwich_holds(&self) -> bool {
        self.state_obs.transitive_closure().transpose().is_subgraph_of(&self.learning)
            && self
                .learning
                .is_subgraph_of(&self.state_obs_reward.transitive_closure().transpose())
    }

    /// Both sides of the sandwich coincide up to reachability.
    pub fn sandwich_tight(&self) -> bool {
        let so = self.state_obs.transitive_closure();
        so == self.state_obs_reward.transitive_closure() && self.learning == so.transpose()
    }
}

pub fn cluster_graphs(cg: &CouplingGraphs, ls: &LearningStructure) -> ClusterGraphs {
    let c = ls.clustering();
    ClusterGraphs {
        state_obs: condense(cg.state_obs(), c),
        state_obs_reward: condense(cg.state_obs_reward(), c),
        learning: condense(&ls.learning_graph(), c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize, edges: &[(usize, usize)]) -> DirectedGraph {
        DirectedGraph::from_edges(n, edges.iter().copied()).unwrap()
    }

    fn cg(n: usize, s: &[(usize, usize)], o: &[(usize, usize)], r: &[(usize, usize)]) -> CouplingGraphs {
        CouplingGraphs::new(g(n, s), g(n, o), g(n, r), DirectedGraph::empty(n).unwrap()).unwrap()
    }

    #[test]
    fn self_loops_and_duplicates_are_not_stored() {
        let gr = g(3, &[(0, 0), (0, 1), (0, 1)]);
        assert_eq!(gr.edge_count(), 1);
        assert!(!gr.has_edge(0, 0));
    }

    #[test]
    fn out_of_range_edge_is_rejected() {
        assert_eq!(
            DirectedGraph::from_edges(2, [(0, 2)]),
            Err(GraphError::AgentOutOfRange { agent: 2, n: 2 })
        );
        assert_eq!(DirectedGraph::empty(0), Err(GraphError::Empty));
    }

    #[test]
    fn mismatched_vertex_counts_are_rejected() {
        let e3 = DirectedGraph::empty(3).unwrap();
        let e4 = DirectedGraph::empty(4).unwrap();
        assert!(matches!(
            CouplingGraphs::new(e3.clone(), e3.clone(), e4, e3),
            Err(GraphError::VertexCountMismatch(_))
        ));
    }

    #[test]
    fn scc_of_edgeless_graph_is_all_singletons() {
        let c = scc_decompose(&DirectedGraph::empty(4).unwrap());
        assert_eq!(c.clusters(), &[vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(c.condensation_order(), Some(&[0, 1, 2, 3][..]));
    }

    #[test]
    fn scc_of_two_cycle_is_one_cluster() {
        let c = scc_decompose(&g(2, &[(0, 1), (1, 0)]));
        assert_eq!(c.clusters(), &[vec![0, 1]]);
    }

    #[test]
    fn scc_orders_clusters_and_condensation() {
        // 3 -> {0,1} -> 2
        let gr = g(4, &[(0, 1), (1, 0), (1, 2), (3, 0)]);
        let c = scc_decompose(&gr);
        assert_eq!(c.clusters(), &[vec![0, 1], vec![2], vec![3]]);
        assert_eq!(c.condensation_order(), Some(&[2, 0, 1][..]));
        assert_eq!(c.cluster_of(1), 0);
    }

    #[test]
    fn reachable_set_includes_self() {
        let e = DirectedGraph::empty(4).unwrap();
        assert_eq!(reachable_set(&e, 2).unwrap(), vec![2]);
        assert!(reachable_set(&e, 4).is_err());
        let chain = g(3, &[(0, 1), (1, 2)]);
        assert_eq!(reachable_set(&chain, 0).unwrap(), vec![0, 1, 2]);
        assert_eq!(reachable_set(&chain, 1).unwrap(), vec![1, 2]);
    }

    #[test]
    fn empty_graphs_give_singleton_learning_sets() {
        let c = cg(3, &[], &[], &[]);
        let ls = learning_sets(&c);
        for i in 0..3 {
            assert_eq!(ls.learning_set(i), &[i]);
        }
        assert!(ls.learning_edges(false).is_empty());
        assert_eq!(ls.learning_edges(true), vec![(0, 0), (1, 1), (2, 2)]);
        let report = check_assumptions(&c, &ls);
        assert!(report.partial_lvf_exists());
    }

    #[test]
    fn reward_out_neighbours_extend_learning_set() {
        // 0 -> 1 in state graph, 1's reward feeds 2.
        let c = cg(3, &[(0, 1)], &[], &[(1, 2)]);
        let ls = learning_sets(&c);
        assert_eq!(ls.learning_set(0), &[0, 1, 2]);
        assert_eq!(ls.learning_set(1), &[1, 2]);
        assert_eq!(ls.learning_set(2), &[2]);
    }

    #[test]
    fn finer_partition_must_be_strongly_connected() {
        let ring = g(3, &[(0, 1), (1, 2), (2, 0)]);
        assert!(Clustering::from_parts(&ring, vec![vec![0], vec![1], vec![2]]).is_ok());
        assert_eq!(
            Clustering::from_parts(&ring, vec![vec![0, 1], vec![2]]),
            Err(GraphError::NotStronglyConnected(0))
        );
        assert_eq!(
            Clustering::from_parts(&ring, vec![vec![0, 1]]),
            Err(GraphError::Uncovered(2))
        );
        assert_eq!(
            Clustering::from_parts(&ring, vec![vec![0, 1, 2], vec![1]]),
            Err(GraphError::Overlap(1))
        );
        let fine = Clustering::from_parts(&ring, vec![vec![2], vec![0], vec![1]]).unwrap();
        assert_eq!(fine.clusters(), &[vec![0], vec![1], vec![2]]);
        assert_eq!(fine.condensation_order(), None);
    }

    #[test]
    fn distance_is_zero_on_diagonal_and_infinite_outside_learning_set() {
        // Reward edge 1 -> 2 gives 0 a SOR path to 2 only through the reward
        // graph of 1; 3 is reachable via reward of 2 but outside I_0^L.
        let c = cg(4, &[(0, 1)], &[], &[(1, 2), (2, 3)]);
        let ls = learning_sets(&c);
        assert_eq!(ls.learning_set(0), &[0, 1, 2]);
        let cl = ls.clustering().clone();
        let d = distances(&c, &cl, &ls);
        assert_eq!(d.agent(0, 0), Distance::Finite(0));
        assert_eq!(d.agent(0, 1), Distance::Finite(1));
        assert_eq!(d.agent(0, 2), Distance::Finite(2));
        // path 0 -> 1 -> 2 -> 3 exists in SOR, but 3 is not in I_0^L
        assert_eq!(d.agent(0, 3), Distance::Infinite);
        assert_eq!(d.max_distance(cl.cluster_of(0)), 2);
    }

    #[test]
    fn truncation_at_zero_keeps_the_cluster_only() {
        let c = cg(4, &[(0, 1), (1, 2), (2, 3)], &[], &[]);
        let ls = learning_sets(&c);
        let cl = ls.clustering().clone();
        let d = distances(&c, &cl, &ls);
        let t0 = truncated_sets(&d, &cl, 0);
        for l in 0..cl.len() {
            assert_eq!(t0.reach[l], cl.members(l));
        }
        let t9 = truncated_sets(&d, &cl, 9);
        assert_eq!(t9.sizes, t9.full_sizes);
        assert_eq!(t9.members[0], vec![0, 1, 2, 3]);
        let t1 = truncated_sets(&d, &cl, 1);
        assert_eq!(t1.members[0], vec![0, 1]);
        assert_eq!(t1.beyond[0], vec![2, 3]);
        assert_eq!(t1.formula_sizes, t1.sizes);
    }

    #[test]
    fn condense_single_cluster_has_no_edges() {
        let ring = g(3, &[(0, 1), (1, 2), (2, 0)]);
        let c = scc_decompose(&ring);
        let cond = condense(&ring, &c);
        assert_eq!(cond.vertex_count(), 1);
        assert_eq!(cond.edge_count(), 0);
    }

    #[test]
    fn distance_serializes_infinity_as_token() {
        let v = serde_json::to_string(&[Distance::Finite(3), Distance::Infinite]).unwrap();
        assert_eq!(v, r#"[3,"inf"]"#);
        assert_eq!(Distance::Infinite.to_string(), "inf");
        assert!(Distance::Finite(usize::MAX) < Distance::Infinite);
    }

    #[test]
    fn sandwich_uses_reachability_between_clusters() {
        // obs 2 -> 3, reward 3 -> 1: agent 2 learns from agent 1 through agent 3
        let c = cg(3, &[], &[(1, 2)], &[(2, 0)]);
        let ls = learning_sets(&c);
        let cl = cluster_graphs(&c, &ls);
        assert!(cl.learning.has_edge(0, 1));
        assert!(!cl.state_obs_reward.transpose().has_edge(0, 1));
        assert!(cl.sandwich_holds());
        assert!(!cl.sandwich_tight());
    }

    #[test]
    fn transitive_closure_of_path() {
        let p = g(3, &[(0, 1), (1, 2)]).transitive_closure();
        assert_eq!(p.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2), (1, 2)]);
    }
}
