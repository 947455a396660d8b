//! `analyze`: learning sets, clusters, distances, truncation tables,
//! assumption verdicts and consensus diagnostics.

use netmarl_core::consensus::metropolis_weights;
use netmarl_core::graphs::{
    check_assumptions, cluster_graphs, distances, members_connected, truncated_sets, Clustering, DirectedGraph,
    Distance, LearningStructure,
};
use serde::Serialize;

use crate::config::{Instance, LoadedConfig};
use crate::output::{one_based, write_json, Header};
use crate::{CliError, Options, Outcome};

#[derive(Debug, Serialize)]
pub struct AgentRow {
    pub agent: usize,
    pub cluster: usize,
    pub reach_set: Vec<usize>,
    pub learning_set: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Assumptions {
    /// Some agent's learning set omits at least one agent.
    pub partial_lvf: bool,
    pub agents_with_partial_lvf: Vec<usize>,
    pub so_scc_count: usize,
    pub sor_scc_count: usize,
    /// Sufficient indicator for `partial_lvf`.
    pub sor_has_multiple_sccs: bool,
    /// Necessary indicator for `partial_lvf`.
    pub so_has_multiple_sccs: bool,
    pub comm_undirected: bool,
    /// Clusters (1-based) whose LVF members are disconnected in the communication graph.
    pub disconnected_clusters: Vec<usize>,
    /// Every state/observation edge is a communication edge.
    pub so_within_comm: bool,
    pub communication_ok: bool,
}

#[derive(Debug, Serialize)]
pub struct ClusterGraphsReport {
    pub state_obs: Vec<[usize; 2]>,
    pub state_obs_reward: Vec<[usize; 2]>,
    pub learning: Vec<[usize; 2]>,
    pub sandwich_holds: bool,
    pub sandwich_tight: bool,
}

#[derive(Debug, Serialize)]
pub struct DistanceReport {
    /// `D(i, j)` per agent row.
    pub agent: Vec<Vec<Distance>>,
    /// `D(V_l, j)` per cluster of the truncation partition.
    pub cluster: Vec<Vec<Distance>>,
    /// Largest finite distance per cluster.
    pub max_distance: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct TruncatedCluster {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub size: usize,
    pub formula_size: usize,
    pub beyond: Vec<usize>,
    pub reach: Vec<usize>,
    pub comm_connected: bool,
}

#[derive(Debug, Serialize)]
pub struct TruncationReport {
    pub kappa: usize,
    pub max_size: usize,
    pub max_beyond: usize,
    pub clusters: Vec<TruncatedCluster>,
}

/// Weight-matrix diagnostics for one consensus group.
#[derive(Debug, Clone, Serialize)]
pub struct ConsensusDiagnostic {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub rho: Option<f64>,
    pub doubly_stochastic_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ConsensusReport {
    pub lvf: Vec<ConsensusDiagnostic>,
    pub tlvf: Vec<TruncatedConsensus>,
}

#[derive(Debug, Serialize)]
pub struct TruncatedConsensus {
    pub kappa: usize,
    pub groups: Vec<ConsensusDiagnostic>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub agents: usize,
    pub clusters: Vec<Vec<usize>>,
    pub condensation_order: Option<Vec<usize>>,
    pub per_agent: Vec<AgentRow>,
    pub learning_edges: Vec<[usize; 2]>,
    pub assumptions: Assumptions,
    pub cluster_graphs: ClusterGraphsReport,
    pub truncation_clusters: Vec<Vec<usize>>,
    pub distances: DistanceReport,
    pub truncation: Vec<TruncationReport>,
    pub consensus: ConsensusReport,
}

fn edges_one_based(g: &DirectedGraph) -> Vec<[usize; 2]> {
    g.edges().map(|(i, j)| [i + 1, j + 1]).collect()
}

fn clusters_one_based(c: &Clustering) -> Vec<Vec<usize>> {
    c.clusters().iter().map(|m| one_based(m)).collect()
}

pub fn diagnose(comm: &DirectedGraph, cluster: usize, members: &[usize]) -> ConsensusDiagnostic {
    match metropolis_weights(comm, cluster, members) {
        Ok(w) => ConsensusDiagnostic {
            cluster: cluster + 1,
            members: one_based(w.members()),
            rho: Some(w.rho()),
            doubly_stochastic_error: Some(w.doubly_stochastic_error()),
            error: None,
        },
        Err(e) => ConsensusDiagnostic {
            cluster: cluster + 1,
            members: one_based(members),
            rho: None,
            doubly_stochastic_error: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn lvf_diagnostics(inst: &Instance) -> Vec<ConsensusDiagnostic> {
    let ls: &LearningStructure = &inst.ls;
    (0..ls.clustering().len())
        .map(|l| diagnose(inst.cg.comm(), l, ls.cluster_set(l)))
        .collect()
}

pub fn build_report(inst: &Instance, kappas: &[usize], self_loops: bool) -> AnalysisReport {
    let (cg, ls) = (&inst.cg, &inst.ls);
    let n = cg.agent_count();
    let maximal = ls.clustering();
    let rep = check_assumptions(cg, ls);
    let cgr = cluster_graphs(cg, ls);
    let dist = distances(cg, &inst.clustering, ls);
    let truncation = kappas
        .iter()
        .map(|&k| {
            let t = truncated_sets(&dist, &inst.clustering, k);
            TruncationReport {
                kappa: k,
                max_size: t.max_size(),
                max_beyond: t.max_beyond(),
                clusters: (0..inst.clustering.len())
                    .map(|l| TruncatedCluster {
                        cluster: l + 1,
                        members: one_based(&t.members[l]),
                        size: t.sizes[l],
                        formula_size: t.formula_sizes[l],
                        beyond: one_based(&t.beyond[l]),
                        reach: one_based(&t.reach[l]),
                        comm_connected: members_connected(cg.comm(), &t.members[l]),
                    })
                    .collect(),
            }
        })
        .collect();
    let tlvf = kappas
        .iter()
        .map(|&k| {
            let t = truncated_sets(&dist, &inst.clustering, k);
            TruncatedConsensus {
                kappa: k,
                groups: (0..inst.clustering.len())
                    .map(|l| diagnose(cg.comm(), l, &t.members[l]))
                    .collect(),
            }
        })
        .collect();
    AnalysisReport {
        agents: n,
        clusters: clusters_one_based(maximal),
        condensation_order: maximal.condensation_order().map(one_based),
        per_agent: (0..n)
            .map(|i| AgentRow {
                agent: i + 1,
                cluster: maximal.cluster_of(i) + 1,
                reach_set: one_based(ls.reach_set(i)),
                learning_set: one_based(ls.learning_set(i)),
            })
            .collect(),
        learning_edges: ls.learning_edges(self_loops).into_iter().map(|(j, i)| [j + 1, i + 1]).collect(),
        assumptions: Assumptions {
            partial_lvf: rep.partial_lvf_exists(),
            agents_with_partial_lvf: one_based(&rep.agents_with_partial_lvf),
            so_scc_count: rep.so_scc_count,
            sor_scc_count: rep.sor_scc_count,
            sor_has_multiple_sccs: rep.sor_has_multiple_sccs(),
            so_has_multiple_sccs: rep.so_has_multiple_sccs(),
            comm_undirected: rep.comm_undirected,
            disconnected_clusters: rep
                .cluster_comm_connected
                .iter()
                .enumerate()
                .filter(|(_, &ok)| !ok)
                .map(|(l, _)| l + 1)
                .collect(),
            so_within_comm: rep.so_within_comm,
            communication_ok: rep.communication_ok(),
        },
        cluster_graphs: ClusterGraphsReport {
            state_obs: edges_one_based(&cgr.state_obs),
            state_obs_reward: edges_one_based(&cgr.state_obs_reward),
            learning: edges_one_based(&cgr.learning),
            sandwich_holds: cgr.sandwich_holds(),
            sandwich_tight: cgr.sandwich_tight(),
        },
        truncation_clusters: clusters_one_based(&inst.clustering),
        distances: DistanceReport {
            agent: dist.agent_rows().to_vec(),
            cluster: dist.cluster_rows().to_vec(),
            max_distance: (0..dist.cluster_count()).map(|l| dist.max_distance(l)).collect(),
        },
        truncation,
        consensus: ConsensusReport {
            lvf: lvf_diagnostics(inst),
            tlvf,
        },
    }
}

/// Writes `analysis.json` and `consensus.json`. Exit code 2 when some agent
/// has no partial LVF or the LVF consensus groups cannot communicate.
pub fn cmd_analyze(loaded: &LoadedConfig, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = &loaded.config;
    let inst = Instance::build(cfg)?;
    let kappas = opts.kappa.clone().unwrap_or_else(|| cfg.trainer.kappa.clone());
    let report = build_report(&inst, &kappas, opts.self_loops);
    let header = Header::new(&loaded.hash, opts.master_seed(cfg));
    let a = write_json(&opts.out.join("analysis.json"), &header, &report)?;
    let c = write_json(&opts.out.join("consensus.json"), &header, &report.consensus)?;
    let mut problems = Vec::new();
    if !report.assumptions.partial_lvf {
        problems.push("every learning set contains all agents".to_string());
    }
    if !report.assumptions.communication_ok {
        problems.push(format!(
            "communication graph {} (disconnected clusters: {:?})",
            if report.assumptions.comm_undirected { "is undirected" } else { "is directed" },
            report.assumptions.disconnected_clusters
        ));
    }
    Ok(Outcome {
        exit_code: if problems.is_empty() { 0 } else { 2 },
        files: vec![a, c],
        message: if problems.is_empty() {
            "assumptions hold".into()
        } else {
            format!("assumption violated: {}", problems.join("; "))
        },
    })
}
