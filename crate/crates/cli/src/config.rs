//! Versioned JSON configuration: graphs, environment, policy, trainer and
//! verification sections. Agent ids are 1-based in the file.

use std::path::Path;

use netmarl_core::env::{WarehouseEnv, WarehouseParams};
use netmarl_core::graphs::{learning_sets, Clustering, CouplingGraphs, DirectedGraph, LearningStructure};
use netmarl_core::policy::{RbfConfig, RbfSoftmaxPolicy};
use netmarl_core::zoo::{Feedback, Variant};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub graphs: GraphsSection,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub policy: RbfConfig,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphsSection {
    pub n: usize,
    #[serde(default)]
    pub state_edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub obs_edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub reward_edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub comm_edges: CommSpec,
    #[serde(default)]
    pub clusters: ClusterSpec,
}

/// Communication graph: an explicit (directed) edge list or a derived rule.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum CommSpec {
    Rule(CommRule),
    Edges(Vec<[usize; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommRule {
    /// Both directions of every state and observation edge.
    SoUndirected,
    /// Both directions of every state edge.
    State,
}

impl Default for CommSpec {
    fn default() -> Self {
        CommSpec::Rule(CommRule::SoUndirected)
    }
}

/// Partition used by the truncated variant.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ClusterSpec {
    Rule(ClusterRule),
    Parts(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterRule {
    Maximal,
    Singletons,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec::Rule(ClusterRule::Maximal)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvSection {
    Warehouse(WarehouseParams),
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection::Warehouse(WarehouseParams::default())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "both_feedbacks")]
    pub feedback: Vec<Feedback>,
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_horizon")]
    pub consensus_iters: usize,
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default = "d_radius")]
    pub radius: f64,
    /// Truncation indices for the truncated variant.
    #[serde(default = "d_kappa")]
    pub kappa: Vec<usize>,
    #[serde(default = "d_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Episodes at the end of each trace that enter the summary statistics.
    #[serde(default = "d_window")]
    pub final_window: usize,
}

fn all_variants() -> Vec<Variant> {
    vec![Variant::Centralized, Variant::DistributedLvf]
}
fn both_feedbacks() -> Vec<Feedback> {
    Feedback::ALL.to_vec()
}
fn d_episodes() -> usize {
    600
}
fn d_horizon() -> usize {
    10
}
fn d_step() -> f64 {
    0.01
}
fn d_radius() -> f64 {
    2.0
}
fn d_kappa() -> Vec<usize> {
    vec![1]
}
fn d_seeds() -> u64 {
    10
}
fn d_window() -> usize {
    100
}

impl Default for TrainerSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Monte-Carlo samples for gradient comparisons.
    #[serde(default = "d_samples")]
    pub samples: usize,
    /// Rollouts for the tail and second-moment checks.
    #[serde(default = "d_draws")]
    pub draws: usize,
    /// Monte-Carlo samples per truncation-gap estimate.
    #[serde(default = "d_gap_samples")]
    pub gap_samples: usize,
    /// Perturbation pairs for the Lipschitz estimate.
    #[serde(default = "d_pairs")]
    pub lipschitz_pairs: usize,
    /// Standard errors allowed for equality checks.
    #[serde(default = "d_z")]
    pub z_tol: f64,
    /// Pooled standard errors allowed for monotonicity checks.
    #[serde(default = "d_mono")]
    pub monotone_tol: f64,
    /// Relative slack for inequality checks.
    #[serde(default = "d_slack")]
    pub slack: f64,
    /// Target accuracy fed to the schedule.
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    /// Rollout length used for the infinite-horizon reference values.
    #[serde(default)]
    pub long_horizon: Option<usize>,
}

fn d_samples() -> usize {
    100_000
}
fn d_draws() -> usize {
    10_000
}
fn d_gap_samples() -> usize {
    20_000
}
fn d_pairs() -> usize {
    200
}
fn d_z() -> f64 {
    3.0
}
fn d_mono() -> f64 {
    2.0
}
fn d_slack() -> f64 {
    0.05
}
fn d_eps() -> f64 {
    0.5
}

impl Default for VerifySection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// A parsed configuration together with the digest of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    pub hash: String,
    pub source: String,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text, &path.display().to_string())
    }

    /// Parses `text`; `origin` prefixes error messages as `origin:line:column`.
    pub fn from_str(text: &str, origin: &str) -> Result<Self, CliError> {
        let config: Config = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
            CliError::Config(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
        })?;
        if config.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{origin}: unsupported schema {} (expected {SCHEMA_VERSION})",
                config.schema
            )));
        }
        config.validate().map_err(|m| CliError::Config(format!("{origin}: {m}")))?;
        Ok(Self {
            config,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
            source: origin.to_string(),
        })
    }
}

impl Config {
    fn validate(&self) -> Result<(), String> {
        let t = &self.trainer;
        if t.variants.is_empty() || t.feedback.is_empty() {
            return Err("trainer.variants and trainer.feedback must be non-empty".into());
        }
        if t.episodes == 0 || t.horizon == 0 || t.seeds == 0 {
            return Err("trainer.episodes, trainer.horizon and trainer.seeds must be positive".into());
        }
        if t.final_window == 0 || t.final_window > t.episodes {
            return Err(format!("trainer.final_window must lie in 1..={}", t.episodes));
        }
        if t.variants.contains(&Variant::DistributedTlvf) && t.kappa.is_empty() {
            return Err("trainer.kappa must list at least one value for distributed-tlvf".into());
        }
        let EnvSection::Warehouse(p) = &self.env;
        p.validate().map_err(|e| format!("env: {e}"))?;
        Ok(())
    }

    pub fn coupling_graphs(&self) -> Result<CouplingGraphs, CliError> {
        let g = &self.graphs;
        let n = g.n;
        if n == 0 {
            return Err(CliError::Config("graphs.n must be positive".into()));
        }
        let build = |name: &str, edges: &[[usize; 2]]| -> Result<DirectedGraph, CliError> {
            let mut out = DirectedGraph::empty(n).map_err(|e| CliError::Config(e.to_string()))?;
            for (k, &[i, j]) in edges.iter().enumerate() {
                if i == 0 || j == 0 || i > n || j > n {
                    return Err(CliError::Config(format!(
                        "graphs.{name}[{k}]: edge [{i}, {j}] outside agents 1..={n}"
                    )));
                }
                out.add_edge(i - 1, j - 1).map_err(|e| CliError::Config(e.to_string()))?;
            }
            Ok(out)
        };
        let state = build("state_edges", &g.state_edges)?;
        let obs = build("obs_edges", &g.obs_edges)?;
        let reward = build("reward_edges", &g.reward_edges)?;
        let undirected = |x: &DirectedGraph| x.union(&x.transpose()).expect("same size");
        let comm = match &g.comm_edges {
            CommSpec::Edges(e) => build("comm_edges", e)?,
            CommSpec::Rule(CommRule::State) => undirected(&state),
            CommSpec::Rule(CommRule::SoUndirected) => undirected(&state.union(&obs).expect("same size")),
        };
        CouplingGraphs::new(state, obs, reward, comm).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Partition for the truncated variant.
    pub fn clustering(&self, cg: &CouplingGraphs, ls: &LearningStructure) -> Result<Clustering, CliError> {
        match &self.graphs.clusters {
            ClusterSpec::Rule(ClusterRule::Maximal) => Ok(ls.clustering().clone()),
            ClusterSpec::Rule(ClusterRule::Singletons) => Ok(Clustering::singletons(cg.agent_count())),
            ClusterSpec::Parts(parts) => {
                let n = cg.agent_count();
                let mut zero_based = Vec::with_capacity(parts.len());
                for (k, p) in parts.iter().enumerate() {
                    if let Some(&bad) = p.iter().find(|&&i| i == 0 || i > n) {
                        return Err(CliError::Config(format!(
                            "graphs.clusters[{k}]: agent {bad} outside 1..={n}"
                        )));
                    }
                    zero_based.push(p.iter().map(|i| i - 1).collect());
                }
                Clustering::from_parts(cg.state_obs(), zero_based)
                    .map_err(|e| CliError::Config(format!("graphs.clusters: {e}")))
            }
        }
    }

    pub fn warehouse(&self, cg: &CouplingGraphs) -> Result<WarehouseEnv, CliError> {
        let EnvSection::Warehouse(p) = &self.env;
        WarehouseEnv::new(cg, p.clone()).map_err(|e| CliError::Config(format!("env: {e}")))
    }

    pub fn policy(&self, cg: &CouplingGraphs) -> Result<RbfSoftmaxPolicy, CliError> {
        RbfSoftmaxPolicy::new(cg, &self.policy).map_err(|e| CliError::Config(format!("policy: {e}")))
    }
}

/// Everything derived from a configuration that the commands share.
pub struct Instance {
    pub cg: CouplingGraphs,
    pub ls: LearningStructure,
    pub clustering: Clustering,
    pub env: WarehouseEnv,
    pub policy: RbfSoftmaxPolicy,
}

impl Instance {
    pub fn build(cfg: &Config) -> Result<Self, CliError> {
        let cg = cfg.coupling_graphs()?;
        let ls = learning_sets(&cg);
        let clustering = cfg.clustering(&cg, &ls)?;
        let env = cfg.warehouse(&cg)?;
        let policy = cfg.policy(&cg)?;
        Ok(Self {
            cg,
            ls,
            clustering,
            env,
            policy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3]]}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = LoadedConfig::from_str(MINIMAL, "min.json").unwrap();
        assert_eq!(c.config.trainer.episodes, 600);
        assert_eq!(c.config.verify.samples, 100_000);
        assert_eq!(c.config.env, EnvSection::Warehouse(WarehouseParams::default()));
        assert_eq!(c.hash.len(), 64);
        let cg = c.config.coupling_graphs().unwrap();
        assert!(cg.comm().has_edge(2, 1));
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = "{\"schema\": 1,\n \"graphs\": {\"n\": 2},\n \"bogus\": 3}";
        let err = LoadedConfig::from_str(text, "x.json").unwrap_err().to_string();
        assert!(err.contains("x.json:3:"), "{err}");
        assert!(err.contains("bogus"), "{err}");
        let nested = "{\"schema\": 1, \"graphs\": {\"n\": 2},\n \"env\": {\"env\": \"warehouse\", \"gama\": 0.5}}";
        assert!(LoadedConfig::from_str(nested, "y.json").is_err());
    }

    #[test]
    fn wrong_schema_and_bad_edges_are_rejected() {
        let v2 = r#"{"schema": 2, "graphs": {"n": 2}}"#;
        assert!(LoadedConfig::from_str(v2, "a").unwrap_err().to_string().contains("schema"));
        let bad = r#"{"schema": 1, "graphs": {"n": 2, "state_edges": [[1, 3]]}}"#;
        let c = LoadedConfig::from_str(bad, "b").unwrap();
        let err = c.config.coupling_graphs().unwrap_err().to_string();
        assert!(err.contains("state_edges[0]"), "{err}");
    }

    #[test]
    fn cluster_specs() {
        let text = r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 1], [2, 3]], "clusters": [[1, 2], [3]]}}"#;
        let c = LoadedConfig::from_str(text, "c").unwrap().config;
        let cg = c.coupling_graphs().unwrap();
        let ls = learning_sets(&cg);
        assert_eq!(c.clustering(&cg, &ls).unwrap().len(), 2);
        let finer = text.replace("[[1, 2], [3]]", "[[1], [2], [3]]");
        let c = LoadedConfig::from_str(&finer, "c").unwrap().config;
        assert_eq!(c.clustering(&cg, &ls).unwrap().len(), 3);
        let loose = text.replace("[[1, 2], [3]]", "[[1, 3], [2]]");
        let c = LoadedConfig::from_str(&loose, "c").unwrap().config;
        assert!(c.clustering(&cg, &ls).is_err());
    }

    #[test]
    fn variant_names_are_kebab_case() {
        let text = r#"{"schema": 1, "graphs": {"n": 1}, "trainer": {"variants": ["distributed-tlvf"], "feedback": ["two-point"], "kappa": [1, 4]}}"#;
        let c = LoadedConfig::from_str(text, "v").unwrap().config;
        assert_eq!(c.trainer.variants, vec![Variant::DistributedTlvf]);
        assert_eq!(c.trainer.kappa, vec![1, 4]);
        let bad = text.replace("distributed-tlvf", "tlvf");
        assert!(LoadedConfig::from_str(&bad, "v").is_err());
    }
}
