//! Zeroth-order gradient oracles, the distributed training loop and the
//! parameter schedules that accompany its convergence guarantees.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{metropolis_weights, run_consensus, ConsensusError, WeightMatrix};
use crate::env::{rollout_from, NetworkedEnv, RolloutError};
use crate::graphs::{Clustering, CouplingGraphs, LearningStructure, TruncationStructure};
use crate::policy::{LocalPolicy, PerturbationSample, PolicyParams};
use crate::seeding::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZooError {
    #[error("invalid trainer setting: {0}")]
    Config(String),
    #[error("smoothing radius must be positive, got {0}")]
    Radius(f64),
    #[error("assumption violated: {0}")]
    Assumption(#[from] ConsensusError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("gradient block has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// How rewards are aggregated into each agent's value estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Every agent uses the exact global return.
    Centralized,
    /// Local value functions over maximal clusters, averaged by consensus.
    DistributedLvf,
    /// Truncated local value functions, averaged by consensus.
    DistributedTlvf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Centralized, Variant::DistributedLvf, Variant::DistributedTlvf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Centralized => "centralized",
            Variant::DistributedLvf => "distributed-lvf",
            Variant::DistributedTlvf => "distributed-tlvf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    OnePoint,
    TwoPoint,
}

impl Feedback {
    pub const ALL: [Feedback; 2] = [Feedback::OnePoint, Feedback::TwoPoint];

    pub fn name(self) -> &'static str {
        match self {
            Feedback::OnePoint => "one-point",
            Feedback::TwoPoint => "two-point",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub feedback: Feedback,
    pub episodes: usize,
    pub horizon: usize,
    pub consensus_iters: usize,
    pub step_size: f64,
    pub radius: f64,
    pub kappa: Option<usize>,
    /// Norm cap on the assembled gradient. Off unless set.
    pub grad_clip: Option<f64>,
    /// Record elapsed milliseconds per episode instead of zero.
    pub measure_time: bool,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), ZooError> {
        let bad = |m: String| Err(ZooError::Config(m));
        if self.episodes == 0 || self.horizon == 0 || self.consensus_iters == 0 {
            return bad("episodes, horizon and consensus_iters must be at least 1".into());
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be finite and >= 0, got {}", self.step_size));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(ZooError::Radius(self.radius));
        }
        if self.variant == Variant::DistributedTlvf && self.kappa.is_none() {
            return bad("distributed-tlvf requires kappa".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `g_i = n_l μ_i(T_c) u_i / δ`.
pub fn one_point_gradient(mu: f64, n_l: usize, u_i: &[f64], delta: f64) -> Result<Vec<f64>, ZooError> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(ZooError::Radius(delta));
    }
    let c = n_l as f64 * mu / delta;
    Ok(u_i.iter().map(|u| c * u).collect())
}

/// `g_i = n_l (μ_i(T_c) - ν_i(T_c)) u_i / δ`.
pub fn two_point_gradient(mu: f64, nu: f64, n_l: usize, u_i: &[f64], delta: f64) -> Result<Vec<f64>, ZooError> {
    one_point_gradient(mu - nu, n_l, u_i, delta)
}

/// One consensus group: the agents whose rewards are averaged and the
/// agents (one cluster) that read the result.
#[derive(Debug, Clone)]
pub struct ConsensusGroup {
    pub cluster: usize,
    pub owners: Vec<usize>,
    pub size: usize,
    pub weights: WeightMatrix,
}

/// Consensus groups covering every agent exactly once as an owner.
#[derive(Debug, Clone)]
pub struct ConsensusPlan {
    agent_count: usize,
    groups: Vec<ConsensusGroup>,
}

impl ConsensusPlan {
    /// Maximal clusters with member sets `I_l^cl`.
    pub fn lvf(cg: &CouplingGraphs, ls: &LearningStructure) -> Result<Self, ZooError> {
        let clustering = ls.clustering();
        let groups = (0..clustering.len())
            .map(|l| {
                Ok(ConsensusGroup {
                    cluster: l,
                    owners: clustering.members(l).to_vec(),
                    size: ls.cluster_size(l),
                    weights: metropolis_weights(cg.comm(), l, ls.cluster_set(l))?,
                })
            })
            .collect::<Result<Vec<_>, ZooError>>()?;
        Ok(Self {
            agent_count: cg.agent_count(),
            groups,
        })
    }

    /// Possibly finer clusters with truncated member sets `I_l^κ`.
    pub fn tlvf(cg: &CouplingGraphs, clustering: &Clustering, trunc: &TruncationStructure) -> Result<Self, ZooError> {
        if trunc.members.len() != clustering.len() {
            return Err(ZooError::Config(format!(
                "truncation covers {} clusters, clustering has {}",
                trunc.members.len(),
                clustering.len()
            )));
        }
        let groups = (0..clustering.len())
            .map(|l| {
                Ok(ConsensusGroup {
                    cluster: l,
                    owners: clustering.members(l).to_vec(),
                    size: trunc.sizes[l],
                    weights: metropolis_weights(cg.comm(), l, &trunc.members[l])?,
                })
            })
            .collect::<Result<Vec<_>, ZooError>>()?;
        Ok(Self {
            agent_count: cg.agent_count(),
            groups,
        })
    }

    pub fn groups(&self) -> &[ConsensusGroup] {
        &self.groups
    }

    /// Largest contraction factor over all groups.
    pub fn rho_max(&self) -> f64 {
        self.groups.iter().map(|g| g.weights.rho()).fold(0.0, f64::max)
    }

    /// Largest group size.
    pub fn size_max(&self) -> usize {
        self.groups.iter().map(|g| g.size).max().unwrap_or(0)
    }

    /// Group size seen by each agent.
    pub fn sizes_by_agent(&self) -> Vec<usize> {
        let mut out = vec![0; self.agent_count];
        for g in &self.groups {
            for &i in &g.owners {
                out[i] = g.size;
            }
        }
        out
    }

    /// Per-agent `n_l μ_i(T_c)` after consensus on `values`, and the largest
    /// deviation of any member's final value from its group average.
    pub fn evaluate(&self, values: &[f64], iterations: usize) -> Result<(Vec<f64>, f64), ZooError> {
        let mut est = vec![0.0; self.agent_count];
        let mut residual = 0.0f64;
        for g in &self.groups {
            let members = g.weights.members();
            let initial: Vec<f64> = members.iter().map(|&j| values[j]).collect();
            let run = run_consensus(&g.weights, &initial, iterations)?;
            residual = residual.max(run.residual());
            for &i in &g.owners {
                let pos = members.binary_search(&i).expect("owners are members");
                est[i] = g.size as f64 * run.last()[pos];
            }
        }
        Ok((est, residual))
    }
}

/// Maps per-agent returns to the value estimate each agent's oracle uses.
#[derive(Debug, Clone)]
pub enum Aggregator {
    /// Exact global sum for every agent.
    Global { agents: usize },
    Consensus(ConsensusPlan),
}

impl Aggregator {
    /// Builds the aggregator for `variant`. TLVF needs a clustering and a
    /// truncation structure built on it.
    pub fn for_variant(
        variant: Variant,
        cg: &CouplingGraphs,
        ls: &LearningStructure,
        tlvf: Option<(&Clustering, &TruncationStructure)>,
    ) -> Result<Self, ZooError> {
        match variant {
            Variant::Centralized => Ok(Aggregator::Global {
                agents: cg.agent_count(),
            }),
            Variant::DistributedLvf => Ok(Aggregator::Consensus(ConsensusPlan::lvf(cg, ls)?)),
            Variant::DistributedTlvf => {
                let (c, t) = tlvf.ok_or_else(|| ZooError::Config("distributed-tlvf requires a truncation".into()))?;
                Ok(Aggregator::Consensus(ConsensusPlan::tlvf(cg, c, t)?))
            }
        }
    }

    pub fn estimates(&self, returns: &[f64], iterations: usize) -> Result<(Vec<f64>, f64), ZooError> {
        match self {
            Aggregator::Global { agents } => {
                let total: f64 = returns.iter().sum();
                Ok((vec![total; *agents], 0.0))
            }
            Aggregator::Consensus(plan) => plan.evaluate(returns, iterations),
        }
    }

    /// Multiplier `n_l` seen by each agent (`N` for the global aggregator).
    pub fn sizes_by_agent(&self) -> Vec<usize> {
        match self {
            Aggregator::Global { agents } => vec![*agents; *agents],
            Aggregator::Consensus(plan) => plan.sizes_by_agent(),
        }
    }
}

/// Assembles the full oracle output from per-agent value estimates:
/// `g_i = (est_i - base_i) u_i / δ` where `base` is zero for one-point feedback.
pub fn assemble_gradient(
    estimates: &[f64],
    baseline: Option<&[f64]>,
    u: &PerturbationSample,
    delta: f64,
) -> Result<Vec<f64>, ZooError> {
    let mut g = Vec::with_capacity(u.u.len());
    for (i, &e) in estimates.iter().enumerate() {
        let block = match baseline {
            Some(b) => two_point_gradient(e, b[i], 1, u.agent(i), delta)?,
            None => one_point_gradient(e, 1, u.agent(i), delta)?,
        };
        g.extend(block);
    }
    if g.len() != u.u.len() {
        return Err(ZooError::Dimension {
            expected: u.u.len(),
            got: g.len(),
        });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Sum of all agents' partial returns at the perturbed policy.
    pub global_return: f64,
    pub grad_norm: f64,
    pub consensus_residual: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub seed: u64,
    pub variant: Variant,
    pub feedback: Feedback,
    pub records: Vec<EpisodeRecord>,
    /// Episode whose rollout produced a non-finite return; training stopped there.
    pub diverged_at: Option<usize>,
    pub theta: PolicyParams,
    pub reward_min: f64,
    pub reward_max: f64,
    pub out_of_range: usize,
}

impl TrainLog {
    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.global_return).collect()
    }
}

/// Runs the training loop for one seed.
///
/// Episode `k` draws `u^k` and `s_0` from streams keyed by
/// `(master_seed, seed, k)` only, so every variant sees the same
/// perturbations and initial states. Two-point feedback adds a baseline
/// rollout at `θ^k` from its own initial-state stream.
pub fn train<E, P>(
    cfg: &TrainerConfig,
    env: &E,
    policy: &P,
    aggregator: &Aggregator,
    theta0: &PolicyParams,
    master_seed: u64,
    seed: u64,
) -> Result<TrainLog, ZooError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    cfg.validate()?;
    policy
        .layout()
        .check_len(theta0.theta().len())
        .map_err(RolloutError::from)?;
    let start = Instant::now();
    let mut theta = theta0.clone();
    let mut log = TrainLog {
        seed,
        variant: cfg.variant,
        feedback: cfg.feedback,
        records: Vec::with_capacity(cfg.episodes),
        diverged_at: None,
        theta: theta0.clone(),
        reward_min: f64::INFINITY,
        reward_max: f64::NEG_INFINITY,
        out_of_range: 0,
    };
    for k in 0..cfg.episodes {
        let episode = k as u64;
        let u = PerturbationSample::draw(theta.layout(), &mut stream(master_seed, seed, episode, Purpose::Perturbation));
        let s0 = env.initial_state(&mut stream(master_seed, seed, episode, Purpose::InitialState));
        let perturbed = u.apply(theta.theta(), cfg.radius);
        let res = rollout_from(env, policy, &perturbed, s0, cfg.horizon, false)?;
        log.reward_min = log.reward_min.min(res.reward_min);
        log.reward_max = log.reward_max.max(res.reward_max);
        log.out_of_range += res.out_of_range;
        if !res.is_finite() {
            log.diverged_at = Some(k);
            break;
        }
        let (est, mut residual) = aggregator.estimates(&res.returns, cfg.consensus_iters)?;
        let baseline = match cfg.feedback {
            Feedback::OnePoint => None,
            Feedback::TwoPoint => {
                let s0b = env.initial_state(&mut stream(master_seed, seed, episode, Purpose::BaselineState));
                let base = rollout_from(env, policy, theta.theta(), s0b, cfg.horizon, false)?;
                if !base.is_finite() {
                    log.diverged_at = Some(k);
                    break;
                }
                let (b, r) = aggregator.estimates(&base.returns, cfg.consensus_iters)?;
                residual = residual.max(r);
                Some(b)
            }
        };
        let mut g = assemble_gradient(&est, baseline.as_deref(), &u, cfg.radius)?;
        let mut norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if let Some(cap) = cfg.grad_clip {
            if norm > cap {
                let s = cap / norm;
                g.iter_mut().for_each(|x| *x *= s);
                norm = cap;
            }
        }
        for (t, gi) in theta.theta_mut().iter_mut().zip(&g) {
            *t += cfg.step_size * gi;
        }
        log.records.push(EpisodeRecord {
            episode: k,
            global_return: res.global_return(),
            grad_norm: norm,
            consensus_residual: residual,
            wallclock_ms: if cfg.measure_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    log.theta = theta;
    Ok(log)
}

/// A logarithmic lower bound that may be vacuous when its argument is at least one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogBound {
    Finite { value: f64 },
    /// `log_b(argument)` with `argument >= 1` is non-positive: every value satisfies it.
    Vacuous { argument: f64 },
}

impl LogBound {
    fn of(argument: f64, base: f64) -> Self {
        if argument >= 1.0 {
            LogBound::Vacuous { argument }
        } else if base == 0.0 {
            // A zero contraction factor reaches exact agreement in one step.
            LogBound::Finite { value: 1.0 }
        } else {
            LogBound::Finite {
                value: argument.ln() / base.ln(),
            }
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            LogBound::Finite { value } => Some(value),
            LogBound::Vacuous { .. } => None,
        }
    }
}

/// Constants entering the step-size, radius and sample-count schedules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleInputs {
    pub epsilon: f64,
    /// Total parameter dimension `d`.
    pub dim: usize,
    pub lipschitz: f64,
    pub gamma: f64,
    /// Largest contraction factor `ρ_0`.
    pub rho0: f64,
    /// Largest consensus-group size (`n_0` or `n_0^κ`).
    pub n0: usize,
    pub agents: usize,
    pub j_l: f64,
    pub j_u: f64,
    pub sigma0: f64,
    /// Smoothed objective at the initial parameters.
    pub j_delta0: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub truncation: Option<TruncationInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationInputs {
    pub kappa: usize,
    /// `max_l |V̄_l^κ|`.
    pub max_beyond: usize,
    /// Largest per-agent Lipschitz constant `L_0`.
    pub l0: f64,
    /// Largest per-agent dimension `d_0`.
    pub d0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleBounds {
    pub delta: f64,
    pub eta: f64,
    pub b: f64,
    pub k_min: f64,
    pub t_e_min: LogBound,
    pub t_c_min: LogBound,
    /// `γ^{κ+1}` when truncated.
    pub residual_factor: Option<f64>,
    /// `γ^{κ+1} max_l |V̄_l^κ| L_0 sqrt(d d_0)` when truncated.
    pub residual: Option<f64>,
}

/// `J_0 = max(|J_l|, |J_u|)`.
pub fn j0(j_l: f64, j_u: f64) -> f64 {
    j_l.abs().max(j_u.abs())
}

pub fn theoretical_schedule(x: &ScheduleInputs) -> Result<ScheduleBounds, ZooError> {
    let bad = |m: &str| Err(ZooError::Config(m.to_string()));
    if !(x.epsilon > 0.0 && x.epsilon < 1.0) {
        return bad("epsilon must lie in (0, 1)");
    }
    if !(x.gamma > 0.0 && x.gamma < 1.0) {
        return bad("gamma must lie in (0, 1)");
    }
    if !(x.rho0 >= 0.0 && x.rho0 < 1.0) {
        return bad("rho0 must lie in [0, 1)");
    }
    if x.dim == 0 || x.n0 == 0 || x.episodes == 0 || x.lipschitz.is_nan() || x.lipschitz <= 0.0 || x.j_l > x.j_u {
        return bad("dimension, group size, episodes and Lipschitz constant must be positive, with J_l <= J_u");
    }
    let d = x.dim as f64;
    let n0 = x.n0 as f64;
    let l = x.lipschitz;
    let eps15 = x.epsilon.powf(1.5);
    let j0 = j0(x.j_l, x.j_u);
    let tail = (1.0 + x.gamma.powi(x.horizon as i32)).powi(2);
    let b = 2.0 * (x.agents as f64 * x.j_u - x.j_delta0) + l.powi(4) * n0 * n0 * (x.sigma0.powi(2) + tail * j0 * j0);
    let coef = if x.truncation.is_some() {
        4.0 * n0 * n0
    } else {
        2.0 * 2f64.sqrt() * n0 * n0
    };
    let (residual_factor, residual) = match &x.truncation {
        Some(t) => {
            let f = x.gamma.powi(t.kappa as i32 + 1);
            (Some(f), Some(f * t.max_beyond as f64 * t.l0 * (d * t.d0 as f64).sqrt()))
        }
        None => (None, None),
    };
    Ok(ScheduleBounds {
        delta: x.epsilon / (l * d.sqrt()),
        eta: eps15 / (d.powf(1.5) * (x.episodes as f64).sqrt()),
        b,
        k_min: d.powi(3) * b * b / x.epsilon.powi(5),
        t_e_min: LogBound::of(eps15 / (coef * l * d * j0), x.gamma),
        t_c_min: LogBound::of(eps15 / (coef * l * d * (x.j_u - x.j_l + j0)), x.rho0),
        residual_factor,
        residual,
    })
}
