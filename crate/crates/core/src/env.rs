//! Networked environments: the agent-local contract used by rollouts, the
//! warehouse resource-transfer benchmark and a small linear chain toy.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::CouplingGraphs;
use crate::policy::{LocalPolicy, PolicyError};

/// Slack allowed when checking that allocation fractions sum to at most one.
const ALLOCATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("expected {expected} agents, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("agent {}: expected {expected} action components, got {got}", .agent + 1)]
    ActionDim { agent: usize, expected: usize, got: usize },
    #[error("agent {}: allocation {value} outside [0, 1]", .agent + 1)]
    AllocationOutOfRange { agent: usize, value: f64 },
    #[error("agent {}: allocations sum to {sum}, above 1", .agent + 1)]
    AllocationSum { agent: usize, sum: f64 },
    #[error("invalid environment parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("policy covers {policy} agents but the environment has {env}")]
    AgentMismatch { policy: usize, env: usize },
    #[error("agent {}: policy expects observations of length {policy}, environment emits {env}", .agent + 1)]
    ObservationMismatch { agent: usize, policy: usize, env: usize },
}

/// A multi-agent environment whose agents interact only along coupling graphs.
///
/// Agent `i` sees its observation vector only; actions are per-agent vectors.
pub trait NetworkedEnv: Sync {
    type State: Clone + Send;

    fn agent_count(&self) -> usize;

    fn discount(&self) -> f64;

    fn observation_dim(&self, agent: usize) -> usize;

    fn action_dim(&self, agent: usize) -> usize;

    fn initial_state(&self, rng: &mut dyn RngCore) -> Self::State;

    fn observe(&self, state: &Self::State, agent: usize, out: &mut Vec<f64>);

    /// Per-agent rewards for taking `actions` at `state`.
    fn rewards(&self, state: &Self::State, actions: &[Vec<f64>], out: &mut [f64]);

    fn step(&self, state: &Self::State, actions: &[Vec<f64>]) -> Result<Self::State, EnvError>;
}

/// Gaussian with the given standard deviation, conditioned on `|x| <= bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedGaussian {
    pub std: f64,
    pub bound: f64,
}

impl TruncatedGaussian {
    /// Variance 0.01 truncated to `[-0.01, 0.01]`.
    pub const DEFAULT: Self = Self { std: 0.1, bound: 0.01 };

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.std >= 0.0 && self.std.is_finite() && self.bound >= 0.0 && self.bound.is_finite()) {
            return Err(EnvError::InvalidParameter(format!(
                "truncated gaussian needs finite std >= 0 and bound >= 0, got std={} bound={}",
                self.std, self.bound
            )));
        }
        Ok(())
    }

    /// Rejection sampling: redraw until the value falls inside the bound.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.std == 0.0 || self.bound == 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.std).expect("validated std");
        loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= self.bound {
                return x;
            }
        }
    }
}

impl Default for TruncatedGaussian {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Exogenous net inflow `z_i(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    /// `z_i(t) = amplitude * sin(t)` for every agent.
    FixedSin {
        #[serde(default = "half")]
        amplitude: f64,
    },
    /// `z_i(t) = amplitude * sin(w_i t + phase) + omega_i` with `w_i` and
    /// `omega_i` drawn once per episode.
    Sinusoid {
        amplitude: f64,
        #[serde(default = "one")]
        phase: f64,
        #[serde(default)]
        frequency: TruncatedGaussian,
        #[serde(default)]
        offset: TruncatedGaussian,
    },
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

impl Default for Signal {
    fn default() -> Self {
        Signal::FixedSin { amplitude: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarehouseParams {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub init_stock: f64,
    /// Law of the initial-stock perturbation `chi_i`.
    #[serde(default)]
    pub init_noise: TruncatedGaussian,
    #[serde(default)]
    pub signal: Signal,
    /// Lower clip applied to each agent's reward after summation.
    #[serde(default)]
    pub reward_floor: Option<f64>,
}

fn default_gamma() -> f64 {
    0.9
}

impl Default for WarehouseParams {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            init_stock: 1.0,
            init_noise: TruncatedGaussian::DEFAULT,
            signal: Signal::default(),
            reward_floor: None,
        }
    }
}

impl WarehouseParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::InvalidParameter(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !self.init_stock.is_finite() {
            return Err(EnvError::InvalidParameter("init_stock must be finite".into()));
        }
        self.init_noise.validate()?;
        if let Some(f) = self.reward_floor {
            if !(f.is_finite() && f <= 0.0) {
                return Err(EnvError::InvalidParameter(format!("reward_floor must be finite and <= 0, got {f}")));
            }
        }
        match &self.signal {
            Signal::FixedSin { amplitude } if !amplitude.is_finite() => {
                Err(EnvError::InvalidParameter("signal amplitude must be finite".into()))
            }
            Signal::FixedSin { .. } => Ok(()),
            Signal::Sinusoid {
                amplitude,
                phase,
                frequency,
                offset,
            } => {
                frequency.validate()?;
                offset.validate()?;
                let min_stock = self.init_stock - self.init_noise.bound;
                if !(*amplitude > 0.0 && *amplitude < min_stock) {
                    return Err(EnvError::InvalidParameter(format!(
                        "sinusoid amplitude must lie in (0, {min_stock}), got {amplitude}"
                    )));
                }
                if !(*phase > 0.0 && phase.is_finite()) {
                    return Err(EnvError::InvalidParameter(format!("sinusoid phase must be positive, got {phase}")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarehouseState {
    pub stocks: Vec<f64>,
    /// `z_i(t)` at the current time.
    pub exogenous: Vec<f64>,
    pub time: usize,
    frequency: Vec<f64>,
    offset: Vec<f64>,
}

impl WarehouseState {
    pub fn total_stock(&self) -> f64 {
        self.stocks.iter().sum()
    }
}

/// Warehouses exchanging stock along the state graph.
///
/// Agent `i`'s action is the vector of fractions `b_ij` sent to each
/// out-neighbour `j` of the state graph, in ascending id order.
#[derive(Debug, Clone)]
pub struct WarehouseEnv {
    params: WarehouseParams,
    out_state: Vec<Vec<usize>>,
    obs_sets: Vec<Vec<usize>>,
    reward_sets: Vec<Vec<usize>>,
}

impl WarehouseEnv {
    pub fn new(cg: &CouplingGraphs, params: WarehouseParams) -> Result<Self, EnvError> {
        params.validate()?;
        let n = cg.agent_count();
        Ok(Self {
            params,
            out_state: (0..n).map(|i| cg.state().out_neighbors(i).collect()).collect(),
            obs_sets: (0..n).map(|i| cg.obs_in_set(i)).collect(),
            reward_sets: (0..n).map(|i| cg.reward_in_set(i)).collect(),
        })
    }

    pub fn params(&self) -> &WarehouseParams {
        &self.params
    }

    pub fn out_neighbors(&self, agent: usize) -> &[usize] {
        &self.out_state[agent]
    }

    pub fn obs_set(&self, agent: usize) -> &[usize] {
        &self.obs_sets[agent]
    }

    pub fn reward_set(&self, agent: usize) -> &[usize] {
        &self.reward_sets[agent]
    }

    /// A state with given stocks at time `t` and the default signal draws.
    pub fn state_with_stocks(&self, stocks: Vec<f64>, time: usize) -> WarehouseState {
        let n = stocks.len();
        let mut s = WarehouseState {
            stocks,
            exogenous: vec![0.0; n],
            time,
            frequency: vec![0.0; n],
            offset: vec![0.0; n],
        };
        self.refresh_signal(&mut s);
        s
    }

    fn refresh_signal(&self, s: &mut WarehouseState) {
        let t = s.time as f64;
        for i in 0..s.stocks.len() {
            s.exogenous[i] = match &self.params.signal {
                Signal::FixedSin { amplitude } => amplitude * t.sin(),
                Signal::Sinusoid { amplitude, phase, .. } => {
                    amplitude * (s.frequency[i] * t + phase).sin() + s.offset[i]
                }
            };
        }
    }
}

/// One tick of the warehouse dynamics:
/// `m_i' = m_i - sum_{j out} b_ij m_i + sum_{j in} b_ji m_j + z_i`.
pub fn warehouse_step(
    env: &WarehouseEnv,
    state: &WarehouseState,
    actions: &[Vec<f64>],
) -> Result<WarehouseState, EnvError> {
    let n = env.out_state.len();
    if state.stocks.len() != n || actions.len() != n {
        return Err(EnvError::AgentCount {
            expected: n,
            got: if state.stocks.len() != n { state.stocks.len() } else { actions.len() },
        });
    }
    for (i, b) in actions.iter().enumerate() {
        if b.len() != env.out_state[i].len() {
            return Err(EnvError::ActionDim {
                agent: i,
                expected: env.out_state[i].len(),
                got: b.len(),
            });
        }
        if let Some(&value) = b.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EnvError::AllocationOutOfRange { agent: i, value });
        }
        let sum: f64 = b.iter().sum();
        if sum > 1.0 + ALLOCATION_TOL {
            return Err(EnvError::AllocationSum { agent: i, sum });
        }
    }
    let mut next = state.stocks.clone();
    for i in 0..n {
        let m = state.stocks[i];
        for (k, &j) in env.out_state[i].iter().enumerate() {
            let flow = actions[i][k] * m;
            next[i] -= flow;
            next[j] += flow;
        }
    }
    for (m, z) in next.iter_mut().zip(&state.exogenous) {
        *m += z;
    }
    let mut out = WarehouseState {
        stocks: next,
        exogenous: state.exogenous.clone(),
        time: state.time + 1,
        frequency: state.frequency.clone(),
        offset: state.offset.clone(),
    };
    env.refresh_signal(&mut out);
    Ok(out)
}

/// Shortage penalty `-m^2` for negative stock, zero otherwise.
pub fn shortage_cost(m: f64) -> f64 {
    if m < 0.0 {
        -m * m
    } else {
        0.0
    }
}

/// `r_i = sum_{j in I_i^R} tau_j`, clipped below at `floor` when given.
pub fn warehouse_reward(stocks: &[f64], reward_sets: &[Vec<usize>], floor: Option<f64>) -> Vec<f64> {
    let tau: Vec<f64> = stocks.iter().map(|&m| shortage_cost(m)).collect();
    reward_sets
        .iter()
        .map(|set| {
            let r: f64 = set.iter().map(|&j| tau[j]).sum();
            floor.map_or(r, |f| r.max(f))
        })
        .collect()
}

impl NetworkedEnv for WarehouseEnv {
    type State = WarehouseState;

    fn agent_count(&self) -> usize {
        self.out_state.len()
    }

    fn discount(&self) -> f64 {
        self.params.gamma
    }

    fn observation_dim(&self, agent: usize) -> usize {
        self.obs_sets[agent].len() + 1
    }

    fn action_dim(&self, agent: usize) -> usize {
        self.out_state[agent].len()
    }

    fn initial_state(&self, rng: &mut dyn RngCore) -> WarehouseState {
        let n = self.agent_count();
        let stocks = (0..n)
            .map(|_| self.params.init_stock + self.params.init_noise.sample(rng))
            .collect();
        let mut s = WarehouseState {
            stocks,
            exogenous: vec![0.0; n],
            time: 0,
            frequency: vec![0.0; n],
            offset: vec![0.0; n],
        };
        if let Signal::Sinusoid { frequency, offset, .. } = &self.params.signal {
            for i in 0..n {
                s.frequency[i] = frequency.sample(rng);
                s.offset[i] = offset.sample(rng);
            }
        }
        self.refresh_signal(&mut s);
        s
    }

    fn observe(&self, state: &WarehouseState, agent: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.obs_sets[agent].iter().map(|&j| state.stocks[j]));
        out.push(state.exogenous[agent]);
    }

    fn rewards(&self, state: &WarehouseState, _actions: &[Vec<f64>], out: &mut [f64]) {
        let r = warehouse_reward(&state.stocks, &self.reward_sets, self.params.reward_floor);
        out.copy_from_slice(&r);
    }

    fn step(&self, state: &WarehouseState, actions: &[Vec<f64>]) -> Result<WarehouseState, EnvError> {
        warehouse_step(self, state, actions)
    }
}

/// Linear chain `s_1' = a_1`, `s_i' = coupling * s_{i-1} + a_i`, with reward
/// `r_i = -(s_i - target)^2 - action_cost * a_i^2` and a deterministic zero
/// initial state. Agent `i`'s action is one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainToy {
    pub agents: usize,
    pub coupling: f64,
    pub target: f64,
    pub action_cost: f64,
    pub gamma: f64,
}

impl Default for ChainToy {
    fn default() -> Self {
        Self {
            agents: 3,
            coupling: 0.5,
            target: 1.0,
            action_cost: 0.1,
            gamma: 0.9,
        }
    }
}

impl NetworkedEnv for ChainToy {
    type State = Vec<f64>;

    fn agent_count(&self) -> usize {
        self.agents
    }

    fn discount(&self) -> f64 {
        self.gamma
    }

    fn observation_dim(&self, _agent: usize) -> usize {
        1
    }

    fn action_dim(&self, _agent: usize) -> usize {
        1
    }

    fn initial_state(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0; self.agents]
    }

    fn observe(&self, state: &Vec<f64>, agent: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(state[agent]);
    }

    fn rewards(&self, state: &Vec<f64>, actions: &[Vec<f64>], out: &mut [f64]) {
        for i in 0..self.agents {
            let a = actions[i][0];
            out[i] = -(state[i] - self.target).powi(2) - self.action_cost * a * a;
        }
    }

    fn step(&self, state: &Vec<f64>, actions: &[Vec<f64>]) -> Result<Vec<f64>, EnvError> {
        if actions.len() != self.agents {
            return Err(EnvError::AgentCount {
                expected: self.agents,
                got: actions.len(),
            });
        }
        Ok((0..self.agents)
            .map(|i| {
                let upstream = if i == 0 { 0.0 } else { self.coupling * state[i - 1] };
                upstream + actions[i][0]
            })
            .collect())
    }
}

/// One recorded tick of a rollout.
#[derive(Debug, Clone)]
pub struct TraceStep<S> {
    pub time: usize,
    pub state: S,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult<S> {
    /// `W_i = sum_{t < T_e} gamma^t r_i(t)`.
    pub returns: Vec<f64>,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Number of (agent, tick) observations outside the policy's feature range.
    pub out_of_range: usize,
    pub trace: Option<Vec<TraceStep<S>>>,
}

impl<S> RolloutResult<S> {
    pub fn global_return(&self) -> f64 {
        self.returns.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.returns.iter().all(|w| w.is_finite())
    }
}

/// Simulates `horizon` ticks from a freshly drawn initial state.
pub fn rollout<E, P>(
    env: &E,
    policy: &P,
    theta: &[f64],
    horizon: usize,
    rng: &mut dyn RngCore,
    record: bool,
) -> Result<RolloutResult<E::State>, RolloutError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    let s0 = env.initial_state(rng);
    rollout_from(env, policy, theta, s0, horizon, record)
}

/// Simulates `horizon` ticks from `s0`. Each tick: observe, act, collect the
/// reward on the current state, transition.
pub fn rollout_from<E, P>(
    env: &E,
    policy: &P,
    theta: &[f64],
    s0: E::State,
    horizon: usize,
    record: bool,
) -> Result<RolloutResult<E::State>, RolloutError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    if horizon == 0 {
        return Err(RolloutError::EmptyHorizon);
    }
    let n = env.agent_count();
    if policy.agent_count() != n {
        return Err(RolloutError::AgentMismatch {
            policy: policy.agent_count(),
            env: n,
        });
    }
    policy.layout().check_len(theta.len())?;
    for i in 0..n {
        match policy.observation_dim(i) {
            Some(d) if d != env.observation_dim(i) => {
                return Err(RolloutError::ObservationMismatch {
                    agent: i,
                    policy: d,
                    env: env.observation_dim(i),
                });
            }
            _ => {}
        }
    }
    let gamma = env.discount();
    let mut result = RolloutResult {
        returns: vec![0.0; n],
        reward_min: f64::INFINITY,
        reward_max: f64::NEG_INFINITY,
        out_of_range: 0,
        trace: record.then(Vec::new),
    };
    let mut state = s0;
    let mut obs = Vec::new();
    let mut actions = vec![Vec::new(); n];
    let mut rewards = vec![0.0; n];
    let mut discount = 1.0;
    for t in 0..horizon {
        for (i, a) in actions.iter_mut().enumerate() {
            env.observe(&state, i, &mut obs);
            if !policy.in_range(i, &obs) {
                result.out_of_range += 1;
            }
            policy.act(i, &obs, policy.layout().slice(theta, i), a)?;
        }
        env.rewards(&state, &actions, &mut rewards);
        for (w, &r) in result.returns.iter_mut().zip(&rewards) {
            *w += discount * r;
            result.reward_min = result.reward_min.min(r);
            result.reward_max = result.reward_max.max(r);
        }
        let next = env.step(&state, &actions)?;
        if let Some(trace) = result.trace.as_mut() {
            trace.push(TraceStep {
                time: t,
                state,
                actions: actions.clone(),
                rewards: rewards.clone(),
            });
        }
        state = next;
        discount *= gamma;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ConstantPolicy, ParamLayout};
    use crate::presets;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_agent_env() -> WarehouseEnv {
        let cg = presets::with_symmetric_comm(2, &[(1, 2)], &[], &[]).unwrap();
        let params = WarehouseParams {
            signal: Signal::FixedSin { amplitude: 0.0 },
            ..WarehouseParams::default()
        };
        WarehouseEnv::new(&cg, params).unwrap()
    }

    #[test]
    fn zero_allocation_without_inflow_keeps_stocks() {
        let env = two_agent_env();
        let s = env.state_with_stocks(vec![3.0, -1.0], 0);
        let next = warehouse_step(&env, &s, &[vec![0.0], vec![]]).unwrap();
        assert_eq!(next.stocks, vec![3.0, -1.0]);
        assert_eq!(next.time, 1);
    }

    #[test]
    fn full_transfer_moves_everything() {
        let env = two_agent_env();
        let s = env.state_with_stocks(vec![5.0, 0.0], 0);
        let next = warehouse_step(&env, &s, &[vec![1.0], vec![]]).unwrap();
        assert_eq!(next.stocks, vec![0.0, 5.0]);
    }

    #[test]
    fn invalid_allocations_are_rejected() {
        let env = two_agent_env();
        let s = env.state_with_stocks(vec![1.0, 1.0], 0);
        assert!(matches!(
            warehouse_step(&env, &s, &[vec![1.5], vec![]]),
            Err(EnvError::AllocationOutOfRange { agent: 0, .. })
        ));
        assert!(matches!(
            warehouse_step(&env, &s, &[vec![0.5, 0.5], vec![]]),
            Err(EnvError::ActionDim { agent: 0, expected: 1, got: 2 })
        ));
        assert!(matches!(
            warehouse_step(&env, &s, &[vec![0.5]]),
            Err(EnvError::AgentCount { .. })
        ));
    }

    #[test]
    fn allocation_sum_above_one_is_rejected() {
        let cg = presets::with_symmetric_comm(3, &[(1, 2), (1, 3)], &[], &[]).unwrap();
        let env = WarehouseEnv::new(&cg, WarehouseParams::default()).unwrap();
        let s = env.state_with_stocks(vec![1.0; 3], 0);
        assert!(matches!(
            warehouse_step(&env, &s, &[vec![0.6, 0.6], vec![], vec![]]),
            Err(EnvError::AllocationSum { agent: 0, .. })
        ));
    }

    #[test]
    fn reward_examples() {
        let sets = vec![vec![0], vec![0, 1]];
        assert_eq!(warehouse_reward(&[1.0, 0.0], &sets, None), vec![0.0, 0.0]);
        assert_eq!(warehouse_reward(&[-2.0, 3.0], &sets, None), vec![-4.0, -4.0]);
        assert_eq!(warehouse_reward(&[-2.0, -1.0], &sets, Some(-3.0)), vec![-3.0, -3.0]);
    }

    #[test]
    fn sinusoid_amplitude_must_stay_below_initial_stock() {
        let cg = presets::chain3();
        let mut params = WarehouseParams {
            signal: Signal::Sinusoid {
                amplitude: 1.5,
                phase: 1.0,
                frequency: TruncatedGaussian::DEFAULT,
                offset: TruncatedGaussian::DEFAULT,
            },
            ..WarehouseParams::default()
        };
        assert!(WarehouseEnv::new(&cg, params.clone()).is_err());
        params.signal = Signal::Sinusoid {
            amplitude: 0.5,
            phase: 1.0,
            frequency: TruncatedGaussian::DEFAULT,
            offset: TruncatedGaussian::DEFAULT,
        };
        assert!(WarehouseEnv::new(&cg, params).is_ok());
        let bad_gamma = WarehouseParams {
            gamma: 1.0,
            ..WarehouseParams::default()
        };
        assert!(WarehouseEnv::new(&cg, bad_gamma).is_err());
    }

    #[test]
    fn initial_stocks_respect_truncation() {
        let env = WarehouseEnv::new(&presets::warehouse9(), WarehouseParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = env.initial_state(&mut rng);
            assert!(s.stocks.iter().all(|m| (m - 1.0).abs() <= 0.01));
            assert_eq!(s.exogenous, vec![0.0; 9]);
        }
    }

    #[test]
    fn observation_lists_observed_stocks_then_signal() {
        let env = WarehouseEnv::new(&presets::warehouse9(), WarehouseParams::default()).unwrap();
        let s = env.state_with_stocks((1..=9).map(f64::from).collect(), 2);
        let mut o = Vec::new();
        env.observe(&s, 1, &mut o);
        // agent 2 observes agent 1
        assert_eq!(o, vec![1.0, 2.0, 0.5 * 2f64.sin()]);
        assert_eq!(env.observation_dim(1), 3);
    }

    fn constant_reward_env() -> (ChainToy, ConstantPolicy) {
        // target equals the steady state under zero action and zero start.
        let toy = ChainToy {
            target: 0.0,
            ..ChainToy::default()
        };
        (toy, ConstantPolicy::new(ParamLayout::uniform(3, 1)))
    }

    #[test]
    fn constant_reward_gives_geometric_return() {
        let (mut toy, policy) = constant_reward_env();
        toy.target = 2.0; // r = -4 every tick when actions and states stay 0
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = rollout(&toy, &policy, &[0.0; 3], 7, &mut rng, false).unwrap();
        let expected = -4.0 * (1.0 - 0.9f64.powi(7)) / (1.0 - 0.9);
        for w in res.returns {
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tick_return_is_first_reward() {
        let env = WarehouseEnv::new(&presets::warehouse9(), WarehouseParams::default()).unwrap();
        let policy = ConstantPolicy::for_env(&env);
        let theta = vec![0.0; policy.layout().total()];
        let s0 = env.state_with_stocks(vec![-1.0; 9], 0);
        let res = rollout_from(&env, &policy, &theta, s0.clone(), 1, true).unwrap();
        let r0 = warehouse_reward(&s0.stocks, &env.reward_sets, None);
        assert_eq!(res.returns, r0);
        assert_eq!(res.trace.unwrap().len(), 1);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let (toy, policy) = constant_reward_env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            rollout(&toy, &policy, &[0.0; 3], 0, &mut rng, false),
            Err(RolloutError::EmptyHorizon)
        ));
        assert!(rollout(&toy, &policy, &[0.0; 2], 1, &mut rng, false).is_err());
    }

    #[test]
    fn chain_toy_propagates_downstream() {
        let toy = ChainToy::default();
        let s = toy.step(&vec![0.0, 2.0, 4.0], &[vec![1.0], vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 1.5]);
    }

    proptest! {
        #[test]
        fn stock_is_conserved_up_to_inflow(
            stocks in proptest::collection::vec(-5.0f64..5.0, 9),
            raw in proptest::collection::vec(0.0f64..1.0, 30),
            t in 0usize..50,
        ) {
            let cg = presets::warehouse9();
            let env = WarehouseEnv::new(&cg, WarehouseParams::default()).unwrap();
            let s = env.state_with_stocks(stocks, t);
            let mut k = 0;
            let actions: Vec<Vec<f64>> = (0..9).map(|i| {
                let deg = env.out_neighbors(i).len();
                let v: Vec<f64> = (0..deg).map(|_| { k += 1; raw[k - 1] }).collect();
                let total: f64 = v.iter().sum::<f64>() + raw[29];
                v.iter().map(|x| x / total.max(1.0)).collect()
            }).collect();
            let next = warehouse_step(&env, &s, &actions).unwrap();
            let expected = s.total_stock() + s.exogenous.iter().sum::<f64>();
            prop_assert!((next.total_stock() - expected).abs() < 1e-12);
        }

        #[test]
        fn reward_matches_double_loop(
            stocks in proptest::collection::vec(-3.0f64..3.0, 6),
            mask in proptest::collection::vec(any::<bool>(), 36),
        ) {
            let sets: Vec<Vec<usize>> = (0..6)
                .map(|i| (0..6).filter(|&j| j == i || mask[i * 6 + j]).collect())
                .collect();
            let r = warehouse_reward(&stocks, &sets, None);
            for (set, ri) in sets.iter().zip(&r) {
                let mut acc = 0.0;
                for (j, &x) in stocks.iter().enumerate() {
                    if set.contains(&j) && x < 0.0 {
                        acc -= x * x;
                    }
                }
                prop_assert!((ri - acc).abs() < 1e-12);
            }
        }

        #[test]
        fn reward_reads_only_reward_neighbours(
            stocks in proptest::collection::vec(-3.0f64..3.0, 9),
            agent in 0usize..9,
            other in 0usize..9,
            bump in -2.0f64..2.0,
        ) {
            let env = WarehouseEnv::new(&presets::warehouse9(), WarehouseParams::default()).unwrap();
            prop_assume!(!env.reward_set(agent).contains(&other));
            let base = warehouse_reward(&stocks, &env.reward_sets, None);
            let mut moved = stocks.clone();
            moved[other] += bump;
            let after = warehouse_reward(&moved, &env.reward_sets, None);
            prop_assert_eq!(base[agent], after[agent]);
        }
    }
}
