//! Parameter layouts, local policies and Gaussian parameter perturbation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::NetworkedEnv;
use crate::graphs::CouplingGraphs;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("parameter vector has length {got}, layout expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("agent {}: observation has length {got}, expected {expected}", .agent + 1)]
    ObservationDim { agent: usize, expected: usize, got: usize },
    #[error("invalid policy setting: {0}")]
    Invalid(String),
}

/// Offsets of each agent's block inside the concatenated parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn from_dims(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        offsets.push(0);
        for d in dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        Self { offsets }
    }

    pub fn uniform(agents: usize, dim: usize) -> Self {
        Self::from_dims(&vec![dim; agents])
    }

    /// Rebuilds a layout from serialized offsets (`0 = o_0 <= o_1 <= ...`).
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self, PolicyError> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(PolicyError::Invalid(
                "offsets must start at 0 and be non-decreasing".into(),
            ));
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn agent_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dim(&self, agent: usize) -> usize {
        self.offsets[agent + 1] - self.offsets[agent]
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn max_dim(&self) -> usize {
        (0..self.agent_count()).map(|i| self.dim(i)).max().unwrap_or(0)
    }

    pub fn slice<'a>(&self, v: &'a [f64], agent: usize) -> &'a [f64] {
        &v[self.offsets[agent]..self.offsets[agent + 1]]
    }

    pub fn slice_mut<'a>(&self, v: &'a mut [f64], agent: usize) -> &'a mut [f64] {
        &mut v[self.offsets[agent]..self.offsets[agent + 1]]
    }

    pub fn check_len(&self, len: usize) -> Result<(), PolicyError> {
        if len == self.total() {
            Ok(())
        } else {
            Err(PolicyError::ParamLength {
                expected: self.total(),
                got: len,
            })
        }
    }
}

/// Concatenated per-agent parameters. Serializes as `{offsets, theta}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct PolicyParams {
    layout: ParamLayout,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    offsets: Vec<usize>,
    theta: Vec<f64>,
}

impl TryFrom<Checkpoint> for PolicyParams {
    type Error = PolicyError;

    fn try_from(c: Checkpoint) -> Result<Self, PolicyError> {
        PolicyParams::new(ParamLayout::from_offsets(c.offsets)?, c.theta)
    }
}

impl From<PolicyParams> for Checkpoint {
    fn from(p: PolicyParams) -> Self {
        Checkpoint {
            offsets: p.layout.offsets,
            theta: p.theta,
        }
    }
}

impl PolicyParams {
    pub fn new(layout: ParamLayout, theta: Vec<f64>) -> Result<Self, PolicyError> {
        layout.check_len(theta.len())?;
        Ok(Self { layout, theta })
    }

    pub fn filled(layout: ParamLayout, value: f64) -> Self {
        let theta = vec![value; layout.total()];
        Self { layout, theta }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        self.layout.slice(&self.theta, i)
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut [f64] {
        self.layout.slice_mut(&mut self.theta, i)
    }
}

/// A standard-normal direction `u` over the whole parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSample {
    pub u: Vec<f64>,
    layout: ParamLayout,
}

impl PerturbationSample {
    pub fn draw<R: Rng + ?Sized>(layout: &ParamLayout, rng: &mut R) -> Self {
        let u = (0..layout.total()).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            u,
            layout: layout.clone(),
        }
    }

    pub fn from_vec(layout: &ParamLayout, u: Vec<f64>) -> Result<Self, PolicyError> {
        layout.check_len(u.len())?;
        Ok(Self {
            u,
            layout: layout.clone(),
        })
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        self.layout.slice(&self.u, i)
    }

    pub fn negated(&self) -> Self {
        Self {
            u: self.u.iter().map(|x| -x).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `theta + delta * u`.
    pub fn apply(&self, theta: &[f64], delta: f64) -> Vec<f64> {
        theta.iter().zip(&self.u).map(|(t, u)| t + delta * u).collect()
    }
}

/// Draws `u` and returns `(theta + delta * u, u)`; `theta` is left untouched.
pub fn perturb<R: Rng + ?Sized>(
    theta: &PolicyParams,
    delta: f64,
    rng: &mut R,
) -> Result<(PolicyParams, PerturbationSample), PolicyError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(PolicyError::Invalid(format!("smoothing radius must be >= 0, got {delta}")));
    }
    let sample = PerturbationSample::draw(&theta.layout, rng);
    let moved = PolicyParams {
        layout: theta.layout.clone(),
        theta: sample.apply(&theta.theta, delta),
    };
    Ok((moved, sample))
}

/// A policy whose agent `i` acts on its own observation and parameter block only.
pub trait LocalPolicy: Sync {
    fn layout(&self) -> &ParamLayout;

    fn agent_count(&self) -> usize {
        self.layout().agent_count()
    }

    /// Expected observation length, or `None` if the policy ignores observations.
    fn observation_dim(&self, agent: usize) -> Option<usize>;

    fn act(&self, agent: usize, obs: &[f64], theta_i: &[f64], out: &mut Vec<f64>) -> Result<(), PolicyError>;

    /// Whether `obs` lies inside the region the policy's features cover.
    fn in_range(&self, _agent: usize, _obs: &[f64]) -> bool {
        true
    }
}

/// Box used to place RBF centers: every stock coordinate in `stock`, the
/// exogenous coordinate in `exogenous`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRange {
    pub stock: [f64; 2],
    pub exogenous: [f64; 2],
}

impl Default for ObservationRange {
    fn default() -> Self {
        Self {
            stock: [-2.0, 3.0],
            exogenous: [-1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfConfig {
    #[serde(default = "default_centers")]
    pub n_c: usize,
    #[serde(default)]
    pub obs_range: ObservationRange,
    /// Include the agent itself (retained stock) among the softmax destinations.
    #[serde(default = "yes")]
    pub self_retention: bool,
    /// Value every coordinate of the initial parameter vector starts from.
    #[serde(default)]
    pub init_theta: f64,
}

fn default_centers() -> usize {
    8
}

fn yes() -> bool {
    true
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self {
            n_c: default_centers(),
            obs_range: ObservationRange::default(),
            self_retention: true,
            init_theta: 0.0,
        }
    }
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while k > 0 {
        r += f * (k % base) as f64;
        k /= base;
        f *= inv;
    }
    r
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut c = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Per-agent RBF centers `c_ik`, each of length `|I_i^O| + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfCenters {
    centers: Vec<Vec<Vec<f64>>>,
}

impl RbfCenters {
    /// Places `n_c` centers per agent on a Halton sequence over the box
    /// `stock^{obs_dim - 1} x exogenous`.
    pub fn halton(obs_dims: &[usize], n_c: usize, range: &ObservationRange) -> Self {
        let widest = obs_dims.iter().copied().max().unwrap_or(0);
        let bases = first_primes(widest);
        let centers = obs_dims
            .iter()
            .map(|&dim| {
                (1..=n_c as u64)
                    .map(|k| {
                        (0..dim)
                            .map(|c| {
                                let [lo, hi] = if c + 1 == dim { range.exogenous } else { range.stock };
                                lo + (hi - lo) * radical_inverse(k, bases[c])
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { centers }
    }

    pub fn from_vec(centers: Vec<Vec<Vec<f64>>>) -> Self {
        Self { centers }
    }

    pub fn agent(&self, i: usize) -> &[Vec<f64>] {
        &self.centers[i]
    }
}

/// `z_j = sum_k ||o - c_k||^2 theta[j * n_c + k]` for each of `destinations` slots.
pub fn rbf_scores(
    obs: &[f64],
    centers: &[Vec<f64>],
    theta_i: &[f64],
    destinations: usize,
) -> Result<Vec<f64>, PolicyError> {
    let n_c = centers.len();
    if theta_i.len() != destinations * n_c {
        return Err(PolicyError::ParamLength {
            expected: destinations * n_c,
            got: theta_i.len(),
        });
    }
    if let Some(c) = centers.iter().find(|c| c.len() != obs.len()) {
        return Err(PolicyError::Invalid(format!(
            "center of length {} does not match observation of length {}",
            c.len(),
            obs.len()
        )));
    }
    let features: Vec<f64> = centers
        .iter()
        .map(|c| obs.iter().zip(c).map(|(o, c)| (o - c) * (o - c)).sum())
        .collect();
    Ok(theta_i
        .chunks(n_c.max(1))
        .take(destinations)
        .map(|w| w.iter().zip(&features).map(|(w, f)| w * f).sum())
        .collect())
}

/// `b_j = exp(-z_j) / sum exp(-z_j')`, evaluated after subtracting `min z`.
pub fn softmax_allocation(z: &[f64]) -> Vec<f64> {
    let Some(min) = z.iter().copied().reduce(f64::min) else {
        return Vec::new();
    };
    let e: Vec<f64> = z.iter().map(|&v| (min - v).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Softmax allocation over the state out-neighbours (and optionally the
/// agent itself), scored by RBF features of the local observation.
#[derive(Debug, Clone)]
pub struct RbfSoftmaxPolicy {
    layout: ParamLayout,
    centers: RbfCenters,
    destinations: Vec<Vec<usize>>,
    self_slot: Vec<Option<usize>>,
    obs_dims: Vec<usize>,
    range: ObservationRange,
}

impl RbfSoftmaxPolicy {
    pub fn new(cg: &CouplingGraphs, cfg: &RbfConfig) -> Result<Self, PolicyError> {
        if cfg.n_c == 0 {
            return Err(PolicyError::Invalid("n_c must be at least 1".into()));
        }
        let r = &cfg.obs_range;
        if !(r.stock[0] < r.stock[1] && r.exogenous[0] < r.exogenous[1]) {
            return Err(PolicyError::Invalid("observation ranges must satisfy lo < hi".into()));
        }
        let n = cg.agent_count();
        let mut destinations = Vec::with_capacity(n);
        let mut self_slot = Vec::with_capacity(n);
        for i in 0..n {
            let mut dest: Vec<usize> = cg.state().out_neighbors(i).collect();
            if cfg.self_retention {
                dest.push(i);
                dest.sort_unstable();
                self_slot.push(dest.iter().position(|&j| j == i));
            } else {
                self_slot.push(None);
            }
            destinations.push(dest);
        }
        let obs_dims: Vec<usize> = (0..n).map(|i| cg.obs_in_set(i).len() + 1).collect();
        let dims: Vec<usize> = destinations.iter().map(|d| d.len() * cfg.n_c).collect();
        Ok(Self {
            layout: ParamLayout::from_dims(&dims),
            centers: RbfCenters::halton(&obs_dims, cfg.n_c, &cfg.obs_range),
            destinations,
            self_slot,
            obs_dims,
            range: cfg.obs_range,
        })
    }

    /// Softmax destinations `J_i` in ascending id order.
    pub fn destinations(&self, agent: usize) -> &[usize] {
        &self.destinations[agent]
    }

    pub fn centers(&self) -> &RbfCenters {
        &self.centers
    }

    /// Full softmax over `J_i`, including the retained share when present.
    pub fn allocation(&self, agent: usize, obs: &[f64], theta_i: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if obs.len() != self.obs_dims[agent] {
            return Err(PolicyError::ObservationDim {
                agent,
                expected: self.obs_dims[agent],
                got: obs.len(),
            });
        }
        let z = rbf_scores(obs, self.centers.agent(agent), theta_i, self.destinations[agent].len())?;
        Ok(softmax_allocation(&z))
    }
}

impl LocalPolicy for RbfSoftmaxPolicy {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn observation_dim(&self, agent: usize) -> Option<usize> {
        Some(self.obs_dims[agent])
    }

    fn act(&self, agent: usize, obs: &[f64], theta_i: &[f64], out: &mut Vec<f64>) -> Result<(), PolicyError> {
        let b = self.allocation(agent, obs, theta_i)?;
        out.clear();
        let skip = self.self_slot[agent];
        out.extend(b.iter().enumerate().filter(|(k, _)| Some(*k) != skip).map(|(_, v)| *v));
        Ok(())
    }

    fn in_range(&self, _agent: usize, obs: &[f64]) -> bool {
        let Some((z, stocks)) = obs.split_last() else {
            return true;
        };
        let inside = |v: f64, [lo, hi]: [f64; 2]| v >= lo && v <= hi;
        inside(*z, self.range.exogenous) && stocks.iter().all(|&m| inside(m, self.range.stock))
    }
}

/// Open-loop policy whose action for agent `i` is its parameter block itself.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    layout: ParamLayout,
}

impl ConstantPolicy {
    pub fn new(layout: ParamLayout) -> Self {
        Self { layout }
    }

    /// One parameter per action component of `env`.
    pub fn for_env<E: NetworkedEnv>(env: &E) -> Self {
        let dims: Vec<usize> = (0..env.agent_count()).map(|i| env.action_dim(i)).collect();
        Self::new(ParamLayout::from_dims(&dims))
    }
}

impl LocalPolicy for ConstantPolicy {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn observation_dim(&self, _agent: usize) -> Option<usize> {
        None
    }

    fn act(&self, _agent: usize, _obs: &[f64], theta_i: &[f64], out: &mut Vec<f64>) -> Result<(), PolicyError> {
        out.clear();
        out.extend_from_slice(theta_i);
        Ok(())
    }
}
