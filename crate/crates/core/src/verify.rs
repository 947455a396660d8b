//! Monte-Carlo oracles and statistical checks of the bounds behind the
//! training algorithm: smoothed gradients, gradient equality between global
//! and local objectives, return and variance bounds, Lipschitz estimates and
//! truncation gaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::env::{rollout_from, NetworkedEnv, RolloutError};
use crate::graphs::LearningStructure;
use crate::policy::{LocalPolicy, ParamLayout, PerturbationSample};
use crate::seeding::derive_seed;
use crate::zoo::{ConsensusPlan, ZooError};

/// Samples per parallel block; reductions run over blocks in index order.
const BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("invalid verification setting: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

/// Outcome of one numerical check. Passes iff `measured <= claimed * (1 + slack)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub check: String,
    pub lemma_ref: String,
    pub claimed: f64,
    pub measured: f64,
    pub pass: bool,
    pub seed: u64,
}

impl BoundReport {
    pub fn upper(check: impl Into<String>, lemma_ref: &str, claimed: f64, measured: f64, slack: f64, seed: u64) -> Self {
        Self {
            check: check.into(),
            lemma_ref: lemma_ref.to_string(),
            claimed,
            measured,
            pass: measured <= claimed * (1.0 + slack),
            seed,
        }
    }

    /// Margin as a fraction of the claimed value (positive when passing).
    pub fn margin(&self) -> f64 {
        if self.claimed == 0.0 {
            -self.measured
        } else {
            (self.claimed - self.measured) / self.claimed.abs()
        }
    }
}

/// Per-coordinate Monte-Carlo mean with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothedGradientEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub samples: usize,
}

impl SmoothedGradientEstimate {
    fn from_sums(sum: &[f64], sq: &[f64], n: usize) -> Self {
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let se = if n < 2 {
            vec![f64::INFINITY; sum.len()]
        } else {
            sum.iter()
                .zip(sq)
                .map(|(s, q)| {
                    let var = ((q - s * s / nf) / (nf - 1.0)).max(0.0);
                    (var / nf).sqrt()
                })
                .collect()
        };
        Self { mean, se, samples: n }
    }

    pub fn slice(&self, layout: &ParamLayout, agent: usize) -> SmoothedGradientEstimate {
        SmoothedGradientEstimate {
            mean: layout.slice(&self.mean, agent).to_vec(),
            se: layout.slice(&self.se, agent).to_vec(),
            samples: self.samples,
        }
    }

    pub fn norm(&self) -> f64 {
        self.mean.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `sqrt(Σ se_k²)`: typical size of the estimation error of the whole vector.
    pub fn noise_norm(&self) -> f64 {
        self.se.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest `|mean_k| / se_k`; coordinates with zero mean and zero error count as 0.
    pub fn max_z(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.se)
            .map(|(m, s)| z_score(*m, *s))
            .fold(0.0, f64::max)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}

/// Largest coordinate-wise `|a - b| / sqrt(se_a² + se_b²)`.
pub fn max_pooled_z(a: &SmoothedGradientEstimate, b: &SmoothedGradientEstimate) -> f64 {
    a.mean
        .iter()
        .zip(&b.mean)
        .zip(a.se.iter().zip(&b.se))
        .map(|((x, y), (sx, sy))| z_score(x - y, (sx * sx + sy * sy).sqrt()))
        .fold(0.0, f64::max)
}

/// Seeds of sample `m`: the direction stream and the evaluator's noise.
fn sample_seeds(seed: u64, m: usize) -> (u64, u64) {
    (derive_seed(seed, &[m as u64, 0]), derive_seed(seed, &[m as u64, 1]))
}

/// Monte-Carlo estimate of `∇J^δ(θ) = E[J(θ + δu) u] / δ` for every output of
/// a vector-valued evaluator, using one set of directions for all outputs.
///
/// `eval(θ', noise)` returns the objectives at `θ'` under the noise seed
/// `noise`. In antithetic mode each sample averages `±u` under one noise
/// seed, so even functions give exactly zero.
pub fn mc_smoothed_gradient<F, E>(
    eval: F,
    layout: &ParamLayout,
    theta: &[f64],
    delta: f64,
    samples: usize,
    seed: u64,
    antithetic: bool,
) -> Result<Vec<SmoothedGradientEstimate>, E>
where
    F: Fn(&[f64], u64) -> Result<Vec<f64>, E> + Sync,
    E: Send,
{
    assert!(delta > 0.0 && samples >= 1, "radius must be positive and samples at least 1");
    let d = theta.len();
    let blocks: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..samples.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut sum: Vec<f64> = Vec::new();
            let mut sq: Vec<f64> = Vec::new();
            let mut outputs = 0;
            for m in b * BLOCK..((b + 1) * BLOCK).min(samples) {
                let (dir_seed, noise) = sample_seeds(seed, m);
                let u = PerturbationSample::draw(layout, &mut ChaCha8Rng::seed_from_u64(dir_seed));
                let plus = eval(&u.apply(theta, delta), noise)?;
                let weights: Vec<f64> = if antithetic {
                    let minus = eval(&u.apply(theta, -delta), noise)?;
                    plus.iter().zip(&minus).map(|(p, q)| (p - q) / (2.0 * delta)).collect()
                } else {
                    plus.iter().map(|p| p / delta).collect()
                };
                if sum.is_empty() {
                    outputs = weights.len();
                    sum = vec![0.0; outputs * d];
                    sq = vec![0.0; outputs * d];
                }
                for (o, w) in weights.iter().enumerate() {
                    for (k, uk) in u.u.iter().enumerate() {
                        let x = w * uk;
                        sum[o * d + k] += x;
                        sq[o * d + k] += x * x;
                    }
                }
            }
            Ok((sum, sq, outputs))
        })
        .collect::<Result<Vec<_>, E>>()?;
    let outputs = blocks[0].2;
    let mut sum = vec![0.0; outputs * d];
    let mut sq = vec![0.0; outputs * d];
    for (s, q, _) in &blocks {
        for k in 0..sum.len() {
            sum[k] += s[k];
            sq[k] += q[k];
        }
    }
    Ok((0..outputs)
        .map(|o| SmoothedGradientEstimate::from_sums(&sum[o * d..(o + 1) * d], &sq[o * d..(o + 1) * d], samples))
        .collect())
}

/// Evaluator returning every agent's partial return `W_i` from one rollout
/// whose initial state is drawn from the noise seed.
pub fn rollout_evaluator<'a, E, P>(
    env: &'a E,
    policy: &'a P,
    horizon: usize,
) -> impl Fn(&[f64], u64) -> Result<Vec<f64>, RolloutError> + Sync + 'a
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    move |theta: &[f64], noise: u64| {
        let s0 = env.initial_state(&mut ChaCha8Rng::seed_from_u64(noise));
        Ok(rollout_from(env, policy, theta, s0, horizon, false)?.returns)
    }
}

/// Comparison of the global and local smoothed gradients for one agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEquality {
    pub agent: usize,
    pub global: SmoothedGradientEstimate,
    pub local: SmoothedGradientEstimate,
    pub max_pooled_z: f64,
}

/// `θ_i`-slices of `∇J^δ` and `∇Ĵ_i^δ` for every agent, from shared samples.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient_equality<E, P>(
    env: &E,
    policy: &P,
    ls: &LearningStructure,
    theta: &[f64],
    delta: f64,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<GradientEquality>, VerifyError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    let n = env.agent_count();
    let base = rollout_evaluator(env, policy, horizon);
    let eval = |t: &[f64], noise: u64| -> Result<Vec<f64>, RolloutError> {
        let w = base(t, noise)?;
        let mut out = Vec::with_capacity(n + 1);
        out.push(w.iter().sum());
        out.extend((0..n).map(|i| ls.learning_set(i).iter().map(|&j| w[j]).sum::<f64>()));
        Ok(out)
    };
    let est = mc_smoothed_gradient(eval, policy.layout(), theta, delta, samples, seed, false)?;
    let layout = policy.layout();
    Ok((0..n)
        .map(|i| {
            let global = est[0].slice(layout, i);
            let local = est[1 + i].slice(layout, i);
            let z = max_pooled_z(&global, &local);
            GradientEquality {
                agent: i,
                global,
                local,
                max_pooled_z: z,
            }
        })
        .collect())
}

/// Value bounds implied by per-step reward bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReturnBounds {
    pub j_l: f64,
    pub j_u: f64,
    pub j0: f64,
    /// `γ^{T_e} J_0`: gap between an agent's value and its expected partial return.
    pub agent_tail: f64,
}

impl ReturnBounds {
    /// `n_l γ^{T_e} J_0`.
    pub fn lvf_tail(&self, n_l: usize) -> f64 {
        n_l as f64 * self.agent_tail
    }
}

pub fn return_bounds(r_l: f64, r_u: f64, gamma: f64, horizon: usize) -> Result<ReturnBounds, VerifyError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(VerifyError::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if r_l > r_u {
        return Err(VerifyError::Config(format!("r_l = {r_l} exceeds r_u = {r_u}")));
    }
    let j_l = r_l / (1.0 - gamma);
    let j_u = r_u / (1.0 - gamma);
    let j0 = j_l.abs().max(j_u.abs());
    Ok(ReturnBounds {
        j_l,
        j_u,
        j0,
        agent_tail: gamma.powi(horizon as i32) * j0,
    })
}

/// Per-agent comparison of the LVF value with its expected partial return.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailCheck {
    pub agent: usize,
    pub n_l: usize,
    /// `|Ĵ_i - mean Ŵ_i|` plus the truncation allowance of the long rollout.
    pub measured: f64,
    pub bound: f64,
    pub r0: f64,
}

/// Estimates `Ĵ_i` with rollouts of length `long_horizon` and compares it
/// with the mean partial return over the first `horizon` ticks of the same
/// rollouts.
#[allow(clippy::too_many_arguments)]
pub fn lvf_tail_check<E, P>(
    env: &E,
    policy: &P,
    ls: &LearningStructure,
    theta: &[f64],
    horizon: usize,
    long_horizon: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<TailCheck>, VerifyError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    if long_horizon <= horizon || draws == 0 {
        return Err(VerifyError::Config("long horizon must exceed the horizon and draws must be positive".into()));
    }
    let n = env.agent_count();
    let gamma = env.discount();
    let blocks: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..draws.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut long = vec![0.0; n];
            let mut short = vec![0.0; n];
            let mut r0 = 0.0f64;
            for m in b * BLOCK..((b + 1) * BLOCK).min(draws) {
                let s0 = env.initial_state(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m as u64])));
                let res = rollout_from(env, policy, theta, s0, long_horizon, true)?;
                r0 = r0.max(res.reward_min.abs()).max(res.reward_max.abs());
                let trace = res.trace.expect("recorded");
                let mut disc = 1.0;
                for step in &trace {
                    for i in 0..n {
                        let r: f64 = ls.learning_set(i).iter().map(|&j| step.rewards[j]).sum();
                        long[i] += disc * r;
                        if step.time < horizon {
                            short[i] += disc * r;
                        }
                    }
                    disc *= gamma;
                }
            }
            Ok((long, short, r0))
        })
        .collect::<Result<Vec<_>, RolloutError>>()?;
    let mut long = vec![0.0; n];
    let mut short = vec![0.0; n];
    let mut r0 = 0.0f64;
    for (l, s, r) in &blocks {
        for i in 0..n {
            long[i] += l[i];
            short[i] += s[i];
        }
        r0 = r0.max(*r);
    }
    let bounds = return_bounds(-r0, r0, gamma, horizon)?;
    let cutoff = gamma.powi(long_horizon as i32) * bounds.j0;
    Ok((0..n)
        .map(|i| {
            let n_l = ls.learning_set(i).len();
            TailCheck {
                agent: i,
                n_l,
                measured: (long[i] - short[i]).abs() / draws as f64 + n_l as f64 * cutoff,
                bound: bounds.lvf_tail(n_l),
                r0,
            }
        })
        .collect())
}

/// Second moments of the one-point oracle for one agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentVariance {
    pub agent: usize,
    pub n_l: usize,
    pub d_i: usize,
    /// Empirical `E‖g_i‖²` of the distributed oracle.
    pub distributed: f64,
    /// Empirical `E‖g_i‖²` of the oracle that uses the global return.
    pub centralized: f64,
    /// `B_l^μ d_i / δ²`.
    pub bound: f64,
    /// `N² B_l^μ d_i / (n_l² δ²)`.
    pub centralized_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceCheck {
    pub sigma0: f64,
    pub j0: f64,
    /// Largest observed `|r_i(t)|`.
    pub r0: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Mean global return of the perturbed rollouts.
    pub mean_return: f64,
    pub agents: Vec<AgentVariance>,
}

/// Measures `E‖g_i‖²` for the distributed one-point oracle over `draws`
/// perturbations and compares it with `n_l² (σ_0² + (1 + γ^{T_e})² J_0²) d_i / δ²`.
///
/// `σ_0` is the largest per-agent standard deviation of `W_i` at `θ` over
/// initial-state draws; `J_0` uses the largest observed `|r|`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_variance_check<E, P>(
    env: &E,
    policy: &P,
    plan: &ConsensusPlan,
    theta: &[f64],
    delta: f64,
    horizon: usize,
    consensus_iters: usize,
    draws: usize,
    seed: u64,
) -> Result<VarianceCheck, VerifyError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    if delta.is_nan() || delta <= 0.0 || draws < 2 {
        return Err(VerifyError::Config("radius must be positive and draws at least 2".into()));
    }
    let n = env.agent_count();
    let layout = policy.layout();
    let gamma = env.discount();

    // Observation noise at the unperturbed parameters.
    let noise_draws = draws.min(2_000);
    let noise: Vec<(Vec<f64>, f64, f64)> = (0..noise_draws)
        .into_par_iter()
        .map(|m| {
            let s0 = env.initial_state(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0, m as u64])));
            let res = rollout_from(env, policy, theta, s0, horizon, false)?;
            Ok((res.returns, res.reward_min, res.reward_max))
        })
        .collect::<Result<Vec<_>, RolloutError>>()?;
    let mut sigma0 = 0.0f64;
    for i in 0..n {
        let mean = noise.iter().map(|(w, _, _)| w[i]).sum::<f64>() / noise_draws as f64;
        let var = noise.iter().map(|(w, _, _)| (w[i] - mean).powi(2)).sum::<f64>() / (noise_draws as f64 - 1.0);
        sigma0 = sigma0.max(var.sqrt());
    }
    let mut r_min = noise.iter().map(|(_, lo, _)| *lo).fold(f64::INFINITY, f64::min);
    let mut r_max = noise.iter().map(|(_, _, hi)| *hi).fold(f64::NEG_INFINITY, f64::max);

    type Block = (Vec<f64>, Vec<f64>, f64, f64, f64);
    let blocks: Vec<Block> = (0..draws.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut dist = vec![0.0; n];
            let mut cent = vec![0.0; n];
            let (mut lo, mut hi, mut total_sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for m in b * BLOCK..((b + 1) * BLOCK).min(draws) {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, m as u64]));
                let u = PerturbationSample::draw(layout, &mut rng);
                let s0 = env.initial_state(&mut rng);
                let res = rollout_from(env, policy, &u.apply(theta, delta), s0, horizon, false)?;
                lo = lo.min(res.reward_min);
                hi = hi.max(res.reward_max);
                let (est, _) = plan.evaluate(&res.returns, consensus_iters)?;
                let total = res.global_return();
                total_sum += total;
                for i in 0..n {
                    let uu: f64 = u.agent(i).iter().map(|x| x * x).sum();
                    dist[i] += (est[i] / delta).powi(2) * uu;
                    cent[i] += (total / delta).powi(2) * uu;
                }
            }
            Ok((dist, cent, lo, hi, total_sum))
        })
        .collect::<Result<Vec<_>, VerifyError>>()?;
    let mut dist = vec![0.0; n];
    let mut cent = vec![0.0; n];
    let mut total_sum = 0.0;
    for (d, c, lo, hi, t) in &blocks {
        for i in 0..n {
            dist[i] += d[i];
            cent[i] += c[i];
        }
        r_min = r_min.min(*lo);
        r_max = r_max.max(*hi);
        total_sum += t;
    }
    let r0 = r_min.abs().max(r_max.abs());
    let j0 = r0 / (1.0 - gamma);
    let tail = (1.0 + gamma.powi(horizon as i32)).powi(2);
    let sizes = plan.sizes_by_agent();
    let agents = (0..n)
        .map(|i| {
            let n_l = sizes[i] as f64;
            let d_i = layout.dim(i);
            let b = n_l * n_l * (sigma0 * sigma0 + tail * j0 * j0);
            let bound = b * d_i as f64 / (delta * delta);
            AgentVariance {
                agent: i,
                n_l: sizes[i],
                d_i,
                distributed: dist[i] / draws as f64,
                centralized: cent[i] / draws as f64,
                bound,
                centralized_bound: bound * (n as f64 / n_l).powi(2),
            }
        })
        .collect();
    Ok(VarianceCheck {
        sigma0,
        j0,
        r0,
        reward_min: r_min,
        reward_max: r_max,
        mean_return: total_sum / draws as f64,
        agents,
    })
}

/// Lower-bound estimate of a Lipschitz constant per output: the largest
/// `|f(a) - f(b)| / ‖a - b‖` over the given pairs. Identical points are skipped.
pub fn estimate_lipschitz<F, E>(eval: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>, E>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E>,
{
    let mut best: Vec<f64> = Vec::new();
    for (a, b) in pairs {
        let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let (fa, fb) = (eval(a)?, eval(b)?);
        if best.is_empty() {
            best = vec![0.0; fa.len()];
        }
        for (k, (x, y)) in fa.iter().zip(&fb).enumerate() {
            best[k] = best[k].max((x - y).abs() / dist);
        }
    }
    Ok(best)
}

/// `count` pairs `(θ + s v, θ + s v')` with standard-normal `v, v'` at scale `s`.
pub fn local_pairs(layout: &ParamLayout, theta: &[f64], scale: f64, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = PerturbationSample::draw(layout, &mut rng).apply(theta, scale);
            let b = PerturbationSample::draw(layout, &mut rng).apply(theta, scale);
            (a, b)
        })
        .collect()
}

/// Monte-Carlo gap `∇_{θ_i}J̃_i^δ - ∇_{θ_i}J^δ` for one truncation index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEstimate {
    pub kappa: usize,
    pub gap: SmoothedGradientEstimate,
    /// `‖gap‖`.
    pub norm: f64,
    /// `sqrt(Σ se_k²)`, the scale of the estimation error in `norm`.
    pub norm_se: f64,
    /// Every coordinate within `z_tol` standard errors of zero.
    pub statistically_zero: bool,
}

/// Gaps for agent `agent` whose truncated member sets for each κ are given
/// in `members` (one list per κ, same order as `kappas`). All κ share samples.
#[allow(clippy::too_many_arguments)]
pub fn truncation_gap<E, P>(
    env: &E,
    policy: &P,
    agent: usize,
    kappas: &[usize],
    members: &[Vec<usize>],
    theta: &[f64],
    delta: f64,
    horizon: usize,
    samples: usize,
    seed: u64,
    z_tol: f64,
) -> Result<Vec<GapEstimate>, VerifyError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    if kappas.len() != members.len() || kappas.is_empty() {
        return Err(VerifyError::Config("need one member set per truncation index".into()));
    }
    let n = env.agent_count();
    let outside: Vec<Vec<usize>> = members
        .iter()
        .map(|m| (0..n).filter(|j| !m.contains(j)).collect())
        .collect();
    let base = rollout_evaluator(env, policy, horizon);
    // J̃ - J = -(sum of returns outside the truncated set)
    let eval = |t: &[f64], noise: u64| -> Result<Vec<f64>, RolloutError> {
        let w = base(t, noise)?;
        Ok(outside.iter().map(|o| -o.iter().map(|&j| w[j]).sum::<f64>()).collect())
    };
    let layout = policy.layout();
    let est = mc_smoothed_gradient(eval, layout, theta, delta, samples, seed, false)?;
    Ok(kappas
        .iter()
        .zip(est)
        .map(|(&kappa, e)| {
            let gap = e.slice(layout, agent);
            GapEstimate {
                kappa,
                norm: gap.norm(),
                norm_se: gap.noise_norm(),
                statistically_zero: gap.max_z() <= z_tol,
                gap,
            }
        })
        .collect())
}

/// `gap(κ') <= gap(κ) + tol * sqrt(se_κ² + se_κ'²)` for every consecutive pair.
pub fn gaps_non_increasing(gaps: &[GapEstimate], tol: f64) -> bool {
    gaps.windows(2).all(|w| {
        let slack = tol * (w[0].norm_se.powi(2) + w[1].norm_se.powi(2)).sqrt();
        w[1].norm <= w[0].norm + slack
    })
}
