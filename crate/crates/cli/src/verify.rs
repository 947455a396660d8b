//! `verify`: the numerical check suite on the configured instance.

use netmarl_core::env::{NetworkedEnv, RolloutError};
use netmarl_core::graphs::{distances, truncated_sets};
use netmarl_core::policy::LocalPolicy;
use netmarl_core::seeding::derive_seed;
use netmarl_core::verify::{
    check_gradient_equality, empirical_variance_check, estimate_lipschitz, local_pairs,
    lvf_tail_check, rollout_evaluator, truncation_gap, BoundReport, GapEstimate, TailCheck, VarianceCheck,
    VerifyError,
};
use netmarl_core::zoo::{theoretical_schedule, ConsensusPlan, ScheduleBounds, ScheduleInputs, TruncationInputs};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Instance, LoadedConfig};
use crate::output::{write_json, Header};
use crate::run::initial_params;
use crate::{CliError, Options, Outcome};

/// Initial states averaged per objective evaluation in the Lipschitz estimate.
const LIPSCHITZ_STATES: usize = 64;
/// Residual factor `0.6^7` expected from the schedule at `γ = 0.6`, `κ = 6`.
const ANCHOR_FACTOR: f64 = 0.0279936;

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Zoo(z) => z.into(),
            VerifyError::Config(m) => CliError::Config(format!("verify: {m}")),
            VerifyError::Rollout(r) => CliError::Runtime(r.to_string()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GradientRow {
    pub agent: usize,
    pub max_pooled_z: f64,
    pub global_norm: f64,
    pub local_norm: f64,
}

#[derive(Debug, Serialize)]
pub struct GapRow {
    pub kappa: usize,
    pub norm: f64,
    pub norm_se: f64,
    pub statistically_zero: bool,
    /// `γ^{κ+1} Σ_{j beyond} L_j sqrt(d d_i)` with estimated `L_j`.
    pub bound: f64,
}

#[derive(Debug, Serialize)]
pub struct ClusterGaps {
    pub cluster: usize,
    pub agent: usize,
    pub max_distance: usize,
    pub gaps: Vec<GapRow>,
}

#[derive(Debug, Serialize)]
pub struct Details {
    pub radius: f64,
    pub horizon: usize,
    pub long_horizon: usize,
    pub gradient: Vec<GradientRow>,
    pub tail: Vec<TailCheck>,
    pub variance: VarianceCheck,
    /// Estimated Lipschitz constants of `J` and of each `J_i` (lower bounds).
    pub lipschitz_global: f64,
    pub lipschitz_agents: Vec<f64>,
    /// Every quantity below is conditional on the estimated Lipschitz constant.
    pub schedule: ScheduleBounds,
    pub anchor: ScheduleBounds,
    pub truncation: Vec<ClusterGaps>,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub passed: usize,
    pub failed: usize,
    pub reports: Vec<BoundReport>,
    pub details: Details,
}

/// Mean returns `[J, J_1, .., J_N]` at `theta` over a fixed set of initial states.
fn mean_returns<E, P>(env: &E, policy: &P, horizon: usize, seed: u64, theta: &[f64]) -> Result<Vec<f64>, RolloutError>
where
    E: NetworkedEnv,
    P: LocalPolicy + ?Sized,
{
    let eval = rollout_evaluator(env, policy, horizon);
    let all = (0..LIPSCHITZ_STATES)
        .into_par_iter()
        .map(|m| eval(theta, derive_seed(seed, &[m as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let n = env.agent_count();
    let mut out = vec![0.0; n + 1];
    for w in &all {
        out[0] += w.iter().sum::<f64>();
        for i in 0..n {
            out[1 + i] += w[i];
        }
    }
    Ok(out.into_iter().map(|x| x / LIPSCHITZ_STATES as f64).collect())
}

fn run_suite(inst: &Instance, loaded: &LoadedConfig, master: u64) -> Result<VerifyReport, CliError> {
    let cfg = &loaded.config;
    let (t, v) = (&cfg.trainer, &cfg.verify);
    let (env, policy, ls) = (&inst.env, &inst.policy, &inst.ls);
    let n = env.agent_count();
    let gamma = env.discount();
    let layout = policy.layout();
    let theta0 = initial_params(inst, cfg);
    let theta = theta0.theta();
    let delta = t.radius;
    let horizon = t.horizon;
    let long_horizon = v.long_horizon.unwrap_or(20 * horizon.max(10));
    let seed_of = |k: u64| derive_seed(master, &[0x7665_7269_6679, k]);
    let mut reports = Vec::new();

    let plan = ConsensusPlan::lvf(&inst.cg, ls)?;

    let s = seed_of(1);
    let eq = check_gradient_equality(env, policy, ls, theta, delta, horizon, v.samples, s)?;
    for g in &eq {
        reports.push(BoundReport::upper(
            format!("gradient equality, agent {}", g.agent + 1),
            "local-gradient-equality",
            v.z_tol,
            g.max_pooled_z,
            0.0,
            s,
        ));
    }
    let gradient = eq
        .iter()
        .map(|g| GradientRow {
            agent: g.agent + 1,
            max_pooled_z: g.max_pooled_z,
            global_norm: g.global.norm(),
            local_norm: g.local.norm(),
        })
        .collect();

    let s = seed_of(2);
    let tail = lvf_tail_check(env, policy, ls, theta, horizon, long_horizon, v.draws, s)?;
    for c in &tail {
        reports.push(BoundReport::upper(
            format!("learning-set return tail, agent {}", c.agent + 1),
            "lvf-tail-bound",
            c.bound,
            c.measured,
            v.slack,
            s,
        ));
    }

    let s = seed_of(3);
    let variance = empirical_variance_check(env, policy, &plan, theta, delta, horizon, t.consensus_iters, v.draws, s)?;
    for a in &variance.agents {
        reports.push(BoundReport::upper(
            format!("distributed second moment, agent {}", a.agent + 1),
            "one-point-second-moment",
            a.bound,
            a.distributed,
            v.slack,
            s,
        ));
        reports.push(BoundReport::upper(
            format!("centralized second moment, agent {}", a.agent + 1),
            "global-second-moment",
            a.centralized_bound,
            a.centralized,
            v.slack,
            s,
        ));
    }

    let s = seed_of(4);
    let pairs = local_pairs(layout, theta, delta / 10.0, v.lipschitz_pairs, s);
    let lip = estimate_lipschitz(|x: &[f64]| mean_returns(env, policy, horizon, s, x), &pairs)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let lipschitz_global = lip.first().copied().unwrap_or(0.0);
    let lipschitz_agents: Vec<f64> = if lip.len() == n + 1 { lip[1..].to_vec() } else { vec![0.0; n] };

    let j_l = variance.reward_min / (1.0 - gamma);
    let j_u = variance.reward_max / (1.0 - gamma);
    let inputs = ScheduleInputs {
        epsilon: v.epsilon,
        dim: layout.total(),
        lipschitz: lipschitz_global,
        gamma,
        rho0: plan.rho_max(),
        n0: plan.size_max(),
        agents: n,
        j_l,
        j_u,
        sigma0: variance.sigma0,
        j_delta0: variance.mean_return,
        episodes: t.episodes,
        horizon,
        truncation: None,
    };
    let schedule = theoretical_schedule(&inputs)?;
    let bad = [schedule.delta, schedule.eta, schedule.b, schedule.k_min]
        .iter()
        .filter(|x| !(x.is_finite() && **x > 0.0))
        .count();
    reports.push(BoundReport::upper(
        "schedule quantities finite and positive (count of violations)",
        "schedule-well-defined",
        0.0,
        bad as f64,
        0.0,
        master,
    ));

    let anchor_inputs = ScheduleInputs {
        gamma: 0.6,
        truncation: Some(TruncationInputs {
            kappa: 6,
            max_beyond: n.saturating_sub(1).max(1),
            l0: lipschitz_agents.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE),
            d0: layout.max_dim(),
        }),
        ..inputs.clone()
    };
    let anchor = theoretical_schedule(&anchor_inputs)?;
    let factor = anchor.residual_factor.unwrap_or(f64::NAN);
    reports.push(BoundReport::upper(
        "truncation residual factor at gamma 0.6, kappa 6",
        "truncation-residual-anchor",
        0.028,
        factor,
        0.0,
        master,
    ));
    reports.push(BoundReport::upper(
        "truncation residual factor equals 0.0279936",
        "truncation-residual-anchor",
        1e-12,
        (factor - ANCHOR_FACTOR).abs(),
        0.0,
        master,
    ));

    let dist = distances(&inst.cg, &inst.clustering, ls);
    let d_total = layout.total() as f64;
    let mut truncation = Vec::new();
    for l in 0..inst.clustering.len() {
        let agent = inst.clustering.members(l)[0];
        if layout.dim(agent) == 0 {
            continue;
        }
        let dmax = dist.max_distance(l);
        let kappas: Vec<usize> = (0..=dmax).collect();
        let structs: Vec<_> = kappas.iter().map(|&k| truncated_sets(&dist, &inst.clustering, k)).collect();
        let members: Vec<Vec<usize>> = structs.iter().map(|ts| ts.members[l].clone()).collect();
        let s = seed_of(100 + l as u64);
        let gaps: Vec<GapEstimate> = truncation_gap(
            env,
            policy,
            agent,
            &kappas,
            &members,
            theta,
            delta,
            horizon,
            v.gap_samples,
            s,
            v.z_tol,
        )?;
        let excess = gaps
            .windows(2)
            .map(|w| w[1].norm - w[0].norm - v.monotone_tol * (w[0].norm_se.powi(2) + w[1].norm_se.powi(2)).sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        if gaps.len() > 1 {
            reports.push(BoundReport::upper(
                format!("truncation gap non-increasing, cluster {} (excess over tolerance)", l + 1),
                "truncation-gap-monotone",
                0.0,
                excess,
                0.0,
                s,
            ));
        }
        let last = gaps.last().expect("at least kappa 0");
        reports.push(BoundReport::upper(
            format!("truncation gap vanishes at kappa {dmax}, cluster {}", l + 1),
            "truncation-gap-vanishes",
            v.z_tol,
            last.gap.max_z(),
            0.0,
            s,
        ));
        let d_i = layout.dim(agent) as f64;
        truncation.push(ClusterGaps {
            cluster: l + 1,
            agent: agent + 1,
            max_distance: dmax,
            gaps: gaps
                .iter()
                .zip(&structs)
                .map(|(g, ts)| GapRow {
                    kappa: g.kappa,
                    norm: g.norm,
                    norm_se: g.norm_se,
                    statistically_zero: g.statistically_zero,
                    bound: gamma.powi(g.kappa as i32 + 1)
                        * ts.beyond[l].iter().map(|&j| lipschitz_agents[j]).sum::<f64>()
                        * (d_total * d_i).sqrt(),
                })
                .collect(),
        });
    }

    let failed = reports.iter().filter(|r| !r.pass).count();
    Ok(VerifyReport {
        passed: reports.len() - failed,
        failed,
        reports,
        details: Details {
            radius: delta,
            horizon,
            long_horizon,
            gradient,
            tail,
            variance,
            lipschitz_global,
            lipschitz_agents,
            schedule,
            anchor,
            truncation,
        },
    })
}

/// Writes `verify.json`; exit code 3 when any check fails.
pub fn cmd_verify(loaded: &LoadedConfig, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = &loaded.config;
    let master = opts.master_seed(cfg);
    let inst = Instance::build(cfg)?;
    let report = opts.pool()?.install(|| run_suite(&inst, loaded, master))?;
    let header = Header::new(&loaded.hash, master);
    let path = write_json(&opts.out.join("verify.json"), &header, &report)?;
    let failures: Vec<String> = report
        .reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} [{}]: measured {} > claimed {} (seed {})", r.check, r.lemma_ref, r.measured, r.claimed, r.seed))
        .collect();
    Ok(Outcome {
        exit_code: if failures.is_empty() { 0 } else { 3 },
        files: vec![path],
        message: if failures.is_empty() {
            format!("{} checks passed", report.passed)
        } else {
            format!("{} of {} checks failed:\n  {}", report.failed, report.reports.len(), failures.join("\n  "))
        },
    })
}
