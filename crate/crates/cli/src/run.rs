//! `run`: trains every configured variant × feedback × seed and writes
//! traces, parameter checkpoints and a summary.

use std::path::PathBuf;

use netmarl_core::graphs::{check_assumptions, distances, truncated_sets};
use netmarl_core::policy::{LocalPolicy, PolicyParams};
use netmarl_core::zoo::{train, Aggregator, Feedback, TrainLog, TrainerConfig, Variant};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, Instance, LoadedConfig};
use crate::output::{num, write_csv, write_json, Header};
use crate::{CliError, Options, Outcome};

pub const TRACE_COLUMNS: [&str; 8] = [
    "episode",
    "seed",
    "variant",
    "feedback",
    "global_return",
    "grad_norm",
    "consensus_residual",
    "wallclock_ms",
];

/// One trained configuration, run once per seed.
#[derive(Debug, Clone)]
pub struct RunSpec {
    /// Variant name, suffixed with `-k{κ}` for the truncated variant.
    pub label: String,
    pub variant: Variant,
    pub kappa: Option<usize>,
    pub feedback: Feedback,
    pub aggregator: Aggregator,
}

impl RunSpec {
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.label, self.feedback.name())
    }
}

fn selected_variants(cfg: &Config, opts: &Options) -> Vec<Variant> {
    if opts.variants.is_empty() {
        cfg.trainer.variants.clone()
    } else {
        opts.variants.clone()
    }
}

pub fn kappas(cfg: &Config, opts: &Options) -> Vec<usize> {
    opts.kappa.clone().unwrap_or_else(|| cfg.trainer.kappa.clone())
}

/// Builds aggregators for the requested variants after checking their
/// assumptions. The LVF variant needs some agent with a partial learning
/// set unless `force` is set; consensus groups must always be connected.
pub fn plan_runs(inst: &Instance, cfg: &Config, opts: &Options, variants: &[Variant]) -> Result<Vec<RunSpec>, CliError> {
    let kappas = kappas(cfg, opts);
    let mut specs = Vec::new();
    for &variant in variants {
        let mut entries: Vec<(String, Option<usize>, Aggregator)> = Vec::new();
        match variant {
            Variant::Centralized => {
                entries.push((variant.name().into(), None, Aggregator::for_variant(variant, &inst.cg, &inst.ls, None)?))
            }
            Variant::DistributedLvf => {
                if !opts.force && !check_assumptions(&inst.cg, &inst.ls).partial_lvf_exists() {
                    return Err(CliError::Assumption(
                        "distributed-lvf: every learning set contains all agents (use --force to run anyway)".into(),
                    ));
                }
                entries.push((variant.name().into(), None, Aggregator::for_variant(variant, &inst.cg, &inst.ls, None)?))
            }
            Variant::DistributedTlvf => {
                if kappas.is_empty() {
                    return Err(CliError::Usage("distributed-tlvf needs at least one kappa".into()));
                }
                let dist = distances(&inst.cg, &inst.clustering, &inst.ls);
                for &k in &kappas {
                    let t = truncated_sets(&dist, &inst.clustering, k);
                    let agg = Aggregator::for_variant(variant, &inst.cg, &inst.ls, Some((&inst.clustering, &t)))?;
                    entries.push((format!("{}-k{k}", variant.name()), Some(k), agg));
                }
            }
        }
        for &feedback in &cfg.trainer.feedback {
            for (label, kappa, agg) in &entries {
                specs.push(RunSpec {
                    label: label.clone(),
                    variant,
                    kappa: *kappa,
                    feedback,
                    aggregator: agg.clone(),
                });
            }
        }
    }
    Ok(specs)
}

pub fn trainer_config(cfg: &Config, spec: &RunSpec, wallclock: bool) -> TrainerConfig {
    let t = &cfg.trainer;
    TrainerConfig {
        variant: spec.variant,
        feedback: spec.feedback,
        episodes: t.episodes,
        horizon: t.horizon,
        consensus_iters: t.consensus_iters,
        step_size: t.step_size,
        radius: t.radius,
        kappa: spec.kappa,
        grad_clip: t.grad_clip,
        measure_time: wallclock,
    }
}

pub fn initial_params(inst: &Instance, cfg: &Config) -> PolicyParams {
    PolicyParams::filled(inst.policy.layout().clone(), cfg.policy.init_theta)
}

/// Trains every `spec` on seeds `0..seeds`; logs are grouped per spec in seed order.
pub fn execute(
    inst: &Instance,
    cfg: &Config,
    specs: &[RunSpec],
    master: u64,
    opts: &Options,
) -> Result<Vec<Vec<TrainLog>>, CliError> {
    let seeds = cfg.trainer.seeds;
    let theta0 = initial_params(inst, cfg);
    let jobs: Vec<(usize, u64)> = (0..specs.len()).flat_map(|s| (0..seeds).map(move |k| (s, k))).collect();
    let pool = opts.pool()?;
    let logs: Vec<TrainLog> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| {
                let spec = &specs[s];
                let tc = trainer_config(cfg, spec, opts.wallclock);
                train(&tc, &inst.env, &inst.policy, &spec.aggregator, &theta0, master, seed).map_err(CliError::from)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let mut grouped: Vec<Vec<TrainLog>> = vec![Vec::new(); specs.len()];
    for ((s, _), log) in jobs.iter().zip(logs) {
        grouped[*s].push(log);
    }
    Ok(grouped)
}

/// Across-seed statistics over an episode window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowStats {
    pub first_episode: usize,
    pub last_episode: usize,
    /// Mean over episodes of the across-seed mean return.
    pub mean: f64,
    /// Mean over episodes of the across-seed sample variance of the return.
    pub variance: Option<f64>,
}

/// Statistics over episodes `start..end`; seeds that diverged before the
/// window ends are left out. `None` when no seed covers the window.
pub fn window_stats(logs: &[TrainLog], start: usize, end: usize) -> Option<WindowStats> {
    let complete: Vec<&TrainLog> = logs.iter().filter(|l| l.records.len() >= end).collect();
    if complete.is_empty() || start >= end {
        return None;
    }
    let m = complete.len() as f64;
    let mut mean_sum = 0.0;
    let mut var_sum = 0.0;
    for k in start..end {
        let xs: Vec<f64> = complete.iter().map(|l| l.records[k].global_return).collect();
        let mean = xs.iter().sum::<f64>() / m;
        mean_sum += mean;
        if complete.len() > 1 {
            var_sum += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        }
    }
    let w = (end - start) as f64;
    Some(WindowStats {
        first_episode: start,
        last_episode: end - 1,
        mean: mean_sum / w,
        variance: (complete.len() > 1).then_some(var_sum / w),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub variant: Variant,
    pub kappa: Option<usize>,
    pub feedback: Feedback,
    pub seeds: u64,
    pub episodes: usize,
    /// Largest consensus-group size `n_0` (the agent count for the centralized variant).
    pub n0: usize,
    /// Largest contraction factor over the consensus groups.
    pub rho_max: Option<f64>,
    pub initial_window: Option<WindowStats>,
    pub final_window: Option<WindowStats>,
    /// Final-window mean minus that of the untrained policy under identical noise.
    pub improvement: Option<f64>,
    pub mean_grad_norm: f64,
    pub diverged_seeds: Vec<u64>,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Observations outside the policy's gridded range.
    pub out_of_range: usize,
    pub traces: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub master_seed: u64,
    pub seeds: u64,
    pub episodes: usize,
    pub final_window: usize,
    /// The initial parameters evaluated with the same perturbations and initial states.
    pub untrained: Option<WindowStats>,
    pub runs: Vec<RunSummary>,
}

/// Step size zero with the shared noise streams: the untrained reference.
pub fn untrained_logs(inst: &Instance, cfg: &Config, master: u64, opts: &Options) -> Result<Vec<TrainLog>, CliError> {
    let spec = RunSpec {
        label: "untrained".into(),
        variant: Variant::Centralized,
        kappa: None,
        feedback: Feedback::OnePoint,
        aggregator: Aggregator::Global {
            agents: inst.cg.agent_count(),
        },
    };
    let mut c = cfg.clone();
    c.trainer.step_size = 0.0;
    Ok(execute(inst, &c, std::slice::from_ref(&spec), master, opts)?.remove(0))
}

pub fn summarize(cfg: &Config, spec: &RunSpec, logs: &[TrainLog], untrained: Option<&WindowStats>) -> RunSummary {
    let t = &cfg.trainer;
    let fin = window_stats(logs, t.episodes - t.final_window, t.episodes);
    let init = window_stats(logs, 0, t.final_window);
    let records: usize = logs.iter().map(|l| l.records.len()).sum();
    let grad: f64 = logs.iter().flat_map(|l| l.records.iter().map(|r| r.grad_norm)).sum();
    let (n0, rho) = match &spec.aggregator {
        Aggregator::Global { agents } => (*agents, None),
        Aggregator::Consensus(p) => (p.size_max(), Some(p.rho_max())),
    };
    RunSummary {
        label: spec.label.clone(),
        variant: spec.variant,
        kappa: spec.kappa,
        feedback: spec.feedback,
        seeds: t.seeds,
        episodes: t.episodes,
        n0,
        rho_max: rho,
        initial_window: init,
        final_window: fin,
        improvement: fin.zip(untrained).map(|(f, u)| f.mean - u.mean),
        mean_grad_norm: if records > 0 { grad / records as f64 } else { f64::NAN },
        diverged_seeds: logs.iter().filter(|l| l.diverged_at.is_some()).map(|l| l.seed).collect(),
        reward_min: logs.iter().map(|l| l.reward_min).fold(f64::INFINITY, f64::min),
        reward_max: logs.iter().map(|l| l.reward_max).fold(f64::NEG_INFINITY, f64::max),
        out_of_range: logs.iter().map(|l| l.out_of_range).sum(),
        traces: logs.iter().map(|l| trace_name(spec, l.seed)).collect(),
    }
}

fn trace_name(spec: &RunSpec, seed: u64) -> String {
    format!("traces/{}_seed{seed:03}.csv", spec.file_stem())
}

pub fn trace_rows(spec: &RunSpec, log: &TrainLog) -> Vec<String> {
    log.records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.episode,
                log.seed,
                spec.label,
                spec.feedback.name(),
                num(r.global_return),
                num(r.grad_norm),
                num(r.consensus_residual),
                r.wallclock_ms
            )
        })
        .collect()
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    label: &'a str,
    feedback: Feedback,
    seed: u64,
    diverged_at: Option<usize>,
    params: &'a PolicyParams,
}

/// Writes traces and checkpoints for `specs` and returns their summaries.
pub fn write_runs(
    loaded: &LoadedConfig,
    specs: &[RunSpec],
    logs: &[Vec<TrainLog>],
    untrained: Option<&WindowStats>,
    master: u64,
    out: &std::path::Path,
) -> Result<(Vec<RunSummary>, Vec<PathBuf>), CliError> {
    let header = Header::new(&loaded.hash, master);
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for (spec, group) in specs.iter().zip(logs) {
        for log in group {
            files.push(write_csv(&out.join(trace_name(spec, log.seed)), &header, &TRACE_COLUMNS, &trace_rows(spec, log))?);
            let ck = Checkpoint {
                label: &spec.label,
                feedback: spec.feedback,
                seed: log.seed,
                diverged_at: log.diverged_at,
                params: &log.theta,
            };
            let path = out.join(format!("checkpoints/{}_seed{:03}.json", spec.file_stem(), log.seed));
            files.push(write_json(&path, &header, &ck)?);
        }
        summaries.push(summarize(&loaded.config, spec, group, untrained));
    }
    Ok((summaries, files))
}

pub fn cmd_run(loaded: &LoadedConfig, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = &loaded.config;
    let master = opts.master_seed(cfg);
    let inst = Instance::build(cfg)?;
    let specs = plan_runs(&inst, cfg, opts, &selected_variants(cfg, opts))?;
    let logs = execute(&inst, cfg, &specs, master, opts)?;
    let t = &cfg.trainer;
    let untrained = window_stats(&untrained_logs(&inst, cfg, master, opts)?, t.episodes - t.final_window, t.episodes);
    let (runs, mut files) = write_runs(loaded, &specs, &logs, untrained.as_ref(), master, &opts.out)?;
    let diverged: usize = runs.iter().map(|r| r.diverged_seeds.len()).sum();
    let summary = Summary {
        master_seed: master,
        seeds: t.seeds,
        episodes: t.episodes,
        final_window: t.final_window,
        untrained,
        runs,
    };
    let header = Header::new(&loaded.hash, master);
    files.push(write_json(&opts.out.join("summary.json"), &header, &summary)?);
    Ok(Outcome {
        exit_code: 0,
        files,
        message: format!(
            "{} runs x {} seeds{}",
            specs.len(),
            t.seeds,
            if diverged > 0 { format!(", {diverged} diverged") } else { String::new() }
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use netmarl_core::zoo::EpisodeRecord;

    fn log(seed: u64, returns: &[f64]) -> TrainLog {
        TrainLog {
            seed,
            variant: Variant::Centralized,
            feedback: Feedback::OnePoint,
            records: returns
                .iter()
                .enumerate()
                .map(|(k, &g)| EpisodeRecord {
                    episode: k,
                    global_return: g,
                    grad_norm: 0.0,
                    consensus_residual: 0.0,
                    wallclock_ms: 0,
                })
                .collect(),
            diverged_at: None,
            theta: PolicyParams::filled(netmarl_core::policy::ParamLayout::uniform(1, 1), 0.0),
            reward_min: 0.0,
            reward_max: 0.0,
            out_of_range: 0,
        }
    }

    #[test]
    fn window_statistics_match_hand_computation() {
        let logs = vec![log(0, &[1.0, 2.0, 3.0]), log(1, &[3.0, 2.0, 5.0])];
        let s = window_stats(&logs, 1, 3).unwrap();
        // episode 1: mean 2, var 0; episode 2: mean 4, var 2
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.variance, Some(1.0));
        assert_eq!((s.first_episode, s.last_episode), (1, 2));
    }

    #[test]
    fn diverged_seeds_are_excluded_from_windows() {
        let logs = vec![log(0, &[1.0, 2.0, 3.0]), log(1, &[3.0])];
        let s = window_stats(&logs, 1, 3).unwrap();
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.variance, None);
        assert!(window_stats(&[log(1, &[3.0])], 1, 3).is_none());
    }
}
