//! `sweep`: trains the truncated variant for each κ and tabulates group
//! sizes, final-window statistics and the truncation gap of agent 1.

use netmarl_core::graphs::{distances, truncated_sets};
use netmarl_core::policy::LocalPolicy;
use netmarl_core::seeding::derive_seed;
use netmarl_core::verify::truncation_gap;
use netmarl_core::zoo::Variant;

use crate::config::{Instance, LoadedConfig};
use crate::output::{num, write_csv, Header};
use crate::run::{execute, initial_params, kappas, plan_runs, summarize, untrained_logs, window_stats};
use crate::{CliError, Options, Outcome};

pub const SWEEP_COLUMNS: [&str; 10] = [
    "kappa",
    "feedback",
    "n0",
    "rho_max",
    "final_mean",
    "final_variance",
    "improvement",
    "gap_norm",
    "gap_se",
    "diverged_seeds",
];

/// Writes `sweep.csv` with one row per κ and feedback mode.
pub fn cmd_sweep(loaded: &LoadedConfig, opts: &Options) -> Result<Outcome, CliError> {
    let cfg = &loaded.config;
    let ks = kappas(cfg, opts);
    if ks.is_empty() {
        return Err(CliError::Usage("sweep needs at least one kappa".into()));
    }
    let master = opts.master_seed(cfg);
    let inst = Instance::build(cfg)?;
    let specs = plan_runs(&inst, cfg, opts, &[Variant::DistributedTlvf])?;
    let logs = execute(&inst, cfg, &specs, master, opts)?;
    let t = &cfg.trainer;
    let untrained = window_stats(&untrained_logs(&inst, cfg, master, opts)?, t.episodes - t.final_window, t.episodes);

    let agent = 0;
    let l = inst.clustering.cluster_of(agent);
    let dist = distances(&inst.cg, &inst.clustering, &inst.ls);
    let members: Vec<Vec<usize>> = ks
        .iter()
        .map(|&k| truncated_sets(&dist, &inst.clustering, k).members[l].clone())
        .collect();
    let gaps = if inst.policy.layout().dim(agent) == 0 {
        None
    } else {
        let theta = initial_params(&inst, cfg);
        let seed = derive_seed(master, &[0x0073_7765_6570]);
        Some(opts.pool()?.install(|| {
            truncation_gap(
                &inst.env,
                &inst.policy,
                agent,
                &ks,
                &members,
                theta.theta(),
                t.radius,
                t.horizon,
                cfg.verify.gap_samples,
                seed,
                cfg.verify.z_tol,
            )
        })?)
    };

    let mut rows = Vec::new();
    for (spec, group) in specs.iter().zip(&logs) {
        let s = summarize(cfg, spec, group, untrained.as_ref());
        let k = spec.kappa.expect("truncated runs carry kappa");
        let gap = gaps.as_ref().and_then(|g| g.iter().find(|e| e.kappa == k));
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{}",
            k,
            spec.feedback.name(),
            s.n0,
            opt(s.rho_max),
            opt(s.final_window.map(|w| w.mean)),
            opt(s.final_window.and_then(|w| w.variance)),
            opt(s.improvement),
            opt(gap.map(|g| g.norm)),
            opt(gap.map(|g| g.norm_se)),
            s.diverged_seeds.len()
        ));
    }
    let header = Header::new(&loaded.hash, master);
    let path = write_csv(&opts.out.join("sweep.csv"), &header, &SWEEP_COLUMNS, &rows)?;
    Ok(Outcome {
        exit_code: 0,
        files: vec![path],
        message: format!("{} rows", rows.len()),
    })
}
