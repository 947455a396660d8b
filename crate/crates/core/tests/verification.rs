use netmarl_core::env::{WarehouseEnv, WarehouseParams};
use netmarl_core::graphs::{distances, learning_sets, truncated_sets, Clustering, CouplingGraphs};
use netmarl_core::policy::{LocalPolicy, RbfConfig, RbfSoftmaxPolicy};
use netmarl_core::presets;
use netmarl_core::verify::*;
use netmarl_core::zoo::ConsensusPlan;

fn setup(cg: &CouplingGraphs) -> (WarehouseEnv, RbfSoftmaxPolicy, Vec<f64>) {
    let env = WarehouseEnv::new(cg, WarehouseParams::default()).unwrap();
    let pol = RbfSoftmaxPolicy::new(cg, &RbfConfig::default()).unwrap();
    let theta = vec![0.0; pol.layout().total()];
    (env, pol, theta)
}

#[test]
fn local_and_global_gradients_agree_on_chain() {
    let cg = presets::chain3();
    let ls = learning_sets(&cg);
    let (env, pol, theta) = setup(&cg);
    let checks = check_gradient_equality(&env, &pol, &ls, &theta, 2.0, 10, 20_000, 4).unwrap();
    for c in &checks {
        assert!(c.max_pooled_z <= 3.0, "agent {} z = {}", c.agent + 1, c.max_pooled_z);
    }
    // agent 1 learns from everyone, so both objectives coincide sample by sample
    assert_eq!(checks[0].global, checks[0].local);
}

#[test]
fn excluded_agents_do_not_carry_gradient_signal() {
    // the difference J - Ĵ_2 on the chain is agent 1's return, which θ_2 cannot influence
    let cg = presets::chain3();
    let (env, pol, theta) = setup(&cg);
    let eval = rollout_evaluator(&env, &pol, 10);
    let diff = |t: &[f64], noise: u64| eval(t, noise).map(|w| vec![w[0]]);
    let est = mc_smoothed_gradient(diff, pol.layout(), &theta, 2.0, 20_000, 9, false).unwrap();
    let slice = est[0].slice(pol.layout(), 1);
    assert!(slice.max_z() <= 3.5, "z = {}", slice.max_z());
}

#[test]
fn lvf_tail_is_within_bound() {
    let cg = presets::warehouse9();
    let ls = learning_sets(&cg);
    let (env, pol, theta) = setup(&cg);
    let checks = lvf_tail_check(&env, &pol, &ls, &theta, 10, 200, 500, 3).unwrap();
    for c in &checks {
        assert!(c.measured <= c.bound, "agent {}: {} > {}", c.agent + 1, c.measured, c.bound);
        assert!(c.r0 > 0.0);
    }
}

#[test]
fn one_point_second_moment_is_bounded() {
    let cg = presets::warehouse9();
    let ls = learning_sets(&cg);
    let (env, pol, theta) = setup(&cg);
    let plan = ConsensusPlan::lvf(&cg, &ls).unwrap();
    let check = empirical_variance_check(&env, &pol, &plan, &theta, 2.0, 10, 10, 2_000, 5).unwrap();
    assert!(check.sigma0 > 0.0 && check.j0 > 0.0);
    for a in &check.agents {
        assert!(a.distributed <= 1.05 * a.bound, "agent {}", a.agent + 1);
        assert!(a.centralized <= 1.05 * a.centralized_bound, "agent {}", a.agent + 1);
    }
}

#[test]
fn converged_local_oracle_has_smaller_second_moment_than_global() {
    let cg = presets::warehouse9();
    let ls = learning_sets(&cg);
    let (env, pol, theta) = setup(&cg);
    let plan = ConsensusPlan::lvf(&cg, &ls).unwrap();
    let check = empirical_variance_check(&env, &pol, &plan, &theta, 2.0, 10, 400, 2_000, 5).unwrap();
    for a in &check.agents {
        assert!(a.n_l < 9);
        assert!(a.distributed < a.centralized, "agent {}: {a:?}", a.agent + 1);
    }
}

#[test]
fn truncation_gaps_decay_on_path() {
    let cg = presets::path(6).unwrap();
    let ls = learning_sets(&cg);
    let (env, pol, theta) = setup(&cg);
    let cl = Clustering::singletons(6);
    let dist = distances(&cg, &cl, &ls);
    let agent = 0;
    let kappas: Vec<usize> = (0..=5).collect();
    let members: Vec<Vec<usize>> = kappas
        .iter()
        .map(|&k| truncated_sets(&dist, &cl, k).members[agent].clone())
        .collect();
    let gaps = truncation_gap(&env, &pol, agent, &kappas, &members, &theta, 2.0, 10, 20_000, 6, 3.0).unwrap();
    assert!(gaps_non_increasing(&gaps, 2.0));
    assert!(gaps[0].norm > gaps[0].norm_se, "nearest truncation should leave a visible gap");
    assert_eq!(gaps[5].norm, 0.0);
    assert!(gaps[5].statistically_zero);
}
