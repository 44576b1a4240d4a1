use npicost_core::cost::{infection_cost, EconParams};
use npicost_core::counterfactual::*;
use npicost_core::epi::CompartmentState;
use npicost_core::ingest::PolicySchedule;
use npicost_core::npi::NPI_COUNT;
use npicost_core::optimizer::{optimize, OptimizationConfig, Parameterization};
use npicost_core::regression::{fit_hierarchical, HierarchicalConfig};
use npicost_core::stats::variance;
use npicost_core::synthetic::{synthetic_hierarchy, HierarchyTruth, SyntheticHierarchy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WEEKS: usize = 12;

fn fixture(draws: usize) -> (SyntheticHierarchy, Vec<CounterfactualDraw>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = synthetic_hierarchy(3, WEEKS, &HierarchyTruth::two_strong(), 5e6, &mut rng).unwrap();
    let config = HierarchicalConfig {
        warmup: 200,
        iterations: 400,
        thin: 4,
        trajectories: 1,
        seed: 3,
        ..Default::default()
    };
    let fit = fit_hierarchical(&h.sets, &h.schedules, &config).unwrap();
    let d = counterfactual_draws(&h.sets[0], &fit, &h.schedules[0], draws, 99).unwrap();
    (h, d)
}

fn constant(u: f64) -> PolicySchedule {
    PolicySchedule::constant("R0", [u; NPI_COUNT], WEEKS)
}

#[test]
fn observed_schedule_reproduces_the_fit_exactly() {
    let (h, draws) = fixture(20);
    let fitted = &h.sets[0].draws[0].trajectory;
    let epi = h.sets[0].epi;
    for d in &draws {
        let t = simulate_policy(d, &h.schedules[0], ShockMode::Retain).unwrap();
        assert_eq!(t.r0, fitted.r0);
        assert_eq!(t.states, fitted.states);
        assert_eq!(t.expected_deaths(&epi), fitted.expected_deaths(&epi));
    }
}

#[test]
fn full_lockdown_infects_fewer_than_open() {
    let (_, draws) = fixture(20);
    let open = simulate_all(&draws, &constant(0.0), ShockMode::Retain).unwrap();
    let full = simulate_all(&draws, &constant(1.0), ShockMode::Retain).unwrap();
    for (o, f) in open.iter().zip(&full) {
        assert!(o.total_infections() > f.total_infections());
    }
}

#[test]
fn draws_without_infection_cost_only_the_policy() {
    let (_, mut draws) = fixture(10);
    for d in &mut draws {
        d.init = CompartmentState::fully_susceptible();
    }
    let econ = EconParams::default();
    let s = constant(0.5);
    let out = expected_cost(&s, &draws, &econ, ShockMode::Retain).unwrap();
    assert_eq!(out.cost.infection, 0.0);
    let npi = npicost_core::cost::policy_cost(&s, &econ).npi();
    assert!((out.expected_cost - npi).abs() <= 1e-9 * npi);
}

#[test]
fn doubling_infection_cost_doubles_only_that_component() {
    let (_, draws) = fixture(10);
    let econ = EconParams::default();
    let iota = mean_iota(&draws);
    let mut dear = econ.clone();
    dear.vscd += infection_cost(&econ, iota) / iota;
    assert!((infection_cost(&dear, iota) - 2.0 * infection_cost(&econ, iota)).abs() < 1e-6);
    let s = constant(0.3);
    let a = expected_cost(&s, &draws, &econ, ShockMode::Retain).unwrap().cost;
    let b = expected_cost(&s, &draws, &dear, ShockMode::Retain).unwrap().cost;
    assert!((b.infection - 2.0 * a.infection).abs() <= 1e-9 * b.infection);
    assert_eq!(a.npi(), b.npi());
}

#[test]
fn common_random_numbers_tighten_policy_differences() {
    let (_, draws) = fixture(40);
    let (a, b) = (constant(0.2), constant(0.3));
    let shifted: Vec<CounterfactualDraw> = draws
        .iter()
        .map(|d| CounterfactualDraw {
            seed: d.seed + 10_000,
            ..d.clone()
        })
        .collect();
    let ta = simulate_all(&draws, &a, ShockMode::Resample).unwrap();
    let tb = simulate_all(&draws, &b, ShockMode::Resample).unwrap();
    let tb_indep = simulate_all(&shifted, &b, ShockMode::Resample).unwrap();
    let diff = |xs: &[npicost_core::epi::Trajectory], ys: &[npicost_core::epi::Trajectory]| -> Vec<f64> {
        xs.iter().zip(ys).map(|(x, y)| x.total_infections() - y.total_infections()).collect()
    };
    let crn = variance(&diff(&ta, &tb));
    let indep = variance(&diff(&ta, &tb_indep));
    assert!(crn < indep, "paired {crn} vs independent {indep}");
}

#[test]
fn resampled_shocks_are_reproducible() {
    let (_, draws) = fixture(5);
    let s = constant(0.4);
    let a = expected_cost(&s, &draws, &EconParams::default(), ShockMode::Resample).unwrap();
    let b = expected_cost(&s, &draws, &EconParams::default(), ShockMode::Resample).unwrap();
    assert_eq!(a, b);
}

#[test]
fn optimal_policy_is_no_worse_than_named_policies() {
    let (h, draws) = fixture(8);
    let econ = EconParams::default();
    let config = OptimizationConfig {
        parameterization: Parameterization::Weekly,
        n_starts: 5,
        max_evals: 400,
        ..Default::default()
    };
    let oc = optimize(&draws, &h.schedules[0], &econ, &config).unwrap();
    let named = evaluate_named_policies(&draws, &h.schedules[0], &econ, Some(&oc.schedule), ShockMode::Retain).unwrap();
    assert_eq!(named.len(), 5);
    let oc_cost = named[0].outcome.expected_cost;
    assert_eq!(named[0].policy, NamedPolicy::Oc);
    for n in &named[1..] {
        assert!(oc_cost <= n.outcome.expected_cost * (1.0 + 1e-12), "{:?}", n.policy);
    }
}
