use npicost_core::cost::{infection_cost, EconParams};
use npicost_core::counterfactual::{mean_iota, simulate_policy, CounterfactualDraw, ShockMode};
use npicost_core::error::Error;
use npicost_core::icer::*;
use npicost_core::ingest::PolicySchedule;
use npicost_core::npi::{Npi, NPI_COUNT};
use npicost_core::regression::RegionCoeffs;
use npicost_core::synthetic::{synthetic_hierarchy, HierarchyTruth, SyntheticHierarchy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WEEKS: usize = 12;

fn world(beta_masks: f64) -> (SyntheticHierarchy, Vec<CounterfactualDraw>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let truth = HierarchyTruth::two_strong();
    let h = synthetic_hierarchy(1, WEEKS, &truth, 5e6, &mut rng).unwrap();
    let mut coeffs = RegionCoeffs::from_theta(&truth.theta);
    coeffs.beta_u = [0.0; NPI_COUNT];
    coeffs.beta_u[Npi::Masks.index()] = beta_masks;
    let draws = (0..3)
        .map(|k| CounterfactualDraw::new(&h.sets[0].draws[0], &h.sets[0], coeffs.clone(), truth.ar, &h.schedules[0], k))
        .collect::<Result<_, _>>()
        .unwrap();
    (h, draws)
}

fn masks(level: f64) -> PolicySchedule {
    let mut u = [0.0; NPI_COUNT];
    u[Npi::Masks.index()] = level;
    PolicySchedule::constant("R0", u, WEEKS)
}

fn whole(draws: &[CounterfactualDraw]) -> (usize, usize) {
    (0, draws[0].days - 1)
}

#[test]
fn break_even_by_construction_gives_unit_sicer() {
    let (_, draws) = world(-0.6);
    let econ = EconParams::default();
    let s = sicer(&masks(1.0), &draws, &econ, whole(&draws), ShockMode::Retain, PrevalenceSource::Policy).unwrap();
    for d in &s.per_draw {
        let mut tuned = econ.clone();
        tuned.mask_daily *= d.sicer;
        let nu = &d.nu_averted;
        let daily = daily_npi_costs(&masks(1.0), &tuned, nu.len());
        let c_nu = infection_cost(&econ, mean_iota(&draws));
        let (r, _) = sicer_ratio(nu, &daily, c_nu, draws[0].population, d.window).unwrap();
        assert!((r - 1.0).abs() <= 1e-9, "{r}");
    }
}

#[test]
fn open_policy_averts_nothing_and_has_no_ratio() {
    let (_, draws) = world(-0.6);
    let open = masks(0.0);
    for d in &draws {
        let t = simulate_policy(d, &open, ShockMode::Retain).unwrap();
        assert!(infections_averted(&t, &t, d.population).unwrap().iter().all(|v| *v == 0.0));
    }
    let err = sicer(&open, &draws, &EconParams::default(), whole(&draws), ShockMode::Retain, PrevalenceSource::Policy);
    assert!(matches!(err, Err(Error::UndefinedRatio)));
}

#[test]
fn ineffective_policy_has_zero_sicer() {
    let (_, draws) = world(0.0);
    let s = sicer(&masks(1.0), &draws, &EconParams::default(), whole(&draws), ShockMode::Retain, PrevalenceSource::Policy)
        .unwrap();
    assert!(s.per_draw.iter().all(|d| d.sicer.abs() <= 1e-12));
}

#[test]
fn doubling_policy_cost_halves_sicer() {
    let (_, draws) = world(-0.6);
    let econ = EconParams::default();
    let mut dear = econ.clone();
    dear.mask_daily *= 2.0;
    let w = whole(&draws);
    let a = sicer(&masks(0.7), &draws, &econ, w, ShockMode::Retain, PrevalenceSource::Policy).unwrap();
    let b = sicer(&masks(0.7), &draws, &dear, w, ShockMode::Retain, PrevalenceSource::Policy).unwrap();
    for (x, y) in a.per_draw.iter().zip(&b.per_draw) {
        assert!((x.sicer - 2.0 * y.sicer).abs() <= 1e-12 * x.sicer.abs());
        assert!((2.0 * x.icer - y.icer).abs() <= 1e-12 * y.icer.abs());
    }
}

#[test]
fn window_numerators_add_up() {
    let (_, draws) = world(-0.6);
    let econ = EconParams::default();
    let schedule = masks(0.8);
    let days = draws[0].days;
    let s = sicer(&schedule, &draws, &econ, (0, days - 1), ShockMode::Retain, PrevalenceSource::Policy).unwrap();
    let daily = daily_npi_costs(&schedule, &econ, days);
    let c_nu = infection_cost(&econ, mean_iota(&draws));
    let n = draws[0].population;
    for d in &s.per_draw {
        let spent = |a: usize, b: usize| daily[a..=b].iter().sum::<f64>() * n;
        let whole_numerator = d.sicer * spent(0, days - 1);
        let mut parts = 0.0;
        for (a, b) in [(0, 20), (21, 49), (50, days - 1)] {
            parts += sicer_ratio(&d.nu_averted, &daily, c_nu, n, (a, b)).unwrap().0 * spent(a, b);
        }
        assert!((whole_numerator - parts).abs() <= 1e-9 * whole_numerator.abs());
    }
}

#[test]
fn cumulative_and_weekly_series_cover_every_week() {
    let (_, draws) = world(-0.6);
    let s = sicer(&masks(1.0), &draws, &EconParams::default(), whole(&draws), ShockMode::Retain, PrevalenceSource::Open)
        .unwrap();
    assert_eq!(s.cumulative.len(), WEEKS);
    assert_eq!(s.weekly.len(), WEEKS);
    let last = s.cumulative.last().unwrap().as_ref().unwrap();
    assert!((last.median - s.sicer.median).abs() <= 1e-12 * s.sicer.median.abs());
    assert!(s.weekly[0].is_some());
}

#[test]
fn mismatched_grids_are_rejected() {
    let (_, draws) = world(-0.6);
    let a = simulate_policy(&draws[0], &masks(1.0), ShockMode::Retain).unwrap();
    let mut b = a.clone();
    b.states.pop();
    b.re.pop();
    b.new_infections.pop();
    assert!(matches!(infections_averted(&a, &b, 1e6), Err(Error::Contract(_))));
}
