use approx::assert_abs_diff_eq;
use npicost_core::epi::{simulate, CompartmentState, EpiParams};
use npicost_core::error::Error;
use npicost_core::ingest::PolicySchedule;
use npicost_core::mcmc::effective_sample_size;
use npicost_core::npi::NPI_COUNT;
use npicost_core::regression::*;
use npicost_core::stats::{mean, variance};
use npicost_core::synthetic::{synthetic_hierarchy, HierarchyTruth};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;

fn coeffs(beta_u: [f64; NPI_COUNT]) -> RegionCoeffs {
    let mut c = RegionCoeffs::from_theta(&[0.0; THETA_DIM]);
    c.beta_u = beta_u;
    c
}

proptest! {
    #[test]
    fn unrolled_ar_term_matches_the_recursion(
        eps in prop::collection::vec(-1.0f64..1.0, 1..60),
        phi in -0.99f64..0.99,
    ) {
        let e = residuals_from_shocks(&eps, phi);
        for w in 0..eps.len() {
            prop_assert!((e[w] - (eps[w] + ar_term_unrolled(&eps, phi, w))).abs() < 1e-12);
        }
        let back = shocks_from_residuals(&e, phi);
        for (a, b) in back.iter().zip(&eps) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stringency_weights_sum_to_one(b in prop::array::uniform11(-1.0f64..0.0)) {
        prop_assume!(b.iter().sum::<f64>() < -1e-6);
        let rho = stringency_weights(&coeffs(b)).unwrap();
        prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_shock_decays_geometrically() {
    let phi = 0.6;
    let mut eps = vec![0.0; 10];
    eps[3] = 0.5;
    let e = residuals_from_shocks(&eps, phi);
    for (w, x) in e.iter().enumerate() {
        let expected = if w < 3 { 0.0 } else { 0.5 * phi.powi(w as i32 - 3) };
        assert_abs_diff_eq!(*x, expected, epsilon = 1e-15);
    }
}

#[test]
fn perfect_fit_maximizes_the_likelihood() {
    let weeks = 6;
    let c = RegionCoeffs::from_theta(&{
        let mut t = [0.0; THETA_DIM];
        t[THETA_DIM - 1] = 2.0f64.ln();
        t
    });
    let schedule = PolicySchedule::constant("X", [0.0; NPI_COUNT], weeks);
    let cov = BehavioralCovariates {
        infections: vec![0.0; weeks],
        removals: vec![0.0; weeks],
        deaths: vec![0.0; weeks],
    };
    let ar = ArParams {
        phi: 0.0,
        sigma_eps: 0.1,
        nu_eps: 5.0,
    };
    let exact = regression_loglik(&[2.0; 6], &c, &ar, &schedule, &cov).unwrap();
    let peak = 6.0 * npicost_core::stats::student_t_log_pdf(0.0, 5.0, 0.1);
    assert_abs_diff_eq!(exact, peak, epsilon = 1e-12);
    let off = regression_loglik(&[2.0, 2.1, 2.0, 2.0, 1.9, 2.0], &c, &ar, &schedule, &cov).unwrap();
    assert!(off < exact);
    assert!(matches!(
        regression_loglik(&[2.0, 0.0, 2.0, 2.0, 2.0, 2.0], &c, &ar, &schedule, &cov),
        Err(Error::Contract(_))
    ));
}

#[test]
fn weekly_deaths_telescope_to_the_death_compartment() {
    let epi = EpiParams::default();
    let init = CompartmentState {
        s: 0.97,
        e: 0.01,
        i: 0.02,
        r_s: 0.0,
        r_d: 0.0,
        d: 0.0,
    };
    let t = simulate(&init, &[2.5; 10], &epi, 1e6, 70).unwrap();
    let cov = behavioral_covariates(&t.states, &epi);
    let total: f64 = cov.deaths.iter().sum();
    assert_abs_diff_eq!(total, t.states[70].d - t.states[0].d, epsilon = 1e-14);
    let no_exposed = behavioral_covariates(
        &vec![
            CompartmentState {
                e: 0.0,
                ..init
            };
            15
        ],
        &epi,
    );
    assert!(no_exposed.infections.iter().all(|x| *x == 0.0));
}

#[test]
fn total_effect_of_log_half() {
    let mut b = [0.0; NPI_COUNT];
    b[0] = -0.693;
    let (alpha, pct) = total_effect(&coeffs(b));
    assert_eq!(alpha, -0.693);
    assert_eq!((pct * 10.0).round() / 10.0, 50.0);
    assert_eq!(total_effect(&coeffs([0.0; NPI_COUNT])).1, 0.0);
    let rho = stringency_weights(&coeffs(b)).unwrap();
    assert_eq!(rho[0], 1.0);
    let uniform = stringency_weights(&coeffs([-0.2; NPI_COUNT])).unwrap();
    assert!(uniform.iter().all(|r| (r - 1.0 / 11.0).abs() < 1e-15));
    assert!(matches!(stringency_weights(&coeffs([0.0; NPI_COUNT])), Err(Error::UndefinedWeights)));
}

#[test]
fn cpc_prior_gives_lkj_uniform_marginals() {
    let d = 4;
    let n = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut off = vec![Vec::with_capacity(n); d * (d - 1) / 2];
    for _ in 0..n {
        let mut z = Vec::new();
        for i in 1..d {
            for j in 0..i {
                let b = 1.0 + (d as f64 - 2.0 - j as f64) / 2.0;
                z.push(2.0 * rng.sample(Beta::new(b, b).unwrap()) - 1.0);
            }
        }
        let l = corr_cholesky_from_cpc(&z, d);
        let omega = &l * l.transpose();
        let mut k = 0;
        for i in 1..d {
            for j in 0..i {
                off[k].push(omega[(i, j)]);
                k += 1;
            }
        }
    }
    for xs in &off {
        assert!(mean(xs).abs() < 0.01);
        let v = variance(xs);
        assert!((v - 1.0 / (d as f64 + 1.0)).abs() < 0.01, "{v}");
    }
}

fn quick_fit(permute: bool, seed: u64) -> (HierarchicalFit, HierarchyTruth) {
    let truth = HierarchyTruth::two_strong();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut h = synthetic_hierarchy(5, 20, &truth, 5e6, &mut rng).unwrap();
    if permute {
        h.sets.reverse();
        h.schedules.reverse();
    }
    let config = HierarchicalConfig {
        warmup: 1000,
        iterations: 3000,
        thin: 1,
        trajectories: 1,
        seed,
        ..Default::default()
    };
    (fit_hierarchical(&h.sets, &h.schedules, &config).unwrap(), truth)
}

#[test]
fn draws_respect_sign_and_stationarity() {
    let (fit, _) = quick_fit(false, 1);
    for d in &fit.draws {
        assert!(d.pooled.phi.abs() < 1.0);
        assert!(d.pooled.nu_eps > 0.0 && d.pooled.sigma_eps > 0.0);
        for r in &d.regions {
            assert!(r.beta_u.iter().all(|b| *b <= 0.0));
            assert_eq!(r.beta_i, 0.0);
        }
    }
}

#[test]
fn strong_effects_are_recovered() {
    let (fit, truth) = quick_fit(false, 2);
    for j in [1usize, 10] {
        let m = mean(&fit.pooled_draws(j));
        assert!(m < -0.1, "coefficient {j}: {m}");
        assert!((m - truth.theta[j]).abs() < 0.15, "coefficient {j}: {m}");
    }
}

#[test]
fn region_order_does_not_change_the_pooled_posterior() {
    let (a, _) = quick_fit(false, 3);
    let (b, _) = quick_fit(true, 4);
    assert_eq!(a.region_ids.iter().rev().collect::<Vec<_>>(), b.region_ids.iter().collect::<Vec<_>>());
    for j in ModelVariant::II.active() {
        let (xa, xb) = (a.pooled_draws(j), b.pooled_draws(j));
        let se2 = |x: &[f64]| variance(x) / effective_sample_size(&[x.to_vec()]);
        let tol = 2.0 * (se2(&xa) + se2(&xb)).sqrt();
        assert!((mean(&xa) - mean(&xb)).abs() <= tol, "coefficient {j}");
    }
}

#[test]
fn nested_models_share_the_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = synthetic_hierarchy(1, 10, &HierarchyTruth::two_strong(), 5e6, &mut rng).unwrap();
    let draw = &h.sets[0].draws[0];
    let cov = behavioral_covariates(&draw.trajectory.states, &h.sets[0].epi);
    let c = h.regions[0].clone();
    assert_eq!(c.beta_i, 0.0);
    assert!(c.validate(ModelVariant::II).is_ok() && c.validate(ModelVariant::III).is_ok());
    let ar = HierarchyTruth::two_strong().ar;
    let ii = regression_loglik(&draw.params.r0_by_week, &c, &ar, &h.schedules[0], &cov).unwrap();
    let iii = regression_loglik(
        &draw.params.r0_by_week,
        &RegionCoeffs {
            beta_i: 0.0,
            ..c.clone()
        },
        &ar,
        &h.schedules[0],
        &cov,
    )
    .unwrap();
    assert!(ii.is_finite());
    assert_eq!(ii, iii);
}
