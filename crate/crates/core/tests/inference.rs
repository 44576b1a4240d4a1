use npicost_core::epi::EpiParams;
use npicost_core::inference::{
    sample_posterior, sample_posterior_with, PosteriorDrawSet, StageOneConfig, StageOneFit, StageOneModel,
    StageOneParams, WalkScalePrior,
};
use npicost_core::ingest::ClinicalSeries;
use npicost_core::mcmc::SamplerConfig;
use npicost_core::stats::quantile;
use npicost_core::synthetic::{observe_region, plausible_truth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

const DAYS: usize = 84;
const POPULATION: u64 = 5_000_000;

fn walk_prior() -> WalkScalePrior {
    WalkScalePrior::LogNormal {
        mean_log: 400f64.ln(),
        sd_log: 0.5,
    }
}

fn synthetic_days(seed: u64, days: usize) -> (StageOneParams, ClinicalSeries) {
    let epi = EpiParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = plausible_truth(days, &epi, 0.05, POPULATION as f64, &walk_prior(), &mut rng);
    let data = observe_region("SYN", &truth, &epi, 0.05, POPULATION, days, &mut rng).unwrap();
    (truth, data)
}

fn synthetic(seed: u64) -> (StageOneParams, ClinicalSeries) {
    synthetic_days(seed, DAYS)
}

fn short_config(seed: u64) -> StageOneConfig {
    StageOneConfig {
        sampler: SamplerConfig {
            chains: 2,
            warmup: 1500,
            iterations: 1500,
            thin: 1,
            seed,
        },
        walk_scale_prior: walk_prior(),
        draws_kept: 20,
        ..Default::default()
    }
}

/// Asymptotic Kolmogorov-Smirnov p-value with the Stephens correction.
fn ks_p_value(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn prior_only_sampling_reproduces_prior_marginals() {
    // Two weeks keep the CAR walk to a single transition, so single-site
    // updates give nearly independent draws of CAR(0).
    let (_, data) = synthetic_days(7, 14);
    let config = StageOneConfig {
        sampler: SamplerConfig {
            chains: 4,
            warmup: 2000,
            iterations: 50_000,
            thin: 20,
            seed: 11,
        },
        walk_scale_prior: walk_prior(),
        start_search_iterations: 0,
        ..Default::default()
    };
    let mut model = StageOneModel::new(&data, &config);
    model.prior_only = true;
    let l = model.layout;
    let mut start = model.default_start();
    start.sigma2_car = 20.0;
    start.car_by_week = vec![0.5; l.weeks];
    let car: Vec<usize> = (0..l.weeks).map(|w| l.car(w)).collect();
    let mut blocks = vec![vec![l.iota()], vec![l.zinb_deaths()], car.clone()];
    blocks.extend(car.iter().map(|&i| vec![i]));
    let fit = sample_posterior_with(&model, Some(&start), Some(blocks));
    assert_eq!(fit.samples.len(), 10_000);

    let ifr = config.ifr_prior;
    let sd = (ifr.hi - ifr.lo) / 4.0;
    let z = Normal::new(ifr.median, sd).unwrap();
    let mass = z.cdf(1.0) - z.cdf(0.0);
    let iota: Vec<f64> = fit.samples.iter().map(|p| p.iota).collect();
    let p_iota = ks_p_value(iota, |x| (z.cdf(x) - z.cdf(0.0)) / mass);
    let theta: Vec<f64> = fit.samples.iter().map(|p| p.zinb_deaths.theta).collect();
    let p_theta = ks_p_value(theta, |x| x.clamp(0.0, 1.0));
    let car0: Vec<f64> = fit.samples.iter().map(|p| p.car_by_week[0]).collect();
    let p_car = ks_p_value(car0, |x| x.clamp(0.0, 1.0));
    assert!(p_iota > 0.01, "iota KS p = {p_iota}");
    assert!(p_theta > 0.01, "theta_D KS p = {p_theta}");
    assert!(p_car > 0.01, "CAR(0) KS p = {p_car}");
}

#[test]
fn posterior_prefers_truth_over_distorted_paths() {
    let (truth, data) = synthetic(21);
    let config = short_config(1);
    let model = StageOneModel::new(&data, &config);
    let at_truth = model.log_posterior(&truth);
    assert!(at_truth.is_finite());
    for factor in [0.7, 1.3] {
        let mut p = truth.clone();
        p.r0_by_week.iter_mut().for_each(|r| *r *= factor);
        assert!(model.log_posterior(&p) < at_truth, "factor {factor}");
    }
    let mut p = truth.clone();
    p.iota *= 3.0;
    assert!(model.log_posterior(&p) < at_truth);
}

#[test]
fn same_seed_same_draws_and_different_seeds_agree() {
    let (truth, data) = synthetic(33);
    let a = sample_posterior(&data, &short_config(5)).unwrap();
    let b = sample_posterior(&data, &short_config(5)).unwrap();
    assert_eq!(a.samples, b.samples);

    let c = sample_posterior(&data, &short_config(6)).unwrap();
    for w in [0, truth.weeks() / 2, truth.weeks() - 1] {
        let name = format!("r0[{w}]");
        let mc_se = |fit: &StageOneFit| {
            let d = fit.r0_draws(w);
            let ess = fit.diagnostics.monitored.iter().find(|m| m.0 == name).unwrap().2;
            let sd = (quantile(&d, 0.8413) - quantile(&d, 0.1587)) / 2.0;
            // Asymptotic standard error of a sample median.
            (quantile(&d, 0.5), 1.2533 * sd / ess.max(1.0).sqrt())
        };
        let ((ma, sa), (mc, sc)) = (mc_se(&a), mc_se(&c));
        let gap = (ma - mc).abs();
        let tol = 2.0 * (sa * sa + sc * sc).sqrt();
        assert!(gap <= tol, "week {w}: medians {ma} vs {mc}, tolerance {tol}");
    }
}

#[test]
fn posterior_trajectories_conserve_mass_and_keep_cumulative_compartments_monotone() {
    let (_, data) = synthetic(44);
    let config = short_config(3);
    let fit = sample_posterior(&data, &config).unwrap();
    let set = PosteriorDrawSet::from_fit(&fit, &data, &config).unwrap();
    assert_eq!(set.len(), config.draws_kept);
    for draw in &set.draws {
        let t = &draw.trajectory;
        for pair in t.states.windows(2) {
            assert!((pair[1].total() - 1.0).abs() < 1e-9);
            assert!(pair[1].s <= pair[0].s + 1e-15);
            assert!(pair[1].d >= pair[0].d - 1e-15);
            assert!(pair[1].r_s >= pair[0].r_s - 1e-15);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let back = PosteriorDrawSet::load(dir.path()).unwrap();
    assert_eq!(back.draws.len(), set.draws.len());
    assert_eq!(back.draws[3].trajectory.states, set.draws[3].trajectory.states);
    assert_eq!(back.draws[3].params, set.draws[3].params);
}
