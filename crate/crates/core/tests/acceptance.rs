//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use npicost_core::artifacts::ArtifactStore;
use npicost_core::cost::*;
use npicost_core::counterfactual::*;
use npicost_core::epi::{step, CompartmentState, EpiParams};
use npicost_core::icer::*;
use npicost_core::inference::{sample_posterior, StageOneConfig, WalkScalePrior};
use npicost_core::ingest::PolicySchedule;
use npicost_core::mcmc::SamplerConfig;
use npicost_core::npi::{Npi, NPI_COUNT};
use npicost_core::observation::{misreport_adjusted_means, zinb_log_pmf, ZinbParams};
use npicost_core::optimizer::*;
use npicost_core::regression::*;
use npicost_core::stats::{quantile, sample_nb2, variance};
use npicost_core::synthetic::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn seird_conservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut errors = 0;
    for _ in 0..10_000 {
        let epi = EpiParams::default().with_iota(rng.random_range(0.001..0.05));
        let mut a = [0.0; 6];
        a.iter_mut().for_each(|x| *x = -rng.random::<f64>().ln());
        let sum: f64 = a.iter().sum();
        let state = CompartmentState::from_array(a.map(|x| x / sum));
        let beta = rng.random_range(0.0..=epi.beta_max());
        match step(&state, beta, &epi) {
            Ok(next) => worst = worst.max((next.total() - 1.0).abs()),
            Err(_) => errors += 1,
        }
    }
    verdict(
        worst < 1e-12 && errors == 0,
        format!("max |sum - 1| = {worst:.2e} over 10000 random steps, {errors} rejected"),
    )
}

fn zinb_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_mass = 0.0f64;
    for _ in 0..50 {
        let p = ZinbParams::new(
            rng.random_range(0.0..0.6),
            rng.random_range(0.5..50.0),
            rng.random_range(0.0..=1.0),
        )
        .unwrap();
        let m: f64 = rng.random_range(0.1..200.0);
        let sd = p.nb_variance(m).sqrt();
        let bound = (m + 60.0 * sd + 200.0) as u64;
        let mass: f64 = (0..=bound).map(|d| zinb_log_pmf(d, m, &p).exp()).sum();
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    let mut worst_var = 0.0f64;
    for (zeta, m, kappa) in [(0.0, 10.0, 5.0), (0.0, 80.0, 2.0), (1.0, 10.0, 5.0), (1.0, 40.0, 20.0)] {
        let p = ZinbParams::new(0.0, kappa, zeta).unwrap();
        let analytic = if zeta == 0.0 { m + m / kappa } else { m + m * m / kappa };
        let xs: Vec<f64> = (0..100_000).map(|_| sample_nb2(m, p.size(m), &mut rng) as f64).collect();
        worst_var = worst_var.max((variance(&xs) / analytic - 1.0).abs());
    }
    verdict(
        worst_mass < 1e-8 && worst_var < 0.02,
        format!("max |mass - 1| = {worst_mass:.2e}; max relative variance error {:.2}%", 100.0 * worst_var),
    )
}

/// Expected folded mean of the positive day after a zero run, by summing over
/// every misreporting pattern of the run.
fn brute_force_fold(run: &[f64], positive: f64, theta: f64) -> f64 {
    let k = run.len();
    let mut total = 0.0;
    for pattern in 0u32..(1 << k) {
        let misreported = |i: usize| pattern >> i & 1 == 1;
        let prob: f64 = (0..k).map(|i| if misreported(i) { theta } else { 1.0 - theta }).product();
        let carried: f64 = (0..k).filter(|&i| (i..k).all(misreported)).map(|i| run[i]).sum();
        total += prob * (positive + carried);
    }
    total
}

fn misreport_marginalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for k in 0..=6 {
        for _ in 0..50 {
            let theta = rng.random_range(0.0..1.0);
            let lead = rng.random_range(0..3);
            let mut raw = Vec::new();
            let mut flags = Vec::new();
            for _ in 0..lead {
                raw.push(rng.random_range(0.0..10.0));
                flags.push(true);
            }
            let start = raw.len();
            for _ in 0..k {
                raw.push(rng.random_range(0.0..10.0));
                flags.push(false);
            }
            raw.push(rng.random_range(0.0..10.0));
            flags.push(true);
            let adjusted = misreport_adjusted_means(&raw, theta, &flags);
            let oracle = brute_force_fold(&raw[start..start + k], raw[start + k], theta);
            worst = worst.max((adjusted[start + k] - oracle).abs());
            for i in start..start + k {
                worst = worst.max((adjusted[i] - raw[i]).abs());
            }
            cases += 1;
        }
    }
    verdict(worst < 1e-12, format!("max error {worst:.2e} over {cases} runs of 0..=6 zeros"))
}

fn ar_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..80);
        let phi = rng.random_range(-0.99..0.99);
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = residuals_from_shocks(&eps, phi);
        for w in 0..n {
            worst = worst.max((e[w] - eps[w] - ar_term_unrolled(&eps, phi, w)).abs());
        }
    }
    verdict(worst < 1e-12, format!("max error {worst:.2e} over 1000 random series"))
}

fn inference_calibration() -> Verdict {
    let epi = EpiParams::default();
    let days = 140;
    let reps = 50;
    let walk = WalkScalePrior::LogNormal {
        mean_log: 400f64.ln(),
        sd_log: 0.5,
    };
    let (mut covered, mut total) = (0, 0);
    let mut slowest = 0.0f64;
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
        let truth = plausible_truth(days, &epi, 0.05, 5e6, &walk, &mut rng);
        let data = match observe_region("S", &truth, &epi, 0.05, 5_000_000, days, &mut rng) {
            Ok(d) => d,
            Err(e) => return Verdict::Fail(format!("replication {rep}: {e}")),
        };
        let config = StageOneConfig {
            sampler: SamplerConfig {
                chains: 4,
                warmup: 5000,
                iterations: 5000,
                thin: 1,
                seed: rep,
            },
            walk_scale_prior: walk,
            ..Default::default()
        };
        let t = Instant::now();
        let fit = match sample_posterior(&data, &config) {
            Ok(f) => f,
            Err(e) => return Verdict::Fail(format!("replication {rep}: {e}")),
        };
        slowest = slowest.max(t.elapsed().as_secs_f64());
        for (w, r) in truth.r0_by_week.iter().enumerate() {
            let d = fit.r0_draws(w);
            covered += usize::from(quantile(&d, 0.05) <= *r && *r <= quantile(&d, 0.95));
            total += 1;
        }
    }
    let coverage = covered as f64 / total as f64;
    verdict(
        (0.85..=0.95).contains(&coverage) && slowest <= 600.0,
        format!("90% CI coverage {:.1}% over {reps} replications x 20 weeks; slowest replication {slowest:.0}s", 100.0 * coverage),
    )
}

fn hierarchical_recovery() -> Verdict {
    let truth = HierarchyTruth::two_strong();
    let reps = 20;
    let mut hits = [0usize; NPI_COUNT];
    let mut violations = 0usize;
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + rep as u64);
        let h = match synthetic_hierarchy(5, 20, &truth, 5e6, &mut rng) {
            Ok(h) => h,
            Err(e) => return Verdict::Fail(format!("replication {rep}: {e}")),
        };
        let config = HierarchicalConfig {
            seed: rep as u64,
            trajectories: 1,
            warmup: 2000,
            iterations: 4000,
            thin: 2,
            ..Default::default()
        };
        let fit = match fit_hierarchical(&h.sets, &h.schedules, &config) {
            Ok(f) => f,
            Err(e) => return Verdict::Fail(format!("replication {rep}: {e}")),
        };
        violations += fit
            .draws
            .iter()
            .flat_map(|d| &d.regions)
            .filter(|r| r.beta_u.iter().any(|b| *b > 0.0))
            .count();
        for (k, hit) in hits.iter_mut().enumerate() {
            let v = fit.pooled_draws(k);
            *hit += usize::from(quantile(&v, 0.05) <= truth.theta[k] && truth.theta[k] <= quantile(&v, 0.95));
        }
    }
    let strong = [Npi::Workplace.index(), Npi::Masks.index()];
    let strong_hits: usize = strong.iter().map(|k| hits[*k]).sum();
    let coverage = hits.iter().sum::<usize>() as f64 / (reps * NPI_COUNT) as f64;
    verdict(
        (0.80..=1.0).contains(&coverage) && violations == 0,
        format!(
            "pooled 90% CI coverage {:.1}% ({} of {} for the two strong NPIs, {} of {} for the nine null NPIs); {violations} sign violations",
            100.0 * coverage,
            strong_hits,
            2 * reps,
            hits.iter().sum::<usize>() - strong_hits,
            9 * reps,
        ),
    )
}

fn counterfactual_self_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = synthetic_hierarchy(5, 20, &HierarchyTruth::two_strong(), 5e6, &mut rng).unwrap();
    let config = HierarchicalConfig {
        trajectories: 1,
        warmup: 300,
        iterations: 1000,
        thin: 10,
        ..Default::default()
    };
    let fit = fit_hierarchical(&h.sets, &h.schedules, &config).unwrap();
    let (mut checked, mut mismatched) = (0, 0);
    for (set, schedule) in h.sets.iter().zip(&h.schedules) {
        let fitted = &set.draws[0].trajectory;
        let deaths = fitted.expected_deaths(&set.epi);
        for d in counterfactual_draws(set, &fit, schedule, 100, 7).unwrap() {
            let t = simulate_policy(&d, schedule, ShockMode::Retain).unwrap();
            checked += 1;
            if t.r0 != fitted.r0 || t.expected_deaths(&d.epi) != deaths {
                mismatched += 1;
            }
        }
    }
    verdict(
        mismatched == 0,
        format!("{mismatched} of {checked} draws differ from the fitted R0 and deaths"),
    )
}

fn optimizer_oracle() -> Verdict {
    let weeks = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth = HierarchyTruth::two_strong();
    let h = synthetic_hierarchy(1, weeks, &truth, 5e6, &mut rng).unwrap();
    let mut coeffs = RegionCoeffs::from_theta(&truth.theta);
    coeffs.beta_u = [0.0; NPI_COUNT];
    coeffs.beta_u[Npi::Masks.index()] = -1.0;
    let draws: Vec<CounterfactualDraw> = (0..4)
        .map(|k| CounterfactualDraw::new(&h.sets[0].draws[0], &h.sets[0], coeffs.clone(), truth.ar, &h.schedules[0], k))
        .collect::<Result<_, _>>()
        .unwrap();
    let econ = EconParams::default();
    let config = OptimizationConfig {
        parameterization: Parameterization::Constant,
        free_npis: vec![Npi::School, Npi::Masks],
        ..Default::default()
    };
    let enc = Encoding::new("R0", weeks, config.parameterization, &config.free_npis);
    let mut best = (f64::INFINITY, [0.0; 2]);
    for i in 0..=10 {
        for j in 0..=10 {
            let x = [i as f64 / 10.0, j as f64 / 10.0];
            let c = expected_cost_value(&enc.decode(&x), &draws, &econ, ShockMode::Retain).unwrap();
            if c < best.0 {
                best = (c, x);
            }
        }
    }
    let res = optimize(&draws, &h.schedules[0], &econ, &config).unwrap();
    let within = res
        .starts
        .iter()
        .filter(|s| s.x.iter().zip(best.1).all(|(a, b)| (a - b).abs() <= 0.1 + 1e-12))
        .count();
    verdict(
        best.1 == [0.0, 1.0] && within == 8 && res.starts.len() == 8,
        format!(
            "grid optimum (school, masks) = {:?}; {within} of {} starts within one cell",
            best.1,
            res.starts.len()
        ),
    )
}

fn cost_golden() -> Verdict {
    let econ = EconParams::default();
    let cents = |x: f64| (x * 100.0).round() / 100.0;
    let only = |npi: Npi, weeks: usize| {
        let mut u = [0.0; NPI_COUNT];
        u[npi.index()] = 1.0;
        PolicySchedule::constant("X", u, weeks)
    };
    let mask_year = cents(policy_cost(&only(Npi::Masks, 52), &econ).total);
    let mut learning_only = econ.clone();
    learning_only.school_direct_gdp_frac = 0.0;
    let sixteen = cents(policy_cost(&only(Npi::School, 16), &learning_only).school);
    let cap = learning_loss_years(&only(Npi::School, 52));
    let workplace = cents(workplace_cost_week(1.0, &econ));
    verdict(
        mask_year == 116.48 && sixteen == 0.0 && (cap - 0.35).abs() < 1e-12 && workplace == 27.68,
        format!(
            "mask year ${mask_year:.2}; 16-week learning cost ${sixteen:.2}; 52-week loss {cap:.4} school-years; workplace week ${workplace:.2}"
        ),
    )
}

fn sicer_properties() -> Verdict {
    let weeks = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = HierarchyTruth::two_strong();
    let h = synthetic_hierarchy(1, weeks, &truth, 5e6, &mut rng).unwrap();
    let mut coeffs = RegionCoeffs::from_theta(&truth.theta);
    coeffs.beta_u = [0.0; NPI_COUNT];
    coeffs.beta_u[Npi::Masks.index()] = -0.6;
    let draws: Vec<CounterfactualDraw> = (0..20)
        .map(|k| CounterfactualDraw::new(&h.sets[0].draws[0], &h.sets[0], coeffs.clone(), truth.ar, &h.schedules[0], k))
        .collect::<Result<_, _>>()
        .unwrap();
    let econ = EconParams::default();
    let mut u = [0.0; NPI_COUNT];
    u[Npi::Masks.index()] = 1.0;
    let masks = PolicySchedule::constant("R0", u, weeks);
    let window = (0, 27);
    let c_nu = infection_cost(&econ, mean_iota(&draws));
    let s = sicer(&masks, &draws, &econ, window, ShockMode::Retain, PrevalenceSource::Policy).unwrap();
    let mut worst = 0.0f64;
    for d in &s.per_draw {
        let mut tuned = econ.clone();
        tuned.mask_daily *= d.sicer;
        let daily = daily_npi_costs(&masks, &tuned, d.nu_averted.len());
        let (r, _) = sicer_ratio(&d.nu_averted, &daily, c_nu, draws[0].population, window).unwrap();
        worst = worst.max((r - 1.0).abs());
    }
    let open = PolicySchedule::constant("R0", [0.0; NPI_COUNT], weeks);
    let zero = draws.iter().all(|d| {
        let t = simulate_policy(d, &open, ShockMode::Retain).unwrap();
        infections_averted(&t, &t, d.population).unwrap().iter().all(|v| *v == 0.0)
    });
    verdict(
        worst <= 1e-9 && zero,
        format!("break-even max |SICER - 1| = {worst:.2e}; open policy averts zero on every day: {zero}"),
    )
}

fn qualitative_reproduction() -> Verdict {
    let Some(root) = std::env::var_os("NPICOST_FULL_DATA").map(PathBuf::from) else {
        return Verdict::NotRun(
            "needs fitted artifacts from the 2020 feeds; set NPICOST_FULL_DATA to the artifact directory".into(),
        );
    };
    let store = ArtifactStore::new(&root);
    let regions = match store.regions() {
        Ok(r) if !r.is_empty() => r,
        _ => return Verdict::Fail(format!("no regions under {}", root.display())),
    };
    let config = OptimizationConfig::default();
    let (mut ordered, mut school_free) = (0, 0);
    for region in &regions {
        let bundle = match store.bundle(region, ModelVariant::II, 100, config.seed) {
            Ok(b) => b,
            Err(e) => return Verdict::Fail(format!("{region}: {e}")),
        };
        let econ = bundle.meta.econ(&EconScenario::default());
        let named = match evaluate_named_policies(&bundle.draws, &bundle.schedule, &econ, None, ShockMode::Retain) {
            Ok(n) => n,
            Err(e) => return Verdict::Fail(format!("{region}: {e}")),
        };
        let deaths = |p: NamedPolicy| named.iter().find(|n| n.policy == p).unwrap().outcome.deaths_total.median;
        let order = [NamedPolicy::Full, NamedPolicy::Oc, NamedPolicy::Obs, NamedPolicy::ObsNoSchool, NamedPolicy::Open];
        ordered += usize::from(order.windows(2).all(|w| deaths(w[0]) < deaths(w[1])));
        let oc = &named.iter().find(|n| n.policy == NamedPolicy::Oc).unwrap().schedule;
        school_free += usize::from(mean_strength(oc)[Npi::School.index()] < 0.05);
    }
    let n = regions.len();
    verdict(
        ordered == n && school_free == n,
        format!("death ordering holds in {ordered} of {n} regions; optimum closes schools in {} of {n}", n - school_free),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("SEIRD conservation", seird_conservation),
        ("ZINB correctness", zinb_correctness),
        ("Misreporting marginalization", misreport_marginalization),
        ("AR(1) identity", ar_identity),
        ("Inference calibration", inference_calibration),
        ("Hierarchical recovery", hierarchical_recovery),
        ("Counterfactual self-consistency", counterfactual_self_consistency),
        ("Optimizer oracle", optimizer_oracle),
        ("Cost arithmetic golden values", cost_golden),
        ("SICER properties", sicer_properties),
        ("Qualitative reproduction (full data)", qualitative_reproduction),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let v = check();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::NotRun(d) => ("NOT RUN", d),
        };
        println!("{tag:<8} {name}: {detail} [{secs:.1}s]");
    }
    println!("acceptance: {failed} failing");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
