//! Synthetic regions drawn from the generative model, for tests, demos and
//! calibration studies.

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal, StudentT};

use crate::counterfactual::simulate_with_residuals;
use crate::epi::{initial_state, weeks_for_days, EpiParams, DAYS_PER_WEEK};
use crate::error::Result;
use crate::inference::{PosteriorDrawSet, StageOneDraw, StageOneParams, WalkScalePrior};
use crate::ingest::{ClinicalSeries, PolicySchedule};
use crate::npi::{Npi, NPI_COUNT};
use crate::observation::{raw_case_means, raw_death_means, ZinbParams};
use crate::regression::{ArParams, RegionCoeffs, THETA_DIM};
use crate::stats::{normal_upper_truncated, sample_nb2, sample_poisson};

/// Draw a scaled-beta random walk of `len` steps on `(0, scale)`.
pub fn beta_walk<R: Rng + ?Sized>(start: f64, concentration: f64, scale: f64, len: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut x = start;
    for i in 0..len {
        if i > 0 {
            let r = x / scale;
            let b = Beta::new(concentration * r, concentration * (1.0 - r)).expect("valid beta walk");
            x = scale * b.sample(rng).clamp(1e-9, 1.0 - 1e-9);
        }
        out.push(x);
    }
    out
}

/// Counts with misreported zeros carried into the next reported day.
pub fn observe_counts<R: Rng + ?Sized>(raw: &[f64], zinb: &ZinbParams, rng: &mut R) -> Vec<u64> {
    let mut carry = 0.0;
    raw.iter()
        .map(|m| {
            let mean = m + carry;
            if rng.random::<f64>() < zinb.theta {
                carry = mean;
                0
            } else {
                carry = 0.0;
                sample_nb2(mean, zinb.size(mean).max(1e-12), rng)
            }
        })
        .collect()
}

/// Simulate a clinical series from known stage-one parameters.
pub fn observe_region<R: Rng + ?Sized>(
    region_id: &str,
    params: &StageOneParams,
    epi: &EpiParams,
    p_initial: f64,
    population: u64,
    days: usize,
    rng: &mut R,
) -> Result<ClinicalSeries> {
    let traj = params.trajectory(epi, p_initial, population as f64, days)?;
    let deaths = observe_counts(&raw_death_means(&traj, epi.mu(), days), &params.zinb_deaths, rng);
    let cases = observe_counts(&raw_case_means(&traj, &params.case_state(), days)?, &params.zinb_cases, rng);
    let s0 = traj.states[0];
    let prior = sample_poisson(population as f64 * (s0.r_d + s0.d), rng);
    Ok(ClinicalSeries {
        region_id: region_id.to_owned(),
        start_date: NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date"),
        deaths,
        cases,
        prior_cumulative_deaths: prior,
        population,
    })
}

/// Plausible stage-one truth for a `days`-long window: a slowly growing
/// epidemic whose R0 and CAR drift under random walks. Walk concentrations
/// come from `walk_prior` when it is proper and are 400 otherwise.
pub fn plausible_truth<R: Rng + ?Sized>(
    days: usize,
    epi: &EpiParams,
    p_initial: f64,
    population: f64,
    walk_prior: &WalkScalePrior,
    rng: &mut R,
) -> StageOneParams {
    let weeks = weeks_for_days(days);
    let sigma2_r = walk_prior.sample(rng).unwrap_or(400.0);
    let sigma2_car = walk_prior.sample(rng).unwrap_or(400.0);
    let r0_0 = rng.random_range(1.1..1.6);
    let car0 = rng.random_range(0.15..0.4);
    let x0 = {
        let e = rng.random_range(0.002..0.01);
        let i = rng.random_range(0.002..0.01);
        let r = rng.random_range(0.0..0.01);
        let d = rng.random_range(0.0..0.002);
        [1.0 - e - i - r - d, e, i, r, d]
    };
    let delay = rng.random_range(9.0..16.0);
    let nu0 = population * epi.gamma() * r0_0 * p_initial * x0[2];
    StageOneParams {
        r0_by_week: beta_walk(r0_0, sigma2_r, epi.r0_max, weeks, rng),
        sigma2_r,
        iota: rng.random_range(0.006..0.0078),
        x0,
        car_by_week: beta_walk(car0, sigma2_car, 1.0, weeks, rng),
        sigma2_car,
        confirmation_delay: delay,
        zinb_deaths: ZinbParams {
            theta: 0.05,
            kappa: 20.0,
            zeta: 0.3,
        },
        zinb_cases: ZinbParams {
            theta: 0.05,
            kappa: 20.0,
            zeta: 0.3,
        },
        i_c0: car0 * nu0 * delay,
    }
}

/// Known pooled coefficients, random-effect spreads and residual process of
/// a synthetic multi-region regression.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyTruth {
    pub theta: [f64; THETA_DIM],
    /// Standard deviation of each region's deviation from `theta`.
    pub effect_sd: [f64; THETA_DIM],
    pub ar: ArParams,
}

impl HierarchyTruth {
    /// Workplace closure and masks strongly effective, the other nine NPIs
    /// without effect, and no infection-driven fear response.
    pub fn two_strong() -> Self {
        let mut theta = [0.0; THETA_DIM];
        theta[Npi::Workplace.index()] = -0.4;
        theta[Npi::Masks.index()] = -0.3;
        theta[NPI_COUNT + 1] = -0.5;
        theta[NPI_COUNT + 2] = -0.5;
        theta[THETA_DIM - 1] = 2.2f64.ln();
        let mut effect_sd = [0.02; THETA_DIM];
        effect_sd[NPI_COUNT] = 0.0;
        effect_sd[NPI_COUNT + 1] = 0.05;
        effect_sd[NPI_COUNT + 2] = 0.05;
        effect_sd[THETA_DIM - 1] = 0.1;
        Self {
            theta,
            effect_sd,
            ar: ArParams {
                phi: 0.5,
                sigma_eps: 0.08,
                nu_eps: 6.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHierarchy {
    /// One exact stage-one draw per region.
    pub sets: Vec<PosteriorDrawSet>,
    pub schedules: Vec<PolicySchedule>,
    pub regions: Vec<RegionCoeffs>,
}

/// Piecewise-constant schedule: each NPI switches on at a random level and
/// may switch off again.
pub fn random_schedule<R: Rng + ?Sized>(region_id: &str, weeks: usize, rng: &mut R) -> PolicySchedule {
    let mut out = vec![[0.0; NPI_COUNT]; weeks];
    for k in 0..NPI_COUNT {
        let on = rng.random_range(1..weeks.max(2) / 2 + 1);
        let off = rng.random_range(on + 1..weeks + 3);
        let level = [1.0 / 3.0, 2.0 / 3.0, 1.0][rng.random_range(0..3)];
        for u in out.iter_mut().take(off.min(weeks)).skip(on) {
            u[k] = level;
        }
    }
    PolicySchedule {
        region_id: region_id.to_owned(),
        weeks: out,
    }
}

/// Regions whose R0 follows the regression exactly, with behavioral
/// covariates fed back from the simulated epidemic.
pub fn synthetic_hierarchy<R: Rng + ?Sized>(
    regions: usize,
    weeks: usize,
    truth: &HierarchyTruth,
    population: f64,
    rng: &mut R,
) -> Result<SyntheticHierarchy> {
    let epi = EpiParams::default();
    let p_initial = 0.05;
    let days = weeks * DAYS_PER_WEEK;
    let t = StudentT::new(truth.ar.nu_eps).expect("positive degrees of freedom");
    let mut out = SyntheticHierarchy {
        sets: Vec::with_capacity(regions),
        schedules: Vec::with_capacity(regions),
        regions: Vec::with_capacity(regions),
    };
    for r in 0..regions {
        let id = format!("R{r}");
        let mut theta_s = [0.0; THETA_DIM];
        for j in 0..THETA_DIM {
            let (m, sd) = (truth.theta[j], truth.effect_sd[j]);
            theta_s[j] = if j < NPI_COUNT && sd > 0.0 {
                normal_upper_truncated(m, sd, 0.0, rng)
            } else {
                m + sd * rng.sample::<f64, _>(StandardNormal)
            };
        }
        let coeffs = RegionCoeffs::from_theta(&theta_s);
        let schedule = random_schedule(&id, weeks, rng);
        let mut e = Vec::with_capacity(weeks);
        let mut prev = 0.0;
        for _ in 0..weeks {
            prev = truth.ar.phi * prev + truth.ar.sigma_eps * t.sample(rng);
            e.push(prev);
        }
        let x0 = {
            let e0 = rng.random_range(0.01..0.03);
            let i0 = rng.random_range(0.01..0.03);
            [1.0 - e0 - i0, e0, i0, 0.0, 0.0]
        };
        let iota = epi.iota;
        let init = initial_state(&x0, p_initial, iota)?;
        let trajectory = simulate_with_residuals(&init, &epi, population, days, &coeffs, &schedule, &e)?;
        let params = StageOneParams {
            r0_by_week: trajectory.r0.clone(),
            sigma2_r: 400.0,
            iota,
            x0,
            car_by_week: vec![0.3; weeks],
            sigma2_car: 400.0,
            confirmation_delay: 12.0,
            zinb_deaths: ZinbParams {
                theta: 0.05,
                kappa: 20.0,
                zeta: 0.3,
            },
            zinb_cases: ZinbParams {
                theta: 0.05,
                kappa: 20.0,
                zeta: 0.3,
            },
            i_c0: 0.0,
        };
        out.sets.push(PosteriorDrawSet {
            region_id: id,
            population,
            p_initial,
            epi,
            draws: vec![StageOneDraw { params, trajectory }],
            diagnostics: None,
        });
        out.schedules.push(schedule);
        out.regions.push(coeffs);
    }
    Ok(out)
}
