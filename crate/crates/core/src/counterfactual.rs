//! Trajectories under arbitrary NPI schedules, conditional on posterior
//! draws, and Monte Carlo estimates of their expected cost.
//!
//! Behavioral covariates are recomputed from the simulated path each week,
//! so a schedule changes transmission both directly and through the fear
//! response it induces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{infection_cost, policy_cost, CostBreakdown, EconParams};
use crate::epi::{simulate_weekly, weeks_for_days, CompartmentState, EpiParams, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{PosteriorDrawSet, StageOneDraw};
use crate::ingest::PolicySchedule;
use crate::npi::{Npi, NPI_COUNT};
use crate::regression::{
    lagged_covariates, linear_predictor, shocks_from_residuals, ArParams, HierarchicalFit, RegionCoeffs,
};
use crate::stats::Summary;

/// How residual shocks enter a counterfactual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShockMode {
    /// Keep the shocks inferred from the fitted period.
    #[default]
    Retain,
    /// Draw fresh Student-t shocks.
    Resample,
}

impl std::str::FromStr for ShockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retain" => Ok(ShockMode::Retain),
            "resample" => Ok(ShockMode::Resample),
            _ => Err(Error::InvalidParameter(format!("unknown shock mode {s:?}"))),
        }
    }
}

/// One joint posterior draw of everything a counterfactual needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualDraw {
    pub coeffs: RegionCoeffs,
    pub ar: ArParams,
    /// Shocks `eps(w)` of the fitted residual path.
    pub shocks: Vec<f64>,
    /// Fitted weekly R0 and linear predictor under the observed schedule.
    pub observed_r0: Vec<f64>,
    pub observed_lp: Vec<f64>,
    pub init: CompartmentState,
    /// Epidemic parameters with this draw's IFR.
    pub epi: EpiParams,
    pub population: f64,
    pub days: usize,
    /// Seed for resampled shocks.
    pub seed: u64,
}

impl CounterfactualDraw {
    pub fn new(
        stage_one: &StageOneDraw,
        set: &PosteriorDrawSet,
        coeffs: RegionCoeffs,
        ar: ArParams,
        observed: &PolicySchedule,
        seed: u64,
    ) -> Result<Self> {
        let traj = &stage_one.trajectory;
        let days = traj.days();
        let weeks = traj.weeks();
        if observed.len() < weeks {
            return Err(Error::Contract(format!(
                "{}: observed schedule has {} weeks, fit has {weeks}",
                set.region_id,
                observed.len()
            )));
        }
        let epi = set.epi.with_iota(stage_one.params.iota);
        let observed_lp: Vec<f64> = (0..weeks)
            .map(|w| linear_predictor(&coeffs, &observed.weeks[w], &lagged_covariates(&traj.states, days, w, &epi)))
            .collect();
        let residuals: Vec<f64> = traj.r0.iter().zip(&observed_lp).map(|(r, lp)| r.ln() - lp).collect();
        Ok(Self {
            coeffs,
            ar,
            shocks: shocks_from_residuals(&residuals, ar.phi),
            observed_r0: traj.r0.clone(),
            observed_lp,
            init: traj.states[0],
            epi,
            population: set.population,
            days,
            seed,
        })
    }

    pub fn weeks(&self) -> usize {
        weeks_for_days(self.days)
    }
}

/// Pair stage-two draws of one region with the stage-one draws they were
/// fitted to, keeping at most `max_draws` evenly spaced ones.
pub fn counterfactual_draws(
    set: &PosteriorDrawSet,
    fit: &HierarchicalFit,
    observed: &PolicySchedule,
    max_draws: usize,
    seed: u64,
) -> Result<Vec<CounterfactualDraw>> {
    let region = fit
        .region_index(&set.region_id)
        .ok_or_else(|| Error::Contract(format!("region {} is not in the NPI fit", set.region_id)))?;
    let n = fit.draws.len();
    if n == 0 || max_draws == 0 {
        return Err(Error::Contract("no draws to build counterfactuals from".into()));
    }
    let m = max_draws.min(n);
    (0..m)
        .map(|k| {
            let d = &fit.draws[k * n / m];
            let stage_one = set.draws.get(d.stage_one_index).ok_or_else(|| {
                Error::Contract(format!(
                    "NPI fit refers to stage-one draw {} but {} has {}",
                    d.stage_one_index,
                    set.region_id,
                    set.len()
                ))
            })?;
            CounterfactualDraw::new(
                stage_one,
                set,
                d.regions[region].clone(),
                d.pooled.ar(),
                observed,
                seed.wrapping_add(k as u64),
            )
        })
        .collect()
}

/// Run the dynamics with `log R0(w) = lp(w) + e(w)` for a given residual
/// path, recomputing the behavioral covariates from the simulated states.
pub fn simulate_with_residuals(
    init: &CompartmentState,
    epi: &EpiParams,
    population: f64,
    days: usize,
    coeffs: &RegionCoeffs,
    schedule: &PolicySchedule,
    residuals: &[f64],
) -> Result<Trajectory> {
    check_horizon(schedule, weeks_for_days(days))?;
    simulate_weekly(init, epi, population, days, |w, states| {
        let lp = linear_predictor(coeffs, &schedule.weeks[w], &lagged_covariates(states, days, w, epi));
        Ok((lp + residuals[w]).exp().min(epi.r0_max))
    })
}

fn check_horizon(schedule: &PolicySchedule, weeks: usize) -> Result<()> {
    if schedule.len() < weeks {
        return Err(Error::Contract(format!(
            "schedule covers {} weeks, horizon needs {weeks}",
            schedule.len()
        )));
    }
    Ok(())
}

/// Fresh residual path `e(w) = phi e(w-1) + eps(w)` with Student-t shocks.
pub fn resampled_residuals(ar: &ArParams, weeks: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = StudentT::new(ar.nu_eps).expect("positive degrees of freedom");
    let mut out = Vec::with_capacity(weeks);
    let mut prev = 0.0;
    for _ in 0..weeks {
        prev = ar.phi * prev + ar.sigma_eps * t.sample(&mut rng);
        out.push(prev);
    }
    out
}

/// Trajectory of one draw under `schedule`.
pub fn simulate_policy(draw: &CounterfactualDraw, schedule: &PolicySchedule, mode: ShockMode) -> Result<Trajectory> {
    let weeks = draw.weeks();
    check_horizon(schedule, weeks)?;
    match mode {
        ShockMode::Retain => {
            // The retained residual is log R0_obs - lp_obs, applied as a ratio
            // so the observed schedule gives back the fitted R0 exactly.
            let days = draw.days;
            simulate_weekly(&draw.init, &draw.epi, draw.population, days, |w, states| {
                let lp = linear_predictor(
                    &draw.coeffs,
                    &schedule.weeks[w],
                    &lagged_covariates(states, days, w, &draw.epi),
                );
                Ok((draw.observed_r0[w] * (lp - draw.observed_lp[w]).exp()).min(draw.epi.r0_max))
            })
        }
        ShockMode::Resample => {
            let residuals = resampled_residuals(&draw.ar, weeks, draw.seed);
            simulate_with_residuals(
                &draw.init,
                &draw.epi,
                draw.population,
                draw.days,
                &draw.coeffs,
                schedule,
                &residuals,
            )
        }
    }
}

/// Trajectories of every draw under `schedule`, in draw order.
pub fn simulate_all(draws: &[CounterfactualDraw], schedule: &PolicySchedule, mode: ShockMode) -> Result<Vec<Trajectory>> {
    draws.par_iter().map(|d| simulate_policy(d, schedule, mode)).collect()
}

/// Mean IFR over a set of draws.
pub fn mean_iota(draws: &[CounterfactualDraw]) -> f64 {
    draws.iter().map(|d| d.epi.iota).sum::<f64>() / draws.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    /// Deaths over the horizon, persons: median and central 90% interval.
    pub deaths_total: Summary,
    pub deaths_total_draws: Vec<f64>,
    /// Daily deaths, persons.
    pub deaths_daily: Vec<Summary>,
    pub infections_total: Summary,
    /// NPI components plus the mean per-capita infection cost.
    pub cost: CostBreakdown,
    /// USD per capita.
    pub expected_cost: f64,
}

/// Summarise trajectories already simulated for `draws` under `schedule`.
pub fn outcome_from_trajectories(
    schedule: &PolicySchedule,
    draws: &[CounterfactualDraw],
    trajectories: &[Trajectory],
    econ: &EconParams,
) -> Result<PolicyOutcome> {
    if draws.is_empty() || draws.len() != trajectories.len() {
        return Err(Error::Contract(format!(
            "{} draws for {} trajectories",
            draws.len(),
            trajectories.len()
        )));
    }
    let c_nu = infection_cost(econ, mean_iota(draws));
    let weeks = draws[0].weeks();
    let horizon = PolicySchedule {
        region_id: schedule.region_id.clone(),
        weeks: schedule.weeks[..weeks].to_vec(),
    };
    let daily: Vec<Vec<f64>> = draws
        .iter()
        .zip(trajectories)
        .map(|(d, t)| t.expected_deaths(&d.epi))
        .collect();
    let totals: Vec<f64> = daily.iter().map(|v| v.iter().sum()).collect();
    let infections: Vec<f64> = trajectories.iter().map(|t| t.total_infections()).collect();
    let infection = draws
        .iter()
        .zip(&infections)
        .map(|(d, n)| c_nu * n / d.population)
        .sum::<f64>()
        / draws.len() as f64;
    let days = daily.iter().map(Vec::len).min().unwrap_or(0);
    let deaths_daily = (0..days)
        .map(|t| Summary::of(&daily.iter().map(|v| v[t]).collect::<Vec<_>>(), 0.9))
        .collect();
    let cost = CostBreakdown {
        infection,
        ..policy_cost(&horizon, econ)
    }
    .finish();
    Ok(PolicyOutcome {
        deaths_total: Summary::of(&totals, 0.9),
        deaths_total_draws: totals,
        deaths_daily,
        infections_total: Summary::of(&infections, 0.9),
        expected_cost: cost.total,
        cost,
    })
}

/// Monte Carlo estimate of the expected cost of `schedule`.
pub fn expected_cost(
    schedule: &PolicySchedule,
    draws: &[CounterfactualDraw],
    econ: &EconParams,
    mode: ShockMode,
) -> Result<PolicyOutcome> {
    if draws.is_empty() {
        return Err(Error::Contract("expected cost needs at least one draw".into()));
    }
    let trajectories = simulate_all(draws, schedule, mode)?;
    outcome_from_trajectories(schedule, draws, &trajectories, econ)
}

/// Expected cost only, for the optimizer's inner loop.
pub fn expected_cost_value(
    schedule: &PolicySchedule,
    draws: &[CounterfactualDraw],
    econ: &EconParams,
    mode: ShockMode,
) -> Result<f64> {
    let c_nu = infection_cost(econ, mean_iota(draws));
    let per_draw: Vec<f64> = draws
        .par_iter()
        .map(|d| simulate_policy(d, schedule, mode).map(|t| c_nu * t.total_infections() / d.population))
        .collect::<Result<_>>()?;
    let weeks = draws[0].weeks();
    let horizon = PolicySchedule {
        region_id: schedule.region_id.clone(),
        weeks: schedule.weeks[..weeks].to_vec(),
    };
    Ok(policy_cost(&horizon, econ).npi() + per_draw.iter().sum::<f64>() / draws.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NamedPolicy {
    #[serde(rename = "OC")]
    Oc,
    Full,
    Obs,
    #[serde(rename = "Obs-school")]
    ObsNoSchool,
    Open,
}

impl NamedPolicy {
    pub const ALL: [NamedPolicy; 5] = [
        NamedPolicy::Oc,
        NamedPolicy::Full,
        NamedPolicy::Obs,
        NamedPolicy::ObsNoSchool,
        NamedPolicy::Open,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NamedPolicy::Oc => "OC",
            NamedPolicy::Full => "Full",
            NamedPolicy::Obs => "Obs",
            NamedPolicy::ObsNoSchool => "Obs-school",
            NamedPolicy::Open => "Open",
        }
    }

    /// The schedule of a fixed policy; `None` for OC, which must be optimized.
    pub fn schedule(self, observed: &PolicySchedule, weeks: usize) -> Option<PolicySchedule> {
        let id = observed.region_id.clone();
        match self {
            NamedPolicy::Oc => None,
            NamedPolicy::Full => Some(PolicySchedule::constant(id, [1.0; NPI_COUNT], weeks)),
            NamedPolicy::Open => Some(PolicySchedule::constant(id, [0.0; NPI_COUNT], weeks)),
            NamedPolicy::Obs => Some(PolicySchedule {
                region_id: id,
                weeks: observed.weeks[..weeks].to_vec(),
            }),
            NamedPolicy::ObsNoSchool => Some(PolicySchedule {
                region_id: id,
                weeks: observed.weeks[..weeks].to_vec(),
            }
            .with_npi_zeroed(Npi::School)),
        }
    }
}

impl std::str::FromStr for NamedPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        NamedPolicy::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == lower || (lower == "obs-noschool" && *p == NamedPolicy::ObsNoSchool))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedOutcome {
    pub policy: NamedPolicy,
    pub schedule: PolicySchedule,
    pub outcome: PolicyOutcome,
}

/// Evaluate OC, Full, Obs, Obs-school and Open on one draw set. OC is
/// optimized with the default configuration when not supplied.
pub fn evaluate_named_policies(
    draws: &[CounterfactualDraw],
    observed: &PolicySchedule,
    econ: &EconParams,
    oc: Option<&PolicySchedule>,
    mode: ShockMode,
) -> Result<Vec<NamedOutcome>> {
    if draws.is_empty() {
        return Err(Error::Contract("no draws to evaluate".into()));
    }
    let weeks = draws[0].weeks();
    check_horizon(observed, weeks)?;
    let oc = match oc {
        Some(s) => s.clone(),
        None => {
            let config = crate::optimizer::OptimizationConfig {
                shock_mode: mode,
                ..Default::default()
            };
            crate::optimizer::optimize(draws, observed, econ, &config)?.schedule
        }
    };
    NamedPolicy::ALL
        .into_iter()
        .map(|p| {
            let schedule = p.schedule(observed, weeks).unwrap_or_else(|| oc.clone());
            let outcome = expected_cost(&schedule, draws, econ, mode)?;
            Ok(NamedOutcome {
                policy: p,
                schedule,
                outcome,
            })
        })
        .collect()
}
