//! Infections averted and standardized cost-effectiveness ratios.
//!
//! SICER compares the monetized infections a policy averts relative to
//! the open policy with what the policy costs over the same window. A
//! value above 1 means the policy pays for itself there.

use serde::{Deserialize, Serialize};

use crate::cost::{infection_cost, weekly_policy_costs, EconParams};
use crate::counterfactual::{mean_iota, simulate_all, CounterfactualDraw, ShockMode};
use crate::epi::{Trajectory, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::ingest::PolicySchedule;
use crate::npi::NPI_COUNT;
use crate::stats::Summary;

/// Which trajectory supplies `I(t)` in the averted-infection formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevalenceSource {
    #[default]
    Policy,
    Open,
}

/// `nu_a(t) = N I(t) (Re_open(t) - Re_policy(t))`.
pub fn infections_averted_with(
    policy: &Trajectory,
    open: &Trajectory,
    population: f64,
    source: PrevalenceSource,
) -> Result<Vec<f64>> {
    if policy.days() != open.days() || policy.re.len() != open.re.len() {
        return Err(Error::Contract(format!(
            "trajectories span {} and {} days",
            policy.days(),
            open.days()
        )));
    }
    let prevalence = match source {
        PrevalenceSource::Policy => policy,
        PrevalenceSource::Open => open,
    };
    Ok((0..policy.days())
        .map(|t| population * prevalence.states[t].i * (open.re[t] - policy.re[t]))
        .collect())
}

pub fn infections_averted(policy: &Trajectory, open: &Trajectory, population: f64) -> Result<Vec<f64>> {
    infections_averted_with(policy, open, population, PrevalenceSource::Policy)
}

/// NPI cost per capita on each day, spreading each week's cost evenly.
pub fn daily_npi_costs(schedule: &PolicySchedule, econ: &EconParams, days: usize) -> Vec<f64> {
    let weekly = weekly_policy_costs(schedule, econ);
    (0..days)
        .map(|t| weekly.get(t / DAYS_PER_WEEK).map_or(0.0, |c| c.npi() / DAYS_PER_WEEK as f64))
        .collect()
}

/// Ratios over the inclusive day window `(t1, t2)` for one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SicerSeries {
    pub window: (usize, usize),
    /// Infections averted per day across the whole horizon.
    pub nu_averted: Vec<f64>,
    pub sicer: f64,
    /// USD per infection averted.
    pub icer: f64,
}

/// `sum c_nu nu_a / (c_NPI N)` over a window, from daily inputs.
pub fn sicer_ratio(
    nu_averted: &[f64],
    daily_cost: &[f64],
    c_nu: f64,
    population: f64,
    window: (usize, usize),
) -> Result<(f64, f64)> {
    let (t1, t2) = window;
    if t1 > t2 || t2 >= nu_averted.len() || t2 >= daily_cost.len() {
        return Err(Error::Contract(format!(
            "window ({t1}, {t2}) outside a {}-day horizon",
            nu_averted.len().min(daily_cost.len())
        )));
    }
    let averted: f64 = nu_averted[t1..=t2].iter().sum();
    let spent = daily_cost[t1..=t2].iter().sum::<f64>() * population;
    if !(spent > 0.0) {
        return Err(Error::UndefinedRatio);
    }
    Ok((c_nu * averted / spent, spent / averted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SicerSummary {
    pub window: (usize, usize),
    pub per_draw: Vec<SicerSeries>,
    pub sicer: Summary,
    /// USD per infection averted.
    pub icer: Summary,
    /// USD per death averted, using the mean IFR of the draws.
    pub icer_per_death: Summary,
    /// `SICER(0, t)` at the end of each week.
    pub cumulative: Vec<Option<Summary>>,
    /// SICER of each single week under the policy run over all weeks.
    pub weekly: Vec<Option<Summary>>,
}

/// SICER of `schedule` against Open over `window`, plus its cumulative
/// and weekly forms.
pub fn sicer(
    schedule: &PolicySchedule,
    draws: &[CounterfactualDraw],
    econ: &EconParams,
    window: (usize, usize),
    mode: ShockMode,
    source: PrevalenceSource,
) -> Result<SicerSummary> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Contract("SICER needs at least one draw".into()))?;
    let days = first.days;
    let weeks = first.weeks();
    if schedule.len() < weeks {
        return Err(Error::Contract(format!(
            "schedule covers {} weeks, horizon needs {weeks}",
            schedule.len()
        )));
    }
    let open = PolicySchedule::constant(schedule.region_id.clone(), [0.0; NPI_COUNT], weeks);
    let with = simulate_all(draws, schedule, mode)?;
    let without = simulate_all(draws, &open, mode)?;
    let daily_cost = daily_npi_costs(schedule, econ, days);
    let iota = mean_iota(draws);
    let c_nu = infection_cost(econ, iota);

    let averted = draws
        .iter()
        .zip(with.iter().zip(&without))
        .map(|(d, (p, o))| infections_averted_with(p, o, d.population, source))
        .collect::<Result<Vec<_>>>()?;
    let per_draw = draws
        .iter()
        .zip(&averted)
        .map(|(d, nu)| {
            let (s, i) = sicer_ratio(nu, &daily_cost, c_nu, d.population, window)?;
            Ok(SicerSeries {
                window,
                nu_averted: nu.clone(),
                sicer: s,
                icer: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summarize = |w: (usize, usize)| -> Option<Summary> {
        let values: Option<Vec<f64>> = draws
            .iter()
            .zip(&averted)
            .map(|(d, nu)| sicer_ratio(nu, &daily_cost, c_nu, d.population, w).ok().map(|r| r.0))
            .collect();
        values.map(|v| Summary::of(&v, 0.9))
    };
    let week_end = |w: usize| ((w + 1) * DAYS_PER_WEEK).min(days) - 1;
    let cumulative = (0..weeks).map(|w| summarize((0, week_end(w)))).collect();
    let weekly = (0..weeks).map(|w| summarize((w * DAYS_PER_WEEK, week_end(w)))).collect();
    let sicers: Vec<f64> = per_draw.iter().map(|s| s.sicer).collect();
    let icers: Vec<f64> = per_draw.iter().map(|s| s.icer).collect();
    let per_death: Vec<f64> = icers.iter().map(|i| i / iota).collect();
    Ok(SicerSummary {
        window,
        sicer: Summary::of(&sicers, 0.9),
        icer: Summary::of(&icers, 0.9),
        icer_per_death: Summary::of(&per_death, 0.9),
        per_draw,
        cumulative,
        weekly,
    })
}
