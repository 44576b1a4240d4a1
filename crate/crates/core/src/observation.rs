//! Zero-inflated negative-binomial observation model for daily deaths and
//! confirmed cases.
//!
//! A reported zero may be a misreport, in which case that day's events are
//! carried forward to the next day with a positive report. The adjusted mean
//! of a positive day after a run of `k - 1` zeros is
//! `sum_{j<k} raw[t - j] * theta^j`; zero days keep their raw means.

use serde::{Deserialize, Serialize};

use crate::epi::{weeks_for_days, EpiParams, Trajectory, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::stats::{nb2_log_pmf, poisson_log_pmf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZinbParams {
    /// Probability that a day is misreported as zero.
    pub theta: f64,
    /// Dispersion scale.
    pub kappa: f64,
    /// Mixes linear (0) and quadratic (1) mean-variance relations.
    pub zeta: f64,
}

impl ZinbParams {
    pub fn new(theta: f64, kappa: f64, zeta: f64) -> Result<Self> {
        let p = Self { theta, kappa, zeta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta)
            || !(0.0..=1.0).contains(&self.zeta)
            || !(self.kappa > 0.0 && self.kappa.is_finite())
        {
            return Err(Error::InvalidParameter(format!("invalid ZINB parameters {self:?}")));
        }
        Ok(())
    }

    /// NB2 size at mean `m`, giving variance `m + m (zeta m + 1 - zeta) / kappa`.
    pub fn size(&self, m: f64) -> f64 {
        m * self.kappa / (self.zeta * m + 1.0 - self.zeta)
    }

    /// Variance of the negative-binomial component at mean `m`.
    pub fn nb_variance(&self, m: f64) -> f64 {
        m + m * (self.zeta * m + 1.0 - self.zeta) / self.kappa
    }
}

pub fn zinb_log_pmf(d: u64, m: f64, params: &ZinbParams) -> f64 {
    let theta = params.theta;
    if m <= 0.0 {
        return if d == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let nb = nb2_log_pmf(d, m, params.size(m));
    if d == 0 {
        if theta <= 0.0 {
            nb
        } else {
            // ln(theta + (1 - theta) e^nb)
            let a = theta.ln();
            let b = (-theta).ln_1p() + nb;
            let hi = a.max(b);
            hi + ((a - hi).exp() + (b - hi).exp()).ln()
        }
    } else if theta >= 1.0 {
        f64::NEG_INFINITY
    } else {
        (-theta).ln_1p() + nb
    }
}

/// Means after folding each zero run into the following positive day.
pub fn misreport_adjusted_means(raw: &[f64], theta: f64, reported_positive: &[bool]) -> Vec<f64> {
    assert_eq!(raw.len(), reported_positive.len());
    let mut out = Vec::with_capacity(raw.len());
    let mut carry = 0.0;
    for (m, &positive) in raw.iter().zip(reported_positive) {
        let acc = m + theta * carry;
        if positive {
            out.push(acc);
            carry = 0.0;
        } else {
            out.push(*m);
            carry = acc;
        }
    }
    out
}

/// ZINB log-likelihood of a count series given raw daily means.
pub fn count_loglik(raw: &[f64], counts: &[u64], params: &ZinbParams) -> f64 {
    debug_assert_eq!(raw.len(), counts.len());
    let mut carry = 0.0;
    let mut total = 0.0;
    for (m, &c) in raw.iter().zip(counts) {
        let acc = m + params.theta * carry;
        if c > 0 {
            total += zinb_log_pmf(c, acc, params);
            carry = 0.0;
        } else {
            total += zinb_log_pmf(0, *m, params);
            carry = acc;
        }
    }
    total
}

/// Expected deaths per day, `N mu R_D(t)`, over the first `days` days.
pub fn raw_death_means(traj: &Trajectory, mu: f64, days: usize) -> Vec<f64> {
    traj.states[..days]
        .iter()
        .map(|s| traj.population * mu * s.r_d)
        .collect()
}

pub fn deaths_loglik(
    traj: &Trajectory,
    deaths: &[u64],
    prior_cumulative_deaths: u64,
    params: &ZinbParams,
    mu: f64,
) -> Result<f64> {
    if traj.days() != deaths.len() {
        return Err(Error::Contract(format!(
            "trajectory covers {} days but the death series has {}",
            traj.days(),
            deaths.len()
        )));
    }
    let raw = raw_death_means(traj, mu, deaths.len());
    let s0 = &traj.states[0];
    let prior_mean = traj.population * (s0.r_d + s0.d);
    Ok(count_loglik(&raw, deaths, params) + poisson_log_pmf(prior_cumulative_deaths, prior_mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseModelState {
    /// Infections awaiting confirmation (persons).
    pub i_c: f64,
    /// Daily confirmation rate.
    pub tau: f64,
    /// Case ascertainment rate for each week.
    pub car_by_week: Vec<f64>,
    pub sigma2_car: f64,
}

impl CaseModelState {
    pub fn expected_cases(&self) -> f64 {
        self.tau * self.i_c
    }
}

pub fn confirmation_step(state: &CaseModelState, nu: f64, car: f64) -> CaseModelState {
    CaseModelState {
        i_c: state.i_c * (1.0 - state.tau) + car * nu,
        ..state.clone()
    }
}

/// Raw expected confirmed cases per day from the confirmation compartment.
pub fn raw_case_means(traj: &Trajectory, init: &CaseModelState, days: usize) -> Result<Vec<f64>> {
    if !(init.tau > 0.0 && init.tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("tau must lie in (0,1], got {}", init.tau)));
    }
    if init.car_by_week.len() < weeks_for_days(days) {
        return Err(Error::Contract(format!(
            "{days} days need {} weekly CAR values, got {}",
            weeks_for_days(days),
            init.car_by_week.len()
        )));
    }
    let mut out = Vec::with_capacity(days);
    let mut i_c = init.i_c;
    for t in 0..days {
        if t > 0 {
            let car = init.car_by_week[t / DAYS_PER_WEEK];
            i_c = i_c * (1.0 - init.tau) + car * traj.new_infections[t];
        }
        out.push(init.tau * i_c);
    }
    Ok(out)
}

pub fn cases_loglik(
    traj: &Trajectory,
    init: &CaseModelState,
    cases: &[u64],
    params: &ZinbParams,
) -> Result<f64> {
    if traj.days() != cases.len() {
        return Err(Error::Contract(format!(
            "trajectory covers {} days but the case series has {}",
            traj.days(),
            cases.len()
        )));
    }
    let raw = raw_case_means(traj, init, cases.len())?;
    Ok(count_loglik(&raw, cases, params))
}

/// Bounds `[lo, hi]` of the confirmation-delay prior in days, with its mean
/// and standard deviation.
pub fn confirmation_delay_prior(params: &EpiParams) -> (f64, f64, f64, f64) {
    let mean = params.tau_d - params.report_to_death_mean;
    let lo = mean - 1.96 * params.report_to_death_sd;
    (lo, params.tau_d, mean, params.report_to_death_sd)
}
