//! Discrete-time SEIRD dynamics driven by a weekly basic reproduction number.
//!
//! Compartments are population fractions. One call to [`step`] advances one
//! day with a forward-Euler update; [`simulate`] holds R0 constant within
//! each week and converts it to a transmission rate with `beta = gamma * R0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_WEEK: usize = 7;

/// Upper bound on the share of the population infected before day 0.
pub const INITIAL_INFECTED_BOUND: f64 = 0.05;

const NEGATIVE_TOLERANCE: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompartmentState {
    pub s: f64,
    pub e: f64,
    pub i: f64,
    pub r_s: f64,
    pub r_d: f64,
    pub d: f64,
}

impl CompartmentState {
    pub const NAMES: [&'static str; 6] = ["S", "E", "I", "R_S", "R_D", "D"];

    pub fn fully_susceptible() -> Self {
        Self {
            s: 1.0,
            e: 0.0,
            i: 0.0,
            r_s: 0.0,
            r_d: 0.0,
            d: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.s, self.e, self.i, self.r_s, self.r_d, self.d]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            s: a[0],
            e: a[1],
            i: a[2],
            r_s: a[3],
            r_d: a[4],
            d: a[5],
        }
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }

    fn check(&self, day: usize) -> Result<()> {
        for (value, name) in self.as_array().into_iter().zip(Self::NAMES) {
            if !(value >= NEGATIVE_TOLERANCE) {
                return Err(Error::Dynamics {
                    day,
                    compartment: name,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Biological constants. Durations are in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    /// Mean latent period.
    pub delta_inv: f64,
    /// Mean infectious period.
    pub gamma_inv: f64,
    /// Mean time from removal to death.
    pub mu_inv: f64,
    /// Infection fatality rate.
    pub iota: f64,
    pub r0_max: f64,
    /// Mean time from exposure to death.
    pub tau_d: f64,
    pub report_to_death_mean: f64,
    pub report_to_death_sd: f64,
}

impl Default for EpiParams {
    fn default() -> Self {
        Self {
            delta_inv: 5.5,
            gamma_inv: 5.0,
            mu_inv: 10.5,
            iota: 0.0068,
            r0_max: 6.5,
            tau_d: 21.0,
            report_to_death_mean: 8.053,
            report_to_death_sd: 4.116,
        }
    }
}

impl EpiParams {
    pub fn with_iota(self, iota: f64) -> Self {
        Self { iota, ..self }
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.delta_inv
    }

    pub fn gamma(&self) -> f64 {
        1.0 / self.gamma_inv
    }

    pub fn mu(&self) -> f64 {
        1.0 / self.mu_inv
    }

    pub fn beta_max(&self) -> f64 {
        self.gamma() * self.r0_max
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.delta_inv,
            self.gamma_inv,
            self.mu_inv,
            self.r0_max,
            self.tau_d,
            self.report_to_death_mean,
            self.report_to_death_sd,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(
                "epidemiological durations and r0_max must be positive".into(),
            ));
        }
        if !(self.iota > 0.0 && self.iota < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "iota must lie in (0,1), got {}",
                self.iota
            )));
        }
        let implied = self.delta_inv + self.gamma_inv + self.mu_inv;
        if (implied - self.tau_d).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "tau_D = {} but latent + infectious + removal-to-death = {implied}",
                self.tau_d
            )));
        }
        Ok(())
    }
}

/// A simulated path. `states` has one more entry than there are days: the
/// state at the start of each day plus the state after the final day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub population: f64,
    pub states: Vec<CompartmentState>,
    /// New infections (persons) on each day.
    pub new_infections: Vec<f64>,
    pub r0: Vec<f64>,
    /// Effective reproduction number on each day.
    pub re: Vec<f64>,
}

impl Trajectory {
    pub fn days(&self) -> usize {
        self.new_infections.len()
    }

    pub fn weeks(&self) -> usize {
        self.r0.len()
    }

    pub fn final_state(&self) -> &CompartmentState {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Expected deaths (persons) on each day, `N * mu * R_D(t)`.
    pub fn expected_deaths(&self, params: &EpiParams) -> Vec<f64> {
        let mu = params.mu();
        self.states[..self.days()]
            .iter()
            .map(|s| self.population * mu * s.r_d)
            .collect()
    }

    pub fn total_infections(&self) -> f64 {
        self.new_infections.iter().sum()
    }

    /// Write `day,S,E,I,R_S,R_D,D,nu,Re` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["day", "S", "E", "I", "R_S", "R_D", "D", "nu", "Re"])?;
        for t in 0..self.days() {
            let s = &self.states[t];
            let mut row = vec![t.to_string()];
            row.extend(s.as_array().iter().map(|v| v.to_string()));
            row.push(self.new_infections[t].to_string());
            row.push(self.re[t].to_string());
            w.write_record(&row)?;
        }
        w.flush()
    }
}

pub fn week_of_day(day: usize) -> usize {
    day / DAYS_PER_WEEK
}

pub fn weeks_for_days(days: usize) -> usize {
    days.div_ceil(DAYS_PER_WEEK)
}

/// Advance one day.
pub fn step(state: &CompartmentState, beta: f64, params: &EpiParams) -> Result<CompartmentState> {
    step_on_day(state, beta, params, 0)
}

fn step_on_day(
    state: &CompartmentState,
    beta: f64,
    params: &EpiParams,
    day: usize,
) -> Result<CompartmentState> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must be nonnegative, got {beta}"
        )));
    }
    let exposure = beta * state.s * state.i;
    let onset = params.delta() * state.e;
    let removal = params.gamma() * state.i;
    let death = params.mu() * state.r_d;
    let next = CompartmentState {
        s: state.s - exposure,
        e: state.e + exposure - onset,
        i: state.i + onset - removal,
        r_s: state.r_s + (1.0 - params.iota) * removal,
        r_d: state.r_d + params.iota * removal - death,
        d: state.d + death,
    };
    next.check(day + 1)?;
    Ok(next)
}

/// Run the dynamics for `days` days. `r0_by_week` must cover every week
/// touched by the horizon.
pub fn simulate(
    init: &CompartmentState,
    r0_by_week: &[f64],
    params: &EpiParams,
    population: f64,
    days: usize,
) -> Result<Trajectory> {
    let weeks = weeks_for_days(days);
    if r0_by_week.len() < weeks {
        return Err(Error::Contract(format!(
            "{days} days need {weeks} weekly R0 values, got {}",
            r0_by_week.len()
        )));
    }
    simulate_weekly(init, params, population, days, |w, _| Ok(r0_by_week[w]))
}

/// Run the dynamics choosing each week's R0 at the start of that week.
/// `r0_for_week(w, states)` sees every state up to the first day of week `w`.
pub fn simulate_weekly<F>(
    init: &CompartmentState,
    params: &EpiParams,
    population: f64,
    days: usize,
    mut r0_for_week: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &[CompartmentState]) -> Result<f64>,
{
    let weeks = weeks_for_days(days);
    let gamma = params.gamma();
    let mut states = Vec::with_capacity(days + 1);
    let mut new_infections = Vec::with_capacity(days);
    let mut re = Vec::with_capacity(days);
    let mut r0_path = Vec::with_capacity(weeks);
    let mut state = *init;
    states.push(state);
    for t in 0..days {
        let w = week_of_day(t);
        if w == r0_path.len() {
            let r0 = r0_for_week(w, &states)?;
            if !(r0 >= 0.0 && r0 <= params.r0_max) {
                return Err(Error::InvalidParameter(format!(
                    "R0 {r0} outside [0, {}]",
                    params.r0_max
                )));
            }
            r0_path.push(r0);
        }
        let r0 = r0_path[w];
        let beta = gamma * r0;
        new_infections.push(population * beta * state.s * state.i);
        re.push(state.s * r0);
        state = step_on_day(&state, beta, params, t)?;
        states.push(state);
    }
    Ok(Trajectory {
        population,
        states,
        new_infections,
        r0: r0_path,
        re,
    })
}

/// Map a point on the 5-simplex `(S, E, I, R, D)` to an initial state, with
/// at most a fraction `p` of the population outside S.
pub fn initial_state(x0: &[f64; 5], p: f64, iota: f64) -> Result<CompartmentState> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("p must lie in (0,1), got {p}")));
    }
    if !(iota >= 0.0 && iota <= 1.0) {
        return Err(Error::InvalidParameter(format!("iota must lie in [0,1], got {iota}")));
    }
    let sum: f64 = x0.iter().sum();
    if x0.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "x0 must lie on the simplex, got {x0:?}"
        )));
    }
    let [xs, xe, xi, xr, xd] = *x0;
    Ok(CompartmentState {
        s: (1.0 - p) + p * xs,
        e: p * xe,
        i: p * xi,
        r_s: p * (xr + xd) * (1.0 - iota),
        r_d: p * xr * iota,
        d: p * xd * iota,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> EpiParams {
        EpiParams::default().with_iota(0.01)
    }

    #[test]
    fn default_params_are_consistent() {
        EpiParams::default().validate().unwrap();
        let bad = EpiParams {
            tau_d: 20.0,
            ..EpiParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_infectious_mass_is_a_fixed_point() {
        let s = CompartmentState {
            s: 0.7,
            e: 0.0,
            i: 0.0,
            r_s: 0.3,
            r_d: 0.0,
            d: 0.0,
        };
        assert_eq!(step(&s, 1.0, &params()).unwrap(), s);
    }

    #[test]
    fn zero_beta_only_drains_exposed() {
        let s = CompartmentState {
            s: 0.99,
            e: 0.01,
            i: 0.0,
            r_s: 0.0,
            r_d: 0.0,
            d: 0.0,
        };
        let n = step(&s, 0.0, &params()).unwrap();
        assert_eq!(n.s, 0.99);
        assert_abs_diff_eq!(n.e, 0.01 * (1.0 - 1.0 / 5.5), epsilon = 1e-15);
        assert_abs_diff_eq!(n.i, 0.01 / 5.5, epsilon = 1e-15);
    }

    #[test]
    fn hand_computed_step() {
        let s = CompartmentState {
            s: 0.9,
            e: 0.0,
            i: 0.01,
            r_s: 0.0,
            r_d: 0.0,
            d: 0.09,
        };
        let n = step(&s, 0.4, &params()).unwrap();
        assert_abs_diff_eq!(n.s, 0.8964, epsilon = 1e-15);
        assert_abs_diff_eq!(n.e, 0.0036, epsilon = 1e-15);
        assert_abs_diff_eq!(n.i, 0.008, epsilon = 1e-15);
    }

    #[test]
    fn negative_beta_rejected() {
        assert!(step(&CompartmentState::fully_susceptible(), -0.1, &params()).is_err());
    }

    #[test]
    fn oversized_beta_is_a_dynamics_error() {
        let s = CompartmentState {
            s: 0.5,
            e: 0.0,
            i: 0.5,
            r_s: 0.0,
            r_d: 0.0,
            d: 0.0,
        };
        match step(&s, 5.0, &params()) {
            Err(Error::Dynamics { compartment, .. }) => assert_eq!(compartment, "S"),
            other => panic!("expected dynamics error, got {other:?}"),
        }
    }

    #[test]
    fn zero_r0_keeps_susceptibles_constant() {
        let init = initial_state(&[0.5, 0.25, 0.25, 0.0, 0.0], 0.01, 0.01).unwrap();
        let traj = simulate(&init, &[0.0; 10], &params(), 1e6, 70).unwrap();
        assert!(traj.states.iter().all(|s| s.s == init.s));
        assert_eq!(traj.total_infections(), 0.0);
    }

    #[test]
    fn subcritical_prevalence_decays() {
        let init = initial_state(&[0.0, 0.0, 1.0, 0.0, 0.0], 0.001, 0.01).unwrap();
        let traj = simulate(&init, &[0.5; 30], &params(), 1e6, 210).unwrap();
        let i: Vec<f64> = traj.states.iter().map(|s| s.i).collect();
        // I may rise briefly while E fills; after E peaks it must fall monotonically.
        let peak = i
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(i[peak..].windows(2).all(|w| w[1] <= w[0]));
        assert!(*i.last().unwrap() < i[0] * 1e-3);
    }

    #[test]
    fn deaths_match_ifr_over_long_horizon() {
        let p = params();
        let init = initial_state(&[0.0, 0.5, 0.5, 0.0, 0.0], 0.001, p.iota).unwrap();
        let n = 1e6;
        let traj = simulate(&init, &vec![2.0; 143], &p, n, 1000).unwrap();
        let ever_infected = traj.total_infections() + n * (init.e + init.i);
        let deaths = traj.final_state().d * n;
        let rel = (deaths - p.iota * ever_infected).abs() / (p.iota * ever_infected);
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn effective_reproduction_number_is_s_times_r0() {
        let init = initial_state(&[0.2, 0.2, 0.2, 0.2, 0.2], 0.05, 0.01).unwrap();
        let r0 = [2.5, 1.5, 0.9];
        let traj = simulate(&init, &r0, &params(), 5e5, 21).unwrap();
        for t in 0..21 {
            assert_eq!(traj.re[t], traj.states[t].s * r0[week_of_day(t)]);
        }
    }

    #[test]
    fn r0_out_of_range_rejected() {
        let init = CompartmentState::fully_susceptible();
        assert!(simulate(&init, &[7.0], &params(), 1.0, 7).is_err());
        assert!(simulate(&init, &[1.0], &params(), 1.0, 8).is_err());
    }

    #[test]
    fn initial_state_examples() {
        let s = initial_state(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.05, 0.01).unwrap();
        assert_eq!(s, CompartmentState::fully_susceptible());

        let s = initial_state(&[0.0, 0.0, 0.0, 1.0, 0.0], 0.05, 0.01).unwrap();
        assert_abs_diff_eq!(s.r_s, 0.0495, epsilon = 1e-15);
        assert_abs_diff_eq!(s.r_d, 0.0005, epsilon = 1e-15);
        assert_abs_diff_eq!(s.total(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let init = initial_state(&[0.9, 0.05, 0.05, 0.0, 0.0], 0.01, 0.01).unwrap();
        let traj = simulate(&init, &[2.0], &params(), 1e4, 3).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "day,S,E,I,R_S,R_D,D,nu,Re");
        assert_eq!(lines.len(), 4);
    }
}
