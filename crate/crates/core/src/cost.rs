//! Dollar costs of infections and of NPI schedules, per capita, USD 2020.
//! No temporal discounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PolicySchedule;
use crate::npi::{Npi, PolicyVector};

pub const WEEKS_PER_YEAR: f64 = 52.0;
/// School weeks in a year once the 16 weeks of regular break are removed.
pub const SCHOOL_WEEKS_PER_YEAR: f64 = 36.0;
/// Closure weeks that cost no learning (the usual annual break).
pub const FREE_CLOSURE_WEEKS: f64 = 16.0;
/// Largest learning loss a closure can cause, in school-years.
pub const MAX_LEARNING_LOSS_YEARS: f64 = 0.35;
/// Weeks past the free threshold over which weekly learning loss falls
/// linearly to zero.
pub const LEARNING_DECAY_WEEKS: f64 = 24.2;
/// Learning loss for which the GDP fractions are quoted, in school-years.
pub const LEARNING_LOSS_REFERENCE_YEARS: f64 = 0.33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
}

/// Scenario selectors for the uncertain cost inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EconScenario {
    pub vscd: Level,
    pub learning: Level,
    pub workplace: Level,
}

impl Default for EconScenario {
    fn default() -> Self {
        Self {
            vscd: Level::Low,
            learning: Level::Low,
            workplace: Level::Mid,
        }
    }
}

impl EconScenario {
    pub fn validate(&self) -> Result<()> {
        if self.vscd == Level::Mid || self.learning == Level::Mid {
            return Err(Error::InvalidParameter(
                "vscd and learning scenarios are low or high".into(),
            ));
        }
        Ok(())
    }

    /// Every combination of the selectors.
    pub fn grid() -> Vec<EconScenario> {
        let mut out = Vec::with_capacity(12);
        for vscd in [Level::Low, Level::High] {
            for learning in [Level::Low, Level::High] {
                for workplace in [Level::Low, Level::Mid, Level::High] {
                    out.push(EconScenario {
                        vscd,
                        learning,
                        workplace,
                    });
                }
            }
        }
        out
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: EconScenario = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn label(&self) -> String {
        let l = |x: Level| match x {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        };
        format!("vscd-{}_learning-{}_workplace-{}", l(self.vscd), l(self.learning), l(self.workplace))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconParams {
    /// Value of a statistical COVID death.
    pub vscd: f64,
    pub medical_cost: f64,
    /// Annual median personal income.
    pub median_income: f64,
    pub gdp_per_capita: f64,
    /// GDP fraction lost per 0.33 school-years of learning loss.
    pub learning_loss_gdp_frac: f64,
    /// GDP fraction lost to absenteeism per four weeks of closure.
    pub school_direct_gdp_frac: f64,
    pub workplace_emp_drop: f64,
    pub distancing_emp_drop: f64,
    pub mask_daily: f64,
    pub test_cost: f64,
    pub trace_cost_per_case: f64,
    /// Tracing capacity gained per week of tracing, cases per 100k per week.
    pub trace_ramp: f64,
    /// Daily testing capacity gained per day of testing, tests per million.
    pub test_ramp: f64,
    /// Employment drop per one-per-thousand rise in prevalence.
    pub fear_emp_drop_per_milli_prev: f64,
    /// Days an infection keeps a worker out (the infectious period).
    pub infectious_days: f64,
}

impl Default for EconParams {
    fn default() -> Self {
        Self::for_scenario(&EconScenario::default())
    }
}

impl EconParams {
    pub const VSCD_LOW: f64 = 4.47e6;
    pub const VSCD_HIGH: f64 = 10.63e6;
    pub const US_MEDIAN_INCOME: f64 = 35_980.0;
    pub const US_GDP_PER_CAPITA: f64 = 65_300.0;

    pub fn for_scenario(s: &EconScenario) -> Self {
        Self {
            vscd: match s.vscd {
                Level::High => Self::VSCD_HIGH,
                _ => Self::VSCD_LOW,
            },
            medical_cost: 3045.0,
            median_income: Self::US_MEDIAN_INCOME,
            gdp_per_capita: Self::US_GDP_PER_CAPITA,
            learning_loss_gdp_frac: match s.learning {
                Level::High => 0.69,
                _ => 0.09,
            },
            school_direct_gdp_frac: 0.002,
            workplace_emp_drop: match s.workplace {
                Level::Low => 0.02,
                Level::Mid => 0.04,
                Level::High => 0.06,
            },
            distancing_emp_drop: 0.04,
            mask_daily: 0.32,
            test_cost: 100.0,
            trace_cost_per_case: 66.50,
            trace_ramp: 4.72,
            test_ramp: 20.0,
            fear_emp_drop_per_milli_prev: 0.0042,
            infectious_days: 5.0,
        }
    }

    /// Same regional inputs under another scenario.
    pub fn with_scenario(&self, s: &EconScenario) -> Self {
        let base = Self::for_scenario(s);
        Self {
            vscd: base.vscd,
            learning_loss_gdp_frac: base.learning_loss_gdp_frac,
            workplace_emp_drop: base.workplace_emp_drop,
            ..self.clone()
        }
    }

    /// Median income scaled by the ratio of regional to national per capita
    /// income.
    pub fn with_regional_income(mut self, regional_per_capita: f64, national_per_capita: f64) -> Self {
        self.median_income = Self::US_MEDIAN_INCOME * regional_per_capita / national_per_capita;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vscd,
            self.medical_cost,
            self.median_income,
            self.gdp_per_capita,
            self.learning_loss_gdp_frac,
            self.school_direct_gdp_frac,
            self.workplace_emp_drop,
            self.distancing_emp_drop,
            self.mask_daily,
            self.test_cost,
            self.trace_cost_per_case,
            self.trace_ramp,
            self.test_ramp,
            self.fear_emp_drop_per_milli_prev,
            self.infectious_days,
        ];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter("economic parameters must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn weekly_income(&self) -> f64 {
        self.median_income / WEEKS_PER_YEAR
    }

    /// Cost of voluntary distancing per infection.
    pub fn fear_cost(&self) -> f64 {
        self.fear_emp_drop_per_milli_prev * 1000.0 * self.median_income * self.infectious_days / 365.0
    }
}

/// Average cost of one infection given the posterior mean IFR.
pub fn infection_cost(econ: &EconParams, iota_mean: f64) -> f64 {
    econ.vscd * iota_mean + econ.medical_cost + econ.weekly_income() + econ.fear_cost()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub infection: f64,
    pub school: f64,
    pub workplace: f64,
    pub distancing: f64,
    pub mask: f64,
    pub test: f64,
    pub trace: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn npi(&self) -> f64 {
        self.school + self.workplace + self.distancing + self.mask + self.test + self.trace
    }

    /// Recompute `total` from the parts.
    pub fn finish(mut self) -> Self {
        self.total = self.infection + self.npi();
        self
    }

    pub fn add(&self, other: &CostBreakdown) -> CostBreakdown {
        CostBreakdown {
            infection: self.infection + other.infection,
            school: self.school + other.school,
            workplace: self.workplace + other.workplace,
            distancing: self.distancing + other.distancing,
            mask: self.mask + other.mask,
            test: self.test + other.test,
            trace: self.trace + other.trace,
            total: 0.0,
        }
        .finish()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SchoolClosureLedger {
    /// Weighted closure weeks so far, `sum u_school`.
    pub cumulative_closure_weeks: f64,
    /// Learning loss accrued so far, school-weeks.
    pub accrued_loss_weeks: f64,
}

impl SchoolClosureLedger {
    pub fn accrued_loss_years(&self) -> f64 {
        self.accrued_loss_weeks / SCHOOL_WEEKS_PER_YEAR
    }
}

/// Integral over `[a, b]` (weeks past the free threshold) of the weekly
/// learning-loss rate, which is `1 - n / K` throughout the `n`-th week past
/// the threshold and zero once that is negative.
fn learning_rate_integral(a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    let mut x = a;
    while x < b {
        let n = x.floor();
        let rate = 1.0 - n / LEARNING_DECAY_WEEKS;
        if rate <= 0.0 {
            break;
        }
        let end = (n + 1.0).min(b);
        total += rate * (end - x);
        x = end;
    }
    total
}

/// Cost of one week of school closure at strength `u` and the updated ledger.
pub fn school_cost_week(u: f64, ledger: &SchoolClosureLedger, econ: &EconParams) -> (f64, SchoolClosureLedger) {
    let direct = econ.school_direct_gdp_frac / 4.0 * econ.gdp_per_capita * u;
    let before = ledger.cumulative_closure_weeks;
    let after = before + u;
    let raw = learning_rate_integral((before - FREE_CLOSURE_WEEKS).max(0.0), (after - FREE_CLOSURE_WEEKS).max(0.0));
    let cap = MAX_LEARNING_LOSS_YEARS * SCHOOL_WEEKS_PER_YEAR;
    let loss_weeks = raw.min((cap - ledger.accrued_loss_weeks).max(0.0));
    let loss_years = loss_weeks / SCHOOL_WEEKS_PER_YEAR;
    let learning = econ.gdp_per_capita * econ.learning_loss_gdp_frac * loss_years / LEARNING_LOSS_REFERENCE_YEARS;
    (
        direct + learning,
        SchoolClosureLedger {
            cumulative_closure_weeks: after,
            accrued_loss_weeks: ledger.accrued_loss_weeks + loss_weeks,
        },
    )
}

pub fn workplace_cost_week(u: f64, econ: &EconParams) -> f64 {
    econ.workplace_emp_drop * u * econ.weekly_income()
}

/// Cost of the six-measure distancing bundle, priced by its mean strength.
pub fn distancing_cost_week(u_six: &[f64; 6], econ: &EconParams) -> f64 {
    let mean = u_six.iter().sum::<f64>() / 6.0;
    econ.distancing_emp_drop * mean * econ.weekly_income()
}

/// Policy-weeks of testing and tracing before the current week.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RampLedger {
    pub test_weeks: f64,
    pub trace_weeks: f64,
}

/// `(mask, test, trace)` costs for one week and the updated ledger.
pub fn mask_test_trace_cost_week(
    u_mask: f64,
    u_test: f64,
    u_trace: f64,
    ledger: &RampLedger,
    econ: &EconParams,
) -> ((f64, f64, f64), RampLedger) {
    let mask = econ.mask_daily * 7.0 * u_mask;
    let tests_per_capita = 49.0 * econ.test_ramp * ledger.test_weeks / 1e6;
    let test = econ.test_cost * tests_per_capita * u_test;
    let traced_per_capita = econ.trace_ramp * ledger.trace_weeks / 1e5;
    let trace = econ.trace_cost_per_case * traced_per_capita * u_trace;
    (
        (mask, test, trace),
        RampLedger {
            test_weeks: ledger.test_weeks + u_test,
            trace_weeks: ledger.trace_weeks + u_trace,
        },
    )
}

fn distancing_six(u: &PolicyVector) -> [f64; 6] {
    let mut out = [0.0; 6];
    for (o, n) in out.iter_mut().zip(Npi::DISTANCING) {
        *o = u[n.index()];
    }
    out
}

/// NPI costs of each week of a schedule, ledgers threaded in week order.
pub fn weekly_policy_costs(schedule: &PolicySchedule, econ: &EconParams) -> Vec<CostBreakdown> {
    let mut school_ledger = SchoolClosureLedger::default();
    let mut ramp = RampLedger::default();
    schedule
        .weeks
        .iter()
        .map(|u| {
            let (school, next_school) = school_cost_week(u[Npi::School.index()], &school_ledger, econ);
            school_ledger = next_school;
            let ((mask, test, trace), next_ramp) = mask_test_trace_cost_week(
                u[Npi::Masks.index()],
                u[Npi::Testing.index()],
                u[Npi::Tracing.index()],
                &ramp,
                econ,
            );
            ramp = next_ramp;
            CostBreakdown {
                infection: 0.0,
                school,
                workplace: workplace_cost_week(u[Npi::Workplace.index()], econ),
                distancing: distancing_cost_week(&distancing_six(u), econ),
                mask,
                test,
                trace,
                total: 0.0,
            }
            .finish()
        })
        .collect()
}

/// NPI part of the cost of a schedule, per capita.
pub fn policy_cost(schedule: &PolicySchedule, econ: &EconParams) -> CostBreakdown {
    weekly_policy_costs(schedule, econ)
        .iter()
        .fold(CostBreakdown::default(), |acc, w| acc.add(w))
}

/// Learning loss accrued by a schedule, school-years.
pub fn learning_loss_years(schedule: &PolicySchedule) -> f64 {
    let econ = EconParams::default();
    let mut ledger = SchoolClosureLedger::default();
    for u in &schedule.weeks {
        ledger = school_cost_week(u[Npi::School.index()], &ledger, &econ).1;
    }
    ledger.accrued_loss_years()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn fear_cost_at_us_median_income() {
        let econ = EconParams::default();
        assert_abs_diff_eq!(econ.fear_cost(), 4.2 * 35980.0 * 5.0 / 365.0, epsilon = 1e-9);
        assert_abs_diff_eq!(econ.fear_cost(), 2070.1, epsilon = 0.1);
    }

    #[test]
    fn zero_inputs_give_zero_infection_cost() {
        let mut econ = EconParams::default();
        econ.vscd = 0.0;
        econ.medical_cost = 0.0;
        econ.median_income = 0.0;
        assert_eq!(infection_cost(&econ, 0.01), 0.0);
    }

    #[test]
    fn step_integral_over_whole_weeks_is_the_sum() {
        let expected: f64 = (0..25).map(|j| 1.0 - j as f64 / LEARNING_DECAY_WEEKS).sum();
        assert_abs_diff_eq!(learning_rate_integral(0.0, 40.0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(learning_rate_integral(0.0, 0.5), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(learning_rate_integral(1.0, 1.5), 0.5 * (1.0 - 1.0 / 24.2), epsilon = 1e-15);
    }

    #[test]
    fn high_workplace_is_one_and_a_half_mid() {
        let mid = EconParams::default();
        let high = EconParams::for_scenario(&EconScenario {
            workplace: Level::High,
            ..EconScenario::default()
        });
        assert_abs_diff_eq!(workplace_cost_week(0.7, &high), 1.5 * workplace_cost_week(0.7, &mid), epsilon = 1e-12);
    }

    #[test]
    fn grid_has_twelve_cells() {
        assert_eq!(EconScenario::grid().len(), 12);
        assert!(EconScenario {
            vscd: Level::Mid,
            ..EconScenario::default()
        }
        .validate()
        .is_err());
    }
}
