//! Multi-start pattern search for the schedule of least expected cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{EconParams, EconScenario};
use crate::counterfactual::{
    evaluate_named_policies, expected_cost_value, CounterfactualDraw, NamedOutcome, ShockMode,
};
use crate::error::{Error, Result};
use crate::ingest::PolicySchedule;
use crate::npi::{Npi, NPI_COUNT};
use crate::regression::ModelVariant;

/// How a schedule is encoded as a search vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// One strength per NPI per week.
    Weekly,
    /// One strength per NPI, except workplace closure which varies weekly.
    #[default]
    ConstantWeeklyWorkplace,
    /// One strength per NPI for the whole horizon.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub n_starts: usize,
    pub parameterization: Parameterization,
    /// NPIs the search may use; the rest stay at zero.
    pub free_npis: Vec<Npi>,
    /// Objective evaluations allowed per start.
    pub max_evals: usize,
    /// Smallest decrease of the objective that counts as progress.
    pub tolerance: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub seed: u64,
    pub shock_mode: ShockMode,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            n_starts: 8,
            parameterization: Parameterization::default(),
            free_npis: Npi::ALL.to_vec(),
            max_evals: 3000,
            tolerance: 1e-6,
            initial_step: 0.25,
            min_step: 1.0 / 64.0,
            seed: 20200101,
            shock_mode: ShockMode::Retain,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::InvalidParameter("n_starts must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        if !(self.min_step > 0.0 && self.initial_step >= self.min_step) {
            return Err(Error::InvalidParameter("need 0 < min_step <= initial_step".into()));
        }
        if self.free_npis.is_empty() {
            return Err(Error::InvalidParameter("no free NPIs".into()));
        }
        Ok(())
    }
}

/// Maps search vectors in `[0,1]^dim` to schedules and back.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub weeks: usize,
    pub region_id: String,
    /// For each coordinate, the NPI it sets and the weeks it covers.
    slots: Vec<(Npi, Vec<usize>)>,
}

impl Encoding {
    pub fn new(region_id: &str, weeks: usize, parameterization: Parameterization, free: &[Npi]) -> Self {
        let mut slots = Vec::new();
        for &npi in Npi::ALL.iter().filter(|n| free.contains(n)) {
            let weekly = match parameterization {
                Parameterization::Weekly => true,
                Parameterization::ConstantWeeklyWorkplace => npi == Npi::Workplace,
                Parameterization::Constant => false,
            };
            if weekly {
                slots.extend((0..weeks).map(|w| (npi, vec![w])));
            } else {
                slots.push((npi, (0..weeks).collect()));
            }
        }
        Self {
            weeks,
            region_id: region_id.to_owned(),
            slots,
        }
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    pub fn decode(&self, x: &[f64]) -> PolicySchedule {
        let mut weeks = vec![[0.0; NPI_COUNT]; self.weeks];
        for ((npi, ws), v) in self.slots.iter().zip(x) {
            for &w in ws {
                weeks[w][npi.index()] = *v;
            }
        }
        PolicySchedule {
            region_id: self.region_id.clone(),
            weeks,
        }
    }

    /// Closest search vector to a schedule: each coordinate takes the mean
    /// strength over the weeks it covers.
    pub fn encode(&self, s: &PolicySchedule) -> Vec<f64> {
        self.slots
            .iter()
            .map(|(npi, ws)| ws.iter().map(|&w| s.weeks[w][npi.index()]).sum::<f64>() / ws.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub label: String,
    pub start_cost: f64,
    pub cost: f64,
    pub x: Vec<f64>,
    pub evals: usize,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub schedule: PolicySchedule,
    pub cost: f64,
    pub starts: Vec<StartResult>,
    /// Best objective after each accepted move of the winning start.
    pub trace: Vec<f64>,
    pub budget_exhausted: bool,
}

struct SearchOutcome {
    x: Vec<f64>,
    cost: f64,
    start_cost: f64,
    trace: Vec<f64>,
    evals: usize,
    exhausted: bool,
}

/// Coordinate pattern search on `[0,1]^dim` with halving steps.
fn pattern_search<F>(f: &F, start: Vec<f64>, config: &OptimizationConfig) -> Result<SearchOutcome>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let mut x = start;
    let mut best = f(&x)?;
    let start_cost = best;
    let mut evals = 1;
    let mut trace = vec![best];
    let mut step = config.initial_step;
    let mut exhausted = false;
    'outer: while step >= config.min_step {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                if evals >= config.max_evals {
                    exhausted = true;
                    break 'outer;
                }
                let v = (x[i] + dir * step).clamp(0.0, 1.0);
                if v == x[i] {
                    continue;
                }
                let old = x[i];
                x[i] = v;
                let c = f(&x)?;
                evals += 1;
                if c < best - config.tolerance {
                    best = c;
                    trace.push(c);
                    improved = true;
                    break;
                }
                x[i] = old;
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    Ok(SearchOutcome {
        x,
        cost: best,
        start_cost,
        trace,
        evals,
        exhausted,
    })
}

/// Labelled start schedules: Open, Full, Obs, Obs-school, mask+test+trace,
/// then random ones up to `n`.
pub fn start_schedules(observed: &PolicySchedule, weeks: usize, n: usize, seed: u64) -> Vec<(String, PolicySchedule)> {
    let id = observed.region_id.clone();
    let obs = PolicySchedule {
        region_id: id.clone(),
        weeks: observed.weeks[..weeks].to_vec(),
    };
    let mut mtt = [0.0; NPI_COUNT];
    for npi in [Npi::Masks, Npi::Testing, Npi::Tracing] {
        mtt[npi.index()] = 1.0;
    }
    let mut out = vec![
        ("open".to_owned(), PolicySchedule::constant(id.clone(), [0.0; NPI_COUNT], weeks)),
        ("full".to_owned(), PolicySchedule::constant(id.clone(), [1.0; NPI_COUNT], weeks)),
        ("obs-school".to_owned(), obs.with_npi_zeroed(Npi::School)),
        ("obs".to_owned(), obs),
        ("mask-test-trace".to_owned(), PolicySchedule::constant(id.clone(), mtt, weeks)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = 0;
    while out.len() < n {
        let weeks_u = (0..weeks)
            .map(|_| {
                let mut u = [0.0; NPI_COUNT];
                u.iter_mut().for_each(|v| *v = rng.random::<f64>());
                u
            })
            .collect();
        out.push((format!("random-{k}"), PolicySchedule {
            region_id: id.clone(),
            weeks: weeks_u,
        }));
        k += 1;
    }
    out.truncate(n);
    out
}

/// Minimize an arbitrary schedule objective from every start.
pub fn optimize_objective<F>(
    objective: F,
    observed: &PolicySchedule,
    weeks: usize,
    config: &OptimizationConfig,
) -> Result<OptimizationResult>
where
    F: Fn(&PolicySchedule) -> Result<f64> + Sync,
{
    config.validate()?;
    if observed.len() < weeks {
        return Err(Error::Contract(format!(
            "observed schedule has {} weeks, horizon needs {weeks}",
            observed.len()
        )));
    }
    let enc = Encoding::new(&observed.region_id, weeks, config.parameterization, &config.free_npis);
    let f = |x: &[f64]| objective(&enc.decode(x));
    let starts = start_schedules(observed, weeks, config.n_starts, config.seed);
    let outcomes: Vec<Result<(String, SearchOutcome)>> = starts
        .par_iter()
        .map(|(label, s)| Ok((label.clone(), pattern_search(&f, enc.encode(s), config)?)))
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let (best_i, _) = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.cost.total_cmp(&b.1 .1.cost))
        .expect("at least one start");
    let best = &outcomes[best_i].1;
    Ok(OptimizationResult {
        schedule: enc.decode(&best.x),
        cost: best.cost,
        trace: best.trace.clone(),
        budget_exhausted: best.exhausted,
        starts: outcomes
            .iter()
            .map(|(label, o)| StartResult {
                label: label.clone(),
                start_cost: o.start_cost,
                cost: o.cost,
                x: o.x.clone(),
                evals: o.evals,
                budget_exhausted: o.exhausted,
            })
            .collect(),
    })
}

/// Schedule of least expected cost over the draws' horizon.
pub fn optimize(
    draws: &[CounterfactualDraw],
    observed: &PolicySchedule,
    econ: &EconParams,
    config: &OptimizationConfig,
) -> Result<OptimizationResult> {
    let weeks = draws
        .first()
        .ok_or_else(|| Error::Contract("optimization needs at least one draw".into()))?
        .weeks();
    optimize_objective(
        |s| expected_cost_value(s, draws, econ, config.shock_mode),
        observed,
        weeks,
        config,
    )
}

/// Cells of the sensitivity analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub scenarios: Vec<EconScenario>,
    pub variants: Vec<ModelVariant>,
}

impl ScenarioGrid {
    pub fn full() -> Self {
        Self {
            scenarios: EconScenario::grid(),
            variants: ModelVariant::ALL.to_vec(),
        }
    }

    pub fn cells(&self) -> Vec<(EconScenario, ModelVariant)> {
        self.variants
            .iter()
            .flat_map(|v| self.scenarios.iter().map(move |s| (*s, *v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub optimum: PolicySchedule,
    pub expected_cost: f64,
    /// Mean strength of each NPI in the optimum, in NPI order.
    pub mean_strength: Vec<f64>,
    pub policies: Vec<NamedOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub scenario: EconScenario,
    pub variant: ModelVariant,
    pub result: std::result::Result<CellResult, String>,
}

pub fn mean_strength(s: &PolicySchedule) -> Vec<f64> {
    Npi::ALL
        .iter()
        .map(|n| s.series(*n).iter().sum::<f64>() / s.len().max(1) as f64)
        .collect()
}

/// Optimize and evaluate the named policies in every cell of `grid`.
/// `draws_for` supplies the counterfactual draws fitted under a model
/// variant; a failing cell is recorded and the rest still run.
pub fn sensitivity_grid<D>(
    draws_for: D,
    observed: &PolicySchedule,
    base: &EconParams,
    grid: &ScenarioGrid,
    config: &OptimizationConfig,
) -> Result<Vec<SensitivityCell>>
where
    D: Fn(ModelVariant) -> Result<Vec<CounterfactualDraw>>,
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::InvalidParameter("empty sensitivity grid".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for variant in &grid.variants {
        let draws = draws_for(*variant);
        for scenario in &grid.scenarios {
            let result = match &draws {
                Err(e) => Err(e.to_string()),
                Ok(draws) => run_cell(draws, observed, &base.with_scenario(scenario), config).map_err(|e| e.to_string()),
            };
            out.push(SensitivityCell {
                scenario: *scenario,
                variant: *variant,
                result,
            });
        }
    }
    Ok(out)
}

fn run_cell(
    draws: &[CounterfactualDraw],
    observed: &PolicySchedule,
    econ: &EconParams,
    config: &OptimizationConfig,
) -> Result<CellResult> {
    let opt = optimize(draws, observed, econ, config)?;
    let policies = evaluate_named_policies(draws, observed, econ, Some(&opt.schedule), config.shock_mode)?;
    Ok(CellResult {
        mean_strength: mean_strength(&opt.schedule),
        expected_cost: opt.cost,
        optimum: opt.schedule,
        policies,
    })
}
