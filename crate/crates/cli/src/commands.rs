use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use npicost_core::artifacts::{value_fingerprint, write_json, ArtifactStore, RegionBundle, RegionMeta};
use npicost_core::cost::{EconParams, EconScenario};
use npicost_core::counterfactual::{evaluate_named_policies, expected_cost, NamedOutcome, NamedPolicy, ShockMode};
use npicost_core::epi::EpiParams;
use npicost_core::icer::{sicer, PrevalenceSource};
use npicost_core::inference::{sample_posterior, PosteriorDrawSet, StageOneConfig, WalkScalePrior};
use npicost_core::ingest::{
    estimate_test_ramp, load_clinical_series, load_policy_schedule, load_test_series, ColumnMap, PolicySchedule,
};
use npicost_core::mcmc::SamplerConfig;
use npicost_core::optimizer::{optimize, sensitivity_grid, OptimizationConfig, Parameterization, ScenarioGrid};
use npicost_core::regression::{fit_hierarchical, HierarchicalConfig, ModelVariant};
use npicost_core::synthetic::{observe_region, synthetic_hierarchy, HierarchyTruth};

use crate::server::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "npicost", version, about = "Fit, price and optimize NPI schedules")]
pub struct Cli {
    /// Artifact directory read and written by every stage.
    #[arg(long, env = "ARTIFACT_DIR", default_value = "artifacts", global = true)]
    pub artifacts: PathBuf,

    #[arg(long, env = "DEFAULT_SEED", default_value_t = 20200101, global = true)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read raw feeds for one region into the artifact directory.
    Ingest(IngestArgs),
    /// Write synthetic regions with known truth.
    Synth(SynthArgs),
    /// Fit the epidemic model to one or all regions.
    FitSeird(FitSeirdArgs),
    /// Fit the NPI regression across all fitted regions.
    FitNpi(FitNpiArgs),
    /// Expected cost and deaths of named policies.
    Evaluate(EvaluateArgs),
    /// Search for the schedule of least expected cost.
    Optimize(OptimizeArgs),
    /// Optimize under every cost scenario and model variant.
    Sensitivity(SensitivityArgs),
    /// Standardized cost-effectiveness of a policy against Open.
    Icer(IcerArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub region: String,
    #[arg(long)]
    pub population: u64,
    /// Cumulative deaths and cases by date.
    #[arg(long)]
    pub clinical: PathBuf,
    /// Daily ordinal policy levels by date.
    #[arg(long)]
    pub policy: PathBuf,
    /// Cumulative tests by date, for the testing cost ramp.
    #[arg(long)]
    pub tests: Option<PathBuf>,
    /// JSON column map overriding the default headers.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    /// Regional over national per capita income.
    #[arg(long, default_value_t = 1.0)]
    pub income_ratio: f64,
    /// Days to model from the first day with more than one death.
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub regions: usize,
    #[arg(long, default_value_t = 20)]
    pub weeks: usize,
    #[arg(long, default_value_t = 5_000_000)]
    pub population: u64,
    /// Also store the true trajectories as single-draw fits, skipping fit-seird.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args)]
pub struct FitSeirdArgs {
    /// Region to fit; every ingested region when omitted.
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Posterior trajectories kept for later stages.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Draw the walk scales from a log-normal centred at 400 instead of the flat prior.
    #[arg(long)]
    pub lognormal_walk: bool,
}

#[derive(Debug, Args)]
pub struct FitNpiArgs {
    #[arg(long, default_value = "ii")]
    pub variant: ModelVariant,
    #[arg(long, default_value_t = 100)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub thin: usize,
}

#[derive(Debug, Args, Clone)]
pub struct EvalOptions {
    #[arg(long)]
    pub region: String,
    /// JSON file selecting the cost scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "ii")]
    pub variant: ModelVariant,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, value_enum, default_value_t = Shocks::Retain)]
    pub shock_mode: Shocks,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Shocks {
    Retain,
    Resample,
}

impl From<Shocks> for ShockMode {
    fn from(s: Shocks) -> Self {
        match s {
            Shocks::Retain => ShockMode::Retain,
            Shocks::Resample => ShockMode::Resample,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub eval: EvalOptions,
    /// oc, full, obs, obs-school, open or all.
    #[arg(long, default_value = "all")]
    pub policy: String,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(flatten)]
    pub search: SearchOptions,
}

#[derive(Debug, Args, Clone)]
pub struct SearchOptions {
    #[arg(long, value_enum, default_value_t = Encoding::ConstantWeeklyWorkplace)]
    pub parameterization: Encoding,
    #[arg(long, default_value_t = 3000)]
    pub max_evals: usize,
    #[arg(long, default_value_t = 8)]
    pub starts: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Encoding {
    Weekly,
    ConstantWeeklyWorkplace,
    Constant,
}

impl From<Encoding> for Parameterization {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::Weekly => Parameterization::Weekly,
            Encoding::ConstantWeeklyWorkplace => Parameterization::ConstantWeeklyWorkplace,
            Encoding::Constant => Parameterization::Constant,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub eval: EvalOptions,
    #[command(flatten)]
    pub search: SearchOptions,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridKind {
    /// Every cost scenario under every model variant.
    Full,
    /// Every cost scenario under the chosen variant.
    Scenarios,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub eval: EvalOptions,
    #[command(flatten)]
    pub search: SearchOptions,
    #[arg(long, value_enum, default_value_t = GridKind::Full)]
    pub grid: GridKind,
}

#[derive(Debug, Args)]
pub struct IcerArgs {
    #[command(flatten)]
    pub eval: EvalOptions,
    #[arg(long, default_value = "obs")]
    pub policy: String,
    /// Inclusive day window `first:last`; the whole horizon by default.
    #[arg(long)]
    pub window: Option<String>,
    /// Take I(t) from the open trajectory instead of the policy one.
    #[arg(long)]
    pub open_prevalence: bool,
    #[command(flatten)]
    pub search: SearchOptions,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "ii")]
    pub variant: ModelVariant,
}

pub fn run(cli: Cli) -> Result<()> {
    let store = ArtifactStore::new(&cli.artifacts);
    match cli.command {
        Command::Ingest(a) => ingest(&store, &a),
        Command::Synth(a) => synth(&store, &a, cli.seed),
        Command::FitSeird(a) => fit_seird(&store, &a, cli.seed),
        Command::FitNpi(a) => fit_npi(&store, &a, cli.seed),
        Command::Evaluate(a) => evaluate(&store, &a, cli.seed),
        Command::Optimize(a) => {
            let (bundle, econ) = load_eval(&store, &a.eval, cli.seed)?;
            let result = optimal_schedule(&store, &bundle, &econ, &a.eval, &a.search, cli.seed)?;
            print_json(&result)
        }
        Command::Sensitivity(a) => sensitivity(&store, &a, cli.seed),
        Command::Icer(a) => icer(&store, &a, cli.seed),
        Command::Serve(a) => serve(&store, &a, cli.seed),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(store: &ArtifactStore, a: &IngestArgs) -> Result<()> {
    let columns = match &a.columns {
        Some(p) => ColumnMap::from_json_file(p)?,
        None => ColumnMap::default(),
    };
    let mut clinical = load_clinical_series(&a.clinical, &a.region, a.population, &columns)?;
    if let Some(days) = a.days {
        if days > clinical.days() {
            bail!("{} has only {} days after the window start", a.region, clinical.days());
        }
        clinical.deaths.truncate(days);
        clinical.cases.truncate(days);
    }
    let schedule = load_policy_schedule(&a.policy, &a.region, clinical.start_date, clinical.days(), &columns)?;
    let test_ramp = match &a.tests {
        Some(p) => estimate_test_ramp(&load_test_series(p, &a.region, &columns)?, a.population as f64)?.rate,
        None => EconParams::default().test_ramp,
    };
    let meta = RegionMeta {
        region_id: a.region.clone(),
        population: a.population,
        start_date: clinical.start_date,
        test_ramp,
        income_ratio: a.income_ratio,
    };
    store.save_region(&meta, &clinical, &schedule)?;
    info!("{}: {} days from {}", a.region, clinical.days(), clinical.start_date);
    print_json(&meta)
}

fn synth(store: &ArtifactStore, a: &SynthArgs, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = synthetic_hierarchy(a.regions, a.weeks, &HierarchyTruth::two_strong(), a.population as f64, &mut rng)?;
    for (set, schedule) in h.sets.iter().zip(&h.schedules) {
        let draw = &set.draws[0];
        let days = draw.trajectory.days();
        let clinical = observe_region(
            &set.region_id,
            &draw.params,
            &set.epi,
            set.p_initial,
            a.population,
            days,
            &mut rng,
        )?;
        let meta = RegionMeta {
            region_id: set.region_id.clone(),
            population: a.population,
            start_date: clinical.start_date,
            test_ramp: EconParams::default().test_ramp,
            income_ratio: 1.0,
        };
        store.save_region(&meta, &clinical, schedule)?;
        if a.exact {
            store.save_draws(set)?;
        }
    }
    print_json(&store.regions()?)
}

fn fit_seird(store: &ArtifactStore, a: &FitSeirdArgs, seed: u64) -> Result<()> {
    let regions = match &a.region {
        Some(r) => vec![r.clone()],
        None => store.regions()?,
    };
    if regions.is_empty() {
        bail!("no ingested regions in {}; run `npicost ingest` first", store.root.display());
    }
    let config = StageOneConfig {
        epi: EpiParams::default(),
        sampler: SamplerConfig {
            chains: a.chains,
            warmup: a.warmup,
            iterations: a.iterations,
            thin: a.thin,
            seed,
        },
        draws_kept: a.draws,
        walk_scale_prior: if a.lognormal_walk {
            WalkScalePrior::LogNormal {
                mean_log: 400f64.ln(),
                sd_log: 0.5,
            }
        } else {
            WalkScalePrior::FlatLog
        },
        ..Default::default()
    };
    let mut report = Vec::new();
    for region in regions {
        let data = store.clinical(&region)?;
        let fit = sample_posterior(&data, &config)?;
        let set = PosteriorDrawSet::from_fit(&fit, &data, &config)?;
        store.save_draws(&set)?;
        info!(
            "{region}: max R-hat {:.3}, min ESS {:.0}",
            fit.diagnostics.max_rhat, fit.diagnostics.min_ess
        );
        report.push(serde_json::json!({
            "region_id": region,
            "max_rhat": fit.diagnostics.max_rhat,
            "min_ess": fit.diagnostics.min_ess,
            "flagged": fit.diagnostics.flagged,
        }));
    }
    print_json(&report)
}

fn fit_npi(store: &ArtifactStore, a: &FitNpiArgs, seed: u64) -> Result<()> {
    let mut sets = Vec::new();
    let mut schedules = Vec::new();
    for region in store.regions()? {
        sets.push(store.draws(&region)?);
        schedules.push(store.schedule(&region)?);
    }
    if sets.is_empty() {
        bail!("no fitted regions in {}; run `npicost fit-seird` first", store.root.display());
    }
    let config = HierarchicalConfig {
        variant: a.variant,
        warmup: a.warmup,
        iterations: a.iterations,
        thin: a.thin,
        seed,
        trajectories: a.trajectories,
    };
    let fit = fit_hierarchical(&sets, &schedules, &config)?;
    store.save_npi_fit(&fit)?;
    print_json(&serde_json::json!({
        "variant": fit.variant.to_string(),
        "regions": fit.region_ids,
        "draws": fit.draws.len(),
    }))
}

fn scenario(path: &Option<PathBuf>) -> Result<EconScenario> {
    Ok(match path {
        Some(p) => EconScenario::from_json_file(p)?,
        None => EconScenario::default(),
    })
}

fn load_eval(store: &ArtifactStore, e: &EvalOptions, seed: u64) -> Result<(RegionBundle, EconParams)> {
    let bundle = store.bundle(&e.region, e.variant, e.draws, seed)?;
    let econ = bundle.meta.econ(&scenario(&e.scenario)?);
    Ok((bundle, econ))
}

fn search_config(s: &SearchOptions, e: &EvalOptions, seed: u64) -> OptimizationConfig {
    OptimizationConfig {
        n_starts: s.starts,
        parameterization: s.parameterization.into(),
        max_evals: s.max_evals,
        seed,
        shock_mode: e.shock_mode.into(),
        ..Default::default()
    }
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct CachedOptimum {
    fingerprint: String,
    expected_cost: f64,
    budget_exhausted: bool,
    schedule: PolicySchedule,
}

/// Optimal schedule, reusing a cached result with the same fingerprint.
fn optimal_schedule(
    store: &ArtifactStore,
    bundle: &RegionBundle,
    econ: &EconParams,
    e: &EvalOptions,
    s: &SearchOptions,
    seed: u64,
) -> Result<CachedOptimum> {
    let config = search_config(s, e, seed);
    let fingerprint = value_fingerprint(&(&bundle.fingerprint, econ, &config, bundle.draws.len()));
    let path = store
        .region_dir(&e.region)
        .join(format!("optimal-{}.json", &fingerprint[..16]));
    if path.exists() {
        let cached: CachedOptimum = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if cached.fingerprint == fingerprint {
            info!("reusing {}", path.display());
            return Ok(cached);
        }
    }
    let r = optimize(&bundle.draws, &bundle.schedule, econ, &config)?;
    let out = CachedOptimum {
        fingerprint,
        expected_cost: r.cost,
        budget_exhausted: r.budget_exhausted,
        schedule: r.schedule,
    };
    write_json(&path, &out)?;
    Ok(out)
}

fn outcome_rows(rows: &[NamedOutcome]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "policy",
        "deaths_median",
        "deaths_p05",
        "deaths_p95",
        "expected_cost",
        "infection",
        "school",
        "workplace",
        "distancing",
        "mask",
        "test",
        "trace",
    ])?;
    for r in rows {
        let o = &r.outcome;
        let c = &o.cost;
        let mut rec = vec![r.policy.name().to_owned()];
        rec.extend(
            [
                o.deaths_total.median,
                o.deaths_total.lo,
                o.deaths_total.hi,
                o.expected_cost,
                c.infection,
                c.school,
                c.workplace,
                c.distancing,
                c.mask,
                c.test,
                c.trace,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn evaluate(store: &ArtifactStore, a: &EvaluateArgs, seed: u64) -> Result<()> {
    let (bundle, econ) = load_eval(store, &a.eval, seed)?;
    let mode: ShockMode = a.eval.shock_mode.into();
    let weeks = bundle.weeks();
    let wanted: Vec<NamedPolicy> = if a.policy == "all" {
        NamedPolicy::ALL.to_vec()
    } else {
        vec![a.policy.parse()?]
    };
    let oc = if wanted.contains(&NamedPolicy::Oc) {
        Some(optimal_schedule(store, &bundle, &econ, &a.eval, &a.search, seed)?.schedule)
    } else {
        None
    };
    let rows = if wanted.len() == NamedPolicy::ALL.len() {
        evaluate_named_policies(&bundle.draws, &bundle.schedule, &econ, oc.as_ref(), mode)?
    } else {
        wanted
            .iter()
            .map(|p| {
                let schedule = p
                    .schedule(&bundle.schedule, weeks)
                    .or_else(|| oc.clone())
                    .context("optimal schedule unavailable")?;
                let outcome = expected_cost(&schedule, &bundle.draws, &econ, mode)?;
                Ok(NamedOutcome {
                    policy: *p,
                    schedule,
                    outcome,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    match a.format {
        Format::Csv => {
            print!("{}", outcome_rows(&rows)?);
            Ok(())
        }
        Format::Json => print_json(
            &rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "policy": r.policy.name(),
                        "deaths_total": r.outcome.deaths_total,
                        "expected_cost": r.outcome.expected_cost,
                        "cost": r.outcome.cost,
                    })
                })
                .collect::<Vec<_>>(),
        ),
    }
}

fn sensitivity(store: &ArtifactStore, a: &SensitivityArgs, seed: u64) -> Result<()> {
    let base = store.meta(&a.eval.region)?.econ(&EconScenario::default());
    let observed = store.schedule(&a.eval.region)?;
    let grid = match a.grid {
        GridKind::Full => ScenarioGrid::full(),
        GridKind::Scenarios => ScenarioGrid {
            scenarios: EconScenario::grid(),
            variants: vec![a.eval.variant],
        },
    };
    let config = search_config(&a.search, &a.eval, seed);
    let cells = sensitivity_grid(
        |v| Ok(store.bundle(&a.eval.region, v, a.eval.draws, seed)?.draws),
        &observed,
        &base,
        &grid,
        &config,
    )?;
    write_json(&store.region_dir(&a.eval.region).join("sensitivity.json"), &cells)?;
    print_json(
        &cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "scenario": c.scenario.label(),
                    "variant": c.variant.to_string(),
                    "expected_cost": c.result.as_ref().ok().map(|r| r.expected_cost),
                    "mean_strength": c.result.as_ref().ok().map(|r| r.mean_strength.clone()),
                    "error": c.result.as_ref().err(),
                })
            })
            .collect::<Vec<_>>(),
    )
}

fn parse_window(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(':').context("window must be first:last")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn icer(store: &ArtifactStore, a: &IcerArgs, seed: u64) -> Result<()> {
    let (bundle, econ) = load_eval(store, &a.eval, seed)?;
    let policy: NamedPolicy = a.policy.parse()?;
    let schedule = match policy.schedule(&bundle.schedule, bundle.weeks()) {
        Some(s) => s,
        None => optimal_schedule(store, &bundle, &econ, &a.eval, &a.search, seed)?.schedule,
    };
    let days = bundle.draws[0].days;
    let window = match &a.window {
        Some(w) => parse_window(w)?,
        None => (0, days - 1),
    };
    let source = if a.open_prevalence {
        PrevalenceSource::Open
    } else {
        PrevalenceSource::Policy
    };
    let s = sicer(&schedule, &bundle.draws, &econ, window, a.eval.shock_mode.into(), source)?;
    print_json(&serde_json::json!({
        "policy": policy.name(),
        "window": s.window,
        "sicer": s.sicer,
        "icer_per_infection": s.icer,
        "icer_per_death": s.icer_per_death,
        "cumulative": s.cumulative,
        "weekly": s.weekly,
    }))
}

fn serve(store: &ArtifactStore, a: &ServeArgs, seed: u64) -> Result<()> {
    let state = Arc::new(AppState::load(store, a.variant, seed)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port)).await?;
        info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}

/// Parse arguments and run, for tests that drive the CLI in-process.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
