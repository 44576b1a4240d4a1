//! Stage-one posterior: weekly R0 walk, IFR, initial state, case ascertainment
//! and observation parameters for a single region.

use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::epi::{initial_state, simulate, weeks_for_days, EpiParams, Trajectory, INITIAL_INFECTED_BOUND};
use crate::error::{Error, Result};
use crate::ingest::ClinicalSeries;
use crate::mcmc::{
    effective_sample_size, inv_logit, logit, maximize, negative_hessian, run_chains,
    simplex_from_unconstrained, simplex_to_unconstrained, split_rhat, Interval, SamplerConfig,
};
use crate::observation::{cases_loglik, confirmation_delay_prior, deaths_loglik, CaseModelState, ZinbParams};
use crate::stats::{beta_log_pdf, lgamma, normal_log_pdf, truncated_normal_log_pdf};

/// Support of parameters that carry a flat prior on the log scale.
pub const LOG_SCALE_BOUNDS: (f64, f64) = (-15.0, 25.0);

const RHAT_LIMIT: f64 = 1.05;

/// IFR prior given as a median and a 95% interval; the standard deviation is
/// a quarter of the interval width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfrPrior {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl IfrPrior {
    pub fn sd(&self) -> f64 {
        (self.hi - self.lo) / 4.0
    }

    pub fn log_pdf(&self, iota: f64) -> f64 {
        truncated_normal_log_pdf(iota, self.median, self.sd(), 0.0, 1.0)
    }
}

impl Default for IfrPrior {
    fn default() -> Self {
        Self {
            median: 0.0068,
            lo: 0.0053,
            hi: 0.0082,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneParams {
    pub r0_by_week: Vec<f64>,
    pub sigma2_r: f64,
    pub iota: f64,
    pub x0: [f64; 5],
    pub car_by_week: Vec<f64>,
    pub sigma2_car: f64,
    /// Mean delay from infection to confirmation, in days.
    pub confirmation_delay: f64,
    pub zinb_deaths: ZinbParams,
    pub zinb_cases: ZinbParams,
    pub i_c0: f64,
}

impl StageOneParams {
    pub fn tau(&self) -> f64 {
        1.0 / self.confirmation_delay
    }

    pub fn weeks(&self) -> usize {
        self.r0_by_week.len()
    }

    pub fn case_state(&self) -> CaseModelState {
        CaseModelState {
            i_c: self.i_c0,
            tau: self.tau(),
            car_by_week: self.car_by_week.clone(),
            sigma2_car: self.sigma2_car,
        }
    }

    pub fn initial_state(&self, p: f64) -> Result<crate::epi::CompartmentState> {
        initial_state(&self.x0, p, self.iota)
    }

    pub fn trajectory(&self, epi: &EpiParams, p: f64, population: f64, days: usize) -> Result<Trajectory> {
        let init = self.initial_state(p)?;
        simulate(&init, &self.r0_by_week, &epi.with_iota(self.iota), population, days)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub epi: EpiParams,
    pub ifr_prior: IfrPrior,
    /// Upper bound on the share of the population infected before day 0.
    pub p_initial: f64,
    pub sampler: SamplerConfig,
    /// Number of posterior trajectories kept for stage two.
    pub draws_kept: usize,
    /// Quasi-Newton iterations used to locate the posterior mode before
    /// sampling.
    pub start_search_iterations: usize,
    /// Prior on the two random-walk concentrations.
    #[serde(default)]
    pub walk_scale_prior: WalkScalePrior,
}

/// Prior on a random-walk concentration `s`.
///
/// `FlatLog` leaves the posterior improper whenever the data tolerate a
/// constant path, since the walk density then grows without bound in `s`.
/// `LogNormal` is proper and is what simulation-based calibration needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WalkScalePrior {
    #[default]
    FlatLog,
    LogNormal { mean_log: f64, sd_log: f64 },
}

impl WalkScalePrior {
    /// Density of `s` on the natural scale, up to a constant for `FlatLog`.
    pub fn log_pdf(&self, s: f64) -> f64 {
        match *self {
            WalkScalePrior::FlatLog => -s.ln(),
            WalkScalePrior::LogNormal { mean_log, sd_log } => normal_log_pdf(s.ln(), mean_log, sd_log) - s.ln(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match *self {
            WalkScalePrior::FlatLog => None,
            WalkScalePrior::LogNormal { mean_log, sd_log } => {
                Some((mean_log + sd_log * rng.sample::<f64, _>(StandardNormal)).exp())
            }
        }
    }
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            epi: EpiParams::default(),
            ifr_prior: IfrPrior::default(),
            p_initial: INITIAL_INFECTED_BOUND,
            sampler: SamplerConfig::default(),
            draws_kept: 100,
            start_search_iterations: 300,
            walk_scale_prior: WalkScalePrior::FlatLog,
        }
    }
}

/// Position of each parameter in the unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub weeks: usize,
}

impl Layout {
    pub fn r0(&self, w: usize) -> usize {
        w
    }
    pub fn log_sigma2_r(&self) -> usize {
        self.weeks
    }
    pub fn iota(&self) -> usize {
        self.weeks + 1
    }
    pub fn x0(&self) -> std::ops::Range<usize> {
        self.weeks + 2..self.weeks + 6
    }
    pub fn car(&self, w: usize) -> usize {
        self.weeks + 6 + w
    }
    pub fn log_sigma2_car(&self) -> usize {
        2 * self.weeks + 6
    }
    pub fn delay(&self) -> usize {
        2 * self.weeks + 7
    }
    /// `theta, log kappa, zeta` for deaths.
    pub fn zinb_deaths(&self) -> usize {
        2 * self.weeks + 8
    }
    pub fn zinb_cases(&self) -> usize {
        2 * self.weeks + 11
    }
    pub fn log_i_c0(&self) -> usize {
        2 * self.weeks + 14
    }
    pub fn dim(&self) -> usize {
        2 * self.weeks + 15
    }

    /// Default sampling blocks: the R0 walk, the CAR walk, each walk scale on
    /// its own, everything else, and finally all coordinates jointly.
    pub fn default_blocks(&self) -> Vec<Vec<usize>> {
        let r0: Vec<usize> = (0..self.weeks).map(|w| self.r0(w)).collect();
        let car: Vec<usize> = (0..self.weeks).map(|w| self.car(w)).collect();
        let mut rest = vec![self.iota()];
        rest.extend(self.x0());
        rest.extend(self.delay()..self.dim());
        let all = (0..self.dim()).collect();
        vec![r0, vec![self.log_sigma2_r()], car, vec![self.log_sigma2_car()], rest, all]
    }
}

pub struct StageOneModel<'a> {
    pub data: &'a ClinicalSeries,
    pub config: &'a StageOneConfig,
    pub layout: Layout,
    /// Drop the likelihood and sample the prior alone.
    pub prior_only: bool,
}

fn in_log_bounds(v: f64) -> bool {
    let (lo, hi) = LOG_SCALE_BOUNDS;
    v > lo && v < hi
}

/// Scaled-beta random-walk log density for a series in `(0, scale)`.
fn beta_walk_log_pdf(series: &[f64], concentration: f64, scale: f64) -> f64 {
    let mut lp = 0.0;
    for pair in series.windows(2) {
        let r = pair[0] / scale;
        lp += beta_log_pdf(pair[1] / scale, concentration * r, concentration * (1.0 - r)) - scale.ln();
    }
    lp
}

impl<'a> StageOneModel<'a> {
    pub fn new(data: &'a ClinicalSeries, config: &'a StageOneConfig) -> Self {
        Self {
            data,
            config,
            layout: Layout {
                weeks: weeks_for_days(data.days()),
            },
            prior_only: false,
        }
    }

    fn delay_interval(&self) -> Interval {
        let (lo, hi, _, _) = confirmation_delay_prior(&self.config.epi);
        Interval { lo, hi }
    }

    fn r0_interval(&self) -> Interval {
        Interval {
            lo: 0.0,
            hi: self.config.epi.r0_max,
        }
    }

    /// Map an unconstrained vector to parameters and the log Jacobian.
    pub fn unpack(&self, y: &[f64]) -> (StageOneParams, f64) {
        let l = self.layout;
        let r0i = self.r0_interval();
        let mut log_j = 0.0;
        let r0_by_week = (0..l.weeks)
            .map(|w| {
                log_j += r0i.log_jacobian(y[l.r0(w)]);
                r0i.from_unconstrained(y[l.r0(w)])
            })
            .collect();
        let car_by_week = (0..l.weeks)
            .map(|w| {
                log_j += Interval::UNIT.log_jacobian(y[l.car(w)]);
                inv_logit(y[l.car(w)])
            })
            .collect();
        let mut x0 = [0.0; 5];
        log_j += simplex_from_unconstrained(&y[l.x0()], &mut x0);
        let mut unit = |i: usize| {
            log_j += Interval::UNIT.log_jacobian(y[i]);
            inv_logit(y[i])
        };
        let iota = unit(l.iota());
        let zd = l.zinb_deaths();
        let zc = l.zinb_cases();
        let (theta_d, zeta_d, theta_c, zeta_c) = (unit(zd), unit(zd + 2), unit(zc), unit(zc + 2));
        let di = self.delay_interval();
        log_j += di.log_jacobian(y[l.delay()]);
        // Flat-on-log parameters: the Jacobian of exp is exp(y), which cancels
        // the 1/x prior density and is added back explicitly here.
        for i in [l.log_sigma2_r(), l.log_sigma2_car(), zd + 1, zc + 1, l.log_i_c0()] {
            log_j += y[i];
        }
        let params = StageOneParams {
            r0_by_week,
            sigma2_r: y[l.log_sigma2_r()].exp(),
            iota,
            x0,
            car_by_week,
            sigma2_car: y[l.log_sigma2_car()].exp(),
            confirmation_delay: di.from_unconstrained(y[l.delay()]),
            zinb_deaths: ZinbParams {
                theta: theta_d,
                kappa: y[zd + 1].exp(),
                zeta: zeta_d,
            },
            zinb_cases: ZinbParams {
                theta: theta_c,
                kappa: y[zc + 1].exp(),
                zeta: zeta_c,
            },
            i_c0: y[l.log_i_c0()].exp(),
        };
        (params, log_j)
    }

    pub fn pack(&self, p: &StageOneParams) -> Vec<f64> {
        let l = self.layout;
        let mut y = vec![0.0; l.dim()];
        let r0i = self.r0_interval();
        for w in 0..l.weeks {
            y[l.r0(w)] = r0i.to_unconstrained(p.r0_by_week[w]);
            y[l.car(w)] = logit(p.car_by_week[w]);
        }
        y[l.log_sigma2_r()] = p.sigma2_r.ln();
        y[l.iota()] = logit(p.iota);
        y[l.x0()].copy_from_slice(&simplex_to_unconstrained(&p.x0));
        y[l.log_sigma2_car()] = p.sigma2_car.ln();
        y[l.delay()] = self.delay_interval().to_unconstrained(p.confirmation_delay);
        let zd = l.zinb_deaths();
        let zc = l.zinb_cases();
        y[zd] = logit(p.zinb_deaths.theta);
        y[zd + 1] = p.zinb_deaths.kappa.ln();
        y[zd + 2] = logit(p.zinb_deaths.zeta);
        y[zc] = logit(p.zinb_cases.theta);
        y[zc + 1] = p.zinb_cases.kappa.ln();
        y[zc + 2] = logit(p.zinb_cases.zeta);
        y[l.log_i_c0()] = p.i_c0.ln();
        y
    }

    /// Log prior density on the natural scale. Improper flat-on-log priors
    /// appear as `-ln x`.
    pub fn log_prior(&self, p: &StageOneParams) -> f64 {
        let r0_max = self.config.epi.r0_max;
        let unit = |x: f64| x > 0.0 && x < 1.0;
        let scales = [p.sigma2_r, p.sigma2_car, p.zinb_deaths.kappa, p.zinb_cases.kappa, p.i_c0];
        if p.r0_by_week.iter().any(|r| !(*r > 0.0 && *r < r0_max))
            || p.car_by_week.iter().any(|c| !unit(*c))
            || !unit(p.iota)
            || ![p.zinb_deaths.theta, p.zinb_deaths.zeta, p.zinb_cases.theta, p.zinb_cases.zeta]
                .into_iter()
                .all(unit)
            || scales.iter().any(|s| !(*s > 0.0 && in_log_bounds(s.ln())))
            || p.x0.iter().any(|x| *x < 0.0)
            || (p.x0.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return f64::NEG_INFINITY;
        }
        let (lo, hi, mean, sd) = confirmation_delay_prior(&self.config.epi);
        let mut lp = -r0_max.ln();
        lp += beta_walk_log_pdf(&p.r0_by_week, p.sigma2_r, r0_max);
        lp += beta_walk_log_pdf(&p.car_by_week, p.sigma2_car, 1.0);
        lp += lgamma(5.0);
        lp += self.config.ifr_prior.log_pdf(p.iota);
        lp += truncated_normal_log_pdf(p.confirmation_delay, mean, sd, lo, hi);
        lp -= scales[2..].iter().map(|s| s.ln()).sum::<f64>();
        lp += self.config.walk_scale_prior.log_pdf(p.sigma2_r);
        lp += self.config.walk_scale_prior.log_pdf(p.sigma2_car);
        lp
    }

    pub fn log_likelihood(&self, p: &StageOneParams) -> f64 {
        let traj = match p.trajectory(
            &self.config.epi,
            self.config.p_initial,
            self.data.population as f64,
            self.data.days(),
        ) {
            Ok(t) => t,
            Err(_) => return f64::NEG_INFINITY,
        };
        let d = deaths_loglik(
            &traj,
            &self.data.deaths,
            self.data.prior_cumulative_deaths,
            &p.zinb_deaths,
            self.config.epi.mu(),
        );
        let c = cases_loglik(&traj, &p.case_state(), &self.data.cases, &p.zinb_cases);
        match (d, c) {
            (Ok(d), Ok(c)) if !d.is_nan() && !c.is_nan() => d + c,
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn log_posterior(&self, p: &StageOneParams) -> f64 {
        let prior = self.log_prior(p);
        if prior == f64::NEG_INFINITY || self.prior_only {
            return prior;
        }
        prior + self.log_likelihood(p)
    }

    /// Log density of the unconstrained vector.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        if y.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let (p, log_j) = self.unpack(y);
        let lp = self.log_posterior(&p);
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp + log_j
        }
    }

    /// A data-informed default starting point.
    pub fn default_start(&self) -> StageOneParams {
        let w = self.layout.weeks;
        let early_cases = self.data.cases.iter().take(7).sum::<u64>() as f64 / 7.0;
        let delay = confirmation_delay_prior(&self.config.epi).2;
        StageOneParams {
            r0_by_week: vec![1.5; w],
            sigma2_r: 200.0,
            iota: self.config.ifr_prior.median,
            x0: [0.96, 0.01, 0.01, 0.01, 0.01],
            car_by_week: vec![0.3; w],
            sigma2_car: 200.0,
            confirmation_delay: delay,
            zinb_deaths: ZinbParams {
                theta: 0.05,
                kappa: 10.0,
                zeta: 0.5,
            },
            zinb_cases: ZinbParams {
                theta: 0.05,
                kappa: 10.0,
                zeta: 0.5,
            },
            i_c0: early_cases.max(1.0) * delay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `(name, split R-hat, effective sample size)` per monitored scalar.
    pub monitored: Vec<(String, f64, f64)>,
    pub acceptance: Vec<Vec<f64>>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub flagged: bool,
}

pub struct StageOneFit {
    /// Retained draws from all chains, chain by chain.
    pub samples: Vec<StageOneParams>,
    pub chains: usize,
    pub diagnostics: Diagnostics,
}

impl StageOneFit {
    /// Posterior draws of `R0(w)` for every week.
    pub fn r0_draws(&self, week: usize) -> Vec<f64> {
        self.samples.iter().map(|p| p.r0_by_week[week]).collect()
    }

    /// `m` draws chosen by uniform thinning across the pooled chains.
    pub fn thinned(&self, m: usize) -> Vec<&StageOneParams> {
        let n = self.samples.len();
        let m = m.min(n).max(1);
        (0..m).map(|i| &self.samples[i * n / m]).collect()
    }
}

/// Sample the stage-one posterior. `blocks` defaults to [`Layout::default_blocks`].
pub fn sample_posterior_with(
    model: &StageOneModel,
    start: Option<&StageOneParams>,
    blocks: Option<Vec<Vec<usize>>>,
) -> StageOneFit {
    let cfg = &model.config.sampler;
    let layout = model.layout;
    let f = |y: &[f64]| model.log_density(y);
    let start = start.cloned().unwrap_or_else(|| model.default_start());
    let mut y0 = model.pack(&start);
    if model.config.start_search_iterations > 0 {
        y0 = maximize(&f, &y0, model.config.start_search_iterations);
    }
    let precision = negative_hessian(&f, &y0, 1e-3, 1.0);
    let blocks = blocks.unwrap_or_else(|| layout.default_blocks());
    let free: Vec<usize> = blocks.iter().flatten().copied().collect();
    let laplace_chol = precision
        .clone()
        .try_inverse()
        .and_then(|c| (0.5 * (&c + c.transpose())).cholesky())
        .map(|c| c.l());
    let inits: Vec<Vec<f64>> = (0..cfg.chains)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000 ^ c as u64);
            for _ in 0..50 {
                let z = DVector::from_iterator(y0.len(), (0..y0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let step = match &laplace_chol {
                    Some(l) => l * z,
                    None => z * 0.01,
                };
                let mut y = y0.clone();
                for &i in &free {
                    y[i] += step[i];
                }
                if f(&y).is_finite() {
                    return y;
                }
            }
            y0.clone()
        })
        .collect();
    let chains = run_chains(&f, &inits, &precision, &blocks, cfg);
    let per_chain: Vec<Vec<StageOneParams>> = chains
        .iter()
        .map(|c| c.samples.iter().map(|y| model.unpack(y).0).collect())
        .collect();
    let diagnostics = diagnose(&per_chain, chains.iter().map(|c| c.acceptance.clone()).collect());
    if diagnostics.flagged {
        warn!(
            "{}: stage-one sampler not converged (max split R-hat {:.3})",
            model.data.region_id, diagnostics.max_rhat
        );
    } else {
        info!(
            "{}: stage-one max split R-hat {:.3}, min ESS {:.0}",
            model.data.region_id, diagnostics.max_rhat, diagnostics.min_ess
        );
    }
    StageOneFit {
        samples: per_chain.into_iter().flatten().collect(),
        chains: cfg.chains,
        diagnostics,
    }
}

pub fn sample_posterior(data: &ClinicalSeries, config: &StageOneConfig) -> Result<StageOneFit> {
    if data.days() == 0 {
        return Err(Error::Contract("clinical series is empty".into()));
    }
    let model = StageOneModel::new(data, config);
    Ok(sample_posterior_with(&model, None, None))
}

fn monitored_scalars(p: &StageOneParams) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = p
        .r0_by_week
        .iter()
        .enumerate()
        .map(|(w, r)| (format!("r0[{w}]"), *r))
        .collect();
    out.push(("iota".into(), p.iota));
    out.push(("log_sigma2_r".into(), p.sigma2_r.ln()));
    out.push(("confirmation_delay".into(), p.confirmation_delay));
    out.push(("theta_deaths".into(), p.zinb_deaths.theta));
    out.push(("theta_cases".into(), p.zinb_cases.theta));
    out
}

pub fn diagnose(per_chain: &[Vec<StageOneParams>], acceptance: Vec<Vec<f64>>) -> Diagnostics {
    let names: Vec<String> = monitored_scalars(&per_chain[0][0]).into_iter().map(|(n, _)| n).collect();
    let series: Vec<Vec<Vec<f64>>> = per_chain
        .iter()
        .map(|chain| {
            let mut cols = vec![Vec::with_capacity(chain.len()); names.len()];
            for p in chain {
                for (k, (_, v)) in monitored_scalars(p).into_iter().enumerate() {
                    cols[k].push(v);
                }
            }
            cols
        })
        .collect();
    let monitored: Vec<(String, f64, f64)> = names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let chains: Vec<Vec<f64>> = series.iter().map(|c| c[k].clone()).collect();
            (name, split_rhat(&chains), effective_sample_size(&chains))
        })
        .collect();
    let max_rhat = monitored.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let min_ess = monitored.iter().map(|m| m.2).fold(f64::INFINITY, f64::min);
    Diagnostics {
        flagged: !(max_rhat <= RHAT_LIMIT),
        monitored,
        acceptance,
        max_rhat,
        min_ess,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneDraw {
    pub params: StageOneParams,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDrawSet {
    pub region_id: String,
    pub population: f64,
    pub p_initial: f64,
    pub epi: EpiParams,
    pub draws: Vec<StageOneDraw>,
    pub diagnostics: Option<Diagnostics>,
}

impl PosteriorDrawSet {
    pub fn from_fit(fit: &StageOneFit, data: &ClinicalSeries, config: &StageOneConfig) -> Result<Self> {
        let draws = fit
            .thinned(config.draws_kept)
            .into_iter()
            .map(|p| {
                let trajectory = p.trajectory(
                    &config.epi,
                    config.p_initial,
                    data.population as f64,
                    data.days(),
                )?;
                Ok(StageOneDraw {
                    params: p.clone(),
                    trajectory,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            region_id: data.region_id.clone(),
            population: data.population as f64,
            p_initial: config.p_initial,
            epi: config.epi,
            draws,
            diagnostics: Some(fit.diagnostics.clone()),
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn posterior_mean_iota(&self) -> f64 {
        self.draws.iter().map(|d| d.params.iota).sum::<f64>() / self.draws.len() as f64
    }

    /// Write `draws.json` and `trajectories.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = DrawSetHeader {
            version: DRAWS_VERSION,
            region_id: self.region_id.clone(),
            population: self.population,
            p_initial: self.p_initial,
            epi: self.epi,
            params: self.draws.iter().map(|d| d.params.clone()).collect(),
            diagnostics: self.diagnostics.clone(),
        };
        let path = dir.join("draws.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("trajectories.bin");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let days = self.draws.first().map_or(0, |d| d.trajectory.days());
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(TRAJ_MAGIC);
        buf.extend_from_slice(&(self.draws.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(days as u64).to_le_bytes());
        for d in &self.draws {
            let t = &d.trajectory;
            for s in &t.states {
                for v in s.as_array() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            for v in t.new_infections.iter().chain(&t.re) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        f.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("draws.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: DrawSetHeader = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if header.version != DRAWS_VERSION {
            return Err(Error::Contract(format!(
                "{}: unsupported draw-set version {}",
                path.display(),
                header.version
            )));
        }
        let path = dir.join("trajectories.bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let corrupt = || Error::Contract(format!("{}: truncated or corrupt", path.display()));
        if bytes.len() < 24 || &bytes[..8] != TRAJ_MAGIC {
            return Err(corrupt());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (n, days) = (word(8) as usize, word(16) as usize);
        let per_draw = (days + 1) * 6 + 2 * days;
        if n != header.params.len() || bytes.len() != 24 + n * per_draw * 8 {
            return Err(corrupt());
        }
        let mut values = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut draws = Vec::with_capacity(n);
        for params in header.params {
            let mut take = |k: usize| -> Vec<f64> { values.by_ref().take(k).collect() };
            let flat = take((days + 1) * 6);
            let states = flat
                .chunks_exact(6)
                .map(|c| crate::epi::CompartmentState::from_array(c.try_into().unwrap()))
                .collect();
            let new_infections = take(days);
            let re = take(days);
            let trajectory = Trajectory {
                population: header.population,
                states,
                new_infections,
                r0: params.r0_by_week[..weeks_for_days(days)].to_vec(),
                re,
            };
            draws.push(StageOneDraw { params, trajectory });
        }
        Ok(Self {
            region_id: header.region_id,
            population: header.population,
            p_initial: header.p_initial,
            epi: header.epi,
            draws,
            diagnostics: header.diagnostics,
        })
    }
}

const DRAWS_VERSION: u32 = 1;
const TRAJ_MAGIC: &[u8; 8] = b"NPITRJ01";

#[derive(Serialize, Deserialize)]
struct DrawSetHeader {
    version: u32,
    region_id: String,
    population: f64,
    p_initial: f64,
    epi: EpiParams,
    params: Vec<StageOneParams>,
    diagnostics: Option<Diagnostics>,
}
