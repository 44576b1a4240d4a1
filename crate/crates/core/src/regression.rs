//! Stage two: hierarchical log-linear regression of weekly R0 on NPIs.
//!
//! For region `s` and week `w`
//!
//! ```text
//! log R0(w) = log R0hat(w) + phi (log R0(w-1) - log R0hat(w-1)) + eps(w)
//! log R0hat(w) = log R0_s + beta_u . u(w) + beta_I I(w-1) + beta_R R(w-1) + beta_D D(w-1)
//! ```
//!
//! with Student-t shocks `eps`. Region coefficients are partially pooled
//! through a normal prior truncated so that no NPI raises transmission.
//! The sampler is a Gibbs scheme on the normal scale-mixture form of the
//! Student-t, with Metropolis steps for the covariance factors, `sigma_eps`
//! and `nu_eps`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::epi::{CompartmentState, EpiParams, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::inference::PosteriorDrawSet;
use crate::ingest::PolicySchedule;
use crate::npi::{PolicyVector, NPI_COUNT};
use crate::stats::{half_t_log_pdf, normal_interval_truncated, normal_upper_truncated, student_t_log_pdf};

/// Multipliers applied to the lagged incidence covariates: infections and
/// removals per 10 people, deaths per 1,000.
pub const COVARIATE_SCALE: [f64; 3] = [10.0, 10.0, 1000.0];

/// Length of the coefficient vector `(beta_u, beta_I, beta_R, beta_D, log R0)`.
pub const THETA_DIM: usize = NPI_COUNT + 4;

const NU_BOUNDS: (f64, f64) = (1.0, 100.0);
const HALF_T_DOF: f64 = 3.0;
const HALF_T_SCALE: f64 = 2.5;

/// Which behavioural controls enter the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Deaths only.
    I,
    /// Removals and deaths.
    II,
    /// Infections, removals and deaths.
    III,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::I, ModelVariant::II, ModelVariant::III];

    /// Whether `(beta_I, beta_R, beta_D)` are free.
    pub fn behavioural(self) -> [bool; 3] {
        match self {
            ModelVariant::I => [false, false, true],
            ModelVariant::II => [false, true, true],
            ModelVariant::III => [true, true, true],
        }
    }

    /// Free positions in the coefficient vector.
    pub fn active(self) -> Vec<usize> {
        let b = self.behavioural();
        (0..THETA_DIM)
            .filter(|&j| j < NPI_COUNT || j == THETA_DIM - 1 || b[j - NPI_COUNT])
            .collect()
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::I => "i",
            ModelVariant::II => "ii",
            ModelVariant::III => "iii",
        })
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(ModelVariant::I),
            "ii" | "2" => Ok(ModelVariant::II),
            "iii" | "3" => Ok(ModelVariant::III),
            other => Err(Error::InvalidParameter(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Weekly incident fractions of infections, removals and deaths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralCovariates {
    pub infections: Vec<f64>,
    pub removals: Vec<f64>,
    pub deaths: Vec<f64>,
}

/// Sums of `delta E`, `gamma I` and `mu R_D` over the days of week `week`
/// among `states[..days]`.
pub fn week_incidence(states: &[CompartmentState], days: usize, week: usize, epi: &EpiParams) -> [f64; 3] {
    let (delta, gamma, mu) = (epi.delta(), epi.gamma(), epi.mu());
    let start = week * DAYS_PER_WEEK;
    let end = ((week + 1) * DAYS_PER_WEEK).min(days);
    let mut out = [0.0; 3];
    for s in &states[start.min(end)..end] {
        out[0] += delta * s.e;
        out[1] += gamma * s.i;
        out[2] += mu * s.r_d;
    }
    out
}

/// Scaled covariates lagged by one week; week 0 has no prior week and gets zeros.
pub fn lagged_covariates(states: &[CompartmentState], days: usize, week: usize, epi: &EpiParams) -> [f64; 3] {
    if week == 0 {
        return [0.0; 3];
    }
    let raw = week_incidence(states, days, week - 1, epi);
    [
        raw[0] * COVARIATE_SCALE[0],
        raw[1] * COVARIATE_SCALE[1],
        raw[2] * COVARIATE_SCALE[2],
    ]
}

/// Weekly covariates from a trajectory's states (`states.len() = days + 1`).
pub fn behavioral_covariates(states: &[CompartmentState], epi: &EpiParams) -> BehavioralCovariates {
    let days = states.len().saturating_sub(1);
    let weeks = days.div_ceil(DAYS_PER_WEEK);
    let mut out = BehavioralCovariates {
        infections: Vec::with_capacity(weeks),
        removals: Vec::with_capacity(weeks),
        deaths: Vec::with_capacity(weeks),
    };
    for w in 0..weeks {
        let [i, r, d] = week_incidence(states, days, w, epi);
        out.infections.push(i);
        out.removals.push(r);
        out.deaths.push(d);
    }
    out
}

impl BehavioralCovariates {
    pub fn weeks(&self) -> usize {
        self.deaths.len()
    }

    /// Scaled values of week `week - 1`, zeros for week 0.
    pub fn lagged(&self, week: usize) -> [f64; 3] {
        if week == 0 {
            return [0.0; 3];
        }
        let w = week - 1;
        [
            self.infections[w] * COVARIATE_SCALE[0],
            self.removals[w] * COVARIATE_SCALE[1],
            self.deaths[w] * COVARIATE_SCALE[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCoeffs {
    pub beta_u: PolicyVector,
    pub beta_i: f64,
    pub beta_r: f64,
    pub beta_d: f64,
    /// R0 with no restrictions and no behavioural response.
    pub r0_baseline: f64,
}

impl RegionCoeffs {
    pub fn to_theta(&self) -> [f64; THETA_DIM] {
        let mut t = [0.0; THETA_DIM];
        t[..NPI_COUNT].copy_from_slice(&self.beta_u);
        t[NPI_COUNT] = self.beta_i;
        t[NPI_COUNT + 1] = self.beta_r;
        t[NPI_COUNT + 2] = self.beta_d;
        t[THETA_DIM - 1] = self.r0_baseline.ln();
        t
    }

    pub fn from_theta(t: &[f64]) -> Self {
        let mut beta_u = [0.0; NPI_COUNT];
        beta_u.copy_from_slice(&t[..NPI_COUNT]);
        Self {
            beta_u,
            beta_i: t[NPI_COUNT],
            beta_r: t[NPI_COUNT + 1],
            beta_d: t[NPI_COUNT + 2],
            r0_baseline: t[THETA_DIM - 1].exp(),
        }
    }

    pub fn validate(&self, variant: ModelVariant) -> Result<()> {
        if let Some(b) = self.beta_u.iter().find(|b| !(**b <= 0.0)) {
            return Err(Error::InvalidParameter(format!("NPI effect {b} must be <= 0")));
        }
        let fixed = variant.behavioural();
        for (k, v) in [self.beta_i, self.beta_r, self.beta_d].into_iter().enumerate() {
            if !fixed[k] && v != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "model {variant} fixes behavioural coefficient {k} at 0"
                )));
            }
        }
        if !(self.r0_baseline > 0.0) {
            return Err(Error::InvalidParameter("baseline R0 must be positive".into()));
        }
        Ok(())
    }
}

/// `log R0hat` for one week given that week's policy and the scaled lagged
/// covariates.
pub fn linear_predictor(c: &RegionCoeffs, u: &PolicyVector, lag: &[f64; 3]) -> f64 {
    let npi: f64 = c.beta_u.iter().zip(u).map(|(b, x)| b * x).sum();
    c.r0_baseline.ln() + npi + c.beta_i * lag[0] + c.beta_r * lag[1] + c.beta_d * lag[2]
}

/// Residual process parameters shared by all regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub phi: f64,
    pub sigma_eps: f64,
    pub nu_eps: f64,
}

/// Shocks `eps(w) = e(w) - phi e(w-1)` of a residual path `e`, with
/// `eps(0) = e(0)`.
pub fn shocks_from_residuals(e: &[f64], phi: f64) -> Vec<f64> {
    e.iter()
        .enumerate()
        .map(|(w, x)| if w == 0 { *x } else { x - phi * e[w - 1] })
        .collect()
}

/// Residual path rebuilt recursively from shocks.
pub fn residuals_from_shocks(eps: &[f64], phi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(eps.len());
    for (w, x) in eps.iter().enumerate() {
        let prev = if w == 0 { 0.0 } else { out[w - 1] };
        out.push(phi * prev + x);
    }
    out
}

/// `sum_{v < w} phi^(w - v) eps(v)`, the AR contribution at week `w`.
pub fn ar_term_unrolled(eps: &[f64], phi: f64, w: usize) -> f64 {
    (0..w).map(|v| phi.powi((w - v) as i32) * eps[v]).sum()
}

/// Log-likelihood of a weekly R0 series under the regression.
pub fn regression_loglik(
    r0: &[f64],
    coeffs: &RegionCoeffs,
    ar: &ArParams,
    schedule: &PolicySchedule,
    cov: &BehavioralCovariates,
) -> Result<f64> {
    if let Some(bad) = r0.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::Contract(format!("R0 must be positive, got {bad}")));
    }
    if schedule.len() < r0.len() || cov.weeks() < r0.len() {
        return Err(Error::Contract(format!(
            "{} weeks of R0 but {} policy weeks and {} covariate weeks",
            r0.len(),
            schedule.len(),
            cov.weeks()
        )));
    }
    if !(ar.phi.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("phi {} outside (-1, 1)", ar.phi)));
    }
    let e: Vec<f64> = r0
        .iter()
        .enumerate()
        .map(|(w, r)| r.ln() - linear_predictor(coeffs, &schedule.weeks[w], &cov.lagged(w)))
        .collect();
    Ok(shocks_from_residuals(&e, ar.phi)
        .iter()
        .map(|x| student_t_log_pdf(*x, ar.nu_eps, ar.sigma_eps))
        .sum())
}

/// `alpha = sum beta_u` and the implied percent reduction `100 (1 - e^alpha)`.
pub fn total_effect(c: &RegionCoeffs) -> (f64, f64) {
    let alpha: f64 = c.beta_u.iter().sum();
    (alpha, 100.0 * (1.0 - alpha.exp()))
}

/// Share of the total effect carried by each NPI.
pub fn stringency_weights(c: &RegionCoeffs) -> Result<PolicyVector> {
    let (alpha, _) = total_effect(c);
    if alpha == 0.0 {
        return Err(Error::UndefinedWeights);
    }
    let mut rho = [0.0; NPI_COUNT];
    for (r, b) in rho.iter_mut().zip(&c.beta_u) {
        *r = b / alpha;
    }
    Ok(rho)
}

/// Regression data of one region for one stage-one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSeries {
    pub region_id: String,
    pub log_r0: Vec<f64>,
    /// Rows `(u(w), I(w-1), R(w-1), D(w-1), 1)`.
    pub design: Vec<[f64; THETA_DIM]>,
}

impl RegionSeries {
    pub fn new(
        region_id: &str,
        r0: &[f64],
        states: &[CompartmentState],
        schedule: &PolicySchedule,
        epi: &EpiParams,
    ) -> Result<Self> {
        if schedule.len() < r0.len() {
            return Err(Error::Contract(format!(
                "{region_id}: schedule has {} weeks, R0 path has {}",
                schedule.len(),
                r0.len()
            )));
        }
        if let Some(bad) = r0.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::Contract(format!("{region_id}: R0 must be positive, got {bad}")));
        }
        let days = states.len() - 1;
        let design = (0..r0.len())
            .map(|w| {
                let mut row = [0.0; THETA_DIM];
                row[..NPI_COUNT].copy_from_slice(&schedule.weeks[w]);
                row[NPI_COUNT..NPI_COUNT + 3].copy_from_slice(&lagged_covariates(states, days, w, epi));
                row[THETA_DIM - 1] = 1.0;
                row
            })
            .collect();
        Ok(Self {
            region_id: region_id.to_owned(),
            log_r0: r0.iter().map(|r| r.ln()).collect(),
            design,
        })
    }

    pub fn weeks(&self) -> usize {
        self.log_r0.len()
    }
}

/// Pooled hyperparameters of one posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEffects {
    /// Global means in coefficient order; fixed coefficients are 0.
    pub theta: Vec<f64>,
    /// Random-effect covariance over the free coefficients, in `active` order.
    pub v: Vec<Vec<f64>>,
    pub active: Vec<usize>,
    pub phi: f64,
    pub sigma_eps: f64,
    pub nu_eps: f64,
}

impl PooledEffects {
    pub fn ar(&self) -> ArParams {
        ArParams {
            phi: self.phi,
            sigma_eps: self.sigma_eps,
            nu_eps: self.nu_eps,
        }
    }

    /// Global means as coefficients (baseline R0 is `exp` of the pooled log).
    pub fn coeffs(&self) -> RegionCoeffs {
        RegionCoeffs::from_theta(&self.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalDraw {
    /// Which stage-one trajectory draw this regression was fitted to.
    pub stage_one_index: usize,
    pub pooled: PooledEffects,
    /// Per region, in the fit's region order.
    pub regions: Vec<RegionCoeffs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalConfig {
    pub variant: ModelVariant,
    pub warmup: usize,
    /// Retained iterations per stage-one trajectory.
    pub iterations: usize,
    pub thin: usize,
    pub seed: u64,
    /// Number of stage-one trajectories to fit; capped by the draws available.
    pub trajectories: usize,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::II,
            warmup: 500,
            iterations: 500,
            thin: 5,
            seed: 20200101,
            trajectories: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalFit {
    pub version: u32,
    pub variant: ModelVariant,
    pub region_ids: Vec<String>,
    pub draws: Vec<HierarchicalDraw>,
}

pub const NPI_FIT_FILE: &str = "npi_draws.json";

impl HierarchicalFit {
    pub fn region_index(&self, region_id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == region_id)
    }

    /// Pooled coefficient draws of coefficient `j`.
    pub fn pooled_draws(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.pooled.theta[j]).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(NPI_FIT_FILE);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|e| Error::json(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(NPI_FIT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Cholesky factor of a correlation matrix from canonical partial
/// correlations, listed row by row below the diagonal.
pub fn corr_cholesky_from_cpc(z: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    l[(0, 0)] = 1.0;
    let mut k = 0;
    for i in 1..d {
        let mut rem = 1.0f64;
        for j in 0..i {
            l[(i, j)] = z[k] * rem.sqrt();
            rem -= l[(i, j)] * l[(i, j)];
            k += 1;
        }
        l[(i, i)] = rem.max(0.0).sqrt();
    }
    l
}

/// LKJ(1) density of the partial correlations: `z` in row `i`, column `j`
/// of the lower triangle is `Beta(b, b)` on (-1, 1) with
/// `b = 1 + (d - 2 - j) / 2`.
fn lkj_cpc_log_density(z: &[f64], d: usize) -> f64 {
    let mut lp = 0.0;
    let mut k = 0;
    for i in 1..d {
        for j in 0..i {
            let b = 1.0 + (d as f64 - 2.0 - j as f64) / 2.0;
            lp += (b - 1.0) * (1.0 - z[k] * z[k]).ln();
            k += 1;
        }
    }
    lp
}

struct RwScale {
    log_step: f64,
}

impl RwScale {
    fn new(step: f64) -> Self {
        Self { log_step: step.ln() }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn adapt(&mut self, accepted: bool, it: usize) {
        let gain = ((it + 1) as f64).powf(-0.6).max(0.01);
        self.log_step += gain * ((accepted as u8 as f64) - 0.44);
    }
}

struct GibbsState {
    theta_s: Vec<DVector<f64>>,
    theta: DVector<f64>,
    log_lambda: Vec<f64>,
    atanh_z: Vec<f64>,
    phi: f64,
    log_sigma: f64,
    log_nu: f64,
    omega: Vec<Vec<f64>>,
}

/// One region's data restricted to the free coefficients.
struct RegionData {
    y: Vec<f64>,
    x: DMatrix<f64>,
}

impl GibbsState {
    fn lambda(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }

    fn z(&self) -> Vec<f64> {
        self.atanh_z.iter().map(|a| a.tanh()).collect()
    }

    fn v_cholesky(&self) -> DMatrix<f64> {
        v_cholesky(&self.lambda(), &self.z())
    }
}

fn v_cholesky(lambda: &[f64], z: &[f64]) -> DMatrix<f64> {
    let d = lambda.len();
    let mut l = corr_cholesky_from_cpc(z, d);
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] *= lambda[i];
        }
    }
    l
}

/// Sum over regions of `log N(theta_s; theta, L L^T)` up to a constant.
fn random_effect_log_density(l: &DMatrix<f64>, theta: &DVector<f64>, theta_s: &[DVector<f64>]) -> f64 {
    let log_det: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
    let mut lp = -(theta_s.len() as f64) * log_det;
    for t in theta_s {
        let r = t - theta;
        match l.solve_lower_triangular(&r) {
            Some(z) => lp -= 0.5 * z.norm_squared(),
            None => return f64::NEG_INFINITY,
        }
    }
    lp
}

fn residuals(data: &RegionData, theta_s: &DVector<f64>) -> Vec<f64> {
    let fit = &data.x * theta_s;
    data.y.iter().zip(fit.iter()).map(|(y, f)| y - f).collect()
}

/// Run the Gibbs sampler for one set of region series. Returns retained
/// `(pooled, region coefficients)` draws.
pub fn sample_hierarchical(
    series: &[RegionSeries],
    variant: ModelVariant,
    warmup: usize,
    iterations: usize,
    thin: usize,
    seed: u64,
) -> Result<Vec<(PooledEffects, Vec<RegionCoeffs>)>> {
    if series.is_empty() {
        return Err(Error::Contract("no regions to fit".into()));
    }
    let active = variant.active();
    let d = active.len();
    let n_npi = NPI_COUNT;
    let data: Vec<RegionData> = series
        .iter()
        .map(|s| RegionData {
            y: s.log_r0.clone(),
            x: DMatrix::from_fn(s.weeks(), d, |w, k| s.design[w][active[k]]),
        })
        .collect();
    let n_regions = data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mean_y: f64 = data.iter().flat_map(|r| r.y.iter()).sum::<f64>()
        / data.iter().map(|r| r.y.len()).sum::<usize>().max(1) as f64;
    let mut start = DVector::zeros(d);
    for k in 0..n_npi {
        start[k] = -0.01;
    }
    start[d - 1] = mean_y;
    let mut st = GibbsState {
        theta_s: vec![start.clone(); data.len()],
        theta: start,
        log_lambda: vec![(0.1f64).ln(); d],
        atanh_z: vec![0.0; d * (d - 1) / 2],
        phi: 0.5,
        log_sigma: (0.1f64).ln(),
        log_nu: (5.0f64).ln(),
        omega: data.iter().map(|r| vec![1.0; r.y.len()]).collect(),
    };
    let mut lambda_steps: Vec<RwScale> = (0..d).map(|_| RwScale::new(0.5)).collect();
    let mut z_steps: Vec<RwScale> = st.atanh_z.iter().map(|_| RwScale::new(0.5)).collect();
    let mut sigma_step = RwScale::new(0.2);
    let mut nu_step = RwScale::new(0.5);
    let mut out = Vec::with_capacity(iterations / thin.max(1) + 1);

    for it in 0..warmup + iterations {
        let adapting = it < warmup;

        // Shocks under the current coefficients.
        let res: Vec<Vec<f64>> = data.iter().zip(&st.theta_s).map(|(r, t)| residuals(r, t)).collect();
        let eps: Vec<Vec<f64>> = res.iter().map(|e| shocks_from_residuals(e, st.phi)).collect();

        // (sigma, nu) with the scale mixture integrated out.
        let t_loglik = |log_sigma: f64, log_nu: f64| -> f64 {
            let (s, n) = (log_sigma.exp(), log_nu.exp());
            eps.iter()
                .flat_map(|e| e.iter())
                .map(|x| student_t_log_pdf(*x, n, s))
                .sum::<f64>()
        };
        let sigma_target =
            |ls: f64, ln: f64| t_loglik(ls, ln) + half_t_log_pdf(ls.exp(), HALF_T_DOF, HALF_T_SCALE) + ls;
        let current = sigma_target(st.log_sigma, st.log_nu);
        let prop = st.log_sigma + sigma_step.step() * rng.sample::<f64, _>(StandardNormal);
        let cand = sigma_target(prop, st.log_nu);
        let accept = rng.random::<f64>().ln() < cand - current;
        if accept {
            st.log_sigma = prop;
        }
        if adapting {
            sigma_step.adapt(accept, it);
        }
        let (nu_lo, nu_hi) = (NU_BOUNDS.0.ln(), NU_BOUNDS.1.ln());
        let prop = st.log_nu + nu_step.step() * rng.sample::<f64, _>(StandardNormal);
        let accept = prop > nu_lo
            && prop < nu_hi
            && rng.random::<f64>().ln() < t_loglik(st.log_sigma, prop) - t_loglik(st.log_sigma, st.log_nu);
        if accept {
            st.log_nu = prop;
        }
        if adapting {
            nu_step.adapt(accept, it);
        }
        let sigma = st.log_sigma.exp();
        let nu = st.log_nu.exp();

        // Mixing weights.
        for (om, e) in st.omega.iter_mut().zip(&eps) {
            for (o, x) in om.iter_mut().zip(e) {
                let rate = 0.5 * (nu + x * x / (sigma * sigma));
                *o = Gamma::new(0.5 * (nu + 1.0), 1.0 / rate)
                    .expect("positive gamma parameters")
                    .sample(&mut rng);
            }
        }

        // Region coefficients: coordinate-wise from the truncated normal
        // full conditional.
        let lv = st.v_cholesky();
        let v_inv = {
            let li = lv.clone().try_inverse().ok_or_else(|| Error::InvalidParameter("singular random-effect covariance".into()))?;
            li.transpose() * li
        };
        let prior_lin = &v_inv * &st.theta;
        for (s, r) in data.iter().enumerate() {
            let n = r.y.len();
            let mut xt = r.x.clone();
            let mut yt = r.y.clone();
            for w in (1..n).rev() {
                yt[w] -= st.phi * r.y[w - 1];
                for k in 0..d {
                    xt[(w, k)] -= st.phi * r.x[(w - 1, k)];
                }
            }
            let h: Vec<f64> = st.omega[s].iter().map(|o| o / (sigma * sigma)).collect();
            let mut q = v_inv.clone();
            let mut b = prior_lin.clone();
            for w in 0..n {
                let row = xt.row(w);
                for a in 0..d {
                    b[a] += h[w] * row[a] * yt[w];
                    for c in 0..d {
                        q[(a, c)] += h[w] * row[a] * row[c];
                    }
                }
            }
            let t = &mut st.theta_s[s];
            for _ in 0..2 {
                for k in 0..d {
                    let mut m = b[k];
                    for j in 0..d {
                        if j != k {
                            m -= q[(k, j)] * t[j];
                        }
                    }
                    let prec = q[(k, k)];
                    let (mean, sd) = (m / prec, prec.sqrt().recip());
                    t[k] = if k < n_npi {
                        normal_upper_truncated(mean, sd, 0.0, &mut rng)
                    } else {
                        mean + sd * rng.sample::<f64, _>(StandardNormal)
                    };
                }
            }
        }

        // AR coefficient.
        let res: Vec<Vec<f64>> = data.iter().zip(&st.theta_s).map(|(r, t)| residuals(r, t)).collect();
        let (mut prec, mut lin) = (0.0, 0.0);
        for (e, om) in res.iter().zip(&st.omega) {
            for w in 1..e.len() {
                let h = om[w] / (sigma * sigma);
                prec += h * e[w - 1] * e[w - 1];
                lin += h * e[w] * e[w - 1];
            }
        }
        if prec > 0.0 {
            st.phi = normal_interval_truncated(lin / prec, prec.sqrt().recip(), -1.0, 1.0, &mut rng);
            st.phi = st.phi.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        } else {
            st.phi = rng.random_range(-1.0..1.0);
        }

        // Global means, flat prior.
        let mut mean = DVector::zeros(d);
        for t in &st.theta_s {
            mean += t;
        }
        mean /= n_regions;
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        st.theta = mean + &lv * z / n_regions.sqrt();

        // Scales and correlations.
        let mut lambda = st.lambda();
        let mut zc = st.z();
        let mut current = random_effect_log_density(&v_cholesky(&lambda, &zc), &st.theta, &st.theta_s);
        for j in 0..d {
            let old = st.log_lambda[j];
            let prop = old + lambda_steps[j].step() * rng.sample::<f64, _>(StandardNormal);
            lambda[j] = prop.exp();
            let cand = random_effect_log_density(&v_cholesky(&lambda, &zc), &st.theta, &st.theta_s);
            let log_ratio = cand - current + half_t_log_pdf(prop.exp(), HALF_T_DOF, HALF_T_SCALE) + prop
                - half_t_log_pdf(old.exp(), HALF_T_DOF, HALF_T_SCALE)
                - old;
            let accept = rng.random::<f64>().ln() < log_ratio;
            if accept {
                st.log_lambda[j] = prop;
                current = cand;
            } else {
                lambda[j] = old.exp();
            }
            if adapting {
                lambda_steps[j].adapt(accept, it);
            }
        }
        for k in 0..zc.len() {
            let old = st.atanh_z[k];
            let prop = old + z_steps[k].step() * rng.sample::<f64, _>(StandardNormal);
            let z_old = zc[k];
            zc[k] = prop.tanh();
            let cand = random_effect_log_density(&v_cholesky(&lambda, &zc), &st.theta, &st.theta_s);
            let prior_old = lkj_cpc_log_density(&{
                let mut t = zc.clone();
                t[k] = z_old;
                t
            }, d);
            let prior_new = lkj_cpc_log_density(&zc, d);
            // d tanh(a)/da = 1 - tanh(a)^2.
            let log_ratio = cand - current + prior_new - prior_old + (1.0 - zc[k] * zc[k]).ln()
                - (1.0 - z_old * z_old).ln();
            let accept = cand.is_finite() && rng.random::<f64>().ln() < log_ratio;
            if accept {
                st.atanh_z[k] = prop;
                current = cand;
            } else {
                zc[k] = z_old;
            }
            if adapting {
                z_steps[k].adapt(accept, it);
            }
        }

        if !adapting && (it - warmup) % thin.max(1) == 0 {
            let lv = st.v_cholesky();
            let v = &lv * lv.transpose();
            let expand = |t: &DVector<f64>| {
                let mut full = vec![0.0; THETA_DIM];
                for (k, &j) in active.iter().enumerate() {
                    full[j] = t[k];
                }
                full
            };
            out.push((
                PooledEffects {
                    theta: expand(&st.theta),
                    v: (0..d).map(|a| (0..d).map(|c| v[(a, c)]).collect()).collect(),
                    active: active.clone(),
                    phi: st.phi,
                    sigma_eps: sigma,
                    nu_eps: nu,
                },
                st.theta_s.iter().map(|t| RegionCoeffs::from_theta(&expand(t))).collect(),
            ));
        }
    }
    Ok(out)
}

/// Fit the hierarchical model to each of the first `config.trajectories`
/// stage-one draws shared by all regions and pool the results.
pub fn fit_hierarchical(
    sets: &[PosteriorDrawSet],
    schedules: &[PolicySchedule],
    config: &HierarchicalConfig,
) -> Result<HierarchicalFit> {
    if sets.is_empty() || sets.len() != schedules.len() {
        return Err(Error::Contract(format!(
            "{} draw sets for {} schedules",
            sets.len(),
            schedules.len()
        )));
    }
    let m = sets.iter().map(|s| s.len()).min().unwrap_or(0).min(config.trajectories);
    if m == 0 {
        return Err(Error::Contract("no stage-one draws to fit".into()));
    }
    let series_for = |i: usize| -> Result<Vec<RegionSeries>> {
        sets.iter()
            .zip(schedules)
            .map(|(set, sched)| {
                let draw = &set.draws[i];
                RegionSeries::new(&set.region_id, &draw.params.r0_by_week, &draw.trajectory.states, sched, &set.epi)
            })
            .collect()
    };
    let jobs: Vec<usize> = (0..m).collect();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(m);
    let chunks: Vec<Vec<usize>> = (0..workers)
        .map(|k| jobs.iter().copied().filter(|j| j % workers == k).collect())
        .collect();
    let results: Vec<Result<Vec<(usize, Vec<(PooledEffects, Vec<RegionCoeffs>)>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                let series_for = &series_for;
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&i| {
                            let series = series_for(i)?;
                            let draws = sample_hierarchical(
                                &series,
                                config.variant,
                                config.warmup,
                                config.iterations,
                                config.thin,
                                config.seed.wrapping_add(i as u64),
                            )?;
                            Ok((i, draws))
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("regression worker panicked")).collect()
    });
    let mut per_index = Vec::with_capacity(m);
    for r in results {
        per_index.extend(r?);
    }
    per_index.sort_by_key(|(i, _)| *i);
    let draws = per_index
        .into_iter()
        .flat_map(|(i, ds)| {
            ds.into_iter().map(move |(pooled, regions)| HierarchicalDraw {
                stage_one_index: i,
                pooled,
                regions,
            })
        })
        .collect::<Vec<_>>();
    info!("stage two: {} pooled draws from {m} trajectories", draws.len());
    Ok(HierarchicalFit {
        version: 1,
        variant: config.variant,
        region_ids: sets.iter().map(|s| s.region_id.clone()).collect(),
        draws,
    })
}
