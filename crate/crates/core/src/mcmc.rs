//! Blockwise adaptive random-walk Metropolis on an unconstrained space, with
//! the transforms and convergence diagnostics it needs.
//!
//! Each block keeps its own Gaussian proposal. During warmup the proposal
//! covariance tracks the empirical covariance of the block and a global
//! scale is tuned towards a target acceptance rate. Both are frozen once
//! warmup ends so the retained chain is a plain Metropolis chain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

pub fn inv_logit(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `ln d/dy inv_logit(y)`.
pub fn log_inv_logit_jacobian(y: f64) -> f64 {
    -(y.abs()) - 2.0 * (-(y.abs())).exp().ln_1p()
}

/// Affine-logit map between the real line and an open interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn to_unconstrained(&self, x: f64) -> f64 {
        logit((x - self.lo) / (self.hi - self.lo))
    }

    pub fn from_unconstrained(&self, y: f64) -> f64 {
        self.lo + (self.hi - self.lo) * inv_logit(y)
    }

    pub fn log_jacobian(&self, y: f64) -> f64 {
        (self.hi - self.lo).ln() + log_inv_logit_jacobian(y)
    }
}

/// Stick-breaking map from `R^{K-1}` onto the `K`-simplex, centred so that
/// zero maps to the uniform point.
pub fn simplex_from_unconstrained(y: &[f64], out: &mut [f64]) -> f64 {
    let k = out.len();
    debug_assert_eq!(y.len() + 1, k);
    let mut remaining = 1.0;
    let mut log_j = 0.0;
    for i in 0..k - 1 {
        let shifted = y[i] - ((k - 1 - i) as f64).ln();
        let z = inv_logit(shifted);
        out[i] = remaining * z;
        log_j += log_inv_logit_jacobian(shifted) + remaining.ln();
        remaining -= out[i];
    }
    out[k - 1] = remaining.max(0.0);
    log_j
}

pub fn simplex_to_unconstrained(x: &[f64]) -> Vec<f64> {
    let k = x.len();
    let mut remaining = 1.0;
    let mut y = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let z = x[i] / remaining;
        y.push(logit(z) + ((k - 1 - i) as f64).ln());
        remaining -= x[i];
    }
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Retained iterations per chain.
    pub iterations: usize,
    /// Keep every `thin`-th retained iteration.
    pub thin: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            iterations: 2000,
            thin: 1,
            seed: 20200101,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Retained unconstrained states.
    pub samples: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Post-warmup acceptance rate per block.
    pub acceptance: Vec<f64>,
}

const PRIOR_WEIGHT: f64 = 200.0;

struct BlockState {
    idx: Vec<usize>,
    log_scale: f64,
    chol: DMatrix<f64>,
    prior_cov: DMatrix<f64>,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
    n: usize,
    accepted: usize,
    proposed: usize,
}

impl BlockState {
    fn new(idx: Vec<usize>, precision: &DMatrix<f64>) -> Self {
        let d = idx.len();
        // Conditional covariance of the block given the rest.
        let sub = DMatrix::from_fn(d, d, |a, b| precision[(idx[a], idx[b])]);
        let prior_cov = sub
            .try_inverse()
            .map(|m| 0.5 * (&m + m.transpose()))
            .unwrap_or_else(|| DMatrix::identity(d, d) * 0.01);
        let chol = prior_cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::identity(d, d) * 0.1);
        Self {
            log_scale: (2.38 / (d as f64).sqrt()).ln(),
            chol,
            prior_cov,
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
            n: 0,
            idx,
            accepted: 0,
            proposed: 0,
        }
    }

    fn target(&self) -> f64 {
        if self.idx.len() == 1 {
            0.44
        } else {
            0.234
        }
    }

    fn observe(&mut self, x: &[f64]) {
        let v = DVector::from_iterator(self.idx.len(), self.idx.iter().map(|&i| x[i]));
        self.n += 1;
        let delta = &v - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &v - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn refresh_proposal(&mut self) {
        let d = self.idx.len();
        if self.n < 2 * d + 10 {
            return;
        }
        // Shrink the empirical covariance towards the initial guess.
        let n0 = PRIOR_WEIGHT;
        let n = self.n as f64;
        let mut cov = (&self.scatter + &self.prior_cov * n0) / (n - 1.0 + n0);
        let avg = cov.trace() / d as f64;
        for i in 0..d {
            cov[(i, i)] += 1e-6 * avg.max(1e-12);
        }
        if let Some(ch) = cov.cholesky() {
            self.chol = ch.l();
        }
    }
}

/// Run one chain. `blocks` cover (a subset of) the coordinates; any
/// coordinate in no block stays at its initial value. `precision` is an
/// initial guess of the posterior precision matrix used to seed each block's
/// proposal.
pub fn run_chain<F>(
    log_density: &F,
    init: &[f64],
    precision: &DMatrix<f64>,
    blocks: &[Vec<usize>],
    warmup: usize,
    iterations: usize,
    thin: usize,
    seed: u64,
) -> ChainOutput
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = init.to_vec();
    let mut lp = log_density(&x);
    assert!(lp.is_finite(), "initial point has log density {lp}");
    let mut states: Vec<BlockState> = blocks
        .iter()
        .map(|b| BlockState::new(b.clone(), precision))
        .collect();
    let collect_from = warmup / 4;
    let mut samples = Vec::with_capacity(iterations / thin.max(1) + 1);
    let mut trace = Vec::with_capacity(samples.capacity());
    let mut proposal = x.clone();
    for it in 0..warmup + iterations {
        let adapting = it < warmup;
        for b in &mut states {
            let d = b.idx.len();
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let step = &b.chol * z * b.log_scale.exp();
            proposal.copy_from_slice(&x);
            for (k, &i) in b.idx.iter().enumerate() {
                proposal[i] += step[k];
            }
            let lp_new = log_density(&proposal);
            let log_alpha = (lp_new - lp).min(0.0);
            let accept = lp_new.is_finite() && rng.random::<f64>().ln() < log_alpha;
            if accept {
                x.copy_from_slice(&proposal);
                lp = lp_new;
            }
            if adapting {
                let alpha = if lp_new.is_finite() { log_alpha.exp() } else { 0.0 };
                let gain = ((it + 1) as f64).powf(-0.6).max(0.01);
                b.log_scale += gain * (alpha - b.target());
                if it >= collect_from {
                    b.observe(&x);
                    if (it - collect_from) % 50 == 49 {
                        b.refresh_proposal();
                    }
                }
            } else {
                b.proposed += 1;
                b.accepted += accept as usize;
            }
        }
        if it == warmup {
            for b in &mut states {
                b.refresh_proposal();
            }
        }
        if !adapting && (it - warmup) % thin.max(1) == 0 {
            samples.push(x.clone());
            trace.push(lp);
        }
    }
    ChainOutput {
        samples,
        log_density: trace,
        acceptance: states
            .iter()
            .map(|b| b.accepted as f64 / b.proposed.max(1) as f64)
            .collect(),
    }
}

/// Run `config.chains` chains on scoped threads. Chain `c` is seeded with
/// `config.seed + c` and starts from `inits[c]`.
pub fn run_chains<F>(
    log_density: &F,
    inits: &[Vec<f64>],
    precision: &DMatrix<f64>,
    blocks: &[Vec<usize>],
    config: &SamplerConfig,
) -> Vec<ChainOutput>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| {
                let init = &inits[c % inits.len()];
                scope.spawn(move || {
                    run_chain(
                        log_density,
                        init,
                        precision,
                        blocks,
                        config.warmup,
                        config.iterations,
                        config.thin,
                        config.seed.wrapping_add(c as u64),
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    })
}

/// Precision matrix of independent coordinates with the given scales.
pub fn diagonal_precision(scales: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        scales.len(),
        scales.iter().map(|s| 1.0 / (s * s)),
    ))
}

fn numerical_gradient<F: Fn(&[f64]) -> f64 + ?Sized>(f: &F, x: &[f64], h: f64) -> DVector<f64> {
    let mut y = x.to_vec();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            let g = (up - down) / (2.0 * h);
            if g.is_finite() {
                g
            } else {
                0.0
            }
        }),
    )
}

/// Maximize `f` by BFGS with central-difference gradients and a
/// backtracking line search.
pub fn maximize<F: Fn(&[f64]) -> f64 + ?Sized>(f: &F, start: &[f64], max_iter: usize) -> Vec<f64> {
    let n = start.len();
    let h = 1e-5;
    let mut x = DVector::from_column_slice(start);
    let mut fx = f(x.as_slice());
    let mut g = numerical_gradient(f, x.as_slice(), h);
    let mut hinv = DMatrix::<f64>::identity(n, n) * 0.01;
    for _ in 0..max_iter {
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(n, n) * 0.01;
            dir = &g * 0.01;
        }
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = &x + &dir * step;
            let fc = f(cand.as_slice());
            if fc.is_finite() && fc >= fx + 1e-4 * step * dir.dot(&g) {
                next = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn)) = next else { break };
        let gn = numerical_gradient(f, xn.as_slice(), h);
        let s_vec = &xn - &x;
        // The objective is maximized, so curvature pairs use the negated gradient.
        let y_vec = &g - &gn;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s_vec * y_vec.transpose() * rho;
            let b = &i - &y_vec * s_vec.transpose() * rho;
            hinv = &a * &hinv * &b + &s_vec * s_vec.transpose() * rho;
        }
        let converged = (fxn - fx).abs() < 1e-8 * (1.0 + fx.abs());
        x = xn;
        fx = fxn;
        g = gn;
        if converged {
            break;
        }
    }
    x.as_slice().to_vec()
}

/// Negative Hessian of `f` at `x` by central differences, projected onto the
/// positive definite cone with eigenvalues at least `floor`.
pub fn negative_hessian<F: Fn(&[f64]) -> f64 + ?Sized>(f: &F, x: &[f64], h: f64, floor: f64) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut eval = |d: &[(usize, f64)]| {
        for &(i, v) in d {
            y[i] += v;
        }
        let r = f(&y);
        for &(i, v) in d {
            y[i] -= v;
        }
        if r.is_finite() {
            r
        } else {
            f0 - 1e6
        }
    };
    let mut hm = DMatrix::zeros(n, n);
    for i in 0..n {
        let d2 = (eval(&[(i, h)]) - 2.0 * f0 + eval(&[(i, -h)])) / (h * h);
        hm[(i, i)] = -d2;
        for j in 0..i {
            let v = (eval(&[(i, h), (j, h)]) - eval(&[(i, h), (j, -h)]) - eval(&[(i, -h), (j, h)])
                + eval(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hm[(i, j)] = -v;
            hm[(j, i)] = -v;
        }
    }
    let eig = hm.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Split-R-hat of one scalar across chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    let m = halves.len() as f64;
    let n = halves[0].len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    chains
        .iter()
        .flat_map(|c| [&c[..n], &c[n..2 * n]])
        .collect()
}

/// Effective sample size across chains with Geyer's initial positive
/// sequence truncation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let autocov = |c: &[f64], mu: f64, lag: usize| -> f64 {
        (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64
    };
    let var0: Vec<f64> = chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, 0)).collect();
    let w = var0.iter().sum::<f64>() / m as f64 * n as f64 / (n as f64 - 1.0);
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        n as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return (m * n) as f64;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (m * n) as f64 / tau.max(1.0 / (m * n) as f64)
}
