//! Gaussian state-space model: data generation, likelihoods, conjugate full
//! conditionals, sufficient statistics, and the exact joint posterior.
//!
//! The model is
//!   y_{t,i} ~ N(theta_t, sigma^2),  theta_1 ~ N(0, phi^2),
//!   theta_t | theta_{t-1} ~ N(theta_{t-1}, phi^2),
//! with fixed variances. Because every full conditional is Gaussian and the
//! joint posterior over theta_{1:t} has a tridiagonal precision matrix, the
//! exact posterior is available and serves as the ground-truth oracle for all
//! streaming samplers.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::linalg::{dense_cholesky, lower_mul, max_asymmetry, TridiagCholesky};
use crate::rng::{SeedTree, StreamRng};
use crate::textio::{fmt17, header_field, parse_f64, parse_usize};

const LN_2PI: f64 = 1.8378770664093453;

/// Fixed observation variance sigma^2 and state-evolution variance phi^2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmHyperParams {
    pub sigma2: f64,
    pub phi2: f64,
}

impl SsmHyperParams {
    pub fn new(sigma2: f64, phi2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !(phi2 > 0.0) {
            return Err(Error::config(format!(
                "variances must be positive: sigma2={sigma2}, phi2={phi2}"
            )));
        }
        Ok(SsmHyperParams { sigma2, phi2 })
    }
}

/// The raw observations for one time step. Empty batches are legal and
/// contribute nothing to the likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    pub t: usize,
    pub values: Vec<f64>,
}

impl DataBatch {
    pub fn n(&self) -> usize {
        self.values.len()
    }
}

/// Exponential-family reduction of a batch: (n, sum y, sum y^2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SufficientStats {
    pub n: usize,
    pub sum_y: f64,
    pub sum_y2: f64,
}

pub fn sufficient_stats(batch: &DataBatch) -> SufficientStats {
    SufficientStats {
        n: batch.n(),
        sum_y: batch.values.iter().sum(),
        sum_y2: batch.values.iter().map(|y| y * y).sum(),
    }
}

/// Scalar Gaussian described by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianDist {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianDist {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::contract(format!("variance must be positive: {variance}")));
        }
        Ok(GaussianDist { mean, variance })
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        Normal::new(self.mean, self.sd()).unwrap().sample(rng)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = x - self.mean;
        -0.5 * (LN_2PI + self.variance.ln()) - z * z / (2.0 * self.variance)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        statrs::distribution::Normal::new(self.mean, self.sd())
            .unwrap()
            .cdf(x)
    }
}

/// Multivariate Gaussian with explicit mean and covariance; covariance must be
/// symmetric (to 1e-12) and positive definite.
#[derive(Clone, Debug)]
pub struct GaussianMVDist {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl GaussianMVDist {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        if covariance.len() != mean.len() {
            return Err(Error::contract("mean/covariance dimension mismatch"));
        }
        if max_asymmetry(&covariance) > 1e-12 {
            return Err(Error::contract("covariance is not symmetric"));
        }
        let chol = dense_cholesky(&covariance)?;
        Ok(GaussianMVDist {
            mean,
            covariance,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    pub fn marginal(&self, coord: usize) -> GaussianDist {
        GaussianDist {
            mean: self.mean[coord],
            variance: self.covariance[coord][coord],
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let std = Normal::new(0.0, 1.0).unwrap();
        let z: Vec<f64> = (0..self.dim()).map(|_| std.sample(rng)).collect();
        let mut x = lower_mul(&self.chol, &z);
        for (xi, mi) in x.iter_mut().zip(&self.mean) {
            *xi += mi;
        }
        x
    }
}

/// A generated dataset: hyperparameters, batches for t = 1..T, and the true
/// state path (kept for reporting only).
#[derive(Clone, Debug, PartialEq)]
pub struct SsmDataset {
    pub hyper: SsmHyperParams,
    pub batches: Vec<DataBatch>,
    pub true_states: Vec<f64>,
    /// Nominal per-step observation count (recorded in the file header).
    pub n_per_step: usize,
    pub seed: u64,
}

impl SsmDataset {
    pub fn horizon(&self) -> usize {
        self.batches.len()
    }

    pub fn stats_through(&self, upto_t: usize) -> Vec<SufficientStats> {
        self.batches[..upto_t].iter().map(sufficient_stats).collect()
    }
}

/// Draw theta_{1:T} from the state evolution prior, then n i.i.d. observations
/// per step. Pure function of its arguments.
pub fn generate_data(
    horizon: usize,
    n: usize,
    hyper: SsmHyperParams,
    seed: u64,
) -> Result<SsmDataset> {
    if horizon < 1 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let mut rng = SeedTree::new(seed).child(0x55_51).rng();
    let state_step = Normal::new(0.0, hyper.phi2.sqrt()).unwrap();
    let mut true_states = Vec::with_capacity(horizon);
    let mut prev = 0.0;
    for _ in 0..horizon {
        let theta = prev + state_step.sample(&mut rng);
        true_states.push(theta);
        prev = theta;
    }
    let obs_sd = hyper.sigma2.sqrt();
    let batches = true_states
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let noise = Normal::new(0.0, obs_sd).unwrap();
            DataBatch {
                t: i + 1,
                values: (0..n).map(|_| theta + noise.sample(&mut rng)).collect(),
            }
        })
        .collect();
    Ok(SsmDataset {
        hyper,
        batches,
        true_states,
        n_per_step: n,
        seed,
    })
}

/// Batch log-likelihood evaluated from sufficient statistics only:
/// -(n/2) log(2 pi sigma^2) - (sum_y2 - 2 theta sum_y + n theta^2) / (2 sigma^2).
pub fn log_likelihood(stats: &SufficientStats, theta_t: f64, hyper: &SsmHyperParams) -> f64 {
    if stats.n == 0 {
        return 0.0;
    }
    let n = stats.n as f64;
    -(n / 2.0) * (LN_2PI + hyper.sigma2.ln())
        - (stats.sum_y2 - 2.0 * theta_t * stats.sum_y + n * theta_t * theta_t)
            / (2.0 * hyper.sigma2)
}

/// Conjugate full conditional of the newest state:
/// N(V_t C_t, V_t) with V_t = (1/phi^2 + n/sigma^2)^-1 and
/// C_t = theta_{t-1}/phi^2 + sum_y/sigma^2.
pub fn full_conditional_theta_t(
    theta_prev: f64,
    stats: &SufficientStats,
    hyper: &SsmHyperParams,
) -> GaussianDist {
    let v = 1.0 / (1.0 / hyper.phi2 + stats.n as f64 / hyper.sigma2);
    let c = theta_prev / hyper.phi2 + stats.sum_y / hyper.sigma2;
    GaussianDist {
        mean: v * c,
        variance: v,
    }
}

/// Full conditional of an arbitrary component theta_ell given its neighbors.
/// `theta_left` is None exactly when ell = 1 (the prior mean 0 stands in);
/// `theta_right` is None when ell is the latest step.
pub fn full_conditional_theta_ell(
    ell: usize,
    theta_left: Option<f64>,
    theta_right: Option<f64>,
    stats: &SufficientStats,
    hyper: &SsmHyperParams,
) -> Result<GaussianDist> {
    if (ell == 1) != theta_left.is_none() {
        return Err(Error::contract(format!(
            "left neighbor presence disagrees with ell={ell}"
        )));
    }
    if ell == 0 {
        return Err(Error::contract("time indices start at 1"));
    }
    let left = theta_left.unwrap_or(0.0);
    let mut precision = stats.n as f64 / hyper.sigma2 + 1.0 / hyper.phi2;
    let mut weighted = stats.sum_y / hyper.sigma2 + left / hyper.phi2;
    if let Some(right) = theta_right {
        precision += 1.0 / hyper.phi2;
        weighted += right / hyper.phi2;
    }
    GaussianDist::new(weighted / precision, 1.0 / precision)
}

/// Exact joint posterior p(theta_{1:t} | y_{1:t}) via the tridiagonal
/// precision matrix
///   Q_ll = n_l/sigma^2 + 1/phi^2 + [l < t]/phi^2,  Q_{l,l+1} = -1/phi^2,
/// with mean solving Q mu = b, b_l = sum_y_l / sigma^2.
pub fn exact_posterior(dataset: &SsmDataset, upto_t: usize) -> Result<GaussianMVDist> {
    if upto_t < 1 || upto_t > dataset.horizon() {
        return Err(Error::contract(format!(
            "upto_t={upto_t} outside 1..={}",
            dataset.horizon()
        )));
    }
    let stats = dataset.stats_through(upto_t);
    exact_posterior_from_stats(&stats, &dataset.hyper)
}

/// Same as [`exact_posterior`] but from precomputed per-step statistics.
pub fn exact_posterior_from_stats(
    stats: &[SufficientStats],
    hyper: &SsmHyperParams,
) -> Result<GaussianMVDist> {
    let t = stats.len();
    if t == 0 {
        return Err(Error::contract("need at least one batch"));
    }
    let inv_phi2 = 1.0 / hyper.phi2;
    let mut diag = Vec::with_capacity(t);
    let mut b = Vec::with_capacity(t);
    for (idx, s) in stats.iter().enumerate() {
        let mut q = s.n as f64 / hyper.sigma2 + inv_phi2;
        if idx + 1 < t {
            q += inv_phi2;
        }
        diag.push(q);
        b.push(s.sum_y / hyper.sigma2);
    }
    let off = vec![-inv_phi2; t - 1];
    let chol = TridiagCholesky::factor(&diag, &off)?;
    let mean = chol.solve(&b);
    let covariance = chol.inverse();
    GaussianMVDist::new(mean, covariance)
}

// ---------------------------------------------------------------------------
// Dataset serialization: header block plus one row per observation (t, i, y).
// ---------------------------------------------------------------------------

pub fn write_dataset(dataset: &SsmDataset, out: &mut impl Write) -> Result<()> {
    writeln!(out, "# ssm-dataset v1")?;
    writeln!(
        out,
        "# T={} n={} sigma2={} phi2={} seed={}",
        dataset.horizon(),
        dataset.n_per_step,
        fmt17(dataset.hyper.sigma2),
        fmt17(dataset.hyper.phi2),
        dataset.seed
    )?;
    for (idx, theta) in dataset.true_states.iter().enumerate() {
        writeln!(out, "# state {} {}", idx + 1, fmt17(*theta))?;
    }
    writeln!(out, "t,i,y")?;
    for batch in &dataset.batches {
        for (i, y) in batch.values.iter().enumerate() {
            writeln!(out, "{},{},{}", batch.t, i + 1, fmt17(*y))?;
        }
    }
    Ok(())
}

pub fn read_dataset(input: &mut impl BufRead) -> Result<SsmDataset> {
    let mut horizon = None;
    let mut n_per_step = 0;
    let mut sigma2 = None;
    let mut phi2 = None;
    let mut seed = 0;
    let mut true_states: Vec<(usize, f64)> = Vec::new();
    let mut rows: Vec<(usize, f64)> = Vec::new();
    let mut saw_columns = false;
    for (lineno, line) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(state_row) = rest.strip_prefix("state ") {
                let mut it = state_row.split_whitespace();
                let t = parse_usize(it.next().unwrap_or(""), lineno)?;
                let v = parse_f64(it.next().unwrap_or(""), lineno)?;
                true_states.push((t, v));
            } else if rest.contains("T=") {
                horizon = Some(parse_usize(header_field(rest, "T", lineno)?, lineno)?);
                n_per_step = parse_usize(header_field(rest, "n", lineno)?, lineno)?;
                sigma2 = Some(parse_f64(header_field(rest, "sigma2", lineno)?, lineno)?);
                phi2 = Some(parse_f64(header_field(rest, "phi2", lineno)?, lineno)?);
                seed = parse_usize(header_field(rest, "seed", lineno)?, lineno)? as u64;
            }
            continue;
        }
        if !saw_columns {
            if trimmed != "t,i,y" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected column header 't,i,y', got {trimmed:?}"),
                });
            }
            saw_columns = true;
            continue;
        }
        let mut fields = trimmed.split(',');
        let t = parse_usize(fields.next().unwrap_or(""), lineno)?;
        let _i = parse_usize(fields.next().unwrap_or(""), lineno)?;
        let y = parse_f64(fields.next().unwrap_or(""), lineno)?;
        rows.push((t, y));
    }
    let horizon = horizon.ok_or(Error::Parse {
        line: 0,
        msg: "missing dataset header".into(),
    })?;
    let hyper = SsmHyperParams::new(
        sigma2.ok_or(Error::Parse { line: 0, msg: "missing sigma2".into() })?,
        phi2.ok_or(Error::Parse { line: 0, msg: "missing phi2".into() })?,
    )?;
    let mut batches: Vec<DataBatch> = (1..=horizon)
        .map(|t| DataBatch { t, values: vec![] })
        .collect();
    for (t, y) in rows {
        if t < 1 || t > horizon {
            return Err(Error::Parse {
                line: 0,
                msg: format!("observation time {t} outside 1..={horizon}"),
            });
        }
        batches[t - 1].values.push(y);
    }
    let mut states = vec![0.0; horizon];
    for (t, v) in true_states {
        if t >= 1 && t <= horizon {
            states[t - 1] = v;
        }
    }
    Ok(SsmDataset {
        hyper,
        batches,
        true_states: states,
        n_per_step,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Sampler-facing views of the model at a fixed horizon t.
// ---------------------------------------------------------------------------

use crate::samplers::{GibbsModel, RwProposal, SmcModel, StreamingModel};

/// The SSM bound to data through time t, exposing the interfaces the generic
/// samplers need. The parameter vector is theta_{1:t}.
pub struct SsmAtTime<'a> {
    hyper: SsmHyperParams,
    stats: &'a [SufficientStats],
    proposal: Option<RwProposal>,
}

impl<'a> SsmAtTime<'a> {
    pub fn new(hyper: SsmHyperParams, stats: &'a [SufficientStats]) -> Self {
        SsmAtTime {
            hyper,
            stats,
            proposal: None,
        }
    }

    /// Attach the random-walk proposal used by the transition kernel.
    pub fn with_proposal(mut self, proposal: RwProposal) -> Self {
        self.proposal = Some(proposal);
        self
    }

    pub fn horizon(&self) -> usize {
        self.stats.len()
    }

    /// Unnormalized joint log posterior of theta_{1:t}: likelihood terms plus
    /// the evolution prior with theta_0 := 0.
    pub fn log_joint_posterior(&self, state: &[f64]) -> f64 {
        debug_assert_eq!(state.len(), self.horizon());
        let mut lp = 0.0;
        let mut prev = 0.0;
        for (theta, stats) in state.iter().zip(self.stats) {
            lp += log_likelihood(stats, *theta, &self.hyper);
            let d = theta - prev;
            lp -= d * d / (2.0 * self.hyper.phi2);
            prev = *theta;
        }
        lp
    }
}

impl GibbsModel for SsmAtTime<'_> {
    fn dim(&self) -> usize {
        self.horizon()
    }

    fn gibbs_sweep(&self, state: &mut [f64], rng: &mut StreamRng) {
        let t = self.horizon();
        for ell in 1..=t {
            let left = if ell > 1 { Some(state[ell - 2]) } else { None };
            let right = if ell < t { Some(state[ell]) } else { None };
            let cond =
                full_conditional_theta_ell(ell, left, right, &self.stats[ell - 1], &self.hyper)
                    .expect("neighbor bookkeeping is internal");
            state[ell - 1] = cond.sample(rng);
        }
    }
}

impl StreamingModel for SsmAtTime<'_> {
    fn dim(&self) -> usize {
        self.horizon()
    }

    fn new_block_len(&self) -> usize {
        1
    }

    fn log_new_param_prior(&self, state: &[f64]) -> f64 {
        let t = state.len();
        let prev = if t >= 2 { state[t - 2] } else { 0.0 };
        GaussianDist {
            mean: prev,
            variance: self.hyper.phi2,
        }
        .log_pdf(state[t - 1])
    }

    fn sample_new_param_prior(&self, old: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let prev = old.last().copied().unwrap_or(0.0);
        vec![GaussianDist {
            mean: prev,
            variance: self.hyper.phi2,
        }
        .sample(rng)]
    }

    fn resample_new_param(&self, state: &mut [f64], rng: &mut StreamRng) {
        let t = state.len();
        let prev = if t >= 2 { state[t - 2] } else { 0.0 };
        let cond = full_conditional_theta_t(prev, &self.stats[t - 1], &self.hyper);
        state[t - 1] = cond.sample(rng);
    }

    fn log_batch_likelihood(&self, state: &[f64]) -> f64 {
        let t = state.len();
        log_likelihood(&self.stats[t - 1], state[t - 1], &self.hyper)
    }

    fn transition_sweep(&self, state: &mut [f64], rng: &mut StreamRng) {
        let proposal = self
            .proposal
            .as_ref()
            .expect("transition kernel requires a proposal covariance");
        crate::samplers::rw_transition_sweep(state, proposal, |x| self.log_joint_posterior(x), rng);
    }

    fn jump(&self, old: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        // Jumping kernel: the conjugate full conditional of the new state.
        let prev = old.last().copied().unwrap_or(0.0);
        let t = old.len() + 1;
        let cond = full_conditional_theta_t(prev, &self.stats[t - 1], &self.hyper);
        vec![cond.sample(rng)]
    }
}

impl SmcModel for SsmAtTime<'_> {
    fn propose_and_weight(&self, old: &[f64], rng: &mut StreamRng) -> (Vec<f64>, f64) {
        // Importance density is the conjugate full conditional, so the
        // incremental weight is the one-step predictive normalizing constant.
        let prev = old.last().copied().unwrap_or(0.0);
        let t = old.len() + 1;
        let stats = &self.stats[t - 1];
        let cond = full_conditional_theta_t(prev, stats, &self.hyper);
        let draw = cond.sample(rng);
        (vec![draw], self.log_predictive(prev, stats))
    }
}

impl SsmAtTime<'_> {
    /// log p(y_t | theta_{t-1}): the marginal of the batch under the
    /// evolution prior, in closed form.
    pub fn log_predictive(&self, theta_prev: f64, stats: &SufficientStats) -> f64 {
        let n = stats.n as f64;
        let a = n / self.hyper.sigma2 + 1.0 / self.hyper.phi2;
        let b = stats.sum_y / self.hyper.sigma2 + theta_prev / self.hyper.phi2;
        -(n / 2.0) * (LN_2PI + self.hyper.sigma2.ln()) - stats.sum_y2 / (2.0 * self.hyper.sigma2)
            - 0.5 * (LN_2PI + self.hyper.phi2.ln())
            - theta_prev * theta_prev / (2.0 * self.hyper.phi2)
            + 0.5 * (LN_2PI - a.ln())
            + b * b / (2.0 * a)
    }
}
