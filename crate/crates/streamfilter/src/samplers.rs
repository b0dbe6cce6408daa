//! The five samplers — Gibbs, PPRB-within-Gibbs, SMCMC, generative filtering,
//! bootstrap SMC — as generic procedures over a streaming-model interface,
//! plus the random-walk transition kernel they share.
//!
//! Streaming updates all follow the same shape: an ensemble approximating the
//! posterior at time t-1 comes in, a batch of new data arrives, and an
//! ensemble approximating the time-t posterior comes out. The methods differ
//! in how they extend each member with the new parameter block and how much
//! Markov-kernel work they spend repairing the old coordinates.

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::diagnostics::{correlation_stop_statistic, oracle_stop_check};
use crate::ensemble::{Ensemble, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::linalg::{dense_cholesky, lower_mul, max_asymmetry};
use crate::rng::{SeedTree, StreamRng};

// Child indices for deriving per-phase RNG subtrees. Each sampler phase owns a
// distinct branch so no two phases ever share a stream.
const K_FILTER: u64 = 1;
const K_JUMP: u64 = 2;
const K_TRANS: u64 = 3;
const K_SEQ: u64 = 4;
const K_RESAMPLE: u64 = 5;
const K_PROPAGATE: u64 = 6;

/// What a model must provide for the streaming updates. The parameter vector
/// at time t is the time-(t-1) vector with a new block appended.
pub trait StreamingModel: Sync {
    /// Parameter dimension after the current update.
    fn dim(&self) -> usize;

    /// Length of the block appended by the current update.
    fn new_block_len(&self) -> usize;

    /// log p(phi | theta) evaluated at the trailing block of `state`.
    fn log_new_param_prior(&self, state: &[f64]) -> f64;

    /// Draw the new block from its conditional prior p(phi | theta).
    fn sample_new_param_prior(&self, old: &[f64], rng: &mut StreamRng) -> Vec<f64>;

    /// Redraw the trailing block from its full conditional p(phi | theta, y).
    fn resample_new_param(&self, state: &mut [f64], rng: &mut StreamRng);

    /// log p(y_t | theta, phi) for the newest batch only.
    fn log_batch_likelihood(&self, state: &[f64]) -> f64;

    /// One sweep of a kernel leaving the full time-t posterior invariant.
    fn transition_sweep(&self, state: &mut [f64], rng: &mut StreamRng);

    /// Jumping-kernel draw of the new block given one member's old vector.
    fn jump(&self, old: &[f64], rng: &mut StreamRng) -> Vec<f64>;
}

/// Component-wise full-conditional sweep, for the non-streaming sampler.
pub trait GibbsModel: Sync {
    fn dim(&self) -> usize;
    fn gibbs_sweep(&self, state: &mut [f64], rng: &mut StreamRng);
}

/// Particle propagation for bootstrap SMC: extend one particle and return the
/// incremental log importance weight.
pub trait SmcModel: Sync {
    fn propose_and_weight(&self, old: &[f64], rng: &mut StreamRng) -> (Vec<f64>, f64);
}

/// Chain-length bookkeeping shared by the chain-based updates.
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    /// Ensemble size S retained from each update.
    pub ensemble_size: usize,
    /// Total sweeps/iterations per update.
    pub iters: usize,
    /// Discarded prefix length.
    pub burn_in: usize,
    /// Thinning stride over the post-burn-in chain.
    pub thin: usize,
}

impl SamplerConfig {
    /// S retained samples with burn-in and thin = 1 (iters = burn_in + S).
    pub fn with_burn_in(ensemble_size: usize, burn_in: usize) -> Self {
        SamplerConfig {
            ensemble_size,
            iters: burn_in + ensemble_size,
            burn_in,
            thin: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::config("ensemble size must be at least 2"));
        }
        if self.thin < 1 {
            return Err(Error::config("thin must be at least 1"));
        }
        if self.burn_in >= self.iters {
            return Err(Error::config("burn_in must be smaller than iters"));
        }
        if self.iters != self.burn_in + self.ensemble_size * self.thin {
            return Err(Error::config(format!(
                "iters ({}) must equal burn_in + S*thin ({})",
                self.iters,
                self.burn_in + self.ensemble_size * self.thin
            )));
        }
        Ok(())
    }
}

/// How many transition sweeps to run per update.
pub enum Stopping<'a> {
    /// Exactly m sweeps.
    Fixed(usize),
    /// Sweep until the monitored coordinates' KS statistics against known
    /// reference CDFs all fall below the threshold.
    Oracle {
        reference_cdfs: Vec<&'a (dyn Fn(f64) -> f64 + Sync)>,
        coords: Vec<usize>,
        threshold: f64,
        cap: usize,
    },
    /// Sweep until the maximal across-chain correlation with the initial
    /// states drops to 1 - eps or below.
    Correlation { eps: f64, signed: bool, cap: usize },
}

/// What the transition phase actually did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionOutcome {
    /// Sweeps applied to every chain.
    pub steps: usize,
    /// True when an adaptive rule hit its step cap without triggering.
    pub capped: bool,
}

/// Run S independent chains of the model's transition kernel, synchronized
/// sweep by sweep so adaptive stopping rules can observe the whole ensemble.
/// Chain s draws only from the stream keyed by (tree, s), so the result is
/// bit-identical for any number of worker threads.
pub fn transition_phase<M: StreamingModel>(
    model: &M,
    states: &mut [Vec<f64>],
    stopping: &Stopping,
    tree: SeedTree,
) -> Result<TransitionOutcome> {
    let mut rngs: Vec<StreamRng> = (0..states.len())
        .map(|s| tree.child(s as u64).rng())
        .collect();
    let initial = match stopping {
        Stopping::Correlation { .. } => Some(states.to_vec()),
        _ => None,
    };
    let mut steps = 0usize;
    let mut capped = false;
    loop {
        if let Stopping::Fixed(m) = stopping {
            if steps >= *m {
                break;
            }
        }
        states
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .for_each(|(state, rng)| model.transition_sweep(state, rng));
        steps += 1;
        match stopping {
            Stopping::Fixed(_) => {}
            Stopping::Oracle {
                reference_cdfs,
                coords,
                threshold,
                cap,
            } => {
                let by_coord = |c: usize| states.iter().map(|v| v[c]).collect::<Vec<f64>>();
                if oracle_stop_check(by_coord, reference_cdfs, coords, *threshold)? {
                    break;
                }
                if steps >= *cap {
                    capped = true;
                    break;
                }
            }
            Stopping::Correlation { eps, signed, cap } => {
                let f = correlation_stop_statistic(initial.as_ref().unwrap(), states, *signed)?;
                if f <= 1.0 - eps {
                    break;
                }
                if steps >= *cap {
                    capped = true;
                    break;
                }
            }
        }
    }
    Ok(TransitionOutcome { steps, capped })
}

/// Non-streaming Gibbs: full-conditional sweeps from `init`, burn-in dropped,
/// thinned down to exactly S retained vectors.
pub fn gibbs_update<M: GibbsModel>(
    model: &M,
    config: &SamplerConfig,
    init: &[f64],
    t: usize,
    tree: SeedTree,
) -> Result<Ensemble> {
    config.validate()?;
    if init.len() != model.dim() {
        return Err(Error::contract(format!(
            "init has dimension {}, model expects {}",
            init.len(),
            model.dim()
        )));
    }
    let mut rng = tree.child(K_SEQ).rng();
    let mut state = init.to_vec();
    let mut kept = Vec::with_capacity(config.ensemble_size);
    for i in 1..=config.iters {
        model.gibbs_sweep(&mut state, &mut rng);
        if i > config.burn_in && (i - config.burn_in) % config.thin == 0 {
            kept.push(state.clone());
        }
    }
    debug_assert_eq!(kept.len(), config.ensemble_size);
    Ensemble::new(t, kept)
}

/// One PPRB-within-Gibbs update: a single chain whose state is an old vector
/// resampled from the previous ensemble plus the new parameter block.
///
/// Each iteration proposes a fresh old vector uniformly from the previous
/// ensemble, accepts with the ratio of new-batch likelihoods times
/// conditional-prior densities, then redraws the new block from its full
/// conditional. The retained, thinned states form the new ensemble.
pub fn pprb_within_gibbs_update<M: StreamingModel>(
    model: &M,
    prev: &Ensemble,
    config: &SamplerConfig,
    tree: SeedTree,
) -> Result<Ensemble> {
    config.validate()?;
    let old_dim = prev.dim();
    if old_dim + model.new_block_len() != model.dim() {
        return Err(Error::contract(format!(
            "previous ensemble dimension {} + new block {} != model dimension {}",
            old_dim,
            model.new_block_len(),
            model.dim()
        )));
    }
    let s_count = prev.size();
    let mut rng = tree.child(K_SEQ).rng();

    // initialize at a uniformly drawn member, new block from its conditional prior
    let start = rng.gen_range(0..s_count);
    let mut state = prev.samples()[start].clone();
    state.extend(model.sample_new_param_prior(&prev.samples()[start], &mut rng));

    let mut current_lp = model.log_batch_likelihood(&state) + model.log_new_param_prior(&state);
    let mut candidate = state.clone();
    let mut kept = Vec::with_capacity(config.ensemble_size);
    for i in 1..=config.iters {
        // propose the old coordinates by uniform resampling
        let j = rng.gen_range(0..s_count);
        candidate[..old_dim].copy_from_slice(&prev.samples()[j]);
        candidate[old_dim..].copy_from_slice(&state[old_dim..]);
        let cand_lp =
            model.log_batch_likelihood(&candidate) + model.log_new_param_prior(&candidate);
        if rng.gen::<f64>().ln() < cand_lp - current_lp {
            state[..old_dim].copy_from_slice(&candidate[..old_dim]);
        }
        // redraw the new block from its full conditional
        model.resample_new_param(&mut state, &mut rng);
        current_lp = model.log_batch_likelihood(&state) + model.log_new_param_prior(&state);
        if i > config.burn_in && (i - config.burn_in) % config.thin == 0 {
            kept.push(state.clone());
        }
    }
    debug_assert_eq!(kept.len(), config.ensemble_size);
    Ensemble::new(prev.t() + 1, kept)
}

/// One SMCMC update: append the new block to every member in parallel via the
/// jumping kernel, then run the transition kernel on every member.
pub fn smcmc_update<M: StreamingModel>(
    model: &M,
    prev: &Ensemble,
    stopping: &Stopping,
    tree: SeedTree,
) -> Result<(Ensemble, TransitionOutcome)> {
    if prev.dim() + model.new_block_len() != model.dim() {
        return Err(Error::contract("previous ensemble dimension mismatch"));
    }
    let jump_tree = tree.child(K_JUMP);
    let mut states: Vec<Vec<f64>> = prev
        .samples()
        .par_iter()
        .enumerate()
        .map(|(s, old)| {
            let mut rng = jump_tree.child(s as u64).rng();
            let mut state = old.clone();
            state.extend(model.jump(old, &mut rng));
            state
        })
        .collect();
    let outcome = transition_phase(model, &mut states, stopping, tree.child(K_TRANS))?;
    Ok((Ensemble::new(prev.t() + 1, states)?, outcome))
}

/// One generative-filtering update: a filtering step (PPRB-within-Gibbs)
/// produces S samples, then S independent transition-kernel chains run from
/// them and their final states form the new ensemble.
pub fn generative_filtering_update<M: StreamingModel>(
    model: &M,
    prev: &Ensemble,
    config: &SamplerConfig,
    stopping: &Stopping,
    tree: SeedTree,
) -> Result<(Ensemble, TransitionOutcome)> {
    let filtered = pprb_within_gibbs_update(model, prev, config, tree.child(K_FILTER))?;
    let t = filtered.t();
    let mut states = filtered.into_samples();
    let outcome = transition_phase(model, &mut states, stopping, tree.child(K_TRANS))?;
    Ok((Ensemble::new(t, states)?, outcome))
}

/// One bootstrap-SMC update: propagate every particle through the model's
/// importance density, accumulate log weights, normalize, and multinomial
/// resample back to equal weights.
pub fn bootstrap_smc_update<M: SmcModel>(
    model: &M,
    prev: &WeightedEnsemble,
    tree: SeedTree,
) -> Result<WeightedEnsemble> {
    let propagate_tree = tree.child(K_PROPAGATE);
    let moved: Vec<(Vec<f64>, f64)> = prev
        .samples
        .par_iter()
        .enumerate()
        .map(|(s, old)| {
            let mut rng = propagate_tree.child(s as u64).rng();
            model.propose_and_weight(old, &mut rng)
        })
        .collect();
    let mut extended = WeightedEnsemble {
        t: prev.t + 1,
        samples: Vec::with_capacity(prev.size()),
        log_weights: Vec::with_capacity(prev.size()),
    };
    for ((tail, dlw), (old, lw)) in moved.iter().zip(prev.samples.iter().zip(&prev.log_weights)) {
        let mut state = old.clone();
        state.extend_from_slice(tail);
        extended.samples.push(state);
        extended.log_weights.push(lw + dlw);
    }
    let weights = extended.normalized_weights()?;
    let picker = WeightedIndex::new(&weights)
        .map_err(|_| Error::DegenerateWeights)?;
    let mut rng = tree.child(K_RESAMPLE).rng();
    let samples: Vec<Vec<f64>> = (0..extended.size())
        .map(|_| extended.samples[picker.sample(&mut rng)].clone())
        .collect();
    Ok(WeightedEnsemble::equal_weights(extended.t, samples))
}

/// Random-walk proposal N(theta, 2.4^2 Sigma / t) with a cached Cholesky
/// factor of the scaled covariance.
#[derive(Clone, Debug)]
pub struct RwProposal {
    covariance: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
}

impl RwProposal {
    /// Build from the target covariance Sigma, applying the 2.4^2 / t scale
    /// with t = Sigma's dimension.
    pub fn from_target_covariance(sigma: &[Vec<f64>]) -> Result<Self> {
        let t = sigma.len();
        if t == 0 {
            return Err(Error::contract("empty covariance"));
        }
        if max_asymmetry(sigma) > 1e-12 {
            return Err(Error::contract("proposal covariance is not symmetric"));
        }
        let scale = 2.4 * 2.4 / t as f64;
        let covariance: Vec<Vec<f64>> = sigma
            .iter()
            .map(|row| row.iter().map(|v| v * scale).collect())
            .collect();
        let chol = dense_cholesky(&covariance)?;
        Ok(RwProposal { covariance, chol })
    }

    /// Build from the empirical covariance of an ensemble, with a small
    /// diagonal jitter so near-degenerate ensembles still factor.
    pub fn from_ensemble(ens: &Ensemble) -> Result<Self> {
        let mut cov = ens.covariance();
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] += 1e-9;
        }
        Self::from_target_covariance(&cov)
    }

    pub fn dim(&self) -> usize {
        self.covariance.len()
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    /// One correlated Gaussian step: theta + L z with z standard normal.
    pub fn perturb(&self, state: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let std = Normal::new(0.0, 1.0).unwrap();
        let z: Vec<f64> = (0..self.dim()).map(|_| std.sample(rng)).collect();
        let step = lower_mul(&self.chol, &z);
        state.iter().zip(&step).map(|(s, d)| s + d).collect()
    }
}

/// One Metropolis random-walk step updating the whole vector at once, using
/// the model's unnormalized joint log posterior. Mutates `state` on accept.
pub fn rw_transition_sweep(
    state: &mut [f64],
    proposal: &RwProposal,
    log_posterior: impl Fn(&[f64]) -> f64,
    rng: &mut StreamRng,
) {
    debug_assert_eq!(state.len(), proposal.dim());
    let candidate = proposal.perturb(state, rng);
    let log_ratio = log_posterior(&candidate) - log_posterior(state);
    if rng.gen::<f64>().ln() < log_ratio {
        state.copy_from_slice(&candidate);
    }
}
