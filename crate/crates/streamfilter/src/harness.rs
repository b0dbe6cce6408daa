//! Experiment driver: the degradation study, the cumulative-step study, the
//! simulated-core timing model, and the count-data pipeline. Emits
//! machine-readable delimited tables; every table is a pure function of the
//! spec and seed, so re-runs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diagnostics::{ks_two_sample, unique_proportion};
use crate::ensemble::{Ensemble, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::pups::{
    generate_pups_data, ingest_counts, initial_state, tune_proposals, PupsData,
    PupsHyperParams, PupsLayout, PupsModel,
};
use crate::rng::SeedTree;
use crate::samplers::{
    bootstrap_smc_update, generative_filtering_update, gibbs_update, pprb_within_gibbs_update,
    smcmc_update, RwProposal, SamplerConfig, Stopping,
};
use crate::ssm::{exact_posterior, generate_data, GaussianMVDist, SsmAtTime, SsmHyperParams};
use crate::textio::fmt17;

const K_DATASET: u64 = 1;
const K_RUN: u64 = 2;
const K_INIT: u64 = 3;
const K_GIBBS: u64 = 4;
const K_PPRB: u64 = 5;
const K_SMCMC: u64 = 6;
const K_GF: u64 = 7;
const K_SMC: u64 = 8;
const K_TUNE: u64 = 9;
const K_BASE: u64 = 10;

/// Which experiment to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Degradation,
    Steps,
    Timing,
    Pups,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "degradation" => Ok(ExperimentKind::Degradation),
            "steps" => Ok(ExperimentKind::Steps),
            "timing" => Ok(ExperimentKind::Timing),
            "pups" => Ok(ExperimentKind::Pups),
            other => Err(Error::config(format!("unknown experiment {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Degradation => "degradation",
            ExperimentKind::Steps => "steps",
            ExperimentKind::Timing => "timing",
            ExperimentKind::Pups => "pups",
        }
    }
}

/// The samplers a study can include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Gibbs,
    Pprb,
    Smcmc,
    Gf,
    Smc,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gibbs" => Ok(SamplerKind::Gibbs),
            "pprb" => Ok(SamplerKind::Pprb),
            "smcmc" => Ok(SamplerKind::Smcmc),
            "gf" => Ok(SamplerKind::Gf),
            "smc" => Ok(SamplerKind::Smc),
            other => Err(Error::config(format!("unknown sampler {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Gibbs => "gibbs",
            SamplerKind::Pprb => "pprb",
            SamplerKind::Smcmc => "smcmc",
            SamplerKind::Gf => "gf",
            SamplerKind::Smc => "smc",
        }
    }
}

/// Stopping-rule selection for the step studies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StoppingChoice {
    Fixed { m: usize },
    Oracle { threshold: f64, cap: usize },
    Correlation { eps: f64, cap: usize },
}

/// Everything a run needs, parsed from a flat key=value config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub grid_n: Vec<usize>,
    pub grid_sigma2: Vec<f64>,
    pub phi2: f64,
    pub horizon: usize,
    pub replicates: usize,
    pub chains_per_dataset: usize,
    pub ensemble_size: usize,
    pub iters: usize,
    pub burn_in: usize,
    pub gf_steps: usize,
    pub stopping: StoppingChoice,
    pub samplers: Vec<SamplerKind>,
    pub core_counts: Vec<usize>,
    pub seed: u64,
    // count-data pipeline
    pub pups_file: Option<String>,
    pub pups_sites: Vec<String>,
    pub pups_first_year: i64,
    pub pups_base_year: i64,
    pub pups_updates: usize,
    pub pups_m: usize,
    pub pups_missing_prob: f64,
    pub pups_pilot_iters: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            grid_n: vec![1, 5, 10, 50],
            grid_sigma2: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            phi2: 1.0,
            horizon: 20,
            replicates: 5,
            chains_per_dataset: 5,
            ensemble_size: 1000,
            iters: 1100,
            burn_in: 100,
            gf_steps: 5,
            stopping: StoppingChoice::Oracle {
                threshold: 0.055,
                cap: 10_000,
            },
            samplers: vec![
                SamplerKind::Gibbs,
                SamplerKind::Pprb,
                SamplerKind::Smcmc,
                SamplerKind::Gf,
                SamplerKind::Smc,
            ],
            core_counts: vec![1, 8, 32, 1000],
            seed: 0,
            pups_file: None,
            pups_sites: vec![
                "site1".to_string(),
                "site2".to_string(),
                "site3".to_string(),
                "site4".to_string(),
            ],
            pups_first_year: 1985,
            pups_base_year: 2000,
            pups_updates: 16,
            pups_m: 5,
            pups_missing_prob: 0.1,
            pups_pilot_iters: 2000,
        }
    }
}

impl ExperimentSpec {
    /// Parse a flat key=value config; '#' starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: &str| Error::Parse {
                line: lineno,
                msg: format!("{key}: {msg} ({value:?})"),
            };
            match key {
                "grid_n" => {
                    spec.grid_n = split_list(value)
                        .map(|v| v.parse().map_err(|_| bad("bad integer")))
                        .collect::<Result<_>>()?
                }
                "grid_sigma2" => {
                    spec.grid_sigma2 = split_list(value)
                        .map(|v| v.parse().map_err(|_| bad("bad number")))
                        .collect::<Result<_>>()?
                }
                "phi2" => spec.phi2 = value.parse().map_err(|_| bad("bad number"))?,
                "horizon" => spec.horizon = value.parse().map_err(|_| bad("bad integer"))?,
                "replicates" => spec.replicates = value.parse().map_err(|_| bad("bad integer"))?,
                "chains_per_dataset" => {
                    spec.chains_per_dataset = value.parse().map_err(|_| bad("bad integer"))?
                }
                "ensemble_size" => {
                    spec.ensemble_size = value.parse().map_err(|_| bad("bad integer"))?
                }
                "iters" => spec.iters = value.parse().map_err(|_| bad("bad integer"))?,
                "burn_in" => spec.burn_in = value.parse().map_err(|_| bad("bad integer"))?,
                "gf_steps" => spec.gf_steps = value.parse().map_err(|_| bad("bad integer"))?,
                "stopping" => {
                    spec.stopping = match value {
                        "fixed" => StoppingChoice::Fixed { m: spec.gf_steps },
                        "oracle" => StoppingChoice::Oracle {
                            threshold: 0.055,
                            cap: 10_000,
                        },
                        "correlation" => StoppingChoice::Correlation {
                            eps: 0.5,
                            cap: 10_000,
                        },
                        _ => return Err(bad("expected fixed|oracle|correlation")),
                    }
                }
                "stopping_m" => {
                    spec.stopping = StoppingChoice::Fixed {
                        m: value.parse().map_err(|_| bad("bad integer"))?,
                    }
                }
                "threshold" => {
                    if let StoppingChoice::Oracle { cap, .. } = spec.stopping {
                        spec.stopping = StoppingChoice::Oracle {
                            threshold: value.parse().map_err(|_| bad("bad number"))?,
                            cap,
                        };
                    } else {
                        return Err(bad("threshold only applies to oracle stopping"));
                    }
                }
                "eps" => {
                    if let StoppingChoice::Correlation { cap, .. } = spec.stopping {
                        spec.stopping = StoppingChoice::Correlation {
                            eps: value.parse().map_err(|_| bad("bad number"))?,
                            cap,
                        };
                    } else {
                        return Err(bad("eps only applies to correlation stopping"));
                    }
                }
                "cap" => {
                    let cap = value.parse().map_err(|_| bad("bad integer"))?;
                    spec.stopping = match spec.stopping {
                        StoppingChoice::Fixed { m } => StoppingChoice::Fixed { m },
                        StoppingChoice::Oracle { threshold, .. } => {
                            StoppingChoice::Oracle { threshold, cap }
                        }
                        StoppingChoice::Correlation { eps, .. } => {
                            StoppingChoice::Correlation { eps, cap }
                        }
                    };
                }
                "samplers" => {
                    spec.samplers = split_list(value)
                        .map(SamplerKind::parse)
                        .collect::<Result<_>>()?
                }
                "core_counts" => {
                    spec.core_counts = split_list(value)
                        .map(|v| v.parse().map_err(|_| bad("bad integer")))
                        .collect::<Result<_>>()?
                }
                "seed" => spec.seed = value.parse().map_err(|_| bad("bad integer"))?,
                "pups_file" => spec.pups_file = Some(value.to_string()),
                "pups_sites" => {
                    spec.pups_sites = split_list(value).map(|s| s.to_string()).collect()
                }
                "pups_first_year" => {
                    spec.pups_first_year = value.parse().map_err(|_| bad("bad integer"))?
                }
                "pups_base_year" => {
                    spec.pups_base_year = value.parse().map_err(|_| bad("bad integer"))?
                }
                "pups_updates" => {
                    spec.pups_updates = value.parse().map_err(|_| bad("bad integer"))?
                }
                "pups_m" => spec.pups_m = value.parse().map_err(|_| bad("bad integer"))?,
                "pups_missing_prob" => {
                    spec.pups_missing_prob = value.parse().map_err(|_| bad("bad number"))?
                }
                "pups_pilot_iters" => {
                    spec.pups_pilot_iters = value.parse().map_err(|_| bad("bad integer"))?
                }
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unknown config key {other:?}"),
                    })
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_n.is_empty() || self.grid_sigma2.is_empty() {
            return Err(Error::config("experiment grid must be non-empty"));
        }
        if self.grid_sigma2.iter().any(|v| !(*v > 0.0)) || !(self.phi2 > 0.0) {
            return Err(Error::config("grid variances must be positive"));
        }
        if self.replicates < 1 || self.chains_per_dataset < 1 {
            return Err(Error::config("replicates and chains_per_dataset must be >= 1"));
        }
        if self.horizon < 2 {
            return Err(Error::config("horizon must be at least 2"));
        }
        self.sampler_config().validate()
    }

    /// Shrink to the quick profile: one grid cell, 2 replicates, 1 chain,
    /// horizon 5, small ensembles.
    pub fn apply_smoke(&mut self) {
        self.grid_n.truncate(1);
        self.grid_sigma2.truncate(1);
        self.replicates = 2;
        self.chains_per_dataset = 1;
        self.horizon = 5;
        self.ensemble_size = 200;
        self.burn_in = 50;
        self.iters = self.burn_in + self.ensemble_size;
        self.pups_sites.truncate(2);
        self.pups_first_year = self.pups_base_year - 4;
        self.pups_updates = 3;
        self.pups_pilot_iters = 500;
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let thin = ((self.iters - self.burn_in) / self.ensemble_size).max(1);
        SamplerConfig {
            ensemble_size: self.ensemble_size,
            iters: self.iters,
            burn_in: self.burn_in,
            thin,
        }
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(|v| v.trim()).filter(|v| !v.is_empty())
}

/// Abstract per-operation costs for the simulated timing model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub filter_cost_per_iter: f64,
    pub kernel_cost_per_sweep_per_coordinate: f64,
    pub jump_cost_per_member: f64,
}

impl CostModel {
    pub fn unit() -> Self {
        CostModel {
            filter_cost_per_iter: 1.0,
            kernel_cost_per_sweep_per_coordinate: 1.0,
            jump_cost_per_member: 1.0,
        }
    }
}

/// One emitted result table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: Vec<&'static str>) -> Self {
        Table {
            name: name.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_string_lossy(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Value of `column` in rows matching all (column, value) filters.
    pub fn select(&self, filters: &[(&str, &str)], column: &str) -> Vec<String> {
        let col_idx = |name: &str| self.columns.iter().position(|c| *c == name);
        let target = col_idx(column).expect("unknown column");
        let filter_idx: Vec<(usize, &str)> = filters
            .iter()
            .map(|(c, v)| (col_idx(c).expect("unknown filter column"), *v))
            .collect();
        self.rows
            .iter()
            .filter(|row| filter_idx.iter().all(|(i, v)| row[*i] == *v))
            .map(|row| row[target].clone())
            .collect()
    }
}

/// Write every table to `<dir>/<experiment>_<table>.csv`.
pub fn write_tables(tables: &[Table], dir: &Path, experiment: ExperimentKind) -> Result<()> {
    fs::create_dir_all(dir)?;
    for table in tables {
        let path = dir.join(format!("{}_{}.csv", experiment.name(), table.name));
        let mut file = fs::File::create(path)?;
        table.write(&mut file)?;
    }
    Ok(())
}

fn exact_marginal_cdfs(posterior: &GaussianMVDist) -> Vec<Box<dyn Fn(f64) -> f64 + Sync>> {
    (0..posterior.dim())
        .map(|j| {
            let m = posterior.marginal(j);
            Box::new(move |x: f64| m.cdf(x)) as Box<dyn Fn(f64) -> f64 + Sync>
        })
        .collect()
}

/// Draw an i.i.d. S-sample ensemble from an exact Gaussian posterior.
fn oracle_ensemble(posterior: &GaussianMVDist, t: usize, s: usize, tree: SeedTree) -> Ensemble {
    let mut rng = tree.rng();
    let samples = (0..s).map(|_| posterior.sample(&mut rng)).collect();
    Ensemble::new(t, samples).expect("oracle ensemble")
}

/// Degradation study: KS statistic of the earliest state and its unique-value
/// proportion across sequential updates, per sampler.
pub fn run_degradation(spec: &ExperimentSpec) -> Result<Vec<Table>> {
    let mut table = Table::new(
        "metrics",
        vec![
            "sampler", "n", "sigma2", "dataset", "run", "t", "ks_theta1", "unique_prop",
        ],
    );
    let root = SeedTree::new(spec.seed);
    let config = spec.sampler_config();
    for &n in &spec.grid_n {
        for &sigma2 in &spec.grid_sigma2 {
            let hyper = SsmHyperParams::new(sigma2, spec.phi2)?;
            for dataset_idx in 0..spec.replicates {
                let cell_tree = root
                    .child(K_DATASET)
                    .child(n as u64)
                    .child(sigma2.to_bits())
                    .child(dataset_idx as u64);
                let dataset = generate_data(spec.horizon, n, hyper, cell_tree.state())?;
                let posteriors: Vec<GaussianMVDist> = (1..=spec.horizon)
                    .map(|t| exact_posterior(&dataset, t))
                    .collect::<Result<_>>()?;
                for run_idx in 0..spec.chains_per_dataset {
                    let run_tree = cell_tree.child(K_RUN).child(run_idx as u64);
                    degradation_one_run(
                        spec,
                        &config,
                        &dataset.stats_through(spec.horizon),
                        hyper,
                        &posteriors,
                        n,
                        sigma2,
                        dataset_idx,
                        run_idx,
                        run_tree,
                        &mut table,
                    )?;
                }
            }
        }
    }
    Ok(vec![table])
}

#[allow(clippy::too_many_arguments)]
fn degradation_one_run(
    spec: &ExperimentSpec,
    config: &SamplerConfig,
    all_stats: &[crate::ssm::SufficientStats],
    hyper: SsmHyperParams,
    posteriors: &[GaussianMVDist],
    n: usize,
    sigma2: f64,
    dataset_idx: usize,
    run_idx: usize,
    tree: SeedTree,
    table: &mut Table,
) -> Result<()> {
    let s = spec.ensemble_size;
    let initial = oracle_ensemble(&posteriors[0], 1, s, tree.child(K_INIT));
    let mut pprb = initial.clone();
    let mut gf = initial.clone();
    let mut smc = WeightedEnsemble::equal_weights(1, initial.samples().to_vec());
    let want = |kind: SamplerKind| spec.samplers.contains(&kind);
    for t in 2..=spec.horizon {
        let stats = &all_stats[..t];
        let posterior = &posteriors[t - 1];
        let theta1 = posterior.marginal(0);
        let mut record = |sampler: &str, values: Vec<f64>| -> Result<()> {
            let ks = crate::diagnostics::ks_statistic(&values, |x| theta1.cdf(x))?;
            table.rows.push(vec![
                sampler.to_string(),
                n.to_string(),
                fmt17(sigma2),
                dataset_idx.to_string(),
                run_idx.to_string(),
                t.to_string(),
                fmt17(ks),
                fmt17(unique_proportion(&values)),
            ]);
            Ok(())
        };
        if want(SamplerKind::Gibbs) {
            let model = SsmAtTime::new(hyper, stats);
            let init = posterior.mean().to_vec();
            let ens = gibbs_update(&model, config, &init, t, tree.child(K_GIBBS).child(t as u64))?;
            record("gibbs", ens.coordinate(0))?;
        }
        if want(SamplerKind::Pprb) {
            let model = SsmAtTime::new(hyper, stats);
            pprb = pprb_within_gibbs_update(&model, &pprb, config, tree.child(K_PPRB).child(t as u64))?;
            record("pprb", pprb.coordinate(0))?;
        }
        if want(SamplerKind::Gf) {
            let proposal = RwProposal::from_target_covariance(posterior.covariance())?;
            let model = SsmAtTime::new(hyper, stats).with_proposal(proposal);
            let (next, _) = generative_filtering_update(
                &model,
                &gf,
                config,
                &Stopping::Fixed(spec.gf_steps),
                tree.child(K_GF).child(t as u64),
            )?;
            gf = next;
            record("gf", gf.coordinate(0))?;
        }
        if want(SamplerKind::Smc) {
            let model = SsmAtTime::new(hyper, stats);
            smc = bootstrap_smc_update(&model, &smc, tree.child(K_SMC).child(t as u64))?;
            record("smc", smc.samples.iter().map(|v| v[0]).collect())?;
        }
    }
    Ok(())
}

/// Step-count study: per update, the transition steps each method needed
/// under the configured stopping rule, plus residual KS at the stop.
///
/// Both methods start from the same fresh Gibbs ensemble at t-1. Under the
/// correlation rule the step count is selected once, on the SMCMC chains, and
/// applied to both methods: the rule observes only kernel decorrelation, which
/// the two methods share, so it cannot distinguish them.
pub fn run_steps(spec: &ExperimentSpec) -> Result<Vec<Table>> {
    let mut table = Table::new(
        "steps",
        vec![
            "sampler",
            "n",
            "sigma2",
            "dataset",
            "run",
            "t",
            "m_t",
            "cum_steps",
            "capped",
            "residual_ks",
        ],
    );
    let root = SeedTree::new(spec.seed);
    let config = spec.sampler_config();
    for &n in &spec.grid_n {
        for &sigma2 in &spec.grid_sigma2 {
            let hyper = SsmHyperParams::new(sigma2, spec.phi2)?;
            for dataset_idx in 0..spec.replicates {
                let cell_tree = root
                    .child(K_DATASET)
                    .child(n as u64)
                    .child(sigma2.to_bits())
                    .child(dataset_idx as u64);
                let dataset = generate_data(spec.horizon, n, hyper, cell_tree.state())?;
                let posteriors: Vec<GaussianMVDist> = (1..=spec.horizon)
                    .map(|t| exact_posterior(&dataset, t))
                    .collect::<Result<_>>()?;
                for run_idx in 0..spec.chains_per_dataset {
                    let run_tree = cell_tree.child(K_RUN).child(run_idx as u64);
                    let mut cum = [0usize; 2]; // [smcmc, gf]
                    for t in 2..=spec.horizon {
                        let stats = dataset.stats_through(t);
                        let posterior = &posteriors[t - 1];
                        let cdfs = exact_marginal_cdfs(posterior);
                        let proposal = RwProposal::from_target_covariance(posterior.covariance())?;
                        let model = SsmAtTime::new(hyper, &stats).with_proposal(proposal);

                        // the shared starting point: a fresh Gibbs ensemble at t-1
                        let prev_model = SsmAtTime::new(hyper, &stats[..t - 1]);
                        let init = posteriors[t - 2].mean().to_vec();
                        let start = gibbs_update(
                            &prev_model,
                            &config,
                            &init,
                            t - 1,
                            run_tree.child(K_GIBBS).child(t as u64),
                        )?;

                        let monitored = [t - 2, t - 1];
                        let refs: Vec<&(dyn Fn(f64) -> f64 + Sync)> =
                            monitored.iter().map(|&c| &*cdfs[c]).collect();
                        let oracle_stop = |cap: usize, threshold: f64| Stopping::Oracle {
                            reference_cdfs: refs.clone(),
                            coords: monitored.to_vec(),
                            threshold,
                            cap,
                        };

                        let (smcmc_stop, gf_stop_from_smcmc): (Stopping, bool) =
                            match spec.stopping {
                                StoppingChoice::Fixed { m } => (Stopping::Fixed(m), false),
                                StoppingChoice::Oracle { threshold, cap } => {
                                    (oracle_stop(cap, threshold), false)
                                }
                                StoppingChoice::Correlation { eps, cap } => (
                                    Stopping::Correlation {
                                        eps,
                                        signed: false,
                                        cap,
                                    },
                                    true,
                                ),
                            };

                        let (sm_ens, sm_out) = smcmc_update(
                            &model,
                            &start,
                            &smcmc_stop,
                            run_tree.child(K_SMCMC).child(t as u64),
                        )?;
                        let gf_stop = if gf_stop_from_smcmc {
                            Stopping::Fixed(sm_out.steps)
                        } else {
                            match spec.stopping {
                                StoppingChoice::Fixed { m } => Stopping::Fixed(m),
                                StoppingChoice::Oracle { threshold, cap } => {
                                    oracle_stop(cap, threshold)
                                }
                                StoppingChoice::Correlation { .. } => unreachable!(),
                            }
                        };
                        let (gf_ens, gf_out) = generative_filtering_update(
                            &model,
                            &start,
                            &config,
                            &gf_stop,
                            run_tree.child(K_GF).child(t as u64),
                        )?;

                        cum[0] += sm_out.steps;
                        cum[1] += gf_out.steps;
                        for (name, ens, out, cum_steps) in [
                            ("smcmc", &sm_ens, &sm_out, cum[0]),
                            ("gf", &gf_ens, &gf_out, cum[1]),
                        ] {
                            let residual = monitored
                                .iter()
                                .map(|&c| {
                                    crate::diagnostics::ks_statistic(&ens.coordinate(c), &*cdfs[c])
                                })
                                .collect::<Result<Vec<f64>>>()?
                                .into_iter()
                                .fold(0.0f64, f64::max);
                            table.rows.push(vec![
                                name.to_string(),
                                n.to_string(),
                                fmt17(sigma2),
                                dataset_idx.to_string(),
                                run_idx.to_string(),
                                t.to_string(),
                                out.steps.to_string(),
                                cum_steps.to_string(),
                                (out.capped as u8).to_string(),
                                fmt17(residual),
                            ]);
                        }
                    }
                }
            }
        }
    }
    Ok(vec![table])
}

/// Simulated per-update wall time for each method at each core count, driven
/// by the measured step counts from [`run_steps`], plus the break-even core
/// count at which SMCMC catches up with generative filtering.
pub fn run_timing(spec: &ExperimentSpec, cost: &CostModel) -> Result<Vec<Table>> {
    let steps_tables = run_steps(spec)?;
    let steps = &steps_tables[0];
    let mut timing = Table::new(
        "times",
        vec![
            "sampler", "cores", "n", "sigma2", "dataset", "run", "t", "time", "cum_time",
        ],
    );
    let mut breakeven = Table::new(
        "breakeven",
        vec!["n", "sigma2", "dataset", "run", "break_even_cores"],
    );
    let s = spec.ensemble_size as f64;
    let filter_iters = spec.iters as f64;
    let gibbs_iters = spec.iters as f64;
    for &n in &spec.grid_n {
        for &sigma2 in &spec.grid_sigma2 {
            for dataset_idx in 0..spec.replicates {
                for run_idx in 0..spec.chains_per_dataset {
                    let filters = [
                        ("n", n.to_string()),
                        ("sigma2", fmt17(sigma2)),
                        ("dataset", dataset_idx.to_string()),
                        ("run", run_idx.to_string()),
                    ];
                    let fs: Vec<(&str, &str)> =
                        filters.iter().map(|(k, v)| (*k, v.as_str())).collect();
                    let mut sm_filters = fs.clone();
                    sm_filters.push(("sampler", "smcmc"));
                    let mut gf_filters = fs.clone();
                    gf_filters.push(("sampler", "gf"));
                    let parse_col = |fl: &[(&str, &str)], col: &str| -> Vec<f64> {
                        steps
                            .select(fl, col)
                            .iter()
                            .map(|v| v.parse().unwrap())
                            .collect()
                    };
                    let ts = parse_col(&sm_filters, "t");
                    let m_sm = parse_col(&sm_filters, "m_t");
                    let m_gf = parse_col(&gf_filters, "m_t");
                    let per_update = |cores: usize| -> Vec<(f64, f64, f64, f64)> {
                        let blocks = (s / cores as f64).ceil();
                        ts.iter()
                            .enumerate()
                            .map(|(i, &t)| {
                                let dim = t;
                                let kernel = cost.kernel_cost_per_sweep_per_coordinate * dim;
                                let gf_time = filter_iters * cost.filter_cost_per_iter
                                    + blocks * m_gf[i] * kernel;
                                let sm_time =
                                    blocks * (cost.jump_cost_per_member + m_sm[i] * kernel);
                                let gibbs_time = gibbs_iters * kernel;
                                let pprb_time = filter_iters * cost.filter_cost_per_iter;
                                (gf_time, sm_time, gibbs_time, pprb_time)
                            })
                            .collect()
                    };
                    for &cores in &spec.core_counts {
                        let times = per_update(cores);
                        let mut cums = [0.0f64; 4];
                        for (i, &t) in ts.iter().enumerate() {
                            let (gf_t, sm_t, gibbs_t, pprb_t) = times[i];
                            for (j, (name, val)) in [
                                ("gf", gf_t),
                                ("smcmc", sm_t),
                                ("gibbs", gibbs_t),
                                ("pprb", pprb_t),
                            ]
                            .iter()
                            .enumerate()
                            {
                                cums[j] += val;
                                timing.rows.push(vec![
                                    name.to_string(),
                                    cores.to_string(),
                                    n.to_string(),
                                    fmt17(sigma2),
                                    dataset_idx.to_string(),
                                    run_idx.to_string(),
                                    (t as usize).to_string(),
                                    fmt17(*val),
                                    fmt17(cums[j]),
                                ]);
                            }
                        }
                    }
                    // break-even: smallest core count where total SMCMC time
                    // no longer exceeds total GF time (0 when none exists)
                    let total = |cores: usize| -> (f64, f64) {
                        per_update(cores)
                            .iter()
                            .fold((0.0, 0.0), |(g, m), (gt, st, _, _)| (g + gt, m + st))
                    };
                    let mut found = 0usize;
                    for cores in 1..=100_000usize {
                        let (gf_total, sm_total) = total(cores);
                        if sm_total <= gf_total {
                            found = cores;
                            break;
                        }
                    }
                    breakeven.rows.push(vec![
                        n.to_string(),
                        fmt17(sigma2),
                        dataset_idx.to_string(),
                        run_idx.to_string(),
                        found.to_string(),
                    ]);
                }
            }
        }
    }
    let mut tables = steps_tables;
    tables.push(timing);
    tables.push(breakeven);
    Ok(tables)
}

/// Count-data pipeline: base Gibbs fit through the base year, then yearly
/// streaming updates under all configured methods, with posterior summaries,
/// unique-value proportions for the first update year's log intensities, and
/// two-sample KS of each drift parameter against the fresh Gibbs fit.
pub fn run_pups(spec: &ExperimentSpec) -> Result<Vec<Table>> {
    let hyper = PupsHyperParams::default_values();
    let root = SeedTree::new(spec.seed);
    let data = load_or_generate_pups(spec, root)?;
    let base_years = (spec.pups_base_year - data.first_year + 1) as usize;
    let total_years = base_years + spec.pups_updates;
    if data.n_years() < total_years {
        return Err(Error::config(format!(
            "data covers {} years, need {} (base through {} plus {} updates)",
            data.n_years(),
            total_years,
            spec.pups_base_year,
            spec.pups_updates
        )));
    }
    let config = spec.sampler_config();
    let layout_full = PupsLayout {
        n_sites: data.n_sites(),
        n_years: total_years,
    };

    // proposals tuned once on the base-fit data, reused (nearest year) later
    let (proposal, tune_report) =
        tune_proposals(&data.through(base_years), &hyper, 0.44, spec.pups_pilot_iters, root.child(K_TUNE))?;

    let mut summaries = Table::new(
        "summaries",
        vec!["method", "parameter", "year", "mean", "q2_5", "q97_5"],
    );
    let mut uniques = Table::new(
        "uniques",
        vec!["method", "year", "site", "unique_prop"],
    );
    let mut ks_table = Table::new("ks_vs_gibbs", vec!["method", "year", "site", "ks"]);
    let mut tuning = Table::new("tuning", vec!["site", "year", "acceptance"]);
    for (s, row) in tune_report.achieved.iter().enumerate() {
        for (t, rate) in row.iter().enumerate() {
            tuning.rows.push(vec![
                data.sites[s].clone(),
                data.year(t).to_string(),
                fmt17(*rate),
            ]);
        }
    }

    // base fit shared by every streaming method
    let base_model = PupsModel::new(&data, hyper, &proposal, base_years)?;
    let base_layout = base_model.layout;
    let base_init = base_layout.to_vec(&initial_state(&data.through(base_years), &hyper));
    let base = gibbs_update(
        &base_model,
        &config,
        &base_init,
        base_years,
        root.child(K_BASE),
    )?;

    let mut pprb = base.clone();
    let mut gf = base.clone();
    let mut smcmc = base.clone();
    let first_update_year_idx = base_years; // index of the first appended year
    let want = |kind: SamplerKind| spec.samplers.contains(&kind);
    for update in 1..=spec.pups_updates {
        let n_years = base_years + update;
        let year = data.year(n_years - 1);
        let model = PupsModel::new(&data, hyper, &proposal, n_years)?;
        let update_tree = root.child(K_RUN).child(update as u64);

        // fresh non-streaming Gibbs fit through this year (always needed as
        // the reference for the KS comparison)
        let gibbs_init = model
            .layout
            .to_vec(&initial_state(&data.through(n_years), &hyper));
        let gibbs_ens = gibbs_update(
            &model,
            &config,
            &gibbs_init,
            n_years,
            update_tree.child(K_GIBBS),
        )?;

        if want(SamplerKind::Pprb) {
            pprb = pprb_within_gibbs_update(&model, &pprb, &config, update_tree.child(K_PPRB))?;
        }
        if want(SamplerKind::Smcmc) {
            let (next, _) = smcmc_update(
                &model,
                &smcmc,
                &Stopping::Fixed(spec.pups_m),
                update_tree.child(K_SMCMC),
            )?;
            smcmc = next;
        }
        if want(SamplerKind::Gf) {
            let (next, _) = generative_filtering_update(
                &model,
                &gf,
                &config,
                &Stopping::Fixed(spec.pups_m),
                update_tree.child(K_GF),
            )?;
            gf = next;
        }

        let mut methods: Vec<(&str, &Ensemble)> = vec![("gibbs", &gibbs_ens)];
        if want(SamplerKind::Pprb) {
            methods.push(("pprb", &pprb));
        }
        if want(SamplerKind::Smcmc) {
            methods.push(("smcmc", &smcmc));
        }
        if want(SamplerKind::Gf) {
            methods.push(("gf", &gf));
        }
        for (name, ens) in &methods {
            // posterior summaries for the per-site drift and variance
            for s in 0..data.n_sites() {
                for (param, idx) in [
                    ("phi", model.layout.phi_idx(s)),
                    ("sigma2", model.layout.sigma2_idx(s)),
                ] {
                    let values = ens.coordinate(idx);
                    let (mean, q025, q975) = summarize(&values);
                    summaries.rows.push(vec![
                        name.to_string(),
                        format!("{}_{}", param, data.sites[s]),
                        year.to_string(),
                        fmt17(mean),
                        fmt17(q025),
                        fmt17(q975),
                    ]);
                }
                // unique proportion of the first update year's log intensity
                let coord = layout_full.log_lambda_idx(s, first_update_year_idx);
                let coord = coord_in(&model.layout, s, first_update_year_idx, coord);
                let values = ens.coordinate(coord);
                uniques.rows.push(vec![
                    name.to_string(),
                    year.to_string(),
                    data.sites[s].clone(),
                    fmt17(unique_proportion(&values)),
                ]);
                // drift agreement with the fresh Gibbs fit
                let ks = ks_two_sample(
                    &ens.coordinate(model.layout.phi_idx(s)),
                    &gibbs_ens.coordinate(model.layout.phi_idx(s)),
                )?;
                ks_table.rows.push(vec![
                    name.to_string(),
                    year.to_string(),
                    data.sites[s].clone(),
                    fmt17(ks),
                ]);
            }
        }
    }
    Ok(vec![summaries, uniques, ks_table, tuning])
}

/// The layout at every update shares index math for years below its horizon,
/// so the full-layout coordinate is valid as long as the year exists; this
/// helper just documents that and recomputes against the current layout.
fn coord_in(layout: &PupsLayout, site: usize, year_idx: usize, _full_coord: usize) -> usize {
    layout.log_lambda_idx(site, year_idx)
}

fn load_or_generate_pups(spec: &ExperimentSpec, root: SeedTree) -> Result<PupsData> {
    if let Some(path) = &spec.pups_file {
        let file = fs::File::open(path)?;
        let mut reader = std::io::BufReader::new(file);
        let (data, _report) = ingest_counts(&mut reader, &spec.pups_sites)?;
        return Ok(data);
    }
    // synthetic stand-in drawn from the model itself
    let n_sites = spec.pups_sites.len();
    let phi_true: Vec<f64> = [-0.05, 0.02, 0.0, 0.1]
        .iter()
        .cycle()
        .take(n_sites)
        .cloned()
        .collect();
    let sigma2_true = vec![0.02; n_sites];
    let hyper = PupsHyperParams::default_values();
    let n_years =
        (spec.pups_base_year - spec.pups_first_year + 1) as usize + spec.pups_updates;
    let (data, _truth) = generate_pups_data(
        &spec.pups_sites,
        spec.pups_first_year,
        n_years,
        &phi_true,
        &sigma2_true,
        &hyper,
        spec.pups_missing_prob,
        root.child(K_DATASET).state(),
    )?;
    Ok(data)
}

/// Mean and the 2.5% / 97.5% empirical quantiles.
fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let q = |p: f64| {
        let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted[idx]
    };
    (mean, q(0.025), q(0.975))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing_round_trip() {
        let text = "\
# comment
grid_n = 5
grid_sigma2 = 1.0
horizon = 6
replicates = 2
chains_per_dataset = 1
ensemble_size = 100
iters = 150
burn_in = 50
gf_steps = 3
stopping = correlation
eps = 0.4
cap = 500
samplers = gibbs, gf
seed = 9
";
        let spec = ExperimentSpec::parse(text).unwrap();
        assert_eq!(spec.grid_n, vec![5]);
        assert_eq!(spec.grid_sigma2, vec![1.0]);
        assert_eq!(spec.horizon, 6);
        assert_eq!(spec.ensemble_size, 100);
        assert_eq!(
            spec.stopping,
            StoppingChoice::Correlation { eps: 0.4, cap: 500 }
        );
        assert_eq!(spec.samplers, vec![SamplerKind::Gibbs, SamplerKind::Gf]);
        assert_eq!(spec.seed, 9);

        assert!(ExperimentSpec::parse("unknown_key = 1\n").is_err());
        assert!(ExperimentSpec::parse("horizon\n").is_err());
        assert!(ExperimentSpec::parse("grid_n =\n").is_err());
    }

    #[test]
    fn default_spec_validates() {
        assert!(ExperimentSpec::default().validate().is_ok());
        let mut spec = ExperimentSpec::default();
        spec.apply_smoke();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.grid_n.len(), 1);
        assert_eq!(spec.replicates, 2);
        assert!(spec.horizon <= 5);
    }

    #[test]
    fn table_select_filters_rows() {
        let mut t = Table::new("x", vec!["a", "b", "v"]);
        t.rows.push(vec!["1".into(), "x".into(), "10".into()]);
        t.rows.push(vec!["1".into(), "y".into(), "20".into()]);
        t.rows.push(vec!["2".into(), "x".into(), "30".into()]);
        assert_eq!(t.select(&[("a", "1")], "v"), vec!["10", "20"]);
        assert_eq!(t.select(&[("a", "1"), ("b", "y")], "v"), vec!["20"]);
    }

    fn tiny_spec() -> ExperimentSpec {
        let mut spec = ExperimentSpec::default();
        spec.grid_n = vec![2];
        spec.grid_sigma2 = vec![1.0];
        spec.horizon = 4;
        spec.replicates = 1;
        spec.chains_per_dataset = 1;
        spec.ensemble_size = 50;
        spec.burn_in = 20;
        spec.iters = 70;
        spec.gf_steps = 2;
        spec.stopping = StoppingChoice::Fixed { m: 2 };
        spec.seed = 11;
        spec
    }

    #[test]
    fn degradation_smoke_row_count() {
        let spec = tiny_spec();
        let tables = run_degradation(&spec).unwrap();
        let table = &tables[0];
        // 5 samplers configured but smc+gibbs+pprb+gf report (smcmc not in
        // this study): 4 samplers x 3 time points
        assert_eq!(table.rows.len(), 4 * 3);
        // byte-identical re-run
        let again = run_degradation(&spec).unwrap();
        assert_eq!(tables, again);
    }

    #[test]
    fn steps_smoke_and_timing() {
        let mut spec = tiny_spec();
        spec.stopping = StoppingChoice::Fixed { m: 3 };
        let tables = run_steps(&spec).unwrap();
        let steps = &tables[0];
        assert_eq!(steps.rows.len(), 2 * 3); // smcmc+gf x t=2..4
        for m in steps.select(&[("sampler", "smcmc")], "m_t") {
            assert_eq!(m, "3");
        }
        let timing = run_timing(&spec, &CostModel::unit()).unwrap();
        let times = timing.iter().find(|t| t.name == "times").unwrap();
        assert_eq!(times.rows.len(), spec.core_counts.len() * 4 * 3);
        let be = timing.iter().find(|t| t.name == "breakeven").unwrap();
        assert_eq!(be.rows.len(), 1);
        // with equal fixed m the filtering overhead keeps GF slower only when
        // cores are abundant; the break-even count must be a finite positive
        let v: usize = be.rows[0][4].parse().unwrap();
        assert!(v >= 1);
    }

    #[test]
    fn timing_limit_behaviors() {
        // C -> infinity: SMCMC per-update time approaches jump + m*kernel*dim
        let cost = CostModel::unit();
        let s = 1000.0;
        let m = 7.0;
        let dim = 10.0;
        let per_update = |cores: f64| (s / cores).ceil() * (cost.jump_cost_per_member + m * dim);
        assert_eq!(per_update(1e9), cost.jump_cost_per_member + m * dim);
        assert!(per_update(1.0) > per_update(8.0));
    }

    #[test]
    fn pups_smoke_runs() {
        let mut spec = ExperimentSpec::default();
        spec.apply_smoke();
        spec.seed = 5;
        let tables = run_pups(&spec).unwrap();
        let names: Vec<&str> = tables.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["summaries", "uniques", "ks_vs_gibbs", "tuning"]);
        let uniques = &tables[1];
        // methods x updates x sites rows
        let n_methods = 4;
        assert_eq!(
            uniques.rows.len(),
            n_methods * spec.pups_updates * spec.pups_sites.len()
        );
    }
}
