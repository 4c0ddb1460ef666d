//! Collapsed Gibbs sampler over the IBP feature matrix.
//!
//! Weights are integrated out with the Laplace approximation, so the state is
//! Z alone. Each sweep visits the rows in order; for every row it resamples
//! the entries of the existing columns, proposes a batch of new singleton
//! features, and drops columns nobody owns.
//!
//! The sampler keeps, per dimension, the MAP weights and log marginal of the
//! current Z. Candidates are evaluated by warm-starting Newton's method from
//! those weights; only the accepted candidate's results replace the cache.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{laplace_grouped, HessianSolver, LaplaceResult, PatternGroups};
use crate::model::{Hyperparams, LatentFeatureState, ObservationMatrix, WeightStack};
use crate::rng::{stream, Purpose};

fn default_max_new() -> usize {
    4
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub n_iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub k_init: usize,
    /// Probability that each initial z_nk is 1.
    pub p_init: f64,
    /// Truncation of the new-feature proposal distribution.
    #[serde(default = "default_max_new")]
    pub max_new_features_per_step: usize,
    /// Leave rows whose every entry equals the baseline category at z = 0.
    #[serde(default)]
    pub skip_all_baseline_rows: bool,
    /// 0-based baseline category per dimension, required when skipping.
    #[serde(default)]
    pub baseline_categories: Option<Vec<usize>>,
    /// Hard cap on K₊; births that would exceed it are not proposed.
    #[serde(default)]
    pub max_features: Option<usize>,
    #[serde(default)]
    pub solver: HessianSolver,
    pub hyper: Hyperparams,
}

impl GibbsConfig {
    /// Settings of the synthetic image experiment.
    pub fn image_defaults(seed: u64) -> Self {
        Self {
            n_iterations: 350,
            burn_in: 300,
            k_init: 2,
            p_init: 0.5,
            max_new_features_per_step: default_max_new(),
            skip_all_baseline_rows: false,
            baseline_categories: None,
            max_features: None,
            solver: HessianSolver::Woodbury,
            hyper: Hyperparams {
                alpha: 0.5,
                sigma_b_sq: 1.0,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.n_iterations > 0 && self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be < n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        if !(0.0..=1.0).contains(&self.p_init) {
            return Err(Error::Config(format!("p_init {} outside [0, 1]", self.p_init)));
        }
        if self.skip_all_baseline_rows && self.baseline_categories.is_none() {
            return Err(Error::Config(
                "skip_all_baseline_rows needs baseline_categories".into(),
            ));
        }
        if let Some(cap) = self.max_features {
            if self.k_init > cap {
                return Err(Error::Config(format!("k_init {} exceeds max_features {cap}", self.k_init)));
            }
        }
        Ok(())
    }
}

/// Per-iteration record of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub k_active: Vec<usize>,
    /// Σ_d log p(x_·d | Z) after each sweep.
    pub log_marginal: Vec<f64>,
    /// Column counts m_k after each sweep.
    pub occupancy: Vec<Vec<usize>>,
    pub final_z: LatentFeatureState,
    /// B_MAP of the final Z.
    pub final_weights: WeightStack,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.k_active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_active.is_empty()
    }
}

/// Prior probability that z_nk = 1 given the other rows: m_{-n,k} / N.
pub fn conditional_prior(m_minus: usize, n_rows: usize) -> Result<f64> {
    if n_rows == 0 || m_minus >= n_rows {
        return Err(Error::InvalidArgument(format!(
            "m_minus = {m_minus} must be below N = {n_rows}"
        )));
    }
    Ok(m_minus as f64 / n_rows as f64)
}

/// Removes columns with m_k = 0, and the matching weight rows if given.
/// Returns the removed column indices (in the original numbering).
pub fn prune_empty_columns(z: &mut LatentFeatureState, weights: Option<&mut WeightStack>) -> Vec<usize> {
    let removed: Vec<usize> = (0..z.k_active()).filter(|&k| z.column_counts()[k] == 0).collect();
    for &k in removed.iter().rev() {
        z.remove_column(k);
    }
    if let Some(w) = weights {
        for &k in removed.iter().rev() {
            w.remove_feature(k);
        }
    }
    removed
}

fn log_poisson(k: usize, mean: f64) -> f64 {
    k as f64 * mean.ln() - mean - crate::special::ln_gamma(k as f64 + 1.0)
}

/// Samples an index from unnormalized log weights.
fn sample_log_weights<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let probs = normalize_log_weights(log_w);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Where a chain starts and which parts of it stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStart {
    pub z: LatentFeatureState,
    /// The first `frozen_columns` columns are never pruned.
    pub frozen_columns: usize,
    /// Rows whose features are resampled; `None` samples every row.
    pub sample_rows: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
struct DimCache {
    b_map: DMatrix<f64>,
    log_marginal: f64,
}

/// Gibbs sampler state bound to one dataset.
pub struct GibbsSampler<'a> {
    x: &'a ObservationMatrix,
    x_columns: Vec<Vec<usize>>,
    config: GibbsConfig,
    z: LatentFeatureState,
    cache: Vec<DimCache>,
    frozen: usize,
    sample_rows: Vec<bool>,
}

impl<'a> GibbsSampler<'a> {
    /// Sampler starting from a given Z, every row sampled, nothing frozen.
    pub fn new(x: &'a ObservationMatrix, z: LatentFeatureState, config: GibbsConfig) -> Result<Self> {
        Self::with_start(
            x,
            ChainStart {
                z,
                frozen_columns: 0,
                sample_rows: None,
            },
            config,
        )
    }

    pub fn with_start(x: &'a ObservationMatrix, start: ChainStart, config: GibbsConfig) -> Result<Self> {
        config.validate()?;
        let ChainStart {
            z,
            frozen_columns,
            sample_rows,
        } = start;
        if z.n_rows() != x.n_rows() {
            return Err(Error::Dimension(format!(
                "Z has {} rows, X has {}",
                z.n_rows(),
                x.n_rows()
            )));
        }
        if frozen_columns > z.k_active() {
            return Err(Error::InvalidArgument(format!(
                "{frozen_columns} frozen columns but K₊ = {}",
                z.k_active()
            )));
        }
        let mut sample_rows = sample_rows.unwrap_or_else(|| vec![true; x.n_rows()]);
        if sample_rows.len() != x.n_rows() {
            return Err(Error::Dimension("sample_rows length differs from N".into()));
        }
        let mut z = z;
        if config.skip_all_baseline_rows {
            let baseline = config.baseline_categories.as_ref().expect("validated");
            if baseline.len() != x.n_cols() {
                return Err(Error::Dimension(format!(
                    "{} baseline categories for {} dimensions",
                    baseline.len(),
                    x.n_cols()
                )));
            }
            for (n, flag) in sample_rows.iter_mut().enumerate() {
                if (0..x.n_cols()).all(|d| x.get(n, d) == baseline[d]) {
                    *flag = false;
                    for k in 0..z.k_active() {
                        z.set(n, k, false);
                    }
                }
            }
        }
        let x_columns = (0..x.n_cols()).map(|d| x.column(d)).collect();
        let mut sampler = Self {
            x,
            x_columns,
            config,
            z,
            cache: Vec::new(),
            frozen: frozen_columns,
            sample_rows,
        };
        sampler.prune();
        sampler.refresh_cache()?;
        Ok(sampler)
    }

    pub fn state(&self) -> &LatentFeatureState {
        &self.z
    }

    pub fn into_state(self) -> LatentFeatureState {
        self.z
    }

    pub fn config(&self) -> &GibbsConfig {
        &self.config
    }

    /// Σ_d log p(x_·d | Z) for the current Z.
    pub fn log_marginal(&self) -> f64 {
        self.cache.iter().map(|c| c.log_marginal).sum()
    }

    /// B_MAP of the current Z.
    pub fn map_weights(&self) -> Result<WeightStack> {
        if self.cache.is_empty() {
            return Ok(WeightStack::zeros(self.z.k_active(), &[]));
        }
        WeightStack::from_matrices(self.cache.iter().map(|c| c.b_map.clone()).collect())
    }

    fn evaluate(&self, z: &LatentFeatureState, extra_rows: usize) -> Result<Vec<LaplaceResult>> {
        let groups = PatternGroups::from_state(z);
        let hyper = self.config.hyper;
        let solver = self.config.solver;
        let run = |d: usize| {
            let r = self.x.cardinality(d);
            let counts = groups.category_counts(&self.x_columns[d], r);
            let warm = self.cache.get(d).map(|c| {
                if extra_rows == 0 {
                    c.b_map.clone()
                } else {
                    c.b_map.clone().resize_vertically(c.b_map.nrows() + extra_rows, 0.0)
                }
            });
            laplace_grouped(&groups, &counts, r, &hyper, warm.as_ref(), solver)
        };
        let results: Vec<Result<LaplaceResult>> = if self.x.n_cols() >= 8 {
            (0..self.x.n_cols()).into_par_iter().map(run).collect()
        } else {
            (0..self.x.n_cols()).map(run).collect()
        };
        results.into_iter().collect()
    }

    fn install(&mut self, results: Vec<LaplaceResult>) {
        self.cache = results
            .into_iter()
            .map(|r| DimCache {
                b_map: r.b_map,
                log_marginal: r.log_marginal,
            })
            .collect();
    }

    fn refresh_cache(&mut self) -> Result<()> {
        let results = self.evaluate(&self.z, 0)?;
        self.install(results);
        Ok(())
    }

    /// Drops empty, non-frozen columns together with their cached weight rows.
    /// An empty column carries no likelihood, so the cached marginals stay valid.
    fn prune(&mut self) -> Vec<usize> {
        let removed: Vec<usize> = (self.frozen..self.z.k_active())
            .filter(|&k| self.z.column_counts()[k] == 0)
            .collect();
        for &k in removed.iter().rev() {
            self.z.remove_column(k);
            for c in &mut self.cache {
                if c.b_map.nrows() > k + 1 {
                    c.b_map = c.b_map.clone().remove_row(k + 1);
                }
            }
        }
        removed
    }

    /// P(z_nk = 1 | X, Z_¬nk). Zero when no other row owns feature k.
    pub fn entry_conditional(&self, n: usize, k: usize) -> Result<f64> {
        let (p, _) = self.entry_conditional_with(n, k)?;
        Ok(p)
    }

    fn entry_conditional_with(&self, n: usize, k: usize) -> Result<(f64, Option<Vec<LaplaceResult>>)> {
        let current = self.z.get(n, k);
        let m_minus = self.z.column_counts()[k] - current as usize;
        if m_minus == 0 {
            return Ok((0.0, None));
        }
        let prior_one = conditional_prior(m_minus, self.z.n_rows())?;
        let mut flipped = self.z.clone();
        flipped.set(n, k, !current);
        let results = self.evaluate(&flipped, 0)?;
        let flipped_lm: f64 = results.iter().map(|r| r.log_marginal).sum();
        let current_lm = self.log_marginal();
        let (lm_one, lm_zero) = if current {
            (current_lm, flipped_lm)
        } else {
            (flipped_lm, current_lm)
        };
        let log_one = prior_one.ln() + lm_one;
        let log_zero = (1.0 - prior_one).ln() + lm_zero;
        let p = normalize_log_weights(&[log_zero, log_one])[1];
        Ok((p, Some(results)))
    }

    /// Resamples z_nk from its conditional.
    pub fn resample_entry<R: Rng + ?Sized>(&mut self, n: usize, k: usize, rng: &mut R) -> Result<()> {
        let current = self.z.get(n, k);
        let (p_one, results) = self.entry_conditional_with(n, k)?;
        let Some(results) = results else {
            // No other owner: the prior forces z_nk = 0.
            if current {
                self.z.set(n, k, false);
                self.refresh_cache()?;
            }
            return Ok(());
        };
        let draw = rng.random::<f64>() < p_one;
        if draw != current {
            self.z.set(n, k, draw);
            self.install(results);
        }
        Ok(())
    }

    fn birth_cap(&self) -> usize {
        let by_cap = self
            .config
            .max_features
            .map_or(usize::MAX, |cap| cap.saturating_sub(self.z.k_active()));
        self.config.max_new_features_per_step.min(by_cap)
    }

    fn with_new_features(&self, n: usize, count: usize) -> LatentFeatureState {
        let mut z = self.z.clone();
        for _ in 0..count {
            let mut col = vec![false; z.n_rows()];
            col[n] = true;
            z.push_column(col).expect("column length matches");
        }
        z
    }

    /// Normalized distribution of the number of new singleton features at
    /// row n: Poisson(α/N) prior mass times the marginal likelihood, over
    /// 0..=truncation.
    pub fn new_feature_distribution(&self, n: usize) -> Result<Vec<f64>> {
        let (log_w, _) = self.new_feature_log_weights(n)?;
        Ok(normalize_log_weights(&log_w))
    }

    fn new_feature_log_weights(&self, n: usize) -> Result<(Vec<f64>, Vec<Option<Vec<LaplaceResult>>>)> {
        let mean = self.config.hyper.alpha / self.z.n_rows() as f64;
        let cap = self.birth_cap();
        let mut log_w = Vec::with_capacity(cap + 1);
        let mut results = Vec::with_capacity(cap + 1);
        log_w.push(log_poisson(0, mean) + self.log_marginal());
        results.push(None);
        for j in 1..=cap {
            let candidate = self.with_new_features(n, j);
            let res = self.evaluate(&candidate, j)?;
            let lm: f64 = res.iter().map(|r| r.log_marginal).sum();
            log_w.push(log_poisson(j, mean) + lm);
            results.push(Some(res));
        }
        Ok((log_w, results))
    }

    /// Draws the number of new features owned only by row n and appends them.
    pub fn sample_new_features<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<usize> {
        if self.birth_cap() == 0 {
            return Ok(0);
        }
        let (log_w, mut results) = self.new_feature_log_weights(n)?;
        let j = sample_log_weights(&log_w, rng);
        if j > 0 {
            self.z = self.with_new_features(n, j);
            self.install(results.swap_remove(j).expect("evaluated"));
        }
        Ok(j)
    }

    /// One pass over all sampled rows.
    pub fn sweep_with<F>(&mut self, mut rng_for_row: F) -> Result<()>
    where
        F: FnMut(usize) -> crate::rng::StreamRng,
    {
        for n in 0..self.z.n_rows() {
            if !self.sample_rows[n] {
                continue;
            }
            let mut rng = rng_for_row(n);
            let mut k = 0;
            while k < self.z.k_active() {
                self.resample_entry(n, k, &mut rng)?;
                k += 1;
            }
            self.prune();
            self.sample_new_features(n, &mut rng)?;
        }
        self.prune();
        Ok(())
    }

    /// Runs `n_iterations` sweeps, calling `observe(iteration, Z)` after each.
    pub fn run<F>(&mut self, mut observe: F) -> Result<ChainTrace>
    where
        F: FnMut(usize, &LatentFeatureState),
    {
        let iters = self.config.n_iterations;
        let seed = self.config.hyper.seed;
        let mut trace_k = Vec::with_capacity(iters);
        let mut trace_lm = Vec::with_capacity(iters);
        let mut occupancy = Vec::with_capacity(iters);
        for it in 0..iters {
            self.sweep_with(|n| stream(seed, Purpose::Sweep, it as u64, n as u64))?;
            let lm = self.log_marginal();
            if !lm.is_finite() {
                return Err(Error::NonFinite(format!("log marginal at iteration {it}")));
            }
            trace_k.push(self.z.k_active());
            trace_lm.push(lm);
            occupancy.push(self.z.column_counts().to_vec());
            log::debug!("iteration {it}: K+ = {}, log p(X|Z) = {lm:.6}", self.z.k_active());
            observe(it, &self.z);
        }
        Ok(ChainTrace {
            k_active: trace_k,
            log_marginal: trace_lm,
            occupancy,
            final_z: self.z.clone(),
            final_weights: self.map_weights()?,
        })
    }
}

/// Initial Z: `k_init` columns with Bernoulli(`p_init`) entries, drawn from
/// the initialization stream of `seed`.
pub fn initial_state(n_rows: usize, config: &GibbsConfig) -> LatentFeatureState {
    let mut rng = stream(config.hyper.seed, Purpose::Init, 0, 0);
    let columns = (0..config.k_init)
        .map(|_| (0..n_rows).map(|_| rng.random::<f64>() < config.p_init).collect())
        .collect();
    LatentFeatureState::from_columns(n_rows, columns).expect("columns have n_rows entries")
}

/// Runs a chain from the configured random initialization.
pub fn run_chain(x: &ObservationMatrix, config: &GibbsConfig) -> Result<ChainTrace> {
    let z = initial_state(x.n_rows(), config);
    GibbsSampler::new(x, z, config.clone())?.run(|_, _| {})
}

/// Resamples z_nk once.
pub fn resample_entry<R: Rng + ?Sized>(
    x: &ObservationMatrix,
    z: &LatentFeatureState,
    n: usize,
    k: usize,
    config: &GibbsConfig,
    rng: &mut R,
) -> Result<LatentFeatureState> {
    let mut s = GibbsSampler::with_start(
        x,
        ChainStart {
            z: z.clone(),
            frozen_columns: z.k_active(),
            sample_rows: None,
        },
        config.clone(),
    )?;
    s.resample_entry(n, k, rng)?;
    Ok(s.into_state())
}

/// Samples new singleton features for row n once.
pub fn sample_new_features<R: Rng + ?Sized>(
    x: &ObservationMatrix,
    z: &LatentFeatureState,
    n: usize,
    config: &GibbsConfig,
    rng: &mut R,
) -> Result<LatentFeatureState> {
    let mut s = GibbsSampler::with_start(
        x,
        ChainStart {
            z: z.clone(),
            frozen_columns: z.k_active(),
            sample_rows: None,
        },
        config.clone(),
    )?;
    s.sample_new_features(n, rng)?;
    Ok(s.into_state())
}

/// One full sweep from `z` using row streams of `iteration`.
pub fn sweep(
    x: &ObservationMatrix,
    z: &LatentFeatureState,
    config: &GibbsConfig,
    iteration: u64,
) -> Result<LatentFeatureState> {
    let mut s = GibbsSampler::new(x, z.clone(), config.clone())?;
    let seed = config.hyper.seed;
    s.sweep_with(|n| stream(seed, Purpose::Sweep, iteration, n as u64))?;
    Ok(s.into_state())
}
