//! Shared random instances and finite-difference helpers.
#![allow(dead_code)]

use ibpcat::laplace::SufficientCounts;
use ibpcat::rng::{stream, Purpose};
use ibpcat::vi::{lower_bound, VariationalState};
use ibpcat::{Hyperparams, LatentFeatureState, ObservationMatrix};
use nalgebra::DMatrix;
use rand::Rng;

/// |a - b| / (1 + |b|).
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

/// One dimension of a random multinomial-logit problem.
pub struct LaplaceInstance {
    pub x_col: Vec<usize>,
    pub r: usize,
    pub z: LatentFeatureState,
    pub hyper: Hyperparams,
    pub counts: SufficientCounts,
    pub b: DMatrix<f64>,
}

pub fn laplace_instance(seed: u64, max_n: usize, max_k: usize, max_r: usize) -> LaplaceInstance {
    let mut rng = stream(seed, Purpose::Generator, 11, 0);
    let n = rng.random_range(1..=max_n);
    let k = rng.random_range(0..=max_k);
    let r = rng.random_range(2..=max_r);
    let entries: Vec<u8> = (0..n * k).map(|_| rng.random_bool(0.5) as u8).collect();
    let z = LatentFeatureState::from_rows(n, k, &entries).unwrap();
    let x_col: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
    let hyper = Hyperparams::new(1.0, rng.random_range(0.3..3.0), seed).unwrap();
    let counts = SufficientCounts::new(&x_col, &z, r).unwrap();
    let b = DMatrix::from_fn(k + 1, r, |_, _| rng.random_range(-1.5..1.5));
    LaplaceInstance { x_col, r, z, hyper, counts, b }
}

pub fn random_instance(seed: u64) -> (ObservationMatrix, VariationalState, Hyperparams) {
    let mut rng = stream(seed, Purpose::Generator, 7, 0);
    let n = rng.random_range(2..12);
    let cards: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..4)).collect();
    let data = (0..n).flat_map(|_| cards.iter().map(|&r| rng.random_range(0..r as u32)).collect::<Vec<_>>()).collect();
    let x = ObservationMatrix::new(n, cards, data).unwrap();
    let hyper = Hyperparams::new(rng.random_range(0.5..3.0), rng.random_range(0.3..2.0), seed).unwrap();
    let k = rng.random_range(1..5);
    let mut s = VariationalState::random(&x, k, &hyper, &mut rng).unwrap();
    for t in &mut s.tau {
        *t = [rng.random_range(0.5..5.0), rng.random_range(0.5..5.0)];
    }
    for d in 0..x.n_cols() {
        for v in s.phi[d].iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in s.sigma_sq[d].iter_mut() {
            *v = rng.random_range(0.1..1.5);
        }
    }
    for row in &mut s.lambda {
        let w: Vec<f64> = row.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let tot: f64 = w.iter().sum();
        *row = w.into_iter().map(|v| v / tot).collect();
    }
    for n in 0..x.n_rows() {
        for d in 0..x.n_cols() {
            s.set_xi(n, d, rng.random_range(0.1..1.0));
        }
    }
    (x, s, hyper)
}

pub fn fd<F: Fn(&mut VariationalState, f64)>(x: &ObservationMatrix, s: &VariationalState, h: &Hyperparams, set: F, at: f64, eps: f64) -> (f64, f64) {
    let eval = |v: f64| {
        let mut c = s.clone();
        set(&mut c, v);
        lower_bound(x, &c, h).unwrap()
    };
    let (lp, l0, lm) = (eval(at + eps), eval(at), eval(at - eps));
    ((lp - lm) / (2.0 * eps), (lp - 2.0 * l0 + lm) / (eps * eps))
}

/// Fourth-order central difference of the bound along one coordinate.
pub fn fd4<F: Fn(&mut VariationalState, f64)>(x: &ObservationMatrix, s: &VariationalState, h: &Hyperparams, set: F, at: f64, eps: f64) -> f64 {
    let eval = |v: f64| {
        let mut c = s.clone();
        set(&mut c, v);
        lower_bound(x, &c, h).unwrap()
    };
    (-eval(at + 2.0 * eps) + 8.0 * eval(at + eps) - 8.0 * eval(at - eps) + eval(at - 2.0 * eps)) / (12.0 * eps)
}

/// Index of a 2-row Z with at most one column: 0 = no feature, 1 = (1,0),
/// 2 = (0,1), 3 = (1,1).
pub fn two_row_state(z: &LatentFeatureState) -> usize {
    match z.k_active() {
        0 => 0,
        1 => z.get(0, 0) as usize + 2 * z.get(1, 0) as usize,
        k => panic!("cap violated: K = {k}"),
    }
}

/// IBP probability of the left-ordered class of `z`, up to exp(-α H_N).
pub fn ibp_class_weight(z: &LatentFeatureState, alpha: f64) -> f64 {
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    let n = z.n_rows();
    let k = z.k_active();
    let mut histories: std::collections::HashMap<Vec<bool>, usize> = Default::default();
    for c in z.columns() {
        *histories.entry(c.clone()).or_default() += 1;
    }
    let mut w = alpha.powi(k as i32) / histories.values().map(|&h| fact(h)).product::<f64>();
    for &m in z.column_counts() {
        w *= fact(n - m) * fact(m - 1) / fact(n);
    }
    w
}

/// Exact posterior over the four states for a 2×D dataset with K₊ ≤ 1,
/// under the Laplace-approximated marginal likelihood.
pub fn two_row_posterior(x: &ObservationMatrix, hyper: &Hyperparams) -> [f64; 4] {
    let states = [
        LatentFeatureState::empty(2),
        LatentFeatureState::from_rows(2, 1, &[1, 0]).unwrap(),
        LatentFeatureState::from_rows(2, 1, &[0, 1]).unwrap(),
        LatentFeatureState::from_rows(2, 1, &[1, 1]).unwrap(),
    ];
    let mut w = [0.0; 4];
    for (i, z) in states.iter().enumerate() {
        let lm = ibpcat::laplace::total_log_marginal(x, z, hyper).unwrap();
        w[i] = ibp_class_weight(z, hyper.alpha) * lm.exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Visit counts of a capped chain on a 2-row dataset, recording every
/// `thin`-th sweep after `burn_in` sweeps.
pub fn two_row_chain_counts(x: &ObservationMatrix, hyper: &Hyperparams, burn_in: usize, samples: usize, thin: usize) -> [u64; 4] {
    use ibpcat::gibbs::{GibbsConfig, GibbsSampler};
    let mut cfg = GibbsConfig::image_defaults(hyper.seed);
    cfg.hyper = *hyper;
    cfg.k_init = 1;
    cfg.max_features = Some(1);
    cfg.n_iterations = burn_in + samples * thin;
    cfg.burn_in = burn_in;
    let z0 = ibpcat::gibbs::initial_state(2, &cfg);
    let mut counts = [0u64; 4];
    GibbsSampler::new(x, z0, cfg)
        .unwrap()
        .run(|it, z| {
            if it >= burn_in && (it - burn_in) % thin == thin - 1 {
                counts[two_row_state(z)] += 1;
            }
        })
        .unwrap();
    counts
}

/// Pearson χ² statistic and its p-value on `k - 1` degrees of freedom.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}
