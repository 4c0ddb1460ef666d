use std::collections::HashMap;

use ibpcat::analysis::{
    build_report, conditional_cooccurrence, cooccurrence_tables, empirical_baseline, feature_prevalence,
    flip_prevalent_features, pattern_census, pattern_probabilities, probability_ratio, single_feature_prevalence,
    wildcard_prevalence, FeaturePattern, ReportOptions,
};
use ibpcat::rng::{stream, Purpose};
use ibpcat::synthgen::{generate_categorical, CategoricalGenConfig};
use ibpcat::{category_probabilities, Hyperparams, LatentFeatureState, ObservationMatrix, WeightStack};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn arb_z() -> impl Strategy<Value = LatentFeatureState> {
    (1usize..30, 0usize..6).prop_flat_map(|(n, k)| {
        proptest::collection::vec(0.05f64..0.95, k).prop_flat_map(move |ps| {
            let cols: Vec<_> = ps.iter().map(|&p| proptest::collection::vec(proptest::bool::weighted(p), n)).collect();
            cols.prop_map(move |c| LatentFeatureState::from_columns(n, c).unwrap())
        })
    })
}

fn rows(z: &LatentFeatureState) -> Vec<Vec<bool>> {
    (0..z.n_rows()).map(|i| (0..z.k_active()).map(|k| z.get(i, k)).collect()).collect()
}

proptest! {
    #[test]
    fn prevalence_matches_counting(z in arb_z()) {
        let n = z.n_rows() as f64;
        let rs = rows(&z);
        let prev = feature_prevalence(&z);
        let single = single_feature_prevalence(&z);
        for k in 0..z.k_active() {
            let count = rs.iter().filter(|r| r[k]).count() as f64;
            prop_assert_eq!(prev[k], count / n);
            let only = rs.iter().filter(|r| r[k] && r.iter().filter(|&&b| b).count() == 1).count() as f64;
            prop_assert_eq!(single[k], only / n);
        }
    }

    #[test]
    fn cooccurrence_matches_counting(z in arb_z()) {
        prop_assume!(z.k_active() >= 2);
        let n = z.n_rows() as f64;
        let rs = rows(&z);
        let (emp, prod) = cooccurrence_tables(&z).unwrap();
        let prev = feature_prevalence(&z);
        let cond = conditional_cooccurrence(&z);
        for a in 0..z.k_active() {
            prop_assert_eq!(emp[(a, a)], prev[a]);
            for b in 0..z.k_active() {
                let both = rs.iter().filter(|r| r[a] && r[b]).count() as f64;
                prop_assert_eq!(emp[(a, b)], both / n);
                prop_assert_eq!(emp[(a, b)], emp[(b, a)]);
                prop_assert_eq!(prod[(a, b)], prev[a] * prev[b]);
                let owners = rs.iter().filter(|r| r[a]).count() as f64;
                match cond[a][b] {
                    None => prop_assert_eq!(owners, 0.0),
                    Some(v) => prop_assert_eq!(v, both / owners),
                }
            }
            if prev[a] > 0.0 {
                prop_assert_eq!(cond[a][a], Some(1.0));
            }
        }
    }

    #[test]
    fn census_matches_hash_count(z in arb_z()) {
        let mut oracle: HashMap<Vec<bool>, usize> = HashMap::new();
        for r in rows(&z) {
            *oracle.entry(r).or_default() += 1;
        }
        let census = pattern_census(&z, usize::MAX);
        prop_assert_eq!(census.len(), oracle.len());
        prop_assert_eq!(census.iter().map(|c| c.1).sum::<usize>(), z.n_rows());
        for (pattern, count) in &census {
            let mut row = vec![false; z.k_active()];
            for &k in pattern.active() {
                row[k] = true;
            }
            prop_assert_eq!(oracle[&row], *count);
        }
        // Descending counts, ties by binary value (feature 1 = lowest bit).
        let value = |p: &FeaturePattern| p.active().iter().map(|&k| 1u64 << k).sum::<u64>();
        for w in census.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && value(&w[0].0) < value(&w[1].0)));
        }
        let top = pattern_census(&z, 2);
        prop_assert_eq!(&top[..], &census[..census.len().min(2)]);
    }

    #[test]
    fn wildcard_matches_counting(z in arb_z(), mask in any::<u8>()) {
        let active: Vec<usize> = (0..z.k_active()).filter(|k| mask >> k & 1 == 1).collect();
        let pattern = FeaturePattern::new(active.clone(), z.k_active()).unwrap();
        let hits = rows(&z).iter().filter(|r| active.iter().all(|&k| r[k])).count() as f64;
        prop_assert_eq!(wildcard_prevalence(&z, &pattern).unwrap(), hits / z.n_rows() as f64);
    }

    #[test]
    fn flipping_preserves_shape_and_settles(z in arb_z()) {
        let (f, idx) = flip_prevalent_features(&z, 0.8);
        prop_assert_eq!((f.n_rows(), f.k_active()), (z.n_rows(), z.k_active()));
        for k in 0..z.k_active() {
            let flipped = idx.contains(&k);
            prop_assert_eq!(flipped, feature_prevalence(&z)[k] > 0.8);
            for i in 0..z.n_rows() {
                prop_assert_eq!(f.get(i, k), z.get(i, k) ^ flipped);
            }
        }
        // A flipped column has prevalence < 0.2, so a second pass is a no-op
        // unless some column sits exactly at the boundary.
        let (g, idx2) = flip_prevalent_features(&f, 0.8);
        if idx2.is_empty() {
            prop_assert_eq!(g, f);
        }
    }

    #[test]
    fn ratio_of_baseline_to_itself_is_one(b in proptest::collection::vec(0.01f64..1.0, 1..10)) {
        let r = probability_ratio(&b, &b).unwrap();
        prop_assert!(r.iter().all(|v| *v == Some(1.0)));
    }
}

#[test]
fn pattern_probabilities_match_direct_formula() {
    let mut rng = stream(3, Purpose::Generator, 0, 0);
    for _ in 0..20 {
        let k = rng.random_range(2..5);
        let mats: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(k + 1, rng.random_range(2..5), |_, _| rng.random_range(-2.0..2.0))).collect();
        let w = WeightStack::from_matrices(mats.clone()).unwrap();
        let p = pattern_probabilities(&w, &FeaturePattern::new(vec![0, 1], k).unwrap()).unwrap();
        for (d, m) in mats.iter().enumerate() {
            let scores: Vec<f64> = (0..m.ncols()).map(|r| m[(0, r)] + m[(1, r)] + m[(2, r)]).collect();
            let total: f64 = scores.iter().map(|s| s.exp()).sum();
            for r in 0..m.ncols() {
                assert!((p[d][r] - scores[r].exp() / total).abs() < 1e-12);
            }
        }
        let none = pattern_probabilities(&w, &FeaturePattern::none()).unwrap();
        for (d, m) in mats.iter().enumerate() {
            let bias: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat(0.0).take(k)).collect();
            assert_eq!(none[d], category_probabilities(&bias, m).unwrap());
        }
        assert!(pattern_probabilities(&w, &FeaturePattern::single(k)).is_err());
    }
}

#[test]
fn baseline_counts_matches() {
    let x = ObservationMatrix::new(4, vec![2, 3], vec![0, 2, 1, 2, 1, 0, 1, 2]).unwrap();
    assert_eq!(empirical_baseline(&x, &[0, 2]).unwrap(), vec![0.25, 0.75]);
    assert!(empirical_baseline(&x, &[2, 0]).is_err());
}

#[test]
fn special_tables() {
    let dup = LatentFeatureState::from_columns(4, vec![vec![true, true, false, false]; 2]).unwrap();
    let (emp, prod) = cooccurrence_tables(&dup).unwrap();
    assert_eq!(emp[(0, 1)], 0.5);
    assert_eq!(prod[(0, 1)], 0.25);
    assert_eq!(conditional_cooccurrence(&dup)[0][1], Some(1.0));
    let disjoint = LatentFeatureState::from_columns(2, vec![vec![true, false], vec![false, true]]).unwrap();
    assert_eq!(cooccurrence_tables(&disjoint).unwrap().0[(0, 1)], 0.0);
    assert_eq!(conditional_cooccurrence(&disjoint)[0][1], Some(0.0));
    let same = LatentFeatureState::from_columns(5, vec![vec![true; 5], vec![false; 5]]).unwrap();
    assert_eq!(pattern_census(&same, 10), vec![(FeaturePattern::single(0), 5)]);
    assert!(cooccurrence_tables(&LatentFeatureState::empty(3)).is_err());
}

#[test]
fn planted_columns_are_independent() {
    let cfg = CategoricalGenConfig::uniform(100_000, 1, 2, 3, 0.3, 1.0);
    let (_, z, _) = generate_categorical(&cfg, &mut stream(8, Purpose::Generator, 0, 0)).unwrap();
    let (emp, prod) = cooccurrence_tables(&z).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                let se = (prod[(a, b)] * (1.0 - prod[(a, b)]) / 1e5).sqrt();
                assert!((emp[(a, b)] - prod[(a, b)]).abs() < 3.0 * se);
            }
        }
    }
}

#[test]
fn report_refits_after_flipping() {
    let cfg = CategoricalGenConfig::uniform(60, 4, 2, 2, 0.5, 1.0);
    let (x, mut z, w) = generate_categorical(&cfg, &mut stream(2, Purpose::Generator, 0, 0)).unwrap();
    for i in 0..55 {
        z.set(i, 0, true);
    }
    let hyper = Hyperparams::new(1.0, 1.0, 0).unwrap();
    let opts = ReportOptions {
        flip_threshold: Some(0.8),
        ..ReportOptions::default()
    };
    let report = build_report(&x, &z, &w, &hyper, &opts).unwrap();
    assert_eq!(report.flipped, vec![0]);
    assert!(report.weights_refit);
    assert!(report.prevalence[0] < 0.2);
    assert_eq!(report.curves.len(), 3);
    let expected = ibpcat::laplace::map_weights(&x, &report.z, &hyper).unwrap();
    assert_eq!(report.weights, expected);
    let census_total: usize = report.census.iter().map(|c| c.1).sum();
    assert!(census_total <= 60);
}
