mod common;

use common::{laplace_instance, rel};
use ibpcat::laplace::{
    dense_neg_hessian_from_pi, fast_inverse, gradient_f, hessian_neg, laplace_grouped, log_det_neg_hessian,
    newton_map, objective_f, row_probabilities, HessianSolver, PatternGroups,
};
use ibpcat::{log_likelihood, Hyperparams, LatentFeatureState, ObservationMatrix, WeightStack};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn max_rel_entry(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(1e-300);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..50 {
        let t = laplace_instance(seed, 20, 3, 4);
        let g = gradient_f(&t.b, &t.counts, &t.z, &t.hyper).unwrap();
        for i in 0..t.b.nrows() {
            for c in 0..t.b.ncols() {
                let eps = 1e-5;
                let mut bp = t.b.clone();
                bp[(i, c)] += eps;
                let mut bm = t.b.clone();
                bm[(i, c)] -= eps;
                let fd = (objective_f(&bp, &t.counts, &t.z, &t.hyper).unwrap()
                    - objective_f(&bm, &t.counts, &t.z, &t.hyper).unwrap())
                    / (2.0 * eps);
                assert!(rel(g[(i, c)], fd) < 1e-5, "seed {seed} ({i},{c}): {} vs {fd}", g[(i, c)]);
            }
        }
    }
}

#[test]
fn hessian_matches_finite_differences() {
    for seed in 0..50 {
        let t = laplace_instance(seed, 20, 3, 4);
        let h = hessian_neg(&t.b, &t.z, &t.hyper).unwrap();
        let kp1 = t.b.nrows();
        let eps = 1e-5;
        for c in 0..t.b.ncols() {
            for i in 0..kp1 {
                let mut bp = t.b.clone();
                bp[(i, c)] += eps;
                let mut bm = t.b.clone();
                bm[(i, c)] -= eps;
                let gp = gradient_f(&bp, &t.counts, &t.z, &t.hyper).unwrap();
                let gm = gradient_f(&bm, &t.counts, &t.z, &t.hyper).unwrap();
                let col = c * kp1 + i;
                for c2 in 0..t.b.ncols() {
                    for i2 in 0..kp1 {
                        let fd = -(gp[(i2, c2)] - gm[(i2, c2)]) / (2.0 * eps);
                        let row = c2 * kp1 + i2;
                        assert!(rel(h[(row, col)], fd) < 1e-4, "seed {seed}: {} vs {fd}", h[(row, col)]);
                    }
                }
            }
        }
    }
}

#[test]
fn woodbury_matches_dense() {
    for seed in 0..50 {
        let t = laplace_instance(seed, 50, 5, 4);
        let pi = row_probabilities(&t.b, &t.z).unwrap();
        let dense = dense_neg_hessian_from_pi(&pi, &t.z, t.hyper.sigma_b_sq);
        let inv = dense.clone().cholesky().unwrap().inverse();
        let fast = fast_inverse(&pi, &t.z, &t.hyper).unwrap();
        assert!(max_rel_entry(&fast, &inv) < 1e-8, "seed {seed}");
        let ld_dense = 2.0 * dense.cholesky().unwrap().l().diagonal().map(f64::ln).sum();
        let ld = log_det_neg_hessian(&pi, &t.z, &t.hyper).unwrap();
        assert!((ld - ld_dense).abs() < 1e-8, "seed {seed}: {ld} vs {ld_dense}");
    }
}

#[test]
fn identity_form_of_log_det() {
    // log|I + σ²A| = log|A + I/σ²| + P log σ².
    for seed in 0..20 {
        let t = laplace_instance(seed, 15, 3, 3);
        let pi = row_probabilities(&t.b, &t.z).unwrap();
        let h = dense_neg_hessian_from_pi(&pi, &t.z, t.hyper.sigma_b_sq);
        let p = h.nrows();
        let s2 = t.hyper.sigma_b_sq;
        let data_part = &h - DMatrix::identity(p, p) / s2;
        let ident_form = DMatrix::identity(p, p) + data_part * s2;
        let lhs = ident_form.determinant().ln();
        let rhs = log_det_neg_hessian(&pi, &t.z, &t.hyper).unwrap() + p as f64 * s2.ln();
        assert!((lhs - rhs).abs() < 1e-8, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn log_marginal_matches_its_definition() {
    for seed in 0..20 {
        let t = laplace_instance(seed, 15, 3, 3);
        let res = newton_map(&t.x_col, t.r, &t.z, &t.hyper).unwrap();
        let b = &res.b_map;
        let pi = row_probabilities(b, &t.z).unwrap();
        let ld = log_det_neg_hessian(&pi, &t.z, &t.hyper).unwrap();
        let p = (t.r * (t.z.k_active() + 1)) as f64;
        let x = ObservationMatrix::new(t.x_col.len(), vec![t.r], t.x_col.iter().map(|&v| v as u32).collect()).unwrap();
        let ll = log_likelihood(&x, &t.z, &WeightStack::from_matrices(vec![b.clone()]).unwrap()).unwrap();
        let s2 = t.hyper.sigma_b_sq;
        let expected = -b.norm_squared() / (2.0 * s2) - 0.5 * (ld + p * s2.ln()) + ll;
        assert!((res.log_marginal - expected).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn map_is_stationary_and_matches_gradient_ascent() {
    for seed in 0..20 {
        let t = laplace_instance(seed, 12, 2, 3);
        let res = newton_map(&t.x_col, t.r, &t.z, &t.hyper).unwrap();
        let g = gradient_f(&res.b_map, &t.counts, &t.z, &t.hyper).unwrap();
        assert!(g.amax() < 1e-8);
        // Plain gradient ascent with a step below 1/L, L ≤ 1/σ² + N·‖z‖².
        let l = 1.0 / t.hyper.sigma_b_sq + (t.x_col.len() * (t.z.k_active() + 1)) as f64;
        let mut b = DMatrix::zeros(t.b.nrows(), t.b.ncols());
        for _ in 0..200_000 {
            let g = gradient_f(&b, &t.counts, &t.z, &t.hyper).unwrap();
            if g.amax() < 1e-11 {
                break;
            }
            b += g / l;
        }
        assert!((&b - &res.b_map).amax() < 1e-6, "seed {seed}");
    }
}

#[test]
fn prior_dominated_map_is_near_zero() {
    for seed in 0..10 {
        let mut t = laplace_instance(seed, 20, 3, 4);
        t.hyper = Hyperparams::new(1.0, 1e-6, 0).unwrap();
        let res = newton_map(&t.x_col, t.r, &t.z, &t.hyper).unwrap();
        assert!(res.b_map.amax() < 1e-2);
    }
}

#[test]
fn solvers_and_grouping_agree() {
    for seed in 0..30 {
        let t = laplace_instance(seed, 40, 4, 4);
        let grouped = PatternGroups::from_state(&t.z);
        let ungrouped = PatternGroups::ungrouped(&t.z);
        let a = laplace_grouped(&grouped, &grouped.category_counts(&t.x_col, t.r), t.r, &t.hyper, None, HessianSolver::Woodbury).unwrap();
        let b = laplace_grouped(&grouped, &grouped.category_counts(&t.x_col, t.r), t.r, &t.hyper, None, HessianSolver::Dense).unwrap();
        let c = laplace_grouped(&ungrouped, &ungrouped.category_counts(&t.x_col, t.r), t.r, &t.hyper, None, HessianSolver::Dense).unwrap();
        for other in [&b, &c] {
            assert!((a.log_marginal - other.log_marginal).abs() < 1e-9, "seed {seed}");
            assert!((&a.b_map - &other.b_map).amax() < 1e-8, "seed {seed}");
        }
        // A warm start changes only the path.
        let warm = laplace_grouped(&grouped, &grouped.category_counts(&t.x_col, t.r), t.r, &t.hyper, Some(&t.b), HessianSolver::Woodbury).unwrap();
        assert!((warm.log_marginal - a.log_marginal).abs() < 1e-8, "seed {seed}: {} vs {}", warm.log_marginal, a.log_marginal);
    }
}

fn arb_problem() -> impl Strategy<Value = (LatentFeatureState, DMatrix<f64>, f64)> {
    (1usize..15, 0usize..4, 2usize..5, 0.2f64..4.0).prop_flat_map(|(n, k, r, s2)| {
        (
            proptest::collection::vec(any::<bool>(), n * k),
            proptest::collection::vec(-3.0f64..3.0, (k + 1) * r),
        )
            .prop_map(move |(zs, bs)| {
                let entries: Vec<u8> = zs.iter().map(|&b| b as u8).collect();
                let z = LatentFeatureState::from_rows(n, k, &entries).unwrap();
                (z, DMatrix::from_vec(k + 1, r, bs), s2)
            })
    })
}

proptest! {
    #[test]
    fn neg_hessian_is_symmetric_with_prior_floor((z, b, s2) in arb_problem()) {
        let hyper = Hyperparams::new(1.0, s2, 0).unwrap();
        let h = hessian_neg(&b, &z, &hyper).unwrap();
        prop_assert!((&h - h.transpose()).amax() < 1e-12);
        let min_eig = h.symmetric_eigenvalues().min();
        prop_assert!(min_eig >= 1.0 / s2 - 1e-9);
    }

    #[test]
    fn row_probabilities_are_distributions((z, b, _s2) in arb_problem()) {
        let pi = row_probabilities(&b, &z).unwrap();
        for n in 0..pi.nrows() {
            prop_assert!((pi.row(n).sum() - 1.0).abs() < 1e-12);
            prop_assert!(pi.row(n).iter().all(|&p| p > 0.0));
        }
    }
}
