mod common;

use common::{fd, fd4, random_instance, rel};
use ibpcat::vi::{
    coordinate_derivatives, lower_bound, nu_logit, update_lambda, update_nu, update_phi_sigma, update_tau, update_xi,
};

#[test]
fn coordinate_derivatives_match_finite_differences() {
    for seed in 0..50 {
        let (x, s, h) = random_instance(seed);
        for d in 0..x.n_cols() {
            for row in 0..=s.truncation() {
                for r in 0..x.cardinality(d) {
                    let der = coordinate_derivatives(&x, &s, &h, d, row, r).unwrap();
                    let phi0 = s.phi[d][(row, r)];
                    let (g, g2) = fd(&x, &s, &h, |c, v| c.phi[d][(row, r)] = v, phi0, 1e-4);
                    assert!(rel(der.d_phi, g) < 1e-5, "seed {seed} dphi {} vs {g}", der.d_phi);
                    assert!(rel(der.d2_phi, g2) < 1e-4, "seed {seed} d2phi {} vs {g2}", der.d2_phi);
                    let s0 = s.sigma_sq[d][(row, r)];
                    let (g, g2) = fd(&x, &s, &h, |c, v| c.sigma_sq[d][(row, r)] = v, s0, 1e-4);
                    assert!(rel(der.d_sigma_sq, g) < 1e-5, "seed {seed} ds {} vs {g}", der.d_sigma_sq);
                    assert!(rel(der.d2_sigma_sq, g2) < 1e-4, "seed {seed} d2s {} vs {g2}", der.d2_sigma_sq);
                }
            }
        }
    }
}

#[test]
fn nu_update_is_stationary() {
    for seed in 0..30 {
        let (x, mut s, h) = random_instance(seed);
        let before = lower_bound(&x, &s, &h).unwrap();
        update_nu(&x, &mut s).unwrap();
        let after = lower_bound(&x, &s, &h).unwrap();
        assert!(after >= before - 1e-9);
        for n in 0..x.n_rows() {
            for j in 0..s.truncation() {
                let a = nu_logit(&x, &s, n, j).unwrap();
                let v = 1.0 / (1.0 + (-a).exp());
                if v <= 1e-6 || v >= 1.0 - 1e-6 {
                    continue;
                }
                let mut c = s.clone();
                c.set_nu(n, j, v);
                let g = fd4(&x, &c, &h, |c, t| c.set_nu(n, j, t), v, 1e-3 * v.min(1.0 - v));
                assert!(g.abs() < 1e-6, "seed {seed} ({n},{j}) ν={v} grad {g}");
            }
        }
    }
}

#[test]
fn tau_xi_updates_are_stationary() {
    for seed in 0..30 {
        let (x, mut s, h) = random_instance(seed);
        update_tau(&mut s, &h);
        update_xi(&x, &mut s).unwrap();
        for j in 0..s.truncation() {
            for p in 0..2 {
                let t0 = s.tau[j][p];
                let (g, _) = fd(&x, &s, &h, |c, v| c.tau[j][p] = v, t0, 1e-5 * t0);
                assert!(g.abs() < 1e-6, "seed {seed} tau[{j}][{p}] grad {g}");
            }
        }
        for n in 0..x.n_rows() {
            for d in 0..x.n_cols() {
                let v = s.xi(n, d);
                let (g, _) = fd(&x, &s, &h, |c, t| c.set_xi(n, d, t), v, 1e-5 * v);
                assert!(g.abs() < 1e-6, "seed {seed} xi grad {g}");
            }
        }
    }
}

#[test]
fn lambda_and_phi_updates_do_not_decrease_bound() {
    for seed in 0..30 {
        let (x, mut s, h) = random_instance(seed);
        let b0 = lower_bound(&x, &s, &h).unwrap();
        update_lambda(&mut s);
        let b1 = lower_bound(&x, &s, &h).unwrap();
        assert!(b1 >= b0 - 1e-9);
        update_phi_sigma(&x, &mut s, &h).unwrap();
        let b2 = lower_bound(&x, &s, &h).unwrap();
        assert!(b2 >= b1 - 1e-9, "{b1} -> {b2}");
        // Rows are swept in order, so the last one is exactly stationary.
        let last = s.truncation();
        for d in 0..x.n_cols() {
            for r in 0..x.cardinality(d) {
                let der = coordinate_derivatives(&x, &s, &h, d, last, r).unwrap();
                assert!(der.d_phi.abs() < 1e-6, "seed {seed} dphi {}", der.d_phi);
                assert!(der.d_sigma_sq.abs() < 1e-6, "seed {seed} ds {}", der.d_sigma_sq);
            }
        }
    }
}

#[test]
fn lambda_update_is_stationary_on_the_simplex() {
    for seed in 0..30 {
        let (x, mut s, h) = random_instance(seed);
        update_lambda(&mut s);
        for j in 0..s.truncation() {
            for a in 1..=j {
                // Direction e_a - e_0 keeps the row on the simplex.
                let (l0, la) = (s.lambda[j][0], s.lambda[j][a]);
                let eps = 1e-4 * l0.min(la);
                let g = fd4(&x, &s, &h, |c, t| {
                    c.lambda[j][a] = la + t;
                    c.lambda[j][0] = l0 - t;
                }, 0.0, eps);
                assert!(g.abs() < 1e-6, "seed {seed} lambda[{j}] direction {a}: {g}");
            }
        }
    }
}
