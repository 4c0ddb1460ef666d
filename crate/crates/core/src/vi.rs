//! Truncated stick-breaking variational inference.
//!
//! The variational family factorizes over stick lengths v_k ~ Beta(τ_k1, τ_k2),
//! assignments z_nk ~ Bernoulli(ν_nk) and weights b_kr ~ N(φ_kr, σ²_kr), with
//! auxiliary multinomials λ_k (stick bound) and ξ_nd (softmax bound). Feature
//! indices in this module are 0-based; in φ and σ² the bias occupies row 0 and
//! feature j occupies row j + 1.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, LatentFeatureState, ObservationMatrix, WeightStack};
use crate::rng::{stream, Purpose};
use crate::special::{digamma, ln_gamma};

/// ν is kept inside [NU_FLOOR, 1 − NU_FLOOR].
pub const NU_FLOOR: f64 = 1e-8;
/// Smallest admissible variational variance.
pub const SIGMA_SQ_FLOOR: f64 = 1e-10;
/// Largest tolerated bound decrease over one cycle.
pub const BOUND_SLACK: f64 = 1e-6;
/// ν assigned to active (inactive) entries by the warm start.
pub const WARM_NU: f64 = 0.99;

const SNAPSHOT_VERSION: u32 = 1;

/// All variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    n_rows: usize,
    k: usize,
    /// (τ_k1, τ_k2) per feature.
    pub tau: Vec<[f64; 2]>,
    /// N×K, row-major.
    nu: Vec<f64>,
    /// Row j holds λ_j0..=λ_jj.
    pub lambda: Vec<Vec<f64>>,
    /// Per dimension, (K+1)×R_d.
    pub phi: Vec<DMatrix<f64>>,
    pub sigma_sq: Vec<DMatrix<f64>>,
    /// N×D, row-major.
    xi: Vec<f64>,
}

fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn clamp_nu(v: f64) -> f64 {
    v.clamp(NU_FLOOR, 1.0 - NU_FLOOR)
}

impl VariationalState {
    /// Default random start: ν ~ U(0.25, 0.75), φ ~ N(0, 0.01), σ² = σ_B²,
    /// τ = (α, 1), uniform λ rows and ξ at its optimum.
    pub fn random<R: Rng + ?Sized>(x: &ObservationMatrix, k: usize, hyper: &Hyperparams, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        if k == 0 {
            return Err(Error::InvalidArgument("truncation level must be >= 1".into()));
        }
        let n = x.n_rows();
        let nu = (0..n * k).map(|_| rng.random_range(0.25..0.75)).collect();
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let phi = x
            .cardinalities()
            .iter()
            .map(|&r| DMatrix::from_fn(k + 1, r, |_, _| normal.sample(rng)))
            .collect();
        let mut state = Self::assemble(x, k, hyper, nu, phi);
        state.xi = xi_values(x, &state);
        Ok(state)
    }

    /// Start from a binary Z and weights (e.g. a Gibbs sample and its B_MAP):
    /// ν = 0.99 where z = 1 and 0.01 elsewhere, φ = B. Columns of Z beyond the
    /// truncation level are dropped; missing ones start at ν = 0.01, φ = 0.
    pub fn from_features(
        x: &ObservationMatrix,
        k: usize,
        z: &LatentFeatureState,
        weights: &WeightStack,
        hyper: &Hyperparams,
    ) -> Result<Self> {
        hyper.validate()?;
        if k == 0 {
            return Err(Error::InvalidArgument("truncation level must be >= 1".into()));
        }
        if z.n_rows() != x.n_rows() {
            return Err(Error::Dimension(format!("Z has {} rows, X has {}", z.n_rows(), x.n_rows())));
        }
        if weights.n_dims() != x.n_cols() || weights.k_active() != z.k_active() {
            return Err(Error::Dimension("weights do not match X and Z".into()));
        }
        let kz = z.k_active().min(k);
        let n = x.n_rows();
        let mut nu = vec![1.0 - WARM_NU; n * k];
        for j in 0..kz {
            for i in 0..n {
                if z.get(i, j) {
                    nu[i * k + j] = WARM_NU;
                }
            }
        }
        let phi = (0..x.n_cols())
            .map(|d| {
                let b = weights.matrix(d);
                if b.ncols() != x.cardinality(d) {
                    return Err(Error::Dimension(format!("weights of dimension {d} have wrong cardinality")));
                }
                Ok(DMatrix::from_fn(k + 1, b.ncols(), |row, c| if row <= kz { b[(row, c)] } else { 0.0 }))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut state = Self::assemble(x, k, hyper, nu, phi);
        state.xi = xi_values(x, &state);
        Ok(state)
    }

    fn assemble(x: &ObservationMatrix, k: usize, hyper: &Hyperparams, nu: Vec<f64>, phi: Vec<DMatrix<f64>>) -> Self {
        let sigma_sq = x
            .cardinalities()
            .iter()
            .map(|&r| DMatrix::from_element(k + 1, r, hyper.sigma_b_sq))
            .collect();
        Self {
            n_rows: x.n_rows(),
            k,
            tau: vec![[hyper.alpha, 1.0]; k],
            nu,
            lambda: (0..k).map(|j| vec![1.0 / (j + 1) as f64; j + 1]).collect(),
            phi,
            sigma_sq,
            xi: vec![1.0; x.n_rows() * x.n_cols()],
        }
    }

    pub fn truncation(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_dims(&self) -> usize {
        self.phi.len()
    }

    pub fn nu(&self, n: usize, j: usize) -> f64 {
        self.nu[n * self.k + j]
    }

    pub fn set_nu(&mut self, n: usize, j: usize, value: f64) {
        self.nu[n * self.k + j] = value;
    }

    pub fn nu_row(&self, n: usize) -> &[f64] {
        &self.nu[n * self.k..(n + 1) * self.k]
    }

    /// ν as an N×K matrix.
    pub fn nu_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.k, &self.nu)
    }

    pub fn xi(&self, n: usize, d: usize) -> f64 {
        self.xi[n * self.phi.len() + d]
    }

    pub fn set_xi(&mut self, n: usize, d: usize, value: f64) {
        let dims = self.phi.len();
        self.xi[n * dims + d] = value;
    }

    /// E[exp b_kr] = exp(φ_kr + σ²_kr / 2) for dimension d.
    pub fn exp_moments(&self, d: usize) -> DMatrix<f64> {
        let (phi, s) = (&self.phi[d], &self.sigma_sq[d]);
        DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, c| (phi[(i, c)] + 0.5 * s[(i, c)]).exp())
    }

    /// Checks shapes against X and the invariants of every block.
    pub fn validate(&self, x: &ObservationMatrix) -> Result<()> {
        let (n, k) = (self.n_rows, self.k);
        if n != x.n_rows() || self.phi.len() != x.n_cols() {
            return Err(Error::Dimension("variational state does not match X".into()));
        }
        if self.tau.len() != k || self.lambda.len() != k || self.nu.len() != n * k || self.xi.len() != n * x.n_cols() {
            return Err(Error::Dimension("variational arrays have inconsistent sizes".into()));
        }
        for d in 0..x.n_cols() {
            let shape = (k + 1, x.cardinality(d));
            if self.phi[d].shape() != shape || self.sigma_sq[d].shape() != shape {
                return Err(Error::Dimension(format!("φ or σ² of dimension {d} is not {}×{}", shape.0, shape.1)));
            }
            if self.phi[d].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("φ of dimension {d}")));
            }
            if self.sigma_sq[d].iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!("σ² of dimension {d} must be positive")));
            }
        }
        if self.tau.iter().flatten().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument("τ must be positive".into()));
        }
        if self.nu.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidArgument("ν must lie in (0, 1)".into()));
        }
        if self.xi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("ξ must be positive".into()));
        }
        for (j, row) in self.lambda.iter().enumerate() {
            if row.len() != j + 1 || row.iter().any(|&l| !(l >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("λ row {j} is not a distribution over 1..={}", j + 1)));
            }
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> VariationalSnapshot {
        let mat_rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        VariationalSnapshot {
            version: SNAPSHOT_VERSION,
            n_rows: self.n_rows,
            truncation: self.k,
            cardinalities: self.phi.iter().map(|p| p.ncols()).collect(),
            tau: self.tau.clone(),
            nu: self.nu.chunks(self.k.max(1)).map(<[f64]>::to_vec).collect(),
            lambda: self.lambda.clone(),
            phi: self.phi.iter().map(mat_rows).collect(),
            sigma_sq: self.sigma_sq.iter().map(mat_rows).collect(),
            xi: self.xi.chunks(self.phi.len().max(1)).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_snapshot(snap: &VariationalSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!("unsupported snapshot version {}", snap.version)));
        }
        let (n, k) = (snap.n_rows, snap.truncation);
        let rows_to_mat = |rows: &Vec<Vec<f64>>, r: usize| -> Result<DMatrix<f64>> {
            if rows.len() != k + 1 || rows.iter().any(|row| row.len() != r) {
                return Err(Error::Dimension(format!("snapshot matrix is not {}×{r}", k + 1)));
            }
            Ok(DMatrix::from_fn(k + 1, r, |i, c| rows[i][c]))
        };
        if snap.phi.len() != snap.cardinalities.len() || snap.sigma_sq.len() != snap.cardinalities.len() {
            return Err(Error::Dimension("snapshot has inconsistent dimension count".into()));
        }
        let flat = |rows: &Vec<Vec<f64>>, width: usize, what: &str| -> Result<Vec<f64>> {
            if rows.len() != n || rows.iter().any(|r| r.len() != width) {
                return Err(Error::Dimension(format!("snapshot {what} is not {n}×{width}")));
            }
            Ok(rows.concat())
        };
        Ok(Self {
            n_rows: n,
            k,
            tau: snap.tau.clone(),
            nu: flat(&snap.nu, k, "ν")?,
            lambda: snap.lambda.clone(),
            phi: snap
                .phi
                .iter()
                .zip(&snap.cardinalities)
                .map(|(rows, &r)| rows_to_mat(rows, r))
                .collect::<Result<_>>()?,
            sigma_sq: snap
                .sigma_sq
                .iter()
                .zip(&snap.cardinalities)
                .map(|(rows, &r)| rows_to_mat(rows, r))
                .collect::<Result<_>>()?,
            xi: flat(&snap.xi, snap.cardinalities.len(), "ξ")?,
        })
    }
}

/// Serialized form of [`VariationalState`]; matrices are stored as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalSnapshot {
    pub version: u32,
    pub n_rows: usize,
    pub truncation: usize,
    pub cardinalities: Vec<usize>,
    pub tau: Vec<[f64; 2]>,
    pub nu: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub phi: Vec<Vec<Vec<f64>>>,
    pub sigma_sq: Vec<Vec<Vec<f64>>>,
    pub xi: Vec<Vec<f64>>,
}

/// Σ_{i≤j} [ψ(τ_i1) − ψ(τ_i1 + τ_i2)], i.e. E[log ω_j].
pub fn expected_log_stick(tau: &[[f64; 2]], j: usize) -> f64 {
    tau[..=j].iter().map(|t| digamma(t[0]) - digamma(t[0] + t[1])).sum()
}

/// Multinomial lower bound on E[log(1 − Π_{i≤j} v_i)] for auxiliary λ_j.
pub fn stick_complement_bound(tau: &[[f64; 2]], lambda_j: &[f64]) -> f64 {
    let j = lambda_j.len() - 1;
    let mut total = 0.0;
    // Tail sums Σ_{i≥m} λ_ji.
    let mut tail = vec![0.0; j + 2];
    for m in (0..=j).rev() {
        tail[m] = tail[m + 1] + lambda_j[m];
    }
    for m in 0..=j {
        let l = lambda_j[m];
        total += l * digamma(tau[m][1]);
        total += tail[m + 1] * digamma(tau[m][0]);
        total -= tail[m] * digamma(tau[m][0] + tau[m][1]);
        if l > 0.0 {
            total -= l * l.ln();
        }
    }
    total
}

/// Per-row factors f_jr = 1 − ν_nj + ν_nj E_{j+1,r} of the softmax bound.
fn row_factor(nu_row: &[f64], e: &DMatrix<f64>, j: usize, r: usize) -> f64 {
    1.0 - nu_row[j] + nu_row[j] * e[(j + 1, r)]
}

/// Σ_r E_0r Π_j f_jr, the expected softmax normalizer bound of row n.
fn normalizer(nu_row: &[f64], e: &DMatrix<f64>) -> f64 {
    (0..e.ncols())
        .map(|r| e[(0, r)] * (0..nu_row.len()).map(|j| row_factor(nu_row, e, j, r)).product::<f64>())
        .sum()
}

fn xi_values(x: &ObservationMatrix, state: &VariationalState) -> Vec<f64> {
    let dims = x.n_cols();
    let moments: Vec<DMatrix<f64>> = (0..dims).map(|d| state.exp_moments(d)).collect();
    let mut xi = vec![0.0; state.n_rows * dims];
    for n in 0..state.n_rows {
        let nu_row = state.nu_row(n);
        for d in 0..dims {
            xi[n * dims + d] = 1.0 / normalizer(nu_row, &moments[d]);
        }
    }
    xi
}

/// Closed-form lower bound L(H, H_q) on log p(X | α, σ_B²).
pub fn lower_bound(x: &ObservationMatrix, state: &VariationalState, hyper: &Hyperparams) -> Result<f64> {
    state.validate(x)?;
    hyper.validate()?;
    let (n_rows, k) = (state.n_rows, state.k);
    let (alpha, sb) = (hyper.alpha, hyper.sigma_b_sq);
    let mut total = 0.0;

    // Stick priors and Beta entropies.
    for t in &state.tau {
        let (a, b) = (t[0], t[1]);
        let psi_ab = digamma(a + b);
        total += alpha.ln() + (alpha - 1.0) * (digamma(a) - psi_ab);
        total += ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * psi_ab;
    }

    // Gaussian priors and entropies.
    for (phi, s) in state.phi.iter().zip(&state.sigma_sq) {
        let count = phi.len() as f64;
        total -= 0.5 * count * (2.0 * std::f64::consts::PI * sb).ln();
        total -= (phi.norm_squared() + s.sum()) / (2.0 * sb);
        total += s
            .iter()
            .map(|&v| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln())
            .sum::<f64>();
    }

    // Assignment priors and Bernoulli entropies.
    let stick: Vec<f64> = (0..k).map(|j| expected_log_stick(&state.tau, j)).collect();
    let comp: Vec<f64> = (0..k).map(|j| stick_complement_bound(&state.tau, &state.lambda[j])).collect();
    for n in 0..n_rows {
        for j in 0..k {
            let v = clamp_nu(state.nu(n, j));
            total += v * stick[j] + (1.0 - v) * comp[j];
            total -= v * v.ln() + (1.0 - v) * (1.0 - v).ln();
        }
    }

    // Likelihood terms.
    for d in 0..x.n_cols() {
        let e = state.exp_moments(d);
        let phi = &state.phi[d];
        for n in 0..n_rows {
            let nu_row = state.nu_row(n);
            let c = x.get(n, d);
            let xi = state.xi(n, d);
            total += phi[(0, c)] + (0..k).map(|j| nu_row[j] * phi[(j + 1, c)]).sum::<f64>();
            total += xi.ln() + 1.0 - xi * normalizer(nu_row, &e);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("lower bound".into()));
    }
    Ok(total)
}

/// ξ_nd = [Σ_r E_0r Π_j (1 − ν_nj + ν_nj E_{j+1,r})]⁻¹.
pub fn update_xi(x: &ObservationMatrix, state: &mut VariationalState) -> Result<()> {
    let xi = xi_values(x, state);
    if xi.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NonFinite("ξ update".into()));
    }
    state.xi = xi;
    Ok(())
}

/// λ_ji ∝ exp(ψ(τ_i2) + Σ_{m<i} ψ(τ_m1) − Σ_{m≤i} ψ(τ_m1 + τ_m2)).
pub fn update_lambda(state: &mut VariationalState) {
    let k = state.k;
    let mut log_w = Vec::with_capacity(k);
    let mut prefix_a = 0.0;
    let mut prefix_ab = 0.0;
    for t in &state.tau {
        prefix_ab += digamma(t[0] + t[1]);
        log_w.push(digamma(t[1]) + prefix_a - prefix_ab);
        prefix_a += digamma(t[0]);
    }
    for j in 0..k {
        let w = &log_w[..=j];
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = w.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        state.lambda[j] = exps.into_iter().map(|e| e / total).collect();
    }
}

/// τ_k1 = α + Σ_{m≥k} S_m + Σ_{m>k} (N − S_m) Σ_{i=k+1..m} λ_mi,
/// τ_k2 = 1 + Σ_{m≥k} (N − S_m) λ_mk, with S_m = Σ_n ν_nm.
pub fn update_tau(state: &mut VariationalState, hyper: &Hyperparams) {
    let (n, k) = (state.n_rows as f64, state.k);
    let s: Vec<f64> = (0..k).map(|j| (0..state.n_rows).map(|i| state.nu(i, j)).sum()).collect();
    for j in 0..k {
        let mut a = hyper.alpha;
        let mut b = 1.0;
        for m in j..k {
            a += s[m];
            b += (n - s[m]) * state.lambda[m][j];
            if m > j {
                a += (n - s[m]) * state.lambda[m][j + 1..=m].iter().sum::<f64>();
            }
        }
        state.tau[j] = [a, b];
    }
}

/// ν_nk = logistic(A_nk), updated feature by feature within each row (the
/// softmax bound couples features of the same row).
///
/// A_nk = E[log ω_k] − (multinomial bound of feature k)
///        + Σ_d (φ_{k,x_nd} − ξ_nd Σ_r E_0r (E_kr − 1) Π_{k'≠k} f_k'r),
/// which is the exact coordinate maximizer of the bound.
pub fn update_nu(x: &ObservationMatrix, state: &mut VariationalState) -> Result<()> {
    let k = state.k;
    let dims = x.n_cols();
    let stick: Vec<f64> = (0..k).map(|j| expected_log_stick(&state.tau, j)).collect();
    let comp: Vec<f64> = (0..k).map(|j| stick_complement_bound(&state.tau, &state.lambda[j])).collect();
    let moments: Vec<DMatrix<f64>> = (0..dims).map(|d| state.exp_moments(d)).collect();
    let phi = &state.phi;
    let xi = &state.xi;
    let update_row = |n: usize, nu_row: &mut [f64]| -> Result<()> {
        for j in 0..k {
            let a = stick[j] - comp[j] + likelihood_logit(x, phi, &moments, &xi[n * dims..(n + 1) * dims], n, nu_row, j);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("ν update at row {n}, feature {j}")));
            }
            nu_row[j] = clamp_nu(logistic(a));
        }
        Ok(())
    };
    let mut nu = std::mem::take(&mut state.nu);
    let outcome: Result<()> = if state.n_rows >= 64 {
        nu.par_chunks_mut(k).enumerate().try_for_each(|(n, row)| update_row(n, row))
    } else {
        nu.chunks_mut(k).enumerate().try_for_each(|(n, row)| update_row(n, row))
    };
    state.nu = nu;
    outcome
}

/// Likelihood part of A_nk:
/// Σ_d (φ_{k,x_nd} − ξ_nd Σ_r E_0r (E_kr − 1) Π_{k'≠k} f_k'r).
fn likelihood_logit(
    x: &ObservationMatrix,
    phi: &[DMatrix<f64>],
    moments: &[DMatrix<f64>],
    xi_row: &[f64],
    n: usize,
    nu_row: &[f64],
    j: usize,
) -> f64 {
    let k = nu_row.len();
    let mut a = 0.0;
    for (d, e) in moments.iter().enumerate() {
        let mut acc = 0.0;
        for r in 0..e.ncols() {
            let others: f64 = (0..k).filter(|&i| i != j).map(|i| row_factor(nu_row, e, i, r)).product();
            acc += e[(0, r)] * (e[(j + 1, r)] - 1.0) * others;
        }
        a += phi[d][(j + 1, x.get(n, d))] - xi_row[d] * acc;
    }
    a
}

/// A_nk, the logit of the exact maximizer of the bound in ν_nk with every
/// other parameter held fixed.
pub fn nu_logit(x: &ObservationMatrix, state: &VariationalState, n: usize, j: usize) -> Result<f64> {
    state.validate(x)?;
    if n >= state.n_rows || j >= state.k {
        return Err(Error::InvalidArgument(format!("entry ({n}, {j}) out of range")));
    }
    let dims = x.n_cols();
    let moments: Vec<DMatrix<f64>> = (0..dims).map(|d| state.exp_moments(d)).collect();
    let stick = expected_log_stick(&state.tau, j) - stick_complement_bound(&state.tau, &state.lambda[j]);
    Ok(stick
        + likelihood_logit(
            x,
            &state.phi,
            &moments,
            &state.xi[n * dims..(n + 1) * dims],
            n,
            state.nu_row(n),
            j,
        ))
}

/// First and second derivatives of the bound in φ_kr and σ²_kr.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateDerivatives {
    pub d_phi: f64,
    pub d2_phi: f64,
    pub d_sigma_sq: f64,
    pub d2_sigma_sq: f64,
}

/// Data-dependent coefficients of the bound restricted to (φ_kr, σ²_kr):
/// L = −(φ² + σ²)/(2σ_B²) + c·φ − a·exp(φ + σ²/2) + ½ log σ² + const.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    c: f64,
    a: f64,
}

fn coefficients(
    x: &ObservationMatrix,
    state: &VariationalState,
    e: &DMatrix<f64>,
    d: usize,
    row: usize,
    r: usize,
) -> Coefficients {
    let k = state.k;
    let mut c = 0.0;
    let mut a = 0.0;
    for n in 0..state.n_rows {
        let nu_row = state.nu_row(n);
        let xi = state.xi(n, d);
        let hit = (x.get(n, d) == r) as u8 as f64;
        if row == 0 {
            c += hit;
            a += xi * (0..k).map(|j| row_factor(nu_row, e, j, r)).product::<f64>();
        } else {
            let j = row - 1;
            let others: f64 = (0..k).filter(|&i| i != j).map(|i| row_factor(nu_row, e, i, r)).product();
            c += nu_row[j] * hit;
            a += nu_row[j] * xi * e[(0, r)] * others;
        }
    }
    Coefficients { c, a }
}

fn derivatives_from(coef: Coefficients, phi: f64, s: f64, sigma_b_sq: f64) -> CoordinateDerivatives {
    let t = if coef.a == 0.0 { 0.0 } else { coef.a * (phi + 0.5 * s).exp() };
    CoordinateDerivatives {
        d_phi: -phi / sigma_b_sq + coef.c - t,
        d2_phi: -1.0 / sigma_b_sq - t,
        d_sigma_sq: -0.5 / sigma_b_sq + 0.5 / s - 0.5 * t,
        d2_sigma_sq: -0.5 / (s * s) - 0.25 * t,
    }
}

/// Derivatives of the bound with respect to φᵈ_{row,r} and σ²ᵈ_{row,r};
/// `row` 0 is the bias.
pub fn coordinate_derivatives(
    x: &ObservationMatrix,
    state: &VariationalState,
    hyper: &Hyperparams,
    d: usize,
    row: usize,
    r: usize,
) -> Result<CoordinateDerivatives> {
    state.validate(x)?;
    if d >= x.n_cols() || row > state.k || r >= x.cardinality(d) {
        return Err(Error::InvalidArgument(format!("coordinate (d={d}, row={row}, r={r}) out of range")));
    }
    let e = state.exp_moments(d);
    let coef = coefficients(x, state, &e, d, row, r);
    Ok(derivatives_from(
        coef,
        state.phi[d][(row, r)],
        state.sigma_sq[d][(row, r)],
        hyper.sigma_b_sq,
    ))
}

/// Root of a strictly decreasing function by Newton steps kept inside a
/// bracket. `g` returns the value and its derivative.
fn decreasing_root<G: Fn(f64) -> (f64, f64)>(g: G, x0: f64, lower: Option<f64>) -> Option<f64> {
    let mut x = match lower {
        Some(l) => x0.max(l),
        None => x0,
    };
    let (v0, _) = g(x);
    if v0 == 0.0 {
        return Some(x);
    }
    let (mut lo, mut hi);
    if v0 > 0.0 {
        lo = x;
        let mut step = 1.0;
        hi = x + step;
        while g(hi).0 > 0.0 {
            lo = hi;
            step *= 2.0;
            hi += step;
            if step > 1e8 {
                return None;
            }
        }
    } else {
        hi = x;
        if let Some(l) = lower {
            if g(l).0 <= 0.0 {
                return Some(l);
            }
            lo = l;
        } else {
            let mut step = 1.0;
            lo = x - step;
            while !(g(lo).0 > 0.0) {
                hi = lo;
                step *= 2.0;
                lo -= step;
                if step > 1e8 {
                    return None;
                }
            }
        }
    }
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let (v, dv) = g(x);
        if v == 0.0 {
            return Some(x);
        }
        if v > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - v / dv;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) || hi - lo <= 1e-14 * (1.0 + x.abs()) {
            return Some(next);
        }
        x = next;
    }
    Some(x)
}

/// Maximizes the concave 2-D restriction of the bound over (φ, σ²) by
/// alternating exact 1-D maximizations, each a safeguarded Newton solve on the
/// first derivative using the second derivative; σ² is handled in log
/// coordinates and kept above [`SIGMA_SQ_FLOOR`].
fn optimize_coordinate(coef: Coefficients, phi0: f64, s0: f64, sigma_b_sq: f64) -> Option<(f64, f64)> {
    let (mut phi, mut s) = (phi0, s0.max(SIGMA_SQ_FLOOR));
    let log_floor = SIGMA_SQ_FLOOR.ln();
    for _ in 0..100 {
        let s_fixed = s;
        let new_phi = decreasing_root(
            |p| {
                let der = derivatives_from(coef, p, s_fixed, sigma_b_sq);
                (der.d_phi, der.d2_phi)
            },
            phi,
            None,
        )?;
        let phi_fixed = new_phi;
        let new_log_s = decreasing_root(
            |t| {
                let v = t.exp();
                let der = derivatives_from(coef, phi_fixed, v, sigma_b_sq);
                (der.d_sigma_sq, v * der.d2_sigma_sq)
            },
            s.ln(),
            Some(log_floor),
        )?;
        let new_s = new_log_s.exp().max(SIGMA_SQ_FLOOR);
        let done = (new_phi - phi).abs() <= 1e-12 * (1.0 + phi.abs()) && (new_s - s).abs() <= 1e-12 * (1.0 + s);
        phi = new_phi;
        s = new_s;
        if done {
            break;
        }
    }
    Some((phi, s))
}

/// Updates every (φᵈ_kr, σ²ᵈ_kr). Within a (d, r) pair the rows are visited
/// in order 0..=K because the softmax bound couples them; dimensions are
/// independent.
pub fn update_phi_sigma(x: &ObservationMatrix, state: &mut VariationalState, hyper: &Hyperparams) -> Result<()> {
    let dims = x.n_cols();
    let sb = hyper.sigma_b_sq;
    let solve_dim = |d: usize| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut local = DimView {
            phi: state.phi[d].clone(),
            s: state.sigma_sq[d].clone(),
        };
        for r in 0..x.cardinality(d) {
            for row in 0..=state.k {
                let e = local.moments();
                let coef = coefficients(x, state, &e, d, row, r);
                let (p, s) = optimize_coordinate(coef, local.phi[(row, r)], local.s[(row, r)], sb).ok_or_else(|| {
                    Error::NonFinite(format!("φ/σ² update at (d={d}, k={row}, r={})", r + 1))
                })?;
                if !(p.is_finite() && s.is_finite()) {
                    return Err(Error::NonFinite(format!("φ/σ² update at (d={d}, k={row}, r={})", r + 1)));
                }
                local.phi[(row, r)] = p;
                local.s[(row, r)] = s;
            }
        }
        Ok((local.phi, local.s))
    };
    let results: Vec<Result<(DMatrix<f64>, DMatrix<f64>)>> = if dims >= 8 {
        (0..dims).into_par_iter().map(solve_dim).collect()
    } else {
        (0..dims).map(solve_dim).collect()
    };
    for (d, res) in results.into_iter().enumerate() {
        let (p, s) = res?;
        state.phi[d] = p;
        state.sigma_sq[d] = s;
    }
    Ok(())
}

struct DimView {
    phi: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl DimView {
    fn moments(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.phi.nrows(), self.phi.ncols(), |i, c| {
            (self.phi[(i, c)] + 0.5 * self.s[(i, c)]).exp()
        })
    }
}

/// Stopping rule of the coordinate-ascent loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
    /// Stop when |ΔL| / |L| falls below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_cycles() -> usize {
    500
}

fn default_tolerance() -> f64 {
    1e-8
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            max_cycles: default_max_cycles(),
            tolerance: default_tolerance(),
        }
    }
}

/// Starting point of [`run_vi`].
#[derive(Debug, Clone)]
pub enum Initialization {
    /// [`VariationalState::random`] on the variational stream of `hyper.seed`.
    Random,
    /// [`VariationalState::from_features`].
    Features { z: LatentFeatureState, weights: WeightStack },
    State(Box<VariationalState>),
}

/// Outcome of [`run_vi`].
#[derive(Debug, Clone)]
pub struct VariationalRun {
    pub state: VariationalState,
    /// Bound after initialization (entry 0) and after every cycle.
    pub bound_trace: Vec<f64>,
    pub converged: bool,
}

/// One cycle: ξ, φ/σ², λ, τ, ν.
pub fn cycle(x: &ObservationMatrix, state: &mut VariationalState, hyper: &Hyperparams) -> Result<()> {
    update_xi(x, state)?;
    update_phi_sigma(x, state, hyper)?;
    update_lambda(state);
    update_tau(state, hyper);
    update_nu(x, state)
}

/// Coordinate ascent on the bound with truncation level `k`.
pub fn run_vi(
    x: &ObservationMatrix,
    k: usize,
    hyper: &Hyperparams,
    init: Initialization,
    schedule: &Schedule,
) -> Result<VariationalRun> {
    hyper.validate()?;
    if !(schedule.tolerance >= 0.0) {
        return Err(Error::Config("tolerance must be >= 0".into()));
    }
    let mut state = match init {
        Initialization::Random => {
            let mut rng = stream(hyper.seed, Purpose::Variational, 0, 0);
            VariationalState::random(x, k, hyper, &mut rng)?
        }
        Initialization::Features { z, weights } => VariationalState::from_features(x, k, &z, &weights, hyper)?,
        Initialization::State(s) => {
            if s.truncation() != k {
                return Err(Error::InvalidArgument(format!(
                    "initial state has truncation {}, requested {k}",
                    s.truncation()
                )));
            }
            *s
        }
    };
    let mut bound = lower_bound(x, &state, hyper)?;
    let mut trace = vec![bound];
    let mut converged = false;
    for it in 1..=schedule.max_cycles {
        cycle(x, &mut state, hyper)?;
        let next = lower_bound(x, &state, hyper)?;
        if next < bound - BOUND_SLACK {
            return Err(Error::BoundDecreased {
                cycle: it,
                decrease: bound - next,
            });
        }
        trace.push(next);
        log::debug!("cycle {it}: bound {next:.9}");
        let rel = (next - bound).abs() / next.abs().max(f64::MIN_POSITIVE);
        bound = next;
        if rel < schedule.tolerance {
            converged = true;
            break;
        }
    }
    Ok(VariationalRun {
        state,
        bound_trace: trace,
        converged,
    })
}

/// z_nk = 1 iff ν_nk > threshold (strict). All K columns are kept.
pub fn binarize(state: &VariationalState, threshold: f64) -> LatentFeatureState {
    let columns = (0..state.k)
        .map(|j| (0..state.n_rows).map(|n| state.nu(n, j) > threshold).collect())
        .collect();
    LatentFeatureState::from_columns(state.n_rows, columns).expect("columns have N entries")
}
