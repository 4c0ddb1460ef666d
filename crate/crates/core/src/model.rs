//! Domain types and the multinomial-logit observation model.
//!
//! Categories are stored 0-based; the 1-based convention only appears at the
//! file boundary (see [`crate::io`]). The always-active bias feature is never
//! stored in [`LatentFeatureState`]; weight matrices carry it as row 0.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

/// N×D matrix of categorical observations with per-column cardinalities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMatrix {
    n_rows: usize,
    n_cols: usize,
    cardinalities: Vec<usize>,
    /// Row-major, 0-based categories.
    data: Vec<u32>,
}

impl ObservationMatrix {
    /// Builds a matrix from 0-based row-major categories.
    pub fn new(n_rows: usize, cardinalities: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        let n_cols = cardinalities.len();
        if let Some(d) = cardinalities.iter().position(|&r| r < 2) {
            return Err(Error::InvalidArgument(format!(
                "cardinality of column {d} is {}, must be >= 2",
                cardinalities[d]
            )));
        }
        if data.len() != n_rows * n_cols {
            return Err(Error::Dimension(format!(
                "expected {} entries for {n_rows}x{n_cols}, got {}",
                n_rows * n_cols,
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            let d = i % n_cols.max(1);
            if v as usize >= cardinalities[d] {
                return Err(Error::InvalidArgument(format!(
                    "entry ({}, {d}) = {} exceeds cardinality {}",
                    i / n_cols,
                    v + 1,
                    cardinalities[d]
                )));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            cardinalities,
            data,
        })
    }

    /// Builds a matrix from 1-based row-major categories.
    pub fn from_one_based(n_rows: usize, cardinalities: Vec<usize>, data: &[u32]) -> Result<Self> {
        let zero_based = data
            .iter()
            .map(|&v| {
                v.checked_sub(1)
                    .ok_or_else(|| Error::InvalidArgument("category 0 in 1-based data".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_rows, cardinalities, zero_based)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn cardinality(&self, d: usize) -> usize {
        self.cardinalities[d]
    }

    /// 0-based category of entry (n, d).
    #[inline]
    pub fn get(&self, n: usize, d: usize) -> usize {
        self.data[n * self.n_cols + d] as usize
    }

    pub fn row(&self, n: usize) -> &[u32] {
        &self.data[n * self.n_cols..(n + 1) * self.n_cols]
    }

    /// 0-based categories of column d.
    pub fn column(&self, d: usize) -> Vec<usize> {
        (0..self.n_rows).map(|n| self.get(n, d)).collect()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for &n in rows {
            data.extend_from_slice(self.row(n));
        }
        Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            cardinalities: self.cardinalities.clone(),
            data,
        }
    }
}

/// Binary N×K₊ feature-assignment matrix, stored by column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentFeatureState {
    n_rows: usize,
    columns: Vec<Vec<bool>>,
    counts: Vec<usize>,
}

impl LatentFeatureState {
    /// State with no active features.
    pub fn empty(n_rows: usize) -> Self {
        Self {
            n_rows,
            columns: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn from_columns(n_rows: usize, columns: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(k) = columns.iter().position(|c| c.len() != n_rows) {
            return Err(Error::Dimension(format!(
                "column {k} has length {}, expected {n_rows}",
                columns[k].len()
            )));
        }
        let counts = columns.iter().map(|c| c.iter().filter(|&&b| b).count()).collect();
        Ok(Self {
            n_rows,
            columns,
            counts,
        })
    }

    /// Builds from row-major 0/1 entries.
    pub fn from_rows(n_rows: usize, k: usize, entries: &[u8]) -> Result<Self> {
        if entries.len() != n_rows * k {
            return Err(Error::Dimension(format!(
                "expected {} entries for {n_rows}x{k}, got {}",
                n_rows * k,
                entries.len()
            )));
        }
        let columns = (0..k)
            .map(|j| (0..n_rows).map(|n| entries[n * k + j] != 0).collect())
            .collect();
        Self::from_columns(n_rows, columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k_active(&self) -> usize {
        self.columns.len()
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize) -> bool {
        self.columns[k][n]
    }

    pub fn set(&mut self, n: usize, k: usize, value: bool) {
        let cell = &mut self.columns[k][n];
        if *cell != value {
            *cell = value;
            if value {
                self.counts[k] += 1;
            } else {
                self.counts[k] -= 1;
            }
        }
    }

    /// m_k for every column.
    pub fn column_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn column(&self, k: usize) -> &[bool] {
        &self.columns[k]
    }

    pub fn columns(&self) -> &[Vec<bool>] {
        &self.columns
    }

    /// Recounts every column and compares against the cached counts.
    pub fn counts_consistent(&self) -> bool {
        self.columns
            .iter()
            .zip(&self.counts)
            .all(|(c, &m)| c.iter().filter(|&&b| b).count() == m)
    }

    pub fn has_empty_column(&self) -> bool {
        self.counts.iter().any(|&m| m == 0)
    }

    pub fn push_column(&mut self, column: Vec<bool>) -> Result<()> {
        if column.len() != self.n_rows {
            return Err(Error::Dimension(format!(
                "column length {} != {}",
                column.len(),
                self.n_rows
            )));
        }
        self.counts.push(column.iter().filter(|&&b| b).count());
        self.columns.push(column);
        Ok(())
    }

    pub fn remove_column(&mut self, k: usize) -> Vec<bool> {
        self.counts.remove(k);
        self.columns.remove(k)
    }

    /// Row n without the bias entry.
    pub fn row(&self, n: usize) -> Vec<bool> {
        self.columns.iter().map(|c| c[n]).collect()
    }

    /// Row n in extended form: a leading 1 for the bias, then the features.
    pub fn extended_row(&self, n: usize) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.columns.iter().map(|c| if c[n] { 1.0 } else { 0.0 }))
            .collect()
    }

    /// Row-major 0/1 matrix (no bias column).
    pub fn to_rows(&self) -> Vec<u8> {
        let k = self.k_active();
        let mut out = vec![0u8; self.n_rows * k];
        for (j, c) in self.columns.iter().enumerate() {
            for (n, &b) in c.iter().enumerate() {
                out[n * k + j] = b as u8;
            }
        }
        out
    }

    /// Reorders columns by `order[new] = old`.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        Self {
            n_rows: self.n_rows,
            columns: order.iter().map(|&k| self.columns[k].clone()).collect(),
            counts: order.iter().map(|&k| self.counts[k]).collect(),
        }
    }
}

/// Per-dimension weight matrices Bᵈ of shape (K₊+1)×R_d; row 0 is the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    matrices: Vec<DMatrix<f64>>,
}

impl WeightStack {
    pub fn zeros(k_active: usize, cardinalities: &[usize]) -> Self {
        Self {
            matrices: cardinalities
                .iter()
                .map(|&r| DMatrix::zeros(k_active + 1, r))
                .collect(),
        }
    }

    pub fn from_matrices(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(first) = matrices.first() {
            let rows = first.nrows();
            if rows == 0 {
                return Err(Error::Dimension("weight matrices need a bias row".into()));
            }
            for (d, m) in matrices.iter().enumerate() {
                if m.nrows() != rows {
                    return Err(Error::Dimension(format!(
                        "dimension {d} has {} rows, expected {rows}",
                        m.nrows()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("weights of dimension {d}")));
                }
            }
        }
        Ok(Self { matrices })
    }

    pub fn n_dims(&self) -> usize {
        self.matrices.len()
    }

    /// K₊ implied by the matrix shapes.
    pub fn k_active(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows() - 1)
    }

    pub fn matrix(&self, d: usize) -> &DMatrix<f64> {
        &self.matrices[d]
    }

    pub fn matrix_mut(&mut self, d: usize) -> &mut DMatrix<f64> {
        &mut self.matrices[d]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    /// Drops feature row `k` (0-based feature index, i.e. matrix row k+1).
    pub fn remove_feature(&mut self, k: usize) {
        for m in &mut self.matrices {
            *m = m.clone().remove_row(k + 1);
        }
    }

    /// Reorders feature rows by `order[new] = old`, keeping the bias row.
    pub fn permute_features(&self, order: &[usize]) -> Self {
        let matrices = self
            .matrices
            .iter()
            .map(|m| {
                let mut out = DMatrix::zeros(m.nrows(), m.ncols());
                out.row_mut(0).copy_from(&m.row(0));
                for (new, &old) in order.iter().enumerate() {
                    out.row_mut(new + 1).copy_from(&m.row(old + 1));
                }
                out
            })
            .collect();
        Self { matrices }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    /// IBP concentration α.
    pub alpha: f64,
    /// Prior variance σ_B² of every weight.
    pub sigma_b_sq: f64,
    pub seed: u64,
}

impl Hyperparams {
    pub fn new(alpha: f64, sigma_b_sq: f64, seed: u64) -> Result<Self> {
        let h = Self {
            alpha,
            sigma_b_sq,
            seed,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.sigma_b_sq > 0.0 && self.sigma_b_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_b_sq must be > 0, got {}",
                self.sigma_b_sq
            )));
        }
        Ok(())
    }
}

/// Softmax of `scores` written into `out`, with max-subtraction.
#[inline]
pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log of the softmax normalizer, log Σ_r exp(s_r).
#[inline]
pub(crate) fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}

/// Activations z_row · b_·r for every category r.
pub(crate) fn activations(z_row: &[f64], weights: &DMatrix<f64>) -> Vec<f64> {
    (0..weights.ncols())
        .map(|r| {
            z_row
                .iter()
                .enumerate()
                .filter(|(_, &z)| z != 0.0)
                .map(|(k, &z)| z * weights[(k, r)])
                .sum()
        })
        .collect()
}

/// Category probabilities π_r ∝ exp(z_row · b_·r) for an extended z-row
/// (bias entry first) against a (K₊+1)×R weight matrix.
pub fn category_probabilities(z_row: &[f64], weights: &DMatrix<f64>) -> Result<Vec<f64>> {
    if z_row.len() != weights.nrows() {
        return Err(Error::Dimension(format!(
            "z-row length {} vs {} weight rows",
            z_row.len(),
            weights.nrows()
        )));
    }
    let scores = activations(z_row, weights);
    let mut out = vec![0.0; scores.len()];
    softmax_into(&scores, &mut out);
    Ok(out)
}

/// log p(X | Z, B) = Σ_n Σ_d log π_nd^{x_nd}.
pub fn log_likelihood(
    x: &ObservationMatrix,
    z: &LatentFeatureState,
    weights: &WeightStack,
) -> Result<f64> {
    if z.n_rows() != x.n_rows() {
        return Err(Error::Dimension(format!(
            "Z has {} rows, X has {}",
            z.n_rows(),
            x.n_rows()
        )));
    }
    if weights.n_dims() != x.n_cols() {
        return Err(Error::Dimension(format!(
            "{} weight matrices for {} dimensions",
            weights.n_dims(),
            x.n_cols()
        )));
    }
    for d in 0..x.n_cols() {
        let m = weights.matrix(d);
        if m.nrows() != z.k_active() + 1 || m.ncols() != x.cardinality(d) {
            return Err(Error::Dimension(format!(
                "weights of dimension {d} are {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                z.k_active() + 1,
                x.cardinality(d)
            )));
        }
    }
    let mut total = 0.0;
    for n in 0..x.n_rows() {
        let row = z.extended_row(n);
        for d in 0..x.n_cols() {
            let scores = activations(&row, weights.matrix(d));
            total += scores[x.get(n, d)] - log_sum_exp(&scores);
        }
    }
    Ok(total)
}

/// Stick lengths ω_k = Π_{i≤k} v_i with v_i ~ Beta(α, 1), extended until
/// ω_k drops below 1e-12 (the last, sub-threshold stick is not returned).
pub fn stick_breaking_weights<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Vec<f64> {
    const STICK_FLOOR: f64 = 1e-12;
    let mut sticks = Vec::new();
    let mut omega = 1.0;
    loop {
        // Beta(α, 1) by inversion.
        let u: f64 = rng.random();
        omega *= u.powf(1.0 / alpha);
        if omega < STICK_FLOOR {
            return sticks;
        }
        sticks.push(omega);
    }
}

/// Draws Z from the IBP prior through the stick-breaking construction and
/// drops columns nobody owns.
pub fn sample_prior<R: Rng + ?Sized>(n_rows: usize, hyper: &Hyperparams, rng: &mut R) -> LatentFeatureState {
    let sticks = stick_breaking_weights(hyper.alpha, rng);
    let mut state = LatentFeatureState::empty(n_rows);
    for omega in sticks {
        let column: Vec<bool> = (0..n_rows).map(|_| rng.random::<f64>() < omega).collect();
        if column.iter().any(|&b| b) {
            state
                .push_column(column)
                .expect("column length matches n_rows");
        }
    }
    state
}

/// Columns sorted by their binary value, first row most significant,
/// in descending order.
pub fn left_order(z: &LatentFeatureState) -> LatentFeatureState {
    let mut order: Vec<usize> = (0..z.k_active()).collect();
    order.sort_by(|&a, &b| z.column(b).cmp(z.column(a)));
    z.permute_columns(&order)
}
