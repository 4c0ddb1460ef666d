//! Laplace approximation of the per-dimension marginal likelihood
//! p(x_·d | Z) under the multinomial-logit model with Gaussian weights.
//!
//! Weight matrices are (K₊+1)×R with the bias in row 0. Whenever a matrix is
//! flattened into a vector β, columns are stacked: entry (k, r) lives at
//! index `r * (K₊+1) + k`.
//!
//! The production path works on [`PatternGroups`]: rows of Z sharing the same
//! feature pattern contribute identical Hessian terms, so every sum over
//! observations collapses to a weighted sum over distinct patterns.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{log_sum_exp, softmax_into, Hyperparams, LatentFeatureState};

/// Gradient max-norm at which Newton's method stops.
pub const NEWTON_TOLERANCE: f64 = 1e-8;
/// Iteration cap for Newton's method.
pub const NEWTON_MAX_ITERS: usize = 100;
/// Smallest admissible Woodbury denominator / determinant-lemma factor.
pub const DEGENERACY_EPS: f64 = 1e-12;

#[inline]
fn beta_index(k: usize, r: usize, kp1: usize) -> usize {
    r * kp1 + k
}

/// Flattens B column by column.
pub fn stack_columns(b: &DMatrix<f64>) -> DVector<f64> {
    // nalgebra storage is already column-major.
    DVector::from_column_slice(b.as_slice())
}

/// Inverse of [`stack_columns`].
pub fn unstack_columns(beta: &DVector<f64>, kp1: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(kp1, r, beta.as_slice())
}

/// Counts m_kr = Σ_n δ(x_nd = r)·z_nk, row 0 using the implicit bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientCounts {
    pub m: DMatrix<f64>,
}

impl SufficientCounts {
    pub fn new(x_col: &[usize], z: &LatentFeatureState, r: usize) -> Result<Self> {
        check_column(x_col, z, r)?;
        let kp1 = z.k_active() + 1;
        let mut m = DMatrix::zeros(kp1, r);
        for (n, &x) in x_col.iter().enumerate() {
            m[(0, x)] += 1.0;
            for k in 0..z.k_active() {
                if z.get(n, k) {
                    m[(k + 1, x)] += 1.0;
                }
            }
        }
        Ok(Self { m })
    }
}

fn check_column(x_col: &[usize], z: &LatentFeatureState, r: usize) -> Result<()> {
    if x_col.len() != z.n_rows() {
        return Err(Error::Dimension(format!(
            "column has {} entries, Z has {} rows",
            x_col.len(),
            z.n_rows()
        )));
    }
    if r < 2 {
        return Err(Error::InvalidArgument(format!("cardinality {r} < 2")));
    }
    if let Some(&bad) = x_col.iter().find(|&&x| x >= r) {
        return Err(Error::InvalidArgument(format!(
            "category {} outside 1..={r}",
            bad + 1
        )));
    }
    Ok(())
}

fn check_weights(b: &DMatrix<f64>, z: &LatentFeatureState) -> Result<()> {
    if b.nrows() != z.k_active() + 1 {
        return Err(Error::Dimension(format!(
            "B has {} rows, expected {}",
            b.nrows(),
            z.k_active() + 1
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight matrix".into()));
    }
    Ok(())
}

/// Rows of Z grouped by their feature pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternGroups {
    k_active: usize,
    /// Active feature indices (0-based, bias excluded) of each group.
    patterns: Vec<Vec<usize>>,
    sizes: Vec<f64>,
    row_group: Vec<usize>,
}

impl PatternGroups {
    pub fn from_state(z: &LatentFeatureState) -> Self {
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let mut sizes = Vec::new();
        let mut row_group = Vec::with_capacity(z.n_rows());
        let mut active = Vec::new();
        for n in 0..z.n_rows() {
            active.clear();
            active.extend((0..z.k_active()).filter(|&k| z.get(n, k)));
            let g = match index.get(&active) {
                Some(&g) => g,
                None => {
                    let g = patterns.len();
                    index.insert(active.clone(), g);
                    patterns.push(active.clone());
                    sizes.push(0.0);
                    g
                }
            };
            sizes[g] += 1.0;
            row_group.push(g);
        }
        Self {
            k_active: z.k_active(),
            patterns,
            sizes,
            row_group,
        }
    }

    /// One group per row, in row order. Used to check the grouped path.
    pub fn ungrouped(z: &LatentFeatureState) -> Self {
        let patterns: Vec<Vec<usize>> = (0..z.n_rows())
            .map(|n| (0..z.k_active()).filter(|&k| z.get(n, k)).collect())
            .collect();
        Self {
            k_active: z.k_active(),
            sizes: vec![1.0; patterns.len()],
            row_group: (0..patterns.len()).collect(),
            patterns,
        }
    }

    pub fn k_active(&self) -> usize {
        self.k_active
    }

    pub fn n_groups(&self) -> usize {
        self.patterns.len()
    }

    pub fn patterns(&self) -> &[Vec<usize>] {
        &self.patterns
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    /// Per-group category counts, flattened as `g * r + category`.
    pub fn category_counts(&self, x_col: &[usize], r: usize) -> Vec<f64> {
        let mut counts = vec![0.0; self.patterns.len() * r];
        for (&g, &x) in self.row_group.iter().zip(x_col) {
            counts[g * r + x] += 1.0;
        }
        counts
    }
}

/// One weighted rank-one downdate term w·v vᵀ with v = π ⊗ z (z extended by
/// the bias entry).
#[derive(Debug, Clone, Copy)]
pub struct RankOneTerm<'a> {
    /// Active features of the row, bias excluded.
    pub active: &'a [usize],
    /// Category probabilities of the row.
    pub pi: &'a [f64],
    pub weight: f64,
}

/// Inverse and log-determinant of
/// `D − Σ_t w_t v_t v_tᵀ`, `D = blockdiag_r((1/σ²)I + Σ_t w_t π_tr z_t z_tᵀ)`,
/// i.e. of the negative Hessian −∇∇f. The block-diagonal start is inverted
/// block by block; every term is then removed with one Woodbury downdate and
/// one determinant-lemma factor.
pub fn woodbury_inverse(
    terms: &[RankOneTerm<'_>],
    k_active: usize,
    r: usize,
    sigma_b_sq: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let p = r * (k_active + 1);
    let mut ws = Workspace::new(k_active + 1, r, 0);
    let log_det = woodbury_core(terms, k_active + 1, r, sigma_b_sq, &mut ws)?;
    Ok((DMatrix::from_column_slice(p, p, &ws.inv), log_det))
}

/// Reusable buffers for one (K₊+1)×R problem.
struct Workspace {
    inv: Vec<f64>,
    block: Vec<f64>,
    u: Vec<f64>,
    idx: Vec<usize>,
    val: Vec<f64>,
    scores: Vec<f64>,
    pis: Vec<f64>,
    trial_pis: Vec<f64>,
    grad: Vec<f64>,
    step: Vec<f64>,
    candidate: Vec<f64>,
}

impl Workspace {
    fn new(kp1: usize, r: usize, n_groups: usize) -> Self {
        let p = kp1 * r;
        Self {
            inv: vec![0.0; p * p],
            block: vec![0.0; kp1 * kp1],
            u: vec![0.0; p],
            idx: Vec::with_capacity(p),
            val: Vec::with_capacity(p),
            scores: vec![0.0; r],
            pis: vec![0.0; n_groups * r],
            trial_pis: vec![0.0; n_groups * r],
            grad: vec![0.0; p],
            step: vec![0.0; p],
            candidate: vec![0.0; p],
        }
    }
}

/// In-place lower Cholesky factor of the n×n column-major matrix `a`
/// (upper triangle left untouched). Returns log|a|, or `None` when `a` is
/// not numerically positive definite.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Option<f64> {
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[k * n + j] * a[k * n + j];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        log_det += 2.0 * d.ln();
        for i in j + 1..n {
            let mut s = a[j * n + i];
            for k in 0..j {
                s -= a[k * n + i] * a[k * n + j];
            }
            a[j * n + i] = s / d;
        }
    }
    Some(log_det)
}

/// Solves L Lᵀ x = b in place given the factor from [`cholesky_in_place`].
fn cholesky_solve(l: &[f64], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

fn woodbury_core(
    terms: &[RankOneTerm<'_>],
    kp1: usize,
    r: usize,
    sigma_b_sq: f64,
    ws: &mut Workspace,
) -> Result<f64> {
    let p = r * kp1;
    let prior_precision = 1.0 / sigma_b_sq;
    ws.inv.iter_mut().for_each(|v| *v = 0.0);
    let mut log_det = 0.0;
    for c in 0..r {
        let block = &mut ws.block;
        block.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..kp1 {
            block[k * kp1 + k] = prior_precision;
        }
        for t in terms {
            let w = t.weight * t.pi[c];
            block[0] += w;
            for (i, &a) in t.active.iter().enumerate() {
                block[a + 1] += w;
                for &b in &t.active[..=i] {
                    block[(b + 1) * kp1 + a + 1] += w;
                }
            }
        }
        log_det += cholesky_in_place(block, kp1).ok_or(Error::Degenerate {
            step: 0,
            factor: f64::NAN,
        })?;
        let off = c * kp1;
        for j in 0..kp1 {
            let col = &mut ws.u[..kp1];
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            cholesky_solve(block, kp1, col);
            for i in 0..kp1 {
                ws.inv[(off + j) * p + off + i] = col[i];
            }
        }
    }

    // Sparse v: entries (r, k) for k in {bias} ∪ active.
    for (step, t) in terms.iter().enumerate() {
        ws.idx.clear();
        ws.val.clear();
        for c in 0..r {
            ws.idx.push(beta_index(0, c, kp1));
            ws.val.push(t.pi[c]);
            for &a in t.active {
                ws.idx.push(beta_index(a + 1, c, kp1));
                ws.val.push(t.pi[c]);
            }
        }
        // u = inv · v, s = vᵀ inv v
        ws.u.iter_mut().for_each(|v| *v = 0.0);
        for (&j, &vj) in ws.idx.iter().zip(&ws.val) {
            let col = &ws.inv[j * p..(j + 1) * p];
            for (ui, ci) in ws.u.iter_mut().zip(col) {
                *ui += vj * ci;
            }
        }
        let s: f64 = ws.idx.iter().zip(&ws.val).map(|(&j, &vj)| vj * ws.u[j]).sum();
        let factor = 1.0 - t.weight * s;
        if !(factor > DEGENERACY_EPS) {
            return Err(Error::Degenerate {
                step: step + 1,
                factor,
            });
        }
        log_det += factor.ln();
        let scale = t.weight / factor;
        // Symmetric rank-one update inv += scale · u uᵀ.
        for j in 0..p {
            let uj = scale * ws.u[j];
            if uj != 0.0 {
                let col = &mut ws.inv[j * p..(j + 1) * p];
                for (ci, ui) in col.iter_mut().zip(&ws.u) {
                    *ci += uj * ui;
                }
            }
        }
    }
    Ok(log_det)
}

fn per_row_terms<'a>(pi_t: &'a DMatrix<f64>, actives: &'a [Vec<usize>]) -> Vec<RankOneTerm<'a>> {
    // pi_t holds π transposed so each row's probabilities are contiguous.
    actives
        .iter()
        .enumerate()
        .map(|(n, active)| RankOneTerm {
            active,
            pi: &pi_t.as_slice()[n * pi_t.nrows()..(n + 1) * pi_t.nrows()],
            weight: 1.0,
        })
        .collect()
}

fn check_pi(pi_all: &DMatrix<f64>, z: &LatentFeatureState) -> Result<()> {
    if pi_all.nrows() != z.n_rows() {
        return Err(Error::Dimension(format!(
            "π has {} rows, Z has {}",
            pi_all.nrows(),
            z.n_rows()
        )));
    }
    for n in 0..pi_all.nrows() {
        let row = pi_all.row(n);
        if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "row {n} of π is not a probability vector"
            )));
        }
    }
    Ok(())
}

/// (−∇∇f)⁻¹ for the given per-row probabilities π (N×R), computed with the
/// block-diagonal start and N rank-one Woodbury downdates.
pub fn fast_inverse(
    pi_all: &DMatrix<f64>,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<DMatrix<f64>> {
    check_pi(pi_all, z)?;
    let pi_t = pi_all.transpose();
    let actives: Vec<Vec<usize>> = (0..z.n_rows())
        .map(|n| (0..z.k_active()).filter(|&k| z.get(n, k)).collect())
        .collect();
    let terms = per_row_terms(&pi_t, &actives);
    woodbury_inverse(&terms, z.k_active(), pi_all.ncols(), hyper.sigma_b_sq).map(|(inv, _)| inv)
}

/// log |−∇∇f| through the matrix determinant lemma, starting from
/// Σ_r log |D_r|.
pub fn log_det_neg_hessian(
    pi_all: &DMatrix<f64>,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<f64> {
    check_pi(pi_all, z)?;
    let pi_t = pi_all.transpose();
    let actives: Vec<Vec<usize>> = (0..z.n_rows())
        .map(|n| (0..z.k_active()).filter(|&k| z.get(n, k)).collect())
        .collect();
    let terms = per_row_terms(&pi_t, &actives);
    woodbury_inverse(&terms, z.k_active(), pi_all.ncols(), hyper.sigma_b_sq).map(|(_, ld)| ld)
}

/// π_n for every row of Z under weights B, as an N×R matrix.
pub fn row_probabilities(b: &DMatrix<f64>, z: &LatentFeatureState) -> Result<DMatrix<f64>> {
    check_weights(b, z)?;
    let r = b.ncols();
    let mut out = DMatrix::zeros(z.n_rows(), r);
    let mut scores = vec![0.0; r];
    let mut pi = vec![0.0; r];
    for n in 0..z.n_rows() {
        for (c, s) in scores.iter_mut().enumerate() {
            *s = b[(0, c)] + (0..z.k_active()).filter(|&k| z.get(n, k)).map(|k| b[(k + 1, c)]).sum::<f64>();
        }
        softmax_into(&scores, &mut pi);
        for c in 0..r {
            out[(n, c)] = pi[c];
        }
    }
    Ok(out)
}

/// Un-normalized log posterior
/// f(B) = tr(MᵀB) − Σ_n log Σ_r exp(z_n·b_·r) − tr(BᵀB)/(2σ²) − R(K+1)/2·log(2πσ²).
pub fn objective_f(
    b: &DMatrix<f64>,
    counts: &SufficientCounts,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<f64> {
    check_weights(b, z)?;
    if counts.m.shape() != b.shape() {
        return Err(Error::Dimension("counts and weights differ in shape".into()));
    }
    let r = b.ncols();
    let mut scores = vec![0.0; r];
    let mut normalizers = 0.0;
    for n in 0..z.n_rows() {
        for (c, s) in scores.iter_mut().enumerate() {
            *s = b[(0, c)] + (0..z.k_active()).filter(|&k| z.get(n, k)).map(|k| b[(k + 1, c)]).sum::<f64>();
        }
        normalizers += log_sum_exp(&scores);
    }
    let p = b.len() as f64;
    Ok(counts.m.dot(b) - normalizers - b.norm_squared() / (2.0 * hyper.sigma_b_sq)
        - 0.5 * p * (2.0 * PI * hyper.sigma_b_sq).ln())
}

/// ∇f = M − ρ − B/σ², ρ_kr = Σ_n z_nk π_n^r.
pub fn gradient_f(
    b: &DMatrix<f64>,
    counts: &SufficientCounts,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<DMatrix<f64>> {
    check_weights(b, z)?;
    if counts.m.shape() != b.shape() {
        return Err(Error::Dimension("counts and weights differ in shape".into()));
    }
    let pi = row_probabilities(b, z)?;
    let mut grad = &counts.m - b / hyper.sigma_b_sq;
    for n in 0..z.n_rows() {
        for c in 0..b.ncols() {
            grad[(0, c)] -= pi[(n, c)];
            for k in 0..z.k_active() {
                if z.get(n, k) {
                    grad[(k + 1, c)] -= pi[(n, c)];
                }
            }
        }
    }
    Ok(grad)
}

/// Dense negative Hessian
/// (1/σ²)I + Σ_n (diag π_n − π_nᵀπ_n) ⊗ (z_nᵀ z_n) in column-stacked order.
pub fn hessian_neg(b: &DMatrix<f64>, z: &LatentFeatureState, hyper: &Hyperparams) -> Result<DMatrix<f64>> {
    let pi = row_probabilities(b, z)?;
    Ok(dense_neg_hessian_from_pi(&pi, z, hyper.sigma_b_sq))
}

/// Dense negative Hessian for given per-row probabilities.
pub fn dense_neg_hessian_from_pi(pi: &DMatrix<f64>, z: &LatentFeatureState, sigma_b_sq: f64) -> DMatrix<f64> {
    let kp1 = z.k_active() + 1;
    let r = pi.ncols();
    let p = r * kp1;
    let mut h = DMatrix::identity(p, p) / sigma_b_sq;
    for n in 0..z.n_rows() {
        let zn = z.extended_row(n);
        for c1 in 0..r {
            for c2 in 0..r {
                let w = if c1 == c2 { pi[(n, c1)] } else { 0.0 } - pi[(n, c1)] * pi[(n, c2)];
                if w == 0.0 {
                    continue;
                }
                for k1 in 0..kp1 {
                    if zn[k1] == 0.0 {
                        continue;
                    }
                    for k2 in 0..kp1 {
                        if zn[k2] != 0.0 {
                            h[(beta_index(k1, c1, kp1), beta_index(k2, c2, kp1))] += w;
                        }
                    }
                }
            }
        }
    }
    h
}

/// Which routine solves the Newton system and produces the log-determinant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianSolver {
    /// Block-diagonal start plus rank-one Woodbury downdates.
    #[default]
    Woodbury,
    /// Dense accumulation and Cholesky factorization.
    Dense,
}

/// Outcome of the per-dimension Laplace approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceResult {
    pub b_map: DMatrix<f64>,
    pub log_marginal: f64,
    pub newton_iters: usize,
    pub grad_norm_final: f64,
}

/// Grouped problem for one dimension.
struct GroupedProblem<'a> {
    groups: &'a PatternGroups,
    counts: &'a [f64],
    r: usize,
    kp1: usize,
    sigma_b_sq: f64,
    m: Vec<f64>,
}

impl<'a> GroupedProblem<'a> {
    fn new(groups: &'a PatternGroups, counts: &'a [f64], r: usize, sigma_b_sq: f64) -> Self {
        let kp1 = groups.k_active() + 1;
        let mut m = vec![0.0; kp1 * r];
        for (g, active) in groups.patterns().iter().enumerate() {
            for c in 0..r {
                let cnt = counts[g * r + c];
                if cnt != 0.0 {
                    m[beta_index(0, c, kp1)] += cnt;
                    for &a in active {
                        m[beta_index(a + 1, c, kp1)] += cnt;
                    }
                }
            }
        }
        Self {
            groups,
            counts,
            r,
            kp1,
            sigma_b_sq,
            m,
        }
    }

    /// Fills per-group π and returns (f without constant, log-likelihood).
    fn evaluate(&self, b: &[f64], pis: &mut [f64], scores: &mut [f64]) -> (f64, f64) {
        let (r, kp1) = (self.r, self.kp1);
        let mut loglik = 0.0;
        for (g, active) in self.groups.patterns().iter().enumerate() {
            for (c, s) in scores.iter_mut().enumerate() {
                let col = &b[c * kp1..(c + 1) * kp1];
                *s = col[0] + active.iter().map(|&a| col[a + 1]).sum::<f64>();
            }
            let lse = log_sum_exp(scores);
            softmax_into(scores, &mut pis[g * r..(g + 1) * r]);
            let size = self.groups.sizes()[g];
            loglik += (0..r).map(|c| self.counts[g * r + c] * scores[c]).sum::<f64>() - size * lse;
        }
        let norm_sq: f64 = b.iter().map(|v| v * v).sum();
        (loglik - norm_sq / (2.0 * self.sigma_b_sq), loglik)
    }

    fn gradient(&self, b: &[f64], pis: &[f64], grad: &mut [f64]) {
        let (r, kp1) = (self.r, self.kp1);
        for ((g, m), bv) in grad.iter_mut().zip(&self.m).zip(b) {
            *g = m - bv / self.sigma_b_sq;
        }
        for (g, active) in self.groups.patterns().iter().enumerate() {
            let size = self.groups.sizes()[g];
            for c in 0..r {
                let rho = size * pis[g * r + c];
                let col = &mut grad[c * kp1..(c + 1) * kp1];
                col[0] -= rho;
                for &a in active {
                    col[a + 1] -= rho;
                }
            }
        }
    }

    fn terms<'p>(&'p self, pis: &'p [f64]) -> Vec<RankOneTerm<'p>> {
        self.groups
            .patterns()
            .iter()
            .enumerate()
            .map(|(g, active)| RankOneTerm {
                active,
                pi: &pis[g * self.r..(g + 1) * self.r],
                weight: self.groups.sizes()[g],
            })
            .collect()
    }

    /// Lower triangle of the dense negative Hessian, column-major, into `h`.
    fn dense_neg_hessian(&self, pis: &[f64], h: &mut [f64]) {
        let (r, kp1) = (self.r, self.kp1);
        let p = r * kp1;
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..p {
            h[i * p + i] = 1.0 / self.sigma_b_sq;
        }
        let mut ext = Vec::with_capacity(kp1);
        for (g, active) in self.groups.patterns().iter().enumerate() {
            let size = self.groups.sizes()[g];
            let pi = &pis[g * r..(g + 1) * r];
            ext.clear();
            ext.push(0);
            ext.extend(active.iter().map(|a| a + 1));
            for c2 in 0..r {
                for c1 in c2..r {
                    let w = size * (if c1 == c2 { pi[c1] } else { 0.0 } - pi[c1] * pi[c2]);
                    for &k2 in &ext {
                        let col = beta_index(k2, c2, kp1);
                        for &k1 in &ext {
                            let row = beta_index(k1, c1, kp1);
                            if row >= col {
                                h[col * p + row] += w;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Newton direction H⁻¹g into `ws.step`; returns log|H|.
    fn solve(&self, ws: &mut Workspace, solver: HessianSolver) -> Result<f64> {
        let p = self.r * self.kp1;
        let pis = std::mem::take(&mut ws.pis);
        let outcome = self.solve_with(&pis, ws, solver, p);
        ws.pis = pis;
        outcome
    }

    fn solve_with(&self, pis: &[f64], ws: &mut Workspace, solver: HessianSolver, p: usize) -> Result<f64> {
        if solver == HessianSolver::Woodbury {
            let terms = self.terms(pis);
            match woodbury_core(&terms, self.kp1, self.r, self.sigma_b_sq, ws) {
                Ok(log_det) => {
                    for (i, s) in ws.step.iter_mut().enumerate() {
                        *s = (0..p).map(|j| ws.inv[j * p + i] * ws.grad[j]).sum();
                    }
                    return Ok(log_det);
                }
                Err(Error::Degenerate { .. }) => {
                    log::debug!("woodbury recursion degenerate, falling back to dense Cholesky");
                }
                Err(e) => return Err(e),
            }
        }
        self.dense_neg_hessian(pis, &mut ws.inv);
        let log_det = cholesky_in_place(&mut ws.inv, p).ok_or(Error::Degenerate {
            step: 0,
            factor: f64::NAN,
        })?;
        ws.step.copy_from_slice(&ws.grad);
        cholesky_solve(&ws.inv, p, &mut ws.step);
        Ok(log_det)
    }

    fn run(&self, init: Option<&DMatrix<f64>>, solver: HessianSolver) -> Result<LaplaceResult> {
        let (r, kp1) = (self.r, self.kp1);
        let p = r * kp1;
        let mut b = match init {
            Some(b0) if b0.shape() == (kp1, r) => b0.as_slice().to_vec(),
            _ => vec![0.0; p],
        };
        let mut ws = Workspace::new(kp1, r, self.groups.n_groups());
        let (mut f, mut loglik) = self.evaluate(&b, &mut ws.pis, &mut ws.scores);
        let mut iters = 0;
        loop {
            self.gradient(&b, &ws.pis, &mut ws.grad);
            let grad_norm = ws.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite("Newton gradient".into()));
            }
            let log_det = self.solve(&mut ws, solver)?;
            if grad_norm < NEWTON_TOLERANCE {
                let norm_sq: f64 = b.iter().map(|v| v * v).sum();
                let log_marginal = -norm_sq / (2.0 * self.sigma_b_sq)
                    - 0.5 * (log_det + p as f64 * self.sigma_b_sq.ln())
                    + loglik;
                return Ok(LaplaceResult {
                    b_map: DMatrix::from_column_slice(kp1, r, &b),
                    log_marginal,
                    newton_iters: iters,
                    grad_norm_final: grad_norm,
                });
            }
            if iters == NEWTON_MAX_ITERS {
                return Err(Error::NotConverged {
                    iterations: iters,
                    grad_norm,
                    last_iterate: b,
                });
            }
            iters += 1;
            // Damped step: halve until the objective does not decrease.
            let mut scale = 1.0;
            let slack = 1e-12 * (1.0 + f.abs());
            loop {
                for ((cv, bv), sv) in ws.candidate.iter_mut().zip(&b).zip(&ws.step) {
                    *cv = bv + scale * sv;
                }
                let (f_new, ll_new) = self.evaluate(&ws.candidate, &mut ws.trial_pis, &mut ws.scores);
                if f_new >= f - slack || scale < 1e-10 {
                    std::mem::swap(&mut b, &mut ws.candidate);
                    f = f_new;
                    loglik = ll_new;
                    std::mem::swap(&mut ws.pis, &mut ws.trial_pis);
                    break;
                }
                scale *= 0.5;
            }
        }
    }
}

/// Newton MAP estimate and Laplace log marginal on grouped rows.
/// `counts` comes from [`PatternGroups::category_counts`]. `init` warm-starts
/// the iteration (the optimum is unique, so only the iteration count changes).
pub fn laplace_grouped(
    groups: &PatternGroups,
    counts: &[f64],
    r: usize,
    hyper: &Hyperparams,
    init: Option<&DMatrix<f64>>,
    solver: HessianSolver,
) -> Result<LaplaceResult> {
    if counts.len() != groups.n_groups() * r {
        return Err(Error::Dimension(format!(
            "{} counts for {} groups of cardinality {r}",
            counts.len(),
            groups.n_groups()
        )));
    }
    GroupedProblem::new(groups, counts, r, hyper.sigma_b_sq).run(init, solver)
}

/// B_MAP for column `x_col` (0-based categories, cardinality `r`) given Z,
/// found by Newton's method from B = 0.
pub fn newton_map(
    x_col: &[usize],
    r: usize,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<LaplaceResult> {
    check_column(x_col, z, r)?;
    let groups = PatternGroups::from_state(z);
    let counts = groups.category_counts(x_col, r);
    laplace_grouped(&groups, &counts, r, hyper, None, HessianSolver::Woodbury)
}

/// Laplace approximation of log p(x_·d | Z).
pub fn log_marginal(x_col: &[usize], r: usize, z: &LatentFeatureState, hyper: &Hyperparams) -> Result<f64> {
    newton_map(x_col, r, z, hyper).map(|res| res.log_marginal)
}

/// Σ_d log p(x_·d | Z) over every column of X.
pub fn total_log_marginal(
    x: &crate::model::ObservationMatrix,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<f64> {
    let groups = PatternGroups::from_state(z);
    let mut total = 0.0;
    for d in 0..x.n_cols() {
        let r = x.cardinality(d);
        let counts = groups.category_counts(&x.column(d), r);
        total += laplace_grouped(&groups, &counts, r, hyper, None, HessianSolver::Woodbury)?.log_marginal;
    }
    Ok(total)
}

/// B_MAP for every dimension of X, as a weight stack.
pub fn map_weights(
    x: &crate::model::ObservationMatrix,
    z: &LatentFeatureState,
    hyper: &Hyperparams,
) -> Result<crate::model::WeightStack> {
    let groups = PatternGroups::from_state(z);
    let mats = (0..x.n_cols())
        .map(|d| {
            let r = x.cardinality(d);
            let counts = groups.category_counts(&x.column(d), r);
            laplace_grouped(&groups, &counts, r, hyper, None, HessianSolver::Woodbury).map(|res| res.b_map)
        })
        .collect::<Result<Vec<_>>>()?;
    if mats.is_empty() {
        return Ok(crate::model::WeightStack::zeros(z.k_active(), &[]));
    }
    crate::model::WeightStack::from_matrices(mats)
}
