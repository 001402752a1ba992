//! Symmetric positive-definite systems with a fixed sparsity pattern.
//!
//! The sampler refactors `Ω⁻¹ + diag(a)` every sweep. The off-diagonal
//! pattern is that of the ontology graph and never changes, so ordering and
//! symbolic analysis are done once and only the numeric factorization repeats.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix stored as its diagonal plus the strict upper/lower
/// neighbor lists (each off-diagonal entry appears in both rows).
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricSparse {
    pub diag: Vec<f64>,
    /// `rows[i]` holds `(k, value)` for `k != i`, sorted by `k`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SymmetricSparse {
    pub fn identity(n: usize) -> Self {
        Self {
            diag: vec![1.0; n],
            rows: vec![Vec::new(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn off_diagonal_nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &(k, v) in &self.rows[i] {
                m[(i, k)] = v;
            }
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                self.diag[i] * x[i] + self.rows[i].iter().map(|&(k, v)| v * x[k]).sum::<f64>()
            })
            .collect()
    }
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` for a fixed sparsity pattern.
#[derive(Clone, Debug)]
pub struct SparseCholesky {
    n: usize,
    /// `perm[i]` is the original index placed at position `i`.
    perm: Vec<usize>,
    /// Column `j` of `L` (permuted coordinates): row indices, diagonal first.
    col_rows: Vec<Vec<usize>>,
    col_vals: Vec<Vec<f64>>,
    /// For row `j`, the earlier columns `k` with `L[j,k] != 0` and the
    /// position of row `j` inside column `k`.
    row_links: Vec<Vec<(usize, usize)>>,
    /// Permuted lower-triangular entries of `A` per column (`(row, src)`)
    /// where `src` indexes the off-diagonal entry in the original rows.
    a_cols: Vec<Vec<(usize, usize, usize)>>,
    work: Vec<f64>,
}

impl SparseCholesky {
    /// Orders with a greedy minimum-degree heuristic and computes the fill pattern.
    pub fn analyze(pattern: &SymmetricSparse) -> Self {
        let n = pattern.dim();
        let perm = minimum_degree_order(pattern);
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }

        // Lower-triangular entries of the permuted matrix, by column.
        let mut a_cols: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
        for (orig_row, row) in pattern.rows.iter().enumerate() {
            for (slot, &(orig_col, _)) in row.iter().enumerate() {
                let (r, c) = (inv[orig_row], inv[orig_col]);
                if r > c {
                    a_cols[c].push((r, orig_row, slot));
                }
            }
        }
        for col in &mut a_cols {
            col.sort_unstable();
        }

        // Symbolic factorization through the elimination tree.
        let mut col_rows: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            let mut set: BTreeSet<usize> = a_cols[j].iter().map(|&(r, _, _)| r).collect();
            for &c in &children[j] {
                set.extend(col_rows[c].iter().copied().filter(|&r| r > j));
            }
            let mut rows = Vec::with_capacity(set.len() + 1);
            rows.push(j);
            rows.extend(set);
            if let Some(&parent) = rows.get(1) {
                children[parent].push(j);
            }
            col_rows.push(rows);
        }

        let mut row_links: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, rows) in col_rows.iter().enumerate() {
            for (pos, &r) in rows.iter().enumerate().skip(1) {
                row_links[r].push((k, pos));
            }
        }

        let col_vals = col_rows.iter().map(|r| vec![0.0; r.len()]).collect();
        Self {
            n,
            perm,
            col_rows,
            col_vals,
            row_links,
            a_cols,
            work: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Nonzeros in the factor, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.col_rows.iter().map(Vec::len).sum()
    }

    /// Numeric factorization of `A + diag(extra)`; `A` must have the analyzed pattern.
    pub fn factor(&mut self, a: &SymmetricSparse, extra_diag: Option<&[f64]>) -> Result<()> {
        debug_assert_eq!(a.dim(), self.n);
        let n = self.n;
        for j in 0..n {
            let orig = self.perm[j];
            let rows = &self.col_rows[j];
            // scatter A's column j
            let mut d = a.diag[orig];
            if let Some(e) = extra_diag {
                d += e[orig];
            }
            self.work[j] = d;
            for &r in &rows[1..] {
                self.work[r] = 0.0;
            }
            for &(r, orig_row, slot) in &self.a_cols[j] {
                self.work[r] = a.rows[orig_row][slot].1;
            }
            // subtract contributions of earlier columns
            for &(k, pos) in &self.row_links[j] {
                let kr = &self.col_rows[k];
                let kv = &self.col_vals[k];
                let ljk = kv[pos];
                for idx in pos..kr.len() {
                    self.work[kr[idx]] -= kv[idx] * ljk;
                }
            }
            let pivot = self.work[j];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::Factorization {
                    context: format!("non-positive pivot {pivot:.3e} at column {j} of {n}"),
                    condition: f64::INFINITY,
                });
            }
            let ljj = pivot.sqrt();
            let vals = &mut self.col_vals[j];
            vals[0] = ljj;
            for (idx, &r) in rows.iter().enumerate().skip(1) {
                vals[idx] = self.work[r] / ljj;
            }
        }
        Ok(())
    }

    /// Solves `L y = b` in permuted coordinates, in place.
    fn forward(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let rows = &self.col_rows[j];
            let vals = &self.col_vals[j];
            let yj = y[j] / vals[0];
            y[j] = yj;
            for idx in 1..rows.len() {
                y[rows[idx]] -= vals[idx] * yj;
            }
        }
    }

    /// Solves `Lᵀ x = y` in permuted coordinates, in place.
    fn backward(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let rows = &self.col_rows[j];
            let vals = &self.col_vals[j];
            let mut s = x[j];
            for idx in 1..rows.len() {
                s -= vals[idx] * x[rows[idx]];
            }
            x[j] = s / vals[0];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Returns `A⁻¹ r + L⁻ᵀ z`, a draw from `N(A⁻¹ r, A⁻¹)` when `z` is standard normal.
    pub fn sample_gaussian(&self, r: &[f64], z: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.perm.iter().map(|&p| r[p]).collect();
        self.forward(&mut y);
        for (yi, zi) in y.iter_mut().zip(z) {
            *yi += zi;
        }
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Returns `L⁻ᵀ z` (covariance `A⁻¹`).
    pub fn sample_zero_mean(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.backward(&mut y);
        self.unpermute(&y)
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.col_vals.iter().map(|v| v[0].ln()).sum::<f64>()
    }
}

/// Greedy minimum-degree elimination order; ties broken by lowest index.
pub fn minimum_degree_order(pattern: &SymmetricSparse) -> Vec<usize> {
    let n = pattern.dim();
    let mut adj: Vec<BTreeSet<usize>> = pattern
        .rows
        .iter()
        .map(|r| r.iter().map(|&(k, _)| k).collect())
        .collect();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| !eliminated[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .expect("vertices remain");
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[v].clear();
    }
    order
}

/// Dense Cholesky with one jittered retry; reports a condition estimate on failure.
pub fn dense_cholesky(m: &DMatrix<f64>, context: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let jittered = m + DMatrix::<f64>::identity(n, n) * 1e-10;
    nalgebra::Cholesky::new(jittered).ok_or_else(|| Error::Factorization {
        context: context.to_string(),
        condition: condition_number(m),
    })
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves with a dense factor.
pub fn dense_solve(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, b: &[f64]) -> Vec<f64> {
    chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
}
