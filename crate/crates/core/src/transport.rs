//! Entropic optimal transport and the normalisation kernels shared by the
//! aggregation stages.

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row and column marginals, each renormalised to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl Marginals {
    pub fn new(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        Ok(Self {
            row: normalise_mass(row, "row")?,
            col: normalise_mass(col, "column")?,
        })
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        Self::new(vec![1.0; n], vec![1.0; m])
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn col(&self) -> &[f64] {
        &self.col
    }
}

fn normalise_mass(mut v: Vec<f64>, which: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidParameter(format!("empty {which} marginal")));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{which} marginal must be finite and non-negative"
        )));
    }
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter(format!("{which} marginal has zero mass")));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

/// Non-negative transport plan stored column-wise; absent entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    n_rows: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl CouplingMatrix {
    pub fn from_columns(n_rows: usize, columns: Vec<Vec<(usize, f64)>>) -> Self {
        Self { n_rows, columns }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Entries `(row, mass)` of column `j`.
    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<(usize, f64)>] {
        &self.columns
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j]
            .iter()
            .find(|(r, _)| *r == i)
            .map_or(0.0, |(_, v)| *v)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_rows];
        for col in &self.columns {
            for &(i, v) in col {
                sums[i] += v;
            }
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.iter().map(|(_, v)| v).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.columns.len()));
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Rows that carry at least one support entry.
    pub fn covered_rows(&self) -> Vec<bool> {
        let mut covered = vec![false; self.n_rows];
        for col in &self.columns {
            for &(i, _) in col {
                covered[i] = true;
            }
        }
        covered
    }

    /// `sum_ij gamma_ij * cost(i, j)` over the support.
    pub fn transport_cost(&self, cost: impl Fn(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                total += v * cost(i, j);
            }
        }
        total
    }
}

/// Plan plus the L1 marginal violations it achieved.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: CouplingMatrix,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Entropic OT on a sparse support given column-wise as `(row, cost)` lists.
///
/// Every row of `0..n_rows` must appear in at least one column.
pub fn sinkhorn_sparse(
    n_rows: usize,
    cost_columns: &[Vec<(usize, f64)>],
    marg: &Marginals,
    eps: f64,
    iters: usize,
) -> Result<SinkhornSolution> {
    let m = cost_columns.len();
    if marg.row.len() != n_rows || marg.col.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "cost is {n_rows}x{m}, marginals are {}x{}",
            marg.row.len(),
            marg.col.len()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let mut row_min = vec![f64::INFINITY; n_rows];
    for (j, col) in cost_columns.iter().enumerate() {
        if col.is_empty() {
            return Err(Error::EmptySupport { axis: "column", index: j });
        }
        for &(i, c) in col {
            if i >= n_rows {
                return Err(Error::IndexOutOfRange { index: i, n: n_rows });
            }
            if !c.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite cost at ({i}, {j})")));
            }
            row_min[i] = row_min[i].min(c);
        }
    }
    if let Some(i) = row_min.iter().position(|v| v.is_infinite()) {
        return Err(Error::EmptySupport { axis: "row", index: i });
    }

    // per-row shift keeps the largest kernel entry of every row at exactly 1
    let kernel: Vec<Vec<(usize, f64)>> = cost_columns
        .iter()
        .map(|col| {
            col.iter()
                .map(|&(i, c)| (i, (-(c - row_min[i]) / eps).exp()))
                .collect()
        })
        .collect();
    for (j, col) in kernel.iter().enumerate() {
        if col.iter().all(|(_, k)| *k == 0.0) {
            return Err(Error::KernelUnderflow { axis: "column", index: j, eps });
        }
    }

    let mut u = vec![1.0; n_rows];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n_rows];
    for _ in 0..iters {
        kv.iter_mut().for_each(|x| *x = 0.0);
        for (j, col) in kernel.iter().enumerate() {
            for &(i, k) in col {
                kv[i] += k * v[j];
            }
        }
        for i in 0..n_rows {
            u[i] = if kv[i] > 0.0 { marg.row[i] / kv[i] } else { 0.0 };
        }
        for (j, col) in kernel.iter().enumerate() {
            let ktu: f64 = col.iter().map(|&(i, k)| k * u[i]).sum();
            v[j] = if ktu > 0.0 { marg.col[j] / ktu } else { 0.0 };
        }
    }

    let columns: Vec<Vec<(usize, f64)>> = kernel
        .iter()
        .enumerate()
        .map(|(j, col)| col.iter().map(|&(i, k)| (i, u[i] * k * v[j])).collect())
        .collect();
    let plan = CouplingMatrix::from_columns(n_rows, columns);
    let row_residual = l1_gap(&plan.row_sums(), &marg.row);
    let col_residual = l1_gap(&plan.col_sums(), &marg.col);
    Ok(SinkhornSolution {
        plan,
        row_residual,
        col_residual,
    })
}

fn l1_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Entropic OT on a dense cost matrix.
///
/// Entries outside `support` (or with cost `+inf`) are held at zero.
pub fn sinkhorn_plan(
    cost: &Array2<f64>,
    marg: &Marginals,
    eps: f64,
    iters: usize,
    support: Option<&Array2<bool>>,
) -> Result<SinkhornSolution> {
    let (n, m) = cost.dim();
    if let Some(mask) = support {
        if mask.dim() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "support mask is {:?}, cost is {n}x{m}",
                mask.dim()
            )));
        }
    }
    let mut columns = Vec::with_capacity(m);
    for j in 0..m {
        let mut col = Vec::new();
        for i in 0..n {
            let c = cost[[i, j]];
            let on_support = support.is_none_or(|mask| mask[[i, j]]);
            if !on_support || c == f64::INFINITY {
                continue;
            }
            col.push((i, c));
        }
        columns.push(col);
    }
    sinkhorn_sparse(n, &columns, marg, eps, iters)
}

/// The SH operator: `exp(sim)` followed by `iters` rounds of row then column
/// normalisation. With `iters == 0` the plain exponential is returned.
pub fn sh_normalize(sim: &Array2<f64>, iters: usize) -> Array2<f64> {
    if iters == 0 {
        return sim.mapv(f64::exp);
    }
    let mut k = sim.clone();
    k.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
    });
    let m = k.ncols();
    for _ in 0..iters {
        k.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|x| x / s);
            }
        });
        let mut col_sums = vec![0.0; m];
        for row in k.rows() {
            for (acc, x) in col_sums.iter_mut().zip(row.iter()) {
                *acc += x;
            }
        }
        k.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
            for (x, s) in row.iter_mut().zip(&col_sums) {
                if *s > 0.0 {
                    *x /= s;
                }
            }
        });
    }
    k
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    out.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    });
    out
}

/// Largest `|row_sum - 1|` over the rows of `m`.
pub fn row_stochastic_deviation(m: &Array2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}
