//! Discretised label domains, quadrature and the small dense linear algebra
//! (Gram matrices, numerical rank, Moore–Penrose inverse) built on top.
//!
//! A [`SpatialGrid`] is a midpoint-rule partition of a box in `R^dim`. Grid
//! functions are piecewise constant on the cells, so every integral below is
//! an exact weighted sum `Σ_k f_k w_k` evaluated in cell order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative cut-off for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    /// Cell centres, `cells.len() == n_cells * dim`, row-major.
    centers: Vec<f64>,
    weights: Vec<f64>,
    total_measure: f64,
    /// Tensor-product layout (`lower`, `upper`, `counts` per axis) when known.
    layout: Option<TensorLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

impl PartialEq for SpatialGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.weights == other.weights && self.centers == other.centers
    }
}

impl SpatialGrid {
    /// Uniform tensor grid on `[lower, upper]` with `counts[i]` cells along
    /// axis `i`. The last axis varies fastest.
    pub fn uniform(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Self> {
        let dim = counts.len();
        if dim == 0 || lower.len() != dim || upper.len() != dim {
            return Err(Error::InvalidArgument("grid bounds and counts must have the same positive length".into()));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("every axis needs at least one cell".into()));
        }
        if lower.iter().zip(upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidArgument("grid extents must satisfy lower < upper".into()));
        }
        let widths: Vec<f64> = (0..dim).map(|i| (upper[i] - lower[i]) / counts[i] as f64).collect();
        let cell_measure: f64 = widths.iter().product();
        let n: usize = counts.iter().product();
        let mut centers = Vec::with_capacity(n * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..n {
            for i in 0..dim {
                centers.push(lower[i] + (idx[i] as f64 + 0.5) * widths[i]);
            }
            for i in (0..dim).rev() {
                idx[i] += 1;
                if idx[i] < counts[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        let weights = vec![cell_measure; n];
        let total_measure = weights.iter().sum();
        Ok(SpatialGrid {
            dim,
            centers,
            weights,
            total_measure,
            layout: Some(TensorLayout { lower: lower.to_vec(), upper: upper.to_vec(), counts: counts.to_vec() }),
        })
    }

    /// Unit interval `(0, 1)` split into `n` equal cells.
    pub fn unit_interval(n: usize) -> Result<Self> {
        Self::uniform(&[0.0], &[1.0], &[n])
    }

    /// Grid from explicit cell centres and measures.
    pub fn from_cells(dim: usize, centers: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() || centers.len() != weights.len() * dim {
            return Err(Error::InvalidArgument("cell centres do not match weights and dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("cell weights must be finite and strictly positive".into()));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("cell centres must be finite".into()));
        }
        let total_measure = weights.iter().sum();
        Ok(SpatialGrid { dim, centers, weights, total_measure, layout: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    pub fn layout(&self) -> Option<&TensorLayout> {
        self.layout.as_ref()
    }

    pub fn into_shared(self) -> Arc<SpatialGrid> {
        Arc::new(self)
    }
}

pub(crate) fn same_grid(a: &Arc<SpatialGrid>, b: &Arc<SpatialGrid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn check_same(a: &Arc<SpatialGrid>, b: &Arc<SpatialGrid>, what: &str) -> Result<()> {
    if same_grid(a, b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(what.to_string()))
    }
}

/// Piecewise-constant scalar field on a grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<SpatialGrid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("grid function has {} values for {} cells", values.len(), grid.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value in cell {k}")));
        }
        Ok(GridFunction { grid, values })
    }

    /// Constructor for values already known to be finite and correctly sized.
    pub(crate) fn from_raw(grid: Arc<SpatialGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        GridFunction { grid, values }
    }

    pub fn zeros(grid: Arc<SpatialGrid>) -> Self {
        let n = grid.len();
        GridFunction { grid, values: vec![0.0; n] }
    }

    pub fn constant(grid: Arc<SpatialGrid>, c: f64) -> Self {
        let n = grid.len();
        GridFunction { grid, values: vec![c; n] }
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn(grid: Arc<SpatialGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.center(k))).collect();
        GridFunction { grid, values }
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridFunction { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// `self + alpha * other` on a shared grid.
    pub fn axpy(&self, alpha: f64, other: &GridFunction) -> Result<Self> {
        check_same(&self.grid, &other.grid, "axpy operands live on different grids")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + alpha * b).collect();
        Ok(GridFunction { grid: self.grid.clone(), values })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// Quadrature integral `Σ_k f_k w_k`.
    pub fn integral(&self) -> f64 {
        self.values.iter().zip(self.grid.weights()).map(|(v, w)| v * w).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().zip(self.grid.weights()).map(|(v, w)| v * v * w).sum::<f64>().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Scalar field on `rows × cols`, e.g. the weight function `b(y, z)` or the
/// classifier `w(u, y)`.
#[derive(Debug, Clone)]
pub struct Kernel {
    rows: Arc<SpatialGrid>,
    cols: Arc<SpatialGrid>,
    values: DMatrix<f64>,
}

impl Kernel {
    pub fn new(rows: Arc<SpatialGrid>, cols: Arc<SpatialGrid>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != rows.len() || values.ncols() != cols.len() {
            return Err(Error::Shape(format!(
                "kernel is {}x{} but grids have {} and {} cells",
                values.nrows(),
                values.ncols(),
                rows.len(),
                cols.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("kernel has non-finite entries".into()));
        }
        Ok(Kernel { rows, cols, values })
    }

    pub(crate) fn from_raw(rows: Arc<SpatialGrid>, cols: Arc<SpatialGrid>, values: DMatrix<f64>) -> Self {
        debug_assert_eq!(values.shape(), (rows.len(), cols.len()));
        Kernel { rows, cols, values }
    }

    pub fn zeros(rows: Arc<SpatialGrid>, cols: Arc<SpatialGrid>) -> Self {
        let values = DMatrix::zeros(rows.len(), cols.len());
        Kernel { rows, cols, values }
    }

    pub fn constant(rows: Arc<SpatialGrid>, cols: Arc<SpatialGrid>, c: f64) -> Self {
        let values = DMatrix::from_element(rows.len(), cols.len(), c);
        Kernel { rows, cols, values }
    }

    pub fn from_fn(rows: Arc<SpatialGrid>, cols: Arc<SpatialGrid>, f: impl Fn(&[f64], &[f64]) -> f64) -> Self {
        let values = DMatrix::from_fn(rows.len(), cols.len(), |k, l| f(rows.center(k), cols.center(l)));
        Kernel { rows, cols, values }
    }

    pub fn row_grid(&self) -> &Arc<SpatialGrid> {
        &self.rows
    }

    pub fn col_grid(&self) -> &Arc<SpatialGrid> {
        &self.cols
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[(k, l)]
    }

    /// Kernel of the adjoint operator, `b*(y, z) = b(z, y)`.
    pub fn adjoint(&self) -> Kernel {
        Kernel { rows: self.cols.clone(), cols: self.rows.clone(), values: self.values.transpose() }
    }

    /// Matrix of the integral operator acting on cell values:
    /// `(B f)_k = Σ_l b_kl w_l f_l`.
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        let w = self.cols.weights();
        DMatrix::from_fn(self.values.nrows(), self.values.ncols(), |k, l| self.values[(k, l)] * w[l])
    }

    /// `L²(rows × cols)` norm of the kernel (Hilbert–Schmidt norm of the operator).
    pub fn l2_norm(&self) -> f64 {
        let wr = self.rows.weights();
        let wc = self.cols.weights();
        let mut acc = 0.0;
        for k in 0..self.values.nrows() {
            for l in 0..self.values.ncols() {
                let v = self.values[(k, l)];
                acc += v * v * wr[k] * wc[l];
            }
        }
        acc.sqrt()
    }

    /// `L⁴(rows × cols)` norm.
    pub fn l4_norm(&self) -> f64 {
        let wr = self.rows.weights();
        let wc = self.cols.weights();
        let mut acc = 0.0;
        for k in 0..self.values.nrows() {
            for l in 0..self.values.ncols() {
                let v = self.values[(k, l)];
                acc += v * v * v * v * wr[k] * wc[l];
            }
        }
        acc.powf(0.25)
    }

    /// Spectral norm of the integral operator `L²(cols) → L²(rows)`.
    pub fn operator_norm(&self) -> f64 {
        weighted_spectral_norm(&self.operator_matrix(), self.rows.weights(), self.cols.weights())
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Kernel) -> Result<Kernel> {
        check_same(&self.rows, &other.rows, "kernel row grids differ")?;
        check_same(&self.cols, &other.cols, "kernel column grids differ")?;
        Ok(Kernel { rows: self.rows.clone(), cols: self.cols.clone(), values: &self.values + alpha * &other.values })
    }
}

/// Spectral norm of the operator represented by `m` from `L²` with weights
/// `w_in` to `L²` with weights `w_out`: `‖W_out^½ M W_in^{-½}‖₂`.
pub fn weighted_spectral_norm(m: &DMatrix<f64>, w_out: &[f64], w_in: &[f64]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |k, l| m[(k, l)] * w_out[k].sqrt() / w_in[l].sqrt());
    singular_triplets(&scaled).first().map_or(0.0, |t| t.0)
}

/// `⟨f, g⟩_{L²}` by midpoint quadrature.
pub fn l2_inner(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_same(&f.grid, &g.grid, "inner product of functions on different grids")?;
    Ok(f.values.iter().zip(&g.values).zip(f.grid.weights()).map(|((a, b), w)| a * b * w).sum())
}

/// Gram matrix `g_ij = ⟨f_i, f_j⟩`.
pub fn gram_matrix(fs: &[GridFunction]) -> Result<DMatrix<f64>> {
    if fs.is_empty() {
        return Err(Error::InvalidArgument("Gram matrix of an empty family".into()));
    }
    let n = fs.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = l2_inner(&fs[i], &fs[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = singular_triplets(m);
    let Some(max) = sv.first().map(|t| t.0).filter(|&x| x > 0.0) else {
        return 0;
    };
    sv.iter().filter(|t| t.0 > tol * max).count()
}

/// Weak linear independence: `Σ λ_j f_j = 0` with `Σ λ_j = 0` forces `λ = 0`,
/// decided by the rank of the Gram matrix stacked on the all-ones row.
pub fn weak_li_test(fs: &[GridFunction], tol: f64) -> Result<bool> {
    let g = gram_matrix(fs)?;
    let n = fs.len();
    let mut stacked = DMatrix::zeros(n + 1, n);
    stacked.view_mut((0, 0), (n, n)).copy_from(&g);
    for j in 0..n {
        stacked[(n, j)] = 1.0;
    }
    Ok(numerical_rank(&stacked, tol) == n)
}

/// Singular triplets `(σ, u, v)` with `σ > 0`, largest first, read off the
/// symmetric eigenproblem of `[[0, M], [Mᵀ, 0]]` (eigenvalues `±σ`, vectors
/// `(u, ±v)/√2`). nalgebra's bidiagonal SVD can return inconsistent factors
/// for some rank-deficient inputs; the symmetric solver is reliable.
pub fn singular_triplets(m: &DMatrix<f64>) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    let mut aug = DMatrix::zeros(r + c, r + c);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = aug.symmetric_eigen();
    let mut out: Vec<_> = (0..r + c)
        .filter(|&i| eig.eigenvalues[i] > 0.0)
        .map(|i| {
            let v = eig.eigenvectors.column(i);
            let (uu, vv) = (v.rows(0, r).into_owned(), v.rows(r, c).into_owned());
            let (nu, nv) = (uu.norm(), vv.norm());
            (eig.eigenvalues[i], uu / nu.max(f64::MIN_POSITIVE), vv / nv.max(f64::MIN_POSITIVE))
        })
        .collect();
    out.sort_by(|x, y| y.0.total_cmp(&x.0));
    out.truncate(r.min(c));
    out
}

/// Moore–Penrose inverse; singular values at or below `tol · σ_max` are
/// treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(c, r);
    let sv = singular_triplets(m);
    let Some(max) = sv.first().map(|t| t.0) else {
        return out;
    };
    for (s, u, v) in sv.iter().filter(|t| t.0 > tol * max) {
        out += (v * u.transpose()) / *s;
    }
    out
}
