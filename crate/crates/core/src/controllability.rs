//! Linearised dynamics around a trajectory: evolution operators,
//! controllability Gramians and the multi-state obstruction experiment.
//!
//! Operators act on vectors of cell values. The adjoint in weighted `L²` is
//! `W⁻¹MᵀW`; Gramians are stored in the similar symmetric form
//! `W^½ 𝒢 W^{-½}`, which has the same spectrum.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::activation::Activation;
use crate::dynamics::{preactivation, solve_forward_euler, ControlPath, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{same_grid, weighted_spectral_norm, GridFunction, Kernel};

fn node_of(ctrl: &ControlPath, t: f64) -> Result<usize> {
    let time = ctrl.time();
    let x = (t - time.t0) / time.dt();
    let k = x.round();
    if (x - k).abs() > 1e-9 || k < 0.0 || k as usize > time.steps {
        return Err(Error::InvalidArgument(format!("time {t} is not a node of the time grid")));
    }
    Ok(k as usize)
}

/// One Euler step of `∂_t M = −σ′(ξ) B_b M` at node `k`.
fn step_matrix(ctrl: &ControlPath, f: &GridFunction, sigma: &Activation, k: usize) -> DMatrix<f64> {
    let xi = preactivation(ctrl.a(k), ctrl.b(k), f);
    let bm = ctrl.b(k).operator_matrix();
    let dt = ctrl.time().dt();
    let n = bm.nrows();
    let mut step = DMatrix::identity(n, n);
    for r in 0..n {
        let d = dt * sigma.deriv(xi.values()[r]);
        for c in 0..n {
            step[(r, c)] -= d * bm[(r, c)];
        }
    }
    step
}

/// `M(t_t, t_s)` by explicit Euler along the state path `path[k] = f(t_k)`.
pub fn propagator_nodes(ctrl: &ControlPath, path: &[GridFunction], sigma: &Activation, t: usize, s: usize) -> Result<DMatrix<f64>> {
    let time = ctrl.time();
    if path.len() != time.nodes() {
        return Err(Error::Shape(format!("state path has {} nodes, grid has {}", path.len(), time.nodes())));
    }
    if s > t || t > time.steps {
        return Err(Error::InvalidArgument(format!("need 0 <= s <= t <= S, got s={s}, t={t}")));
    }
    if !same_grid(path[0].grid(), ctrl.grid()) {
        return Err(Error::GridMismatch("state path and controls live on different grids".into()));
    }
    let n = ctrl.grid().len();
    let mut m = DMatrix::identity(n, n);
    for k in s..t {
        m = step_matrix(ctrl, &path[k], sigma, k) * m;
    }
    Ok(m)
}

/// `M(t, s)` for times on the control grid.
pub fn propagator(ctrl: &ControlPath, path: &[GridFunction], sigma: &Activation, t: f64, s: f64) -> Result<DMatrix<f64>> {
    propagator_nodes(ctrl, path, sigma, node_of(ctrl, t)?, node_of(ctrl, s)?)
}

/// `M(T, t_k)` for every `k`, sharing the products.
fn propagators_to_end(ctrl: &ControlPath, path: &[GridFunction], sigma: &Activation) -> Vec<DMatrix<f64>> {
    let steps = ctrl.time().steps;
    let n = ctrl.grid().len();
    let mut out = vec![DMatrix::identity(n, n); steps + 1];
    for k in (0..steps).rev() {
        out[k] = &out[k + 1] * step_matrix(ctrl, &path[k], sigma, k);
    }
    out
}

/// Weighted spectral norm of a cell-value operator on `L²(Y)`.
pub fn operator_norm(m: &DMatrix<f64>, weights: &[f64]) -> f64 {
    weighted_spectral_norm(m, weights, weights)
}

#[derive(Debug, Clone, Serialize)]
pub struct Gramian {
    /// `W^½ 𝒢 W^{-½}`, symmetric.
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
}

impl Gramian {
    fn from_symmetric(mut m: DMatrix<f64>) -> Self {
        let mt = m.transpose();
        m = (&m + mt) * 0.5;
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().collect();
        eigenvalues.sort_by(|a, b| a.total_cmp(b));
        let min_eigenvalue = eigenvalues[0];
        Gramian { matrix: m, eigenvalues, min_eigenvalue }
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).abs().max()
    }
}

fn sqrt_weight_similarity(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * w[r].sqrt() / w[c].sqrt())
}

/// Stationarity residual `‖σ(a_∞ − B_{b_∞} f_∞)‖` admitted by [`gramian_stationary`].
pub const STATIONARY_TOL: f64 = 1e-8;

/// Gramian at an equilibrium `B_{b_∞} f_∞ = a_∞` with `σ(0) = 0`:
/// `σ′(0)²(1 + ‖f_∞‖²) ∫_0^T e^{−σ′(0)(T−τ)B} e^{−σ′(0)(T−τ)B^*} dτ`, with the
/// time integral evaluated by the trapezoidal rule on `steps` intervals.
/// `a_inf = None` means `a_∞ = B f_∞`.
pub fn gramian_stationary(
    f_inf: &GridFunction,
    b_inf: &Kernel,
    a_inf: Option<&GridFunction>,
    sigma: &Activation,
    t_end: f64,
    steps: usize,
) -> Result<Gramian> {
    if steps == 0 || !(t_end > 0.0) {
        return Err(Error::InvalidArgument("need T > 0 and at least one step".into()));
    }
    if !same_grid(b_inf.col_grid(), f_inf.grid()) || !same_grid(b_inf.row_grid(), f_inf.grid()) {
        return Err(Error::GridMismatch("equilibrium state and kernel live on different grids".into()));
    }
    let grid = f_inf.grid().clone();
    let a = match a_inf {
        Some(a) => a.clone(),
        None => crate::dynamics::apply_kernel(b_inf, f_inf)?,
    };
    let xi = preactivation(&a, b_inf, f_inf);
    let residual = xi.map(|x| sigma.eval(x)).l2_norm();
    if residual > STATIONARY_TOL {
        return Err(Error::NotStationary(residual));
    }
    let d0 = sigma.deriv(0.0);
    if !(d0 > 0.0) {
        return Err(Error::InvalidArgument("stationary Gramian needs σ′(0) > 0".into()));
    }
    let w = grid.weights();
    let s = sqrt_weight_similarity(&b_inf.operator_matrix(), w);
    let dt = t_end / steps as f64;
    let step = (&s * (-d0 * dt)).exp();
    let n = grid.len();
    let scale = d0 * d0 * (1.0 + f_inf.l2_norm().powi(2));
    // node k sits at T − kΔt; e = exp(−σ′(0) k Δt S)
    let mut e = DMatrix::identity(n, n);
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let wt = if k == 0 || k == steps { 0.5 * dt } else { dt };
        acc += &e * e.transpose() * wt;
        e = &step * e;
    }
    Ok(Gramian::from_symmetric(acc * scale))
}

/// Discrete coercivity bound `σ′(0)²(1 + ‖f_∞‖²) T exp(−2σ′(0) T ‖B‖)`.
pub fn stationary_lower_bound(f_inf: &GridFunction, b_inf: &Kernel, sigma: &Activation, t_end: f64) -> f64 {
    let d0 = sigma.deriv(0.0);
    d0 * d0 * (1.0 + f_inf.l2_norm().powi(2)) * t_end * (-2.0 * d0 * t_end * b_inf.operator_norm()).exp()
}

/// `∫_0^T M(T,τ) δ²(·,τ) M(T,τ)^* dτ` along datum `j` of a trajectory, with
/// `δ² = σ′(ξ)²(1 + ‖f(·,τ)‖²)` and the trapezoidal rule in `τ`.
pub fn gramian_trajectory(ctrl: &ControlPath, traj: &Trajectory, sigma: &Activation, datum: usize) -> Result<Gramian> {
    if traj.time() != ctrl.time() {
        return Err(Error::Shape("trajectory and controls use different time grids".into()));
    }
    if datum >= traj.n_data() {
        return Err(Error::Shape(format!("datum {datum} out of range")));
    }
    let path = traj.datum_path(datum);
    let mats = propagators_to_end(ctrl, &path, sigma);
    let steps = ctrl.time().steps;
    let dt = ctrl.time().dt();
    let w = ctrl.grid().weights();
    let n = w.len();
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let xi = preactivation(ctrl.a(k), ctrl.b(k), &path[k]);
        let norm_sq = 1.0 + path[k].l2_norm().powi(2);
        let ms = sqrt_weight_similarity(&mats[k], w);
        let mut md = ms.clone();
        for c in 0..n {
            let d = sigma.deriv(xi.values()[c]);
            let d2 = d * d * norm_sq;
            for r in 0..n {
                md[(r, c)] *= d2;
            }
        }
        let wt = if k == 0 || k == steps { 0.5 * dt } else { dt };
        acc += md * ms.transpose() * wt;
    }
    Ok(Gramian::from_symmetric(acc))
}

#[derive(Debug, Clone, Serialize)]
pub struct ObstructionReport {
    pub eps: Vec<f64>,
    /// `max_{i,j} ‖(f^{(i)}_ε(T) − f^{(j)}_ε(T)) − ε M(T,0)(g^{(i)} − g^{(j)})‖ / ε`.
    pub residuals: Vec<f64>,
    /// Least-squares slope of `log residual` against `log ε` over `ε > 0`.
    pub slope: Option<f64>,
    /// `Δt (1 + max ‖g‖)`: residuals below this are discretisation noise.
    pub noise_floor: f64,
}

impl ObstructionReport {
    pub fn below_noise(&self) -> bool {
        self.residuals.iter().all(|r| *r <= self.noise_floor)
    }
}

/// Perturbs `f_I` along each direction `g^{(j)}` by `ε`, propagates all
/// perturbed data with the unperturbed control and compares state differences
/// at `T` with their linearisation `ε M(T,0)(g^{(i)} − g^{(j)})`. The mismatch
/// is the second-order term `ν`, so `residual = ‖ν‖/ε = O(ε)` when `σ″ ≠ 0`.
pub fn multistate_obstruction(
    ctrl: &ControlPath,
    f_init: &GridFunction,
    dirs: &[GridFunction],
    eps: &[f64],
    sigma: &Activation,
) -> Result<ObstructionReport> {
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("obstruction test needs at least two directions".into()));
    }
    let base = solve_forward_euler(std::slice::from_ref(f_init), ctrl, sigma)?;
    let m = propagator_nodes(ctrl, &base.datum_path(0), sigma, ctrl.time().steps, 0)?;
    let lin: Vec<nalgebra::DVector<f64>> = dirs.iter().map(|g| &m * nalgebra::DVector::from_column_slice(g.values())).collect();
    let grid = f_init.grid().clone();
    let mut residuals = Vec::with_capacity(eps.len());
    for &e in eps {
        if e == 0.0 {
            residuals.push(0.0);
            continue;
        }
        let init: Vec<GridFunction> = dirs.iter().map(|g| f_init.axpy(e, g)).collect::<Result<_>>()?;
        let traj = solve_forward_euler(&init, ctrl, sigma)?;
        let mut worst: f64 = 0.0;
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                let diff = traj.terminal()[i].axpy(-1.0, &traj.terminal()[j])?;
                let v: Vec<f64> = diff.values().iter().zip(lin[i].iter().zip(lin[j].iter())).map(|(d, (p, q))| d - e * (p - q)).collect();
                worst = worst.max(GridFunction::from_raw(grid.clone(), v).l2_norm() / e.abs());
            }
        }
        residuals.push(worst);
    }
    let pts: Vec<(f64, f64)> = eps.iter().zip(&residuals).filter(|(e, r)| **e > 0.0 && **r > 0.0).map(|(e, r)| (e.ln(), r.ln())).collect();
    let slope = fit_slope(&pts);
    let gmax = dirs.iter().map(|g| g.l2_norm()).fold(0.0, f64::max);
    Ok(ObstructionReport { eps: eps.to_vec(), residuals, slope, noise_floor: ctrl.time().dt() * (1.0 + gmax) })
}

pub(crate) fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}
