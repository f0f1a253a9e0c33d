//! Forward propagation `∂_t f = σ(a − B_b f)` of the training data through
//! the continuum residual network, plus the a-priori estimates that every
//! solution has to satisfy.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::grid::{same_grid, GridFunction, Kernel, SpatialGrid};

/// Uniform partition `t0 = t_0 < … < t_S = t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        Self::span(0.0, t_end, steps)
    }

    pub fn span(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(t_end >= t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidArgument("time grid needs t0 <= t_end".into()));
        }
        Ok(TimeGrid { t0, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, s: usize) -> f64 {
        self.t0 + s as f64 * self.dt()
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Sub-grid covering nodes `from..=steps`.
    pub fn tail(&self, from: usize) -> Result<TimeGrid> {
        if from > self.steps {
            return Err(Error::InvalidArgument(format!("node {from} outside grid")));
        }
        Ok(TimeGrid { t0: self.time(from), t_end: self.t_end, steps: self.steps - from })
    }
}

/// Time-sampled controls `(a(·, t_s), b(·, ·, t_s))`, one snapshot per node.
///
/// Explicit Euler only reads nodes `0..S`; the snapshot at `t_S` is carried so
/// that paths can be written and compared node by node.
#[derive(Debug, Clone)]
pub struct ControlPath {
    time: TimeGrid,
    a: Vec<GridFunction>,
    b: Vec<Kernel>,
}

impl ControlPath {
    pub fn new(time: TimeGrid, a: Vec<GridFunction>, b: Vec<Kernel>) -> Result<Self> {
        if a.len() != time.nodes() || b.len() != time.nodes() {
            return Err(Error::Shape(format!(
                "control path needs {} snapshots, got {} biases and {} kernels",
                time.nodes(),
                a.len(),
                b.len()
            )));
        }
        let grid = a[0].grid().clone();
        for (ai, bi) in a.iter().zip(&b) {
            if !same_grid(ai.grid(), &grid) || !same_grid(bi.row_grid(), &grid) || !same_grid(bi.col_grid(), &grid) {
                return Err(Error::GridMismatch("control snapshots must share one label grid".into()));
            }
        }
        Ok(ControlPath { time, a, b })
    }

    pub fn constant(time: TimeGrid, a: GridFunction, b: Kernel) -> Result<Self> {
        let n = time.nodes();
        Self::new(time, vec![a; n], vec![b; n])
    }

    pub fn zeros(time: TimeGrid, grid: Arc<SpatialGrid>) -> Self {
        let n = time.nodes();
        ControlPath { time, a: vec![GridFunction::zeros(grid.clone()); n], b: vec![Kernel::zeros(grid.clone(), grid); n] }
    }

    /// Samples `a(y, t)` and `b(y, z, t)` at cell centres and time nodes.
    pub fn from_fns(
        time: TimeGrid,
        grid: Arc<SpatialGrid>,
        a: impl Fn(&[f64], f64) -> f64,
        b: impl Fn(&[f64], &[f64], f64) -> f64,
    ) -> Self {
        let mut av = Vec::with_capacity(time.nodes());
        let mut bv = Vec::with_capacity(time.nodes());
        for s in 0..time.nodes() {
            let t = time.time(s);
            av.push(GridFunction::from_fn(grid.clone(), |y| a(y, t)));
            bv.push(Kernel::from_fn(grid.clone(), grid.clone(), |y, z| b(y, z, t)));
        }
        ControlPath { time, a: av, b: bv }
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        self.a[0].grid()
    }

    pub fn a(&self, s: usize) -> &GridFunction {
        &self.a[s]
    }

    pub fn b(&self, s: usize) -> &Kernel {
        &self.b[s]
    }

    pub fn a_path(&self) -> &[GridFunction] {
        &self.a
    }

    pub fn b_path(&self) -> &[Kernel] {
        &self.b
    }

    pub fn a_mut(&mut self, s: usize) -> &mut GridFunction {
        &mut self.a[s]
    }

    pub fn b_mut(&mut self, s: usize) -> &mut Kernel {
        &mut self.b[s]
    }

    /// Nodes `from..=S` as a path on the tail time grid.
    pub fn tail(&self, from: usize) -> Result<ControlPath> {
        let time = self.time.tail(from)?;
        Ok(ControlPath { time, a: self.a[from..].to_vec(), b: self.b[from..].to_vec() })
    }

    /// `‖a‖_{L¹((t_{s0}, t_{s1}); L²)}` by the left-endpoint rectangle rule.
    pub fn a_l1(&self, s0: usize, s1: usize) -> f64 {
        let dt = self.time.dt();
        (s0..s1).map(|s| dt * self.a[s].l2_norm()).sum()
    }

    /// `‖b‖_{L¹((t_{s0}, t_{s1}); L²(Y×Y))}` by the left-endpoint rectangle rule.
    pub fn b_l1(&self, s0: usize, s1: usize) -> f64 {
        let dt = self.time.dt();
        (s0..s1).map(|s| dt * self.b[s].l2_norm()).sum()
    }

    /// `‖b‖²_{L²((0,T); L⁴(Y×Y))}`, left-endpoint rule.
    pub fn b_l2_l4_sq(&self) -> f64 {
        let dt = self.time.dt();
        (0..self.time.steps).map(|s| dt * self.b[s].l4_norm().powi(2)).sum()
    }

    /// Sup-norm distance between two paths over all nodes and entries.
    pub fn sup_distance(&self, other: &ControlPath) -> f64 {
        let mut m: f64 = 0.0;
        for s in 0..self.a.len().min(other.a.len()) {
            for (x, y) in self.a[s].values().iter().zip(other.a[s].values()) {
                m = m.max((x - y).abs());
            }
            for (x, y) in self.b[s].values().iter().zip(other.b[s].values().iter()) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    /// Total variation in time of `(a, b)` measured in `L²`, i.e. the
    /// discrete BV seminorm `Σ_s ‖x_{s+1} − x_s‖`.
    pub fn bv_seminorm(&self) -> f64 {
        let mut tv = 0.0;
        for s in 0..self.time.steps {
            let da = self.a[s + 1].axpy(-1.0, &self.a[s]).map(|d| d.l2_norm()).unwrap_or(0.0);
            let db = self.b[s + 1].axpy(-1.0, &self.b[s]).map(|d| d.l2_norm()).unwrap_or(0.0);
            tv += (da * da + db * db).sqrt();
        }
        tv
    }
}

/// Time-sampled family of `N` grid functions per node: `states[s][j]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    time: TimeGrid,
    states: Vec<Vec<GridFunction>>,
}

impl Trajectory {
    pub fn new(time: TimeGrid, states: Vec<Vec<GridFunction>>) -> Result<Self> {
        if states.len() != time.nodes() {
            return Err(Error::Shape(format!("trajectory needs {} nodes, got {}", time.nodes(), states.len())));
        }
        let n = states[0].len();
        if n == 0 {
            return Err(Error::Shape("trajectory without data".into()));
        }
        let grid = states[0][0].grid().clone();
        for node in &states {
            if node.len() != n || node.iter().any(|f| !same_grid(f.grid(), &grid)) {
                return Err(Error::Shape("inconsistent data count or grid across nodes".into()));
            }
        }
        Ok(Trajectory { time, states })
    }

    /// Builds `states[s][j]` from per-datum paths `paths[j][s]`.
    pub(crate) fn from_datum_paths(time: TimeGrid, paths: Vec<Vec<GridFunction>>) -> Self {
        let nodes = time.nodes();
        let mut states: Vec<Vec<GridFunction>> = (0..nodes).map(|_| Vec::with_capacity(paths.len())).collect();
        for path in paths {
            for (s, f) in path.into_iter().enumerate() {
                states[s].push(f);
            }
        }
        Trajectory { time, states }
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn n_data(&self) -> usize {
        self.states[0].len()
    }

    pub fn grid(&self) -> &Arc<SpatialGrid> {
        self.states[0][0].grid()
    }

    pub fn at(&self, s: usize) -> &[GridFunction] {
        &self.states[s]
    }

    pub fn state(&self, s: usize, j: usize) -> &GridFunction {
        &self.states[s][j]
    }

    pub fn terminal(&self) -> &[GridFunction] {
        &self.states[self.time.steps]
    }

    pub fn initial(&self) -> &[GridFunction] {
        &self.states[0]
    }

    pub fn datum_path(&self, j: usize) -> Vec<GridFunction> {
        self.states.iter().map(|node| node[j].clone()).collect()
    }
}

/// `(B_b f)(y_k) = Σ_l b(y_k, z_l) f(z_l) w_l`.
pub fn apply_kernel(b: &Kernel, f: &GridFunction) -> Result<GridFunction> {
    if !same_grid(b.col_grid(), f.grid()) {
        return Err(Error::GridMismatch("kernel columns and function live on different grids".into()));
    }
    Ok(apply_kernel_unchecked(b, f))
}

pub(crate) fn apply_kernel_unchecked(b: &Kernel, f: &GridFunction) -> GridFunction {
    let w = f.grid().weights();
    let fv = f.values();
    let m = b.values();
    let out = (0..m.nrows())
        .map(|k| {
            let mut acc = 0.0;
            for l in 0..m.ncols() {
                acc += m[(k, l)] * fv[l] * w[l];
            }
            acc
        })
        .collect();
    GridFunction::from_raw(b.row_grid().clone(), out)
}

/// `ξ = a − B_b f`.
pub fn preactivation(a: &GridFunction, b: &Kernel, f: &GridFunction) -> GridFunction {
    let bf = apply_kernel_unchecked(b, f);
    let v = a.values().iter().zip(bf.values()).map(|(x, y)| x - y).collect();
    GridFunction::from_raw(a.grid().clone(), v)
}

fn check_inputs(f_init: &[GridFunction], ctrl: &ControlPath) -> Result<()> {
    if f_init.is_empty() {
        return Err(Error::InvalidArgument("no initial data".into()));
    }
    if ctrl.time().dt() <= 0.0 {
        return Err(Error::InvalidArgument("time step must be positive".into()));
    }
    for f in f_init {
        if !same_grid(f.grid(), ctrl.grid()) {
            return Err(Error::GridMismatch("initial data and controls live on different grids".into()));
        }
    }
    Ok(())
}

/// Explicit Euler: `f_{s+1} = f_s + Δt σ(a_s − B_{b_s} f_s)` for every datum.
pub fn solve_forward_euler(f_init: &[GridFunction], ctrl: &ControlPath, sigma: &Activation) -> Result<Trajectory> {
    check_inputs(f_init, ctrl)?;
    let paths: Result<Vec<Vec<GridFunction>>> = f_init.par_iter().enumerate().map(|(j, f0)| euler_path(j, f0, ctrl, sigma)).collect();
    Ok(Trajectory::from_datum_paths(*ctrl.time(), paths?))
}

fn euler_path(j: usize, f0: &GridFunction, ctrl: &ControlPath, sigma: &Activation) -> Result<Vec<GridFunction>> {
    let time = ctrl.time();
    let dt = time.dt();
    let mut path = Vec::with_capacity(time.nodes());
    path.push(f0.clone());
    for s in 0..time.steps {
        let cur = &path[s];
        let xi = preactivation(ctrl.a(s), ctrl.b(s), cur);
        let next: Vec<f64> = cur.values().iter().zip(xi.values()).map(|(f, x)| f + dt * sigma.eval(*x)).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time_index: s + 1, datum: j });
        }
        path.push(GridFunction::from_raw(f0.grid().clone(), next));
    }
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub trajectory: Trajectory,
    /// Largest number of fixed-point sweeps spent by any datum.
    pub iterations: usize,
    /// Largest number of time windows any datum needed.
    pub windows: usize,
}

/// Fixed-point iteration of `f ↦ f_I + ∫_0^t σ(a − B_b f) ds` with the time
/// integral discretised by the trapezoidal rule. The iteration runs on the
/// whole horizon first and restarts on shorter windows when it stops
/// contracting.
pub fn solve_forward_picard(
    f_init: &[GridFunction],
    ctrl: &ControlPath,
    sigma: &Activation,
    max_iter: usize,
    tol: f64,
) -> Result<PicardSolution> {
    check_inputs(f_init, ctrl)?;
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let results: Result<Vec<(Vec<GridFunction>, usize, usize)>> =
        f_init.par_iter().enumerate().map(|(j, f0)| picard_path(j, f0, ctrl, sigma, max_iter, tol)).collect();
    let results = results?;
    let iterations = results.iter().map(|r| r.1).max().unwrap_or(0);
    let windows = results.iter().map(|r| r.2).max().unwrap_or(0);
    let paths = results.into_iter().map(|r| r.0).collect();
    Ok(PicardSolution { trajectory: Trajectory::from_datum_paths(*ctrl.time(), paths), iterations, windows })
}

fn picard_path(
    j: usize,
    f0: &GridFunction,
    ctrl: &ControlPath,
    sigma: &Activation,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<GridFunction>, usize, usize)> {
    let time = ctrl.time();
    let dt = time.dt();
    let steps = time.steps;
    let grid = f0.grid().clone();
    let mut path: Vec<GridFunction> = vec![f0.clone(); steps + 1];
    let mut start = 0usize;
    let mut width = steps;
    let mut total_iter = 0usize;
    let mut windows = 0usize;

    let rhs = |s: usize, f: &GridFunction| -> Vec<f64> {
        preactivation(ctrl.a(s), ctrl.b(s), f).values().iter().map(|x| sigma.eval(*x)).collect()
    };

    while start < steps {
        let end = (start + width).min(steps);
        // initial guess: frozen state on the window
        let mut guess: Vec<GridFunction> = (start..=end).map(|_| path[start].clone()).collect();
        let mut prev_res = f64::INFINITY;
        let mut converged = false;
        let mut stalled = false;
        let mut last_res = f64::INFINITY;
        for it in 0..max_iter {
            let g: Vec<Vec<f64>> = (start..=end).map(|s| rhs(s, &guess[s - start])).collect();
            let mut next = Vec::with_capacity(end - start + 1);
            let mut acc = path[start].values().to_vec();
            next.push(GridFunction::from_raw(grid.clone(), acc.clone()));
            for m in 0..(end - start) {
                for (k, v) in acc.iter_mut().enumerate() {
                    *v += 0.5 * dt * (g[m][k] + g[m + 1][k]);
                }
                if acc.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { time_index: start + m + 1, datum: j });
                }
                next.push(GridFunction::from_raw(grid.clone(), acc.clone()));
            }
            let res =
                next.iter().zip(&guess).map(|(a, b)| a.axpy(-1.0, b).map(|d| d.l2_norm()).unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
            guess = next;
            total_iter += 1;
            last_res = res;
            if res <= tol {
                converged = true;
                break;
            }
            if it >= 2 && (res > 0.9 * prev_res || !res.is_finite()) && end - start > 1 {
                stalled = true;
                break;
            }
            prev_res = res;
        }
        if converged {
            for (i, f) in guess.into_iter().enumerate() {
                path[start + i] = f;
            }
            windows += 1;
            start = end;
            width = width.max(1);
        } else if stalled || end - start > 1 {
            width = ((end - start) / 2).max(1);
        } else {
            return Err(Error::NoConvergence { iterations: total_iter, residual: last_res });
        }
    }
    Ok((path, total_iter, windows))
}

/// Margins (right-hand side minus left-hand side) of the a-priori estimates,
/// minimised over nodes, node pairs and data. Negative beyond
/// [`APRIORI_SLACK`] means violated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AprioriReport {
    pub growth_margin: f64,
    pub continuity_margin: f64,
}

pub const APRIORI_SLACK: f64 = 1e-8;

impl AprioriReport {
    pub fn holds(&self) -> bool {
        self.growth_margin >= -APRIORI_SLACK && self.continuity_margin >= -APRIORI_SLACK
    }
}

fn sigma0_term(sigma: &Activation, grid: &SpatialGrid) -> f64 {
    sigma.eval(0.0).abs() * grid.total_measure().sqrt()
}

/// Evaluates the growth estimate
/// `‖f(t)‖ ≤ (‖f_I‖ + |σ(0)||Y|^½ t + L‖a‖_{L¹(0,t)}) exp(L‖b‖_{L¹(0,t)})`
/// and the time-continuity estimate
/// `‖f(t₁) − f(t₂)‖ ≤ |σ(0)||Y|^½|t₁ − t₂| + L(‖a‖_{L¹(t₁,t₂)} + ‖f‖_{C[t₁,t₂]}‖b‖_{L¹(t₁,t₂)})`
/// on every node (pair) of a trajectory.
pub fn check_apriori_bound(traj: &Trajectory, ctrl: &ControlPath, sigma: &Activation) -> Result<AprioriReport> {
    if traj.time() != ctrl.time() {
        return Err(Error::Shape("trajectory and controls use different time grids".into()));
    }
    let steps = traj.time().steps;
    let l = sigma.lipschitz();
    let c0 = sigma0_term(sigma, traj.grid());
    let dt = traj.time().dt();
    let a_norms: Vec<f64> = (0..steps).map(|s| ctrl.a(s).l2_norm()).collect();
    let b_norms: Vec<f64> = (0..steps).map(|s| ctrl.b(s).l2_norm()).collect();
    let mut a_cum = vec![0.0; steps + 1];
    let mut b_cum = vec![0.0; steps + 1];
    for s in 0..steps {
        a_cum[s + 1] = a_cum[s] + dt * a_norms[s];
        b_cum[s + 1] = b_cum[s] + dt * b_norms[s];
    }

    let mut growth = f64::INFINITY;
    let mut cont = f64::INFINITY;
    for j in 0..traj.n_data() {
        let norms: Vec<f64> = (0..=steps).map(|s| traj.state(s, j).l2_norm()).collect();
        let f0 = norms[0];
        for n in 0..=steps {
            let t = n as f64 * dt;
            let rhs = (f0 + c0 * t + l * a_cum[n]) * (l * b_cum[n]).exp();
            growth = growth.min(rhs - norms[n]);
        }
        for n1 in 0..=steps {
            let mut fmax = norms[n1];
            for n2 in (n1 + 1)..=steps {
                fmax = fmax.max(norms[n2]);
                let lhs = traj.state(n1, j).axpy(-1.0, traj.state(n2, j))?.l2_norm();
                let rhs = c0 * (n2 - n1) as f64 * dt + l * ((a_cum[n2] - a_cum[n1]) + fmax * (b_cum[n2] - b_cum[n1]));
                cont = cont.min(rhs - lhs);
            }
        }
    }
    if steps == 0 {
        cont = 0.0;
    }
    Ok(AprioriReport { growth_margin: growth, continuity_margin: cont })
}

/// Margin of the stability estimate for two solutions driven by
/// `(f_{I,1}, a₁, b₁)` and `(f_{I,2}, a₂, b₂)`, datum by datum:
///
/// `‖f₁(t) − f₂(t)‖ ≤ (‖f_{I,1} − f_{I,2}‖ + L‖a₁ − a₂‖) e^{L‖b₂‖}
///   + (‖f_{I,1}‖ + |σ(0)||Y|^½ t + L‖a₁‖) L̂‖b₁ − b₂‖ e^{L‖b₁‖ + L̂‖b₂‖}`
///
/// with all time norms in `L¹(0, t)` and `L̂ = max(L, 1)`.
pub fn check_difference_bound(
    traj1: &Trajectory,
    ctrl1: &ControlPath,
    traj2: &Trajectory,
    ctrl2: &ControlPath,
    sigma: &Activation,
) -> Result<f64> {
    if traj1.time() != traj2.time() || traj1.time() != ctrl1.time() || ctrl1.time() != ctrl2.time() {
        return Err(Error::Shape("runs use different time grids".into()));
    }
    if traj1.n_data() != traj2.n_data() {
        return Err(Error::Shape("runs carry different numbers of data".into()));
    }
    let steps = traj1.time().steps;
    let dt = traj1.time().dt();
    let l = sigma.lipschitz();
    let lh = l.max(1.0);
    let c0 = sigma0_term(sigma, traj1.grid());
    let mut da = vec![0.0; steps + 1];
    let mut db = vec![0.0; steps + 1];
    let mut a1 = vec![0.0; steps + 1];
    let mut b1 = vec![0.0; steps + 1];
    let mut b2 = vec![0.0; steps + 1];
    for s in 0..steps {
        da[s + 1] = da[s] + dt * ctrl1.a(s).axpy(-1.0, ctrl2.a(s))?.l2_norm();
        db[s + 1] = db[s] + dt * ctrl1.b(s).axpy(-1.0, ctrl2.b(s))?.l2_norm();
        a1[s + 1] = a1[s] + dt * ctrl1.a(s).l2_norm();
        b1[s + 1] = b1[s] + dt * ctrl1.b(s).l2_norm();
        b2[s + 1] = b2[s] + dt * ctrl2.b(s).l2_norm();
    }
    let mut margin = f64::INFINITY;
    for j in 0..traj1.n_data() {
        let di = traj1.state(0, j).axpy(-1.0, traj2.state(0, j))?.l2_norm();
        let fi1 = traj1.state(0, j).l2_norm();
        for n in 0..=steps {
            let t = n as f64 * dt;
            let lhs = traj1.state(n, j).axpy(-1.0, traj2.state(n, j))?.l2_norm();
            let rhs = (di + l * da[n]) * (l * b2[n]).exp() + (fi1 + c0 * t + l * a1[n]) * lh * db[n] * (l * b1[n] + lh * b2[n]).exp();
            margin = margin.min(rhs - lhs);
        }
    }
    Ok(margin)
}
