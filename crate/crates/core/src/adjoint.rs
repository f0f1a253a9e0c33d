//! Co-state equation, first variations of the loss, steepest-descent
//! training and the closed-form stationary classifier.
//!
//! The backward sweep is the exact adjoint of the explicit Euler forward
//! scheme: `r_s = r_{s+1} − Δt B_{b_s}^*(σ′(ξ_s) r_{s+1})`, and the control
//! gradients at node `s` pair `ξ_s` with `r_{s+1}`. Time integrals of
//! gradients use the same left-endpoint rule as the forward solver, so
//! directional derivatives agree with finite differences of the discrete loss
//! to round-off.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::dynamics::{apply_kernel_unchecked, preactivation, solve_forward_euler, ControlPath, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{l2_inner, numerical_rank, pseudo_inverse, same_grid, GridFunction, Kernel, SpatialGrid, DEFAULT_RANK_TOL};
use crate::output::{network_output, output_sensitivity, Classifier, LossKind, Predictor, TrainingSet};

/// Activation, prediction function and loss of a training problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub sigma: Activation,
    #[serde(default)]
    pub predictor: Predictor,
    #[serde(default)]
    pub loss: LossKind,
}

impl Model {
    pub fn new(sigma: Activation, predictor: Predictor, loss: LossKind) -> Self {
        Model { sigma, predictor, loss }
    }

    /// Regression setting: identity prediction and MSE.
    pub fn regression(sigma: Activation) -> Self {
        Model { sigma, predictor: Predictor::Identity, loss: LossKind::Mse }
    }
}

/// Final values `r^{(j)}(T) = ω^{(j)}` together with the output-side
/// sensitivities `e^{(j)}` they were built from.
#[derive(Debug, Clone)]
pub struct AdjointTerminal {
    pub omega: Vec<GridFunction>,
    pub sensitivity: Vec<GridFunction>,
    pub outputs: Vec<GridFunction>,
    pub loss: f64,
}

/// `ω^{(j)}(y) = ∫_U e^{(j)}(u) w(u, y) du`, where for MSE with a local
/// prediction function `e = (P_pre − P) h′(Z)`.
pub fn adjoint_terminal(f_t: &[GridFunction], cls: &Classifier, model: &Model, targets: &[GridFunction]) -> Result<AdjointTerminal> {
    if f_t.len() != targets.len() || f_t.is_empty() {
        return Err(Error::Shape(format!("{} terminal states but {} targets", f_t.len(), targets.len())));
    }
    let adj = cls.w.adjoint();
    let mut omega = Vec::with_capacity(f_t.len());
    let mut sensitivity = Vec::with_capacity(f_t.len());
    let mut outputs = Vec::with_capacity(f_t.len());
    let mut loss = 0.0;
    for (f, p) in f_t.iter().zip(targets) {
        let z = network_output(f, cls)?;
        let (val, e) = output_sensitivity(&z, p, model.predictor, model.loss)?;
        loss += val;
        omega.push(apply_kernel_unchecked(&adj, &e));
        sensitivity.push(e);
        outputs.push(z);
    }
    Ok(AdjointTerminal { omega, sensitivity, outputs, loss: loss / f_t.len() as f64 })
}

/// Backward Euler sweep for the co-states from `t = T` down to `t = 0`.
pub fn solve_backward(traj: &Trajectory, ctrl: &ControlPath, sigma: &Activation, terminal: &[GridFunction]) -> Result<Trajectory> {
    if traj.time() != ctrl.time() {
        return Err(Error::Shape("trajectory and controls use different time grids".into()));
    }
    if terminal.len() != traj.n_data() {
        return Err(Error::Shape(format!("{} terminal values for {} data", terminal.len(), traj.n_data())));
    }
    if terminal.iter().any(|r| !same_grid(r.grid(), traj.grid())) {
        return Err(Error::GridMismatch("terminal co-states live on a different grid".into()));
    }
    let time = *traj.time();
    let adjoints: Vec<Kernel> = (0..time.steps).map(|s| ctrl.b(s).adjoint()).collect();
    let paths: Result<Vec<Vec<GridFunction>>> = terminal
        .par_iter()
        .enumerate()
        .map(|(j, r_t)| {
            let mut rev = Vec::with_capacity(time.nodes());
            rev.push(r_t.clone());
            for s in (0..time.steps).rev() {
                let next = rev.last().expect("nonempty");
                let xi = preactivation(ctrl.a(s), ctrl.b(s), traj.state(s, j));
                let g = GridFunction::from_raw(
                    next.grid().clone(),
                    xi.values().iter().zip(next.values()).map(|(x, r)| sigma.deriv(*x) * r).collect(),
                );
                let bg = apply_kernel_unchecked(&adjoints[s], &g);
                let v: Vec<f64> = next.values().iter().zip(bg.values()).map(|(r, q)| r - time.dt() * q).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { time_index: s, datum: j });
                }
                rev.push(GridFunction::from_raw(next.grid().clone(), v));
            }
            rev.reverse();
            Ok(rev)
        })
        .collect();
    Ok(Trajectory::from_datum_paths(time, paths?))
}

/// `(D_aJ, D_bJ, D_wJ, D_μJ)` as Riesz representatives. The control parts
/// are sampled at every time node; the entry at `t_S` is zero because the
/// explicit scheme never reads the controls there.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub time: TimeGrid,
    pub d_a: Vec<GridFunction>,
    pub d_b: Vec<Kernel>,
    pub d_w: Kernel,
    pub d_mu: GridFunction,
}

fn kernel_inner(x: &Kernel, y: &Kernel) -> f64 {
    let wr = x.row_grid().weights();
    let wc = x.col_grid().weights();
    let (xv, yv) = (x.values(), y.values());
    let mut acc = 0.0;
    for l in 0..xv.ncols() {
        for k in 0..xv.nrows() {
            acc += xv[(k, l)] * yv[(k, l)] * wr[k] * wc[l];
        }
    }
    acc
}

impl LossGradient {
    /// `⟨DJ, (δa, δb, δw, δμ)⟩` with the left-endpoint rule in time; equals
    /// the derivative of the discrete loss along the direction.
    pub fn directional(&self, dctrl: &ControlPath, dcls: &Classifier) -> f64 {
        let dt = self.time.dt();
        let mut acc = 0.0;
        for s in 0..self.time.steps {
            acc += dt * l2_inner(&self.d_a[s], dctrl.a(s)).unwrap_or(f64::NAN);
            acc += dt * kernel_inner(&self.d_b[s], dctrl.b(s));
        }
        acc + kernel_inner(&self.d_w, &dcls.w) + l2_inner(&self.d_mu, &dcls.mu).unwrap_or(f64::NAN)
    }

    /// `‖D_aJ‖`, `‖D_bJ‖` in `L²((0,T); ·)` and `‖D_wJ‖`, `‖D_μJ‖`.
    pub fn norms(&self) -> [f64; 4] {
        let dt = self.time.dt();
        let mut na = 0.0;
        let mut nb = 0.0;
        for s in 0..self.time.steps {
            na += dt * self.d_a[s].l2_norm().powi(2);
            nb += dt * self.d_b[s].l2_norm().powi(2);
        }
        [na.sqrt(), nb.sqrt(), self.d_w.l2_norm(), self.d_mu.l2_norm()]
    }

    pub fn norm(&self) -> f64 {
        self.norms().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `(ctrl, cls) − τ·DJ`; `update_classifier = false` leaves `(w, μ)` alone.
    pub fn descend(&self, ctrl: &ControlPath, cls: &Classifier, tau: f64, update_classifier: bool) -> Result<(ControlPath, Classifier)> {
        let mut c = ctrl.clone();
        for s in 0..self.time.steps {
            *c.a_mut(s) = c.a(s).axpy(-tau, &self.d_a[s])?;
            *c.b_mut(s) = c.b(s).axpy(-tau, &self.d_b[s])?;
        }
        let k =
            if update_classifier { Classifier::new(cls.w.axpy(-tau, &self.d_w)?, cls.mu.axpy(-tau, &self.d_mu)?)? } else { cls.clone() };
        Ok((c, k))
    }
}

/// Evaluates the first variations on a forward/backward pair.
pub fn loss_gradient(
    traj: &Trajectory,
    co: &Trajectory,
    ctrl: &ControlPath,
    sigma: &Activation,
    cls: &Classifier,
    terminal: &AdjointTerminal,
) -> Result<LossGradient> {
    let time = *traj.time();
    if co.time() != &time || ctrl.time() != &time {
        return Err(Error::Shape("runs use different time grids".into()));
    }
    let n = traj.n_data();
    if co.n_data() != n || terminal.sensitivity.len() != n {
        return Err(Error::Shape("inconsistent number of data".into()));
    }
    let y = traj.grid().clone();
    let m = y.len();
    let inv_n = 1.0 / n as f64;

    let per_node: Vec<(GridFunction, Kernel)> = (0..time.nodes())
        .into_par_iter()
        .map(|s| {
            if s == time.steps {
                return (GridFunction::zeros(y.clone()), Kernel::zeros(y.clone(), y.clone()));
            }
            let mut da = vec![0.0; m];
            let mut db = DMatrix::zeros(m, m);
            for j in 0..n {
                let f = traj.state(s, j);
                let xi = preactivation(ctrl.a(s), ctrl.b(s), f);
                let r = co.state(s + 1, j);
                let g: Vec<f64> = xi.values().iter().zip(r.values()).map(|(x, rv)| sigma.deriv(*x) * rv).collect();
                for k in 0..m {
                    da[k] += inv_n * g[k];
                }
                for l in 0..m {
                    let fl = f.values()[l];
                    for k in 0..m {
                        db[(k, l)] -= inv_n * g[k] * fl;
                    }
                }
            }
            (GridFunction::from_raw(y.clone(), da), Kernel::from_raw(y.clone(), y.clone(), db))
        })
        .collect();
    let (d_a, d_b): (Vec<_>, Vec<_>) = per_node.into_iter().unzip();

    let u = cls.u_grid().clone();
    let mut dw = DMatrix::zeros(u.len(), m);
    let mut dmu = vec![0.0; u.len()];
    for (j, e) in terminal.sensitivity.iter().enumerate() {
        let ft = traj.state(time.steps, j);
        for l in 0..m {
            for k in 0..u.len() {
                dw[(k, l)] += inv_n * e.values()[k] * ft.values()[l];
            }
        }
        for k in 0..u.len() {
            dmu[k] += inv_n * e.values()[k];
        }
    }
    Ok(LossGradient { time, d_a, d_b, d_w: Kernel::from_raw(u.clone(), y, dw), d_mu: GridFunction::from_raw(u, dmu) })
}

/// A complete forward/backward evaluation at one parameter point.
#[derive(Debug, Clone)]
pub struct Run {
    pub forward: Trajectory,
    pub co: Trajectory,
    pub terminal: AdjointTerminal,
    pub gradient: LossGradient,
}

impl Run {
    pub fn loss(&self) -> f64 {
        self.terminal.loss
    }
}

pub fn evaluate_loss_only(data: &TrainingSet, ctrl: &ControlPath, cls: &Classifier, model: &Model) -> Result<f64> {
    let traj = solve_forward_euler(data.init(), ctrl, &model.sigma)?;
    crate::output::evaluate_loss(traj.terminal(), cls, model.predictor, model.loss, data.targets())
}

pub fn evaluate(data: &TrainingSet, ctrl: &ControlPath, cls: &Classifier, model: &Model) -> Result<Run> {
    if model.loss == LossKind::CrossEntropy {
        data.check_densities()?;
    }
    let forward = solve_forward_euler(data.init(), ctrl, &model.sigma)?;
    let terminal = adjoint_terminal(forward.terminal(), cls, model, data.targets())?;
    let co = solve_backward(&forward, ctrl, &model.sigma, &terminal.omega)?;
    let gradient = loss_gradient(&forward, &co, ctrl, &model.sigma, cls, &terminal)?;
    Ok(Run { forward, co, terminal, gradient })
}

/// L² norms of the four stationarity expressions.
pub fn stationarity_residuals(run: &Run) -> [f64; 4] {
    run.gradient.norms()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainOptions {
    pub step: f64,
    pub iters: usize,
    /// Halvings allowed per iteration before giving up.
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
    /// Stop once every stationarity residual is at or below this value.
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default = "default_true")]
    pub train_classifier: bool,
}

fn default_halvings() -> usize {
    30
}

fn default_true() -> bool {
    true
}

impl TrainOptions {
    pub fn new(step: f64, iters: usize) -> Self {
        TrainOptions { step, iters, max_halvings: 30, grad_tol: 0.0, train_classifier: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub step: f64,
    pub residuals: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub ctrl: ControlPath,
    pub cls: Classifier,
    pub history: Vec<TrainRecord>,
}

impl TrainResult {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Steepest descent `x ← x − Δτ DJ(x)` jointly in `(a, b, w, μ)` with
/// backtracking: a trial step that raises the loss is halved (at most
/// `max_halvings` times), and an accepted step is doubled for the next
/// iteration.
pub fn train_gradient_flow(
    data: &TrainingSet,
    ctrl: &ControlPath,
    cls: &Classifier,
    model: &Model,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut ctrl = ctrl.clone();
    let mut cls = cls.clone();
    let mut run = evaluate(data, &ctrl, &cls, model)?;
    let mut tau = opts.step;
    let mut history = vec![TrainRecord { iteration: 0, loss: run.loss(), step: 0.0, residuals: run.gradient.norms() }];
    for it in 1..=opts.iters {
        let res = run.gradient.norms();
        if res.iter().all(|r| *r <= opts.grad_tol) {
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let (c, k) = run.gradient.descend(&ctrl, &cls, tau, opts.train_classifier)?;
            match evaluate(data, &c, &k, model) {
                Ok(next) if next.loss() <= run.loss() => {
                    accepted = Some((c, k, next));
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => tau *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((c, k, next)) = accepted else {
            return Err(Error::StepUnderflow { iteration: it });
        };
        ctrl = c;
        cls = k;
        run = next;
        history.push(TrainRecord { iteration: it, loss: run.loss(), step: tau, residuals: run.gradient.norms() });
        tau *= 2.0;
    }
    Ok(TrainResult { ctrl, cls, history })
}

/// Output of [`stationary_classifier`].
#[derive(Debug, Clone)]
pub struct StationaryClassifier {
    pub classifier: Classifier,
    /// Orthonormal basis `σ_1, …, σ_K` of the span of the terminal states.
    pub basis: Vec<GridFunction>,
    /// `w_i(u)`: row `k` holds the coefficients at `u_k`.
    pub coefficients: DMatrix<f64>,
    /// `Ω_ji = ⟨f^{(j)}(T), σ_i⟩`.
    pub omega: DMatrix<f64>,
    /// `‖W f^{(j)}(T) + μ − P^{(j)}‖` per datum.
    pub residuals: Vec<f64>,
}

/// Modified Gram–Schmidt with one re-orthogonalisation pass; vectors whose
/// remainder falls below `tol · max ‖f_j‖` are dropped.
pub fn orthonormal_basis(fs: &[GridFunction], tol: f64) -> Result<Vec<GridFunction>> {
    let scale = fs.iter().map(|f| f.l2_norm()).fold(0.0, f64::max);
    let mut basis: Vec<GridFunction> = Vec::new();
    if scale == 0.0 {
        return Ok(basis);
    }
    for f in fs {
        let mut v = f.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = l2_inner(&v, q)?;
                v = v.axpy(-c, q)?;
            }
        }
        let nv = v.l2_norm();
        if nv > tol * scale {
            basis.push(v.scale(1.0 / nv));
        }
    }
    Ok(basis)
}

/// Closed-form least-squares classifier for `h = identity`, MSE and
/// `h_w = 0`: `w(u, ·) = Σ_i w_i(u) σ_i` with `w(u) = A†P(u)`,
/// `A = (I − ẽẽᵀ)Ω`, and `μ(u) = mean_j (P^{(j)}(u) − (Ω w(u))_j)`.
pub fn stationary_classifier(f_t: &[GridFunction], targets: &[GridFunction]) -> Result<StationaryClassifier> {
    let n = f_t.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Shape(format!("{} terminal states but {} targets", n, targets.len())));
    }
    let y = f_t[0].grid().clone();
    let u = targets[0].grid().clone();
    let basis = orthonormal_basis(f_t, DEFAULT_RANK_TOL)?;
    let k = basis.len();
    let mut omega = DMatrix::zeros(n, k);
    for j in 0..n {
        for i in 0..k {
            omega[(j, i)] = l2_inner(&f_t[j], &basis[i])?;
        }
    }
    let proj = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let a = &proj * &omega;
    if n > 1 && numerical_rank(&a, DEFAULT_RANK_TOL) == 0 {
        let a_scale = omega.norm();
        if k == 0 || a.norm() <= DEFAULT_RANK_TOL * a_scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Degenerate("terminal states coincide; the classifier system is empty".into()));
        }
    }
    let a_pinv = pseudo_inverse(&a, DEFAULT_RANK_TOL);
    let mu_count = u.len();
    let mut pmat = DMatrix::zeros(n, mu_count);
    for j in 0..n {
        if !same_grid(targets[j].grid(), &u) {
            return Err(Error::GridMismatch("targets live on different grids".into()));
        }
        for c in 0..mu_count {
            pmat[(j, c)] = targets[j].values()[c];
        }
    }
    // columns of w_cols are w(u_c) ∈ R^K
    let w_cols = &a_pinv * &pmat;
    let fitted = &omega * &w_cols;
    let mut mu = vec![0.0; mu_count];
    for c in 0..mu_count {
        mu[c] = (0..n).map(|j| pmat[(j, c)] - fitted[(j, c)]).sum::<f64>() / n as f64;
    }
    let mut wk = DMatrix::zeros(mu_count, y.len());
    for c in 0..mu_count {
        for i in 0..k {
            let coeff = w_cols[(i, c)];
            for l in 0..y.len() {
                wk[(c, l)] += coeff * basis[i].values()[l];
            }
        }
    }
    let classifier = Classifier::new(Kernel::from_raw(u.clone(), y, wk), GridFunction::from_raw(u.clone(), mu))?;
    let mut residuals = Vec::with_capacity(n);
    for j in 0..n {
        let z = network_output(&f_t[j], &classifier)?;
        residuals.push(z.axpy(-1.0, &targets[j])?.l2_norm());
    }
    Ok(StationaryClassifier { classifier, basis, coefficients: w_cols.transpose(), omega, residuals })
}

/// Controls `(a, b_1, …, b_N)` of the reduced parametrisation
/// `b(y, z, t) = Σ_l b_l(y, t) f^{(l)}(z, t)`.
#[derive(Debug, Clone)]
pub struct ReducedControl {
    pub time: TimeGrid,
    pub a: Vec<GridFunction>,
    /// `b[l][s]`.
    pub b: Vec<Vec<GridFunction>>,
}

/// Explicit Euler for `∂_t f^{(j)} = σ(a − Σ_l b_l ⟨f^{(l)}, f^{(j)}⟩)`; the data
/// are coupled through the Gram matrix of the current states.
pub fn reduced_control_forward(f_init: &[GridFunction], ctrl: &ReducedControl, sigma: &Activation) -> Result<Trajectory> {
    let n = f_init.len();
    let time = ctrl.time;
    if n == 0 || ctrl.b.len() != n {
        return Err(Error::Shape(format!("{} data but {} coefficient paths", n, ctrl.b.len())));
    }
    if ctrl.a.len() != time.nodes() || ctrl.b.iter().any(|p| p.len() != time.nodes()) {
        return Err(Error::Shape("reduced control paths must cover every time node".into()));
    }
    let y: Arc<SpatialGrid> = f_init[0].grid().clone();
    let dt = time.dt();
    let mut states = vec![f_init.to_vec()];
    for s in 0..time.steps {
        let cur = &states[s];
        let gram = crate::grid::gram_matrix(cur)?;
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let mut xi = ctrl.a[s].values().to_vec();
            for l in 0..n {
                let c = gram[(l, j)];
                for (x, bl) in xi.iter_mut().zip(ctrl.b[l][s].values()) {
                    *x -= bl * c;
                }
            }
            let v: Vec<f64> = cur[j].values().iter().zip(&xi).map(|(f, x)| f + dt * sigma.eval(*x)).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { time_index: s + 1, datum: j });
            }
            next.push(GridFunction::from_raw(y.clone(), v));
        }
        states.push(next);
    }
    Trajectory::new(time, states)
}
