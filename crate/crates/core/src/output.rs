//! Final layer `Z = ∫ w f(T) dy + μ`, prediction functions and losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::apply_kernel_unchecked;
use crate::error::{Error, Result};
use crate::grid::{same_grid, GridFunction, Kernel, SpatialGrid};

/// Mass tolerance for target densities under the cross-entropy loss.
pub const DENSITY_TOL: f64 = 1e-8;
/// Minimal L² distance between two initial data.
pub const DISTINCT_TOL: f64 = 1e-12;

/// The classifiers `(w, μ)`: `w` on `U × Y`, `μ` on `U`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub w: Kernel,
    pub mu: GridFunction,
}

impl Classifier {
    pub fn new(w: Kernel, mu: GridFunction) -> Result<Self> {
        if !same_grid(w.row_grid(), mu.grid()) {
            return Err(Error::GridMismatch("classifier rows and bias live on different grids".into()));
        }
        Ok(Classifier { w, mu })
    }

    pub fn zeros(u: Arc<SpatialGrid>, y: Arc<SpatialGrid>) -> Self {
        Classifier { w: Kernel::zeros(u.clone(), y), mu: GridFunction::zeros(u) }
    }

    /// Discrete delta `w(u_k, y_l) = δ_kl / |Y_l|` on `U = Y` with `μ = 0`,
    /// so that `Z = f(T)`.
    pub fn delta(y: Arc<SpatialGrid>) -> Self {
        let n = y.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |k, l| if k == l { 1.0 / y.weight(l) } else { 0.0 });
        Classifier { w: Kernel::from_raw(y.clone(), y.clone(), m), mu: GridFunction::zeros(y) }
    }

    pub fn u_grid(&self) -> &Arc<SpatialGrid> {
        self.w.row_grid()
    }

    pub fn y_grid(&self) -> &Arc<SpatialGrid> {
        self.w.col_grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    #[default]
    Identity,
    Logistic,
    /// `exp(−Z) / ∫_U exp(−Z) du`.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    CrossEntropy,
}

/// Labelled training pairs `(f_I^{(j)}, P^{(j)})`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    init: Vec<GridFunction>,
    targets: Vec<GridFunction>,
}

impl TrainingSet {
    pub fn new(init: Vec<GridFunction>, targets: Vec<GridFunction>) -> Result<Self> {
        if init.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if init.len() != targets.len() {
            return Err(Error::Shape(format!("{} initial data but {} targets", init.len(), targets.len())));
        }
        let y = init[0].grid().clone();
        let u = targets[0].grid().clone();
        if init.iter().any(|f| !same_grid(f.grid(), &y)) || targets.iter().any(|p| !same_grid(p.grid(), &u)) {
            return Err(Error::GridMismatch("training data must share one grid per side".into()));
        }
        for (j, (f, p)) in init.iter().zip(&targets).enumerate() {
            if !f.is_finite() || !p.is_finite() {
                return Err(Error::NonFinite { time_index: 0, datum: j });
            }
        }
        for i in 0..init.len() {
            for j in (i + 1)..init.len() {
                if init[i].axpy(-1.0, &init[j])?.l2_norm() <= DISTINCT_TOL {
                    return Err(Error::DuplicateData(i, j));
                }
            }
        }
        Ok(TrainingSet { init, targets })
    }

    pub fn len(&self) -> usize {
        self.init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init.is_empty()
    }

    pub fn init(&self) -> &[GridFunction] {
        &self.init
    }

    pub fn targets(&self) -> &[GridFunction] {
        &self.targets
    }

    pub fn y_grid(&self) -> &Arc<SpatialGrid> {
        self.init[0].grid()
    }

    pub fn u_grid(&self) -> &Arc<SpatialGrid> {
        self.targets[0].grid()
    }

    /// Every target must be a probability density on `U`.
    pub fn check_densities(&self) -> Result<()> {
        self.targets.iter().enumerate().try_for_each(|(j, p)| check_density(j, p))
    }
}

fn check_density(j: usize, p: &GridFunction) -> Result<()> {
    let mass = p.integral();
    if p.values().iter().any(|v| *v < 0.0) || (mass - 1.0).abs() > DENSITY_TOL {
        return Err(Error::NotADensity { datum: j, mass });
    }
    Ok(())
}

/// `Z(u) = ∫_Y w(u, y) f(y, T) dy + μ(u)`.
pub fn network_output(f_t: &GridFunction, cls: &Classifier) -> Result<GridFunction> {
    if !same_grid(cls.y_grid(), f_t.grid()) {
        return Err(Error::GridMismatch("classifier columns and state live on different grids".into()));
    }
    let mut z = apply_kernel_unchecked(&cls.w, f_t);
    for (zk, mk) in z.values_mut().iter_mut().zip(cls.mu.values()) {
        *zk += mk;
    }
    Ok(z)
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `exp(−Z)` shifted by `min Z` and its integral; errors if the integral
/// vanishes or overflows.
fn shifted_exp(z: &GridFunction) -> Result<(Vec<f64>, f64, f64)> {
    let shift = z.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = z.values().iter().map(|v| (-(v - shift)).exp()).collect();
    let s: f64 = e.iter().zip(z.grid().weights()).map(|(x, w)| x * w).sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::SoftmaxUnderflow { shift });
    }
    Ok((e, s, shift))
}

pub fn predict(z: &GridFunction, h: Predictor) -> Result<GridFunction> {
    if !z.is_finite() {
        return Err(Error::InvalidArgument("network output is not finite".into()));
    }
    Ok(match h {
        Predictor::Identity => z.clone(),
        Predictor::Logistic => z.map(logistic),
        Predictor::Softmax => {
            let (e, s, _) = shifted_exp(z)?;
            GridFunction::from_raw(z.grid().clone(), e.into_iter().map(|x| x / s).collect())
        }
    })
}

/// `(1/2N) Σ_j ‖P_pre^{(j)} − P^{(j)}‖²`.
pub fn loss_mse(ppre: &[GridFunction], p: &[GridFunction]) -> Result<f64> {
    if ppre.len() != p.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} predictions but {} targets", ppre.len(), p.len())));
    }
    let mut acc = 0.0;
    for (x, y) in ppre.iter().zip(p) {
        acc += x.axpy(-1.0, y)?.l2_norm().powi(2);
    }
    Ok(acc / (2.0 * p.len() as f64))
}

/// `−ln softmax(Z)` evaluated as `Z − min Z + ln ∫ exp(−(Z − min Z))`.
fn neg_log_softmax(z: &GridFunction) -> Result<Vec<f64>> {
    let (_, s, shift) = shifted_exp(z)?;
    let lse = s.ln();
    Ok(z.values().iter().map(|v| v - shift + lse).collect())
}

/// `−(1/N) Σ_j ∫_U ln(softmax(Z^{(j)})) P^{(j)} du`.
pub fn loss_cross_entropy(z: &[GridFunction], p: &[GridFunction]) -> Result<f64> {
    if z.len() != p.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} outputs but {} targets", z.len(), p.len())));
    }
    let mut acc = 0.0;
    for (j, (zj, pj)) in z.iter().zip(p).enumerate() {
        check_density(j, pj)?;
        if !same_grid(zj.grid(), pj.grid()) {
            return Err(Error::GridMismatch("output and target live on different grids".into()));
        }
        let nls = neg_log_softmax(zj)?;
        acc += nls.iter().zip(pj.values()).zip(pj.grid().weights()).map(|((a, b), w)| a * b * w).sum::<f64>();
    }
    Ok(acc / p.len() as f64)
}

/// The cross-entropy floor `J_min = −(1/N) Σ_j ∫ P^{(j)} ln P^{(j)} du`
/// (with `0 ln 0 = 0`).
pub fn cross_entropy_floor(p: &[GridFunction]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    let mut acc = 0.0;
    for (j, pj) in p.iter().enumerate() {
        check_density(j, pj)?;
        acc -= pj.values().iter().zip(pj.grid().weights()).map(|(v, w)| if *v > 0.0 { v * v.ln() * w } else { 0.0 }).sum::<f64>();
    }
    Ok(acc / p.len() as f64)
}

/// Per-datum loss contribution and its L²(U)-gradient with respect to `Z`
/// (the function `e` that seeds the adjoint: `r(T) = ∫_U e(u) w(u, ·) du`).
///
/// For MSE this is `(P_pre − P) h′(Z)` for the local predictors and the
/// softmax Jacobian applied to `P_pre − P` otherwise; for cross-entropy it is
/// `P − P_pre ∫P`.
pub fn output_sensitivity(z: &GridFunction, target: &GridFunction, h: Predictor, loss: LossKind) -> Result<(f64, GridFunction)> {
    if !same_grid(z.grid(), target.grid()) {
        return Err(Error::GridMismatch("output and target live on different grids".into()));
    }
    let w = z.grid().weights();
    let grid = z.grid().clone();
    match loss {
        LossKind::Mse => {
            let ppre = predict(z, h)?;
            let d: Vec<f64> = ppre.values().iter().zip(target.values()).map(|(a, b)| a - b).collect();
            let val = 0.5 * d.iter().zip(w).map(|(x, wk)| x * x * wk).sum::<f64>();
            let e = match h {
                Predictor::Identity => d,
                Predictor::Logistic => d.iter().zip(ppre.values()).map(|(dk, s)| dk * s * (1.0 - s)).collect(),
                Predictor::Softmax => {
                    let p = ppre.values();
                    let dp: f64 = d.iter().zip(p).zip(w).map(|((a, b), c)| a * b * c).sum();
                    d.iter().zip(p).map(|(dk, pk)| pk * (dp - dk)).collect()
                }
            };
            Ok((val, GridFunction::from_raw(grid, e)))
        }
        LossKind::CrossEntropy => {
            let nls = neg_log_softmax(z)?;
            let val: f64 = nls.iter().zip(target.values()).zip(w).map(|((a, b), c)| a * b * c).sum();
            let mass = target.integral();
            let ppre = predict(z, Predictor::Softmax)?;
            let e = target.values().iter().zip(ppre.values()).map(|(pk, qk)| pk - mass * qk).collect();
            Ok((val, GridFunction::from_raw(grid, e)))
        }
    }
}

/// Loss of the terminal states under the given classifier.
pub fn evaluate_loss(f_t: &[GridFunction], cls: &Classifier, h: Predictor, loss: LossKind, targets: &[GridFunction]) -> Result<f64> {
    if f_t.len() != targets.len() {
        return Err(Error::Shape(format!("{} states but {} targets", f_t.len(), targets.len())));
    }
    let z: Vec<GridFunction> = f_t.iter().map(|f| network_output(f, cls)).collect::<Result<_>>()?;
    match loss {
        LossKind::Mse => {
            let ppre: Vec<GridFunction> = z.iter().map(|zj| predict(zj, h)).collect::<Result<_>>()?;
            loss_mse(&ppre, targets)
        }
        LossKind::CrossEntropy => loss_cross_entropy(&z, targets),
    }
}
