//! Box-constrained optimal control via the minimum principle: the control
//! Hamiltonian, the pointwise minimisation of `T_{F,r}`, the single-datum
//! bang-bang law and relaxed successive approximations for the coupled
//! forward/backward system.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::adjoint::{adjoint_terminal, solve_backward, Model};
use crate::dynamics::{preactivation, solve_forward_euler, ControlPath, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{same_grid, GridFunction, Kernel};
use crate::output::{Classifier, TrainingSet};

/// Admissible control values `[a_m, a_M] × [b_m, b_M]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl BoxSet {
    pub fn new(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> Result<Self> {
        let b = BoxSet { a_min, a_max, b_min, b_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.a_min, self.a_max, self.b_min, self.b_max].iter().all(|v| v.is_finite())
            && self.a_min < self.a_max
            && self.b_min < self.b_max;
        if !ok {
            return Err(Error::InvalidArgument(format!("box {self:?} has empty interior")));
        }
        Ok(())
    }

    fn clamp_a(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }

    fn clamp_b(&self, b: f64) -> f64 {
        b.clamp(self.b_min, self.b_max)
    }

    pub fn contains(&self, a: f64, b: &[f64]) -> bool {
        (self.a_min..=self.a_max).contains(&a) && b.iter().all(|v| (self.b_min..=self.b_max).contains(v))
    }

    /// Distance of `a` to the nearer endpoint of `[a_m, a_M]`.
    pub fn a_corner_distance(&self, a: f64) -> f64 {
        (a - self.a_min).abs().min((a - self.a_max).abs())
    }

    pub fn b_corner_distance(&self, b: f64) -> f64 {
        (b - self.b_min).abs().min((b - self.b_max).abs())
    }
}

/// `H(F, r, a, b) = Σ_j ∫_Y σ(a − B_b f^{(j)}) r^{(j)} dy`.
pub fn hamiltonian(f: &[GridFunction], r: &[GridFunction], a: &GridFunction, b: &Kernel, sigma: &Activation) -> Result<f64> {
    if f.len() != r.len() || f.is_empty() {
        return Err(Error::Shape(format!("{} states but {} co-states", f.len(), r.len())));
    }
    let g = a.grid();
    if f.iter().chain(r).any(|x| !same_grid(x.grid(), g)) || !same_grid(b.row_grid(), g) || !same_grid(b.col_grid(), g) {
        return Err(Error::GridMismatch("Hamiltonian inputs live on different grids".into()));
    }
    let w = g.weights();
    let mut h = 0.0;
    for (fj, rj) in f.iter().zip(r) {
        let xi = preactivation(a, b, fj);
        h += xi.values().iter().zip(rj.values()).zip(w).map(|((x, rv), wk)| sigma.eval(*x) * rv * wk).sum::<f64>();
    }
    Ok(h)
}

/// Minimiser of `T_{F,r}` at one label `y`, with the tie-break flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PointControl {
    pub a: f64,
    /// `b(y, z_l)` for every cell `z_l`.
    pub b: Vec<f64>,
    pub value: f64,
    /// `r = 0`: every admissible value is optimal; the lower corner is used.
    pub a_flagged: bool,
    /// `f(z) = 0` for all data: `b(z)` does not enter; the lower bound is used.
    pub b_flagged: Vec<bool>,
}

/// `T_{F,r}(a, b) = Σ_j σ(a − ⟨b, f_j⟩) r_j`.
pub fn t_value(f: &[GridFunction], r: &[f64], a: f64, b: &[f64], sigma: &Activation) -> f64 {
    let w = f[0].grid().weights();
    f.iter()
        .zip(r)
        .map(|(fj, rj)| {
            let p: f64 = b.iter().zip(fj.values()).zip(w).map(|((bz, fz), wz)| bz * fz * wz).sum();
            sigma.eval(a - p) * rj
        })
        .sum()
}

/// Value and `L²` gradient `(Σ λ_j, −Σ λ_j f_j)` with `λ_j = σ′(a − ⟨b, f_j⟩) r_j`.
fn t_grad(f: &[GridFunction], r: &[f64], a: f64, b: &[f64], sigma: &Activation) -> (f64, f64, Vec<f64>) {
    let w = f[0].grid().weights();
    let mut val = 0.0;
    let mut ga = 0.0;
    let mut gb = vec![0.0; b.len()];
    for (fj, rj) in f.iter().zip(r) {
        let p: f64 = b.iter().zip(fj.values()).zip(w).map(|((bz, fz), wz)| bz * fz * wz).sum();
        val += sigma.eval(a - p) * rj;
        let lam = sigma.deriv(a - p) * rj;
        ga += lam;
        for (g, fz) in gb.iter_mut().zip(fj.values()) {
            *g -= lam * fz;
        }
    }
    (val, ga, gb)
}

const PG_MAX_ITER: usize = 500;
const ARMIJO: f64 = 1e-4;

/// Projected gradient descent with Armijo backtracking from one start.
fn projected_descent(f: &[GridFunction], r: &[f64], bx: &BoxSet, sigma: &Activation, mut a: f64, mut b: Vec<f64>) -> (f64, Vec<f64>, f64) {
    let w = f[0].grid().weights();
    let (mut val, mut ga, mut gb) = t_grad(f, r, a, &b, sigma);
    let gmax = gb.iter().fold(ga.abs(), |m, g| m.max(g.abs()));
    let mut tau = if gmax > 0.0 { (bx.a_max - bx.a_min).max(bx.b_max - bx.b_min) / gmax } else { 1.0 };
    for _ in 0..PG_MAX_ITER {
        let mut accepted = false;
        for _ in 0..60 {
            let na = bx.clamp_a(a - tau * ga);
            let nb: Vec<f64> = b.iter().zip(&gb).map(|(bz, g)| bx.clamp_b(bz - tau * g)).collect();
            let dec = ga * (a - na) + b.iter().zip(&nb).zip(&gb).zip(w).map(|(((x, y), g), wz)| g * (x - y) * wz).sum::<f64>();
            if dec <= 1e-16 * (1.0 + val.abs()) {
                break;
            }
            let nv = t_value(f, r, na, &nb, sigma);
            if nv <= val - ARMIJO * dec {
                a = na;
                b = nb;
                accepted = true;
                break;
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
        (val, ga, gb) = t_grad(f, r, a, &b, sigma);
        tau *= 2.0;
    }
    (a, b, val)
}

/// Coordinate-wise snapping to the bounds whenever that strictly lowers `T`.
fn vertex_polish(f: &[GridFunction], r: &[f64], bx: &BoxSet, sigma: &Activation, a: &mut f64, b: &mut [f64], val: &mut f64) {
    for _ in 0..5 {
        let mut changed = false;
        for cand in [bx.a_min, bx.a_max] {
            let v = t_value(f, r, cand, b, sigma);
            if v < *val {
                *a = cand;
                *val = v;
                changed = true;
            }
        }
        for z in 0..b.len() {
            for cand in [bx.b_min, bx.b_max] {
                let keep = b[z];
                b[z] = cand;
                let v = t_value(f, r, *a, b, sigma);
                if v < *val {
                    *val = v;
                    changed = true;
                } else {
                    b[z] = keep;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Number of random starts in [`argmin_t`].
pub const RANDOM_STARTS: usize = 4;

/// Minimises `T_{F,r}` over `[a_m, a_M] × [b_m, b_M]^{cells}` by projected
/// gradient descent from the sign-pattern vertices of every datum, the four
/// box corners with constant `b`, and [`RANDOM_STARTS`] random points; ties go
/// to the earliest start.
pub fn argmin_t(f: &[GridFunction], r: &[f64], bx: &BoxSet, sigma: &Activation, seed: u64) -> Result<PointControl> {
    if f.is_empty() || f.len() != r.len() {
        return Err(Error::Shape(format!("{} states but {} co-state values", f.len(), r.len())));
    }
    let m = f[0].len();
    let b_flagged: Vec<bool> = (0..m).map(|z| f.iter().all(|fj| fj.values()[z] == 0.0)).collect();
    if r.iter().all(|v| *v == 0.0) {
        let b = vec![bx.b_min; m];
        let value = t_value(f, r, bx.a_min, &b, sigma);
        return Ok(PointControl { a: bx.a_min, b, value, a_flagged: true, b_flagged: vec![true; m] });
    }

    let mut starts: Vec<(f64, Vec<f64>)> = Vec::with_capacity(f.len() + 4 + RANDOM_STARTS);
    for (fj, rj) in f.iter().zip(r) {
        if *rj != 0.0 {
            let (a, b) = bang_bang_point(fj.values(), *rj, bx);
            starts.push((a, b));
        }
    }
    for a in [bx.a_min, bx.a_max] {
        for bv in [bx.b_min, bx.b_max] {
            starts.push((a, vec![bv; m]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_STARTS {
        let a = rng.gen_range(bx.a_min..=bx.a_max);
        let b = (0..m).map(|_| rng.gen_range(bx.b_min..=bx.b_max)).collect();
        starts.push((a, b));
    }

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for (a0, b0) in starts {
        let (mut a, mut b, mut val) = projected_descent(f, r, bx, sigma, a0, b0);
        vertex_polish(f, r, bx, sigma, &mut a, &mut b, &mut val);
        if best.as_ref().is_none_or(|(_, _, bv)| val < *bv) {
            best = Some((a, b, val));
        }
    }
    let (a, mut b, _) = best.expect("at least one start");
    for (bz, flag) in b.iter_mut().zip(&b_flagged) {
        if *flag {
            *bz = bx.b_min;
        }
    }
    let value = t_value(f, r, a, &b, sigma);
    Ok(PointControl { a, b, value, a_flagged: false, b_flagged })
}

fn bang_bang_point(f: &[f64], r: f64, bx: &BoxSet) -> (f64, Vec<f64>) {
    let a = if r > 0.0 {
        bx.a_min
    } else if r < 0.0 {
        bx.a_max
    } else {
        bx.a_min
    };
    let b = f
        .iter()
        .map(|fz| {
            let s = r * fz;
            if s > 0.0 {
                bx.b_max
            } else {
                bx.b_min
            }
        })
        .collect();
    (a, b)
}

/// Single-datum optimal control:
/// `ā = a_m 1_{r>0} + a_M 1_{r<0}`, `b̄ = b_m 1_{r⊗f<0} + b_M 1_{r⊗f>0}`,
/// with the lower bound chosen (and flagged) where `r = 0` or `f = 0`.
#[derive(Debug, Clone)]
pub struct BangBang {
    pub a: GridFunction,
    pub b: Kernel,
    pub a_flagged: Vec<bool>,
    pub b_flagged: Vec<bool>,
}

pub fn bang_bang_control(f: &GridFunction, r: &GridFunction, bx: &BoxSet) -> Result<BangBang> {
    if !same_grid(f.grid(), r.grid()) {
        return Err(Error::GridMismatch("state and co-state live on different grids".into()));
    }
    let g = f.grid().clone();
    let m = g.len();
    let mut a = vec![0.0; m];
    let mut bm = DMatrix::zeros(m, m);
    for k in 0..m {
        let (ak, bk) = bang_bang_point(f.values(), r.values()[k], bx);
        a[k] = ak;
        for l in 0..m {
            bm[(k, l)] = bk[l];
        }
    }
    Ok(BangBang {
        a: GridFunction::from_raw(g.clone(), a),
        b: Kernel::from_raw(g.clone(), g, bm),
        a_flagged: r.values().iter().map(|v| *v == 0.0).collect(),
        b_flagged: f.values().iter().map(|v| *v == 0.0).collect(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MsaOptions {
    pub sweeps: usize,
    #[serde(default = "default_relax")]
    pub relax: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_relax() -> f64 {
    0.5
}

fn default_tol() -> f64 {
    1e-6
}

impl MsaOptions {
    pub fn new(sweeps: usize) -> Self {
        MsaOptions { sweeps, relax: 0.5, tol: 1e-6, seed: 0 }
    }
}

/// Loss increases in a row that count as divergence.
pub const DIVERGENCE_RUN: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub loss: f64,
    pub control_change: f64,
    pub hamiltonian_span: f64,
    pub boundary_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PontryaginState {
    pub ctrl: ControlPath,
    pub forward: Trajectory,
    pub co: Trajectory,
    /// `H(F(t_s), r(t_{s+1}), a_s, b_s)` for `s < S`, one row per sweep.
    pub hamiltonian_history: Vec<Vec<f64>>,
    pub sweeps: Vec<SweepRecord>,
    pub converged: bool,
    /// `(s, k)` where the last argmin was arbitrary because `r(y_k) = 0`.
    pub flagged_a: Vec<(usize, usize)>,
}

impl PontryaginState {
    pub fn hamiltonian(&self) -> &[f64] {
        self.hamiltonian_history.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// `max_t H − min_t H` of the last recorded sweep.
    pub fn hamiltonian_span(&self) -> f64 {
        span(self.hamiltonian())
    }
}

fn span(h: &[f64]) -> f64 {
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    if h.is_empty() {
        0.0
    } else {
        max - min
    }
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of control values (nodes `0..S`) within `tol` of a box endpoint.
pub fn boundary_fraction(ctrl: &ControlPath, bx: &BoxSet, tol: f64) -> f64 {
    let steps = ctrl.time().steps;
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in 0..steps {
        for a in ctrl.a(s).values() {
            total += 1;
            hit += (bx.a_corner_distance(*a) <= tol) as usize;
        }
        for b in ctrl.b(s).values().iter() {
            total += 1;
            hit += (bx.b_corner_distance(*b) <= tol) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

fn hamiltonian_profile(forward: &Trajectory, co: &Trajectory, ctrl: &ControlPath, sigma: &Activation) -> Result<Vec<f64>> {
    (0..ctrl.time().steps).map(|s| hamiltonian(forward.at(s), co.at(s + 1), ctrl.a(s), ctrl.b(s), sigma)).collect()
}

/// Per-node point controls and the `(s, k)` cells where the `a`-minimiser is undetermined.
type ArgminPath = (Vec<Vec<PointControl>>, Vec<(usize, usize)>);

/// Pointwise argmin of `T_{F(t_s), r(t_{s+1})}` at every `(y_k, t_s)`.
fn argmin_path(
    forward: &Trajectory,
    co: &Trajectory,
    ctrl: &ControlPath,
    bx: &BoxSet,
    sigma: &Activation,
    seed: u64,
) -> Result<ArgminPath> {
    let steps = ctrl.time().steps;
    let m = ctrl.grid().len();
    let n = forward.n_data();
    let cells: Vec<(usize, usize)> = (0..steps).flat_map(|s| (0..m).map(move |k| (s, k))).collect();
    let pts: Result<Vec<PointControl>> = cells
        .par_iter()
        .map(|&(s, k)| {
            let r: Vec<f64> = (0..n).map(|j| co.state(s + 1, j).values()[k]).collect();
            argmin_t(forward.at(s), &r, bx, sigma, mix_seed(seed, s as u64, k as u64))
        })
        .collect();
    let pts = pts?;
    let flagged = cells.iter().zip(&pts).filter(|(_, p)| p.a_flagged).map(|(c, _)| *c).collect();
    let mut rows: Vec<Vec<PointControl>> = Vec::with_capacity(steps);
    let mut it = pts.into_iter();
    for _ in 0..steps {
        rows.push(it.by_ref().take(m).collect());
    }
    Ok((rows, flagged))
}

/// Relaxed method of successive approximations: forward solve, backward
/// solve, then `ctrl ← (1 − relax)·ctrl + relax·argmin T` at every `(y, t)`,
/// until the sup-norm control change is at most `opts.tol`.
pub fn solve_msa(
    data: &TrainingSet,
    cls: &Classifier,
    model: &Model,
    bx: &BoxSet,
    init: &ControlPath,
    opts: &MsaOptions,
) -> Result<PontryaginState> {
    bx.validate()?;
    if !(opts.relax > 0.0 && opts.relax <= 1.0) {
        return Err(Error::InvalidArgument(format!("relaxation {} outside (0, 1]", opts.relax)));
    }
    let sigma = model.sigma;
    let mut ctrl = init.clone();
    let steps = ctrl.time().steps;
    let grid = ctrl.grid().clone();
    let m = grid.len();
    let mut history = Vec::new();
    let mut records: Vec<SweepRecord> = Vec::new();
    let mut increases = 0usize;
    let mut flagged_a = Vec::new();
    let mut converged = false;

    let solve = |c: &ControlPath| -> Result<(Trajectory, Trajectory, f64)> {
        let forward = solve_forward_euler(data.init(), c, &sigma)?;
        let term = adjoint_terminal(forward.terminal(), cls, model, data.targets())?;
        let co = solve_backward(&forward, c, &sigma, &term.omega)?;
        Ok((forward, co, term.loss))
    };
    let (mut forward, mut co, mut prev_loss) = solve(&ctrl)?;

    for sweep in 1..=opts.sweeps.max(1) {
        let (rows, flags) = argmin_path(&forward, &co, &ctrl, bx, &sigma, mix_seed(opts.seed, sweep as u64, 0))?;
        flagged_a = flags;
        let mut next = ctrl.clone();
        for (s, row) in rows.iter().enumerate() {
            let mut a = ctrl.a(s).values().to_vec();
            let mut b = ctrl.b(s).values().clone();
            for (k, p) in row.iter().enumerate() {
                a[k] = (1.0 - opts.relax) * a[k] + opts.relax * p.a;
                for l in 0..m {
                    b[(k, l)] = (1.0 - opts.relax) * b[(k, l)] + opts.relax * p.b[l];
                }
            }
            *next.a_mut(s) = GridFunction::from_raw(grid.clone(), a);
            *next.b_mut(s) = Kernel::from_raw(grid.clone(), grid.clone(), b);
        }
        *next.a_mut(steps) = next.a(steps - 1).clone();
        *next.b_mut(steps) = next.b(steps - 1).clone();

        let change = next.sup_distance(&ctrl);
        ctrl = next;
        let loss;
        (forward, co, loss) = solve(&ctrl)?;
        let h = hamiltonian_profile(&forward, &co, &ctrl, &sigma)?;
        records.push(SweepRecord {
            sweep,
            loss,
            control_change: change,
            hamiltonian_span: span(&h),
            boundary_fraction: boundary_fraction(&ctrl, bx, 1e-9),
        });
        history.push(h);

        if loss > prev_loss {
            increases += 1;
            if increases >= DIVERGENCE_RUN {
                return Err(Error::Divergence { sweeps: sweep, history: records.iter().map(|r| r.loss).collect() });
            }
        } else {
            increases = 0;
        }
        prev_loss = loss;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(PontryaginState { ctrl, forward, co, hamiltonian_history: history, sweeps: records, converged, flagged_a })
}
