//! Fast self-checks behind `deepide check`: each suite runs a handful of
//! random instances of an invariant and reports its worst metric.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::activation::Activation;
use crate::adjoint::{evaluate, evaluate_loss_only, stationary_classifier, Model};
use crate::controllability::{gramian_stationary, stationary_lower_bound};
use crate::dynamics::{check_apriori_bound, solve_forward_euler, ControlPath, TimeGrid};
use crate::error::Result;
use crate::grid::{GridFunction, Kernel, SpatialGrid};
use crate::hjb::{hjb_hamiltonian, hjb_hamiltonian_single};
use crate::output::{cross_entropy_floor, loss_cross_entropy, Classifier, TrainingSet};
use crate::pontryagin::{argmin_t, bang_bang_control, t_value, BoxSet};

pub fn random_function(g: &Arc<SpatialGrid>, rng: &mut impl Rng, scale: f64) -> GridFunction {
    GridFunction::from_raw(g.clone(), (0..g.len()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
}

pub fn random_kernel(rows: &Arc<SpatialGrid>, cols: &Arc<SpatialGrid>, rng: &mut impl Rng, scale: f64) -> Kernel {
    Kernel::from_raw(rows.clone(), cols.clone(), DMatrix::from_fn(rows.len(), cols.len(), |_, _| scale * rng.gen_range(-1.0..1.0)))
}

/// Independent uniform entries at every node.
pub fn random_control(g: &Arc<SpatialGrid>, time: TimeGrid, rng: &mut impl Rng, scale: f64) -> ControlPath {
    let a = (0..time.nodes()).map(|_| random_function(g, rng, scale)).collect();
    let b = (0..time.nodes()).map(|_| random_kernel(g, g, rng, scale)).collect();
    ControlPath::new(time, a, b).expect("consistent shapes")
}

/// `ctrl + h · dir` at every node.
pub fn shift_control(ctrl: &ControlPath, dir: &ControlPath, h: f64) -> Result<ControlPath> {
    let mut c = ctrl.clone();
    for s in 0..ctrl.time().nodes() {
        *c.a_mut(s) = ctrl.a(s).axpy(h, dir.a(s))?;
        *c.b_mut(s) = ctrl.b(s).axpy(h, dir.b(s))?;
    }
    Ok(c)
}

pub fn shift_classifier(cls: &Classifier, dir: &Classifier, h: f64) -> Result<Classifier> {
    Classifier::new(cls.w.axpy(h, &dir.w)?, cls.mu.axpy(h, &dir.mu)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub threshold: f64,
}

fn result(name: &'static str, metric: f64, threshold: f64, passed: bool) -> CheckResult {
    CheckResult { name, passed, metric, threshold }
}

fn gradient_fd(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(6)?.into_shared();
    let time = TimeGrid::new(1.0, 8)?;
    let model = Model::regression(Activation::sigmoid());
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let ctrl = random_control(&y, time, rng, 1.0);
        let cls = Classifier::new(random_kernel(&y, &y, rng, 1.0), random_function(&y, rng, 1.0))?;
        let init = (0..2).map(|_| random_function(&y, rng, 1.0)).collect();
        let targets = (0..2).map(|_| random_function(&y, rng, 1.0)).collect();
        let data = TrainingSet::new(init, targets)?;
        let run = evaluate(&data, &ctrl, &cls, &model)?;
        let dc = random_control(&y, time, rng, 1.0);
        let dk = Classifier::new(random_kernel(&y, &y, rng, 1.0), random_function(&y, rng, 1.0))?;
        let h = 1e-5;
        let jp = evaluate_loss_only(&data, &shift_control(&ctrl, &dc, h)?, &shift_classifier(&cls, &dk, h)?, &model)?;
        let jm = evaluate_loss_only(&data, &shift_control(&ctrl, &dc, -h)?, &shift_classifier(&cls, &dk, -h)?, &model)?;
        let fd = (jp - jm) / (2.0 * h);
        let an = run.gradient.directional(&dc, &dk);
        worst = worst.max((fd - an).abs() / an.abs().max(1e-8));
    }
    Ok(result("gradient_finite_differences", worst, 1e-4, worst <= 1e-4))
}

fn euler_order(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(6)?.into_shared();
    let a0 = random_function(&y, rng, 1.0);
    let b0 = random_kernel(&y, &y, rng, 1.0);
    let a1 = random_function(&y, rng, 1.0);
    let f0 = vec![random_function(&y, rng, 1.0)];
    let sig = Activation::tanh();
    let solve = |steps: usize| -> Result<GridFunction> {
        let time = TimeGrid::new(1.0, steps)?;
        let ctrl = ControlPath::from_fns(time, y.clone(), |_, _| 0.0, |_, _, _| 0.0);
        let mut c = ctrl;
        for s in 0..time.nodes() {
            let t = time.time(s);
            *c.a_mut(s) = a0.axpy(t.sin(), &a1)?;
            *c.b_mut(s) = b0.clone();
        }
        Ok(solve_forward_euler(&f0, &c, &sig)?.terminal()[0].clone())
    };
    let reference = solve(2048)?;
    let e1 = solve(32)?.axpy(-1.0, &reference)?.l2_norm();
    let e2 = solve(64)?.axpy(-1.0, &reference)?.l2_norm();
    let order = (e1 / e2).log2();
    Ok(result("euler_order", order, 1.0, (0.8..=1.2).contains(&order)))
}

fn apriori(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(5)?.into_shared();
    let mut worst = f64::INFINITY;
    for i in 0..10 {
        let sig = [Activation::sigmoid(), Activation::tanh(), Activation::smoothed_relu()][i % 3];
        let time = TimeGrid::new(1.0, 10)?;
        let ctrl = random_control(&y, time, rng, 2.0);
        let f0: Vec<_> = (0..2).map(|_| random_function(&y, rng, 1.0)).collect();
        let traj = solve_forward_euler(&f0, &ctrl, &sig)?;
        let r = check_apriori_bound(&traj, &ctrl, &sig)?;
        worst = worst.min(r.growth_margin).min(r.continuity_margin);
    }
    Ok(result("apriori_bounds", worst, -1e-8, worst >= -1e-8))
}

fn stationary(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(8)?.into_shared();
    let u = SpatialGrid::unit_interval(3)?.into_shared();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let f: Vec<_> = (0..3).map(|_| random_function(&y, rng, 1.0)).collect();
        let p: Vec<_> = (0..3).map(|_| random_function(&u, rng, 1.0)).collect();
        let sc = stationary_classifier(&f, &p)?;
        worst = sc.residuals.iter().fold(worst, |m, r| m.max(*r));
    }
    Ok(result("stationary_classifier", worst, 1e-8, worst <= 1e-8))
}

fn bang_bang(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(4)?.into_shared();
    let bx = BoxSet::new(-1.0, 2.0, -0.5, 1.5)?;
    let sig = Activation::sigmoid();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let f = random_function(&y, rng, 1.0);
        let r: f64 = rng.gen_range(-1.0..1.0);
        let rf = GridFunction::constant(y.clone(), r);
        let closed = bang_bang_control(&f, &rf, &bx)?;
        let pc = argmin_t(std::slice::from_ref(&f), &[r], &bx, &sig, i)?;
        let row: Vec<f64> = closed.b.values().row(0).iter().copied().collect();
        let cv = t_value(std::slice::from_ref(&f), &[r], closed.a.values()[0], &row, &sig);
        worst = worst.max((cv - pc.value).abs());
    }
    Ok(result("bang_bang_closed_form", worst, 1e-9, worst <= 1e-9))
}

fn gramian(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(5)?.into_shared();
    let sig = Activation::tanh();
    let mut worst = f64::INFINITY;
    for _ in 0..5 {
        let f = random_function(&y, rng, 1.0);
        let b = random_kernel(&y, &y, rng, 1.0);
        let g = gramian_stationary(&f, &b, None, &sig, 1.0, 64)?;
        let bound = stationary_lower_bound(&f, &b, &sig, 1.0);
        worst = worst.min(g.min_eigenvalue - bound);
    }
    Ok(result("gramian_coercivity", worst, 0.0, worst > 0.0))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let u = SpatialGrid::unit_interval(6)?.into_shared();
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let p = GridFunction::from_raw(u.clone(), (0..6).map(|_| rng.gen_range(0.05..1.0)).collect());
        let p = p.scale(1.0 / p.integral());
        let z = random_function(&u, rng, 3.0);
        let gap = loss_cross_entropy(&[z], std::slice::from_ref(&p))? - cross_entropy_floor(&[p])?;
        worst = worst.min(gap);
    }
    Ok(result("cross_entropy_floor", worst, -1e-10, worst >= -1e-10))
}

fn hjb(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let y = SpatialGrid::unit_interval(4)?.into_shared();
    let bx = BoxSet::new(-1.0, 1.0, -1.0, 1.0)?;
    let sig = Activation::sigmoid();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let v = random_function(&y, rng, 1.0);
        let r = random_function(&y, rng, 1.0);
        let h = hjb_hamiltonian(std::slice::from_ref(&v), std::slice::from_ref(&r), &bx, &sig, i)?.value;
        worst = worst.max((h - hjb_hamiltonian_single(&v, &r, &bx, &sig)?).abs());
    }
    Ok(result("hjb_closed_form", worst, 1e-8, worst <= 1e-8))
}

/// Runs every suite with generators derived from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    type Suite = fn(&mut ChaCha8Rng) -> Result<CheckResult>;
    let suites: [Suite; 8] = [gradient_fd, euler_order, apriori, stationary, bang_bang, gramian, cross_entropy, hjb];
    suites.iter().enumerate().map(|(i, f)| f(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))).collect()
}
