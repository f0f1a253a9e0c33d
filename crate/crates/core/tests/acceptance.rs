//! Acceptance suite: one PASS/FAIL line per criterion, printed straight to the
//! process stdout so it survives test-output capture.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepide::activation::Activation;
use deepide::adjoint::{
    evaluate, evaluate_loss_only, stationarity_residuals, stationary_classifier, train_gradient_flow, Model, TrainOptions,
};
use deepide::checks::{random_control, random_function, random_kernel, shift_classifier, shift_control};
use deepide::controllability::{gramian_stationary, gramian_trajectory, multistate_obstruction, stationary_lower_bound};
use deepide::datasets::regression_toy;
use deepide::dynamics::{check_apriori_bound, check_difference_bound, solve_forward_euler, solve_forward_picard, ControlPath, TimeGrid};
use deepide::grid::{GridFunction, SpatialGrid};
use deepide::hjb::{estimate_value, hjb_hamiltonian, hjb_hamiltonian_single, integrate_feedback, value_gradient_fd, ValueProblem};
use deepide::output::{cross_entropy_floor, loss_cross_entropy, Classifier, TrainingSet};
use deepide::pontryagin::{argmin_t, bang_bang_control, solve_msa, t_value, BoxSet, MsaOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn grid(n: usize) -> Arc<SpatialGrid> {
    SpatialGrid::unit_interval(n).unwrap().into_shared()
}

fn zero_like(ctrl: &ControlPath) -> ControlPath {
    ControlPath::zeros(*ctrl.time(), ctrl.grid().clone())
}

fn zero_classifier(cls: &Classifier) -> Classifier {
    Classifier::zeros(cls.u_grid().clone(), cls.y_grid().clone())
}

// 1 ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let y = grid(16);
    let u = grid(5);
    let time = TimeGrid::new(1.0, 16).unwrap();
    let model = Model::regression(Activation::sigmoid());
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for _ in 0..5 {
        let ctrl = random_control(&y, time, &mut rng, 1.0);
        let cls = Classifier::new(random_kernel(&u, &y, &mut rng, 1.0), random_function(&u, &mut rng, 0.5)).unwrap();
        let init = (0..3).map(|_| random_function(&y, &mut rng, 1.0)).collect();
        let targets = (0..3).map(|_| random_function(&u, &mut rng, 1.0)).collect();
        let data = TrainingSet::new(init, targets).unwrap();
        let run = evaluate(&data, &ctrl, &cls, &model).unwrap();
        for (c, w) in worst.iter_mut().enumerate() {
            for _ in 0..20 {
                let mut dc = zero_like(&ctrl);
                let mut dk = zero_classifier(&cls);
                match c {
                    0 => (0..time.steps).for_each(|s| *dc.a_mut(s) = random_function(&y, &mut rng, 1.0)),
                    1 => (0..time.steps).for_each(|s| *dc.b_mut(s) = random_kernel(&y, &y, &mut rng, 1.0)),
                    2 => dk.w = random_kernel(&u, &y, &mut rng, 1.0),
                    _ => dk.mu = random_function(&u, &mut rng, 1.0),
                }
                let h = 1e-5;
                let jp =
                    evaluate_loss_only(&data, &shift_control(&ctrl, &dc, h).unwrap(), &shift_classifier(&cls, &dk, h).unwrap(), &model)
                        .unwrap();
                let jm =
                    evaluate_loss_only(&data, &shift_control(&ctrl, &dc, -h).unwrap(), &shift_classifier(&cls, &dk, -h).unwrap(), &model)
                        .unwrap();
                let fd = (jp - jm) / (2.0 * h);
                let an = run.gradient.directional(&dc, &dk);
                *w = w.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-12));
            }
        }
    }
    let pass = worst.iter().all(|w| *w <= 1e-4);
    outcome(pass, format!("max rel err a={:.1e} b={:.1e} w={:.1e} mu={:.1e} (tol 1e-4)", worst[0], worst[1], worst[2], worst[3]))
}

// 2 ---------------------------------------------------------------------------

fn forward_solver_order() -> Outcome {
    let y = grid(16);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let a0 = random_function(&y, &mut rng, 1.0);
    let a1 = random_function(&y, &mut rng, 1.0);
    let b0 = random_kernel(&y, &y, &mut rng, 0.5);
    let f0 = vec![random_function(&y, &mut rng, 1.0), random_function(&y, &mut rng, 1.0)];
    let sig = Activation::sigmoid();
    let ctrl_for = |steps: usize| {
        let time = TimeGrid::new(1.0, steps).unwrap();
        let mut c = ControlPath::zeros(time, y.clone());
        for s in 0..time.nodes() {
            let t = time.time(s);
            *c.a_mut(s) = a0.axpy(t.sin(), &a1).unwrap();
            *c.b_mut(s) = b0.clone();
        }
        c
    };
    let euler = |steps: usize| solve_forward_euler(&f0, &ctrl_for(steps), &sig).unwrap();
    let (e16, e32, e64) = (euler(16), euler(32), euler(64));
    let d = |x: &deepide::dynamics::Trajectory, z: &deepide::dynamics::Trajectory| -> f64 {
        (0..2).map(|j| x.terminal()[j].axpy(-1.0, &z.terminal()[j]).unwrap().l2_norm().powi(2)).sum::<f64>().sqrt()
    };
    let order = (d(&e16, &e32) / d(&e32, &e64)).log2();

    // contraction regime: L‖b‖T = ¼ · 0.5 < 1
    let mut rel: f64 = 0.0;
    for steps in [64usize] {
        let c = ctrl_for(steps);
        let p = solve_forward_picard(&f0, &c, &sig, 500, 1e-13).unwrap();
        let e = solve_forward_euler(&f0, &c, &sig).unwrap();
        for j in 0..2 {
            let pt = &p.trajectory.terminal()[j];
            rel = rel.max(pt.axpy(-1.0, &e.terminal()[j]).unwrap().l2_norm() / pt.l2_norm());
        }
    }
    let pass = (0.8..=1.2).contains(&order) && rel <= 5e-3;
    outcome(pass, format!("Euler self-convergence order {order:.3} (want [0.8,1.2]); Picard-Euler rel L2 {rel:.2e} at S=64 (tol 5e-3)"))
}

// 3 ---------------------------------------------------------------------------

fn apriori_bounds() -> Outcome {
    let y = grid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let sigmas = [Activation::sigmoid(), Activation::tanh(), Activation::smoothed_relu(), Activation::identity()];
    let (mut growth, mut cont, mut diff) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for i in 0..100 {
        let sig = sigmas[i % 4];
        let time = TimeGrid::new(rng.gen_range(0.2..2.0), rng.gen_range(4..24)).unwrap();
        let scale = rng.gen_range(0.1..2.0);
        let c1 = random_control(&y, time, &mut rng, scale);
        let c2 = random_control(&y, time, &mut rng, scale);
        let f1: Vec<_> = (0..2).map(|_| random_function(&y, &mut rng, 1.0)).collect();
        let f2: Vec<_> = (0..2).map(|_| random_function(&y, &mut rng, 1.0)).collect();
        let t1 = solve_forward_euler(&f1, &c1, &sig).unwrap();
        let t2 = solve_forward_euler(&f2, &c2, &sig).unwrap();
        let r = check_apriori_bound(&t1, &c1, &sig).unwrap();
        growth = growth.min(r.growth_margin);
        cont = cont.min(r.continuity_margin);
        diff = diff.min(check_difference_bound(&t1, &c1, &t2, &c2, &sig).unwrap());
    }
    let pass = growth >= -1e-8 && cont >= -1e-8 && diff >= -1e-8;
    outcome(pass, format!("min margins: growth {growth:.2e}, stability {diff:.2e}, time-continuity {cont:.2e} (want >= -1e-8)"))
}

// 4 ---------------------------------------------------------------------------

fn stationary_classifier_check() -> Outcome {
    let y = grid(12);
    let u = grid(4);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let model = Model::regression(Activation::identity());
    let time = TimeGrid::new(1.0, 1).unwrap();
    let zero = ControlPath::zeros(time, y.clone());
    let (mut grad, mut recover) = (0.0f64, 0.0f64);
    let mut ranks = Vec::new();
    for i in 0..10 {
        let n = 3 + i % 2;
        let dependent = i % 4 >= 2;
        let mut f: Vec<GridFunction> = (0..n).map(|_| random_function(&y, &mut rng, 1.0)).collect();
        if dependent {
            // K = N − 1: last state is a combination of the first two
            let (al, be) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            f[n - 1] = f[0].scale(al).axpy(be, &f[1]).unwrap();
        }
        // arbitrary targets: the stationary classifier zeroes D_wJ, D_μJ
        let p: Vec<_> = (0..n).map(|_| random_function(&u, &mut rng, 1.0)).collect();
        let sc = stationary_classifier(&f, &p).unwrap();
        ranks.push(sc.basis.len());
        // with σ = identity and a = b = 0 the terminal state is the initial one
        let data = TrainingSet::new(f.clone(), p).unwrap();
        let run = evaluate(&data, &zero, &sc.classifier, &model).unwrap();
        let r = stationarity_residuals(&run);
        grad = grad.max(r[2]).max(r[3]);

        // round trip: targets generated by a classifier are reproduced
        let w = random_kernel(&u, &y, &mut rng, 1.0);
        let mu = random_function(&u, &mut rng, 1.0);
        let truth = Classifier::new(w, mu).unwrap();
        let z: Vec<_> = f.iter().map(|fj| deepide::output::network_output(fj, &truth).unwrap()).collect();
        let sc = stationary_classifier(&f, &z).unwrap();
        for (fj, zj) in f.iter().zip(&z) {
            let out = deepide::output::network_output(fj, &sc.classifier).unwrap();
            recover = recover.max(out.axpy(-1.0, zj).unwrap().l2_norm());
        }
    }
    // both K = N and K = N − 1 occur (n alternates 3, 4; every other pair is dependent)
    let has_both = ranks.contains(&2) && ranks.contains(&4);
    let pass = grad <= 1e-8 && recover <= 1e-8 && has_both;
    outcome(pass, format!("max ‖D_wJ‖,‖D_muJ‖ {grad:.2e}; round-trip error {recover:.2e} (tol 1e-8); ranks K {ranks:?}"))
}

// 5 ---------------------------------------------------------------------------

fn training_descent() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for n in [1usize, 3] {
        let data = regression_toy(n, 8).unwrap();
        let time = TimeGrid::new(1.0, 16).unwrap();
        let ctrl = ControlPath::zeros(time, data.y_grid().clone());
        let cls = Classifier::delta(data.y_grid().clone());
        let model = Model::regression(Activation::sigmoid());
        let res = train_gradient_flow(&data, &ctrl, &cls, &model, &TrainOptions::new(1.0, 500)).unwrap();
        let j0 = res.history[0].loss;
        let run = evaluate(&data, &res.ctrl, &res.cls, &model).unwrap();
        let r = stationarity_residuals(&run).iter().cloned().fold(0.0, f64::max);
        let ratio = run.loss() / j0;
        pass &= ratio <= 0.01 && r <= 1e-3 && res.history.len() <= 501;
        parts.push(format!("N={n}: J/J0 {ratio:.2e}, max residual {r:.2e}"));
    }
    outcome(pass, format!("{} (want <= 0.01 and <= 1e-3 within 500 iterations)", parts.join("; ")))
}

// 6 ---------------------------------------------------------------------------

/// Monotone-chain convex hull, counter-clockwise, collinear points dropped.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Exact minimum of `σ(u₁) r₁ + σ(u₂) r₂` over the zonotope of reachable
/// `(u₁, u₂) = (a − ⟨b, f₁⟩, a − ⟨b, f₂⟩)`. With `σ′ > 0` and `r ≠ 0` there is
/// no interior critical point, so the minimum lies on a hull edge; each edge is
/// scanned densely and refined by golden-section search.
fn dense_oracle_n2(f: &[GridFunction], r: &[f64], bx: &BoxSet, sig: &Activation) -> f64 {
    let m = f[0].len();
    let w = f[0].grid().weights();
    let mut pts = Vec::new();
    for mask in 0..(1usize << (m + 1)) {
        let a = if mask & 1 == 0 { bx.a_min } else { bx.a_max };
        let b: Vec<f64> = (0..m).map(|l| if mask >> (l + 1) & 1 == 0 { bx.b_min } else { bx.b_max }).collect();
        let p = |fj: &GridFunction| -> f64 { (0..m).map(|l| b[l] * fj.values()[l] * w[l]).sum() };
        pts.push((a - p(&f[0]), a - p(&f[1])));
    }
    let hull = convex_hull(pts);
    let obj = |u: (f64, f64)| sig.eval(u.0) * r[0] + sig.eval(u.1) * r[1];
    let mut best = hull.iter().map(|&u| obj(u)).fold(f64::INFINITY, f64::min);
    for i in 0..hull.len() {
        let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
        let at = |t: f64| obj((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        let n = 2000;
        let (mut bi, mut bv) = (0usize, f64::INFINITY);
        for k in 0..=n {
            let v = at(k as f64 / n as f64);
            if v < bv {
                (bi, bv) = (k, v);
            }
        }
        let (mut lo, mut hi) = ((bi.saturating_sub(1)) as f64 / n as f64, ((bi + 1).min(n)) as f64 / n as f64);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..100 {
            let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if at(x1) < at(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        best = best.min(bv).min(at(0.5 * (lo + hi)));
    }
    best
}

fn bang_bang_equivalence() -> Outcome {
    let y = grid(6);
    let bx = BoxSet::new(-1.0, 1.5, -2.0, 0.5).unwrap();
    let sig = Activation::sigmoid();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for i in 0..1000 {
        let f = random_function(&y, &mut rng, 1.0);
        let r: f64 = if i % 50 == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) };
        if r.abs() <= 1e-9 {
            continue;
        }
        let closed = bang_bang_control(&f, &GridFunction::constant(y.clone(), r), &bx).unwrap();
        let pc = argmin_t(std::slice::from_ref(&f), &[r], &bx, &sig, i as u64).unwrap();
        compared += 1;
        let b_ok = (0..6).all(|l| f.values()[l] == 0.0 || pc.b[l] == closed.b.get(0, l));
        if pc.a != closed.a.values()[0] || !b_ok {
            mismatches += 1;
        }
    }
    let yy = grid(3);
    let mut worst_gap = f64::NEG_INFINITY;
    for i in 0..100 {
        let f = vec![random_function(&yy, &mut rng, 1.0), random_function(&yy, &mut rng, 1.0)];
        let r = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let ours = argmin_t(&f, &r, &bx, &sig, i).unwrap();
        let check = t_value(&f, &r, ours.a, &ours.b, &sig);
        assert!((check - ours.value).abs() < 1e-12);
        let oracle = dense_oracle_n2(&f, &r, &bx, &sig);
        worst_gap = worst_gap.max((ours.value - oracle).abs());
    }
    let pass = mismatches == 0 && worst_gap <= 1e-6;
    outcome(
        pass,
        format!("N=1: {mismatches} mismatches in {compared} samples with |r|>1e-9; N=2: max |argmin - oracle| {worst_gap:.2e} (tol 1e-6)"),
    )
}

// 7 ---------------------------------------------------------------------------

fn pontryagin_structure() -> Outcome {
    let y = grid(8);
    let bx = BoxSet::new(-1.0, 1.0, -1.0, 1.0).unwrap();
    let model = Model::regression(Activation::sigmoid());
    let time = TimeGrid::new(1.0, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut lines = Vec::new();
    let mut pass = true;
    for _ in 0..3 {
        let f0 = random_function(&y, &mut rng, 1.0);
        // target out of reach: the co-state keeps one sign
        let p = GridFunction::constant(y.clone(), 4.0).axpy(1.0, &random_function(&y, &mut rng, 0.5)).unwrap();
        let data = TrainingSet::new(vec![f0], vec![p]).unwrap();
        let init = ControlPath::zeros(time, y.clone());
        let state = solve_msa(&data, &Classifier::delta(y.clone()), &model, &bx, &init, &MsaOptions::new(200)).unwrap();
        let flagged: std::collections::HashSet<(usize, usize)> = state.flagged_a.iter().cloned().collect();
        let f_zero: Vec<Vec<bool>> =
            (0..time.steps).map(|s| state.forward.state(s, 0).values().iter().map(|v| *v == 0.0).collect()).collect();
        let (mut hit, mut total) = (0usize, 0usize);
        for s in 0..time.steps {
            for k in 0..8 {
                if flagged.contains(&(s, k)) {
                    continue;
                }
                total += 1;
                hit += (bx.a_corner_distance(state.ctrl.a(s).values()[k]) <= 1e-6) as usize;
                for l in 0..8 {
                    if f_zero[s][l] {
                        continue;
                    }
                    total += 1;
                    hit += (bx.b_corner_distance(state.ctrl.b(s).get(k, l)) <= 1e-6) as usize;
                }
            }
        }
        let frac = hit as f64 / total as f64;
        let h = state.hamiltonian();
        let mag = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let span_rel = state.hamiltonian_span() / mag;
        pass &= state.converged && frac >= 0.99 && span_rel <= 0.05;
        lines.push(format!("converged={} sweeps={} corner={:.4} H-span/|H|={:.2e}", state.converged, state.sweeps.len(), frac, span_rel));
    }
    outcome(pass, format!("{} (want corner >= 0.99, span <= 5%)", lines.join("; ")))
}

// 8 ---------------------------------------------------------------------------

fn gramian_coercivity() -> Outcome {
    let y = grid(6);
    let sig = Activation::tanh();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_ratio = f64::INFINITY;
    let mut min_eig = f64::INFINITY;
    for _ in 0..20 {
        let f = random_function(&y, &mut rng, 1.0);
        let b = random_kernel(&y, &y, &mut rng, 1.0);
        let t = rng.gen_range(0.5..2.0);
        let g = gramian_stationary(&f, &b, None, &sig, t, 64).unwrap();
        let bound = stationary_lower_bound(&f, &b, &sig, t);
        min_eig = min_eig.min(g.min_eigenvalue);
        worst_ratio = worst_ratio.min(g.min_eigenvalue / bound);
    }
    // trajectory Gramian at an equilibrium converges to the stationary one
    let f = random_function(&y, &mut rng, 1.0);
    let b = random_kernel(&y, &y, &mut rng, 1.0);
    let a = deepide::dynamics::apply_kernel(&b, &f).unwrap();
    let rel = |steps: usize| -> f64 {
        let time = TimeGrid::new(1.0, steps).unwrap();
        let ctrl = ControlPath::constant(time, a.clone(), b.clone()).unwrap();
        let traj = solve_forward_euler(std::slice::from_ref(&f), &ctrl, &sig).unwrap();
        let gt = gramian_trajectory(&ctrl, &traj, &sig, 0).unwrap();
        let gs = gramian_stationary(&f, &b, None, &sig, 1.0, steps).unwrap();
        (&gt.matrix - &gs.matrix).norm() / gs.matrix.norm()
    };
    let (r32, r64) = (rel(32), rel(64));
    let order = (r32 / r64).log2();
    let pass = min_eig > 0.0 && worst_ratio >= 1.0 && r64 <= 0.05 && (0.8..=1.2).contains(&order);
    outcome(
        pass,
        format!("min eig {min_eig:.3e}, min eig/bound {worst_ratio:.3}; trajectory vs stationary rel diff {r32:.2e} (S=32) {r64:.2e} (S=64), order {order:.2}"),
    )
}

// 9 ---------------------------------------------------------------------------

fn obstruction_scaling() -> Outcome {
    let y = grid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let time = TimeGrid::new(1.0, 32).unwrap();
    let ctrl = random_control(&y, time, &mut rng, 1.0);
    let f0 = random_function(&y, &mut rng, 1.0);
    let dirs: Vec<_> = (0..3).map(|_| random_function(&y, &mut rng, 1.0)).collect();
    let eps = [0.2, 0.1, 0.05, 0.025, 0.0125];
    let sg = multistate_obstruction(&ctrl, &f0, &dirs, &eps, &Activation::sigmoid()).unwrap();
    let lin = multistate_obstruction(&ctrl, &f0, &dirs, &eps, &Activation::identity()).unwrap();
    let s = sg.slope.unwrap_or(f64::NAN);
    let lin_ok = lin.below_noise() || lin.slope.is_some_and(|x| x.abs() <= 0.2);
    let pass = (0.8..=1.2).contains(&s) && lin_ok;
    outcome(
        pass,
        format!(
            "sigmoid slope {s:.3} (want [0.8,1.2]); linear max residual {:.1e} vs noise floor {:.1e}",
            lin.residuals.iter().cloned().fold(0.0, f64::max),
            lin.noise_floor
        ),
    )
}

// 10 --------------------------------------------------------------------------

fn one_cell_problem(p: f64, sig: Activation) -> ValueProblem {
    let g = grid(1);
    ValueProblem::new(
        vec![GridFunction::constant(g.clone(), p)],
        Classifier::delta(g),
        Model::regression(sig),
        BoxSet::new(-1.0, 1.0, -1.0, 1.0).unwrap(),
        1.0,
        0.5,
    )
}

/// Exhaustive 21-point lattice per control value for two steps on one cell,
/// with the largest change between lattice neighbours as the resolution.
fn lattice_value(v0: f64, prob: &ValueProblem) -> (f64, f64) {
    let bx = prob.bounds;
    let sig = prob.model.sigma;
    let p = prob.targets[0].values()[0];
    let dt = prob.dt;
    let pts: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut vals = vec![0.0; 21usize.pow(4)];
    for (i0, a0) in pts.iter().enumerate() {
        for (j0, b0) in pts.iter().enumerate() {
            let f1 = v0
                + dt * sig
                    .eval(bx.a_min + (a0 + 1.0) / 2.0 * (bx.a_max - bx.a_min) - (bx.b_min + (b0 + 1.0) / 2.0 * (bx.b_max - bx.b_min)) * v0);
            for (i1, a1) in pts.iter().enumerate() {
                for (j1, b1) in pts.iter().enumerate() {
                    let f2 = f1
                        + dt * sig.eval(
                            bx.a_min + (a1 + 1.0) / 2.0 * (bx.a_max - bx.a_min)
                                - (bx.b_min + (b1 + 1.0) / 2.0 * (bx.b_max - bx.b_min)) * f1,
                        );
                    vals[((i0 * 21 + j0) * 21 + i1) * 21 + j1] = 0.5 * (f2 - p) * (f2 - p);
                }
            }
        }
    }
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut res: f64 = 0.0;
    for idx in 0..vals.len() {
        for stride in [1, 21, 441, 9261] {
            if (idx / stride) % 21 < 20 {
                res = res.max((vals[idx] - vals[idx + stride]).abs());
            }
        }
    }
    (min, res)
}

fn hjb_checks() -> Outcome {
    let y = grid(6);
    let bx = BoxSet::new(-1.0, 1.0, -0.5, 1.5).unwrap();
    let sig = Activation::sigmoid();
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut closed: f64 = 0.0;
    for i in 0..100 {
        let v = random_function(&y, &mut rng, 1.0);
        let r = random_function(&y, &mut rng, 1.0);
        let h = hjb_hamiltonian(std::slice::from_ref(&v), std::slice::from_ref(&r), &bx, &sig, i).unwrap().value;
        closed = closed.max((h - hjb_hamiltonian_single(&v, &r, &bx, &sig).unwrap()).abs());
    }
    let mut concave = f64::INFINITY;
    let yy = grid(3);
    for i in 0..100 {
        let v = vec![random_function(&yy, &mut rng, 1.0), random_function(&yy, &mut rng, 1.0)];
        let r1 = vec![random_function(&yy, &mut rng, 1.0), random_function(&yy, &mut rng, 1.0)];
        let r2 = vec![random_function(&yy, &mut rng, 1.0), random_function(&yy, &mut rng, 1.0)];
        let th: f64 = rng.gen_range(0.0..1.0);
        let mix: Vec<_> = r1.iter().zip(&r2).map(|(a, b)| a.scale(th).axpy(1.0 - th, b).unwrap()).collect();
        let h = |r: &[GridFunction]| hjb_hamiltonian(&v, r, &bx, &sig, i).unwrap().value;
        concave = concave.min(h(&mix) - th * h(&r1) - (1.0 - th) * h(&r2));
    }

    let mut lattice_ok = true;
    let mut lattice_gap: f64 = 0.0;
    for (s, p, v0) in [(Activation::tanh(), 2.5, -0.4), (Activation::sigmoid(), -0.5, 0.1), (Activation::identity(), 3.0, 0.2)] {
        let prob = one_cell_problem(p, s);
        let v = vec![GridFunction::constant(grid(1), v0)];
        let est = estimate_value(&v, 0.0, &prob).unwrap().value;
        let (lat, res) = lattice_value(v0, &prob);
        lattice_ok &= est <= lat + 1e-10 && lat - est <= res;
        lattice_gap = lattice_gap.max(lat - est);
    }

    let prob = one_cell_problem(2.5, Activation::tanh());
    let v = vec![GridFunction::constant(grid(1), -0.4)];
    let value = estimate_value(&v, 0.0, &prob).unwrap().value;
    let run = integrate_feedback(&v, 0.0, &prob, |st, t| value_gradient_fd(st, t, &prob)).unwrap();
    let fb_rel = (run.cost - value).abs() / value.abs();

    let pass = closed <= 1e-8 && concave >= -1e-8 && lattice_ok && fb_rel <= 0.1;
    outcome(
        pass,
        format!(
            "closed form err {closed:.1e}; concavity min gap {concave:.1e}; lattice - estimate max {lattice_gap:.2e} (within resolution: {lattice_ok}); feedback cost {:.4} vs value {value:.4} ({:.1}%)",
            run.cost,
            100.0 * fb_rel
        ),
    )
}

// 11 --------------------------------------------------------------------------

fn cross_entropy_floor_check() -> Outcome {
    let u = grid(7);
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = f64::INFINITY;
    let mut equality: f64 = 0.0;
    for _ in 0..1000 {
        let p = GridFunction::new(u.clone(), (0..7).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
        let p = p.scale(1.0 / p.integral());
        let z = random_function(&u, &mut rng, 5.0);
        let floor = cross_entropy_floor(std::slice::from_ref(&p)).unwrap();
        worst = worst.min(loss_cross_entropy(&[z], std::slice::from_ref(&p)).unwrap() - floor);
        // softmax(Z) = P for Z = −ln P + c
        let c = rng.gen_range(-3.0..3.0);
        let zp = p.map(|x| -x.ln() + c);
        equality = equality.max((loss_cross_entropy(&[zp], std::slice::from_ref(&p)).unwrap() - floor).abs());
    }
    let pass = worst >= -1e-10 && equality <= 1e-10;
    outcome(pass, format!("min J - J_min {worst:.2e} (want >= -1e-10); |J - J_min| at softmax(Z)=P {equality:.1e}"))
}

// 12 --------------------------------------------------------------------------

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{
  "y_grid": {{ "lower": [0.0], "upper": [1.0], "counts": [8] }},
  "u_grid": {{ "lower": [0.0], "upper": [1.0], "counts": [8] }},
  "time": {{ "t_end": 1.0, "steps": 8 }},
  "activation": {{ "kind": "sigmoid" }},
  "bounds": {{ "a_min": -1.0, "a_max": 1.0, "b_min": -1.0, "b_max": 1.0 }},
  "data": "{}",
  "training": {{ "iters": 40, "init_scale": 0.5 }},
  "pontryagin": {{ "sweeps": 15 }},
  "hjb": {{ "iters": 20 }}
}}"#,
        fixtures.join("toy2/bundle.json").display()
    );
    let cfg_path = tmp.path().join("cfg.json");
    fs::write(&cfg_path, cfg).unwrap();
    let exe = env!("CARGO_BIN_EXE_deepide");
    let mut identical = true;
    let mut compared = 0usize;
    for cmd in ["train", "pontryagin", "forward", "controllability"] {
        let mut runs = Vec::new();
        for (i, threads) in ["1", "4"].iter().enumerate() {
            let out = tmp.path().join(format!("{cmd}_{i}"));
            let st = Command::new(exe)
                .args(["--seed", "42", "--threads", threads, cmd, "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            assert!(st.success(), "{cmd} failed");
            runs.push(out);
        }
        let (a, b) = (csv_files(&runs[0]), csv_files(&runs[1]));
        identical &= a.len() == b.len() && !a.is_empty();
        for (x, y) in a.iter().zip(&b) {
            compared += 1;
            identical &= fs::read(x).unwrap() == fs::read(y).unwrap();
        }
    }
    outcome(identical, format!("{compared} CSV files byte-identical across repeated runs (seed 42, 1 vs 4 threads)"))
}

#[test]
fn acceptance() {
    type Criterion = (usize, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "forward solver order", forward_solver_order),
        (3, "a-priori bounds", apriori_bounds),
        (4, "stationary classifier", stationary_classifier_check),
        (5, "training descent", training_descent),
        (6, "bang-bang equivalence", bang_bang_equivalence),
        (7, "Pontryagin structure", pontryagin_structure),
        (8, "Gramian coercivity", gramian_coercivity),
        (9, "multi-state obstruction scaling", obstruction_scaling),
        (10, "HJB Hamiltonian and value", hjb_checks),
        (11, "cross-entropy floor", cross_entropy_floor_check),
        (12, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (id, name, f) in criteria {
        let o = f();
        writeln!(out, "criterion {id:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
