//! Hamilton–Jacobi–Bellman side of the control problem at toy scale: the
//! Hamiltonian `H_HJB`, direct estimation of the value functional, empirical
//! Lipschitz moduli and closed-loop integration of the feedback law.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::adjoint::{adjoint_terminal, loss_gradient, solve_backward, Model};
use crate::dynamics::{preactivation, solve_forward_euler, ControlPath, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{same_grid, GridFunction, Kernel};
use crate::output::{evaluate_loss, Classifier};
use crate::pontryagin::{argmin_t, mix_seed, BoxSet, PointControl};

#[derive(Debug, Clone)]
pub struct HjbHamiltonian {
    pub value: f64,
    /// Minimiser at every label cell.
    pub controls: Vec<PointControl>,
}

/// `H_HJB(v, r) = ∫_Y min_{(a, b) ∈ A} Σ_j σ(a − ⟨b, v_j⟩) r_j(y) dy`.
pub fn hjb_hamiltonian(v: &[GridFunction], r: &[GridFunction], bx: &BoxSet, sigma: &Activation, seed: u64) -> Result<HjbHamiltonian> {
    if v.is_empty() || v.len() != r.len() {
        return Err(Error::Shape(format!("{} states but {} co-states", v.len(), r.len())));
    }
    let g = v[0].grid();
    if v.iter().chain(r).any(|x| !same_grid(x.grid(), g)) {
        return Err(Error::GridMismatch("states and co-states live on different grids".into()));
    }
    let controls: Vec<PointControl> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let rk: Vec<f64> = r.iter().map(|rj| rj.values()[k]).collect();
            argmin_t(v, &rk, bx, sigma, mix_seed(seed, k as u64, 0))
        })
        .collect::<Result<_>>()?;
    let value = controls.iter().zip(g.weights()).map(|(c, w)| c.value * w).sum();
    Ok(HjbHamiltonian { value, controls })
}

/// Single-datum closed form
/// `σ(a_m − b_m∫_{v<0}v − b_M∫_{v>0}v)∫_{r>0}r + σ(a_M − b_m∫_{v>0}v − b_M∫_{v<0}v)∫_{r<0}r`.
pub fn hjb_hamiltonian_single(v: &GridFunction, r: &GridFunction, bx: &BoxSet, sigma: &Activation) -> Result<f64> {
    if !same_grid(v.grid(), r.grid()) {
        return Err(Error::GridMismatch("state and co-state live on different grids".into()));
    }
    let w = v.grid().weights();
    let part = |x: &GridFunction, pos: bool| -> f64 {
        x.values().iter().zip(w).filter(|(val, _)| if pos { **val > 0.0 } else { **val < 0.0 }).map(|(val, wk)| val * wk).sum()
    };
    let (vp, vn) = (part(v, true), part(v, false));
    let (rp, rn) = (part(r, true), part(r, false));
    Ok(sigma.eval(bx.a_min - bx.b_min * vn - bx.b_max * vp) * rp + sigma.eval(bx.a_max - bx.b_min * vp - bx.b_max * vn) * rn)
}

/// Everything but the state that the value functional depends on.
#[derive(Debug, Clone)]
pub struct ValueProblem {
    pub targets: Vec<GridFunction>,
    pub classifier: Classifier,
    pub model: Model,
    pub bounds: BoxSet,
    pub t_end: f64,
    /// Time step; start times must lie on the grid `T − kΔt`.
    pub dt: f64,
    pub random_starts: usize,
    pub iters: usize,
    pub seed: u64,
}

impl ValueProblem {
    pub fn new(targets: Vec<GridFunction>, classifier: Classifier, model: Model, bounds: BoxSet, t_end: f64, dt: f64) -> Self {
        ValueProblem { targets, classifier, model, bounds, t_end, dt, random_starts: 4, iters: 300, seed: 0 }
    }

    /// Number of steps from `t` to `T`.
    pub fn steps_from(&self, t: f64) -> Result<usize> {
        let x = (self.t_end - t) / self.dt;
        let k = x.round();
        if k < 0.0 || (x - k).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("start time {t} is not on the grid T - kΔt")));
        }
        Ok(k as usize)
    }

    /// Terminal functional `g(v) = (1/N) Σ_j 𝒞(Z(v_j), P^{(j)})`.
    pub fn terminal_cost(&self, v: &[GridFunction]) -> Result<f64> {
        evaluate_loss(v, &self.classifier, self.model.predictor, self.model.loss, &self.targets)
    }

    fn cost_and_gradient(&self, v: &[GridFunction], ctrl: &ControlPath) -> Result<(f64, Option<crate::adjoint::LossGradient>)> {
        let fwd = solve_forward_euler(v, ctrl, &self.model.sigma)?;
        let term = adjoint_terminal(fwd.terminal(), &self.classifier, &self.model, &self.targets)?;
        let co = solve_backward(&fwd, ctrl, &self.model.sigma, &term.omega)?;
        let g = loss_gradient(&fwd, &co, ctrl, &self.model.sigma, &self.classifier, &term)?;
        Ok((term.loss, Some(g)))
    }

    fn cost(&self, v: &[GridFunction], ctrl: &ControlPath) -> Result<f64> {
        let fwd = solve_forward_euler(v, ctrl, &self.model.sigma)?;
        self.terminal_cost(fwd.terminal())
    }
}

#[derive(Debug, Clone)]
pub struct ValueSample {
    pub v: Vec<GridFunction>,
    pub t: f64,
    pub value: f64,
    /// Minimising control on `[t, T]`; `None` when `t = T`.
    pub control: Option<ControlPath>,
    pub starts: usize,
    /// Seed of the winning start.
    pub best_seed: u64,
}

fn project(ctrl: &mut ControlPath, bx: &BoxSet) {
    for s in 0..ctrl.time().nodes() {
        for x in ctrl.a_mut(s).values_mut() {
            *x = x.clamp(bx.a_min, bx.a_max);
        }
        for x in ctrl.b_mut(s).values_mut().iter_mut() {
            *x = x.clamp(bx.b_min, bx.b_max);
        }
    }
}

/// Projected steepest descent with Armijo backtracking on a control path.
fn descend_path(problem: &ValueProblem, v: &[GridFunction], mut ctrl: ControlPath) -> Result<(f64, ControlPath)> {
    let bx = &problem.bounds;
    project(&mut ctrl, bx);
    let (mut val, mut grad) = problem.cost_and_gradient(v, &ctrl)?;
    let mut tau = 1.0;
    let cls = Classifier::zeros(problem.classifier.u_grid().clone(), problem.classifier.y_grid().clone());
    for _ in 0..problem.iters {
        let g = grad.take().expect("gradient available");
        let mut accepted = false;
        for _ in 0..50 {
            let (mut trial, _) = g.descend(&ctrl, &cls, tau, false)?;
            project(&mut trial, bx);
            // predicted decrease ⟨DJ, x − x_new⟩
            let mut diff = ctrl.clone();
            for s in 0..ctrl.time().nodes() {
                *diff.a_mut(s) = ctrl.a(s).axpy(-1.0, trial.a(s))?;
                *diff.b_mut(s) = ctrl.b(s).axpy(-1.0, trial.b(s))?;
            }
            let dec = g.directional(&diff, &cls);
            if dec <= 1e-15 * (1.0 + val.abs()) {
                break;
            }
            match problem.cost(v, &trial) {
                Ok(nv) if nv <= val - 1e-4 * dec => {
                    ctrl = trial;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => tau *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            break;
        }
        (val, grad) = problem.cost_and_gradient(v, &ctrl)?;
        tau *= 2.0;
    }
    Ok((val, ctrl))
}

/// Estimates `𝒱(v, t) = inf J_{v,t}(a, b)` over box-constrained control paths
/// on `[t, T]` by multi-start projected gradient descent: the four box corners
/// with constant controls plus `random_starts` random paths. The best start
/// wins, ties broken by the smaller seed.
pub fn estimate_value(v: &[GridFunction], t: f64, problem: &ValueProblem) -> Result<ValueSample> {
    problem.bounds.validate()?;
    if v.len() != problem.targets.len() || v.is_empty() {
        return Err(Error::Shape(format!("{} states but {} targets", v.len(), problem.targets.len())));
    }
    let steps = problem.steps_from(t)?;
    if steps == 0 {
        return Ok(ValueSample { v: v.to_vec(), t, value: problem.terminal_cost(v)?, control: None, starts: 0, best_seed: 0 });
    }
    let time = TimeGrid::span(t, problem.t_end, steps)?;
    let grid = v[0].grid().clone();
    let bx = problem.bounds;
    let mut inits: Vec<(u64, ControlPath)> = Vec::new();
    for (i, (a, b)) in [(bx.a_min, bx.b_min), (bx.a_min, bx.b_max), (bx.a_max, bx.b_min), (bx.a_max, bx.b_max)].into_iter().enumerate() {
        let c = ControlPath::constant(time, GridFunction::constant(grid.clone(), a), Kernel::constant(grid.clone(), grid.clone(), b))?;
        inits.push((i as u64, c));
    }
    for i in 0..problem.random_starts {
        let seed = 4 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(problem.seed, seed, 7));
        let m = grid.len();
        let a: Vec<GridFunction> = (0..time.nodes())
            .map(|_| GridFunction::from_raw(grid.clone(), (0..m).map(|_| rng.gen_range(bx.a_min..=bx.a_max)).collect()))
            .collect();
        let b: Vec<Kernel> = (0..time.nodes())
            .map(|_| Kernel::from_raw(grid.clone(), grid.clone(), DMatrix::from_fn(m, m, |_, _| rng.gen_range(bx.b_min..=bx.b_max))))
            .collect();
        inits.push((seed, ControlPath::new(time, a, b)?));
    }
    let starts = inits.len();
    let results: Vec<(u64, f64, ControlPath)> =
        inits.into_par_iter().map(|(seed, c)| descend_path(problem, v, c).map(|(val, c)| (seed, val, c))).collect::<Result<_>>()?;
    let (best_seed, value, ctrl) = results.into_iter().min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0))).expect("at least one start");
    Ok(ValueSample { v: v.to_vec(), t, value, control: Some(ctrl), starts, best_seed })
}

/// Riesz representative of `D_v𝒱` by central differences with step
/// `1e-4 · max(1, ‖v‖)` in every cell of every state.
pub fn value_gradient_fd(v: &[GridFunction], t: f64, problem: &ValueProblem) -> Result<Vec<GridFunction>> {
    let scale = v.iter().map(|f| f.l2_norm()).fold(1.0, f64::max);
    let h = 1e-4 * scale;
    let mut out = Vec::with_capacity(v.len());
    for j in 0..v.len() {
        let w = v[j].grid().weights().to_vec();
        let vals: Vec<f64> = (0..v[j].len())
            .into_par_iter()
            .map(|k| {
                let eval = |d: f64| -> Result<f64> {
                    let mut vv = v.to_vec();
                    vv[j].values_mut()[k] += d;
                    Ok(estimate_value(&vv, t, problem)?.value)
                };
                Ok((eval(h)? - eval(-h)?) / (2.0 * h * w[k]))
            })
            .collect::<Result<_>>()?;
        out.push(GridFunction::from_raw(v[j].grid().clone(), vals));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub radius: f64,
    pub trials: usize,
    pub max_ratio: f64,
    /// Pairs skipped because they coincide.
    pub skipped: usize,
}

/// Samples pairs `(v¹, t₁)`, `(v², t₂)` with `‖v^i_j − center_j‖ ≤ R` and
/// times from `times`, and reports `max |𝒱₁ − 𝒱₂| / (Σ_j ‖v¹_j − v²_j‖ + |t₁ − t₂|)`.
pub fn empirical_lipschitz<F>(
    value: F,
    center: &[GridFunction],
    times: &[f64],
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<LipschitzReport>
where
    F: Fn(&[GridFunction], f64) -> Result<f64> + Sync,
{
    if times.is_empty() || center.is_empty() {
        return Err(Error::InvalidArgument("need at least one state and one time".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng| -> (Vec<GridFunction>, f64) {
        let v = center
            .iter()
            .map(|c| {
                let d = GridFunction::from_raw(c.grid().clone(), (0..c.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let n = d.l2_norm();
                let r = radius * rng.gen_range(0.0..=1.0f64);
                if n > 0.0 {
                    c.axpy(r / n, &d).expect("same grid")
                } else {
                    c.clone()
                }
            })
            .collect();
        (v, times[rng.gen_range(0..times.len())])
    };
    let pairs: Vec<_> = (0..trials).map(|_| (sample(&mut rng), sample(&mut rng))).collect();
    let ratios: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|((v1, t1), (v2, t2))| {
            let dist: f64 =
                v1.iter().zip(v2).map(|(a, b)| a.axpy(-1.0, b).map(|d| d.l2_norm()).unwrap_or(0.0)).sum::<f64>() + (t1 - t2).abs();
            if dist == 0.0 {
                return Ok(None);
            }
            Ok(Some((value(v1, *t1)? - value(v2, *t2)?).abs() / dist))
        })
        .collect::<Result<_>>()?;
    let skipped = ratios.iter().filter(|r| r.is_none()).count();
    let max_ratio = ratios.into_iter().flatten().fold(0.0, f64::max);
    Ok(LipschitzReport { radius, trials, max_ratio, skipped })
}

#[derive(Debug, Clone)]
pub struct FeedbackRun {
    pub trajectory: Trajectory,
    pub controls: ControlPath,
    /// `g(F̃(T))`.
    pub cost: f64,
}

/// Closed loop `F_{s+1} = F_s + Δt σ(ã − B_b̃ F_s)` where `(ã, b̃)(y)` minimises
/// `T_{F_s, r(y)}` and `r = oracle(F_s, t_{s+1})` approximates `D_v𝒱`.
pub fn integrate_feedback<O>(v: &[GridFunction], t: f64, problem: &ValueProblem, oracle: O) -> Result<FeedbackRun>
where
    O: Fn(&[GridFunction], f64) -> Result<Vec<GridFunction>>,
{
    let steps = problem.steps_from(t)?;
    let grid = v[0].grid().clone();
    let m = grid.len();
    let sigma = problem.model.sigma;
    let time = TimeGrid::span(t, problem.t_end, steps.max(1))?;
    if steps == 0 {
        let trajectory = Trajectory::new(TimeGrid::span(t, t, 1)?, vec![v.to_vec(), v.to_vec()])?;
        let controls = ControlPath::zeros(*trajectory.time(), grid);
        return Ok(FeedbackRun { cost: problem.terminal_cost(v)?, trajectory, controls });
    }
    let mut states = vec![v.to_vec()];
    let mut a_path = Vec::with_capacity(steps + 1);
    let mut b_path = Vec::with_capacity(steps + 1);
    for s in 0..steps {
        let cur = &states[s];
        let r = oracle(cur, time.time(s + 1))?;
        let ham = hjb_hamiltonian(cur, &r, &problem.bounds, &sigma, mix_seed(problem.seed, s as u64, 11))?;
        let a = GridFunction::from_raw(grid.clone(), ham.controls.iter().map(|c| c.a).collect());
        let b = Kernel::from_raw(grid.clone(), grid.clone(), DMatrix::from_fn(m, m, |k, l| ham.controls[k].b[l]));
        let mut next = Vec::with_capacity(cur.len());
        for (j, f) in cur.iter().enumerate() {
            let xi = preactivation(&a, &b, f);
            let vals: Vec<f64> = f.values().iter().zip(xi.values()).map(|(x, z)| x + time.dt() * sigma.eval(*z)).collect();
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { time_index: s + 1, datum: j });
            }
            next.push(GridFunction::from_raw(grid.clone(), vals));
        }
        states.push(next);
        a_path.push(a);
        b_path.push(b);
    }
    a_path.push(a_path[steps - 1].clone());
    b_path.push(b_path[steps - 1].clone());
    let cost = problem.terminal_cost(&states[steps])?;
    Ok(FeedbackRun { trajectory: Trajectory::new(time, states)?, controls: ControlPath::new(time, a_path, b_path)?, cost })
}
