//! Command-line driver. Every command reads an [`ExperimentConfig`], writes
//! CSV/JSON artefacts into `--out` and a `manifest.json` that records the
//! resolved config, its hash, the seed and the crate version.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
//! Errors are printed to stderr as `{"error": kind, "message": …}`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::adjoint::{evaluate, stationarity_residuals, train_gradient_flow};
use crate::checks::{random_control, run_all};
use crate::config::ExperimentConfig;
use crate::controllability::{gramian_trajectory, multistate_obstruction};
use crate::dynamics::{check_apriori_bound, solve_forward_euler, ControlPath};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel};
use crate::hjb::{estimate_value, hjb_hamiltonian, ValueProblem};
use crate::io::{read_checkpoint, read_function_csv, write_checkpoint, write_trajectory, Checkpoint};
use crate::output::evaluate_loss;
use crate::pontryagin::{solve_msa, BoxSet, MsaOptions};

#[derive(Debug, Parser)]
#[command(name = "deepide", version, about = "Continuum-limit residual networks: forward/adjoint solvers, optimal control and HJB tools")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for all random initialisation (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate the training data with the starting controls.
    Forward(Common),
    /// Backtracking gradient flow on controls and classifier.
    Train(Common),
    /// Successive approximations for the box-constrained control problem.
    Pontryagin {
        #[command(flatten)]
        common: Common,
        /// `a_min,a_max,b_min,b_max`.
        #[arg(long = "box", value_parser = parse_box, allow_hyphen_values = true)]
        bounds: Option<BoxSet>,
        #[arg(long)]
        sweeps: Option<usize>,
        #[arg(long)]
        relax: Option<f64>,
    },
    /// Gramian spectrum and multi-state obstruction along a trajectory.
    Controllability(Common),
    /// HJB Hamiltonian at the state/co-state files named in the config.
    HjbEval(Common),
    /// Value estimate at the training data.
    HjbValue(Common),
    /// Run the built-in invariant suites.
    Check {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_box(s: &str) -> std::result::Result<BoxSet, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    if v.len() != 4 {
        return Err("expected a_min,a_max,b_min,b_max".into());
    }
    BoxSet::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

/// Failure class, mapped to the exit code.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: Option<usize>,
    config_hash: String,
    config: &'a ExperimentConfig,
    outputs: Vec<String>,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    created_unix: u64,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.as_ref())?;
        }
        w.flush()?;
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(self.path(name), s)?;
        Ok(())
    }

    fn manifest(mut self, command: &str, cfg: &ExperimentConfig, threads: Option<usize>) -> Result<()> {
        let created_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let files = std::mem::take(&mut self.files);
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            threads,
            config_hash: cfg.hash(),
            config: cfg,
            outputs: files,
            created_unix,
        };
        self.json("manifest.json", &m)
    }
}

fn row<const N: usize>(xs: [String; N]) -> Vec<String> {
    xs.to_vec()
}

/// Starting controls: checkpoint, else zero plus `init_scale` noise.
fn initial_control(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<ControlPath> {
    if let Some(ck) = &cfg.checkpoint {
        let c = read_checkpoint(ck)?.ctrl;
        if *c.time() != cfg.time_grid()? || **c.grid() != *cfg.y_grid()? {
            return Err(Error::GridMismatch("checkpoint controls do not match the configured grids".into()));
        }
        return Ok(c);
    }
    let time = cfg.time_grid()?;
    let y = cfg.y_grid()?;
    let zero = ControlPath::zeros(time, y.clone());
    if cfg.training.init_scale == 0.0 {
        return Ok(zero);
    }
    Ok(random_control(&y, time, rng, cfg.training.init_scale))
}

fn cmd_forward(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let data = cfg.training_set()?;
    let ctrl = initial_control(cfg, rng)?;
    let cls = cfg.initial_classifier()?;
    let traj = solve_forward_euler(data.init(), &ctrl, &cfg.activation)?;
    write_trajectory(&out.path("trajectory"), &traj)?;
    let loss = evaluate_loss(traj.terminal(), &cls, cfg.predictor, cfg.loss, data.targets())?;
    let apriori = check_apriori_bound(&traj, &ctrl, &cfg.activation)?;
    out.json(
        "summary.json",
        &json!({ "loss": loss, "control_bv": ctrl.bv_seminorm(), "apriori": apriori, "apriori_holds": apriori.holds() }),
    )
}

fn cmd_train(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let data = cfg.training_set()?;
    let ctrl = initial_control(cfg, rng)?;
    let cls = cfg.initial_classifier()?;
    let model = cfg.model();
    let res = train_gradient_flow(&data, &ctrl, &cls, &model, &cfg.train_options())?;
    out.csv(
        "loss.csv",
        &["iteration", "loss", "step", "residual_a", "residual_b", "residual_w", "residual_mu"],
        res.history.iter().map(|r| {
            let [ra, rb, rw, rm] = r.residuals;
            row([
                r.iteration.to_string(),
                r.loss.to_string(),
                r.step.to_string(),
                ra.to_string(),
                rb.to_string(),
                rw.to_string(),
                rm.to_string(),
            ])
        }),
    )?;
    let iteration = res.history.last().map(|r| r.iteration).unwrap_or(0);
    write_checkpoint(&out.path("checkpoint"), &Checkpoint { ctrl: res.ctrl.clone(), classifier: res.cls.clone(), iteration })?;
    let run = evaluate(&data, &res.ctrl, &res.cls, &model)?;
    let initial = res.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let fin = run.loss();
    out.json(
        "summary.json",
        &json!({
            "initial_loss": initial,
            "final_loss": fin,
            "ratio": fin / initial,
            "iterations": iteration,
            "control_bv": res.ctrl.bv_seminorm(),
            "residuals": stationarity_residuals(&run),
        }),
    )
}

fn cmd_pontryagin(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let bx = cfg.bounds()?;
    let data = cfg.training_set()?;
    let cls = cfg.initial_classifier()?;
    let init = match &cfg.checkpoint {
        Some(_) => initial_control(cfg, rng)?,
        None => {
            let y = cfg.y_grid()?;
            let a = GridFunction::constant(y.clone(), 0.5 * (bx.a_min + bx.a_max));
            let b = Kernel::constant(y.clone(), y, 0.5 * (bx.b_min + bx.b_max));
            ControlPath::constant(cfg.time_grid()?, a, b)?
        }
    };
    let p = &cfg.pontryagin;
    let opts = MsaOptions { sweeps: p.sweeps, relax: p.relax, tol: p.tol, seed: rng.gen() };
    let state = solve_msa(&data, &cls, &cfg.model(), &bx, &init, &opts)?;
    out.csv(
        "sweeps.csv",
        &["sweep", "loss", "control_change", "hamiltonian_span", "boundary_fraction"],
        state.sweeps.iter().map(|r| {
            row([
                r.sweep.to_string(),
                r.loss.to_string(),
                r.control_change.to_string(),
                r.hamiltonian_span.to_string(),
                r.boundary_fraction.to_string(),
            ])
        }),
    )?;
    let time = *state.ctrl.time();
    out.csv(
        "hamiltonian.csv",
        &["node", "time", "hamiltonian"],
        state.hamiltonian().iter().enumerate().map(|(s, h)| row([s.to_string(), time.time(s).to_string(), h.to_string()])),
    )?;
    write_checkpoint(&out.path("checkpoint"), &Checkpoint { ctrl: state.ctrl.clone(), classifier: cls, iteration: state.sweeps.len() })?;
    out.json(
        "summary.json",
        &json!({
            "converged": state.converged,
            "sweeps": state.sweeps.len(),
            "final_loss": state.sweeps.last().map(|r| r.loss),
            "hamiltonian_span": state.hamiltonian_span(),
            "control_bv": state.ctrl.bv_seminorm(),
            "flagged_cells": state.flagged_a.len(),
        }),
    )
}

fn cmd_controllability(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let data = cfg.training_set()?;
    let ctrl = initial_control(cfg, rng)?;
    let spec = &cfg.controllability;
    if spec.datum >= data.len() {
        return Err(Error::InvalidArgument(format!("controllability.datum {} out of range", spec.datum)));
    }
    let traj = solve_forward_euler(data.init(), &ctrl, &cfg.activation)?;
    let g = gramian_trajectory(&ctrl, &traj, &cfg.activation, spec.datum)?;
    out.csv(
        "gramian_spectrum.csv",
        &["index", "eigenvalue"],
        g.eigenvalues.iter().enumerate().map(|(i, e)| row([i.to_string(), e.to_string()])),
    )?;
    let base = &data.init()[spec.datum];
    let dirs: Vec<GridFunction> = data.init().iter().map(|f| f.scale(1.0 / f.l2_norm().max(f64::MIN_POSITIVE))).collect();
    let report = if dirs.len() >= 2 { Some(multistate_obstruction(&ctrl, base, &dirs, &spec.eps, &cfg.activation)?) } else { None };
    out.json(
        "obstruction.json",
        &json!({
            "min_eigenvalue": g.min_eigenvalue,
            "obstruction": report,
            "below_noise": report.as_ref().map(|r| r.below_noise()),
        }),
    )
}

fn value_problem(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(ValueProblem, Vec<GridFunction>)> {
    let data = cfg.training_set()?;
    let time = cfg.time_grid()?;
    let mut p = ValueProblem::new(data.targets().to_vec(), cfg.initial_classifier()?, cfg.model(), cfg.bounds()?, time.t_end, time.dt());
    p.random_starts = cfg.hjb.random_starts;
    p.iters = cfg.hjb.iters;
    p.seed = rng.gen();
    Ok((p, data.init().to_vec()))
}

fn cmd_hjb_eval(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let bx = cfg.bounds()?;
    let y = cfg.y_grid()?;
    let h = &cfg.hjb;
    if h.state.is_empty() || h.state.len() != h.costate.len() {
        return Err(Error::InvalidArgument("hjb.state and hjb.costate must list the same positive number of files".into()));
    }
    let v = h.state.iter().map(|p| read_function_csv(p, &y)).collect::<Result<Vec<_>>>()?;
    let r = h.costate.iter().map(|p| read_function_csv(p, &y)).collect::<Result<Vec<_>>>()?;
    let ham = hjb_hamiltonian(&v, &r, &bx, &cfg.activation, rng.gen())?;
    let a_flagged = ham.controls.iter().filter(|c| c.a_flagged).count();
    out.csv(
        "hjb_controls.csv",
        &["index", "a", "t_value"],
        ham.controls.iter().enumerate().map(|(k, c)| row([k.to_string(), c.a.to_string(), c.value.to_string()])),
    )?;
    out.json("hjb_eval.json", &json!({ "value": ham.value, "a_flagged": a_flagged }))
}

fn cmd_hjb_value(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng, out: &mut Output) -> Result<()> {
    let (p, v) = value_problem(cfg, rng)?;
    let s = estimate_value(&v, cfg.hjb.t, &p)?;
    out.json(
        "hjb_value.json",
        &json!({
            "t": s.t,
            "value": s.value,
            "terminal_cost": p.terminal_cost(&v)?,
            "starts": s.starts,
            "best_seed": s.best_seed,
        }),
    )
}

fn run_check(seed: u64, out: Option<&Path>) -> std::result::Result<bool, Failure> {
    let results = run_all(seed)?;
    for r in &results {
        println!("{:<30} {:<4} metric={:e} threshold={:e}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.metric, r.threshold);
    }
    if let Some(dir) = out {
        let mut o = Output::new(dir)?;
        o.csv(
            "checks.csv",
            &["name", "passed", "metric", "threshold"],
            results.iter().map(|r| row([r.name.to_string(), r.passed.to_string(), r.metric.to_string(), r.threshold.to_string()])),
        )?;
        let created_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        o.json(
            "manifest.json",
            &json!({ "command": "check", "version": env!("CARGO_PKG_VERSION"), "seed": seed, "created_unix": created_unix }),
        )?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn dispatch(cli: Cli) -> std::result::Result<bool, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(Error::InvalidArgument("--threads must be positive".into())));
        }
        // a second initialisation (e.g. in-process tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (name, common) = match &cli.command {
        Command::Check { out } => return run_check(cli.seed.unwrap_or(0), out.as_deref()),
        Command::Forward(c) => ("forward", c),
        Command::Train(c) => ("train", c),
        Command::Pontryagin { common, .. } => ("pontryagin", common),
        Command::Controllability(c) => ("controllability", c),
        Command::HjbEval(c) => ("hjb-eval", c),
        Command::HjbValue(c) => ("hjb-value", c),
    };
    let mut cfg = ExperimentConfig::load(&common.config).map_err(Failure::Usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Pontryagin { bounds, sweeps, relax, .. } = &cli.command {
        if let Some(b) = bounds {
            cfg.bounds = Some(*b);
        }
        if let Some(s) = sweeps {
            cfg.pontryagin.sweeps = *s;
        }
        if let Some(r) = relax {
            cfg.pontryagin.relax = *r;
        }
        cfg.validate().map_err(Failure::Usage)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Output::new(&common.out)?;
    match &cli.command {
        Command::Forward(_) => cmd_forward(&cfg, &mut rng, &mut out)?,
        Command::Train(_) => cmd_train(&cfg, &mut rng, &mut out)?,
        Command::Pontryagin { .. } => cmd_pontryagin(&cfg, &mut rng, &mut out)?,
        Command::Controllability(_) => cmd_controllability(&cfg, &mut rng, &mut out)?,
        Command::HjbEval(_) => cmd_hjb_eval(&cfg, &mut rng, &mut out)?,
        Command::HjbValue(_) => cmd_hjb_value(&cfg, &mut rng, &mut out)?,
        Command::Check { .. } => unreachable!(),
    }
    out.manifest(name, &cfg, cli.threads)?;
    Ok(true)
}

fn report(e: &Error) {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
}

/// Parses `args` (including the program name) and runs one command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Usage(e)) => {
            report(&e);
            2
        }
        Err(Failure::Runtime(e)) => {
            report(&e);
            1
        }
    }
}
