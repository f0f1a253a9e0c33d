//! JSON experiment configuration shared by every CLI command.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Minimal example:
//!
//! ```json
//! {
//!   "y_grid": { "lower": [0.0], "upper": [1.0], "counts": [8] },
//!   "u_grid": { "lower": [0.0], "upper": [1.0], "counts": [8] },
//!   "time": { "t_end": 1.0, "steps": 16 },
//!   "activation": { "kind": "sigmoid" },
//!   "data": "toy2/bundle.json"
//! }
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::adjoint::{Model, TrainOptions};
use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel, SpatialGrid, TensorLayout};
use crate::io::{grid_from_layout, load_training_set, read_checkpoint};
use crate::output::{Classifier, LossKind, Predictor, TrainingSet};
use crate::pontryagin::BoxSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSpec {
    pub step: f64,
    pub iters: usize,
    pub grad_tol: f64,
    pub train_classifier: bool,
    /// Amplitude of the random initial control (0 starts from `a = b = 0`).
    pub init_scale: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec { step: 1.0, iters: 500, grad_tol: 0.0, train_classifier: true, init_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PontryaginSpec {
    pub sweeps: usize,
    pub relax: f64,
    pub tol: f64,
}

impl Default for PontryaginSpec {
    fn default() -> Self {
        PontryaginSpec { sweeps: 100, relax: 0.5, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllabilitySpec {
    /// Datum whose trajectory defines the linearisation.
    pub datum: usize,
    pub eps: Vec<f64>,
}

impl Default for ControllabilitySpec {
    fn default() -> Self {
        ControllabilitySpec { datum: 0, eps: vec![0.2, 0.1, 0.05, 0.025, 0.0125] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbSpec {
    /// Start time for `hjb-value`; must lie on the time grid.
    pub t: f64,
    pub random_starts: usize,
    pub iters: usize,
    /// State and co-state CSV files for `hjb-eval`, one per datum.
    pub state: Vec<PathBuf>,
    pub costate: Vec<PathBuf>,
}

impl Default for HjbSpec {
    fn default() -> Self {
        HjbSpec { t: 0.0, random_starts: 4, iters: 300, state: Vec::new(), costate: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub y_grid: TensorLayout,
    pub u_grid: TensorLayout,
    pub time: TimeSpec,
    pub activation: Activation,
    #[serde(default)]
    pub predictor: Predictor,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub bounds: Option<BoxSet>,
    #[serde(default)]
    pub seed: u64,
    /// Training-set bundle.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory providing the starting controls and classifier.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub pontryagin: PontryaginSpec,
    #[serde(default)]
    pub controllability: ControllabilitySpec,
    #[serde(default)]
    pub hjb: HjbSpec,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Reads a config and makes its file references absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })?;
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.iter_mut().for_each(fix);
        self.checkpoint.iter_mut().for_each(fix);
        self.hjb.state.iter_mut().for_each(fix);
        self.hjb.costate.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        grid_from_layout(&self.y_grid)?;
        grid_from_layout(&self.u_grid)?;
        TimeGrid::new(self.time.t_end, self.time.steps)?;
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        if !(self.training.step > 0.0) {
            return Err(Error::InvalidArgument("training.step must be positive".into()));
        }
        if !(self.pontryagin.relax > 0.0 && self.pontryagin.relax <= 1.0) {
            return Err(Error::InvalidArgument("pontryagin.relax must lie in (0, 1]".into()));
        }
        let files = self.data.iter().chain(&self.checkpoint).chain(&self.hjb.state).chain(&self.hjb.costate);
        for p in files {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn y_grid(&self) -> Result<Arc<SpatialGrid>> {
        grid_from_layout(&self.y_grid)
    }

    pub fn u_grid(&self) -> Result<Arc<SpatialGrid>> {
        grid_from_layout(&self.u_grid)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.t_end, self.time.steps)
    }

    pub fn model(&self) -> Model {
        Model::new(self.activation, self.predictor, self.loss)
    }

    pub fn train_options(&self) -> TrainOptions {
        let mut o = TrainOptions::new(self.training.step, self.training.iters);
        o.grad_tol = self.training.grad_tol;
        o.train_classifier = self.training.train_classifier;
        o
    }

    pub fn bounds(&self) -> Result<BoxSet> {
        self.bounds.ok_or_else(|| Error::InvalidArgument("this command needs `bounds` (or --box)".into()))
    }

    /// Loads the training bundle and checks it against the configured grids.
    pub fn training_set(&self) -> Result<TrainingSet> {
        let path = self.data.as_ref().ok_or_else(|| Error::InvalidArgument("this command needs `data`".into()))?;
        let data = load_training_set(path)?;
        if **data.y_grid() != *self.y_grid()? || **data.u_grid() != *self.u_grid()? {
            return Err(Error::GridMismatch("training bundle grids differ from the configured grids".into()));
        }
        Ok(data)
    }

    /// Classifier from the checkpoint, else the identity map when `U = Y`,
    /// else the average `w ≡ 1/|Y|`, `μ = 0`.
    pub fn initial_classifier(&self) -> Result<Classifier> {
        if let Some(ck) = &self.checkpoint {
            return Ok(read_checkpoint(ck)?.classifier);
        }
        let (y, u) = (self.y_grid()?, self.u_grid()?);
        if *y == *u {
            return Ok(Classifier::delta(y));
        }
        let m = y.total_measure();
        Classifier::new(Kernel::constant(u.clone(), y, 1.0 / m), GridFunction::zeros(u))
    }
}
