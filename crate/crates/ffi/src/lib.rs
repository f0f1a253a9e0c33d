//! C ABI for `deepide`.
//!
//! Objects cross the boundary as opaque heap handles created by `*_new` /
//! `*_load` functions and released with the matching `*_free`. Every fallible
//! call returns a [`DeepideStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`deepide_last_error_message`].
//! Panics never unwind into C: they are caught and reported as
//! `DEEPIDE_STATUS_PANIC`.
//!
//! Arrays are caller-owned. Multi-datum arrays are row-major with one row of
//! `grid_len` values per datum.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use deepide::activation::{Activation, ActivationKind};
use deepide::adjoint::{evaluate, train_gradient_flow, Model, TrainOptions};
use deepide::dynamics::{solve_forward_euler, ControlPath, TimeGrid};
use deepide::grid::{GridFunction, SpatialGrid};
use deepide::hjb::hjb_hamiltonian;
use deepide::io::load_training_set;
use deepide::output::{Classifier, LossKind, Predictor, TrainingSet};
use deepide::pontryagin::BoxSet;
use deepide::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepideStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    GridMismatch = 3,
    ShapeMismatch = 4,
    NonFinite = 5,
    NoConvergence = 6,
    Numerical = 7,
    DuplicateData = 8,
    Io = 9,
    Parse = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepideActivation {
    Sigmoid = 0,
    Tanh = 1,
    SmoothedRelu = 2,
    Identity = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepidePredictor {
    Identity = 0,
    Logistic = 1,
    Softmax = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepideLoss {
    Mse = 0,
    CrossEntropy = 1,
}

/// Admissible control box `[a_min, a_max] × [b_min, b_max]`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DeepideBox {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

/// Opaque spatial grid.
pub struct DeepideGrid(Arc<SpatialGrid>);

/// Opaque validated training set.
pub struct DeepideTrainingSet(TrainingSet);

/// Opaque control path `(a, b)` on a uniform time grid.
pub struct DeepideControl(ControlPath);

/// Opaque classifier `(w, μ)`.
pub struct DeepideClassifier(Classifier);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DeepideStatus {
    match e {
        Error::GridMismatch(_) => DeepideStatus::GridMismatch,
        Error::Shape(_) => DeepideStatus::ShapeMismatch,
        Error::NonFinite { .. } => DeepideStatus::NonFinite,
        Error::NoConvergence { .. } | Error::Divergence { .. } | Error::StepUnderflow { .. } => DeepideStatus::NoConvergence,
        Error::SoftmaxUnderflow { .. } | Error::Degenerate(_) | Error::NotStationary(_) | Error::NotADensity { .. } => {
            DeepideStatus::Numerical
        }
        Error::DuplicateData(..) => DeepideStatus::DuplicateData,
        Error::InvalidArgument(_) => DeepideStatus::InvalidArgument,
        Error::Io(_) => DeepideStatus::Io,
        Error::Parse(_) | Error::Json(_) => DeepideStatus::Parse,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (DeepideStatus, String)>) -> DeepideStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DeepideStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            DeepideStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (DeepideStatus, String)>;
}

impl<T> IntoFfi<T> for deepide::Result<T> {
    fn ffi(self) -> Result<T, (DeepideStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (DeepideStatus, String) {
    (DeepideStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DeepideStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (DeepideStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (DeepideStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (DeepideStatus, String)> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn model(act: DeepideActivation, pred: DeepidePredictor, loss: DeepideLoss) -> Model {
    let kind = match act {
        DeepideActivation::Sigmoid => ActivationKind::Sigmoid,
        DeepideActivation::Tanh => ActivationKind::Tanh,
        DeepideActivation::SmoothedRelu => ActivationKind::SmoothedRelu,
        DeepideActivation::Identity => ActivationKind::Identity,
    };
    let predictor = match pred {
        DeepidePredictor::Identity => Predictor::Identity,
        DeepidePredictor::Logistic => Predictor::Logistic,
        DeepidePredictor::Softmax => Predictor::Softmax,
    };
    let loss = match loss {
        DeepideLoss::Mse => LossKind::Mse,
        DeepideLoss::CrossEntropy => LossKind::CrossEntropy,
    };
    Model::new(Activation::new(kind), predictor, loss)
}

fn split(grid: &Arc<SpatialGrid>, values: &[f64], n: usize) -> deepide::Result<Vec<GridFunction>> {
    let m = grid.len();
    (0..n).map(|j| GridFunction::new(grid.clone(), values[j * m..(j + 1) * m].to_vec())).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn deepide_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn deepide_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn deepide_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Uniform tensor grid on `[lower, upper]` with `counts[i]` cells per axis.
///
/// # Safety
/// `lower`, `upper` and `counts` must point to `dim` readable elements.
#[no_mangle]
pub unsafe extern "C" fn deepide_grid_uniform(
    dim: usize,
    lower: *const f64,
    upper: *const f64,
    counts: *const usize,
    out: *mut *mut DeepideGrid,
) -> DeepideStatus {
    guard(|| {
        let lo = slice(lower, dim, "lower")?;
        let hi = slice(upper, dim, "upper")?;
        if dim > 0 && counts.is_null() {
            return Err(null("counts"));
        }
        let c = if dim == 0 { &[][..] } else { std::slice::from_raw_parts(counts, dim) };
        let g = SpatialGrid::uniform(lo, hi, c).ffi()?;
        put(out, DeepideGrid(g.into_shared()))
    })
}

/// Number of cells, 0 for NULL.
///
/// # Safety
/// `grid` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn deepide_grid_len(grid: *const DeepideGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.len())
}

/// # Safety
/// `grid` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn deepide_grid_free(grid: *mut DeepideGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Training set from `n` initial states on `y` and `n` targets on `u`.
///
/// # Safety
/// `init` must hold `n · len(y)` values and `targets` `n · len(u)` values.
#[no_mangle]
pub unsafe extern "C" fn deepide_training_set_new(
    y: *const DeepideGrid,
    u: *const DeepideGrid,
    n: usize,
    init: *const f64,
    targets: *const f64,
    out: *mut *mut DeepideTrainingSet,
) -> DeepideStatus {
    guard(|| {
        let y = &obj(y, "y grid")?.0;
        let u = &obj(u, "u grid")?.0;
        let fi = split(y, slice(init, n * y.len(), "init")?, n).ffi()?;
        let p = split(u, slice(targets, n * u.len(), "targets")?, n).ffi()?;
        put(out, DeepideTrainingSet(TrainingSet::new(fi, p).ffi()?))
    })
}

/// Loads a bundle directory or `bundle.json`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn deepide_training_set_load(path: *const c_char, out: *mut *mut DeepideTrainingSet) -> DeepideStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| (DeepideStatus::InvalidArgument, e.to_string()))?;
        put(out, DeepideTrainingSet(load_training_set(Path::new(p)).ffi()?))
    })
}

/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn deepide_training_set_len(data: *const DeepideTrainingSet) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Cells of the label grid `Y` of a training set, 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn deepide_training_set_grid_len(data: *const DeepideTrainingSet) -> usize {
    data.as_ref().map_or(0, |d| d.0.y_grid().len())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn deepide_training_set_free(data: *mut DeepideTrainingSet) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Zero controls on `steps` uniform intervals of `[0, t_end]` over the label
/// grid of `data`.
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn deepide_control_zeros(
    data: *const DeepideTrainingSet,
    t_end: f64,
    steps: usize,
    out: *mut *mut DeepideControl,
) -> DeepideStatus {
    guard(|| {
        let d = obj(data, "training set")?;
        let time = TimeGrid::new(t_end, steps).ffi()?;
        put(out, DeepideControl(ControlPath::zeros(time, d.0.y_grid().clone())))
    })
}

/// # Safety
/// `ctrl` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn deepide_control_free(ctrl: *mut DeepideControl) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Identity classifier `W f = f` on the label grid (requires `U = Y`).
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn deepide_classifier_identity(data: *const DeepideTrainingSet, out: *mut *mut DeepideClassifier) -> DeepideStatus {
    guard(|| {
        let d = obj(data, "training set")?;
        if **d.0.y_grid() != **d.0.u_grid() {
            return Err((DeepideStatus::GridMismatch, "identity classifier needs U = Y".into()));
        }
        put(out, DeepideClassifier(Classifier::delta(d.0.y_grid().clone())))
    })
}

/// # Safety
/// `cls` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn deepide_classifier_free(cls: *mut DeepideClassifier) {
    if !cls.is_null() {
        drop(Box::from_raw(cls));
    }
}

/// Euler-propagates the training data; writes the terminal states
/// (`len(data) × grid_len` values) into `terminal`.
///
/// # Safety
/// Handles must be live; `terminal` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn deepide_forward(
    data: *const DeepideTrainingSet,
    ctrl: *const DeepideControl,
    activation: DeepideActivation,
    terminal: *mut f64,
    len: usize,
) -> DeepideStatus {
    guard(|| {
        let d = obj(data, "training set")?;
        let c = obj(ctrl, "control")?;
        let m = model(activation, DeepidePredictor::Identity, DeepideLoss::Mse);
        let traj = solve_forward_euler(d.0.init(), &c.0, &m.sigma).ffi()?;
        let need = d.0.len() * d.0.y_grid().len();
        if len != need {
            return Err((DeepideStatus::ShapeMismatch, format!("terminal buffer holds {len} values, need {need}")));
        }
        let out = slice_mut(terminal, len, "terminal")?;
        for (chunk, f) in out.chunks_mut(d.0.y_grid().len()).zip(traj.terminal()) {
            chunk.copy_from_slice(f.values());
        }
        Ok(())
    })
}

/// Loss and the four stationarity residuals `‖D_aJ‖, ‖D_bJ‖, ‖D_wJ‖, ‖D_μJ‖`.
///
/// # Safety
/// Handles must be live; `residuals` must have room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn deepide_evaluate(
    data: *const DeepideTrainingSet,
    ctrl: *const DeepideControl,
    cls: *const DeepideClassifier,
    activation: DeepideActivation,
    predictor: DeepidePredictor,
    loss: DeepideLoss,
    out_loss: *mut f64,
    residuals: *mut f64,
) -> DeepideStatus {
    guard(|| {
        let run = evaluate(
            &obj(data, "training set")?.0,
            &obj(ctrl, "control")?.0,
            &obj(cls, "classifier")?.0,
            &model(activation, predictor, loss),
        )
        .ffi()?;
        if out_loss.is_null() {
            return Err(null("out_loss"));
        }
        *out_loss = run.loss();
        slice_mut(residuals, 4, "residuals")?.copy_from_slice(&run.gradient.norms());
        Ok(())
    })
}

/// Backtracking gradient flow; replaces `ctrl` and `cls` in place with the
/// trained values and stores the final loss.
///
/// # Safety
/// Handles must be live and not aliased by another thread.
#[no_mangle]
pub unsafe extern "C" fn deepide_train(
    data: *const DeepideTrainingSet,
    ctrl: *mut DeepideControl,
    cls: *mut DeepideClassifier,
    activation: DeepideActivation,
    predictor: DeepidePredictor,
    loss: DeepideLoss,
    step: f64,
    iters: usize,
    out_loss: *mut f64,
) -> DeepideStatus {
    guard(|| {
        let d = obj(data, "training set")?;
        let c = ctrl.as_mut().ok_or_else(|| null("control"))?;
        let k = cls.as_mut().ok_or_else(|| null("classifier"))?;
        if out_loss.is_null() {
            return Err(null("out_loss"));
        }
        let res = train_gradient_flow(&d.0, &c.0, &k.0, &model(activation, predictor, loss), &TrainOptions::new(step, iters)).ffi()?;
        *out_loss = res.history.last().map_or(f64::NAN, |r| r.loss);
        c.0 = res.ctrl;
        k.0 = res.cls;
        Ok(())
    })
}

/// `H_HJB(v, r)` for `n` states and co-states on `grid`.
///
/// # Safety
/// `v` and `r` must each hold `n · grid_len` values.
#[no_mangle]
pub unsafe extern "C" fn deepide_hjb_hamiltonian(
    grid: *const DeepideGrid,
    n: usize,
    v: *const f64,
    r: *const f64,
    bounds: DeepideBox,
    activation: DeepideActivation,
    out_value: *mut f64,
) -> DeepideStatus {
    guard(|| {
        let g = &obj(grid, "grid")?.0;
        let vs = split(g, slice(v, n * g.len(), "v")?, n).ffi()?;
        let rs = split(g, slice(r, n * g.len(), "r")?, n).ffi()?;
        let bx = BoxSet::new(bounds.a_min, bounds.a_max, bounds.b_min, bounds.b_max).ffi()?;
        let m = model(activation, DeepidePredictor::Identity, DeepideLoss::Mse);
        let h = hjb_hamiltonian(&vs, &rs, &bx, &m.sigma, 0).ffi()?;
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        *out_value = h.value;
        Ok(())
    })
}
