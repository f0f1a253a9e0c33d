//! CSV tables and JSON envelopes for grid data, trajectories, trainer
//! checkpoints and training-set bundles.
//!
//! Every CSV table has one row per grid cell: the cell index, its centre
//! coordinates `y1..yd`, then the value columns. Floats are written in
//! shortest round-trip form, so write → read is exact and repeated writes are
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlPath, TimeGrid, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel, SpatialGrid, TensorLayout};
use crate::output::{Classifier, TrainingSet};

/// Coordinates read back from CSV must match the grid this closely.
const COORD_TOL: f64 = 1e-9;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

/// Re-validates a deserialised grid by rebuilding it through a constructor.
pub fn checked_grid(g: SpatialGrid) -> Result<Arc<SpatialGrid>> {
    let rebuilt = match g.layout() {
        Some(l) => SpatialGrid::uniform(&l.lower, &l.upper, &l.counts)?,
        None => {
            let centers = (0..g.len()).flat_map(|k| g.center(k).to_vec()).collect();
            SpatialGrid::from_cells(g.dim(), centers, g.weights().to_vec())?
        }
    };
    if rebuilt != g {
        return Err(Error::Parse("grid metadata is inconsistent with its layout".into()));
    }
    Ok(rebuilt.into_shared())
}

pub fn grid_from_layout(l: &TensorLayout) -> Result<Arc<SpatialGrid>> {
    Ok(SpatialGrid::uniform(&l.lower, &l.upper, &l.counts)?.into_shared())
}

fn header(grid: &SpatialGrid, names: &[String]) -> Vec<String> {
    let mut h = vec!["index".to_string()];
    h.extend((1..=grid.dim()).map(|i| format!("y{i}")));
    h.extend(names.iter().cloned());
    h
}

/// Writes columns of cell values as a CSV table.
pub fn write_table(path: &Path, grid: &SpatialGrid, names: &[String], columns: &[&[f64]]) -> Result<()> {
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::Shape("table columns do not match the grid".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(grid, names))?;
    for k in 0..grid.len() {
        let mut row = vec![k.to_string()];
        row.extend(grid.center(k).iter().map(|c| c.to_string()));
        row.extend(columns.iter().map(|c| c[k].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_table`], checking indices and centres
/// against `grid`. Returns the column names and the columns.
pub fn read_table(path: &Path, grid: &SpatialGrid) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let d = grid.dim();
    if h.len() < d + 1 || &h[0] != "index" {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let names: Vec<String> = h.iter().skip(d + 1).map(str::to_string).collect();
    let mut cols = vec![Vec::with_capacity(grid.len()); names.len()];
    let parse = |s: &str| -> Result<f64> { s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}: {s:?}", path.display()))) };
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 + names.len() {
            return Err(Error::Parse(format!("{}: row {k} has {} fields", path.display(), rec.len())));
        }
        if k >= grid.len() || rec[0].trim() != k.to_string() {
            return Err(Error::Shape(format!("{}: row {k} does not match cell order", path.display())));
        }
        for i in 0..d {
            if (parse(&rec[i + 1])? - grid.center(k)[i]).abs() > COORD_TOL {
                return Err(Error::GridMismatch(format!("{}: cell {k} centre differs from the grid", path.display())));
            }
        }
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(parse(&rec[d + 1 + c])?);
        }
        rows += 1;
    }
    if rows != grid.len() {
        return Err(Error::Shape(format!("{}: {rows} rows for a grid of {} cells", path.display(), grid.len())));
    }
    Ok((names, cols))
}

pub fn write_function_csv(path: &Path, f: &GridFunction) -> Result<()> {
    write_table(path, f.grid(), &["value".to_string()], &[f.values()])
}

/// Reads a single-column function table; non-finite entries are rejected.
pub fn read_function_csv(path: &Path, grid: &Arc<SpatialGrid>) -> Result<GridFunction> {
    let (_, mut cols) = read_table(path, grid)?;
    if cols.len() != 1 {
        return Err(Error::Shape(format!("{}: expected one value column, found {}", path.display(), cols.len())));
    }
    GridFunction::new(grid.clone(), cols.pop().unwrap())
}

/// Kernel as a table: row `k` holds `b(y_k, z_0), …, b(y_k, z_{m-1})`.
pub fn write_kernel_csv(path: &Path, b: &Kernel) -> Result<()> {
    let m = b.col_grid().len();
    let names: Vec<String> = (0..m).map(|l| format!("z{l}")).collect();
    let cols: Vec<Vec<f64>> = (0..m).map(|l| b.values().column(l).iter().copied().collect()).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    write_table(path, b.row_grid(), &names, &refs)
}

pub fn read_kernel_csv(path: &Path, rows: &Arc<SpatialGrid>, cols: &Arc<SpatialGrid>) -> Result<Kernel> {
    let (_, c) = read_table(path, rows)?;
    if c.len() != cols.len() {
        return Err(Error::Shape(format!("{}: expected {} kernel columns, found {}", path.display(), cols.len(), c.len())));
    }
    Kernel::new(rows.clone(), cols.clone(), DMatrix::from_fn(rows.len(), cols.len(), |k, l| c[l][k]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionEnvelope {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelEnvelope {
    pub rows: SpatialGrid,
    pub cols: SpatialGrid,
    /// Row-major.
    pub values: Vec<f64>,
}

pub fn function_to_json(f: &GridFunction) -> Result<String> {
    Ok(serde_json::to_string(&FunctionEnvelope { grid: (**f.grid()).clone(), values: f.values().to_vec() })?)
}

pub fn function_from_json(s: &str) -> Result<GridFunction> {
    let e: FunctionEnvelope = serde_json::from_str(s)?;
    GridFunction::new(checked_grid(e.grid)?, e.values)
}

pub fn kernel_to_json(b: &Kernel) -> Result<String> {
    let (n, m) = b.values().shape();
    let values = (0..n).flat_map(|k| (0..m).map(move |l| b.get(k, l))).collect();
    Ok(serde_json::to_string(&KernelEnvelope { rows: (**b.row_grid()).clone(), cols: (**b.col_grid()).clone(), values })?)
}

pub fn kernel_from_json(s: &str) -> Result<Kernel> {
    let e: KernelEnvelope = serde_json::from_str(s)?;
    let (rows, cols) = (checked_grid(e.rows)?, checked_grid(e.cols)?);
    if e.values.len() != rows.len() * cols.len() {
        return Err(Error::Shape("kernel envelope has the wrong number of values".into()));
    }
    let m = DMatrix::from_row_slice(rows.len(), cols.len(), &e.values);
    Kernel::new(rows, cols, m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
    pub dt: f64,
    pub n_data: usize,
    pub grid: SpatialGrid,
    pub files: Vec<String>,
}

/// One CSV per time node (`node_0000.csv`, columns `f1..fN`) plus
/// `trajectory.json`.
pub fn write_trajectory(dir: &Path, traj: &Trajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    let time = traj.time();
    let names: Vec<String> = (1..=traj.n_data()).map(|j| format!("f{j}")).collect();
    let mut files = Vec::with_capacity(time.nodes());
    for s in 0..time.nodes() {
        let file = format!("node_{s:04}.csv");
        let cols: Vec<&[f64]> = traj.at(s).iter().map(GridFunction::values).collect();
        write_table(&dir.join(&file), traj.grid(), &names, &cols)?;
        files.push(file);
    }
    let manifest = TrajectoryManifest {
        t0: time.t0,
        t_end: time.t_end,
        steps: time.steps,
        dt: time.dt(),
        n_data: traj.n_data(),
        grid: (**traj.grid()).clone(),
        files,
    };
    write_json(&dir.join("trajectory.json"), &manifest)
}

pub fn read_trajectory(dir: &Path) -> Result<Trajectory> {
    let m: TrajectoryManifest = read_json(&dir.join("trajectory.json"))?;
    let grid = checked_grid(m.grid)?;
    let time = TimeGrid::span(m.t0, m.t_end, m.steps)?;
    if m.files.len() != time.nodes() {
        return Err(Error::Shape(format!("trajectory manifest lists {} files for {} nodes", m.files.len(), time.nodes())));
    }
    let mut states = Vec::with_capacity(m.files.len());
    for file in &m.files {
        let (_, cols) = read_table(&dir.join(file), &grid)?;
        if cols.len() != m.n_data {
            return Err(Error::Shape(format!("{file}: expected {} data columns", m.n_data)));
        }
        states.push(cols.into_iter().map(|c| GridFunction::new(grid.clone(), c)).collect::<Result<Vec<_>>>()?);
    }
    Trajectory::new(time, states)
}

/// Trainer state: controls, classifier and iteration counter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub ctrl: ControlPath,
    pub classifier: Classifier,
    pub iteration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    iteration: usize,
    time: TimeGrid,
    y_grid: SpatialGrid,
    u_grid: SpatialGrid,
    /// Columns `s0..sS` hold `a` at each node.
    a: String,
    b: Vec<String>,
    w: String,
    mu: String,
}

pub fn write_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ctrl = &ck.ctrl;
    let time = *ctrl.time();
    let grid = ctrl.grid();
    let names: Vec<String> = (0..time.nodes()).map(|s| format!("s{s}")).collect();
    let cols: Vec<&[f64]> = ctrl.a_path().iter().map(GridFunction::values).collect();
    write_table(&dir.join("a.csv"), grid, &names, &cols)?;
    let mut b = Vec::with_capacity(time.nodes());
    for s in 0..time.nodes() {
        let file = format!("b_{s:04}.csv");
        write_kernel_csv(&dir.join(&file), ctrl.b(s))?;
        b.push(file);
    }
    write_kernel_csv(&dir.join("w.csv"), &ck.classifier.w)?;
    write_function_csv(&dir.join("mu.csv"), &ck.classifier.mu)?;
    let manifest = CheckpointManifest {
        iteration: ck.iteration,
        time,
        y_grid: (**grid).clone(),
        u_grid: (**ck.classifier.u_grid()).clone(),
        a: "a.csv".into(),
        b,
        w: "w.csv".into(),
        mu: "mu.csv".into(),
    };
    write_json(&dir.join("checkpoint.json"), &manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_json(&dir.join("checkpoint.json"))?;
    let y = checked_grid(m.y_grid)?;
    let u = checked_grid(m.u_grid)?;
    let time = TimeGrid::span(m.time.t0, m.time.t_end, m.time.steps)?;
    let (_, a_cols) = read_table(&dir.join(&m.a), &y)?;
    if a_cols.len() != time.nodes() || m.b.len() != time.nodes() {
        return Err(Error::Shape("checkpoint control does not match its time grid".into()));
    }
    let a = a_cols.into_iter().map(|c| GridFunction::new(y.clone(), c)).collect::<Result<Vec<_>>>()?;
    let b = m.b.iter().map(|f| read_kernel_csv(&dir.join(f), &y, &y)).collect::<Result<Vec<_>>>()?;
    let w = read_kernel_csv(&dir.join(&m.w), &u, &y)?;
    let mu = read_function_csv(&dir.join(&m.mu), &u)?;
    Ok(Checkpoint { ctrl: ControlPath::new(time, a, b)?, classifier: Classifier::new(w, mu)?, iteration: m.iteration })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleEntry {
    pub init: PathBuf,
    pub target: PathBuf,
}

/// `bundle.json`: grids for `Y` and `U` and per-datum CSV files, relative to
/// the bundle directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub y_grid: TensorLayout,
    pub u_grid: TensorLayout,
    pub data: Vec<BundleEntry>,
}

/// Loads and validates a training-set bundle (`bundle.json` or the directory
/// holding it).
pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    let file = if path.is_dir() { path.join("bundle.json") } else { path.to_path_buf() };
    let dir = file.parent().unwrap_or(Path::new("."));
    let m: BundleManifest = read_json(&file)?;
    let y = grid_from_layout(&m.y_grid)?;
    let u = grid_from_layout(&m.u_grid)?;
    let mut init = Vec::with_capacity(m.data.len());
    let mut targets = Vec::with_capacity(m.data.len());
    for e in &m.data {
        init.push(read_function_csv(&dir.join(&e.init), &y)?);
        targets.push(read_function_csv(&dir.join(&e.target), &u)?);
    }
    TrainingSet::new(init, targets)
}

/// Writes `data` as a bundle: `init_j.csv`, `target_j.csv` and `bundle.json`.
pub fn write_training_set(dir: &Path, data: &TrainingSet) -> Result<()> {
    let layout = |g: &SpatialGrid| g.layout().cloned().ok_or_else(|| Error::InvalidArgument("bundles need tensor grids".into()));
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.len());
    for (j, (f, p)) in data.init().iter().zip(data.targets()).enumerate() {
        let e = BundleEntry { init: format!("init_{j}.csv").into(), target: format!("target_{j}.csv").into() };
        write_function_csv(&dir.join(&e.init), f)?;
        write_function_csv(&dir.join(&e.target), p)?;
        entries.push(e);
    }
    let m = BundleManifest { y_grid: layout(data.y_grid())?, u_grid: layout(data.u_grid())?, data: entries };
    write_json(&dir.join("bundle.json"), &m)
}
