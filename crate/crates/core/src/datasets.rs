//! Small deterministic training sets: regression toys on `(0, 1)` and a
//! synthetic ten-class image set (seven-segment digits rendered at 28×28,
//! area-averaged down to 8×8 on `Y = (0, 1)²`).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, SpatialGrid};
use crate::output::TrainingSet;

/// `n` data on `(0, 1)` split into `cells`, with `U = Y`. Initial states are
/// shifted bumps, targets are smooth profiles of moderate size.
pub fn regression_toy(n: usize, cells: usize) -> Result<TrainingSet> {
    if n == 0 || cells == 0 {
        return Err(Error::InvalidArgument("need at least one datum and one cell".into()));
    }
    let g = SpatialGrid::unit_interval(cells)?.into_shared();
    let init = (0..n)
        .map(|j| {
            let c = (j as f64 + 0.5) / n as f64;
            GridFunction::from_fn(g.clone(), move |y| 0.5 * (-(y[0] - c).powi(2) * 20.0).exp() - 0.1 * j as f64)
        })
        .collect();
    let targets = (0..n)
        .map(|j| {
            let phase = j as f64;
            GridFunction::from_fn(g.clone(), move |y| 0.3 * (std::f64::consts::PI * (y[0] + 0.3 * phase)).sin() + 0.2)
        })
        .collect();
    TrainingSet::new(init, targets)
}

/// Seven-segment layout: `(x0, y0, x1, y1)` in a 28×28 frame, `y` downwards.
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (8.0, 5.0, 20.0, 5.0),    // top
    (20.0, 5.0, 20.0, 14.0),  // upper right
    (20.0, 14.0, 20.0, 23.0), // lower right
    (8.0, 23.0, 20.0, 23.0),  // bottom
    (8.0, 14.0, 8.0, 23.0),   // lower left
    (8.0, 5.0, 8.0, 14.0),    // upper left
    (8.0, 14.0, 20.0, 14.0),  // middle
];

const DIGITS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

pub const IMAGE_SIZE: usize = 28;

fn segment_distance(px: f64, py: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt()
}

/// Digit `d` as a row-major 28×28 intensity image in `[0, 1]`, strokes of
/// half-width 1.5 pixels with a one-pixel linear fall-off.
pub fn digit_image(d: usize) -> Vec<f64> {
    let on: Vec<_> = SEGMENTS.iter().zip(&DIGITS[d % 10]).filter(|(_, &b)| b).map(|(s, _)| *s).collect();
    let mut img = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let dist = on.iter().map(|s| segment_distance(px, py, *s)).fold(f64::INFINITY, f64::min);
            img[r * IMAGE_SIZE + c] = (2.5 - dist).clamp(0.0, 1.0);
        }
    }
    img
}

/// Exact area average of a square `n_in × n_in` image onto `n_out × n_out`
/// cells (the pixel grid and the output grid cover the same square).
pub fn downsample(img: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    assert_eq!(img.len(), n_in * n_in);
    let ratio = n_in as f64 / n_out as f64;
    // overlap[i][p]: length of output interval i ∩ pixel p, in pixel units
    let overlap: Vec<Vec<f64>> = (0..n_out)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            (0..n_in).map(|p| (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0)).collect()
        })
        .collect();
    let mut out = vec![0.0; n_out * n_out];
    for i in 0..n_out {
        for j in 0..n_out {
            let mut acc = 0.0;
            for r in 0..n_in {
                if overlap[i][r] == 0.0 {
                    continue;
                }
                for c in 0..n_in {
                    acc += overlap[i][r] * overlap[j][c] * img[r * n_in + c];
                }
            }
            out[i * n_out + j] = acc / (ratio * ratio);
        }
    }
    out
}

/// Ten digit images on `Y = (0, 1)²` with `n_out × n_out` cells; targets are
/// one-hot densities on `U = (0, 1)` split into ten cells.
pub fn digit_images(n_out: usize) -> Result<TrainingSet> {
    let y: Arc<SpatialGrid> = SpatialGrid::uniform(&[0.0, 0.0], &[1.0, 1.0], &[n_out, n_out])?.into_shared();
    let u = SpatialGrid::unit_interval(10)?.into_shared();
    let mut init = Vec::with_capacity(10);
    let mut targets = Vec::with_capacity(10);
    for d in 0..10 {
        // grid rows run along y1 (first axis); image rows run top to bottom
        init.push(GridFunction::new(y.clone(), downsample(&digit_image(d), IMAGE_SIZE, n_out))?);
        let mut p = vec![0.0; 10];
        p[d] = 1.0 / u.weight(d);
        targets.push(GridFunction::new(u.clone(), p)?);
    }
    TrainingSet::new(init, targets)
}
