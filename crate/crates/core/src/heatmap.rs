//! Gaussian joint heatmaps: rendering from 2D labels, soft-argmax decoding
//! with per-joint confidence, the learnable per-joint refiner, and the
//! heatmap-space losses.
//!
//! Grid cells map to pixels through `px = (cell + 0.5) * resolution`; sigma is
//! measured in cells.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("soft-argmax undefined: grid sums to zero")]
    UndefinedLocation,
    #[error("heatmap shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Per-joint heatmap stack on an H×W grid.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per cell when mapping back to image coordinates.
    pub resolution: f64,
    /// Row-major `[joint][row][col]`.
    pub data: Vec<f64>,
    /// Joints rendered outside the 3-sigma padded grid.
    pub out_of_frame: Vec<bool>,
}

impl Heatmap {
    pub fn grid(&self, joint: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[joint * n..(joint + 1) * n]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Render unnormalized Gaussian bumps with peak 1.0 at the joint locations.
pub fn render_heatmap(
    joints_px: &[[f64; 2]],
    sigma: f64,
    height: usize,
    width: usize,
    resolution: f64,
) -> Heatmap {
    let peaks = vec![1.0; joints_px.len()];
    render_heatmap_scaled(joints_px, &peaks, sigma, height, width, resolution)
}

/// Render with per-joint peak amplitudes (detector-style heatmaps carry their
/// confidence as the peak value).
///
/// Support is cut hard at 3 sigma from the center. The symmetric cutoff keeps
/// interior soft-argmax unbiased and makes integer-shift equivariance exact up
/// to summation order; it also keeps the grids sparse.
pub fn render_heatmap_scaled(
    joints_px: &[[f64; 2]],
    peaks: &[f64],
    sigma: f64,
    height: usize,
    width: usize,
    resolution: f64,
) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let cells = height * width;
    let mut data = vec![0.0; joints_px.len() * cells];
    let mut out_of_frame = vec![false; joints_px.len()];
    let pad = 3.0 * sigma;
    let r2_max = pad * pad;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, p) in joints_px.iter().enumerate() {
        let cu = p[0] / resolution - 0.5;
        let cv = p[1] / resolution - 0.5;
        if cu < -pad || cu > width as f64 - 1.0 + pad || cv < -pad || cv > height as f64 - 1.0 + pad
        {
            out_of_frame[j] = true;
            continue;
        }
        let grid = &mut data[j * cells..(j + 1) * cells];
        let row_lo = (cv - pad).floor().max(0.0) as usize;
        let row_hi = ((cv + pad).ceil() as isize).min(height as isize - 1).max(0) as usize;
        let col_lo = (cu - pad).floor().max(0.0) as usize;
        let col_hi = ((cu + pad).ceil() as isize).min(width as isize - 1).max(0) as usize;
        for row in row_lo..=row_hi {
            let dv = row as f64 - cv;
            let base = row * width;
            for col in col_lo..=col_hi {
                let du = col as f64 - cu;
                let r2 = du * du + dv * dv;
                if r2 <= r2_max {
                    grid[base + col] = peaks[j] * (-r2 * inv).exp();
                }
            }
        }
    }
    Heatmap {
        joints: joints_px.len(),
        height,
        width,
        resolution,
        data,
        out_of_frame,
    }
}

/// Expectation of (u, v) under the sum-normalized grid, in cell units.
pub fn soft_argmax_cells(grid: &[f64], height: usize, width: usize) -> Result<[f64; 2], HeatmapError> {
    debug_assert_eq!(grid.len(), height * width);
    let sum: f64 = grid.iter().sum();
    if sum <= 0.0 {
        return Err(HeatmapError::UndefinedLocation);
    }
    let mut eu = 0.0;
    let mut ev = 0.0;
    for row in 0..height {
        for col in 0..width {
            let w = grid[row * width + col];
            eu += col as f64 * w;
            ev += row as f64 * w;
        }
    }
    Ok([eu / sum, ev / sum])
}

/// Soft-argmax of one joint, mapped back to pixel coordinates.
pub fn soft_argmax(heatmap: &Heatmap, joint: usize) -> Result<[f64; 2], HeatmapError> {
    let c = soft_argmax_cells(heatmap.grid(joint), heatmap.height, heatmap.width)?;
    Ok([
        (c[0] + 0.5) * heatmap.resolution,
        (c[1] + 0.5) * heatmap.resolution,
    ])
}

/// Max of the unnormalized grid, clamped to at most 1.
pub fn joint_confidence(heatmap: &Heatmap, joint: usize) -> f64 {
    heatmap
        .grid(joint)
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        .min(1.0)
}

/// Mean over joints of the per-grid mean squared error.
pub fn loss_hmap(pred: &Heatmap, pseudo: &Heatmap) -> Result<f64, HeatmapError> {
    if pred.data.len() != pseudo.data.len() {
        return Err(HeatmapError::ShapeMismatch(pred.data.len(), pseudo.data.len()));
    }
    let total: f64 = pred
        .data
        .iter()
        .zip(pseudo.data.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / pred.data.len() as f64)
}

/// Mean over joints of the squared 2D coordinate error.
pub fn loss_hm2d(decoded: &[[f64; 2]], pseudo: &[[f64; 2]]) -> Result<f64, HeatmapError> {
    if decoded.len() != pseudo.len() {
        return Err(HeatmapError::ShapeMismatch(decoded.len(), pseudo.len()));
    }
    let total: f64 = decoded
        .iter()
        .zip(pseudo.iter())
        .map(|(d, p)| {
            let du = d[0] - p[0];
            let dv = d[1] - p[1];
            du * du + dv * dv
        })
        .sum();
    Ok(total / decoded.len() as f64)
}

/// Layout of the learnable two-layer residual refiner shared across joints.
#[derive(Clone, Copy, Debug)]
pub struct RefinerDims {
    pub cells: usize,
    pub hidden: usize,
}

pub const REFINER_FLOOR: f64 = 1e-9;

/// Register refiner parameters. The output layer is zero-initialized so the
/// refiner starts as the identity on nonnegative inputs.
pub fn register_refiner(
    store: &mut ParamStore,
    prefix: &str,
    dims: RefinerDims,
    init: &mut dyn FnMut(usize, usize) -> Array,
) -> Result<(), DiffError> {
    store.register(&format!("{prefix}.w1"), init(dims.cells, dims.hidden))?;
    store.register(&format!("{prefix}.b1"), Array::zeros(&[dims.hidden]))?;
    store.register(&format!("{prefix}.w2"), Array::zeros(&[dims.hidden, dims.cells]))?;
    store.register(&format!("{prefix}.b2"), Array::zeros(&[dims.cells]))?;
    Ok(())
}

/// Refined heatmaps: `relu(X + mlp(X)) + floor`, keeping grids nonnegative
/// with at least one strictly positive cell.
pub fn refiner_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    input: Var,
) -> Result<Var, DiffError> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    let h = tape.matmul(input, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let r = tape.matmul(h, w2)?;
    let r = tape.add(r, b2)?;
    let s = tape.add(input, r)?;
    let s = tape.relu(s);
    Ok(tape.add_const(s, REFINER_FLOOR))
}

/// Tape-side soft-argmax and confidence for a `[k, H*W]` heatmap variable.
/// Returns pixel coordinates `[k, 2]` and confidences `[k, 1]` clamped to
/// `(conf_floor, 1]`.
pub fn decode_tape(
    tape: &mut Tape,
    heatmaps: Var,
    height: usize,
    width: usize,
    resolution: f64,
    conf_floor: f64,
) -> Result<(Var, Var), DiffError> {
    let cells = height * width;
    let mut uv = Vec::with_capacity(cells * 2);
    for i in 0..cells {
        uv.push((i % width) as f64);
        uv.push((i / width) as f64);
    }
    let uv = tape.constant(Array::matrix(cells, 2, uv)?);

    let sums = tape.sum_rows(heatmaps);
    let norm = tape.div(heatmaps, sums)?;
    let cells_uv = tape.matmul(norm, uv)?;
    let scaled = tape.scale(cells_uv, resolution);
    let px = tape.add_const(scaled, 0.5 * resolution);

    // conf = max(floor, min(1, rowmax))
    let m = tape.max_rows(heatmaps);
    let neg = tape.scale(m, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let r = tape.relu(one_minus);
    let negr = tape.scale(r, -1.0);
    let capped = tape.add_const(negr, 1.0);
    let shifted = tape.add_const(capped, -conf_floor);
    let pos = tape.relu(shifted);
    let conf = tape.add_const(pos, conf_floor);
    Ok((px, conf))
}

/// Eq-style heatmap MSE on the tape: mean over all cells of all joints.
pub fn loss_hmap_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, DiffError> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// 2D decoding loss on the tape: mean over joints of squared pixel error.
pub fn loss_hm2d_tape(tape: &mut Tape, decoded: Var, pseudo: Var) -> Result<Var, DiffError> {
    let k = tape.value(decoded).rows();
    let d = tape.sub(decoded, pseudo)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / k as f64))
}
