//! Class activation maps, pooled classification logits, and CAM-derived
//! pseudo segmentation labels.

use crate::error::{FsrError, Result};
use crate::tensor::Matrix;

/// Label value for positions excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Guard for the min-max denominator.
const RANGE_EPS: f64 = 1e-8;

/// `N x C` activation scores in `[0, 1]` over a token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    pub scores: Matrix,
    pub grid: (usize, usize),
}

impl Cam {
    pub fn num_classes(&self) -> usize {
        self.scores.cols()
    }

    /// Highest score of a position over the classes flagged in `present`
    /// (all classes when `present` is `None`).
    pub fn max_score(&self, i: usize, present: Option<&[bool]>) -> f64 {
        self.scores
            .row(i)
            .iter()
            .enumerate()
            .filter(|(c, _)| present.is_none_or(|p| p[*c]))
            .map(|(_, &s)| s)
            .fold(0.0, f64::max)
    }
}

/// Per-pixel labels over the token grid: background 0, class `c + 1`, or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub labels: Vec<u8>,
    pub grid: (usize, usize),
}

/// `relu(Z · Wᵀ)` followed by per-class min-max normalization over positions.
/// Channels that are all zero after the ReLU stay zero.
pub fn compute_cam(z: &Matrix, w: &Matrix, grid: (usize, usize)) -> Result<Cam> {
    if z.rows() != grid.0 * grid.1 {
        return Err(FsrError::Shape(format!(
            "{} tokens for grid {grid:?}",
            z.rows()
        )));
    }
    cam_from_logits(z.matmul_t(w)?, grid)
}

/// The CAM of precomputed per-token logits `Z · Wᵀ` (`N x C`).
pub fn cam_from_logits(mut raw: Matrix, grid: (usize, usize)) -> Result<Cam> {
    if raw.rows() != grid.0 * grid.1 {
        return Err(FsrError::Shape(format!(
            "{} tokens for grid {grid:?}",
            raw.rows()
        )));
    }
    raw.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
    let (n, c) = raw.shape();
    for k in 0..c {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            lo = lo.min(raw[(i, k)]);
            hi = hi.max(raw[(i, k)]);
        }
        let range = (hi - lo).max(RANGE_EPS);
        for i in 0..n {
            raw[(i, k)] = (raw[(i, k)] - lo) / range;
        }
    }
    Ok(Cam { scores: raw, grid })
}

/// Global average of the per-token logits `Z · Wᵀ`.
pub fn pool_class_logits(z: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    Ok(z.matmul_t(w)?.mean_rows().into_vec())
}

/// Thresholds the CAM restricted to present classes: max `>= beta_high` →
/// argmax class, `<= beta_low` → background, otherwise [`IGNORE`].
pub fn derive_pseudo_labels(
    cam: &Cam,
    labels: &[u8],
    beta_low: f64,
    beta_high: f64,
) -> Result<PseudoLabel> {
    if labels.len() != cam.num_classes() {
        return Err(FsrError::Shape(format!(
            "{} labels for {} CAM channels",
            labels.len(),
            cam.num_classes()
        )));
    }
    if !(0.0 < beta_low && beta_low < beta_high && beta_high < 1.0) {
        return Err(FsrError::Config(format!(
            "thresholds ({beta_low}, {beta_high}) out of order"
        )));
    }
    let n = cam.scores.rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = cam.scores.row(i);
        let mut best = (0.0, None);
        for (c, &s) in row.iter().enumerate() {
            if labels[c] == 1 && (best.1.is_none() || s > best.0) {
                best = (s, Some(c));
            }
        }
        let label = match best {
            (m, Some(c)) if m >= beta_high => c as u8 + 1,
            (m, _) if m <= beta_low => 0,
            (_, None) => 0,
            _ => IGNORE,
        };
        out.push(label);
    }
    Ok(PseudoLabel {
        labels: out,
        grid: cam.grid,
    })
}
