//! Uncertainty-guided token selection.
//!
//! Tokens whose best CAM score falls strictly inside `(beta_low, beta_high)`
//! get `u + 1`, all others `u`, with `u ~ U(0, 1)` drawn fresh per token.
//! The top `k = floor(N * r)` scores are masked, so in-band tokens always win
//! over out-of-band ones and the uniform draw breaks ties within each group.

use rand::seq::index::sample;
use rand::Rng;

use crate::cam::Cam;
use crate::error::{FsrError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    /// Soft uncertainty scores.
    pub soft: Vec<f64>,
    /// Selection flags; exactly `k` are set.
    pub binary: Vec<bool>,
    pub k: usize,
}

impl MaskPair {
    /// A mask that selects nothing.
    pub fn empty(n: usize) -> Self {
        Self {
            soft: vec![0.0; n],
            binary: vec![false; n],
            k: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty()
    }

    pub fn count(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }
}

/// `floor(n * ratio)`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).floor() as usize
}

/// True when a position's best score lies strictly inside the band.
pub fn in_band(cam: &Cam, i: usize, beta_low: f64, beta_high: f64) -> bool {
    let m = cam.max_score(i, None);
    beta_low < m && m < beta_high
}

pub fn score_uncertainty<R: Rng + ?Sized>(
    cam: &Cam,
    beta_low: f64,
    beta_high: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(0.0 < beta_low && beta_low < beta_high && beta_high < 1.0) {
        return Err(FsrError::Config(format!(
            "thresholds ({beta_low}, {beta_high}) out of order"
        )));
    }
    Ok((0..cam.scores.rows())
        .map(|i| {
            let u: f64 = rng.gen();
            if in_band(cam, i, beta_low, beta_high) {
                u + 1.0
            } else {
                u
            }
        })
        .collect())
}

/// Flags the `floor(N * r)` largest soft scores; ties go to the lower index.
pub fn select_mask(soft: &[f64], ratio: f64) -> Result<MaskPair> {
    if soft.is_empty() {
        return Err(FsrError::Shape("cannot select from zero tokens".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FsrError::Config(format!(
            "mask ratio {ratio} must lie in (0, 1)"
        )));
    }
    let k = mask_count(soft.len(), ratio);
    let mut order: Vec<usize> = (0..soft.len()).collect();
    // Stable sort keeps index order among equal scores.
    order.sort_by(|&a, &b| soft[b].total_cmp(&soft[a]));
    let mut binary = vec![false; soft.len()];
    for &i in &order[..k] {
        binary[i] = true;
    }
    Ok(MaskPair {
        soft: soft.to_vec(),
        binary,
        k,
    })
}

/// Uniformly random `floor(N * r)`-subset.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPair> {
    if n == 0 {
        return Err(FsrError::Shape("cannot select from zero tokens".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FsrError::Config(format!(
            "mask ratio {ratio} must lie in (0, 1)"
        )));
    }
    let k = mask_count(n, ratio);
    let mut binary = vec![false; n];
    for i in sample(rng, n, k) {
        binary[i] = true;
    }
    let soft = binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(MaskPair { soft, binary, k })
}

/// Replaces masked rows by `mask_embedding + positional[i]`; other rows are
/// returned unchanged. `tokens` already include their positional embedding.
pub fn apply_mask_tokens(
    tokens: &Matrix,
    mask: &MaskPair,
    mask_embedding: &Matrix,
    positional: &Matrix,
) -> Result<Matrix> {
    let (n, d) = tokens.shape();
    if mask.len() != n || positional.shape() != (n, d) || mask_embedding.shape() != (1, d) {
        return Err(FsrError::Shape(format!(
            "mask of {} entries, embedding {:?}, positions {:?} for tokens {n}x{d}",
            mask.len(),
            mask_embedding.shape(),
            positional.shape()
        )));
    }
    let mut out = tokens.clone();
    for (i, &m) in mask.binary.iter().enumerate() {
        if m {
            let pos = positional.row(i).to_vec();
            for ((o, e), p) in out
                .row_mut(i)
                .iter_mut()
                .zip(mask_embedding.as_slice())
                .zip(pos)
            {
                *o = e + p;
            }
        }
    }
    Ok(out)
}
