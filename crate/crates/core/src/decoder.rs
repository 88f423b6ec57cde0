//! Segmentation decoder and the supervised losses (classification,
//! segmentation, affinity) plus the weighted total objective.
//!
//! The affinity loss is a simplified pairwise cosine objective: for sampled
//! token pairs whose pseudo labels are both known, `(cos(z_i, z_j) − a_ij)²`
//! with `a_ij = 1` for equal labels and 0 otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var, GATHER_ZERO};
use crate::cam::{PseudoLabel, IGNORE};
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderShape {
    pub grid: (usize, usize),
    pub input: usize,
    pub width: usize,
    pub dilation: usize,
    /// Output channels: foreground classes plus background (channel 0).
    pub out_channels: usize,
}

/// im2col table for a 3x3 convolution with the given dilation and zero
/// padding that preserves the grid: row `p`, column `tap * channels + c`.
pub fn im2col_index(grid: (usize, usize), channels: usize, dilation: usize) -> Vec<usize> {
    let (h, w) = grid;
    let d = dilation as isize;
    let mut index = Vec::with_capacity(h * w * 9 * channels);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in [-d, 0, d] {
                for dx in [-d, 0, d] {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                    for c in 0..channels {
                        index.push(if inside {
                            (sy as usize * w + sx as usize) * channels + c
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    index
}

impl DecoderShape {
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        store.insert(
            "dec.c1.w",
            Matrix::trunc_normal(9 * self.input, self.width, std, rng),
        );
        store.insert("dec.c1.b", Matrix::zeros(1, self.width));
        store.insert(
            "dec.c2.w",
            Matrix::trunc_normal(9 * self.width, self.width, std, rng),
        );
        store.insert("dec.c2.b", Matrix::zeros(1, self.width));
        store.insert(
            "dec.out.w",
            Matrix::trunc_normal(self.width, self.out_channels, std, rng),
        );
        store.insert("dec.out.b", Matrix::zeros(1, self.out_channels));
    }

    fn conv3x3(&self, g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
        let (n, c) = g.shape(x);
        let cols = g.gather(x, n, 9 * c, im2col_index(self.grid, c, self.dilation))?;
        let w = g.param(store, &format!("{name}.w"))?;
        let b = g.param(store, &format!("{name}.b"))?;
        g.linear(cols, w, Some(b))
    }

    /// Two dilated 3x3 convolutions with ReLU, then a 1x1 classifier.
    /// Input `N x D` tokens on the grid; output `N x (C + 1)` logits.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        if g.shape(z) != (self.grid.0 * self.grid.1, self.input) {
            return Err(FsrError::Shape(format!(
                "decoder input {:?} does not match grid {:?}",
                g.shape(z),
                self.grid
            )));
        }
        let h = self.conv3x3(g, store, z, "dec.c1")?;
        let h = g.relu(h);
        let h = self.conv3x3(g, store, h, "dec.c2")?;
        let h = g.relu(h);
        let w = g.param(store, "dec.out.w")?;
        let b = g.param(store, "dec.out.b")?;
        g.linear(h, w, Some(b))
    }
}

pub fn decode_segmentation(z: &Matrix, shape: &DecoderShape, store: &ParamStore) -> Result<Matrix> {
    let mut g = Graph::new(false);
    let x = g.constant(z.clone());
    let out = shape.forward_graph(&mut g, store, x)?;
    Ok(g.value(out).clone())
}

/// Multi-label soft margin loss: mean over classes of
/// `softplus(x) − y·x = −[y log σ(x) + (1 − y) log(1 − σ(x))]`.
pub fn loss_cls_graph(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let c = g.shape(logits).1;
    if labels.len() != c || g.shape(logits).0 != 1 {
        return Err(FsrError::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            g.shape(logits)
        )));
    }
    let y = Matrix::row_vector(labels.iter().map(|&l| l as f64).collect());
    let sp = g.softplus(logits);
    let yx = g.mul_const(logits, y)?;
    let d = g.sub(sp, yx)?;
    Ok(g.mean_all(d))
}

pub fn loss_cls(logits: &[f64], labels: &[u8]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| softplus(x) - y as f64 * x)
        .sum::<f64>()
        / logits.len().max(1) as f64
}

fn seg_targets(rows: usize, cols: usize, pseudo: &PseudoLabel) -> Result<(Matrix, usize)> {
    if pseudo.labels.len() != rows {
        return Err(FsrError::Shape(format!(
            "{} pseudo labels for {rows} positions",
            pseudo.labels.len()
        )));
    }
    let valid = pseudo.labels.iter().filter(|&&l| l != IGNORE).count();
    let mut weights = Matrix::zeros(rows, cols);
    for (i, &l) in pseudo.labels.iter().enumerate() {
        if l != IGNORE {
            if l as usize >= cols {
                return Err(FsrError::Shape(format!(
                    "pseudo label {l} outside {cols} channels"
                )));
            }
            weights[(i, l as usize)] = -1.0 / valid as f64;
        }
    }
    Ok((weights, valid))
}

/// Mean cross-entropy over non-IGNORE positions; zero when nothing is labeled.
pub fn loss_seg_graph(g: &mut Graph, seg_logits: Var, pseudo: &PseudoLabel) -> Result<Var> {
    let (rows, cols) = g.shape(seg_logits);
    let (weights, valid) = seg_targets(rows, cols, pseudo)?;
    if valid == 0 {
        log::warn!("segmentation loss: every position is IGNORE");
        return Ok(g.constant(Matrix::zeros(1, 1)));
    }
    let lp = g.log_softmax(seg_logits);
    let prod = g.mul_const(lp, weights)?;
    Ok(g.sum_all(prod))
}

pub fn loss_seg(seg_logits: &Matrix, pseudo: &PseudoLabel) -> Result<f64> {
    let mut g = Graph::new(false);
    let x = g.constant(seg_logits.clone());
    let l = loss_seg_graph(&mut g, x, pseudo)?;
    Ok(g.scalar(l))
}

/// A token pair and its affinity target (1 same label, 0 different).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinityPair {
    pub i: usize,
    pub j: usize,
    pub target: f64,
}

/// All unordered pairs of labeled tokens, or `max_pairs` uniform draws of
/// distinct labeled tokens when there are more.
pub fn sample_affinity_pairs<R: Rng + ?Sized>(
    pseudo: &PseudoLabel,
    max_pairs: usize,
    rng: &mut R,
) -> Vec<AffinityPair> {
    let valid: Vec<usize> = (0..pseudo.labels.len())
        .filter(|&i| pseudo.labels[i] != IGNORE)
        .collect();
    let n = valid.len();
    let pair = |i: usize, j: usize| AffinityPair {
        i,
        j,
        target: if pseudo.labels[i] == pseudo.labels[j] {
            1.0
        } else {
            0.0
        },
    };
    if n < 2 || max_pairs == 0 {
        return Vec::new();
    }
    if n * (n - 1) / 2 <= max_pairs {
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                out.push(pair(valid[a], valid[b]));
            }
        }
        return out;
    }
    (0..max_pairs)
        .map(|_| {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            pair(valid[a], valid[b])
        })
        .collect()
}

/// Mean of `(cos(z_i, z_j) − target)²` over the pairs; zero for no pairs.
pub fn loss_aff_graph(g: &mut Graph, tokens: Var, pairs: &[AffinityPair]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Matrix::zeros(1, 1)));
    }
    let (n, d) = g.shape(tokens);
    if pairs.iter().any(|p| p.i >= n || p.j >= n) {
        return Err(FsrError::Shape("affinity pair index out of range".into()));
    }
    let unit = g.l2_normalize_rows(tokens);
    let left: Vec<usize> = pairs.iter().map(|p| p.i).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.j).collect();
    let a = g.select_rows(unit, &left)?;
    let b = g.select_rows(unit, &right)?;
    let prod = g.mul(a, b)?;
    let ones = g.constant(Matrix::filled(d, 1, 1.0));
    let cos = g.matmul(prod, ones)?;
    let targets = g.constant(Matrix::from_vec(
        pairs.len(),
        1,
        pairs.iter().map(|p| p.target).collect(),
    )?);
    let diff = g.sub(cos, targets)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

pub fn loss_aff(tokens: &Matrix, pairs: &[AffinityPair]) -> Result<f64> {
    let mut g = Graph::new(false);
    let t = g.constant(tokens.clone());
    let l = loss_aff_graph(&mut g, t, pairs)?;
    Ok(g.scalar(l))
}

/// Per-term losses and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub aff: f64,
    pub seg: f64,
    pub u: f64,
    pub c: f64,
    pub total: f64,
    pub lambdas: [f64; 5],
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 5] {
        [self.cls, self.aff, self.seg, self.u, self.c]
    }
}

/// `λ₁·cls + λ₂·aff + λ₃·seg + λ₄·u + λ₅·c`.
pub fn total_loss(parts: [f64; 5], lambdas: [f64; 5]) -> LossBreakdown {
    let total = parts.iter().zip(&lambdas).map(|(p, l)| p * l).sum();
    LossBreakdown {
        cls: parts[0],
        aff: parts[1],
        seg: parts[2],
        u: parts[3],
        c: parts[4],
        total,
        lambdas,
    }
}
