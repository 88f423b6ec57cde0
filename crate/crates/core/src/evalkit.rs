//! Evaluation and analysis: confusion matrices and mIoU for pseudo and
//! predicted labels, attention entropy, linear CKA, and CAM export.
//!
//! Both label kinds are scored at token-grid resolution against the
//! nearest-neighbor-downsampled ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::{derive_pseudo_labels, IGNORE};
use crate::config::Split;
use crate::encoder::transformer_forward;
use crate::encoder::{patchify_embed, TokenEmbeddings};
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::synthdata::{Dataset, LabeledImage, RgbImage};
use crate::tensor::Matrix;
use crate::trainer::Model;

/// `(C + 1) x (C + 1)` counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Adds a pair of label maps; positions where either side is IGNORE are
    /// skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(FsrError::Shape(format!(
                "ground truth has {} labels, prediction {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE || p == IGNORE {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(FsrError::Shape(format!(
                    "label {} outside {} classes",
                    g.max(p),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Mean IoU in percent over classes with a nonzero union.
    pub miou: f64,
    /// Per-class IoU in percent; `None` when the class never occurs.
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(conf: &ConfusionMatrix) -> MiouResult {
    let n = conf.classes;
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = conf.get(c, c);
        let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| conf.get(g, c)).sum();
        let union = tp + fn_ + fp;
        per_class.push((union > 0).then(|| 100.0 * tp as f64 / union as f64));
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    MiouResult { miou, per_class }
}

/// Per head: mean over query rows of `−Σ_j a_ij ln a_ij`.
pub fn attention_entropy(heads: &[Matrix]) -> Vec<f64> {
    heads
        .iter()
        .map(|a| {
            let total: f64 = a
                .iter_rows()
                .map(|row| {
                    -row.iter()
                        .filter(|&&p| p > 0.0)
                        .map(|&p| p * p.ln())
                        .sum::<f64>()
                })
                .sum();
            total / a.rows().max(1) as f64
        })
        .collect()
}

fn center_columns(x: &Matrix) -> Matrix {
    let mean = x.mean_rows();
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(mean.as_slice()) {
            *v -= m;
        }
    }
    out
}

/// Linear CKA `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F · ‖Ycᵀ Yc‖_F)` with column-centered
/// inputs; 0 when either side is constant.
pub fn cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(FsrError::Shape(format!(
            "CKA needs equal row counts, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let xx = xc.t_matmul(&xc)?.frobenius_sq().sqrt();
    let yy = yc.t_matmul(&yc)?.frobenius_sq().sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (xx * yy))
}

/// Nearest-neighbor downsampling of an `h x w` label map to `gh x gw`,
/// sampling each cell's center pixel.
pub fn downsample_nearest(labels: &[u8], h: usize, w: usize, gh: usize, gw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        let y = ((2 * gy + 1) * h / (2 * gh)).min(h - 1);
        for gx in 0..gw {
            let x = ((2 * gx + 1) * w / (2 * gw)).min(w - 1);
            out.push(labels[y * w + x]);
        }
    }
    out
}

/// The full image resized to the model's view size.
pub fn eval_view(model: &Model, img: &RgbImage) -> RgbImage {
    let s = model.view_size();
    if img.height == s && img.width == s {
        img.clone()
    } else {
        img.resize_window(0, 0, img.height, img.width, s, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub pseudo: Option<f64>,
    pub pred: Option<f64>,
}

/// Metrics report written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub miou_pseudo: f64,
    pub miou_pred: f64,
    pub per_class: Vec<ClassScore>,
    pub images: usize,
}

/// Pseudo-label and decoder-prediction labels for one image at grid resolution.
pub fn grid_labels(
    model: &Model,
    store: &ParamStore,
    img: &LabeledImage,
    beta_low: f64,
    beta_high: f64,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let pred = model.predict(store, &eval_view(model, &img.pixels))?;
    let pseudo = derive_pseudo_labels(&pred.cam, &img.labels, beta_low, beta_high)?;
    let seg = pred
        .seg_logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok((pseudo.labels, seg))
}

/// Scores the first `max_images` images of `dataset` (all when 0).
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    class_names: &[String],
    beta_low: f64,
    beta_high: f64,
    max_images: usize,
) -> Result<EvalReport> {
    let classes = model.num_classes() + 1;
    let (gh, gw) = model.grid();
    let mut conf_pseudo = ConfusionMatrix::new(classes);
    let mut conf_pred = ConfusionMatrix::new(classes);
    let limit = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    for img in &dataset.images[..limit] {
        let gt = img.gt_mask.as_ref().ok_or_else(|| FsrError::Dataset {
            path: PathBuf::from(format!("image {}", img.id)),
            reason: "no ground-truth mask loaded for this split".into(),
        })?;
        let gt = downsample_nearest(gt, img.pixels.height, img.pixels.width, gh, gw);
        let (pseudo, seg) = grid_labels(model, store, img, beta_low, beta_high)?;
        conf_pseudo.add(&gt, &pseudo)?;
        conf_pred.add(&gt, &seg)?;
    }
    let (p, q) = (miou(&conf_pseudo), miou(&conf_pred));
    let per_class = (0..classes)
        .map(|c| ClassScore {
            class: if c == 0 {
                "background".into()
            } else {
                class_names
                    .get(c - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class{c}"))
            },
            pseudo: p.per_class[c],
            pred: q.per_class[c],
        })
        .collect();
    Ok(EvalReport {
        split: dataset.split,
        miou_pseudo: p.miou,
        miou_pred: q.miou,
        per_class,
        images: limit,
    })
}

fn encode(
    model: &Model,
    store: &ParamStore,
    img: &RgbImage,
) -> Result<(Vec<Matrix>, Vec<Vec<Matrix>>)> {
    let view = eval_view(model, img);
    let embedded = patchify_embed(&view, &model.encoder, store)?;
    let mut layers = vec![embedded.tokens.clone()];
    let mut attention = Vec::with_capacity(model.encoder.depth);
    let mut current: TokenEmbeddings = embedded;
    // One block at a time so every intermediate embedding is available.
    let single = crate::encoder::EncoderShape {
        depth: 1,
        ..model.encoder.clone()
    };
    for l in 0..model.encoder.depth {
        let mut block = ParamStore::new();
        for (name, v) in store.iter() {
            let prefix = format!("enc.l{l}.");
            if let Some(rest) = name.strip_prefix(&prefix) {
                block.insert(format!("enc.l0.{rest}"), v.clone());
            }
        }
        let (next, attn) = transformer_forward(&current, &single, &block)?;
        layers.push(next.tokens.clone());
        attention.push(attn.into_iter().next().expect("one block"));
        current = next;
    }
    Ok((layers, attention))
}

/// Attention entropy per layer and head, averaged over query rows and then
/// over the first `max_images` images.
pub fn entropy_profile(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    max_images: usize,
) -> Result<Vec<Vec<f64>>> {
    let limit = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    let mut sum = vec![vec![0.0; model.encoder.heads]; model.encoder.depth];
    for img in &dataset.images[..limit] {
        let (_, attention) = encode(model, store, &img.pixels)?;
        for (l, heads) in attention.iter().enumerate() {
            for (h, e) in attention_entropy(heads).into_iter().enumerate() {
                sum[l][h] += e;
            }
        }
    }
    for row in &mut sum {
        row.iter_mut().for_each(|v| *v /= limit.max(1) as f64);
    }
    Ok(sum)
}

/// Linear CKA between every pair of encoder representations (patch
/// embeddings and each block output), tokens of all images stacked.
pub fn cka_matrix(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    max_images: usize,
) -> Result<Vec<Vec<f64>>> {
    let limit = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    let depth = model.encoder.depth;
    let mut stacked: Vec<Vec<Matrix>> = vec![Vec::new(); depth + 1];
    for img in &dataset.images[..limit] {
        let (layers, _) = encode(model, store, &img.pixels)?;
        for (l, m) in layers.into_iter().enumerate() {
            stacked[l].push(m);
        }
    }
    let reps: Vec<Matrix> = stacked
        .iter()
        .map(|parts| Matrix::vstack(&parts.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; depth + 1]; depth + 1];
    for i in 0..=depth {
        for j in i..=depth {
            let v = cka(&reps[i], &reps[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

fn save_gray(path: &Path, values: &[u8], h: usize, w: usize, upscale: usize) -> Result<()> {
    let mut buf = image::GrayImage::new((w * upscale) as u32, (h * upscale) as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        px.0 = [values[(y as usize / upscale) * w + x as usize / upscale]];
    }
    buf.save(path).map_err(|e| FsrError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FsrError::io(path, e))
}

/// Writes, per image, one grayscale PNG per class CAM, an indexed pseudo
/// label PNG (label value per pixel, IGNORE = 255), and the raw arrays:
/// `cam_<id>.bin` (`N x C` little-endian f32) and `pseudo_<id>.bin` (u8).
/// Returns the number of images exported.
pub fn export_cam_maps(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    outdir: &Path,
    beta_low: f64,
    beta_high: f64,
    max_images: usize,
) -> Result<usize> {
    fs::create_dir_all(outdir).map_err(|e| FsrError::io(outdir, e))?;
    let limit = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    let (gh, gw) = model.grid();
    let up = model.encoder.patch_size;
    for img in &dataset.images[..limit] {
        let pred = model.predict(store, &eval_view(model, &img.pixels))?;
        let pseudo = derive_pseudo_labels(&pred.cam, &img.labels, beta_low, beta_high)?;
        let id = img.id;
        let mut raw = Vec::with_capacity(pred.cam.scores.len() * 4);
        for &v in pred.cam.scores.as_slice() {
            raw.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_bytes(&outdir.join(format!("cam_{id:06}.bin")), &raw)?;
        write_bytes(&outdir.join(format!("pseudo_{id:06}.bin")), &pseudo.labels)?;
        for c in 0..model.num_classes() {
            let heat: Vec<u8> = (0..gh * gw)
                .map(|i| (pred.cam.scores[(i, c)] * 255.0).round() as u8)
                .collect();
            save_gray(
                &outdir.join(format!("cam_{id:06}_c{}.png", c + 1)),
                &heat,
                gh,
                gw,
                up,
            )?;
        }
        save_gray(
            &outdir.join(format!("pseudo_{id:06}.png")),
            &pseudo.labels,
            gh,
            gw,
            up,
        )?;
    }
    Ok(limit)
}
