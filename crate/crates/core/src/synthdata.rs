//! Synthetic multi-object shapes corpus with image-level labels, plus the
//! two-view augmentation used by training.
//!
//! Each image is a textured noise background with one or more filled shapes
//! (class 1 = circle, 2 = square, 3 = triangle by default). Shapes may
//! overlap; later shapes occlude earlier ones. The label vector is derived
//! from the final mask, so a fully occluded shape does not count.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, Split};
use crate::error::{FsrError, Result};

/// Row-major `height x width x 3` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(y, self.width - 1 - x, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    /// Bilinear resample of the window `(top, left, h, w)` to `out_h x out_w`,
    /// half-pixel centers, edges clamped.
    pub fn resize_window(
        &self,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let mut out = Self::zeros(out_h, out_w);
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let p = |yy: usize, xx: usize| self.get(top + yy, left + xx, c) as f64;
                    let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                        + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                    out.set(oy, ox, c, v as f32);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub pixels: RgbImage,
    /// Multi-hot over the foreground classes.
    pub labels: Vec<u8>,
    /// Per-pixel class ids (0 = background); only loaded for evaluation splits.
    pub gt_mask: Option<Vec<u8>>,
}

impl LabeledImage {
    pub fn present_classes(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 1).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: RgbImage,
    pub view2: RgbImage,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub image_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, half: f64 },
    Triangle { cx: f64, cy: f64, half: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { cx, cy, half } => {
                // Apex up, base at cy + half.
                let top = cy - half;
                let bottom = cy + half;
                if y < top || y > bottom {
                    return false;
                }
                let t = (y - top) / (bottom - top);
                (x - cx).abs() <= t * half
            }
        }
    }
}

fn random_shape(class: usize, size: usize, rng: &mut impl Rng) -> Shape {
    let s = size as f64;
    let half = rng.gen_range(0.12 * s..0.28 * s);
    let cx = rng.gen_range(half..s - half);
    let cy = rng.gen_range(half..s - half);
    match class % 3 {
        1 => Shape::Circle { cx, cy, r: half },
        2 => Shape::Square {
            cx,
            cy,
            half: half * 0.9,
        },
        _ => Shape::Triangle {
            cx,
            cy,
            half: half * 1.1,
        },
    }
}

/// Saturated color around a class-specific hue, so color is a strong but
/// imperfect cue (hue, saturation, and value all vary per object).
fn object_color(class: usize, classes: usize, rng: &mut impl Rng) -> [f32; 3] {
    let hue = ((class - 1) as f32 / classes as f32 + rng.gen_range(-0.06..0.06)).rem_euclid(1.0);
    hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders image `index`; a pure function of `(config, seed, index)`.
pub fn render_image(config: &DatasetConfig, split: Split, index: usize) -> LabeledImage {
    let split_salt = match split {
        Split::Train => 0x5452_4149_4e00_0000u64,
        Split::Val => 0x5641_4c00_0000_0000u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        config.seed ^ split_salt ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let size = config.image_size;
    let classes = config.num_classes();
    loop {
        let mut img = RgbImage::zeros(size, size);
        let mut mask = vec![0u8; size * size];
        // Textured background: a smooth color gradient plus per-pixel noise.
        let base: [f32; 3] = [
            rng.gen_range(0.3..0.6),
            rng.gen_range(0.3..0.6),
            rng.gen_range(0.3..0.6),
        ];
        let grad: [f32; 3] = [
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ];
        let freq: f32 = rng.gen_range(0.1..0.4);
        for y in 0..size {
            for x in 0..size {
                let wave = ((x as f32 * freq).sin() * (y as f32 * freq * 0.7).cos()) * 0.06;
                for c in 0..3 {
                    let v = base[c]
                        + grad[c] * (y as f32 / size as f32 - 0.5)
                        + wave
                        + rng.gen_range(-0.08..0.08);
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
        let count = rng.gen_range(config.min_objects..=config.max_objects);
        for _ in 0..count {
            let class = rng.gen_range(1..=classes);
            let shape = random_shape(class, size, &mut rng);
            let color = object_color(class, classes, &mut rng);
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        mask[y * size + x] = class as u8;
                        for (c, &col) in color.iter().enumerate() {
                            let v = col + rng.gen_range(-0.04..0.04);
                            img.set(y, x, c, v.clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
        let mut labels = vec![0u8; classes];
        for &m in &mask {
            if m > 0 {
                labels[m as usize - 1] = 1;
            }
        }
        if labels.contains(&1) {
            return LabeledImage {
                id: index,
                pixels: img,
                labels,
                gt_mask: Some(mask),
            };
        }
    }
}

fn image_name(id: usize) -> String {
    format!("IMG_{id:06}.bin")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FsrError::io(path, e))
}

/// Writes both splits plus `meta.json` under `config.root`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<PathBuf> {
    config.validate()?;
    let root = &config.root;
    for (split, count) in [
        (Split::Train, config.train_count),
        (Split::Val, config.val_count),
    ] {
        let dir = root.join(split.dir_name());
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| FsrError::io(dir.join(sub), e))?;
        }
        let label_path = dir.join("labels.jsonl");
        let mut labels = Vec::new();
        for index in 0..count {
            let img = render_image(config, split, index);
            let bytes: Vec<u8> = img
                .pixels
                .data
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            write_file(&dir.join("images").join(image_name(index)), &bytes)?;
            write_file(
                &dir.join("masks").join(image_name(index)),
                img.gt_mask.as_deref().unwrap_or(&[]),
            )?;
            let row = serde_json::to_string(&LabelRow {
                id: index,
                labels: img.labels,
            })
            .expect("row serializes");
            writeln!(labels, "{row}").expect("vec write");
        }
        write_file(&label_path, &labels)?;
    }
    let meta = DatasetMeta {
        image_size: config.image_size,
        num_classes: config.num_classes(),
        class_names: config.class_names.clone(),
        seed: config.seed,
    };
    let meta_path = root.join("meta.json");
    write_file(
        &meta_path,
        serde_json::to_string_pretty(&meta)
            .expect("meta serializes")
            .as_bytes(),
    )?;
    log::info!(
        "wrote {} train / {} val images to {}",
        config.train_count,
        config.val_count,
        root.display()
    );
    Ok(root.clone())
}

pub struct Dataset {
    pub meta: DatasetMeta,
    pub split: Split,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    /// Loads a split. Ground-truth masks are read only for the validation
    /// split; training sees image-level labels alone.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| FsrError::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| FsrError::json(&meta_path, e))?;
        let dir = root.join(split.dir_name());
        let label_path = dir.join("labels.jsonl");
        let file = fs::File::open(&label_path).map_err(|e| FsrError::io(&label_path, e))?;
        let size = meta.image_size;
        let mut images = Vec::new();
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FsrError::io(&label_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| FsrError::Dataset {
                path: label_path.clone(),
                reason: format!("line {}: {reason}", line_no + 1),
            };
            let row: LabelRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if row.labels.len() != meta.num_classes {
                return Err(bad(format!(
                    "id {} has {} labels, expected {}",
                    row.id,
                    row.labels.len(),
                    meta.num_classes
                )));
            }
            if row.labels.iter().any(|&l| l > 1) || !row.labels.contains(&1) {
                return Err(bad(format!(
                    "id {} labels {:?} are not a non-empty multi-hot vector",
                    row.id, row.labels
                )));
            }
            let img_path = dir.join("images").join(image_name(row.id));
            let bytes = fs::read(&img_path).map_err(|e| FsrError::io(&img_path, e))?;
            if bytes.len() != size * size * 3 * 4 {
                return Err(FsrError::Dataset {
                    path: img_path,
                    reason: format!("expected {} bytes, found {}", size * size * 12, bytes.len()),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let gt_mask = if split == Split::Val {
                let mask_path = dir.join("masks").join(image_name(row.id));
                let mask = fs::read(&mask_path).map_err(|e| FsrError::io(&mask_path, e))?;
                if mask.len() != size * size || mask.iter().any(|&m| m as usize > meta.num_classes)
                {
                    return Err(FsrError::Dataset {
                        path: mask_path,
                        reason: "malformed mask".into(),
                    });
                }
                Some(mask)
            } else {
                None
            };
            images.push(LabeledImage {
                id: row.id,
                pixels: RgbImage {
                    height: size,
                    width: size,
                    data,
                },
                labels: row.labels,
                gt_mask,
            });
        }
        Ok(Self {
            meta,
            split,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Visiting order for one epoch: shuffled for training (by `seed` and
    /// `epoch`), file order for evaluation.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        if self.split == Split::Train {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ epoch);
            order.shuffle(&mut rng);
        }
        order
    }
}

/// Parameters of one augmentation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub out_size: usize,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_prob: f64,
    pub jitter: bool,
    pub jitter_gain: (f32, f32),
    pub jitter_offset: (f32, f32),
}

impl AugmentConfig {
    pub fn standard(out_size: usize, scale_min: f64, scale_max: f64) -> Self {
        Self {
            out_size,
            scale: (scale_min, scale_max),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter: true,
            jitter_gain: (0.8, 1.2),
            jitter_offset: (-0.1, 0.1),
        }
    }

    /// Resize only: full-image crop, no flip, no jitter.
    pub fn identity(out_size: usize) -> Self {
        Self {
            out_size,
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: false,
            jitter_gain: (1.0, 1.0),
            jitter_offset: (0.0, 0.0),
        }
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Crop window `(top, left, h, w)` following the usual random-resized-crop
/// recipe: ten attempts at a random area/aspect, then a centered fallback.
fn crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * sample_range(rng, cfg.scale);
        let aspect = sample_range(rng, (log_lo, log_hi)).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < cfg.ratio.0 {
        let w = width;
        (
            ((w as f64 / cfg.ratio.0).round() as usize).clamp(1, height),
            w,
        )
    } else if in_ratio > cfg.ratio.1 {
        let h = height;
        (
            h,
            ((h as f64 * cfg.ratio.1).round() as usize).clamp(1, width),
        )
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// One draw of crop → flip → color jitter.
pub fn augment_view<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> RgbImage {
    let (top, left, h, w) = crop_window(img.height, img.width, cfg, rng);
    let mut view = img.resize_window(top, left, h, w, cfg.out_size, cfg.out_size);
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        view = view.flip_horizontal();
    }
    if cfg.jitter {
        let mut gain = [1.0f32; 3];
        let mut offset = [0.0f32; 3];
        for c in 0..3 {
            gain[c] = rng.gen_range(cfg.jitter_gain.0..=cfg.jitter_gain.1);
            offset[c] = rng.gen_range(cfg.jitter_offset.0..=cfg.jitter_offset.1);
        }
        for (i, v) in view.data.iter_mut().enumerate() {
            let c = i % 3;
            *v = (*v * gain[c] + offset[c]).clamp(0.0, 1.0);
        }
    }
    view
}

/// Two independent augmentation draws of the same image.
pub fn augment_two_views<R: Rng + ?Sized>(
    img: &LabeledImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> ViewPair {
    let view1 = augment_view(&img.pixels, cfg, rng);
    let view2 = augment_view(&img.pixels, cfg, rng);
    ViewPair {
        view1,
        view2,
        labels: img.labels.clone(),
    }
}
