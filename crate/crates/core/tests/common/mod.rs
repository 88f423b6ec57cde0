#![allow(dead_code)]

use std::path::Path;

use fsr_core::config::{ModelConfig, RunConfig};
use fsr_core::synthdata::generate_dataset;
use fsr_core::{Dataset, Split};

/// 16x16 images with 4-pixel patches (16 tokens), two classes, and an
/// 8-wide model with a 5-way projector.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.root = root.to_path_buf();
    cfg.data.image_size = 16;
    cfg.data.patch_size = 4;
    cfg.data.class_names = vec!["circle".into(), "square".into()];
    cfg.data.train_count = 12;
    cfg.data.val_count = 4;
    cfg.model = tiny_model();
    cfg.train.crop_size = 16;
    cfg.train.batch_size = 2;
    cfg.train.iterations = 60;
    cfg.train.warmup_iters = 5;
    cfg.train.lr = 1e-3;
    cfg
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        depth: 2,
        heads: 2,
        ff_dim: 16,
        agg_blocks: 2,
        agg_ff_dim: 16,
        proj_hidden: 12,
        proj_bottleneck: 6,
        proj_out: 5,
        decoder_dim: 6,
        decoder_dilation: 2,
        init_std: 0.2,
    }
}

pub fn tiny_dataset(cfg: &RunConfig) -> Dataset {
    generate_dataset(&cfg.data).unwrap();
    Dataset::load(&cfg.data.root, Split::Train).unwrap()
}
