//! Run configuration: dataset, model, training, and evaluation sections,
//! loaded from JSON with flat dotted-key overrides (`train.lambda4=0`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{FsrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub image_size: usize,
    pub patch_size: usize,
    pub class_names: Vec<String>,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
    /// Objects drawn per image, inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/shapes"),
            image_size: 64,
            patch_size: 8,
            class_names: vec!["circle".into(), "square".into(), "triangle".into()],
            train_count: 500,
            val_count: 100,
            seed: 0,
            min_objects: 1,
            max_objects: 3,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(FsrError::Config("dataset needs at least one class".into()));
        }
        if self.class_names.len() > 254 {
            return Err(FsrError::Config(
                "at most 254 classes fit the u8 mask format".into(),
            ));
        }
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(FsrError::Config(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(FsrError::Config(format!(
                "object count range [{}, {}] is invalid",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub agg_blocks: usize,
    pub agg_ff_dim: usize,
    pub proj_hidden: usize,
    pub proj_bottleneck: usize,
    /// Projector output dimension `K`.
    pub proj_out: usize,
    pub decoder_dim: usize,
    pub decoder_dilation: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            heads: 4,
            ff_dim: 128,
            agg_blocks: 2,
            agg_ff_dim: 128,
            proj_hidden: 256,
            proj_bottleneck: 64,
            proj_out: 256,
            decoder_dim: 64,
            decoder_dilation: 2,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(FsrError::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.agg_blocks == 0 {
            return Err(FsrError::Config("agg_blocks must be at least 1".into()));
        }
        if [
            self.ff_dim,
            self.agg_ff_dim,
            self.proj_hidden,
            self.proj_bottleneck,
            self.proj_out,
            self.decoder_dim,
        ]
        .contains(&0)
        {
            return Err(FsrError::Config("layer widths must be positive".into()));
        }
        if self.init_std <= 0.0 {
            return Err(FsrError::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Polynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingStrategy {
    Uncertain,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Mca,
    Gap,
    Gmp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub lr_schedule: LrSchedule,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Cosine-decay `lambda4` and `lambda5` to zero over training.
    pub decay_distill_weights: bool,
    pub mask_ratio: f64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub proj_momentum_start: f64,
    pub proj_momentum_end: f64,
    pub encoder_momentum: f64,
    pub masking: MaskingStrategy,
    pub aggregation: AggregationKind,
    pub crop_size: usize,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub aff_max_pairs: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            lr: 6e-5,
            min_lr: 0.0,
            warmup_iters: 1500,
            lr_schedule: LrSchedule::Cosine,
            poly_power: 0.9,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 0.1,
            lambda4: 0.1,
            lambda5: 0.1,
            decay_distill_weights: false,
            mask_ratio: 0.4,
            beta_low: 0.2,
            beta_high: 0.7,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            proj_momentum_start: 0.996,
            proj_momentum_end: 1.0,
            encoder_momentum: 0.0,
            masking: MaskingStrategy::Uncertain,
            aggregation: AggregationKind::Mca,
            crop_size: 64,
            crop_scale_min: 0.32,
            crop_scale_max: 1.0,
            aff_max_pairs: 512,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> [f64; 5] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
        ]
    }

    /// The self-reinforcement branch (masked view, teacher, projector) only
    /// runs when one of its losses is weighted.
    pub fn distillation_enabled(&self) -> bool {
        self.lambda4 != 0.0 || self.lambda5 != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(FsrError::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(FsrError::Config(
                "iterations and batch_size must be positive".into(),
            ));
        }
        if self.warmup_iters > self.iterations {
            return Err(FsrError::Config(format!(
                "warmup_iters {} exceeds iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(FsrError::Config(format!(
                "mask_ratio {} must lie in (0, 1)",
                self.mask_ratio
            )));
        }
        if !(0.0 < self.beta_low && self.beta_low < self.beta_high && self.beta_high < 1.0) {
            return Err(FsrError::Config(format!(
                "thresholds must satisfy 0 < beta_low ({}) < beta_high ({}) < 1",
                self.beta_low, self.beta_high
            )));
        }
        if self.tau_student <= 0.0 || self.tau_teacher <= 0.0 {
            return Err(FsrError::Config("temperatures must be positive".into()));
        }
        if self.lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(FsrError::Config("need 0 <= min_lr <= lr and lr > 0".into()));
        }
        unit("center_momentum", self.center_momentum)?;
        unit("proj_momentum_start", self.proj_momentum_start)?;
        unit("proj_momentum_end", self.proj_momentum_end)?;
        unit("encoder_momentum", self.encoder_momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if self.lambdas().iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(FsrError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0 < self.crop_scale_min
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(FsrError::Config(
                "crop scale range must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = FsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(FsrError::Config(format!(
                "unknown split '{other}' (expected train or val)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Cap on evaluated images; 0 means the whole split.
    pub max_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            max_images: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsrError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| FsrError::json(path, e))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !self.train.crop_size.is_multiple_of(self.data.patch_size) {
            return Err(FsrError::Config(format!(
                "crop_size {} is not a multiple of patch_size {}",
                self.train.crop_size, self.data.patch_size
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` override. Keys are dotted paths
    /// (`train.lambda4`); a bare leaf name is accepted when it is unique
    /// across sections. Values parse as JSON, falling back to a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| FsrError::Config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let path = resolve_key(&tree, key)?;
        let value = serde_json::from_str::<Value>(raw.trim())
            .unwrap_or_else(|_| Value::String(raw.trim().into()));
        let mut slot = &mut tree;
        for part in &path {
            slot = slot.get_mut(part.as_str()).expect("resolved path exists");
        }
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| FsrError::Config(format!("override '{assignment}': {e}")))?;
        Ok(())
    }

    /// Stable digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.len() > 1 {
        let mut node = tree;
        for p in &parts {
            node = node
                .get(p.as_str())
                .ok_or_else(|| FsrError::Config(format!("unknown config key '{key}'")))?;
        }
        return Ok(parts);
    }
    let sections = tree.as_object().expect("config is an object");
    let hits: Vec<Vec<String>> = sections
        .iter()
        .filter(|(_, v)| v.get(key).is_some())
        .map(|(s, _)| vec![s.clone(), key.to_string()])
        .collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap()),
        0 => Err(FsrError::Config(format!("unknown config key '{key}'"))),
        _ => Err(FsrError::Config(format!(
            "config key '{key}' is ambiguous; use section.key"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn bare_and_dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("lambda4=0").unwrap();
        cfg.apply_override("train.lambda5=0.0").unwrap();
        cfg.apply_override("aggregation=gap").unwrap();
        assert_eq!(cfg.train.lambda4, 0.0);
        assert_eq!(cfg.train.lambda5, 0.0);
        assert_eq!(cfg.train.aggregation, AggregationKind::Gap);
        let mut expected = RunConfig::default();
        expected.train.lambda4 = 0.0;
        expected.train.lambda5 = 0.0;
        expected.train.aggregation = AggregationKind::Gap;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn unknown_and_ambiguous_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("nope=1").is_err());
        assert!(cfg.apply_override("train.nope=1").is_err());
        // patch_size exists only in data; seed exists in data and train.
        assert!(cfg.apply_override("seed=3").is_err());
        assert!(cfg.apply_override("lambda4").is_err());
        assert!(cfg.apply_override("masking=sideways").is_err());
    }

    #[test]
    fn unknown_json_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"lamda4": 0}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn validation_catches_bad_thresholds() {
        let mut cfg = RunConfig::default();
        cfg.train.beta_low = 0.8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.warmup_iters = cfg.train.iterations + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 60;
        assert!(cfg.validate().is_err());
    }
}
