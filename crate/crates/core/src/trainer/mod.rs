//! Training: model wiring, the per-step objective, optimization, teacher
//! maintenance, and checkpoints.
//!
//! A step is split into discrete decisions (pseudo labels, the token mask,
//! affinity pairs, teacher targets) and a differentiable objective that is a
//! function of the student parameters given those decisions. Holding the
//! decisions fixed makes the objective smooth, which is what the gradient
//! check relies on.

mod checkpoint;
mod optim;
mod schedule;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationShape;
use crate::autograd::{Graph, Var};
use crate::cam::{cam_from_logits, derive_pseudo_labels, Cam, PseudoLabel};
use crate::config::{AggregationKind, MaskingStrategy, ModelConfig, RunConfig, TrainConfig};
use crate::decoder::{
    loss_aff_graph, loss_cls_graph, loss_seg_graph, sample_affinity_pairs, total_loss,
    AffinityPair, DecoderShape, LossBreakdown,
};
use crate::distill::{
    ema_update, is_teacher_param, loss_certain_graph, loss_uncertain_graph, student_log_probs,
    tempered_softmax, update_center, Distribution, ProjectorShape, TeacherState,
};
use crate::encoder::{patchify, EncoderShape};
use crate::error::{FsrError, Result};
use crate::masking::{random_mask, score_uncertainty, select_mask, MaskPair};
use crate::params::ParamStore;
use crate::synthdata::{augment_two_views, AugmentConfig, Dataset, RgbImage, ViewPair};
use crate::tensor::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use optim::AdamW;
pub use schedule::{lambdas_at, lr_at, momentum_at};

const INIT_SALT: u64 = 0x5EED_1417_0000_0001;
const STEP_SALT: u64 = 0x5EED_1417_0000_0002;

/// Architecture of every trainable component.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderShape,
    pub aggregation: AggregationShape,
    pub projector: ProjectorShape,
    pub decoder: DecoderShape,
    pub init_std: f64,
}

/// Inference outputs for one view.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub z: Matrix,
    pub class_logits: Vec<f64>,
    pub cam: Cam,
    /// `N x (C + 1)` decoder logits, background in channel 0.
    pub seg_logits: Matrix,
}

impl Model {
    pub fn new(
        model: &ModelConfig,
        view_size: usize,
        patch_size: usize,
        num_classes: usize,
    ) -> Result<Self> {
        model.validate()?;
        let encoder = EncoderShape::new(model, view_size, patch_size, num_classes)?;
        let grid = encoder.grid;
        Ok(Self {
            aggregation: AggregationShape {
                dim: model.dim,
                blocks: model.agg_blocks,
                ff_dim: model.agg_ff_dim,
            },
            projector: ProjectorShape {
                input: model.dim,
                hidden: model.proj_hidden,
                bottleneck: model.proj_bottleneck,
                out: model.proj_out,
            },
            decoder: DecoderShape {
                grid,
                input: model.dim,
                width: model.decoder_dim,
                dilation: model.decoder_dilation,
                out_channels: num_classes + 1,
            },
            encoder,
            init_std: model.init_std,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(
            &cfg.model,
            cfg.train.crop_size,
            cfg.data.patch_size,
            cfg.data.num_classes(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.num_classes
    }

    pub fn grid(&self) -> (usize, usize) {
        self.encoder.grid
    }

    /// Side length of the square views the model consumes.
    pub fn view_size(&self) -> usize {
        self.encoder.grid.0 * self.encoder.patch_size
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT);
        let mut store = ParamStore::new();
        self.encoder
            .init_params(&mut store, self.init_std, &mut rng);
        self.aggregation
            .init_params(&mut store, self.init_std, &mut rng);
        self.projector
            .init_params(&mut store, self.init_std, &mut rng);
        self.decoder
            .init_params(&mut store, self.init_std, &mut rng);
        store
    }

    pub fn patches(&self, view: &RgbImage) -> Result<Matrix> {
        if (view.height, view.width) != (self.view_size(), self.view_size()) {
            return Err(FsrError::Shape(format!(
                "view is {}x{}, model expects {}x{}",
                view.height,
                view.width,
                self.view_size(),
                self.view_size()
            )));
        }
        patchify(view, self.encoder.patch_size)
    }

    /// Encoder → aggregation → projector on a (possibly masked) view;
    /// `(1 + N) x K` logits with the class token in row 0.
    pub fn head_logits_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        kind: AggregationKind,
        patches: &Matrix,
        mask: &[bool],
    ) -> Result<Var> {
        let x = self.encoder.embed_graph(g, store, patches, Some(mask))?;
        let z = self.encoder.forward_graph(g, store, x)?.z;
        let agg = self.aggregation.aggregate_graph(g, store, kind, z, mask)?;
        let tokens = g.concat_rows(&[agg.class_token, z])?;
        self.projector.logits_graph(g, store, tokens)
    }

    /// Unmasked teacher-path logits for one view.
    pub fn teacher_logits(
        &self,
        teacher: &ParamStore,
        kind: AggregationKind,
        patches: &Matrix,
    ) -> Result<Matrix> {
        let mut g = Graph::new(false);
        let mask = vec![false; self.encoder.num_tokens()];
        let out = self.head_logits_graph(&mut g, teacher, kind, patches, &mask)?;
        let logits = g.value(out).clone();
        if !logits.all_finite() {
            return Err(FsrError::NonFinite("teacher logits".into()));
        }
        Ok(logits)
    }

    pub fn predict(&self, store: &ParamStore, view: &RgbImage) -> Result<Prediction> {
        let patches = self.patches(view)?;
        let mut g = Graph::new(false);
        let x = self.encoder.embed_graph(&mut g, store, &patches, None)?;
        let z = self.encoder.forward_graph(&mut g, store, x)?.z;
        let tok = self.encoder.token_logits_graph(&mut g, store, z)?;
        let seg = self.decoder.forward_graph(&mut g, store, z)?;
        let tok_value = g.value(tok).clone();
        Ok(Prediction {
            z: g.value(z).clone(),
            class_logits: tok_value.mean_rows().into_vec(),
            cam: cam_from_logits(tok_value, self.grid())?,
            seg_logits: g.value(seg).clone(),
        })
    }
}

/// Per-step hyper-parameters of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSettings {
    pub lambdas: [f64; 5],
    pub beta_low: f64,
    pub beta_high: f64,
    pub mask_ratio: f64,
    pub masking: MaskingStrategy,
    pub aggregation: AggregationKind,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub aff_max_pairs: usize,
}

impl StepSettings {
    pub fn at(cfg: &TrainConfig, t: usize) -> Self {
        Self {
            lambdas: lambdas_at(t, cfg),
            beta_low: cfg.beta_low,
            beta_high: cfg.beta_high,
            mask_ratio: cfg.mask_ratio,
            masking: cfg.masking,
            aggregation: cfg.aggregation,
            tau_student: cfg.tau_student,
            tau_teacher: cfg.tau_teacher,
            aff_max_pairs: cfg.aff_max_pairs,
        }
    }

    /// Whether the masked-view branch runs at all.
    pub fn distill(&self) -> bool {
        self.lambdas[3] != 0.0 || self.lambdas[4] != 0.0
    }
}

/// Fixed inputs of one image: both views as patch rows plus teacher targets.
#[derive(Clone, Debug)]
pub struct ItemInput {
    pub labels: Vec<u8>,
    pub patches1: Matrix,
    pub patches2: Matrix,
    /// Teacher distribution of view 1 (class-token target).
    pub teacher1: Option<Distribution>,
    /// Teacher distribution of view 2 (patch targets).
    pub teacher2: Option<Distribution>,
}

/// Discrete decisions derived from the student's first view.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemPlan {
    pub pseudo: PseudoLabel,
    pub mask: MaskPair,
    pub pairs: Vec<AffinityPair>,
}

/// Token mask for the second view, driven by the first view's CAM. Channels
/// of absent classes are zeroed first so only present classes count as
/// confident.
pub fn plan_mask<R: Rng + ?Sized>(
    cam: &Cam,
    labels: &[u8],
    s: &StepSettings,
    rng: &mut R,
) -> Result<MaskPair> {
    let n = cam.scores.rows();
    if !s.distill() {
        return Ok(MaskPair::empty(n));
    }
    match s.masking {
        MaskingStrategy::Uncertain => {
            let mut present = cam.clone();
            for i in 0..n {
                for (c, &l) in labels.iter().enumerate() {
                    if l == 0 {
                        present.scores[(i, c)] = 0.0;
                    }
                }
            }
            let soft = score_uncertainty(&present, s.beta_low, s.beta_high, rng)?;
            select_mask(&soft, s.mask_ratio)
        }
        MaskingStrategy::Random => random_mask(n, s.mask_ratio, rng),
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(FsrError::NonFinite(format!("loss term {name}")))
    }
}

/// Objective of one image. When `plan` is `None` the decisions are derived
/// from this forward pass (drawing from `rng`) and stored. With `grads`, the
/// gradient of `scale · total` is accumulated per parameter name.
#[allow(clippy::too_many_arguments)]
pub fn item_objective<R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore,
    input: &ItemInput,
    plan: &mut Option<ItemPlan>,
    s: &StepSettings,
    rng: &mut R,
    scale: f64,
    grads: Option<&mut HashMap<String, Matrix>>,
) -> Result<[f64; 5]> {
    let mut g = Graph::new(grads.is_some());
    let x1 = model
        .encoder
        .embed_graph(&mut g, store, &input.patches1, None)?;
    let z1 = model.encoder.forward_graph(&mut g, store, x1)?.z;
    let tok = model.encoder.token_logits_graph(&mut g, store, z1)?;
    let class_logits = g.mean_rows(tok);
    let l_cls = loss_cls_graph(&mut g, class_logits, &input.labels)?;

    if plan.is_none() {
        let cam = cam_from_logits(g.value(tok).clone(), model.grid())?;
        let pseudo = derive_pseudo_labels(&cam, &input.labels, s.beta_low, s.beta_high)?;
        let mask = plan_mask(&cam, &input.labels, s, rng)?;
        let pairs = sample_affinity_pairs(&pseudo, s.aff_max_pairs, rng);
        *plan = Some(ItemPlan {
            pseudo,
            mask,
            pairs,
        });
    }
    let plan = plan.as_ref().expect("plan set above");

    let seg = model.decoder.forward_graph(&mut g, store, z1)?;
    let l_seg = loss_seg_graph(&mut g, seg, &plan.pseudo)?;
    let l_aff = loss_aff_graph(&mut g, z1, &plan.pairs)?;

    let mut terms: Vec<(Var, f64)> = vec![
        (l_cls, s.lambdas[0]),
        (l_aff, s.lambdas[1]),
        (l_seg, s.lambdas[2]),
    ];
    let mut parts = [g.scalar(l_cls), g.scalar(l_aff), g.scalar(l_seg), 0.0, 0.0];
    if s.distill() {
        let logits2 = model.head_logits_graph(
            &mut g,
            store,
            s.aggregation,
            &input.patches2,
            &plan.mask.binary,
        )?;
        let logp = student_log_probs(&mut g, logits2, s.tau_student)?;
        if s.lambdas[3] != 0.0 {
            let teacher = input
                .teacher2
                .as_ref()
                .ok_or_else(|| FsrError::Config("missing view-2 teacher targets".into()))?;
            let l_u = loss_uncertain_graph(&mut g, logp, teacher, &plan.mask.binary)?;
            parts[3] = g.scalar(l_u);
            terms.push((l_u, s.lambdas[3]));
        }
        if s.lambdas[4] != 0.0 {
            let teacher = input
                .teacher1
                .as_ref()
                .ok_or_else(|| FsrError::Config("missing view-1 teacher targets".into()))?;
            let l_c = loss_certain_graph(&mut g, logp, teacher)?;
            parts[4] = g.scalar(l_c);
            terms.push((l_c, s.lambdas[4]));
        }
    }
    for (name, v) in ["cls", "aff", "seg", "u", "c"].iter().zip(parts) {
        check_finite(name, v)?;
    }

    if let Some(acc) = grads {
        let mut total: Option<Var> = None;
        for (v, w) in terms {
            if w == 0.0 {
                continue;
            }
            let t = g.scale(v, w * scale);
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        if let Some(total) = total {
            let grad = g.backward(total)?;
            for (name, var) in g.bound_params() {
                if let Some(d) = grad.get(var) {
                    match acc.get_mut(name) {
                        Some(a) => a.add_scaled(d, 1.0),
                        None => {
                            acc.insert(name.to_string(), d.clone());
                        }
                    }
                }
            }
        }
    }
    Ok(parts)
}

/// Mean objective over a batch. `plans` must have one slot per input.
pub fn batch_objective<R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore,
    inputs: &[ItemInput],
    plans: &mut [Option<ItemPlan>],
    s: &StepSettings,
    rng: &mut R,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<HashMap<String, Matrix>>)> {
    if inputs.is_empty() || inputs.len() != plans.len() {
        return Err(FsrError::Shape(format!(
            "{} inputs with {} plan slots",
            inputs.len(),
            plans.len()
        )));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = want_grads.then(HashMap::new);
    let mut sum = [0.0; 5];
    for (input, plan) in inputs.iter().zip(plans.iter_mut()) {
        let parts = item_objective(model, store, input, plan, s, rng, scale, grads.as_mut())?;
        for (a, p) in sum.iter_mut().zip(parts) {
            *a += p * scale;
        }
    }
    let breakdown = total_loss(sum, s.lambdas);
    check_finite("total", breakdown.total)?;
    Ok((breakdown, grads))
}

/// Mutable training state; everything a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed steps.
    pub iteration: usize,
    pub student: ParamStore,
    pub teacher: TeacherState,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub m_proj: f64,
    pub cls: f64,
    pub aff: f64,
    pub seg: f64,
    pub u: f64,
    pub c: f64,
    pub total: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
    augment: AugmentConfig,
    order_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh student from the configured seed; the teacher starts as a copy.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::from_config(&config)?;
        let student = model.init_params(config.train.seed);
        let t = &config.train;
        let teacher = TeacherState::from_student(
            &student,
            model.projector.out,
            t.encoder_momentum,
            t.proj_momentum_start,
            t.center_momentum,
        );
        let optimizer = AdamW::new(&student, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(t.seed ^ STEP_SALT);
        let state = TrainState {
            iteration: 0,
            student,
            teacher,
            optimizer,
            rng,
        };
        Ok(Self::from_state(config, model, state))
    }

    /// Resumes from a checkpoint whose tensors must match the configured model.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = Model::from_config(&ckpt.config)?;
        let reference = model.init_params(0);
        let s = &ckpt.state;
        let stores = [
            ("student", &s.student),
            ("adam.m", &s.optimizer.m),
            ("adam.v", &s.optimizer.v),
        ];
        for (owner, store) in stores {
            check_store_shapes(owner, store, &reference, |_| true)?;
        }
        check_store_shapes("teacher", &s.teacher.params, &reference, is_teacher_param)?;
        if s.teacher.center.len() != model.projector.out {
            return Err(FsrError::Config(format!(
                "teacher center has {} entries, projector has {} outputs",
                s.teacher.center.len(),
                model.projector.out
            )));
        }
        Ok(Self::from_state(ckpt.config, model, ckpt.state))
    }

    /// Replaces the training settings (e.g. to extend a resumed run).
    pub fn set_train_config(&mut self, train: TrainConfig) -> Result<()> {
        let mut config = self.config.clone();
        config.train = train;
        config.validate()?;
        let t = &config.train;
        self.augment = AugmentConfig::standard(t.crop_size, t.crop_scale_min, t.crop_scale_max);
        self.config = config;
        Ok(())
    }

    fn from_state(config: RunConfig, model: Model, state: TrainState) -> Self {
        let t = &config.train;
        let augment = AugmentConfig::standard(t.crop_size, t.crop_scale_min, t.crop_scale_max);
        Self {
            config,
            model,
            state,
            augment,
            order_cache: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    /// Draws the next batch: dataset order is a pure function of the step,
    /// augmentations come from the state RNG.
    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Vec<ViewPair>> {
        if dataset.is_empty() {
            return Err(FsrError::Dataset {
                path: "<train split>".into(),
                reason: "no images".into(),
            });
        }
        let b = self.config.train.batch_size;
        let mut out = Vec::with_capacity(b);
        for j in 0..b {
            let pos = self.state.iteration * b + j;
            let epoch = (pos / dataset.len()) as u64;
            if self.order_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                self.order_cache =
                    Some((epoch, dataset.epoch_order(self.config.train.seed, epoch)));
            }
            let idx = self.order_cache.as_ref().expect("cached").1[pos % dataset.len()];
            out.push(augment_two_views(
                &dataset.images[idx],
                &self.augment,
                &mut self.state.rng,
            ));
        }
        Ok(out)
    }

    /// Teacher targets and raw teacher logits for a batch.
    fn teacher_inputs(
        &self,
        batch: &[ViewPair],
        s: &StepSettings,
    ) -> Result<(Vec<ItemInput>, Vec<Matrix>)> {
        let teacher = &self.state.teacher;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut raw = Vec::new();
        for pair in batch {
            let patches1 = self.model.patches(&pair.view1)?;
            let patches2 = self.model.patches(&pair.view2)?;
            let (mut teacher1, mut teacher2) = (None, None);
            if s.distill() {
                let l2 = self
                    .model
                    .teacher_logits(&teacher.params, s.aggregation, &patches2)?;
                teacher2 = Some(tempered_softmax(&l2, s.tau_teacher, Some(&teacher.center))?);
                raw.push(l2);
                if s.lambdas[4] != 0.0 {
                    let l1 =
                        self.model
                            .teacher_logits(&teacher.params, s.aggregation, &patches1)?;
                    teacher1 = Some(tempered_softmax(&l1, s.tau_teacher, Some(&teacher.center))?);
                    raw.push(l1);
                }
            }
            inputs.push(ItemInput {
                labels: pair.labels.clone(),
                patches1,
                patches2,
                teacher1,
                teacher2,
            });
        }
        Ok((inputs, raw))
    }

    /// One optimization step: objective and gradients, AdamW, EMA teacher
    /// update, then the center update.
    pub fn step(&mut self, batch: &[ViewPair]) -> Result<StepRecord> {
        let t = self.state.iteration;
        let cfg = &self.config.train;
        let s = StepSettings::at(cfg, t);
        let lr = lr_at(t, cfg);
        let m_proj = momentum_at(t, cfg);
        let center_momentum = cfg.center_momentum;
        let (inputs, teacher_raw) = self.teacher_inputs(batch, &s)?;
        let mut plans = vec![None; inputs.len()];
        let (loss, grads) = batch_objective(
            &self.model,
            &self.state.student,
            &inputs,
            &mut plans,
            &s,
            &mut self.state.rng,
            true,
        )?;
        let grads = grads.expect("gradients requested");
        self.state
            .optimizer
            .update(&mut self.state.student, &grads, lr)?;
        ema_update(&mut self.state.teacher, &self.state.student, m_proj)?;
        if !teacher_raw.is_empty() {
            let refs: Vec<&Matrix> = teacher_raw.iter().collect();
            self.state.teacher.center =
                update_center(&self.state.teacher.center, &refs, center_momentum)?;
        }
        self.state.iteration += 1;
        Ok(StepRecord {
            iter: t,
            lr,
            m_proj,
            cls: loss.cls,
            aff: loss.aff,
            seg: loss.seg,
            u: loss.u,
            c: loss.c,
            total: loss.total,
        })
    }

    /// Runs until `config.train.iterations` steps are done, reporting every
    /// step to `on_step`.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.state.iteration < self.config.train.iterations {
            let batch = self.next_batch(dataset)?;
            let record = self.step(&batch)?;
            on_step(&record)?;
        }
        Ok(())
    }
}

fn check_store_shapes(
    owner: &str,
    store: &ParamStore,
    reference: &ParamStore,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let expected: Vec<(&str, &Matrix)> = reference.iter().filter(|(n, _)| keep(n)).collect();
    if store.len() != expected.len() {
        return Err(FsrError::Config(format!(
            "{owner} holds {} tensors, the model needs {}",
            store.len(),
            expected.len()
        )));
    }
    for (name, want) in expected {
        let got = store
            .get(name)
            .ok_or_else(|| FsrError::Config(format!("{owner} lacks tensor {name}")))?;
        if got.shape() != want.shape() {
            return Err(FsrError::Config(format!(
                "{owner}/{name} has shape {:?}, the model needs {:?}",
                got.shape(),
                want.shape()
            )));
        }
    }
    Ok(())
}

/// Trains from scratch on `dataset` and returns the final checkpoint and
/// the per-step metrics.
pub fn train_loop(config: RunConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config)?;
    let mut log = Vec::with_capacity(trainer.config.train.iterations);
    trainer.run(dataset, |r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.checkpoint(), log))
}
