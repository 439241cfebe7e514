//! Teacher-student pre-training loop.
//!
//! Each step runs, per image, two augmented student views under the
//! distillation prompt, one student pass under the part prompt and one under
//! the attribute prompt, plus teacher passes on both views. The weighted
//! objective is minimized with AdamW over the student and heads; the teacher
//! follows by EMA.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{build_activation_profile, divergence_matrix, ExpertActivationProfile, GradientTrace};
use crate::encoders::{ImageRGB, OracleEncoder, StageShape, ORACLE_DIM};
use crate::error::{ClaspError, Result};
use crate::losses::{
    attribute_loss_logits, balancing_loss_stage_grad, balancing_loss_total, cv2, dino_loss_logits, importance,
    part_loss_grad, total_loss, DinoState, LossBreakdown, LossWeights, ProjectionHeads,
};
use crate::model::{Backbone, ModelConfig, PassCache};
use crate::nn::{ema_into, MlpCache, ParamTree};
use crate::pc_moe::{GateRecord, NUM_TASKS};
use crate::pseudo_labels::{AttributeLabelSet, AttributeSchema, GranularitySet, PartLabelMap, PartOutcome, PartVocabulary, PseudoLabeler};
use crate::tensor::Tensor;
use crate::workbench::synthetic::{generate_synthetic_dataset, SyntheticPersonSpec};

pub const TASK_NAMES: [&str; NUM_TASKS] = ["dino", "part", "attribute"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
}

impl Default for DinoConfig {
    fn default() -> Self {
        let d = DinoState::new(0);
        Self {
            tau_s: d.tau_s,
            tau_t: d.tau_t,
            center_momentum: d.center_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_momentum: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub dino: DinoConfig,
    /// Stage-2 when set: load this checkpoint and train all four losses.
    pub warm_start_checkpoint: Option<PathBuf>,
    pub warm_start_lr_factor: f64,
    pub dataset: SyntheticPersonSpec,
    pub dataset_size: usize,
    pub oracle_seed: u64,
    pub granularity: Vec<usize>,
    /// Gradient-conflict and expert-divergence cadence in steps; 0 disables.
    pub diagnostics_every: usize,
    pub eval_size: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 3e-3,
            min_lr: 0.0,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            ema_momentum: 0.996,
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            dino: DinoConfig::default(),
            warm_start_checkpoint: None,
            warm_start_lr_factor: 0.6,
            dataset: SyntheticPersonSpec::default(),
            dataset_size: 64,
            oracle_seed: 0,
            granularity: vec![2, 3, 4],
            diagnostics_every: 50,
            eval_size: 16,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Reads a JSON config; absent keys take defaults, unknown keys fail.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClaspError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ClaspError::Json(e) => ClaspError::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
            e => e,
        })
    }

    /// Parses and validates a JSON config; absent fields take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(ClaspError::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(ClaspError::Config(format!("need 0 <= min_lr <= lr, lr > 0 (lr={})", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(ClaspError::Config("ema_momentum outside [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(ClaspError::Config("optimizer hyperparameters out of range".into()));
        }
        if !(self.warm_start_lr_factor > 0.0) {
            return Err(ClaspError::Config("warm_start_lr_factor must be positive".into()));
        }
        if self.eval_size < 2 {
            return Err(ClaspError::Config("eval_size must be >= 2".into()));
        }
        if self.dataset_size == 0 {
            return Err(ClaspError::Config("dataset_size must be >= 1".into()));
        }
        GranularitySet::new(self.granularity.iter().copied())?;
        if self.dataset.height != self.model.image_height || self.dataset.width != self.model.image_width {
            return Err(ClaspError::Config("dataset and model image sizes differ".into()));
        }
        self.dino_state().validate()
    }

    pub fn dino_state(&self) -> DinoState {
        DinoState {
            center: vec![0.0; self.model.prototypes],
            tau_s: self.dino.tau_s,
            tau_t: self.dino.tau_t,
            center_momentum: self.dino.center_momentum,
            primed: false,
        }
    }

    /// Learning rate for local step `i` (0-based) of a run of `total` steps.
    pub fn lr_at(&self, i: usize, total: usize, base: f64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let floor = self.min_lr.min(base);
                let frac = if total <= 1 { 0.0 } else { i as f64 / total as f64 };
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam over an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ClaspError::Structural("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= lr * (upd + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Completed optimizer steps.
    pub step: u64,
    pub student: Backbone,
    pub teacher: Backbone,
    pub heads: ProjectionHeads,
    pub dino: DinoState,
    pub opt: AdamW,
}

fn is_teacher_head(name: &str) -> bool {
    name.starts_with("teacher.")
}

impl ModelState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = Backbone::init(&cfg.model, &mut rng)?;
        let heads = ProjectionHeads::init_with_hidden(
            cfg.model.final_channels(),
            cfg.model.head_hidden,
            cfg.model.prototypes,
            cfg.model.part_classes,
            cfg.model.attribute_outputs,
            &mut rng,
        );
        let mut state = Self {
            step: 0,
            teacher: student.clone(),
            student,
            heads,
            dino: cfg.dino_state(),
            opt: AdamW::new(&[], cfg.beta1, cfg.beta2, cfg.weight_decay),
        };
        state.reset_optimizer(cfg);
        Ok(state)
    }

    pub fn reset_optimizer(&mut self, cfg: &TrainConfig) {
        let shapes: Vec<Vec<usize>> = self.trainable().iter().map(|(_, t)| t.shape().to_vec()).collect();
        self.opt = AdamW::new(&shapes, cfg.beta1, cfg.beta2, cfg.weight_decay);
    }

    /// Student backbone and non-teacher head tensors, in optimizer order.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .student
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("student.{n}"), t))
            .collect();
        out.extend(
            self.heads
                .named_tensors()
                .into_iter()
                .filter(|(n, _)| !is_teacher_head(n))
                .map(|(n, t)| (format!("heads.{n}"), t)),
        );
        out
    }

    /// Every tensor persisted in a checkpoint, by name.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.student.named_tensors() {
            out.push((format!("student.{n}"), t));
        }
        for (n, t) in self.teacher.named_tensors() {
            out.push((format!("teacher.{n}"), t));
        }
        for (n, t) in self.heads.named_tensors() {
            out.push((format!("heads.{n}"), t));
        }
        let names: Vec<String> = self.trainable().into_iter().map(|(n, _)| n).collect();
        for (n, t) in names.iter().zip(&self.opt.m) {
            out.push((format!("opt.m.{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.opt.v) {
            out.push((format!("opt.v.{n}"), t));
        }
        out
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.trainable().into_iter().map(|(n, _)| n).collect();
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (n, t) in self.student.named_tensors_mut() {
            out.push((format!("student.{n}"), t));
        }
        for (n, t) in self.teacher.named_tensors_mut() {
            out.push((format!("teacher.{n}"), t));
        }
        for (n, t) in self.heads.named_tensors_mut() {
            out.push((format!("heads.{n}"), t));
        }
        for (n, t) in names.iter().zip(self.opt.m.iter_mut()) {
            out.push((format!("opt.m.{n}"), t));
        }
        for (n, t) in names.iter().zip(self.opt.v.iter_mut()) {
            out.push((format!("opt.v.{n}"), t));
        }
        out
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for the backbone (with prompts and MoE) and the
/// distillation head.
pub fn ema_update(state: &mut ModelState, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ClaspError::Config(format!("EMA momentum {m} outside [0,1]")));
    }
    ema_into(&mut state.teacher, &state.student, m)?;
    ema_into(&mut state.heads.teacher, &state.heads.student, m)
}

/// One training image with its cached pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: ImageRGB,
    pub parts: PartLabelMap,
    pub attributes: AttributeLabelSet,
}

#[derive(Debug, Clone)]
pub struct BatchSample<'a> {
    pub views: [ImageRGB; 2],
    pub example: &'a TrainingExample,
}

/// Gradients for every parameter group. The teacher slots exist so callers
/// can verify nothing ever flows into them.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub student: Backbone,
    pub teacher: Backbone,
    pub heads: ProjectionHeads,
}

impl Grads {
    pub fn zeros_like(state: &ModelState) -> Self {
        let mut g = Self {
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            heads: state.heads.clone(),
        };
        g.student.zero_();
        g.teacher.zero_();
        g.heads.zero_();
        g
    }

    /// Squared norm of everything that must stay zero.
    pub fn teacher_sq_norm(&self) -> f64 {
        self.teacher.sq_norm() + self.heads.teacher.sq_norm()
    }

    fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.student.named_tensors().into_iter().map(|(_, t)| t).collect();
        out.extend(
            self.heads
                .named_tensors()
                .into_iter()
                .filter(|(n, _)| !is_teacher_head(n))
                .map(|(_, t)| t),
        );
        out
    }
}

struct SampleForward {
    views: Vec<PassCache>,
    view_heads: Vec<(Vec<f64>, MlpCache)>,
    teacher_logits: Vec<Vec<f64>>,
    part: PassCache,
    attr: PassCache,
    attr_pooled: Vec<f64>,
}

/// Per-task, unweighted upstream gradients of one sample's passes.
struct SampleUpstream {
    views: Vec<Vec<f64>>,
    part: Vec<f64>,
    attr: Vec<f64>,
}

/// Result of evaluating the objective on a batch.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub loss: LossBreakdown,
    pub grads: Grads,
    /// Per-stage records of every student pass, in pass order.
    pub records: Vec<Vec<GateRecord>>,
    pub teacher_logits: Vec<Vec<f64>>,
    /// Unweighted per-task backbone gradients, when requested.
    pub task_grads: Option<Vec<Backbone>>,
}

fn broadcast_pooled(d_pooled: &[f64], tokens: usize) -> Vec<f64> {
    let inv = 1.0 / tokens as f64;
    let mut out = Vec::with_capacity(d_pooled.len() * tokens);
    for _ in 0..tokens {
        out.extend(d_pooled.iter().map(|v| v * inv));
    }
    out
}

/// Evaluates the weighted objective and its gradient on a prepared batch.
/// Gate noise draws come from `rng`; with noise disabled the result is a
/// pure function of the inputs.
pub fn evaluate_batch<R: Rng + ?Sized>(
    state: &ModelState,
    cfg: &ModelConfig,
    weights: &LossWeights,
    batch: &[BatchSample<'_>],
    rng: &mut R,
    with_task_grads: bool,
) -> Result<StepEval> {
    evaluate_impl(state, cfg, weights, batch, rng, with_task_grads, true)
}

/// Loss on the first `eval_size` images with fixed views and gate noise
/// off, so values taken at different points of a run are comparable.
pub fn held_out_loss(
    state: &ModelState,
    cfg: &TrainConfig,
    weights: &LossWeights,
    data: &[TrainingExample],
) -> Result<LossBreakdown> {
    let n = cfg.eval_size.min(data.len());
    if n < 2 {
        return Err(ClaspError::Usage(format!("held-out set of {n} images; need >= 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0e7a_15e7);
    let batch: Vec<BatchSample<'_>> = data[..n]
        .iter()
        .map(|ex| {
            let views = if cfg.augment {
                [augment(&ex.image, &mut rng), augment(&ex.image, &mut rng)]
            } else {
                [ex.image.clone(), ex.image.clone()]
            };
            BatchSample { views, example: ex }
        })
        .collect();
    Ok(evaluate_impl(state, &cfg.model, weights, &batch, &mut rng, false, false)?.loss)
}

fn evaluate_impl<R: Rng + ?Sized>(
    state: &ModelState,
    cfg: &ModelConfig,
    weights: &LossWeights,
    batch: &[BatchSample<'_>],
    rng: &mut R,
    with_task_grads: bool,
    training: bool,
) -> Result<StepEval> {
    if batch.len() < 2 {
        return Err(ClaspError::Usage(format!("batch of {} images; need >= 2", batch.len())));
    }
    let b = batch.len() as f64;
    let n_stages = cfg.stages.len();
    let n_exp = cfg.moe.n_experts;

    // forward
    let mut fwd = Vec::with_capacity(batch.len());
    for s in batch {
        let mut views = Vec::with_capacity(2);
        let mut view_heads = Vec::with_capacity(2);
        let mut teacher_logits = Vec::with_capacity(2);
        for v in &s.views {
            let pass = state.student.forward(cfg, v, 0, training, rng)?;
            let pooled = pass.output.mean_token();
            view_heads.push(state.heads.student.forward(&pooled));
            views.push(pass);
            let tp = state.teacher.forward(cfg, v, 0, false, rng)?;
            teacher_logits.push(state.heads.teacher.forward(&tp.output.mean_token()).0);
        }
        let part = state.student.forward(cfg, &s.example.image, 1, training, rng)?;
        let attr = state.student.forward(cfg, &s.example.image, 2, training, rng)?;
        let attr_pooled = attr.output.mean_token();
        fwd.push(SampleForward {
            views,
            view_heads,
            teacher_logits,
            part,
            attr,
            attr_pooled,
        });
    }

    // losses and upstream gradients; head gradients go straight into `grads`
    let mut grads = Grads::zeros_like(state);
    let mut task_heads = Grads::zeros_like(state);
    let (mut l_dino, mut l_part, mut l_attr) = (0.0, 0.0, 0.0);
    let mut upstream = Vec::with_capacity(batch.len());
    for (s, f) in batch.iter().zip(&fwd) {
        let student_logits: Vec<Vec<f64>> = f.view_heads.iter().map(|(l, _)| l.clone()).collect();
        let (ld, d_logits) = dino_loss_logits(&f.teacher_logits, &student_logits, &state.dino)?;
        l_dino += ld / b;
        let mut d_views = Vec::with_capacity(2);
        for (k, pass) in f.views.iter().enumerate() {
            let dl: Vec<f64> = d_logits[k].iter().map(|v| v / b).collect();
            let d_pooled = state.heads.student.backward(&f.view_heads[k].1, &dl, &mut task_heads.heads.student);
            d_views.push(broadcast_pooled(&d_pooled, pass.output.num_tokens()));
        }

        let (lp, d_part) = part_loss_grad(
            &f.part.output,
            &s.example.parts,
            &state.heads.part,
            Some(&mut task_heads.heads.part),
            1.0 / b,
        )?;
        l_part += lp / b;

        let logits = state.heads.attribute.forward(&f.attr_pooled);
        let (la, dl) = attribute_loss_logits(&logits, &s.example.attributes)?;
        l_attr += la / b;
        let dl: Vec<f64> = dl.iter().map(|v| v / b).collect();
        let d_pooled = state.heads.attribute.backward(&f.attr_pooled, &dl, &mut task_heads.heads.attribute);
        upstream.push(SampleUpstream {
            views: d_views,
            part: d_part,
            attr: broadcast_pooled(&d_pooled, f.attr.output.num_tokens()),
        });
    }
    // weight head gradients by their task coefficient
    let scale_heads = |dst: &mut ProjectionHeads, src: &ProjectionHeads| {
        dst.student
            .named_tensors_mut()
            .into_iter()
            .zip(src.student.named_tensors())
            .for_each(|((_, d), (_, s))| d.axpy(weights.dino, s));
        dst.part.weight.axpy(weights.part, &src.part.weight);
        dst.part.bias.axpy(weights.part, &src.part.bias);
        dst.attribute.weight.axpy(weights.attribute, &src.attribute.weight);
        dst.attribute.bias.axpy(weights.attribute, &src.attribute.bias);
    };
    scale_heads(&mut grads.heads, &task_heads.heads);

    // balancing over every student pass, per stage
    let mut records: Vec<Vec<GateRecord>> = vec![Vec::new(); n_stages];
    for f in &fwd {
        for pass in f.views.iter().chain([&f.part, &f.attr]) {
            for (st, r) in pass.records().into_iter().enumerate() {
                records[st].push(r.clone());
            }
        }
    }
    let mut bal_stage = Vec::with_capacity(n_stages);
    let mut d_gate_stage = Vec::with_capacity(n_stages);
    for recs in &records {
        let (l, g) = balancing_loss_stage_grad(recs, n_exp)?;
        bal_stage.push(l);
        d_gate_stage.push(g.iter().map(|v| v * weights.balancing).collect::<Vec<f64>>());
    }
    let l_bal = balancing_loss_total(&bal_stage);
    let loss = total_loss(l_dino, l_part, l_attr, l_bal, weights)?;
    if !loss.total.is_finite() {
        return Err(ClaspError::Numeric(format!("non-finite total loss: {loss:?}")));
    }

    // backbone backward, weighted
    let gates: Vec<Option<Vec<f64>>> = d_gate_stage.iter().map(|g| Some(g.clone())).collect();
    let apply_gates = weights.balancing != 0.0;
    for (f, up) in fwd.iter().zip(&upstream) {
        let passes: [(&PassCache, &Vec<f64>, f64); 4] = [
            (&f.views[0], &up.views[0], weights.dino),
            (&f.views[1], &up.views[1], weights.dino),
            (&f.part, &up.part, weights.part),
            (&f.attr, &up.attr, weights.attribute),
        ];
        for (pass, d, w) in passes {
            let scaled: Vec<f64> = d.iter().map(|v| v * w).collect();
            let g = if apply_gates { gates.as_slice() } else { &[] };
            state.student.backward(cfg, pass, &scaled, g, &mut grads.student)?;
        }
    }

    let task_grads = if with_task_grads {
        let mut per_task = Vec::with_capacity(NUM_TASKS);
        for task in 0..NUM_TASKS {
            let mut g = state.student.clone();
            g.zero_();
            for (f, up) in fwd.iter().zip(&upstream) {
                match task {
                    0 => {
                        state.student.backward(cfg, &f.views[0], &up.views[0], &[], &mut g)?;
                        state.student.backward(cfg, &f.views[1], &up.views[1], &[], &mut g)?;
                    }
                    1 => state.student.backward(cfg, &f.part, &up.part, &[], &mut g)?,
                    _ => state.student.backward(cfg, &f.attr, &up.attr, &[], &mut g)?,
                }
            }
            per_task.push(g);
        }
        Some(per_task)
    } else {
        None
    };

    let teacher_logits = fwd.iter().flat_map(|f| f.teacher_logits.iter().cloned()).collect();
    Ok(StepEval {
        loss,
        grads,
        records,
        teacher_logits,
        task_grads,
    })
}

/// Horizontal flip, crop-resize and brightness jitter.
pub fn augment<R: Rng + ?Sized>(image: &ImageRGB, rng: &mut R) -> ImageRGB {
    let (h, w) = (image.height, image.width);
    let flip = rng.random_bool(0.5);
    let scale = rng.random_range(0.8..=1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    let gain = rng.random_range(0.85..=1.15);
    let mut out = ImageRGB::zeros(image.id.clone(), h, w);
    for y in 0..h {
        for x in 0..w {
            let sy = oy + (y * ch) / h;
            let mut sx = ox + (x * cw) / w;
            if flip {
                sx = ox + cw - 1 - (sx - ox);
            }
            let p = image.pixel(sy, sx);
            out.set_pixel(y, x, [p[0] * gain, p[1] * gain, p[2] * gain]);
        }
    }
    out
}

/// RNG for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub fn make_batch<'a, R: Rng + ?Sized>(
    data: &'a [TrainingExample],
    batch_size: usize,
    augment_views: bool,
    rng: &mut R,
) -> Result<Vec<BatchSample<'a>>> {
    if data.len() < batch_size {
        return Err(ClaspError::Config(format!(
            "{} training images cannot fill a batch of {batch_size}",
            data.len()
        )));
    }
    let mut idx = sample(rng, data.len(), batch_size).into_vec();
    idx.sort_unstable();
    Ok(idx
        .into_iter()
        .map(|i| {
            let ex = &data[i];
            let views = if augment_views {
                [augment(&ex.image, rng), augment(&ex.image, rng)]
            } else {
                [ex.image.clone(), ex.image.clone()]
            };
            BatchSample { views, example: ex }
        })
        .collect())
}

/// Teacher head logits for both views of every sample, in batch order.
pub fn teacher_batch_logits(state: &ModelState, cfg: &ModelConfig, batch: &[BatchSample<'_>]) -> Result<Vec<Vec<f64>>> {
    // teacher passes never draw gate noise
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(2 * batch.len());
    for s in batch {
        for v in &s.views {
            let tp = state.teacher.forward(cfg, v, 0, false, &mut rng)?;
            out.push(state.heads.teacher.forward(&tp.output.mean_token()).0);
        }
    }
    Ok(out)
}

/// Applies one optimizer step and the EMA update from an evaluated batch.
pub fn apply_step(state: &mut ModelState, eval: &StepEval, lr: f64, ema_momentum: f64) -> Result<()> {
    let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
    let grads = eval.grads.trainable();
    {
        let mut params: Vec<&mut Tensor> = state.student.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        params.extend(
            state
                .heads
                .named_tensors_mut()
                .into_iter()
                .filter(|(n, _)| !is_teacher_head(n))
                .map(|(_, t)| t),
        );
        debug_assert_eq!(params.len(), names.len());
        state.opt.step(&mut params, &grads, lr)?;
    }
    ema_update(state, ema_momentum)?;
    state.dino.update_center(&eval.teacher_logits);
    state.step += 1;
    Ok(())
}

/// One complete step: sample a batch, evaluate, update.
pub fn train_step(
    state: &mut ModelState,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    lr: f64,
    with_task_grads: bool,
) -> Result<StepEval> {
    let mut rng = step_rng(cfg.seed, state.step + 1);
    let batch = make_batch(data, cfg.batch_size, cfg.augment, &mut rng)?;
    if !state.dino.primed {
        let logits = teacher_batch_logits(state, &cfg.model, &batch)?;
        state.dino.prime(&logits);
    }
    let eval = evaluate_batch(state, &cfg.model, weights, &batch, &mut rng, with_task_grads)?;
    apply_step(state, &eval, lr, cfg.ema_momentum)?;
    Ok(eval)
}

/// Labels a synthetic set through the pseudo-labeling pipeline and keeps the
/// accepted images.
pub fn build_training_set(cfg: &TrainConfig) -> Result<Vec<TrainingExample>> {
    let oracle = OracleEncoder::person_default(cfg.oracle_seed);
    let vocab = PartVocabulary::default_parts();
    let schema = AttributeSchema::default_schema();
    let samples = generate_synthetic_dataset(cfg.dataset_size, &cfg.dataset, &oracle, &vocab, &schema)?;
    let grid = StageShape::new(ORACLE_DIM, cfg.dataset.grid_height, cfg.dataset.grid_width);
    let labeler = PseudoLabeler::new(&oracle, &oracle, grid, vocab, schema)?;
    let gran = GranularitySet::new(cfg.granularity.iter().copied())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1abe);
    let mut out = Vec::new();
    for s in samples {
        if let PartOutcome::Accepted(res) = labeler.generate_part_labels(&s.image, &gran, &mut rng)? {
            let attributes = labeler.assign_attribute_labels(&s.image)?;
            out.push(TrainingExample {
                image: s.image,
                parts: res.map,
                attributes,
            });
        }
    }
    if out.len() < cfg.batch_size {
        return Err(ClaspError::Config(format!(
            "only {} of {} images survived filtering; need a full batch",
            out.len(),
            cfg.dataset_size
        )));
    }
    Ok(out)
}

/// Expert-activation profiles per stage and task, gate noise off.
pub fn activation_profiles(
    state: &ModelState,
    cfg: &ModelConfig,
    eval: &[TrainingExample],
) -> Result<Vec<Vec<ExpertActivationProfile>>> {
    let n_stages = cfg.stages.len();
    let mut per: Vec<Vec<Vec<GateRecord>>> = vec![vec![Vec::new(); NUM_TASKS]; n_stages];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in eval {
        for task in 0..NUM_TASKS {
            let pass = state.student.forward(cfg, &ex.image, task, false, &mut rng)?;
            for (st, r) in pass.records().into_iter().enumerate() {
                per[st][task].push(r.clone());
            }
        }
    }
    per.iter()
        .map(|tasks| tasks.iter().map(|r| build_activation_profile(r)).collect())
        .collect()
}

/// Groups per-task backbone gradients into shared layers.
pub fn gradient_trace(state: &ModelState, task_grads: &[Backbone]) -> GradientTrace {
    let layers = state.student.shared_layers();
    let gradients = task_grads
        .iter()
        .map(|g| {
            let named: std::collections::BTreeMap<String, &Tensor> = g.named_tensors().into_iter().collect();
            layers
                .iter()
                .map(|(_, members)| members.iter().flat_map(|m| named[m].data().iter().copied()).collect())
                .collect()
        })
        .collect();
    GradientTrace {
        tasks: TASK_NAMES.iter().map(|s| s.to_string()).collect(),
        layers: layers.into_iter().map(|(l, _)| l).collect(),
        gradients,
    }
}

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub cv2_importance: Vec<f64>,
    pub gcr: Option<f64>,
    /// `(dino,part)`, `(dino,attribute)`, `(part,attribute)` averaged over stages.
    pub ead: Option<[f64; 3]>,
    pub wall_time: f64,
}

/// Final diagnostics snapshot of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSnapshot {
    pub step: u64,
    pub trace: GradientTrace,
    pub profiles: Vec<Vec<ExpertActivationProfile>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: ModelState,
    pub history: Vec<MetricsRow>,
    pub trace: Option<TraceSnapshot>,
    /// Held-out loss before the first and after the last step.
    pub start_eval: LossBreakdown,
    pub end_eval: LossBreakdown,
}

/// Where a run starts from.
#[derive(Debug, Clone)]
pub enum RunStart {
    Fresh,
    /// Continue an interrupted run with its optimizer state.
    Resume(ModelState),
    /// Stage-2: parameters from a stage-1 run, fresh optimizer.
    WarmStart(ModelState),
}

/// Per-step observer, e.g. for live metrics output.
pub type StepHook<'a> = dyn FnMut(&MetricsRow, &ModelState) -> Result<()> + 'a;

pub fn run_training(
    cfg: &TrainConfig,
    data: &[TrainingExample],
    start: RunStart,
    deterministic_time: bool,
    hook: Option<&mut StepHook<'_>>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (mut state, weights, base_lr) = match start {
        RunStart::Fresh => (ModelState::init(cfg)?, cfg.weights.dino_only(), cfg.lr),
        RunStart::Resume(s) => {
            let stage2 = cfg.warm_start_checkpoint.is_some();
            let w = if stage2 { cfg.weights } else { cfg.weights.dino_only() };
            let lr = if stage2 { cfg.lr * cfg.warm_start_lr_factor } else { cfg.lr };
            (s, w, lr)
        }
        RunStart::WarmStart(mut s) => {
            s.reset_optimizer(cfg);
            (s, cfg.weights, cfg.lr * cfg.warm_start_lr_factor)
        }
    };
    let eval_set = &data[..cfg.eval_size.min(data.len())];
    let start_eval = held_out_loss(&state, cfg, &weights, data)?;
    let t0 = std::time::Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut trace = None;
    let mut hook = hook;
    for i in 0..cfg.steps {
        let lr = cfg.lr_at(i, cfg.steps, base_lr);
        let diag = cfg.diagnostics_every > 0 && ((i + 1) % cfg.diagnostics_every == 0 || i + 1 == cfg.steps);
        let eval = train_step(&mut state, data, cfg, &weights, lr, diag)?;
        let cv2_importance = eval
            .records
            .iter()
            .map(|r| cv2(&importance(r, cfg.model.moe.n_experts)))
            .collect();
        let (gcr, ead) = match (&eval.task_grads, diag) {
            (Some(tg), true) => {
                let tr = gradient_trace(&state, tg);
                let gcr = crate::diagnostics::conflict_ratio(&tr)?;
                let profiles = activation_profiles(&state, &cfg.model, eval_set)?;
                let mut e = [0.0; 3];
                for st in &profiles {
                    let m = divergence_matrix(st)?;
                    e[0] += m[0][1] / profiles.len() as f64;
                    e[1] += m[0][2] / profiles.len() as f64;
                    e[2] += m[1][2] / profiles.len() as f64;
                }
                trace = Some(TraceSnapshot {
                    step: state.step,
                    trace: tr,
                    profiles,
                });
                (Some(gcr), Some(e))
            }
            _ => (None, None),
        };
        let row = MetricsRow {
            step: state.step,
            lr,
            loss: eval.loss,
            cv2_importance,
            gcr,
            ead,
            wall_time: if deterministic_time { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        if let Some(h) = hook.as_deref_mut() {
            h(&row, &state)?;
        }
        history.push(row);
    }
    let end_eval = held_out_loss(&state, cfg, &weights, data)?;
    Ok(RunOutput {
        state,
        history,
        trace,
        start_eval,
        end_eval,
    })
}


#[cfg(test)]
mod tests {
    use super::tests_support::tiny_config;
    use super::*;
    use crate::encoders::StageShape;

    #[test]
    fn ema_arithmetic() {
        let cfg = tiny_config();
        let mut s = ModelState::init(&cfg).unwrap();
        s.teacher.stages[0].mix.data_mut()[0] = 2.0;
        s.student.stages[0].mix.data_mut()[0] = 4.0;
        let before = s.teacher.clone();
        let mut one = s.clone();
        ema_update(&mut one, 1.0).unwrap();
        assert_eq!(one.teacher, before);
        let mut half = s.clone();
        ema_update(&mut half, 0.5).unwrap();
        assert_eq!(half.teacher.stages[0].mix.data()[0], 3.0);
        let mut zero = s.clone();
        ema_update(&mut zero, 0.0).unwrap();
        assert_eq!(zero.teacher, zero.student);
        assert_eq!(zero.heads.teacher, zero.heads.student);
    }

    #[test]
    fn zero_lr_keeps_student() {
        let cfg = tiny_config();
        let data = build_training_set(&cfg).unwrap();
        let mut s = ModelState::init(&cfg).unwrap();
        s.heads.student.layers[0].weight.data_mut()[0] += 1.0;
        let before = s.clone();
        train_step(&mut s, &data, &cfg, &cfg.weights, 0.0, false).unwrap();
        assert_eq!(s.student, before.student);
        assert_eq!(s.heads.student, before.heads.student);
        assert_ne!(s.heads.teacher, before.heads.teacher);
    }

    #[test]
    fn deterministic_runs() {
        let cfg = tiny_config();
        let data = build_training_set(&cfg).unwrap();
        let a = run_training(&cfg, &data, RunStart::Fresh, true, None).unwrap();
        let b = run_training(&cfg, &data, RunStart::Fresh, true, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
        assert!(a.history.iter().all(|r| r.loss.part == 0.0 || cfg.weights.dino_only().part == 0.0));
        let snap = a.trace.unwrap();
        assert_eq!(snap.trace.tasks.len(), 3);
        assert_eq!(snap.profiles.len(), 2);
    }

    #[test]
    fn prompt_isolation() {
        let cfg = tiny_config();
        let data = build_training_set(&cfg).unwrap();
        let s = ModelState::init(&cfg).unwrap();
        let w = LossWeights {
            dino: 0.0,
            part: 1.0,
            attribute: 0.0,
            balancing: 0.0,
        };
        let mut rng = step_rng(0, 1);
        let batch = make_batch(&data, 2, true, &mut rng).unwrap();
        let e = evaluate_batch(&s, &cfg.model, &w, &batch, &mut rng, false).unwrap();
        for st in &e.grads.student.stages {
            assert!(st.moe.prompts.row(0).iter().all(|&v| v == 0.0));
            assert!(st.moe.prompts.row(2).iter().all(|&v| v == 0.0));
            assert!(st.moe.prompts.row(1).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 10, 1.0), 1.0);
        assert!((cfg.lr_at(5, 10, 1.0) - 0.5).abs() < 1e-12);
        let c = TrainConfig {
            lr_schedule: LrSchedule::Constant,
            ..cfg
        };
        assert_eq!(c.lr_at(7, 10, 0.3), 0.3);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ClaspError::Config(_))));
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
        let _ = StageShape::new(1, 1, 1);
    }
}
