//! Training objectives: self-distillation, part segmentation, attribute
//! classification and expert load balancing, plus the heads they read from.
//!
//! Each loss comes with its gradient. Batch-level losses average over
//! samples; the trainer sums per-sample gradients scaled accordingly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMap;
use crate::error::{ClaspError, Result};
use crate::nn::{join, Linear, Mlp, ParamTree};
use crate::pc_moe::GateRecord;
use crate::pseudo_labels::{AttributeLabelSet, PartLabelMap};
use crate::tensor::{log_softmax, sigmoid, softmax, softplus, Tensor};

pub const CV2_EPSILON: f64 = 1e-10;
pub const BALANCING_ALPHA: f64 = 0.01;
pub const DINO_HIDDEN: usize = 256;

/// DINO projection heads plus the two semantic heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    /// Updated by EMA only.
    pub teacher: Mlp,
    pub student: Mlp,
    /// `c → K_parts + 1` (class 0 is background).
    pub part: Linear,
    /// `c → Σ_i K^i`
    pub attribute: Linear,
}

impl ProjectionHeads {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        prototypes: usize,
        part_classes: usize,
        attribute_outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self::init_with_hidden(channels, DINO_HIDDEN, prototypes, part_classes, attribute_outputs, rng)
    }

    pub fn init_with_hidden<R: Rng + ?Sized>(
        channels: usize,
        hidden: usize,
        prototypes: usize,
        part_classes: usize,
        attribute_outputs: usize,
        rng: &mut R,
    ) -> Self {
        let student = Mlp::new(&[channels, hidden, hidden, prototypes], rng);
        Self {
            teacher: student.clone(),
            student,
            part: Linear::randn(channels, part_classes, 0.02, rng),
            attribute: Linear::randn(channels, attribute_outputs, 0.02, rng),
        }
    }

    pub fn prototypes(&self) -> usize {
        self.student.output_dim()
    }
}

impl ParamTree for ProjectionHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.teacher.visit(&join(prefix, "teacher"), f);
        self.student.visit(&join(prefix, "student"), f);
        self.part.visit(&join(prefix, "part"), f);
        self.attribute.visit(&join(prefix, "attribute"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.teacher.visit_mut(&join(prefix, "teacher"), f);
        self.student.visit_mut(&join(prefix, "student"), f);
        self.part.visit_mut(&join(prefix, "part"), f);
        self.attribute.visit_mut(&join(prefix, "attribute"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoState {
    pub center: Vec<f64>,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// False until the center has been seeded from a first teacher batch.
    #[serde(default)]
    pub primed: bool,
}

impl DinoState {
    pub fn new(prototypes: usize) -> Self {
        Self {
            center: vec![0.0; prototypes],
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            primed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0) {
            return Err(ClaspError::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(ClaspError::Config("center momentum outside [0,1]".into()));
        }
        if self.center.iter().any(|v| !v.is_finite()) {
            return Err(ClaspError::Numeric("dino center".into()));
        }
        Ok(())
    }

    /// Teacher distribution for one view's logits.
    pub fn teacher_probs(&self, logits: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = logits
            .iter()
            .zip(&self.center)
            .map(|(l, c)| (l - c) / self.tau_t)
            .collect();
        softmax(&z)
    }

    /// Sets the center to the mean of a first batch of teacher logits.
    pub fn prime(&mut self, teacher_logits: &[Vec<f64>]) {
        if teacher_logits.is_empty() {
            return;
        }
        let n = teacher_logits.len() as f64;
        for (k, c) in self.center.iter_mut().enumerate() {
            *c = teacher_logits.iter().map(|l| l[k]).sum::<f64>() / n;
        }
        self.primed = true;
    }

    /// `center ← m·center + (1−m)·mean(teacher logits)`.
    pub fn update_center(&mut self, teacher_logits: &[Vec<f64>]) {
        if teacher_logits.is_empty() {
            return;
        }
        let n = teacher_logits.len() as f64;
        let m = self.center_momentum;
        for (k, c) in self.center.iter_mut().enumerate() {
            let mean = teacher_logits.iter().map(|l| l[k]).sum::<f64>() / n;
            *c = m * *c + (1.0 - m) * mean;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub dino: f64,
    pub part: f64,
    pub attribute: f64,
    pub balancing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dino: 0.8,
            part: 0.6,
            attribute: 0.6,
            balancing: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("dino", self.dino),
            ("part", self.part),
            ("attribute", self.attribute),
            ("balancing", self.balancing),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ClaspError::Config(format!("loss weight {n} = {v}")));
            }
        }
        Ok(())
    }

    /// Weights used for the pure self-distillation warm-up.
    pub fn dino_only(&self) -> Self {
        Self {
            part: 0.0,
            attribute: 0.0,
            balancing: 0.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dino: f64,
    pub part: f64,
    pub attribute: f64,
    pub balancing: f64,
    pub total: f64,
}

/// `total = λ1·dino + λ2·part + λ3·attribute + λ4·balancing`.
pub fn total_loss(dino: f64, part: f64, attribute: f64, balancing: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (n, v) in [("dino", dino), ("part", part), ("attribute", attribute), ("balancing", balancing)] {
        if !v.is_finite() {
            return Err(ClaspError::Numeric(format!("{n} loss is {v}")));
        }
    }
    // a disabled term is reported as zero
    let on = |weight: f64, v: f64| if weight == 0.0 { 0.0 } else { v };
    Ok(LossBreakdown {
        dino: on(w.dino, dino),
        part: on(w.part, part),
        attribute: on(w.attribute, attribute),
        balancing: on(w.balancing, balancing),
        total: w.dino * dino + w.part * part + w.attribute * attribute + w.balancing * balancing,
    })
}

/// Self-distillation loss for one image seen under several views.
/// Returns the loss and its gradient with respect to each student view's
/// logits. Teacher logits receive no gradient.
pub fn dino_loss_logits(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    state: &DinoState,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let v = teacher.len();
    if v < 2 || student.len() != v {
        return Err(ClaspError::Usage(format!(
            "cross-view distillation needs >= 2 matching views, got {} teacher / {} student",
            v,
            student.len()
        )));
    }
    let d = state.center.len();
    if teacher.iter().chain(student).any(|l| l.len() != d) {
        return Err(ClaspError::Shape(format!("logits must have {d} prototypes")));
    }
    let pt: Vec<Vec<f64>> = teacher.iter().map(|l| state.teacher_probs(l)).collect();
    let scaled: Vec<Vec<f64>> = student
        .iter()
        .map(|l| l.iter().map(|x| x / state.tau_s).collect())
        .collect();
    let ls: Vec<Vec<f64>> = scaled.iter().map(|z| log_softmax(z)).collect();
    let ps: Vec<Vec<f64>> = scaled.iter().map(|z| softmax(z)).collect();
    let pairs = (v * (v - 1)) as f64;
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; d]; v];
    for i in 0..v {
        for j in 0..v {
            if i == j {
                continue;
            }
            loss -= pt[i].iter().zip(&ls[j]).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..d {
                grads[j][k] += (ps[j][k] - pt[i][k]) / (state.tau_s * pairs);
            }
        }
    }
    Ok((loss / pairs, grads))
}

/// Feature-level self-distillation: `GAP` then the teacher/student heads.
pub fn dino_loss(
    teacher_views: &[FeatureMap],
    student_views: &[FeatureMap],
    heads: &ProjectionHeads,
    state: &DinoState,
) -> Result<f64> {
    let t: Vec<Vec<f64>> = teacher_views
        .iter()
        .map(|f| heads.teacher.forward(&f.mean_token()).0)
        .collect();
    let s: Vec<Vec<f64>> = student_views
        .iter()
        .map(|f| heads.student.forward(&f.mean_token()).0)
        .collect();
    Ok(dino_loss_logits(&t, &s, state)?.0)
}

/// Token-wise cross-entropy against a label map aligned to the token grid.
/// Accumulates head gradients into `grad` and returns `(loss, d_features)`.
pub fn part_loss_grad(
    fm: &FeatureMap,
    labels: &PartLabelMap,
    head: &Linear,
    grad: Option<&mut Linear>,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let classes = head.output_dim();
    let tokens = if labels.height == fm.height && labels.width == fm.width {
        labels.labels().to_vec()
    } else {
        labels.downsample_majority(fm.height, fm.width)?
    };
    if let Some(&bad) = tokens.iter().find(|&&l| l as usize >= classes) {
        return Err(ClaspError::Config(format!(
            "part label {bad} does not fit a {classes}-way head"
        )));
    }
    let n = fm.num_tokens();
    let c = fm.channels;
    let mut loss = 0.0;
    let mut dfm = vec![0.0; c * n];
    let mut grad = grad;
    for (t, &lab) in tokens.iter().enumerate() {
        let x = fm.token(t);
        let logits = head.forward(x);
        let ls = log_softmax(&logits);
        loss -= ls[lab as usize];
        let mut dl: Vec<f64> = ls.iter().map(|v| v.exp() * scale / n as f64).collect();
        dl[lab as usize] -= scale / n as f64;
        let dx = match grad.as_deref_mut() {
            Some(g) => head.backward(x, &dl, g),
            None => head.backward(x, &dl, &mut Linear::zeros(c, classes)),
        };
        dfm[t * c..(t + 1) * c].copy_from_slice(&dx);
    }
    Ok((loss / n as f64, dfm))
}

pub fn part_loss(fm: &FeatureMap, labels: &PartLabelMap, head: &Linear) -> Result<f64> {
    Ok(part_loss_grad(fm, labels, head, None, 1.0)?.0)
}

/// Masked binary cross-entropy over pooled-feature logits. Unknown
/// attributes drop out of both sum and normalizer.
pub fn attribute_loss_logits(logits: &[f64], labels: &AttributeLabelSet) -> Result<(f64, Vec<f64>)> {
    let total: usize = labels.attributes.iter().map(|a| a.onehot.len()).sum();
    if total != logits.len() {
        return Err(ClaspError::Shape(format!(
            "attribute head emits {} logits, schema needs {total}",
            logits.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let norm: usize = labels
        .attributes
        .iter()
        .filter(|a| a.known())
        .map(|a| a.onehot.len())
        .sum();
    if norm == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let mut off = 0;
    for a in &labels.attributes {
        if a.known() {
            for (j, &y) in a.onehot.iter().enumerate() {
                let z = logits[off + j];
                // BCE(σ(z), y) = softplus(z) − y·z
                loss += softplus(z) - y * z;
                grad[off + j] = (sigmoid(z) - y) / norm as f64;
            }
        }
        off += a.onehot.len();
    }
    Ok((loss / norm as f64, grad))
}

pub fn attribute_loss(fm: &FeatureMap, labels: &AttributeLabelSet, head: &Linear) -> Result<f64> {
    Ok(attribute_loss_logits(&head.forward(&fm.mean_token()), labels)?.0)
}

/// `Var(x) / (Mean(x)² + ε)` with population variance.
pub fn cv2(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var / (mean * mean + CV2_EPSILON)
}

/// Gradient of `cv2` with respect to each entry.
pub fn cv2_grad(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let den = mean * mean + CV2_EPSILON;
    x.iter()
        .map(|v| (2.0 * (v - mean) / n * den - var * 2.0 * mean / n) / (den * den))
        .collect()
}

pub fn importance(records: &[GateRecord], n: usize) -> Vec<f64> {
    let mut imp = vec![0.0; n];
    for r in records {
        imp.iter_mut().zip(&r.gates).for_each(|(a, g)| *a += g);
    }
    imp
}

pub fn load(records: &[GateRecord], n: usize) -> Vec<f64> {
    let mut ld = vec![0.0; n];
    for r in records {
        for (l, &g) in ld.iter_mut().zip(&r.gates) {
            if g > 0.0 {
                *l += 1.0;
            }
        }
    }
    ld
}

fn check_records(records: &[GateRecord], b: usize, n: usize) -> Result<()> {
    if records.is_empty() || b == 0 {
        return Err(ClaspError::Usage("balancing loss over an empty batch".into()));
    }
    if records.len() != b {
        return Err(ClaspError::Usage(format!("batch size {b} but {} gate records", records.len())));
    }
    if records.iter().any(|r| r.gates.len() != n) {
        return Err(ClaspError::Shape(format!("gate records must have {n} experts")));
    }
    Ok(())
}

/// `α·[CV²(importance) + CV²(load)]` for one stage.
pub fn balancing_loss_stage(records: &[GateRecord], b: usize, n: usize) -> Result<f64> {
    check_records(records, b, n)?;
    Ok(BALANCING_ALPHA * (cv2(&importance(records, n)) + cv2(&load(records, n))))
}

/// Loss plus the gradient with respect to every record's gate vector. The
/// load term is piecewise constant and contributes nothing.
pub fn balancing_loss_stage_grad(records: &[GateRecord], n: usize) -> Result<(f64, Vec<f64>)> {
    check_records(records, records.len(), n)?;
    let imp = importance(records, n);
    let loss = BALANCING_ALPHA * (cv2(&imp) + cv2(&load(records, n)));
    let g: Vec<f64> = cv2_grad(&imp).iter().map(|v| BALANCING_ALPHA * v).collect();
    Ok((loss, g))
}

pub fn balancing_loss_total(per_stage: &[f64]) -> f64 {
    per_stage.iter().sum()
}
