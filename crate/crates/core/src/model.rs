//! Desk-scale multi-stage backbone with a prompt-controlled MoE block after
//! every stage.
//!
//! Stage 0 embeds non-overlapping image patches; later stages merge blocks of
//! tokens from the previous grid. Each stage applies a linear token-mixing
//! layer, then `out = F + MoE(F, e_k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, ImageRGB, StageShape};
use crate::error::{ClaspError, Result};
use crate::nn::{join, Linear, ParamTree};
use crate::pc_moe::{moe_backward, moe_forward, GateRecord, MoeCache, MoeConfig, MoeParams};
use crate::tensor::Tensor;

pub const MAX_STAGES: usize = 4;
pub const MIX_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub stages: Vec<StageShape>,
    pub moe: MoeConfig,
    pub prototypes: usize,
    pub head_hidden: usize,
    /// Part classes including background.
    pub part_classes: usize,
    pub attribute_outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 16,
            stages: vec![StageShape::new(8, 8, 4), StageShape::new(16, 4, 2)],
            moe: MoeConfig::default(),
            prototypes: 256,
            head_hidden: 256,
            part_classes: 8,
            attribute_outputs: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        if self.stages.is_empty() || self.stages.len() > MAX_STAGES {
            return Err(ClaspError::Config(format!(
                "need 1..={MAX_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        let (mut h, mut w) = (self.image_height, self.image_width);
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.height == 0 || s.width == 0 || h % s.height != 0 || w % s.width != 0 {
                return Err(ClaspError::Config(format!(
                    "stage {i} grid {}x{} does not tile the {h}x{w} input",
                    s.height, s.width
                )));
            }
            h = s.height;
            w = s.width;
        }
        if self.prototypes == 0 || self.head_hidden == 0 || self.part_classes < 2 || self.attribute_outputs == 0 {
            return Err(ClaspError::Config("head dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Width of each token entering stage `i`'s embedding.
    pub fn stage_input_dim(&self, i: usize) -> usize {
        let s = &self.stages[i];
        if i == 0 {
            3 * (self.image_height / s.height) * (self.image_width / s.width)
        } else {
            let p = &self.stages[i - 1];
            p.channels * (p.height / s.height) * (p.width / s.width)
        }
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub embed: Linear,
    /// `[T, T]` token-mixing matrix, `F = E + A·E`.
    pub mix: Tensor,
    pub moe: MoeParams,
}

impl ParamTree for StageParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "mix"), &self.mix);
        self.moe.visit(&join(prefix, "moe"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "mix"), &mut self.mix);
        self.moe.visit_mut(&join(prefix, "moe"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<StageParams>,
}

impl ParamTree for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Vec<f64>,
    embedded: Vec<f64>,
    moe: MoeCache,
}

/// One forward pass of one image under one task prompt.
#[derive(Debug, Clone)]
pub struct PassCache {
    stages: Vec<StageCache>,
    pub output: FeatureMap,
}

impl PassCache {
    /// Global gate per stage, in stage order.
    pub fn records(&self) -> Vec<&GateRecord> {
        self.stages.iter().map(|s| s.moe.record()).collect()
    }
}

fn patchify(image: &ImageRGB, s: &StageShape) -> Vec<f64> {
    let (ph, pw) = (image.height / s.height, image.width / s.width);
    let mut out = Vec::with_capacity(3 * image.height * image.width);
    for ty in 0..s.height {
        for tx in 0..s.width {
            for ch in 0..3 {
                for py in 0..ph {
                    for px in 0..pw {
                        out.push(image.get(ch, ty * ph + py, tx * pw + px));
                    }
                }
            }
        }
    }
    out
}

/// Concatenates `fh × fw` blocks of previous-stage tokens, row-major.
fn merge(prev: &FeatureMap, s: &StageShape) -> Vec<f64> {
    let (fh, fw) = (prev.height / s.height, prev.width / s.width);
    let mut out = Vec::with_capacity(prev.data().len());
    for ty in 0..s.height {
        for tx in 0..s.width {
            for dy in 0..fh {
                for dx in 0..fw {
                    out.extend_from_slice(prev.token((ty * fh + dy) * prev.width + tx * fw + dx));
                }
            }
        }
    }
    out
}

fn unmerge(d_in: &[f64], prev: &StageShape, s: &StageShape) -> Vec<f64> {
    let (fh, fw) = (prev.height / s.height, prev.width / s.width);
    let c = prev.channels;
    let mut out = vec![0.0; prev.tokens() * c];
    let mut k = 0;
    for ty in 0..s.height {
        for tx in 0..s.width {
            for dy in 0..fh {
                for dx in 0..fw {
                    let t = (ty * fh + dy) * prev.width + tx * fw + dx;
                    out[t * c..(t + 1) * c].copy_from_slice(&d_in[k..k + c]);
                    k += c;
                }
            }
        }
    }
    out
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d_in = cfg.stage_input_dim(i);
                StageParams {
                    embed: Linear::randn(d_in, s.channels, 1.0 / (d_in as f64).sqrt(), rng),
                    mix: Tensor::randn(&[s.tokens(), s.tokens()], MIX_INIT_STD, rng),
                    moe: MoeParams::init(s.channels, &cfg.moe, rng),
                }
            })
            .collect();
        Ok(Self { stages })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        cfg: &ModelConfig,
        image: &ImageRGB,
        task: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<PassCache> {
        if image.height != cfg.image_height || image.width != cfg.image_width {
            return Err(ClaspError::Shape(format!(
                "image {}x{} but model expects {}x{}",
                image.height, image.width, cfg.image_height, cfg.image_width
            )));
        }
        if self.stages.len() != cfg.stages.len() {
            return Err(ClaspError::Structural("stage count differs from config".into()));
        }
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut current: Option<FeatureMap> = None;
        for (i, (p, s)) in self.stages.iter().zip(&cfg.stages).enumerate() {
            let input = match &current {
                None => patchify(image, s),
                Some(prev) => merge(prev, s),
            };
            let d_in = cfg.stage_input_dim(i);
            let t = s.tokens();
            let c = s.channels;
            let mut embedded = Vec::with_capacity(t * c);
            for k in 0..t {
                embedded.extend(p.embed.forward(&input[k * d_in..(k + 1) * d_in]));
            }
            let mut mixed = embedded.clone();
            let a = p.mix.data();
            for r in 0..t {
                for q in 0..t {
                    let w = a[r * t + q];
                    if w != 0.0 {
                        for ch in 0..c {
                            mixed[r * c + ch] += w * embedded[q * c + ch];
                        }
                    }
                }
            }
            let f = FeatureMap::from_tokens(c, s.height, s.width, i, mixed)?;
            let (y, moe) = moe_forward(&p.moe, &f, task, &cfg.moe, training, rng)?;
            let mut out = f;
            out.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
            caches.push(StageCache { input, embedded, moe });
            current = Some(out);
        }
        Ok(PassCache {
            stages: caches,
            output: current.expect("at least one stage"),
        })
    }

    /// Backpropagates `d_out` on the final map plus optional per-stage gate
    /// gradients, accumulating into `grad`.
    pub fn backward(
        &self,
        cfg: &ModelConfig,
        cache: &PassCache,
        d_out: &[f64],
        d_gates: &[Option<Vec<f64>>],
        grad: &mut Backbone,
    ) -> Result<()> {
        let n = self.stages.len();
        if d_gates.len() != n && !d_gates.is_empty() {
            return Err(ClaspError::Shape("one gate gradient slot per stage".into()));
        }
        let mut d = d_out.to_vec();
        for i in (0..n).rev() {
            let p = &self.stages[i];
            let s = &cfg.stages[i];
            let sc = &cache.stages[i];
            let t = s.tokens();
            let c = s.channels;
            let dg = d_gates.get(i).and_then(|g| g.as_deref());
            let d_moe = moe_backward(&p.moe, &sc.moe, &d, dg, &mut grad.stages[i].moe)?;
            let d_f: Vec<f64> = d.iter().zip(&d_moe).map(|(a, b)| a + b).collect();
            let mut d_e = d_f.clone();
            let a = p.mix.data();
            let ga = grad.stages[i].mix.data_mut();
            for r in 0..t {
                for q in 0..t {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += d_f[r * c + ch] * sc.embedded[q * c + ch];
                        d_e[q * c + ch] += a[r * t + q] * d_f[r * c + ch];
                    }
                    ga[r * t + q] += acc;
                }
            }
            let d_in_dim = cfg.stage_input_dim(i);
            let mut d_input = vec![0.0; t * d_in_dim];
            for k in 0..t {
                let dx = p.embed.backward(
                    &sc.input[k * d_in_dim..(k + 1) * d_in_dim],
                    &d_e[k * c..(k + 1) * c],
                    &mut grad.stages[i].embed,
                );
                d_input[k * d_in_dim..(k + 1) * d_in_dim].copy_from_slice(&dx);
            }
            if i > 0 {
                d = unmerge(&d_input, &cfg.stages[i - 1], s);
            }
        }
        Ok(())
    }

    /// Names of tensors shared across tasks (everything except prompts),
    /// grouped by layer.
    pub fn shared_layers(&self) -> Vec<(String, Vec<String>)> {
        let mut layers: Vec<(String, Vec<String>)> = Vec::new();
        for (name, _) in self.named_tensors() {
            if name.ends_with(".prompts") {
                continue;
            }
            let layer = name
                .strip_suffix(".weight")
                .or_else(|| name.strip_suffix(".bias"))
                .unwrap_or(&name)
                .to_string();
            match layers.last_mut() {
                Some((l, members)) if *l == layer => members.push(name),
                _ => layers.push((layer, vec![name])),
            }
        }
        layers
    }
}
