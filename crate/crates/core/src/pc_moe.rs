//! Prompt-controlled mixture-of-experts block.
//!
//! ```text
//! F_gate = F ⊕ e_k
//! G_c    = Softmax(F_gate · W_c)                       per token, over channels
//! G_g    = TopK(Softmax(x̄ · W_g) + N(0,1)·Softplus(x̄ · W_noise))   x̄ = mean-pooled F_gate
//! Y      = Σ_{j ∈ TopK} G_g[j] · E_j(F ⊙ G_c) + FC(e_k)
//! ```
//!
//! Gradients treat the TopK selection as a fixed mask: only selected entries
//! carry gradient, unselected experts are neither evaluated nor updated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMap;
use crate::error::{ClaspError, Result};
use crate::nn::{join, Linear, Mlp, MlpCache, ParamTree};
use crate::tensor::{
    mat_vec_acc, outer_acc, sigmoid, softmax, softmax_backward, softplus, vec_mat_acc, Tensor,
};

pub const NUM_TASKS: usize = 3;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub k_top: usize,
    pub noise_enabled: bool,
    pub renormalize_after_topk: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 10,
            k_top: 6,
            noise_enabled: true,
            renormalize_after_topk: false,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.k_top == 0 || self.k_top > self.n_experts {
            return Err(ClaspError::Config(format!(
                "need 1 <= k_top <= n_experts, got k_top={} n_experts={}",
                self.k_top, self.n_experts
            )));
        }
        Ok(())
    }
}

/// Parameters of one stage's block. Also used as its own gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// `[NUM_TASKS, c]`, one prompt per pretext task.
    pub prompts: Tensor,
    /// `[c, c]`
    pub w_channel: Tensor,
    /// `[c, N]`
    pub w_gate: Tensor,
    /// `[c, N]`
    pub w_noise: Tensor,
    /// Token-wise `c → c → c` perceptrons.
    pub experts: Vec<Mlp>,
    /// Prompt residual `c → c`.
    pub fc: Linear,
}

impl MoeParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, cfg: &MoeConfig, rng: &mut R) -> Self {
        let prompts = Tensor::randn(&[NUM_TASKS, channels], INIT_STD, rng);
        let w_channel = Tensor::randn(&[channels, channels], INIT_STD, rng);
        let w_gate = Tensor::randn(&[channels, cfg.n_experts], INIT_STD, rng);
        let w_noise = Tensor::randn(&[channels, cfg.n_experts], INIT_STD, rng);
        let experts = (0..cfg.n_experts)
            .map(|_| Mlp::new(&[channels, channels, channels], rng))
            .collect();
        Self {
            prompts,
            w_channel,
            w_gate,
            w_noise,
            experts,
            fc: Linear::zeros(channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_channel.shape()[0]
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn prompt(&self, task: usize) -> &[f64] {
        self.prompts.row(task)
    }
}

impl ParamTree for MoeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "prompts"), &self.prompts);
        f(join(prefix, "w_channel"), &self.w_channel);
        f(join(prefix, "w_gate"), &self.w_gate);
        f(join(prefix, "w_noise"), &self.w_noise);
        for (j, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("expert{j}")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "prompts"), &mut self.prompts);
        f(join(prefix, "w_channel"), &mut self.w_channel);
        f(join(prefix, "w_gate"), &mut self.w_gate);
        f(join(prefix, "w_noise"), &mut self.w_noise);
        for (j, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("expert{j}")), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Per-sample global gate after TopK.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRecord {
    pub task: usize,
    /// Length `N`; zero outside the selected set.
    pub gates: Vec<f64>,
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
}

impl GateRecord {
    pub fn nonzero(&self) -> usize {
        self.gates.iter().filter(|&&g| g != 0.0).count()
    }
}

/// `F ⊕ e`: adds `e` to every token.
pub fn augment_with_prompt(fm: &FeatureMap, prompt: &[f64]) -> Result<FeatureMap> {
    if prompt.len() != fm.channels {
        return Err(ClaspError::Config(format!(
            "prompt has {} channels, feature map {}",
            prompt.len(),
            fm.channels
        )));
    }
    let mut out = fm.clone();
    for t in 0..out.num_tokens() {
        out.token_mut(t).iter_mut().zip(prompt).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Per-token softmax over `xᵀW_c`, token-major `[h·w, c]`.
pub fn channel_gate(gated: &FeatureMap, w_channel: &Tensor) -> Result<Vec<f64>> {
    let c = gated.channels;
    if w_channel.shape() != [c, c] {
        return Err(ClaspError::Shape(format!("W_c {:?} for {c} channels", w_channel.shape())));
    }
    let mut out = Vec::with_capacity(gated.data().len());
    for t in 0..gated.num_tokens() {
        let mut logits = vec![0.0; c];
        vec_mat_acc(gated.token(t), w_channel, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ClaspError::Numeric("channel gate logits".into()));
        }
        out.extend(softmax(&logits));
    }
    Ok(out)
}

/// Indices of the `k` largest values, ties to the lowest index, ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Intermediates of the global gate needed for its gradient.
#[derive(Debug, Clone)]
pub struct GlobalGateCache {
    pub pooled: Vec<f64>,
    pub probs: Vec<f64>,
    /// `(standard normal draw, softplus input)` per expert when noise was applied.
    pub noise: Option<(Vec<f64>, Vec<f64>)>,
    /// Pre-renormalization gate values on the selected set.
    pub noisy: Vec<f64>,
    pub renorm_sum: Option<f64>,
}

pub fn global_gate<R: Rng + ?Sized>(
    gated: &FeatureMap,
    w_gate: &Tensor,
    w_noise: &Tensor,
    cfg: &MoeConfig,
    training: bool,
    rng: &mut R,
    task: usize,
) -> Result<(GateRecord, GlobalGateCache)> {
    cfg.validate()?;
    let c = gated.channels;
    let n = cfg.n_experts;
    if w_gate.shape() != [c, n] || w_noise.shape() != [c, n] {
        return Err(ClaspError::Shape(format!(
            "gate weights {:?}/{:?} for c={c}, N={n}",
            w_gate.shape(),
            w_noise.shape()
        )));
    }
    let pooled = gated.mean_token();
    let mut logits = vec![0.0; n];
    vec_mat_acc(&pooled, w_gate, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ClaspError::Numeric("global gate logits".into()));
    }
    let probs = softmax(&logits);
    let mut noisy = probs.clone();
    let noise = if cfg.noise_enabled && training {
        let mut s = vec![0.0; n];
        vec_mat_acc(&pooled, w_noise, &mut s);
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..n {
            noisy[j] += z[j] * softplus(s[j]);
        }
        Some((z, s))
    } else {
        None
    };
    let selected = top_k_indices(&noisy, cfg.k_top);
    let mut gates = vec![0.0; n];
    for &j in &selected {
        gates[j] = noisy[j];
    }
    let renorm_sum = if cfg.renormalize_after_topk {
        let s: f64 = selected.iter().map(|&j| noisy[j]).sum();
        for &j in &selected {
            gates[j] /= s;
        }
        Some(s)
    } else {
        None
    };
    Ok((
        GateRecord { task, gates, selected },
        GlobalGateCache {
            pooled,
            probs,
            noise,
            noisy,
            renorm_sum,
        },
    ))
}

/// Everything `moe_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct MoeCache {
    task: usize,
    input: FeatureMap,
    gated: FeatureMap,
    channel_weights: Vec<f64>,
    gate: GlobalGateCache,
    record: GateRecord,
    /// `(expert index, per-token outputs, per-token caches)` for selected experts.
    expert_runs: Vec<(usize, Vec<Vec<f64>>, Vec<MlpCache>)>,
}

impl MoeCache {
    pub fn record(&self) -> &GateRecord {
        &self.record
    }
}

pub fn moe_forward<R: Rng + ?Sized>(
    params: &MoeParams,
    fm: &FeatureMap,
    task: usize,
    cfg: &MoeConfig,
    training: bool,
    rng: &mut R,
) -> Result<(FeatureMap, MoeCache)> {
    if task >= NUM_TASKS {
        return Err(ClaspError::Domain(format!("task index {task} outside 0..{NUM_TASKS}")));
    }
    if params.n_experts() != cfg.n_experts {
        return Err(ClaspError::Config(format!(
            "{} experts built, config says {}",
            params.n_experts(),
            cfg.n_experts
        )));
    }
    let c = fm.channels;
    let prompt = params.prompt(task);
    let gated = augment_with_prompt(fm, prompt)?;
    let channel_weights = channel_gate(&gated, &params.w_channel)?;
    let (record, gate) = global_gate(&gated, &params.w_gate, &params.w_noise, cfg, training, rng, task)?;

    let n_tok = fm.num_tokens();
    let expert_inputs: Vec<Vec<f64>> = (0..n_tok)
        .map(|t| {
            fm.token(t)
                .iter()
                .zip(&channel_weights[t * c..(t + 1) * c])
                .map(|(a, b)| a * b)
                .collect()
        })
        .collect();

    let residual = params.fc.forward(prompt);
    let mut out = FeatureMap::zeros(c, fm.height, fm.width, fm.stage_id);
    let mut expert_runs = Vec::with_capacity(record.selected.len());
    for &j in &record.selected {
        let g = record.gates[j];
        let mut outs = Vec::with_capacity(n_tok);
        let mut caches = Vec::with_capacity(n_tok);
        for (t, x) in expert_inputs.iter().enumerate() {
            let (y, cache) = params.experts[j].forward(x);
            out.token_mut(t).iter_mut().zip(&y).for_each(|(o, v)| *o += g * v);
            outs.push(y);
            caches.push(cache);
        }
        expert_runs.push((j, outs, caches));
    }
    for t in 0..n_tok {
        out.token_mut(t).iter_mut().zip(&residual).for_each(|(o, r)| *o += r);
    }
    if !out.is_finite() {
        return Err(ClaspError::Numeric("moe output".into()));
    }
    let cache = MoeCache {
        task,
        input: fm.clone(),
        gated,
        channel_weights,
        gate,
        record,
        expert_runs,
    };
    Ok((out, cache))
}

/// Backpropagates `d_out` (token-major, same shape as the output) plus an
/// optional direct gradient on the gate vector. Parameter gradients are
/// accumulated into `grad`; returns the gradient with respect to the input.
pub fn moe_backward(
    params: &MoeParams,
    cache: &MoeCache,
    d_out: &[f64],
    d_gates: Option<&[f64]>,
    grad: &mut MoeParams,
) -> Result<Vec<f64>> {
    let c = cache.input.channels;
    let n_tok = cache.input.num_tokens();
    let n = params.n_experts();
    if d_out.len() != c * n_tok {
        return Err(ClaspError::Shape("moe upstream gradient".into()));
    }
    let task = cache.task;
    let prompt = params.prompt(task);

    // prompt residual
    let mut d_res = vec![0.0; c];
    for t in 0..n_tok {
        d_res.iter_mut().zip(&d_out[t * c..(t + 1) * c]).for_each(|(a, b)| *a += b);
    }
    let mut d_prompt = params.fc.backward(prompt, &d_res, &mut grad.fc);

    // experts
    let mut d_gate = vec![0.0; n];
    if let Some(dg) = d_gates {
        if dg.len() != n {
            return Err(ClaspError::Shape("gate gradient length".into()));
        }
        d_gate.copy_from_slice(dg);
    }
    let mut d_x = vec![vec![0.0; c]; n_tok];
    for (j, outs, caches) in &cache.expert_runs {
        let g = cache.record.gates[*j];
        for t in 0..n_tok {
            let dy = &d_out[t * c..(t + 1) * c];
            d_gate[*j] += dy.iter().zip(&outs[t]).map(|(a, b)| a * b).sum::<f64>();
            let scaled: Vec<f64> = dy.iter().map(|v| g * v).collect();
            let dxe = params.experts[*j].backward(&caches[t], &scaled, &mut grad.experts[*j]);
            d_x[t].iter_mut().zip(&dxe).for_each(|(a, b)| *a += b);
        }
    }

    // channel gate
    let mut d_input = vec![0.0; c * n_tok];
    let mut d_gated = vec![0.0; c * n_tok];
    for t in 0..n_tok {
        let f = cache.input.token(t);
        let w = &cache.channel_weights[t * c..(t + 1) * c];
        let dw: Vec<f64> = d_x[t].iter().zip(f).map(|(a, b)| a * b).collect();
        for k in 0..c {
            d_input[t * c + k] += d_x[t][k] * w[k];
        }
        let dl = softmax_backward(w, &dw);
        outer_acc(&mut grad.w_channel, cache.gated.token(t), &dl);
        mat_vec_acc(&params.w_channel, &dl, &mut d_gated[t * c..(t + 1) * c]);
    }

    // global gate, selection held fixed
    let sel = &cache.record.selected;
    let mut d_noisy = vec![0.0; n];
    if let Some(s) = cache.gate.renorm_sum {
        let inner: f64 = sel.iter().map(|&j| d_gate[j] * cache.record.gates[j]).sum();
        for &j in sel {
            d_noisy[j] = (d_gate[j] - inner) / s;
        }
    } else {
        for &j in sel {
            d_noisy[j] = d_gate[j];
        }
    }
    let d_logits = softmax_backward(&cache.gate.probs, &d_noisy);
    let pooled = &cache.gate.pooled;
    outer_acc(&mut grad.w_gate, pooled, &d_logits);
    let mut d_pooled = vec![0.0; c];
    mat_vec_acc(&params.w_gate, &d_logits, &mut d_pooled);
    if let Some((z, s)) = &cache.gate.noise {
        let d_s: Vec<f64> = (0..n).map(|j| d_noisy[j] * z[j] * sigmoid(s[j])).collect();
        outer_acc(&mut grad.w_noise, pooled, &d_s);
        mat_vec_acc(&params.w_noise, &d_s, &mut d_pooled);
    }
    let inv = 1.0 / n_tok as f64;
    for t in 0..n_tok {
        for k in 0..c {
            d_gated[t * c + k] += d_pooled[k] * inv;
        }
    }

    // F_gate = F + e_k
    for t in 0..n_tok {
        for k in 0..c {
            let v = d_gated[t * c + k];
            d_input[t * c + k] += v;
            d_prompt[k] += v;
        }
    }
    grad.prompts
        .row_mut(task)
        .iter_mut()
        .zip(&d_prompt)
        .for_each(|(a, b)| *a += b);
    Ok(d_input)
}
