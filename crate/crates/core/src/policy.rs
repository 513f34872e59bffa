//! Toy action expert: conditional flow matching over action chunks with
//! timestep-modulated normalization, the prefix/expert attention mask, and an
//! optional factorized discrete action head.
//!
//! Sign convention: the network is trained on the velocity target `a − ω`
//! and sampling integrates `a ← a + Δτ · f` from `ω ~ N(0, I)` at `τ = 0` to
//! the action at `τ = 1`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::adapters::PROMPT_TOKENS;
use crate::autodiff::{Tape, Var};
use crate::encoder::{block_weight_std, layer_error, transformer_block, BlockSpec, INIT_STD};
use crate::error::{contract_err, numeric_err, shape_err, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `τ = TAU_SCALE · Beta(1.5, 1)`, keeping `τ < 1`.
pub const TAU_SCALE: f64 = 0.999;
pub const TAU_ALPHA: f64 = 1.5;
pub const TAU_BETA: f64 = 1.0;
const MIN_PERIOD: f64 = 4e-3;
const MAX_PERIOD: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    pub n_tasks: usize,
    pub discrete_bins: usize,
    /// Adds teacher-forced discrete action tokens and the discrete head.
    pub discrete: bool,
    pub flow_steps: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            action_dim: 2,
            state_dim: 2,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
            time_embed_dim: 16,
            n_tasks: 1,
            discrete_bins: 16,
            discrete: false,
            flow_steps: 10,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 || self.state_dim == 0 || self.n_tasks == 0 {
            return Err(contract_err!("policy horizon, action_dim, state_dim and n_tasks must be positive"));
        }
        if self.n_heads == 0 || width % self.n_heads != 0 {
            return Err(contract_err!("policy width {width} not divisible by {} heads", self.n_heads));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(contract_err!("time_embed_dim must be even and at least 4"));
        }
        if self.flow_steps == 0 || self.discrete_bins < 2 || self.mlp_ratio == 0 {
            return Err(contract_err!("flow_steps, discrete_bins and mlp_ratio out of range"));
        }
        Ok(())
    }

    pub fn n_discrete_tokens(&self) -> usize {
        if self.discrete {
            self.horizon * self.action_dim
        } else {
            0
        }
    }

    pub fn adaptable_linears(&self, width: usize) -> Vec<(String, usize, usize)> {
        let h = width * self.mlp_ratio;
        let mut out = Vec::new();
        for i in 0..self.n_layers {
            for p in ["q", "k", "v", "out"] {
                out.push((format!("policy/blocks.{i}.attn.{p}"), width, width));
            }
            out.push((format!("policy/blocks.{i}.mlp.up"), width, h));
            out.push((format!("policy/blocks.{i}.mlp.down"), h, width));
        }
        out
    }
}

/// Action chunk `H × d_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub a: Tensor,
}

/// `τ·a + (1 − τ)·ω`.
pub fn interpolate(a: &Tensor, omega: &Tensor, tau: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(contract_err!("tau {tau} outside [0, 1]"));
    }
    if tau == 1.0 {
        a.zip_map(omega, |x, _| x)
    } else if tau == 0.0 {
        a.zip_map(omega, |_, w| w)
    } else {
        a.zip_map(omega, |x, w| tau * x + (1.0 - tau) * w)
    }
}

pub fn sample_tau(rng: &mut Rng) -> Result<f64> {
    Ok(TAU_SCALE * rng.beta(TAU_ALPHA, TAU_BETA)?)
}

/// Mean squared error between predicted and target velocities `a − ω`.
pub fn flow_loss_value(pred: &Tensor, a: &Tensor, omega: &Tensor) -> Result<f64> {
    let target = a.sub(omega)?;
    let diff = pred.sub(&target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.numel() as f64)
}

/// Integrates `a ← a + Δτ · f(a, τ)` over `k` equal steps from `a⁰ = ω`.
pub fn euler_integrate(
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    omega: Tensor,
    k: usize,
) -> Result<Tensor> {
    if k == 0 {
        return Err(contract_err!("euler_integrate needs at least one step"));
    }
    let dt = 1.0 / k as f64;
    let mut a = omega;
    for step in 0..k {
        let tau = step as f64 * dt;
        let v = field(&a, tau)?;
        a = a.zip_map(&v, |x, f| x + dt * f)?;
        if !a.is_finite() {
            return Err(numeric_err!("euler integration produced non-finite values at step {step}"));
        }
    }
    Ok(a)
}

/// `x/‖x‖₂ · (1 + γ) + β`. With `eps = None` a zero vector is a contract
/// error; `Some(eps)` normalizes by `sqrt(‖x‖² + eps)` instead.
pub fn ada_rms_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: Option<f64>) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(shape_err!("ada_rms_norm widths {} / {} / {}", x.len(), gamma.len(), beta.len()));
    }
    let n2: f64 = x.iter().map(|v| v * v).sum::<f64>() + eps.unwrap_or(0.0);
    if n2 <= 0.0 {
        return Err(contract_err!("ada_rms_norm of the zero vector"));
    }
    let inv = 1.0 / n2.sqrt();
    Ok(x.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((v, g), b)| v * inv * (1.0 + g) + b)
        .collect())
}

/// Sinusoidal features of `τ` with geometrically spaced periods.
pub fn time_features(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let period = MIN_PERIOD * (MAX_PERIOD / MIN_PERIOD).powf(frac);
        let angle = 2.0 * std::f64::consts::PI * tau / period;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// `(γ(τ), β(τ))` for one norm, computed from a parameter store.
pub fn timestep_modulation(store: &ParamStore, layer: usize, norm: usize, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::with_capacity(2);
    for which in ["gamma", "beta"] {
        let base = format!("policy/blocks.{layer}.norm{norm}.{which}");
        let w = store.get(&format!("{base}.weight"))?;
        let b = store.get(&format!("{base}.bias"))?;
        let phi = time_features(tau, w.cols());
        let mut v = b.data().to_vec();
        for (i, o) in v.iter_mut().enumerate() {
            *o += w.row(i).iter().zip(&phi).map(|(x, y)| x * y).sum::<f64>();
        }
        out.push(v);
    }
    let beta = out.pop().unwrap_or_default();
    let gamma = out.pop().unwrap_or_default();
    Ok((gamma, beta))
}

/// Section lengths of one policy sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Visual tokens plus prompt tokens plus the task token.
    pub prefix: usize,
    pub discrete: usize,
    /// State token plus action tokens.
    pub expert: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.prefix + self.discrete + self.expert
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prefix_range(&self) -> Range<usize> {
        0..self.prefix
    }

    pub fn discrete_range(&self) -> Range<usize> {
        self.prefix..self.prefix + self.discrete
    }

    pub fn expert_range(&self) -> Range<usize> {
        self.prefix + self.discrete..self.len()
    }
}

/// Row-major `len × len` mask, `true` where the query row may attend the key
/// column. Prefix is bidirectional and sees nothing else; discrete tokens see
/// the prefix and earlier discrete tokens; the expert sees the prefix and
/// itself but never the discrete tokens.
pub fn build_attention_mask(layout: Layout) -> Vec<bool> {
    let n = layout.len();
    let mut m = vec![false; n * n];
    let pre = layout.prefix_range();
    let dis = layout.discrete_range();
    let exp = layout.expert_range();
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = if pre.contains(&i) {
                pre.contains(&j)
            } else if dis.contains(&i) {
                pre.contains(&j) || (dis.contains(&j) && j <= i)
            } else {
                pre.contains(&j) || exp.contains(&j)
            };
        }
    }
    m
}

/// Mean `−log softmax(logits)[target]` over rows.
pub fn discrete_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone())?;
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).item())
}

/// Bin index of an action value in `[−1, 1]`.
pub fn action_bin(value: f64, bins: usize) -> usize {
    let u = ((value.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor();
    (u as usize).min(bins - 1)
}

pub fn bin_center(bin: usize, bins: usize) -> f64 {
    -1.0 + (bin as f64 + 0.5) * 2.0 / bins as f64
}

pub fn init_params(cfg: &PolicyConfig, width: usize, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate(width)?;
    let mut s = ParamStore::new();
    let d = width;
    s.insert("policy/task_table", rng.gaussian(&[cfg.n_tasks, d], INIT_STD));
    s.insert("policy/state.weight", rng.gaussian(&[d, cfg.state_dim], INIT_STD));
    // A non-zero offset keeps the state's magnitude visible after the norm.
    s.insert("policy/state.bias", rng.gaussian(&[d], INIT_STD));
    s.insert("policy/action_in.weight", rng.gaussian(&[d, cfg.action_dim], INIT_STD));
    s.insert("policy/action_in.bias", Tensor::zeros(&[d]));
    s.insert("policy/action_pos", rng.gaussian(&[cfg.horizon, d], INIT_STD));
    for (name, d_in, d_out) in cfg.adaptable_linears(d) {
        s.insert(format!("{name}.weight"), rng.gaussian(&[d_out, d_in], block_weight_std(&name, d_in)));
        s.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
    }
    for i in 0..cfg.n_layers {
        for norm in 0..2 {
            for which in ["gamma", "beta"] {
                let base = format!("policy/blocks.{i}.norm{norm}.{which}");
                s.insert(format!("{base}.weight"), rng.gaussian(&[d, cfg.time_embed_dim], INIT_STD));
                s.insert(format!("{base}.bias"), Tensor::zeros(&[d]));
            }
        }
    }
    s.insert("policy/action_out.weight", rng.gaussian(&[cfg.action_dim, d], 1.0 / (d as f64).sqrt()));
    s.insert("policy/action_out.bias", Tensor::zeros(&[cfg.action_dim]));
    if cfg.discrete {
        let k = cfg.discrete_bins;
        s.insert("policy/discrete_embed", rng.gaussian(&[k, d], INIT_STD));
        s.insert(
            "policy/discrete_head.weight",
            rng.gaussian(&[cfg.n_discrete_tokens() * k, d], INIT_STD),
        );
        s.insert("policy/discrete_head.bias", Tensor::zeros(&[cfg.n_discrete_tokens() * k]));
    }
    Ok(s)
}

/// Batched inputs to one policy forward pass.
pub struct PolicyInput<'a> {
    /// `(B · N_v) × D` visual tokens, already adapted.
    pub visual: Var,
    pub n_visual: usize,
    pub tasks: &'a [usize],
    /// `B × state_dim`
    pub states: &'a Tensor,
    /// `(B · H) × d_a` noisy actions `a^τ`.
    pub noisy_actions: &'a Tensor,
    pub taus: &'a [f64],
    /// `B · H · d_a` target bins, required when the discrete path is enabled.
    pub discrete_bins: Option<&'a [usize]>,
}

pub struct PolicyOutput {
    /// `(B · H) × d_a` predicted velocity.
    pub velocity: Var,
    /// `(B · H · d_a) × K` discrete logits, if enabled.
    pub discrete_logits: Option<Var>,
}

pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &PolicyConfig,
    width: usize,
    input: &PolicyInput,
) -> Result<PolicyOutput> {
    let b = input.tasks.len();
    let h = cfg.horizon;
    if b == 0 || input.taus.len() != b || input.states.dims2() != (b, cfg.state_dim) {
        return Err(shape_err!(
            "policy batch: {b} tasks, {} taus, states {:?}",
            input.taus.len(),
            input.states.shape()
        ));
    }
    if input.noisy_actions.dims2() != (b * h, cfg.action_dim) {
        return Err(shape_err!("noisy actions {:?}, need [{}, {}]", input.noisy_actions.shape(), b * h, cfg.action_dim));
    }
    if tape.value(input.visual).dims2() != (b * input.n_visual, width) {
        return Err(shape_err!("visual tokens {:?} for batch {b}", tape.value(input.visual).shape()));
    }
    if let Some(&t) = input.tasks.iter().find(|&&t| t >= cfg.n_tasks) {
        return Err(contract_err!("task id {t} outside {} tasks", cfg.n_tasks));
    }
    let nd = cfg.n_discrete_tokens();
    let bins = if nd > 0 {
        let bins = input
            .discrete_bins
            .ok_or_else(|| contract_err!("discrete path enabled but no target bins given"))?;
        if bins.len() != b * nd || bins.iter().any(|&k| k >= cfg.discrete_bins) {
            return Err(contract_err!("discrete bins must be {} values below {}", b * nd, cfg.discrete_bins));
        }
        Some(bins)
    } else {
        None
    };

    let mut parts = vec![input.visual];
    let mut offset = b * input.n_visual;
    let n_prompt = if binder.has(PROMPT_TOKENS) {
        let p = binder.get(tape, PROMPT_TOKENS)?;
        parts.push(p);
        tape.value(p).rows()
    } else {
        0
    };
    let prompt_off = offset;
    offset += n_prompt;

    let table = binder.get(tape, "policy/task_table")?;
    let task_rows = tape.gather_rows(table, input.tasks)?;
    parts.push(task_rows);
    let task_off = offset;
    offset += b;

    let disc_off = offset;
    if let Some(bins) = bins {
        let emb = binder.get(tape, "policy/discrete_embed")?;
        parts.push(tape.gather_rows(emb, bins)?);
        offset += b * nd;
    }

    let st = tape.constant(input.states.clone())?;
    let sw = binder.get(tape, "policy/state.weight")?;
    let sb = binder.get(tape, "policy/state.bias")?;
    parts.push(tape.linear(st, sw, Some(sb))?);
    let state_off = offset;
    offset += b;

    let act = tape.constant(input.noisy_actions.clone())?;
    let aw = binder.get(tape, "policy/action_in.weight")?;
    let ab = binder.get(tape, "policy/action_in.bias")?;
    let act_emb = tape.linear(act, aw, Some(ab))?;
    let pos = binder.get(tape, "policy/action_pos")?;
    let pos_index: Vec<usize> = (0..b).flat_map(|_| 0..h).collect();
    let pos_rows = tape.gather_rows(pos, &pos_index)?;
    parts.push(tape.add(act_emb, pos_rows)?);
    let act_off = offset;

    let layout = Layout {
        prefix: input.n_visual + n_prompt + 1,
        discrete: nd,
        expert: 1 + h,
    };
    let t = layout.len();
    let mut index = Vec::with_capacity(b * t);
    // Per-row source in the modulation table; `b` selects the zero row.
    let mut mod_index = Vec::with_capacity(b * t);
    for s in 0..b {
        index.extend((0..n_prompt).map(|j| prompt_off + j));
        index.extend((0..input.n_visual).map(|j| s * input.n_visual + j));
        index.push(task_off + s);
        index.extend((0..nd).map(|j| disc_off + s * nd + j));
        index.push(state_off + s);
        index.extend((0..h).map(|j| act_off + s * h + j));
        mod_index.extend(std::iter::repeat(b).take(layout.prefix + nd));
        mod_index.extend(std::iter::repeat(s).take(layout.expert));
    }
    let all = tape.concat_rows(&parts)?;
    let mut x = tape.gather_rows(all, &index)?;

    let phi: Vec<f64> = input
        .taus
        .iter()
        .flat_map(|&tau| time_features(tau, cfg.time_embed_dim))
        .collect();
    let phi = tape.constant(Tensor::new(&[b, cfg.time_embed_dim], phi)?)?;
    let zero_row = tape.constant(Tensor::zeros(&[1, width]))?;
    let mask = build_attention_mask(layout);

    for i in 0..cfg.n_layers {
        let prefix = format!("policy/blocks.{i}");
        let mut mods = Vec::with_capacity(2);
        for norm in 0..2 {
            let mut pair = Vec::with_capacity(2);
            for which in ["gamma", "beta"] {
                let base = format!("{prefix}.norm{norm}.{which}");
                let w = binder.get(tape, &format!("{base}.weight"))?;
                let bias = binder.get(tape, &format!("{base}.bias"))?;
                let per_sample = tape.linear(phi, w, Some(bias))?;
                let table = tape.concat_rows(&[per_sample, zero_row])?;
                pair.push(tape.gather_rows(table, &mod_index)?);
            }
            mods.push((pair[0], pair[1]));
        }
        let spec = BlockSpec {
            prefix: &prefix,
            batch: b,
            heads: cfg.n_heads,
            mask: Some(&mask),
            modulation: Some([mods[0], mods[1]]),
        };
        x = transformer_block(tape, binder, &spec, x).map_err(|e| layer_error(&prefix, e))?;
    }

    let act_rows: Vec<usize> = (0..b)
        .flat_map(|s| (0..h).map(move |j| s * t + layout.prefix + nd + 1 + j))
        .collect();
    let act_out = tape.gather_rows(x, &act_rows)?;
    let ow = binder.get(tape, "policy/action_out.weight")?;
    let ob = binder.get(tape, "policy/action_out.bias")?;
    let velocity = tape.linear(act_out, ow, Some(ob))?;

    let discrete_logits = if nd > 0 {
        let task_rows: Vec<usize> = (0..b).map(|s| s * t + layout.prefix - 1).collect();
        let tr = tape.gather_rows(x, &task_rows)?;
        let hw = binder.get(tape, "policy/discrete_head.weight")?;
        let hb = binder.get(tape, "policy/discrete_head.bias")?;
        let logits = tape.linear(tr, hw, Some(hb))?;
        Some(tape.reshape(logits, &[b * nd, cfg.discrete_bins])?)
    } else {
        None
    };
    Ok(PolicyOutput {
        velocity,
        discrete_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints() {
        let a = Tensor::new(&[1], vec![2.0]).unwrap();
        let w = Tensor::new(&[1], vec![0.0]).unwrap();
        assert_eq!(interpolate(&a, &w, 1.0).unwrap().data(), &[2.0]);
        assert_eq!(interpolate(&a, &w, 0.0).unwrap().data(), &[0.0]);
        assert_eq!(interpolate(&a, &w, 0.5).unwrap().data(), &[1.0]);
        assert!(interpolate(&a, &w, 1.5).is_err());
    }

    #[test]
    fn flow_loss_examples() {
        let a = Tensor::new(&[1], vec![1.0]).unwrap();
        let w = Tensor::new(&[1], vec![0.0]).unwrap();
        let zero = Tensor::zeros(&[1]);
        assert_eq!(flow_loss_value(&zero, &a, &w).unwrap(), 1.0);
        assert_eq!(flow_loss_value(&a.sub(&w).unwrap(), &a, &w).unwrap(), 0.0);
        assert_eq!(flow_loss_value(&zero, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn euler_constant_and_zero_fields() {
        let w = Tensor::new(&[2], vec![0.3, -0.1]).unwrap();
        let out = euler_integrate(|a, _| Ok(Tensor::zeros(a.shape())), w.clone(), 10).unwrap();
        assert!(out.bit_eq(&w));
        let out = euler_integrate(|a, _| Ok(Tensor::full(a.shape(), 0.5)), w.clone(), 10).unwrap();
        assert!(out.max_abs_diff(&w.map(|x| x + 0.5)) < 1e-12);
        assert!(euler_integrate(|a, _| Ok(a.clone()), w, 0).is_err());
    }

    #[test]
    fn euler_linear_field_converges() {
        let target = 0.7;
        let out = euler_integrate(
            |a, tau| Ok(a.map(|x| (target - x) / (1.0 - tau))),
            Tensor::zeros(&[1]),
            1000,
        )
        .unwrap();
        assert!((out.data()[0] - target).abs() < 1e-2);
    }

    #[test]
    fn euler_reports_step_of_nan() {
        let err = euler_integrate(
            |a, tau| Ok(a.map(|_| if tau > 0.25 { f64::INFINITY } else { 0.0 })),
            Tensor::zeros(&[1]),
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn ada_rms_norm_examples() {
        let x = [3.0, 4.0];
        let y = ada_rms_norm(&x, &[0.0; 2], &[0.0; 2], None).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        let y = ada_rms_norm(&x, &[1.0; 2], &[0.0; 2], None).unwrap();
        assert!((y[0] - 1.2).abs() < 1e-15 && (y[1] - 1.6).abs() < 1e-15);
        assert!(ada_rms_norm(&[0.0; 2], &[0.0; 2], &[0.0; 2], None).is_err());
        assert!(ada_rms_norm(&[0.0; 2], &[0.0; 2], &[0.0; 2], Some(1e-8)).is_ok());
    }

    #[test]
    fn mask_examples() {
        let m = build_attention_mask(Layout {
            prefix: 2,
            discrete: 0,
            expert: 1,
        });
        assert!(m[2 * 3] && m[2 * 3 + 1]);
        assert!(!m[2] && !m[3 + 2]);
        let empty = build_attention_mask(Layout {
            prefix: 3,
            discrete: 0,
            expert: 0,
        });
        assert!(empty.iter().all(|&x| x));
    }

    #[test]
    fn discrete_loss_examples() {
        let uniform = Tensor::zeros(&[3, 16]);
        assert!((discrete_loss(&uniform, &[0, 5, 15]).unwrap() - 16f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(&[1, 16]);
        sharp.set2(0, 4, 20.0);
        let want = (15.0 * (-20.0f64).exp()).ln_1p();
        assert!((discrete_loss(&sharp, &[4]).unwrap() - want).abs() < 1e-13);
        sharp.set2(0, 4, 25.0);
        assert!(discrete_loss(&sharp, &[4]).unwrap() < 1e-8);
        assert!(discrete_loss(&uniform, &[16, 0, 0]).is_err());
    }

    #[test]
    fn bins_cover_range() {
        assert_eq!(action_bin(-1.0, 16), 0);
        assert_eq!(action_bin(1.0, 16), 15);
        assert_eq!(action_bin(bin_center(7, 16), 16), 7);
    }
}
