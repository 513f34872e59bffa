//! Optimization: AdamW with decoupled weight decay, global-norm clipping,
//! linear-warmup cosine schedule, and the one-shot adaptation loop that
//! trains only `adapter/*` parameters on a single demonstration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, numeric_err, Error, Result};
use crate::model::{Dataset, Example, FlowBatch, VlaModel};
use crate::params::{is_adapter_param, Binder, Checkpoint, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Loss above this multiple of the first step's loss counts as diverging.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive diverging steps before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub adapter: AdapterKind,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self::ftm_reference()
    }
}

impl AdaptConfig {
    /// 5000 steps, cosine from 5e-4 to 5e-5 over 5000 steps.
    pub fn ftm_reference() -> Self {
        Self {
            adapter: AdapterKind::Ftm,
            batch_size: 32,
            steps: 5000,
            warmup_steps: 500,
            peak_lr: 5e-4,
            min_lr: 5e-5,
            decay_steps: 5000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-10,
            clip_norm: 1.0,
            seed: 0,
        }
    }

    /// 1500 steps of a 2000-step cosine from 5e-4 to 5e-6, rank 16.
    pub fn fla_reference() -> Self {
        Self {
            adapter: AdapterKind::Fla { rank: 16 },
            steps: 1500,
            decay_steps: 2000,
            min_lr: 5e-6,
            ..Self::ftm_reference()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ftm-paper" => Ok(Self::ftm_reference()),
            "fla-paper" => Ok(Self::fla_reference()),
            other => Err(Error::Config(format!("unknown training preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.decay_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds decay_steps {}",
                self.warmup_steps, self.decay_steps
            )));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr ({}) <= peak_lr ({})",
                self.min_lr, self.peak_lr
            )));
        }
        if self.batch_size == 0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("batch_size and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, cosine to `min_lr` at `decay_steps`,
/// then constant.
pub fn lr_at(step: usize, cfg: &AdaptConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.decay_steps {
        return if cfg.decay_steps == cfg.warmup_steps && step == cfg.warmup_steps {
            cfg.peak_lr
        } else {
            cfg.min_lr
        };
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.decay_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One AdamW update of the parameters named in `grads`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdaptConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(numeric_err!("non-finite gradient for parameter {name}"));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(crate::error::shape_err!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    /// Mean of the last `n` losses (or all of them if fewer).
    pub fn trailing_mean(&self, n: usize) -> Option<f64> {
        if self.loss_trace.is_empty() {
            return None;
        }
        let tail = &self.loss_trace[self.loss_trace.len().saturating_sub(n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Generic optimization loop. `loss_fn` builds the loss for one step on a
/// fresh tape; only parameters accepted by `trainable` are updated.
pub fn train(
    params: &mut ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    cfg: &AdaptConfig,
    mut loss_fn: impl FnMut(&mut Tape, &mut Binder, &mut Rng) -> Result<Var>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let names: Vec<String> = params.names().filter(|n| trainable(n)).cloned().collect();
    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut state = OptimizerState::default();
    let mut report = TrainReport::default();
    let mut diverging = 0usize;
    for step in 0..cfg.steps {
        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(params, trainable);
            let loss = loss_fn(&mut tape, &mut binder, &mut rng).map_err(|e| attach_trace(e, &report))?;
            let value = tape.value(loss).item();
            let g = tape.backward(loss).map_err(|e| attach_trace(e, &report))?;
            let mut grads = binder.grads(g)?;
            for n in &names {
                if !grads.contains_key(n) {
                    grads.insert(n.clone(), Tensor::zeros(params.get(n)?.shape()));
                }
            }
            (value, grads)
        };
        report.loss_trace.push(loss);
        if loss > DIVERGENCE_FACTOR * report.loss_trace[0] {
            diverging += 1;
            if diverging >= DIVERGENCE_PATIENCE {
                return Err(Error::Training {
                    message: format!(
                        "loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_PATIENCE} consecutive steps (step {step})"
                    ),
                    trace: report.loss_trace,
                });
            }
        } else {
            diverging = 0;
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        report.lr_trace.push(lr);
        adamw_step(params, &grads, &mut state, lr, cfg).map_err(|e| attach_trace(e, &report))?;
    }
    Ok(report)
}

fn attach_trace(e: Error, report: &TrainReport) -> Error {
    match e {
        Error::Numeric(message) => Error::Training {
            message,
            trace: report.loss_trace.clone(),
        },
        other => other,
    }
}

/// Behavior cloning of every non-adapter parameter on `data`. Each batch
/// draws `images_per_batch` images and splits `cfg.batch_size` examples
/// evenly among them, which bounds encoder work per step.
pub fn pretrain(model: &mut VlaModel, data: &Dataset, cfg: &AdaptConfig, images_per_batch: usize) -> Result<TrainReport> {
    let mut by_image = vec![Vec::new(); data.images.len()];
    for (i, ex) in data.examples.iter().enumerate() {
        by_image[ex.image].push(i);
    }
    let groups: Vec<Vec<usize>> = by_image.into_iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() || images_per_batch == 0 {
        return Err(contract_err!("pretraining needs data and images_per_batch > 0"));
    }
    let mut params = std::mem::take(&mut model.params);
    let view = model.clone();
    let pc = model.config.policy.clone();
    let result = train(&mut params, &|n| !is_adapter_param(n), cfg, |tape, binder, rng| {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .scan(0, |g, j| {
                if j % cfg.batch_size.div_ceil(images_per_batch) == 0 {
                    *g = rng.below(groups.len());
                }
                let grp = &groups[*g];
                Some(grp[rng.below(grp.len())])
            })
            .collect();
        let batch = FlowBatch::from_indices(data, &picks, &pc, rng)?;
        view.flow_loss(tape, binder, &batch)
    });
    model.params = params;
    result
}

/// One expert-demonstration frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoFrame {
    pub image: Tensor,
    pub state: Vec<f64>,
    pub task: usize,
    /// `H × d_a`
    pub actions: Tensor,
}

/// A single expert episode under the target perturbation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Demonstration {
    pub frames: Vec<DemoFrame>,
}

impl Demonstration {
    /// Frames sharing bit-identical images reuse one stored image.
    pub fn to_dataset(&self) -> Result<Dataset> {
        if self.frames.is_empty() {
            return Err(contract_err!("demonstration has no frames"));
        }
        let mut data = Dataset::default();
        for f in &self.frames {
            let idx = match data.images.iter().position(|im| im.bit_eq(&f.image)) {
                Some(i) => i,
                None => {
                    data.images.push(f.image.clone());
                    data.images.len() - 1
                }
            };
            data.examples.push(Example {
                image: idx,
                state: f.state.clone(),
                task: f.task,
                actions: f.actions.clone(),
            });
        }
        Ok(data)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// `adapter/*` arrays plus the hash of the frozen base.
    pub delta: Checkpoint,
    pub report: TrainReport,
}

/// Attaches `cfg.adapter` at identity init if the model does not already
/// carry it, then trains adapter parameters only on minibatches drawn with
/// replacement from `demo`.
pub fn one_shot_adapt(model: &mut VlaModel, demo: &Demonstration, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let data = demo.to_dataset()?;
    for im in &data.images {
        let s = model.config.encoder.image_size;
        if im.shape() != [s, s, 3] {
            return Err(contract_err!("demonstration image {:?} does not match the encoder", im.shape()));
        }
    }
    if model.adapter != cfg.adapter {
        let mut init_rng = Rng::with_stream(cfg.seed, 2);
        model.attach_adapter(cfg.adapter, &mut init_rng)?;
    }
    let frozen_before = model.params.hashes_where(|n| !is_adapter_param(n));
    let base_hash = model.params.content_hash(|n| !is_adapter_param(n));
    let report = if cfg.adapter.is_none() {
        TrainReport::default()
    } else {
        let mut params = std::mem::take(&mut model.params);
        let view = model.clone();
        let pc = model.config.policy.clone();
        let result = train(&mut params, &is_adapter_param, cfg, |tape, binder, rng| {
            let batch = FlowBatch::sample(&data, cfg.batch_size, &pc, rng)?;
            view.flow_loss(tape, binder, &batch)
        });
        model.params = params;
        result?
    };
    if model.params.hashes_where(|n| !is_adapter_param(n)) != frozen_before {
        return Err(contract_err!("frozen parameters changed during adaptation"));
    }
    let mut delta = Checkpoint::new(
        model.params.filtered(is_adapter_param),
        serde_json::json!({ "adapter": cfg.adapter.to_string(), "steps": cfg.steps, "seed": cfg.seed }),
    );
    delta.base_hash = Some(base_hash);
    Ok(AdaptOutcome { delta, report })
}

/// Outcome of fitting the flow head to the two-point action set `{±0.5}`.
#[derive(Clone, Debug, Serialize)]
pub struct TwoModeReport {
    pub samples: usize,
    /// Share of samples within 0.1 of either mode.
    pub near_mode: f64,
    pub mean: f64,
    pub final_loss: Option<f64>,
}

/// Trains a one-dimensional flow head (with a small encoder on a constant
/// image) on two equally likely actions under identical context, then draws
/// `samples` Euler samples.
pub fn two_mode_check(seed: u64, steps: usize, samples: usize) -> Result<TwoModeReport> {
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::policy::PolicyConfig;

    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 1,
            ..EncoderConfig::default()
        },
        policy: PolicyConfig {
            horizon: 1,
            action_dim: 1,
            n_layers: 1,
            n_heads: 2,
            ..PolicyConfig::default()
        },
    };
    let mut model = VlaModel::init(cfg, seed)?;
    let image = Tensor::full(&[32, 32, 3], 0.5);
    let example = |a: f64| -> Result<Example> {
        Ok(Example {
            image: 0,
            state: vec![0.0, 0.0],
            task: 0,
            actions: Tensor::new(&[1, 1], vec![a])?,
        })
    };
    let data = Dataset {
        images: vec![image.clone()],
        examples: vec![example(0.5)?, example(-0.5)?],
    };
    let train_cfg = AdaptConfig {
        adapter: AdapterKind::None,
        steps,
        warmup_steps: 100.min(steps),
        decay_steps: steps.max(100),
        peak_lr: 3e-3,
        min_lr: 3e-4,
        weight_decay: 0.0,
        batch_size: 128,
        seed,
        ..AdaptConfig::ftm_reference()
    };
    let report = pretrain(&mut model, &data, &train_cfg, 1)?;
    let tokens = model.observe(&image)?;
    let refs = vec![&tokens; samples];
    let mut rng = Rng::with_stream(seed, 3);
    let out = model.sample_actions(&refs, &Tensor::zeros(&[samples, 2]), &vec![0; samples], &mut rng)?;
    let xs: Vec<f64> = out.iter().map(|a| a.data()[0]).collect();
    let near = xs.iter().filter(|x| (x.abs() - 0.5).abs() <= 0.1).count();
    Ok(TwoModeReport {
        samples,
        near_mode: near as f64 / samples as f64,
        mean: xs.iter().sum::<f64>() / samples as f64,
        final_loss: report.trailing_mean(100),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cfg(wd: f64) -> AdaptConfig {
        AdaptConfig {
            weight_decay: wd,
            ..AdaptConfig::ftm_reference()
        }
    }

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(&[1], vec![v]).unwrap())])
    }

    #[test]
    fn schedule_examples() {
        let ftm = AdaptConfig::ftm_reference();
        assert_eq!(lr_at(500, &ftm), 5e-4);
        assert_eq!(lr_at(250, &ftm), 2.5e-4);
        assert_eq!(lr_at(0, &ftm), 0.0);
        let fla = AdaptConfig::fla_reference();
        assert_eq!(lr_at(2000, &fla), 5e-6);
        assert_eq!(lr_at(10_000, &fla), 5e-6);
    }

    #[test]
    fn adamw_examples() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut st = OptimizerState::default();
        adamw_step(&mut p, &one("x", 0.5), &mut st, 0.1, &scalar_cfg(0.0)).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.9).abs() < 1e-6);

        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        adamw_step(&mut p, &one("x", 0.0), &mut OptimizerState::default(), 0.1, &scalar_cfg(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 1.0);

        adamw_step(&mut p, &one("x", 0.0), &mut OptimizerState::default(), 1.0, &scalar_cfg(0.1)).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.9).abs() < 1e-15);

        let err = adamw_step(&mut p, &one("x", f64::NAN), &mut OptimizerState::default(), 1.0, &scalar_cfg(0.0));
        assert!(err.unwrap_err().to_string().contains('x'));
    }

    #[test]
    fn clip_examples() {
        let mut g = one("a", 2.0);
        assert_eq!(clip_global_norm(&mut g, 1.0), 2.0);
        assert_eq!(g["a"].data()[0], 1.0);
        let mut g = one("a", 0.5);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g["a"].data()[0], 0.5);
    }

    #[test]
    fn config_validation() {
        let bad = AdaptConfig {
            warmup_steps: 6000,
            ..AdaptConfig::ftm_reference()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig {
            min_lr: 1.0,
            ..AdaptConfig::ftm_reference()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn train_minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = AdaptConfig {
            steps: 600,
            warmup_steps: 10,
            decay_steps: 600,
            peak_lr: 0.05,
            min_lr: 1e-4,
            ..AdaptConfig::ftm_reference()
        };
        let rep = train(&mut p, &|_| true, &cfg, |tape, binder, _| {
            let w = binder.get(tape, "w")?;
            let sq = tape.mul(w, w)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(rep.final_loss().unwrap() < 1e-4, "{:?}", rep.final_loss());
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let cfg = AdaptConfig {
            steps: 300,
            warmup_steps: 0,
            decay_steps: 300,
            ..AdaptConfig::ftm_reference()
        };
        let mut calls = 0;
        let err = train(&mut p, &|_| true, &cfg, |tape, binder, _| {
            calls += 1;
            let w = binder.get(tape, "w")?;
            tape.scale(w, if calls == 1 { 1.0 } else { 100.0 })
        })
        .unwrap_err();
        match err {
            Error::Training { trace, .. } => assert_eq!(trace.len(), 101),
            other => panic!("{other}"),
        }
    }
}
