//! The composed vision-language-action model: encoder → adapter → action
//! expert, plus the flow-matching training objective and batched sampling.

use serde::{Deserialize, Serialize};

use crate::adapters::{self, apply_ftm, AdapterKind};
use crate::autodiff::{Tape, Var};
use crate::encoder::{self, EncoderConfig};
use crate::error::{contract_err, shape_err, Result};
use crate::params::{is_adapter_param, Binder, ParamStore};
use crate::policy::{self, action_bin, PolicyConfig, PolicyInput};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.policy.validate(self.encoder.d_model)
    }

    pub fn width(&self) -> usize {
        self.encoder.d_model
    }
}

/// One supervised sample; `image` indexes into [`Dataset::images`].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: usize,
    pub state: Vec<f64>,
    pub task: usize,
    /// `H × d_a`
    pub actions: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        let off = self.images.len();
        self.images.extend(other.images);
        self.examples.extend(other.examples.into_iter().map(|mut e| {
            e.image += off;
            e
        }));
    }
}

/// A sampled minibatch with its flow noise and timesteps.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    /// Distinct images referenced by the batch.
    pub images: Vec<Tensor>,
    pub image_of: Vec<usize>,
    pub states: Tensor,
    pub tasks: Vec<usize>,
    /// `(B · H) × d_a`
    pub actions: Tensor,
    pub omega: Tensor,
    pub taus: Vec<f64>,
}

impl FlowBatch {
    pub fn sample(data: &Dataset, batch_size: usize, cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(contract_err!("cannot sample a batch from {} examples", data.len()));
        }
        let picks: Vec<usize> = (0..batch_size).map(|_| rng.below(data.len())).collect();
        Self::from_indices(data, &picks, cfg, rng)
    }

    pub fn from_indices(data: &Dataset, picks: &[usize], cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        let mut images = Vec::new();
        let mut remap = std::collections::BTreeMap::new();
        let mut image_of = Vec::with_capacity(picks.len());
        let mut states = Vec::new();
        let mut tasks = Vec::new();
        let mut actions = Vec::new();
        let mut taus = Vec::new();
        for &i in picks {
            let ex = &data.examples[i];
            if ex.actions.dims2() != (cfg.horizon, cfg.action_dim) || ex.state.len() != cfg.state_dim {
                return Err(shape_err!("example {i} does not match the policy shapes"));
            }
            let next = remap.len();
            let slot = *remap.entry(ex.image).or_insert_with(|| {
                images.push(data.images[ex.image].clone());
                next
            });
            image_of.push(slot);
            states.extend_from_slice(&ex.state);
            tasks.push(ex.task);
            actions.extend_from_slice(ex.actions.data());
            taus.push(policy::sample_tau(rng)?);
        }
        let b = picks.len();
        let shape = [b * cfg.horizon, cfg.action_dim];
        Ok(Self {
            images,
            image_of,
            states: Tensor::new(&[b, cfg.state_dim], states)?,
            tasks,
            actions: Tensor::new(&shape, actions)?,
            omega: rng.gaussian(&shape, 1.0),
            taus,
        })
    }

    pub fn noisy_actions(&self, horizon: usize) -> Result<Tensor> {
        let mut out = self.actions.clone();
        let cols = self.actions.cols();
        for (s, &tau) in self.taus.iter().enumerate() {
            for j in s * horizon * cols..(s + 1) * horizon * cols {
                out.data_mut()[j] = tau * self.actions.data()[j] + (1.0 - tau) * self.omega.data()[j];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct VlaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adapter: AdapterKind,
}

impl VlaModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = encoder::init_params(&config.encoder, &mut rng)?;
        params.merge(&policy::init_params(&config.policy, config.width(), &mut rng)?);
        Ok(Self {
            config,
            params,
            adapter: AdapterKind::None,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(shape_err!("parameter {name}: {:?}, expected {:?}", got.shape(), t.shape()));
            }
        }
        let adapter = detect_adapter(&params);
        Ok(Self {
            config,
            params,
            adapter,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    /// Adds fresh adapter parameters; any existing adapter is replaced.
    pub fn attach_adapter(&mut self, kind: AdapterKind, rng: &mut Rng) -> Result<()> {
        self.detach_adapter();
        let d = self.width();
        let extra = match kind {
            AdapterKind::None => ParamStore::new(),
            AdapterKind::Ftm => adapters::ftm_params(d),
            AdapterKind::Fla { rank } => adapters::lora_params(&self.config.encoder.adaptable_linears(), rank, rng)?,
            AdapterKind::Prompt { tokens } => adapters::prompt_params(tokens, d, rng),
            AdapterKind::FullLora { rank } => {
                let mut linears = self.config.encoder.adaptable_linears();
                linears.extend(self.config.policy.adaptable_linears(d));
                adapters::lora_params(&linears, rank, rng)?
            }
        };
        self.params.merge(&extra);
        self.adapter = kind;
        Ok(())
    }

    pub fn detach_adapter(&mut self) {
        let names: Vec<String> = self.params.names().filter(|n| is_adapter_param(n)).cloned().collect();
        for n in names {
            self.params.remove(&n);
        }
        self.adapter = AdapterKind::None;
    }

    pub fn adapter_param_count(&self) -> usize {
        self.params.numel_where(is_adapter_param)
    }

    pub fn base_param_count(&self) -> usize {
        self.params.numel_where(|n| !is_adapter_param(n))
    }

    /// Encoder output for a batch, with FTM applied when attached.
    pub fn visual_tokens(&self, tape: &mut Tape, binder: &mut Binder, images: &[&Tensor]) -> Result<Var> {
        let x = encoder::encode_batch(tape, binder, &self.config.encoder, images)?;
        apply_ftm(tape, binder, x)
    }

    /// Flow-matching loss (plus the discrete cross-entropy when enabled).
    pub fn flow_loss(&self, tape: &mut Tape, binder: &mut Binder, batch: &FlowBatch) -> Result<Var> {
        let refs: Vec<&Tensor> = batch.images.iter().collect();
        let unique = self.visual_tokens(tape, binder, &refs)?;
        let n = self.config.encoder.n_tokens();
        let index: Vec<usize> = batch.image_of.iter().flat_map(|&i| (i * n)..(i + 1) * n).collect();
        let visual = tape.gather_rows(unique, &index)?;
        let pc = &self.config.policy;
        let noisy = batch.noisy_actions(pc.horizon)?;
        let bins: Vec<usize> = batch.actions.data().iter().map(|&a| action_bin(a, pc.discrete_bins)).collect();
        let input = PolicyInput {
            visual,
            n_visual: n,
            tasks: &batch.tasks,
            states: &batch.states,
            noisy_actions: &noisy,
            taus: &batch.taus,
            discrete_bins: pc.discrete.then_some(&bins[..]),
        };
        let out = policy::forward(tape, binder, pc, self.width(), &input)?;
        let target = tape.constant(batch.actions.sub(&batch.omega)?)?;
        let flow = tape.mse(out.velocity, target)?;
        match out.discrete_logits {
            Some(logits) => {
                let ce = tape.cross_entropy(logits, &bins)?;
                tape.add(flow, ce)
            }
            None => Ok(flow),
        }
    }

    /// Adapted visual tokens of one image, `N × D`.
    pub fn observe(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.observe_batch(&[image])?.pop().unwrap_or_else(|| Tensor::zeros(&[1])))
    }

    pub fn observe_batch(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let frozen = |_: &str| false;
        let mut binder = Binder::new(&self.params, &frozen);
        let mut tape = Tape::new();
        let x = self.visual_tokens(&mut tape, &mut binder, images)?;
        let n = self.config.encoder.n_tokens();
        let all = tape.value(x);
        Ok((0..images.len())
            .map(|i| {
                let rows = all.data()[i * n * all.cols()..(i + 1) * n * all.cols()].to_vec();
                Tensor::new(&[n, all.cols()], rows).expect("token block shape")
            })
            .collect())
    }

    /// Predicted velocity for a batch of contexts at one flow time per sample.
    pub fn velocity(
        &self,
        tokens: &[&Tensor],
        states: &Tensor,
        tasks: &[usize],
        noisy_actions: &Tensor,
        taus: &[f64],
    ) -> Result<Tensor> {
        let frozen = |_: &str| false;
        let mut binder = Binder::new(&self.params, &frozen);
        let mut tape = Tape::new();
        let mut rows = Vec::new();
        for t in tokens {
            rows.extend_from_slice(t.data());
        }
        let n = self.config.encoder.n_tokens();
        let visual = tape.constant(Tensor::new(&[tokens.len() * n, self.width()], rows)?)?;
        let pc = &self.config.policy;
        let dummy_bins = vec![0; tasks.len() * pc.n_discrete_tokens()];
        let input = PolicyInput {
            visual,
            n_visual: n,
            tasks,
            states,
            noisy_actions,
            taus,
            discrete_bins: pc.discrete.then_some(&dummy_bins[..]),
        };
        let out = policy::forward(&mut tape, &mut binder, pc, self.width(), &input)?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Euler-integrated action chunks for a batch of observations.
    pub fn sample_actions(
        &self,
        tokens: &[&Tensor],
        states: &Tensor,
        tasks: &[usize],
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>> {
        let pc = &self.config.policy;
        let b = tokens.len();
        let omega = rng.gaussian(&[b * pc.horizon, pc.action_dim], 1.0);
        let out = policy::euler_integrate(
            |a, tau| self.velocity(tokens, states, tasks, a, &vec![tau; b]),
            omega,
            pc.flow_steps,
        )?;
        let per = pc.horizon * pc.action_dim;
        Ok((0..b)
            .map(|i| {
                Tensor::new(&[pc.horizon, pc.action_dim], out.data()[i * per..(i + 1) * per].to_vec())
                    .expect("chunk shape")
            })
            .collect())
    }
}

fn detect_adapter(params: &ParamStore) -> AdapterKind {
    if params.contains(adapters::FTM_GAMMA) {
        return AdapterKind::Ftm;
    }
    if let Ok(p) = params.get(adapters::PROMPT_TOKENS) {
        return AdapterKind::Prompt { tokens: p.rows() };
    }
    let mut rank = None;
    let mut policy_side = false;
    for (name, t) in params.iter() {
        if name.ends_with(".lora_a") {
            rank = Some(t.rows());
            policy_side |= name.contains("/policy/");
        }
    }
    match rank {
        Some(rank) if policy_side => AdapterKind::FullLora { rank },
        Some(rank) => AdapterKind::Fla { rank },
        None => AdapterKind::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                patch_size: 4,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
            },
            policy: PolicyConfig {
                n_layers: 1,
                n_heads: 2,
                ..PolicyConfig::default()
            },
        }
    }

    #[test]
    fn adapters_attach_and_detach() {
        let mut m = VlaModel::init(tiny(), 0).unwrap();
        let base = m.params.clone();
        let mut rng = Rng::new(1);
        for kind in [
            AdapterKind::Ftm,
            AdapterKind::Fla { rank: 2 },
            AdapterKind::Prompt { tokens: 3 },
            AdapterKind::FullLora { rank: 2 },
        ] {
            m.attach_adapter(kind, &mut rng).unwrap();
            assert_eq!(detect_adapter(&m.params), kind);
            assert!(m.adapter_param_count() > 0);
        }
        m.detach_adapter();
        assert_eq!(m.params, base);
    }

    #[test]
    fn sampling_shapes() {
        let m = VlaModel::init(tiny(), 0).unwrap();
        let img = Tensor::full(&[8, 8, 3], 0.5);
        let tok = m.observe(&img).unwrap();
        assert_eq!(tok.shape(), &[4, 8]);
        let states = Tensor::zeros(&[2, 2]);
        let chunks = m.sample_actions(&[&tok, &tok], &states, &[0, 0], &mut Rng::new(3)).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].shape(), &[4, 2]);
    }
}
