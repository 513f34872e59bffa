//! Closed-loop evaluation, scripted-expert demonstrations and behavior-cloning
//! datasets for the reaching task.
//!
//! Episode `i` of an evaluation with seed `s` always draws its scene from
//! stream `(s, i)`, so different adapters and perturbations are scored on the
//! same layouts.

use crate::error::Result;
use crate::model::{Dataset, Example, VlaModel};
use crate::rng::Rng;
use crate::scene::env::{expert_action, expert_chunk, observe, sample_scene, sample_start, Layout};
use crate::scene::{EnvConfig, EnvState, PerturbSpec};
use crate::tensor::Tensor;
use crate::trainer::{DemoFrame, Demonstration};

const DEMO_STREAM: u64 = 1 << 40;
const POLICY_STREAM: u64 = 1 << 41;
const DATA_STREAM: u64 = 1 << 42;
/// Episodes encoded and rolled out together.
const EVAL_BATCH: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub successes: usize,
    pub episodes: usize,
}

impl EvalResult {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

fn episode(cfg: &EnvConfig, layout: Layout, seed: u64, stream: u64) -> (EnvState, u64) {
    let mut rng = Rng::with_stream(seed, stream);
    let scene = sample_scene(cfg, layout, &mut rng);
    let start = sample_start(cfg, &mut rng);
    let noise_seed = rng.next_u64();
    (EnvState::new(scene, start, cfg), noise_seed)
}

/// Runs `episodes` closed-loop episodes of the evaluation layout. The policy
/// is queried for an action chunk, which is executed open loop before the
/// next query.
pub fn evaluate(
    model: &VlaModel,
    cfg: &EnvConfig,
    perturb: Option<&PerturbSpec>,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_layout(model, cfg, perturb, episodes, seed, Layout::Eval)
}

pub fn evaluate_layout(
    model: &VlaModel,
    cfg: &EnvConfig,
    perturb: Option<&PerturbSpec>,
    episodes: usize,
    seed: u64,
    layout: Layout,
) -> Result<EvalResult> {
    let mut policy_rng = Rng::with_stream(seed, POLICY_STREAM);
    let mut successes = 0;
    let mut start = 0;
    while start < episodes {
        let end = (start + EVAL_BATCH).min(episodes);
        let mut states = Vec::new();
        let mut images = Vec::new();
        for i in start..end {
            let (st, noise_seed) = episode(cfg, layout, seed, i as u64);
            images.push(observe(&st.scene, perturb, cfg, noise_seed)?);
            states.push(st);
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let tokens = model.observe_batch(&refs)?;
        successes += run_batch(model, cfg, &tokens, &mut states, &mut policy_rng)?;
        start = end;
    }
    Ok(EvalResult { successes, episodes })
}

fn run_batch(
    model: &VlaModel,
    cfg: &EnvConfig,
    tokens: &[Tensor],
    states: &mut [EnvState],
    rng: &mut Rng,
) -> Result<usize> {
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let toks: Vec<&Tensor> = active.iter().map(|&i| &tokens[i]).collect();
        let agent: Vec<f64> = active.iter().flat_map(|&i| states[i].agent).collect();
        let agent = Tensor::new(&[active.len(), 2], agent)?;
        let tasks = vec![0; active.len()];
        let chunks = model.sample_actions(&toks, &agent, &tasks, rng)?;
        for (&i, chunk) in active.iter().zip(&chunks) {
            for h in 0..chunk.rows() {
                if states[i].done {
                    break;
                }
                let r = chunk.row(h);
                states[i].step([r[0], r[1]], cfg)?;
            }
        }
    }
    Ok(states.iter().filter(|s| s.success).count())
}

/// One scripted-expert episode of the evaluation layout under `perturb`.
pub fn expert_demo(
    cfg: &EnvConfig,
    perturb: Option<&PerturbSpec>,
    horizon: usize,
    seed: u64,
) -> Result<Demonstration> {
    let (mut st, noise_seed) = episode(cfg, Layout::Eval, seed, DEMO_STREAM);
    let image = observe(&st.scene, perturb, cfg, noise_seed)?;
    let target = st.scene.target_position;
    let mut frames = Vec::new();
    while !st.done {
        frames.push(DemoFrame {
            image: image.clone(),
            state: st.agent.to_vec(),
            task: 0,
            actions: expert_chunk(st.agent, target, horizon, cfg),
        });
        st.step(expert_action(st.agent, target, cfg.step_scale), cfg)?;
    }
    Ok(Demonstration { frames })
}

/// Behavior-cloning data from `episodes` expert episodes of the pretraining
/// layout, plus `extra_states` off-trajectory agent positions per episode.
pub fn pretrain_dataset(
    cfg: &EnvConfig,
    perturb: Option<&PerturbSpec>,
    episodes: usize,
    extra_states: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut data = Dataset::default();
    let mut extra_rng = Rng::with_stream(seed, DATA_STREAM);
    for e in 0..episodes {
        let (mut st, noise_seed) = episode(cfg, Layout::Pretrain, seed, DATA_STREAM + 1 + e as u64);
        let image = observe(&st.scene, perturb, cfg, noise_seed)?;
        data.images.push(image);
        let idx = data.images.len() - 1;
        let target = st.scene.target_position;
        let push = |data: &mut Dataset, agent: [f64; 2]| {
            data.examples.push(Example {
                image: idx,
                state: agent.to_vec(),
                task: 0,
                actions: expert_chunk(agent, target, horizon, cfg),
            })
        };
        while !st.done {
            push(&mut data, st.agent);
            st.step(expert_action(st.agent, target, cfg.step_scale), cfg)?;
        }
        for _ in 0..extra_states {
            let agent = [extra_rng.uniform_range(-0.8, 0.8), extra_rng.uniform_range(-0.8, 0.8)];
            push(&mut data, agent);
        }
    }
    Ok(data)
}
