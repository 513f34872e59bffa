//! The reaching task: move the agent's end-effector onto the red target disc.
//! The agent is not drawn, so an episode's observation is one static image;
//! the agent position reaches the policy through the state vector.

use serde::{Deserialize, Serialize};

use super::camera::CameraPose;
use super::{apply_perturbation, noise, render, Light, PerturbSpec, Scene, WORKSPACE_HALF};
use crate::error::{contract_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Distances within this margin of the threshold do not count as success, so
/// accumulated float error never decides an episode.
pub const SUCCESS_MARGIN: f64 = 1e-9;
pub const TARGET_COLOR: [f64; 3] = [0.9, 0.15, 0.1];
pub const DISTRACTOR_COLOR: [f64; 3] = [0.15, 0.3, 0.9];
const MIN_SEPARATION: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub image_size: usize,
    pub horizon: usize,
    pub step_scale: f64,
    pub success_threshold: f64,
    /// Camera orbit radius and height about the workspace center.
    pub camera_radius: f64,
    pub camera_height: f64,
    pub agent_start: [f64; 2],
    pub start_jitter: f64,
    /// Center of the evaluation layout and its per-episode jitter.
    pub nominal_target: [f64; 2],
    pub target_jitter: f64,
    /// Half-width of the box of targets seen during pretraining.
    pub train_target_spread: f64,
    pub n_distractors: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            horizon: 12,
            step_scale: 0.1,
            success_threshold: 0.1,
            camera_radius: 1.0,
            camera_height: 1.3,
            agent_start: [-0.35, 0.0],
            start_jitter: 0.05,
            nominal_target: [0.3, 0.1],
            target_jitter: 0.04,
            train_target_spread: 0.3,
            n_distractors: 1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.horizon == 0 || self.step_scale <= 0.0 || self.success_threshold <= 0.0 {
            return Err(Error::Config("env sizes, step_scale and success_threshold must be positive".into()));
        }
        if self.camera_radius <= 0.0 || self.camera_height <= 0.0 {
            return Err(Error::Config("camera radius and height must be positive".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [0.0, 0.0, 0.0]
    }

    /// Reference viewpoint: orbital angle 0, looking at the workspace center.
    pub fn default_camera(&self) -> Result<CameraPose> {
        CameraPose::look_at([self.camera_radius, 0.0, self.camera_height], self.center())
    }
}

/// Which layout distribution to draw scenes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Wide target box used for behavior cloning.
    Pretrain,
    /// Nominal task layout with small jitter.
    Eval,
}

fn jitter(rng: &mut Rng, center: [f64; 2], half: f64) -> [f64; 2] {
    let lim = WORKSPACE_HALF - 0.15;
    [
        (center[0] + rng.uniform_range(-half, half)).clamp(-lim, lim),
        (center[1] + rng.uniform_range(-half, half)).clamp(-lim, lim),
    ]
}

pub fn sample_scene(cfg: &EnvConfig, layout: Layout, rng: &mut Rng) -> Scene {
    let spread = match layout {
        Layout::Pretrain => cfg.train_target_spread,
        Layout::Eval => cfg.target_jitter,
    };
    let target = jitter(rng, cfg.nominal_target, spread);
    let mut distractors = Vec::with_capacity(cfg.n_distractors);
    while distractors.len() < cfg.n_distractors {
        let p = jitter(rng, [0.0, 0.0], 0.7);
        let far = |q: &[f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= MIN_SEPARATION;
        if far(&target) && distractors.iter().all(far) {
            distractors.push(p);
        }
    }
    Scene {
        target_position: target,
        distractor_colors: vec![DISTRACTOR_COLOR; distractors.len()],
        distractor_positions: distractors,
        target_color: TARGET_COLOR,
        background_texture_id: 0,
        light: Light::default(),
    }
}

pub fn sample_start(cfg: &EnvConfig, rng: &mut Rng) -> [f64; 2] {
    jitter(rng, cfg.agent_start, cfg.start_jitter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub scene: Scene,
    pub agent: [f64; 2],
    pub step_count: usize,
    pub success_threshold: f64,
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn new(scene: Scene, agent: [f64; 2], cfg: &EnvConfig) -> Self {
        Self {
            scene,
            agent,
            step_count: 0,
            success_threshold: cfg.success_threshold,
            done: false,
            success: false,
        }
    }

    pub fn distance_to_target(&self) -> f64 {
        let t = self.scene.target_position;
        ((self.agent[0] - t[0]).powi(2) + (self.agent[1] - t[1]).powi(2)).sqrt()
    }

    /// Moves by `clamp(action, −1, 1) · step_scale`.
    pub fn step(&mut self, action: [f64; 2], cfg: &EnvConfig) -> Result<StepOutcome> {
        if self.done {
            return Err(contract_err!("step called on a finished episode"));
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite action {action:?}")));
        }
        for (p, a) in self.agent.iter_mut().zip(action) {
            *p = (*p + a.clamp(-1.0, 1.0) * cfg.step_scale).clamp(-WORKSPACE_HALF, WORKSPACE_HALF);
        }
        self.step_count += 1;
        self.success = self.distance_to_target() < self.success_threshold - SUCCESS_MARGIN;
        self.done = self.success || self.step_count >= cfg.horizon;
        Ok(StepOutcome {
            done: self.done,
            success: self.success,
        })
    }
}

/// Scripted expert: head straight for the target, at most one full step.
pub fn expert_action(agent: [f64; 2], target: [f64; 2], step_scale: f64) -> [f64; 2] {
    let d = [target[0] - agent[0], target[1] - agent[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n < 1e-12 {
        return [0.0, 0.0];
    }
    let s = (n / step_scale).min(1.0) / n;
    [d[0] * s, d[1] * s]
}

/// The expert's next `horizon` actions from `agent`, as an `H × 2` chunk.
pub fn expert_chunk(agent: [f64; 2], target: [f64; 2], horizon: usize, cfg: &EnvConfig) -> Tensor {
    let mut pos = agent;
    let mut out = Vec::with_capacity(horizon * 2);
    for _ in 0..horizon {
        let a = expert_action(pos, target, cfg.step_scale);
        pos[0] += a[0] * cfg.step_scale;
        pos[1] += a[1] * cfg.step_scale;
        out.extend_from_slice(&a);
    }
    Tensor::new(&[horizon, 2], out).expect("chunk shape")
}

/// Renders the (possibly perturbed) observation of `scene`.
pub fn observe(scene: &Scene, perturb: Option<&PerturbSpec>, cfg: &EnvConfig, noise_seed: u64) -> Result<Tensor> {
    let cam = cfg.default_camera()?;
    let p = apply_perturbation(perturb, scene, &cam, cfg.center())?;
    let img = render(&p.scene, &p.camera, cfg.image_size)?;
    match p.noise {
        Some((family, severity)) => noise::apply_noise(&img, family, severity, noise_seed),
        None => Ok(img),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare_scene(target: [f64; 2]) -> Scene {
        Scene {
            target_position: target,
            distractor_positions: vec![],
            target_color: TARGET_COLOR,
            distractor_colors: vec![],
            background_texture_id: 0,
            light: Light::default(),
        }
    }

    #[test]
    fn straight_line_succeeds_at_step_five() {
        let cfg = EnvConfig::default();
        let mut s = EnvState::new(bare_scene([0.5, 0.0]), [0.0, 0.0], &cfg);
        for i in 1..=5 {
            let out = s.step([1.0, 0.0], &cfg).unwrap();
            assert_eq!(out.success, i == 5, "step {i}");
        }
        assert!(s.done);
        assert!(s.step([0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn at_target_with_zero_action_succeeds() {
        let cfg = EnvConfig::default();
        let mut s = EnvState::new(bare_scene([0.2, 0.2]), [0.2, 0.2], &cfg);
        assert!(s.step([0.0, 0.0], &cfg).unwrap().success);
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = EnvConfig::default();
        let mut s = EnvState::new(bare_scene([0.9, 0.9]), [-0.9, -0.9], &cfg);
        let mut steps = 0;
        while !s.done {
            s.step([0.0, 0.0], &cfg).unwrap();
            steps += 1;
        }
        assert_eq!(steps, cfg.horizon);
        assert!(!s.success);
    }

    #[test]
    fn expert_reaches_target() {
        let cfg = EnvConfig::default();
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let scene = sample_scene(&cfg, Layout::Pretrain, &mut rng);
            let t = scene.target_position;
            let mut s = EnvState::new(scene, sample_start(&cfg, &mut rng), &cfg);
            while !s.done {
                let a = expert_action(s.agent, t, cfg.step_scale);
                s.step(a, &cfg).unwrap();
            }
            assert!(s.success);
        }
    }

    #[test]
    fn expert_actions_are_bounded() {
        let a = expert_action([0.0, 0.0], [0.9, -0.9], 0.1);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!(((a[0] * a[0] + a[1] * a[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
