use lab_core::adapters::{fla_param_count, fla_param_count_for, ftm_param_count, merge_all_lora, AdapterKind};
use lab_core::encoder::EncoderConfig;
use lab_core::model::{ModelConfig, VlaModel};
use lab_core::params::{is_adapter_param, Checkpoint};
use lab_core::rng::Rng;
use lab_core::rollout::{evaluate, expert_demo};
use lab_core::scene::{EnvConfig, PerturbSpec};
use lab_core::tensor::Tensor;
use lab_core::trainer::{one_shot_adapt, AdaptConfig};

fn small() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_layers: 2,
            d_model: 32,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn images(n: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::new(&[32, 32, 3], (0..32 * 32 * 3).map(|_| rng.uniform()).collect()).unwrap())
        .collect()
}

fn run(model: &VlaModel, imgs: &[Tensor]) -> (Vec<Tensor>, Vec<Tensor>) {
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let toks = model.observe_batch(&refs).unwrap();
    let trefs: Vec<&Tensor> = toks.iter().collect();
    let acts = model
        .sample_actions(&trefs, &Tensor::zeros(&[imgs.len(), 2]), &vec![0; imgs.len()], &mut Rng::new(1))
        .unwrap();
    (toks, acts)
}

fn short_adapt(kind: AdapterKind, steps: usize) -> AdaptConfig {
    AdaptConfig {
        adapter: kind,
        steps,
        warmup_steps: 2,
        decay_steps: steps,
        peak_lr: 5e-3,
        batch_size: 8,
        ..AdaptConfig::ftm_reference()
    }
}

#[test]
fn adapters_are_identity_at_init() {
    let base = VlaModel::init(small(), 2).unwrap();
    let imgs = images(12, &mut Rng::new(4));
    let (t0, a0) = run(&base, &imgs);
    for kind in [AdapterKind::Ftm, AdapterKind::Fla { rank: 4 }, AdapterKind::Prompt { tokens: 0 }, AdapterKind::FullLora { rank: 2 }] {
        let mut m = base.clone();
        m.attach_adapter(kind, &mut Rng::new(9)).unwrap();
        let (t, a) = run(&m, &imgs);
        assert!(t.iter().zip(&t0).all(|(x, y)| x.bit_eq(y)), "{kind} tokens");
        assert!(a.iter().zip(&a0).all(|(x, y)| x.bit_eq(y)), "{kind} actions");
    }
}

#[test]
fn parameter_counts_match_registry() {
    assert_eq!(ftm_param_count(2048), 4096);
    for mlp_ratio in [1, 2, 4] {
        let enc = EncoderConfig { mlp_ratio, ..EncoderConfig::default() };
        let cfg = ModelConfig { encoder: enc.clone(), ..ModelConfig::default() };
        for rank in [1, 4, 16] {
            let mut m = VlaModel::init(cfg.clone(), 0).unwrap();
            m.attach_adapter(AdapterKind::Fla { rank }, &mut Rng::new(0)).unwrap();
            let registry: usize = m.params.iter().filter(|(n, _)| is_adapter_param(n)).map(|(_, t)| t.numel()).sum();
            assert_eq!(registry, fla_param_count_for(&enc, rank));
            assert_eq!(registry, fla_param_count(&enc.adaptable_linears(), rank));
            assert_eq!(m.adapter_param_count(), registry);
        }
    }
    let square = EncoderConfig { mlp_ratio: 1, ..EncoderConfig::default() };
    assert_eq!(fla_param_count_for(&square, 16), 24 * 2048);
}

#[test]
fn init_and_checkpoint_are_deterministic() {
    let a = VlaModel::init(small(), 5).unwrap();
    let b = VlaModel::init(small(), 5).unwrap();
    let ca = Checkpoint::new(a.params.clone(), serde_json::json!({"k": 1})).to_bytes().unwrap();
    let cb = Checkpoint::new(b.params.clone(), serde_json::json!({"k": 1})).to_bytes().unwrap();
    assert_eq!(ca, cb);
    let back = Checkpoint::from_bytes(&ca).unwrap();
    for (n, t) in a.params.iter() {
        assert!(back.params.get(n).unwrap().bit_eq(t));
    }
    assert!(Checkpoint::from_bytes(&ca[..ca.len() - 8]).is_err());
}

#[test]
fn adaptation_leaves_frozen_weights_and_emits_delta() {
    let env = EnvConfig::default();
    let base = VlaModel::init(small(), 6).unwrap();
    let orbit = PerturbSpec::CameraOrbit { theta: 0.5 };
    let demo = expert_demo(&env, Some(&orbit), base.config.policy.horizon, 1).unwrap();
    let frozen = base.params.hashes_where(|n| !is_adapter_param(n));
    let base_hash = base.params.content_hash(|n| !is_adapter_param(n));
    for kind in [AdapterKind::Ftm, AdapterKind::Fla { rank: 2 }, AdapterKind::Prompt { tokens: 2 }, AdapterKind::FullLora { rank: 2 }] {
        let mut m = base.clone();
        let out = one_shot_adapt(&mut m, &demo, &short_adapt(kind, 15)).unwrap();
        assert_eq!(m.params.hashes_where(|n| !is_adapter_param(n)), frozen, "{kind}");
        assert!(out.delta.is_delta());
        assert_eq!(out.delta.base_hash.as_deref(), Some(base_hash.as_str()));
        assert_eq!(out.delta.params.len(), m.params.filtered(is_adapter_param).len());
        assert_eq!(out.report.loss_trace.len(), 15);
        // The adapter actually moved.
        let moved = out.delta.params.iter().any(|(n, t)| {
            let mut fresh = base.clone();
            fresh.attach_adapter(kind, &mut Rng::with_stream(0, 2)).unwrap();
            !fresh.params.get(n).unwrap().bit_eq(t)
        });
        assert!(moved, "{kind} did not train");
    }
}

#[test]
fn none_adapter_is_a_no_op() {
    let env = EnvConfig::default();
    let base = VlaModel::init(small(), 7).unwrap();
    let orbit = PerturbSpec::CameraOrbit { theta: 0.5 };
    let demo = expert_demo(&env, Some(&orbit), base.config.policy.horizon, 1).unwrap();
    let mut m = base.clone();
    let out = one_shot_adapt(&mut m, &demo, &short_adapt(AdapterKind::None, 5)).unwrap();
    assert!(out.delta.params.is_empty());
    assert!(out.report.loss_trace.is_empty());
    let a = evaluate(&base, &env, Some(&orbit), 6, 3).unwrap();
    let b = evaluate(&m, &env, Some(&orbit), 6, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn merged_low_rank_matches_adapted_model() {
    let env = EnvConfig::default();
    let base = VlaModel::init(small(), 8).unwrap();
    let demo = expert_demo(&env, None, base.config.policy.horizon, 2).unwrap();
    let mut m = base.clone();
    one_shot_adapt(&mut m, &demo, &short_adapt(AdapterKind::Fla { rank: 3 }, 20)).unwrap();
    let merged = VlaModel::from_params(m.config.clone(), merge_all_lora(&m.params).unwrap()).unwrap();
    assert!(merged.adapter.is_none());
    let imgs = images(4, &mut Rng::new(3));
    let (t1, a1) = run(&m, &imgs);
    let (t2, a2) = run(&merged, &imgs);
    for (x, y) in t1.iter().zip(&t2).chain(a1.iter().zip(&a2)) {
        assert!(x.max_abs_diff(y) < 1e-9);
    }
}

#[test]
fn adaptation_rejects_mismatched_demo() {
    let env = EnvConfig { image_size: 16, ..EnvConfig::default() };
    let mut base = VlaModel::init(small(), 9).unwrap();
    let demo = expert_demo(&env, None, 4, 0).unwrap();
    assert!(one_shot_adapt(&mut base, &demo, &short_adapt(AdapterKind::Ftm, 2)).is_err());
}
