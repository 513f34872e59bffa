use lab_core::adapters::AdapterKind;
use lab_core::linalg::svd;
use lab_core::policy::{build_attention_mask, Layout};
use lab_core::rng::Rng;
use lab_core::scene::camera::{orbit_camera, orbital_angle, CameraPose};
use lab_core::scene::env::{observe, sample_scene, Layout as SceneLayout};
use lab_core::scene::noise::{apply_noise, psnr, NoiseFamily, MAX_SEVERITY};
use lab_core::scene::{EnvConfig, PerturbSpec};
use lab_core::trainer::{lr_at, AdaptConfig};
use proptest::prelude::*;

fn pose_strategy() -> impl Strategy<Value = ([f64; 3], [f64; 3])> {
    (-0.5f64..0.5, -0.5f64..0.5, -3.1f64..3.1, 0.3f64..2.0, 0.2f64..2.0).prop_map(|(cx, cy, az, r, h)| {
        let center = [cx, cy, 0.0];
        ([cx + r * az.cos(), cy + r * az.sin(), h], center)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn orbit_is_a_rigid_yaw((pos, center) in pose_strategy(), theta in -3.1f64..3.1,
                            w in prop::array::uniform3(-1.0f64..1.0)) {
        let pose = CameraPose::look_at(pos, center).unwrap();
        let moved = orbit_camera(&pose, center, theta).unwrap();
        prop_assert!((moved.quaternion_norm() - 1.0).abs() < 1e-12);
        let d0 = pose.position_vec() - nalgebra::Vector3::from(center);
        let d1 = moved.position_vec() - nalgebra::Vector3::from(center);
        prop_assert!((d0.norm() - d1.norm()).abs() < 1e-12);
        prop_assert!((moved.position[2] - pos[2]).abs() < 1e-15);
        let dyaw = theta - orbital_angle(&pose, center);
        let (dx, dy) = (w[0] - center[0], w[1] - center[1]);
        let w_rot = [
            center[0] + dx * dyaw.cos() - dy * dyaw.sin(),
            center[1] + dx * dyaw.sin() + dy * dyaw.cos(),
            w[2],
        ];
        prop_assert!((pose.to_camera(w) - moved.to_camera(w_rot)).norm() < 1e-9);
    }

    #[test]
    fn orbit_to_current_angle_is_identity((pos, center) in pose_strategy()) {
        let pose = CameraPose::look_at(pos, center).unwrap();
        let same = orbit_camera(&pose, center, orbital_angle(&pose, center)).unwrap();
        prop_assert!((same.position_vec() - pose.position_vec()).norm() < 1e-12);
        prop_assert!((same.optical_axis() - pose.optical_axis()).norm() < 1e-12);
    }

    #[test]
    fn attention_mask_sections(prefix in 1usize..6, discrete in 0usize..5, expert in 1usize..6) {
        let l = Layout { prefix, discrete, expert };
        let m = build_attention_mask(l);
        let n = l.len();
        for i in 0..n {
            prop_assert!((0..n).any(|j| m[i * n + j]), "row {} sees nothing", i);
            for j in 0..n {
                if l.prefix_range().contains(&i) {
                    prop_assert_eq!(m[i * n + j], l.prefix_range().contains(&j));
                }
                if l.expert_range().contains(&i) && l.discrete_range().contains(&j) {
                    prop_assert!(!m[i * n + j]);
                }
                if l.discrete_range().contains(&i) && l.discrete_range().contains(&j) {
                    prop_assert_eq!(m[i * n + j], j <= i);
                }
            }
        }
    }

    #[test]
    fn perturb_strings_roundtrip(kind in 0usize..5, a in 0usize..5, deg in -170i32..170) {
        let spec = match kind {
            0 => PerturbSpec::CameraOrbit { theta: (deg as f64).to_radians() },
            1 => PerturbSpec::Lighting { variant: a },
            2 => PerturbSpec::Texture { texture: a.min(3) },
            3 => PerturbSpec::Noise { family: NoiseFamily::ALL[a], severity: (1 + a) as u8 },
            _ => format!("discrete:{}", ["small", "medium", "large"][a % 3]).parse().unwrap(),
        };
        let back: PerturbSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back.to_string(), spec.to_string());
    }

    #[test]
    fn adapter_strings_roundtrip(r in 1usize..64, which in 0usize..5) {
        let k = [AdapterKind::None, AdapterKind::Ftm, AdapterKind::Fla { rank: r },
                 AdapterKind::Prompt { tokens: r }, AdapterKind::FullLora { rank: r }][which];
        prop_assert_eq!(k.to_string().parse::<AdapterKind>().unwrap(), k);
    }

    #[test]
    fn svd_reconstructs_with_sorted_spectrum(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let m = Rng::new(seed).gaussian(&[rows, cols], 1.0);
        let s = svd(&m).unwrap();
        prop_assert!(s.reconstruct().max_abs_diff(&m) < 1e-10);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn schedule_stays_in_range(step in 0usize..12_000) {
        for cfg in [AdaptConfig::ftm_reference(), AdaptConfig::fla_reference()] {
            let lr = lr_at(step, &cfg);
            prop_assert!(lr <= cfg.peak_lr);
            if step >= cfg.warmup_steps {
                prop_assert!(lr >= cfg.min_lr);
            }
            if step >= cfg.decay_steps {
                prop_assert_eq!(lr, cfg.min_lr);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn psnr_falls_with_severity(seed in any::<u64>()) {
        let env = EnvConfig::default();
        let scene = sample_scene(&env, SceneLayout::Pretrain, &mut Rng::new(seed));
        let clean = observe(&scene, None, &env, 0).unwrap();
        for family in NoiseFamily::ALL {
            let mut prev = f64::INFINITY;
            for sev in 1..=MAX_SEVERITY {
                let p = psnr(&clean, &apply_noise(&clean, family, sev, seed).unwrap()).unwrap();
                prop_assert!(p <= prev, "{} severity {}: {} > {}", family, sev, p, prev);
                prev = p;
            }
        }
    }
}

#[test]
fn reference_schedule_checkpoints() {
    let ftm = AdaptConfig::ftm_reference();
    assert_eq!(lr_at(500, &ftm), 5e-4);
    assert_eq!(lr_at(5000, &ftm), 5e-5);
    let fla = AdaptConfig::fla_reference();
    assert_eq!(lr_at(2000, &fla), 5e-6);
    assert_eq!(lr_at(1_000_000, &fla), 5e-6);
}
