//! The `lab` subcommands as library functions, so tests can drive them
//! without spawning the binary.

use std::path::{Path, PathBuf};

use serde::Serialize;

use lab_core::adapters::AdapterKind;
use lab_core::error::Error;
use lab_core::model::{ModelConfig, VlaModel};
use lab_core::params::Checkpoint;
use lab_core::rollout::{evaluate, expert_demo, pretrain_dataset};
use lab_core::scene::PerturbSpec;
use lab_core::theory::scenarios::{self, TheoryReport};
use lab_core::trainer::{one_shot_adapt, pretrain, AdaptOutcome, TrainReport};

use crate::config::ExperimentConfig;
use crate::demo;
use crate::error::{CliError, Result};
use crate::report;
use crate::sweep::{self, perturb_label};

/// Offset between the seed that builds the data and the one that scores the
/// base, so the acceptance episodes are not the training scenes.
const PRETRAIN_EVAL_SALT: u64 = 0x5eed;

#[derive(Clone, Debug, Serialize)]
pub struct PretrainMetrics {
    pub seed: u64,
    pub examples: usize,
    pub rounds: usize,
    pub source_success: f64,
    pub eval_episodes: usize,
    pub final_loss: Option<f64>,
}

pub struct PretrainOutcome {
    pub model: VlaModel,
    pub metrics: PretrainMetrics,
    pub report: TrainReport,
}

/// Behavior cloning on source-domain expert episodes, repeated in rounds
/// until the source success rate reaches the target.
pub fn pretrain_base(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let data = pretrain_dataset(&cfg.env, None, p.episodes, p.extra_states, cfg.policy.horizon, seed)?;
    let mut model = VlaModel::init(cfg.model(), seed)?;
    let mut full = TrainReport::default();
    let mut success = 0.0;
    for round in 0..p.max_rounds {
        let rep = pretrain(&mut model, &data, &p.train_config(seed + round as u64), p.images_per_batch)?;
        full.loss_trace.extend(rep.loss_trace);
        full.lr_trace.extend(rep.lr_trace);
        success = evaluate(&model, &cfg.env, None, p.eval_episodes, seed + PRETRAIN_EVAL_SALT)?.success_rate();
        if success >= p.target_success {
            return Ok(PretrainOutcome {
                metrics: PretrainMetrics {
                    seed,
                    examples: data.len(),
                    rounds: round + 1,
                    source_success: success,
                    eval_episodes: p.eval_episodes,
                    final_loss: full.trailing_mean(100),
                },
                model,
                report: full,
            });
        }
    }
    Err(Error::Training {
        message: format!(
            "source success {success:.3} after {} rounds is below {}; try more pretrain.steps or pretrain.episodes, or a lower pretrain.peak_lr",
            p.max_rounds, p.target_success
        ),
        trace: full.loss_trace,
    }
    .into())
}

pub fn base_checkpoint(model: &VlaModel, metrics: &PretrainMetrics) -> Result<Checkpoint> {
    Ok(Checkpoint::new(
        model.params.clone(),
        serde_json::json!({
            "kind": "base",
            "model": model.config,
            "metrics": metrics,
        }),
    ))
}

/// Loads a base checkpoint and checks it was built for `expected`.
pub fn load_base(path: &Path, expected: &ModelConfig) -> Result<VlaModel> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.is_delta() {
        return Err(Error::Checkpoint(format!("{} is a delta checkpoint, not a base", path.display())).into());
    }
    let stored: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable model config ({e})", path.display())))?;
    if &stored != expected {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different encoder/policy configuration than the one given",
            path.display()
        ))
        .into());
    }
    Ok(VlaModel::from_params(stored, ckpt.params)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "lr"])?;
    for (i, (l, lr)) in report.loss_trace.iter().zip(&report.lr_trace).enumerate() {
        w.write_record([i.to_string(), l.to_string(), lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let run = pretrain_base(cfg, seed)?;
    let path = out.join("base.ckpt");
    base_checkpoint(&run.model, &run.metrics)?.save(&path)?;
    write_json(&out.join("pretrain_metrics.json"), &run.metrics)?;
    write_loss_csv(&out.join("pretrain_loss.csv"), &run.report)?;
    println!(
        "base checkpoint {} (source success {:.3} over {} episodes)",
        path.display(),
        run.metrics.source_success,
        run.metrics.eval_episodes
    );
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct AdaptMetrics {
    pub adapter: String,
    pub perturb: String,
    pub steps: usize,
    pub trainable_params: usize,
    pub final_loss: Option<f64>,
    pub success_rate: f64,
    pub episodes: usize,
}

/// One-shot adaptation of `base` on a demo file, or on a freshly recorded
/// expert demo under `perturb` when no file is given.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    base: &Path,
    demo_path: Option<&Path>,
    perturb: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut model = load_base(base, &cfg.model())?;
    let perturb: Option<PerturbSpec> = match perturb {
        Some(s) => sweep::parse_perturb(s)?,
        None => None,
    };
    let demo = match demo_path {
        Some(p) => demo::load(p)?,
        None => {
            let d = expert_demo(&cfg.env, perturb.as_ref(), cfg.policy.horizon, seed)?;
            demo::save(&d, &perturb_label(perturb.as_ref()), &out.join("demo.json"))?;
            d
        }
    };
    let acfg = lab_core::trainer::AdaptConfig {
        seed,
        ..cfg.adapt_config()
    };
    let outcome = one_shot_adapt(&mut model, &demo, &acfg)?;
    outcome.delta.save(&out.join("delta.ckpt"))?;
    write_loss_csv(&out.join("adapt_loss.csv"), &outcome.report)?;
    let res = evaluate(&model, &cfg.env, perturb.as_ref(), cfg.sweep.episodes, seed)?;
    let metrics = AdaptMetrics {
        adapter: acfg.adapter.to_string(),
        perturb: perturb_label(perturb.as_ref()),
        steps: if acfg.adapter == AdapterKind::None { 0 } else { acfg.steps },
        trainable_params: model.adapter_param_count(),
        final_loss: outcome.report.final_loss(),
        success_rate: res.success_rate(),
        episodes: res.episodes,
    };
    write_json(&out.join("adapt_metrics.json"), &metrics)?;
    println!(
        "{} on {}: success {:.3} over {} episodes",
        metrics.adapter, metrics.perturb, metrics.success_rate, metrics.episodes
    );
    Ok(outcome)
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    base: &Path,
    preset: &str,
    seed: u64,
    out: &Path,
    deterministic: bool,
) -> Result<Vec<sweep::ResultRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let model = load_base(base, &cfg.model())?;
    let cells = sweep::matrix(preset, cfg, seed)?;
    let (rows, failures) = sweep::run_sweep(&model, cfg, &cells, sweep::worker_count()?, deterministic);
    sweep::write_csv(&rows, &out.join("results.csv"))?;
    if !failures.is_empty() {
        write_json(&out.join("sweep_failures.json"), &failures)?;
        for f in &failures {
            eprintln!("cell {} failed: {}", f.cell_id, f.error);
        }
    }
    println!("{} cells written to {}", rows.len(), out.join("results.csv").display());
    Ok(rows)
}

pub const THEORY_SCENARIOS: [&str; 5] = ["eckart-young", "affine", "identity", "drift-orbit-30", "rank-sweep"];

/// Runs the named theory scenarios, writing one JSON report each. Hard
/// assertions (Eckart–Young, affine recovery, identity drift, closed-form
/// monotonicity) are collected and returned as a failure after every report
/// is written.
pub fn cmd_theory(names: &[String], seed: u64, out: &Path) -> Result<Vec<TheoryReport>> {
    std::fs::create_dir_all(out)?;
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for name in names {
        let (report, mut fails) = run_scenario(name, seed)?;
        write_json(&out.join(format!("{name}.json")), &report)?;
        failures.append(&mut fails);
        reports.push(report);
    }
    if failures.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::TheoryAssertion(failures))
    }
}

fn run_scenario(name: &str, seed: u64) -> Result<(TheoryReport, Vec<String>)> {
    let mut fails = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            fails.push(format!("{name}: {what}"));
        }
    };
    let report = match name {
        "eckart-young" => {
            let s = scenarios::eckart_young(seed, 50, 32, 20)?;
            check(s.all_optimal, "a random competitor beat the truncated SVD".into());
            check(s.max_gap <= 1e-10, format!("tail-energy gap {:e} > 1e-10", s.max_gap));
            check(
                s.planted_sigma_error <= 1e-9,
                format!("planted singular values off by {:e}", s.planted_sigma_error),
            );
            s.report()
        }
        "affine" => {
            let s = scenarios::affine_recovery(seed, 64, 2000)?;
            check(s.oracle_epsilon < 1e-10, format!("oracle residual {:e}", s.oracle_epsilon));
            check(s.recovery.max_tv_after < 1e-6, format!("post-correction d_TV {:e}", s.recovery.max_tv_after));
            check(s.rotation.bound.holds, "rotation-drift bound violated".into());
            s.report()
        }
        "identity" => {
            let r = scenarios::identity_drift(seed, 64)?;
            check(r.bounds.as_ref().is_some_and(|b| b.holds), "identity-drift bound violated".into());
            r
        }
        "drift-orbit-30" => scenarios::drift_bound(seed, 30.0, 64, 500)?.report(),
        "rank-sweep" => {
            let s = scenarios::rank_sweep(seed, 64, &[4, 8, 16, 32], 2000)?;
            check(s.closed_form_monotone, "closed-form error increased with rank".into());
            s.report()
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown theory scenario '{other}' (expected one of {})",
                THEORY_SCENARIOS.join(", ")
            )))
        }
    };
    Ok((report, fails))
}

pub fn cmd_report(results: &Path, out: &Path) -> Result<report::Report> {
    let rep = report::load(results)?;
    std::fs::create_dir_all(out)?;
    let text = report::render_text(&rep);
    std::fs::write(out.join("report.txt"), &text)?;
    write_json(&out.join("report.json"), &rep)?;
    print!("{text}");
    Ok(rep)
}
