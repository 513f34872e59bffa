//! Experiment cells, the sweep worker pool and the results CSV.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use lab_core::adapters::AdapterKind;
use lab_core::model::VlaModel;
use lab_core::rollout::{evaluate, expert_demo};
use lab_core::scene::camera::PoseLevel;
use lab_core::scene::noise::NoiseFamily;
use lab_core::scene::PerturbSpec;
use lab_core::trainer::one_shot_adapt;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CSV_HEADER: [&str; 8] = [
    "cell_id",
    "adapter",
    "perturb",
    "severity",
    "success_rate",
    "trainable_params",
    "adapt_steps",
    "wall_time_s",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentCell {
    pub adapter: AdapterKind,
    pub perturb: Option<PerturbSpec>,
    pub n_episodes: usize,
    pub seed: u64,
}

/// One CSV row. `success_rate` is empty when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell_id: String,
    pub adapter: String,
    pub perturb: String,
    pub severity: String,
    pub success_rate: Option<f64>,
    pub trainable_params: usize,
    pub adapt_steps: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellFailure {
    pub cell_id: String,
    pub error: String,
}

pub fn perturb_label(p: Option<&PerturbSpec>) -> String {
    p.map_or_else(|| "none".to_string(), |p| p.to_string())
}

pub fn parse_perturb(s: &str) -> Result<Option<PerturbSpec>> {
    if s == "none" {
        return Ok(None);
    }
    Ok(Some(s.parse()?))
}

/// The four-family benchmark structure at toy scale.
pub fn libero_v_toy_perturbations() -> Vec<PerturbSpec> {
    let mut out: Vec<PerturbSpec> = [10.0f64, 25.0, 40.0]
        .iter()
        .map(|d| PerturbSpec::CameraOrbit { theta: d.to_radians() })
        .collect();
    out.extend(PoseLevel::ALL.map(|level| PerturbSpec::CameraDiscrete { level }));
    out.extend((1..=3).map(|variant| PerturbSpec::Lighting { variant }));
    out.extend((1..=3).map(|texture| PerturbSpec::Texture { texture }));
    for family in NoiseFamily::ALL {
        out.extend([3, 6, 9].map(|severity| PerturbSpec::Noise { family, severity }));
    }
    out
}

pub const MATRIX_PRESETS: [&str; 2] = ["libero-v-toy", "orbit-30"];

/// Cells of a named matrix, with `[sweep]` overrides applied. Cell order is
/// adapters outermost.
pub fn matrix(preset: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ExperimentCell>> {
    let (mut adapters, mut perturbs): (Vec<AdapterKind>, Vec<Option<PerturbSpec>>) = match preset {
        "libero-v-toy" => (
            vec![AdapterKind::None, AdapterKind::Ftm, AdapterKind::Fla { rank: 16 }],
            libero_v_toy_perturbations().into_iter().map(Some).collect(),
        ),
        "orbit-30" => (
            vec![AdapterKind::None, AdapterKind::Ftm, AdapterKind::Fla { rank: 16 }],
            vec![None, Some(PerturbSpec::CameraOrbit { theta: 30f64.to_radians() })],
        ),
        other => {
            return Err(CliError::Usage(format!(
                "unknown sweep preset '{other}' (expected one of {})",
                MATRIX_PRESETS.join(", ")
            )))
        }
    };
    if !cfg.sweep.adapters.is_empty() {
        adapters = cfg.sweep.adapters.clone();
    }
    if !cfg.sweep.perturbations.is_empty() {
        perturbs = cfg.sweep.perturbations.iter().map(|s| parse_perturb(s)).collect::<Result<_>>()?;
    }
    let mut cells = Vec::new();
    for &adapter in &adapters {
        for &perturb in &perturbs {
            // Adapting to the source domain says nothing; keep only its zero-shot cell.
            if perturb.is_none() && !adapter.is_none() {
                continue;
            }
            cells.push(ExperimentCell {
                adapter,
                perturb,
                n_episodes: cfg.sweep.episodes,
                seed,
            });
        }
    }
    Ok(cells)
}

/// Adapts a copy of `base` on one expert demo under the cell's perturbation
/// (unless the adapter is `none`) and scores it closed loop. Every cell
/// evaluates the same episode layouts.
pub fn run_cell(base: &VlaModel, cfg: &ExperimentConfig, cell: &ExperimentCell, id: &str, deterministic: bool) -> Result<ResultRow> {
    let start = Instant::now();
    let mut model = base.clone();
    let mut adapt_steps = 0;
    if !cell.adapter.is_none() {
        let demo = expert_demo(&cfg.env, cell.perturb.as_ref(), cfg.policy.horizon, cell.seed)?;
        let acfg = lab_core::trainer::AdaptConfig {
            adapter: cell.adapter,
            seed: cell.seed,
            ..cfg.train.clone()
        };
        one_shot_adapt(&mut model, &demo, &acfg)?;
        adapt_steps = acfg.steps;
    }
    let res = evaluate(&model, &cfg.env, cell.perturb.as_ref(), cell.n_episodes, cell.seed)?;
    Ok(ResultRow {
        cell_id: id.to_string(),
        adapter: cell.adapter.to_string(),
        perturb: perturb_label(cell.perturb.as_ref()),
        severity: cell.perturb.map(|p| p.severity()).unwrap_or_default(),
        success_rate: Some(res.success_rate()),
        trainable_params: model.adapter_param_count(),
        adapt_steps,
        wall_time_s: if deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
    })
}

pub fn cell_id(i: usize) -> String {
    format!("c{i:03}")
}

/// Worker count from `LAB_THREADS`, else the number of logical cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var("LAB_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("LAB_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs every cell on a bounded pool; rows come back in cell order whatever
/// the completion order. A failing cell yields a row without a success rate
/// plus a failure entry.
pub fn run_sweep(
    base: &VlaModel,
    cfg: &ExperimentConfig,
    cells: &[ExperimentCell],
    workers: usize,
    deterministic: bool,
) -> (Vec<ResultRow>, Vec<CellFailure>) {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<std::result::Result<ResultRow, String>>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let out = run_cell(base, cfg, &cells[i], &cell_id(i), deterministic).map_err(|e| e.to_string());
                slots.lock().expect("sweep results lock")[i] = Some(out);
            });
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    for (i, slot) in slots.into_inner().expect("sweep results lock").into_iter().enumerate() {
        match slot.expect("every cell ran") {
            Ok(row) => rows.push(row),
            Err(error) => {
                let cell = &cells[i];
                failures.push(CellFailure {
                    cell_id: cell_id(i),
                    error,
                });
                rows.push(ResultRow {
                    cell_id: cell_id(i),
                    adapter: cell.adapter.to_string(),
                    perturb: perturb_label(cell.perturb.as_ref()),
                    severity: cell.perturb.map(|p| p.severity()).unwrap_or_default(),
                    success_rate: None,
                    trainable_params: 0,
                    adapt_steps: 0,
                    wall_time_s: 0.0,
                });
            }
        }
    }
    (rows, failures)
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn libero_v_toy_has_four_families() {
        let p = libero_v_toy_perturbations();
        assert_eq!(p.len(), 3 + 3 + 3 + 3 + 15);
        let mut fams: Vec<&str> = p.iter().map(|x| x.family()).collect();
        fams.dedup();
        assert_eq!(fams, ["camera", "lighting", "texture", "noise"]);
    }

    #[test]
    fn orbit_matrix_keeps_one_source_cell() {
        let cfg = ExperimentConfig::toy();
        let cells = matrix("orbit-30", &cfg, 3).unwrap();
        let labels: Vec<(String, String)> = cells
            .iter()
            .map(|c| (c.adapter.to_string(), perturb_label(c.perturb.as_ref())))
            .collect();
        assert_eq!(
            labels,
            [
                ("none".into(), "none".into()),
                ("none".into(), "orbit:30".into()),
                ("ftm".into(), "orbit:30".into()),
                ("fla-r16".into(), "orbit:30".into()),
            ]
        );
        assert!(cells.iter().all(|c| c.n_episodes == 50 && c.seed == 3));
        assert!(matrix("nope", &cfg, 0).is_err());
    }

    #[test]
    fn csv_header_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let row = ResultRow {
            cell_id: cell_id(7),
            adapter: "ftm".into(),
            perturb: "noise:fog:3".into(),
            severity: "3".into(),
            success_rate: Some(0.5),
            trainable_params: 128,
            adapt_steps: 2000,
            wall_time_s: 0.0,
        };
        write_csv(&[row.clone(), ResultRow { success_rate: None, ..row }], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "cell_id,adapter,perturb,severity,success_rate,trainable_params,adapt_steps,wall_time_s\n\
             c007,ftm,noise:fog:3,3,0.5,128,2000,0.0\n\
             c007,ftm,noise:fog:3,3,,128,2000,0.0\n"
        );
    }
}
