//! Ablation sweeps over routing width and the contrastive weight.
//!
//! The grid is the cross product of the `top_k` and `beta` axes; every
//! cell trains once per seed and reports mean/std of the final task loss
//! and the routing metrics. Cells run in parallel, results are ordered
//! deterministically regardless of scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::{run_training, HarnessError, TrainConfig, TrainingRun};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub base: TrainConfig,
    /// Routing-width axis; empty means "just the base config's top_k".
    pub top_k: Vec<usize>,
    /// Contrastive-weight axis; empty means "just the base config's beta".
    pub beta: Vec<f64>,
    /// One training run per seed per grid cell.
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            base: TrainConfig::default(),
            top_k: Vec::new(),
            beta: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Aggregates for one (top_k, beta) cell across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub top_k: usize,
    pub beta: f64,
    pub seeds: usize,
    pub task_loss_mean: f64,
    pub task_loss_std: f64,
    pub nmi_mean: f64,
    pub nmi_std: f64,
    /// Normalized routing entropy, averaged over layers then seeds.
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub intra_mean: f64,
    pub inter_mean: f64,
    /// Mean of intra/inter; NaN when no run produced a separation score.
    pub separation_ratio_mean: f64,
}

struct CellMetrics {
    task_loss: f64,
    nmi: f64,
    entropy: f64,
    separation: Option<(f64, f64)>,
}

/// Runs the full grid. Fails fast on an empty axis or an invalid cell.
pub fn run_ablation<F: Scalar>(spec: &AblationSpec) -> Result<Vec<AblationRow>, HarnessError> {
    let top_k_axis = if spec.top_k.is_empty() {
        vec![spec.base.top_k]
    } else {
        spec.top_k.clone()
    };
    let beta_axis = if spec.beta.is_empty() {
        vec![spec.base.aux.beta]
    } else {
        spec.beta.clone()
    };
    if spec.seeds.is_empty() {
        return Err(HarnessError::Config {
            message: "ablation grid is empty: no seeds".to_string(),
        });
    }

    let mut cells = Vec::new();
    for &k in &top_k_axis {
        for &beta in &beta_axis {
            let mut cfg = spec.base.clone();
            cfg.top_k = k;
            cfg.aux.beta = beta;
            cfg.validate()?;
            cells.push((k, beta, cfg));
        }
    }

    let jobs: Vec<(usize, TrainConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, (_, _, cfg))| {
            spec.seeds.iter().map(move |&s| {
                let mut c = cfg.clone();
                c.seed = s;
                (ci, c)
            })
        })
        .collect();

    let results: Vec<(usize, Result<CellMetrics, HarnessError>)> = jobs
        .into_par_iter()
        .map(|(ci, cfg)| (ci, measure::<F>(&cfg)))
        .collect();

    let mut per_cell: Vec<Vec<CellMetrics>> = (0..cells.len()).map(|_| Vec::new()).collect();
    for (ci, res) in results {
        per_cell[ci].push(res?);
    }

    Ok(cells
        .iter()
        .zip(per_cell)
        .map(|((k, beta, _), metrics)| aggregate(*k, *beta, &metrics))
        .collect())
}

fn measure<F: Scalar>(cfg: &TrainConfig) -> Result<CellMetrics, HarnessError> {
    let run: TrainingRun<F> = run_training(cfg)?;
    let summary = &run.final_eval.summary;
    let entropy =
        summary.layers.iter().map(|l| l.entropy).sum::<f64>() / summary.layers.len() as f64;
    Ok(CellMetrics {
        task_loss: run.final_eval.mean_task_loss,
        nmi: summary.nmi,
        entropy,
        separation: summary.separation.map(|s| (s.intra, s.inter)),
    })
}

fn aggregate(top_k: usize, beta: f64, metrics: &[CellMetrics]) -> AblationRow {
    let losses: Vec<f64> = metrics.iter().map(|m| m.task_loss).collect();
    let nmis: Vec<f64> = metrics.iter().map(|m| m.nmi).collect();
    let entropies: Vec<f64> = metrics.iter().map(|m| m.entropy).collect();
    let seps: Vec<(f64, f64)> = metrics.iter().filter_map(|m| m.separation).collect();
    let (intra_mean, inter_mean, ratio_mean) = if seps.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let intra = mean(&seps.iter().map(|s| s.0).collect::<Vec<_>>());
        let inter = mean(&seps.iter().map(|s| s.1).collect::<Vec<_>>());
        let ratios: Vec<f64> = seps
            .iter()
            .map(|&(i, e)| if e == 0.0 { 0.0 } else { i / e })
            .collect();
        (intra, inter, mean(&ratios))
    };
    AblationRow {
        top_k,
        beta,
        seeds: metrics.len(),
        task_loss_mean: mean(&losses),
        task_loss_std: std_dev(&losses),
        nmi_mean: mean(&nmis),
        nmi_std: std_dev(&nmis),
        entropy_mean: mean(&entropies),
        entropy_std: std_dev(&entropies),
        intra_mean,
        inter_mean,
        separation_ratio_mean: ratio_mean,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for a single observation.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Fixed column order; one row per grid cell.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), HarnessError> {
    let io = |e: csv::Error| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(io)?;
    writer
        .write_record([
            "top_k",
            "beta",
            "seeds",
            "task_loss_mean",
            "task_loss_std",
            "nmi_mean",
            "nmi_std",
            "entropy_mean",
            "entropy_std",
            "intra_mean",
            "inter_mean",
            "separation_ratio_mean",
        ])
        .map_err(io)?;
    for r in rows {
        writer
            .write_record([
                r.top_k.to_string(),
                format!("{}", r.beta),
                r.seeds.to_string(),
                format!("{}", r.task_loss_mean),
                format!("{}", r.task_loss_std),
                format!("{}", r.nmi_mean),
                format!("{}", r.nmi_std),
                format!("{}", r.entropy_mean),
                format!("{}", r.entropy_std),
                format!("{}", r.intra_mean),
                format!("{}", r.inter_mean),
                format!("{}", r.separation_ratio_mean),
            ])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
