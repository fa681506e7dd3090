//! Experiment orchestration: dataset generation, training and evaluation
//! sweeps, Pareto aggregation, and rendering.

mod dataset;
mod evalrun;
mod render;
mod verify;

pub use dataset::{gen_dataset, load_dataset, load_manifest, sample_instance, DatasetManifest};
pub use evalrun::{cmd_baseline, cmd_eval, threads_from_env, write_pareto_aggregate, write_pareto_csv, EvalOptions, ParetoRow, PARETO_HEADER};
pub use render::{render_svg, RenderOptions};
pub use verify::{manufactured_convergence_ratios, run_verification};

use crate::fem::PdeKind;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Experiment-level configuration shared by the CLI subcommands. Desk-scale
/// defaults; paper-scale values (500/100 instances, reference depth 6) are
/// reachable through the same fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pde: PdeKind,
    pub train_count: usize,
    pub eval_count: usize,
    pub ref_depth: usize,
    pub horizon: usize,
    /// Number of penalty values in the evaluation sweep (log-uniform grid).
    pub alpha_sweep: usize,
    /// Number of threshold values in the heuristic sweep (uniform grid).
    pub theta_sweep: usize,
    pub alpha_range: (f64, f64),
    pub theta_range_oracle: (f64, f64),
    pub theta_range_zz: (f64, f64),
    /// Coarse-mesh element budget range, inclusive.
    pub initial_elements: (usize, usize),
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pde: PdeKind::Poisson,
            train_count: 50,
            eval_count: 10,
            ref_depth: 3,
            horizon: 4,
            alpha_sweep: 20,
            theta_sweep: 100,
            alpha_range: (7.0e-5, 2.0e-2),
            theta_range_oracle: (0.0, 1.0),
            theta_range_zz: (1.0e-4, 1.0),
            initial_elements: (20, 40),
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Log-uniform grid over a positive range, `n` points, ascending.
pub fn log_uniform_grid(range: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = range;
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Uniform grid over a range, `n` points, ascending.
pub fn uniform_grid(range: (f64, f64), n: usize) -> Vec<f64> {
    let (lo, hi) = range;
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}
