//! Command-line driver: dataset generation, training, evaluation sweeps,
//! baselines, rendering, and the built-in verification suites.

use clap::{Args, Parser, Subcommand};
use hrmesh::baselines::HeuristicKind;
use hrmesh::env::EnvConfig;
use hrmesh::fem::{Field, PdeKind};
use hrmesh::harness::{self, load_dataset, EvalOptions, ExperimentConfig, RenderOptions};
use hrmesh::mesh::Mesh;
use hrmesh::ppo::{self, Checkpoint, Dataset, TrainConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hrmesh", about = "hr-adaptive mesh refinement toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_pde)]
    pde: Option<PdeKind>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long)]
    ref_depth: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    alpha_sweep: Option<usize>,
    #[arg(long)]
    theta_sweep: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_pde(s: &str) -> Result<PdeKind, String> {
    match s {
        "poisson" => Ok(PdeKind::Poisson),
        "heat" => Ok(PdeKind::Heat),
        other => Err(format!("unknown pde '{other}' (poisson|heat)")),
    }
}

impl ConfigArgs {
    fn build(&self, out_dir: Option<&PathBuf>) -> hrmesh::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(hrmesh::Error::from)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.pde {
            cfg.pde = v;
        }
        if let Some(v) = self.train_count {
            cfg.train_count = v;
        }
        if let Some(v) = self.eval_count {
            cfg.eval_count = v;
        }
        if let Some(v) = self.ref_depth {
            cfg.ref_depth = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.alpha_sweep {
            cfg.alpha_sweep = v;
        }
        if let Some(v) = self.theta_sweep {
            cfg.theta_sweep = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(dir) = out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of problem instances with initial and reference
    /// meshes.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        phase1_iters: Option<usize>,
        #[arg(long)]
        transitions: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Update worker threads (default: HRMESH_THREADS or 1).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint over the penalty sweep.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pareto CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Zero the wall-time column for byte-reproducible output.
        #[arg(long)]
        no_time: bool,
        /// Evaluate on the training split instead of the eval split.
        #[arg(long)]
        train_split: bool,
    },
    /// Run classical baselines over the threshold sweep.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// uniform | oracle | zz1 | zz2 | all
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long)]
        no_time: bool,
    },
    /// Render a mesh (optionally with a field) to SVG.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Color elements by aspect ratio.
        #[arg(long)]
        quality: bool,
    },
    /// Run the built-in invariant suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomized cases per suite.
        #[arg(long, default_value_t = 50)]
        sweeps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", serde_json::json!({ "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> hrmesh::Result<ExitCode> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = config.build(Some(&out))?;
            let manifest = harness::gen_dataset(&cfg)?;
            println!(
                "generated {} train and {} eval instances in {}",
                manifest.train.len(),
                manifest.eval.len(),
                cfg.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out, iterations, phase1_iters, transitions, lr, threads } => {
            let cfg = config.build(None)?;
            let manifest = harness::load_manifest(&data)?;
            let entries = load_dataset(&data, &manifest.train)?;
            let mut tc = TrainConfig {
                seed: cfg.seed,
                env: EnvConfig {
                    ref_depth: cfg.ref_depth,
                    horizon: cfg.horizon,
                    ..EnvConfig::default()
                },
                alpha_range: cfg.alpha_range,
                ..TrainConfig::default()
            };
            if let Some(v) = iterations {
                tc.iterations = v;
                // Keep the 150-of-400 curriculum proportion when shrunk.
                tc.phase1_iters = (v * 3) / 8;
            }
            if let Some(v) = phase1_iters {
                tc.phase1_iters = v;
            }
            if let Some(v) = transitions {
                tc.transitions_per_iter = v;
            }
            if let Some(v) = lr {
                tc.lr = v;
            }
            tc.update_threads = threads.unwrap_or_else(harness::threads_from_env);
            let (_, metrics) = ppo::train(&tc, &Dataset { entries }, Some(&out))?;
            if let Some(last) = metrics.last() {
                println!(
                    "trained {} iterations; final mean err_rel {:.3e}, mean elements {:.1}",
                    metrics.len(),
                    last.mean_err_rel,
                    last.mean_elements
                );
            }
            println!("checkpoints and metrics.csv written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint, data, out, no_time, train_split } => {
            let cfg = config.build(None)?;
            let manifest = harness::load_manifest(&data)?;
            let stems = if train_split { &manifest.train } else { &manifest.eval };
            let entries = load_dataset(&data, stems)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let options = EvalOptions {
                no_time,
                episode_log: Some(out.with_extension("jsonl")),
                ..EvalOptions::default()
            };
            let rows = harness::cmd_eval(&ck, &entries, &cfg, &options)?;
            harness::write_pareto_csv(&out, &rows)?;
            harness::write_pareto_aggregate(&agg_path(&out), &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Baseline { config, data, out, kind, no_time } => {
            let cfg = config.build(None)?;
            let manifest = harness::load_manifest(&data)?;
            let entries = load_dataset(&data, &manifest.eval)?;
            let kinds: Vec<HeuristicKind> = match kind.as_str() {
                "uniform" => vec![HeuristicKind::Uniform],
                "oracle" => vec![HeuristicKind::Oracle],
                "zz1" => vec![HeuristicKind::Zz { initial_uniform_steps: 1 }],
                "zz2" => vec![HeuristicKind::Zz { initial_uniform_steps: 2 }],
                "all" => vec![
                    HeuristicKind::Uniform,
                    HeuristicKind::Oracle,
                    HeuristicKind::Zz { initial_uniform_steps: 1 },
                    HeuristicKind::Zz { initial_uniform_steps: 2 },
                ],
                other => {
                    return Err(hrmesh::Error::Format(format!("unknown baseline kind '{other}'")))
                }
            };
            let options = EvalOptions {
                no_time,
                episode_log: Some(out.with_extension("jsonl")),
                ..EvalOptions::default()
            };
            let mut rows = Vec::new();
            for k in kinds {
                rows.extend(harness::cmd_baseline(k, &entries, &cfg, &options)?);
            }
            harness::write_pareto_csv(&out, &rows)?;
            harness::write_pareto_aggregate(&agg_path(&out), &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { mesh, field, out, quality } => {
            let m = Mesh::load(&mesh)?;
            let f = match field {
                Some(path) => Some(Field::from_text(&std::fs::read_to_string(path)?)?),
                None => None,
            };
            let svg = harness::render_svg(&m, &RenderOptions { field: f, quality })?;
            std::fs::write(&out, svg)?;
            println!("rendered {} elements to {}", m.n_elements(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed, sweeps } => {
            let report = harness::run_verification(seed, sweeps)?;
            println!("{} passed, {} failed", report.passed, report.failed);
            Ok(if report.failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}

fn agg_path(out: &std::path::Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("pareto");
    out.with_file_name(format!("{stem}_agg.csv"))
}
