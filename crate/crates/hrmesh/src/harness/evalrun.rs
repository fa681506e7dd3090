//! Evaluation sweeps and Pareto aggregation.
//!
//! A trained checkpoint is swept over a log-uniform grid of element
//! penalties; each (instance, penalty) pair runs one inference episode with
//! mode actions and no intermediate solves. Heuristics sweep their threshold
//! grid instead. Both paths emit the same CSV schema so the Pareto fronts
//! plot from one file:
//!
//! `method,alpha_or_theta,elements,err_rel,time_s,displacement`

use super::{log_uniform_grid, uniform_grid, ExperimentConfig};
use crate::baselines::{run_heuristic, HeuristicConfig, HeuristicKind};
use crate::env::{run_episode, EnvConfig, Episode, StepLog};
use crate::fem::{solve, ProblemInstance, RefProbes};
use crate::mesh::{uniform_refine, Mesh};
use crate::policy::Policy;
use crate::ppo::{AgentMode, Checkpoint, PolicyAgent};
use crate::Result;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

pub const PARETO_HEADER: &str = "method,alpha_or_theta,elements,err_rel,time_s,displacement";

/// One Pareto row.
#[derive(Debug, Clone)]
pub struct ParetoRow {
    pub method: String,
    pub parameter: f64,
    pub elements: usize,
    pub err_rel: f64,
    pub time_s: f64,
    pub displacement: f64,
}

impl ParetoRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.12e},{},{:.12e},{:.6e},{:.12e}",
            self.method, self.parameter, self.elements, self.err_rel, self.time_s, self.displacement
        )
    }
}

/// Evaluation options common to the learned policy and the baselines.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Zero the wall-time column (byte-reproducible output).
    pub no_time: bool,
    /// Worker threads for the sweep; from `HRMESH_THREADS` when unset.
    pub threads: usize,
    /// Optional JSON-lines log of every adaptation step.
    pub episode_log: Option<std::path::PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { no_time: false, threads: threads_from_env(), episode_log: None }
    }
}

pub fn threads_from_env() -> usize {
    std::env::var("HRMESH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Reference probes for each instance, computed once.
fn all_probes(
    entries: &[(ProblemInstance, Mesh)],
    ref_depth: usize,
) -> Result<Vec<RefProbes>> {
    entries
        .iter()
        .map(|(inst, mesh)| {
            let ref_mesh = uniform_refine(mesh, ref_depth)?;
            let ref_field = solve(&ref_mesh, inst)?;
            Ok(RefProbes::new(&ref_mesh, &ref_field))
        })
        .collect()
}

/// A step-log line tagged with its episode.
#[derive(serde::Serialize)]
struct TaggedStepLog<'a> {
    method: &'a str,
    instance: usize,
    parameter: f64,
    #[serde(flatten)]
    log: &'a StepLog,
}

/// Evaluates a checkpoint over the penalty sweep. Returns the per-episode
/// rows (instance-major, penalty-minor order).
pub fn cmd_eval(
    checkpoint: &Checkpoint,
    entries: &[(ProblemInstance, Mesh)],
    config: &ExperimentConfig,
    options: &EvalOptions,
) -> Result<Vec<ParetoRow>> {
    let alphas = log_uniform_grid(config.alpha_range, config.alpha_sweep);
    let probes = all_probes(entries, config.ref_depth)?;
    let policy = Policy::new(checkpoint.policy_config.clone());
    let env = EnvConfig { ref_depth: config.ref_depth, horizon: config.horizon, ..checkpoint.env.clone() };

    let jobs: Vec<(usize, f64)> = (0..entries.len())
        .flat_map(|i| alphas.iter().map(move |&a| (i, a)))
        .collect();
    let mut rows: Vec<Option<(ParetoRow, Vec<StepLog>)>> = (0..jobs.len()).map(|_| None).collect();

    let run_job = |&(i, alpha): &(usize, f64)| -> Result<(ParetoRow, Vec<StepLog>)> {
        let (instance, mesh) = &entries[i];
        let mut episode = Episode::with_reference(
            instance.clone(),
            alpha,
            mesh.clone(),
            probes[i].clone(),
            env.clone(),
        )?;
        let mut normalizer = checkpoint.normalizer.clone();
        let mut agent = PolicyAgent {
            policy: &policy,
            store: &checkpoint.store,
            normalizer: &mut normalizer,
            mode: AgentMode::Mode,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = Instant::now();
        let transitions = run_episode(&mut episode, &mut agent, &mut rng, false)?;
        let time_s = if options.no_time { 0.0 } else { start.elapsed().as_secs_f64() };
        let displacement: f64 = transitions.iter().map(|t| t.log.displacement).sum();
        let row = ParetoRow {
            method: "policy".into(),
            parameter: alpha,
            elements: episode.mesh.n_elements(),
            err_rel: episode.err_rel(),
            time_s,
            displacement,
        };
        Ok((row, transitions.into_iter().map(|t| t.log).collect()))
    };

    if options.threads <= 1 {
        for (k, job) in jobs.iter().enumerate() {
            rows[k] = Some(run_job(job)?);
        }
    } else {
        let results: Vec<Result<(ParetoRow, Vec<StepLog>)>> = parallel_map(&jobs, options.threads, run_job);
        for (k, r) in results.into_iter().enumerate() {
            rows[k] = Some(r?);
        }
    }

    let mut out_rows = Vec::with_capacity(jobs.len());
    let mut logs = Vec::new();
    for (k, slot) in rows.into_iter().enumerate() {
        let (row, step_logs) = slot.expect("job completed");
        let (i, alpha) = jobs[k];
        for log in &step_logs {
            logs.push(serde_json::to_string(&TaggedStepLog {
                method: "policy",
                instance: i,
                parameter: alpha,
                log,
            })?);
        }
        out_rows.push(row);
    }
    if let Some(path) = &options.episode_log {
        std::fs::write(path, logs.join("\n") + "\n")?;
    }
    Ok(out_rows)
}

/// Simple deterministic fork-join map: chunks the jobs over scoped threads
/// and reassembles results in input order.
fn parallel_map<T: Sync, R: Send>(
    jobs: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let chunk = jobs.len().div_ceil(threads.max(1));
    let mut out: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let slots: Vec<(usize, &mut [Option<R>])> = {
        let mut slots = Vec::new();
        let mut rest = out.as_mut_slice();
        let mut base = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slots.push((base, head));
            base += take;
            rest = tail;
        }
        slots
    };
    std::thread::scope(|scope| {
        for (base, slot) in slots {
            let f = &f;
            scope.spawn(move || {
                for (k, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(&jobs[base + k]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Runs one baseline family over its threshold sweep. Uniform refinement
/// emits one row per refinement level instead of a threshold sweep.
pub fn cmd_baseline(
    kind: HeuristicKind,
    entries: &[(ProblemInstance, Mesh)],
    config: &ExperimentConfig,
    options: &EvalOptions,
) -> Result<Vec<ParetoRow>> {
    let probes = all_probes(entries, config.ref_depth)?;
    let method = match kind {
        HeuristicKind::Uniform => "uniform".to_string(),
        HeuristicKind::Oracle => "oracle".to_string(),
        HeuristicKind::Zz { initial_uniform_steps } => format!("zz{initial_uniform_steps}"),
    };
    let thetas: Vec<f64> = match kind {
        HeuristicKind::Uniform => vec![0.0],
        HeuristicKind::Oracle => uniform_grid(config.theta_range_oracle, config.theta_sweep),
        HeuristicKind::Zz { .. } => uniform_grid(config.theta_range_zz, config.theta_sweep),
    };
    let jobs: Vec<(usize, f64)> = (0..entries.len())
        .flat_map(|i| thetas.iter().map(move |&t| (i, t)))
        .collect();

    let run_job = |&(i, theta): &(usize, f64)| -> Result<Vec<(ParetoRow, Vec<StepLog>)>> {
        let (instance, mesh) = &entries[i];
        let cfg = HeuristicConfig { kind, theta, steps: config.horizon };
        let start = Instant::now();
        let traj = run_heuristic(&cfg, instance, mesh, &probes[i])?;
        let time_s = if options.no_time { 0.0 } else { start.elapsed().as_secs_f64() };
        let per_step = time_s / (traj.len() - 1).max(1) as f64;
        let mut rows = Vec::new();
        if kind == HeuristicKind::Uniform {
            // Every refinement level is a separate Pareto point.
            for (k, step) in traj.iter().enumerate().skip(1) {
                let row = ParetoRow {
                    method: method.clone(),
                    parameter: k as f64,
                    elements: step.mesh.n_elements(),
                    err_rel: step.err_rel,
                    time_s: per_step * k as f64,
                    displacement: 0.0,
                };
                let logs: Vec<StepLog> = traj[1..=k]
                    .iter()
                    .enumerate()
                    .map(|(s, st)| StepLog {
                        step: s,
                        elements: st.mesh.n_elements(),
                        err_rel: st.err_rel,
                        displacement: 0.0,
                        tangled: false,
                    })
                    .collect();
                rows.push((row, logs));
            }
        } else {
            let last = traj.last().unwrap();
            let row = ParetoRow {
                method: method.clone(),
                parameter: theta,
                elements: last.mesh.n_elements(),
                err_rel: last.err_rel,
                time_s,
                displacement: 0.0,
            };
            let logs: Vec<StepLog> = traj[1..]
                .iter()
                .enumerate()
                .map(|(s, st)| StepLog {
                    step: s,
                    elements: st.mesh.n_elements(),
                    err_rel: st.err_rel,
                    displacement: 0.0,
                    tangled: false,
                })
                .collect();
            rows.push((row, logs));
        }
        Ok(rows)
    };

    let results: Vec<Result<Vec<(ParetoRow, Vec<StepLog>)>>> = if options.threads <= 1 {
        jobs.iter().map(run_job).collect()
    } else {
        parallel_map(&jobs, options.threads, run_job)
    };

    let mut out_rows = Vec::new();
    let mut logs = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        let (i, theta) = jobs[k];
        for (row, step_logs) in r? {
            for log in &step_logs {
                logs.push(serde_json::to_string(&TaggedStepLog {
                    method: &method,
                    instance: i,
                    parameter: theta,
                    log,
                })?);
            }
            out_rows.push(row);
        }
    }
    if let Some(path) = &options.episode_log {
        std::fs::write(path, logs.join("\n") + "\n")?;
    }
    Ok(out_rows)
}

/// Writes rows to a CSV file with the stable schema.
pub fn write_pareto_csv(path: &Path, rows: &[ParetoRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{PARETO_HEADER}")?;
    for row in rows {
        writeln!(f, "{}", row.csv())?;
    }
    Ok(())
}

/// Mean and standard deviation per (method, parameter) group, written with
/// the same schema plus `_std` columns.
pub fn write_pareto_aggregate(path: &Path, rows: &[ParetoRow]) -> Result<()> {
    let mut groups: std::collections::BTreeMap<(String, u64), Vec<&ParetoRow>> = Default::default();
    for row in rows {
        groups.entry((row.method.clone(), row.parameter.to_bits())).or_default().push(row);
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{PARETO_HEADER},elements_std,err_rel_std")?;
    for ((method, pbits), group) in groups {
        let n = group.len() as f64;
        let mean = |get: &dyn Fn(&ParetoRow) -> f64| group.iter().map(|r| get(r)).sum::<f64>() / n;
        let std = |get: &dyn Fn(&ParetoRow) -> f64, mu: f64| {
            (group.iter().map(|r| (get(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        let elem_mean = mean(&|r| r.elements as f64);
        let err_mean = mean(&|r| r.err_rel);
        writeln!(
            f,
            "{},{:.12e},{:.2},{:.12e},{:.6e},{:.12e},{:.4e},{:.4e}",
            method,
            f64::from_bits(pbits),
            elem_mean,
            err_mean,
            mean(&|r| r.time_s),
            mean(&|r| r.displacement),
            std(&|r| r.elements as f64, elem_mean),
            std(&|r| r.err_rel, err_mean),
        )?;
    }
    Ok(())
}
