//! The adaptation environment: episodes, the hr transition, rewards,
//! blended returns, and advantage estimation.
//!
//! One episode adapts a coarse mesh for a fixed number of steps. Every step
//! solves the PDE, queries the agent for a joint action, relocates vertices
//! (with rollback and a penalty if the sampled move inverts an element),
//! refines flagged elements, and scores both swarms against a high-fidelity
//! reference solution. The final step relocates only.
//!
//! Vertex rewards are local error drops diffused over the adjacency graph by
//! a personalized-PageRank smoother; element rewards are the drop of the
//! worst-child error indicator minus a per-element cost penalty. Returns
//! blend each agent's lineage-projected return with a global signal before
//! value baselines are subtracted.

use crate::features::{build_state, task_features, HypergraphState};
use crate::fem::{indicators, solve, Field, Indicators, ProblemInstance, RefProbes};
use crate::mesh::{rgb_refine, uniform_refine, Mesh, RefinementMaps};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Environment parameters. Defaults follow the training setup used by the
/// policy: four hr-steps plus a final relocation-only step, reference meshes
/// six uniform refinements deep, PageRank smoothing with teleport 0.5 for
/// 20 iterations, and a tangling penalty of 1.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of combined relocation+refinement steps.
    pub horizon: usize,
    /// Uniform refinement depth of the reference mesh.
    pub ref_depth: usize,
    pub pagerank_beta: f64,
    pub pagerank_iters: usize,
    /// Magnitude of the reward given to vertices of inverted elements.
    pub tangle_penalty: f64,
    pub gamma_h: f64,
    pub gamma_r: f64,
    pub lambda: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 4,
            ref_depth: 6,
            pagerank_beta: 0.5,
            pagerank_iters: 20,
            tangle_penalty: 1.5,
            gamma_h: 1.0,
            gamma_r: 0.1,
            lambda: 0.95,
        }
    }
}

/// What the learning (or scripted) agent returns for one state.
#[derive(Debug, Clone)]
pub struct Decision {
    /// The state exactly as fed to the network (normalized), stored for the
    /// update pass.
    pub state: HypergraphState,
    pub vertex_coords: Vec<[f64; 2]>,
    /// Ignored on the final relocation-only step.
    pub elem_flags: Vec<u8>,
    pub vertex_logprob: Vec<f64>,
    pub elem_logprob: Vec<f64>,
    pub vertex_value: Vec<f64>,
    pub elem_value: Vec<f64>,
}

/// Anything that can act in the environment.
pub trait Agent {
    fn decide(
        &mut self,
        state: &HypergraphState,
        mesh: &Mesh,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision>;
}

/// One adaptation episode.
pub struct Episode {
    pub instance: ProblemInstance,
    pub alpha: f64,
    pub config: EnvConfig,
    pub initial_mesh: Mesh,
    pub ref_probes: RefProbes,
    /// Sum of the max-pointwise indicators on the initial mesh; normalizes
    /// the element reward scale.
    pub initial_total_error: f64,
    /// Total squared error of the initial mesh; normalizes the global error.
    pub initial_error_sq: f64,
    pub step_index: usize,
    pub mesh: Mesh,
    pub field: Field,
    pub indicators: Indicators,
    pub finished: bool,
}

impl Episode {
    /// Builds an episode, computing the reference solution from scratch.
    pub fn new(
        instance: ProblemInstance,
        alpha: f64,
        initial_mesh: Mesh,
        config: EnvConfig,
    ) -> Result<Episode> {
        let ref_mesh = uniform_refine(&initial_mesh, config.ref_depth)?;
        let ref_field = solve(&ref_mesh, &instance)?;
        let probes = RefProbes::new(&ref_mesh, &ref_field);
        Self::with_reference(instance, alpha, initial_mesh, probes, config)
    }

    /// Builds an episode from precomputed reference probes (the reference
    /// solve is the expensive part and is shared across episodes of the
    /// same instance).
    pub fn with_reference(
        instance: ProblemInstance,
        alpha: f64,
        initial_mesh: Mesh,
        ref_probes: RefProbes,
        config: EnvConfig,
    ) -> Result<Episode> {
        let field = solve(&initial_mesh, &instance)?;
        let ind = indicators(&initial_mesh, &field, &ref_probes)?;
        let initial_total_error: f64 = ind.eta_inf.iter().sum();
        let initial_error_sq = ind.global_error_sq();
        if !(initial_total_error > 0.0) || !(initial_error_sq > 0.0) {
            return Err(Error::Env("degenerate normalization: initial error is zero".into()));
        }
        Ok(Episode {
            instance,
            alpha,
            config,
            initial_mesh: initial_mesh.clone(),
            ref_probes,
            initial_total_error,
            initial_error_sq,
            step_index: 0,
            mesh: initial_mesh,
            field,
            indicators: ind,
            finished: false,
        })
    }

    /// Total steps in the episode (hr-steps plus the final relocation).
    pub fn total_steps(&self) -> usize {
        self.config.horizon + 1
    }

    /// Normalized global squared error of the current mesh.
    pub fn err_rel(&self) -> f64 {
        self.indicators.global_error_sq() / self.initial_error_sq
    }
}

/// Per-step record of everything PPO needs.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: HypergraphState,
    /// Geometry snapshot the state was built on.
    pub mesh: Mesh,
    pub vertex_actions: Vec<[f64; 2]>,
    pub elem_actions: Vec<u8>,
    pub vertex_logprob: Vec<f64>,
    pub elem_logprob: Vec<f64>,
    pub vertex_reward: Vec<f64>,
    pub elem_reward: Vec<f64>,
    pub vertex_value: Vec<f64>,
    pub elem_value: Vec<f64>,
    pub maps: RefinementMaps,
    pub tangled: bool,
    /// Fractional reduction of total squared error due to relocation.
    pub g_global: f64,
    /// False on the final relocation-only step.
    pub has_refinement: bool,
    pub log: StepLog,
    // Filled by `compute_returns` once the episode is complete.
    pub vertex_advantage: Vec<f64>,
    pub vertex_return: Vec<f64>,
    pub elem_advantage: Vec<f64>,
    pub elem_return: Vec<f64>,
}

/// One line of the episode log (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub elements: usize,
    pub err_rel: f64,
    pub displacement: f64,
    pub tangled: bool,
}

/// Executes one hr-adaptation step (relocation-only on the last step).
pub fn step_hr(
    episode: &mut Episode,
    agent: &mut dyn Agent,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Transition> {
    if episode.finished {
        return Err(Error::Env("episode already finished".into()));
    }
    let has_refinement = episode.step_index < episode.config.horizon;
    let tf = task_features(&episode.mesh, &episode.instance)?;
    let raw_state =
        build_state(&episode.mesh, &episode.field, episode.step_index, episode.alpha, &tf)?;
    let decision = agent.decide(&raw_state, &episode.mesh, training, rng)?;

    // Relocation with tangling rollback.
    let proposed = episode.mesh.with_coords(decision.vertex_coords.clone());
    let inverted = proposed.detect_tangled();
    let tangled = !inverted.is_empty();
    let mut vertex_reward = vec![0.0; episode.mesh.n_vertices()];
    let mut g_global = 0.0;
    let (moved_mesh, moved_ind);
    if tangled {
        for &e in &inverted {
            for &v in &proposed.tris[e] {
                vertex_reward[v] = -episode.config.tangle_penalty;
            }
        }
        moved_mesh = episode.mesh.clone();
        moved_ind = episode.indicators.clone();
    } else {
        moved_mesh = proposed;
        if training {
            // Intermediate solve on the moved mesh, used only for rewards.
            let moved_field = solve(&moved_mesh, &episode.instance)?;
            moved_ind = indicators(&moved_mesh, &moved_field, &episode.ref_probes)?;
            vertex_reward = vertex_rewards(
                &episode.mesh,
                &episode.indicators,
                &moved_mesh,
                &moved_ind,
                &raw_state.adjacency,
                episode.config.pagerank_beta,
                episode.config.pagerank_iters,
            );
            let before = episode.indicators.global_error_sq();
            let after = moved_ind.global_error_sq();
            if before > 0.0 {
                g_global = (before - after) / before;
            }
        } else {
            moved_ind = episode.indicators.clone();
        }
    }
    let displacement: f64 = episode
        .mesh
        .coords
        .iter()
        .zip(&moved_mesh.coords)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();

    // Refinement on the (possibly rolled-back) moved mesh.
    let (next_mesh, maps, elem_actions) = if has_refinement {
        let flags = &decision.elem_flags;
        if flags.len() != moved_mesh.n_elements() {
            return Err(Error::Env("flag vector length mismatch".into()));
        }
        let (m, maps) = rgb_refine(&moved_mesh, flags)?;
        (m, maps, flags.clone())
    } else {
        (
            moved_mesh.clone(),
            RefinementMaps::identity(moved_mesh.n_elements(), moved_mesh.n_vertices()),
            Vec::new(),
        )
    };
    let next_field = solve(&next_mesh, &episode.instance)?;
    let next_ind = indicators(&next_mesh, &next_field, &episode.ref_probes)?;

    let elem_reward = if has_refinement && training {
        element_rewards(
            &moved_ind.eta_inf,
            &next_ind.eta_inf,
            &maps,
            episode.alpha,
            episode.initial_total_error,
        )?
    } else {
        Vec::new()
    };

    let log = StepLog {
        step: episode.step_index,
        elements: next_mesh.n_elements(),
        err_rel: next_ind.global_error_sq() / episode.initial_error_sq,
        displacement,
        tangled,
    };

    let transition = Transition {
        state: decision.state,
        mesh: episode.mesh.clone(),
        vertex_actions: decision.vertex_coords,
        elem_actions,
        vertex_logprob: decision.vertex_logprob,
        elem_logprob: decision.elem_logprob,
        vertex_reward,
        elem_reward,
        vertex_value: decision.vertex_value,
        elem_value: decision.elem_value,
        maps,
        tangled,
        g_global,
        has_refinement,
        log,
        vertex_advantage: Vec::new(),
        vertex_return: Vec::new(),
        elem_advantage: Vec::new(),
        elem_return: Vec::new(),
    };

    episode.mesh = next_mesh;
    episode.field = next_field;
    episode.indicators = next_ind;
    episode.step_index += 1;
    episode.finished = episode.step_index >= episode.total_steps();
    Ok(transition)
}

/// Moved-mesh vertex rewards: per-vertex volume-weighted error before/after
/// relocation, differenced, diffused by `iters` personalized-PageRank
/// updates `r <- (1 - beta) delta + beta D^-1 A r`, then sup-normalized.
pub fn vertex_rewards(
    mesh_before: &Mesh,
    ind_before: &Indicators,
    mesh_moved: &Mesh,
    ind_moved: &Indicators,
    adjacency: &[Vec<usize>],
    beta: f64,
    iters: usize,
) -> Vec<f64> {
    let vert_elems = mesh_before.vertex_elements();
    let eps = |mesh: &Mesh, ind: &Indicators| -> Vec<f64> {
        vert_elems
            .iter()
            .map(|es| {
                let mut num = 0.0;
                let mut den = 0.0;
                for &e in es {
                    let a = mesh.area(e);
                    num += a * ind.eta_2_sq[e];
                    den += a;
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    };
    let before = eps(mesh_before, ind_before);
    let after = eps(mesh_moved, ind_moved);
    let delta: Vec<f64> = before.iter().zip(&after).map(|(b, a)| b - a).collect();
    let smoothed = pagerank_diffuse(&delta, adjacency, beta, iters);
    let sup = smoothed.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    if sup > 0.0 {
        smoothed.iter().map(|r| r / sup).collect()
    } else {
        smoothed
    }
}

/// `iters` applications of `r <- (1 - beta) delta + beta D^-1 A r` starting
/// from `r = delta`.
pub fn pagerank_diffuse(delta: &[f64], adjacency: &[Vec<usize>], beta: f64, iters: usize) -> Vec<f64> {
    let mut r = delta.to_vec();
    let mut next = vec![0.0; r.len()];
    for _ in 0..iters {
        for (i, nbrs) in adjacency.iter().enumerate() {
            let avg = if nbrs.is_empty() {
                0.0
            } else {
                nbrs.iter().map(|&j| r[j]).sum::<f64>() / nbrs.len() as f64
            };
            next[i] = (1.0 - beta) * delta[i] + beta * avg;
        }
        std::mem::swap(&mut r, &mut next);
    }
    r
}

/// Flags the vertices of inverted elements with `-penalty`; everything else
/// gets zero. Returns whether a rollback is needed.
pub fn tangling_penalty(mesh_moved: &Mesh, penalty: f64) -> (bool, Vec<f64>) {
    let inverted = mesh_moved.detect_tangled();
    let mut rewards = vec![0.0; mesh_moved.n_vertices()];
    for &e in &inverted {
        for &v in &mesh_moved.tris[e] {
            rewards[v] = -penalty;
        }
    }
    (!inverted.is_empty(), rewards)
}

/// Element rewards: normalized worst-child error drop minus the per-added-
/// element penalty. `eta_parent` is indexed by the moved mesh, `eta_child`
/// by the refined mesh.
pub fn element_rewards(
    eta_parent: &[f64],
    eta_child: &[f64],
    maps: &RefinementMaps,
    alpha: f64,
    initial_total_error: f64,
) -> Result<Vec<f64>> {
    let scale = 1.0 / initial_total_error;
    maps.elem_children
        .iter()
        .enumerate()
        .map(|(j, children)| {
            if children.is_empty() {
                return Err(Error::Env(format!("element {j} has no lineage")));
            }
            let worst = children
                .iter()
                .map(|&c| eta_child[c] * scale)
                .fold(f64::MIN, f64::max);
            let drop = eta_parent[j] * scale - worst;
            Ok(drop - alpha * (children.len() as f64 - 1.0))
        })
        .collect()
}

/// Per-agent blended returns and advantages for one complete episode.
///
/// Local returns follow lineage: an element's successors are its children
/// (summed), a vertex's successor is its persistent image. Lambda-returns
/// come from generalized advantage estimation per swarm; they are then
/// blended with the global signal (mean element return per step for
/// elements, the relocation error-drop fraction for vertices) and the value
/// baseline is subtracted.
pub fn compute_returns(transitions: &mut [Transition], config: &EnvConfig) {
    let n = transitions.len();
    if n == 0 {
        return;
    }
    // Elements, reverse over refinement steps.
    let mut next_elem_gae: Vec<f64> = Vec::new();
    let mut next_elem_value: Vec<f64> = Vec::new();
    for t in (0..n).rev() {
        if !transitions[t].has_refinement {
            continue;
        }
        let tr = &transitions[t];
        let pop = tr.elem_reward.len();
        let mut gae = vec![0.0; pop];
        for j in 0..pop {
            let children = &tr.maps.elem_children[j];
            let (boot_v, boot_a) = if next_elem_value.is_empty() {
                (0.0, 0.0)
            } else {
                (
                    children.iter().map(|&c| next_elem_value[c]).sum::<f64>(),
                    children.iter().map(|&c| next_elem_gae[c]).sum::<f64>(),
                )
            };
            let delta = tr.elem_reward[j] + config.gamma_h * boot_v - tr.elem_value[j];
            gae[j] = delta + config.gamma_h * config.lambda * boot_a;
        }
        let lambda_return: Vec<f64> =
            gae.iter().zip(&tr.elem_value).map(|(a, v)| a + v).collect();
        let global = lambda_return.iter().sum::<f64>() / pop.max(1) as f64;
        let blended: Vec<f64> = lambda_return.iter().map(|r| 0.5 * r + 0.5 * global).collect();
        let advantage: Vec<f64> =
            blended.iter().zip(&tr.elem_value).map(|(b, v)| b - v).collect();
        next_elem_gae = gae;
        next_elem_value = transitions[t].elem_value.clone();
        transitions[t].elem_return = blended;
        transitions[t].elem_advantage = advantage;
    }

    // Vertices, reverse over every step.
    let mut next_vert_gae: Vec<f64> = Vec::new();
    let mut next_vert_value: Vec<f64> = Vec::new();
    for t in (0..n).rev() {
        let tr = &transitions[t];
        let pop = tr.vertex_reward.len();
        let mut gae = vec![0.0; pop];
        for i in 0..pop {
            let (boot_v, boot_a) = if next_vert_value.is_empty() {
                (0.0, 0.0)
            } else {
                let succ = tr.maps.vertex_persist[i];
                (next_vert_value[succ], next_vert_gae[succ])
            };
            let delta = tr.vertex_reward[i] + config.gamma_r * boot_v - tr.vertex_value[i];
            gae[i] = delta + config.gamma_r * config.lambda * boot_a;
        }
        let lambda_return: Vec<f64> =
            gae.iter().zip(&tr.vertex_value).map(|(a, v)| a + v).collect();
        let blended: Vec<f64> =
            lambda_return.iter().map(|r| 0.5 * r + 0.5 * tr.g_global).collect();
        let advantage: Vec<f64> =
            blended.iter().zip(&tr.vertex_value).map(|(b, v)| b - v).collect();
        next_vert_gae = gae;
        next_vert_value = transitions[t].vertex_value.clone();
        transitions[t].vertex_return = blended;
        transitions[t].vertex_advantage = advantage;
    }
}

/// Rollout storage: completed episodes with returns filled in.
#[derive(Default)]
pub struct RolloutBuffer {
    pub episodes: Vec<Vec<Transition>>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_episode(&mut self, mut transitions: Vec<Transition>, config: &EnvConfig) {
        compute_returns(&mut transitions, config);
        self.episodes.push(transitions);
    }

    pub fn n_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn iter_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }
}

/// Runs a full episode under an agent, returning the transition list.
pub fn run_episode(
    episode: &mut Episode,
    agent: &mut dyn Agent,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(episode.total_steps());
    while !episode.finished {
        out.push(step_hr(episode, agent, rng, training)?);
    }
    Ok(out)
}
