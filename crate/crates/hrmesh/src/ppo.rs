//! Multi-objective swarm PPO.
//!
//! Each training iteration rolls out whole episodes until the transition
//! budget is met, computes blended returns and advantages per swarm, then
//! runs several epochs of clipped-surrogate updates over transition
//! minibatches. Vertex and element swarms contribute separate policy, value,
//! and entropy terms to one composite loss; a two-phase curriculum first
//! trains relocation against random refinement (element terms disabled, so
//! element parameters stay bitwise untouched), then trains both swarms
//! jointly.

use crate::env::{
    run_episode, Agent, Decision, EnvConfig, Episode, RolloutBuffer, Transition,
};
use crate::features::HypergraphState;
use crate::fem::ProblemInstance;
use crate::mesh::{BoundaryClass, Mesh};
use crate::policy::{bernoulli_logpdf, Policy, PolicyConfig};
use crate::tensor::{bernoulli_entropy, bernoulli_logprob, AdamConfig, ParamStore, Tape};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub transitions_per_iter: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub value_coef_r: f64,
    pub value_coef_h: f64,
    pub entropy_coef_v: f64,
    pub entropy_coef_e: f64,
    pub grad_clip: f64,
    pub lr: f64,
    /// Iterations of Phase I (relocation only, random refinement).
    pub phase1_iters: usize,
    /// Phase I per-element refinement probability.
    pub p_random_refine: f64,
    /// Log-uniform sampling range of the element penalty.
    pub alpha_range: (f64, f64),
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Worker threads for minibatch gradient computation. Results are
    /// deterministic for a fixed thread count.
    #[serde(default = "default_threads")]
    pub update_threads: usize,
    pub env: EnvConfig,
}

fn default_threads() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 400,
            transitions_per_iter: 256,
            epochs: 5,
            minibatch: 32,
            clip: 0.2,
            value_coef_r: 0.5,
            value_coef_h: 0.5,
            entropy_coef_v: 1e-3,
            entropy_coef_e: 1e-3,
            grad_clip: 0.5,
            lr: 3e-4,
            phase1_iters: 150,
            p_random_refine: 0.25,
            alpha_range: (7.0e-5, 2.0e-2),
            seed: 0,
            checkpoint_every: 10,
            update_threads: 1,
            env: EnvConfig::default(),
        }
    }
}

/// Per-column running mean/variance (Welford) for one feature family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

const VAR_FLOOR: f64 = 1e-8;

impl RunningStats {
    pub fn new(cols: usize) -> Self {
        RunningStats { count: 0.0, mean: vec![0.0; cols], m2: vec![0.0; cols] }
    }

    pub fn update_rows(&mut self, data: &[f64], cols: usize) {
        for row in data.chunks(cols) {
            self.count += 1.0;
            for (c, &x) in row.iter().enumerate() {
                let d = x - self.mean[c];
                self.mean[c] += d / self.count;
                self.m2[c] += d * (x - self.mean[c]);
            }
        }
    }

    pub fn std(&self, c: usize) -> f64 {
        let var = if self.count > 1.0 { self.m2[c] / self.count } else { 0.0 };
        var.max(VAR_FLOOR).sqrt()
    }

    pub fn normalize_rows(&self, data: &mut [f64], cols: usize) {
        if self.count < 1.0 {
            return;
        }
        let stds: Vec<f64> = (0..cols).map(|c| self.std(c)).collect();
        for row in data.chunks_mut(cols) {
            for (c, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[c]) / stds[c];
            }
        }
    }
}

/// Observation normalizer: separate running statistics for vertex and
/// element feature columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub vertex: RunningStats,
    pub element: RunningStats,
}

impl ObsNormalizer {
    pub fn new(d_v: usize, d_e: usize) -> Self {
        ObsNormalizer { vertex: RunningStats::new(d_v), element: RunningStats::new(d_e) }
    }

    /// Standardizes all feature columns; statistics move only when
    /// `update` is set (training rollouts).
    pub fn normalize(&mut self, state: &HypergraphState, update: bool) -> HypergraphState {
        let mut out = state.clone();
        if update {
            self.vertex.update_rows(&state.vertex_feats.data, state.vertex_feats.cols);
            self.element.update_rows(&state.elem_feats.data, state.elem_feats.cols);
        }
        self.vertex.normalize_rows(&mut out.vertex_feats.data, out.vertex_feats.cols);
        self.element.normalize_rows(&mut out.elem_feats.data, out.elem_feats.cols);
        out
    }
}

/// How the policy agent acts during rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentMode {
    /// Sample both swarms from the policy.
    Sample,
    /// Sample relocation, choose refinement flags uniformly at random with
    /// the given probability (Phase I).
    SampleRandomRefine(f64),
    /// Deterministic mode actions (inference).
    Mode,
}

/// Wraps the policy network and the observation normalizer into an
/// environment [`Agent`].
pub struct PolicyAgent<'a> {
    pub policy: &'a Policy,
    pub store: &'a ParamStore,
    pub normalizer: &'a mut ObsNormalizer,
    pub mode: AgentMode,
}

impl Agent for PolicyAgent<'_> {
    fn decide(
        &mut self,
        state: &HypergraphState,
        mesh: &Mesh,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        let normalized = self.normalizer.normalize(state, training);
        let with_elements = !matches!(self.mode, AgentMode::SampleRandomRefine(_));
        let out = self.policy.forward_eval_path(self.store, &normalized, mesh, with_elements)?;
        match self.mode {
            AgentMode::Mode => {
                let (coords, flags) = self.policy.inference_act(&out, mesh);
                Ok(Decision {
                    state: normalized,
                    vertex_coords: coords,
                    elem_flags: flags,
                    vertex_logprob: vec![0.0; mesh.n_vertices()],
                    elem_logprob: vec![0.0; mesh.n_elements()],
                    vertex_value: out.vertex_value,
                    elem_value: out.elem_value,
                })
            }
            AgentMode::Sample => {
                let s = self.policy.sample_actions(&out, mesh, rng);
                Ok(Decision {
                    state: normalized,
                    vertex_coords: s.vertex_coords,
                    elem_flags: s.elem_flags,
                    vertex_logprob: s.vertex_logprob,
                    elem_logprob: s.elem_logprob,
                    vertex_value: out.vertex_value,
                    elem_value: out.elem_value,
                })
            }
            AgentMode::SampleRandomRefine(p) => {
                let s = self.policy.sample_actions(&out, mesh, rng);
                let flags: Vec<u8> =
                    (0..mesh.n_elements()).map(|_| (rng.gen::<f64>() < p) as u8).collect();
                let logit = (p / (1.0 - p)).ln();
                let elem_logprob = flags.iter().map(|&f| bernoulli_logpdf(f, logit)).collect();
                Ok(Decision {
                    state: normalized,
                    vertex_coords: s.vertex_coords,
                    elem_flags: flags,
                    vertex_logprob: s.vertex_logprob,
                    elem_logprob,
                    vertex_value: out.vertex_value,
                    elem_value: out.elem_value,
                })
            }
        }
    }
}

/// Loss components of one update, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossStats {
    pub policy_v: f64,
    pub value_v: f64,
    pub policy_e: f64,
    pub value_e: f64,
    pub entropy_v: f64,
    pub entropy_e: f64,
    pub total: f64,
}

impl LossStats {
    fn add(&mut self, other: &LossStats) {
        self.policy_v += other.policy_v;
        self.value_v += other.value_v;
        self.policy_e += other.policy_e;
        self.value_e += other.value_e;
        self.entropy_v += other.entropy_v;
        self.entropy_e += other.entropy_e;
        self.total += other.total;
    }
}

/// Builds the composite PPO loss over a minibatch of transitions,
/// accumulates parameter gradients, and returns the loss statistics.
///
/// Each swarm contributes a clipped surrogate policy term averaged over its
/// acting agents, a clipped value regression against the blended returns,
/// and an entropy bonus. Phase I zeroes every element-swarm term.
pub fn ppo_loss(
    batch: &[&Transition],
    policy: &Policy,
    store: &mut ParamStore,
    config: &TrainConfig,
    phase1: bool,
) -> Result<LossStats> {
    // Pooled denominators across the minibatch.
    let mut n_vdof = 0usize; // acting vertex agents (non-corner)
    let mut n_vall = 0usize;
    let mut n_e = 0usize;
    for tr in batch {
        n_vall += tr.vertex_value.len();
        n_vdof += tr
            .mesh
            .boundary_class
            .iter()
            .filter(|c| !matches!(c, BoundaryClass::Corner))
            .count();
        if tr.has_refinement {
            n_e += tr.elem_value.len();
        }
    }
    let n_vdof = n_vdof.max(1) as f64;
    let n_vall = n_vall.max(1) as f64;
    let n_e = n_e.max(1) as f64;

    let threads = config.update_threads.max(1).min(batch.len().max(1));
    let snapshot: &ParamStore = store;
    let worker = |trs: &[&Transition]| -> Result<(Vec<Vec<f64>>, LossStats)> {
        let mut bufs = snapshot.grad_buffers();
        let mut stats = LossStats::default();
        for tr in trs {
            let s = transition_grads(
                tr, policy, snapshot, config, phase1, (n_vdof, n_vall, n_e), &mut bufs,
            )?;
            stats.add(&s);
        }
        Ok((bufs, stats))
    };
    let results: Vec<Result<(Vec<Vec<f64>>, LossStats)>> = if threads <= 1 {
        vec![worker(batch)]
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                batch.chunks(chunk).map(|c| scope.spawn(move || worker(c))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut stats = LossStats::default();
    for r in results {
        let (bufs, s) = r?;
        store.merge_grad_buffers(&bufs);
        stats.add(&s);
    }
    Ok(stats)
}

/// Builds the loss graph for one transition, runs backward, and adds the
/// parameter gradients into `bufs`.
#[allow(clippy::too_many_arguments)]
fn transition_grads(
    tr: &Transition,
    policy: &Policy,
    store: &ParamStore,
    config: &TrainConfig,
    phase1: bool,
    (n_vdof, n_vall, n_e): (f64, f64, f64),
    bufs: &mut [Vec<f64>],
) -> Result<LossStats> {
    let mut stats = LossStats::default();
    {
        let mut tape = Tape::new();
        let fwd = policy.forward_path(&mut tape, store, &tr.state, &tr.mesh, !phase1)?;
        let n_v = tr.mesh.n_vertices();

        // --- Vertex swarm ---
        let new_logp =
            policy.vertex_logprob_graph(&mut tape, fwd.vertex_mean, fwd.vertex_log_std, &tr.mesh, &tr.vertex_actions);
        let old_logp = tape.constant((n_v, 1), tr.vertex_logprob.clone());
        let adv = tape.constant((n_v, 1), tr.vertex_advantage.clone());
        let noncorner: Vec<f64> = tr
            .mesh
            .boundary_class
            .iter()
            .map(|c| if matches!(c, BoundaryClass::Corner) { 0.0 } else { 1.0 })
            .collect();
        let mask = tape.constant((n_v, 1), noncorner);
        let diff = tape.sub(new_logp, old_logp);
        let ratio = tape.exp(diff);
        let surr1 = tape.mul(ratio, adv);
        let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
        let surr2 = tape.mul(clipped, adv);
        let surr = tape.min(surr1, surr2);
        let surr = tape.mul(surr, mask);
        let surr_sum = tape.sum(surr);
        let policy_v = tape.scale(surr_sum, -1.0 / n_vdof);

        let ret = tape.constant((n_v, 1), tr.vertex_return.clone());
        let v_old = tape.constant((n_v, 1), tr.vertex_value.clone());
        let v_err = tape.sub(fwd.vertex_value, ret);
        let v_err2 = tape.mul(v_err, v_err);
        let v_delta = tape.sub(fwd.vertex_value, v_old);
        let v_delta = tape.clamp(v_delta, -config.clip, config.clip);
        let v_clip = tape.add(v_old, v_delta);
        let vc_err = tape.sub(v_clip, ret);
        let vc_err2 = tape.mul(vc_err, vc_err);
        let v_worst = tape.max(v_err2, vc_err2);
        let v_sum = tape.sum(v_worst);
        let value_v = tape.scale(v_sum, config.value_coef_r / n_vall);

        let ent_v = policy.vertex_entropy_graph(&mut tape, fwd.vertex_log_std, &tr.mesh);
        let ent_v_sum = tape.sum(ent_v);
        let entropy_v = tape.scale(ent_v_sum, 1.0 / n_vdof);
        let neg_ent_v = tape.scale(entropy_v, -config.entropy_coef_v);

        let mut loss = tape.add(policy_v, value_v);
        loss = tape.add(loss, neg_ent_v);

        // --- Element swarm (Phase II only) ---
        let mut elem_parts = None;
        if !phase1 && tr.has_refinement {
            let ne = tr.elem_value.len();
            let acts: Vec<f64> = tr.elem_actions.iter().map(|&a| a as f64).collect();
            let acts = tape.constant((ne, 1), acts);
            let new_logp_e = bernoulli_logprob(&mut tape, acts, fwd.elem_logit);
            let old_logp_e = tape.constant((ne, 1), tr.elem_logprob.clone());
            let adv_e = tape.constant((ne, 1), tr.elem_advantage.clone());
            let d = tape.sub(new_logp_e, old_logp_e);
            let ratio_e = tape.exp(d);
            let s1 = tape.mul(ratio_e, adv_e);
            let cl = tape.clamp(ratio_e, 1.0 - config.clip, 1.0 + config.clip);
            let s2 = tape.mul(cl, adv_e);
            let s = tape.min(s1, s2);
            let s_sum = tape.sum(s);
            let policy_e = tape.scale(s_sum, -1.0 / n_e);

            let ret_e = tape.constant((ne, 1), tr.elem_return.clone());
            let v_old_e = tape.constant((ne, 1), tr.elem_value.clone());
            let e_err = tape.sub(fwd.elem_value, ret_e);
            let e_err2 = tape.mul(e_err, e_err);
            let e_delta = tape.sub(fwd.elem_value, v_old_e);
            let e_delta = tape.clamp(e_delta, -config.clip, config.clip);
            let e_clip = tape.add(v_old_e, e_delta);
            let ec_err = tape.sub(e_clip, ret_e);
            let ec_err2 = tape.mul(ec_err, ec_err);
            let e_worst = tape.max(e_err2, ec_err2);
            let e_sum = tape.sum(e_worst);
            let value_e = tape.scale(e_sum, config.value_coef_h / n_e);

            let ent_e = bernoulli_entropy(&mut tape, fwd.elem_logit);
            let ent_e_sum = tape.sum(ent_e);
            let entropy_e = tape.scale(ent_e_sum, 1.0 / n_e);
            let neg_ent_e = tape.scale(entropy_e, -config.entropy_coef_e);

            loss = tape.add(loss, policy_e);
            loss = tape.add(loss, value_e);
            loss = tape.add(loss, neg_ent_e);
            elem_parts = Some((policy_e, value_e, entropy_e));
        }

        if !tape.value(loss).is_finite() {
            return Err(Error::Train("non-finite PPO loss".into()));
        }
        let grads = tape.backward(loss)?;
        tape.collect_param_grads(&grads, bufs);

        stats.policy_v += tape.value(policy_v);
        stats.value_v += tape.value(value_v);
        stats.entropy_v += tape.value(entropy_v);
        if let Some((pe, ve, he)) = elem_parts {
            stats.policy_e += tape.value(pe);
            stats.value_e += tape.value(ve);
            stats.entropy_e += tape.value(he);
        }
        stats.total += tape.value(loss);
    }
    Ok(stats)
}

/// Normalizes advantages to zero mean and unit standard deviation per swarm
/// over the whole buffer. Vertex statistics come from acting (non-corner)
/// agents. Applied exactly once per iteration.
pub fn normalize_advantages(buffer: &mut RolloutBuffer) {
    let mut v_vals = Vec::new();
    let mut e_vals = Vec::new();
    for tr in buffer.episodes.iter().flatten() {
        for (i, c) in tr.mesh.boundary_class.iter().enumerate() {
            if !matches!(c, BoundaryClass::Corner) {
                v_vals.push(tr.vertex_advantage[i]);
            }
        }
        if tr.has_refinement {
            e_vals.extend_from_slice(&tr.elem_advantage);
        }
    }
    let stats = |vals: &[f64]| -> (f64, f64) {
        if vals.is_empty() {
            return (0.0, 1.0);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt().max(1e-8))
    };
    let (mv, sv) = stats(&v_vals);
    let (me, se) = stats(&e_vals);
    for tr in buffer.episodes.iter_mut().flatten() {
        for a in &mut tr.vertex_advantage {
            *a = (*a - mv) / sv;
        }
        for a in &mut tr.elem_advantage {
            *a = (*a - me) / se;
        }
    }
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub phase: usize,
    pub mean_vertex_return: f64,
    pub mean_elem_return: f64,
    pub mean_err_rel: f64,
    pub tangle_rollbacks: usize,
    pub mean_elements: f64,
    pub max_elements: usize,
    pub loss: LossStats,
}

/// A trained model: parameters, normalizer, and the configs needed to
/// rebuild the policy at inference time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy_config: PolicyConfig,
    pub env: EnvConfig,
    pub normalizer: ObsNormalizer,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "policy_config": self.policy_config,
            "env": self.env,
            "normalizer": self.normalizer,
            "params": self.store.to_json(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(Checkpoint {
            policy_config: serde_json::from_value(v["policy_config"].clone())?,
            env: serde_json::from_value(v["env"].clone())?,
            normalizer: serde_json::from_value(v["normalizer"].clone())?,
            store: ParamStore::from_json(&v["params"])?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

/// The training dataset: problem instances with their initial meshes.
pub struct Dataset {
    pub entries: Vec<(ProblemInstance, Mesh)>,
}

/// Shared per-instance reference solutions (the expensive part of episode
/// construction).
pub struct ReferenceCache {
    probes: BTreeMap<usize, crate::fem::RefProbes>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        ReferenceCache { probes: BTreeMap::new() }
    }

    pub fn probes(
        &mut self,
        idx: usize,
        instance: &ProblemInstance,
        mesh: &Mesh,
        ref_depth: usize,
    ) -> Result<crate::fem::RefProbes> {
        if let Some(p) = self.probes.get(&idx) {
            return Ok(p.clone());
        }
        let ref_mesh = crate::mesh::uniform_refine(mesh, ref_depth)?;
        let ref_field = crate::fem::solve(&ref_mesh, instance)?;
        let p = crate::fem::RefProbes::new(&ref_mesh, &ref_field);
        self.probes.insert(idx, p.clone());
        Ok(p)
    }
}

impl Default for ReferenceCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Samples the element penalty log-uniformly from the configured range.
pub fn sample_alpha(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = range;
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Trains a policy on the dataset; returns the final checkpoint and the
/// per-iteration metrics. When `out_dir` is given, periodic checkpoints and
/// a `metrics.csv` log are written there.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<IterationMetrics>)> {
    if dataset.entries.is_empty() {
        return Err(Error::Train("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Feature widths from the first instance.
    let (inst0, mesh0) = &dataset.entries[0];
    let tf = crate::features::task_features(mesh0, inst0)?;
    let d_e = crate::features::ELEM_FEAT_BASE_DIM + tf.first().map(|r| r.len()).unwrap_or(0);
    let policy_config = PolicyConfig::new(crate::features::VERTEX_FEAT_DIM, d_e);
    let policy = Policy::new(policy_config.clone());
    let mut store = policy.init_params(&mut rng);
    let mut normalizer = ObsNormalizer::new(policy_config.d_v, policy_config.d_e);
    let mut cache = ReferenceCache::new();
    let adam = AdamConfig { lr: config.lr, grad_clip_norm: config.grad_clip, ..Default::default() };

    let mut metrics_log = Vec::with_capacity(config.iterations);
    let mut csv: Option<std::fs::File> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(
                f,
                "iteration,phase,mean_vertex_return,mean_elem_return,mean_err_rel,tangle_rollbacks,mean_elements,max_elements,policy_v,value_v,policy_e,value_e,entropy_v,entropy_e,loss"
            )?;
            Some(f)
        }
        None => None,
    };

    for iter in 0..config.iterations {
        let phase1 = iter < config.phase1_iters;
        let mode = if phase1 {
            AgentMode::SampleRandomRefine(config.p_random_refine)
        } else {
            AgentMode::Sample
        };

        // --- Rollout collection ---
        let mut buffer = RolloutBuffer::new();
        while buffer.n_transitions() < config.transitions_per_iter {
            let idx = rng.gen_range(0..dataset.entries.len());
            let (instance, mesh) = &dataset.entries[idx];
            let alpha = sample_alpha(config.alpha_range, &mut rng);
            let probes = cache.probes(idx, instance, mesh, config.env.ref_depth)?;
            let mut episode = Episode::with_reference(
                instance.clone(),
                alpha,
                mesh.clone(),
                probes,
                config.env.clone(),
            )?;
            let mut agent = PolicyAgent {
                policy: &policy,
                store: &store,
                normalizer: &mut normalizer,
                mode,
            };
            let transitions = run_episode(&mut episode, &mut agent, &mut rng, true)?;
            buffer.push_episode(transitions, &config.env);
        }
        normalize_advantages(&mut buffer);

        // Rollout statistics before the update.
        let mut m = IterationMetrics {
            iteration: iter,
            phase: if phase1 { 1 } else { 2 },
            mean_vertex_return: 0.0,
            mean_elem_return: 0.0,
            mean_err_rel: 0.0,
            tangle_rollbacks: 0,
            mean_elements: 0.0,
            max_elements: 0,
            loss: LossStats::default(),
        };
        {
            let mut v_sum = 0.0;
            let mut v_n = 0usize;
            let mut e_sum = 0.0;
            let mut e_n = 0usize;
            let mut err_sum = 0.0;
            let mut elem_sum = 0usize;
            for ep in &buffer.episodes {
                for tr in ep {
                    v_sum += tr.vertex_return.iter().sum::<f64>();
                    v_n += tr.vertex_return.len();
                    e_sum += tr.elem_return.iter().sum::<f64>();
                    e_n += tr.elem_return.len();
                    m.tangle_rollbacks += tr.tangled as usize;
                    m.max_elements = m.max_elements.max(tr.log.elements);
                }
                if let Some(last) = ep.last() {
                    err_sum += last.log.err_rel;
                    elem_sum += last.log.elements;
                }
            }
            m.mean_vertex_return = v_sum / v_n.max(1) as f64;
            m.mean_elem_return = e_sum / e_n.max(1) as f64;
            m.mean_err_rel = err_sum / buffer.episodes.len().max(1) as f64;
            m.mean_elements = elem_sum as f64 / buffer.episodes.len().max(1) as f64;
        }

        // --- Update epochs ---
        let transitions: Vec<&Transition> = buffer.iter_transitions().collect();
        let mut order: Vec<usize> = (0..transitions.len()).collect();
        let mut updates = 0usize;
        for _epoch in 0..config.epochs {
            // Fisher-Yates with the training stream.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(config.minibatch) {
                let batch: Vec<&Transition> = chunk.iter().map(|&i| transitions[i]).collect();
                store.zero_grads();
                let stats = ppo_loss(&batch, &policy, &mut store, config, phase1)?;
                store.adam_step(&adam)?;
                m.loss.policy_v += stats.policy_v;
                m.loss.value_v += stats.value_v;
                m.loss.policy_e += stats.policy_e;
                m.loss.value_e += stats.value_e;
                m.loss.entropy_v += stats.entropy_v;
                m.loss.entropy_e += stats.entropy_e;
                m.loss.total += stats.total;
                updates += 1;
            }
        }
        if updates > 0 {
            let inv = 1.0 / updates as f64;
            m.loss.policy_v *= inv;
            m.loss.value_v *= inv;
            m.loss.policy_e *= inv;
            m.loss.value_e *= inv;
            m.loss.entropy_v *= inv;
            m.loss.entropy_e *= inv;
            m.loss.total *= inv;
        }

        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{},{:.6e},{:.6e},{:.6e},{},{:.2},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                m.iteration,
                m.phase,
                m.mean_vertex_return,
                m.mean_elem_return,
                m.mean_err_rel,
                m.tangle_rollbacks,
                m.mean_elements,
                m.max_elements,
                m.loss.policy_v,
                m.loss.value_v,
                m.loss.policy_e,
                m.loss.value_e,
                m.loss.entropy_v,
                m.loss.entropy_e,
                m.loss.total
            )?;
        }
        metrics_log.push(m);

        if let Some(dir) = out_dir {
            if (iter + 1) % config.checkpoint_every == 0 || iter + 1 == config.iterations {
                let ck = Checkpoint {
                    policy_config: policy_config.clone(),
                    env: config.env.clone(),
                    normalizer: normalizer.clone(),
                    store: store.clone(),
                };
                ck.save(&dir.join(format!("checkpoint_{:04}.json", iter + 1)))?;
            }
        }
    }

    let checkpoint = Checkpoint {
        policy_config,
        env: config.env.clone(),
        normalizer,
        store,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("checkpoint_final.json"))?;
    }
    Ok((checkpoint, metrics_log))
}
