//! The dual-swarm actor-critic network.
//!
//! Two independent backbones (one feeding the element heads, one the vertex
//! heads) embed raw features into a latent space and run four dual
//! hypergraph-convolution layers. The element path ends in Bernoulli logits
//! and element values. The vertex path produces the relocation Gaussian: its
//! mean comes from an attention-weighted graph-diffusion operator applied to
//! the vertex coordinates, its log-std from a separate head, and vertex
//! values from a third.
//!
//! The diffusion operator is what makes relocation safe: each Euler step
//! moves a vertex into the convex hull of itself and its attended neighbors,
//! boundary rows are masked so edge vertices attend only along their own
//! boundary line, and corners attend only to themselves. Orientation of
//! every element is preserved for small step sizes.

use crate::features::HypergraphState;
use crate::mesh::{BoundaryClass, Mesh, BOUNDARY_TOL};
use crate::tensor::{Id, ParamStore, Tape};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Latent width D.
    pub latent: usize,
    /// Number of dual hypergraph-convolution layers.
    pub layers: usize,
    /// Vertex feature width.
    pub d_v: usize,
    /// Element feature width (base + task columns).
    pub d_e: usize,
    /// Attention stages in the diffusion head, each with its own scorer.
    pub diff_stages: usize,
    /// Euler steps per attention stage (shared attention within a stage).
    pub diff_steps: usize,
    /// Euler step size; must stay below 0.5 for the validity guarantee.
    pub dtau: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl PolicyConfig {
    pub fn new(d_v: usize, d_e: usize) -> Self {
        PolicyConfig {
            latent: 64,
            layers: 4,
            d_v,
            d_e,
            diff_stages: 4,
            diff_steps: 2,
            dtau: 0.1,
            log_std_min: -5.0,
            log_std_max: 1.0,
        }
    }
}

/// The policy. Parameters live in a [`ParamStore`] created by
/// [`Policy::init_params`].
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
}

/// Tape handles for everything the loss needs.
pub struct PolicyTensors {
    pub vertex_mean: Id,
    pub vertex_log_std: Id,
    pub elem_logit: Id,
    pub vertex_value: Id,
    pub elem_value: Id,
}

/// Plain-array network outputs for rollouts and inference.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub vertex_mean: Vec<[f64; 2]>,
    /// Per-vertex log-stds; column 0 is the tangential component for edge
    /// vertices, both columns apply to interior vertices, corners use none.
    pub vertex_log_std: Vec<[f64; 2]>,
    pub elem_logit: Vec<f64>,
    pub vertex_value: Vec<f64>,
    pub elem_value: Vec<f64>,
}

/// Sampled joint action plus per-agent log-probabilities.
#[derive(Debug, Clone)]
pub struct SampledActions {
    pub vertex_coords: Vec<[f64; 2]>,
    pub elem_flags: Vec<u8>,
    pub vertex_logprob: Vec<f64>,
    pub elem_logprob: Vec<f64>,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Self {
        Policy { config }
    }

    /// Creates and initializes all parameters (Xavier-uniform weights, zero
    /// biases; the log-std head's final bias starts at -3 so early sampling
    /// stays near the diffusion mean).
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        let c = &self.config;
        let d = c.latent;
        let xavier = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            store.insert(name, (rows, cols), data);
        };
        for path in ["v", "e"] {
            xavier(&mut store, &format!("{path}.embed_v"), c.d_v, d, rng);
            xavier(&mut store, &format!("{path}.embed_e"), c.d_e, d, rng);
            for l in 0..c.layers {
                xavier(&mut store, &format!("{path}.hconv{l}.w_ve"), d, d, rng);
                xavier(&mut store, &format!("{path}.hconv{l}.w_pool"), 2 * d, d, rng);
                xavier(&mut store, &format!("{path}.hconv{l}.w_ev"), d, d, rng);
            }
        }
        let mlp = |store: &mut ParamStore, prefix: &str, out: usize, final_bias: f64, rng: &mut dyn rand::RngCore| {
            let dims = [d, d, d, out];
            for k in 0..3 {
                xavier(store, &format!("{prefix}.{k}.w"), dims[k], dims[k + 1], rng);
                let bias = if k == 2 { final_bias } else { 0.0 };
                store.insert(&format!("{prefix}.{k}.b"), (1, dims[k + 1]), vec![bias; dims[k + 1]]);
            }
        };
        // The element head starts at sigmoid(-1.1) ~ 0.25, the same refine
        // rate the Phase I curriculum uses, so unfreezing does not jump the
        // mesh growth rate.
        mlp(&mut store, "e.pol", 1, -1.1, rng);
        mlp(&mut store, "e.val", 1, 0.0, rng);
        mlp(&mut store, "v.logstd", 2, -4.0, rng);
        mlp(&mut store, "v.val", 1, 0.0, rng);
        for s in 0..c.diff_stages {
            xavier(&mut store, &format!("v.attn{s}.w"), 2 * d, 1, rng);
            store.insert(&format!("v.attn{s}.b"), (1, 1), vec![0.0]);
        }
        store
    }

    /// Differentiable forward pass on a caller-owned tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &HypergraphState,
        mesh: &Mesh,
    ) -> Result<PolicyTensors> {
        self.forward_path(tape, store, state, mesh, true)
    }

    /// Forward pass that can skip the element path (Phase I trains only the
    /// vertex swarm; element logits and values are then constant zeros).
    pub fn forward_path(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &HypergraphState,
        mesh: &Mesh,
        with_elements: bool,
    ) -> Result<PolicyTensors> {
        let c = &self.config;
        if state.vertex_feats.cols != c.d_v || state.elem_feats.cols != c.d_e {
            return Err(Error::Policy(format!(
                "feature widths ({}, {}) do not match the policy ({}, {})",
                state.vertex_feats.cols, state.elem_feats.cols, c.d_v, c.d_e
            )));
        }
        let n_v = state.n_vertices();
        let n_e = state.n_elements();

        // Incidence pair lists shared by both backbones.
        let mut corner_ids = Vec::with_capacity(3 * n_e);
        let mut corner_segs = Vec::with_capacity(3 * n_e);
        for (e, t) in state.tris.iter().enumerate() {
            for &v in t {
                corner_ids.push(v);
                corner_segs.push(e);
            }
        }
        let corner_ids = Rc::new(corner_ids);
        let corner_segs = Rc::new(corner_segs);
        let mut elem_of_vertex_ids = Vec::new();
        let mut vertex_segs = Vec::new();
        for (v, es) in state.vert_elems.iter().enumerate() {
            for &e in es {
                elem_of_vertex_ids.push(e);
                vertex_segs.push(v);
            }
        }
        let elem_of_vertex_ids = Rc::new(elem_of_vertex_ids);
        let vertex_segs = Rc::new(vertex_segs);

        let vfeat = tape.constant(
            (n_v, c.d_v),
            state.vertex_feats.data.clone(),
        );
        let efeat = tape.constant((n_e, c.d_e), state.elem_feats.data.clone());

        let backbone = |tape: &mut Tape, path: &str| -> (Id, Id) {
            let w_ev0 = tape.param(store, &format!("{path}.embed_v"));
            let w_ee0 = tape.param(store, &format!("{path}.embed_e"));
            let mut x = tape.matmul(vfeat, w_ev0);
            let mut e = tape.matmul(efeat, w_ee0);
            for l in 0..c.layers {
                // Vertex-to-element: mean over the three corners, project,
                // rectify.
                let gathered = tape.gather_rows(x, corner_ids.clone());
                let agg = tape.segment_mean(gathered, corner_segs.clone(), n_e);
                let w_ve = tape.param(store, &format!("{path}.hconv{l}.w_ve"));
                let z_e = tape.matmul(agg, w_ve);
                let z_e = tape.relu(z_e);
                // Fuse with the element's own embedding.
                let cat = tape.concat_cols(z_e, e);
                let w_pool = tape.param(store, &format!("{path}.hconv{l}.w_pool"));
                let e_new = tape.matmul(cat, w_pool);
                // Element-to-vertex: mean over incident elements.
                let gathered_e = tape.gather_rows(e_new, elem_of_vertex_ids.clone());
                let vagg = tape.segment_mean(gathered_e, vertex_segs.clone(), n_v);
                let w_ev = tape.param(store, &format!("{path}.hconv{l}.w_ev"));
                let x_new = tape.matmul(vagg, w_ev);
                x = tape.relu(x_new);
                e = e_new;
            }
            (x, e)
        };

        let mlp3 = |tape: &mut Tape, input: Id, prefix: &str| -> Id {
            let mut h = input;
            for k in 0..3 {
                let w = tape.param(store, &format!("{prefix}.{k}.w"));
                let b = tape.param(store, &format!("{prefix}.{k}.b"));
                h = tape.matmul(h, w);
                h = tape.add_bias(h, b);
                if k < 2 {
                    h = tape.tanh(h);
                }
            }
            h
        };

        // Element path.
        let (elem_logit, elem_value) = if with_elements {
            let (_, e_latent) = backbone(tape, "e");
            (mlp3(tape, e_latent, "e.pol"), mlp3(tape, e_latent, "e.val"))
        } else {
            (tape.constant((n_e, 1), vec![0.0; n_e]), tape.constant((n_e, 1), vec![0.0; n_e]))
        };

        // Vertex path.
        let (x_latent, _) = backbone(tape, "v");
        let raw_log_std = mlp3(tape, x_latent, "v.logstd");
        let vertex_log_std = tape.clamp(raw_log_std, c.log_std_min, c.log_std_max);
        let vertex_value = mlp3(tape, x_latent, "v.val");
        let vertex_mean = self.diffformer(tape, store, x_latent, state, mesh)?;

        for id in [vertex_mean, vertex_log_std, elem_logit, vertex_value, elem_value] {
            if tape.data(id).iter().any(|v| !v.is_finite()) {
                return Err(Error::Policy("non-finite activation in forward pass".into()));
            }
        }
        Ok(PolicyTensors { vertex_mean, vertex_log_std, elem_logit, vertex_value, elem_value })
    }

    /// The diffusion relocation head: per attention stage, score all allowed
    /// (vertex, neighbor) pairs from the static embeddings, normalize
    /// per row, then apply `diff_steps` Euler steps
    /// `Z <- Z + dtau (A Z - Z)` to the coordinates.
    fn diffformer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embeddings: Id,
        state: &HypergraphState,
        mesh: &Mesh,
    ) -> Result<Id> {
        let c = &self.config;
        let n_v = state.n_vertices();
        let (src, dst) = attention_pairs(state, mesh);
        let src = Rc::new(src);
        let dst = Rc::new(dst);

        let hi = tape.gather_rows(embeddings, src.clone());
        let hj = tape.gather_rows(embeddings, dst.clone());
        let pair = tape.concat_cols(hi, hj);

        let coords: Vec<f64> = mesh.coords.iter().flat_map(|p| [p[0], p[1]]).collect();
        let mut z = tape.constant((n_v, 2), coords);
        for s in 0..c.diff_stages {
            let w = tape.param(store, &format!("v.attn{s}.w"));
            let b = tape.param(store, &format!("v.attn{s}.b"));
            let score = tape.matmul(pair, w);
            let score = tape.add_bias(score, b);
            let attn = tape.segment_softmax(score, src.clone(), n_v);
            for _ in 0..c.diff_steps {
                let zj = tape.gather_rows(z, dst.clone());
                let weighted = tape.scale_rows(attn, zj);
                let az = tape.segment_sum(weighted, src.clone(), n_v);
                let drift = tape.sub(az, z);
                let step = tape.scale(drift, c.dtau);
                z = tape.add(z, step);
            }
        }
        Ok(z)
    }

    /// Convenience forward that extracts plain arrays.
    pub fn forward_eval(
        &self,
        store: &ParamStore,
        state: &HypergraphState,
        mesh: &Mesh,
    ) -> Result<PolicyOutput> {
        self.forward_eval_path(store, state, mesh, true)
    }

    /// Array-extracting forward with an optional element path.
    pub fn forward_eval_path(
        &self,
        store: &ParamStore,
        state: &HypergraphState,
        mesh: &Mesh,
        with_elements: bool,
    ) -> Result<PolicyOutput> {
        let mut tape = Tape::new();
        let t = self.forward_path(&mut tape, store, state, mesh, with_elements)?;
        Ok(PolicyOutput {
            vertex_mean: tape
                .data(t.vertex_mean)
                .chunks(2)
                .map(|c| [c[0], c[1]])
                .collect(),
            vertex_log_std: tape
                .data(t.vertex_log_std)
                .chunks(2)
                .map(|c| [c[0], c[1]])
                .collect(),
            elem_logit: tape.data(t.elem_logit).to_vec(),
            vertex_value: tape.data(t.vertex_value).to_vec(),
            elem_value: tape.data(t.elem_value).to_vec(),
        })
    }

    /// Samples the joint action. Interior vertices draw new absolute
    /// coordinates from the 2D Gaussian; edge vertices draw a scalar
    /// tangential offset and reconstruct `z = mean + t * offset`; corners are
    /// deterministic. Log-probabilities are computed in the reduced space.
    pub fn sample_actions(
        &self,
        output: &PolicyOutput,
        mesh: &Mesh,
        rng: &mut impl Rng,
    ) -> SampledActions {
        let n_v = mesh.n_vertices();
        let mut coords = Vec::with_capacity(n_v);
        let mut vertex_logprob = Vec::with_capacity(n_v);
        for v in 0..n_v {
            let mean = output.vertex_mean[v];
            let ls = output.vertex_log_std[v];
            match mesh.boundary_class[v] {
                BoundaryClass::Interior => {
                    let mut z = [0.0; 2];
                    let mut lp = 0.0;
                    for d in 0..2 {
                        let sigma = ls[d].exp();
                        let eps: f64 = sample_standard_normal(rng);
                        z[d] = mean[d] + sigma * eps;
                        lp += normal_logpdf(z[d], mean[d], ls[d]);
                    }
                    coords.push(z);
                    vertex_logprob.push(lp);
                }
                BoundaryClass::Edge(comp) => {
                    let t = mesh.components[comp].tangent;
                    let sigma = ls[0].exp();
                    let offset = sigma * sample_standard_normal(rng);
                    coords.push([mean[0] + offset * t[0], mean[1] + offset * t[1]]);
                    vertex_logprob.push(normal_logpdf(offset, 0.0, ls[0]));
                }
                BoundaryClass::Corner => {
                    coords.push(mesh.coords[v]);
                    vertex_logprob.push(0.0);
                }
            }
        }
        let mut flags = Vec::with_capacity(output.elem_logit.len());
        let mut elem_logprob = Vec::with_capacity(output.elem_logit.len());
        for &logit in &output.elem_logit {
            let p = stable_sigmoid(logit);
            let flag = if rng.gen::<f64>() < p { 1u8 } else { 0u8 };
            flags.push(flag);
            elem_logprob.push(bernoulli_logpdf(flag, logit));
        }
        SampledActions { vertex_coords: coords, elem_flags: flags, vertex_logprob, elem_logprob }
    }

    /// Deterministic action: the distribution mode. Coordinates are the
    /// diffusion means; an element is flagged iff `sigmoid(logit) > 0.5`.
    pub fn inference_act(&self, output: &PolicyOutput, mesh: &Mesh) -> (Vec<[f64; 2]>, Vec<u8>) {
        let coords = (0..mesh.n_vertices())
            .map(|v| match mesh.boundary_class[v] {
                BoundaryClass::Corner => mesh.coords[v],
                _ => output.vertex_mean[v],
            })
            .collect();
        let flags = output
            .elem_logit
            .iter()
            .map(|&l| if stable_sigmoid(l) > 0.5 { 1u8 } else { 0u8 })
            .collect();
        (coords, flags)
    }

    /// Recomputes per-agent vertex log-probabilities of stored absolute
    /// actions, differentiably. The reduced-space treatment matches
    /// [`Policy::sample_actions`]: 2 degrees of freedom for interior
    /// vertices, 1 tangential for edge vertices, none for corners.
    pub fn vertex_logprob_graph(
        &self,
        tape: &mut Tape,
        mean: Id,
        log_std: Id,
        mesh: &Mesh,
        actions: &[[f64; 2]],
    ) -> Id {
        let n_v = mesh.n_vertices();
        let z: Vec<f64> = actions.iter().flat_map(|p| [p[0], p[1]]).collect();
        let z = tape.constant((n_v, 2), z);
        let diff = tape.sub(z, mean);

        let mut mask_int = vec![0.0; 2 * n_v];
        let mut mask_edge = vec![0.0; n_v];
        let mut tangents = vec![0.0; 2 * n_v];
        for v in 0..n_v {
            match mesh.boundary_class[v] {
                BoundaryClass::Interior => {
                    mask_int[2 * v] = 1.0;
                    mask_int[2 * v + 1] = 1.0;
                }
                BoundaryClass::Edge(cidx) => {
                    mask_edge[v] = 1.0;
                    let t = mesh.components[cidx].tangent;
                    tangents[2 * v] = t[0];
                    tangents[2 * v + 1] = t[1];
                }
                BoundaryClass::Corner => {}
            }
        }
        let mask_int = tape.constant((n_v, 2), mask_int);
        let mask_edge = tape.constant((n_v, 1), mask_edge);
        let tangents = tape.constant((n_v, 2), tangents);

        // Per-coordinate interior terms.
        let neg_ls = tape.scale(log_std, -1.0);
        let inv_std = tape.exp(neg_ls);
        let zs = tape.mul(diff, inv_std);
        let zs2 = tape.mul(zs, zs);
        let half = tape.scale(zs2, -0.5);
        let m_ls = tape.scale(log_std, -1.0);
        let terms = tape.add(half, m_ls);
        let terms = tape.add_const(terms, -0.5 * crate::tensor::LOG_2PI);
        let masked = tape.mul(mask_int, terms);
        let int_part = tape.row_sum(masked);

        // Tangential edge term against log-std column 0.
        let td = tape.mul(tangents, diff);
        let tang = tape.row_sum(td);
        let ls0 = tape.slice_cols(log_std, 0, 1);
        let neg_ls0 = tape.scale(ls0, -1.0);
        let inv0 = tape.exp(neg_ls0);
        let zt = tape.mul(tang, inv0);
        let zt2 = tape.mul(zt, zt);
        let ht = tape.scale(zt2, -0.5);
        let m_ls0 = tape.scale(ls0, -1.0);
        let term_t = tape.add(ht, m_ls0);
        let term_t = tape.add_const(term_t, -0.5 * crate::tensor::LOG_2PI);
        let edge_part = tape.mul(mask_edge, term_t);

        tape.add(int_part, edge_part)
    }

    /// Per-agent Gaussian entropy in the reduced space (zero for corners).
    pub fn vertex_entropy_graph(&self, tape: &mut Tape, log_std: Id, mesh: &Mesh) -> Id {
        let n_v = mesh.n_vertices();
        let mut mask = vec![0.0; 2 * n_v];
        for v in 0..n_v {
            match mesh.boundary_class[v] {
                BoundaryClass::Interior => {
                    mask[2 * v] = 1.0;
                    mask[2 * v + 1] = 1.0;
                }
                BoundaryClass::Edge(_) => mask[2 * v] = 1.0,
                BoundaryClass::Corner => {}
            }
        }
        let mask = tape.constant((n_v, 2), mask);
        let per_coord = tape.add_const(log_std, 0.5 * (crate::tensor::LOG_2PI + 1.0));
        let masked = tape.mul(mask, per_coord);
        tape.row_sum(masked)
    }
}

/// Allowed attention pairs `(i, j)` including self loops: interior vertices
/// attend to all mesh neighbors, edge vertices only to boundary vertices on
/// the same component line, corners only to themselves.
pub fn attention_pairs(state: &HypergraphState, mesh: &Mesh) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (i, nbrs) in state.adjacency.iter().enumerate() {
        src.push(i);
        dst.push(i);
        match mesh.boundary_class[i] {
            BoundaryClass::Interior => {
                for &j in nbrs {
                    src.push(i);
                    dst.push(j);
                }
            }
            BoundaryClass::Edge(cidx) => {
                let comp = &mesh.components[cidx];
                for &j in nbrs {
                    if mesh.boundary_class[j].is_boundary()
                        && comp.contains(mesh.coords[j], BOUNDARY_TOL)
                    {
                        src.push(i);
                        dst.push(j);
                    }
                }
            }
            BoundaryClass::Corner => {}
        }
    }
    (src, dst)
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normal_logpdf(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * crate::tensor::LOG_2PI
}

pub fn bernoulli_logpdf(flag: u8, logit: f64) -> f64 {
    // log p = a l - softplus(l), stable form.
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    flag as f64 * logit - softplus
}

/// Box-Muller draw; two uniforms per call keeps the stream deterministic.
pub fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
