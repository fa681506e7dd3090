//! Dataset generation.
//!
//! Poisson instances live on L-shaped domains with a three-component
//! Gaussian-mixture load; heat instances live on randomized convex polygons
//! with a moving source path. All randomness is drawn from per-instance
//! seeded streams, so regeneration is bit-identical, and train/eval sets are
//! disjoint by seed partition.

use super::ExperimentConfig;
use crate::fem::{GmmComponent, PdeKind, ProblemInstance};
use crate::mesh::{generate_domain, DomainKind, Mesh};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const REJECTION_CAP: usize = 10_000;
/// Seed offset separating the eval stream from the train stream.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// Index of all files in a generated dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pde: PdeKind,
    pub ref_depth: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

fn draw_inside(poly: &crate::mesh::Polygon, range: (f64, f64), rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    for _ in 0..REJECTION_CAP {
        let p = [rng.gen_range(range.0..range.1), rng.gen_range(range.0..range.1)];
        if poly.contains(p) {
            return Ok(p);
        }
    }
    Err(Error::Env("rejection sampling exhausted".into()))
}

/// Draws one problem instance and its coarse mesh from a seeded stream.
pub fn sample_instance(
    pde: PdeKind,
    seed: u64,
    initial_elements: (usize, usize),
) -> Result<(ProblemInstance, Mesh)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(initial_elements.0..=initial_elements.1);
    match pde {
        PdeKind::Poisson => {
            let p0 = [rng.gen_range(0.2..0.95), rng.gen_range(0.2..0.95)];
            let domain = DomainKind::LShape { p0 };
            let poly = domain.polygon();
            let mut gmm = Vec::with_capacity(3);
            // Weights: exp of standard normals plus one, normalized.
            let mut raw = [0.0; 3];
            for r in raw.iter_mut() {
                *r = crate::policy::sample_standard_normal(&mut rng).exp() + 1.0;
            }
            let total: f64 = raw.iter().sum();
            for k in 0..3 {
                let mean = draw_inside(&poly, (0.1, 0.9), &mut rng)?;
                let s1 = rng.gen_range((1e-4f64).ln()..(1e-3f64).ln()).exp();
                let s2 = rng.gen_range((1e-4f64).ln()..(1e-3f64).ln()).exp();
                let ang = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let (c, s) = (ang.cos(), ang.sin());
                // R diag(s1, s2) R^T.
                let cov = [
                    [c * c * s1 + s * s * s2, c * s * (s1 - s2)],
                    [c * s * (s1 - s2), s * s * s1 + c * c * s2],
                ];
                gmm.push(GmmComponent { weight: raw[k] / total, mean, cov });
            }
            let mesh = generate_domain(&domain, target, seed)?;
            let instance = ProblemInstance {
                kind: PdeKind::Poisson,
                domain,
                gmm,
                heat_path: None,
                diffusivity: 1e-3,
            };
            Ok((instance, mesh))
        }
        PdeKind::Heat => {
            let domain = DomainKind::ConvexPolygon { seed };
            let poly = domain.polygon();
            let p0 = draw_inside(&poly, (0.0, 1.0), &mut rng)?;
            let p1 = draw_inside(&poly, (0.0, 1.0), &mut rng)?;
            let mesh = generate_domain(&domain, target, seed)?;
            let instance = ProblemInstance {
                kind: PdeKind::Heat,
                domain,
                gmm: vec![],
                heat_path: Some((p0, p1)),
                diffusivity: 1e-3,
            };
            Ok((instance, mesh))
        }
    }
}

/// Generates the dataset files: per instance a JSON description, the initial
/// mesh, and the reference mesh.
pub fn gen_dataset(config: &ExperimentConfig) -> Result<DatasetManifest> {
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest {
        pde: config.pde,
        ref_depth: config.ref_depth,
        seed: config.seed,
        train: Vec::new(),
        eval: Vec::new(),
    };
    let emit = |stem: String, seed: u64| -> Result<String> {
        let (instance, mesh) = sample_instance(config.pde, seed, config.initial_elements)?;
        std::fs::write(
            dir.join(format!("{stem}.instance.json")),
            serde_json::to_string_pretty(&instance)?,
        )?;
        mesh.save(&dir.join(format!("{stem}.mesh.txt")))?;
        let ref_mesh = crate::mesh::uniform_refine(&mesh, config.ref_depth)?;
        ref_mesh.save(&dir.join(format!("{stem}.ref.txt")))?;
        Ok(stem)
    };
    for k in 0..config.train_count {
        let stem = emit(format!("train_{k:03}"), config.seed.wrapping_add(k as u64))?;
        manifest.train.push(stem);
    }
    for k in 0..config.eval_count {
        let stem = emit(
            format!("eval_{k:03}"),
            config.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(k as u64),
        )?;
        manifest.eval.push(stem);
    }
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads instances and initial meshes named by the manifest.
pub fn load_dataset(
    dir: &Path,
    stems: &[String],
) -> Result<Vec<(ProblemInstance, Mesh)>> {
    stems
        .iter()
        .map(|stem| {
            let text = std::fs::read_to_string(dir.join(format!("{stem}.instance.json")))?;
            let instance: ProblemInstance = serde_json::from_str(&text)?;
            let mesh = Mesh::load(&dir.join(format!("{stem}.mesh.txt")))?;
            Ok((instance, mesh))
        })
        .collect()
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(dir.join("dataset.json"))?;
    Ok(serde_json::from_str(&text)?)
}
