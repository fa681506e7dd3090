//! Classical adaptation baselines: uniform refinement, the reference-mesh
//! error oracle, and Zienkiewicz-Zhu recovery estimators.
//!
//! All heuristics share the ratio-threshold marking rule: an element is
//! refined when its indicator reaches a fraction `theta` of the current
//! maximum. The oracle reads the true pointwise error against the reference
//! solution; ZZ estimates it from the mismatch between the raw elementwise
//! gradient and a smoothed per-vertex recovery, after one (ZZ1) or two (ZZ2)
//! initial uniform refinement steps that give the recovery enough resolution
//! to see the solution at all.

use crate::features::gradient_per_element;
use crate::fem::{indicators, solve, Field, RefProbes};
use crate::mesh::{rgb_refine, uniform_refine, Mesh};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which heuristic to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Uniform,
    Oracle,
    /// ZZ with the given number of initial uniform refinement steps.
    Zz { initial_uniform_steps: usize },
}

/// A heuristic configuration: kind, marking threshold, and the number of
/// adaptation steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub kind: HeuristicKind,
    /// Ratio threshold in [0, 1]; ignored by uniform refinement.
    pub theta: f64,
    pub steps: usize,
}

/// Marks every element whose indicator reaches `theta` times the maximum.
/// All-zero indicators produce no marks; at `theta = 1` exactly the argmax
/// elements (ties included) are marked.
pub fn mark_by_ratio(indicators: &[f64], theta: f64) -> Vec<u8> {
    let max = indicators.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; indicators.len()];
    }
    indicators.iter().map(|&v| (v >= theta * max) as u8).collect()
}

/// Oracle marking: the per-element max pointwise error against the
/// reference, thresholded by ratio.
pub fn oracle_mark(
    mesh: &Mesh,
    field: &Field,
    probes: &RefProbes,
    theta: f64,
) -> Result<Vec<u8>> {
    let ind = indicators(mesh, field, probes)?;
    Ok(mark_by_ratio(&ind.eta_inf, theta))
}

/// Zienkiewicz-Zhu superconvergent-patch-recovery estimator.
///
/// Per vertex, an affine model of each gradient component is fitted by
/// area-weighted least squares over the incident elements (evaluated at
/// their centroids) and read off at the vertex; patches with fewer than
/// three elements, or with a degenerate fit, fall back to the area-weighted
/// average. The element estimate combines the recovered-minus-raw gradient
/// mismatch at its three corners:
/// `eta_K = sqrt(|K| * mean_v |G*(v) - grad u|^2)`.
pub fn zz_estimate(mesh: &Mesh, field: &Field) -> Result<Vec<f64>> {
    let grads = gradient_per_element(mesh, field)?;
    let vert_elems = mesh.vertex_elements();
    let n_v = mesh.n_vertices();
    let mut recovered = vec![[0.0f64; 2]; n_v];
    for v in 0..n_v {
        let patch = &vert_elems[v];
        if patch.is_empty() {
            continue;
        }
        let weighted_average = |patch: &[usize]| -> [f64; 2] {
            let mut num = [0.0; 2];
            let mut den = 0.0;
            for &e in patch {
                let a = mesh.area(e);
                num[0] += a * grads[e][0];
                num[1] += a * grads[e][1];
                den += a;
            }
            [num[0] / den, num[1] / den]
        };
        if patch.len() < 3 {
            recovered[v] = weighted_average(patch);
            continue;
        }
        // Area-weighted affine fit g(x) ~ a + b (x - x_v) + c (y - y_v),
        // one normal system shared by both gradient components.
        let pv = mesh.coords[v];
        let mut m = [[0.0f64; 3]; 3];
        let mut rhs = [[0.0f64; 2]; 3];
        for &e in patch {
            let w = mesh.area(e);
            let c = mesh.centroid(e);
            let basis = [1.0, c[0] - pv[0], c[1] - pv[1]];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += w * basis[i] * basis[j];
                }
                rhs[i][0] += w * basis[i] * grads[e][0];
                rhs[i][1] += w * basis[i] * grads[e][1];
            }
        }
        match solve3(&m, &rhs) {
            Some(sol) => recovered[v] = [sol[0][0], sol[0][1]],
            None => recovered[v] = weighted_average(patch),
        }
    }
    let mut eta = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let g = grads[e];
        let mut acc = 0.0;
        for &v in &mesh.tris[e] {
            let d = [recovered[v][0] - g[0], recovered[v][1] - g[1]];
            acc += d[0] * d[0] + d[1] * d[1];
        }
        eta.push((mesh.area(e) * acc / 3.0).sqrt());
    }
    Ok(eta)
}

/// Gaussian elimination on a 3x3 system with two right-hand sides; `None`
/// when the matrix is numerically singular.
fn solve3(m: &[[f64; 3]; 3], rhs: &[[f64; 2]; 3]) -> Option<[[f64; 2]; 3]> {
    let mut a = *m;
    let mut b = *rhs;
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() < 1e-14 * (1.0 + a.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max)) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in 0..3 {
                    a[row][k] -= f * a[col][k];
                }
                for k in 0..2 {
                    b[row][k] -= f * b[col][k];
                }
            }
        }
    }
    let mut out = [[0.0; 2]; 3];
    for i in 0..3 {
        out[i][0] = b[i][0] / a[i][i];
        out[i][1] = b[i][1] / a[i][i];
    }
    Some(out)
}

/// One entry of a heuristic trajectory.
#[derive(Debug, Clone)]
pub struct HeuristicStep {
    pub mesh: Mesh,
    pub field: Field,
    pub err_rel: f64,
}

/// Runs a marking heuristic for `config.steps` adaptation steps and returns
/// the mesh trajectory (initial mesh first). ZZ variants apply their initial
/// uniform refinements before any marking; uniform refinement ignores
/// `theta`.
pub fn run_heuristic(
    config: &HeuristicConfig,
    instance: &crate::fem::ProblemInstance,
    initial_mesh: &Mesh,
    probes: &RefProbes,
) -> Result<Vec<HeuristicStep>> {
    let field0 = solve(initial_mesh, instance)?;
    let ind0 = indicators(initial_mesh, &field0, probes)?;
    let initial_error_sq = ind0.global_error_sq();
    if !(initial_error_sq > 0.0) {
        return Err(Error::Env("degenerate normalization: initial error is zero".into()));
    }
    let mut trajectory = vec![HeuristicStep {
        mesh: initial_mesh.clone(),
        field: field0,
        err_rel: 1.0,
    }];
    let mut mesh = initial_mesh.clone();
    if let HeuristicKind::Zz { initial_uniform_steps } = config.kind {
        for _ in 0..initial_uniform_steps {
            mesh = uniform_refine(&mesh, 1)?;
            let field = solve(&mesh, instance)?;
            let err = indicators(&mesh, &field, probes)?.global_error_sq() / initial_error_sq;
            trajectory.push(HeuristicStep { mesh: mesh.clone(), field, err_rel: err });
        }
    }
    for _ in 0..config.steps {
        let field = solve(&mesh, instance)?;
        let flags = match config.kind {
            HeuristicKind::Uniform => vec![1u8; mesh.n_elements()],
            HeuristicKind::Oracle => oracle_mark(&mesh, &field, probes, config.theta)?,
            HeuristicKind::Zz { .. } => mark_by_ratio(&zz_estimate(&mesh, &field)?, config.theta),
        };
        mesh = rgb_refine(&mesh, &flags)?.0;
        let field = solve(&mesh, instance)?;
        let err = indicators(&mesh, &field, probes)?.global_error_sq() / initial_error_sq;
        trajectory.push(HeuristicStep { mesh: mesh.clone(), field, err_rel: err });
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{GmmComponent, PdeKind, ProblemInstance};
    use crate::mesh::{generate_domain, DomainKind};
    use approx::assert_relative_eq;

    fn poisson() -> ProblemInstance {
        ProblemInstance {
            kind: PdeKind::Poisson,
            domain: DomainKind::UnitSquare,
            gmm: vec![GmmComponent {
                weight: 1.0,
                mean: [0.3, 0.7],
                cov: [[0.003, 0.0], [0.0, 0.005]],
            }],
            heat_path: None,
            diffusivity: 1e-3,
        }
    }

    #[test]
    fn ratio_marking_rules() {
        let ind = [0.1, 0.5, 0.5, 0.2, 0.0];
        // theta = 0 marks everything (every value >= 0).
        assert_eq!(mark_by_ratio(&ind, 0.0), vec![1, 1, 1, 1, 1]);
        // theta = 1 marks exactly the maximizers, ties included.
        assert_eq!(mark_by_ratio(&ind, 1.0), vec![0, 1, 1, 0, 0]);
        // All-zero indicators: no marks.
        assert_eq!(mark_by_ratio(&[0.0, 0.0], 0.5), vec![0, 0]);
        // Matches an explicit comparison loop on random data.
        let mut state = 3u64;
        let mut rnd = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let vals: Vec<f64> = (0..30).map(|_| rnd()).collect();
            let theta = rnd();
            let got = mark_by_ratio(&vals, theta);
            let max = vals.iter().cloned().fold(f64::MIN, f64::max);
            for (k, &v) in vals.iter().enumerate() {
                assert_eq!(got[k] == 1, v >= theta * max, "k = {k}");
            }
        }
        // Positive rescaling leaves the marks unchanged.
        let scaled: Vec<f64> = ind.iter().map(|v| v * 37.5).collect();
        assert_eq!(mark_by_ratio(&ind, 0.6), mark_by_ratio(&scaled, 0.6));
    }

    #[test]
    fn zz_vanishes_on_linear_fields() {
        let mesh = generate_domain(&DomainKind::LShape { p0: [0.6, 0.5] }, 30, 2).unwrap();
        let mesh = uniform_refine(&mesh, 1).unwrap();
        let field = Field {
            values: mesh.coords.iter().map(|p| 4.0 * p[0] - 1.5 * p[1] + 2.0).collect(),
        };
        let eta = zz_estimate(&mesh, &field).unwrap();
        for (e, v) in eta.iter().enumerate() {
            assert!(v.abs() < 1e-10, "element {e}: eta = {v}");
        }
    }

    #[test]
    fn zz_scales_linearly_with_the_field() {
        let mesh = {
            let m = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
            uniform_refine(&m, 3).unwrap()
        };
        let field = Field {
            values: mesh.coords.iter().map(|p| (p[0] * 2.1).sin() + p[1] * p[1]).collect(),
        };
        let eta = zz_estimate(&mesh, &field).unwrap();
        let scaled = Field { values: field.values.iter().map(|v| -3.0 * v).collect() };
        let eta_s = zz_estimate(&mesh, &scaled).unwrap();
        for (a, b) in eta.iter().zip(&eta_s) {
            assert_relative_eq!(*b, 3.0 * a, max_relative = 1e-10, epsilon = 1e-13);
        }
    }

    #[test]
    fn zz_quadratic_matches_dense_patch_oracle() {
        // u = x^2 on a structured mesh: recovery is a least-squares fit of
        // the piecewise-constant gradient (2x on each element midpoint, 0).
        // Check interior estimates against an independently written dense
        // patch fit.
        let mesh = {
            let m = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
            uniform_refine(&m, 3).unwrap()
        };
        let field = Field { values: mesh.coords.iter().map(|p| p[0] * p[0]).collect() };
        let eta = zz_estimate(&mesh, &field).unwrap();
        let grads = gradient_per_element(&mesh, &field).unwrap();
        let vert_elems = mesh.vertex_elements();
        // Oracle: explicit weighted normal equations per vertex, solved by
        // Cramer's rule.
        let mut recovered = vec![[0.0f64; 2]; mesh.n_vertices()];
        for v in 0..mesh.n_vertices() {
            let patch = &vert_elems[v];
            if patch.len() < 3 {
                let mut num = [0.0; 2];
                let mut den = 0.0;
                for &e in patch {
                    let a = mesh.area(e);
                    num[0] += a * grads[e][0];
                    num[1] += a * grads[e][1];
                    den += a;
                }
                recovered[v] = [num[0] / den, num[1] / den];
                continue;
            }
            let pv = mesh.coords[v];
            let mut m = [[0.0f64; 3]; 3];
            let mut r0 = [0.0f64; 3];
            let mut r1 = [0.0f64; 3];
            for &e in patch {
                let w = mesh.area(e);
                let c = mesh.centroid(e);
                let b = [1.0, c[0] - pv[0], c[1] - pv[1]];
                for i in 0..3 {
                    for j in 0..3 {
                        m[i][j] += w * b[i] * b[j];
                    }
                    r0[i] += w * b[i] * grads[e][0];
                    r1[i] += w * b[i] * grads[e][1];
                }
            }
            let det3 = |m: &[[f64; 3]; 3]| {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            };
            let d = det3(&m);
            let col_replaced = |m: &[[f64; 3]; 3], col: usize, r: &[f64; 3]| {
                let mut c = *m;
                for i in 0..3 {
                    c[i][col] = r[i];
                }
                c
            };
            recovered[v] = [
                det3(&col_replaced(&m, 0, &r0)) / d,
                det3(&col_replaced(&m, 0, &r1)) / d,
            ];
        }
        for e in 0..mesh.n_elements() {
            let g = grads[e];
            let mut acc = 0.0;
            for &v in &mesh.tris[e] {
                let d = [recovered[v][0] - g[0], recovered[v][1] - g[1]];
                acc += d[0] * d[0] + d[1] * d[1];
            }
            let want = (mesh.area(e) * acc / 3.0).sqrt();
            assert_relative_eq!(eta[e], want, max_relative = 1e-9, epsilon = 1e-13);
        }
    }

    #[test]
    fn uniform_trajectory_counts() {
        let mesh = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
        let ref_mesh = uniform_refine(&mesh, 4).unwrap();
        let inst = poisson();
        let ref_field = solve(&ref_mesh, &inst).unwrap();
        let probes = RefProbes::new(&ref_mesh, &ref_field);
        let cfg = HeuristicConfig { kind: HeuristicKind::Uniform, theta: 0.0, steps: 2 };
        let traj = run_heuristic(&cfg, &inst, &mesh, &probes).unwrap();
        assert_eq!(traj.len(), 3);
        assert_eq!(traj[0].mesh.n_elements(), 2);
        assert_eq!(traj[1].mesh.n_elements(), 8);
        assert_eq!(traj[2].mesh.n_elements(), 32);
        assert_relative_eq!(traj[0].err_rel, 1.0);
        assert!(traj[2].err_rel < traj[0].err_rel);
    }

    #[test]
    fn zz1_initial_refinement_happens_before_marking() {
        let mesh = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
        let ref_mesh = uniform_refine(&mesh, 4).unwrap();
        let inst = poisson();
        let ref_field = solve(&ref_mesh, &inst).unwrap();
        let probes = RefProbes::new(&ref_mesh, &ref_field);
        let cfg = HeuristicConfig {
            kind: HeuristicKind::Zz { initial_uniform_steps: 1 },
            theta: 0.4,
            steps: 1,
        };
        let traj = run_heuristic(&cfg, &inst, &mesh, &probes).unwrap();
        // Initial mesh, post-uniform mesh, one marking step.
        assert_eq!(traj.len(), 3);
        assert_eq!(traj[1].mesh.n_elements(), 8);
        assert!(traj[2].mesh.n_elements() > 8);
    }

    #[test]
    fn oracle_theta_one_refines_argmax_neighborhood() {
        // With theta = 1 only the worst element (plus closure) refines each
        // step; verify against an explicit argmax + closure oracle.
        let mesh = generate_domain(&DomainKind::UnitSquare, 8, 0).unwrap();
        let ref_mesh = uniform_refine(&mesh, 4).unwrap();
        let inst = poisson();
        let ref_field = solve(&ref_mesh, &inst).unwrap();
        let probes = RefProbes::new(&ref_mesh, &ref_field);

        let field = solve(&mesh, &inst).unwrap();
        let ind = indicators(&mesh, &field, &probes).unwrap();
        let flags = oracle_mark(&mesh, &field, &probes, 1.0).unwrap();
        let max = ind.eta_inf.iter().cloned().fold(f64::MIN, f64::max);
        for (e, &f) in flags.iter().enumerate() {
            assert_eq!(f == 1, ind.eta_inf[e] >= max, "element {e}");
        }
        let (refined, maps) = rgb_refine(&mesh, &flags).unwrap();
        // Flagged elements have 4 children; closure splits only touch
        // neighbors of flagged elements.
        let flagged: Vec<usize> =
            flags.iter().enumerate().filter(|(_, &f)| f == 1).map(|(e, _)| e).collect();
        for &e in &flagged {
            assert_eq!(maps.elem_children[e].len(), 4);
        }
        let adjacency = {
            // Element adjacency by shared edge.
            let mut edge_owner: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
                Default::default();
            for (e, t) in mesh.tris.iter().enumerate() {
                for k in 0..3 {
                    let (i, j) = (t[k], t[(k + 1) % 3]);
                    edge_owner.entry((i.min(j), i.max(j))).or_default().push(e);
                }
            }
            edge_owner
        };
        let mut allowed: std::collections::BTreeSet<usize> = flagged.iter().copied().collect();
        for owners in adjacency.values() {
            if owners.iter().any(|e| flagged.contains(e)) {
                allowed.extend(owners.iter().copied());
            }
        }
        for (e, children) in maps.elem_children.iter().enumerate() {
            if children.len() > 1 {
                assert!(allowed.contains(&e), "element {e} split without a flagged neighbor");
            }
        }
        let _ = refined;
    }

    #[test]
    fn trajectories_are_deterministic() {
        let mesh = generate_domain(&DomainKind::UnitSquare, 8, 0).unwrap();
        let ref_mesh = uniform_refine(&mesh, 3).unwrap();
        let inst = poisson();
        let ref_field = solve(&ref_mesh, &inst).unwrap();
        let probes = RefProbes::new(&ref_mesh, &ref_field);
        let cfg = HeuristicConfig { kind: HeuristicKind::Oracle, theta: 0.5, steps: 3 };
        let a = run_heuristic(&cfg, &inst, &mesh, &probes).unwrap();
        let b = run_heuristic(&cfg, &inst, &mesh, &probes).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mesh.n_elements(), y.mesh.n_elements());
            assert_eq!(x.err_rel.to_bits(), y.err_rel.to_bits());
        }
    }
}
