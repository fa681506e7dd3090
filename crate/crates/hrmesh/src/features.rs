//! Hypergraph state construction.
//!
//! The policy network consumes the mesh as a hypergraph: vertices are nodes,
//! elements are hyperedges over their three corners. This module builds the
//! incidence/adjacency structure and the raw per-vertex and per-element
//! feature matrices. Feature normalization happens later, in the training
//! loop.
//!
//! Vertex features (width 6): position, solution value, and a one-hot
//! boundary class. Element features (width 12 plus task features): area,
//! solution mean and standard deviation over the corners, adaptation step,
//! element penalty, aspect ratio, principal-axis sine/cosine, gradient norm,
//! edge-jump max/std, and gradient-anisotropy alignment.

use crate::fem::{basis_gradients, Field};
use crate::mesh::{BoundaryClass, Mesh};
use crate::{Error, Result};

/// Width of the vertex feature rows.
pub const VERTEX_FEAT_DIM: usize = 6;
/// Width of the element feature rows before task features.
pub const ELEM_FEAT_BASE_DIM: usize = 12;

/// Dense row-major matrix, the exchange format between feature construction
/// and the network.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Incidence and adjacency structure plus feature matrices for one mesh.
#[derive(Debug, Clone)]
pub struct HypergraphState {
    /// Per-element vertex triples (the hyperedges); columns of H.
    pub tris: Vec<[usize; 3]>,
    /// Incident elements per vertex; rows of H.
    pub vert_elems: Vec<Vec<usize>>,
    /// Shared-element vertex neighbors, sorted, no self loops; A.
    pub adjacency: Vec<Vec<usize>>,
    /// Vertex degrees (row sums of H).
    pub vertex_deg: Vec<f64>,
    /// Element degrees (column sums of H); always 3 for triangles.
    pub elem_deg: Vec<f64>,
    /// N_v x 6 raw vertex features.
    pub vertex_feats: Matrix,
    /// N_e x d_e raw element features.
    pub elem_feats: Matrix,
    /// Boundary classification copied from the mesh.
    pub boundary_mask: Vec<BoundaryClass>,
}

impl HypergraphState {
    pub fn n_vertices(&self) -> usize {
        self.vert_elems.len()
    }

    pub fn n_elements(&self) -> usize {
        self.tris.len()
    }
}

/// Builds incidence, adjacency, and degree vectors for a mesh.
pub fn build_structure(mesh: &Mesh) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<f64>, Vec<f64>) {
    let vert_elems = mesh.vertex_elements();
    let adjacency = mesh.vertex_adjacency();
    let vertex_deg: Vec<f64> = vert_elems.iter().map(|es| es.len() as f64).collect();
    let elem_deg = vec![3.0; mesh.n_elements()];
    (vert_elems, adjacency, vertex_deg, elem_deg)
}

/// Raw vertex features: `[x, y, u, interior, edge, corner]`.
pub fn vertex_features(mesh: &Mesh, field: &Field) -> Matrix {
    let n = mesh.n_vertices();
    let mut m = Matrix::zeros(n, VERTEX_FEAT_DIM);
    for v in 0..n {
        m.set(v, 0, mesh.coords[v][0]);
        m.set(v, 1, mesh.coords[v][1]);
        m.set(v, 2, field.values[v]);
        let one_hot = match mesh.boundary_class[v] {
            BoundaryClass::Interior => 3,
            BoundaryClass::Edge(_) => 4,
            BoundaryClass::Corner => 5,
        };
        m.set(v, one_hot, 1.0);
    }
    m
}

/// The constant P1 solution gradient of every element.
pub fn gradient_per_element(mesh: &Mesh, field: &Field) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        if mesh.jacobian_det(e).abs() < 1e-300 {
            return Err(Error::Mesh(format!("degenerate element {e}")));
        }
        let (g, _) = basis_gradients(mesh, e);
        let t = mesh.tris[e];
        let mut grad = [0.0, 0.0];
        for k in 0..3 {
            grad[0] += field.values[t[k]] * g[k][0];
            grad[1] += field.values[t[k]] * g[k][1];
        }
        out.push(grad);
    }
    Ok(out)
}

/// Normalized solution jumps over the three edges of an element:
/// `|du_e| / len_e` per edge, reduced to the maximum and the population
/// standard deviation.
pub fn edge_jump_stats(mesh: &Mesh, field: &Field, elem: usize) -> Result<(f64, f64)> {
    let t = mesh.tris[elem];
    let mut jumps = [0.0; 3];
    for k in 0..3 {
        let (i, j) = (t[k], t[(k + 1) % 3]);
        let (pi, pj) = (mesh.coords[i], mesh.coords[j]);
        let len = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
        if len <= 0.0 {
            return Err(Error::Mesh(format!("zero-length edge on element {elem}")));
        }
        jumps[k] = (field.values[i] - field.values[j]).abs() / len;
    }
    let max = jumps.iter().cloned().fold(f64::MIN, f64::max);
    let mean = jumps.iter().sum::<f64>() / 3.0;
    let var = jumps.iter().map(|&j| (j - mean) * (j - mean)).sum::<f64>() / 3.0;
    Ok((max, var.sqrt()))
}

/// Signed cosine between the solution gradient and the element's principal
/// stretch direction; zero for a vanishing gradient.
pub fn alignment(mesh: &Mesh, grad: [f64; 2], elem: usize) -> Result<f64> {
    let gnorm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
    if gnorm == 0.0 {
        return Ok(0.0);
    }
    let d = mesh.principal_direction(elem)?;
    Ok((grad[0] * d[0] + grad[1] * d[1]) / gnorm)
}

/// Raw element features.
///
/// `task_feats` is a per-element slice of extra columns (Poisson: load at
/// the centroid; heat: distances to the source path endpoints).
pub fn element_features(
    mesh: &Mesh,
    field: &Field,
    step: usize,
    alpha: f64,
    task_feats: &[Vec<f64>],
) -> Result<Matrix> {
    let n_e = mesh.n_elements();
    let task_width = task_feats.first().map(|t| t.len()).unwrap_or(0);
    if !task_feats.is_empty() && task_feats.len() != n_e {
        return Err(Error::Mesh("task feature rows do not match element count".into()));
    }
    let grads = gradient_per_element(mesh, field)?;
    let mut m = Matrix::zeros(n_e, ELEM_FEAT_BASE_DIM + task_width);
    for e in 0..n_e {
        let t = mesh.tris[e];
        let vals = [field.values[t[0]], field.values[t[1]], field.values[t[2]]];
        let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
        let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        let (_, sin_t, cos_t) = mesh.principal_orientation(e)?;
        let (g_max, g_std) = edge_jump_stats(mesh, field, e)?;
        let grad = grads[e];
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        m.set(e, 0, mesh.area(e));
        m.set(e, 1, mean);
        m.set(e, 2, var.sqrt());
        m.set(e, 3, step as f64);
        m.set(e, 4, alpha);
        m.set(e, 5, mesh.aspect_ratio(e)?);
        m.set(e, 6, sin_t);
        m.set(e, 7, cos_t);
        m.set(e, 8, gnorm);
        m.set(e, 9, g_max);
        m.set(e, 10, g_std);
        m.set(e, 11, alignment(mesh, grad, e)?);
        if task_width > 0 {
            for (k, &v) in task_feats[e].iter().enumerate() {
                m.set(e, ELEM_FEAT_BASE_DIM + k, v);
            }
        }
    }
    Ok(m)
}

/// Assembles the full hypergraph state for one adaptation step.
pub fn build_state(
    mesh: &Mesh,
    field: &Field,
    step: usize,
    alpha: f64,
    task_feats: &[Vec<f64>],
) -> Result<HypergraphState> {
    let (vert_elems, adjacency, vertex_deg, elem_deg) = build_structure(mesh);
    let vertex_feats = vertex_features(mesh, field);
    let elem_feats = element_features(mesh, field, step, alpha, task_feats)?;
    Ok(HypergraphState {
        tris: mesh.tris.clone(),
        vert_elems,
        adjacency,
        vertex_deg,
        elem_deg,
        vertex_feats,
        elem_feats,
        boundary_mask: mesh.boundary_class.clone(),
    })
}

/// Task-specific element features for a problem instance on a mesh.
pub fn task_features(mesh: &Mesh, instance: &crate::fem::ProblemInstance) -> Result<Vec<Vec<f64>>> {
    use crate::fem::PdeKind;
    match instance.kind {
        PdeKind::Poisson => (0..mesh.n_elements())
            .map(|e| Ok(vec![instance.gmm_load(mesh.centroid(e))?]))
            .collect(),
        PdeKind::Heat => {
            let (p0, p1) = instance
                .heat_path
                .ok_or_else(|| Error::Fem("heat instance without a source path".into()))?;
            (0..mesh.n_elements())
                .map(|e| {
                    let c = mesh.centroid(e);
                    let d0 = ((c[0] - p0[0]).powi(2) + (c[1] - p0[1]).powi(2)).sqrt();
                    let d1 = ((c[0] - p1[0]).powi(2) + (c[1] - p1[1]).powi(2)).sqrt();
                    Ok(vec![d0, d1])
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_domain, uniform_refine, DomainKind};
    use approx::assert_relative_eq;

    fn mesh_with_field(refines: usize, f: impl Fn([f64; 2]) -> f64) -> (Mesh, Field) {
        let m = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
        let m = uniform_refine(&m, refines).unwrap();
        let field = Field { values: m.coords.iter().map(|&p| f(p)).collect() };
        (m, field)
    }

    #[test]
    fn structure_single_triangle() {
        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let (vert_elems, adjacency, vertex_deg, elem_deg) = build_structure(&m);
        assert_eq!(vert_elems, vec![vec![0], vec![0], vec![0]]);
        assert_eq!(adjacency, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        assert_eq!(vertex_deg, vec![1.0, 1.0, 1.0]);
        assert_eq!(elem_deg, vec![3.0]);
    }

    #[test]
    fn structure_shared_edge_degrees() {
        let m = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let (_, _, vertex_deg, _) = build_structure(&m);
        assert_eq!(vertex_deg, vec![2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn adjacency_matches_pairwise_scan_oracle() {
        let m = generate_domain(&DomainKind::LShape { p0: [0.55, 0.4] }, 30, 2).unwrap();
        let (_, adjacency, _, _) = build_structure(&m);
        // Oracle: brute-force scan over all element vertex pairs.
        let n = m.n_vertices();
        let mut oracle = vec![vec![false; n]; n];
        for t in &m.tris {
            for &i in t {
                for &j in t {
                    if i != j {
                        oracle[i][j] = true;
                    }
                }
            }
        }
        for i in 0..n {
            let row: Vec<usize> = (0..n).filter(|&j| oracle[i][j]).collect();
            assert_eq!(adjacency[i], row, "row {i}");
            assert!(!adjacency[i].contains(&i));
        }
    }

    #[test]
    fn vertex_feature_rows() {
        let (m, field) = mesh_with_field(1, |_| 0.0);
        let f = vertex_features(&m, &field);
        assert_eq!(f.cols, VERTEX_FEAT_DIM);
        for v in 0..m.n_vertices() {
            assert_eq!(f.get(v, 2), 0.0);
            let one_hot = &f.row(v)[3..6];
            assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
            match m.boundary_class[v] {
                BoundaryClass::Corner => assert_eq!(one_hot, &[0.0, 0.0, 1.0]),
                BoundaryClass::Edge(_) => assert_eq!(one_hot, &[0.0, 1.0, 0.0]),
                BoundaryClass::Interior => assert_eq!(one_hot, &[1.0, 0.0, 0.0]),
            }
        }
        // Translation moves exactly the position columns.
        let shifted = m.with_coords(m.coords.iter().map(|p| [p[0] + 2.0, p[1] - 1.0]).collect());
        let g = vertex_features(&shifted, &field);
        for v in 0..m.n_vertices() {
            assert_eq!(g.get(v, 0), f.get(v, 0) + 2.0);
            assert_eq!(g.get(v, 1), f.get(v, 1) - 1.0);
            assert_eq!(&g.row(v)[2..], &f.row(v)[2..]);
        }
    }

    #[test]
    fn gradients_exact_on_linears() {
        let (m, field) = mesh_with_field(2, |p| 3.0 * p[0] - 2.0 * p[1] + 7.0);
        for g in gradient_per_element(&m, &field).unwrap() {
            assert_relative_eq!(g[0], 3.0, epsilon = 1e-12);
            assert_relative_eq!(g[1], -2.0, epsilon = 1e-12);
        }
        let (m, field) = mesh_with_field(1, |_| 5.0);
        for g in gradient_per_element(&m, &field).unwrap() {
            assert_relative_eq!(g[0], 0.0, epsilon = 1e-13);
            assert_relative_eq!(g[1], 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn gradients_match_finite_difference_oracle() {
        let (m, field) = mesh_with_field(2, |p| (2.0 * p[0]).sin() + p[1] * p[1]);
        let grads = gradient_per_element(&m, &field).unwrap();
        // Probe the interpolant by central differences at each centroid.
        let h = 1e-7;
        for e in 0..m.n_elements() {
            let c = m.centroid(e);
            let probe = |p: [f64; 2]| {
                let l = crate::fem::barycentric(&m, e, p);
                crate::fem::eval_in_element(&m, &field, e, l)
            };
            let gx = (probe([c[0] + h, c[1]]) - probe([c[0] - h, c[1]])) / (2.0 * h);
            let gy = (probe([c[0], c[1] + h]) - probe([c[0], c[1] - h])) / (2.0 * h);
            assert_relative_eq!(grads[e][0], gx, epsilon = 1e-8, max_relative = 1e-6);
            assert_relative_eq!(grads[e][1], gy, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn edge_jumps_constant_and_linear() {
        let (m, field) = mesh_with_field(1, |_| 3.5);
        for e in 0..m.n_elements() {
            assert_eq!(edge_jump_stats(&m, &field, e).unwrap(), (0.0, 0.0));
        }

        // u = x on the unit right triangle (0,0),(1,0),(0,1): per-edge jump
        // rates |du|/len are 1 (bottom), 1/sqrt(2) (hypotenuse), 0 (left).
        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let field = Field { values: vec![0.0, 1.0, 0.0] };
        let (g_max, g_std) = edge_jump_stats(&m, &field, 0).unwrap();
        let jumps = [1.0, 1.0 / 2f64.sqrt(), 0.0];
        let mean = jumps.iter().sum::<f64>() / 3.0;
        let var = jumps.iter().map(|&j| (j - mean) * (j - mean)).sum::<f64>() / 3.0;
        assert_relative_eq!(g_max, 1.0, epsilon = 1e-14);
        assert_relative_eq!(g_std, var.sqrt(), epsilon = 1e-14);

        // Scaling the field scales both outputs.
        let scaled = Field { values: vec![0.0, -4.0, 0.0] };
        let (s_max, s_std) = edge_jump_stats(&m, &scaled, 0).unwrap();
        assert_relative_eq!(s_max, 4.0 * g_max, epsilon = 1e-13);
        assert_relative_eq!(s_std, 4.0 * g_std, epsilon = 1e-13);
    }

    #[test]
    fn alignment_cases() {
        // Stretched element along x: principal direction is the x-axis.
        let m = Mesh::from_raw(vec![[0.0, 0.0], [4.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        assert_relative_eq!(alignment(&m, [2.0, 0.0], 0).unwrap().abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(alignment(&m, [0.0, 3.0], 0).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(alignment(&m, [0.0, 0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn element_feature_rows() {
        let (m, field) = mesh_with_field(1, |_| 2.0);
        let f = element_features(&m, &field, 3, 0.01, &[]).unwrap();
        assert_eq!(f.cols, ELEM_FEAT_BASE_DIM);
        for e in 0..m.n_elements() {
            assert_relative_eq!(f.get(e, 0), m.area(e), epsilon = 1e-15);
            assert_eq!(f.get(e, 1), 2.0); // mean
            assert_eq!(f.get(e, 2), 0.0); // sigma
            assert_eq!(f.get(e, 3), 3.0); // step
            assert_eq!(f.get(e, 4), 0.01); // alpha
            assert_eq!(f.get(e, 8), 0.0); // grad norm
            assert_eq!(f.get(e, 9), 0.0); // g_max
            assert_eq!(f.get(e, 10), 0.0); // g_std
            assert_eq!(f.get(e, 11), 0.0); // alignment convention at zero grad
            let (s, c) = (f.get(e, 6), f.get(e, 7));
            assert_relative_eq!(s * s + c * c, 1.0, epsilon = 1e-13);
        }

        // Linear field u = x: unit gradient norm everywhere.
        let (m, field) = mesh_with_field(1, |p| p[0]);
        let f = element_features(&m, &field, 0, 0.0, &[]).unwrap();
        for e in 0..m.n_elements() {
            assert_relative_eq!(f.get(e, 8), 1.0, epsilon = 1e-12);
            // Brute-force recompute of jump stats per edge.
            let (g_max, g_std) = edge_jump_stats(&m, &field, e).unwrap();
            assert_relative_eq!(f.get(e, 9), g_max, epsilon = 1e-15);
            assert_relative_eq!(f.get(e, 10), g_std, epsilon = 1e-15);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (m, field) = mesh_with_field(1, |p| p[0] * p[1]);
        let feats = element_features(&m, &field, 1, 0.5, &[]).unwrap();
        // Relabel elements by reversal.
        let mut m2 = m.clone();
        m2.tris.reverse();
        m2.lineage.reverse();
        let feats2 = element_features(&m2, &field, 1, 0.5, &[]).unwrap();
        let n = m.n_elements();
        for e in 0..n {
            assert_eq!(feats.row(e), feats2.row(n - 1 - e));
        }
    }

    #[test]
    fn refined_mesh_has_4x_columns() {
        let m = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
        let fine = uniform_refine(&m, 1).unwrap();
        let (_, _, _, elem_deg) = build_structure(&fine);
        assert_eq!(elem_deg.len(), 4 * m.n_elements());
    }

    #[test]
    fn task_feature_widths() {
        use crate::fem::{PdeKind, ProblemInstance};
        let (m, _) = mesh_with_field(1, |_| 0.0);
        let poisson = ProblemInstance {
            kind: PdeKind::Poisson,
            domain: DomainKind::UnitSquare,
            gmm: vec![crate::fem::GmmComponent {
                weight: 1.0,
                mean: [0.5, 0.5],
                cov: [[0.01, 0.0], [0.0, 0.01]],
            }],
            heat_path: None,
            diffusivity: 1e-3,
        };
        let tf = task_features(&m, &poisson).unwrap();
        assert!(tf.iter().all(|r| r.len() == 1));
        let heat = ProblemInstance {
            kind: PdeKind::Heat,
            domain: DomainKind::UnitSquare,
            gmm: vec![],
            heat_path: Some(([0.1, 0.1], [0.9, 0.9])),
            diffusivity: 1e-3,
        };
        let tf = task_features(&m, &heat).unwrap();
        assert!(tf.iter().all(|r| r.len() == 2));
        let state = build_state(&m, &Field::zeros(m.n_vertices()), 0, 0.01, &tf).unwrap();
        assert_eq!(state.elem_feats.cols, ELEM_FEAT_BASE_DIM + 2);
        assert_eq!(state.vertex_feats.cols, VERTEX_FEAT_DIM);
    }
}
