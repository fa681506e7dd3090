//! Planar triangular meshes.
//!
//! A [`Mesh`] stores vertex coordinates, counter-clockwise triangle
//! connectivity, a per-vertex boundary classification, and lineage
//! information linking a refined mesh back to its parent. All geometry
//! queries (Jacobians, areas, aspect ratios, orientations) live here, as do
//! tangling detection and conforming red-green-blue refinement.

mod domain;
mod io;
mod refine;

pub use domain::{classify_boundary, generate_domain, DomainKind, Polygon};
pub use refine::{rgb_refine, uniform_refine, RefinementMaps};

use crate::{Error, Result};

/// Tolerance for "vertex lies on a boundary line" checks, in domain units.
pub const BOUNDARY_TOL: f64 = 1e-10;

/// Boundary classification of a single vertex.
///
/// `Edge(c)` vertices are constrained to slide along boundary component `c`;
/// `Corner` vertices are geometrically fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryClass {
    Interior,
    Edge(usize),
    Corner,
}

impl BoundaryClass {
    pub fn is_boundary(self) -> bool {
        !matches!(self, BoundaryClass::Interior)
    }
}

/// One straight boundary component: a maximal collinear run of boundary
/// edges. The supporting line is `anchor + t * tangent`.
#[derive(Debug, Clone)]
pub struct BoundaryComponent {
    pub anchor: [f64; 2],
    /// Unit tangent, sign-normalized so that `t.x > 0`, or `t.y > 0` when
    /// the component is vertical.
    pub tangent: [f64; 2],
}

impl BoundaryComponent {
    /// Signed distance of `p` from the supporting line.
    pub fn line_distance(&self, p: [f64; 2]) -> f64 {
        let d = [p[0] - self.anchor[0], p[1] - self.anchor[1]];
        d[0] * self.tangent[1] - d[1] * self.tangent[0]
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        self.line_distance(p).abs() <= tol
    }
}

/// A conforming triangulation of a planar domain.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates, one `[x, y]` pair per vertex.
    pub coords: Vec<[f64; 2]>,
    /// Triangles as vertex index triples, counter-clockwise.
    pub tris: Vec<[usize; 3]>,
    /// Per-vertex boundary classification.
    pub boundary_class: Vec<BoundaryClass>,
    /// Straight boundary components referenced by `BoundaryClass::Edge`.
    pub components: Vec<BoundaryComponent>,
    /// Per-element parent id in the pre-refinement mesh, if any.
    pub lineage: Vec<Option<usize>>,
    /// Per-vertex persistent id in the pre-refinement mesh, if any.
    pub vertex_origin: Vec<Option<usize>>,
}

impl Mesh {
    /// Builds a mesh from raw geometry with every vertex marked interior and
    /// no lineage. Boundary data is filled in by [`classify_boundary`] or
    /// [`Mesh::reclassify_boundary`].
    pub fn from_raw(coords: Vec<[f64; 2]>, tris: Vec<[usize; 3]>) -> Result<Self> {
        let n_v = coords.len();
        for t in &tris {
            if t.iter().any(|&i| i >= n_v) {
                return Err(Error::Mesh(format!("triangle {t:?} references missing vertex")));
            }
        }
        let n_e = tris.len();
        Ok(Mesh {
            coords,
            tris,
            boundary_class: vec![BoundaryClass::Interior; n_v],
            components: Vec::new(),
            lineage: vec![None; n_e],
            vertex_origin: (0..n_v).map(Some).collect(),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.tris.len()
    }

    /// Determinant of the 2x2 edge-vector matrix `[z1 - z0; z2 - z0]`;
    /// equals twice the signed area of the element.
    ///
    /// ```
    /// use hrmesh::mesh::Mesh;
    /// let m = Mesh::from_raw(
    ///     vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
    ///     vec![[0, 1, 2]],
    /// ).unwrap();
    /// assert_eq!(m.jacobian_det(0), 1.0);
    /// ```
    pub fn jacobian_det(&self, elem: usize) -> f64 {
        let [a, b, c] = self.tris[elem];
        let z0 = self.coords[a];
        let z1 = self.coords[b];
        let z2 = self.coords[c];
        let e1 = [z1[0] - z0[0], z1[1] - z0[1]];
        let e2 = [z2[0] - z0[0], z2[1] - z0[1]];
        e1[0] * e2[1] - e1[1] * e2[0]
    }

    /// Signed area of an element.
    pub fn area(&self, elem: usize) -> f64 {
        0.5 * self.jacobian_det(elem)
    }

    /// Element centroid.
    pub fn centroid(&self, elem: usize) -> [f64; 2] {
        let [a, b, c] = self.tris[elem];
        let (pa, pb, pc) = (self.coords[a], self.coords[b], self.coords[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    /// Ids of all elements with non-positive Jacobian determinant.
    pub fn detect_tangled(&self) -> Vec<usize> {
        (0..self.n_elements()).filter(|&e| self.jacobian_det(e) <= 0.0).collect()
    }

    /// Ratio of longest to shortest edge length; `>= 1` for valid elements.
    pub fn aspect_ratio(&self, elem: usize) -> Result<f64> {
        let lens = self.edge_lengths(elem);
        let max = lens.iter().cloned().fold(f64::MIN, f64::max);
        let min = lens.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 {
            return Err(Error::Mesh(format!("degenerate element {elem}")));
        }
        Ok(max / min)
    }

    /// Lengths of the three element edges, opposite local vertices 0, 1, 2.
    pub fn edge_lengths(&self, elem: usize) -> [f64; 3] {
        let [a, b, c] = self.tris[elem];
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        [
            d(self.coords[b], self.coords[c]),
            d(self.coords[c], self.coords[a]),
            d(self.coords[a], self.coords[b]),
        ]
    }

    /// Angle of the element's principal stretch axis, from the SVD of the
    /// edge-vector Jacobian: `theta = atan2(U[1][0], U[0][0])`.
    ///
    /// Returns `(theta, sin theta, cos theta)`.
    pub fn principal_orientation(&self, elem: usize) -> Result<(f64, f64, f64)> {
        let [a, b, c] = self.tris[elem];
        let z0 = self.coords[a];
        let z1 = self.coords[b];
        let z2 = self.coords[c];
        // J = [e1 e2] with edge vectors as columns.
        let j = [[z1[0] - z0[0], z2[0] - z0[0]], [z1[1] - z0[1], z2[1] - z0[1]]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 {
            return Err(Error::Mesh(format!("degenerate element {elem}")));
        }
        // Left singular vectors are the eigenvectors of J J^T (symmetric 2x2).
        let m00 = j[0][0] * j[0][0] + j[0][1] * j[0][1];
        let m01 = j[0][0] * j[1][0] + j[0][1] * j[1][1];
        let m11 = j[1][0] * j[1][0] + j[1][1] * j[1][1];
        // Principal eigenvector of [[m00, m01], [m01, m11]].
        let theta = if m01.abs() < 1e-300 && (m00 - m11).abs() < 1e-300 {
            0.0 // isotropic element: orientation is arbitrary, pick the x-axis
        } else {
            0.5 * (2.0 * m01).atan2(m00 - m11)
        };
        Ok((theta, theta.sin(), theta.cos()))
    }

    /// Unit principal stretch direction `(cos theta, sin theta)`.
    pub fn principal_direction(&self, elem: usize) -> Result<[f64; 2]> {
        let (_, s, c) = self.principal_orientation(elem)?;
        Ok([c, s])
    }

    /// Every edge as a sorted vertex pair together with the number of
    /// triangles containing it.
    pub fn edge_use_counts(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        let mut counts = std::collections::BTreeMap::new();
        for t in &self.tris {
            for k in 0..3 {
                let (i, j) = (t[k], t[(k + 1) % 3]);
                let key = (i.min(j), i.max(j));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Checks conformity: every edge is shared by one (boundary) or two
    /// (interior) triangles.
    pub fn is_conforming(&self) -> bool {
        self.edge_use_counts().values().all(|&c| c == 1 || c == 2)
    }

    /// Incident elements per vertex.
    pub fn vertex_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_vertices()];
        for (e, t) in self.tris.iter().enumerate() {
            for &v in t {
                out[v].push(e);
            }
        }
        out
    }

    /// Vertex adjacency (shared-element neighbors), sorted, no self loops.
    pub fn vertex_adjacency(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![std::collections::BTreeSet::new(); self.n_vertices()];
        for t in &self.tris {
            for k in 0..3 {
                for l in 0..3 {
                    if t[k] != t[l] {
                        sets[t[k]].insert(t[l]);
                    }
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Recomputes `boundary_class` and `components` from the mesh geometry.
    ///
    /// Boundary edges are chained into loops and split into maximal collinear
    /// runs; each run becomes one component. Vertices where two runs meet are
    /// corners. Component ids are ordered by the smallest vertex index on the
    /// run, which keeps ids stable under refinement (old vertices keep their
    /// indices).
    pub fn reclassify_boundary(&mut self) -> Result<()> {
        let (classes, components) = derive_boundary(self)?;
        self.boundary_class = classes;
        self.components = components;
        Ok(())
    }

    /// Returns the unit tangent of boundary component `c`.
    pub fn edge_component_dir(&self, c: usize) -> [f64; 2] {
        self.components[c].tangent
    }

    /// Relocates all vertices, keeping connectivity and classification.
    pub fn with_coords(&self, coords: Vec<[f64; 2]>) -> Mesh {
        let mut m = self.clone();
        assert_eq!(coords.len(), m.coords.len());
        m.coords = coords;
        m
    }
}

/// Chains boundary edges into straight components.
fn derive_boundary(mesh: &Mesh) -> Result<(Vec<BoundaryClass>, Vec<BoundaryComponent>)> {
    let n_v = mesh.n_vertices();
    let mut boundary_edges: Vec<(usize, usize)> = Vec::new();
    for ((i, j), count) in mesh.edge_use_counts() {
        match count {
            1 => boundary_edges.push((i, j)),
            2 => {}
            c => {
                return Err(Error::Mesh(format!("edge ({i},{j}) used by {c} triangles")));
            }
        }
    }
    // Adjacency restricted to boundary edges; every boundary vertex has
    // exactly two boundary neighbors on a conforming mesh of a polygon.
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n_v];
    for &(i, j) in &boundary_edges {
        nbrs[i].push(j);
        nbrs[j].push(i);
    }
    for (v, ns) in nbrs.iter().enumerate() {
        if !ns.is_empty() && ns.len() != 2 {
            return Err(Error::Mesh(format!("boundary vertex {v} has {} boundary neighbors", ns.len())));
        }
    }

    let dir = |a: usize, b: usize| -> [f64; 2] {
        let (pa, pb) = (mesh.coords[a], mesh.coords[b]);
        let d = [pb[0] - pa[0], pb[1] - pa[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        [d[0] / len, d[1] / len]
    };
    let collinear = |a: usize, b: usize, c: usize| -> bool {
        let d1 = dir(a, b);
        let d2 = dir(b, c);
        (d1[0] * d2[1] - d1[1] * d2[0]).abs() <= BOUNDARY_TOL && d1[0] * d2[0] + d1[1] * d2[1] > 0.0
    };

    let mut visited = vec![false; n_v];
    // A run is a chain of boundary vertices along one straight segment.
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for start in 0..n_v {
        if nbrs[start].is_empty() || visited[start] {
            continue;
        }
        // Walk the whole loop containing `start`.
        let mut loop_vs = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = nbrs[start][0];
        while cur != start {
            visited[cur] = true;
            loop_vs.push(cur);
            let next = if nbrs[cur][0] == prev { nbrs[cur][1] } else { nbrs[cur][0] };
            prev = cur;
            cur = next;
        }
        let n = loop_vs.len();
        // Corner positions: loop vertices where direction changes.
        let mut corner_pos: Vec<usize> = (0..n)
            .filter(|&k| {
                let a = loop_vs[(k + n - 1) % n];
                let b = loop_vs[k];
                let c = loop_vs[(k + 1) % n];
                !collinear(a, b, c)
            })
            .collect();
        if corner_pos.is_empty() {
            // Degenerate: a perfectly straight closed loop cannot happen for
            // a simple polygon; treat the whole loop as one run.
            runs.push(loop_vs);
            continue;
        }
        corner_pos.sort_unstable();
        for w in 0..corner_pos.len() {
            let s = corner_pos[w];
            let e = corner_pos[(w + 1) % corner_pos.len()];
            let mut run = Vec::new();
            let mut k = s;
            loop {
                run.push(loop_vs[k]);
                if k == e {
                    break;
                }
                k = (k + 1) % n;
            }
            runs.push(run);
        }
    }

    // Deterministic component ordering by the canonical supporting line.
    // Run endpoints are corners, which never move, so the key is stable
    // under refinement and relocation regardless of traversal direction.
    let line_of = |run: &[usize]| -> ([f64; 2], [f64; 2]) {
        let first = mesh.coords[run[0]];
        let last = mesh.coords[*run.last().unwrap()];
        let anchor = if (first[0], first[1]) <= (last[0], last[1]) { first } else { last };
        let other = if anchor == first { last } else { first };
        let mut tangent = [other[0] - anchor[0], other[1] - anchor[1]];
        let len = (tangent[0] * tangent[0] + tangent[1] * tangent[1]).sqrt();
        tangent = [tangent[0] / len, tangent[1] / len];
        if tangent[0] < 0.0 || (tangent[0] == 0.0 && tangent[1] < 0.0) {
            tangent = [-tangent[0], -tangent[1]];
        }
        (anchor, tangent)
    };
    runs.sort_by(|a, b| {
        let (aa, ta) = line_of(a);
        let (ab, tb) = line_of(b);
        let key = |anchor: [f64; 2], t: [f64; 2]| {
            let n = [-t[1], t[0]];
            (t[0], t[1], n[0] * anchor[0] + n[1] * anchor[1], anchor[0], anchor[1])
        };
        let (ka, kb) = (key(aa, ta), key(ab, tb));
        ka.0
            .total_cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.total_cmp(&kb.3))
            .then(ka.4.total_cmp(&kb.4))
    });

    let mut classes = vec![BoundaryClass::Interior; n_v];
    let mut components = Vec::new();
    for run in &runs {
        let c = components.len();
        let (anchor, tangent) = line_of(run);
        components.push(BoundaryComponent { anchor, tangent });
        // Run endpoints are corners (they sit at direction changes); interior
        // run vertices slide along the component.
        let n = run.len();
        for (k, &v) in run.iter().enumerate() {
            if k == 0 || k == n - 1 {
                classes[v] = BoundaryClass::Corner;
            } else {
                classes[v] = BoundaryClass::Edge(c);
            }
        }
    }
    Ok((classes, components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn unit_square_two_tris() -> Mesh {
        let mut m = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        m.reclassify_boundary().unwrap();
        m
    }

    #[test]
    fn jacobian_det_reference_values() {
        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.jacobian_det(0), 1.0);
        let m = Mesh::from_raw(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.jacobian_det(0), -1.0);
        let m = Mesh::from_raw(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.jacobian_det(0), 4.0);
    }

    #[test]
    fn detect_tangled_finds_flips_and_degenerate() {
        let m = unit_square_two_tris();
        assert!(m.detect_tangled().is_empty());

        let m = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [3.0, 0.0], [2.5, -1.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert_eq!(m.detect_tangled(), vec![1]);

        // Collinear triangle: det = 0 counts as tangled.
        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(m.detect_tangled(), vec![0]);
    }

    #[test]
    fn aspect_ratio_reference_values() {
        let h = 3f64.sqrt() / 2.0;
        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.5, h]], vec![[0, 1, 2]]).unwrap();
        assert_relative_eq!(m.aspect_ratio(0).unwrap(), 1.0, epsilon = 1e-14);

        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        assert_relative_eq!(m.aspect_ratio(0).unwrap(), 2f64.sqrt(), epsilon = 1e-14);

        let m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]], vec![[0, 1, 2]]).unwrap();
        assert_relative_eq!(m.aspect_ratio(0).unwrap(), 10f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn principal_orientation_axis_aligned_and_rotated() {
        let m = Mesh::from_raw(vec![[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let (theta, s, c) = m.principal_orientation(0).unwrap();
        // Principal axis along x: theta = 0 mod pi.
        assert!(theta.sin().abs() < 1e-9, "theta = {theta}");
        assert_relative_eq!(s * s + c * c, 1.0, epsilon = 1e-14);

        // Rotate the same element by pi/4.
        let rot = |p: [f64; 2]| {
            let a = std::f64::consts::FRAC_PI_4;
            [p[0] * a.cos() - p[1] * a.sin(), p[0] * a.sin() + p[1] * a.cos()]
        };
        let m2 = Mesh::from_raw(
            vec![rot([0.0, 0.0]), rot([2.0, 0.0]), rot([0.0, 1.0])],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (theta2, _, _) = m2.principal_orientation(0).unwrap();
        let diff = (theta2 - theta - std::f64::consts::FRAC_PI_4).rem_euclid(std::f64::consts::PI);
        let diff = diff.min(std::f64::consts::PI - diff);
        assert!(diff < 1e-9, "rotation equivariance violated: {diff}");
    }

    #[test]
    fn boundary_derivation_unit_square() {
        let m = unit_square_two_tris();
        // Four corners, four components, nothing interior.
        assert_eq!(
            m.boundary_class.iter().filter(|c| matches!(c, BoundaryClass::Corner)).count(),
            4
        );
        assert_eq!(m.components.len(), 4);
    }

    #[test]
    fn rigid_motion_invariance_of_shape_metrics() {
        let m = Mesh::from_raw(vec![[0.1, 0.2], [1.3, 0.4], [0.3, 1.7]], vec![[0, 1, 2]]).unwrap();
        let rho = m.aspect_ratio(0).unwrap();
        let shift = |p: [f64; 2]| [p[0] + 5.0, p[1] - 2.0];
        let m2 = Mesh::from_raw(
            vec![shift([0.1, 0.2]), shift([1.3, 0.4]), shift([0.3, 1.7])],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert_relative_eq!(m2.aspect_ratio(0).unwrap(), rho, epsilon = 1e-13);
        let (t1, _, _) = m.principal_orientation(0).unwrap();
        let (t2, _, _) = m2.principal_orientation(0).unwrap();
        assert_relative_eq!(t1, t2, epsilon = 1e-12);
    }
}
