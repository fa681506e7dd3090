//! Conforming red-green-blue refinement.
//!
//! Flagged elements are red-split into four similar children via edge
//! midpoints. Neighbors that end up with subdivided edges are closed: one
//! marked edge gives a green bisection, two a blue double bisection, three
//! promotes the element to red. Midpoint vertices are deduplicated by edge
//! identity, so the result is conforming by construction.

use super::{BoundaryClass, Mesh};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Lineage maps produced by one refinement step.
#[derive(Debug, Clone)]
pub struct RefinementMaps {
    /// Old element id -> new element ids. Untouched elements map to a
    /// singleton list containing their new id.
    pub elem_children: Vec<Vec<usize>>,
    /// Old vertex id -> new vertex id. Pre-existing vertices always persist.
    pub vertex_persist: Vec<usize>,
}

impl RefinementMaps {
    pub fn identity(n_elems: usize, n_verts: usize) -> Self {
        RefinementMaps {
            elem_children: (0..n_elems).map(|e| vec![e]).collect(),
            vertex_persist: (0..n_verts).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    None,
    Red,
    Green,
    Blue,
}

/// Applies one conforming red-green-blue refinement step.
///
/// `flags[e] != 0` requests a red split of element `e`. Closure splits are
/// added so the refined mesh has no hanging nodes. Returns the new mesh plus
/// the lineage maps. Rejects tangled input.
///
/// ```
/// use hrmesh::mesh::{Mesh, rgb_refine};
/// let mut m = Mesh::from_raw(
///     vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
///     vec![[0, 1, 2]],
/// ).unwrap();
/// m.reclassify_boundary().unwrap();
/// let (fine, maps) = rgb_refine(&m, &[1]).unwrap();
/// assert_eq!(fine.n_elements(), 4);
/// assert_eq!(fine.n_vertices(), 6);
/// assert_eq!(maps.elem_children[0].len(), 4);
/// ```
pub fn rgb_refine(mesh: &Mesh, flags: &[u8]) -> Result<(Mesh, RefinementMaps)> {
    if flags.len() != mesh.n_elements() {
        return Err(Error::Mesh(format!(
            "flag vector length {} != element count {}",
            flags.len(),
            mesh.n_elements()
        )));
    }
    if !mesh.detect_tangled().is_empty() {
        return Err(Error::Mesh("refusing to refine a tangled mesh".into()));
    }
    if flags.iter().all(|&f| f == 0) {
        let mut out = mesh.clone();
        out.lineage = (0..mesh.n_elements()).map(Some).collect();
        out.vertex_origin = (0..mesh.n_vertices()).map(Some).collect();
        return Ok((out, RefinementMaps::identity(mesh.n_elements(), mesh.n_vertices())));
    }

    let n_e = mesh.n_elements();

    // Marked edges: every edge of a red element is subdivided. Elements with
    // all three edges marked are promoted to red, which adds no new marks, so
    // the classification loop reaches a fixpoint immediately; we iterate
    // anyway to keep the rule explicit.
    let mut split = vec![Split::None; n_e];
    for (e, &f) in flags.iter().enumerate() {
        if f != 0 {
            split[e] = Split::Red;
        }
    }
    let edge_key = |i: usize, j: usize| (i.min(j), i.max(j));
    let mut marked: BTreeMap<(usize, usize), bool> = BTreeMap::new();
    loop {
        let mut changed = false;
        for (e, t) in mesh.tris.iter().enumerate() {
            if split[e] == Split::Red {
                for k in 0..3 {
                    let key = edge_key(t[k], t[(k + 1) % 3]);
                    if !marked.contains_key(&key) {
                        marked.insert(key, true);
                        changed = true;
                    }
                }
            }
        }
        for (e, t) in mesh.tris.iter().enumerate() {
            if split[e] == Split::Red {
                continue;
            }
            let n_marked = (0..3)
                .filter(|&k| marked.contains_key(&edge_key(t[k], t[(k + 1) % 3])))
                .count();
            let want = match n_marked {
                0 => Split::None,
                1 => Split::Green,
                2 => Split::Blue,
                _ => Split::Red,
            };
            if split[e] != want {
                split[e] = want;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Allocate midpoint vertices for marked edges, deduplicated by edge.
    let mut coords = mesh.coords.clone();
    let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&(i, j), _) in marked.iter() {
        let p = mesh.coords[i];
        let q = mesh.coords[j];
        let id = coords.len();
        coords.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
        midpoint.insert((i, j), id);
    }

    let mut tris: Vec<[usize; 3]> = Vec::new();
    let mut lineage: Vec<Option<usize>> = Vec::new();
    let mut elem_children: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    let push = |parent: usize, tri: [usize; 3], tris: &mut Vec<[usize; 3]>, lineage: &mut Vec<Option<usize>>, children: &mut Vec<Vec<usize>>| {
        let id = tris.len();
        tris.push(tri);
        lineage.push(Some(parent));
        children[parent].push(id);
    };

    for (e, t) in mesh.tris.iter().enumerate() {
        let [a, b, c] = *t;
        let mid = |i: usize, j: usize| midpoint.get(&edge_key(i, j)).copied();
        match split[e] {
            Split::None => {
                push(e, [a, b, c], &mut tris, &mut lineage, &mut elem_children);
            }
            Split::Red => {
                let mab = mid(a, b).unwrap();
                let mbc = mid(b, c).unwrap();
                let mca = mid(c, a).unwrap();
                // Children ordered corner 0..2 then center.
                push(e, [a, mab, mca], &mut tris, &mut lineage, &mut elem_children);
                push(e, [b, mbc, mab], &mut tris, &mut lineage, &mut elem_children);
                push(e, [c, mca, mbc], &mut tris, &mut lineage, &mut elem_children);
                push(e, [mab, mbc, mca], &mut tris, &mut lineage, &mut elem_children);
            }
            Split::Green => {
                // Bisect across the single marked edge from the opposite vertex.
                let (apex, u, v, m) = if let Some(m) = mid(a, b) {
                    (c, a, b, m)
                } else if let Some(m) = mid(b, c) {
                    (a, b, c, m)
                } else {
                    (b, c, a, mid(c, a).unwrap())
                };
                push(e, [apex, u, m], &mut tris, &mut lineage, &mut elem_children);
                push(e, [apex, m, v], &mut tris, &mut lineage, &mut elem_children);
            }
            Split::Blue => {
                // Two marked edges share one vertex; bisect across the first,
                // then bisect the child containing the second marked edge.
                // With shared vertex w and marked edges (u,w), (w,v) the
                // children are (u, mw_u, m_uv-less form): derive directly.
                let m_ab = mid(a, b);
                let m_bc = mid(b, c);
                let m_ca = mid(c, a);
                let (u, w, v, m1, m2) = match (m_ab, m_bc, m_ca) {
                    (Some(m1), Some(m2), None) => (a, b, c, m1, m2), // edges (a,b), (b,c)
                    (None, Some(m1), Some(m2)) => (b, c, a, m1, m2), // edges (b,c), (c,a)
                    (Some(m2), None, Some(m1)) => (c, a, b, m1, m2), // edges (c,a), (a,b)
                    _ => unreachable!("blue element must have exactly two marked edges"),
                };
                // Triangle (u, w, v) with midpoints m1 on (u,w) and m2 on (w,v).
                push(e, [u, m1, v], &mut tris, &mut lineage, &mut elem_children);
                push(e, [m1, w, m2], &mut tris, &mut lineage, &mut elem_children);
                push(e, [m1, m2, v], &mut tris, &mut lineage, &mut elem_children);
            }
        }
    }

    let n_old_v = mesh.n_vertices();
    let mut out = Mesh {
        coords,
        tris,
        boundary_class: Vec::new(),
        components: mesh.components.clone(),
        lineage,
        vertex_origin: Vec::new(),
    };
    out.vertex_origin = (0..out.n_vertices()).map(|v| if v < n_old_v { Some(v) } else { None }).collect();
    classify_new_vertices(mesh, &mut out, &midpoint)?;

    let maps = RefinementMaps {
        elem_children,
        vertex_persist: (0..n_old_v).collect(),
    };
    Ok((out, maps))
}

/// Classifies midpoint vertices: midpoints of boundary edges inherit the
/// edge's component, everything else is interior.
fn classify_new_vertices(
    old: &Mesh,
    new: &mut Mesh,
    midpoint: &BTreeMap<(usize, usize), usize>,
) -> Result<()> {
    let mut classes = vec![BoundaryClass::Interior; new.n_vertices()];
    classes[..old.n_vertices()].copy_from_slice(&old.boundary_class);
    let edge_counts = old.edge_use_counts();
    for (&(i, j), &m) in midpoint {
        if edge_counts.get(&(i, j)) != Some(&1) {
            continue; // interior edge
        }
        let comp = match (old.boundary_class[i], old.boundary_class[j]) {
            (BoundaryClass::Edge(c), _) | (_, BoundaryClass::Edge(c)) => c,
            (BoundaryClass::Corner, BoundaryClass::Corner) => {
                // Whole component spanned by a single edge: find it by line
                // membership of both endpoints.
                let pi = old.coords[i];
                let pj = old.coords[j];
                old.components
                    .iter()
                    .position(|comp| {
                        comp.contains(pi, super::BOUNDARY_TOL) && comp.contains(pj, super::BOUNDARY_TOL)
                    })
                    .ok_or_else(|| {
                        Error::Mesh(format!("boundary edge ({i},{j}) lies on no known component"))
                    })?
            }
            _ => {
                return Err(Error::Mesh(format!(
                    "boundary edge ({i},{j}) has an interior endpoint"
                )));
            }
        };
        classes[m] = BoundaryClass::Edge(comp);
    }
    new.boundary_class = classes;
    Ok(())
}

/// `k` rounds of all-red refinement; the element count grows by
/// exactly `4^k`.
pub fn uniform_refine(mesh: &Mesh, k: usize) -> Result<Mesh> {
    let mut out = mesh.clone();
    for _ in 0..k {
        let flags = vec![1u8; out.n_elements()];
        out = rgb_refine(&out, &flags)?.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square() -> Mesh {
        let mut m = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        m.reclassify_boundary().unwrap();
        m
    }

    /// Brute-force conformity oracle: counts triangle uses per edge.
    fn assert_conforming(m: &Mesh) {
        for ((i, j), c) in m.edge_use_counts() {
            assert!(c == 1 || c == 2, "edge ({i},{j}) used {c} times");
        }
    }

    fn assert_children_cover_parents(old: &Mesh, new: &Mesh, maps: &RefinementMaps) {
        let mut seen = vec![false; new.n_elements()];
        for (parent, children) in maps.elem_children.iter().enumerate() {
            assert!(!children.is_empty(), "element {parent} lost its lineage");
            let total: f64 = children.iter().map(|&c| new.area(c)).sum();
            assert_relative_eq!(total, old.area(parent), max_relative = 1e-12);
            for &c in children {
                assert!(!seen[c], "element {c} claimed twice");
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "children do not partition the new mesh");
    }

    #[test]
    fn all_zero_flags_is_identity() {
        let m = unit_square();
        let (out, maps) = rgb_refine(&m, &[0, 0]).unwrap();
        assert_eq!(out.n_elements(), 2);
        assert_eq!(out.n_vertices(), 4);
        assert_eq!(maps.elem_children, vec![vec![0], vec![1]]);
        assert_eq!(maps.vertex_persist, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_triangle_red_split() {
        let mut m = Mesh::from_raw(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        m.reclassify_boundary().unwrap();
        let (out, maps) = rgb_refine(&m, &[1]).unwrap();
        assert_eq!(out.n_elements(), 4);
        assert_eq!(out.n_vertices(), 6);
        assert_eq!(maps.elem_children[0], vec![0, 1, 2, 3]);
        assert_conforming(&out);
        assert!(out.detect_tangled().is_empty());
        assert_children_cover_parents(&m, &out, &maps);
    }

    #[test]
    fn square_one_red_one_green_closure() {
        // Refining one triangle of the 2-triangle square forces a green
        // bisection of its neighbor across the shared diagonal: 4 + 2 = 6
        // elements, verified against the edge-count conformity oracle.
        let m = unit_square();
        let (out, maps) = rgb_refine(&m, &[1, 0]).unwrap();
        assert_eq!(out.n_elements(), 6);
        assert_eq!(maps.elem_children[0].len(), 4);
        assert_eq!(maps.elem_children[1].len(), 2);
        assert_conforming(&out);
        assert!(out.detect_tangled().is_empty());
        assert_children_cover_parents(&m, &out, &maps);
    }

    #[test]
    fn uniform_refine_counts() {
        let m = unit_square();
        assert_eq!(uniform_refine(&m, 0).unwrap().n_elements(), 2);
        assert_eq!(uniform_refine(&m, 1).unwrap().n_elements(), 8);
        assert_eq!(uniform_refine(&m, 3).unwrap().n_elements(), 128);
    }

    #[test]
    fn uniform_equals_all_ones_rgb() {
        let m = unit_square();
        let u = uniform_refine(&m, 1).unwrap();
        let (r, _) = rgb_refine(&m, &[1, 1]).unwrap();
        assert_eq!(u.n_elements(), r.n_elements());
        // Same triangles up to ordering: compare sorted centroid lists.
        let mut cu: Vec<_> = (0..u.n_elements()).map(|e| u.centroid(e)).collect();
        let mut cr: Vec<_> = (0..r.n_elements()).map(|e| r.centroid(e)).collect();
        let key = |p: &[f64; 2]| (p[0] * 1e9) as i64 * 1_000_000_007 + (p[1] * 1e9) as i64;
        cu.sort_by_key(key);
        cr.sort_by_key(key);
        for (a, b) in cu.iter().zip(cr.iter()) {
            assert_relative_eq!(a[0], b[0], epsilon = 1e-15);
            assert_relative_eq!(a[1], b[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn boundary_midpoints_inherit_component() {
        let m = unit_square();
        let (out, _) = rgb_refine(&m, &[1, 1]).unwrap();
        // Bottom edge midpoint (0.5, 0) must be an Edge vertex on the
        // component whose line is y = 0.
        let v = out
            .coords
            .iter()
            .position(|p| (p[0] - 0.5).abs() < 1e-14 && p[1].abs() < 1e-14)
            .unwrap();
        match out.boundary_class[v] {
            BoundaryClass::Edge(c) => {
                assert!(out.components[c].contains([0.5, 0.0], 1e-12));
                let t = out.edge_component_dir(c);
                assert_relative_eq!(t[0].abs(), 1.0, epsilon = 1e-14);
            }
            other => panic!("expected Edge, got {other:?}"),
        }
        // The square's center vertex is interior.
        let v = out
            .coords
            .iter()
            .position(|p| (p[0] - 0.5).abs() < 1e-14 && (p[1] - 0.5).abs() < 1e-14)
            .unwrap();
        assert_eq!(out.boundary_class[v], BoundaryClass::Interior);
    }

    #[test]
    fn tangled_input_rejected() {
        let m = Mesh::from_raw(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(rgb_refine(&m, &[1]).is_err());
    }

    #[test]
    fn blue_closure_preserves_area_and_conformity() {
        // A 4-triangle fan where flagging two opposite elements forces a blue
        // split in between.
        let mut m = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]],
            vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]],
        )
        .unwrap();
        m.reclassify_boundary().unwrap();
        let (out, maps) = rgb_refine(&m, &[1, 0, 1, 0]).unwrap();
        assert_conforming(&out);
        assert!(out.detect_tangled().is_empty());
        assert_children_cover_parents(&m, &out, &maps);
        // Elements 1 and 3 each have two marked edges -> blue, 3 children.
        assert_eq!(maps.elem_children[1].len(), 3);
        assert_eq!(maps.elem_children[3].len(), 3);
    }
}
