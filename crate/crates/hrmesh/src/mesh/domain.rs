//! Coarse mesh generation for the benchmark domains.
//!
//! Domains are simple polygons: the unit square, L-shapes with a sampled
//! inner corner, and randomized convex polygons (distorted circle hulls).
//! Meshing runs ear clipping, Lawson edge flips toward the Delaunay
//! criterion, and red refinement of the largest elements until the requested
//! element budget is roughly met.

use super::refine::rgb_refine;
use super::{BoundaryClass, Mesh, BOUNDARY_TOL};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A simple polygon, counter-clockwise, no repeated vertices.
#[derive(Debug, Clone)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn unit_square() -> Self {
        Polygon { points: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] }
    }

    /// `(0,1)^2` minus the axis-aligned rectangle `[p0_x,1) x [p0_y,1)`.
    pub fn l_shape(p0: [f64; 2]) -> Self {
        Polygon {
            points: vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [1.0, p0[1]],
                [p0[0], p0[1]],
                [p0[0], 1.0],
                [0.0, 1.0],
            ],
        }
    }

    /// Random convex polygon: ten equidistant points on the circle of radius
    /// 0.4 around (0.5, 0.5), each distorted uniformly in `(-0.2, 0.2)^2`,
    /// followed by a convex hull normalized into `(0,1)^2`.
    pub fn convex_from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts: Vec<[f64; 2]> = (0..10)
            .map(|k| {
                let ang = 2.0 * std::f64::consts::PI * (k as f64) / 10.0;
                let base = [0.5 + 0.4 * ang.cos(), 0.5 + 0.4 * ang.sin()];
                [base[0] + rng.gen_range(-0.2..0.2), base[1] + rng.gen_range(-0.2..0.2)]
            })
            .collect();
        let hull = convex_hull(&mut pts);
        // Normalize the hull into the unit box.
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &hull {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let points = hull
            .into_iter()
            .map(|p| [(p[0] - lo[0]) / (hi[0] - lo[0]), (p[1] - lo[1]) / (hi[1] - lo[1])])
            .collect();
        Polygon { points }
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let mut a = 0.0;
        for k in 0..n {
            let p = self.points[k];
            let q = self.points[(k + 1) % n];
            a += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * a
    }

    /// Point-in-polygon by winding (even-odd ray crossing).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.points.len();
        let mut inside = false;
        for k in 0..n {
            let a = self.points[k];
            let b = self.points[(k + 1) % n];
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        let n = self.points.len();
        let mut best = f64::MAX;
        for k in 0..n {
            best = best.min(segment_distance(self.points[k], self.points[(k + 1) % n], p));
        }
        best
    }
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(pts: &mut Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Domain families used by the benchmark problems.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub enum DomainKind {
    UnitSquare,
    LShape { p0: [f64; 2] },
    ConvexPolygon { seed: u64 },
}

impl DomainKind {
    pub fn polygon(&self) -> Polygon {
        match self {
            DomainKind::UnitSquare => Polygon::unit_square(),
            DomainKind::LShape { p0 } => Polygon::l_shape(*p0),
            DomainKind::ConvexPolygon { seed } => Polygon::convex_from_seed(*seed),
        }
    }
}

/// Tags boundary vertices of `mesh` against the polygon `geometry`:
/// vertices coinciding with a polygon corner become `Corner`, vertices on a
/// polygon edge become `Edge` with a component id, everything else stays
/// `Interior`. Errors if a mesh boundary vertex lies off the polygon
/// boundary beyond [`BOUNDARY_TOL`].
///
/// Component numbering is canonical (derived from the mesh's own boundary
/// chains, see [`Mesh::reclassify_boundary`]) so that classification,
/// refinement propagation, and file round-trips all agree.
pub fn classify_boundary(mesh: &Mesh, geometry: &Polygon) -> Result<Mesh> {
    let mut out = mesh.clone();
    out.reclassify_boundary()?;
    let n = geometry.points.len();
    for (v, &p) in out.coords.iter().enumerate() {
        match out.boundary_class[v] {
            BoundaryClass::Interior => {}
            BoundaryClass::Corner => {
                let on_corner = geometry.points.iter().any(|c| {
                    (c[0] - p[0]).abs() <= BOUNDARY_TOL && (c[1] - p[1]).abs() <= BOUNDARY_TOL
                });
                if !on_corner {
                    return Err(Error::Mesh(format!(
                        "boundary vertex {v} at {p:?} is a mesh corner but not a domain corner"
                    )));
                }
            }
            BoundaryClass::Edge(_) => {
                let on_edge = (0..n).any(|k| {
                    segment_distance(geometry.points[k], geometry.points[(k + 1) % n], p)
                        <= BOUNDARY_TOL
                });
                if !on_edge {
                    return Err(Error::Mesh(format!(
                        "boundary vertex {v} at {p:?} lies off the domain boundary"
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Generates a coarse conforming triangulation of the requested domain with
/// roughly `target_elements` elements. Deterministic under `seed`.
pub fn generate_domain(kind: &DomainKind, target_elements: usize, seed: u64) -> Result<Mesh> {
    let _ = seed; // geometry randomness lives in DomainKind::ConvexPolygon
    let polygon = kind.polygon();
    if polygon.signed_area() <= 0.0 {
        return Err(Error::Mesh("polygon must be counter-clockwise and non-degenerate".into()));
    }
    if *kind == DomainKind::UnitSquare && target_elements <= 2 {
        let mesh = Mesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )?;
        return classify_boundary(&mesh, &polygon);
    }

    let tris = ear_clip(&polygon)?;
    let mut mesh = Mesh::from_raw(polygon.points.clone(), tris)?;
    lawson_flips(&mut mesh, &polygon);
    let mut mesh = classify_boundary(&mesh, &polygon)?;

    // Red-refine the largest elements until the budget is roughly met; the
    // four similar children keep the post-flip quality.
    while mesh.n_elements() < target_elements {
        let deficit = target_elements - mesh.n_elements();
        let n_flag = (deficit + 2) / 3; // each red split adds ~3 elements
        let mut order: Vec<usize> = (0..mesh.n_elements()).collect();
        order.sort_by(|&a, &b| mesh.area(b).partial_cmp(&mesh.area(a)).unwrap().then(a.cmp(&b)));
        let mut flags = vec![0u8; mesh.n_elements()];
        for &e in order.iter().take(n_flag.max(1)) {
            flags[e] = 1;
        }
        mesh = rgb_refine(&mesh, &flags)?.0;
    }
    Ok(mesh)
}

/// Ear-clipping triangulation of a simple polygon.
fn ear_clip(polygon: &Polygon) -> Result<Vec<[usize; 3]>> {
    let pts = &polygon.points;
    let mut ring: Vec<usize> = (0..pts.len()).collect();
    let mut tris = Vec::new();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let in_tri = |a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]| {
        let d1 = cross(a, b, p);
        let d2 = cross(b, c, p);
        let d3 = cross(c, a, p);
        d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0
    };
    let mut guard = 0;
    while ring.len() > 3 {
        guard += 1;
        if guard > 10_000 {
            return Err(Error::Mesh("ear clipping failed to terminate".into()));
        }
        let n = ring.len();
        let mut clipped = false;
        for k in 0..n {
            let (ia, ib, ic) = (ring[(k + n - 1) % n], ring[k], ring[(k + 1) % n]);
            let (a, b, c) = (pts[ia], pts[ib], pts[ic]);
            if cross(a, b, c) <= 1e-15 {
                continue; // reflex or degenerate corner
            }
            let blocked = ring
                .iter()
                .any(|&iv| iv != ia && iv != ib && iv != ic && in_tri(a, b, c, pts[iv]));
            if blocked {
                continue;
            }
            tris.push([ia, ib, ic]);
            ring.remove(k);
            clipped = true;
            break;
        }
        if !clipped {
            return Err(Error::Mesh("no ear found; polygon may be self-intersecting".into()));
        }
    }
    tris.push([ring[0], ring[1], ring[2]]);
    Ok(tris)
}

/// Lawson flips toward the Delaunay criterion; boundary edges are never
/// flipped and flips that would leave the domain (relevant on the non-convex
/// L-shape) are rejected by an orientation check.
fn lawson_flips(mesh: &mut Mesh, _polygon: &Polygon) {
    let incircle = |a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]| -> f64 {
        // > 0 iff d lies inside the circumcircle of ccw triangle (a, b, c).
        let m = [
            [a[0] - d[0], a[1] - d[1], (a[0] - d[0]).powi(2) + (a[1] - d[1]).powi(2)],
            [b[0] - d[0], b[1] - d[1], (b[0] - d[0]).powi(2) + (b[1] - d[1]).powi(2)],
            [c[0] - d[0], c[1] - d[1], (c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)],
        ];
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    for _round in 0..50 {
        let mut flipped = false;
        // Edge -> (elem, opposite local vertex) pairs.
        let mut edge_map: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize)>> =
            std::collections::BTreeMap::new();
        for (e, t) in mesh.tris.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (t[(k + 1) % 3], t[(k + 2) % 3]);
                edge_map.entry((i.min(j), i.max(j))).or_default().push((e, k));
            }
        }
        for (_, uses) in edge_map {
            if uses.len() != 2 {
                continue;
            }
            let (e1, k1) = uses[0];
            let (e2, k2) = uses[1];
            let t1 = mesh.tris[e1];
            let t2 = mesh.tris[e2];
            let p = t1[k1]; // apex of e1
            let q = t2[k2]; // apex of e2
            let (u, v) = (t1[(k1 + 1) % 3], t1[(k1 + 2) % 3]);
            let (a, b, c, d) =
                (mesh.coords[p], mesh.coords[u], mesh.coords[v], mesh.coords[q]);
            if incircle(a, b, c, d) <= 1e-14 {
                continue;
            }
            // Candidate flip: (p,u,q) and (p,q,v); keep only if both stay ccw.
            let det = |x: [f64; 2], y: [f64; 2], z: [f64; 2]| {
                (y[0] - x[0]) * (z[1] - x[1]) - (y[1] - x[1]) * (z[0] - x[0])
            };
            if det(a, b, mesh.coords[q]) <= 1e-14 || det(a, mesh.coords[q], c) <= 1e-14 {
                continue;
            }
            mesh.tris[e1] = [p, u, q];
            mesh.tris[e2] = [p, q, v];
            flipped = true;
            break; // edge map is stale after a flip; rebuild
        }
        if !flipped {
            break;
        }
    }
}
