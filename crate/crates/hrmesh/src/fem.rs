//! P1 finite-element solvers and error indicators.
//!
//! Two problems are supported: Poisson with a Gaussian-mixture load and
//! homogeneous Dirichlet boundary, and implicit-Euler heat diffusion with a
//! moving exponential source. Both assemble sparse symmetric systems and
//! solve them with diagonally preconditioned conjugate gradients (dense
//! Cholesky as a fallback for small systems).
//!
//! Error indicators compare a coarse solution against a reference solution
//! on a uniformly refined mesh by sampling both at the centroids of the
//! reference elements.

use crate::mesh::Mesh;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A nodal scalar field on a particular mesh.
#[derive(Debug, Clone)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(n: usize) -> Self {
        Field { values: vec![0.0; n] }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("FIELD {}\n", self.values.len());
        for v in &self.values {
            s.push_str(&format!("{v:.16e}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Field> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty field file".into()))?;
        let n: usize = header
            .strip_prefix("FIELD ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format("bad FIELD header".into()))?;
        let values: Vec<f64> = lines
            .take(n)
            .map(|l| l.trim().parse().map_err(|_| Error::Format("bad field value".into())))
            .collect::<Result<_>>()?;
        if values.len() != n {
            return Err(Error::Format("field file truncated".into()));
        }
        Ok(Field { values })
    }
}

/// One Gaussian component of a mixture load: weight, mean, full SPD
/// covariance (stored row-major).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// The PDE being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Poisson,
    Heat,
}

/// A fully specified problem: domain plus PDE data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub kind: PdeKind,
    pub domain: crate::mesh::DomainKind,
    /// Poisson: three-component Gaussian mixture load.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gmm: Vec<GmmComponent>,
    /// Heat: source path endpoints.
    #[serde(default)]
    pub heat_path: Option<([f64; 2], [f64; 2])>,
    /// Heat: thermal diffusivity.
    #[serde(default = "default_diffusivity")]
    pub diffusivity: f64,
}

fn default_diffusivity() -> f64 {
    1e-3
}

/// Number of implicit-Euler steps for the heat problem.
pub const HEAT_STEPS: usize = 20;
/// Final physical time of the heat problem; steps are uniform on
/// `{0.5, 1.0, ..., 10.0}`.
pub const HEAT_T_END: f64 = 10.0;

/// Evaluates the Gaussian-mixture load at a point.
///
/// ```
/// use hrmesh::fem::{gmm_density, GmmComponent};
/// let c = GmmComponent { weight: 1.0, mean: [0.5, 0.5], cov: [[0.01, 0.0], [0.0, 0.01]] };
/// let peak = gmm_density(&[c], [0.5, 0.5]);
/// let expected = 1.0 / (2.0 * std::f64::consts::PI * 0.01);
/// assert!((peak - expected).abs() < 1e-12 * expected);
/// ```
pub fn gmm_density(components: &[GmmComponent], p: [f64; 2]) -> f64 {
    let mut total = 0.0;
    for c in components {
        let det = c.cov[0][0] * c.cov[1][1] - c.cov[0][1] * c.cov[1][0];
        let inv = [
            [c.cov[1][1] / det, -c.cov[0][1] / det],
            [-c.cov[1][0] / det, c.cov[0][0] / det],
        ];
        let d = [p[0] - c.mean[0], p[1] - c.mean[1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
            + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        total += c.weight * (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
    }
    total
}

impl ProblemInstance {
    /// The load function of a Poisson instance.
    pub fn gmm_load(&self, p: [f64; 2]) -> Result<f64> {
        if self.kind != PdeKind::Poisson {
            return Err(Error::Fem("gmm_load on a non-Poisson instance".into()));
        }
        Ok(gmm_density(&self.gmm, p))
    }

    /// Heat source position at physical step `m` of [`HEAT_STEPS`].
    pub fn heat_source_pos(&self, m: usize) -> Result<[f64; 2]> {
        let (p0, p1) = self
            .heat_path
            .ok_or_else(|| Error::Fem("heat instance without a source path".into()))?;
        let s = m as f64 / HEAT_STEPS as f64;
        Ok([p0[0] + s * (p1[0] - p0[0]), p0[1] + s * (p1[1] - p0[1])])
    }
}

/// Heat source intensity at a point given the source position.
pub fn heat_source(p: [f64; 2], src: [f64; 2]) -> f64 {
    1000.0 * (-100.0 * ((p[0] - src[0]).abs() + (p[1] - src[1]).abs())).exp()
}

// ---------------------------------------------------------------------------
// Sparse symmetric systems
// ---------------------------------------------------------------------------

/// Symmetric sparse matrix in CSR form plus a right-hand side.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    /// Builds CSR from triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], rhs: Vec<f64>) -> Self {
        let mut per_row: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        for &(i, j, v) in triplets {
            *per_row[i].entry(j).or_insert(0.0) += v;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &per_row {
            for (&j, &v) in row {
                col_idx.push(j);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseSystem { n, row_ptr, col_idx, vals, rhs }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            out[i] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    /// Maximum asymmetry `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let mut entries = std::collections::BTreeMap::new();
        let mut amax: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                entries.insert((i, self.col_idx[k]), self.vals[k]);
                amax = amax.max(self.vals[k].abs());
            }
        }
        let mut worst: f64 = 0.0;
        for (&(i, j), &v) in &entries {
            let w = entries.get(&(j, i)).copied().unwrap_or(0.0);
            worst = worst.max((v - w).abs());
        }
        if amax > 0.0 {
            worst / amax
        } else {
            0.0
        }
    }

    /// Solves the system: diagonally preconditioned CG with relative
    /// tolerance 1e-12 and at most `10 n` iterations; a dense Cholesky
    /// fallback covers systems below 2000 unknowns if CG stalls.
    pub fn solve(&self) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Ok(Vec::new());
        }
        match self.solve_pcg(1e-12, 10 * self.n) {
            Ok(x) => Ok(x),
            Err(_) if self.n < 2000 => self.solve_dense(),
            Err(e) => Err(e),
        }
    }

    fn solve_pcg(&self, rel_tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        let n = self.n;
        let diag = self.diagonal();
        if diag.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
            return Err(Error::Fem("system diagonal is not positive".into()));
        }
        let b_norm = norm(&self.rhs);
        if b_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = vec![0.0; n];
        let mut r = self.rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut rz: f64 = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for _ in 0..max_iter {
            self.matvec(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                return Err(Error::Fem("CG breakdown: matrix not positive definite".into()));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if norm(&r) <= rel_tol * b_norm {
                return Ok(x);
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::Fem("CG did not converge".into()))
    }

    fn solve_dense(&self) -> Result<Vec<f64>> {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                a[i * n + self.col_idx[k]] = self.vals[k];
            }
        }
        // Cholesky A = L L^T.
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Fem("dense factorization failed: not SPD".into()));
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        let mut y = self.rhs.clone();
        for i in 0..n {
            for k in 0..i {
                let t = a[i * n + k] * y[k];
                y[i] -= t;
            }
            y[i] /= a[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let t = a[k * n + i] * y[k];
                y[i] -= t;
            }
            y[i] /= a[i * n + i];
        }
        Ok(y)
    }

    /// Relative residual `|Ax - b| / |b|`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        self.matvec(x, &mut ax);
        let b_norm = norm(&self.rhs);
        if b_norm == 0.0 {
            return norm(&ax);
        }
        let r: f64 = ax.iter().zip(&self.rhs).map(|(a, b)| (a - b) * (a - b)).sum();
        r.sqrt() / b_norm
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Constant gradients of the three P1 basis functions on an element.
pub fn basis_gradients(mesh: &Mesh, e: usize) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = mesh.tris[e];
    let (pa, pb, pc) = (mesh.coords[a], mesh.coords[b], mesh.coords[c]);
    let det = mesh.jacobian_det(e);
    let g = [
        [(pb[1] - pc[1]) / det, (pc[0] - pb[0]) / det],
        [(pc[1] - pa[1]) / det, (pa[0] - pc[0]) / det],
        [(pa[1] - pb[1]) / det, (pb[0] - pa[0]) / det],
    ];
    (g, det)
}

fn interior_index_map(mesh: &Mesh) -> (Vec<Option<usize>>, usize) {
    let mut map = vec![None; mesh.n_vertices()];
    let mut n = 0;
    for v in 0..mesh.n_vertices() {
        if !mesh.boundary_class[v].is_boundary() {
            map[v] = Some(n);
            n += 1;
        }
    }
    (map, n)
}

/// Assembles the Dirichlet-reduced stiffness system `K u = f` with the load
/// integrated by the one-point centroid rule.
fn assemble_poisson(
    mesh: &Mesh,
    load: impl Fn([f64; 2]) -> f64,
) -> Result<(SparseSystem, Vec<Option<usize>>)> {
    if !mesh.detect_tangled().is_empty() {
        return Err(Error::Fem("cannot assemble on a tangled mesh".into()));
    }
    let (map, n) = interior_index_map(mesh);
    let mut triplets = Vec::new();
    let mut rhs = vec![0.0; n];
    for e in 0..mesh.n_elements() {
        let (g, det) = basis_gradients(mesh, e);
        let area = 0.5 * det;
        let f_c = load(mesh.centroid(e));
        let t = mesh.tris[e];
        for i in 0..3 {
            let Some(gi) = map[t[i]] else { continue };
            rhs[gi] += f_c * area / 3.0;
            for j in 0..3 {
                let Some(gj) = map[t[j]] else { continue };
                let k_ij = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                triplets.push((gi, gj, k_ij));
            }
        }
    }
    Ok((SparseSystem::from_triplets(n, &triplets, rhs), map))
}

/// Solves the Poisson problem on `mesh`.
pub fn solve_poisson(mesh: &Mesh, instance: &ProblemInstance) -> Result<Field> {
    if instance.kind != PdeKind::Poisson {
        return Err(Error::Fem("solve_poisson on a non-Poisson instance".into()));
    }
    let gmm = instance.gmm.clone();
    solve_with_load(mesh, move |p| gmm_density(&gmm, p))
}

/// Poisson solve with an arbitrary load function (manufactured-solution
/// studies use this directly).
pub fn solve_with_load(mesh: &Mesh, load: impl Fn([f64; 2]) -> f64) -> Result<Field> {
    let (system, map) = assemble_poisson(mesh, load)?;
    let x = system.solve()?;
    let res = system.residual(&x);
    if res > 1e-10 {
        return Err(Error::Fem(format!("linear solve residual {res:.3e} above tolerance")));
    }
    let mut field = Field::zeros(mesh.n_vertices());
    for (v, m) in map.iter().enumerate() {
        if let Some(i) = *m {
            field.values[v] = x[i];
        }
    }
    Ok(field)
}

/// Solves the implicit-Euler heat problem and returns the final-time field.
///
/// The initial condition is zero; each step solves
/// `(M + dt a K) u_{m+1} = M u_m + dt f_{m+1}` with the consistent P1 mass
/// matrix, restricted to interior vertices (zero Dirichlet boundary).
pub fn solve_heat(mesh: &Mesh, instance: &ProblemInstance) -> Result<Field> {
    if instance.kind != PdeKind::Heat {
        return Err(Error::Fem("solve_heat on a non-Heat instance".into()));
    }
    if !mesh.detect_tangled().is_empty() {
        return Err(Error::Fem("cannot assemble on a tangled mesh".into()));
    }
    let (map, n) = interior_index_map(mesh);
    let dt = HEAT_T_END / HEAT_STEPS as f64;
    let a_coef = instance.diffusivity;

    // System matrix M + dt a K and the bare mass matrix M.
    let mut sys_triplets = Vec::new();
    let mut mass_triplets = Vec::new();
    for e in 0..mesh.n_elements() {
        let (g, det) = basis_gradients(mesh, e);
        let area = 0.5 * det;
        let t = mesh.tris[e];
        for i in 0..3 {
            let Some(gi) = map[t[i]] else { continue };
            for j in 0..3 {
                let Some(gj) = map[t[j]] else { continue };
                let k_ij = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                let m_ij = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                sys_triplets.push((gi, gj, m_ij + dt * a_coef * k_ij));
                mass_triplets.push((gi, gj, m_ij));
            }
        }
    }
    let mut system = SparseSystem::from_triplets(n, &sys_triplets, vec![0.0; n]);
    let mass = SparseSystem::from_triplets(n, &mass_triplets, vec![0.0; n]);

    let mut u = vec![0.0; n];
    let mut mu = vec![0.0; n];
    for m in 1..=HEAT_STEPS {
        let src = instance.heat_source_pos(m)?;
        mass.matvec(&u, &mut mu);
        let mut rhs = mu.clone();
        for e in 0..mesh.n_elements() {
            let area = mesh.area(e);
            let f_c = heat_source(mesh.centroid(e), src);
            for &v in &mesh.tris[e] {
                if let Some(gi) = map[v] {
                    rhs[gi] += dt * f_c * area / 3.0;
                }
            }
        }
        system.rhs = rhs;
        u = system.solve()?;
    }
    let mut field = Field::zeros(mesh.n_vertices());
    for (v, m) in map.iter().enumerate() {
        if let Some(i) = *m {
            field.values[v] = u[i];
        }
    }
    Ok(field)
}

/// Solves whichever problem the instance describes.
pub fn solve(mesh: &Mesh, instance: &ProblemInstance) -> Result<Field> {
    match instance.kind {
        PdeKind::Poisson => solve_poisson(mesh, instance),
        PdeKind::Heat => solve_heat(mesh, instance),
    }
}

// ---------------------------------------------------------------------------
// Point location and interpolation
// ---------------------------------------------------------------------------

/// Walk-based point locator with a full-scan fallback.
pub struct Locator<'m> {
    mesh: &'m Mesh,
    neighbors: Vec<[Option<usize>; 3]>,
    last: std::cell::Cell<usize>,
}

const BARY_TOL: f64 = 1e-10;

/// Barycentric coordinates of `p` with respect to element `e`.
pub fn barycentric(mesh: &Mesh, e: usize, p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = mesh.tris[e];
    let (pa, pb, pc) = (mesh.coords[a], mesh.coords[b], mesh.coords[c]);
    let det = mesh.jacobian_det(e);
    let l0 = ((pb[0] - p[0]) * (pc[1] - p[1]) - (pc[0] - p[0]) * (pb[1] - p[1])) / det;
    let l1 = ((pc[0] - p[0]) * (pa[1] - p[1]) - (pa[0] - p[0]) * (pc[1] - p[1])) / det;
    [l0, l1, 1.0 - l0 - l1]
}

/// P1 evaluation of `field` at `p` known to lie in element `e`.
pub fn eval_in_element(mesh: &Mesh, field: &Field, e: usize, l: [f64; 3]) -> f64 {
    let t = mesh.tris[e];
    l[0] * field.values[t[0]] + l[1] * field.values[t[1]] + l[2] * field.values[t[2]]
}

impl<'m> Locator<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let mut edge_owner: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
            Default::default();
        for (e, t) in mesh.tris.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (t[(k + 1) % 3], t[(k + 2) % 3]);
                edge_owner.entry((i.min(j), i.max(j))).or_default().push(e);
            }
        }
        let mut neighbors = vec![[None; 3]; mesh.n_elements()];
        for (e, t) in mesh.tris.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (t[(k + 1) % 3], t[(k + 2) % 3]);
                let owners = &edge_owner[&(i.min(j), i.max(j))];
                neighbors[e][k] = owners.iter().copied().find(|&o| o != e);
            }
        }
        Locator { mesh, neighbors, last: std::cell::Cell::new(0) }
    }

    pub fn barycentric(&self, e: usize, p: [f64; 2]) -> [f64; 3] {
        barycentric(self.mesh, e, p)
    }

    /// Finds the element containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        // Greedy walk: step across the face with the most negative
        // coordinate. Bounded to avoid cycling on distorted meshes.
        let mut e = self.last.get().min(self.mesh.n_elements().saturating_sub(1));
        for _ in 0..(2 * self.mesh.n_elements() + 8) {
            let l = self.barycentric(e, p);
            let (worst, &lw) =
                l.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap();
            if lw >= -BARY_TOL {
                self.last.set(e);
                return Ok((e, l));
            }
            match self.neighbors[e][worst] {
                Some(next) => e = next,
                None => break,
            }
        }
        // Scan fallback.
        let mut best_margin = f64::MIN;
        for e in 0..self.mesh.n_elements() {
            let l = self.barycentric(e, p);
            let lw = l.iter().cloned().fold(f64::MAX, f64::min);
            if lw >= -BARY_TOL {
                self.last.set(e);
                return Ok((e, l));
            }
            best_margin = best_margin.max(lw);
        }
        Err(Error::Fem(format!("point {p:?} lies outside the mesh (margin {best_margin:.3e})")))
    }
}

/// Evaluates a P1 field at arbitrary points inside the meshed domain.
///
/// ```
/// use hrmesh::mesh::{generate_domain, DomainKind, uniform_refine};
/// use hrmesh::fem::{interpolate_at, Field};
/// let m = generate_domain(&DomainKind::UnitSquare, 2, 0).unwrap();
/// let m = uniform_refine(&m, 2).unwrap();
/// // A globally linear field is reproduced exactly.
/// let f = Field { values: m.coords.iter().map(|p| 3.0 * p[0] - 2.0 * p[1] + 0.5).collect() };
/// let vals = interpolate_at(&m, &f, &[[0.3, 0.4]]).unwrap();
/// assert!((vals[0] - (3.0 * 0.3 - 2.0 * 0.4 + 0.5)).abs() < 1e-14);
/// ```
pub fn interpolate_at(mesh: &Mesh, field: &Field, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    let loc = Locator::new(mesh);
    points
        .iter()
        .map(|&p| {
            let (e, l) = loc.locate(p)?;
            let t = mesh.tris[e];
            Ok(l[0] * field.values[t[0]] + l[1] * field.values[t[1]] + l[2] * field.values[t[2]])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Error indicators
// ---------------------------------------------------------------------------

/// Reference-mesh sampling data: centroids and areas of the reference
/// elements plus the reference solution at the centroids, computed once per
/// episode.
#[derive(Debug, Clone)]
pub struct RefProbes {
    pub centroids: Vec<[f64; 2]>,
    pub areas: Vec<f64>,
    pub values: Vec<f64>,
}

impl RefProbes {
    pub fn new(ref_mesh: &Mesh, ref_field: &Field) -> Self {
        let n = ref_mesh.n_elements();
        let mut centroids = Vec::with_capacity(n);
        let mut areas = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for e in 0..n {
            let c = ref_mesh.centroid(e);
            centroids.push(c);
            areas.push(ref_mesh.area(e));
            // Same code path as the indicator sweep, so comparing the
            // reference against itself is exactly zero.
            let l = barycentric(ref_mesh, e, c);
            values.push(eval_in_element(ref_mesh, ref_field, e, l));
        }
        RefProbes { centroids, areas, values }
    }
}

/// Per-element error indicators of a coarse solution against the reference.
#[derive(Debug, Clone)]
pub struct Indicators {
    /// Max pointwise |u - u_ref| over reference centroids inside the element.
    pub eta_inf: Vec<f64>,
    /// Volume-weighted squared L2 discrepancy accumulated per element.
    pub eta_2_sq: Vec<f64>,
}

impl Indicators {
    /// Total squared error; exactly the sum of `eta_2_sq`.
    pub fn global_error_sq(&self) -> f64 {
        self.eta_2_sq.iter().sum()
    }
}

/// Computes both indicators in one sweep over the reference elements, in
/// reference-element index order.
pub fn indicators(mesh: &Mesh, field: &Field, probes: &RefProbes) -> Result<Indicators> {
    let loc = Locator::new(mesh);
    let n_e = mesh.n_elements();
    let mut eta_inf = vec![0.0; n_e];
    let mut eta_2_sq = vec![0.0; n_e];
    for k in 0..probes.centroids.len() {
        let p = probes.centroids[k];
        let (e, l) = loc.locate(p)?;
        let u = eval_in_element(mesh, field, e, l);
        let diff = (u - probes.values[k]).abs();
        if diff > eta_inf[e] {
            eta_inf[e] = diff;
        }
        eta_2_sq[e] += probes.areas[k] * diff * diff;
    }
    Ok(Indicators { eta_inf, eta_2_sq })
}

/// Total volume-weighted squared discrepancy between a coarse solution and
/// the reference solution.
pub fn global_error_sq(mesh: &Mesh, field: &Field, probes: &RefProbes) -> Result<f64> {
    Ok(indicators(mesh, field, probes)?.global_error_sq())
}
