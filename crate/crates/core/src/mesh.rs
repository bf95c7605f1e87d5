//! Conforming triangulations of the rectangle `[0, W] × [0, H]`, per-element
//! anisotropic geometry, vertex patches and bucket-accelerated point location.

use std::collections::HashMap;
use std::sync::OnceLock;

use thiserror::Error;

use crate::tensor::{norm, signed_area, sub, Mat2, Sym2, Vec2};

/// Area of the reference triangle inscribed in the unit circle.
pub const REF_AREA: f64 = 3.0 * 1.732_050_807_568_877_2 / 4.0;

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

/// Vertices of the reference element, counter-clockwise.
pub const REF_VERTICES: [Vec2; 3] = [[0.0, 1.0], [-SQRT3_2, -0.5], [SQRT3_2, -0.5]];

/// Tolerance on barycentric coordinates when deciding containment.
pub const BARY_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("mesh spacing must be positive and finite, got {0}")]
    NonPositiveSpacing(f64),
    #[error("domain {width}x{height} must have positive extent")]
    InvalidDomain { width: f64, height: f64 },
    #[error("triangle {element} references vertex {vertex} but only {count} exist")]
    InvalidIndex {
        element: usize,
        vertex: usize,
        count: usize,
    },
    #[error("element {element} is degenerate or inverted (signed area {area:e})")]
    Degenerate { element: usize, area: f64 },
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("edge ({0}, {1}) is traversed in the same direction by both neighbours")]
    InconsistentOrientation(usize, usize),
    #[error("boundary edge ({0}, {1}) does not lie on the domain boundary")]
    BoundaryOffDomain(usize, usize),
    #[error("vertex {0} belongs to no triangle")]
    OrphanVertex(usize),
    #[error("vertex {0} lies outside the domain")]
    VertexOutsideDomain(usize),
    #[error("total area {actual} differs from domain area {expected}")]
    AreaMismatch { expected: f64, actual: f64 },
    #[error("point ({0}, {1}) lies outside the mesh")]
    OutsideDomain(f64, f64),
}

pub type MeshResult<T> = Result<T, MeshError>;

/// Immutable conforming triangulation with adjacency tables.
///
/// Local edge `i` of a triangle joins local vertices `i` and `(i + 1) % 3`.
#[derive(Debug)]
pub struct TriMesh {
    width: f64,
    height: f64,
    vertices: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    neighbors: Vec<[Option<usize>; 3]>,
    v2t: Vec<Vec<usize>>,
    areas: Vec<f64>,
    locator: OnceLock<Locator>,
}

impl Clone for TriMesh {
    fn clone(&self) -> Self {
        TriMesh {
            width: self.width,
            height: self.height,
            vertices: self.vertices.clone(),
            triangles: self.triangles.clone(),
            neighbors: self.neighbors.clone(),
            v2t: self.v2t.clone(),
            areas: self.areas.clone(),
            locator: OnceLock::new(),
        }
    }
}

impl PartialEq for TriMesh {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.vertices == other.vertices
            && self.triangles == other.triangles
    }
}

impl TriMesh {
    /// Builds and validates a mesh covering `[0, width] × [0, height]`.
    pub fn new(
        width: f64,
        height: f64,
        vertices: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
    ) -> MeshResult<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(MeshError::InvalidDomain { width, height });
        }
        let nv = vertices.len();
        let tol = 1e-9 * width.max(height);
        for (i, v) in vertices.iter().enumerate() {
            if !(v[0] >= -tol && v[0] <= width + tol && v[1] >= -tol && v[1] <= height + tol) {
                return Err(MeshError::VertexOutsideDomain(i));
            }
        }
        let mut areas = Vec::with_capacity(triangles.len());
        let mut v2t = vec![Vec::new(); nv];
        for (k, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= nv {
                    return Err(MeshError::InvalidIndex {
                        element: k,
                        vertex: v,
                        count: nv,
                    });
                }
            }
            let a = signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if !(a > 0.0) {
                return Err(MeshError::Degenerate {
                    element: k,
                    area: a,
                });
            }
            areas.push(a);
            for &v in t {
                v2t[v].push(k);
            }
        }
        if let Some(v) = v2t.iter().position(|l| l.is_empty()) {
            return Err(MeshError::OrphanVertex(v));
        }

        let mut edge_map: HashMap<(usize, usize), (usize, usize)> =
            HashMap::with_capacity(triangles.len() * 2);
        let mut neighbors = vec![[None; 3]; triangles.len()];
        for (k, t) in triangles.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match edge_map.get(&key) {
                    None => {
                        edge_map.insert(key, (k, i));
                    }
                    Some(&(k2, i2)) => {
                        if neighbors[k2][i2].is_some() {
                            return Err(MeshError::NonManifoldEdge(key.0, key.1));
                        }
                        if triangles[k2][i2] == a {
                            return Err(MeshError::InconsistentOrientation(key.0, key.1));
                        }
                        neighbors[k2][i2] = Some(k);
                        neighbors[k][i] = Some(k2);
                    }
                }
            }
        }
        let on_side = |p: Vec2, q: Vec2| {
            let near = |a: f64, b: f64| (a - b).abs() <= tol;
            (near(p[0], 0.0) && near(q[0], 0.0))
                || (near(p[0], width) && near(q[0], width))
                || (near(p[1], 0.0) && near(q[1], 0.0))
                || (near(p[1], height) && near(q[1], height))
        };
        for (k, t) in triangles.iter().enumerate() {
            for i in 0..3 {
                if neighbors[k][i].is_none() {
                    let (a, b) = (t[i], t[(i + 1) % 3]);
                    if !on_side(vertices[a], vertices[b]) {
                        return Err(MeshError::BoundaryOffDomain(a, b));
                    }
                }
            }
        }
        let total: f64 = areas.iter().sum();
        let expected = width * height;
        if ((total - expected) / expected).abs() > 1e-8 {
            return Err(MeshError::AreaMismatch {
                expected,
                actual: total,
            });
        }
        Ok(TriMesh {
            width,
            height,
            vertices,
            triangles,
            neighbors,
            v2t,
            areas,
            locator: OnceLock::new(),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn vertex(&self, v: usize) -> Vec2 {
        self.vertices[v]
    }

    pub fn triangle(&self, k: usize) -> [usize; 3] {
        self.triangles[k]
    }

    pub fn corners(&self, k: usize) -> [Vec2; 3] {
        let t = self.triangles[k];
        [
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
        ]
    }

    pub fn area(&self, k: usize) -> f64 {
        self.areas[k]
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn centroid(&self, k: usize) -> Vec2 {
        let [a, b, c] = self.corners(k);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Neighbour across local edge `i`, `None` on the boundary.
    pub fn neighbor(&self, k: usize, i: usize) -> Option<usize> {
        self.neighbors[k][i]
    }

    pub fn is_boundary_edge(&self, k: usize, i: usize) -> bool {
        self.neighbors[k][i].is_none()
    }

    /// Triangles incident to vertex `v`, ascending.
    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.v2t[v]
    }

    /// Unique edges as `(a, b)` with `a < b`, in first-seen order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.triangles.len() * 3 / 2 + self.vertices.len());
        for (k, t) in self.triangles.iter().enumerate() {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                match self.neighbors[k][i] {
                    Some(n) if n < k => {}
                    _ => out.push((a.min(b), a.max(b))),
                }
            }
        }
        out
    }

    /// Total area of all elements.
    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    fn locator(&self) -> &Locator {
        self.locator.get_or_init(|| Locator::build(self))
    }

    /// Containing element and barycentric coordinates of `p`. Points on
    /// shared edges resolve to the lowest element index.
    pub fn locate(&self, p: Vec2) -> MeshResult<(usize, [f64; 3])> {
        let tol = 1e-9 * self.width.max(self.height);
        if !(p[0] >= -tol && p[0] <= self.width + tol && p[1] >= -tol && p[1] <= self.height + tol)
        {
            return Err(MeshError::OutsideDomain(p[0], p[1]));
        }
        let loc = self.locator();
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &k in loc.candidates(p) {
            let l = self.barycentric(k, p);
            let worst = l[0].min(l[1]).min(l[2]);
            if worst >= -BARY_TOL {
                return Ok((k, l));
            }
            if best.is_none_or(|b| worst > b.2) {
                best = Some((k, l, worst));
            }
        }
        // Rounding can leave a boundary point marginally outside every
        // candidate; accept the least-violating one and project.
        match best {
            Some((k, l, worst)) if worst >= -1e-7 => Ok((k, project_barycentric(l))),
            _ => Err(MeshError::OutsideDomain(p[0], p[1])),
        }
    }

    pub fn barycentric(&self, k: usize, p: Vec2) -> [f64; 3] {
        let [a, b, c] = self.corners(k);
        let area = self.areas[k];
        let l0 = signed_area(p, b, c) / area;
        let l1 = signed_area(a, p, c) / area;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Elements sharing at least one vertex with `k`, ascending, `k` included.
    pub fn patch(&self, k: usize) -> Patch {
        let mut elements: Vec<usize> = self.triangles[k]
            .iter()
            .flat_map(|&v| self.v2t[v].iter().copied())
            .collect();
        elements.sort_unstable();
        elements.dedup();
        let area = elements.iter().map(|&t| self.areas[t]).sum();
        Patch { elements, area }
    }

    pub fn geometry(&self, k: usize) -> MeshResult<ElementGeometry> {
        ElementGeometry::from_corners(self.corners(k)).ok_or(MeshError::Degenerate {
            element: k,
            area: self.areas[k],
        })
    }

    /// Whether `v` lies on the domain boundary; `corner` when on two sides.
    pub fn boundary_kind(&self, v: usize) -> BoundaryKind {
        boundary_kind(self.vertices[v], self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Interior,
    /// On the side `x = const` (`Vertical`) or `y = const` (`Horizontal`).
    Vertical,
    Horizontal,
    Corner,
}

pub(crate) fn boundary_kind(p: Vec2, width: f64, height: f64) -> BoundaryKind {
    let tol = 1e-9 * width.max(height);
    let on_x = p[0].abs() <= tol || (p[0] - width).abs() <= tol;
    let on_y = p[1].abs() <= tol || (p[1] - height).abs() <= tol;
    match (on_x, on_y) {
        (true, true) => BoundaryKind::Corner,
        (true, false) => BoundaryKind::Vertical,
        (false, true) => BoundaryKind::Horizontal,
        (false, false) => BoundaryKind::Interior,
    }
}

fn project_barycentric(l: [f64; 3]) -> [f64; 3] {
    let c = [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)];
    let s = c[0] + c[1] + c[2];
    [c[0] / s, c[1] / s, c[2] / s]
}

/// Uniform background grid of buckets listing the triangles whose bounding
/// box meets each cell.
#[derive(Debug)]
struct Locator {
    nx: usize,
    ny: usize,
    cw: f64,
    ch: f64,
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl Locator {
    fn build(mesh: &TriMesh) -> Self {
        let n = mesh.n_elements().max(1) as f64;
        let aspect = mesh.width / mesh.height;
        let nx = ((n * aspect / 2.0).sqrt().round() as usize).clamp(1, 4096);
        let ny = ((n / aspect / 2.0).sqrt().round() as usize).clamp(1, 4096);
        let cw = mesh.width / nx as f64;
        let ch = mesh.height / ny as f64;
        let pad = 1e-9 * mesh.width.max(mesh.height);
        let cell_range = |lo: f64, hi: f64, size: f64, count: usize| {
            let a = (((lo - pad) / size).floor().max(0.0) as usize).min(count - 1);
            let b = (((hi + pad) / size).floor().max(0.0) as usize).min(count - 1);
            (a, b)
        };
        let mut counts = vec![0usize; nx * ny];
        let mut spans = Vec::with_capacity(mesh.n_elements());
        for k in 0..mesh.n_elements() {
            let [a, b, c] = mesh.corners(k);
            let (x0, x1) = (a[0].min(b[0]).min(c[0]), a[0].max(b[0]).max(c[0]));
            let (y0, y1) = (a[1].min(b[1]).min(c[1]), a[1].max(b[1]).max(c[1]));
            let (i0, i1) = cell_range(x0, x1, cw, nx);
            let (j0, j1) = cell_range(y0, y1, ch, ny);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    counts[j * nx + i] += 1;
                }
            }
            spans.push((i0, i1, j0, j1));
        }
        let mut offsets = vec![0usize; nx * ny + 1];
        for c in 0..nx * ny {
            offsets[c + 1] = offsets[c] + counts[c];
        }
        let mut fill = offsets.clone();
        let mut items = vec![0usize; offsets[nx * ny]];
        for (k, &(i0, i1, j0, j1)) in spans.iter().enumerate() {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let c = j * nx + i;
                    items[fill[c]] = k;
                    fill[c] += 1;
                }
            }
        }
        Locator {
            nx,
            ny,
            cw,
            ch,
            offsets,
            items,
        }
    }

    fn candidates(&self, p: Vec2) -> &[usize] {
        let i = ((p[0] / self.cw).floor().max(0.0) as usize).min(self.nx - 1);
        let j = ((p[1] / self.ch).floor().max(0.0) as usize).min(self.ny - 1);
        let c = j * self.nx + i;
        &self.items[self.offsets[c]..self.offsets[c + 1]]
    }
}

/// Elements touching `K` (vertex adjacency) and their total area.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub elements: Vec<usize>,
    pub area: f64,
}

/// Affine map `x = M x̂ + w` from the reference element with the polar
/// factorisation `M = B Z` and spectral form `B = Rᵀ Λ R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementGeometry {
    pub m: Mat2,
    pub b: Sym2,
    pub z: Mat2,
    pub lambda: [f64; 2],
    pub r: [Vec2; 2],
    pub stretching: f64,
    pub shift: Vec2,
}

impl ElementGeometry {
    /// Reference vertex `i` maps onto corner `i`. Returns `None` for
    /// degenerate or inverted triangles.
    pub fn from_corners(p: [Vec2; 3]) -> Option<Self> {
        let phys = Mat2::from_cols(sub(p[1], p[0]), sub(p[2], p[0]));
        let reference = Mat2::from_cols(
            sub(REF_VERTICES[1], REF_VERTICES[0]),
            sub(REF_VERTICES[2], REF_VERTICES[0]),
        );
        let m = phys * reference.inverse()?;
        if !(m.det() > 0.0) {
            return None;
        }
        let mw = m.apply(REF_VERTICES[0]);
        let shift = sub(p[0], mw);
        let e = m.gram_rows().eigen();
        let lambda = [e.values[0].max(0.0).sqrt(), e.values[1].max(0.0).sqrt()];
        if !(lambda[1] > 0.0) {
            return None;
        }
        let b = Sym2::from_eigen(lambda, e.vectors);
        let b_inv = Sym2::from_eigen([1.0 / lambda[0], 1.0 / lambda[1]], e.vectors);
        let z = b_inv.to_mat() * m;
        Some(ElementGeometry {
            m,
            b,
            z,
            lambda,
            r: e.vectors,
            stretching: lambda[0] / lambda[1],
            shift,
        })
    }

    /// `R` with rows `r1`, `r2`.
    pub fn rotation(&self) -> Mat2 {
        Mat2([self.r[0], self.r[1]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshStats {
    pub n_el: usize,
    pub n_vertices: usize,
    pub h_min: f64,
    pub h_max: f64,
    pub max_stretching: f64,
    pub mean_stretching: f64,
}

pub fn mesh_stats(mesh: &TriMesh) -> MeshStats {
    let (mut h_min, mut h_max) = (f64::INFINITY, 0.0f64);
    for (a, b) in mesh.edges() {
        let l = norm(sub(mesh.vertex(a), mesh.vertex(b)));
        h_min = h_min.min(l);
        h_max = h_max.max(l);
    }
    let (mut s_max, mut s_sum) = (0.0f64, 0.0);
    for k in 0..mesh.n_elements() {
        let s = ElementGeometry::from_corners(mesh.corners(k))
            .map(|g| g.stretching)
            .unwrap_or(f64::INFINITY);
        s_max = s_max.max(s);
        s_sum += s;
    }
    MeshStats {
        n_el: mesh.n_elements(),
        n_vertices: mesh.n_vertices(),
        h_min,
        h_max,
        max_stretching: s_max,
        mean_stretching: s_sum / mesh.n_elements() as f64,
    }
}

pub fn locate_point(mesh: &TriMesh, p: Vec2) -> MeshResult<(usize, [f64; 3])> {
    mesh.locate(p)
}

pub fn element_geometry(mesh: &TriMesh, k: usize) -> MeshResult<ElementGeometry> {
    mesh.geometry(k)
}

pub fn patch(mesh: &TriMesh, k: usize) -> Patch {
    mesh.patch(k)
}

/// Structured mesh: each cell split along its `(i, j)`–`(i+1, j+1)` diagonal.
/// A spacing that does not divide the domain is rounded to the nearest
/// divisor per axis.
pub fn build_uniform_mesh(width: usize, height: usize, spacing: f64) -> MeshResult<TriMesh> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(MeshError::NonPositiveSpacing(spacing));
    }
    let (w, h) = (width as f64, height as f64);
    if width == 0 || height == 0 {
        return Err(MeshError::InvalidDomain {
            width: w,
            height: h,
        });
    }
    let nx = ((w / spacing).round() as usize).max(1);
    let ny = ((h / spacing).round() as usize).max(1);
    let (hx, hy) = (w / nx as f64, h / ny as f64);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            // exact end coordinates so boundary vertices sit on ∂Ω
            let x = if i == nx { w } else { i as f64 * hx };
            let y = if j == ny { h } else { j as f64 * hy };
            vertices.push([x, y]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    TriMesh::new(w, h, vertices, triangles)
}
