//! Local metric-conforming remesher: split, collapse, flip and smooth until
//! every metric edge length lies in `[1/√2, √2]`.

use std::collections::HashMap;

use crate::mesh::{MeshResult, TriMesh};
use crate::tensor::{add, scale, signed_area, sub, Sym2, Vec2};

const SQRT2: f64 = std::f64::consts::SQRT_2;
const LEFT: u8 = 1;
const RIGHT: u8 = 2;
const BOTTOM: u8 = 4;
const TOP: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RemeshOptions {
    pub max_passes: usize,
    /// Splitting stops once the element count would exceed this.
    pub max_elements: usize,
    /// Quality every collapse, flip or smoothing move may fall to.
    pub quality_floor: f64,
}

impl Default for RemeshOptions {
    fn default() -> Self {
        RemeshOptions {
            max_passes: 10,
            max_elements: 400_000,
            quality_floor: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RemeshReport {
    pub passes: usize,
    /// A pass produced an invalid mesh and was discarded.
    pub warning: bool,
    /// All edges ended inside the target band.
    pub conforming: bool,
    pub splits: usize,
    pub collapses: usize,
    pub flips: usize,
    pub moves: usize,
    /// Fraction of output edges outside the band.
    pub out_of_band: f64,
}

/// Endpoint-quadrature length `½(√(eᵀM_a e) + √(eᵀM_b e))`.
pub fn metric_edge_length(pa: Vec2, pb: Vec2, ma: &Sym2, mb: &Sym2) -> f64 {
    let e = sub(pb, pa);
    0.5 * (ma.quad(e).max(0.0).sqrt() + mb.quad(e).max(0.0).sqrt())
}

/// `4√3 |K|_M / Σ L_M²`: 1 for a triangle equilateral in the metric,
/// negative when inverted.
fn quality(p: [Vec2; 3], m: &Sym2) -> f64 {
    let area = signed_area(p[0], p[1], p[2]) * m.det().max(0.0).sqrt();
    let l2: f64 = (0..3).map(|i| m.quad(sub(p[(i + 1) % 3], p[i]))).sum();
    4.0 * 3f64.sqrt() * area / l2
}

struct Background<'a> {
    mesh: &'a TriMesh,
    logs: Vec<Sym2>,
}

impl Background<'_> {
    fn at(&self, p: Vec2) -> MeshResult<Sym2> {
        super::interpolate_metric(self.mesh, &self.logs, p)
    }
}

struct Work<'a> {
    width: f64,
    height: f64,
    pts: Vec<Vec2>,
    sides: Vec<u8>,
    met: Vec<Sym2>,
    alive_v: Vec<bool>,
    tris: Vec<[usize; 3]>,
    alive_t: Vec<bool>,
    v2t: Vec<Vec<usize>>,
    bg: Background<'a>,
    opts: RemeshOptions,
}

fn sides_of(p: Vec2, w: f64, h: f64) -> u8 {
    let tol = 1e-9 * w.max(h);
    let mut s = 0;
    if p[0].abs() <= tol {
        s |= LEFT;
    }
    if (p[0] - w).abs() <= tol {
        s |= RIGHT;
    }
    if p[1].abs() <= tol {
        s |= BOTTOM;
    }
    if (p[1] - h).abs() <= tol {
        s |= TOP;
    }
    s
}

impl<'a> Work<'a> {
    fn new(mesh: &'a TriMesh, metric: &[Sym2], opts: &RemeshOptions) -> Self {
        let (w, h) = (mesh.width(), mesh.height());
        let met: Vec<Sym2> = metric.iter().map(|m| *m * (1.0 / 3.0)).collect();
        let logs = met.iter().map(Sym2::log).collect();
        let mut work = Work {
            width: w,
            height: h,
            pts: mesh.vertices().to_vec(),
            sides: mesh.vertices().iter().map(|&p| sides_of(p, w, h)).collect(),
            met,
            alive_v: vec![true; mesh.n_vertices()],
            tris: mesh.triangles().to_vec(),
            alive_t: vec![true; mesh.n_elements()],
            v2t: Vec::new(),
            bg: Background { mesh, logs },
            opts: opts.clone(),
        };
        work.rebuild_v2t();
        work
    }

    fn rebuild_v2t(&mut self) {
        self.v2t = vec![Vec::new(); self.pts.len()];
        for (t, tri) in self.tris.iter().enumerate() {
            if self.alive_t[t] {
                for &v in tri {
                    self.v2t[v].push(t);
                }
            }
        }
    }

    fn n_alive_tris(&self) -> usize {
        self.alive_t.iter().filter(|&&a| a).count()
    }

    fn len(&self, a: usize, b: usize) -> f64 {
        metric_edge_length(self.pts[a], self.pts[b], &self.met[a], &self.met[b])
    }

    fn tri_quality(&self, t: [usize; 3]) -> f64 {
        let m = (self.met[t[0]] + self.met[t[1]] + self.met[t[2]]) * (1.0 / 3.0);
        quality([self.pts[t[0]], self.pts[t[1]], self.pts[t[2]]], &m)
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = Vec::new();
        for (t, tri) in self.tris.iter().enumerate() {
            if !self.alive_t[t] {
                continue;
            }
            for i in 0..3 {
                let (a, b) = (tri[i], tri[(i + 1) % 3]);
                e.push((a.min(b), a.max(b)));
            }
        }
        e.sort_unstable();
        e.dedup();
        e
    }

    fn neighbours(&self, v: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.v2t[v]
            .iter()
            .flat_map(|&t| self.tris[t])
            .filter(|&u| u != v)
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    fn out_of_band(&self) -> f64 {
        let edges = self.edges();
        let bad = edges
            .iter()
            .filter(|&&(a, b)| !(1.0 / SQRT2..=SQRT2).contains(&self.len(a, b)))
            .count();
        bad as f64 / edges.len() as f64
    }

    fn in_band(&self) -> bool {
        self.out_of_band() == 0.0
    }

    fn add_vertex(&mut self, p: Vec2, sides: u8) -> MeshResult<usize> {
        let mut p = p;
        if sides & LEFT != 0 {
            p[0] = 0.0;
        }
        if sides & RIGHT != 0 {
            p[0] = self.width;
        }
        if sides & BOTTOM != 0 {
            p[1] = 0.0;
        }
        if sides & TOP != 0 {
            p[1] = self.height;
        }
        let m = self.bg.at(p)?;
        self.pts.push(p);
        self.sides.push(sides);
        self.met.push(m);
        self.alive_v.push(true);
        Ok(self.pts.len() - 1)
    }

    /// Splits every edge longer than √2 at its midpoint in one sweep using
    /// the 1-, 2- and 3-edge subdivision templates.
    fn split_pass(&mut self) -> MeshResult<usize> {
        let budget = self.opts.max_elements.saturating_sub(self.n_alive_tris());
        let mut long: Vec<(f64, usize, usize)> = self
            .edges()
            .into_iter()
            .map(|(a, b)| (self.len(a, b), a, b))
            .filter(|e| e.0 > SQRT2)
            .collect();
        long.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        // each split adds at most two triangles
        long.truncate(budget / 2);
        let mut mid: HashMap<(usize, usize), usize> = HashMap::with_capacity(long.len());
        for &(_, a, b) in &long {
            let p = scale(add(self.pts[a], self.pts[b]), 0.5);
            let v = self.add_vertex(p, self.sides[a] & self.sides[b])?;
            mid.insert((a, b), v);
        }
        if mid.is_empty() {
            return Ok(0);
        }
        let get = |a: usize, b: usize| mid.get(&(a.min(b), a.max(b))).copied();
        let mut out = Vec::with_capacity(self.tris.len() + 2 * mid.len());
        for (t, &tri) in self.tris.iter().enumerate() {
            if !self.alive_t[t] {
                continue;
            }
            let m = [
                get(tri[0], tri[1]),
                get(tri[1], tri[2]),
                get(tri[2], tri[0]),
            ];
            let count = m.iter().filter(|x| x.is_some()).count();
            match count {
                0 => out.push(tri),
                1 => {
                    let r = (0..3).find(|&i| m[i].is_some()).unwrap();
                    let (v0, v1, v2) = (tri[r], tri[(r + 1) % 3], tri[(r + 2) % 3]);
                    let m0 = m[r].unwrap();
                    out.push([v0, m0, v2]);
                    out.push([m0, v1, v2]);
                }
                2 => {
                    // rotate so the unmarked edge is (v2, v0)
                    let r = (0..3).find(|&i| m[(i + 2) % 3].is_none()).unwrap();
                    let (v0, v1, v2) = (tri[r], tri[(r + 1) % 3], tri[(r + 2) % 3]);
                    let (m0, m1) = (m[r].unwrap(), m[(r + 1) % 3].unwrap());
                    out.push([m0, v1, m1]);
                    if self.len(v0, m1) <= self.len(m0, v2) {
                        out.push([v0, m0, m1]);
                        out.push([v0, m1, v2]);
                    } else {
                        out.push([v0, m0, v2]);
                        out.push([m0, m1, v2]);
                    }
                }
                _ => {
                    let (m0, m1, m2) = (m[0].unwrap(), m[1].unwrap(), m[2].unwrap());
                    out.push([tri[0], m0, m2]);
                    out.push([m0, tri[1], m1]);
                    out.push([m2, m1, tri[2]]);
                    out.push([m0, m1, m2]);
                }
            }
        }
        self.alive_t = vec![true; out.len()];
        self.tris = out;
        self.rebuild_v2t();
        Ok(mid.len())
    }

    fn collapse_pass(&mut self) -> usize {
        let mut short: Vec<(f64, usize, usize)> = self
            .edges()
            .into_iter()
            .map(|(a, b)| (self.len(a, b), a, b))
            .filter(|e| e.0 < 1.0 / SQRT2)
            .collect();
        short.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut done = 0;
        for (_, a, b) in short {
            if !(self.alive_v[a] && self.alive_v[b]) || self.len(a, b) >= 1.0 / SQRT2 {
                continue;
            }
            // prefer removing the vertex with fewer boundary constraints
            let (first, second) = if self.sides[a].count_ones() <= self.sides[b].count_ones() {
                ((a, b), (b, a))
            } else {
                ((b, a), (a, b))
            };
            if self.try_collapse(first.0, first.1) || self.try_collapse(second.0, second.1) {
                done += 1;
            }
        }
        done
    }

    /// Moves `a` onto `b` and deletes the triangles sharing edge `ab`.
    fn try_collapse(&mut self, a: usize, b: usize) -> bool {
        if self.sides[a] & !self.sides[b] != 0 {
            return false;
        }
        let shared: Vec<usize> = self.v2t[a]
            .iter()
            .copied()
            .filter(|&t| self.tris[t].contains(&b))
            .collect();
        let expected = if self.sides[a] != 0 { 1 } else { 2 };
        if shared.len() != expected {
            return false;
        }
        let mut opposite: Vec<usize> = shared
            .iter()
            .map(|&t| *self.tris[t].iter().find(|&&v| v != a && v != b).unwrap())
            .collect();
        opposite.sort_unstable();
        let na = self.neighbours(a);
        let nb = self.neighbours(b);
        let common: Vec<usize> = na
            .iter()
            .copied()
            .filter(|v| nb.binary_search(v).is_ok())
            .collect();
        if common != opposite {
            return false;
        }
        for &x in &na {
            if x != b && self.len(b, x) > SQRT2 {
                return false;
            }
        }
        let mut old_q = f64::INFINITY;
        let mut new_q = f64::INFINITY;
        for &t in &self.v2t[a] {
            let tri = self.tris[t];
            old_q = old_q.min(self.tri_quality(tri));
            if shared.contains(&t) {
                continue;
            }
            let moved = tri.map(|v| if v == a { b } else { v });
            let p = moved.map(|v| self.pts[v]);
            if !(signed_area(p[0], p[1], p[2]) > 0.0) {
                return false;
            }
            new_q = new_q.min(self.tri_quality(moved));
        }
        if new_q < old_q.min(self.opts.quality_floor) {
            return false;
        }
        let ball = std::mem::take(&mut self.v2t[a]);
        for t in ball {
            if shared.contains(&t) {
                self.alive_t[t] = false;
                for v in self.tris[t] {
                    if v != a {
                        self.v2t[v].retain(|&x| x != t);
                    }
                }
            } else {
                for v in self.tris[t].iter_mut() {
                    if *v == a {
                        *v = b;
                    }
                }
                self.v2t[b].push(t);
            }
        }
        self.alive_v[a] = false;
        true
    }

    fn flip_pass(&mut self) -> usize {
        let mut done = 0;
        for (a, b) in self.edges() {
            let shared: Vec<usize> = self.v2t[a]
                .iter()
                .copied()
                .filter(|&t| self.tris[t].contains(&b))
                .collect();
            if shared.len() != 2 {
                continue;
            }
            // orient: t1 = [a, b, c], t2 = [b, a, d]
            let (t1, t2) = if has_directed(self.tris[shared[0]], a, b) {
                (shared[0], shared[1])
            } else {
                (shared[1], shared[0])
            };
            let c = third(self.tris[t1], a, b);
            let d = third(self.tris[t2], a, b);
            if self.v2t[c].iter().any(|&t| self.tris[t].contains(&d)) {
                continue;
            }
            let n1 = [c, a, d];
            let n2 = [d, b, c];
            let area_ok =
                |t: [usize; 3]| signed_area(self.pts[t[0]], self.pts[t[1]], self.pts[t[2]]) > 0.0;
            if !(area_ok(n1) && area_ok(n2)) {
                continue;
            }
            let old_q = self.tri_quality([a, b, c]).min(self.tri_quality([b, a, d]));
            let new_q = self.tri_quality(n1).min(self.tri_quality(n2));
            if new_q > old_q * (1.0 + 1e-6) + 1e-12 {
                self.tris[t1] = n1;
                self.tris[t2] = n2;
                self.v2t[a].retain(|&t| t != t2);
                self.v2t[b].retain(|&t| t != t1);
                self.v2t[c].push(t2);
                self.v2t[d].push(t1);
                done += 1;
            }
        }
        done
    }

    /// Relaxes each interior vertex halfway toward the point that would give
    /// every incident edge unit metric length.
    fn smooth_pass(&mut self) -> MeshResult<usize> {
        let mut moved = 0;
        for v in 0..self.pts.len() {
            if !self.alive_v[v] || self.sides[v] != 0 || self.v2t[v].is_empty() {
                continue;
            }
            let p = self.pts[v];
            let nbrs = self.neighbours(v);
            let mut target = [0.0, 0.0];
            let mut usable = 0;
            for &u in &nbrs {
                let l = self.len(v, u);
                if l > 1e-12 {
                    target = add(
                        target,
                        add(self.pts[u], scale(sub(p, self.pts[u]), 1.0 / l)),
                    );
                    usable += 1;
                }
            }
            if usable == 0 {
                continue;
            }
            let target = scale(target, 1.0 / usable as f64);
            let trial = add(p, scale(sub(target, p), 0.5));
            let ball: Vec<[usize; 3]> = self.v2t[v].iter().map(|&t| self.tris[t]).collect();
            let old_q = ball
                .iter()
                .map(|&t| self.tri_quality(t))
                .fold(f64::INFINITY, f64::min);
            let old_m = self.met[v];
            let Ok(m) = self.bg.at(trial) else { continue };
            self.pts[v] = trial;
            self.met[v] = m;
            let ok = ball
                .iter()
                .all(|t| signed_area(self.pts[t[0]], self.pts[t[1]], self.pts[t[2]]) > 0.0);
            let new_q = ball
                .iter()
                .map(|&t| self.tri_quality(t))
                .fold(f64::INFINITY, f64::min);
            if ok && new_q >= old_q.min(self.opts.quality_floor) {
                moved += 1;
            } else {
                self.pts[v] = p;
                self.met[v] = old_m;
            }
        }
        Ok(moved)
    }

    fn compact(&self) -> MeshResult<TriMesh> {
        let mut index = vec![usize::MAX; self.pts.len()];
        let mut pts = Vec::new();
        for (v, &alive) in self.alive_v.iter().enumerate() {
            if alive && !self.v2t[v].is_empty() {
                index[v] = pts.len();
                pts.push(self.pts[v]);
            }
        }
        let tris = self
            .tris
            .iter()
            .zip(&self.alive_t)
            .filter(|(_, &a)| a)
            .map(|(t, _)| t.map(|v| index[v]))
            .collect();
        TriMesh::new(self.width, self.height, pts, tris)
    }
}

fn has_directed(t: [usize; 3], a: usize, b: usize) -> bool {
    (0..3).any(|i| t[i] == a && t[(i + 1) % 3] == b)
}

fn third(t: [usize; 3], a: usize, b: usize) -> usize {
    *t.iter().find(|&&v| v != a && v != b).unwrap()
}

/// Fraction of the edges of `mesh` whose length in `vertex_metric / 3` lies
/// outside `[1/√2, √2]`.
pub fn band_violation(mesh: &TriMesh, vertex_metric: &[Sym2]) -> f64 {
    Work::new(mesh, vertex_metric, &RemeshOptions::default()).out_of_band()
}

/// Remeshes `mesh` so that its edges have unit length in the metric
/// `vertex_metric / 3`, the scaling under which an equilateral triangle
/// inscribed in the unit ball of `vertex_metric` has unit edges.
///
/// A pass whose output fails validation is discarded; the last valid mesh
/// is returned with `warning` set.
pub fn remesh(
    mesh: &TriMesh,
    vertex_metric: &[Sym2],
    opts: &RemeshOptions,
) -> MeshResult<(TriMesh, RemeshReport)> {
    let mut work = Work::new(mesh, vertex_metric, opts);
    let mut report = RemeshReport::default();
    let mut last = mesh.clone();
    for _ in 0..opts.max_passes {
        if work.in_band() {
            break;
        }
        report.passes += 1;
        report.splits += work.split_pass()?;
        report.collapses += work.collapse_pass();
        report.flips += work.flip_pass();
        report.moves += work.smooth_pass()?;
        match work.compact() {
            Ok(m) => last = m,
            Err(_) => {
                report.warning = true;
                return Ok((last, report));
            }
        }
    }
    report.out_of_band = work.out_of_band();
    report.conforming = report.out_of_band == 0.0;
    Ok((last, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_mesh, mesh_stats};

    #[test]
    fn edge_length_isotropic() {
        let m = Sym2::scaled_identity(4.0);
        assert!((metric_edge_length([0.0, 0.0], [3.0, 4.0], &m, &m) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn quality_of_equilateral_is_one() {
        let p = [[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        assert!((quality(p, &Sym2::identity()) - 1.0).abs() < 1e-12);
        assert!(quality([p[0], p[2], p[1]], &Sym2::identity()) < 0.0);
    }

    #[test]
    fn sides_bitmask() {
        assert_eq!(sides_of([0.0, 0.0], 4.0, 2.0), LEFT | BOTTOM);
        assert_eq!(sides_of([4.0, 1.0], 4.0, 2.0), RIGHT);
        assert_eq!(sides_of([1.0, 1.0], 4.0, 2.0), 0);
    }

    #[test]
    fn uniform_metric_coarsens_and_refines() {
        let mesh = build_uniform_mesh(16, 16, 1.0).unwrap();
        // unit edges for the metric 3/h² · I are of length h
        let coarse = vec![Sym2::scaled_identity(3.0 / 4.0); mesh.n_vertices()];
        let (out, rep) = remesh(&mesh, &coarse, &RemeshOptions::default()).unwrap();
        assert!(!rep.warning);
        assert!(
            out.n_elements() < mesh.n_elements() / 2,
            "{}",
            out.n_elements()
        );
        let fine = vec![Sym2::scaled_identity(3.0 / 0.25); mesh.n_vertices()];
        let (out, rep) = remesh(&mesh, &fine, &RemeshOptions::default()).unwrap();
        assert!(!rep.warning);
        assert!(out.n_elements() > 2 * mesh.n_elements());
        assert!(mesh_stats(&out).h_max < 1.0);
    }
}
