//! Text and image artifacts written by the commands.

use std::collections::HashMap;
use std::fmt::Write;

use sha2::{Digest, Sha256};

use segflow::bregman::IterRecord;
use segflow::fem::ScalarFieldP1;
use segflow::mesh::TriMesh;
use segflow::tensor::{add, scale, sub, Sym2, Vec2};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Checksum of the little-endian bytes of a nodal field.
pub fn field_checksum(phi: &ScalarFieldP1) -> String {
    let bytes: Vec<u8> = phi.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Zero level of `φ` as polylines. Crossing points are interpolated linearly
/// along element edges whose endpoints fall on opposite sides of `φ > 0`.
pub fn zero_level_polylines(mesh: &TriMesh, phi: &ScalarFieldP1) -> Vec<Vec<Vec2>> {
    type Key = (usize, usize);
    let inside = |v: usize| phi.values[v] > 0.0;
    let crossing = |a: usize, b: usize| {
        let (fa, fb) = (phi.values[a], phi.values[b]);
        let t = fa / (fa - fb);
        add(
            mesh.vertex(a),
            scale(sub(mesh.vertex(b), mesh.vertex(a)), t),
        )
    };
    let key = |a: usize, b: usize| (a.min(b), a.max(b));

    let mut segments: Vec<[Key; 2]> = Vec::new();
    let mut points: HashMap<Key, Vec2> = HashMap::new();
    for t in mesh.triangles() {
        let cut: Vec<Key> = (0..3)
            .map(|i| (t[i], t[(i + 1) % 3]))
            .filter(|&(a, b)| inside(a) != inside(b))
            .map(|(a, b)| {
                let k = key(a, b);
                // interpolate from the lower index so both neighbours agree bitwise
                points.entry(k).or_insert_with(|| crossing(k.0, k.1));
                k
            })
            .collect();
        if cut.len() == 2 {
            segments.push([cut[0], cut[1]]);
        }
    }

    let mut adj: HashMap<Key, Vec<usize>> = HashMap::new();
    for (s, seg) in segments.iter().enumerate() {
        for k in seg {
            adj.entry(*k).or_default().push(s);
        }
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let walk = |start: Key, first: usize, used: &mut Vec<bool>| {
        let mut line = vec![start];
        let (mut cur, mut seg) = (start, first);
        loop {
            used[seg] = true;
            let next = if segments[seg][0] == cur {
                segments[seg][1]
            } else {
                segments[seg][0]
            };
            line.push(next);
            cur = next;
            match adj[&cur].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        line
    };
    // open chains start at a key with one segment (the domain boundary)
    let mut keys: Vec<Key> = adj.keys().copied().collect();
    keys.sort_unstable();
    for pass_open in [true, false] {
        for &k in &keys {
            if pass_open && adj[&k].len() != 1 {
                continue;
            }
            if let Some(&s) = adj[&k].iter().find(|&&s| !used[s]) {
                lines.push(
                    walk(k, s, &mut used)
                        .into_iter()
                        .map(|k| points[&k])
                        .collect(),
                );
            }
        }
    }
    lines
}

pub fn contour_svg(width: f64, height: f64, lines: &[Vec<Vec2>]) -> String {
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    for line in lines {
        out.push_str("<polyline fill=\"none\" stroke=\"red\" stroke-width=\"0.25\" points=\"");
        for (i, p) in line.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{},{}", p[0], p[1]);
        }
        out.push_str("\"/>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Parses the `points` attributes written by [`contour_svg`].
pub fn parse_svg_points(svg: &str) -> Vec<Vec<Vec2>> {
    svg.split("points=\"")
        .skip(1)
        .map(|chunk| {
            chunk[..chunk.find('"').unwrap_or(chunk.len())]
                .split_whitespace()
                .filter_map(|pair| {
                    let (x, y) = pair.split_once(',')?;
                    Some([x.parse().ok()?, y.parse().ok()?])
                })
                .collect()
        })
        .collect()
}

/// Legacy ASCII VTK unstructured grid with `phi` on the points.
pub fn mesh_vtk(mesh: &TriMesh, phi: &ScalarFieldP1) -> String {
    let (nv, ne) = (mesh.n_vertices(), mesh.n_elements());
    let mut out = String::from(
        "# vtk DataFile Version 3.0\nsegflow mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n",
    );
    let _ = writeln!(out, "POINTS {nv} double");
    for p in mesh.vertices() {
        let _ = writeln!(out, "{} {} 0", p[0], p[1]);
    }
    let _ = writeln!(out, "CELLS {ne} {}", 4 * ne);
    for t in mesh.triangles() {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(out, "CELL_TYPES {ne}");
    for _ in 0..ne {
        out.push_str("5\n");
    }
    let _ = writeln!(
        out,
        "POINT_DATA {nv}\nSCALARS phi double 1\nLOOKUP_TABLE default"
    );
    for v in &phi.values {
        let _ = writeln!(out, "{v}");
    }
    out
}

/// Iteration log without wall-clock columns so that reruns are
/// byte-identical; timings go to [`timing_csv`].
pub fn log_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("k,residual,energy,n_el,inner_steps,adapted,phi_min,phi_max\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{},{},{},{},{}",
            r.k, r.residual, r.energy, r.n_el, r.inner_steps, r.adapted as u8, r.phi_min, r.phi_max
        );
    }
    out
}

pub fn timing_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("k,t_opt,t_adapt\n");
    for r in history {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.k, r.t_opt, r.t_adapt);
    }
    out
}

/// One row `k,m11,m12,m22` per element.
pub fn metric_csv(tensors: &[Sym2]) -> String {
    let mut out = String::from("k,m11,m12,m22\n");
    for (k, m) in tensors.iter().enumerate() {
        let _ = writeln!(out, "{k},{:e},{:e},{:e}", m.xx, m.xy, m.yy);
    }
    out
}
