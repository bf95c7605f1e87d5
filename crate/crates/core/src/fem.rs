//! P1 finite elements: assembly, Jacobi-preconditioned CG, the implicit
//! Euler solve of Step A, and field transfer between meshes.

use thiserror::Error;

use crate::mesh::{MeshError, TriMesh};
use crate::tensor::{dot, sub, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum FemError {
    #[error("{what}: expected {expected} values, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("conjugate gradients stalled after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub type FemResult<T> = Result<T, FemError>;

fn check_len(what: &'static str, expected: usize, actual: usize) -> FemResult<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(FemError::LengthMismatch {
            what,
            expected,
            actual,
        })
    }
}

/// Vertex values of a continuous piecewise-linear field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarFieldP1 {
    pub values: Vec<f64>,
}

impl ScalarFieldP1 {
    pub fn new(mesh: &TriMesh, values: Vec<f64>) -> FemResult<Self> {
        check_len("P1 field", mesh.n_vertices(), values.len())?;
        Ok(ScalarFieldP1 { values })
    }

    pub fn constant(mesh: &TriMesh, c: f64) -> Self {
        ScalarFieldP1 {
            values: vec![c; mesh.n_vertices()],
        }
    }

    pub fn from_fn(mesh: &TriMesh, f: impl Fn(Vec2) -> f64) -> Self {
        ScalarFieldP1 {
            values: mesh.vertices().iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at an arbitrary point of the domain.
    pub fn eval(&self, mesh: &TriMesh, p: Vec2) -> FemResult<f64> {
        let (k, l) = mesh.locate(p)?;
        Ok(self.eval_in(mesh, k, l))
    }

    pub fn eval_in(&self, mesh: &TriMesh, k: usize, l: [f64; 3]) -> f64 {
        let t = mesh.triangle(k);
        l[0] * self.values[t[0]] + l[1] * self.values[t[1]] + l[2] * self.values[t[2]]
    }
}

/// One 2-vector per element.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldP0 {
    pub values: Vec<Vec2>,
}

impl VectorFieldP0 {
    pub fn new(mesh: &TriMesh, values: Vec<Vec2>) -> FemResult<Self> {
        check_len("P0 field", mesh.n_elements(), values.len())?;
        Ok(VectorFieldP0 { values })
    }

    pub fn zeros(mesh: &TriMesh) -> Self {
        VectorFieldP0 {
            values: vec![[0.0, 0.0]; mesh.n_elements()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Symmetric matrix in compressed-row form with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSpd {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSpd {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn identity(n: usize) -> Self {
        SparseSpd {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *vals.last_mut().expect("entry exists") += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSpd {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(pos) => self.vals[self.row_ptr[i] + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_into(x, &mut y);
        y
    }

    fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            *yi = s;
        }
    }

    /// `a·self + b·other`; both operands must share the sparsity pattern.
    pub fn combine(&self, a: f64, other: &SparseSpd, b: f64) -> SparseSpd {
        assert!(
            self.row_ptr == other.row_ptr && self.cols == other.cols,
            "sparsity patterns differ"
        );
        SparseSpd {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self
                .vals
                .iter()
                .zip(&other.vals)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }
}

/// Gradients of the three barycentric basis functions on element `k`.
pub fn basis_gradients(mesh: &TriMesh, k: usize) -> [Vec2; 3] {
    let [a, b, c] = mesh.corners(k);
    let two_area = 2.0 * mesh.area(k);
    [
        [(b[1] - c[1]) / two_area, (c[0] - b[0]) / two_area],
        [(c[1] - a[1]) / two_area, (a[0] - c[0]) / two_area],
        [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area],
    ]
}

fn assemble(mesh: &TriMesh, local: impl Fn(usize) -> [[f64; 3]; 3]) -> SparseSpd {
    let mut triplets = Vec::with_capacity(9 * mesh.n_elements());
    for k in 0..mesh.n_elements() {
        let t = mesh.triangle(k);
        let e = local(k);
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((t[i], t[j], e[i][j]));
            }
        }
    }
    SparseSpd::from_triplets(mesh.n_vertices(), triplets)
}

pub fn assemble_mass(mesh: &TriMesh) -> SparseSpd {
    assemble(mesh, |k| {
        let d = mesh.area(k) / 6.0;
        let o = mesh.area(k) / 12.0;
        [[d, o, o], [o, d, o], [o, o, d]]
    })
}

pub fn assemble_stiffness(mesh: &TriMesh) -> SparseSpd {
    assemble(mesh, |k| {
        let g = basis_gradients(mesh, k);
        let a = mesh.area(k);
        let mut e = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = a * dot(g[i], g[j]);
            }
        }
        e
    })
}

pub fn gradient_p0(mesh: &TriMesh, phi: &ScalarFieldP1) -> VectorFieldP0 {
    let values = (0..mesh.n_elements())
        .map(|k| {
            let t = mesh.triangle(k);
            let g = basis_gradients(mesh, k);
            let mut out = [0.0, 0.0];
            for i in 0..3 {
                out[0] += phi.values[t[i]] * g[i][0];
                out[1] += phi.values[t[i]] * g[i][1];
            }
            out
        })
        .collect();
    VectorFieldP0 { values }
}

/// Weak divergence: entry `i` is `−Σ_K |K| ∇λ_i|_K · w_K`.
pub fn divergence_rhs(mesh: &TriMesh, w: &VectorFieldP0) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for k in 0..mesh.n_elements() {
        let t = mesh.triangle(k);
        let g = basis_gradients(mesh, k);
        let a = mesh.area(k);
        for i in 0..3 {
            out[t[i]] -= a * dot(g[i], w.values[k]);
        }
    }
    out
}

/// Load vector `∫ λ_i q` for a piecewise-constant `q`.
pub fn load_p0(mesh: &TriMesh, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for (k, &qk) in q.iter().enumerate() {
        let share = qk * mesh.area(k) / 3.0;
        for v in mesh.triangle(k) {
            out[v] += share;
        }
    }
    out
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn solve_spd(a: &SparseSpd, rhs: &[f64], tol: f64) -> FemResult<Vec<f64>> {
    let mut x = vec![0.0; a.dim()];
    solve_spd_from(a, rhs, &mut x, tol)?;
    Ok(x)
}

/// Jacobi-preconditioned CG starting from the contents of `x`. Stops once
/// `‖A x − rhs‖ ≤ tol ‖rhs‖`; gives up after `10·n` iterations.
pub fn solve_spd_from(a: &SparseSpd, rhs: &[f64], x: &mut [f64], tol: f64) -> FemResult<CgReport> {
    let n = a.dim();
    check_len("right-hand side", n, rhs.len())?;
    check_len("initial guess", n, x.len())?;
    if !(tol > 0.0) {
        return Err(FemError::InvalidParameter {
            name: "tol",
            value: tol,
        });
    }
    let b_norm = l2(rhs);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = a.mul_vec(x);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    let target = tol * b_norm;
    let mut res = l2(&r);
    if res <= target {
        return Ok(CgReport {
            iterations: 0,
            relative_residual: res / b_norm,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let cap = 10 * n.max(1);
    for it in 1..=cap {
        a.mul_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(FemError::NonConvergence {
                iterations: it,
                residual: res / b_norm,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = l2(&r);
        if res <= target {
            return Ok(CgReport {
                iterations: it,
                relative_residual: res / b_norm,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FemError::NonConvergence {
        iterations: cap,
        residual: res / b_norm,
    })
}

/// Options of the Step A inner loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepAOptions {
    pub dt: f64,
    pub alpha: f64,
    pub max_inner: usize,
    pub inner_tol: f64,
    pub cg_tol: f64,
}

/// Default backward-Euler step in pixel² units. The five inner steps blur the
/// source over roughly `sqrt(10 Δt)` pixels, so larger values smooth noise
/// but shift sharp interfaces by up to a pixel.
pub const DEFAULT_DT: f64 = 0.07;

impl Default for StepAOptions {
    fn default() -> Self {
        StepAOptions {
            dt: DEFAULT_DT,
            alpha: 1.0,
            max_inner: 5,
            inner_tol: 1e-3,
            cg_tol: 1e-8,
        }
    }
}

/// Mass, stiffness and the backward-Euler operator `M + Δt A` of one mesh.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub mass: SparseSpd,
    pub stiffness: SparseSpd,
    pub system: SparseSpd,
    pub dt: f64,
}

impl FemSystem {
    pub fn new(mesh: &TriMesh, dt: f64) -> Self {
        let mass = assemble_mass(mesh);
        let stiffness = assemble_stiffness(mesh);
        let system = mass.combine(1.0, &stiffness, dt);
        FemSystem {
            mass,
            stiffness,
            system,
            dt,
        }
    }

    /// `sqrt(vᵀ M v)`
    pub fn mass_norm(&self, v: &[f64]) -> f64 {
        let mv = self.mass.mul_vec(v);
        v.iter()
            .zip(&mv)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .max(0.0)
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepAOutcome {
    pub phi: ScalarFieldP1,
    pub inner_steps: usize,
    /// Field after the last inner step, before clamping.
    pub unclamped: Vec<f64>,
}

/// Backward-Euler steps of `∂φ/∂t = Δφ − s/μ + ∇·(b − d)` until the
/// relative update drops below `inner_tol` or `max_inner` steps elapse,
/// followed by clamping onto `[−α, α]`.
#[allow(clippy::too_many_arguments)]
pub fn step_a_with(
    mesh: &TriMesh,
    sys: &FemSystem,
    phi_k: &ScalarFieldP1,
    source: &[f64],
    d: &VectorFieldP0,
    b: &VectorFieldP0,
    mu: f64,
    opts: &StepAOptions,
) -> FemResult<StepAOutcome> {
    check_len("φ", mesh.n_vertices(), phi_k.len())?;
    check_len("source", mesh.n_elements(), source.len())?;
    check_len("d", mesh.n_elements(), d.len())?;
    check_len("b", mesh.n_elements(), b.len())?;
    if !(mu > 0.0) {
        return Err(FemError::InvalidParameter {
            name: "mu",
            value: mu,
        });
    }
    let q: Vec<f64> = source.iter().map(|s| -s / mu).collect();
    let w = VectorFieldP0 {
        values: b
            .values
            .iter()
            .zip(&d.values)
            .map(|(b, d)| sub(*b, *d))
            .collect(),
    };
    let mut forcing = load_p0(mesh, &q);
    for (f, g) in forcing.iter_mut().zip(divergence_rhs(mesh, &w)) {
        *f = sys.dt * (*f + g);
    }
    let mut current = phi_k.values.clone();
    let mut steps = 0;
    while steps < opts.max_inner {
        let mut rhs = sys.mass.mul_vec(&current);
        for (r, f) in rhs.iter_mut().zip(&forcing) {
            *r += f;
        }
        let mut next = current.clone();
        solve_spd_from(&sys.system, &rhs, &mut next, opts.cg_tol)?;
        steps += 1;
        let change = l2(&next
            .iter()
            .zip(&current)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>());
        let scale = l2(&current);
        current = next;
        if change <= opts.inner_tol * scale {
            break;
        }
    }
    let phi = ScalarFieldP1 {
        values: current
            .iter()
            .map(|v| v.clamp(-opts.alpha, opts.alpha))
            .collect(),
    };
    Ok(StepAOutcome {
        phi,
        inner_steps: steps,
        unclamped: current,
    })
}

/// Convenience form that assembles the operators for a single call.
#[allow(clippy::too_many_arguments)]
pub fn step_a_solve(
    mesh: &TriMesh,
    phi_k: &ScalarFieldP1,
    source: &[f64],
    d: &VectorFieldP0,
    b: &VectorFieldP0,
    mu: f64,
    dt: f64,
    alpha: f64,
) -> FemResult<ScalarFieldP1> {
    if !(dt > 0.0) {
        return Err(FemError::InvalidParameter {
            name: "dt",
            value: dt,
        });
    }
    let sys = FemSystem::new(mesh, dt);
    let opts = StepAOptions {
        dt,
        alpha,
        ..StepAOptions::default()
    };
    Ok(step_a_with(mesh, &sys, phi_k, source, d, b, mu, &opts)?.phi)
}

/// P1 interpolation of `phi` (defined on `src`) at the vertices of `dst`.
pub fn transfer_p1(src: &TriMesh, phi: &ScalarFieldP1, dst: &TriMesh) -> FemResult<ScalarFieldP1> {
    check_len("φ", src.n_vertices(), phi.len())?;
    let values = dst
        .vertices()
        .iter()
        .map(|&p| phi.eval(src, p))
        .collect::<FemResult<Vec<_>>>()?;
    Ok(ScalarFieldP1 { values })
}

/// P0 transfer by looking up each destination centroid in `src`.
pub fn transfer_p0(src: &TriMesh, w: &VectorFieldP0, dst: &TriMesh) -> FemResult<VectorFieldP0> {
    check_len("P0 field", src.n_elements(), w.len())?;
    let values = (0..dst.n_elements())
        .map(|k| Ok(w.values[src.locate(dst.centroid(k))?.0]))
        .collect::<FemResult<Vec<_>>>()?;
    Ok(VectorFieldP0 { values })
}
