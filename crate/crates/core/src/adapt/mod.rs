//! Anisotropic recovery-based error estimation, metric construction and the
//! split-adapt Bregman driver.

mod remesh;

pub use remesh::{band_violation, metric_edge_length, remesh, RemeshOptions, RemeshReport};

use rayon::prelude::*;
use thiserror::Error;

use crate::bregman::{
    run_with_adapter, AdaptOutcome, Adapter, BregmanResult, BregmanState, SolverConfig,
};
use crate::fem::{gradient_p0, ScalarFieldP1, VectorFieldP0};
use crate::imageio::GreyImage;
use crate::mesh::{ElementGeometry, MeshResult, TriMesh, REF_AREA};
use crate::tensor::{dot, scale, sub, Sym2, Vec2};

/// Below this, θ or the patch gradient norm counts as zero.
pub const DEGENERATE_FLOOR: f64 = 1e-14;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptError {
    #[error("invalid adaptation parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    /// Initial target accuracy τ*.
    pub tau_star: f64,
    /// Adapt when `k mod n_breg == 0`.
    pub n_breg: usize,
    /// Metric relaxation weight.
    pub omega: f64,
    /// Maximum stretching factor.
    pub cap: f64,
    pub max_halvings: usize,
    /// Edge-length bounds imposed on the metric, in pixels.
    pub h_min: f64,
    pub h_max: f64,
    /// Largest size ratio between neighbouring elements the metric may ask for.
    pub gradation: f64,
    pub remesh: RemeshOptions,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            tau_star: 0.5,
            n_breg: 3,
            omega: 0.9,
            cap: 1000.0,
            max_halvings: 5,
            h_min: 0.1,
            h_max: 8.0,
            gradation: 1.5,
            remesh: RemeshOptions::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let checks = [
            ("tau_star", self.tau_star, self.tau_star > 0.0),
            ("n_breg", self.n_breg as f64, self.n_breg >= 1),
            ("omega", self.omega, (0.0..=1.0).contains(&self.omega)),
            ("cap", self.cap, self.cap >= 1.0),
            ("h_min", self.h_min, self.h_min > 0.0),
            ("h_max", self.h_max, self.h_max >= self.h_min),
            ("gradation", self.gradation, self.gradation >= 1.0),
        ];
        for (name, value, ok) in checks {
            if !(ok && value.is_finite()) {
                return Err(AdaptError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }
}

/// Area-weighted average of `∇φ` over the patch of every element.
pub fn recover_gradient(mesh: &TriMesh, phi: &ScalarFieldP1) -> VectorFieldP0 {
    recover_from(mesh, &gradient_p0(mesh, phi))
}

fn recover_from(mesh: &TriMesh, grad: &VectorFieldP0) -> VectorFieldP0 {
    let values = (0..mesh.n_elements())
        .into_par_iter()
        .map(|k| patch_mean(patch_items(mesh, grad, k)))
        .collect();
    VectorFieldP0 { values }
}

fn patch_items<'a>(
    mesh: &'a TriMesh,
    grad: &'a VectorFieldP0,
    k: usize,
) -> impl Iterator<Item = (f64, Vec2)> + 'a {
    mesh.patch(k)
        .elements
        .into_iter()
        .map(move |t| (mesh.area(t), grad.values[t]))
}

/// Area-weighted mean of `(area, gradient)` pairs.
pub fn patch_mean(items: impl IntoIterator<Item = (f64, Vec2)>) -> Vec2 {
    let (mut s, mut w) = ([0.0, 0.0], 0.0);
    for (a, g) in items {
        s[0] += a * g[0];
        s[1] += a * g[1];
        w += a;
    }
    scale(s, 1.0 / w)
}

/// `Σ |T| (p − g_T)(p − g_T)ᵀ` over `(area, gradient)` pairs.
pub fn patch_g(p: Vec2, items: impl IntoIterator<Item = (f64, Vec2)>) -> Sym2 {
    items.into_iter().fold(Sym2::default(), |acc, (a, g)| {
        acc + Sym2::outer(sub(p, g)) * a
    })
}

/// `Σ_{T∈Δ_K} |T| (P − ∇φ|_T)(P − ∇φ|_T)ᵀ`.
pub fn compute_g(
    mesh: &TriMesh,
    grad: &VectorFieldP0,
    recovered: &VectorFieldP0,
    k: usize,
) -> Sym2 {
    patch_g(recovered.values[k], patch_items(mesh, grad, k))
}

/// `(1/(λ1λ2)) [λ1² r1ᵀGr1 + λ2² r2ᵀGr2]`.
pub fn local_estimate(geom: &ElementGeometry, g: &Sym2) -> f64 {
    let [l1, l2] = geom.lambda;
    (l1 * l1 * g.quad(geom.r[0]) + l2 * l2 * g.quad(geom.r[1])) / (l1 * l2)
}

/// The same quantity written as `λ1λ2|Δ̂| [s r1ᵀ(G/|Δ|)r1 + s⁻¹ r2ᵀ(G/|Δ|)r2]`
/// with `|Δ̂| = |Δ|/(λ1λ2)`.
pub fn local_estimate_rescaled(geom: &ElementGeometry, g: &Sym2, patch_area: f64) -> f64 {
    let [l1, l2] = geom.lambda;
    let ref_patch = patch_area / (l1 * l2);
    let gn = *g * (1.0 / patch_area);
    let s = geom.stretching;
    l1 * l2 * ref_patch * (s * gn.quad(geom.r[0]) + gn.quad(geom.r[1]) / s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateReport {
    pub eta_k2: Vec<f64>,
    pub eta2: f64,
    pub g: Vec<Sym2>,
    pub patch_area: Vec<f64>,
    /// Area-weighted mean of `‖∇φ‖²` over each patch.
    pub grad_norm2: Vec<f64>,
}

pub fn estimate(mesh: &TriMesh, phi: &ScalarFieldP1) -> MeshResult<EstimateReport> {
    let grad = gradient_p0(mesh, phi);
    let rec = recover_from(mesh, &grad);
    let per: Vec<MeshResult<(f64, Sym2, f64, f64)>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|k| {
            let g = compute_g(mesh, &grad, &rec, k);
            let patch = mesh.patch(k);
            let gn2 = patch
                .elements
                .iter()
                .map(|&t| mesh.area(t) * dot(grad.values[t], grad.values[t]))
                .sum::<f64>()
                / patch.area;
            let geom = mesh.geometry(k)?;
            Ok((local_estimate(&geom, &g), g, patch.area, gn2))
        })
        .collect();
    let mut report = EstimateReport {
        eta_k2: Vec::with_capacity(per.len()),
        eta2: 0.0,
        g: Vec::with_capacity(per.len()),
        patch_area: Vec::with_capacity(per.len()),
        grad_norm2: Vec::with_capacity(per.len()),
    };
    for item in per {
        let (e, g, a, n) = item?;
        report.eta_k2.push(e);
        report.g.push(g);
        report.patch_area.push(a);
        report.grad_norm2.push(n);
    }
    report.eta2 = report.eta_k2.iter().sum();
    Ok(report)
}

/// Optimal element shape for the scaled matrix `G/|Δ_K|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anisotropy {
    /// Eigenvalues of `G/|Δ_K|`, descending.
    pub theta: [f64; 2],
    /// Infinite when `θ2 = 0`.
    pub s: f64,
    pub r1: Vec2,
    pub r2: Vec2,
}

pub fn optimal_anisotropy(g: &Sym2, patch_area: f64) -> Anisotropy {
    let e = (*g * (1.0 / patch_area)).eigen();
    let theta = [e.values[0].max(0.0), e.values[1].max(0.0)];
    let s = if theta[0] == theta[1] {
        1.0
    } else {
        (theta[0] / theta[1]).sqrt()
    };
    Anisotropy {
        theta,
        s,
        r1: e.vectors[1],
        r2: e.vectors[0],
    }
}

/// `s r1ᵀ(G/|Δ|)r1 + s⁻¹ r2ᵀ(G/|Δ|)r2`.
pub fn j_functional(g: &Sym2, patch_area: f64, s: f64, r1: Vec2, r2: Vec2) -> f64 {
    let gn = *g * (1.0 / patch_area);
    s * gn.quad(r1) + gn.quad(r2) / s
}

/// Per-element metrics `Rᵀ Λ⁻² R`, where `Λ` holds ellipse semi-axes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricField {
    pub tensors: Vec<Sym2>,
}

impl MetricField {
    /// Metric whose unit ball is the circumscribed ellipse of each element.
    pub fn induced(mesh: &TriMesh) -> MeshResult<Self> {
        let tensors = (0..mesh.n_elements())
            .map(|k| {
                let geom = mesh.geometry(k)?;
                Ok(semi_axes_metric(geom.lambda, geom.r))
            })
            .collect::<MeshResult<_>>()?;
        Ok(MetricField { tensors })
    }

    /// `sqrt(eig_max / eig_min)` of tensor `k`.
    pub fn stretching(&self, k: usize) -> f64 {
        let e = self.tensors[k].eigen();
        (e.values[0] / e.values[1]).sqrt()
    }
}

fn semi_axes_metric(lambda: [f64; 2], r: [Vec2; 2]) -> Sym2 {
    Sym2::from_eigen([lambda[0].powi(-2), lambda[1].powi(-2)], r)
}

/// Edge length `h` of an equilateral triangle inscribed in a circle of radius
/// `λ` is `λ√3`.
fn semi_axis_for_edge(h: f64) -> f64 {
    h / 3f64.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricBounds {
    pub cap: f64,
    pub h_min: f64,
    pub h_max: f64,
}

/// Semi-axes `(λ1*, λ2*)` and directions for one element, after the cap and
/// size bounds.
pub fn optimal_semi_axes(
    g: &Sym2,
    patch_area: f64,
    grad_norm2: f64,
    tau: f64,
    bounds: &MetricBounds,
) -> ([f64; 2], [Vec2; 2]) {
    let lmin = semi_axis_for_edge(bounds.h_min);
    let lmax = semi_axis_for_edge(bounds.h_max);
    let a = optimal_anisotropy(g, patch_area);
    if grad_norm2 < DEGENERATE_FLOOR || a.theta[0] < DEGENERATE_FLOOR {
        return ([lmax, lmax], [a.r1, a.r2]);
    }
    let c = (tau * grad_norm2 / (2.0 * REF_AREA)).sqrt();
    let l2 = c / a.theta[0].sqrt();
    let l1 = l2 * a.s.min(bounds.cap);
    ([l1.clamp(lmin, lmax), l2.clamp(lmin, lmax)], [a.r1, a.r2])
}

pub fn optimal_metric(
    mesh: &TriMesh,
    phi: &ScalarFieldP1,
    tau: f64,
    bounds: &MetricBounds,
) -> MeshResult<MetricField> {
    let est = estimate(mesh, phi)?;
    Ok(metric_from_estimate(&est, tau, bounds))
}

pub fn metric_from_estimate(est: &EstimateReport, tau: f64, bounds: &MetricBounds) -> MetricField {
    let tensors = (0..est.g.len())
        .map(|k| {
            let (l, r) =
                optimal_semi_axes(&est.g[k], est.patch_area[k], est.grad_norm2[k], tau, bounds);
            semi_axes_metric(l, r)
        })
        .collect();
    MetricField { tensors }
}

/// `ω·target + (1−ω)·old`, entrywise.
pub fn relax_metric(target: &MetricField, old: &MetricField, omega: f64) -> MetricField {
    let tensors = target
        .tensors
        .iter()
        .zip(&old.tensors)
        .map(|(t, o)| *t * omega + *o * (1.0 - omega))
        .collect();
    MetricField { tensors }
}

/// Log-Euclidean area-weighted mean of the metrics of the elements around
/// each vertex.
pub fn vertex_metrics(mesh: &TriMesh, metric: &MetricField) -> Vec<Sym2> {
    let logs: Vec<Sym2> = metric.tensors.iter().map(Sym2::log).collect();
    (0..mesh.n_vertices())
        .map(|v| {
            let mut acc = Sym2::default();
            let mut w = 0.0;
            for &k in mesh.vertex_elements(v) {
                acc = acc + logs[k] * mesh.area(k);
                w += mesh.area(k);
            }
            (acc * (1.0 / w)).exp()
        })
        .collect()
}

/// Limits the growth of the prescribed size along every edge to a factor
/// `1 + (beta − 1)·L`, where `L` is the edge length in the unit metric, by
/// intersecting each endpoint metric with the scaled metric of the other.
pub fn grade_metric(mesh: &TriMesh, vm: &mut [Sym2], beta: f64) {
    let edges = mesh.edges();
    for _ in 0..50 {
        let mut changed = false;
        for &(a, b) in &edges {
            let e = sub(mesh.vertex(b), mesh.vertex(a));
            for (from, to) in [(a, b), (b, a)] {
                let l = (vm[from].quad(e) / 3.0).sqrt();
                let grown = vm[from] * (1.0 + (beta - 1.0) * l).powi(-2);
                let next = vm[to].intersect(&grown);
                if (next.trace() - vm[to].trace()).abs() > 1e-9 * vm[to].trace() {
                    vm[to] = next;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Log-Euclidean interpolation of a vertex metric at `p`.
pub fn interpolate_metric(mesh: &TriMesh, logs: &[Sym2], p: Vec2) -> MeshResult<Sym2> {
    let (k, l) = mesh.locate(p)?;
    let t = mesh.triangle(k);
    Ok((logs[t[0]] * l[0] + logs[t[1]] * l[1] + logs[t[2]] * l[2]).exp())
}

/// Mesh-adaptation state for one split-adapt run.
pub struct MetricAdapter {
    cfg: AdaptConfig,
    tau: f64,
    halvings: usize,
    events: usize,
    /// Vertex metric of the last adaptation and the mesh it lives on.
    previous: Option<(TriMesh, Vec<Sym2>)>,
    /// Element metric used at the last adaptation, on the pre-remesh mesh.
    pub last_metric: Option<MetricField>,
}

impl MetricAdapter {
    pub fn new(cfg: AdaptConfig) -> Result<Self, AdaptError> {
        cfg.validate()?;
        Ok(MetricAdapter {
            tau: cfg.tau_star,
            cfg,
            halvings: 0,
            events: 0,
            previous: None,
            last_metric: None,
        })
    }

    /// Current target accuracy.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn events(&self) -> usize {
        self.events
    }

    fn bounds(&self) -> MetricBounds {
        MetricBounds {
            cap: self.cfg.cap,
            h_min: self.cfg.h_min,
            h_max: self.cfg.h_max,
        }
    }

    fn old_metric(&self, mesh: &TriMesh) -> MeshResult<MetricField> {
        match &self.previous {
            None => MetricField::induced(mesh),
            Some((old_mesh, vm)) => {
                let logs: Vec<Sym2> = vm.iter().map(Sym2::log).collect();
                let tensors = (0..mesh.n_elements())
                    .map(|k| interpolate_metric(old_mesh, &logs, mesh.centroid(k)))
                    .collect::<MeshResult<_>>()?;
                Ok(MetricField { tensors })
            }
        }
    }

    /// Estimate, build and relax the metric, then remesh. Updates τ*.
    pub fn adapt_mesh(
        &mut self,
        mesh: &TriMesh,
        phi: &ScalarFieldP1,
    ) -> MeshResult<(TriMesh, RemeshReport)> {
        let target = optimal_metric(mesh, phi, self.tau, &self.bounds())?;
        let old = self.old_metric(mesh)?;
        let relaxed = relax_metric(&target, &old, self.cfg.omega);
        let mut vm = vertex_metrics(mesh, &relaxed);
        grade_metric(mesh, &mut vm, self.cfg.gradation);
        let (out, report) = remesh(mesh, &vm, &self.cfg.remesh)?;
        self.previous = Some((mesh.clone(), vm));
        self.last_metric = Some(relaxed);
        self.events += 1;
        if self.halvings < self.cfg.max_halvings {
            self.tau *= 0.5;
            self.halvings += 1;
        }
        Ok((out, report))
    }
}

impl Adapter for MetricAdapter {
    fn adapt(
        &mut self,
        k: usize,
        mesh: &TriMesh,
        phi: &ScalarFieldP1,
    ) -> BregmanResult<Option<AdaptOutcome>> {
        if !k.is_multiple_of(self.cfg.n_breg) {
            return Ok(None);
        }
        let (mesh, report) = self.adapt_mesh(mesh, phi)?;
        Ok(Some(AdaptOutcome {
            mesh,
            warning: report.warning,
        }))
    }
}

/// Split Bregman with a metric-driven remesh every `n_breg` iterations.
pub fn run_split_adapt_bregman(
    cfg: &SolverConfig,
    adapt: &AdaptConfig,
    img: &GreyImage,
    mesh0: &TriMesh,
    phi0: &ScalarFieldP1,
) -> BregmanResult<(BregmanState, MetricAdapter)> {
    let mut adapter = MetricAdapter::new(adapt.clone())
        .map_err(|e| crate::bregman::BregmanError::InvalidConfig(e.to_string()))?;
    let state = run_with_adapter(cfg, img, mesh0, phi0, &mut adapter)?;
    Ok((state, adapter))
}

/// Largest `sqrt(eig ratio)` over a set of tensors.
pub fn max_stretching(tensors: &[Sym2]) -> f64 {
    tensors
        .iter()
        .map(|m| {
            let e = m.eigen();
            (e.values[0] / e.values[1]).sqrt()
        })
        .fold(0.0, f64::max)
}
