//! Split Bregman iterations: Step A delegated to [`crate::fem`], shrinkage
//! (Step B), Bregman update (Step C), stopping rules and the shared driver
//! used with and without mesh adaptation.

use std::time::Instant;

use thiserror::Error;

use crate::energy::{
    classify_pixels, delta_p, estimate_pdf, rsfe_fields, source_bayes, source_rsfe, weighted_tv,
    PixelGrid, Region, RegionLabels, RegionPdf, RsfeFields,
};
use crate::fem::{
    gradient_p0, step_a_with, transfer_p0, transfer_p1, FemError, FemSystem, ScalarFieldP1,
    StepAOptions, VectorFieldP0,
};
use crate::imageio::{EdgeDetector, GreyImage};
use crate::mesh::{MeshError, TriMesh};
use crate::tensor::{add, norm, scale, sub, Vec2};

#[derive(Debug, Error)]
pub enum BregmanError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid initial level set: {0}")]
    InvalidInitialGuess(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

pub type BregmanResult<T> = Result<T, BregmanError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Bayes,
    Rsfe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    LevelSet,
    DeltaP,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub model: Model,
    pub nu: f64,
    pub mu: f64,
    pub beta: f64,
    pub eps: f64,
    pub alpha: f64,
    pub tau: f64,
    pub zeta: f64,
    pub sigma: f64,
    pub mu_i: f64,
    pub mu_e: f64,
    pub dt: f64,
    pub eta_star: f64,
    pub max_iters: usize,
    pub stop_rule: StopRule,
    pub rsfe_source_sum: bool,
}

impl SolverConfig {
    /// Defaults for `model`; only `mu` differs between the two models.
    pub fn for_model(model: Model) -> Self {
        SolverConfig {
            model,
            nu: 1.0,
            mu: match model {
                Model::Bayes => 1.0,
                Model::Rsfe => 1e-3,
            },
            beta: 100.0,
            eps: 1e-2,
            alpha: 1.0,
            tau: 1.0,
            zeta: 1e-8,
            sigma: 8.0,
            mu_i: 1e-5,
            mu_e: 1e-5,
            dt: crate::fem::DEFAULT_DT,
            eta_star: 0.5e-2,
            max_iters: 200,
            stop_rule: StopRule::LevelSet,
            rsfe_source_sum: false,
        }
    }

    pub fn validate(&self) -> BregmanResult<()> {
        let positive = [
            ("mu", self.mu),
            ("beta", self.beta),
            ("eps", self.eps),
            ("alpha", self.alpha),
            ("tau", self.tau),
            ("zeta", self.zeta),
            ("sigma", self.sigma),
            ("mu_i", self.mu_i),
            ("mu_e", self.mu_e),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BregmanError::InvalidConfig(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(BregmanError::InvalidConfig(format!(
                "nu must be >= 0, got {}",
                self.nu
            )));
        }
        if !(self.eta_star > 0.0 && self.eta_star < 1.0) {
            return Err(BregmanError::InvalidConfig(format!(
                "eta_star must lie in (0, 1), got {}",
                self.eta_star
            )));
        }
        if self.stop_rule == StopRule::DeltaP && self.model != Model::Bayes {
            return Err(BregmanError::InvalidConfig(
                "the delta_p stopping rule requires the bayes model".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(BregmanError::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn step_a_options(&self) -> StepAOptions {
        StepAOptions {
            dt: self.dt,
            alpha: self.alpha,
            ..StepAOptions::default()
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::for_model(Model::Bayes)
    }
}

/// `(f/|f|)·max(|f| − γ, 0)`, zero at the origin.
pub fn shrink(f: Vec2, gamma: f64) -> Vec2 {
    let n = norm(f);
    if n == 0.0 {
        return [0.0, 0.0];
    }
    let m = (n - gamma).max(0.0);
    scale(f, m / n)
}

/// `d = shrink(b + ∇φ, (ν/μ) g(c_K))` per element.
pub fn step_b(
    mesh: &TriMesh,
    phi: &ScalarFieldP1,
    b: &VectorFieldP0,
    g: &EdgeDetector,
    nu: f64,
    mu: f64,
) -> VectorFieldP0 {
    let grad = gradient_p0(mesh, phi);
    let values = (0..mesh.n_elements())
        .map(|k| {
            let gamma = nu / mu * g.at(mesh.centroid(k));
            shrink(add(b.values[k], grad.values[k]), gamma)
        })
        .collect();
    VectorFieldP0 { values }
}

/// `b + ∇φ − d` per element.
pub fn step_c(
    mesh: &TriMesh,
    b: &VectorFieldP0,
    phi: &ScalarFieldP1,
    d: &VectorFieldP0,
) -> VectorFieldP0 {
    let grad = gradient_p0(mesh, phi);
    let values = (0..mesh.n_elements())
        .map(|k| sub(add(b.values[k], grad.values[k]), d.values[k]))
        .collect();
    VectorFieldP0 { values }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub converged: bool,
    /// `‖new − old‖ / ‖old‖`, infinite when `‖old‖ = 0` and `new ≠ 0`.
    pub residual: f64,
}

/// Relative-change test with strict inequality: continue while
/// `diff > η* · reference`.
pub fn relative_change(diff: f64, reference: f64, eta_star: f64) -> StopDecision {
    if reference == 0.0 {
        return StopDecision {
            converged: diff == 0.0,
            residual: if diff == 0.0 { 0.0 } else { f64::INFINITY },
        };
    }
    StopDecision {
        converged: !(diff > eta_star * reference),
        residual: diff / reference,
    }
}

/// Level-set rule in the mass-weighted L2 norm.
pub fn stopping_check(
    sys: &FemSystem,
    phi_old: &ScalarFieldP1,
    phi_new: &ScalarFieldP1,
    eta_star: f64,
) -> StopDecision {
    let diff: Vec<f64> = phi_new
        .values
        .iter()
        .zip(&phi_old.values)
        .map(|(a, b)| a - b)
        .collect();
    relative_change(
        sys.mass_norm(&diff),
        sys.mass_norm(&phi_old.values),
        eta_star,
    )
}

/// Alternative rule on the pixel grids of `δ_p`.
pub fn delta_p_check(old: &PixelGrid, new: &PixelGrid, eta_star: f64) -> StopDecision {
    let diff = new
        .values
        .iter()
        .zip(&old.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    relative_change(diff, old.norm(), eta_star)
}

/// Signed initial shape; `φ0 = α` inside and `−α` outside.
#[derive(Clone, Debug, PartialEq)]
pub enum InitShape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Pixels above mid-grey are inside; vertices read the pixel they fall in.
    Mask(GreyImage),
}

impl InitShape {
    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            InitShape::Circle { cx, cy, r } => norm(sub(p, [*cx, *cy])) < *r,
            InitShape::Rect { x0, y0, x1, y1 } => {
                p[0] > x0.min(*x1) && p[0] < x0.max(*x1) && p[1] > y0.min(*y1) && p[1] < y0.max(*y1)
            }
            InitShape::Mask(m) => {
                let i = (p[0].floor().max(0.0) as usize).min(m.width() - 1);
                let j = (p[1].floor().max(0.0) as usize).min(m.height() - 1);
                m.get(i, j) > 127.5
            }
        }
    }

    pub fn level_set(&self, mesh: &TriMesh, alpha: f64) -> ScalarFieldP1 {
        ScalarFieldP1::from_fn(mesh, |p| if self.contains(p) { alpha } else { -alpha })
    }
}

/// Data-model state derived from the current level set.
#[derive(Clone, Debug)]
pub struct ModelEval {
    pub labels: RegionLabels,
    pub source: PixelGrid,
    pub pdfs: Option<(RegionPdf, RegionPdf)>,
    pub rsfe: Option<RsfeFields>,
    pub delta_p: Option<PixelGrid>,
    pub data_energy: f64,
}

pub fn evaluate_model(
    cfg: &SolverConfig,
    img: &GreyImage,
    mesh: &TriMesh,
    phi: &ScalarFieldP1,
) -> ModelEval {
    let labels = classify_pixels(mesh, phi, img);
    match cfg.model {
        Model::Bayes => {
            let pi = estimate_pdf(img, &labels, Region::Interior, cfg.tau, cfg.zeta);
            let pe = estimate_pdf(img, &labels, Region::Exterior, cfg.tau, cfg.zeta);
            let data_energy = img
                .data()
                .iter()
                .zip(&labels.interior)
                .map(|(&u, &inside)| -(if inside { &pi } else { &pe }).eval(u).ln())
                .sum();
            ModelEval {
                source: source_bayes(img, &pi, &pe),
                delta_p: Some(delta_p(img, &pi, &pe)),
                pdfs: Some((pi, pe)),
                rsfe: None,
                labels,
                data_energy,
            }
        }
        Model::Rsfe => {
            let fields = rsfe_fields(img, &labels, cfg.sigma);
            let data_energy = labels
                .interior
                .iter()
                .enumerate()
                .map(|(i, &inside)| {
                    if inside {
                        cfg.mu_i * fields.e_i[i]
                    } else {
                        cfg.mu_e * fields.e_e[i]
                    }
                })
                .sum();
            ModelEval {
                source: source_rsfe(&fields, cfg.mu_i, cfg.mu_e, cfg.rsfe_source_sum),
                delta_p: None,
                pdfs: None,
                rsfe: Some(fields),
                labels,
                data_energy,
            }
        }
    }
}

/// One row of the iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    /// Iteration counter after the update (1-based).
    pub k: usize,
    pub residual: f64,
    pub energy: f64,
    pub n_el: usize,
    pub inner_steps: usize,
    pub adapted: bool,
    pub phi_min: f64,
    pub phi_max: f64,
    pub t_opt: f64,
    pub t_adapt: f64,
}

#[derive(Clone, Debug)]
pub struct BregmanState {
    pub mesh: TriMesh,
    pub phi: ScalarFieldP1,
    pub d: VectorFieldP0,
    pub b: VectorFieldP0,
    pub k: usize,
    pub converged: bool,
    pub history: Vec<IterRecord>,
    /// Meshes produced by adaptation events, in order.
    pub adapted_meshes: Vec<TriMesh>,
    pub remesh_warnings: usize,
}

/// Result of one adaptation step: the new mesh and whether the remesher
/// had to abort a pass.
pub struct AdaptOutcome {
    pub mesh: TriMesh,
    pub warning: bool,
}

/// Hook invoked after Step A; returns a new mesh when adaptation fires.
pub trait Adapter {
    fn adapt(
        &mut self,
        k: usize,
        mesh: &TriMesh,
        phi: &ScalarFieldP1,
    ) -> BregmanResult<Option<AdaptOutcome>>;
}

struct NoAdapt;

impl Adapter for NoAdapt {
    fn adapt(
        &mut self,
        _: usize,
        _: &TriMesh,
        _: &ScalarFieldP1,
    ) -> BregmanResult<Option<AdaptOutcome>> {
        Ok(None)
    }
}

fn check_initial(mesh: &TriMesh, phi0: &ScalarFieldP1, alpha: f64) -> BregmanResult<()> {
    if phi0.len() != mesh.n_vertices() {
        return Err(BregmanError::InvalidInitialGuess(format!(
            "{} values for {} vertices",
            phi0.len(),
            mesh.n_vertices()
        )));
    }
    if phi0.values.iter().any(|v| !(v.abs() <= alpha)) {
        return Err(BregmanError::InvalidInitialGuess(format!(
            "values must lie in [-{alpha}, {alpha}]"
        )));
    }
    let pos = phi0.values.iter().any(|&v| v > 0.0);
    let neg = phi0.values.iter().any(|&v| v < 0.0);
    if !(pos && neg) {
        return Err(BregmanError::InvalidInitialGuess(
            "initial contour must change sign".into(),
        ));
    }
    Ok(())
}

pub fn run_split_bregman(
    cfg: &SolverConfig,
    img: &GreyImage,
    mesh: &TriMesh,
    phi0: &ScalarFieldP1,
) -> BregmanResult<BregmanState> {
    run_with_adapter(cfg, img, mesh, phi0, &mut NoAdapt)
}

/// Shared iteration loop; `adapter` decides when and how to remesh.
pub fn run_with_adapter(
    cfg: &SolverConfig,
    img: &GreyImage,
    mesh0: &TriMesh,
    phi0: &ScalarFieldP1,
    adapter: &mut dyn Adapter,
) -> BregmanResult<BregmanState> {
    cfg.validate()?;
    check_initial(mesh0, phi0, cfg.alpha)?;
    let g = EdgeDetector::new(img, cfg.beta);
    let opts = cfg.step_a_options();

    let mut mesh = mesh0.clone();
    let mut sys = FemSystem::new(&mesh, cfg.dt);
    let mut phi = phi0.clone();
    let mut d = gradient_p0(&mesh, &phi);
    let mut b = VectorFieldP0::zeros(&mesh);
    let mut eval = evaluate_model(cfg, img, &mesh, &phi);
    let mut state_history = Vec::new();
    let mut adapted_meshes = Vec::new();
    let mut warnings = 0;
    let mut converged = false;
    let mut k = 0;

    while k < cfg.max_iters {
        let t0 = Instant::now();
        let source = eval.source.sample_centroids(&mesh);
        let step = step_a_with(&mesh, &sys, &phi, &source, &d, &b, cfg.mu, &opts)?;
        let mut phi_new = step.phi;
        let mut t_opt = t0.elapsed().as_secs_f64();

        let decision = match cfg.stop_rule {
            StopRule::LevelSet => Some(stopping_check(&sys, &phi, &phi_new, cfg.eta_star)),
            StopRule::DeltaP => None,
        };

        let t1 = Instant::now();
        let mut adapted = false;
        if !decision.is_some_and(|s| s.converged) {
            if let Some(out) = adapter.adapt(k, &mesh, &phi_new)? {
                // d is rebuilt from b by Step B below, so only b needs transferring
                phi_new = transfer_p1(&mesh, &phi_new, &out.mesh)?;
                b = transfer_p0(&mesh, &b, &out.mesh)?;
                mesh = out.mesh;
                sys = FemSystem::new(&mesh, cfg.dt);
                adapted_meshes.push(mesh.clone());
                warnings += out.warning as usize;
                adapted = true;
            }
        }
        let t_adapt = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        d = step_b(&mesh, &phi_new, &b, &g, cfg.nu, cfg.mu);
        b = step_c(&mesh, &b, &phi_new, &d);
        let next_eval = evaluate_model(cfg, img, &mesh, &phi_new);
        t_opt += t2.elapsed().as_secs_f64();

        let decision = match decision {
            Some(dec) => dec,
            None => delta_p_check(
                eval.delta_p
                    .as_ref()
                    .expect("delta_p rule requires the Bayesian model"),
                next_eval
                    .delta_p
                    .as_ref()
                    .expect("delta_p rule requires the Bayesian model"),
                cfg.eta_star,
            ),
        };
        let energy = next_eval.data_energy + cfg.nu * weighted_tv(&mesh, &phi_new, &g);
        k += 1;
        state_history.push(IterRecord {
            k,
            residual: decision.residual,
            energy,
            n_el: mesh.n_elements(),
            inner_steps: step.inner_steps,
            adapted,
            phi_min: phi_new.values.iter().copied().fold(f64::INFINITY, f64::min),
            phi_max: phi_new
                .values
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            t_opt,
            t_adapt,
        });
        phi = phi_new;
        eval = next_eval;
        if decision.converged {
            converged = true;
            break;
        }
    }

    Ok(BregmanState {
        mesh,
        phi,
        d,
        b,
        k,
        converged,
        history: state_history,
        adapted_meshes,
        remesh_warnings: warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrink_examples() {
        let s = shrink([3.0, 4.0], 2.0);
        assert!((s[0] - 1.8).abs() < 1e-15 && (s[1] - 2.4).abs() < 1e-15);
        assert_eq!(shrink([0.3, 0.4], 1.0), [0.0, 0.0]);
        assert_eq!(shrink([0.0, 0.0], 0.7), [0.0, 0.0]);
        assert_eq!(shrink([0.0, 0.0], 0.0), [0.0, 0.0]);
    }

    #[test]
    fn relative_change_boundary_is_strict() {
        assert!(relative_change(0.5, 100.0, 0.005).converged);
        assert!(!relative_change(0.5000001, 100.0, 0.005).converged);
        assert!(relative_change(0.0, 0.0, 0.1).converged);
        assert!(!relative_change(1.0, 0.0, 0.1).converged);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let c = SolverConfig {
            eta_star: 1.0,
            ..SolverConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SolverConfig {
            nu: -1.0,
            ..SolverConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(SolverConfig::for_model(Model::Rsfe).mu, 1e-3);
    }

    #[test]
    fn init_shapes() {
        let c = InitShape::Circle {
            cx: 5.0,
            cy: 5.0,
            r: 2.0,
        };
        assert!(c.contains([5.5, 5.0]) && !c.contains([8.0, 5.0]));
        let r = InitShape::Rect {
            x0: 4.0,
            y0: 1.0,
            x1: 1.0,
            y1: 3.0,
        };
        assert!(r.contains([2.0, 2.0]) && !r.contains([5.0, 2.0]));
    }
}
