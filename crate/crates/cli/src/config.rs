//! JSON run configuration. Keys are flat; omitted keys take the model
//! defaults and unknown keys are rejected.

use serde_json::{Map, Value};
use thiserror::Error;

use segflow::adapt::AdaptConfig;
use segflow::bregman::{Model, SolverConfig, StopRule};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Syntax(String),
    #[error("config must be a JSON object")]
    NotObject,
    #[error("unknown key \"{0}\"")]
    UnknownKey(String),
    #[error("key \"{key}\": expected {expected}")]
    Type { key: String, expected: &'static str },
    #[error("key \"{key}\": {value} out of range, must be {bound}")]
    Range {
        key: String,
        value: String,
        bound: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub adapt: AdaptConfig,
    /// Spacing of the initial uniform mesh, in pixels.
    pub mesh_spacing: f64,
}

impl RunConfig {
    pub fn defaults(model: Model) -> Self {
        RunConfig {
            solver: SolverConfig::for_model(model),
            adapt: AdaptConfig::default(),
            mesh_spacing: 1.0,
        }
    }

    /// Flat snapshot with every key `load_config` accepts.
    pub fn to_json(&self) -> Value {
        let s = &self.solver;
        let a = &self.adapt;
        serde_json::json!({
            "model": match s.model { Model::Bayes => "bayes", Model::Rsfe => "rsfe" },
            "tau": s.tau, "mu": s.mu, "sigma": s.sigma, "mu_i": s.mu_i, "mu_e": s.mu_e,
            "nu": s.nu, "beta": s.beta, "eps": s.eps, "zeta": s.zeta, "alpha": s.alpha,
            "dt": s.dt, "eta_star": s.eta_star, "max_iters": s.max_iters,
            "stop_rule": match s.stop_rule { StopRule::LevelSet => "level_set", StopRule::DeltaP => "delta_p" },
            "rsfe_source_sum": s.rsfe_source_sum,
            "tau_star": a.tau_star, "n_breg": a.n_breg, "omega": a.omega, "cap": a.cap,
            "max_halvings": a.max_halvings, "h_min": a.h_min, "h_max": a.h_max,
            "gradation": a.gradation, "mesh_spacing": self.mesh_spacing,
        })
    }
}

pub fn parse_model(s: &str) -> Option<Model> {
    match s {
        "bayes" => Some(Model::Bayes),
        "rsfe" => Some(Model::Rsfe),
        _ => None,
    }
}

fn number(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().ok_or_else(|| ConfigError::Type {
        key: key.into(),
        expected: "a number",
    })
}

fn count(key: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| ConfigError::Type {
            key: key.into(),
            expected: "a non-negative integer",
        })
}

fn range(key: &str, value: f64, ok: bool, bound: &'static str) -> Result<f64, ConfigError> {
    if ok && value.is_finite() {
        Ok(value)
    } else {
        Err(ConfigError::Range {
            key: key.into(),
            value: value.to_string(),
            bound,
        })
    }
}

fn positive(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = number(key, v)?;
    range(key, x, x > 0.0, "> 0")
}

/// Parses a config document. `model` picks the defaults unless the document
/// sets `"model"` itself.
pub fn parse_config(text: &str, model: Model) -> Result<RunConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let obj = doc.as_object().ok_or(ConfigError::NotObject)?;
    config_from_object(obj, model)
}

pub fn config_from_object(
    obj: &Map<String, Value>,
    model: Model,
) -> Result<RunConfig, ConfigError> {
    let model = match obj.get("model") {
        None => model,
        Some(v) => v.as_str().and_then(parse_model).ok_or(ConfigError::Type {
            key: "model".into(),
            expected: "\"bayes\" or \"rsfe\"",
        })?,
    };
    let mut cfg = RunConfig::defaults(model);
    let s = &mut cfg.solver;
    let a = &mut cfg.adapt;
    // BTreeMap iteration keeps error reporting deterministic
    for (key, v) in obj {
        let k = key.as_str();
        match k {
            "model" => {}
            "tau" => s.tau = positive(k, v)?,
            "mu" => s.mu = positive(k, v)?,
            "sigma" => s.sigma = positive(k, v)?,
            "mu_i" => s.mu_i = positive(k, v)?,
            "mu_e" => s.mu_e = positive(k, v)?,
            "beta" => s.beta = positive(k, v)?,
            "eps" => s.eps = positive(k, v)?,
            "zeta" => s.zeta = positive(k, v)?,
            "alpha" => s.alpha = positive(k, v)?,
            "dt" => s.dt = positive(k, v)?,
            "nu" => {
                let x = number(k, v)?;
                s.nu = range(k, x, x >= 0.0, ">= 0")?;
            }
            "eta_star" => {
                let x = number(k, v)?;
                s.eta_star = range(k, x, x > 0.0 && x < 1.0, "in (0, 1)")?;
            }
            "max_iters" => {
                let n = count(k, v)?;
                range(k, n as f64, n >= 1, ">= 1")?;
                s.max_iters = n;
            }
            "stop_rule" => {
                s.stop_rule = match v.as_str() {
                    Some("level_set") => StopRule::LevelSet,
                    Some("delta_p") => StopRule::DeltaP,
                    _ => {
                        return Err(ConfigError::Type {
                            key: k.into(),
                            expected: "\"level_set\" or \"delta_p\"",
                        })
                    }
                }
            }
            "rsfe_source_sum" => {
                s.rsfe_source_sum = v.as_bool().ok_or(ConfigError::Type {
                    key: k.into(),
                    expected: "a boolean",
                })?
            }
            "tau_star" => a.tau_star = positive(k, v)?,
            "n_breg" => {
                let n = count(k, v)?;
                range(k, n as f64, n >= 1, ">= 1")?;
                a.n_breg = n;
            }
            "omega" => {
                let x = number(k, v)?;
                a.omega = range(k, x, (0.0..=1.0).contains(&x), "in [0, 1]")?;
            }
            "cap" => {
                let x = number(k, v)?;
                a.cap = range(k, x, x >= 1.0, ">= 1")?;
            }
            "max_halvings" => a.max_halvings = count(k, v)?,
            "h_min" => a.h_min = positive(k, v)?,
            "h_max" => a.h_max = positive(k, v)?,
            "gradation" => {
                let x = number(k, v)?;
                a.gradation = range(k, x, x >= 1.0, ">= 1")?;
            }
            "mesh_spacing" => cfg.mesh_spacing = positive(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
    }
    if cfg.adapt.h_max < cfg.adapt.h_min {
        return Err(ConfigError::Range {
            key: "h_max".into(),
            value: cfg.adapt.h_max.to_string(),
            bound: ">= h_min",
        });
    }
    if cfg.solver.stop_rule == StopRule::DeltaP && cfg.solver.model != Model::Bayes {
        return Err(ConfigError::Type {
            key: "stop_rule".into(),
            expected: "\"level_set\" with the rsfe model",
        });
    }
    Ok(cfg)
}
