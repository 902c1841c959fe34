//! Experiment configuration: JSON schema, validation and construction of
//! models, symmetries and transformations from the registry or inline
//! descriptors. Validation failures carry a JSON-pointer-style location.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use symsde_core::expr::{parse, Expr, VarSet};
use symsde_core::mc::SimulationConfig;
use symsde_core::models::{self, LotkaVolterraParams};
use symsde_core::sde::SdeModelDescriptor;
use symsde_core::symmetry::{flow_transformation, InfinitesimalSymmetry, SymmetryDescriptor};
use symsde_core::transform::{FiniteTransformation, TransformationDescriptor};
use symsde_core::{ScalarField, SdeModel};

#[derive(Debug, Error)]
#[error("config error at {pointer}: {message}")]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(pointer: &str, message: impl ToString) -> Self {
        ConfigError {
            pointer: pointer.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifySymmetry,
    VerifyGweak,
    ReconstructFlow,
    QuasiInvariance,
    Ibp,
    Stein,
    Isserlis,
    Simulate,
}

/// Model selection: a registry id with parameters, or an inline descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Registry {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_tilde: Option<f64>,
    },
    Inline {
        inline: SdeModelDescriptor,
    },
}

/// Symmetry selection: a registry family with its time function, or an
/// inline descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SymmetrySpec {
    Registry {
        family: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        param: Option<String>,
    },
    Inline {
        inline: SymmetryDescriptor,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tolerances {
    /// Determining-equation sup-norm bound.
    #[serde(default = "default_residual_tol")]
    pub residual: f64,
    /// Finite-criterion violation bound for reconstructed flows.
    #[serde(default = "default_flow_tol")]
    pub flow: f64,
    /// Monte Carlo rule |estimate| ≤ se_multiplier·SE + mc_slack.
    #[serde(default = "default_se_multiplier")]
    pub se_multiplier: f64,
    #[serde(default = "default_mc_slack")]
    pub mc_slack: f64,
}

fn default_residual_tol() -> f64 {
    1e-7
}
fn default_flow_tol() -> f64 {
    1e-5
}
fn default_se_multiplier() -> f64 {
    3.0
}
fn default_mc_slack() -> f64 {
    0.01
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            residual: default_residual_tol(),
            flow: default_flow_tol(),
            se_multiplier: default_se_multiplier(),
            mc_slack: default_mc_slack(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry: Option<SymmetrySpec>,
    /// Transformation descriptor for quasi-invariance, overriding flow
    /// reconstruction from the symmetry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformation: Option<TransformationDescriptor>,
    /// Functional F (ibp, stein, isserlis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    /// Observable g (quasi-invariance).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    /// RK4 steps for flow reconstruction.
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    /// Start point (spatial coordinates, then time) for reconstruct-flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// Grid size for residual and finite-criterion checks.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimulationConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    /// Binary path-ensemble dump for the simulate command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_path: Option<String>,
}

fn default_t() -> f64 {
    1.0
}
fn default_flow_steps() -> usize {
    1000
}
fn default_grid_points() -> usize {
    128
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::new("/", e))
    }

    pub fn build_model(&self) -> Result<SdeModel, ConfigError> {
        let spec = self
            .model
            .as_ref()
            .ok_or_else(|| ConfigError::new("/model", "missing model"))?;
        match spec {
            ModelSpec::Inline { inline } => SdeModel::from_descriptor(inline)
                .map_err(|e| ConfigError::new("/model/inline", e)),
            ModelSpec::Registry {
                id,
                a,
                b,
                alpha,
                beta,
                gamma,
                delta,
                sigma_tilde,
            } => match id.as_str() {
                "bm2d" => Ok(models::bm2d()),
                "additive_bm" => {
                    let (a, b) = additive_coefficients(a.as_deref(), b.as_deref())?;
                    models::additive_model(&a, &b)
                        .map_err(|e| ConfigError::new("/model", e))
                }
                "lotka_volterra" => {
                    let p = lv_params(*alpha, *beta, *gamma, *delta, *sigma_tilde);
                    models::lotka_volterra(&p).map_err(|e| ConfigError::new("/model", e))
                }
                other => Err(ConfigError::new(
                    "/model/id",
                    format!("unknown model id `{other}` (expected bm2d, additive_bm or lotka_volterra)"),
                )),
            },
        }
    }

    pub fn build_symmetry(
        &self,
        model: &SdeModel,
    ) -> Result<InfinitesimalSymmetry, ConfigError> {
        let spec = self
            .symmetry
            .as_ref()
            .ok_or_else(|| ConfigError::new("/symmetry", "missing symmetry"))?;
        match spec {
            SymmetrySpec::Inline { inline } => {
                InfinitesimalSymmetry::from_descriptor(inline, model)
                    .map_err(|e| ConfigError::new("/symmetry/inline", e))
            }
            SymmetrySpec::Registry { family, param } => {
                let param_expr = parse_time_param(param.as_deref())?;
                let model_id = self.model_id();
                match (model_id.as_deref(), family.as_str()) {
                    (Some("bm2d") | None, "v_alpha") => models::v_alpha(&param_expr)
                        .map_err(|e| ConfigError::new("/symmetry", e)),
                    (Some("bm2d") | None, "v_beta") => models::v_beta(&param_expr)
                        .map_err(|e| ConfigError::new("/symmetry", e)),
                    (Some("additive_bm"), fam @ ("v_alpha" | "v_beta")) => {
                        let (a, b) = self.additive_from_model()?;
                        let out = if fam == "v_alpha" {
                            models::additive_v_alpha(&a, &b, &param_expr)
                        } else {
                            models::additive_v_beta(&a, &b, &param_expr)
                        };
                        out.map_err(|e| ConfigError::new("/symmetry", e))
                    }
                    (Some("lotka_volterra"), fam @ ("v_a" | "v_b")) => {
                        let p = self.lv_from_model()?;
                        let out = if fam == "v_a" {
                            models::lv_v_a(&p, &param_expr)
                        } else {
                            models::lv_v_b(&p, &param_expr)
                        };
                        out.map_err(|e| ConfigError::new("/symmetry", e))
                    }
                    (m, f) => Err(ConfigError::new(
                        "/symmetry/family",
                        format!("family `{f}` is not available for model {m:?}"),
                    )),
                }
            }
        }
    }

    /// Transformation for the quasi-invariance run: an inline descriptor if
    /// given; the closed-form rotational group for the v_beta families;
    /// otherwise flow reconstruction at λ.
    pub fn build_transformation(
        &self,
        model: &SdeModel,
    ) -> Result<FiniteTransformation, ConfigError> {
        if let Some(d) = &self.transformation {
            return FiniteTransformation::from_descriptor(d, model)
                .map_err(|e| ConfigError::new("/transformation", e));
        }
        let lambda = self
            .lambda
            .ok_or_else(|| ConfigError::new("/lambda", "missing lambda"))?;
        if let Some(SymmetrySpec::Registry { family, param }) = &self.symmetry {
            if family == "v_beta" {
                let beta = parse_time_param(param.as_deref())?;
                return models::bm2d_finite_v_beta(model, &beta, lambda)
                    .map_err(|e| ConfigError::new("/symmetry", e));
            }
        }
        let v = self.build_symmetry(model)?;
        flow_transformation(&v, model, lambda, self.flow_steps)
            .map_err(|e| ConfigError::new("/symmetry", e))
    }

    pub fn functional(&self, model: &SdeModel) -> Result<ScalarField, ConfigError> {
        let text = self
            .f
            .as_ref()
            .ok_or_else(|| ConfigError::new("/f", "missing functional"))?;
        ScalarField::parse(text, model.vars()).map_err(|e| ConfigError::new("/f", e))
    }

    pub fn observable(&self, model: &SdeModel) -> Result<ScalarField, ConfigError> {
        let text = self
            .g
            .as_ref()
            .ok_or_else(|| ConfigError::new("/g", "missing observable"))?;
        ScalarField::parse(text, model.vars()).map_err(|e| ConfigError::new("/g", e))
    }

    pub fn sim(&self) -> Result<SimulationConfig, ConfigError> {
        let sim = self
            .sim
            .clone()
            .ok_or_else(|| ConfigError::new("/sim", "missing simulation settings"))?;
        sim.n_steps().map_err(|e| ConfigError::new("/sim", e))?;
        Ok(sim)
    }

    fn model_id(&self) -> Option<String> {
        match &self.model {
            Some(ModelSpec::Registry { id, .. }) => Some(id.clone()),
            _ => None,
        }
    }

    fn additive_from_model(&self) -> Result<(Expr, Expr), ConfigError> {
        match &self.model {
            Some(ModelSpec::Registry { a, b, .. }) => {
                additive_coefficients(a.as_deref(), b.as_deref())
            }
            _ => Err(ConfigError::new("/model", "additive model spec required")),
        }
    }

    fn lv_from_model(&self) -> Result<LotkaVolterraParams, ConfigError> {
        match &self.model {
            Some(ModelSpec::Registry {
                alpha,
                beta,
                gamma,
                delta,
                sigma_tilde,
                ..
            }) => Ok(lv_params(*alpha, *beta, *gamma, *delta, *sigma_tilde)),
            _ => Err(ConfigError::new("/model", "lotka_volterra model spec required")),
        }
    }
}

fn lv_params(
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    delta: Option<f64>,
    sigma_tilde: Option<f64>,
) -> LotkaVolterraParams {
    LotkaVolterraParams {
        alpha: alpha.unwrap_or(1.0),
        beta: beta.unwrap_or(1.0),
        gamma: gamma.unwrap_or(1.0),
        delta: delta.unwrap_or(1.0),
        sigma_tilde: sigma_tilde.unwrap_or(1.0),
    }
}

fn additive_coefficients(
    a: Option<&str>,
    b: Option<&str>,
) -> Result<(Expr, Expr), ConfigError> {
    let vars = VarSet::spatial_and_time(&["r2"], "t").expect("static");
    let a = parse(a.unwrap_or("-1"), &vars).map_err(|e| ConfigError::new("/model/a", e))?;
    let b = parse(b.unwrap_or("0"), &vars).map_err(|e| ConfigError::new("/model/b", e))?;
    Ok((a, b))
}

fn parse_time_param(param: Option<&str>) -> Result<Expr, ConfigError> {
    let vars = VarSet::spatial_and_time(&["z"], "t").expect("static");
    parse(param.unwrap_or("1"), &vars).map_err(|e| ConfigError::new("/symmetry/param", e))
}
