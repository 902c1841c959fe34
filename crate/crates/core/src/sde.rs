//! SDE models dX = μ dt + σ dW, their infinitesimal generator as a symbolic
//! operator, and the gauge-equivalence test between models.
//!
//! Time-dependence is handled by the standard autonomization trick: models
//! that need an explicit clock declare a coordinate (conventionally `z`)
//! with drift 1 and a zero diffusion row. The trailing variable of the
//! variable set is the literal time argument of all fields.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, VarSet};
use crate::fields::{
    eval_matrix, eval_vector, FieldError, MatrixField, ScalarField, VectorField,
};
use crate::numeric::halton_grid;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("variable mismatch: {0}")]
    VarMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// An Itô SDE model over n spatial coordinates driven by an m-dimensional
/// Brownian motion, together with the working box used for sampling,
/// diagnostics and numeric inversion.
#[derive(Debug, Clone)]
pub struct SdeModel {
    vars: VarSet,
    mu: VectorField,
    sigma: MatrixField,
    /// Per-coordinate intervals; the first n are spatial, the last is time.
    domain_box: Vec<[f64; 2]>,
    initial_point: Vec<f64>,
    /// Coordinates simulated in log space to preserve positivity.
    log_coords: Vec<bool>,
}

impl SdeModel {
    pub fn new(
        vars: VarSet,
        mu: VectorField,
        sigma: MatrixField,
        domain_box: Vec<[f64; 2]>,
        initial_point: Vec<f64>,
    ) -> Result<Self, SdeError> {
        let n = vars.n_spatial();
        if mu.len() != n {
            return Err(SdeError::Shape(format!(
                "drift has {} components, expected {n}",
                mu.len()
            )));
        }
        if sigma.nrows() != n {
            return Err(SdeError::Shape(format!(
                "diffusion has {} rows, expected {n}",
                sigma.nrows()
            )));
        }
        if mu.vars() != &vars || sigma.vars() != &vars {
            return Err(SdeError::VarMismatch(
                "drift and diffusion must share the model variable set".into(),
            ));
        }
        if domain_box.len() != n + 1 {
            return Err(SdeError::InvalidModel(format!(
                "domain box needs {} intervals (spatial plus time), got {}",
                n + 1,
                domain_box.len()
            )));
        }
        for (i, [lo, hi]) in domain_box.iter().enumerate() {
            if !(lo < hi) {
                return Err(SdeError::InvalidModel(format!(
                    "degenerate interval in domain box at coordinate {i}"
                )));
            }
        }
        if initial_point.len() != n {
            return Err(SdeError::InvalidModel(format!(
                "initial point has {} coordinates, expected {n}",
                initial_point.len()
            )));
        }
        for i in 0..n {
            if initial_point[i] < domain_box[i][0] || initial_point[i] > domain_box[i][1] {
                return Err(SdeError::InvalidModel(format!(
                    "initial point coordinate {i} lies outside the domain box"
                )));
            }
        }
        Ok(SdeModel {
            log_coords: vec![false; n],
            vars,
            mu,
            sigma,
            domain_box,
            initial_point,
        })
    }

    /// Flags coordinates to be integrated in log space (positivity).
    pub fn with_log_coords(mut self, log_coords: Vec<bool>) -> Result<Self, SdeError> {
        if log_coords.len() != self.n() {
            return Err(SdeError::Shape("log coordinate flags must have length n".into()));
        }
        for (i, &flag) in log_coords.iter().enumerate() {
            if flag && self.initial_point[i] <= 0.0 {
                return Err(SdeError::InvalidModel(format!(
                    "log-coordinate {i} requires a strictly positive initial value"
                )));
            }
        }
        self.log_coords = log_coords;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.vars.n_spatial()
    }

    pub fn m(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn mu(&self) -> &VectorField {
        &self.mu
    }

    pub fn sigma(&self) -> &MatrixField {
        &self.sigma
    }

    pub fn domain_box(&self) -> &[[f64; 2]] {
        &self.domain_box
    }

    pub fn spatial_box(&self) -> &[[f64; 2]] {
        &self.domain_box[..self.n()]
    }

    pub fn time_interval(&self) -> [f64; 2] {
        self.domain_box[self.n()]
    }

    pub fn initial_point(&self) -> &[f64] {
        &self.initial_point
    }

    pub fn log_coords(&self) -> &[bool] {
        &self.log_coords
    }

    pub fn is_symbolic(&self) -> bool {
        self.mu.is_symbolic() && self.sigma.is_symbolic()
    }

    /// Deterministic low-discrepancy sample grid over the domain box
    /// (spatial coordinates and time).
    pub fn sample_grid(&self, count: usize) -> Vec<Vec<f64>> {
        halton_grid(&self.domain_box, count)
    }

    /// The diffusion matrix a = σσᵀ formed symbolically.
    pub fn diffusion_matrix(&self) -> Result<MatrixField, SdeError> {
        let n = self.n();
        let m = self.m();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let mut acc = Expr::Const(0.0);
                for alpha in 0..m {
                    let si = self
                        .sigma
                        .entry(i, alpha)
                        .expr()
                        .ok_or_else(|| field_not_symbolic("diffusion"))?;
                    let sj = self
                        .sigma
                        .entry(j, alpha)
                        .expr()
                        .ok_or_else(|| field_not_symbolic("diffusion"))?;
                    acc = Expr::add(acc, Expr::mul(si.clone(), sj.clone()));
                }
                row.push(ScalarField::from_expr(
                    crate::expr::simplify(&acc),
                    &self.vars,
                )?);
            }
            rows.push(row);
        }
        Ok(MatrixField::new(rows)?)
    }

    /// Model with the Brownian component rotated: σ′ = σB⁻¹, μ′ = μ.
    pub fn rotated(&self, b: &MatrixField) -> Result<SdeModel, SdeError> {
        let m = self.m();
        if b.nrows() != m || b.ncols() != m {
            return Err(SdeError::Shape(format!(
                "rotation must be {m}x{m}, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let n = self.n();
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(m);
            for alpha in 0..m {
                // (σ B⁻¹)_{iα} = Σ_k σ_{ik} (Bᵀ)_{kα} = Σ_k σ_{ik} B_{αk}
                let mut acc = Expr::Const(0.0);
                for k in 0..m {
                    let sik = self
                        .sigma
                        .entry(i, k)
                        .expr()
                        .ok_or_else(|| field_not_symbolic("diffusion"))?;
                    let bak = b
                        .entry(alpha, k)
                        .expr()
                        .ok_or_else(|| field_not_symbolic("rotation"))?;
                    acc = Expr::add(acc, Expr::mul(sik.clone(), bak.clone()));
                }
                row.push(ScalarField::from_expr(
                    crate::expr::simplify(&acc),
                    &self.vars,
                )?);
            }
            rows.push(row);
        }
        SdeModel::new(
            self.vars.clone(),
            self.mu.clone(),
            MatrixField::new(rows)?,
            self.domain_box.clone(),
            self.initial_point.clone(),
        )
        .map(|m| SdeModel {
            log_coords: self.log_coords.clone(),
            ..m
        })
    }
}

fn field_not_symbolic(what: &str) -> SdeError {
    SdeError::Field(FieldError::NotSymbolic(format!(
        "{what} field must be symbolic for this operation"
    )))
}

/// A generator application Lf: kept alongside its input for reporting.
#[derive(Debug, Clone)]
pub struct GeneratorApplication {
    pub input: ScalarField,
    pub output: ScalarField,
}

/// The infinitesimal generator applied symbolically:
/// Lf = ∂ₜf + Σᵢ μᵢ ∂ᵢf + ½ Σᵢⱼ (σσᵀ)ᵢⱼ ∂ᵢⱼf.
pub fn apply_generator(model: &SdeModel, f: &ScalarField) -> Result<ScalarField, SdeError> {
    if f.vars() != model.vars() {
        return Err(SdeError::VarMismatch(
            "functional must be defined over the model variables".into(),
        ));
    }
    let f_expr = f
        .expr()
        .ok_or_else(|| field_not_symbolic("generator input"))?;
    let vars = model.vars();
    let n = model.n();
    let names = vars.names();

    let mut acc = f_expr.diff(vars.time_var());
    for i in 0..n {
        let mu_i = model
            .mu
            .component(i)
            .expr()
            .ok_or_else(|| field_not_symbolic("drift"))?;
        acc = Expr::add(acc, Expr::mul(mu_i.clone(), f_expr.diff(&names[i])));
    }
    let a = model.diffusion_matrix()?;
    for i in 0..n {
        let di = f_expr.diff(&names[i]);
        for j in 0..n {
            let a_ij = a.entry(i, j).expr().expect("formed symbolically");
            if matches!(a_ij, Expr::Const(c) if *c == 0.0) {
                continue;
            }
            let dij = di.diff(&names[j]);
            acc = Expr::add(
                acc,
                Expr::mul(Expr::mul(Expr::Const(0.5), a_ij.clone()), dij),
            );
        }
    }
    Ok(ScalarField::from_expr(crate::expr::simplify(&acc), vars)?)
}

/// Generator application bundled with its input.
pub fn generator_application(
    model: &SdeModel,
    f: &ScalarField,
) -> Result<GeneratorApplication, SdeError> {
    Ok(GeneratorApplication {
        input: f.clone(),
        output: apply_generator(model, f)?,
    })
}

/// Worst deviations found by a coefficient comparison.
#[derive(Debug, Clone)]
pub struct GaugeReport {
    pub equivalent: bool,
    pub worst_drift: f64,
    pub worst_diffusion: f64,
    pub worst_point: Vec<f64>,
    pub tol: f64,
}

/// Tests whether two models share the same martingale problem, i.e. whether
/// μ and σσᵀ agree at every sample point within `tol` (the generator-level
/// criterion; equality of σσᵀ is exactly membership in the gauge family).
pub fn gauge_equivalent(
    a_model: &SdeModel,
    b_model: &SdeModel,
    sample_points: &[Vec<f64>],
    tol: f64,
) -> Result<GaugeReport, SdeError> {
    if a_model.n() != b_model.n() || a_model.m() != b_model.m() {
        return Err(SdeError::Shape(
            "models must share spatial and Brownian dimensions".into(),
        ));
    }
    let mut worst_drift = 0.0f64;
    let mut worst_diff = 0.0f64;
    let mut worst_point = Vec::new();
    for p in sample_points {
        let mu_a = eval_vector(a_model.mu(), p)?;
        let mu_b = eval_vector(b_model.mu(), p)?;
        let s_a = eval_matrix(a_model.sigma(), p)?;
        let s_b = eval_matrix(b_model.sigma(), p)?;
        let d_mu = (mu_a - mu_b).amax();
        let d_a = crate::numeric::max_abs(&(&s_a * s_a.transpose() - &s_b * s_b.transpose()));
        if d_mu.max(d_a) > worst_drift.max(worst_diff) {
            worst_point = p.clone();
        }
        worst_drift = worst_drift.max(d_mu);
        worst_diff = worst_diff.max(d_a);
    }
    Ok(GaugeReport {
        equivalent: worst_drift <= tol && worst_diff <= tol,
        worst_drift,
        worst_diffusion: worst_diff,
        worst_point,
        tol,
    })
}

/// Entrywise comparison of μ and σ (not σσᵀ): the weak-symmetry criterion.
pub fn coefficients_equal(
    a_model: &SdeModel,
    b_model: &SdeModel,
    sample_points: &[Vec<f64>],
    tol: f64,
) -> Result<GaugeReport, SdeError> {
    if a_model.n() != b_model.n() || a_model.m() != b_model.m() {
        return Err(SdeError::Shape(
            "models must share spatial and Brownian dimensions".into(),
        ));
    }
    let mut worst_drift = 0.0f64;
    let mut worst_diff = 0.0f64;
    let mut worst_point = Vec::new();
    for p in sample_points {
        let d_mu = (eval_vector(a_model.mu(), p)? - eval_vector(b_model.mu(), p)?).amax();
        let d_s = crate::numeric::max_abs(
            &(eval_matrix(a_model.sigma(), p)? - eval_matrix(b_model.sigma(), p)?),
        );
        if d_mu.max(d_s) > worst_drift.max(worst_diff) {
            worst_point = p.clone();
        }
        worst_drift = worst_drift.max(d_mu);
        worst_diff = worst_diff.max(d_s);
    }
    Ok(GaugeReport {
        equivalent: worst_drift <= tol && worst_diff <= tol,
        worst_drift,
        worst_diffusion: worst_diff,
        worst_point,
        tol,
    })
}

/// JSON descriptor for a model (the on-disk interface).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeModelDescriptor {
    pub n: usize,
    pub m: usize,
    /// n spatial variable names followed by the time variable name.
    pub vars: Vec<String>,
    pub mu: Vec<String>,
    pub sigma: Vec<Vec<String>>,
    /// n+1 per-coordinate intervals, time last.
    pub domain_box: Vec<[f64; 2]>,
    pub initial_point: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_coords: Option<Vec<bool>>,
}

impl SdeModel {
    pub fn from_descriptor(d: &SdeModelDescriptor) -> Result<SdeModel, SdeError> {
        if d.vars.len() != d.n + 1 {
            return Err(SdeError::InvalidModel(format!(
                "descriptor declares n={} but lists {} variables (need n spatial + time)",
                d.n,
                d.vars.len()
            )));
        }
        let vars = VarSet::new(d.vars.clone()).map_err(FieldError::from)?;
        let mu = VectorField::parse(
            &d.mu.iter().map(String::as_str).collect::<Vec<_>>(),
            &vars,
        )?;
        if d.sigma.len() != d.n || d.sigma.iter().any(|r| r.len() != d.m) {
            return Err(SdeError::Shape(format!(
                "sigma must be {}x{} expressions",
                d.n, d.m
            )));
        }
        let sigma = MatrixField::parse(
            &d.sigma
                .iter()
                .map(|r| r.iter().map(String::as_str).collect())
                .collect::<Vec<Vec<&str>>>(),
            &vars,
        )?;
        let model = SdeModel::new(vars, mu, sigma, d.domain_box.clone(), d.initial_point.clone())?;
        match &d.log_coords {
            Some(flags) => model.with_log_coords(flags.clone()),
            None => Ok(model),
        }
    }

    /// Descriptor for a fully symbolic model (None if any field is computed).
    pub fn to_descriptor(&self) -> Option<SdeModelDescriptor> {
        let mu = self
            .mu
            .components()
            .iter()
            .map(|c| c.expr().map(|e| e.to_string()))
            .collect::<Option<Vec<_>>>()?;
        let mut sigma = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let mut row = Vec::with_capacity(self.m());
            for j in 0..self.m() {
                row.push(self.sigma.entry(i, j).expr()?.to_string());
            }
            sigma.push(row);
        }
        Some(SdeModelDescriptor {
            n: self.n(),
            m: self.m(),
            vars: self.vars.names().to_vec(),
            mu,
            sigma,
            domain_box: self.domain_box.clone(),
            initial_point: self.initial_point.clone(),
            log_coords: if self.log_coords.iter().any(|&b| b) {
                Some(self.log_coords.clone())
            } else {
                None
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::eval_matrix;

    fn bm2d() -> SdeModel {
        crate::models::bm2d()
    }

    #[test]
    fn generator_on_squared_radius_is_constant() {
        let model = bm2d();
        let f = ScalarField::parse("x^2 + y^2", model.vars()).unwrap();
        let lf = apply_generator(&model, &f).unwrap();
        for p in model.sample_grid(16) {
            assert!((lf.eval(&p).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_sees_the_clock_coordinate() {
        let model = bm2d();
        let f = ScalarField::parse("z", model.vars()).unwrap();
        let lf = apply_generator(&model, &f).unwrap();
        assert!((lf.eval(&[0.3, 0.4, 0.2, 0.1]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generator_of_pure_drift_model() {
        let vars = VarSet::spatial_and_time(&["x"], "t").unwrap();
        let model = SdeModel::new(
            vars.clone(),
            VectorField::parse(&["1"], &vars).unwrap(),
            MatrixField::parse(&[vec!["0"]], &vars).unwrap(),
            vec![[-1.0, 1.0], [0.0, 1.0]],
            vec![0.0],
        )
        .unwrap();
        let f = ScalarField::parse("x", &vars).unwrap();
        let lf = apply_generator(&model, &f).unwrap();
        assert!((lf.eval(&[0.5, 0.2]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generator_is_linear() {
        let model = bm2d();
        let f = ScalarField::parse("sin(x)*y + z^2", model.vars()).unwrap();
        let g = ScalarField::parse("tanh(y) + x^3", model.vars()).unwrap();
        let sum = ScalarField::parse("sin(x)*y + z^2 + tanh(y) + x^3", model.vars()).unwrap();
        let lf = apply_generator(&model, &f).unwrap();
        let lg = apply_generator(&model, &g).unwrap();
        let lsum = apply_generator(&model, &sum).unwrap();
        for p in model.sample_grid(32) {
            let lhs = lsum.eval(&p).unwrap();
            let rhs = lf.eval(&p).unwrap() + lg.eval(&p).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn diffusion_matrix_matches_numeric_product() {
        let p = crate::models::LotkaVolterraParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            sigma_tilde: 0.7,
        };
        let model = crate::models::lotka_volterra(&p).unwrap();
        let a = model.diffusion_matrix().unwrap();
        for point in model.sample_grid(32) {
            let s = eval_matrix(model.sigma(), &point).unwrap();
            let numeric = &s * s.transpose();
            let symbolic = eval_matrix(&a, &point).unwrap();
            assert!(crate::numeric::max_abs(&(numeric - symbolic)) < 1e-12);
        }
    }

    #[test]
    fn gauge_equivalence_under_rotation() {
        let model = bm2d();
        let grid = model.sample_grid(64);
        let self_report = gauge_equivalent(&model, &model, &grid, 1e-9).unwrap();
        assert!(self_report.equivalent);

        let b = MatrixField::parse(
            &[
                vec!["cos(0.3)", "sin(0.3)"],
                vec!["-sin(0.3)", "cos(0.3)"],
            ],
            model.vars(),
        )
        .unwrap();
        let rotated = model.rotated(&b).unwrap();
        let report = gauge_equivalent(&model, &rotated, &grid, 1e-9).unwrap();
        assert!(report.equivalent, "worst {:?}", report);
        // The rotated diffusion differs entrywise even though σσᵀ agrees.
        let direct = coefficients_equal(&model, &rotated, &grid, 1e-9).unwrap();
        assert!(!direct.equivalent);

        let scaled = {
            let vars = model.vars().clone();
            SdeModel::new(
                vars.clone(),
                model.mu().clone(),
                MatrixField::parse(
                    &[vec!["2", "0"], vec!["0", "2"], vec!["0", "0"]],
                    &vars,
                )
                .unwrap(),
                model.domain_box().to_vec(),
                model.initial_point().to_vec(),
            )
            .unwrap()
        };
        assert!(!gauge_equivalent(&model, &scaled, &grid, 1e-9).unwrap().equivalent);
    }

    #[test]
    fn gauge_family_closed_under_state_dependent_rotation() {
        let model = bm2d();
        // Rotation angle depending on the clock coordinate.
        let b = MatrixField::parse(
            &[vec!["cos(z)", "sin(z)"], vec!["-sin(z)", "cos(z)"]],
            model.vars(),
        )
        .unwrap();
        let grid = model.sample_grid(64);
        assert!(crate::fields::check_special_orthogonal(&b, &grid, 1e-9)
            .unwrap()
            .pass);
        let rotated = model.rotated(&b).unwrap();
        assert!(gauge_equivalent(&model, &rotated, &grid, 1e-9)
            .unwrap()
            .equivalent);
    }

    #[test]
    fn generator_rejects_foreign_variables() {
        let model = bm2d();
        let other = VarSet::spatial_and_time(&["u", "v"], "t").unwrap();
        let f = ScalarField::parse("u*v", &other).unwrap();
        assert!(matches!(
            apply_generator(&model, &f),
            Err(SdeError::VarMismatch(_))
        ));
    }

    #[test]
    fn descriptor_round_trip() {
        let model = bm2d();
        let d = model.to_descriptor().unwrap();
        let text = serde_json::to_string(&d).unwrap();
        let back: SdeModelDescriptor = serde_json::from_str(&text).unwrap();
        let rebuilt = SdeModel::from_descriptor(&back).unwrap();
        for p in model.sample_grid(8) {
            let a = crate::fields::eval_vector(model.mu(), &p).unwrap();
            let b = crate::fields::eval_vector(rebuilt.mu(), &p).unwrap();
            assert_eq!(a, b);
        }
    }
}
