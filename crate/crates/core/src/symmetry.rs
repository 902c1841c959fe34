//! Infinitesimal stochastic transformations V = (Y, C, τ, H), the weak and
//! 𝒢-weak determining equations, and reconstruction of the one-parameter
//! group T_λ by integrating
//!
//! ```text
//! ∂_λ Φ_λ = Y(Φ_λ)      ∂_λ f_λ = m(f_λ)
//! ∂_λ B_λ = C(Φ_λ) B_λ   ∂_λ η_λ = τ(f_λ) η_λ
//! ∂_λ h_λ = √η_λ B_λ⁻¹ H(Φ_λ)
//! ```
//!
//! from the identity data, with fixed-step RK4 and a polar re-projection of
//! B onto SO(m) after every step.
//!
//! Determining "equality to zero" is numeric on a sample grid: the residual
//! fields are formed symbolically and their sup norm over the grid is
//! reported.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{simplify, Expr, VarSet};
use crate::fields::{
    check_antisymmetric, eval_matrix, eval_vector, FieldError, MatrixField, ScalarField,
    VectorField,
};
use crate::numeric::{halton_grid, max_abs, project_special_orthogonal};
use crate::sde::{apply_generator, SdeError, SdeModel};
use crate::transform::{FiniteTransformation, SpatialMap, TimeChange, TransformError};

#[derive(Debug, Error)]
pub enum SymmetryError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("variable error: {0}")]
    Var(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("flow escaped the working box at lambda={lambda}: state {state:?}")]
    FlowEscapedBox { lambda: f64, state: Vec<f64> },
    #[error("flow step size underflow (steps={steps}, lambda={lambda})")]
    StepSizeUnderflow { steps: usize, lambda: f64 },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// An infinitesimal stochastic transformation V = (Y, C, τ, H) with
/// m(t) = ∫₀ᵗ τ(s) ds.
///
/// The spatial components Y must not reference the literal time variable
/// (time dependence belongs to the clock coordinate); m and τ are functions
/// of time only.
#[derive(Debug, Clone)]
pub struct InfinitesimalSymmetry {
    vars: VarSet,
    y_spatial: VectorField,
    m_time: ScalarField,
    c_rotation: MatrixField,
    tau: ScalarField,
    h_dot: VectorField,
}

/// JSON descriptor for an infinitesimal symmetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryDescriptor {
    #[serde(rename = "Y")]
    pub y: Vec<String>,
    pub m: String,
    #[serde(rename = "C")]
    pub c: Vec<Vec<String>>,
    pub tau: String,
    #[serde(rename = "H")]
    pub h: Vec<String>,
}

impl InfinitesimalSymmetry {
    /// Validates and assembles a symmetry against a model's variable set and
    /// working box: C must be so(m)-valued (tol 1e-9) and m(t) must equal
    /// ∫₀ᵗ τ numerically (tol 1e-9) at grid points.
    pub fn new(
        vars: &VarSet,
        y_spatial: VectorField,
        m_time: ScalarField,
        c_rotation: MatrixField,
        tau: ScalarField,
        h_dot: VectorField,
        check_box: &[[f64; 2]],
    ) -> Result<Self, SymmetryError> {
        let n = vars.n_spatial();
        if y_spatial.len() != n {
            return Err(SymmetryError::Shape(format!(
                "Y has {} components, expected {n}",
                y_spatial.len()
            )));
        }
        if c_rotation.nrows() != c_rotation.ncols() {
            return Err(SymmetryError::Shape("C must be square".into()));
        }
        if h_dot.len() != c_rotation.nrows() {
            return Err(SymmetryError::Shape(
                "H length must match the Brownian dimension of C".into(),
            ));
        }
        let time = vars.time_var().to_string();
        for (i, c) in y_spatial.components().iter().enumerate() {
            if let Some(e) = c.expr() {
                if e.variables().contains(&time) {
                    return Err(SymmetryError::Var(format!(
                        "Y component {i} references the time variable `{time}`"
                    )));
                }
            }
        }
        // m and τ are functions of a single time argument (written in the
        // clock coordinate for autonomized models).
        let m_slot = m_time.scalar_argument_slot()?;
        let tau_slot = tau.scalar_argument_slot()?;
        let grid = halton_grid(check_box, 64);
        let report = check_antisymmetric(&c_rotation, &grid, 1e-9)?;
        if !report.pass {
            return Err(SymmetryError::Invariant(format!(
                "C is not antisymmetric: worst defect {}",
                report.worst_defect
            )));
        }
        // m(t) = ∫₀ᵗ τ(s) ds on the time grid.
        let time_iv = check_box[check_box.len() - 1];
        let nvars = vars.len();
        let tau_c = tau.clone();
        let tau_at = move |t: f64| {
            let mut p = vec![0.0; nvars];
            p[tau_slot] = t;
            tau_c.eval(&p).unwrap_or(f64::NAN)
        };
        for k in 0..=16 {
            let t = time_iv[0].max(0.0) + (time_iv[1] - time_iv[0].max(0.0)) * k as f64 / 16.0;
            let mut p = vec![0.0; nvars];
            p[m_slot] = t;
            let m_val = m_time.eval(&p).map_err(SymmetryError::Field)?;
            let int_tau = crate::numeric::adaptive_simpson(&tau_at, 0.0, t, 1e-12);
            if (m_val - int_tau).abs() > 1e-9 {
                return Err(SymmetryError::Invariant(format!(
                    "m(t) != ∫₀ᵗ τ at t={t}: m={m_val}, integral={int_tau}"
                )));
            }
        }
        Ok(InfinitesimalSymmetry {
            vars: vars.clone(),
            y_spatial,
            m_time,
            c_rotation,
            tau,
            h_dot,
        })
    }

    pub fn from_descriptor(
        d: &SymmetryDescriptor,
        model: &SdeModel,
    ) -> Result<Self, SymmetryError> {
        let vars = model.vars();
        fn to_refs(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        let y = VectorField::parse(&to_refs(&d.y), vars)?;
        let m = ScalarField::parse(&d.m, vars)?;
        let c = MatrixField::parse(
            &d.c.iter().map(|r| to_refs(r)).collect::<Vec<_>>(),
            vars,
        )?;
        let tau = ScalarField::parse(&d.tau, vars)?;
        let h = VectorField::parse(&to_refs(&d.h), vars)?;
        InfinitesimalSymmetry::new(vars, y, m, c, tau, h, model.domain_box())
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn brownian_dim(&self) -> usize {
        self.c_rotation.nrows()
    }

    pub fn y_spatial(&self) -> &VectorField {
        &self.y_spatial
    }

    pub fn m_time(&self) -> &ScalarField {
        &self.m_time
    }

    pub fn c_rotation(&self) -> &MatrixField {
        &self.c_rotation
    }

    pub fn tau(&self) -> &ScalarField {
        &self.tau
    }

    pub fn h_dot(&self) -> &VectorField {
        &self.h_dot
    }

    pub fn m_at(&self, t: f64) -> Result<f64, SymmetryError> {
        let mut p = vec![0.0; self.vars.len()];
        p[self.m_time.scalar_argument_slot()?] = t;
        self.m_time.eval(&p).map_err(SymmetryError::Field)
    }

    pub fn tau_at(&self, t: f64) -> Result<f64, SymmetryError> {
        let mut p = vec![0.0; self.vars.len()];
        p[self.tau.scalar_argument_slot()?] = t;
        self.tau.eval(&p).map_err(SymmetryError::Field)
    }

    /// The vector field applied to a scalar expression:
    /// Y(g) = Σₖ Yᵏ ∂ₖ g + m ∂ₜ g.
    pub fn apply_to_expr(&self, g: &Expr) -> Result<Expr, SymmetryError> {
        let names = self.vars.names();
        let n = self.vars.n_spatial();
        let mut acc = Expr::Const(0.0);
        for k in 0..n {
            let yk = self
                .y_spatial
                .component(k)
                .expr()
                .ok_or_else(|| not_symbolic("Y"))?;
            acc = Expr::add(acc, Expr::mul(yk.clone(), g.diff(&names[k])));
        }
        let m_expr = self.m_time.expr().ok_or_else(|| not_symbolic("m"))?;
        acc = Expr::add(acc, Expr::mul(m_expr.clone(), g.diff(self.vars.time_var())));
        Ok(simplify(&acc))
    }

    /// Y applied to a scalar field, as a field.
    pub fn apply_to_field(&self, f: &ScalarField) -> Result<ScalarField, SymmetryError> {
        let e = f.expr().ok_or_else(|| not_symbolic("functional"))?;
        Ok(ScalarField::from_expr(self.apply_to_expr(e)?, &self.vars)?)
    }
}

fn not_symbolic(what: &str) -> SymmetryError {
    SymmetryError::Field(FieldError::NotSymbolic(format!(
        "{what} must be symbolic for the determining equations"
    )))
}

/// Residuals of a determining-equation system, with the grid sup norm.
#[derive(Debug, Clone)]
pub struct DeterminingResidual {
    pub drift_residual: VectorField,
    pub diffusion_residual: MatrixField,
    pub sup_norm_on_grid: f64,
    pub worst_point: Vec<f64>,
}

/// Default residual grid: 128 low-discrepancy points in the model box.
pub fn default_grid(model: &SdeModel) -> Vec<Vec<f64>> {
    model.sample_grid(128)
}

/// Weak determining equations:
/// R₁ = Y(μ) − L(Y) − σH + τμ,  R₂ = [Y,σ] + ½τσ + σC
/// with [Y,σ]ⁱ_α = Y(σⁱ_α) − ∂ₖ(Yⁱ)σᵏ_α.
pub fn weak_determining_residual(
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    grid: &[Vec<f64>],
) -> Result<DeterminingResidual, SymmetryError> {
    check_dims(model, v)?;
    let n = model.n();
    let m = model.m();
    let vars = model.vars();
    let names = vars.names();

    let mut r1 = Vec::with_capacity(n);
    for i in 0..n {
        let mu_i = model
            .mu()
            .component(i)
            .expr()
            .ok_or_else(|| not_symbolic("drift"))?;
        let y_mu = v.apply_to_expr(mu_i)?;
        let l_yi = apply_generator(model, v.y_spatial().component(i))?;
        let l_yi = l_yi.expr().expect("generator output is symbolic").clone();
        let mut sigma_h = Expr::Const(0.0);
        for alpha in 0..m {
            let s = model
                .sigma()
                .entry(i, alpha)
                .expr()
                .ok_or_else(|| not_symbolic("diffusion"))?;
            let h = v
                .h_dot()
                .component(alpha)
                .expr()
                .ok_or_else(|| not_symbolic("H"))?;
            sigma_h = Expr::add(sigma_h, Expr::mul(s.clone(), h.clone()));
        }
        let tau_mu = Expr::mul(
            v.tau().expr().ok_or_else(|| not_symbolic("tau"))?.clone(),
            mu_i.clone(),
        );
        let expr = simplify(&Expr::add(
            Expr::sub(Expr::sub(y_mu, l_yi), sigma_h),
            tau_mu,
        ));
        r1.push(ScalarField::from_expr(expr, vars)?);
    }

    let mut r2_rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(m);
        for alpha in 0..m {
            let s_ia = model
                .sigma()
                .entry(i, alpha)
                .expr()
                .ok_or_else(|| not_symbolic("diffusion"))?;
            let y_s = v.apply_to_expr(s_ia)?;
            let mut dy_s = Expr::Const(0.0);
            for k in 0..n {
                let yi = v
                    .y_spatial()
                    .component(i)
                    .expr()
                    .ok_or_else(|| not_symbolic("Y"))?;
                let s_ka = model
                    .sigma()
                    .entry(k, alpha)
                    .expr()
                    .expect("checked symbolic");
                dy_s = Expr::add(dy_s, Expr::mul(yi.diff(&names[k]), s_ka.clone()));
            }
            let half_tau_s = Expr::mul(
                Expr::mul(
                    Expr::Const(0.5),
                    v.tau().expr().ok_or_else(|| not_symbolic("tau"))?.clone(),
                ),
                s_ia.clone(),
            );
            let mut s_c = Expr::Const(0.0);
            for k in 0..m {
                let s_ik = model
                    .sigma()
                    .entry(i, k)
                    .expr()
                    .expect("checked symbolic");
                let c_ka = v
                    .c_rotation()
                    .entry(k, alpha)
                    .expr()
                    .ok_or_else(|| not_symbolic("C"))?;
                s_c = Expr::add(s_c, Expr::mul(s_ik.clone(), c_ka.clone()));
            }
            let expr = simplify(&Expr::add(
                Expr::add(Expr::sub(y_s, dy_s), half_tau_s),
                s_c,
            ));
            row.push(ScalarField::from_expr(expr, vars)?);
        }
        r2_rows.push(row);
    }

    finish_residual(
        VectorField::new(r1)?,
        MatrixField::new(r2_rows)?,
        grid,
    )
}

/// 𝒢-weak determining equations:
/// R₁ as in the weak system; R₂ = [Y, σσᵀ] + τσσᵀ with
/// [Y, A] = Y(A) − D(Y)A − A D(Y)ᵀ. The rotation component C does not enter.
pub fn gweak_determining_residual(
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    grid: &[Vec<f64>],
) -> Result<DeterminingResidual, SymmetryError> {
    check_dims(model, v)?;
    let n = model.n();
    let vars = model.vars();
    let names = vars.names();
    let a = model.diffusion_matrix()?;

    // Drift residual is shared with the weak system.
    let weak = weak_determining_residual(model, v, &[])?;
    let r1 = weak.drift_residual;

    let mut r2_rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let a_ij = a.entry(i, j).expr().expect("formed symbolically");
            let y_a = v.apply_to_expr(a_ij)?;
            let mut dya = Expr::Const(0.0);
            let mut ady = Expr::Const(0.0);
            for k in 0..n {
                let yi = v.y_spatial().component(i).expr().expect("checked");
                let yj = v.y_spatial().component(j).expr().expect("checked");
                let a_kj = a.entry(k, j).expr().expect("symbolic");
                let a_ik = a.entry(i, k).expr().expect("symbolic");
                dya = Expr::add(dya, Expr::mul(yi.diff(&names[k]), a_kj.clone()));
                ady = Expr::add(ady, Expr::mul(a_ik.clone(), yj.diff(&names[k])));
            }
            let tau_a = Expr::mul(
                v.tau().expr().ok_or_else(|| not_symbolic("tau"))?.clone(),
                a_ij.clone(),
            );
            let expr = simplify(&Expr::add(
                Expr::sub(Expr::sub(y_a, dya), ady),
                tau_a,
            ));
            row.push(ScalarField::from_expr(expr, vars)?);
        }
        r2_rows.push(row);
    }

    finish_residual(r1, MatrixField::new(r2_rows)?, grid)
}

fn check_dims(model: &SdeModel, v: &InfinitesimalSymmetry) -> Result<(), SymmetryError> {
    if model.vars() != v.vars() {
        return Err(SymmetryError::Var(
            "model and symmetry must share the variable set".into(),
        ));
    }
    if model.m() != v.brownian_dim() {
        return Err(SymmetryError::Shape(
            "model and symmetry must share the Brownian dimension".into(),
        ));
    }
    Ok(())
}

fn finish_residual(
    r1: VectorField,
    r2: MatrixField,
    grid: &[Vec<f64>],
) -> Result<DeterminingResidual, SymmetryError> {
    let mut sup = 0.0f64;
    let mut worst = grid.first().cloned().unwrap_or_default();
    for p in grid {
        let v1 = eval_vector(&r1, p)?;
        let v2 = eval_matrix(&r2, p)?;
        let local = v1.amax().max(max_abs(&v2));
        if local > sup {
            sup = local;
            worst = p.clone();
        }
    }
    Ok(DeterminingResidual {
        drift_residual: r1,
        diffusion_residual: r2,
        sup_norm_on_grid: sup,
        worst_point: worst,
    })
}

/// Evaluated one-parameter-group data at a single point.
#[derive(Debug, Clone)]
pub struct FlowPoint {
    /// Φ̃_λ(x)
    pub phi: Vec<f64>,
    /// f_λ(t)
    pub f: f64,
    /// B_λ(x, t)
    pub b: DMatrix<f64>,
    /// η_λ(t)
    pub eta: f64,
    /// h_λ(x, t)
    pub h: DVector<f64>,
}

/// Options for flow reconstruction.
#[derive(Debug, Clone)]
pub struct FlowOptions {
    /// Number of fixed RK4 steps over [0, λ].
    pub steps: usize,
    /// Region the spatial flow must stay inside; when absent, escape is only
    /// detected via the overflow guard.
    pub escape_box: Option<Vec<[f64; 2]>>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            steps: 1000,
            escape_box: None,
        }
    }
}

const FLOW_OVERFLOW_GUARD: f64 = 1e9;

/// Reconstructs T_λ pointwise by RK4 integration of the flow system, with a
/// polar re-projection of B onto SO(m) after every step.
pub fn reconstruct_flow(
    v: &InfinitesimalSymmetry,
    lambda: f64,
    x: &[f64],
    t: f64,
    opts: &FlowOptions,
) -> Result<FlowPoint, SymmetryError> {
    let n = v.vars().n_spatial();
    let m = v.brownian_dim();
    if x.len() != n {
        return Err(SymmetryError::Shape(format!(
            "flow start point has {} coordinates, expected {n}",
            x.len()
        )));
    }
    if opts.steps == 0 || !lambda.is_finite() {
        return Err(SymmetryError::StepSizeUnderflow {
            steps: opts.steps,
            lambda,
        });
    }

    // State layout: [Φ̃ (n) | f (1) | B (m×m row-major) | η (1) | h (m)].
    let mut state = vec![0.0; n + 1 + m * m + 1 + m];
    state[..n].copy_from_slice(x);
    state[n] = t;
    for i in 0..m {
        state[n + 1 + i * m + i] = 1.0;
    }
    state[n + 1 + m * m] = 1.0;

    if lambda == 0.0 {
        return Ok(unpack_flow_state(&state, n, m));
    }

    let h_step = lambda / opts.steps as f64;
    let m_slot = v.m_time().scalar_argument_slot().map_err(SymmetryError::Field)?;
    let tau_slot = v.tau().scalar_argument_slot().map_err(SymmetryError::Field)?;
    let mut scratch = Vec::new();
    let mut point = vec![0.0; n + 1];
    let mut time_point = vec![0.0; v.vars().len()];
    let mut k1 = vec![0.0; state.len()];
    let mut k2 = vec![0.0; state.len()];
    let mut k3 = vec![0.0; state.len()];
    let mut k4 = vec![0.0; state.len()];
    let mut tmp = vec![0.0; state.len()];

    let mut rhs = |s: &[f64], out: &mut [f64]| -> Result<(), SymmetryError> {
        point[..n].copy_from_slice(&s[..n]);
        point[n] = s[n];
        let f_val = s[n];
        let eta_val = s[n + 1 + m * m];
        if eta_val <= 0.0 {
            return Err(SymmetryError::Invariant(format!(
                "eta became non-positive ({eta_val}) along the flow"
            )));
        }
        for i in 0..n {
            out[i] = v
                .y_spatial()
                .component(i)
                .eval_scratch(&point, &mut scratch)
                .map_err(SymmetryError::Field)?;
        }
        time_point.fill(0.0);
        time_point[m_slot] = f_val;
        out[n] = v
            .m_time()
            .eval_scratch(&time_point, &mut scratch)
            .map_err(SymmetryError::Field)?;
        // dB = C(Φ_λ) B
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    let c_ik = v
                        .c_rotation()
                        .entry(i, k)
                        .eval_scratch(&point, &mut scratch)
                        .map_err(SymmetryError::Field)?;
                    acc += c_ik * s[n + 1 + k * m + j];
                }
                out[n + 1 + i * m + j] = acc;
            }
        }
        time_point.fill(0.0);
        time_point[tau_slot] = f_val;
        let tau_val = v
            .tau()
            .eval_scratch(&time_point, &mut scratch)
            .map_err(SymmetryError::Field)?;
        out[n + 1 + m * m] = tau_val * eta_val;
        // dh = √η B⁻¹ H(Φ_λ) with B⁻¹ = Bᵀ.
        let sqrt_eta = eta_val.sqrt();
        for alpha in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                let h_k = v
                    .h_dot()
                    .component(k)
                    .eval_scratch(&point, &mut scratch)
                    .map_err(SymmetryError::Field)?;
                acc += s[n + 1 + k * m + alpha] * h_k;
            }
            out[n + 1 + m * m + 1 + alpha] = sqrt_eta * acc;
        }
        Ok(())
    };

    for step in 0..opts.steps {
        let _ = step;
        rhs(&state, &mut k1)?;
        for i in 0..state.len() {
            tmp[i] = state[i] + 0.5 * h_step * k1[i];
        }
        rhs(&tmp, &mut k2)?;
        for i in 0..state.len() {
            tmp[i] = state[i] + 0.5 * h_step * k2[i];
        }
        rhs(&tmp, &mut k3)?;
        for i in 0..state.len() {
            tmp[i] = state[i] + h_step * k3[i];
        }
        rhs(&tmp, &mut k4)?;
        for i in 0..state.len() {
            state[i] += h_step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        // Re-orthonormalize B: RK4 alone drifts off the group.
        let b = DMatrix::from_fn(m, m, |i, j| state[n + 1 + i * m + j]);
        let b = project_special_orthogonal(&b);
        for i in 0..m {
            for j in 0..m {
                state[n + 1 + i * m + j] = b[(i, j)];
            }
        }
        for (i, s) in state[..n].iter().enumerate() {
            if !s.is_finite() || s.abs() > FLOW_OVERFLOW_GUARD {
                return Err(SymmetryError::FlowEscapedBox {
                    lambda,
                    state: state[..n].to_vec(),
                });
            }
            if let Some(bx) = &opts.escape_box {
                let [lo, hi] = bx[i];
                let slack = hi - lo;
                if *s < lo - slack || *s > hi + slack {
                    return Err(SymmetryError::FlowEscapedBox {
                        lambda,
                        state: state[..n].to_vec(),
                    });
                }
            }
        }
    }
    Ok(unpack_flow_state(&state, n, m))
}

fn unpack_flow_state(state: &[f64], n: usize, m: usize) -> FlowPoint {
    FlowPoint {
        phi: state[..n].to_vec(),
        f: state[n],
        b: DMatrix::from_fn(m, m, |i, j| state[n + 1 + i * m + j]),
        eta: state[n + 1 + m * m],
        h: DVector::from_fn(m, |i, _| state[n + 1 + m * m + 1 + i]),
    }
}

/// Which finite symmetry criterion to verify against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryKind {
    /// μ and σ both reproduce: the weak criterion.
    Weak,
    /// μ and σσᵀ reproduce: the 𝒢-weak criterion.
    GWeak,
}

/// Violation report for the reconstructed finite criterion.
#[derive(Debug, Clone)]
pub struct FiniteSymmetryReport {
    pub per_lambda: Vec<(f64, f64)>,
    pub max_violation: f64,
    pub kind: SymmetryKind,
}

/// Verifies that the reconstructed T_λ satisfies the finite symmetry
/// criterion at each grid point: the Jacobian D(Φ_λ) is formed by central
/// differences of the flow (step 1e-5; second derivatives with step 1e-4)
/// and the transformed coefficients are compared against the model's at the
/// image points.
pub fn verify_finite_symmetry(
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    lambdas: &[f64],
    grid: &[Vec<f64>],
    kind: SymmetryKind,
    opts: &FlowOptions,
) -> Result<FiniteSymmetryReport, SymmetryError> {
    check_dims(model, v)?;
    let n = model.n();
    let mut per_lambda = Vec::with_capacity(lambdas.len());
    let mut overall = 0.0f64;
    for &lambda in lambdas {
        let mut worst = 0.0f64;
        for p in grid {
            let (x, t) = (&p[..n], p[n]);
            let center = reconstruct_flow(v, lambda, x, t, opts)?;
            let jac = flow_jacobian(v, lambda, x, t, opts)?;
            let mut image = center.phi.clone();
            image.push(center.f);

            let mu_here = eval_vector(model.mu(), p)?;
            let sigma_here = eval_matrix(model.sigma(), p)?;
            let mu_image = eval_vector(model.mu(), &image)?;
            let sigma_image = eval_matrix(model.sigma(), &image)?;

            // Drift criterion (common to both kinds):
            // μ∘Φ = (1/η)[L(Φ) + D(Φ)σh].
            let hess = flow_hessians(v, lambda, x, t, opts)?;
            let a_here = &sigma_here * sigma_here.transpose();
            let mut l_phi = DVector::zeros(n);
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += mu_here[i] * jac[(j, i)];
                }
                for i in 0..n {
                    for k in 0..n {
                        let aik = a_here[(i, k)];
                        if aik != 0.0 {
                            acc += 0.5 * aik * hess[j][(i, k)];
                        }
                    }
                }
                l_phi[j] = acc;
            }
            let rhs_mu = (l_phi + &jac * (&sigma_here * &center.h)) / center.eta;
            worst = worst.max((mu_image - rhs_mu).amax());

            match kind {
                SymmetryKind::Weak => {
                    let rhs_sigma =
                        (&jac * &sigma_here * center.b.transpose()) / center.eta.sqrt();
                    worst = worst.max(max_abs(&(sigma_image - rhs_sigma)));
                }
                SymmetryKind::GWeak => {
                    let a_image = &sigma_image * sigma_image.transpose();
                    let rhs_a = (&jac * &a_here * jac.transpose()) / center.eta;
                    worst = worst.max(max_abs(&(a_image - rhs_a)));
                }
            }
        }
        per_lambda.push((lambda, worst));
        overall = overall.max(worst);
    }
    Ok(FiniteSymmetryReport {
        per_lambda,
        max_violation: overall,
        kind,
    })
}

const FLOW_JAC_STEP: f64 = 1e-5;
const FLOW_HESS_STEP: f64 = 1e-4;

fn flow_jacobian(
    v: &InfinitesimalSymmetry,
    lambda: f64,
    x: &[f64],
    t: f64,
    opts: &FlowOptions,
) -> Result<DMatrix<f64>, SymmetryError> {
    let n = x.len();
    // The flow at λ = 0 is the identity exactly; differencing it only adds
    // cancellation noise.
    if lambda == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        xp[k] = x[k] + FLOW_JAC_STEP;
        let fp = reconstruct_flow(v, lambda, &xp, t, opts)?;
        xp[k] = x[k] - FLOW_JAC_STEP;
        let fm = reconstruct_flow(v, lambda, &xp, t, opts)?;
        xp[k] = x[k];
        for j in 0..n {
            jac[(j, k)] = (fp.phi[j] - fm.phi[j]) / (2.0 * FLOW_JAC_STEP);
        }
    }
    Ok(jac)
}

fn flow_hessians(
    v: &InfinitesimalSymmetry,
    lambda: f64,
    x: &[f64],
    t: f64,
    opts: &FlowOptions,
) -> Result<Vec<DMatrix<f64>>, SymmetryError> {
    let n = x.len();
    if lambda == 0.0 {
        return Ok(vec![DMatrix::zeros(n, n); n]);
    }
    let h = FLOW_HESS_STEP;
    let f0 = reconstruct_flow(v, lambda, x, t, opts)?;
    let mut out = vec![DMatrix::zeros(n, n); n];
    let mut xp = x.to_vec();
    for k in 0..n {
        xp[k] = x[k] + h;
        let fp = reconstruct_flow(v, lambda, &xp, t, opts)?;
        xp[k] = x[k] - h;
        let fm = reconstruct_flow(v, lambda, &xp, t, opts)?;
        xp[k] = x[k];
        for j in 0..n {
            out[j][(k, k)] = (fp.phi[j] - 2.0 * f0.phi[j] + fm.phi[j]) / (h * h);
        }
        for l in (k + 1)..n {
            xp[k] = x[k] + h;
            xp[l] = x[l] + h;
            let fpp = reconstruct_flow(v, lambda, &xp, t, opts)?;
            xp[l] = x[l] - h;
            let fpm = reconstruct_flow(v, lambda, &xp, t, opts)?;
            xp[k] = x[k] - h;
            let fmm = reconstruct_flow(v, lambda, &xp, t, opts)?;
            xp[l] = x[l] + h;
            let fmp = reconstruct_flow(v, lambda, &xp, t, opts)?;
            xp[k] = x[k];
            xp[l] = x[l];
            for j in 0..n {
                let val = (fpp.phi[j] - fpm.phi[j] - fmp.phi[j] + fmm.phi[j]) / (4.0 * h * h);
                out[j][(k, l)] = val;
                out[j][(l, k)] = val;
            }
        }
    }
    Ok(out)
}

/// Reduced flow for the (Φ̃, f) subsystem only; the rotation, rate and
/// drift-shift equations do not feed back into it, so path-level uses of a
/// flow-reconstructed Φ̃ avoid integrating the full state.
fn reconstruct_flow_spatial(
    v: &InfinitesimalSymmetry,
    lambda: f64,
    x: &[f64],
    t: f64,
    steps: usize,
) -> Result<(Vec<f64>, f64), SymmetryError> {
    let n = v.vars().n_spatial();
    if steps == 0 || !lambda.is_finite() {
        return Err(SymmetryError::StepSizeUnderflow { steps, lambda });
    }
    let mut state = vec![0.0; n + 1];
    state[..n].copy_from_slice(x);
    state[n] = t;
    if lambda == 0.0 {
        let f = state[n];
        state.truncate(n);
        return Ok((state, f));
    }
    let m_slot = v.m_time().scalar_argument_slot().map_err(SymmetryError::Field)?;
    let h_step = lambda / steps as f64;
    let mut scratch = Vec::new();
    let mut point = vec![0.0; n + 1];
    let mut time_point = vec![0.0; v.vars().len()];
    let mut k = [vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]];
    let mut tmp = vec![0.0; n + 1];
    let mut rhs = |s: &[f64], out: &mut [f64]| -> Result<(), SymmetryError> {
        point.copy_from_slice(s);
        for i in 0..n {
            out[i] = v
                .y_spatial()
                .component(i)
                .eval_scratch(&point, &mut scratch)
                .map_err(SymmetryError::Field)?;
        }
        time_point.fill(0.0);
        time_point[m_slot] = s[n];
        out[n] = v
            .m_time()
            .eval_scratch(&time_point, &mut scratch)
            .map_err(SymmetryError::Field)?;
        Ok(())
    };
    for _ in 0..steps {
        rhs(&state, &mut k[0])?;
        for i in 0..=n {
            tmp[i] = state[i] + 0.5 * h_step * k[0][i];
        }
        rhs(&tmp, &mut k[1])?;
        for i in 0..=n {
            tmp[i] = state[i] + 0.5 * h_step * k[1][i];
        }
        rhs(&tmp, &mut k[2])?;
        for i in 0..=n {
            tmp[i] = state[i] + h_step * k[2][i];
        }
        rhs(&tmp, &mut k[3])?;
        for i in 0..=n {
            state[i] += h_step / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            if !state[i].is_finite() || state[i].abs() > FLOW_OVERFLOW_GUARD {
                return Err(SymmetryError::FlowEscapedBox {
                    lambda,
                    state: state[..n].to_vec(),
                });
            }
        }
    }
    let f = state[n];
    state.truncate(n);
    Ok((state, f))
}

/// Builds the finite transformation T_λ generated by `v` as a first-class
/// `FiniteTransformation` whose fields evaluate the reconstructed flow.
///
/// Structural zeros are exploited: a vanishing component of V produces the
/// corresponding identity component of T_λ symbolically (Y ≡ 0 ⇒ Φ = id,
/// C ≡ 0 ⇒ B = I, τ ≡ 0 and m ≡ 0 ⇒ η = 1, H ≡ 0 ⇒ h = 0), which keeps
/// Monte Carlo estimators that only need some components cheap.
pub fn flow_transformation(
    v: &InfinitesimalSymmetry,
    model: &SdeModel,
    lambda: f64,
    steps: usize,
) -> Result<FiniteTransformation, SymmetryError> {
    check_dims(model, v)?;
    let vars = model.vars().clone();
    let n = model.n();
    let m = model.m();
    let opts = FlowOptions {
        steps,
        escape_box: None,
    };

    let phi = if v.y_spatial().is_zero() {
        SpatialMap::identity(&vars, model.spatial_box().to_vec())
    } else {
        let vf = Arc::new(v.clone());
        let fwd: Arc<dyn Fn(&[f64]) -> Result<Vec<f64>, TransformError> + Send + Sync> = {
            let vf = vf.clone();
            Arc::new(move |x: &[f64]| {
                reconstruct_flow_spatial(&vf, lambda, x, 0.0, steps)
                    .map(|(phi, _)| phi)
                    .map_err(|e| TransformError::Numeric(e.to_string()))
            })
        };
        let inv: Arc<dyn Fn(&[f64]) -> Result<Vec<f64>, TransformError> + Send + Sync> =
            Arc::new(move |x: &[f64]| {
                reconstruct_flow_spatial(&vf, -lambda, x, 0.0, steps)
                    .map(|(phi, _)| phi)
                    .map_err(|e| TransformError::Numeric(e.to_string()))
            });
        SpatialMap::numeric(&vars, model.spatial_box().to_vec(), fwd, Some(inv))
    };

    let trivial_clock = v.tau().is_zero() && v.m_time().is_zero();
    let (eta_field, time) = if trivial_clock {
        (ScalarField::constant(1.0, &vars), TimeChange::Identity)
    } else {
        let zero_x = vec![0.0; n];
        let clock = {
            let (vf, vo, zx) = (Arc::new(v.clone()), opts.clone(), zero_x.clone());
            move |lam: f64, t: f64| -> Result<FlowPoint, TransformError> {
                // The clock subsystem (f, η) does not depend on the spatial
                // start; integrate the full system from a fixed spatial point.
                reconstruct_flow(&vf, lam, &zx, t, &vo)
                    .map_err(|e| TransformError::Numeric(e.to_string()))
            }
        };
        let eta_field = {
            let clock = clock.clone();
            ScalarField::computed(&vars, move |p| {
                clock(lambda, p[p.len() - 1])
                    .map(|fp| fp.eta)
                    .map_err(|e| FieldError::Eval(e.to_string()))
            })
        };
        let f_fn: Arc<dyn Fn(f64) -> Result<f64, TransformError> + Send + Sync> = {
            let clock = clock.clone();
            Arc::new(move |t| clock(lambda, t).map(|fp| fp.f))
        };
        let f_inv: Arc<dyn Fn(f64) -> Result<f64, TransformError> + Send + Sync> = {
            let clock = clock.clone();
            Arc::new(move |t| clock(-lambda, t).map(|fp| fp.f))
        };
        let eta_fn: Arc<dyn Fn(f64) -> Result<f64, TransformError> + Send + Sync> =
            Arc::new(move |t| clock(lambda, t).map(|fp| fp.eta));
        (
            eta_field,
            TimeChange::Numeric {
                f: f_fn,
                f_inv,
                eta: eta_fn,
            },
        )
    };

    let rotation = if v.c_rotation().is_zero() {
        MatrixField::identity(m, &vars)
    } else {
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let mut row = Vec::with_capacity(m);
            for j in 0..m {
                let (vf, vo) = (Arc::new(v.clone()), opts.clone());
                row.push(ScalarField::computed(&vars, move |p| {
                    let np = p.len() - 1;
                    reconstruct_flow(&vf, lambda, &p[..np], p[np], &vo)
                        .map(|fp| fp.b[(i, j)])
                        .map_err(|e| FieldError::Eval(e.to_string()))
                }));
            }
            rows.push(row);
        }
        MatrixField::new(rows)?
    };

    let drift_shift = if v.h_dot().is_zero() {
        VectorField::zeros(m, &vars)
    } else {
        let mut comps = Vec::with_capacity(m);
        for alpha in 0..m {
            let (vf, vo) = (Arc::new(v.clone()), opts.clone());
            comps.push(ScalarField::computed(&vars, move |p| {
                let np = p.len() - 1;
                reconstruct_flow(&vf, lambda, &p[..np], p[np], &vo)
                    .map(|fp| fp.h[alpha])
                    .map_err(|e| FieldError::Eval(e.to_string()))
            }));
        }
        VectorField::new(comps)?
    };

    Ok(FiniteTransformation::from_parts(
        &vars,
        m,
        phi,
        eta_field,
        time,
        rotation,
        drift_shift,
        model.domain_box().to_vec(),
    )?)
}
