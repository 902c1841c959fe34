//! Built-in registry of the example models and their symmetry families.
//!
//! Every model is autonomized: the clock lives in the coordinate `z`
//! (drift 1, zero diffusion row), and the arbitrary time functions of the
//! symmetry families are expressions in `z`. Symmetries are gated at
//! construction: a candidate that fails its weak determining residual on
//! the model's grid is rejected rather than handed to the Monte Carlo
//! engine.

use thiserror::Error;

use crate::expr::{parse, simplify, Expr, VarSet};
use crate::fields::{FieldError, MatrixField, ScalarField, VectorField};
use crate::sde::{SdeError, SdeModel};
use crate::symmetry::{
    default_grid, weak_determining_residual, InfinitesimalSymmetry, SymmetryError,
};
use crate::transform::{FiniteTransformation, SpatialMap, TransformError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("variable error: {0}")]
    Var(String),
}

/// Antiderivative with value 0 at 0, from a small symbolic table
/// (polynomials in `var`, exp, sin, cos, linear combinations); falls back to
/// a numeric integral node when the table misses.
pub fn time_antiderivative(e: &Expr, var: &str) -> Expr {
    fn table(e: &Expr, var: &str) -> Option<Expr> {
        Some(match e {
            Expr::Const(c) => Expr::mul(Expr::Const(*c), Expr::var(var)),
            Expr::Var(v) if v == var => {
                Expr::mul(Expr::Const(0.5), Expr::pow(Expr::var(var), 2.0))
            }
            Expr::Pow(base, k) => match base.as_ref() {
                Expr::Var(v) if v == var && *k >= 0.0 => Expr::div(
                    Expr::pow(Expr::var(var), k + 1.0),
                    Expr::Const(k + 1.0),
                ),
                _ => return None,
            },
            Expr::Binary(crate::expr::BinaryOp::Add, a, b) => {
                Expr::add(table(a, var)?, table(b, var)?)
            }
            Expr::Binary(crate::expr::BinaryOp::Sub, a, b) => {
                Expr::sub(table(a, var)?, table(b, var)?)
            }
            Expr::Binary(crate::expr::BinaryOp::Mul, a, b) => match (a.as_ref(), b.as_ref()) {
                (Expr::Const(c), f) => Expr::mul(Expr::Const(*c), table(f, var)?),
                (f, Expr::Const(c)) => Expr::mul(Expr::Const(*c), table(f, var)?),
                _ => return None,
            },
            Expr::Binary(crate::expr::BinaryOp::Div, a, b) => match b.as_ref() {
                Expr::Const(c) if *c != 0.0 => {
                    Expr::div(table(a, var)?, Expr::Const(*c))
                }
                _ => return None,
            },
            Expr::Unary(crate::expr::UnaryOp::Neg, a) => Expr::neg(table(a, var)?),
            Expr::Unary(crate::expr::UnaryOp::Exp, a) => match a.as_ref() {
                Expr::Var(v) if v == var => {
                    Expr::sub(Expr::func(crate::expr::UnaryOp::Exp, Expr::var(var)), Expr::Const(1.0))
                }
                _ => return None,
            },
            Expr::Unary(crate::expr::UnaryOp::Sin, a) => match a.as_ref() {
                Expr::Var(v) if v == var => Expr::sub(
                    Expr::Const(1.0),
                    Expr::func(crate::expr::UnaryOp::Cos, Expr::var(var)),
                ),
                _ => return None,
            },
            Expr::Unary(crate::expr::UnaryOp::Cos, a) => match a.as_ref() {
                Expr::Var(v) if v == var => Expr::func(crate::expr::UnaryOp::Sin, Expr::var(var)),
                _ => return None,
            },
            _ => return None,
        })
    }
    match table(e, var) {
        Some(f) => simplify(&f),
        None => Expr::integral(e.clone(), var),
    }
}

fn standard_vars() -> VarSet {
    VarSet::spatial_and_time(&["x", "y", "z"], "t").expect("valid names")
}

/// Requires that `e` only references the clock coordinate `z` (or nothing).
fn require_time_function(e: &Expr, what: &str) -> Result<(), ModelError> {
    for v in e.variables() {
        if v != "z" {
            return Err(ModelError::Var(format!(
                "{what} must be a function of z only; found `{v}`"
            )));
        }
    }
    Ok(())
}

fn residual_gate(
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    tol: f64,
    what: &str,
) -> Result<(), ModelError> {
    let r = weak_determining_residual(model, v, &default_grid(model))?;
    if r.sup_norm_on_grid > tol {
        return Err(ModelError::Parameter(format!(
            "{what} fails its weak determining residual: sup {} > {tol}",
            r.sup_norm_on_grid
        )));
    }
    Ok(())
}

/// Planar Brownian motion with the clock coordinate:
/// μ = (0, 0, 1), σ = [[1,0],[0,1],[0,0]], started at the origin.
pub fn bm2d() -> SdeModel {
    let vars = standard_vars();
    let mu = VectorField::parse(&["0", "0", "1"], &vars).expect("static");
    let sigma = MatrixField::parse(
        &[vec!["1", "0"], vec!["0", "1"], vec!["0", "0"]],
        &vars,
    )
    .expect("static");
    SdeModel::new(
        vars,
        mu,
        sigma,
        vec![[-2.0, 2.0], [-2.0, 2.0], [0.0, 1.0], [0.0, 1.0]],
        vec![0.0, 0.0, 0.0],
    )
    .expect("static model is valid")
}

/// The scaling family of the planar Brownian motion:
/// V_α = ((½αx, ½αy, ∫α), 0, α, (−½xα′, −½yα′)).
pub fn v_alpha(alpha: &Expr) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(alpha, "alpha")?;
    let model = bm2d();
    let vars = model.vars().clone();
    let a = alpha.clone();
    let ap = a.diff("z");
    let int_a = time_antiderivative(&a, "z");
    let half = |e: Expr| Expr::mul(Expr::Const(0.5), e);

    let y = VectorField::new(vec![
        ScalarField::from_expr(simplify(&half(Expr::mul(a.clone(), Expr::var("x")))), &vars)?,
        ScalarField::from_expr(simplify(&half(Expr::mul(a.clone(), Expr::var("y")))), &vars)?,
        ScalarField::from_expr(int_a.clone(), &vars)?,
    ])?;
    let m_time = ScalarField::from_expr(int_a.clone(), &vars)?;
    let c = MatrixField::zeros(2, 2, &vars);
    let tau = ScalarField::from_expr(a.clone(), &vars)?;
    let h = VectorField::new(vec![
        ScalarField::from_expr(
            simplify(&Expr::neg(half(Expr::mul(Expr::var("x"), ap.clone())))),
            &vars,
        )?,
        ScalarField::from_expr(
            simplify(&Expr::neg(half(Expr::mul(Expr::var("y"), ap.clone())))),
            &vars,
        )?,
    ])?;
    let v = InfinitesimalSymmetry::new(&vars, y, m_time, c, tau, h, model.domain_box())?;
    residual_gate(&model, &v, 1e-9, "v_alpha")?;
    Ok(v)
}

/// The rotational family of the planar Brownian motion:
/// V_β = ((βy, −βx, 0), [[0,β],[−β,0]], 0, (−yβ′, xβ′)).
pub fn v_beta(beta: &Expr) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(beta, "beta")?;
    let model = bm2d();
    let v = rotational_symmetry(&model, beta)?;
    residual_gate(&model, &v, 1e-9, "v_beta")?;
    Ok(v)
}

/// Shared construction of the rotational family (identical for the planar
/// Brownian motion and its additive perturbation).
fn rotational_symmetry(
    model: &SdeModel,
    beta: &Expr,
) -> Result<InfinitesimalSymmetry, ModelError> {
    let vars = model.vars().clone();
    let b = beta.clone();
    let bp = b.diff("z");
    let y = VectorField::new(vec![
        ScalarField::from_expr(simplify(&Expr::mul(b.clone(), Expr::var("y"))), &vars)?,
        ScalarField::from_expr(
            simplify(&Expr::neg(Expr::mul(b.clone(), Expr::var("x")))),
            &vars,
        )?,
        ScalarField::zero(&vars),
    ])?;
    let m_time = ScalarField::zero(&vars);
    let c = MatrixField::new(vec![
        vec![
            ScalarField::zero(&vars),
            ScalarField::from_expr(b.clone(), &vars)?,
        ],
        vec![
            ScalarField::from_expr(simplify(&Expr::neg(b.clone())), &vars)?,
            ScalarField::zero(&vars),
        ],
    ])?;
    let tau = ScalarField::zero(&vars);
    let h = VectorField::new(vec![
        ScalarField::from_expr(
            simplify(&Expr::neg(Expr::mul(Expr::var("y"), bp.clone()))),
            &vars,
        )?,
        ScalarField::from_expr(simplify(&Expr::mul(Expr::var("x"), bp.clone())), &vars)?,
    ])?;
    Ok(InfinitesimalSymmetry::new(
        &vars,
        y,
        m_time,
        c,
        tau,
        h,
        model.domain_box(),
    )?)
}

/// Closed form of the finite rotational transformation T_λ generated by
/// V_β: Φ̃ is the rotation by angle β(z)λ, B the same rotation, η ≡ 1 and
/// h = λ(−β′y, β′x).
pub fn bm2d_finite_v_beta(
    model: &SdeModel,
    beta: &Expr,
    lambda: f64,
) -> Result<FiniteTransformation, ModelError> {
    require_time_function(beta, "beta")?;
    let vars = model.vars().clone();
    let b = format!("({beta})");
    let lam = format!("({lambda})");
    let angle = format!("({b} * {lam})");
    let phi = SpatialMap::symbolic(
        vec![
            parse(&format!("cos{angle}*x + sin{angle}*y"), &vars).map_err(FieldError::from)?,
            parse(&format!("-sin{angle}*x + cos{angle}*y"), &vars).map_err(FieldError::from)?,
            Expr::var("z"),
        ],
        &vars,
        model.spatial_box().to_vec(),
    )?;
    let rotation = MatrixField::parse(
        &[
            vec![&format!("cos{angle}") as &str, &format!("sin{angle}")],
            vec![&format!("-sin{angle}"), &format!("cos{angle}")],
        ],
        &vars,
    )?;
    let bp = format!("({})", beta.diff("z"));
    let drift_shift = VectorField::parse(
        &[
            &format!("-{lam}*{bp}*y") as &str,
            &format!("{lam}*{bp}*x"),
        ],
        &vars,
    )?;
    Ok(FiniteTransformation::new(
        &vars,
        model.m(),
        phi,
        ScalarField::constant(1.0, &vars),
        rotation,
        drift_shift,
        model.domain_box().to_vec(),
    )?)
}

fn expr_str(e: &Expr) -> String {
    format!("({e})")
}

/// Additive perturbation of planar Brownian motion:
/// μ = (a(r²)x − b(r²)y, a(r²)y + b(r²)x, 1), σ the padded identity,
/// with r² = x² + y². `a` and `b` are expressions in the variable `r2`;
/// `a` must be negative on the sampled box.
pub fn additive_model(a: &Expr, b: &Expr) -> Result<SdeModel, ModelError> {
    for (what, e) in [("a", a), ("b", b)] {
        for v in e.variables() {
            if v != "r2" {
                return Err(ModelError::Var(format!(
                    "{what} must be a function of r2 only; found `{v}`"
                )));
            }
        }
    }
    let vars = standard_vars();
    // Negativity of a over the r² values reachable from the box.
    let r2_max = 2.0f64 * 2.0 * 2.0; // both coordinates at |2|
    let a_field = ScalarField::from_expr(
        a.substitute(&|n| (n == "r2").then(|| Expr::var("x"))),
        &VarSet::spatial_and_time(&["x"], "t").expect("static"),
    )?;
    for k in 0..=64 {
        let r2 = r2_max * k as f64 / 64.0;
        let val = a_field.eval(&[r2, 0.0])?;
        if val >= 0.0 {
            return Err(ModelError::Parameter(format!(
                "a(r²) must be negative on the sampled box; a({r2}) = {val}"
            )));
        }
    }
    let r2_expr = parse("x^2 + y^2", &vars).map_err(FieldError::from)?;
    let sub = |e: &Expr| e.substitute(&|n| (n == "r2").then(|| r2_expr.clone()));
    let (a_s, b_s) = (expr_str(&sub(a)), expr_str(&sub(b)));
    let mu = VectorField::parse(
        &[
            &format!("{a_s}*x - {b_s}*y") as &str,
            &format!("{a_s}*y + {b_s}*x"),
            "1",
        ],
        &vars,
    )?;
    let sigma = MatrixField::parse(
        &[vec!["1", "0"], vec!["0", "1"], vec!["0", "0"]],
        &vars,
    )?;
    Ok(SdeModel::new(
        vars,
        mu,
        sigma,
        vec![[-2.0, 2.0], [-2.0, 2.0], [0.0, 1.0], [0.0, 1.0]],
        vec![0.0, 0.0, 0.0],
    )?)
}

/// Rotational family of the additive model (same quadruple as the planar
/// Brownian one).
pub fn additive_v_beta(
    a: &Expr,
    b: &Expr,
    beta: &Expr,
) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(beta, "beta")?;
    let model = additive_model(a, b)?;
    let v = rotational_symmetry(&model, beta)?;
    residual_gate(&model, &v, 1e-7, "additive v_beta")?;
    Ok(v)
}

/// Scaling family of the additive model, with the drift-shift components
/// carrying a(r²), b(r²) and their derivatives.
pub fn additive_v_alpha(
    a: &Expr,
    b: &Expr,
    alpha: &Expr,
) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(alpha, "alpha")?;
    let model = additive_model(a, b)?;
    let vars = model.vars().clone();
    let r2_expr = parse("x^2 + y^2", &vars).map_err(FieldError::from)?;
    let sub = |e: &Expr| e.substitute(&|n| (n == "r2").then(|| r2_expr.clone()));
    let a_s = expr_str(&sub(a));
    let b_s = expr_str(&sub(b));
    let ap_s = expr_str(&sub(&a.diff("r2")));
    let bp_s = expr_str(&sub(&b.diff("r2")));
    let al = expr_str(alpha);
    let alp = expr_str(&alpha.diff("z"));
    let int_a = time_antiderivative(alpha, "z");

    let y = VectorField::new(vec![
        ScalarField::parse(&format!("0.5*{al}*x"), &vars)?,
        ScalarField::parse(&format!("0.5*{al}*y"), &vars)?,
        ScalarField::from_expr(int_a.clone(), &vars)?,
    ])?;
    let m_time = ScalarField::from_expr(int_a.clone(), &vars)?;
    let c = MatrixField::zeros(2, 2, &vars);
    let tau = ScalarField::from_expr(alpha.clone(), &vars)?;
    let h1 = format!(
        "{al}*x^3*{ap_s} - x^2*y*{al}*{bp_s} + x*y^2*{al}*{ap_s} - y^3*{al}*{bp_s} \
         - 0.5*{alp}*x + x*{al}*{a_s} - y*{al}*{b_s}"
    );
    let h2 = format!(
        "-0.5*y*{alp} + {al}*y^3*{ap_s} + {al}*x^2*y*{ap_s} + {al}*x*y^2*{bp_s} \
         + {al}*x^3*{bp_s} + {al}*y*{a_s} + {al}*x*{b_s}"
    );
    let h = VectorField::new(vec![
        ScalarField::parse(&h1, &vars)?,
        ScalarField::parse(&h2, &vars)?,
    ])?;
    let v = InfinitesimalSymmetry::new(&vars, y, m_time, c, tau, h, model.domain_box())?;
    residual_gate(&model, &v, 1e-7, "additive v_alpha")?;
    Ok(v)
}

/// Parameters of the stochastic Lotka–Volterra model; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotkaVolterraParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub sigma_tilde: f64,
}

impl LotkaVolterraParams {
    fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("sigma_tilde", self.sigma_tilde),
        ] {
            if !(v > 0.0) {
                return Err(ModelError::Parameter(format!(
                    "Lotka-Volterra parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Stochastic Lotka–Volterra:
/// μ = (x(α−βy), y(δx−γ), 1), σ = [[σ̃x, 0], [0, σ̃y], [0,0]].
///
/// The working box is restricted to x, y ∈ [0.2, 5] (the symmetry families
/// contain ln x, ln y); simulation runs in log coordinates to preserve
/// positivity.
pub fn lotka_volterra(p: &LotkaVolterraParams) -> Result<SdeModel, ModelError> {
    p.validate()?;
    let vars = standard_vars();
    let mu = VectorField::parse(
        &[
            &format!("x*({} - {}*y)", p.alpha, p.beta) as &str,
            &format!("y*({}*x - {})", p.delta, p.gamma),
            "1",
        ],
        &vars,
    )?;
    let s = p.sigma_tilde;
    let sigma = MatrixField::parse(
        &[
            vec![&format!("{s}*x") as &str, "0"],
            vec!["0", &format!("{s}*y")],
            vec!["0", "0"],
        ],
        &vars,
    )?;
    Ok(SdeModel::new(
        vars,
        mu,
        sigma,
        vec![[0.2, 5.0], [0.2, 5.0], [0.0, 1.0], [0.0, 1.0]],
        vec![1.0, 1.0, 0.0],
    )?
    .with_log_coords(vec![true, true, false])?)
}

/// Scaling family V_a of the Lotka–Volterra model (arbitrary a(z)).
pub fn lv_v_a(
    p: &LotkaVolterraParams,
    a: &Expr,
) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(a, "a")?;
    p.validate()?;
    let model = lotka_volterra(p)?;
    let vars = model.vars().clone();
    let a_s = expr_str(a);
    let ap_s = expr_str(&a.diff("z"));
    let int_a = time_antiderivative(a, "z");
    let (al, be, ga, de, s) = (p.alpha, p.beta, p.gamma, p.delta, p.sigma_tilde);

    let y = VectorField::new(vec![
        ScalarField::parse(&format!("0.5*{a_s}*x*ln(x)"), &vars)?,
        ScalarField::parse(&format!("0.5*{a_s}*y*ln(y)"), &vars)?,
        ScalarField::from_expr(int_a.clone(), &vars)?,
    ])?;
    let m_time = ScalarField::from_expr(int_a.clone(), &vars)?;
    let c = MatrixField::zeros(2, 2, &vars);
    let tau = ScalarField::from_expr(a.clone(), &vars)?;
    let h1 = format!(
        "-0.25*{a_s}*{s} + ({a_s}/(2*{s}))*({al} - {be}*y) - ({ap_s}/(2*{s}))*ln(x) \
         - ({be}/(2*{s}))*{a_s}*y*ln(y)"
    );
    let h2 = format!(
        "-0.25*{a_s}*{s} + ({a_s}/(2*{s}))*({de}*x - {ga}) - ({ap_s}/(2*{s}))*ln(y) \
         + ({de}/(2*{s}))*{a_s}*x*ln(x)"
    );
    let h = VectorField::new(vec![
        ScalarField::parse(&h1, &vars)?,
        ScalarField::parse(&h2, &vars)?,
    ])?;
    let v = InfinitesimalSymmetry::new(&vars, y, m_time, c, tau, h, model.domain_box())?;
    residual_gate(&model, &v, 1e-7, "lv v_a")?;
    Ok(v)
}

/// Rotational family V_b of the Lotka–Volterra model (arbitrary b(z)).
pub fn lv_v_b(
    p: &LotkaVolterraParams,
    b: &Expr,
) -> Result<InfinitesimalSymmetry, ModelError> {
    require_time_function(b, "b")?;
    p.validate()?;
    let model = lotka_volterra(p)?;
    let vars = model.vars().clone();
    let b_s = expr_str(b);
    let bp_s = expr_str(&b.diff("z"));
    let (al, be, ga, de, s) = (p.alpha, p.beta, p.gamma, p.delta, p.sigma_tilde);

    let y = VectorField::new(vec![
        ScalarField::parse(&format!("{b_s}*x*ln(y)"), &vars)?,
        ScalarField::parse(&format!("-{b_s}*y*ln(x)"), &vars)?,
        ScalarField::zero(&vars),
    ])?;
    let m_time = ScalarField::zero(&vars);
    let c = MatrixField::new(vec![
        vec![
            ScalarField::zero(&vars),
            ScalarField::from_expr(b.clone(), &vars)?,
        ],
        vec![
            ScalarField::from_expr(simplify(&Expr::neg(b.clone())), &vars)?,
            ScalarField::zero(&vars),
        ],
    ])?;
    let tau = ScalarField::zero(&vars);
    // Drift-shift components solving the first determining equation for this
    // family (sign-checked against the determining system itself).
    let h1 = format!(
        "0.5*{s}*{b_s} - ({b_s}/{s})*({de}*x - {ga}) - ({bp_s}/{s})*ln(y) \
         + ({be}/{s})*{b_s}*y*ln(x)"
    );
    let h2 = format!(
        "-0.5*{s}*{b_s} + ({b_s}/{s})*({al} - {be}*y) + ({bp_s}/{s})*ln(x) \
         + ({de}/{s})*{b_s}*x*ln(y)"
    );
    let h = VectorField::new(vec![
        ScalarField::parse(&h1, &vars)?,
        ScalarField::parse(&h2, &vars)?,
    ])?;
    let v = InfinitesimalSymmetry::new(&vars, y, m_time, c, tau, h, model.domain_box())?;
    residual_gate(&model, &v, 1e-7, "lv v_b")?;
    Ok(v)
}
