//! A minimal expression language for SDE coefficients, symmetry components
//! and test functionals: parsing, numeric evaluation, exact symbolic
//! differentiation and light simplification.
//!
//! The grammar (documented in the README) is deliberately small:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | atom ('^' ['-'] number)?
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Exponents are constant reals, which keeps the derivative rule set total.
//! Trees are immutable after construction and safe to share across threads.

mod compile;
mod parse;

pub use compile::CompiledExpr;
pub use parse::parse;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::numeric::adaptive_simpson;

/// Unary operations available in the language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Ln,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Tanh,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Ln => "ln",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Tanh => "tanh",
        }
    }
}

/// Binary operations available in the language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression tree over named variables.
///
/// `Pow` keeps its exponent as a constant real so that differentiation is
/// closed over the node set. `Integral` is an internal node (not produced by
/// the parser) representing `∫₀^var integrand(s) ds` for a univariate
/// integrand; it exists so that antiderivatives of arbitrary time functions
/// stay differentiable (`d/dvar ∫₀^var g = g`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Integral { integrand: Box<Expr>, var: String },
}

/// Errors raised by parsing, evaluation and differentiation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExprError {
    #[error("syntax error at position {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("unknown identifier `{name}` at position {position}")]
    UnknownIdentifier { name: String, position: usize },
    #[error("domain error in `{expr}`: {reason}")]
    Domain { expr: String, reason: String },
    #[error("variable `{0}` is not bound at evaluation")]
    UnboundVariable(String),
    #[error("`{0}` is not a variable of this expression set")]
    NoSuchVariable(String),
}

/// Ordered set of variable names: spatial coordinates first, time last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarSet {
    names: Vec<String>,
}

impl VarSet {
    /// Builds a variable set; names must be unique and non-empty.
    pub fn new<S: Into<String>>(names: Vec<S>) -> Result<Self, ExprError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(ExprError::Syntax {
                position: 0,
                expected: "at least one variable name".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.clone()) {
                return Err(ExprError::NoSuchVariable(format!(
                    "duplicate or empty variable name `{n}`"
                )));
            }
        }
        Ok(VarSet { names })
    }

    /// Convention helper: spatial names followed by the time name.
    pub fn spatial_and_time(spatial: &[&str], time: &str) -> Result<Self, ExprError> {
        let mut names: Vec<String> = spatial.iter().map(|s| s.to_string()).collect();
        names.push(time.to_string());
        VarSet::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of spatial coordinates (all but the trailing time variable).
    pub fn n_spatial(&self) -> usize {
        self.names.len() - 1
    }

    /// Name of the time variable (last by convention).
    pub fn time_var(&self) -> &str {
        self.names.last().expect("non-empty").as_str()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

// Constructor names mirror the node names; they build trees rather than
// evaluate, so the std::ops traits do not apply.
#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var<S: Into<String>>(name: S) -> Expr {
        Expr::Var(name.into())
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::Unary(UnaryOp::Neg, Box::new(a))
    }

    pub fn pow(base: Expr, exponent: f64) -> Expr {
        Expr::Pow(Box::new(base), exponent)
    }

    pub fn func(op: UnaryOp, a: Expr) -> Expr {
        Expr::Unary(op, Box::new(a))
    }

    /// `∫₀^var integrand(s) ds`; the integrand may reference only `var`.
    pub fn integral(integrand: Expr, var: &str) -> Expr {
        Expr::Integral {
            integrand: Box::new(integrand),
            var: var.to_string(),
        }
    }

    /// Collects variable names referenced by the expression.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Unary(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Pow(a, _) => a.collect_vars(out),
            Expr::Integral { var, .. } => {
                out.insert(var.clone());
            }
        }
    }

    /// Evaluates at a point given by a name-resolution closure.
    pub fn eval_with(&self, bind: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ExprError> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(name) => bind(name).ok_or_else(|| ExprError::UnboundVariable(name.clone()))?,
            Expr::Unary(op, a) => {
                let x = a.eval_with(bind)?;
                match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Ln => {
                        if x <= 0.0 {
                            return Err(self.domain_error("ln of non-positive value"));
                        }
                        x.ln()
                    }
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Sin => x.sin(),
                    UnaryOp::Cos => x.cos(),
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            return Err(self.domain_error("sqrt of negative value"));
                        }
                        x.sqrt()
                    }
                    UnaryOp::Tanh => x.tanh(),
                }
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval_with(bind)?;
                let y = b.eval_with(bind)?;
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => {
                        if y == 0.0 {
                            return Err(self.domain_error("division by zero"));
                        }
                        x / y
                    }
                }
            }
            Expr::Pow(a, e) => {
                let x = a.eval_with(bind)?;
                x.powf(*e)
            }
            Expr::Integral { integrand, var } => {
                let upper = bind(var).ok_or_else(|| ExprError::UnboundVariable(var.clone()))?;
                let f = |s: f64| {
                    integrand
                        .eval_with(&|n: &str| if n == var { Some(s) } else { bind(n) })
                        .unwrap_or(f64::NAN)
                };
                adaptive_simpson(&f, 0.0, upper, 1e-12)
            }
        };
        if !v.is_finite() {
            return Err(self.domain_error("non-finite result"));
        }
        Ok(v)
    }

    fn domain_error(&self, reason: &str) -> ExprError {
        ExprError::Domain {
            expr: self.to_string(),
            reason: reason.to_string(),
        }
    }

    /// Exact symbolic partial derivative with respect to `var`, lightly
    /// simplified (constant folding and 0/1 identities; no canonical form).
    pub fn diff(&self, var: &str) -> Expr {
        simplify(&self.diff_raw(var))
    }

    fn diff_raw(&self, var: &str) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(name) => {
                if name == var {
                    Expr::Const(1.0)
                } else {
                    Expr::Const(0.0)
                }
            }
            Expr::Unary(op, a) => {
                let da = a.diff_raw(var);
                let a = a.as_ref().clone();
                match op {
                    UnaryOp::Neg => Expr::neg(da),
                    UnaryOp::Ln => Expr::div(da, a),
                    UnaryOp::Exp => Expr::mul(Expr::func(UnaryOp::Exp, a), da),
                    UnaryOp::Sin => Expr::mul(Expr::func(UnaryOp::Cos, a), da),
                    UnaryOp::Cos => Expr::neg(Expr::mul(Expr::func(UnaryOp::Sin, a), da)),
                    UnaryOp::Sqrt => Expr::div(
                        da,
                        Expr::mul(Expr::Const(2.0), Expr::func(UnaryOp::Sqrt, a)),
                    ),
                    UnaryOp::Tanh => Expr::mul(
                        Expr::sub(
                            Expr::Const(1.0),
                            Expr::pow(Expr::func(UnaryOp::Tanh, a), 2.0),
                        ),
                        da,
                    ),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.diff_raw(var);
                let db = b.diff_raw(var);
                let (a, b) = (a.as_ref().clone(), b.as_ref().clone());
                match op {
                    BinaryOp::Add => Expr::add(da, db),
                    BinaryOp::Sub => Expr::sub(da, db),
                    BinaryOp::Mul => {
                        Expr::add(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db))
                    }
                    BinaryOp::Div => Expr::div(
                        Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db)),
                        Expr::pow(b, 2.0),
                    ),
                }
            }
            Expr::Pow(a, e) => {
                let da = a.diff_raw(var);
                Expr::mul(
                    Expr::mul(Expr::Const(*e), Expr::pow(a.as_ref().clone(), e - 1.0)),
                    da,
                )
            }
            Expr::Integral { integrand, var: v } => {
                if v == var {
                    integrand.as_ref().clone()
                } else {
                    Expr::Const(0.0)
                }
            }
        }
    }

    /// Replaces variables by expressions (used for symbolic composition).
    pub fn substitute(&self, map: &dyn Fn(&str) -> Option<Expr>) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(name) => map(name).unwrap_or_else(|| Expr::Var(name.clone())),
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.substitute(map))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.substitute(map)), Box::new(b.substitute(map)))
            }
            Expr::Pow(a, e) => Expr::Pow(Box::new(a.substitute(map)), *e),
            // Substituting into the bound variable of an integral is not
            // supported; the node is kept intact unless the replacement is a
            // plain variable rename.
            Expr::Integral { integrand, var } => match map(var) {
                Some(Expr::Var(new)) => Expr::Integral {
                    integrand: Box::new(
                        integrand.substitute(&|n: &str| {
                            if n == var {
                                Some(Expr::Var(new.clone()))
                            } else {
                                None
                            }
                        }),
                    ),
                    var: new,
                },
                _ => Expr::Integral {
                    integrand: integrand.clone(),
                    var: var.clone(),
                },
            },
        }
    }

    fn is_const(&self, c: f64) -> bool {
        matches!(self, Expr::Const(v) if *v == c)
    }
}

/// Evaluates `e` at a point binding variable names to reals.
pub fn eval(e: &Expr, point: &std::collections::HashMap<String, f64>) -> Result<f64, ExprError> {
    e.eval_with(&|name| point.get(name).copied())
}

/// Semantics-preserving simplification: constant folding plus additive and
/// multiplicative identity/annihilator rules. Idempotent.
pub fn simplify(e: &Expr) -> Expr {
    let mut cur = e.clone();
    loop {
        let next = simplify_once(&cur);
        if next == cur {
            return next;
        }
        cur = next;
    }
}

fn simplify_once(e: &Expr) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Unary(op, a) => {
            let a = simplify_once(a);
            if let Expr::Const(c) = a {
                let folded = match op {
                    UnaryOp::Neg => Some(-c),
                    UnaryOp::Ln => (c > 0.0).then(|| c.ln()),
                    UnaryOp::Exp => Some(c.exp()),
                    UnaryOp::Sin => Some(c.sin()),
                    UnaryOp::Cos => Some(c.cos()),
                    UnaryOp::Sqrt => (c >= 0.0).then(|| c.sqrt()),
                    UnaryOp::Tanh => Some(c.tanh()),
                };
                if let Some(v) = folded.filter(|v| v.is_finite()) {
                    return Expr::Const(v);
                }
                return Expr::Unary(*op, Box::new(Expr::Const(c)));
            }
            if *op == UnaryOp::Neg {
                if let Expr::Unary(UnaryOp::Neg, inner) = &a {
                    return inner.as_ref().clone();
                }
            }
            Expr::Unary(*op, Box::new(a))
        }
        Expr::Binary(op, a, b) => {
            let a = simplify_once(a);
            let b = simplify_once(b);
            if let (Expr::Const(x), Expr::Const(y)) = (&a, &b) {
                let folded = match op {
                    BinaryOp::Add => Some(x + y),
                    BinaryOp::Sub => Some(x - y),
                    BinaryOp::Mul => Some(x * y),
                    BinaryOp::Div => (*y != 0.0).then(|| x / y),
                };
                if let Some(v) = folded.filter(|v| v.is_finite()) {
                    return Expr::Const(v);
                }
            }
            match op {
                BinaryOp::Add => {
                    if a.is_const(0.0) {
                        return b;
                    }
                    if b.is_const(0.0) {
                        return a;
                    }
                }
                BinaryOp::Sub => {
                    if b.is_const(0.0) {
                        return a;
                    }
                    if a.is_const(0.0) {
                        return Expr::neg(b);
                    }
                }
                BinaryOp::Mul => {
                    if a.is_const(0.0) || b.is_const(0.0) {
                        return Expr::Const(0.0);
                    }
                    if a.is_const(1.0) {
                        return b;
                    }
                    if b.is_const(1.0) {
                        return a;
                    }
                }
                BinaryOp::Div => {
                    if b.is_const(1.0) {
                        return a;
                    }
                    if a.is_const(0.0) {
                        return Expr::Const(0.0);
                    }
                }
            }
            Expr::Binary(*op, Box::new(a), Box::new(b))
        }
        Expr::Pow(a, e0) => {
            let a = simplify_once(a);
            if *e0 == 0.0 {
                return Expr::Const(1.0);
            }
            if *e0 == 1.0 {
                return a;
            }
            if let Expr::Const(c) = a {
                let v = c.powf(*e0);
                if v.is_finite() {
                    return Expr::Const(v);
                }
                return Expr::Pow(Box::new(Expr::Const(c)), *e0);
            }
            Expr::Pow(Box::new(a), *e0)
        }
        Expr::Integral { integrand, var } => Expr::Integral {
            integrand: Box::new(simplify_once(integrand)),
            var: var.clone(),
        },
    }
}

// Precedence levels for printing: add/sub 1, mul/div 2, unary neg 3, pow 4.
fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
        Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Pow(..) => 4,
        Expr::Const(c) if *c < 0.0 => 3,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if precedence(e) < min_prec {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(name) => write!(f, "{name}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expr::Unary(op, a) => write!(f, "{}({})", op.name(), a),
            Expr::Binary(op, a, b) => {
                let (sym, prec) = match op {
                    BinaryOp::Add => ("+", 1),
                    BinaryOp::Sub => ("-", 1),
                    BinaryOp::Mul => ("*", 2),
                    BinaryOp::Div => ("/", 2),
                };
                write_child(f, a, prec)?;
                write!(f, " {sym} ")?;
                // Right operand needs parens at equal precedence to keep
                // left-associativity on reparse.
                write_child(f, b, prec + 1)
            }
            Expr::Pow(a, e) => {
                write_child(f, a, 5)?;
                write!(f, "^{e}")
            }
            Expr::Integral { integrand, var } => write!(f, "int0({integrand}, {var})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn vars_xyz() -> VarSet {
        VarSet::spatial_and_time(&["x", "y"], "z").unwrap()
    }

    fn point(binds: &[(&str, f64)]) -> HashMap<String, f64> {
        binds.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parse_respects_precedence() {
        let e = parse("x + 2*y", &vars_xyz()).unwrap();
        assert_eq!(
            e,
            Expr::add(Expr::var("x"), Expr::mul(Expr::Const(2.0), Expr::var("y")))
        );
        let e = parse("x^2*ln(y)", &vars_xyz()).unwrap();
        assert_eq!(
            e,
            Expr::mul(
                Expr::pow(Expr::var("x"), 2.0),
                Expr::func(UnaryOp::Ln, Expr::var("y"))
            )
        );
        // pow binds tighter than unary minus; mul/div are left-associative.
        let e = parse("-x^2", &vars_xyz()).unwrap();
        assert_eq!(e, Expr::neg(Expr::pow(Expr::var("x"), 2.0)));
        let e = parse("x / y / 2", &vars_xyz()).unwrap();
        assert_eq!(
            e,
            Expr::div(Expr::div(Expr::var("x"), Expr::var("y")), Expr::Const(2.0))
        );
    }

    #[test]
    fn parse_reports_position_and_expectation() {
        let err = parse("ln(", &vars_xyz()).unwrap_err();
        match err {
            ExprError::Syntax { position, .. } => assert_eq!(position, 3),
            other => panic!("expected syntax error, got {other:?}"),
        }
        let err = parse("x + w", &vars_xyz()).unwrap_err();
        match err {
            ExprError::UnknownIdentifier { name, position } => {
                assert_eq!(name, "w");
                assert_eq!(position, 4);
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
        // Non-constant exponents are rejected at parse time.
        assert!(matches!(
            parse("x^y", &vars_xyz()),
            Err(ExprError::Syntax { .. })
        ));
    }

    #[test]
    fn eval_examples() {
        let vars = vars_xyz();
        let e = parse("sin(x)", &vars).unwrap();
        assert_eq!(eval(&e, &point(&[("x", 0.0)])).unwrap(), 0.0);

        let e = parse("ln(x)", &vars).unwrap();
        assert!(matches!(
            eval(&e, &point(&[("x", -1.0)])),
            Err(ExprError::Domain { .. })
        ));

        let e = parse("x^2*ln(y)", &vars).unwrap();
        let v = eval(&e, &point(&[("x", 2.0), ("y", std::f64::consts::E)])).unwrap();
        assert!((v - 4.0).abs() < 1e-12);

        let e = parse("x / y", &vars).unwrap();
        assert!(matches!(
            eval(&e, &point(&[("x", 1.0), ("y", 0.0)])),
            Err(ExprError::Domain { .. })
        ));
    }

    #[test]
    fn diff_examples() {
        let vars = vars_xyz();
        let e = parse("x^2*y", &vars).unwrap();
        let d = e.diff("x");
        let v = eval(&d, &point(&[("x", 3.0), ("y", 5.0)])).unwrap();
        assert!((v - 30.0).abs() < 1e-12);

        let e = parse("ln(x)", &vars).unwrap();
        let v = eval(&e.diff("x"), &point(&[("x", 2.0)])).unwrap();
        assert!((v - 0.5).abs() < 1e-12);

        let e = parse("sin(x)", &vars).unwrap();
        let v = eval(&e.diff("x").diff("x"), &point(&[("x", 0.0)])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn simplify_examples() {
        let x = Expr::var("x");
        assert_eq!(simplify(&Expr::add(x.clone(), Expr::Const(0.0))), x);
        assert_eq!(
            simplify(&Expr::mul(
                Expr::Const(0.0),
                Expr::func(UnaryOp::Ln, Expr::var("y"))
            )),
            Expr::Const(0.0)
        );
        assert_eq!(
            simplify(&Expr::mul(Expr::Const(2.0), Expr::Const(3.0))),
            Expr::Const(6.0)
        );
    }

    #[test]
    fn integral_node_evaluates_and_differentiates() {
        // ∫₀^z s² ds = z³/3, and d/dz recovers the integrand.
        let integrand = parse("z^2", &vars_xyz()).unwrap();
        let e = Expr::integral(integrand.clone(), "z");
        let v = eval(&e, &point(&[("z", 2.0)])).unwrap();
        assert!((v - 8.0 / 3.0).abs() < 1e-10);
        assert_eq!(e.diff("z"), integrand);
        assert_eq!(e.diff("x"), Expr::Const(0.0));
    }

    #[test]
    fn display_reparses_with_negative_exponent() {
        let vars = vars_xyz();
        let e = Expr::pow(Expr::var("x"), -0.5);
        let back = parse(&e.to_string(), &vars).unwrap();
        let p = point(&[("x", 4.0)]);
        assert!((eval(&e, &p).unwrap() - eval(&back, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn compiled_matches_tree_eval() {
        let vars = vars_xyz();
        let e = parse("tanh(x*y) + exp(-x^2) / (1 + y^2) - sqrt(x + 3)", &vars).unwrap();
        let c = CompiledExpr::compile(&e, &vars).unwrap();
        let xs = [0.3, 1.7, 0.0];
        let tree = eval(
            &e,
            &point(&[("x", xs[0]), ("y", xs[1]), ("z", xs[2])]),
        )
        .unwrap();
        let fast = c.eval(&xs).unwrap();
        assert!((tree - fast).abs() < 1e-14);
    }
}
