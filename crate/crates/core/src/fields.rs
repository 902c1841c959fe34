//! Scalar, vector and matrix fields on M = M̃ × ℝ₊.
//!
//! A field is either symbolic (an expression tree, compiled once for fast
//! evaluation) or computed (an opaque evaluation closure, e.g. a coefficient
//! produced by composing with a numeric Φ⁻¹). Symbolic fields additionally
//! support exact differentiation, which the generator and the determining
//! equations rely on.
//!
//! All field values are immutable after construction and freely shareable
//! across threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{parse, CompiledExpr, Expr, ExprError, VarSet};
use crate::numeric::max_abs;

/// Errors for field construction and evaluation.
#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("domain error at component ({row},{col}): {source}")]
    Component {
        row: usize,
        col: usize,
        source: ExprError,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("field is not symbolic: {0}")]
    NotSymbolic(String),
    #[error("variable mismatch: {0}")]
    VarMismatch(String),
    #[error("point has {got} coordinates, expected {want}")]
    PointDim { got: usize, want: usize },
    #[error("field evaluation failed: {0}")]
    Eval(String),
}

type EvalFn = dyn Fn(&[f64]) -> Result<f64, FieldError> + Send + Sync;

#[derive(Clone)]
enum Repr {
    Symbolic { expr: Expr, compiled: CompiledExpr },
    Computed(Arc<EvalFn>),
}

/// A scalar field over an ordered variable set (spatial coordinates then time).
#[derive(Clone)]
pub struct ScalarField {
    vars: VarSet,
    repr: Repr,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Symbolic { expr, .. } => write!(f, "ScalarField({expr})"),
            Repr::Computed(_) => write!(f, "ScalarField(<computed>)"),
        }
    }
}

impl ScalarField {
    pub fn from_expr(expr: Expr, vars: &VarSet) -> Result<Self, FieldError> {
        for name in expr.variables() {
            if !vars.contains(&name) {
                return Err(FieldError::VarMismatch(format!(
                    "expression references `{name}` which is not in the variable set"
                )));
            }
        }
        let compiled = CompiledExpr::compile(&expr, vars)?;
        Ok(ScalarField {
            vars: vars.clone(),
            repr: Repr::Symbolic { expr, compiled },
        })
    }

    pub fn parse(source: &str, vars: &VarSet) -> Result<Self, FieldError> {
        let expr = parse(source, vars)?;
        ScalarField::from_expr(expr, vars)
    }

    pub fn constant(c: f64, vars: &VarSet) -> Self {
        ScalarField::from_expr(Expr::Const(c), vars).expect("constant is always valid")
    }

    pub fn zero(vars: &VarSet) -> Self {
        ScalarField::constant(0.0, vars)
    }

    /// Wraps an evaluation closure. The closure receives points ordered like
    /// `vars` and is expected to be pure.
    pub fn computed<F>(vars: &VarSet, f: F) -> Self
    where
        F: Fn(&[f64]) -> Result<f64, FieldError> + Send + Sync + 'static,
    {
        ScalarField {
            vars: vars.clone(),
            repr: Repr::Computed(Arc::new(f)),
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn expr(&self) -> Option<&Expr> {
        match &self.repr {
            Repr::Symbolic { expr, .. } => Some(expr),
            Repr::Computed(_) => None,
        }
    }

    pub(crate) fn compiled(&self) -> Option<&CompiledExpr> {
        match &self.repr {
            Repr::Symbolic { compiled, .. } => Some(compiled),
            Repr::Computed(_) => None,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self.repr, Repr::Symbolic { .. })
    }

    /// True when the field is symbolically the constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.expr().map(crate::expr::simplify), Some(Expr::Const(c)) if c == 0.0)
    }

    /// Evaluates at `point` (ordered like `vars`).
    pub fn eval(&self, point: &[f64]) -> Result<f64, FieldError> {
        let mut scratch = Vec::new();
        self.eval_scratch(point, &mut scratch)
    }

    /// Evaluation with a reusable scratch stack for hot loops.
    pub fn eval_scratch(&self, point: &[f64], scratch: &mut Vec<f64>) -> Result<f64, FieldError> {
        if point.len() != self.vars.len() {
            return Err(FieldError::PointDim {
                got: point.len(),
                want: self.vars.len(),
            });
        }
        match &self.repr {
            Repr::Symbolic { expr, compiled } => match compiled.eval_with(point, scratch) {
                Ok(v) => Ok(v),
                // Re-run the tree walker to produce the offending sub-expression.
                Err(_) => {
                    let names = self.vars.names();
                    Err(expr
                        .eval_with(&|n| names.iter().position(|m| m == n).map(|i| point[i]))
                        .err()
                        .unwrap_or(ExprError::Domain {
                            expr: expr.to_string(),
                            reason: "non-finite result".into(),
                        })
                        .into())
                }
            },
            Repr::Computed(f) => f(point),
        }
    }

    /// Exact partial derivative; requires a symbolic field.
    pub fn diff(&self, var: &str) -> Result<ScalarField, FieldError> {
        if !self.vars.contains(var) {
            return Err(FieldError::VarMismatch(format!(
                "cannot differentiate with respect to unknown variable `{var}`"
            )));
        }
        match &self.repr {
            Repr::Symbolic { expr, .. } => ScalarField::from_expr(expr.diff(var), &self.vars),
            Repr::Computed(_) => Err(FieldError::NotSymbolic(
                "cannot differentiate a computed field".into(),
            )),
        }
    }

    /// True when the expression only references the time variable.
    pub fn is_time_only(&self) -> bool {
        match self.expr() {
            Some(e) => e
                .variables()
                .iter()
                .all(|v| v == self.vars.time_var()),
            None => false,
        }
    }

    /// For fields of a single scalar argument (a time or clock function):
    /// the slot to bind when evaluating at a scalar. Symbolic fields must
    /// reference at most one variable; computed fields bind the time slot.
    pub fn scalar_argument_slot(&self) -> Result<usize, FieldError> {
        match self.expr() {
            None => Ok(self.vars.len() - 1),
            Some(e) => {
                let used = e.variables();
                match used.len() {
                    0 => Ok(self.vars.len() - 1),
                    1 => {
                        let name = used.iter().next().expect("one element");
                        self.vars.index_of(name).ok_or_else(|| {
                            FieldError::VarMismatch(format!("unknown variable `{name}`"))
                        })
                    }
                    _ => Err(FieldError::VarMismatch(format!(
                        "expected a function of a single time argument, got variables {used:?}"
                    ))),
                }
            }
        }
    }
}

/// A fixed-length list of scalar fields sharing one variable set.
#[derive(Clone, Debug)]
pub struct VectorField {
    components: Vec<ScalarField>,
    vars: VarSet,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self, FieldError> {
        let vars = components
            .first()
            .ok_or_else(|| FieldError::Shape("vector field needs at least one component".into()))?
            .vars()
            .clone();
        for c in &components {
            if c.vars() != &vars {
                return Err(FieldError::VarMismatch(
                    "vector components must share the same variable set".into(),
                ));
            }
        }
        Ok(VectorField { components, vars })
    }

    pub fn parse(sources: &[&str], vars: &VarSet) -> Result<Self, FieldError> {
        VectorField::new(
            sources
                .iter()
                .map(|s| ScalarField::parse(s, vars))
                .collect::<Result<_, _>>()?,
        )
    }

    pub fn zeros(len: usize, vars: &VarSet) -> Self {
        VectorField {
            components: (0..len).map(|_| ScalarField::zero(vars)).collect(),
            vars: vars.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn component(&self, i: usize) -> &ScalarField {
        &self.components[i]
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn is_symbolic(&self) -> bool {
        self.components.iter().all(ScalarField::is_symbolic)
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(ScalarField::is_zero)
    }
}

/// Componentwise evaluation; domain errors carry the failing component index.
pub fn eval_vector(v: &VectorField, point: &[f64]) -> Result<DVector<f64>, FieldError> {
    let mut out = DVector::zeros(v.len());
    for (i, c) in v.components.iter().enumerate() {
        out[i] = c.eval(point).map_err(|e| component_error(e, i, 0))?;
    }
    Ok(out)
}

/// A rectangular grid of scalar fields sharing one variable set.
#[derive(Clone, Debug)]
pub struct MatrixField {
    rows: usize,
    cols: usize,
    entries: Vec<ScalarField>, // row-major
    vars: VarSet,
}

impl MatrixField {
    pub fn new(rows: Vec<Vec<ScalarField>>) -> Result<Self, FieldError> {
        let nrows = rows.len();
        let ncols = rows
            .first()
            .ok_or_else(|| FieldError::Shape("matrix field needs at least one row".into()))?
            .len();
        if ncols == 0 {
            return Err(FieldError::Shape("matrix field needs at least one column".into()));
        }
        let vars = rows[0][0].vars().clone();
        let mut entries = Vec::with_capacity(nrows * ncols);
        for row in rows {
            if row.len() != ncols {
                return Err(FieldError::Shape("matrix rows must have equal length".into()));
            }
            for e in row {
                if e.vars() != &vars {
                    return Err(FieldError::VarMismatch(
                        "matrix entries must share the same variable set".into(),
                    ));
                }
                entries.push(e);
            }
        }
        Ok(MatrixField {
            rows: nrows,
            cols: ncols,
            entries,
            vars,
        })
    }

    pub fn parse(sources: &[Vec<&str>], vars: &VarSet) -> Result<Self, FieldError> {
        let rows = sources
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| ScalarField::parse(s, vars))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        MatrixField::new(rows)
    }

    pub fn identity(m: usize, vars: &VarSet) -> Self {
        let rows = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| ScalarField::constant(if i == j { 1.0 } else { 0.0 }, vars))
                    .collect()
            })
            .collect();
        MatrixField::new(rows).expect("identity is well formed")
    }

    pub fn zeros(rows: usize, cols: usize, vars: &VarSet) -> Self {
        MatrixField {
            rows,
            cols,
            entries: (0..rows * cols).map(|_| ScalarField::zero(vars)).collect(),
            vars: vars.clone(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn entry(&self, i: usize, j: usize) -> &ScalarField {
        &self.entries[i * self.cols + j]
    }

    pub fn is_symbolic(&self) -> bool {
        self.entries.iter().all(ScalarField::is_symbolic)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(ScalarField::is_zero)
    }
}

/// Componentwise evaluation; domain errors carry the failing entry indices.
pub fn eval_matrix(m: &MatrixField, point: &[f64]) -> Result<DMatrix<f64>, FieldError> {
    let mut out = DMatrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        for j in 0..m.cols {
            out[(i, j)] = m
                .entry(i, j)
                .eval(point)
                .map_err(|e| component_error(e, i, j))?;
        }
    }
    Ok(out)
}

fn component_error(e: FieldError, row: usize, col: usize) -> FieldError {
    match e {
        FieldError::Expr(source) => FieldError::Component { row, col, source },
        other => other,
    }
}

/// A single check violation at a sample point.
#[derive(Debug, Clone)]
pub struct Violation {
    pub point: Vec<f64>,
    pub defect: f64,
    pub what: String,
}

/// Result of a pointwise validity check over a sample grid.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub pass: bool,
    pub worst_defect: f64,
    pub tol: f64,
    /// Up to the five worst violations, largest defect first.
    pub violations: Vec<Violation>,
}

fn finish_report(mut violations: Vec<Violation>, worst: f64, tol: f64) -> CheckReport {
    violations.sort_by(|a, b| b.defect.total_cmp(&a.defect));
    violations.truncate(5);
    CheckReport {
        pass: worst <= tol,
        worst_defect: worst,
        tol,
        violations,
    }
}

/// Checks that `B` is SO(m)-valued on the sample points:
/// ‖BBᵀ − I‖∞ ≤ tol and |det B − 1| ≤ tol.
pub fn check_special_orthogonal(
    b: &MatrixField,
    sample_points: &[Vec<f64>],
    tol: f64,
) -> Result<CheckReport, FieldError> {
    if b.nrows() != b.ncols() {
        return Err(FieldError::Shape(format!(
            "rotation field must be square, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let eye = DMatrix::identity(b.nrows(), b.ncols());
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for p in sample_points {
        let m = eval_matrix(b, p)?;
        let ortho = max_abs(&(&m * m.transpose() - &eye));
        let det = (m.determinant() - 1.0).abs();
        let defect = ortho.max(det);
        worst = worst.max(defect);
        if defect > tol {
            violations.push(Violation {
                point: p.clone(),
                defect,
                what: if ortho >= det {
                    "BBᵀ deviates from identity".into()
                } else {
                    "det(B) deviates from 1".into()
                },
            });
        }
    }
    Ok(finish_report(violations, worst, tol))
}

/// Checks that `C` is so(m)-valued on the sample points: ‖C + Cᵀ‖∞ ≤ tol.
pub fn check_antisymmetric(
    c: &MatrixField,
    sample_points: &[Vec<f64>],
    tol: f64,
) -> Result<CheckReport, FieldError> {
    if c.nrows() != c.ncols() {
        return Err(FieldError::Shape(format!(
            "Lie-algebra field must be square, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for p in sample_points {
        let m = eval_matrix(c, p)?;
        let defect = max_abs(&(&m + m.transpose()));
        worst = worst.max(defect);
        if defect > tol {
            violations.push(Violation {
                point: p.clone(),
                defect,
                what: "C + Cᵀ deviates from zero".into(),
            });
        }
    }
    Ok(finish_report(violations, worst, tol))
}
