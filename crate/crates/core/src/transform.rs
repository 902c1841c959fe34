//! Finite stochastic transformations T = (Φ, B, η, h): the action E_T on SDE
//! coefficients, group composition and inversion, and classification.
//!
//! The spatial part Φ̃ acts on the n spatial coordinates only (time
//! dependence of a transformation is routed through the clock coordinate of
//! an autonomized model), while the deterministic time change is the
//! monotone map f(t) = ∫₀ᵗ η(s) ds. Composition and inversion follow the
//! group law
//!
//! ```text
//! T₂∘T₁ = (Φ₂∘Φ₁, (B₂∘Φ₁)B₁, (η₂∘f₁)η₁, √η₁ B₁⁻¹(h₂∘Φ₁) + h₁)
//! T⁻¹   = (Φ⁻¹, (B∘Φ⁻¹)⁻¹, (η∘f⁻¹)⁻¹, −(1/√η) B h ∘ Φ⁻¹)
//! ```
//!
//! and the action on coefficients is
//!
//! ```text
//! E_T(μ) = (1/η)[L(Φ) + D(Φ) σ h] ∘ Φ⁻¹,   E_T(σ) = (1/√η) D(Φ) σ B⁻¹ ∘ Φ⁻¹.
//! ```
//!
//! Compositions with Φ⁻¹ are realized numerically: transformed coefficient
//! fields evaluate by inverting Φ at the requested point (closed form when Φ
//! is affine, damped Newton otherwise).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{simplify, Expr, VarSet};
use crate::fields::{
    check_special_orthogonal, eval_matrix, eval_vector, FieldError, MatrixField, ScalarField,
    VectorField,
};
use crate::numeric::{adaptive_simpson, damped_newton, halton_grid, max_abs};
use crate::sde::{SdeError, SdeModel};

pub(crate) const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
const JAC_FD_STEP: f64 = 1e-5;
const HESS_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("phi is not invertible: {0}")]
    NonInvertiblePhi(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("time change rate is not strictly positive at t={t}: eta={value}")]
    NonPositiveEta { t: f64, value: f64 },
    #[error("rotation field failed the SO(m) check: worst defect {0}")]
    RotationCheck(f64),
    #[error("time {t} outside working interval [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn to_field_err(e: TransformError) -> FieldError {
    match e {
        TransformError::Field(f) => f,
        other => FieldError::Eval(other.to_string()),
    }
}

type NumMapFn = dyn Fn(&[f64]) -> Result<Vec<f64>, TransformError> + Send + Sync;

#[derive(Clone)]
enum MapRepr {
    Identity,
    Symbolic {
        exprs: Vec<Expr>,
        compiled: Vec<crate::expr::CompiledExpr>,
        jac: Vec<crate::expr::CompiledExpr>, // row-major n×n
    },
    Numeric {
        fwd: Arc<NumMapFn>,
        inv: Option<Arc<NumMapFn>>,
    },
    Inverse(Box<SpatialMap>),
    Composed {
        outer: Box<SpatialMap>,
        inner: Box<SpatialMap>,
    },
}

/// The spatial diffeomorphism Φ̃ of a transformation, with numeric Jacobian,
/// second derivatives and inversion.
#[derive(Clone)]
pub struct SpatialMap {
    dim: usize,
    vars: VarSet,
    repr: MapRepr,
    /// Spatial box used to seed Newton inversions.
    seed_box: Vec<[f64; 2]>,
}

impl std::fmt::Debug for SpatialMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.repr {
            MapRepr::Identity => write!(f, "SpatialMap(identity)"),
            MapRepr::Symbolic { exprs, .. } => write!(
                f,
                "SpatialMap[{}]",
                exprs
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            MapRepr::Numeric { .. } => write!(f, "SpatialMap(<numeric>)"),
            MapRepr::Inverse(m) => write!(f, "SpatialMap(inverse of {m:?})"),
            MapRepr::Composed { outer, inner } => {
                write!(f, "SpatialMap({outer:?} ∘ {inner:?})")
            }
        }
    }
}

impl SpatialMap {
    pub fn identity(vars: &VarSet, seed_box: Vec<[f64; 2]>) -> Self {
        SpatialMap {
            dim: vars.n_spatial(),
            vars: vars.clone(),
            repr: MapRepr::Identity,
            seed_box,
        }
    }

    /// Builds a symbolic map from component expressions over the spatial
    /// variables of `vars` (time references are rejected: time dependence
    /// belongs to the clock coordinate).
    pub fn symbolic(
        exprs: Vec<Expr>,
        vars: &VarSet,
        seed_box: Vec<[f64; 2]>,
    ) -> Result<Self, TransformError> {
        let n = vars.n_spatial();
        if exprs.len() != n {
            return Err(TransformError::Shape(format!(
                "phi has {} components, expected {n}",
                exprs.len()
            )));
        }
        let time = vars.time_var().to_string();
        for e in &exprs {
            if e.variables().contains(&time) {
                return Err(TransformError::Shape(
                    "phi components must not reference the time variable".into(),
                ));
            }
        }
        let mut compiled = Vec::with_capacity(n);
        let mut jac = Vec::with_capacity(n * n);
        for e in &exprs {
            compiled.push(crate::expr::CompiledExpr::compile(e, vars).map_err(FieldError::from)?);
        }
        for e in &exprs {
            for k in 0..n {
                let d = e.diff(&vars.names()[k]);
                jac.push(crate::expr::CompiledExpr::compile(&d, vars).map_err(FieldError::from)?);
            }
        }
        Ok(SpatialMap {
            dim: n,
            vars: vars.clone(),
            repr: MapRepr::Symbolic {
                exprs,
                compiled,
                jac,
            },
            seed_box,
        })
    }

    /// Wraps numeric forward/inverse closures (used for flow-reconstructed
    /// maps, where the inverse is the flow at −λ).
    pub fn numeric(
        vars: &VarSet,
        seed_box: Vec<[f64; 2]>,
        fwd: Arc<NumMapFn>,
        inv: Option<Arc<NumMapFn>>,
    ) -> Self {
        SpatialMap {
            dim: vars.n_spatial(),
            vars: vars.clone(),
            repr: MapRepr::Numeric { fwd, inv },
            seed_box,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.repr, MapRepr::Identity)
    }

    pub fn exprs(&self) -> Option<&[Expr]> {
        match &self.repr {
            MapRepr::Symbolic { exprs, .. } => Some(exprs),
            _ => None,
        }
    }

    fn padded(&self, x: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.vars.len());
        p.extend_from_slice(x);
        p.push(0.0);
        p
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, TransformError> {
        if x.len() != self.dim {
            return Err(TransformError::Shape(format!(
                "point has {} coordinates, map expects {}",
                x.len(),
                self.dim
            )));
        }
        match &self.repr {
            MapRepr::Identity => Ok(x.to_vec()),
            MapRepr::Symbolic { compiled, exprs, .. } => {
                let p = self.padded(x);
                let mut out = Vec::with_capacity(self.dim);
                let mut scratch = Vec::new();
                for (prog, e) in compiled.iter().zip(exprs) {
                    out.push(prog.eval_with(&p, &mut scratch).map_err(|_| {
                        TransformError::Numeric(format!("phi component `{e}` failed at {x:?}"))
                    })?);
                }
                Ok(out)
            }
            MapRepr::Numeric { fwd, .. } => fwd(x),
            MapRepr::Inverse(fwd_map) => fwd_map.newton_invert(x),
            MapRepr::Composed { outer, inner } => outer.apply(&inner.apply(x)?),
        }
    }

    /// Spatial Jacobian D(Φ̃) at `x` (exact for symbolic, chain rule for
    /// composed/inverse, central differences for numeric maps).
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, TransformError> {
        match &self.repr {
            MapRepr::Identity => Ok(DMatrix::identity(self.dim, self.dim)),
            MapRepr::Symbolic { jac, .. } => {
                let p = self.padded(x);
                let mut out = DMatrix::zeros(self.dim, self.dim);
                let mut scratch = Vec::new();
                for i in 0..self.dim {
                    for k in 0..self.dim {
                        out[(i, k)] = jac[i * self.dim + k]
                            .eval_with(&p, &mut scratch)
                            .map_err(|_| {
                                TransformError::Numeric("phi jacobian evaluation failed".into())
                            })?;
                    }
                }
                Ok(out)
            }
            MapRepr::Numeric { .. } => self.jacobian_fd(x),
            MapRepr::Inverse(fwd_map) => {
                let q = fwd_map.newton_invert(x)?;
                let j = fwd_map.jacobian(&q)?;
                j.try_inverse().ok_or_else(|| {
                    TransformError::NonInvertiblePhi("singular Jacobian of forward map".into())
                })
            }
            MapRepr::Composed { outer, inner } => {
                let mid = inner.apply(x)?;
                Ok(outer.jacobian(&mid)? * inner.jacobian(x)?)
            }
        }
    }

    fn jacobian_fd(&self, x: &[f64]) -> Result<DMatrix<f64>, TransformError> {
        let n = self.dim;
        let mut out = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for k in 0..n {
            let h = JAC_FD_STEP * (1.0 + x[k].abs());
            xp[k] = x[k] + h;
            let fp = self.apply(&xp)?;
            xp[k] = x[k] - h;
            let fm = self.apply(&xp)?;
            xp[k] = x[k];
            for i in 0..n {
                out[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(out)
    }

    /// Second partials ∂ₖ∂ₗ Φ̃ⁱ for every component i (vector of n×n
    /// symmetric matrices, indexed by component).
    pub fn hessians(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>, TransformError> {
        let n = self.dim;
        match &self.repr {
            MapRepr::Identity => Ok(vec![DMatrix::zeros(n, n); n]),
            MapRepr::Symbolic { exprs, .. } => {
                let p = self.padded(x);
                let names = self.vars.names();
                let mut out = vec![DMatrix::zeros(n, n); n];
                for (i, e) in exprs.iter().enumerate() {
                    for k in 0..n {
                        let dk = e.diff(&names[k]);
                        for l in k..n {
                            let dkl = dk.diff(&names[l]);
                            let v = ScalarField::from_expr(dkl, &self.vars)?
                                .eval(&p)
                                .map_err(TransformError::Field)?;
                            out[i][(k, l)] = v;
                            out[i][(l, k)] = v;
                        }
                    }
                }
                Ok(out)
            }
            _ => {
                // Central second differences of the map itself.
                let f0 = self.apply(x)?;
                let mut out = vec![DMatrix::zeros(n, n); n];
                let mut xp = x.to_vec();
                for k in 0..n {
                    let hk = HESS_FD_STEP * (1.0 + x[k].abs());
                    xp[k] = x[k] + hk;
                    let fp = self.apply(&xp)?;
                    xp[k] = x[k] - hk;
                    let fm = self.apply(&xp)?;
                    xp[k] = x[k];
                    for i in 0..n {
                        out[i][(k, k)] = (fp[i] - 2.0 * f0[i] + fm[i]) / (hk * hk);
                    }
                    for l in (k + 1)..n {
                        let hl = HESS_FD_STEP * (1.0 + x[l].abs());
                        xp[k] = x[k] + hk;
                        xp[l] = x[l] + hl;
                        let fpp = self.apply(&xp)?;
                        xp[l] = x[l] - hl;
                        let fpm = self.apply(&xp)?;
                        xp[k] = x[k] - hk;
                        let fmm = self.apply(&xp)?;
                        xp[l] = x[l] + hl;
                        let fmp = self.apply(&xp)?;
                        xp[k] = x[k];
                        xp[l] = x[l];
                        for i in 0..n {
                            let v = (fpp[i] - fpm[i] - fmp[i] + fmm[i]) / (4.0 * hk * hl);
                            out[i][(k, l)] = v;
                            out[i][(l, k)] = v;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Applies Φ̃⁻¹ (closed form for affine maps, damped Newton otherwise).
    pub fn inverse_apply(&self, target: &[f64]) -> Result<Vec<f64>, TransformError> {
        match &self.repr {
            MapRepr::Identity => Ok(target.to_vec()),
            MapRepr::Inverse(fwd) => fwd.apply(target),
            MapRepr::Numeric { inv: Some(inv), .. } => inv(target),
            MapRepr::Composed { outer, inner } => {
                inner.inverse_apply(&outer.inverse_apply(target)?)
            }
            _ => self.newton_invert(target),
        }
    }

    fn newton_invert(&self, target: &[f64]) -> Result<Vec<f64>, TransformError> {
        if let Some(affine) = self.affine_form()? {
            return affine.solve(target);
        }
        // Seed from the grid point whose image is closest to the target.
        let grid = halton_grid(&self.seed_box, 32);
        let mut seed = target.to_vec();
        let mut best = f64::INFINITY;
        for g in grid.iter().chain(std::iter::once(&seed.clone())) {
            if let Ok(img) = self.apply(g) {
                let d: f64 = img
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best {
                    best = d;
                    seed = g.clone();
                }
            }
        }
        let f = |x: &[f64]| self.apply(x).ok();
        let jac = |x: &[f64]| self.jacobian(x).ok();
        damped_newton(&f, &jac, target, &seed, NEWTON_TOL, NEWTON_MAX_ITER)
            .map(|r| r.solution)
            .ok_or_else(|| {
                TransformError::NonInvertiblePhi(format!(
                    "Newton failed to invert phi at {target:?}"
                ))
            })
    }

    fn affine_form(&self) -> Result<Option<Affine>, TransformError> {
        let MapRepr::Symbolic { exprs, .. } = &self.repr else {
            return Ok(None);
        };
        let n = self.dim;
        let names = self.vars.names();
        let mut a = DMatrix::zeros(n, n);
        for (i, e) in exprs.iter().enumerate() {
            for k in 0..n {
                match simplify(&e.diff(&names[k])) {
                    Expr::Const(c) => a[(i, k)] = c,
                    _ => return Ok(None),
                }
            }
        }
        let zero = vec![0.0; n];
        let b = self.apply(&zero)?;
        Ok(Some(Affine {
            a,
            b: DVector::from_column_slice(&b),
        }))
    }

    /// Group inverse of the map.
    pub fn invert(&self) -> Result<SpatialMap, TransformError> {
        let repr = match &self.repr {
            MapRepr::Identity => MapRepr::Identity,
            MapRepr::Symbolic { exprs, .. } => {
                if let Some(affine) = self.affine_form()? {
                    let inv = affine.a.clone().try_inverse().ok_or_else(|| {
                        TransformError::NonInvertiblePhi("affine phi has singular matrix".into())
                    })?;
                    let names = self.vars.names();
                    let n = self.dim;
                    let mut inv_exprs = Vec::with_capacity(n);
                    for i in 0..n {
                        // x = A⁻¹ (y − b), written symbolically.
                        let mut acc = Expr::Const(0.0);
                        for k in 0..n {
                            acc = Expr::add(
                                acc,
                                Expr::mul(
                                    Expr::Const(inv[(i, k)]),
                                    Expr::sub(
                                        Expr::Var(names[k].clone()),
                                        Expr::Const(affine.b[k]),
                                    ),
                                ),
                            );
                        }
                        inv_exprs.push(simplify(&acc));
                    }
                    let image_box = image_box_of(self, &self.seed_box)?;
                    return SpatialMap::symbolic(inv_exprs, &self.vars, image_box);
                }
                let _ = exprs;
                MapRepr::Inverse(Box::new(self.clone()))
            }
            MapRepr::Numeric { fwd, inv: Some(inv) } => MapRepr::Numeric {
                fwd: inv.clone(),
                inv: Some(fwd.clone()),
            },
            MapRepr::Numeric { .. } => MapRepr::Inverse(Box::new(self.clone())),
            MapRepr::Inverse(fwd) => return Ok(fwd.as_ref().clone()),
            MapRepr::Composed { outer, inner } => MapRepr::Composed {
                outer: Box::new(inner.invert()?),
                inner: Box::new(outer.invert()?),
            },
        };
        let seed_box = image_box_of(self, &self.seed_box).unwrap_or_else(|_| self.seed_box.clone());
        Ok(SpatialMap {
            dim: self.dim,
            vars: self.vars.clone(),
            repr,
            seed_box,
        })
    }

    /// Composition outer ∘ inner; stays symbolic (by substitution) when both
    /// factors are symbolic.
    pub fn compose(outer: &SpatialMap, inner: &SpatialMap) -> Result<SpatialMap, TransformError> {
        if outer.dim != inner.dim {
            return Err(TransformError::Shape(
                "composed maps must share dimension".into(),
            ));
        }
        if outer.is_identity() {
            return Ok(inner.clone());
        }
        if inner.is_identity() {
            return Ok(outer.clone());
        }
        if let (Some(oe), Some(ie)) = (outer.exprs(), inner.exprs()) {
            let names = inner.vars.names().to_vec();
            let composed = oe
                .iter()
                .map(|e| {
                    simplify(&e.substitute(&|name: &str| {
                        names
                            .iter()
                            .position(|n| n == name)
                            .filter(|&i| i < ie.len())
                            .map(|i| ie[i].clone())
                    }))
                })
                .collect();
            return SpatialMap::symbolic(composed, &inner.vars, inner.seed_box.clone());
        }
        Ok(SpatialMap {
            dim: inner.dim,
            vars: inner.vars.clone(),
            repr: MapRepr::Composed {
                outer: Box::new(outer.clone()),
                inner: Box::new(inner.clone()),
            },
            seed_box: inner.seed_box.clone(),
        })
    }
}

struct Affine {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Affine {
    fn solve(&self, target: &[f64]) -> Result<Vec<f64>, TransformError> {
        let rhs = DVector::from_column_slice(target) - &self.b;
        self.a
            .clone()
            .lu()
            .solve(&rhs)
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| {
                TransformError::NonInvertiblePhi("affine phi has singular matrix".into())
            })
    }
}

/// Approximate image of a spatial box under the map (corner/grid sampling
/// with a small safety margin); used to size the working box of inverses and
/// transformed models.
fn image_box_of(map: &SpatialMap, spatial_box: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, TransformError> {
    let n = spatial_box.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for p in halton_grid(spatial_box, 64) {
        let img = map.apply(&p)?;
        for i in 0..n {
            lo[i] = lo[i].min(img[i]);
            hi[i] = hi[i].max(img[i]);
        }
    }
    Ok((0..n)
        .map(|i| {
            let pad = 0.05 * (hi[i] - lo[i]).max(1e-6);
            [lo[i] - pad, hi[i] + pad]
        })
        .collect())
}

type TimeFn = dyn Fn(f64) -> Result<f64, TransformError> + Send + Sync;

/// The deterministic clock map f(t) = ∫₀ᵗ η and its inverse, cached as
/// numeric monotone maps.
#[derive(Clone)]
pub enum TimeChange {
    Identity,
    FromRate {
        eta: Arc<TimeFn>,
        horizon: [f64; 2],
        grid_t: Arc<Vec<f64>>,
        grid_f: Arc<Vec<f64>>,
    },
    /// f = second ∘ first.
    Composed(Arc<TimeChange>, Arc<TimeChange>),
    Inverse(Arc<TimeChange>),
    /// Flow-reconstructed clock (exact inverse supplied by the −λ flow).
    Numeric {
        f: Arc<TimeFn>,
        f_inv: Arc<TimeFn>,
        eta: Arc<TimeFn>,
    },
}

impl std::fmt::Debug for TimeChange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeChange::Identity => write!(f, "TimeChange(identity)"),
            TimeChange::FromRate { horizon, .. } => {
                write!(f, "TimeChange(rate over {horizon:?})")
            }
            TimeChange::Composed(..) => write!(f, "TimeChange(composed)"),
            TimeChange::Inverse(_) => write!(f, "TimeChange(inverse)"),
            TimeChange::Numeric { .. } => write!(f, "TimeChange(numeric)"),
        }
    }
}

const TIME_GRID_CELLS: usize = 256;

impl TimeChange {
    /// Builds the cached monotone map from a strictly positive rate.
    pub fn from_rate(eta: Arc<TimeFn>, horizon: [f64; 2]) -> Result<Self, TransformError> {
        let lo = 0.0f64.min(horizon[0]);
        let hi = horizon[1].max(lo + 1e-9);
        let mut grid_t = Vec::with_capacity(TIME_GRID_CELLS + 1);
        let mut grid_f = Vec::with_capacity(TIME_GRID_CELLS + 1);
        let mut acc = 0.0;
        let mut prev = 0.0;
        // The cumulative integral is anchored at f(0) = 0.
        grid_t.push(0.0);
        grid_f.push(0.0);
        for k in 1..=TIME_GRID_CELLS {
            let t = lo + (hi - lo) * k as f64 / TIME_GRID_CELLS as f64;
            let e = eta(t)?;
            if e <= 0.0 {
                return Err(TransformError::NonPositiveEta { t, value: e });
            }
            let eta_ref = &eta;
            acc += adaptive_simpson(
                &|s| eta_ref(s).unwrap_or(f64::NAN),
                prev,
                t,
                1e-12,
            );
            if !acc.is_finite() {
                return Err(TransformError::Numeric(
                    "time change integral is not finite".into(),
                ));
            }
            prev = t;
            grid_t.push(t);
            grid_f.push(acc);
        }
        Ok(TimeChange::FromRate {
            eta,
            horizon: [lo, hi],
            grid_t: Arc::new(grid_t),
            grid_f: Arc::new(grid_f),
        })
    }

    pub fn eta(&self, t: f64) -> Result<f64, TransformError> {
        match self {
            TimeChange::Identity => Ok(1.0),
            TimeChange::FromRate { eta, .. } => eta(t),
            TimeChange::Composed(first, second) => Ok(second.eta(first.f(t)?)? * first.eta(t)?),
            TimeChange::Inverse(inner) => {
                let s = inner.f_inv(t)?;
                Ok(1.0 / inner.eta(s)?)
            }
            TimeChange::Numeric { eta, .. } => eta(t),
        }
    }

    pub fn f(&self, t: f64) -> Result<f64, TransformError> {
        match self {
            TimeChange::Identity => Ok(t),
            TimeChange::FromRate {
                eta,
                grid_t,
                grid_f,
                ..
            } => {
                // Nearest cached node below, then a short exact integral.
                let idx = match grid_t.binary_search_by(|g| g.total_cmp(&t)) {
                    Ok(i) => return Ok(grid_f[i]),
                    Err(i) => i.saturating_sub(1).min(grid_t.len() - 1),
                };
                let base_t = grid_t[idx];
                let base_f = grid_f[idx];
                let v = base_f
                    + adaptive_simpson(&|s| eta(s).unwrap_or(f64::NAN), base_t, t, 1e-13);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TransformError::Numeric(format!(
                        "time change integral failed at t={t}"
                    )))
                }
            }
            TimeChange::Composed(first, second) => second.f(first.f(t)?),
            TimeChange::Inverse(inner) => inner.f_inv(t),
            TimeChange::Numeric { f, .. } => f(t),
        }
    }

    pub fn f_inv(&self, s: f64) -> Result<f64, TransformError> {
        match self {
            TimeChange::Identity => Ok(s),
            TimeChange::FromRate {
                eta,
                horizon,
                grid_t,
                grid_f,
            } => {
                let max_f = *grid_f.last().expect("non-empty grid");
                if s < -1e-9 || s > max_f + 1e-9 {
                    return Err(TransformError::TimeOutOfRange {
                        t: s,
                        lo: 0.0,
                        hi: max_f,
                    });
                }
                // Hermite seed on the bracketing cell (η is the derivative),
                // then Newton polish against the exact integral.
                let idx = match grid_f.binary_search_by(|g| g.total_cmp(&s)) {
                    Ok(i) => return Ok(grid_t[i]),
                    Err(i) => i.saturating_sub(1).min(grid_f.len() - 2),
                };
                let (t0, t1) = (grid_t[idx], grid_t[idx + 1]);
                let (f0, f1) = (grid_f[idx], grid_f[idx + 1]);
                let mut t = if f1 > f0 {
                    t0 + (t1 - t0) * (s - f0) / (f1 - f0)
                } else {
                    t0
                };
                for _ in 0..8 {
                    let ft = self.f(t)?;
                    let et = eta(t.clamp(horizon[0], horizon[1]))?;
                    let step = (ft - s) / et;
                    t -= step;
                    if step.abs() <= 1e-13 * (1.0 + t.abs()) {
                        break;
                    }
                }
                Ok(t)
            }
            TimeChange::Composed(first, second) => first.f_inv(second.f_inv(s)?),
            TimeChange::Inverse(inner) => inner.f(s),
            TimeChange::Numeric { f_inv, .. } => f_inv(s),
        }
    }
}

/// A finite stochastic transformation T = (Φ, B, η, h) over a model's
/// variable set, with eagerly built caches for f, f⁻¹ and Newton seeding.
#[derive(Debug, Clone)]
pub struct FiniteTransformation {
    vars: VarSet,
    m: usize,
    phi: SpatialMap,
    eta: ScalarField,
    time: TimeChange,
    rotation: MatrixField,
    drift_shift: VectorField,
    working_box: Vec<[f64; 2]>,
}

/// JSON descriptor for a finite transformation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformationDescriptor {
    pub phi: Vec<String>,
    pub eta: String,
    #[serde(rename = "B")]
    pub b: Vec<Vec<String>>,
    pub h: Vec<String>,
}

impl FiniteTransformation {
    /// Validates the quadruple on the working box and builds the clock map.
    ///
    /// Checks: η > 0 at grid points, B ∈ SO(m) at 1e-9, f strictly
    /// increasing with f(0) = 0 (implied by positivity of the cached rate).
    pub fn new(
        vars: &VarSet,
        m: usize,
        phi: SpatialMap,
        eta: ScalarField,
        rotation: MatrixField,
        drift_shift: VectorField,
        working_box: Vec<[f64; 2]>,
    ) -> Result<Self, TransformError> {
        let eta_fn = time_only_closure(&eta, vars)?;
        let time_iv = working_box[working_box.len() - 1];
        let time = TimeChange::from_rate(eta_fn, [0.0, time_iv[1]])?;
        Self::from_parts(vars, m, phi, eta, time, rotation, drift_shift, working_box)
    }

    /// Internal constructor for composed/inverted transformations that carry
    /// their clock map directly.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        vars: &VarSet,
        m: usize,
        phi: SpatialMap,
        eta: ScalarField,
        time: TimeChange,
        rotation: MatrixField,
        drift_shift: VectorField,
        working_box: Vec<[f64; 2]>,
    ) -> Result<Self, TransformError> {
        let n = vars.n_spatial();
        if working_box.len() != n + 1 {
            return Err(TransformError::Shape(
                "working box needs n spatial intervals plus time".into(),
            ));
        }
        if phi.dim() != n {
            return Err(TransformError::Shape("phi dimension mismatch".into()));
        }
        if rotation.nrows() != m || rotation.ncols() != m {
            return Err(TransformError::Shape(format!(
                "rotation must be {m}x{m}"
            )));
        }
        if drift_shift.len() != m {
            return Err(TransformError::Shape(format!(
                "drift shift must have {m} components"
            )));
        }
        let grid = halton_grid(&working_box, 64);
        for p in &grid {
            let t = p[n];
            let e = eta.eval(p).map_err(TransformError::Field)?;
            if e <= 0.0 {
                return Err(TransformError::NonPositiveEta { t, value: e });
            }
        }
        let report = check_special_orthogonal(&rotation, &grid, 1e-9)?;
        if !report.pass {
            return Err(TransformError::RotationCheck(report.worst_defect));
        }
        Ok(FiniteTransformation {
            vars: vars.clone(),
            m,
            phi,
            eta,
            time,
            rotation,
            drift_shift,
            working_box,
        })
    }

    /// The identity transformation on a model's working box.
    pub fn identity(model: &SdeModel) -> Result<Self, TransformError> {
        let vars = model.vars();
        FiniteTransformation::new(
            vars,
            model.m(),
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(1.0, vars),
            MatrixField::identity(model.m(), vars),
            VectorField::zeros(model.m(), vars),
            model.domain_box().to_vec(),
        )
    }

    /// Parses a JSON descriptor against a model's variables and box.
    pub fn from_descriptor(
        d: &TransformationDescriptor,
        model: &SdeModel,
    ) -> Result<Self, TransformError> {
        let vars = model.vars();
        let n = model.n();
        let m = model.m();
        if d.phi.len() != n {
            return Err(TransformError::Shape(format!(
                "descriptor phi has {} components, expected {n}",
                d.phi.len()
            )));
        }
        if d.b.len() != m || d.b.iter().any(|r| r.len() != m) {
            return Err(TransformError::Shape(format!("descriptor B must be {m}x{m}")));
        }
        if d.h.len() != m {
            return Err(TransformError::Shape(format!(
                "descriptor h must have {m} components"
            )));
        }
        let phi_exprs = d
            .phi
            .iter()
            .map(|s| crate::expr::parse(s, vars))
            .collect::<Result<Vec<_>, _>>()
            .map_err(FieldError::from)?;
        let phi = SpatialMap::symbolic(phi_exprs, vars, model.spatial_box().to_vec())?;
        let eta = ScalarField::parse(&d.eta, vars)?;
        if !eta.is_time_only() {
            return Err(TransformError::Shape(
                "eta must be a function of time only".into(),
            ));
        }
        let rotation = MatrixField::parse(
            &d.b
                .iter()
                .map(|r| r.iter().map(String::as_str).collect())
                .collect::<Vec<Vec<&str>>>(),
            vars,
        )?;
        let drift_shift = VectorField::parse(
            &d.h.iter().map(String::as_str).collect::<Vec<_>>(),
            vars,
        )?;
        FiniteTransformation::new(
            vars,
            m,
            phi,
            eta,
            rotation,
            drift_shift,
            model.domain_box().to_vec(),
        )
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn brownian_dim(&self) -> usize {
        self.m
    }

    pub fn phi(&self) -> &SpatialMap {
        &self.phi
    }

    pub fn eta_field(&self) -> &ScalarField {
        &self.eta
    }

    pub fn time(&self) -> &TimeChange {
        &self.time
    }

    pub fn rotation(&self) -> &MatrixField {
        &self.rotation
    }

    pub fn drift_shift(&self) -> &VectorField {
        &self.drift_shift
    }

    pub fn working_box(&self) -> &[[f64; 2]] {
        &self.working_box
    }

    pub fn eta_at(&self, t: f64) -> Result<f64, TransformError> {
        let n = self.vars.n_spatial();
        let mut p = vec![0.0; n + 1];
        p[n] = t;
        self.eta.eval(&p).map_err(TransformError::Field)
    }

    /// True iff h ≡ 0, η ≡ 1 and B ≡ I at every sample point (tol 1e-12):
    /// the transformation fixes the Brownian motion, the filtration and the
    /// measure.
    pub fn is_strong(&self) -> Result<bool, TransformError> {
        let grid = halton_grid(&self.working_box, 64);
        let eye = DMatrix::identity(self.m, self.m);
        for p in &grid {
            if (self.eta.eval(p).map_err(TransformError::Field)? - 1.0).abs() > 1e-12 {
                return Ok(false);
            }
            let h = eval_vector(&self.drift_shift, p)?;
            if h.amax() > 1e-12 {
                return Ok(false);
            }
            let b = eval_matrix(&self.rotation, p)?;
            if max_abs(&(b - &eye)) > 1e-12 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn time_only_closure(
    eta: &ScalarField,
    vars: &VarSet,
) -> Result<Arc<TimeFn>, TransformError> {
    if eta.is_symbolic() && !eta.is_time_only() {
        return Err(TransformError::Shape(
            "eta must be a function of time only".into(),
        ));
    }
    let eta = eta.clone();
    let n = vars.n_spatial();
    Ok(Arc::new(move |t: f64| {
        let mut p = vec![0.0; n + 1];
        p[n] = t;
        eta.eval(&p).map_err(TransformError::Field)
    }))
}

/// E_T on the coefficients: returns the transformed model with
/// E_T(μ) = (1/η)[L(Φ)+D(Φ)σh]∘Φ⁻¹ and E_T(σ) = (1/√η)D(Φ)σB⁻¹∘Φ⁻¹.
///
/// The returned model's coefficient fields are computed (they invert Φ
/// numerically per evaluation); its working box is the image of the input's.
pub fn transform_coefficients(
    t: &FiniteTransformation,
    model: &SdeModel,
) -> Result<SdeModel, TransformError> {
    if model.vars() != t.vars() {
        return Err(TransformError::Shape(
            "transformation and model must share variables".into(),
        ));
    }
    if model.m() != t.m {
        return Err(TransformError::Shape(
            "transformation and model must share the Brownian dimension".into(),
        ));
    }
    let n = model.n();
    let m = model.m();
    let vars = model.vars().clone();

    let shared = Arc::new(TransformedCoefficients {
        t: t.clone(),
        model: model.clone(),
    });

    let mut mu_fields = Vec::with_capacity(n);
    for j in 0..n {
        let s = shared.clone();
        mu_fields.push(ScalarField::computed(&vars, move |p| {
            s.mu_at(p, j).map_err(to_field_err)
        }));
    }
    let mut sigma_rows = Vec::with_capacity(n);
    for j in 0..n {
        let mut row = Vec::with_capacity(m);
        for beta in 0..m {
            let s = shared.clone();
            row.push(ScalarField::computed(&vars, move |p| {
                s.sigma_at(p, j, beta).map_err(to_field_err)
            }));
        }
        sigma_rows.push(row);
    }

    // The transformed working box is the image of the original one.
    let image_spatial = image_box_of(&t.phi, model.spatial_box())?;
    let t_hi = model.time_interval()[1];
    let mut domain_box = image_spatial;
    domain_box.push([0.0, t.time.f(t_hi)?.max(1e-9)]);
    let initial = t.phi.apply(model.initial_point())?;

    Ok(SdeModel::new(
        vars.clone(),
        VectorField::new(mu_fields)?,
        MatrixField::new(sigma_rows)?,
        domain_box,
        initial,
    )?)
}

struct TransformedCoefficients {
    t: FiniteTransformation,
    model: SdeModel,
}

impl TransformedCoefficients {
    /// Pre-image (x, t) of an evaluation point under Φ = (Φ̃, f).
    fn preimage(&self, p: &[f64]) -> Result<Vec<f64>, TransformError> {
        let n = self.model.n();
        let x = self.t.phi.inverse_apply(&p[..n])?;
        let tt = self.t.time.f_inv(p[n])?;
        let mut q = x;
        q.push(tt);
        Ok(q)
    }

    fn mu_at(&self, p: &[f64], j: usize) -> Result<f64, TransformError> {
        let n = self.model.n();
        let q = self.preimage(p)?;
        let qx = &q[..n];
        let jac = self.t.phi.jacobian(qx)?;
        let hess = self.t.phi.hessians(qx)?;
        let mu = eval_vector(self.model.mu(), &q)?;
        let sigma = eval_matrix(self.model.sigma(), &q)?;
        let a = &sigma * sigma.transpose();
        let h = eval_vector(&self.t.drift_shift, &q)?;
        let eta = self.t.eta.eval(&q).map_err(TransformError::Field)?;

        // L(Φ̃ʲ): the spatial map has no explicit time argument, so the ∂ₜ
        // term vanishes and the drift/diffusion terms remain.
        let mut l_phi = 0.0;
        for i in 0..n {
            l_phi += mu[i] * jac[(j, i)];
        }
        for i in 0..n {
            for k in 0..n {
                let aik = a[(i, k)];
                if aik != 0.0 {
                    l_phi += 0.5 * aik * hess[j][(i, k)];
                }
            }
        }
        let dsh = (jac * (&sigma * &h))[j];
        Ok((l_phi + dsh) / eta)
    }

    fn sigma_at(&self, p: &[f64], j: usize, beta: usize) -> Result<f64, TransformError> {
        let n = self.model.n();
        let q = self.preimage(p)?;
        let qx = &q[..n];
        let jac = self.t.phi.jacobian(qx)?;
        let sigma = eval_matrix(self.model.sigma(), &q)?;
        let b = eval_matrix(&self.t.rotation, &q)?;
        let eta = self.t.eta.eval(&q).map_err(TransformError::Field)?;
        // B⁻¹ = Bᵀ on SO(m).
        let v = (jac * sigma * b.transpose())[(j, beta)];
        Ok(v / eta.sqrt())
    }
}

/// Group composition T₂∘T₁ (apply T₁ first).
pub fn compose(
    t2: &FiniteTransformation,
    t1: &FiniteTransformation,
) -> Result<FiniteTransformation, TransformError> {
    if t1.vars != t2.vars || t1.m != t2.m {
        return Err(TransformError::Shape(
            "composed transformations must share variables and Brownian dimension".into(),
        ));
    }
    let vars = t1.vars.clone();
    let n = vars.n_spatial();
    let m = t1.m;
    let phi = SpatialMap::compose(&t2.phi, &t1.phi)?;

    let (t1c, t2c) = (Arc::new(t1.clone()), Arc::new(t2.clone()));

    let eta = {
        let (t1c, t2c) = (t1c.clone(), t2c.clone());
        ScalarField::computed(&vars, move |p| {
            let t = p[n];
            let f1 = t1c.time.f(t).map_err(to_field_err)?;
            let e1 = t1c.eta.eval(p)?;
            let e2 = t2c.eta_at(f1).map_err(to_field_err)?;
            Ok(e2 * e1)
        })
    };
    let time = TimeChange::Composed(Arc::new(t1.time.clone()), Arc::new(t2.time.clone()));

    // Point of T₂'s fields: (Φ̃₁(x), f₁(t)).
    let push_point = {
        let t1c = t1c.clone();
        move |p: &[f64]| -> Result<Vec<f64>, TransformError> {
            let mut q = t1c.phi.apply(&p[..n])?;
            q.push(t1c.time.f(p[n])?);
            Ok(q)
        }
    };

    let mut rot_rows = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let (t1c, t2c, push) = (t1c.clone(), t2c.clone(), push_point.clone());
            row.push(ScalarField::computed(&vars, move |p| {
                let q = push(p).map_err(to_field_err)?;
                let mut acc = 0.0;
                for k in 0..t1c.m {
                    acc += t2c.rotation.entry(i, k).eval(&q)?
                        * t1c.rotation.entry(k, j).eval(p)?;
                }
                Ok(acc)
            }));
        }
        rot_rows.push(row);
    }
    let rotation = MatrixField::new(rot_rows)?;

    let mut h_fields = Vec::with_capacity(m);
    for alpha in 0..m {
        let (t1c, t2c, push) = (t1c.clone(), t2c.clone(), push_point.clone());
        h_fields.push(ScalarField::computed(&vars, move |p| {
            let q = push(p).map_err(to_field_err)?;
            let e1 = t1c.eta.eval(p)?;
            // (B₁⁻¹ v)_α = Σ_k B₁(k,α) v_k on SO(m).
            let mut acc = 0.0;
            for k in 0..t1c.m {
                acc += t1c.rotation.entry(k, alpha).eval(p)?
                    * t2c.drift_shift.component(k).eval(&q)?;
            }
            Ok(e1.sqrt() * acc + t1c.drift_shift.component(alpha).eval(p)?)
        }));
    }
    let drift_shift = VectorField::new(h_fields)?;

    FiniteTransformation::from_parts(
        &vars,
        m,
        phi,
        eta,
        time,
        rotation,
        drift_shift,
        t1.working_box.clone(),
    )
}

/// Group inverse T⁻¹.
pub fn invert(t: &FiniteTransformation) -> Result<FiniteTransformation, TransformError> {
    let vars = t.vars.clone();
    let n = vars.n_spatial();
    let m = t.m;
    let phi_inv = t.phi.invert()?;
    let tc = Arc::new(t.clone());

    // Pre-image point q = (Φ̃⁻¹(x), f⁻¹(t)) of the original transformation.
    let pull_point = {
        let tc = tc.clone();
        move |p: &[f64]| -> Result<Vec<f64>, TransformError> {
            let mut q = tc.phi.inverse_apply(&p[..n])?;
            q.push(tc.time.f_inv(p[n])?);
            Ok(q)
        }
    };

    let eta = {
        let (tc, pull) = (tc.clone(), pull_point.clone());
        ScalarField::computed(&vars, move |p| {
            let q = pull(p).map_err(to_field_err)?;
            Ok(1.0 / tc.eta.eval(&q)?)
        })
    };
    let time = TimeChange::Inverse(Arc::new(t.time.clone()));

    let mut rot_rows = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(m);
        for j in 0..m {
            let (tc, pull) = (tc.clone(), pull_point.clone());
            row.push(ScalarField::computed(&vars, move |p| {
                let q = pull(p).map_err(to_field_err)?;
                // (B ∘ Φ⁻¹)⁻¹ = Bᵀ evaluated at the pre-image.
                tc.rotation.entry(j, i).eval(&q)
            }));
        }
        rot_rows.push(row);
    }
    let rotation = MatrixField::new(rot_rows)?;

    let mut h_fields = Vec::with_capacity(m);
    for alpha in 0..m {
        let (tc, pull) = (tc.clone(), pull_point.clone());
        h_fields.push(ScalarField::computed(&vars, move |p| {
            let q = pull(p).map_err(to_field_err)?;
            let eta = tc.eta.eval(&q)?;
            let mut acc = 0.0;
            for k in 0..tc.m {
                acc += tc.rotation.entry(alpha, k).eval(&q)?
                    * tc.drift_shift.component(k).eval(&q)?;
            }
            Ok(-acc / eta.sqrt())
        }));
    }
    let drift_shift = VectorField::new(h_fields)?;

    let image_spatial = image_box_of(&t.phi, &t.working_box[..n])?;
    let mut working_box = image_spatial;
    let t_hi = t.working_box[n][1];
    working_box.push([0.0, t.time.f(t_hi)?.max(1e-9)]);

    FiniteTransformation::from_parts(
        &vars,
        m,
        phi_inv,
        eta,
        time,
        rotation,
        drift_shift,
        working_box,
    )
}

/// Field-level comparison of two transformations at sample points.
pub fn transformations_agree(
    a: &FiniteTransformation,
    b: &FiniteTransformation,
    sample_points: &[Vec<f64>],
    tol: f64,
) -> Result<bool, TransformError> {
    let n = a.vars.n_spatial();
    for p in sample_points {
        let (xa, xb) = (a.phi.apply(&p[..n])?, b.phi.apply(&p[..n])?);
        for i in 0..n {
            if (xa[i] - xb[i]).abs() > tol {
                return Ok(false);
            }
        }
        if (a.eta.eval(p)? - b.eta.eval(p)?).abs() > tol {
            return Ok(false);
        }
        if (a.time.f(p[n])? - b.time.f(p[n])?).abs() > tol {
            return Ok(false);
        }
        let (ba, bb) = (eval_matrix(&a.rotation, p)?, eval_matrix(&b.rotation, p)?);
        if max_abs(&(ba - bb)) > tol {
            return Ok(false);
        }
        let (ha, hb) = (eval_vector(&a.drift_shift, p)?, eval_vector(&b.drift_shift, p)?);
        if (ha - hb).amax() > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::models::bm2d;
    use crate::sde::coefficients_equal;

    fn rotation_t(theta: f64, model: &SdeModel) -> FiniteTransformation {
        let vars = model.vars();
        let (c, s) = (theta.cos(), theta.sin());
        FiniteTransformation::new(
            vars,
            model.m(),
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(1.0, vars),
            MatrixField::parse(
                &[
                    vec![&format!("{c}") as &str, &format!("{s}")],
                    vec![&format!("{}", -s), &format!("{c}")],
                ],
                vars,
            )
            .unwrap(),
            VectorField::zeros(model.m(), vars),
            model.domain_box().to_vec(),
        )
        .unwrap()
    }

    fn measure_change_t(c1: f64, c2: f64, model: &SdeModel) -> FiniteTransformation {
        let vars = model.vars();
        FiniteTransformation::new(
            vars,
            model.m(),
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(1.0, vars),
            MatrixField::identity(model.m(), vars),
            VectorField::new(vec![
                ScalarField::constant(c1, vars),
                ScalarField::constant(c2, vars),
            ])
            .unwrap(),
            model.domain_box().to_vec(),
        )
        .unwrap()
    }

    fn time_change_t(eta: f64, model: &SdeModel) -> FiniteTransformation {
        let vars = model.vars();
        FiniteTransformation::new(
            vars,
            model.m(),
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(eta, vars),
            MatrixField::identity(model.m(), vars),
            VectorField::zeros(model.m(), vars),
            model.domain_box().to_vec(),
        )
        .unwrap()
    }

    /// A generic invertible transformation exercising every component.
    fn generic_t(model: &SdeModel) -> FiniteTransformation {
        let vars = model.vars();
        let phi = SpatialMap::symbolic(
            vec![
                parse("x + 0.1*tanh(y)", vars).unwrap(),
                parse("y - 0.05*x", vars).unwrap(),
                parse("z", vars).unwrap(),
            ],
            vars,
            model.spatial_box().to_vec(),
        )
        .unwrap();
        FiniteTransformation::new(
            vars,
            model.m(),
            phi,
            ScalarField::parse("1 + t/2", vars).unwrap(),
            MatrixField::parse(
                &[
                    vec!["cos(0.4)", "sin(0.4)"],
                    vec!["-sin(0.4)", "cos(0.4)"],
                ],
                vars,
            )
            .unwrap(),
            VectorField::parse(&["0.2", "-0.1*x"], vars).unwrap(),
            model.domain_box().to_vec(),
        )
        .unwrap()
    }

    fn inner_grid(model: &SdeModel) -> Vec<Vec<f64>> {
        let shrunk: Vec<[f64; 2]> = model
            .domain_box()
            .iter()
            .map(|[lo, hi]| {
                let c = 0.5 * (lo + hi);
                let w = 0.35 * (hi - lo);
                [c - w, c + w]
            })
            .collect();
        halton_grid(&shrunk, 24)
    }

    #[test]
    fn identity_transformation_fixes_coefficients() {
        let model = bm2d();
        let t = FiniteTransformation::identity(&model).unwrap();
        let out = transform_coefficients(&t, &model).unwrap();
        let report = coefficients_equal(&model, &out, &inner_grid(&model), 1e-10).unwrap();
        assert!(report.equivalent, "{report:?}");
        assert!(t.is_strong().unwrap());
    }

    #[test]
    fn pure_rotation_rotates_sigma_only() {
        let model = bm2d();
        let t = rotation_t(std::f64::consts::FRAC_PI_2, &model);
        let out = transform_coefficients(&t, &model).unwrap();
        let p = [0.3, -0.4, 0.5, 0.2];
        let mu = eval_vector(out.mu(), &p).unwrap();
        assert!((mu[0]).abs() < 1e-12 && (mu[1]).abs() < 1e-12 && (mu[2] - 1.0).abs() < 1e-12);
        // σ B⁻¹ with B = [[0,1],[−1,0]] turns the padded identity into
        // columns (0,1,0) and (−1,0,0).
        let sigma = eval_matrix(out.sigma(), &p).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[0.0, -1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(max_abs(&(sigma - expected)) < 1e-12);
        assert!(!t.is_strong().unwrap());
    }

    #[test]
    fn pure_measure_change_shifts_drift() {
        let model = bm2d();
        let t = measure_change_t(0.7, -0.3, &model);
        let out = transform_coefficients(&t, &model).unwrap();
        let p = [0.1, 0.2, 0.3, 0.4];
        let mu = eval_vector(out.mu(), &p).unwrap();
        assert!((mu[0] - 0.7).abs() < 1e-12);
        assert!((mu[1] + 0.3).abs() < 1e-12);
        assert!((mu[2] - 1.0).abs() < 1e-12);
        let sigma = eval_matrix(out.sigma(), &p).unwrap();
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(max_abs(&(sigma - expected)) < 1e-12);
    }

    #[test]
    fn pure_spatial_dilation_is_strong() {
        let model = bm2d();
        let vars = model.vars();
        let phi = SpatialMap::symbolic(
            vec![
                parse("2*x", vars).unwrap(),
                parse("2*y", vars).unwrap(),
                parse("z", vars).unwrap(),
            ],
            vars,
            model.spatial_box().to_vec(),
        )
        .unwrap();
        let t = FiniteTransformation::new(
            vars,
            model.m(),
            phi,
            ScalarField::constant(1.0, vars),
            MatrixField::identity(2, vars),
            VectorField::zeros(2, vars),
            model.domain_box().to_vec(),
        )
        .unwrap();
        assert!(t.is_strong().unwrap());
        // And the doubled map transforms states exactly by 2 on paths, via
        // the coefficient action: E_T(σ) = D(Φ)σ = 2σ (padded rows).
        let out = transform_coefficients(&t, &model).unwrap();
        let sigma = eval_matrix(out.sigma(), &[0.0, 0.0, 0.2, 0.2]).unwrap();
        assert!((sigma[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn composition_of_time_changes_multiplies_rates() {
        let model = bm2d();
        let t1 = time_change_t(2.0, &model);
        let t2 = time_change_t(3.0, &model);
        let c = compose(&t2, &t1).unwrap();
        for p in inner_grid(&model) {
            assert!((c.eta_field().eval(&p).unwrap() - 6.0).abs() < 1e-10);
        }
        assert!((c.time().f(0.5).unwrap() - 3.0).abs() < 1e-9);
        assert!((c.time().f_inv(3.0).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn composition_of_rotations_adds_angles() {
        let model = bm2d();
        let (th1, th2) = (0.3, 0.45);
        let c = compose(&rotation_t(th2, &model), &rotation_t(th1, &model)).unwrap();
        // Matrix-product oracle.
        let r = |th: f64| {
            DMatrix::from_row_slice(2, 2, &[th.cos(), th.sin(), -th.sin(), th.cos()])
        };
        let expected = r(th2) * r(th1);
        let direct = r(th1 + th2);
        for p in inner_grid(&model) {
            let b = eval_matrix(c.rotation(), &p).unwrap();
            assert!(max_abs(&(b.clone() - &expected)) < 1e-12);
            assert!(max_abs(&(b - &direct)) < 1e-12);
        }
    }

    #[test]
    fn compose_with_identity_is_identity_on_fields() {
        let model = bm2d();
        let t = generic_t(&model);
        let id = FiniteTransformation::identity(&model).unwrap();
        let c = compose(&t, &id).unwrap();
        assert!(transformations_agree(&c, &t, &inner_grid(&model), 1e-12).unwrap());
        let c = compose(&id, &t).unwrap();
        assert!(transformations_agree(&c, &t, &inner_grid(&model), 1e-12).unwrap());
    }

    #[test]
    fn inversion_examples() {
        let model = bm2d();
        let id = FiniteTransformation::identity(&model).unwrap();
        assert!(transformations_agree(
            &invert(&id).unwrap(),
            &id,
            &inner_grid(&model),
            1e-12
        )
        .unwrap());

        // Pure measure change inverts to the opposite shift.
        let t = measure_change_t(0.4, -0.2, &model);
        let inv = invert(&t).unwrap();
        for p in inner_grid(&model) {
            let h = eval_vector(inv.drift_shift(), &p).unwrap();
            assert!((h[0] + 0.4).abs() < 1e-12);
            assert!((h[1] - 0.2).abs() < 1e-12);
            let b = eval_matrix(inv.rotation(), &p).unwrap();
            assert!(max_abs(&(b - DMatrix::identity(2, 2))) < 1e-12);
        }

        // Pure rotation inverts to the opposite angle (matrix inverse oracle).
        let t = rotation_t(0.6, &model);
        let inv = invert(&t).unwrap();
        let expected = DMatrix::from_row_slice(
            2,
            2,
            &[0.6f64.cos(), -0.6f64.sin(), 0.6f64.sin(), 0.6f64.cos()],
        );
        for p in inner_grid(&model) {
            let b = eval_matrix(inv.rotation(), &p).unwrap();
            assert!(max_abs(&(b - &expected)) < 1e-12);
        }
    }

    #[test]
    fn group_laws_hold_at_sample_points() {
        let model = bm2d();
        let t = generic_t(&model);
        let id = FiniteTransformation::identity(&model).unwrap();
        let round = compose(&t, &invert(&t).unwrap()).unwrap();
        // Points for the round trip live in the image box of T.
        let pts: Vec<Vec<f64>> = inner_grid(&model)
            .iter()
            .map(|p| {
                let mut q = t.phi().apply(&p[..3]).unwrap();
                q.push(t.time().f(p[3]).unwrap());
                q
            })
            .collect();
        assert!(transformations_agree(&round, &id, &pts, 1e-9).unwrap());

        // Associativity on the domain grid.
        let t1 = rotation_t(0.2, &model);
        let t2 = time_change_t(1.5, &model);
        let t3 = measure_change_t(0.1, 0.3, &model);
        let left = compose(&compose(&t3, &t2).unwrap(), &t1).unwrap();
        let right = compose(&t3, &compose(&t2, &t1).unwrap()).unwrap();
        assert!(transformations_agree(&left, &right, &inner_grid(&model), 1e-9).unwrap());
    }

    #[test]
    fn coefficient_action_is_functorial() {
        let model = bm2d();
        let t1 = generic_t(&model);
        let t2 = rotation_t(0.35, &model);
        let composed = compose(&t2, &t1).unwrap();
        let via_composed = transform_coefficients(&composed, &model).unwrap();
        let step1 = transform_coefficients(&t1, &model).unwrap();
        let via_steps = transform_coefficients(&t2, &step1).unwrap();
        // Compare at interior points of the composed image.
        let pts: Vec<Vec<f64>> = inner_grid(&model)
            .iter()
            .map(|p| {
                let mut q = composed.phi().apply(&p[..3]).unwrap();
                q.push(composed.time().f(p[3]).unwrap());
                q
            })
            .collect();
        let report = coefficients_equal(&via_composed, &via_steps, &pts, 1e-8).unwrap();
        assert!(
            report.equivalent,
            "worst drift {} diffusion {}",
            report.worst_drift, report.worst_diffusion
        );
    }

    #[test]
    fn weak_symmetry_criterion_via_coefficients() {
        // The closed-form rotational T_λ is a weak symmetry: E_T fixes (μ, σ).
        let model = bm2d();
        let t = crate::models::bm2d_finite_v_beta(&model, &parse("z", model.vars()).unwrap(), 0.4)
            .unwrap();
        let out = transform_coefficients(&t, &model).unwrap();
        let report = coefficients_equal(&out, &model, &inner_grid(&model), 1e-9).unwrap();
        assert!(
            report.equivalent,
            "worst drift {} diffusion {}",
            report.worst_drift, report.worst_diffusion
        );

        // An uncompensated dilation is not a symmetry.
        let vars = model.vars();
        let bad = FiniteTransformation::new(
            vars,
            2,
            SpatialMap::symbolic(
                vec![
                    parse("2*x", vars).unwrap(),
                    parse("2*y", vars).unwrap(),
                    parse("z", vars).unwrap(),
                ],
                vars,
                model.spatial_box().to_vec(),
            )
            .unwrap(),
            ScalarField::constant(1.0, vars),
            MatrixField::identity(2, vars),
            VectorField::zeros(2, vars),
            model.domain_box().to_vec(),
        )
        .unwrap();
        let out = transform_coefficients(&bad, &model).unwrap();
        let report = coefficients_equal(&out, &model, &inner_grid(&model), 1e-9).unwrap();
        assert!(!report.equivalent);
    }

    #[test]
    fn construction_rejects_bad_components() {
        let model = bm2d();
        let vars = model.vars();
        // Non-positive eta.
        let err = FiniteTransformation::new(
            vars,
            2,
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::parse("t - 0.5", vars).unwrap(),
            MatrixField::identity(2, vars),
            VectorField::zeros(2, vars),
            model.domain_box().to_vec(),
        )
        .unwrap_err();
        assert!(matches!(err, TransformError::NonPositiveEta { .. }));

        // Shear is not in SO(2).
        let err = FiniteTransformation::new(
            vars,
            2,
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(1.0, vars),
            MatrixField::parse(&[vec!["1", "1"], vec!["0", "1"]], vars).unwrap(),
            VectorField::zeros(2, vars),
            model.domain_box().to_vec(),
        )
        .unwrap_err();
        assert!(matches!(err, TransformError::RotationCheck(_)));
    }

    #[test]
    fn non_invertible_phi_is_reported() {
        let model = bm2d();
        let vars = model.vars();
        // Collapsing map: Newton cannot invert it.
        let phi = SpatialMap::symbolic(
            vec![
                parse("x*0", vars).unwrap(),
                parse("y", vars).unwrap(),
                parse("z", vars).unwrap(),
            ],
            vars,
            model.spatial_box().to_vec(),
        )
        .unwrap();
        let err = phi.inverse_apply(&[0.5, 0.1, 0.1]).unwrap_err();
        assert!(matches!(err, TransformError::NonInvertiblePhi(_)));
    }

    #[test]
    fn newton_inversion_round_trips_nonaffine_maps() {
        let model = bm2d();
        let t = generic_t(&model);
        for p in inner_grid(&model) {
            let y = t.phi().apply(&p[..3]).unwrap();
            let back = t.phi().inverse_apply(&y).unwrap();
            for i in 0..3 {
                assert!((back[i] - p[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn descriptor_parses_to_transformation() {
        let model = bm2d();
        let d: TransformationDescriptor = serde_json::from_str(
            r#"{
                "phi": ["x", "y", "z"],
                "eta": "1",
                "B": [["cos(0.3)", "sin(0.3)"], ["-sin(0.3)", "cos(0.3)"]],
                "h": ["0.1", "0"]
            }"#,
        )
        .unwrap();
        let t = FiniteTransformation::from_descriptor(&d, &model).unwrap();
        assert!(!t.is_strong().unwrap());
    }
}
