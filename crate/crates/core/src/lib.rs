//! Stochastic-transformation calculus for Brownian-motion-driven SDEs.
//!
//! The crate implements finite stochastic transformations T = (Φ, B, η, h)
//! and their infinitesimal counterparts V = (Y, C, τ, H): the action on SDE
//! coefficients and on simulated paths, the weak and 𝒢-weak determining
//! equations, flow reconstruction of the one-parameter group, and Monte
//! Carlo verification of the quasi-invariance principle and the rotational
//! integration-by-parts formula on built-in example models.
//!
//! Modules, bottom up:
//!
//! - [`expr`]: the expression mini-language (parse, eval, diff, simplify).
//! - [`fields`]: scalar/vector/matrix fields with SO(m) and so(m) checks.
//! - [`sde`]: SDE models, the symbolic generator, gauge equivalence.
//! - [`transform`]: finite transformations, E_T, composition, inversion.
//! - [`symmetry`]: determining equations and flow reconstruction.
//! - [`mc`]: Euler–Maruyama engine, path actions P_T, estimators.
//! - [`models`]: registry of the built-in example models and symmetries.

#![allow(clippy::needless_range_loop)] // index loops mirror the tensor formulas
#![allow(clippy::neg_cmp_op_on_partial_ord)] // !(x > 0) deliberately catches NaN
#![allow(clippy::type_complexity)]

// nalgebra types (DMatrix, DVector) appear in public signatures.
pub use nalgebra;

pub mod expr;
pub mod fields;
pub mod mc;
pub mod models;
pub mod numeric;
pub mod sde;
pub mod symmetry;
pub mod transform;

pub use expr::{Expr, ExprError, VarSet};
pub use fields::{MatrixField, ScalarField, VectorField};
pub use sde::SdeModel;
pub use symmetry::InfinitesimalSymmetry;
pub use transform::FiniteTransformation;
