//! Flat postfix compilation of expression trees for hot-loop evaluation.
//!
//! Variables are resolved to slot indices against a `VarSet` once at compile
//! time, so evaluation is a single pass over the instruction vector with a
//! reusable value stack and no hashing. Domain violations are reported by
//! instruction index; callers that want a rich error re-run the tree
//! evaluator on the original `Expr`.

use super::{BinaryOp, Expr, ExprError, UnaryOp, VarSet};
use crate::numeric::adaptive_simpson;

#[derive(Debug, Clone)]
enum Op {
    Const(f64),
    Var(u32),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Ln,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    PowI(i32),
    PowF(f64),
    Integral(Box<CompiledExpr>, u32),
}

/// A compiled expression; evaluation takes the point as a slice ordered like
/// the `VarSet` it was compiled against.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    max_stack: usize,
}

/// Evaluation failure in compiled code (slot for rich re-diagnosis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompiledEvalError {
    pub op_index: usize,
}

impl CompiledExpr {
    pub fn compile(e: &Expr, vars: &VarSet) -> Result<CompiledExpr, ExprError> {
        let mut ops = Vec::new();
        let depth = emit(e, vars, &mut ops)?;
        Ok(CompiledExpr {
            ops,
            max_stack: depth,
        })
    }

    pub fn max_stack(&self) -> usize {
        self.max_stack
    }

    /// Evaluates using a caller-provided scratch stack (cleared on entry).
    pub fn eval_with(
        &self,
        point: &[f64],
        stack: &mut Vec<f64>,
    ) -> Result<f64, CompiledEvalError> {
        stack.clear();
        stack.reserve(self.max_stack);
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Const(c) => stack.push(*c),
                Op::Var(slot) => stack.push(point[*slot as usize]),
                Op::Add => bin(stack, |a, b| a + b),
                Op::Sub => bin(stack, |a, b| a - b),
                Op::Mul => bin(stack, |a, b| a * b),
                Op::Div => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    if b == 0.0 {
                        return Err(CompiledEvalError { op_index: i });
                    }
                    stack.push(a / b);
                }
                Op::Neg => un(stack, |a| -a),
                Op::Ln => {
                    let a = stack.pop().unwrap();
                    if a <= 0.0 {
                        return Err(CompiledEvalError { op_index: i });
                    }
                    stack.push(a.ln());
                }
                Op::Exp => un(stack, f64::exp),
                Op::Sin => un(stack, f64::sin),
                Op::Cos => un(stack, f64::cos),
                Op::Sqrt => {
                    let a = stack.pop().unwrap();
                    if a < 0.0 {
                        return Err(CompiledEvalError { op_index: i });
                    }
                    stack.push(a.sqrt());
                }
                Op::Tanh => un(stack, f64::tanh),
                Op::PowI(n) => un(stack, |a| a.powi(*n)),
                Op::PowF(e) => un(stack, |a| a.powf(*e)),
                Op::Integral(prog, slot) => {
                    let upper = point[*slot as usize];
                    let f = |s: f64| {
                        let mut st = Vec::with_capacity(prog.max_stack);
                        prog.eval_with(&[s], &mut st).unwrap_or(f64::NAN)
                    };
                    stack.push(adaptive_simpson(&f, 0.0, upper, 1e-12));
                }
            }
            if let Some(&top) = stack.last() {
                if !top.is_finite() {
                    return Err(CompiledEvalError { op_index: i });
                }
            }
        }
        debug_assert_eq!(stack.len(), 1);
        Ok(stack[0])
    }

    /// Convenience evaluation with a fresh scratch stack.
    pub fn eval(&self, point: &[f64]) -> Result<f64, CompiledEvalError> {
        let mut stack = Vec::with_capacity(self.max_stack);
        self.eval_with(point, &mut stack)
    }
}

#[inline(always)]
fn bin(stack: &mut Vec<f64>, f: impl Fn(f64, f64) -> f64) {
    let b = stack.pop().unwrap();
    let a = stack.pop().unwrap();
    stack.push(f(a, b));
}

#[inline(always)]
fn un(stack: &mut Vec<f64>, f: impl Fn(f64) -> f64) {
    let a = stack.pop().unwrap();
    stack.push(f(a));
}

fn emit(e: &Expr, vars: &VarSet, ops: &mut Vec<Op>) -> Result<usize, ExprError> {
    Ok(match e {
        Expr::Const(c) => {
            ops.push(Op::Const(*c));
            1
        }
        Expr::Var(name) => {
            let slot = vars
                .index_of(name)
                .ok_or_else(|| ExprError::NoSuchVariable(name.clone()))?;
            ops.push(Op::Var(slot as u32));
            1
        }
        Expr::Unary(op, a) => {
            let d = emit(a, vars, ops)?;
            ops.push(match op {
                UnaryOp::Neg => Op::Neg,
                UnaryOp::Ln => Op::Ln,
                UnaryOp::Exp => Op::Exp,
                UnaryOp::Sin => Op::Sin,
                UnaryOp::Cos => Op::Cos,
                UnaryOp::Sqrt => Op::Sqrt,
                UnaryOp::Tanh => Op::Tanh,
            });
            d
        }
        Expr::Binary(op, a, b) => {
            let da = emit(a, vars, ops)?;
            let db = emit(b, vars, ops)?;
            ops.push(match op {
                BinaryOp::Add => Op::Add,
                BinaryOp::Sub => Op::Sub,
                BinaryOp::Mul => Op::Mul,
                BinaryOp::Div => Op::Div,
            });
            da.max(1 + db)
        }
        Expr::Pow(a, e0) => {
            let d = emit(a, vars, ops)?;
            if e0.fract() == 0.0 && e0.abs() <= 64.0 {
                ops.push(Op::PowI(*e0 as i32));
            } else {
                ops.push(Op::PowF(*e0));
            }
            d
        }
        Expr::Integral { integrand, var } => {
            let slot = vars
                .index_of(var)
                .ok_or_else(|| ExprError::NoSuchVariable(var.clone()))?;
            let inner_vars = VarSet::new(vec![var.clone()])?;
            let prog = CompiledExpr::compile(integrand, &inner_vars)?;
            ops.push(Op::Integral(Box::new(prog), slot as u32));
            1
        }
    })
}
