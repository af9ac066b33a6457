//! Deterministic white-box executors: the exact-rational calculator and the
//! rule-based option matcher.

mod env;
mod expr;
mod rule;

pub use env::{Bound, Environment, RebindError};
pub use expr::{eval_expr, BinOp, EvalError, Expr, ExprError, Func, ParseError, Value, MAX_EXPONENT};
pub use rule::{match_rule, Operand, Predicate, RuleClause, RuleError, RuleMatch};
