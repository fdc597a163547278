"""Evolutionary symbolic regression over expression trees."""

from .tree import (
    OPERATOR_SETS,
    Binary,
    Const,
    Expr,
    OperatorSet,
    ParseError,
    Unary,
    Var,
    canonical_key,
    complexity,
    eval_batch,
    eval_tree,
    format_expr,
    parse_expr,
    simplify,
)
from .engine import (
    Individual,
    SymRegConfig,
    SymRegResult,
    anneal_accept,
    fitness,
    mutate,
    optimize_constants,
    random_tree,
    replace_oldest,
    run,
    tournament_select,
)

__all__ = [
    "OPERATOR_SETS",
    "Binary",
    "Const",
    "Expr",
    "OperatorSet",
    "ParseError",
    "Unary",
    "Var",
    "canonical_key",
    "complexity",
    "eval_batch",
    "eval_tree",
    "format_expr",
    "parse_expr",
    "simplify",
    "Individual",
    "SymRegConfig",
    "SymRegResult",
    "anneal_accept",
    "fitness",
    "mutate",
    "optimize_constants",
    "random_tree",
    "replace_oldest",
    "run",
    "tournament_select",
]
