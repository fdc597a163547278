"""Expression trees: evaluation, formatting, parsing and simplification.

Trees are immutable; every structural edit builds new nodes.  Evaluation is
vectorized over sample arrays and never raises on bad arithmetic: guarded
division, logs of non-positive values and overflow all produce non-finite
values that poison the fitness instead of faulting.
"""

from __future__ import annotations

import math
import re

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "OperatorSet",
    "OPERATOR_SETS",
    "eval_tree",
    "eval_batch",
    "complexity",
    "format_expr",
    "parse_expr",
    "ParseError",
    "simplify",
    "canonical_key",
    "count_constants",
    "replace_constants",
    "constants_of",
]

DIV_FLOOR = 1e-12

BINARY_OPS = ("+", "-", "*", "/", "^")
UNARY_FNS = ("square", "exp", "sin", "cos", "log")


class Expr:
    """Base node.  ``complexity`` (node count) is cached at construction."""

    __slots__ = ("complexity",)


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)
        self.complexity = 1

    def __repr__(self):
        return f"Const({self.value!r})"


class Var(Expr):
    __slots__ = ("index",)

    def __init__(self, index: int):
        if index < 0:
            raise ValueError("variable index must be nonnegative")
        self.index = int(index)
        self.complexity = 1

    def __repr__(self):
        return f"Var({self.index})"


class Unary(Expr):
    __slots__ = ("fn", "child")

    def __init__(self, fn: str, child: Expr):
        if fn not in UNARY_FNS:
            raise ValueError(f"unknown function {fn!r}")
        self.fn = fn
        self.child = child
        self.complexity = 1 + child.complexity

    def __repr__(self):
        return f"Unary({self.fn!r}, {self.child!r})"


class Binary(Expr):
    __slots__ = ("op", "left", "right")

    def __init__(self, op: str, left: Expr, right: Expr):
        if op not in BINARY_OPS:
            raise ValueError(f"unknown operator {op!r}")
        self.op = op
        self.left = left
        self.right = right
        self.complexity = 1 + left.complexity + right.complexity

    def __repr__(self):
        return f"Binary({self.op!r}, {self.left!r}, {self.right!r})"


class OperatorSet:
    """Named dictionary of the operators evolution may draw from."""

    def __init__(self, set_id: str, binary: tuple, unary: tuple):
        if not binary:
            raise ValueError("operator set needs at least one binary op")
        self.id = set_id
        self.binary = tuple(binary)
        self.unary = tuple(unary)


_ARITH = ("+", "-", "*", "/")
OPERATOR_SETS = {
    "a": OperatorSet("a", _ARITH, ("square",)),
    "b": OperatorSet("b", _ARITH, ("square", "exp")),
    "c": OperatorSet("c", _ARITH, ("square", "exp", "sin", "cos")),
    "full": OperatorSet("full", _ARITH, ("square", "exp", "sin", "cos", "log")),
}


def complexity(tree: Expr) -> int:
    """Total node count (constants and variables count one each)."""
    return tree.complexity


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _eval(tree: Expr, cols):
    kind = type(tree)
    if kind is Const:
        return np.float64(tree.value)
    if kind is Var:
        return cols[tree.index]
    if kind is Binary:
        a = _eval(tree.left, cols)
        b = _eval(tree.right, cols)
        op = tree.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            out = a / np.where(np.abs(b) < DIV_FLOOR, np.nan, b)
            return out
        # '^'
        return np.power(a, b)
    a = _eval(tree.child, cols)
    fn = tree.fn
    if fn == "square":
        return a * a
    if fn == "exp":
        return np.exp(a)
    if fn == "sin":
        return np.sin(a)
    if fn == "cos":
        return np.cos(a)
    # 'log': non-positive arguments poison the result
    return np.log(np.where(a > 0.0, a, np.nan))


def eval_batch(tree: Expr, X: np.ndarray) -> np.ndarray:
    """Evaluate over samples X (n, dim); returns (n,) with non-finite markers
    wherever a guard tripped."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [np.ascontiguousarray(X[:, i]) for i in range(X.shape[1])]
    with np.errstate(all="ignore"):
        out = _eval(tree, cols)
    return np.broadcast_to(out, (X.shape[0],)).astype(float, copy=False)


def eval_cols(tree: Expr, cols, n: int) -> np.ndarray:
    """Hot-path variant of :func:`eval_batch` on pre-split columns."""
    with np.errstate(all="ignore"):
        out = _eval(tree, cols)
    return np.broadcast_to(out, (n,))


def eval_tree(tree: Expr, x) -> float:
    """Evaluate at a single point (sequence of variable values)."""
    return float(eval_batch(tree, np.atleast_2d(np.asarray(x, dtype=float)))[0])


def compile_with_constants(tree: Expr):
    """Closure evaluator with the constants lifted out as a parameter vector
    (preorder), so optimizers can re-evaluate without rebuilding the tree.

    Returns ``(fn, n_constants)`` with ``fn(cols, consts) -> values``.
    """
    counter = 0

    def build(node):
        nonlocal counter
        kind = type(node)
        if kind is Const:
            i = counter
            counter += 1
            return lambda cols, c: c[i]
        if kind is Var:
            idx = node.index
            return lambda cols, c: cols[idx]
        if kind is Unary:
            g = build(node.child)
            fn = node.fn
            if fn == "square":
                def _sq(cols, c, g=g):
                    a = g(cols, c)
                    return a * a
                return _sq
            ufunc = {"exp": np.exp, "sin": np.sin, "cos": np.cos}.get(fn)
            if ufunc is not None:
                return lambda cols, c, g=g, u=ufunc: u(g(cols, c))

            def _log(cols, c, g=g):
                a = g(cols, c)
                return np.log(np.where(a > 0.0, a, np.nan))

            return _log
        gl = build(node.left)
        gr = build(node.right)
        op = node.op
        if op == "+":
            return lambda cols, c: gl(cols, c) + gr(cols, c)
        if op == "-":
            return lambda cols, c: gl(cols, c) - gr(cols, c)
        if op == "*":
            return lambda cols, c: gl(cols, c) * gr(cols, c)
        if op == "/":
            def _div(cols, c, gl=gl, gr=gr):
                b = gr(cols, c)
                return gl(cols, c) / np.where(np.abs(b) < DIV_FLOOR, np.nan, b)
            return _div

        def _pow(cols, c, gl=gl, gr=gr):
            return np.power(gl(cols, c), gr(cols, c))

        return _pow

    fn = build(tree)
    return fn, counter


# ---------------------------------------------------------------------------
# Formatting / parsing
# ---------------------------------------------------------------------------


def _fmt_const(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def format_expr(tree: Expr) -> str:
    """Fully parenthesized infix text; inverse of :func:`parse_expr`."""
    kind = type(tree)
    if kind is Const:
        return _fmt_const(tree.value)
    if kind is Var:
        return f"x{tree.index + 1}"
    if kind is Unary:
        return f"{tree.fn}({format_expr(tree.child)})"
    return f"({format_expr(tree.left)} {tree.op} {format_expr(tree.right)})"


class ParseError(ValueError):
    """Expression text error, annotated with position and expectation."""


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"position {pos}: unexpected character {text[pos]!r}")
        tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, dim: int):
        self.text = text
        self.dim = dim
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise ParseError(f"position {pos}: expected {value!r}, got {val or 'end of input'!r}")

    def parse(self) -> Expr:
        tree = self.expr(0)
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"position {pos}: expected end of input, got {val!r}")
        return tree

    # precedence-climbing: + - (10)  * / (20)  ^ (30, right-assoc)
    _PREC = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}

    def expr(self, min_prec: int) -> Expr:
        left = self.atom()
        while True:
            kind, val, _ = self.peek()
            prec = self._PREC.get(val)
            if kind != "op" or prec is None or prec < min_prec:
                return left
            self.take()
            right = self.expr(prec + (0 if val == "^" else 1))
            left = Binary(val, left, right)

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if val == "(":
            inner = self.expr(0)
            self.expect(")")
            return inner
        if val == "-":
            inner = self.atom()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return Binary("-", Const(0.0), inner)
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            if val in ("nan", "inf"):
                return Const(float(val))
            if val in UNARY_FNS:
                self.expect("(")
                inner = self.expr(0)
                self.expect(")")
                return Unary(val, inner)
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                idx = int(m.group(1)) - 1
                if not (0 <= idx < self.dim):
                    raise ParseError(
                        f"position {pos}: variable {val} out of range for dim {self.dim}"
                    )
                return Var(idx)
            raise ParseError(f"position {pos}: unknown name {val!r}")
        raise ParseError(
            f"position {pos}: expected number, name or '(', got {val or 'end of input'!r}"
        )


def parse_expr(text: str, dim: int) -> Expr:
    """Parse infix expression text over variables x1..x<dim>."""
    return _Parser(text, dim).parse()


# ---------------------------------------------------------------------------
# Simplification
# ---------------------------------------------------------------------------


def _has_guard(tree: Expr) -> bool:
    """True if any evaluation path can produce a non-finite marker."""
    kind = type(tree)
    if kind is Const:
        return not math.isfinite(tree.value)
    if kind is Var:
        return False
    if kind is Unary:
        return tree.fn == "log" or _has_guard(tree.child)
    return tree.op in ("/", "^") or _has_guard(tree.left) or _has_guard(tree.right)


def _fold(tree: Expr) -> Expr:
    if isinstance(tree, Binary) and isinstance(tree.left, Const) and isinstance(tree.right, Const):
        return Const(eval_tree(tree, np.zeros((1, 1))))
    if isinstance(tree, Unary) and isinstance(tree.child, Const):
        return Const(eval_tree(tree, np.zeros((1, 1))))
    return tree


def _is_const(tree: Expr, v: float) -> bool:
    return isinstance(tree, Const) and tree.value == v


def simplify(tree: Expr) -> Expr:
    """Constant folding plus identity elimination; never grows the tree and
    preserves values at guard-free points."""
    kind = type(tree)
    if kind is Const or kind is Var:
        return tree
    if kind is Unary:
        return _fold(Unary(tree.fn, simplify(tree.child)))
    left = simplify(tree.left)
    right = simplify(tree.right)
    op = tree.op
    if op == "+":
        if _is_const(left, 0.0):
            return right
        if _is_const(right, 0.0):
            return left
    elif op == "-":
        if _is_const(right, 0.0):
            return left
        # double negation: 0 - (0 - x) -> x
        if (
            _is_const(left, 0.0)
            and isinstance(right, Binary)
            and right.op == "-"
            and _is_const(right.left, 0.0)
        ):
            return right.right
    elif op == "*":
        if _is_const(left, 1.0):
            return right
        if _is_const(right, 1.0):
            return left
        if (_is_const(left, 0.0) and not _has_guard(right)) or (
            _is_const(right, 0.0) and not _has_guard(left)
        ):
            return Const(0.0)
    elif op == "/":
        if _is_const(right, 1.0):
            return left
    return _fold(Binary(op, left, right))


def canonical_key(tree: Expr, decimals: int = 3) -> str:
    """Canonical text with sorted commutative operands and rounded constants;
    used for reporting and deduplication, not for evaluation."""
    t = simplify(tree)

    def flat(node, op):
        if isinstance(node, Binary) and node.op == op:
            return flat(node.left, op) + flat(node.right, op)
        return [key(node)]

    def key(node):
        kind = type(node)
        if kind is Const:
            return f"{round(node.value, decimals):g}"
        if kind is Var:
            return f"x{node.index + 1}"
        if kind is Unary:
            return f"{node.fn}({key(node.child)})"
        if node.op in ("+", "*"):
            return "(" + f" {node.op} ".join(sorted(flat(node, node.op))) + ")"
        return f"({key(node.left)} {node.op} {key(node.right)})"

    return key(t)


# ---------------------------------------------------------------------------
# Constant plumbing (used by the optimizer)
# ---------------------------------------------------------------------------


def count_constants(tree: Expr) -> int:
    kind = type(tree)
    if kind is Const:
        return 1
    if kind is Var:
        return 0
    if kind is Unary:
        return count_constants(tree.child)
    return count_constants(tree.left) + count_constants(tree.right)


def constants_of(tree: Expr) -> list[float]:
    out: list[float] = []

    def walk(node):
        kind = type(node)
        if kind is Const:
            out.append(node.value)
        elif kind is Unary:
            walk(node.child)
        elif kind is Binary:
            walk(node.left)
            walk(node.right)

    walk(tree)
    return out


def replace_constants(tree: Expr, values) -> Expr:
    """Rebuild ``tree`` with constants replaced in preorder."""
    it = iter(values)

    def walk(node):
        kind = type(node)
        if kind is Const:
            return Const(next(it))
        if kind is Var:
            return node
        if kind is Unary:
            return Unary(node.fn, walk(node.child))
        return Binary(node.op, walk(node.left), walk(node.right))

    return walk(tree)
