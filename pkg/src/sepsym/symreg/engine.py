"""Multi-population evolutionary search over expression trees.

Each population runs an asynchronous steady-state loop: tournament-select a
parent with geometric acceptance, mutate it, accept or reject the child by
simulated annealing on the fitness change, and insert accepted children over
the eldest member.  Populations are fully independent (separate random
streams, no migration) and their Pareto fronts are merged deterministically
at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from ..core import Dataset, SeededRng
from .tree import (
    OPERATOR_SETS,
    Binary,
    Const,
    Expr,
    OperatorSet,
    Unary,
    Var,
    compile_with_constants,
    complexity,
    constants_of,
    count_constants,
    eval_cols,
    format_expr,
    replace_constants,
    simplify,
)

__all__ = [
    "Individual",
    "SymRegConfig",
    "SymRegResult",
    "fitness",
    "random_tree",
    "mutate",
    "tournament_select",
    "anneal_accept",
    "replace_oldest",
    "optimize_constants",
    "run",
]


@dataclass
class Individual:
    tree: Expr
    fitness: float
    age: int  # birth tick; strictly increasing within a population


@dataclass(frozen=True)
class SymRegConfig:
    """Evolution hyperparameters.

    ``anneal_alpha`` is expressed in units of the target variance; the
    effective temperature scale used on raw fitness differences is
    ``anneal_alpha * var(y) * anneal_temp``.  ``parsimony=None`` resolves to
    1e-4 * var(y) at run time.
    """

    n_populations: int = 8
    population_size: int = 100
    generations: int = 100
    tournament_size: int = 10
    acceptance_prob: float = 0.9
    anneal_alpha: float = 0.05
    anneal_temp: float = 0.3
    parsimony: float | None = None
    max_complexity: int = 25
    operator_set: str = "c"
    const_opt_every: int = 10
    const_opt_budget: int = 200
    const_opt_prob: float = 0.2  # chance of polishing any freshly mutated child
    early_stop_loss: float | None = None  # stop a population once its champion MSE dips below
    seed: int = 0

    def __post_init__(self):
        if self.tournament_size > self.population_size:
            raise ValueError("tournament_size cannot exceed population_size")
        if self.max_complexity < 3:
            raise ValueError("max_complexity must be at least 3")
        if not (0.0 < self.acceptance_prob <= 1.0):
            raise ValueError("acceptance_prob must be in (0, 1]")
        if self.anneal_alpha <= 0.0 or not (0.0 <= self.anneal_temp <= 1.0):
            raise ValueError("need anneal_alpha > 0 and anneal_temp in [0, 1]")
        if self.operator_set not in OPERATOR_SETS:
            raise ValueError(f"unknown operator set {self.operator_set!r}")


@dataclass
class SymRegResult:
    front: list[tuple[int, float, Expr]]  # (complexity, fitness, tree)
    best: Expr
    best_fitness: float
    pop_stats: list[dict] = field(default_factory=list)

    def front_lines(self) -> list[str]:
        return [
            f"{c:4d}  {f:.10e}  {format_expr(t)}" for c, f, t in self.front
        ]


# ---------------------------------------------------------------------------
# Fitness
# ---------------------------------------------------------------------------


def fitness(tree: Expr, data: Dataset, parsimony: float = 0.0) -> float:
    """MSE over the dataset plus a complexity penalty; +inf whenever any
    sample evaluates non-finite."""
    cols = [np.ascontiguousarray(data.X[:, i]) for i in range(data.dim)]
    return _fitness_cols(tree, cols, data.y, data.n, parsimony)


def _fitness_cols(tree, cols, y, n, parsimony):
    pred = eval_cols(tree, cols, n)
    with np.errstate(all="ignore"):
        err = pred - y
        mse = float(np.dot(err, err)) / n
    if not math.isfinite(mse):
        return math.inf
    return mse + parsimony * tree.complexity


# ---------------------------------------------------------------------------
# Random trees and mutation
# ---------------------------------------------------------------------------


def _random_leaf(opset, dim, rng: SeededRng) -> Expr:
    if rng.random() < 0.6:
        return Var(int(rng.integers(dim)))
    return Const(float(rng.uniform(-2.0, 2.0)))


def random_tree(opset: OperatorSet, dim: int, rng: SeededRng, max_depth: int = 3) -> Expr:
    """Grow-style random tree of depth at most ``max_depth``."""
    if max_depth <= 0 or rng.random() < 0.3:
        return _random_leaf(opset, dim, rng)
    if opset.unary and rng.random() < 0.25:
        return Unary(rng.choice(opset.unary), random_tree(opset, dim, rng, max_depth - 1))
    return Binary(
        rng.choice(opset.binary),
        random_tree(opset, dim, rng, max_depth - 1),
        random_tree(opset, dim, rng, max_depth - 1),
    )


def _nth_node(tree: Expr, n: int) -> Expr:
    """Preorder node lookup."""
    stack = [tree]
    i = 0
    while stack:
        node = stack.pop()
        if i == n:
            return node
        i += 1
        kind = type(node)
        if kind is Unary:
            stack.append(node.child)
        elif kind is Binary:
            stack.append(node.right)
            stack.append(node.left)
    raise IndexError(n)


def _replace_nth(tree: Expr, n: int, repl) -> Expr:
    """Rebuild with node ``n`` (preorder) replaced by ``repl(node)``."""

    def walk(node, i):
        if i == n:
            return repl(node), i + node.complexity
        kind = type(node)
        if kind is Const or kind is Var:
            return node, i + 1
        if kind is Unary:
            child, j = walk(node.child, i + 1)
            if child is node.child:
                return node, j
            return Unary(node.fn, child), j
        left, j = walk(node.left, i + 1)
        right, j2 = walk(node.right, j)
        if left is node.left and right is node.right:
            return node, j2
        return Binary(node.op, left, right), j2

    out, _ = walk(tree, 0)
    return out


_MUTATIONS = (
    ("perturb", 0.18),
    ("symbol", 0.22),
    ("insert", 0.25),
    ("delete", 0.12),
    ("subtree", 0.18),
    ("swap", 0.05),
)
_MUT_NAMES = tuple(m[0] for m in _MUTATIONS)
_MUT_CUM = np.cumsum([m[1] for m in _MUTATIONS]) / sum(m[1] for m in _MUTATIONS)


def _collect(tree: Expr, pred) -> list[int]:
    """Preorder indices of nodes satisfying ``pred``."""
    out = []
    stack = [tree]
    i = 0
    # preorder with explicit stack, mirroring _nth_node
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        kind = type(node)
        if kind is Unary:
            stack.append(node.child)
        elif kind is Binary:
            stack.append(node.right)
            stack.append(node.left)
    for i, node in enumerate(nodes):
        if pred(node):
            out.append(i)
    return out


def _mutate_once(tree: Expr, opset: OperatorSet, dim: int, rng: SeededRng) -> Expr:
    kind = _MUT_NAMES[int(np.searchsorted(_MUT_CUM, rng.random()))]
    size = tree.complexity

    if kind == "perturb":
        targets = _collect(tree, lambda nd: type(nd) is Const)
        if not targets:
            return tree
        n = rng.choice(targets)

        def bump(node):
            c = node.value
            if abs(c) < 1e-12:
                return Const(float(rng.normal(0.0, 1.0)))
            c = c * math.exp(float(rng.normal(0.0, 0.4)))
            if rng.random() < 0.1:
                c = -c
            return Const(c)

        return _replace_nth(tree, n, bump)

    if kind == "symbol":
        n = int(rng.integers(size))

        def swap_symbol(node):
            k = type(node)
            if k is Binary:
                choices = [o for o in opset.binary if o != node.op]
                if not choices:
                    return node
                return Binary(rng.choice(choices), node.left, node.right)
            if k is Unary:
                choices = [f for f in opset.unary if f != node.fn]
                if not choices:
                    return node
                return Unary(rng.choice(choices), node.child)
            if k is Var and dim > 1:
                return Var(int(rng.integers(dim)))
            return node

        return _replace_nth(tree, n, swap_symbol)

    if kind == "insert":
        n = int(rng.integers(size))
        roll = rng.random()

        def wrap(node):
            if opset.unary and roll < 0.25:
                return Unary(rng.choice(opset.unary), node)
            op = rng.choice(opset.binary)
            # New operand is occasionally a shallow subtree, so shapes like
            # x/(x - c) can arise in a single edit.
            arm = _random_leaf(opset, dim, rng) if rng.random() < 0.6 else random_tree(
                opset, dim, rng, 1
            )
            if roll < 0.62:
                return Binary(op, node, arm)
            return Binary(op, arm, node)

        return _replace_nth(tree, n, wrap)

    if kind == "delete":
        targets = _collect(tree, lambda nd: type(nd) in (Unary, Binary))
        if not targets:
            return tree  # minimal tree: nothing to delete
        n = rng.choice(targets)
        return _replace_nth(tree, n, lambda node: _random_leaf(opset, dim, rng))

    if kind == "subtree":
        n = int(rng.integers(size))
        return _replace_nth(tree, n, lambda node: random_tree(opset, dim, rng, 2))

    # swap operands
    targets = _collect(tree, lambda nd: type(nd) is Binary)
    if not targets:
        return tree
    n = rng.choice(targets)
    return _replace_nth(tree, n, lambda node: Binary(node.op, node.right, node.left))


def mutate(tree: Expr, opset: OperatorSet, rng: SeededRng, max_complexity: int, dim: int | None = None) -> Expr:
    """One random structural edit, retried up to 16 times to stay within the
    complexity budget; falls back to the unchanged input."""
    if dim is None:
        dim = max([0] + [nd.index for nd in _walk(tree) if type(nd) is Var]) + 1
    for _ in range(16):
        child = _mutate_once(tree, opset, dim, rng)
        if child.complexity <= max_complexity:
            return child
    return tree


def _walk(tree: Expr):
    stack = [tree]
    while stack:
        node = stack.pop()
        yield node
        kind = type(node)
        if kind is Unary:
            stack.append(node.child)
        elif kind is Binary:
            stack.append(node.right)
            stack.append(node.left)


# ---------------------------------------------------------------------------
# Selection, annealing, replacement
# ---------------------------------------------------------------------------


def tournament_select(pop: list[Individual], k: int, p: float, rng: SeededRng) -> int:
    """Sample k distinct members, sort by fitness, walk the list accepting
    each with probability p; the last contender wins by default."""
    n = len(pop)
    if k > n:
        raise ValueError("tournament larger than population")
    # Rejection sampling of distinct indices beats a full permutation for k << n.
    picks: list[int] = []
    seen = set()
    while len(picks) < k:
        i = int(rng.integers(n))
        if i not in seen:
            seen.add(i)
            picks.append(i)
    order = sorted(picks, key=lambda i: (pop[i].fitness, i))
    for i in order[:-1]:
        if rng.random() < p:
            return int(i)
    return int(order[-1])


def anneal_accept(l_old: float, l_new: float, alpha: float, temp: float, rng: SeededRng) -> bool:
    """Metropolis rule on the fitness change: improvements always pass,
    degradations pass with probability exp(-(l_new - l_old) / (alpha*temp))."""
    if l_new <= l_old:
        return True
    if temp <= 0.0 or not math.isfinite(l_new):
        return False
    return rng.random() < math.exp(-(l_new - l_old) / (alpha * temp))


def replace_oldest(pop: list[Individual], newcomer: Individual) -> None:
    """Evict the member with the smallest birth tick (age-regularized)."""
    oldest = min(range(len(pop)), key=lambda i: pop[i].age)
    pop[oldest] = newcomer


# ---------------------------------------------------------------------------
# Constant optimization
# ---------------------------------------------------------------------------


def _const_problem(tree, cols, y, n):
    fn, n_consts = compile_with_constants(tree)

    def predict(vec):
        with np.errstate(all="ignore"):
            return np.broadcast_to(fn(cols, vec), (n,))

    def loss(vec):
        with np.errstate(all="ignore"):
            err = predict(vec) - y
            mse = float(np.dot(err, err)) / n
        return mse if math.isfinite(mse) else math.inf

    return predict, loss, n_consts


def _polish_lm(tree, cols, y, n, budget, rng=None):
    """Damped least-squares polish of the constants, with a few random
    restarts when the initial point trips an evaluation guard (poles)."""
    if count_constants(tree) == 0:
        return tree
    predict, loss, n_consts = _const_problem(tree, cols, y, n)
    if n < n_consts:
        return tree
    x0 = np.array(constants_of(tree))
    best_vec, best_loss = x0, loss(x0)
    starts = []
    if math.isfinite(best_loss):
        starts.append(x0)
    elif rng is not None:
        x_scale = max(1.0, *(float(np.max(np.abs(c))) for c in cols))
        for _ in range(6):
            trial = rng.normal(0.0, 1.0, n_consts) * x_scale
            if math.isfinite(loss(trial)):
                starts.append(trial)
                if len(starts) >= 2:
                    break
    for start in starts:
        try:
            res = least_squares(
                lambda v: predict(v) - y, start, method="lm", max_nfev=budget
            )
        except (ValueError, FloatingPointError):
            continue
        cand = loss(res.x)
        if cand < best_loss:
            best_vec, best_loss = res.x, cand
    if best_vec is x0:
        return tree
    return replace_constants(tree, best_vec)


def _optimize_nm_cols(tree, cols, y, n, budget, parsimony):
    if count_constants(tree) == 0:
        return tree
    _, loss, _ = _const_problem(tree, cols, y, n)
    x0 = np.array(constants_of(tree))

    def objective(vec):
        f = loss(vec) + parsimony * tree.complexity
        return f if math.isfinite(f) else 1e300

    base = objective(x0)
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={"maxfev": budget, "xatol": 1e-10, "fatol": 1e-14},
    )
    if res.fun < base:
        return replace_constants(tree, res.x)
    return tree


def optimize_constants(tree: Expr, data: Dataset, budget: int = 200, parsimony: float = 0.0) -> Expr:
    """Polish all constants with a bounded derivative-free simplex search;
    returns the better of (input, polished)."""
    cols = [np.ascontiguousarray(data.X[:, i]) for i in range(data.dim)]
    return _optimize_nm_cols(tree, cols, data.y, data.n, budget, parsimony)


# ---------------------------------------------------------------------------
# The evolutionary loop
# ---------------------------------------------------------------------------


class _Front:
    """Best fitness seen at each complexity level."""

    def __init__(self):
        self.by_complexity: dict[int, tuple[float, Expr]] = {}

    def offer(self, tree: Expr, fit: float) -> None:
        if not math.isfinite(fit):
            return
        c = tree.complexity
        cur = self.by_complexity.get(c)
        if cur is None or fit < cur[0]:
            self.by_complexity[c] = (fit, tree)

    def merged(self, other: "_Front") -> None:
        for c, (f, t) in sorted(other.by_complexity.items()):
            self.offer(t, f)

    def pareto(self) -> list[tuple[int, float, Expr]]:
        out = []
        best = math.inf
        for c in sorted(self.by_complexity):
            f, t = self.by_complexity[c]
            if f < best:
                out.append((c, f, t))
                best = f
        return out


def _evolve_population(
    data_cols, y, n, dim, config: SymRegConfig, parsimony: float, alpha_eff: float, rng: SeededRng
):
    opset = OPERATOR_SETS[config.operator_set]
    N = config.population_size
    pop = []
    front = _Front()
    for tick in range(N):
        tree = random_tree(opset, dim, rng, 3)
        while tree.complexity > config.max_complexity:
            tree = random_tree(opset, dim, rng, 3)
        fit = _fitness_cols(tree, data_cols, y, n, parsimony)
        pop.append(Individual(tree, fit, tick))
        front.offer(tree, fit)
    tick = N
    evaluations = N
    best_mse = math.inf
    for gen in range(config.generations):
        for _ in range(N):
            parent = pop[
                tournament_select(pop, config.tournament_size, config.acceptance_prob, rng)
            ]
            child = mutate(parent.tree, opset, rng, config.max_complexity, dim)
            if config.const_opt_prob > 0.0 and rng.random() < config.const_opt_prob:
                child = _polish_lm(child, data_cols, y, n, 60, rng)
            fit = _fitness_cols(child, data_cols, y, n, parsimony)
            evaluations += 1
            front.offer(child, fit)
            if anneal_accept(parent.fitness, fit, alpha_eff, config.anneal_temp, rng):
                slim = simplify(child)
                if slim.complexity < child.complexity:
                    sfit = _fitness_cols(slim, data_cols, y, n, parsimony)
                    if sfit <= fit:
                        child, fit = slim, sfit
                        front.offer(child, fit)
                replace_oldest(pop, Individual(child, fit, tick))
                tick += 1
                if fit - parsimony * child.complexity < best_mse:
                    best_mse = fit - parsimony * child.complexity
        if config.const_opt_every > 0 and (gen + 1) % config.const_opt_every == 0:
            champ_i = min(range(N), key=lambda i: (pop[i].fitness, pop[i].age))
            champ = pop[champ_i]
            slim = simplify(champ.tree)
            polished = _optimize_nm_cols(
                slim, data_cols, y, n, config.const_opt_budget, parsimony
            )
            fit = _fitness_cols(polished, data_cols, y, n, parsimony)
            front.offer(polished, fit)
            if fit <= champ.fitness:
                pop[champ_i] = Individual(polished, fit, champ.age)
                best_mse = min(best_mse, fit - parsimony * polished.complexity)
        if config.early_stop_loss is not None and best_mse <= config.early_stop_loss:
            break
    best = min(pop, key=lambda ind: (ind.fitness, ind.age))
    stats = {
        "best_fitness": best.fitness,
        "evaluations": evaluations,
        "mean_fitness": float(
            np.mean([i.fitness for i in pop if math.isfinite(i.fitness)] or [math.inf])
        ),
    }
    return front, stats


def run(data: Dataset, config: SymRegConfig) -> SymRegResult:
    """Evolve ``n_populations`` independent populations and merge their
    Pareto fronts; front entries get a final simplify + constant polish.

    Deterministic for fixed (data, config): every population draws from its
    own seeded stream and the merge folds in population-index order.
    """
    rng = SeededRng(config.seed, 0).child("symreg")
    var_y = float(np.var(data.y))
    scale = var_y if var_y > 0 else 1.0
    parsimony = config.parsimony if config.parsimony is not None else 1e-4 * scale
    alpha_eff = config.anneal_alpha * scale
    cols = [np.ascontiguousarray(data.X[:, i]) for i in range(data.dim)]

    front = _Front()
    stats = []
    for p in range(config.n_populations):
        pf, st = _evolve_population(
            cols, data.y, data.n, data.dim, config, parsimony, alpha_eff, rng.child(("pop", p))
        )
        front.merged(pf)
        stats.append(st)

    # Final polish pass over the merged front.
    polish_rng = rng.child("polish")
    polished = _Front()
    for c, f, tree in front.pareto():
        slim = simplify(tree)
        best = _polish_lm(
            slim, cols, data.y, data.n, config.const_opt_budget, polish_rng
        )
        polished.offer(best, _fitness_cols(best, cols, data.y, data.n, parsimony))
        polished.offer(tree, f)
    pareto = polished.pareto()
    if not pareto:
        raise RuntimeError("symbolic regression produced only non-finite fitness trees")
    best_c, best_f, best_tree = min(pareto, key=lambda e: (e[1], e[0]))
    return SymRegResult(front=pareto, best=best_tree, best_fitness=best_f, pop_stats=stats)
