"""Datasets, domains, error metrics, configuration and seeded randomness.

Everything downstream (surrogate fitting, separability scoring, sampling,
symbolic regression) builds on the types in this module.  All types are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "AffineMap",
    "MetricsReport",
    "RunConfig",
    "SeededRng",
    "compute_metrics",
    "split_dataset",
    "load_csv",
    "save_csv",
    "normalize",
    "denormalize",
]

# |truth| below this floor is excluded from the relative-error average.
RE_FLOOR = 1e-12


class DataError(ValueError):
    """Malformed dataset, file, or configuration input."""


@dataclass(frozen=True)
class Dataset:
    """Input-output samples (x in R^dim, y scalar) with per-dimension bounds.

    Parameters
    ----------
    X : ndarray, shape (n, dim)
    y : ndarray, shape (n,)
    domain : ndarray, shape (dim, 2)
        Closed interval [lo, hi] per input dimension.  Defaults to the
        bounding box of ``X``.
    """

    X: np.ndarray
    y: np.ndarray
    domain: np.ndarray = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[0] < 1:
            raise DataError("dataset needs at least one sample")
        if self.domain is None:
            dom = np.column_stack([X.min(axis=0), X.max(axis=0)])
        else:
            dom = np.asarray(self.domain, dtype=float).reshape(X.shape[1], 2)
            lo, hi = dom[:, 0], dom[:, 1]
            if np.any(hi < lo):
                raise DataError("domain upper bounds below lower bounds")
            eps = 1e-9 * np.maximum(1.0, np.abs(dom).max())
            if np.any(X < lo - eps) or np.any(X > hi + eps):
                raise DataError("samples fall outside the stated domain")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "domain", dom)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.domain)


@dataclass(frozen=True)
class AffineMap:
    """Invertible per-dimension affine map used for unit normalization.

    Forward: t_i = (x_i - x_lo_i) / x_width_i,  s = (y - y_lo) / y_width.
    """

    x_lo: np.ndarray
    x_width: np.ndarray
    y_lo: float
    y_width: float

    def __post_init__(self):
        object.__setattr__(self, "x_lo", np.asarray(self.x_lo, dtype=float).ravel())
        object.__setattr__(self, "x_width", np.asarray(self.x_width, dtype=float).ravel())
        if np.any(self.x_width == 0.0) or self.y_width == 0.0:
            raise DataError("affine map needs nonzero widths")

    def forward_x(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_lo) / self.x_width

    def inverse_x(self, T: np.ndarray) -> np.ndarray:
        return np.asarray(T, dtype=float) * self.x_width + self.x_lo

    def forward_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_lo) / self.y_width

    def inverse_y(self, s):
        return np.asarray(s, dtype=float) * self.y_width + self.y_lo


@dataclass(frozen=True)
class MetricsReport:
    """Standard fit metrics: MSE, RMSE, max absolute error, mean relative
    error and the coefficient of determination."""

    mse: float
    rmse: float
    maxae: float
    re: float
    r2: float
    re_valid: bool = True
    re_excluded: int = 0

    def lines(self) -> list[str]:
        out = [
            f"mse {self.mse:.17g}",
            f"rmse {self.rmse:.17g}",
            f"maxae {self.maxae:.17g}",
        ]
        if self.re_valid:
            out.append(f"re {self.re:.17g}")
        else:
            out.append("re undefined")
        out.append(f"r2 {self.r2:.17g}")
        return out


def compute_metrics(pred, truth) -> MetricsReport:
    """Error metrics of ``pred`` against ``truth``.

    The relative error skips samples with |truth| < 1e-12; if every sample
    is skipped the RE field is flagged undefined instead of raising.
    """
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise DataError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    if pred.size == 0:
        raise DataError("empty input")
    err = pred - truth
    mse = float(np.mean(err**2))
    rmse = math.sqrt(mse)
    maxae = float(np.max(np.abs(err)))
    ok = np.abs(truth) >= RE_FLOOR
    excluded = int(np.sum(~ok))
    if np.any(ok):
        re = float(np.mean(np.abs(err[ok]) / np.abs(truth[ok])))
        re_valid = True
    else:
        re, re_valid = math.nan, False
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    ss_res = float(np.sum(err**2))
    if ss_tot > 0.0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0.0 else -math.inf
    return MetricsReport(mse, rmse, maxae, re, r2, re_valid, excluded)


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def _mix_stream(stream: int, label) -> int:
    """Derive a child stream id from (stream, label), stable across runs."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(stream).to_bytes(8, "little", signed=False))
    h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Counter-based random stream keyed by (seed, stream id).

    Identical (seed, stream) pairs replay identical sequences, and distinct
    streams are statistically independent: drawing from one never perturbs
    another.  ``child(label)`` derives a new independent stream from a string
    or integer label, so nested components can carve out their own streams
    deterministically.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = (self.seed << 64) | self.stream
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label) -> "SeededRng":
        return SeededRng(self.seed, _mix_stream(self.stream, label))

    # Thin passthroughs keep call sites uniform.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, seq):
        return seq[int(self.gen.integers(len(seq)))]


# ---------------------------------------------------------------------------
# Splitting, normalization, CSV
# ---------------------------------------------------------------------------


def split_dataset(ds: Dataset, fractions, rng: SeededRng):
    """Disjoint (train, valid, test) partition with round-to-nearest sizes.

    Rounding leftovers go to the training split.  The shuffle is drawn from
    ``rng`` so identical seeds give identical partitions.
    """
    f_train, f_valid, f_test = (float(f) for f in fractions)
    if min(f_train, f_valid, f_test) <= 0.0:
        raise DataError("split fractions must be positive")
    if abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    if ds.n < 3:
        raise DataError("need at least 3 samples to split")
    n_valid = int(round(f_valid * ds.n))
    n_test = int(round(f_test * ds.n))
    n_train = ds.n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise DataError("split produces an empty part")
    perm = rng.permutation(ds.n)
    i1, i2 = n_train, n_train + n_valid
    return ds.subset(perm[:i1]), ds.subset(perm[i1:i2]), ds.subset(perm[i2:])


def normalize(ds: Dataset):
    """Map inputs onto [0,1] per dimension (by domain bounds) and y onto
    [0,1] by min-max.  Returns the rescaled dataset and the affine map that
    undoes it."""
    widths = ds.domain[:, 1] - ds.domain[:, 0]
    if np.any(widths == 0.0):
        raise DataError("constant input column: zero domain width")
    y_lo, y_hi = float(ds.y.min()), float(ds.y.max())
    if y_hi == y_lo:
        raise DataError("constant outputs: zero y range")
    amap = AffineMap(ds.domain[:, 0], widths, y_lo, y_hi - y_lo)
    unit_dom = np.column_stack([np.zeros(ds.dim), np.ones(ds.dim)])
    return Dataset(amap.forward_x(ds.X), amap.forward_y(ds.y), unit_dom), amap


def denormalize(ds: Dataset, amap: AffineMap) -> Dataset:
    """Inverse of :func:`normalize`."""
    X = amap.inverse_x(ds.X)
    dom = np.column_stack(
        [amap.inverse_x(ds.domain[:, 0]), amap.inverse_x(ds.domain[:, 1])]
    )
    return Dataset(X, amap.inverse_y(ds.y), dom)


def save_csv(ds: Dataset, path) -> None:
    """Write ``x1,...,xn,y`` rows with 17 significant digits (lossless for
    doubles)."""
    path = Path(path)
    cols = [f"x{i + 1}" for i in range(ds.dim)] + ["y"]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for xi, yi in zip(ds.X, ds.y):
            fh.write(",".join(f"{v:.17g}" for v in (*xi, yi)) + "\n")


def load_csv(path, domain=None) -> Dataset:
    """Read a dataset written by :func:`save_csv` (header ``x1,...,xn,y``)."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    n_x = len(header) - 1
    expected = [f"x{i + 1}" for i in range(n_x)] + ["y"]
    if n_x < 1 or header != expected:
        raise DataError(f"{path}: bad header {lines[0]!r}, expected x1,...,xn,y")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_x + 1:
            raise DataError(
                f"{path}:{lineno}: expected {n_x + 1} cells, got {len(cells)}"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, :n_x], arr[:, n_x], domain)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_AUTO = "auto"


@dataclass(frozen=True)
class RunConfig:
    """Flat configuration for the whole pipeline.

    Serialized as ``key = value`` lines with keys exactly equal to the field
    names below; ``parsimony`` may be the literal ``auto`` (scaled from the
    target variance at run time).
    """

    # surrogate
    modes: int = 4
    segments: int = 7
    patch_radius: int = 0
    dilation: float = 2.0
    poly_order: int = 1
    basis_family: str = "linear"  # linear | smoothed | enriched
    epochs: int = 2000
    learning_rate: float = 0.01
    patience: int = 200
    train_patch: bool = False
    # separability
    t_high: float = 0.95
    t_med: float = 0.60
    n_score_samples: int = 1024
    # sampling
    factor_grid_n: int = 128
    global_lhs: int = 512
    global_lps: int = 512
    lps_radius: float = 0.05
    lps_per_seed: int = 2
    # symbolic regression
    n_populations: int = 8
    population_size: int = 100
    generations: int = 100
    tournament_size: int = 10
    acceptance_prob: float = 0.9
    anneal_alpha: float = 0.05
    anneal_temp: float = 0.3
    parsimony: float | str = _AUTO
    max_complexity: int = 25
    operator_set: str = "c"
    const_opt_every: int = 10
    const_opt_budget: int = 200
    # splitting & dynamics
    train_frac: float = 0.7
    valid_frac: float = 0.15
    test_frac: float = 0.15
    dynamics_gate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.t_med <= self.t_high <= 1.0):
            raise DataError("need 0 <= t_med <= t_high <= 1")
        for name in (
            "modes",
            "segments",
            "epochs",
            "n_score_samples",
            "factor_grid_n",
            "n_populations",
            "population_size",
            "generations",
            "tournament_size",
            "max_complexity",
        ):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.patch_radius < 0 or self.poly_order < 0:
            raise DataError("patch_radius and poly_order must be nonnegative")
        if self.basis_family not in ("linear", "smoothed", "enriched"):
            raise DataError(f"unknown basis_family {self.basis_family!r}")
        if self.basis_family == "enriched" and self.patch_radius < 1:
            raise DataError("enriched basis needs patch_radius >= 1")
        if not (0.0 < self.acceptance_prob <= 1.0):
            raise DataError("acceptance_prob must be in (0, 1]")
        if self.anneal_alpha <= 0.0 or not (0.0 <= self.anneal_temp <= 1.0):
            raise DataError("need anneal_alpha > 0 and anneal_temp in [0, 1]")
        if self.parsimony != _AUTO and float(self.parsimony) < 0.0:
            raise DataError("parsimony must be nonnegative")
        if self.tournament_size > self.population_size:
            raise DataError("tournament_size cannot exceed population_size")
        if self.max_complexity < 3:
            raise DataError("max_complexity must be at least 3")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def save(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for f in dataclasses.fields(self):
                v = getattr(self, f.name)
                fh.write(f"{f.name} = {v}\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = stripped.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise DataError(f"{path}:{lineno}: unknown key {key!r}")
            kw[key] = _parse_value(fields[key].type, val, f"{path}:{lineno}")
        return cls(**kw)


def _parse_value(ftype: str, val: str, where: str):
    if ftype == "int":
        try:
            return int(val)
        except ValueError:
            raise DataError(f"{where}: expected integer, got {val!r}") from None
    if ftype == "float":
        try:
            return float(val)
        except ValueError:
            raise DataError(f"{where}: expected float, got {val!r}") from None
    if ftype == "bool":
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise DataError(f"{where}: expected bool, got {val!r}")
    if ftype.startswith("float | str"):
        if val == _AUTO:
            return _AUTO
        try:
            return float(val)
        except ValueError:
            raise DataError(f"{where}: expected float or 'auto', got {val!r}") from None
    return val
