"""Separable interpolating surrogate: sum of modes, each a product of 1D
nodal interpolants, trained by full-batch adaptive gradient descent.

The model is u(x) = sum_m prod_i f_mi(x_i) with f_mi(t) = sum_k N_ik(t) w_mik
on a per-dimension node grid over the unit cube; inputs are mapped to [0, 1]
by the stored affine map, so the public evaluate/gradient/hessian operate in
original units.  Curvature queries on the piecewise-linear family transparently
switch to the smoothed (cubic) family on the same grid and weights, since the
linear hats carry no second derivative.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import AffineMap, DataError, Dataset, RunConfig, SeededRng
from .basis import BasisError, ShapeSpec, build_basis, uniform_nodes

__all__ = [
    "SurrogateModel",
    "TrainReport",
    "TrainingError",
    "train",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "sepsym-model 1"


class TrainingError(RuntimeError):
    """Training diverged or could not start."""


class ModelIOError(ValueError):
    """Unreadable or version-mismatched model file."""


@dataclass
class TrainReport:
    epochs_run: int
    final_loss: float
    train_rmse: list[float]
    valid_rmse: list[float]
    wall_time: float
    n_params: int


class SurrogateModel:
    """Trained separable surrogate.  Immutable after construction."""

    def __init__(self, specs, weights, amap: AffineMap, family: str = "linear"):
        self.specs = list(specs)
        self.dim = len(self.specs)
        self.modes = len(weights)
        self.family = family
        self.weights = [
            [np.asarray(weights[m][i], dtype=float) for i in range(self.dim)]
            for m in range(self.modes)
        ]
        for m in range(self.modes):
            for i in range(self.dim):
                if self.weights[m][i].shape != (self.specs[i].n_nodes,):
                    raise DataError("weight tensor does not match node grid")
        self.amap = amap
        self.nodes = [uniform_nodes(s) for s in self.specs]
        self._basis = [build_basis(s, family) for s in self.specs]
        if family == "linear":
            self.curvature_family = "smoothed"
            self._curv = [build_basis(s, "smoothed") for s in self.specs]
        else:
            self.curvature_family = family
            self._curv = self._basis

    # -- normalized-coordinate internals ------------------------------------

    def _factors(self, T, bases, order=0):
        """Per-mode per-dim factor values (and derivatives) at unit-cube T.

        Returns arrays F[d][m, i, n]: value, then first/second derivative up
        to ``order``.
        """
        T = np.atleast_2d(np.asarray(T, dtype=float))
        n = T.shape[0]
        out = [np.empty((self.modes, self.dim, n)) for _ in range(order + 1)]
        for i in range(self.dim):
            idx, v0, v1, v2 = bases[i].rows(T[:, i])
            per_order = (v0, v1, v2)[: order + 1]
            for m in range(self.modes):
                w = self.weights[m][i][idx]
                for d, v in enumerate(per_order):
                    out[d][m, i] = (v * w).sum(axis=1)
        return out

    def eval_norm(self, T, family=None):
        bases = self._curv if family == "curvature" else self._basis
        (F,) = self._factors(T, bases, order=0)
        return F.prod(axis=1).sum(axis=0)

    def factor_norm(self, mode: int, dim: int, t, family=None):
        """f_mi(t) on the unit interval (normalized coordinates)."""
        if not (0 <= mode < self.modes and 0 <= dim < self.dim):
            raise IndexError("mode or dimension out of range")
        bases = self._curv if family == "curvature" else self._basis
        idx, v0, _, _ = bases[dim].rows(t)
        return (v0 * self.weights[mode][dim][idx]).sum(axis=1)

    def parts_norm(self, T, family=None):
        """(u, grad, hess) in normalized coordinates, all from one family.

        Used by the separability score, which needs value, gradient and
        Hessian of the same smooth function.
        """
        bases = self._curv if family == "curvature" else self._basis
        F, F1, F2 = self._factors(T, bases, order=2)
        n = F.shape[2]
        # Leave-one-out products via prefix/suffix scans (division-free).
        pre = np.ones((self.modes, self.dim + 1, n))
        suf = np.ones((self.modes, self.dim + 1, n))
        for i in range(self.dim):
            pre[:, i + 1] = pre[:, i] * F[:, i]
        for i in range(self.dim - 1, -1, -1):
            suf[:, i] = suf[:, i + 1] * F[:, i]
        loo = pre[:, : self.dim] * suf[:, 1:]  # prod_{j != i} f_mj
        u = pre[:, self.dim].sum(axis=0)
        grad = (F1 * loo).sum(axis=0).T  # (n, dim)
        hess = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            hess[:, i, i] = (F2[:, i] * loo[:, i]).sum(axis=0)
            for j in range(i + 1, self.dim):
                # prod_{k != i,j} f_mk, split around the two dropped dims
                mid = np.ones((self.modes, n))
                for k in range(i + 1, j):
                    mid *= F[:, k]
                loo2 = pre[:, i] * mid * suf[:, j + 1]
                hij = (F1[:, i] * F1[:, j] * loo2).sum(axis=0)
                hess[:, i, j] = hij
                hess[:, j, i] = hij
        return u, grad, hess

    # -- public, original-unit surface ---------------------------------------

    def _to_unit(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise DataError(f"expected {self.dim} input columns, got {X.shape[1]}")
        T = self.amap.forward_x(X)
        if np.any(T < -1e-12) or np.any(T > 1.0 + 1e-12):
            warnings.warn("inputs outside the training domain were clamped")
        return np.clip(T, 0.0, 1.0)

    def evaluate(self, X):
        """u(x) at original-unit inputs; accepts (n, dim) or a single point."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = self.amap.inverse_y(self.eval_norm(self._to_unit(X)))
        return float(out[0]) if single else out

    def evaluate_factor(self, mode: int, dim: int, t):
        """One mode's univariate factor at original-unit coordinates."""
        t = np.asarray(t, dtype=float)
        single = t.ndim == 0
        tn = (t.ravel() - self.amap.x_lo[dim]) / self.amap.x_width[dim]
        out = self.factor_norm(mode, dim, np.clip(tn, 0.0, 1.0))
        return float(out[0]) if single else out

    def gradient(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        _, g, _ = self.parts_norm(self._to_unit(X), family=None)
        g = g * (self.amap.y_width / self.amap.x_width)
        return g[0] if single else g

    def hessian(self, X):
        """Original-unit Hessian, from the curvature family; exactly symmetric."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        _, _, H = self.parts_norm(self._to_unit(X), family="curvature")
        scale = 1.0 / self.amap.x_width
        H = H * (self.amap.y_width * scale[:, None] * scale[None, :])
        return H[0] if single else H

    @property
    def n_params(self) -> int:
        return sum(s.n_nodes for s in self.specs) * self.modes


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _mse(pred, y):
    return float(np.mean((pred - y) ** 2))


class _Design:
    """Precomputed per-dimension basis rows for a fixed sample set."""

    def __init__(self, bases, T):
        self.idx = []
        self.val = []
        self.n_nodes = []
        for i, b in enumerate(bases):
            idx, v0, _, _ = b.rows(T[:, i])
            self.idx.append(idx)
            self.val.append(v0)
            self.n_nodes.append(b.n_nodes)

    def factor(self, w, i):
        return (self.val[i] * w[self.idx[i]]).sum(axis=1)

    def scatter(self, vec, i):
        """B_i^T vec, accumulated with bincount (fast scatter-add)."""
        contrib = self.val[i] * vec[:, None]
        return np.bincount(
            self.idx[i].ravel(), weights=contrib.ravel(), minlength=self.n_nodes[i]
        )


def _forward(design, weights, modes, dim, n):
    F = np.empty((modes, dim, n))
    for m in range(modes):
        for i in range(dim):
            F[m, i] = design.factor(weights[m][i], i)
    pre = np.ones((modes, dim + 1, n))
    suf = np.ones((modes, dim + 1, n))
    for i in range(dim):
        pre[:, i + 1] = pre[:, i] * F[:, i]
    for i in range(dim - 1, -1, -1):
        suf[:, i] = suf[:, i + 1] * F[:, i]
    pred = pre[:, dim].sum(axis=0)
    loo = pre[:, :dim] * suf[:, 1:]
    return pred, loo


def train(
    dataset: Dataset,
    config: RunConfig,
    validation: Dataset | None = None,
    rng: SeededRng | None = None,
):
    """Fit the separable surrogate to ``dataset`` by minimizing the mean
    squared mismatch with guarded Adam steps (cosine-decayed step size,
    step rejected and retried smaller whenever the full-batch loss would
    rise, so the loss history is non-increasing within 1e-6 per epoch).

    Inputs are normalized to the unit cube using the dataset domain; targets
    are scaled by max |y| during optimization and the scale is folded back
    into the first dimension's weights, so the returned model is a plain
    sum-of-products in original units.  With a validation set, training
    stops once its RMSE has not improved for ``config.patience`` epochs and
    the best-validation weights are restored.
    """
    t0 = time.perf_counter()
    rng = rng or SeededRng(config.seed, 0)
    widths = dataset.domain[:, 1] - dataset.domain[:, 0]
    if np.any(widths == 0.0):
        raise DataError("constant input column: zero domain width")
    y_scale = float(np.max(np.abs(dataset.y)))
    y_scale = y_scale if y_scale > 0.0 else 1.0
    amap = AffineMap(dataset.domain[:, 0], widths, 0.0, y_scale)

    dim, modes = dataset.dim, config.modes
    specs = [
        ShapeSpec(
            config.segments,
            config.patch_radius if config.basis_family == "enriched" else 0,
            config.dilation,
            config.poly_order,
        )
        for _ in range(dim)
    ]
    bases = [build_basis(s, config.basis_family) for s in specs]
    T = amap.forward_x(dataset.X)
    y = amap.forward_y(dataset.y)
    design = _Design(bases, T)
    n = dataset.n
    if validation is not None:
        Tv = np.clip(amap.forward_x(validation.X), 0.0, 1.0)
        yv = amap.forward_y(validation.y)
        design_v = _Design(bases, Tv)

    init_rng = rng.child("init")
    level = float(np.mean(np.abs(y))) ** (1.0 / dim) if np.any(y) else 0.0
    weights = [
        [
            level + init_rng.uniform(-0.01, 0.01, specs[i].n_nodes)
            for i in range(dim)
        ]
        for m in range(modes)
    ]

    # Adam state per weight vector.
    mom1 = [[np.zeros_like(w) for w in row] for row in weights]
    mom2 = [[np.zeros_like(w) for w in row] for row in weights]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step_count = 0

    train_hist: list[float] = []
    valid_hist: list[float] = []
    best_valid = math.inf
    best_weights = None
    stale = 0
    loss = None

    pred, loo = _forward(design, weights, modes, dim, n)
    loss = _mse(pred, y)
    epochs_run = 0
    for epoch in range(config.epochs):
        if not math.isfinite(loss):
            raise TrainingError(f"training loss became non-finite at epoch {epoch}")
        train_hist.append(math.sqrt(loss))
        if validation is not None:
            pv, _ = _forward(design_v, weights, modes, dim, Tv.shape[0])
            vr = math.sqrt(_mse(pv, yv))
            valid_hist.append(vr)
            if vr < best_valid - 1e-12:
                best_valid = vr
                best_weights = [[w.copy() for w in row] for row in weights]
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    break
        epochs_run = epoch + 1

        resid = 2.0 / n * (pred - y)
        grads = [
            [design.scatter(resid * loo[m, i], i) for i in range(dim)]
            for m in range(modes)
        ]
        lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        backup = [[w.copy() for w in row] for row in weights]
        b1 = [[v.copy() for v in row] for row in mom1]
        b2 = [[v.copy() for v in row] for row in mom2]
        scale = 1.0
        accepted = False
        for _attempt in range(30):
            step_count += 1
            for m in range(modes):
                for i in range(dim):
                    g = grads[m][i]
                    mom1[m][i] = beta1 * mom1[m][i] + (1 - beta1) * g
                    mom2[m][i] = beta2 * mom2[m][i] + (1 - beta2) * g * g
                    mhat = mom1[m][i] / (1 - beta1**step_count)
                    vhat = mom2[m][i] / (1 - beta2**step_count)
                    weights[m][i] = weights[m][i] - lr * scale * mhat / (
                        np.sqrt(vhat) + eps
                    )
            pred, loo = _forward(design, weights, modes, dim, n)
            new_loss = _mse(pred, y)
            if new_loss <= loss + 1e-6 or not math.isfinite(loss):
                accepted = True
                loss = new_loss
                break
            # Rejected: restore and retry with a smaller step.
            weights = [[w.copy() for w in row] for row in backup]
            mom1 = [[v.copy() for v in row] for row in b1]
            mom2 = [[v.copy() for v in row] for row in b2]
            step_count -= 1
            scale *= 0.5
        if not accepted:
            pred, loo = _forward(design, weights, modes, dim, n)
            loss = _mse(pred, y)

    if validation is not None and best_weights is not None:
        weights = best_weights
        pred, _ = _forward(design, weights, modes, dim, n)
        loss = _mse(pred, y)

    # Fold the target scale into the first dimension so the stored weights
    # produce original units directly.
    for m in range(modes):
        weights[m][0] = weights[m][0] * y_scale
    final_amap = AffineMap(amap.x_lo, amap.x_width, 0.0, 1.0)
    model = SurrogateModel(specs, weights, final_amap, config.basis_family)
    report = TrainReport(
        epochs_run=epochs_run,
        final_loss=loss,
        train_rmse=train_hist,
        valid_rmse=valid_hist,
        wall_time=time.perf_counter() - t0,
        n_params=model.n_params,
    )
    return model, report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(model: SurrogateModel, path) -> None:
    """Structured-text dump: header, affine map, per-dim specs, weights."""
    lines = [MODEL_FORMAT]
    lines.append(f"family {model.family}")
    lines.append(f"dim {model.dim}")
    lines.append(f"modes {model.modes}")
    lines.append("x_lo " + " ".join(f"{v:.17g}" for v in model.amap.x_lo))
    lines.append("x_width " + " ".join(f"{v:.17g}" for v in model.amap.x_width))
    lines.append(f"y_lo {model.amap.y_lo:.17g}")
    lines.append(f"y_width {model.amap.y_width:.17g}")
    for i, s in enumerate(model.specs):
        lines.append(
            f"spec {i} {s.segments} {s.patch_radius} {s.dilation:.17g} {s.poly_order}"
        )
    for m in range(model.modes):
        for i in range(model.dim):
            vals = " ".join(f"{v:.17g}" for v in model.weights[m][i])
            lines.append(f"weights {m} {i} {vals}")
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> SurrogateModel:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != MODEL_FORMAT:
        raise ModelIOError(f"{path}: not a {MODEL_FORMAT!r} file")
    if not text or text[-1].strip() != "end":
        raise ModelIOError(f"{path}: truncated model file (missing end marker)")
    fields = {}
    specs = {}
    weights = {}
    for line in text[1:-1]:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key == "spec":
                specs[int(parts[1])] = ShapeSpec(
                    int(parts[2]), int(parts[3]), float(parts[4]), int(parts[5])
                )
            elif key == "weights":
                weights[(int(parts[1]), int(parts[2]))] = np.array(
                    [float(v) for v in parts[3:]]
                )
            else:
                fields[key] = parts[1:]
        except (ValueError, IndexError) as exc:
            raise ModelIOError(f"{path}: bad line {line!r} ({exc})") from None
    try:
        dim = int(fields["dim"][0])
        modes = int(fields["modes"][0])
        family = fields["family"][0]
        amap = AffineMap(
            np.array([float(v) for v in fields["x_lo"]]),
            np.array([float(v) for v in fields["x_width"]]),
            float(fields["y_lo"][0]),
            float(fields["y_width"][0]),
        )
        spec_list = [specs[i] for i in range(dim)]
        w = [[weights[(m, i)] for i in range(dim)] for m in range(modes)]
    except KeyError as exc:
        raise ModelIOError(f"{path}: missing field {exc}") from None
    try:
        return SurrogateModel(spec_list, w, amap, family)
    except (BasisError, DataError) as exc:
        raise ModelIOError(f"{path}: inconsistent model ({exc})") from None
