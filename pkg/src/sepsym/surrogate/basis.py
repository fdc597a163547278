"""One-dimensional interpolation bases on a node grid over [0, 1].

Three families share one query interface: ``rows(t)`` returns, for each
query point, the active node indices and the shape values together with
first and second derivatives.  All families form a partition of unity by
construction.

* ``linear``   - standard hat functions (exact nodal interpolation,
  curvature-free inside segments).
* ``smoothed`` - cardinal cubic B-spline hats on the same grid, with the
  two ghost splines folded into the boundary nodes by linear extrapolation
  (natural ends).  C2 everywhere, reproduces linear functions exactly.
* ``enriched`` - hats blended with a per-node radial-point patch: each
  segment node carries an interpolant over its 2r+1-node neighborhood
  built from a compact cubic-spline kernel (support = dilation * segment
  length) augmented with monomials up to ``poly_order``, which enforces
  polynomial reproduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ShapeSpec", "BasisError", "build_basis", "uniform_nodes"]


class BasisError(ValueError):
    """Invalid shape-function configuration."""


@dataclass(frozen=True)
class ShapeSpec:
    """Hyperparameters of one dimension's shape functions."""

    segments: int
    patch_radius: int = 0
    dilation: float = 2.0
    poly_order: int = 1

    def __post_init__(self):
        if self.segments < 1:
            raise BasisError("segments must be positive")
        if self.patch_radius < 0:
            raise BasisError("patch_radius must be nonnegative")
        if self.dilation <= 0.0:
            raise BasisError("dilation must be positive")
        if self.poly_order < 0:
            raise BasisError("poly_order must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.segments + 1


def uniform_nodes(spec: ShapeSpec) -> np.ndarray:
    return np.linspace(0.0, 1.0, spec.n_nodes)


def build_basis(spec: ShapeSpec, family: str):
    """Construct the shape-function evaluator for one dimension."""
    if family == "linear":
        return LinearHatBasis(spec)
    if family == "smoothed":
        return SmoothedCubicBasis(spec)
    if family == "enriched":
        return PatchEnrichedBasis(spec)
    raise BasisError(f"unknown basis family {family!r}")


def _clip01(t: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(t, dtype=float).ravel(), 0.0, 1.0)


class LinearHatBasis:
    """Piecewise-linear hats: Kronecker-delta interpolation at the nodes."""

    family = "linear"
    width = 2

    def __init__(self, spec: ShapeSpec):
        self.spec = spec
        self.nodes = uniform_nodes(spec)
        self.n_nodes = spec.n_nodes
        self._h = 1.0 / spec.segments

    def rows(self, t):
        t = _clip01(t)
        seg = np.clip((t / self._h).astype(int), 0, self.spec.segments - 1)
        local = t / self._h - seg
        idx = np.stack([seg, seg + 1], axis=1)
        val = np.stack([1.0 - local, local], axis=1)
        d1 = np.broadcast_to(
            np.array([-1.0, 1.0]) / self._h, val.shape
        ).copy()
        d2 = np.zeros_like(val)
        return idx, val, d1, d2


def _bspline3(s):
    """Cubic B-spline with support [-2, 2] and its two derivatives."""
    a = np.abs(s)
    sign = np.sign(s)
    v = np.zeros_like(a)
    d1 = np.zeros_like(a)
    d2 = np.zeros_like(a)
    inner = a <= 1.0
    outer = (a > 1.0) & (a < 2.0)
    ai, ao = a[inner], a[outer]
    v[inner] = 2.0 / 3.0 - ai**2 + 0.5 * ai**3
    d1[inner] = (-2.0 * ai + 1.5 * ai**2) * sign[inner]
    d2[inner] = -2.0 + 3.0 * ai
    v[outer] = (2.0 - ao) ** 3 / 6.0
    d1[outer] = -0.5 * (2.0 - ao) ** 2 * sign[outer]
    d2[outer] = 2.0 - ao
    return v, d1, d2


class SmoothedCubicBasis:
    """Cardinal cubic B-spline hats with linear-extrapolation end folding.

    The ghost splines at -h and 1+h are absorbed into the two nearest real
    nodes (coefficients +2 and -1), which keeps the partition of unity and
    exact linear reproduction while making the end conditions natural.
    """

    family = "smoothed"
    width = 6  # 4 active splines + up to 2 ghost-fold corrections

    def __init__(self, spec: ShapeSpec):
        if spec.n_nodes < 3:
            raise BasisError("smoothed basis needs at least 2 segments")
        self.spec = spec
        self.nodes = uniform_nodes(spec)
        self.n_nodes = spec.n_nodes
        self._h = 1.0 / spec.segments

    def rows(self, t):
        t = _clip01(t)
        n = t.size
        h, K = self._h, self.n_nodes
        seg = np.clip((t / h).astype(int), 0, self.spec.segments - 1)
        centers = seg[:, None] + np.arange(-1, 3)[None, :]  # (n, 4)
        s = t[:, None] / h - centers
        v, d1, d2 = _bspline3(s)
        d1 /= h
        d2 /= h * h
        idx = np.zeros((n, 6), dtype=int)
        out_v = np.zeros((n, 6))
        out_1 = np.zeros((n, 6))
        out_2 = np.zeros((n, 6))
        idx[:, :4] = np.clip(centers, 0, K - 1)
        out_v[:, :4], out_1[:, :4], out_2[:, :4] = v, d1, d2
        # Ghost at -1 (only ever column 0): fold  +2 -> node 0,  -1 -> node 1.
        ghost_l = centers[:, 0] == -1
        if np.any(ghost_l):
            for arr, src in ((out_v, v), (out_1, d1), (out_2, d2)):
                arr[ghost_l, 0] = 2.0 * src[ghost_l, 0]
                arr[ghost_l, 4] = -src[ghost_l, 0]
            idx[ghost_l, 0] = 0
            idx[ghost_l, 4] = 1
        # Ghost at K (only ever column 3): fold  +2 -> node K-1, -1 -> node K-2.
        ghost_r = centers[:, 3] == K
        if np.any(ghost_r):
            for arr, src in ((out_v, v), (out_1, d1), (out_2, d2)):
                arr[ghost_r, 3] = 2.0 * src[ghost_r, 3]
                arr[ghost_r, 5] = -src[ghost_r, 3]
            idx[ghost_r, 3] = K - 1
            idx[ghost_r, 5] = K - 2
        return idx, out_v, out_1, out_2


def _cubic_kernel(q):
    """Compact cubic-spline kernel on q = d / d_max in [0, 1], C2 throughout."""
    q = np.abs(q)
    v = np.zeros_like(q)
    d1 = np.zeros_like(q)
    d2 = np.zeros_like(q)
    lo = q <= 0.5
    hi = (q > 0.5) & (q < 1.0)
    ql, qh = q[lo], q[hi]
    v[lo] = 2.0 / 3.0 - 4.0 * ql**2 + 4.0 * ql**3
    d1[lo] = -8.0 * ql + 12.0 * ql**2
    d2[lo] = -8.0 + 24.0 * ql
    v[hi] = 4.0 / 3.0 - 4.0 * qh + 4.0 * qh**2 - (4.0 / 3.0) * qh**3
    d1[hi] = -4.0 + 8.0 * qh - 4.0 * qh**2
    d2[hi] = 8.0 - 8.0 * qh
    return v, d1, d2


class PatchEnrichedBasis:
    """Hats convolved with per-node radial-point patch interpolants.

    N~_l(t) = sum_k N_k(t) * W_l^(k)(t) over the two segment hats k, where
    W^(k) solves the kernel + monomial reproduction system on the patch of
    nodes within ``patch_radius`` of node k.  Reproduces monomials up to
    ``poly_order`` and sums to one by construction.
    """

    family = "enriched"

    def __init__(self, spec: ShapeSpec):
        if spec.patch_radius < 1:
            raise BasisError("enriched basis needs patch_radius >= 1")
        K = spec.n_nodes
        if 2 * spec.patch_radius + 1 > K:
            raise BasisError("patch does not fit inside the node grid")
        self.spec = spec
        self.nodes = uniform_nodes(spec)
        self.n_nodes = K
        self._h = 1.0 / spec.segments
        self._dmax = spec.dilation * self._h
        self.width = 2 * spec.patch_radius + 2
        r = spec.patch_radius
        self._patches = []
        for k in range(K):
            lo, hi = max(0, k - r), min(K - 1, k + r)
            members = np.arange(lo, hi + 1)
            if spec.poly_order > members.size - 1:
                raise BasisError(
                    f"poly_order {spec.poly_order} exceeds patch node count - 1"
                )
            self._patches.append((members, self._solve_patch(members, k)))

    def _solve_patch(self, members: np.ndarray, center: int) -> np.ndarray:
        """Invert the kernel + monomial moment system for one patch."""
        x = self.nodes[members]
        nl, npoly = x.size, self.spec.poly_order + 1
        R = _cubic_kernel((x[:, None] - x[None, :]) / self._dmax)[0]
        P = ((x[:, None] - self.nodes[center]) / self._h) ** np.arange(npoly)[None, :]
        G = np.zeros((nl + npoly, nl + npoly))
        G[:nl, :nl] = R
        G[:nl, nl:] = P
        G[nl:, :nl] = P.T
        try:
            Ginv = np.linalg.inv(G)
        except np.linalg.LinAlgError as exc:
            raise BasisError(f"singular patch system at node {center}: {exc}")
        return Ginv[:, :nl]  # maps [r(t); p(t)] -> shape values

    def _patch_shapes(self, t: np.ndarray, k: int):
        """W^(k) and derivatives at query points t, shape (n, patch size)."""
        members, A = self._patches[k]
        x = self.nodes[members]
        npoly = self.spec.poly_order + 1
        d = t[:, None] - x[None, :]
        rv, r1, r2 = _cubic_kernel(d / self._dmax)
        sign = np.sign(d)
        r1 = r1 * sign / self._dmax
        r2 = r2 / self._dmax**2
        u = (t[:, None] - self.nodes[k]) / self._h
        powers = np.arange(npoly)
        pv = u**powers
        p1 = np.zeros_like(pv)
        p2 = np.zeros_like(pv)
        if npoly > 1:
            p1[:, 1:] = powers[1:] * u ** (powers[1:] - 1) / self._h
        if npoly > 2:
            p2[:, 2:] = (
                powers[2:] * (powers[2:] - 1) * u ** (powers[2:] - 2) / self._h**2
            )
        q0 = np.concatenate([rv, pv], axis=1) @ A
        q1 = np.concatenate([r1, p1], axis=1) @ A
        q2 = np.concatenate([r2, p2], axis=1) @ A
        return members, q0, q1, q2

    def rows(self, t):
        t = _clip01(t)
        n = t.size
        h = self._h
        seg = np.clip((t / h).astype(int), 0, self.spec.segments - 1)
        local = t / h - seg
        idx = np.zeros((n, self.width), dtype=int)
        out_v = np.zeros((n, self.width))
        out_1 = np.zeros((n, self.width))
        out_2 = np.zeros((n, self.width))
        hats = np.stack([1.0 - local, local], axis=1)
        hats_d = np.array([-1.0, 1.0]) / h
        for s in np.unique(seg):
            rows = np.nonzero(seg == s)[0]
            ts = t[rows]
            base = max(0, s - self.spec.patch_radius)
            for j, k in enumerate((s, s + 1)):
                members, q0, q1, q2 = self._patch_shapes(ts, k)
                cols = members - base
                hk = hats[rows, j][:, None]
                hkd = hats_d[j]
                # (row, col) pairs are unique within each statement, so
                # fancy-indexed += accumulates correctly across the two hats.
                out_v[rows[:, None], cols[None, :]] += hk * q0
                out_1[rows[:, None], cols[None, :]] += hkd * q0 + hk * q1
                out_2[rows[:, None], cols[None, :]] += 2.0 * hkd * q1 + hk * q2
            hi = min(self.n_nodes - 1, s + 1 + self.spec.patch_radius)
            span = hi - base + 1
            idx[rows, :span] = np.arange(base, hi + 1)
            idx[rows, span:] = base
        return idx, out_v, out_1, out_2
