"""H-representation polytope algebra.

A :class:`Polytope` is ``{x : H x <= h}``.  H-rep is the primary currency;
vertex representations are computed on demand (dimension <= 3 only) for
Minkowski sums, affine images, and plotting.  All tolerances flow from one
:class:`ToleranceConfig` record.

The empty set has the canonical single-row form ``0^T x <= -1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, HalfspaceIntersection, QhullError

from holdmpc.optim import LinearProgram, solve_lp


class GeometryError(ValueError):
    pass


class DimensionMismatch(GeometryError):
    pass


class EmptySubtrahend(GeometryError):
    pass


class UnboundedSubtrahend(GeometryError):
    pass


class UnboundedOperand(GeometryError):
    pass


class UnsupportedDimension(GeometryError):
    pass


@dataclass(frozen=True)
class ToleranceConfig:
    """Single source of truth for geometric tolerances (normalized-row metric)."""

    # Geometry LPs run much tighter than a generic solve: redundancy and
    # emptiness decisions happen at the 1e-9 scale, and the relative duality
    # gap is amplified by objective magnitudes up to ~1e2.
    lp: float = 1e-11           # LP tolerance for support/containment queries
    cheb_lp: float = 1e-11      # chebyshev LP needs accuracy below the empty scale
    redundancy_lp: float = 1e-12  # LP tolerance inside minimize()
    containment: float = 1e-7   # contains / set_equal slack
    redundancy: float = 1e-9    # minimize() drop threshold
    empty: float = 5e-10        # chebyshev radius below -empty means empty
    flat: float = 1e-7          # implicit-equality detection width
    flat_slack: float = 1e-9    # slack given to equality pairs when lifting hulls
    row_zero: float = 1e-12     # coefficient treated as exactly zero


TOLS = ToleranceConfig()


def _fmt(v: float) -> str:
    return repr(float(v))


class Polytope:
    """Convex polyhedron {x : H x <= h}; immutable after construction.

    Rows are normalized to unit Euclidean norm at construction; zero rows
    are dropped when their right-hand side is nonnegative and force the
    canonical empty set otherwise.  Emptiness is decided lazily and cached.
    """

    __slots__ = ("H", "h", "dim", "_empty", "_verts", "_bbox")

    def __init__(self, H, h, dim: Optional[int] = None, normalize: bool = True,
                 _vertices=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.atleast_1d(np.asarray(h, dtype=float))
        if H.size == 0:
            if dim is None:
                raise ValueError("dimension required for a row-free polytope")
            H = np.zeros((0, dim))
            h = np.zeros(0)
        if H.shape[0] != h.shape[0]:
            raise ValueError("row counts of H and h differ")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("NaN/Inf entries in polytope data")
        self.dim = H.shape[1] if dim is None else dim
        if H.shape[1] != self.dim:
            raise ValueError("H column count does not match dimension")
        self._empty = None
        self._verts = list(_vertices) if _vertices is not None else None
        self._bbox = None
        if normalize and H.shape[0]:
            norms = np.linalg.norm(H, axis=1)
            zero = norms <= TOLS.row_zero
            if np.any(zero & (h < -TOLS.row_zero)):
                self.H, self.h = _empty_rows(self.dim)
                self._empty = True
                return
            keep = ~zero
            H, h, norms = H[keep], h[keep], norms[keep]
            if H.shape[0]:
                H = H / norms[:, None]
                h = h / norms
        self.H = H
        self.h = h

    # -- constructors -----------------------------------------------------

    @classmethod
    def empty(cls, dim: int) -> "Polytope":
        H, h = _empty_rows(dim)
        p = cls(H, h, dim=dim, normalize=False)
        p._empty = True
        return p

    @classmethod
    def universe(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0), dim=dim, normalize=False)

    @classmethod
    def from_bounds(cls, lower, upper) -> "Polytope":
        return Box(lower, upper).polytope()

    @classmethod
    def from_vertices(cls, points) -> "Polytope":
        return hull_of_points(np.atleast_2d(np.asarray(points, dtype=float)))

    # -- basics ------------------------------------------------------------

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    def __repr__(self):
        return f"Polytope(rows={self.rows}, dim={self.dim})"

    def contains_point(self, x, tol: float = None) -> bool:
        tol = TOLS.containment if tol is None else tol
        x = np.asarray(x, dtype=float)
        if self.rows == 0:
            return True
        return bool(np.all(self.H @ x - self.h <= tol))

    def is_empty(self) -> bool:
        if self._empty is None:
            if self.rows == 0:
                self._empty = False
            else:
                _, r = self.chebyshev_center()
                self._empty = r < -TOLS.empty
        return self._empty

    def chebyshev_center(self):
        """Largest inscribed ball; returns (center, radius).

        Radius is negative for empty sets (depth of infeasibility) and
        ``inf`` when balls of arbitrary radius fit.  Degenerate systems may
        only resolve at a loose tolerance; a radius then inside the solver
        error band is reported as exactly zero (boundary convention).
        """
        n, m = self.dim, self.rows
        if m == 0:
            return np.zeros(n), np.inf
        c = np.zeros(n + 1)
        c[-1] = -1.0
        G = np.hstack([self.H, np.ones((m, 1))])
        res = None
        for tol in (TOLS.cheb_lp, 1e-9, 1e-7):
            res = solve_lp(LinearProgram(c, G, self.h), tol=tol)
            if res.status != "IterationLimit":
                break
        if res.status == "Optimal" and tol > 1e-9 and abs(res.x[-1]) < 1e-6:
            return res.x[:n], 0.0
        if res.status == "Optimal":
            return res.x[:n], float(res.x[-1])
        if res.status == "Unbounded":
            # re-solve inside a big box to get a usable interior point
            B = 1e6
            G2 = np.vstack([G, np.hstack([np.eye(n), np.zeros((n, 1))]),
                            np.hstack([-np.eye(n), np.zeros((n, 1))])])
            h2 = np.concatenate([self.h, np.full(2 * n, B)])
            res2 = solve_lp(LinearProgram(c, G2, h2), tol=TOLS.lp)
            if res2.status == "Optimal":
                return res2.x[:n], np.inf
        raise GeometryError(f"chebyshev LP failed with status {res.status}")

    def support(self, direction) -> float:
        """Support function max a^T x over the polytope (+inf if unbounded)."""
        a = np.asarray(direction, dtype=float)
        if self._verts is not None:
            if not self._verts:
                raise EmptySubtrahend("support of empty set")
            return float(max(a @ v for v in self._verts))
        if self.rows == 0:
            return 0.0 if np.linalg.norm(a) <= TOLS.row_zero else np.inf
        # degenerate instances can stall just above the strict tolerance;
        # a mildly looser solve is still far below the geometric tolerances
        for tol in (TOLS.lp, 1e-9):
            res = solve_lp(LinearProgram(-a, self.H, self.h), tol=tol)
            if res.status != "IterationLimit":
                break
        if res.status == "Optimal":
            return -res.objective
        if res.status == "Unbounded":
            return np.inf
        if res.status == "Infeasible":
            raise EmptySubtrahend("support of empty set")
        # last resort: enumerate vertices (an independent qhull route that
        # copes with slivers the interior point method stalls on)
        if self.dim <= 3:
            try:
                vs = vertices(self, _check_bounded=False)
                if vs:
                    return float(max(a @ v for v in vs))
            except GeometryError:
                pass
            except QhullError:
                pass
        raise GeometryError("support LP hit iteration limit")

    def bounding_box(self):
        """(lower, upper) componentwise bounds; raises UnboundedOperand."""
        if self._bbox is not None:
            return self._bbox
        if self._verts is not None and self._verts:
            V = np.array(self._verts)
            self._bbox = (V.min(axis=0), V.max(axis=0))
            return self._bbox
        lo = np.empty(self.dim)
        up = np.empty(self.dim)
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = 1.0
            up[j] = self.support(e)
            lo[j] = -self.support(-e)
            if not (np.isfinite(up[j]) and np.isfinite(lo[j])):
                raise UnboundedOperand(f"polytope unbounded along coordinate {j}")
        self._bbox = (lo, up)
        return self._bbox

    def is_bounded(self) -> bool:
        try:
            self.bounding_box()
            return True
        except UnboundedOperand:
            return False

    # -- serialization -----------------------------------------------------

    def to_text(self) -> str:
        lines = [f"HPOLY {self.rows} {self.dim}"]
        for i in range(self.rows):
            lines.append(" ".join(_fmt(v) for v in self.H[i]) + " " + _fmt(self.h[i]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Polytope":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("HPOLY"):
            raise ValueError("not an HPOLY document")
        _, rows_s, dim_s = lines[0].split()
        rows, dim = int(rows_s), int(dim_s)
        if len(lines) - 1 != rows:
            raise ValueError(f"expected {rows} rows, found {len(lines) - 1}")
        H = np.zeros((rows, dim))
        h = np.zeros(rows)
        for i, ln in enumerate(lines[1:]):
            vals = [float(t) for t in ln.split()]
            if len(vals) != dim + 1:
                raise ValueError(f"row {i} has {len(vals)} fields, expected {dim + 1}")
            H[i] = vals[:dim]
            h[i] = vals[dim]
        return cls(H, h, dim=dim)


def _empty_rows(dim: int):
    return np.zeros((1, dim)), np.array([-1.0])


# ---------------------------------------------------------------------------
# Box
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lower, upper]; closed-form support function."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound shape mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def support(self, direction) -> float:
        a = np.asarray(direction, dtype=float)
        return float(a @ self.center + np.abs(a) @ self.radius)

    def contains_point(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def corners(self) -> np.ndarray:
        cols = [(lo, up) for lo, up in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*cols)))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def polytope(self) -> Polytope:
        n = self.dim
        H = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([self.upper, -self.lower])
        verts = self.corners() if n <= 10 else None
        return Polytope(H, h, _vertices=verts)


# ---------------------------------------------------------------------------
# set operations
# ---------------------------------------------------------------------------


def _check_dims(a: Polytope, b: Polytope):
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")


def intersect(a: Polytope, b: Polytope) -> Polytope:
    """Concatenate rows, then remove redundancy."""
    _check_dims(a, b)
    if a.is_empty() or b.is_empty():
        return Polytope.empty(a.dim)
    raw = Polytope(np.vstack([a.H, b.H]), np.concatenate([a.h, b.h]), dim=a.dim)
    return minimize(raw)


def support_many(p: Polytope, directions: np.ndarray) -> np.ndarray:
    return np.array([p.support(d) for d in directions])


def pontryagin_diff(a: Polytope, b) -> Polytope:
    """a minus-Pontryagin b: {x : x + v in a for all v in b}.

    b may be a Polytope or a Box (closed-form support).
    """
    if isinstance(b, Box):
        if a.dim != b.dim:
            raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")
        if a.is_empty():
            return Polytope.empty(a.dim)
        sup = np.array([b.support(row) for row in a.H])
        return Polytope(a.H.copy(), a.h - sup, dim=a.dim, normalize=False)
    _check_dims(a, b)
    if b.is_empty():
        raise EmptySubtrahend("Pontryagin difference with empty subtrahend")
    if a.is_empty():
        return Polytope.empty(a.dim)
    sup = np.empty(a.rows)
    for i, row in enumerate(a.H):
        s = b.support(row)
        if not np.isfinite(s):
            raise UnboundedSubtrahend("subtrahend unbounded along a constraint normal")
        sup[i] = s
    return Polytope(a.H.copy(), a.h - sup, dim=a.dim, normalize=False)


def minkowski_sum(a: Polytope, b: Polytope) -> Polytope:
    """{x + v : x in a, v in b} via vertex sums and hulling (dim <= 3)."""
    _check_dims(a, b)
    if a.is_empty() or b.is_empty():
        return Polytope.empty(a.dim)
    va = np.array(vertices(a))
    vb = np.array(vertices(b))
    pts = (va[:, None, :] + vb[None, :, :]).reshape(-1, a.dim)
    return hull_of_points(pts)


def affine_map(p: Polytope, T) -> Polytope:
    """Image {T x : x in p} via vertex mapping (output dim <= 3)."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if T.shape[1] != p.dim:
        raise DimensionMismatch("map column count does not match polytope dimension")
    if T.shape[0] > 3:
        raise UnsupportedDimension("affine_map output dimension > 3")
    if p.is_empty():
        return Polytope.empty(T.shape[0])
    pts = np.array(vertices(p)) @ T.T
    return hull_of_points(np.atleast_2d(pts))


def affine_preimage(p: Polytope, T) -> Polytope:
    """{x : T x in p}; exact in H-rep for any dimension."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if T.shape[0] != p.dim:
        raise DimensionMismatch("map row count does not match polytope dimension")
    if p.is_empty():
        return Polytope.empty(T.shape[1])
    return Polytope(p.H @ T, p.h.copy(), dim=T.shape[1])


def contains(outer: Polytope, inner: Polytope, tol: float = None) -> bool:
    """True iff inner is a subset of outer within tol (per-row support LPs)."""
    _check_dims(outer, inner)
    tol = TOLS.containment if tol is None else tol
    if inner.is_empty():
        return True
    for i in range(outer.rows):
        try:
            sup = inner.support(outer.H[i])
        except EmptySubtrahend:
            # inner is empty at a scale below the emptiness tolerance
            return True
        if not np.isfinite(sup) or sup > outer.h[i] + tol:
            return False
    return True


def set_equal(a: Polytope, b: Polytope, tol: float = None) -> bool:
    return contains(a, b, tol) and contains(b, a, tol)


def _dedupe_rows(H: np.ndarray, h: np.ndarray):
    """Merge near-identical rows, keeping the tighter right-hand side."""
    if H.shape[0] <= 1:
        return H, h
    key = np.round(H, 10)
    order = np.lexsort(key.T[::-1])
    keep: list[int] = []
    for idx in order:
        if keep and np.abs(key[idx] - key[keep[-1]]).max() <= 1e-9:
            if h[idx] < h[keep[-1]]:
                keep[-1] = idx
        else:
            keep.append(idx)
    keep = sorted(keep)
    return H[keep], h[keep]


def minimize(p: Polytope, redundancy_tol: float = None) -> Polytope:
    """Remove every redundant row; the set is unchanged.

    Row i is redundant iff max H_i x over the remaining rows stays below
    h_i + redundancy_tol.
    """
    rtol = TOLS.redundancy if redundancy_tol is None else redundancy_tol
    if p.rows == 0:
        return p
    if p.is_empty():
        return Polytope.empty(p.dim)
    H, h = _dedupe_rows(p.H, p.h)
    m = H.shape[0]
    keep = np.ones(m, dtype=bool)
    for i in range(m):
        keep[i] = False
        others = keep.copy()
        if not others.any():
            keep[i] = True
            continue
        res = solve_lp(LinearProgram(-H[i], H[others], h[others]),
                       tol=TOLS.redundancy_lp)
        if res.status == "Optimal" and -res.objective <= h[i] + rtol:
            continue  # stays dropped
        keep[i] = True
    out = Polytope(H[keep], h[keep], dim=p.dim, normalize=False)
    out._verts = p._verts
    if p._empty is not None:
        out._empty = p._empty
    return out


def project(p: Polytope, keep_dims: Sequence[int]) -> Polytope:
    """Orthogonal projection onto keep_dims via Fourier-Motzkin elimination.

    Eliminates dropped variables one at a time, choosing the variable that
    minimizes the positive-row x negative-row product, with redundancy
    removal after every elimination.  A bounding-box prefilter discards the
    bulk of the combination rows before any LP runs.
    """
    keep_dims = list(keep_dims)
    if not keep_dims:
        raise ValueError("keep_dims must be nonempty")
    if keep_dims != sorted(set(keep_dims)) or keep_dims[0] < 0 or keep_dims[-1] >= p.dim:
        raise ValueError("keep_dims must be strictly increasing and within dimension")
    if p.is_empty():
        return Polytope.empty(len(keep_dims))
    q = minimize(p)
    if q.is_empty():
        return Polytope.empty(len(keep_dims))
    # coordinate ranges survive projection, so one box serves every round
    lo, up = _coordinate_ranges(q)
    H, h = q.H.copy(), q.h.copy()
    remaining = [j for j in range(p.dim) if j not in keep_dims]
    while remaining:
        counts = []
        for j in remaining:
            col = H[:, j]
            npos = int(np.sum(col > TOLS.row_zero))
            nneg = int(np.sum(col < -TOLS.row_zero))
            counts.append((npos * nneg, j))
        _, j = min(counts)
        remaining.remove(j)
        H, h = _eliminate(H, h, j)
        H, h = _dedupe_rows(*_normalize_rows(H, h))
        H, h = _box_prefilter(H, h, lo, up)
        q = minimize(Polytope(H, h, dim=p.dim))
        if q.is_empty():
            return Polytope.empty(len(keep_dims))
        H, h = q.H, q.h
    return Polytope(H[:, keep_dims], h, dim=len(keep_dims))


def _coordinate_ranges(p: Polytope):
    """Per-coordinate support bounds; +-inf where unbounded or undecided.

    Prefilter input only, so a failed support LP degrades to an infinite
    bound (no filtering along that coordinate) rather than an error.
    """
    lo = np.full(p.dim, -np.inf)
    up = np.full(p.dim, np.inf)
    for j in range(p.dim):
        e = np.zeros(p.dim)
        e[j] = 1.0
        try:
            up[j] = p.support(e)
            lo[j] = -p.support(-e)
        except GeometryError:
            continue
    return lo, up


def _normalize_rows(H: np.ndarray, h: np.ndarray):
    if H.shape[0] == 0:
        return H, h
    norms = np.linalg.norm(H, axis=1)
    keep = norms > TOLS.row_zero
    Hk, hk, nk = H[keep], h[keep], norms[keep]
    return Hk / nk[:, None], hk / nk


def _box_prefilter(H: np.ndarray, h: np.ndarray, lo: np.ndarray, up: np.ndarray):
    """Drop rows whose maximum over the bounding box is clearly below h."""
    if H.shape[0] == 0:
        return H, h
    pos = np.clip(H, 0.0, None)
    neg = np.clip(H, None, 0.0)
    with np.errstate(invalid="ignore"):
        boxmax = np.where(np.isfinite(up), pos * up, np.where(pos > 0, np.inf, 0.0)).sum(axis=1) \
            + np.where(np.isfinite(lo), neg * lo, np.where(neg < 0, np.inf, 0.0)).sum(axis=1)
    keep = ~(boxmax <= h - 10 * TOLS.redundancy)
    return H[keep], h[keep]


def _eliminate(H: np.ndarray, h: np.ndarray, j: int):
    col = H[:, j]
    pos = np.nonzero(col > TOLS.row_zero)[0]
    neg = np.nonzero(col < -TOLS.row_zero)[0]
    zero = np.nonzero(np.abs(col) <= TOLS.row_zero)[0]
    rows = [H[zero]]
    rhs = [h[zero]]
    for ip in pos:
        cp = col[ip]
        # cp * row_n - cn * row_p is a positive combination free of x_j
        cn = col[neg]
        new_rows = cp * H[neg] - cn[:, None] * H[ip]
        new_rhs = cp * h[neg] - cn * h[ip]
        rows.append(new_rows)
        rhs.append(new_rhs)
    H2 = np.vstack(rows) if rows else np.zeros((0, H.shape[1]))
    h2 = np.concatenate(rhs) if rhs else np.zeros(0)
    H2[:, j] = 0.0
    return H2, h2


# ---------------------------------------------------------------------------
# vertex enumeration and hulls (dimension <= 3)
# ---------------------------------------------------------------------------


def vertices(p: Polytope, _check_bounded: bool = True) -> list[np.ndarray]:
    """Vertices of a bounded polytope of dimension <= 3.

    Handles lower-dimensional (flat) polytopes by reducing to the affine
    hull before running the halfspace intersection.
    """
    if p._verts is not None:
        return [v.copy() for v in p._verts]
    if p.dim > 3:
        raise UnsupportedDimension("vertex enumeration limited to dimension <= 3")
    if p.is_empty():
        p._verts = []
        return []
    if _check_bounded:
        p.bounding_box()  # raises UnboundedOperand early

    center, radius = p.chebyshev_center()
    if radius > TOLS.flat:
        verts = _vertices_fulldim(p.H, p.h, center)
    else:
        verts = _vertices_flat(p)
    if _check_bounded:
        p._verts = verts
    return [v.copy() for v in verts]


def _vertices_fulldim(H, h, interior) -> list[np.ndarray]:
    if H.shape[1] == 1:
        up = np.min(h[H[:, 0] > 0] / H[H[:, 0] > 0, 0])
        lo = np.max(h[H[:, 0] < 0] / H[H[:, 0] < 0, 0])
        return [np.array([lo]), np.array([up])]
    halfspaces = np.hstack([H, -h[:, None]])
    try:
        hs = HalfspaceIntersection(halfspaces, interior)
        pts = hs.intersections
    except QhullError:
        hs = HalfspaceIntersection(halfspaces, interior, qhull_options="QJ")
        pts = hs.intersections
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    return _dedupe_points(pts)


def _vertices_flat(p: Polytope) -> list[np.ndarray]:
    """Reduce a flat polytope to its affine hull, enumerate there, lift back."""
    n = p.dim
    eq_mask = np.zeros(p.rows, dtype=bool)
    for i in range(p.rows):
        res = solve_lp(LinearProgram(p.H[i], p.H, p.h), tol=TOLS.lp)
        if res.status != "Optimal":
            continue
        if p.h[i] - res.objective <= TOLS.flat:
            eq_mask[i] = True
    if not eq_mask.any():
        # thin but technically full-dimensional; retry qhull directly
        center, _ = p.chebyshev_center()
        return _vertices_fulldim(p.H, p.h, center)
    E = p.H[eq_mask]
    e = p.h[eq_mask]
    x_p, *_ = np.linalg.lstsq(E, e, rcond=None)
    U, sv, Vt = np.linalg.svd(E, full_matrices=True)
    rank = int(np.sum(sv > 1e-9 * max(sv.max(initial=0.0), 1.0)))
    N = Vt[rank:].T  # orthonormal basis of the null space, n x k
    k = N.shape[1]
    if k == 0:
        return [x_p]
    Hr = p.H[~eq_mask] @ N
    hr = p.h[~eq_mask] - p.H[~eq_mask] @ x_p
    norms = np.linalg.norm(Hr, axis=1)
    good = norms > 1e-10
    Hr, hr = Hr[good], hr[good]
    if k == 1:
        q = Polytope(Hr if Hr.size else np.zeros((0, 1)), hr, dim=1)
        lo, up = q.bounding_box()
        return [x_p + N[:, 0] * lo[0], x_p + N[:, 0] * up[0]]
    q = Polytope(Hr, hr, dim=k)
    center, radius = q.chebyshev_center()
    if radius <= 0:
        raise GeometryError("degenerate reduced polytope in vertex enumeration")
    red = _vertices_fulldim(q.H, q.h, center)
    return [x_p + N @ v for v in red]


def _dedupe_points(pts: np.ndarray, tol: float = 1e-7) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for v in pts:
        if not any(np.abs(v - w).max() <= tol for w in out):
            out.append(v)
    return out


def hull_of_points(pts: np.ndarray) -> Polytope:
    """H-rep of the convex hull of points (ambient dimension <= 3).

    Lower-dimensional hulls get paired halfspaces along each normal
    direction with a small slack so downstream LPs keep a strict interior.
    The hull vertices are cached on the result.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = pts.shape[1]
    if n > 3:
        raise UnsupportedDimension("hulls limited to dimension <= 3")
    if pts.shape[0] == 0:
        return Polytope.empty(n)
    center = pts.mean(axis=0)
    X = pts - center
    if pts.shape[0] == 1:
        rank = 0
        V = np.zeros((n, 0))
    else:
        U, sv, Vt = np.linalg.svd(X, full_matrices=False)
        scale = max(sv.max(initial=0.0), 1.0)
        rank = int(np.sum(sv > 1e-10 * scale))
        V = Vt[:rank].T  # n x rank, orthonormal
    rows = []
    rhs = []
    # flat directions: paired halfspaces with slack
    if rank < n:
        Q = np.eye(n) if rank == 0 else _orth_complement(V)
        for q in Q.T:
            c = float(q @ center)
            rows.append(q)
            rhs.append(c + TOLS.flat_slack)
            rows.append(-q)
            rhs.append(-c + TOLS.flat_slack)
    if rank == 0:
        verts = [center]
    elif rank == 1:
        xi = X @ V[:, 0]
        lo, up = float(xi.min()), float(xi.max())
        rows.append(V[:, 0])
        rhs.append(float(V[:, 0] @ center) + up)
        rows.append(-V[:, 0])
        rhs.append(-float(V[:, 0] @ center) - lo)
        verts = [center + V[:, 0] * lo, center + V[:, 0] * up]
    else:
        xi = X @ V
        try:
            hull = ConvexHull(xi)
        except QhullError:
            hull = ConvexHull(xi, qhull_options="QJ")
        A = hull.equations[:, :-1]
        b = -hull.equations[:, -1]
        for a_row, b_val in zip(A, b):
            rows.append(V @ a_row)
            rhs.append(b_val + float((V @ a_row) @ center))
        verts = [center + V @ xi[i] for i in hull.vertices]
    out = Polytope(np.array(rows), np.array(rhs), dim=n, _vertices=verts)
    out._empty = False
    return minimize(out)


def _orth_complement(V: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the complement of the column space of V (n x r)."""
    n = V.shape[0]
    U, sv, Vt = np.linalg.svd(V, full_matrices=True)
    r = int(np.sum(sv > 1e-12))
    return U[:, r:]
