"""Robust M-step-hold reachability and invariance.

Implements the held-input precursor set (open loop and closed loop under a
linear gain), N-step controllable sets, maximal control/positive invariant
sets via fixed-point iteration, and the per-step uncertainty forward
reachable sets used for constraint tightening.

The precursor set of a target S under one M-step hold is the projection of
a stacked system in (x, u):

    rows t = 0..M-2:   H_x A^{t+1} x + H_x (sum_{j<=t} A^j B) u <= htilde_x[t]
    terminal:          H_s A^M     x + H_s (sum_{j<M}  A^j B) u <= htilde_s
    input:             H_u u <= h_u

where each right-hand side is tightened by the worst-case accumulated
disturbance, row-wise:

    htilde[t] = h - sum_{k=0}^{t} support_{W_k}( E^T (A^{t-k})^T H_r^T ).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from holdmpc import polytope as pg
from holdmpc.polytope import Box, Polytope

SetLike = Union[Polytope, Box]


class NoConvergence(RuntimeError):
    """Fixed-point iteration hit its cap; carries the last iterate."""

    def __init__(self, iterations: int, last: Polytope):
        super().__init__(f"no fixed point after {iterations} iterations")
        self.iterations = iterations
        self.last = last


@dataclass(frozen=True)
class LTISystem:
    """x+ = A x + B u + E w with sampling time ts (metadata only)."""

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    ts: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        object.__setattr__(self, "E", np.atleast_2d(np.asarray(self.E, dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n or self.E.shape[0] != n:
            raise ValueError("B/E row count must match A")
        for M_ in (self.A, self.B, self.E):
            if not np.all(np.isfinite(M_)):
                raise ValueError("system matrices must be finite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def o(self) -> int:
        return self.E.shape[1]


class DisturbanceSchedule:
    """Ordered disturbance sets W_0..W_{M-1}; w_t lives in W_{mod(t, M)}.

    An optional accumulation band restricts every partial sum of the
    sequence componentwise: cum_lower <= sum_{j<=k} w_j <= cum_upper.  This
    captures disturbances that integrate a bounded physical quantity (a
    velocity staying inside hard limits) and sharpens the constraint
    tightening accordingly; with no band, tightening reduces to the plain
    per-step worst case.
    """

    def __init__(self, sets: Sequence[SetLike], cum_lower=None, cum_upper=None):
        if not sets:
            raise ValueError("schedule must contain at least one set")
        self.sets = list(sets)
        for W in self.sets:
            if isinstance(W, Polytope):
                if W.is_empty():
                    raise ValueError("disturbance sets must be nonempty")
                if not W.is_bounded():
                    raise ValueError("disturbance sets must be bounded")
        dims = {W.dim for W in self.sets}
        if len(dims) != 1:
            raise ValueError("disturbance sets must share one dimension")
        self.cum_lower = None if cum_lower is None else \
            np.atleast_1d(np.asarray(cum_lower, dtype=float))
        self.cum_upper = None if cum_upper is None else \
            np.atleast_1d(np.asarray(cum_upper, dtype=float))
        for band in (self.cum_lower, self.cum_upper):
            if band is not None and band.shape[0] != self.sets[0].dim:
                raise ValueError("accumulation band dimension mismatch")

    @property
    def banded(self) -> bool:
        return self.cum_lower is not None or self.cum_upper is not None

    def with_band(self, cum_lower, cum_upper) -> "DisturbanceSchedule":
        return DisturbanceSchedule(self.sets, cum_lower, cum_upper)

    @classmethod
    def constant(cls, W: SetLike, M: int) -> "DisturbanceSchedule":
        return cls([W] * M)

    @classmethod
    def singleton(cls, wbar, M: int) -> "DisturbanceSchedule":
        w = np.atleast_1d(np.asarray(wbar, dtype=float))
        return cls([Box(w, w)] * M)

    def __len__(self) -> int:
        return len(self.sets)

    @property
    def M(self) -> int:
        return len(self.sets)

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    def at(self, t: int) -> SetLike:
        return self.sets[t % len(self.sets)]

    def support(self, t: int, direction) -> float:
        W = self.at(t)
        return W.support(direction)

    def contains_origin(self, tol: float = 1e-12) -> bool:
        z = np.zeros(self.dim)
        return all(W.contains_point(z, tol) for W in self.sets)

    def polytope_at(self, t: int) -> Polytope:
        W = self.at(t)
        return W.polytope() if isinstance(W, Box) else W

    def describe(self) -> str:
        parts = []
        for W in self.sets:
            if isinstance(W, Box):
                parts.append("box[" + ",".join(f"{v:g}" for v in W.lower) + ";"
                             + ",".join(f"{v:g}" for v in W.upper) + "]")
            else:
                parts.append(f"poly(rows={W.rows})")
        if len(set(parts)) == 1:
            return f"{parts[0]}*{len(parts)}"
        return " ".join(parts)


@dataclass(frozen=True)
class HoldConfig:
    """Hold length M and horizon N; N must be an integer multiple of M."""

    M: int
    N: int

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be positive")
        if self.N % self.M != 0:
            raise ValueError(f"horizon N={self.N} is not a multiple of M={self.M}")

    @property
    def holds(self) -> int:
        return self.N // self.M


@dataclass(frozen=True)
class FeedbackGain:
    """Linear gain for the held policy u = -K x_hold_start."""

    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))
        if not np.all(np.isfinite(self.K)):
            raise ValueError("gain must be finite")


# ---------------------------------------------------------------------------
# uncertainty forward reachable sets
# ---------------------------------------------------------------------------


def error_set(sys: LTISystem, sched: DisturbanceSchedule, k: int) -> Polytope:
    """k-step disturbance reach set: sum_{j<k} A^{k-1-j} E W_{mod(j,M)}."""
    if k < 1:
        raise ValueError("k must be >= 1")
    acc = pg.affine_map(sched.polytope_at(0), sys.E)
    for j in range(1, k):
        step = pg.affine_map(sched.polytope_at(j), sys.E)
        acc = pg.minkowski_sum(pg.affine_map(acc, sys.A), step)
    return acc


def error_sets(sys: LTISystem, sched: DisturbanceSchedule, M: int) -> list[Polytope]:
    """[E_1, ..., E_M] computed incrementally."""
    out = []
    acc = pg.affine_map(sched.polytope_at(0), sys.E)
    out.append(acc)
    for j in range(1, M):
        step = pg.affine_map(sched.polytope_at(j), sys.E)
        acc = pg.minkowski_sum(pg.affine_map(acc, sys.A), step)
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# precursor sets
# ---------------------------------------------------------------------------


def _powers_and_sums(sys: LTISystem, M: int):
    """A^0..A^M and partial sums S_t = sum_{j<=t} A^j B for t = 0..M-1."""
    powers = [np.eye(sys.n)]
    for _ in range(M):
        powers.append(sys.A @ powers[-1])
    sums = [sys.B.copy()]
    for t in range(1, M):
        sums.append(sums[-1] + powers[t] @ sys.B)
    return powers, sums


def _tightened_rhs(H: np.ndarray, h: np.ndarray, sys: LTISystem,
                   sched: DisturbanceSchedule, powers, t: int) -> np.ndarray:
    """h - max over admissible w_0..w_t of H (sum_k A^{t-k} E w_k), per row.

    Without an accumulation band the maximum separates per step into plain
    support-function sums; with one it is a small LP over the whole
    disturbance sequence.
    """
    if H.shape[0] == 0:
        return h.copy()
    if sched.banded and _band_binding(sched, t):
        return h - _banded_deltas(H, sys, sched, powers, t)
    delta = np.zeros(H.shape[0])
    for k in range(t + 1):
        D = H @ powers[t - k] @ sys.E  # rows of support directions
        W = sched.at(k)
        if isinstance(W, Box):
            delta += D @ W.center + np.abs(D) @ W.radius
        else:
            delta += np.array([W.support(d) for d in D])
    return h - delta


def _band_binding(sched: DisturbanceSchedule, t: int) -> bool:
    """False when every per-step extreme sequence stays inside the band."""
    lo = np.zeros(sched.dim)
    hi = np.zeros(sched.dim)
    for k in range(t + 1):
        W = sched.at(k)
        if not isinstance(W, Box):
            return True
        lo += W.lower
        hi += W.upper
    if sched.cum_lower is not None and np.any(lo < sched.cum_lower - 1e-12):
        return True
    if sched.cum_upper is not None and np.any(hi > sched.cum_upper + 1e-12):
        return True
    return False


def _banded_deltas(H: np.ndarray, sys: LTISystem, sched: DisturbanceSchedule,
                   powers, t: int) -> np.ndarray:
    """Row-wise worst case over the banded disturbance sequence (one LP per
    row; the sequence lives in R^{(t+1)*o})."""
    from holdmpc.optim import LinearProgram, solve_lp

    o = sys.o
    nvar = (t + 1) * o
    D = np.empty((H.shape[0], nvar))
    for k in range(t + 1):
        D[:, k * o:(k + 1) * o] = H @ powers[t - k] @ sys.E
    rows = []
    rhs = []
    for k in range(t + 1):
        W = sched.at(k)
        if not isinstance(W, Box):
            raise ValueError("accumulation bands require Box schedule entries")
        blk = np.zeros((2 * o, nvar))
        blk[:o, k * o:(k + 1) * o] = np.eye(o)
        blk[o:, k * o:(k + 1) * o] = -np.eye(o)
        rows.append(blk)
        rhs.append(np.concatenate([W.upper, -W.lower]))
        csum = np.zeros((o, nvar))
        csum[:, : (k + 1) * o] = np.tile(np.eye(o), t + 1)[:, : (k + 1) * o]
        if sched.cum_upper is not None:
            rows.append(csum)
            rhs.append(sched.cum_upper)
        if sched.cum_lower is not None:
            rows.append(-csum)
            rhs.append(-sched.cum_lower)
    G = np.vstack(rows)
    g = np.concatenate(rhs)
    delta = np.empty(H.shape[0])
    for r in range(H.shape[0]):
        if np.abs(D[r]).max(initial=0.0) <= 1e-14:
            delta[r] = 0.0
            continue
        res = solve_lp(LinearProgram(-D[r], G, g), tol=1e-10)
        if res.status != "Optimal":
            # fall back to the bandless (more conservative) bound
            delta[r] = _bandless_delta_row(D[r], sched, t, o)
        else:
            delta[r] = -res.objective
    return delta


def _bandless_delta_row(c: np.ndarray, sched: DisturbanceSchedule,
                        t: int, o: int) -> float:
    total = 0.0
    for k in range(t + 1):
        W = sched.at(k)
        ck = c[k * o:(k + 1) * o]
        total += float(ck @ W.center + np.abs(ck) @ W.radius)
    return total


def _stacked_system(sys: LTISystem, X: Polytope, U: Polytope, S: Polytope,
                    sched: DisturbanceSchedule, M: int):
    """(Hhat, hhat) of the joint (x, u) system before projection."""
    powers, sums = _powers_and_sums(sys, M)
    n, m = sys.n, sys.m
    blocks = []
    rhs = []
    for t in range(M - 1):
        if X.rows:
            blocks.append(np.hstack([X.H @ powers[t + 1], X.H @ sums[t]]))
            rhs.append(_tightened_rhs(X.H, X.h, sys, sched, powers, t))
    if S.rows:
        blocks.append(np.hstack([S.H @ powers[M], S.H @ sums[M - 1]]))
        rhs.append(_tightened_rhs(S.H, S.h, sys, sched, powers, M - 1))
    if U.rows:
        blocks.append(np.hstack([np.zeros((U.rows, n)), U.H]))
        rhs.append(U.h.copy())
    if not blocks:
        return np.zeros((0, n + m)), np.zeros(0)
    return np.vstack(blocks), np.concatenate(rhs)


def pre_m(sys: LTISystem, X: Polytope, U: Polytope, S: Polytope,
          sched: DisturbanceSchedule, M: int) -> Polytope:
    """Robust M-step-hold precursor of S: states from which one held input
    keeps the trajectory in X for steps 1..M-1 and lands x_M in S for every
    disturbance realization.

    An empty result is a valid return, not an error.
    """
    _check_pre_args(sys, X, U, S, sched, M)
    if S.is_empty():
        return Polytope.empty(sys.n)
    Hhat, hhat = _stacked_system(sys, X, U, S, sched, M)
    if Hhat.shape[0] == 0:
        return Polytope.universe(sys.n)
    joint = Polytope(Hhat, hhat, dim=sys.n + sys.m)
    return pg.project(joint, list(range(sys.n)))


def pre_pi_m(sys: LTISystem, X: Polytope, U: Polytope, S: Polytope,
             sched: DisturbanceSchedule, M: int, gain: FeedbackGain) -> Polytope:
    """Closed-loop precursor under the held policy u = -K x; no projection."""
    _check_pre_args(sys, X, U, S, sched, M)
    if S.is_empty():
        return Polytope.empty(sys.n)
    K = gain.K
    if K.shape != (sys.m, sys.n):
        raise ValueError(f"gain must be {sys.m}x{sys.n}")
    powers, sums = _powers_and_sums(sys, M)
    blocks = []
    rhs = []
    for t in range(M - 1):
        if X.rows:
            blocks.append(X.H @ (powers[t + 1] - sums[t] @ K))
            rhs.append(_tightened_rhs(X.H, X.h, sys, sched, powers, t))
    if S.rows:
        blocks.append(S.H @ (powers[M] - sums[M - 1] @ K))
        rhs.append(_tightened_rhs(S.H, S.h, sys, sched, powers, M - 1))
    if U.rows:
        blocks.append(-U.H @ K)
        rhs.append(U.h.copy())
    if not blocks:
        return Polytope.universe(sys.n)
    out = Polytope(np.vstack(blocks), np.concatenate(rhs), dim=sys.n)
    return pg.minimize(out)


def _check_pre_args(sys, X, U, S, sched, M):
    if X.dim != sys.n or S.dim != sys.n:
        raise pg.DimensionMismatch("X and S must live in the state space")
    if U.dim != sys.m:
        raise pg.DimensionMismatch("U must live in the input space")
    if sched.dim != sys.o:
        raise pg.DimensionMismatch("schedule dimension must match E columns")
    if len(sched) < M:
        raise ValueError(f"schedule provides {len(sched)} sets, M={M} needed")


# ---------------------------------------------------------------------------
# controllable and invariant sets
# ---------------------------------------------------------------------------


def controllable_set(sys: LTISystem, X: Polytope, U: Polytope, target: Polytope,
                     sched: DisturbanceSchedule, M: int, steps: int) -> list[Polytope]:
    """[K_0, K_M, ..., K_steps], K_i = Pre^M(K_{i-M}) intersect X, K_0 = target."""
    if steps % M != 0:
        raise ValueError("steps must be a multiple of M")
    out = [pg.minimize(target)]
    for _ in range(steps // M):
        nxt = pg.intersect(pre_m(sys, X, U, out[-1], sched, M), X)
        out.append(nxt)
    return out


def max_control_invariant(sys: LTISystem, X: Polytope, U: Polytope,
                          sched: DisturbanceSchedule, M: int,
                          max_iters: int = 500) -> Polytope:
    """Fixed point of Omega <- Pre^M(Omega) intersect Omega from Omega_0 = X."""
    return _fixed_point(lambda S: pre_m(sys, X, U, S, sched, M), X, max_iters)


def max_positive_invariant(sys: LTISystem, X: Polytope, U: Polytope,
                           sched: DisturbanceSchedule, M: int, gain: FeedbackGain,
                           max_iters: int = 500) -> Polytope:
    """As max_control_invariant but under the fixed held policy u = -K x."""
    return _fixed_point(lambda S: pre_pi_m(sys, X, U, S, sched, M, gain), X, max_iters)


def _fixed_point(pre, X: Polytope, max_iters: int) -> Polytope:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    omega = pg.minimize(X)
    for _ in range(max_iters):
        nxt = pg.intersect(pre(omega), omega)
        if pg.set_equal(nxt, omega):
            return _canonicalize_degenerate(nxt)
        if nxt.is_empty():
            return nxt
        omega = nxt
    raise NoConvergence(max_iters, omega)


def _canonicalize_degenerate(p: Polytope) -> Polytope:
    """A converged invariant set indistinguishable from {0} at the equality
    tolerance collapses to the canonical empty set."""
    if p.is_empty():
        return p
    eps = pg.TOLS.containment
    for j in range(p.dim):
        e = np.zeros(p.dim)
        e[j] = 1.0
        if p.support(e) > eps or p.support(-e) > eps:
            return p
    return Polytope.empty(p.dim)


# ---------------------------------------------------------------------------
# set-family archives
# ---------------------------------------------------------------------------


def system_hash(sys: LTISystem) -> str:
    hsh = hashlib.sha256()
    for Mtx in (sys.A, sys.B, sys.E):
        hsh.update(np.ascontiguousarray(Mtx, dtype=float).tobytes())
    hsh.update(np.float64(sys.ts).tobytes())
    return hsh.hexdigest()[:16]


def write_archive(path, slices: Sequence[Polytope], manifest: dict) -> None:
    """Write a slice family: a `manifest` file plus slice_<i>.hpoly files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["slices"] = len(slices)
    lines = [f"{k} {v}" for k, v in manifest.items()]
    (root / "manifest").write_text("\n".join(lines) + "\n")
    for i, poly in enumerate(slices):
        (root / f"slice_{i}.hpoly").write_text(poly.to_text())


def read_archive(path):
    """Read a slice family; returns (slices, manifest dict of strings)."""
    root = Path(path)
    manifest = {}
    for line in (root / "manifest").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(" ")
            manifest[k] = v
    count = int(manifest["slices"])
    slices = [Polytope.from_text((root / f"slice_{i}.hpoly").read_text())
              for i in range(count)]
    return slices, manifest
