"""Dense LP/QP solvers built on a primal-dual interior-point method.

One Mehrotra-style predictor-corrector code path handles both linear
programs (zero Hessian) and convex quadratic programs.  Problems here are
tiny (a handful of variables, tens of rows), so everything is dense and
the KKT systems are solved with plain LAPACK factorizations.

Status classification:

  * ``Optimal``        KKT residuals below tolerance, primal/dual pair returned.
  * ``Infeasible``     a Farkas certificate ``y`` is returned with
                       ``y >= 0``, ``y^T G = 0`` and ``y^T g < 0``.
  * ``Unbounded``      a ray ``d`` with ``G d <= 0`` and ``c^T d < 0`` is returned.
  * ``IterationLimit`` the iteration cap was hit without a verdict; callers
                       treat this as an ill-conditioning signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap

DEFAULT_TOL = 1e-8

# Box used to keep the infeasibility-diagnosis LP bounded; its rows must be
# inactive at the violation minimizer for the certificate to be clean, which
# holds for any problem whose data is far below this scale.
_DIAG_BOX = 1e7


class NonConvexError(ValueError):
    """Hessian failed the positive-semidefiniteness check."""


@dataclass(frozen=True)
class LinearProgram:
    """min c^T x  s.t.  G x <= g,  F x = f (optional)."""

    c: np.ndarray
    G: np.ndarray
    g: np.ndarray
    F: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "g", np.atleast_1d(np.asarray(self.g, dtype=float)))
        d = self.c.shape[0]
        if self.G.size == 0:
            object.__setattr__(self, "G", np.zeros((0, d)))
            object.__setattr__(self, "g", np.zeros(0))
        if self.G.shape[1] != d:
            raise ValueError(f"G has {self.G.shape[1]} columns, expected {d}")
        if self.G.shape[0] != self.g.shape[0]:
            raise ValueError("row counts of G and g differ")
        if self.F is not None:
            object.__setattr__(self, "F", np.atleast_2d(np.asarray(self.F, dtype=float)))
            object.__setattr__(self, "f", np.atleast_1d(np.asarray(self.f, dtype=float)))
            if self.F.shape[1] != d or self.F.shape[0] != self.f.shape[0]:
                raise ValueError("equality system shape mismatch")

    @property
    def dim(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class QuadraticProgram:
    """min 0.5 x^T P x + c^T x  s.t.  G x <= g,  F x = f (optional).

    P must be symmetric PSD (1e-12 relative symmetry tolerance, minimum
    eigenvalue >= -1e-9).
    """

    P: np.ndarray
    c: np.ndarray
    G: np.ndarray
    g: np.ndarray
    F: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "P", np.atleast_2d(np.asarray(self.P, dtype=float)))
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "g", np.atleast_1d(np.asarray(self.g, dtype=float)))
        d = self.c.shape[0]
        if self.P.shape != (d, d):
            raise ValueError(f"Hessian must be {d}x{d}")
        if self.G.size == 0:
            object.__setattr__(self, "G", np.zeros((0, d)))
            object.__setattr__(self, "g", np.zeros(0))
        if self.G.shape[1] != d or self.G.shape[0] != self.g.shape[0]:
            raise ValueError("inequality system shape mismatch")
        if self.F is not None:
            object.__setattr__(self, "F", np.atleast_2d(np.asarray(self.F, dtype=float)))
            object.__setattr__(self, "f", np.atleast_1d(np.asarray(self.f, dtype=float)))
            if self.F.shape[1] != d or self.F.shape[0] != self.f.shape[0]:
                raise ValueError("equality system shape mismatch")
        scale = max(1.0, float(np.abs(self.P).max(initial=0.0)))
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-12 * scale:
            raise NonConvexError("Hessian is not symmetric")
        if d and np.linalg.eigvalsh(0.5 * (self.P + self.P.T)).min() < -1e-9:
            raise NonConvexError("Hessian has negative eigenvalues")

    @property
    def dim(self) -> int:
        return self.c.shape[0]


@dataclass
class SolveResult:
    status: str  # Optimal | Infeasible | Unbounded | IterationLimit
    x: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None           # inequality multipliers (>= 0)
    y_eq: Optional[np.ndarray] = None        # equality multipliers (free sign)
    objective: Optional[float] = None
    residual_primal: float = np.inf
    residual_dual: float = np.inf
    residual_comp: float = np.inf
    iterations: int = 0
    certificate: Optional[np.ndarray] = None  # Farkas multipliers or unbounded ray

    @property
    def optimal(self) -> bool:
        return self.status == "Optimal"


# ---------------------------------------------------------------------------
# core predictor-corrector iteration
# ---------------------------------------------------------------------------


@njit(cache=True)
def _max_step(v, dv):
    """Largest alpha in (0, 1] with v + alpha*dv >= 0 (v > 0)."""
    a = 1.0
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            cand = -v[i] / dv[i]
            if cand < a:
                a = cand
    return a


@njit(cache=True)
def _abs_max(v):
    out = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i])
        if a > out:
            out = a
    return out


@njit(cache=True)
def _newton_solve(H, F, r1, r2, reg):
    """Solve [H F^T; F -reg I][dx;dy] = [r1;r2] with H made PD by reg.

    Returns (dx, dy, ok); ok is False when the system is numerically
    unusable (non-finite entries from extreme barrier weights).
    """
    d = H.shape[0]
    me = F.shape[0]
    A = H.copy()
    for i in range(d):
        A[i, i] += reg
        for j in range(d):
            if not np.isfinite(A[i, j]):
                return np.zeros(d), np.zeros(me), False
    for i in range(d):
        if not np.isfinite(r1[i]):
            return np.zeros(d), np.zeros(me), False
    if me == 0:
        return np.linalg.solve(A, r1), np.zeros(0), True
    Ainv_r1 = np.linalg.solve(A, r1)
    Ainv_Ft = np.linalg.solve(A, F.T.copy())
    S = F @ Ainv_Ft
    for i in range(me):
        S[i, i] += reg
    dy = np.linalg.solve(S, F @ Ainv_r1 - r2)
    dx = Ainv_r1 - Ainv_Ft @ dy
    return dx, dy, True


@njit(cache=True)
def _ipm_core(P, c, G, g, F, f, tol, max_iter):
    """Infeasible-start Mehrotra predictor-corrector; m >= 1 inequality rows.

    Returns (code, x, z, y, s, res_p, res_d, res_c, iters) with code
    0=converged, 1=maxiter, 2=diverged.
    """
    d = c.shape[0]
    m = G.shape[0]
    me = F.shape[0]

    scale_g = 1.0 + _abs_max(g)
    scale_c = 1.0 + _abs_max(c)
    scale_f = 1.0 + _abs_max(f)

    if me > 0:
        x = np.linalg.lstsq(F, f)[0]
    else:
        x = np.zeros(d)
    s = g - G @ x + 1.0
    for i in range(m):
        if s[i] < 1.0:
            s[i] = 1.0
    z = np.ones(m)
    y = np.zeros(me)

    best_score = 1e300
    bx = x.copy()
    bz = z.copy()
    by = y.copy()
    bs = s.copy()
    brp = 1e300
    brd = 1e300
    brc = 1e300
    bit = 0
    code = 1
    it = 0

    for it in range(1, max_iter + 1):
        rd = P @ x + c + G.T @ z
        if me > 0:
            rd = rd + F.T @ y
        rp = G @ x + s - g
        rq = F @ x - f if me > 0 else np.zeros(0)
        mu = (s @ z) / m

        res_p = _abs_max(rp) / scale_g
        if me > 0:
            rq_n = _abs_max(rq) / scale_f
            if rq_n > res_p:
                res_p = rq_n
        res_d = _abs_max(rd) / scale_c
        res_c = mu / (1.0 + abs(0.5 * (x @ (P @ x)) + c @ x))

        score = max(res_p, max(res_d, res_c))
        if score < best_score:
            best_score = score
            bx = x.copy()
            bz = z.copy()
            by = y.copy()
            bs = s.copy()
            brp = res_p
            brd = res_d
            brc = res_c
            bit = it - 1

        if res_p <= tol and res_c <= tol and res_d <= tol:
            return (0, x, z, y, s, res_p, res_d, res_c, it - 1)

        # divergence heuristics: exploding multipliers or corrupted iterates
        if _abs_max(z) > 1e13 or mu > 1e16:
            code = 2
            break
        finite = True
        for i in range(d):
            if not np.isfinite(x[i]):
                finite = False
        for i in range(m):
            if not (np.isfinite(z[i]) and np.isfinite(s[i])):
                finite = False
        if not finite:
            code = 2
            break

        zdivs = z / s
        for i in range(m):
            if zdivs[i] > 1e14:
                zdivs[i] = 1e14
        H = P + (G.T * zdivs) @ G
        # relative regularization keeps the Newton matrix invertible even
        # with extreme barrier weights
        habs = 0.0
        for i in range(d):
            for j in range(d):
                a_ = abs(H[i, j])
                if a_ > habs:
                    habs = a_
        reg = 1e-14 * (1.0 + habs)

        # affine (predictor) direction
        rg_hat = rp - s  # from Z ds + S dz = -ZSe  =>  ds = -s - (s/z) dz
        r1 = -rd - G.T @ (zdivs * rg_hat)
        dx_a, dy_a, ok = _newton_solve(H, F, r1, -rq, reg)
        if not ok:
            code = 2
            break
        dz_a = zdivs * (G @ dx_a + rp) - z
        ds_a = -(s * z + s * dz_a) / z

        a_p = _max_step(s, ds_a)
        a_d = _max_step(z, dz_a)
        mu_aff = ((s + a_p * ds_a) @ (z + a_d * dz_a)) / m
        sigma = 0.1
        if mu > 0.0:
            ratio = mu_aff / mu
            if ratio < 0.0:
                ratio = 0.0
            if ratio > 1.0:
                ratio = 1.0
            sigma = ratio ** 3

        # corrector
        rc = s * z + ds_a * dz_a - sigma * mu
        rg_hat = rp - rc / z
        r1 = -rd - G.T @ (zdivs * rg_hat)
        dx, dy, ok = _newton_solve(H, F, r1, -rq, reg)
        if not ok:
            code = 2
            break
        dz = zdivs * (G @ dx + rp) - rc / s
        ds = -(rc + s * dz) / z

        a_p = 0.99 * _max_step(s, ds)
        a_d = 0.99 * _max_step(z, dz)
        x = x + a_p * dx
        s = s + a_p * ds
        z = z + a_d * dz
        y = y + a_d * dy
        for i in range(m):
            if s[i] < 1e-300:
                s[i] = 1e-300
            if z[i] < 1e-300:
                z[i] = 1e-300

    return (code, bx, bz, by, bs, brp, brd, brc, it)


def _ipm(P, c, G, g, F, f, tol, max_iter):
    """Wrapper around the compiled core; handles the no-inequality case and
    maps the status code to a verdict string."""
    d = c.shape[0]
    m = G.shape[0]
    Fa = np.zeros((0, d)) if F is None else np.asarray(F, dtype=float)
    fa = np.zeros(0) if f is None else np.asarray(f, dtype=float)

    if m == 0:
        # equality-constrained / unconstrained: one KKT solve decides
        me = Fa.shape[0]
        K = np.zeros((d + me, d + me))
        K[:d, :d] = P
        K[:d, d:] = Fa.T
        K[d:, :d] = Fa
        rhs = np.concatenate([-c, fa])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x, y = sol[:d], sol[d:]
        rd = _abs_max_py(P @ x + c + (Fa.T @ y if me else 0.0))
        rq = _abs_max_py(Fa @ x - fa) if me else 0.0
        ok = rd <= tol * (1 + _abs_max_py(c)) and rq <= tol * (1 + _abs_max_py(fa))
        verdict = "converged" if ok else "diverged"
        return (verdict, x, np.zeros(0), y, np.zeros(0), rq, rd, 0.0, 1)

    try:
        code, x, z, y, s, rp, rdn, rc, its = _ipm_core(
            np.ascontiguousarray(P, dtype=float),
            np.ascontiguousarray(c, dtype=float),
            np.ascontiguousarray(G, dtype=float),
            np.ascontiguousarray(g, dtype=float),
            np.ascontiguousarray(Fa, dtype=float),
            np.ascontiguousarray(fa, dtype=float),
            float(tol), int(max_iter))
    except np.linalg.LinAlgError:
        return ("diverged", np.zeros(d), np.ones(m), np.zeros(Fa.shape[0]),
                np.ones(m), np.inf, np.inf, np.inf, 0)
    verdict = {0: "converged", 1: "maxiter", 2: "diverged"}[code]
    return (verdict, x, z, y, s, rp, rdn, rc, its)


def _abs_max_py(v):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return float(np.abs(v).max(initial=0.0))


# ---------------------------------------------------------------------------
# preprocessing and diagnosis
# ---------------------------------------------------------------------------


def _clean_rows(G, g, tol):
    """Drop numerically zero rows; g < 0 on a zero row proves infeasibility.

    Returns (G, g, keep_index, infeasible_row or None).
    """
    if G.shape[0] == 0:
        return G, g, np.zeros(0, dtype=int), None
    norms = np.abs(G).max(axis=1, initial=0.0)
    zero = norms <= 1e-14
    bad = zero & (g < -tol)
    if np.any(bad):
        return G, g, np.arange(G.shape[0]), int(np.nonzero(bad)[0][0])
    keep = np.nonzero(~zero)[0]
    return G[keep], g[keep], keep, None


def _diagnose_infeasible(G, g, F, f, tol, max_iter):
    """Minimize the worst constraint violation; positive optimum means the
    system is infeasible and the dual multipliers are a Farkas certificate.

    Equalities are folded in as double-sided inequalities so one certificate
    covers the full system.
    """
    if F is not None and F.shape[0]:
        G = np.vstack([G, F, -F])
        g = np.concatenate([g, f, -f])
    m, d = G.shape
    # variables (x, t): G x - t <= g, |x_j| <= box
    A = np.hstack([G, -np.ones((m, 1))])
    box = np.vstack([np.eye(d), -np.eye(d)])
    A = np.vstack([A, np.hstack([box, np.zeros((2 * d, 1))])])
    b = np.concatenate([g, np.full(2 * d, _DIAG_BOX)])
    cc = np.zeros(d + 1)
    cc[-1] = 1.0
    verdict, x, z, _, _, _, _, _, _ = _ipm(
        np.zeros((d + 1, d + 1)), cc, A, b, None, None, 1e-9,
        max(max_iter, 100))
    if verdict != "converged":
        return None, None
    t_star = x[-1]
    cert = z[:m]
    return float(t_star), cert


def _diagnose_unbounded(P, c, G, F, tol, max_iter):
    """Look for a recession direction d: G d <= 0, F d = 0, P d = 0, c^T d < 0."""
    d = c.shape[0]
    rows = [G] if G.shape[0] else []
    if F is not None and F.shape[0]:
        rows += [F, -F]
    if np.abs(P).max(initial=0.0) > 0:
        rows += [P, -P]
    rows.append(np.eye(d))
    rows.append(-np.eye(d))
    A = np.vstack(rows)
    b = np.concatenate([np.zeros(A.shape[0] - 2 * d), np.ones(2 * d)])
    verdict, xr, _, _, _, _, _, _, _ = _ipm(
        np.zeros((d, d)), c, A, b, None, None, 1e-9, max(max_iter, 100))
    if verdict == "converged" and c @ xr < -10 * tol:
        return xr
    return None


def default_iteration_cap(dim: int, rows: int) -> int:
    """Caller-overridable default: 10 * d * rows, clamped to a sane band."""
    return int(min(500, max(25, 10 * max(dim, 1) * max(rows, 1))))


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _row_normalize(G: np.ndarray, g: np.ndarray):
    """Unit-norm rows for conditioning; returns (G, g, scale)."""
    if G.shape[0] == 0:
        return G, g, np.zeros(0)
    r = np.linalg.norm(G, axis=1)
    r = np.where(r > 0, r, 1.0)
    return G / r[:, None], g / r, r


def solve_lp(lp: LinearProgram, tol: float = DEFAULT_TOL,
             max_iter: Optional[int] = None) -> SolveResult:
    """Solve a dense LP; see module docstring for the status contract."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = lp.dim
    G, g, keep, bad = _clean_rows(lp.G, lp.g, tol)
    if bad is not None:
        cert = np.zeros(lp.G.shape[0])
        cert[bad] = 1.0
        return SolveResult(status="Infeasible", certificate=cert)
    if max_iter is None:
        max_iter = default_iteration_cap(d, G.shape[0] + (0 if lp.F is None else lp.F.shape[0]))

    if G.shape[0] == 0 and (lp.F is None or lp.F.shape[0] == 0):
        if np.abs(lp.c).max(initial=0.0) <= tol:
            return SolveResult(status="Optimal", x=np.zeros(d), z=np.zeros(0),
                               objective=0.0, residual_primal=0.0,
                               residual_dual=0.0, residual_comp=0.0)
        ray = -lp.c / np.abs(lp.c).max()
        return SolveResult(status="Unbounded", certificate=ray)

    Gn, gn, rsc = _row_normalize(G, g)
    verdict, x, z, y, s, rp, rd, rc, its = _ipm(
        np.zeros((d, d)), lp.c, Gn, gn, lp.F, lp.f, tol, max_iter)
    zfull = np.zeros(lp.G.shape[0])
    if z.shape[0] == rsc.shape[0]:
        zfull[keep] = z / rsc
    if verdict == "converged":
        return SolveResult(status="Optimal", x=x, z=zfull, y_eq=y,
                           objective=float(lp.c @ x), residual_primal=rp,
                           residual_dual=rd, residual_comp=rc, iterations=its)
    res = _classify_failure(np.zeros((d, d)), lp.c, G, g, lp.F, lp.f, keep,
                            lp.G.shape[0], tol, max_iter, its)
    if res.status == "IterationLimit":
        res.x, res.z, res.y_eq = x, zfull, y
        res.objective = float(lp.c @ x)
        res.residual_primal, res.residual_dual, res.residual_comp = rp, rd, rc
    return res


def solve_qp(qp: QuadraticProgram, tol: float = DEFAULT_TOL,
             max_iter: Optional[int] = None) -> SolveResult:
    """Solve a dense convex QP; see module docstring for the status contract."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = qp.dim
    G, g, keep, bad = _clean_rows(qp.G, qp.g, tol)
    if bad is not None:
        cert = np.zeros(qp.G.shape[0])
        cert[bad] = 1.0
        return SolveResult(status="Infeasible", certificate=cert)
    if max_iter is None:
        max_iter = default_iteration_cap(d, G.shape[0] + (0 if qp.F is None else qp.F.shape[0]))

    if G.shape[0] == 0 and (qp.F is None or qp.F.shape[0] == 0):
        # unconstrained: stationary point if one exists
        xs, residual, *_ = np.linalg.lstsq(qp.P, -qp.c, rcond=None)
        grad = qp.P @ xs + qp.c
        if np.abs(grad).max(initial=0.0) > 1e-6 * (1 + np.abs(qp.c).max(initial=0.0)):
            ray = _diagnose_unbounded(qp.P, qp.c, np.zeros((0, d)), None, tol, max_iter)
            return SolveResult(status="Unbounded", certificate=ray)
        return SolveResult(status="Optimal", x=xs, z=np.zeros(0),
                           objective=float(0.5 * xs @ (qp.P @ xs) + qp.c @ xs),
                           residual_primal=0.0,
                           residual_dual=float(np.abs(grad).max(initial=0.0)),
                           residual_comp=0.0)

    Gn, gn, rsc = _row_normalize(G, g)
    verdict, x, z, y, s, rp, rd, rc, its = _ipm(
        qp.P, qp.c, Gn, gn, qp.F, qp.f, tol, max_iter)
    zfull = np.zeros(qp.G.shape[0])
    if z.shape[0] == rsc.shape[0]:
        zfull[keep] = z / rsc
    if verdict == "converged":
        return SolveResult(status="Optimal", x=x, z=zfull, y_eq=y,
                           objective=float(0.5 * x @ (qp.P @ x) + qp.c @ x),
                           residual_primal=rp, residual_dual=rd,
                           residual_comp=rc, iterations=its)
    res = _classify_failure(qp.P, qp.c, G, g, qp.F, qp.f, keep,
                            qp.G.shape[0], tol, max_iter, its)
    if res.status == "IterationLimit":
        res.x, res.z, res.y_eq = x, zfull, y
        res.objective = float(0.5 * x @ (qp.P @ x) + qp.c @ x)
        res.residual_primal, res.residual_dual, res.residual_comp = rp, rd, rc
    return res


def _classify_failure(P, c, G, g, F, f, keep, m_orig, tol, max_iter, its):
    t_star, cert = _diagnose_infeasible(G, g, F, f, tol, max_iter)
    # the diagnosis LP itself is solved to ~1e-9, so the verdict threshold
    # must sit above that accuracy regardless of the caller's tolerance
    if t_star is not None and t_star > max(10 * tol, 5e-9):
        full = np.zeros(m_orig)
        full[keep] = cert[: G.shape[0]]
        return SolveResult(status="Infeasible", certificate=full, iterations=its)
    ray = _diagnose_unbounded(P, c, G, F, tol, max_iter)
    if ray is not None:
        return SolveResult(status="Unbounded", certificate=ray, iterations=its)
    return SolveResult(status="IterationLimit", iterations=its)


def check_kkt(qp: QuadraticProgram, result: SolveResult) -> dict:
    """Recompute KKT residuals from the returned primal/dual pair.

    Independent of the solver's internal bookkeeping; used to audit
    self-reported residuals.
    """
    x, z = result.x, result.z
    rd = qp.P @ x + qp.c + qp.G.T @ z
    if qp.F is not None and result.y_eq is not None:
        rd = rd + qp.F.T @ result.y_eq
    slack = qp.g - qp.G @ x
    out = {
        "stationarity": float(np.abs(rd).max(initial=0.0)),
        "primal": float(np.maximum(-slack, 0.0).max(initial=0.0)),
        "dual": float(np.maximum(-z, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(z * slack).max(initial=0.0)),
    }
    if qp.F is not None:
        out["primal_eq"] = float(np.abs(qp.F @ x - qp.f).max(initial=0.0))
    return out


def verify_farkas(G: np.ndarray, g: np.ndarray, cert: np.ndarray,
                  tol: float = 1e-6) -> bool:
    """True iff cert is a valid infeasibility certificate for G x <= g."""
    if cert is None:
        return False
    y = np.asarray(cert, dtype=float)
    if y.min(initial=0.0) < -tol:
        return False
    scale = 1.0 + float(np.abs(y).max(initial=0.0)) * (
        1.0 + float(np.abs(G).max(initial=0.0)))
    if np.abs(G.T @ y).max(initial=0.0) > tol * scale:
        return False
    return float(y @ g) < -tol
