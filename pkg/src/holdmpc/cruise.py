"""Adaptive cruise control case study.

Front (uncontrolled) and ego cars as double integrators with state
x = [d, v1, v0]: following distance, ego velocity, front velocity.  The
front acceleration w is a switched uncertainty: the bounds collapse to
zero at the velocity limits so the front car respects them too.

Offline, two families of fixed-front-velocity slices of the hold-invariant
set are computed: the lower family robustifies against full braking, the
upper family against full acceleration.  Online, the slice pair bracketing
the reachable front velocities after one hold is intersected and used as
the MPC reach target.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from holdmpc import mpc
from holdmpc import polytope as pg
from holdmpc import sets as st
from holdmpc.polytope import Box, Polytope
from holdmpc.sets import DisturbanceSchedule, HoldConfig, LTISystem

log = logging.getLogger(__name__)

SLAB_EPS = 1e-9  # half-width of fixed-velocity slabs


class EmptySlice(RuntimeError):
    """A slice family iterate came out empty: infeasible parameterization."""


@dataclass(frozen=True)
class CruiseParams:
    """Model and control parameters; defaults follow the case-study table."""

    d_min: float = 5.0
    d_max: float = 100.0
    v_min: float = 0.0
    v_max: float = 40.0
    u_min: float = -4.0
    u_max: float = 4.0
    w_min: float = -4.0
    w_max: float = 4.0
    Ts: float = 0.1
    M: tuple = (1, 5, 10)
    N: int = 10
    Q_diag: tuple = (10.0, 0.0, 0.0)
    R: float = 1.0
    x0: tuple = (70.0, 30.0, 25.0)

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if not (self.u_min < 0.0 < self.u_max):
            raise ValueError("input bounds must straddle zero")
        if not (self.w_min < 0.0 < self.w_max):
            raise ValueError("uncertainty bounds must straddle zero")
        object.__setattr__(self, "M", tuple(np.atleast_1d(self.M).astype(int)))
        object.__setattr__(self, "Q_diag", tuple(float(q) for q in self.Q_diag))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.Q_diag)

    @property
    def P(self) -> np.ndarray:
        return np.diag(self.Q_diag)

    @property
    def R_mat(self) -> np.ndarray:
        return np.array([[float(self.R)]])


def build_system(p: CruiseParams) -> LTISystem:
    """Coupled double-integrator model in (d, v1, v0) coordinates."""
    Ts = p.Ts
    if Ts == 0.0:
        warnings.warn("Ts = 0 gives a frozen system (A = I, B = E = 0)")
    A = np.array([[1.0, -Ts, Ts], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    B = np.array([[-0.5 * Ts ** 2], [Ts], [0.0]])
    E = np.array([[0.5 * Ts ** 2], [0.0], [Ts]])
    return LTISystem(A, B, E, ts=Ts)


def state_set(p: CruiseParams) -> Polytope:
    """X: distance and ego-velocity bounds (front velocity unconstrained)."""
    H = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    h = np.array([p.d_max, -p.d_min, p.v_max, -p.v_min])
    return Polytope(H, h)


def input_set(p: CruiseParams) -> Polytope:
    return Box([p.u_min], [p.u_max]).polytope()


def velocity_slab(p: CruiseParams, v: float) -> Polytope:
    """X with the front velocity pinned to v (paired halfspaces, tiny slack)."""
    X = state_set(p)
    H = np.vstack([X.H, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
    h = np.concatenate([X.h, [v + SLAB_EPS, -v + SLAB_EPS]])
    return Polytope(H, h)


def switched_bounds(v0: float, p: CruiseParams) -> Box:
    """Front-acceleration box; collapses one side at the velocity limits."""
    w_l = 0.0 if v0 <= p.v_min else p.w_min
    w_h = 0.0 if v0 >= p.v_max else p.w_max
    return Box([w_l], [w_h])


def interior_schedule(p: CruiseParams, M: int) -> DisturbanceSchedule:
    """Worst case over the switch: the interior box, every step."""
    return DisturbanceSchedule.constant(Box([p.w_min], [p.w_max]), M)


def _snap_to_slab(poly: Polytope, v: float) -> Polytope:
    """Canonicalize a slice onto its fixed-velocity slab.

    Every slice lives on a known v0 plane; substituting v0 = v into the
    mixed rows and re-imposing a fresh slab pair stops the 1e-9 slab width
    from eroding across iterations.  Substituted rows are shrunk by the
    worst-case slack so the canonical form never grows the set.
    """
    if poly.is_empty():
        return poly
    rows, rhs = [], []
    for a, b in zip(poly.H, poly.h):
        a2 = a.copy()
        a2[2] = 0.0
        if np.linalg.norm(a2) > 1e-10:
            rows.append(a2)
            rhs.append(b - a[2] * v - abs(a[2]) * SLAB_EPS)
    rows += [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]
    rhs += [v + SLAB_EPS, -v + SLAB_EPS]
    return pg.minimize(Polytope(np.array(rows), np.array(rhs)))


@dataclass
class SliceFamily:
    """Slice families of the hold-invariant set, indexed by front velocity.

    Lower-family position j sits at lower_base + j*lower_step (base v_min,
    step -M*Ts*w_min > 0); upper-family position j at upper_base +
    j*upper_step (base v_max, step -M*Ts*w_max < 0).
    """

    lower: list
    upper: list
    M: int
    lower_base: float
    lower_step: float
    upper_base: float
    upper_step: float
    _online_cache: dict = field(default_factory=dict, repr=False)

    def lower_velocity(self, pos: int) -> float:
        return self.lower_base + pos * self.lower_step

    def upper_velocity(self, pos: int) -> float:
        return self.upper_base + pos * self.upper_step


def offline_families(p: CruiseParams, M: int,
                     max_iters: int = 500) -> SliceFamily:
    """Compute both slice families for hold length M.

    Each family starts from a nominal fixed point at the extreme front
    velocity and iterates the held-input precursor across the velocity
    range under the corresponding extreme front acceleration.
    """
    sysm = build_system(p)
    X = state_set(p)
    U = input_set(p)
    lower = _family(sysm, X, U, p, M, start_v=p.v_min, w_extreme=p.w_min,
                    ascending=True, max_iters=max_iters)
    upper = _family(sysm, X, U, p, M, start_v=p.v_max, w_extreme=p.w_max,
                    ascending=False, max_iters=max_iters)
    return SliceFamily(lower=lower, upper=upper, M=M,
                       lower_base=p.v_min, lower_step=-M * p.Ts * p.w_min,
                       upper_base=p.v_max, upper_step=-M * p.Ts * p.w_max)


def _family(sysm, X, U, p, M, start_v, w_extreme, ascending, max_iters):
    sched0 = DisturbanceSchedule.singleton([0.0], M)
    sched_w = DisturbanceSchedule.singleton([w_extreme], M)
    # nominal fixed point on the start slab
    omega = _snap_to_slab(pg.minimize(velocity_slab(p, start_v)), start_v)
    for it in range(max_iters):
        nxt = _snap_to_slab(
            pg.intersect(st.pre_m(sysm, X, U, omega, sched0, M), omega), start_v)
        if nxt.is_empty():
            raise EmptySlice(f"nominal fixed point emptied at v={start_v}")
        if pg.set_equal(nxt, omega):
            omega = nxt
            break
        omega = nxt
    else:
        raise st.NoConvergence(max_iters, omega)
    family = [omega]
    step = -M * p.Ts * w_extreme
    span = abs(p.v_max - p.v_min)
    i = 0
    while True:
        v_prev = start_v + i * step
        if ascending and not v_prev < p.v_max - 1e-9 * span:
            break
        if not ascending and not v_prev > p.v_min + 1e-9 * span:
            break
        i += 1
        v = start_v + i * step
        nxt = _snap_to_slab(
            pg.intersect(st.pre_m(sysm, X, U, family[-1], sched_w, M), X), v)
        if nxt.is_empty():
            raise EmptySlice(f"family slice emptied at v={v}")
        family.append(nxt)
    return family


def extrude_slice(poly: Polytope) -> Polytope:
    """Drop the v0 slab pair, leaving the (d, v1) content free along v0.

    Slices are canonicalized to v0-free rows plus the slab pair, so this is
    a row filter, not a projection.
    """
    keep = np.abs(poly.H[:, 2]) <= 1e-12
    return Polytope(poly.H[keep], poly.h[keep], dim=3)


def online_slice(fam: SliceFamily, v0_now: float, p: CruiseParams) -> Polytope:
    """Conservative reach-target slice for the current front velocity.

    Brackets the front velocity reachable after one hold, underestimating
    toward the lower family and overestimating toward the upper family,
    then intersects the (d, v1) content of the two bracketing slices.  The
    result is free along v0: robustness to the front velocity is carried by
    the bracketing itself, not by tube tightening.
    """
    if not (p.v_min - 1e-9 <= v0_now <= p.v_max + 1e-9):
        raise ValueError(f"front velocity {v0_now} outside [{p.v_min}, {p.v_max}]")
    l_pos, h_pos = _slice_positions(fam, v0_now, p, warn=True)
    key = (l_pos, h_pos)
    cached = fam._online_cache.get(key)
    if cached is None:
        cached = pg.intersect(extrude_slice(fam.lower[l_pos]),
                              extrude_slice(fam.upper[h_pos]))
        fam._online_cache[key] = cached
    return cached


def _slice_positions(fam: SliceFamily, v0_now: float, p: CruiseParams,
                     warn: bool = False):
    M = fam.M
    v_lo = v0_now + M * p.Ts * p.w_min
    v_hi = v0_now + M * p.Ts * p.w_max
    # largest lower slice velocity below v_lo, smallest upper above v_hi
    l_pos = max(0, math.floor((v_lo - fam.lower_base) / fam.lower_step + 1e-9))
    h_pos = max(0, math.floor((v_hi - fam.upper_base) / fam.upper_step + 1e-9))
    if l_pos >= len(fam.lower):
        if warn:
            log.warning("lower slice index %d beyond stored family (%d); clamping",
                        l_pos, len(fam.lower))
        l_pos = len(fam.lower) - 1
    if h_pos >= len(fam.upper):
        if warn:
            log.warning("upper slice index %d beyond stored family (%d); clamping",
                        h_pos, len(fam.upper))
        h_pos = len(fam.upper) - 1
    return l_pos, h_pos


def slice_indices(fam: SliceFamily, v0_now: float, p: CruiseParams):
    """(l, h) step-unit indices chosen by online_slice (for inspection)."""
    l_pos, h_pos = _slice_positions(fam, v0_now, p)
    return l_pos * fam.M, h_pos * fam.M


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrontCarScenario:
    """Front-car behavior generator configuration.

    kind: uniform_random | full_brake_after | constant_velocity | scripted
    """

    kind: str = "uniform_random"
    seed: int = 0
    brake_after_s: float = 15.0
    values: Optional[tuple] = None

    KINDS = ("uniform_random", "full_brake_after", "constant_velocity", "scripted")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "scripted" and self.values is None:
            raise ValueError("scripted scenario needs values")


def _clamped_bounds(v0: float, p: CruiseParams):
    """Scenario accelerations respect both the switched box and the hard
    velocity limits of the front car."""
    W = switched_bounds(v0, p)
    if p.Ts <= 0:
        return float(W.lower[0]), float(W.upper[0])
    lo = max(float(W.lower[0]), (p.v_min - v0) / p.Ts)
    hi = min(float(W.upper[0]), (p.v_max - v0) / p.Ts)
    return lo, min(hi, max(lo, hi))


def make_scenario(s: FrontCarScenario, p: CruiseParams) -> Callable:
    """Disturbance source (t, x) -> w honoring the switched bounds at the
    simulated front velocity."""
    rng = np.random.default_rng(s.seed)
    stopped = 1e-9

    def source(t, x):
        v0 = float(x[2])
        lo, hi = _clamped_bounds(v0, p)
        if s.kind == "constant_velocity":
            return np.zeros(1)
        if s.kind == "scripted":
            w = s.values[t] if t < len(s.values) else 0.0
            return np.array([min(max(float(w), lo), hi)])
        if s.kind == "uniform_random":
            return np.array([rng.uniform(lo, hi)])
        # full_brake_after: random phase, then brake to a stop
        if t * p.Ts < s.brake_after_s:
            return np.array([rng.uniform(lo, hi)])
        if v0 > p.v_min + stopped:
            return np.array([max(p.w_min, (p.v_min - v0) / p.Ts)])
        return np.zeros(1)

    return source


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------


def velocity_band(v0: float, p: CruiseParams):
    """Accumulated-acceleration band keeping the front velocity within its
    hard limits: sum of w over any prefix of the hold stays inside it."""
    return (np.array([(p.v_min - v0) / p.Ts]),
            np.array([(p.v_max - v0) / p.Ts]))


def banded_schedule(v0: float, p: CruiseParams, M: int) -> DisturbanceSchedule:
    lo, hi = velocity_band(v0, p)
    return interior_schedule(p, M).with_band(lo, hi)


def make_controller(p: CruiseParams, M: int, fam: SliceFamily,
                    origin: int = 0, v0_init: Optional[float] = None) -> mpc.HoldController:
    """Hold controller whose reach target and disturbance band track the
    current front velocity."""
    sysm = build_system(p)
    hold = HoldConfig(M=M, N=p.N)
    sched = interior_schedule(p, M)

    v0 = p.x0[2] if v0_init is None else v0_init
    v0 = min(max(v0, p.v_min), p.v_max)
    base = mpc.MPCProblem(sysm, hold, state_set(p), input_set(p), sched,
                          Q=p.Q, R=p.R_mat, P=p.P,
                          reach_target=online_slice(fam, v0, p))
    cache: dict = {}
    quantum = 0.05  # m/s; the band is widened to the bucket edges (sound)

    def selector(x, t):
        v0_now = min(max(float(x[2]), p.v_min), p.v_max)
        l_pos, h_pos = _slice_positions(fam, v0_now, p)
        # the band only matters within one hold's reach of a velocity limit
        banded = (v0_now - p.v_min < -M * p.Ts * p.w_min
                  or p.v_max - v0_now < M * p.Ts * p.w_max)
        if banded:
            v0_up = min(p.v_max, math.ceil(v0_now / quantum) * quantum)
            v0_dn = max(p.v_min, math.floor(v0_now / quantum) * quantum)
        else:
            v0_up = v0_dn = None
        key = (l_pos, h_pos, v0_up, v0_dn)
        prob = cache.get(key)
        if prob is None:
            prob = base
            if banded:
                band = sched.with_band([(p.v_min - v0_up) / p.Ts],
                                       [(p.v_max - v0_dn) / p.Ts])
                prob = prob.with_schedule(band)
            prob = prob.with_reach_target(online_slice(fam, v0_now, p))
            cache[key] = prob
        return prob

    return mpc.HoldController(base, problem_selector=selector, origin=origin)


def brake_study(p: CruiseParams, families: dict, steps: int = 400,
                seed: int = 0, brake_after_s: float = 15.0) -> dict:
    """Random front car for brake_after_s seconds, then full braking until
    stopped; one closed-loop trace per hold length."""
    traces = {}
    for M in p.M:
        scenario = FrontCarScenario(kind="full_brake_after", seed=seed,
                                    brake_after_s=brake_after_s)
        source = make_scenario(scenario, p)
        ctrl = make_controller(p, int(M), families[int(M)])
        traces[int(M)] = mpc.simulate(ctrl, np.array(p.x0), source, steps)
    return traces


def adaptive_study(p: CruiseParams, families: dict, steps: int = 900,
                   ladder: Sequence[int] = (10, 5, 1), trigger_pct: float = 0.01,
                   window_s: float = 1.0, v0_const: float = 25.0,
                   seed: int = 0) -> mpc.SimTrace:
    """Constant front velocity; the supervisor walks the hold ladder down
    whenever the distance settles."""
    ladder = tuple(int(M) for M in ladder)
    for M in ladder:
        if p.N % M != 0:
            raise ValueError(f"ladder entry {M} does not divide horizon {p.N}")
        if M not in families:
            raise ValueError(f"no slice family for ladder entry {M}")

    def request_builder(M_new: int, t: int, x) -> mpc.SwitchRequest:
        fam_new = families[M_new]
        v0 = min(max(float(x[2]), p.v_min), p.v_max)
        target = online_slice(fam_new, v0, p)
        sched_new = banded_schedule(v0, p, M_new)

        def build(t_switch: int) -> mpc.HoldController:
            return make_controller(p, M_new, fam_new, origin=t_switch,
                                   v0_init=v0)

        return mpc.SwitchRequest(M_new=M_new, reach_target=target,
                                 sched=sched_new, requested_at=t,
                                 make_controller=build)

    supervisor = mpc.AdaptiveSupervisor(
        mpc.SupervisorConfig(ladder=ladder, trigger_pct=trigger_pct,
                             window_s=window_s, monitor_index=0),
        request_builder)
    x0 = np.array([p.x0[0], p.x0[1], v0_const])
    scenario = FrontCarScenario(kind="constant_velocity", seed=seed)
    ctrl = make_controller(p, ladder[0], families[ladder[0]], v0_init=v0_const)
    return mpc.simulate(ctrl, x0, make_scenario(scenario, p), steps,
                        supervisor=supervisor)


def compute_families(p: CruiseParams, Ms: Optional[Sequence[int]] = None) -> dict:
    """Slice families for each requested hold length."""
    return {int(M): offline_families(p, int(M)) for M in (Ms or p.M)}


def write_family_archives(root, p: CruiseParams, M: int, fam: SliceFamily) -> dict:
    """Two archives (lower/upper) under root; returns summary counts."""
    sysm = build_system(p)
    base = {
        "system_hash": st.system_hash(sysm),
        "M": M,
        "schedule": f"box[{p.w_min:g};{p.w_max:g}]*{M}",
    }
    from pathlib import Path
    root = Path(root)
    low = dict(base)
    low.update({"family": "lower", "v0_base": repr(p.v_min),
                "v0_step": repr(-M * p.Ts * p.w_min)})
    st.write_archive(root / "lower", fam.lower, low)
    upm = dict(base)
    upm.update({"family": "upper", "v0_base": repr(p.v_max),
                "v0_step": repr(-M * p.Ts * p.w_max)})
    st.write_archive(root / "upper", fam.upper, upm)
    return {"lower_slices": len(fam.lower), "upper_slices": len(fam.upper)}


def read_family_archives(root) -> SliceFamily:
    """Inverse of write_family_archives."""
    from pathlib import Path
    root = Path(root)
    lower, man_l = st.read_archive(root / "lower")
    upper, man_u = st.read_archive(root / "upper")
    return SliceFamily(lower=lower, upper=upper, M=int(man_l["M"]),
                       lower_base=float(man_l["v0_base"]),
                       lower_step=float(man_l["v0_step"]),
                       upper_base=float(man_u["v0_base"]),
                       upper_step=float(man_u["v0_step"]))
