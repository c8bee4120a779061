"""Tractable robust M-step-hold MPC.

The optimization searches over N/M held inputs (not policies).  Nominal
states are condensed out via prediction matrices; robustness enters through
constraint tightening with the per-step disturbance reach sets:

    xbar_h  in  X (-) E_h          h = 1..M-1
    xbar_M  in  reach_target (-) E_M
    xbar_k  in  X                  k = 0..N-1
    ubar_i  in  U                  per hold

The controller re-solves every M steps and holds the first optimal input in
between.  Switching the hold length M is guarded by a membership test of
the current state in the new feasible region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from holdmpc import polytope as pg
from holdmpc import sets as st
from holdmpc.optim import QuadraticProgram, solve_qp
from holdmpc.polytope import Polytope
from holdmpc.sets import DisturbanceSchedule, HoldConfig, LTISystem


class EmptyTightenedSet(RuntimeError):
    """Tightening by a disturbance reach set emptied a constraint set: the
    uncertainty is too large for this hold length."""


class InfeasibleAtResolve(RuntimeError):
    def __init__(self, t: int, x: np.ndarray):
        super().__init__(f"MPC infeasible at step {t}, state {np.array2string(x, precision=4)}")
        self.t = t
        self.x = np.asarray(x)


class MPCSolverError(RuntimeError):
    pass


class MPCProblem:
    """Data for one hold length: system, constraints, costs, reach target.

    Tightened state sets are computed once and shared; the reach target can
    be swapped per solve (`with_reach_target`) without recomputing them.
    """

    def __init__(self, system: LTISystem, hold: HoldConfig, X: Polytope, U: Polytope,
                 sched: DisturbanceSchedule, Q, R, P, reach_target: Polytope,
                 err_sets: Optional[Sequence[Polytope]] = None):
        self.system = system
        self.hold = hold
        self.X = X
        self.U = U
        self.sched = sched
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        n, m = system.n, system.m
        _check_psd(self.Q, "Q", strict=False)
        _check_psd(self.P, "P", strict=False)
        _check_psd(self.R, "R", strict=True)
        if self.Q.shape != (n, n) or self.P.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("cost matrix dimensions do not match the system")
        if len(sched) < hold.M:
            raise ValueError("schedule shorter than the hold length")
        if not sched.contains_origin(tol=1e-9):
            raise ValueError("every disturbance set must contain the origin")
        if reach_target.is_empty():
            raise ValueError("reach target must be nonempty")
        self.err_sets = list(err_sets) if err_sets is not None else \
            st.error_sets(system, sched, hold.M)
        if len(self.err_sets) != hold.M:
            raise ValueError(f"need E_1..E_{hold.M}, got {len(self.err_sets)}")
        self._pred = _prediction_matrices(system, hold)
        # X tightened by the h-step disturbance reach, h = 1..M-1; shared
        # across reach-target swaps
        self._tight_X = [None]
        for hh in range(1, hold.M):
            t = self._tighten(X, hh)
            if t.is_empty():
                raise EmptyTightenedSet(f"X tightened at step {hh} is empty")
            self._tight_X.append(t)
        self.reach_target = reach_target
        self._tight_target = self._tighten(reach_target, hold.M)
        if self._tight_target.is_empty():
            raise EmptyTightenedSet("tightened reach target is empty")

    # small extra tightening so realized trajectories sit strictly inside
    # the constraints instead of on the knife edge of solver tolerance;
    # the solve-time relaxation tiers hand at most half of it back
    TIGHTENING_MARGIN = 1e-5

    def _tighten(self, T: Polytope, steps: int) -> Polytope:
        """T shrunk by the worst accumulated disturbance over `steps` steps.

        Equals the Pontryagin difference with the reach set E_steps for a
        plain schedule; accumulation bands sharpen it further.
        """
        powers = self._pred[0]
        rhs = st._tightened_rhs(T.H, T.h, self.system, self.sched, powers,
                                steps - 1)
        return Polytope(T.H.copy(), rhs - self.TIGHTENING_MARGIN, dim=T.dim,
                        normalize=False)

    def with_reach_target(self, reach_target: Polytope) -> "MPCProblem":
        """Copy sharing the system data and X tightenings; only the target
        tightening is recomputed."""
        if reach_target.is_empty():
            raise ValueError("reach target must be nonempty")
        new = object.__new__(MPCProblem)
        new.__dict__.update(self.__dict__)
        new.reach_target = reach_target
        new._tight_target = new._tighten(reach_target, self.hold.M)
        if new._tight_target.is_empty():
            raise EmptyTightenedSet("tightened reach target is empty")
        return new

    def with_schedule(self, sched: st.DisturbanceSchedule) -> "MPCProblem":
        """Copy with a different disturbance schedule (e.g. a banded one);
        every tightening is recomputed, the error sets are shared."""
        new = object.__new__(MPCProblem)
        new.__dict__.update(self.__dict__)
        new.sched = sched
        new._tight_X = [None]
        for hh in range(1, self.hold.M):
            t = new._tighten(self.X, hh)
            if t.is_empty():
                raise EmptyTightenedSet(f"X tightened at step {hh} is empty")
            new._tight_X.append(t)
        new._tight_target = new._tighten(self.reach_target, self.hold.M)
        if new._tight_target.is_empty():
            raise EmptyTightenedSet("tightened reach target is empty")
        return new

    @property
    def M(self) -> int:
        return self.hold.M

    @property
    def N(self) -> int:
        return self.hold.N


def _check_psd(A: np.ndarray, name: str, strict: bool):
    if np.abs(A - A.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(A).max(initial=0.0)):
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (A + A.T))
    if strict and w.min() <= 1e-9:
        raise ValueError(f"{name} must be positive definite")
    if not strict and w.min() < -1e-9:
        raise ValueError(f"{name} must be positive semidefinite")


def _prediction_matrices(sys: LTISystem, hold: HoldConfig):
    """Phi[k] = A^k and Gam[k] with xbar_k = Phi[k] x0 + Gam[k] Ustack."""
    n, m = sys.n, sys.m
    N, M = hold.N, hold.M
    holds = hold.holds
    Phi = [np.eye(n)]
    for _ in range(N):
        Phi.append(sys.A @ Phi[-1])
    Gam = [np.zeros((n, holds * m))]
    for k in range(1, N + 1):
        G = sys.A @ Gam[k - 1]
        b = (k - 1) // M  # hold active at step k-1
        G = G.copy()
        G[:, b * m:(b + 1) * m] += sys.B
        Gam.append(G)
    return Phi, Gam


@dataclass
class MPCSolution:
    status: str                       # Feasible | Infeasible
    inputs: Optional[np.ndarray] = None      # (N/M, m) held input values
    nominal: Optional[np.ndarray] = None     # (N+1, n) nominal trajectory
    objective: Optional[float] = None


def assemble_qp(prob: MPCProblem, x0) -> QuadraticProgram:
    """Condensed QP over the stacked held inputs for initial state x0."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    sys, hold = prob.system, prob.hold
    n, m = sys.n, sys.m
    N, M, holds = hold.N, hold.M, hold.holds
    Phi, Gam = prob._pred

    dim = holds * m
    Hq = np.zeros((dim, dim))
    q = np.zeros(dim)
    for k in range(N + 1):
        Qk = prob.P if k == N else prob.Q
        GQ = Gam[k].T @ Qk
        Hq += GQ @ Gam[k]
        q += GQ @ (Phi[k] @ x0)
    # each hold input is applied for M steps, so R enters M times per hold
    for b in range(holds):
        Hq[b * m:(b + 1) * m, b * m:(b + 1) * m] += M * prob.R
    Hq = 2.0 * Hq
    q = 2.0 * q

    Grows = []
    grhs = []

    def add_state_rows(T: Polytope, k: int):
        if T.rows == 0:
            return
        Grows.append(T.H @ Gam[k])
        grhs.append(T.h - T.H @ (Phi[k] @ x0))

    for h in range(1, M):
        add_state_rows(prob._tight_X[h], h)
    add_state_rows(prob._tight_target, M)
    for k in range(N):
        add_state_rows(prob.X, k)
    if prob.U.rows:
        for b in range(holds):
            block = np.zeros((prob.U.rows, dim))
            block[:, b * m:(b + 1) * m] = prob.U.H
            Grows.append(block)
            grhs.append(prob.U.h)
    G = np.vstack(Grows) if Grows else np.zeros((0, dim))
    g = np.concatenate(grhs) if grhs else np.zeros(0)
    return QuadraticProgram(Hq, q, G, g)


def objective_offset(prob: MPCProblem, x0) -> float:
    """Constant cost term dropped by the condensed QP."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    Phi, _ = prob._pred
    total = 0.0
    for k in range(prob.N + 1):
        Qk = prob.P if k == prob.N else prob.Q
        xk = Phi[k] @ x0
        total += float(xk @ (Qk @ xk))
    return total


# absolute primal-violation budget for accepting stalled QP iterates; must
# stay below the tightening margin so realized constraints hold strictly
_ACCEPT_VIOLATION = 3e-7


def _solve_qp_robust(qp: QuadraticProgram):
    """Optimal result, or a stalled iterate whose absolute primal violation
    fits the acceptance budget, or the last (Infeasible/failed) result."""
    scale = 1.0 + float(np.abs(qp.g).max(initial=0.0))
    res = None
    for tol in (1e-8, 1e-6):
        res = solve_qp(qp, tol=tol)
        if res.status == "Infeasible":
            return res
        if res.x is not None and res.residual_primal * scale <= _ACCEPT_VIOLATION \
                and res.residual_comp <= 1e-3:
            return res
    return res


def _elastic_relax(qp: QuadraticProgram, n_input_rows: int):
    """Smallest uniform relaxation of the state rows making the QP feasible.

    Returns t* >= 0, or None when even that LP fails.  Input rows are never
    relaxed.
    """
    from holdmpc.optim import LinearProgram, solve_lp

    m, dim = qp.G.shape
    relaxable = np.ones(m)
    if n_input_rows:
        relaxable[m - n_input_rows:] = 0.0
    G = np.hstack([qp.G, -relaxable[:, None]])
    G = np.vstack([G, np.zeros((1, dim + 1))])
    G[-1, -1] = -1.0  # t >= 0
    g = np.concatenate([qp.g, [0.0]])
    c = np.zeros(dim + 1)
    c[-1] = 1.0
    res = solve_lp(LinearProgram(c, G, g), tol=1e-9)
    if res.status != "Optimal":
        return None
    return max(0.0, float(res.x[-1]))


def solve_mpc(prob: MPCProblem, x0, tol: float = 1e-8) -> MPCSolution:
    """Solve the hold MPC at x0; Infeasible means x0 is outside the feasible
    region K^M_N for the current reach target.

    The cost rides the safety constraints, so the closed loop parks on the
    tightened boundary and re-solves there are feasibility-critical.  The
    tightening margin is handed back in tiers: a fixed relaxation of the
    state rows, then an elastic (minimal-violation) relaxation capped at
    0.4x the margin.  Worst case the realized trajectory keeps a strictly
    positive distance to the true constraints.  Stalled solves are accepted
    when their iterate is primal-feasible within the acceptance budget.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    qp = assemble_qp(prob, x0)
    n_input_rows = prob.U.rows * prob.hold.holds
    relaxable = np.ones(qp.G.shape[0])
    if n_input_rows:
        relaxable[qp.G.shape[0] - n_input_rows:] = 0.0

    res = _solve_qp_robust(qp)
    if res.status == "Infeasible":
        g2 = qp.g + 0.5 * prob.TIGHTENING_MARGIN * relaxable
        res = _solve_qp_robust(QuadraticProgram(qp.P, qp.c, qp.G, g2))
    if res.status == "Infeasible":
        t_star = _elastic_relax(qp, n_input_rows)
        if t_star is None or t_star > 0.9 * prob.TIGHTENING_MARGIN:
            return MPCSolution(status="Infeasible")
        g3 = qp.g + (t_star + 1e-9) * relaxable
        res = _solve_qp_robust(QuadraticProgram(qp.P, qp.c, qp.G, g3))
        if res.status == "Infeasible":
            return MPCSolution(status="Infeasible")
    ok_stall = (res.x is not None
                and res.residual_primal * (1.0 + float(np.abs(qp.g).max(initial=0.0)))
                <= _ACCEPT_VIOLATION
                and res.residual_comp <= 1e-3)
    if res.status != "Optimal" and not ok_stall:
        raise MPCSolverError(f"QP solver returned {res.status} at x0={x0}")
    holds, m = prob.hold.holds, prob.system.m
    u = res.x.reshape(holds, m)
    Phi, Gam = prob._pred
    nominal = np.array([Phi[k] @ x0 + Gam[k] @ res.x for k in range(prob.N + 1)])
    return MPCSolution(status="Feasible", inputs=u, nominal=nominal,
                       objective=float(res.objective) + objective_offset(prob, x0))


class HoldController:
    """Receding-horizon hold policy: solve at hold boundaries, hold between.

    `reach_selector(x, t)`, when given, swaps the reach target before each
    solve; `problem_selector(x, t)` replaces the whole problem instance
    (used by the case study to track the front velocity with both the reach
    target and the disturbance band).
    """

    def __init__(self, problem: MPCProblem,
                 reach_selector: Optional[Callable] = None,
                 problem_selector: Optional[Callable] = None, origin: int = 0):
        self.problem = problem
        self.reach_selector = reach_selector
        self.problem_selector = problem_selector
        self.origin = origin
        self._held_u: Optional[np.ndarray] = None
        self._u_box = None
        self.last_solution: Optional[MPCSolution] = None

    @property
    def M(self) -> int:
        return self.problem.M

    def is_boundary(self, t: int) -> bool:
        return (t - self.origin) % self.M == 0

    def reset(self, origin: int = 0) -> "HoldController":
        """Clear per-run state so the controller can drive a fresh run."""
        self.origin = origin
        self._held_u = None
        self.last_solution = None
        return self

    def problem_at(self, x, t: int) -> MPCProblem:
        if self.problem_selector is not None:
            return self.problem_selector(x, t)
        if self.reach_selector is not None:
            return self.problem.with_reach_target(self.reach_selector(x, t))
        return self.problem

    def step_policy(self, x, t: int) -> np.ndarray:
        """Input to apply at step t; re-solves only at hold boundaries."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        if self.is_boundary(t) or self._held_u is None:
            sol = solve_mpc(self.problem_at(x, t), x)
            if sol.status != "Feasible":
                raise InfeasibleAtResolve(t, np.asarray(x))
            self.last_solution = sol
            u = sol.inputs[0].copy()
            # accepted stalled iterates can overshoot the input box by a
            # sub-margin hair; clip so the applied input is always admissible
            if self._u_box is None and self.problem.U.rows:
                self._u_box = self.problem.U.bounding_box()
            if self._u_box is not None:
                u = np.clip(u, self._u_box[0], self._u_box[1])
            self._held_u = u
        return self._held_u.copy()


@dataclass
class SwitchRequest:
    """Proposal to change the hold length, made at a hold boundary."""

    M_new: int
    reach_target: Polytope
    sched: DisturbanceSchedule
    requested_at: int
    err_sets: Optional[list] = None
    make_controller: Optional[Callable] = None  # (t) -> HoldController


def check_switch(x, candidate: SwitchRequest, sys: LTISystem, X: Polytope,
                 U: Polytope, tol: float = 1e-7):
    """Membership of x in the new feasible region Pre^Mhat(target) cap X.

    Returns (ok, violated_row_index, region); the row index is None when ok.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pre = st.pre_m(sys, X, U, candidate.reach_target, candidate.sched,
                   candidate.M_new)
    region = pg.intersect(pre, X)
    slack = region.H @ x - region.h
    if region.rows and slack.max() > tol:
        return False, int(np.argmax(slack)), region
    if region.is_empty():
        return False, 0, region
    return True, None, region


@dataclass
class SupervisorConfig:
    ladder: tuple = (10, 5, 1)
    trigger_pct: float = 0.01
    window_s: float = 1.0
    monitor_index: int = 0
    allow_increase: bool = False


class AdaptiveSupervisor:
    """Requests the next smaller hold length when the monitored coordinate
    has changed by less than the trigger fraction over the window.

    Every request still passes the switch check before activation.
    `request_builder(M_new, t, x)` supplies the target/schedule for the new
    hold length (domain wiring lives with the caller).
    """

    def __init__(self, config: SupervisorConfig, request_builder: Callable):
        self.config = config
        self.request_builder = request_builder
        self.last_switch_step = 0

    def propose(self, trace: "SimTrace", t: int, controller: HoldController):
        cfg = self.config
        ladder = list(cfg.ladder)
        M_cur = controller.M
        if M_cur not in ladder or ladder.index(M_cur) == len(ladder) - 1:
            return None
        ts = controller.problem.system.ts
        window = max(1, math.ceil(cfg.window_s / ts)) if ts > 0 else 1
        if t < window or t - self.last_switch_step < window:
            return None
        xs = trace.states
        d_now = xs[t][cfg.monitor_index]
        d_then = xs[t - window][cfg.monitor_index]
        if abs(d_now - d_then) >= cfg.trigger_pct * abs(d_then):
            return None
        M_new = ladder[ladder.index(M_cur) + 1]
        return self.request_builder(M_new, t, xs[t])

    def notify_switch(self, t: int):
        self.last_switch_step = t


@dataclass
class SimTrace:
    """Closed-loop record; states has one more entry than the step arrays."""

    ts: float
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    disturbances: list = field(default_factory=list)
    M_active: list = field(default_factory=list)
    solved: list = field(default_factory=list)
    feasible: list = field(default_factory=list)
    viol_X: list = field(default_factory=list)
    viol_U: list = field(default_factory=list)
    switches: list = field(default_factory=list)   # (t, M_from, M_to, accepted)
    halted: Optional[int] = None                   # step of InfeasibleAtResolve
    final_viol_X: bool = False

    @property
    def steps(self) -> int:
        return len(self.inputs)

    def to_csv(self, path, labels: Optional[Sequence[str]] = None) -> None:
        n = len(self.states[0])
        m = len(self.inputs[0]) if self.inputs else 1
        o = len(self.disturbances[0]) if self.disturbances else 1
        if labels is None:
            labels = [f"x{i}" for i in range(n)]
        ucols = ["u"] if m == 1 else [f"u{i}" for i in range(m)]
        wcols = ["w"] if o == 1 else [f"w{i}" for i in range(o)]
        header = ["t", "time_s"] + list(labels) + ucols + wcols + \
            ["M", "solved", "feasible", "viol_X", "viol_U"]
        lines = [",".join(header)]
        for t in range(len(self.states)):
            row = [str(t), repr(t * self.ts)]
            row += [repr(float(v)) for v in self.states[t]]
            if t < self.steps:
                row += [repr(float(v)) for v in self.inputs[t]]
                row += [repr(float(v)) for v in self.disturbances[t]]
                row += [str(self.M_active[t]), str(int(self.solved[t])),
                        str(int(self.feasible[t])), str(int(self.viol_X[t])),
                        str(int(self.viol_U[t]))]
            else:
                row += [""] * (m + o)
                row += [str(self.M_active[t - 1]) if self.M_active else "", "0",
                        "1", str(int(self.final_viol_X)), "0"]
            lines.append(",".join(row))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def simulate(controller: HoldController, x0, disturbance_source, steps: int,
             supervisor: Optional[AdaptiveSupervisor] = None,
             halt_on_infeasible: bool = True) -> SimTrace:
    """Run the true dynamics under the hold policy.

    `disturbance_source(t, x)` returns w_t.  The supervisor, when given, is
    consulted at hold boundaries; accepted switches swap the controller and
    reset the hold counter.  An infeasible resolve halts the run with a
    flagged partial trace.
    """
    sys = controller.problem.system
    X, U = controller.problem.X, controller.problem.U
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    trace = SimTrace(ts=sys.ts)
    trace.states.append(x.copy())
    tol = pg.TOLS.containment
    for t in range(steps):
        if supervisor is not None and controller.is_boundary(t):
            req = supervisor.propose(trace, t, controller)
            if req is not None:
                ok, row, _ = check_switch(x, req, sys, X, U)
                trace.switches.append((t, controller.M, req.M_new, ok))
                if ok:
                    controller = req.make_controller(t)
                    supervisor.notify_switch(t)
        solved = controller.is_boundary(t)
        try:
            u = controller.step_policy(x, t)
        except InfeasibleAtResolve:
            trace.halted = t
            if halt_on_infeasible:
                return trace
            raise
        w = np.atleast_1d(np.asarray(disturbance_source(t, x), dtype=float))
        trace.inputs.append(u.copy())
        trace.disturbances.append(w.copy())
        trace.M_active.append(controller.M)
        trace.solved.append(solved)
        trace.feasible.append(True)
        trace.viol_X.append(not X.contains_point(x, tol))
        trace.viol_U.append(not U.contains_point(u, tol))
        x = sys.A @ x + sys.B @ u + sys.E @ w
        trace.states.append(x.copy())
    trace.final_viol_X = not X.contains_point(x, tol)
    return trace


def uniform_source(sched: DisturbanceSchedule, seed: int) -> Callable:
    """Uniform sampling over each step's disturbance box, seeded."""
    rng = np.random.default_rng(seed)

    def source(t, x):
        W = sched.at(t)
        if isinstance(W, pg.Box):
            return W.sample(rng)
        lo, up = W.bounding_box()
        while True:
            cand = rng.uniform(lo, up)
            if W.contains_point(cand, 0.0):
                return cand
    return source
