"""Robust M-step-hold MPC toolkit.

Polytope set algebra, hold-invariant set computation, a tractable robust
MPC over held inputs, safe online adaptation of the hold length, and an
adaptive cruise-control case study.
"""

from holdmpc.optim import LinearProgram, QuadraticProgram, SolveResult, solve_lp, solve_qp
from holdmpc.polytope import Box, Polytope

__all__ = [
    "Box",
    "LinearProgram",
    "Polytope",
    "QuadraticProgram",
    "SolveResult",
    "solve_lp",
    "solve_qp",
]

__version__ = "0.1.0"
