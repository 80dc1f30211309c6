"""Solver backends behind a minimal interface.

`solve` accepts any backend object with a `run(model, time_limit)` method
returning a MilpSolution.  Two implementations are provided: an in-process
one built on scipy's branch-and-bound (HiGHS), and a subprocess one that
exports MPS, invokes an arbitrary command line, and reads back a plain
``<variable> <value>`` solution file — exit code 0 meaning solved, 2 meaning
proven infeasible.
"""
from __future__ import annotations

import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp as scipy_milp

from .milp import MilpModel, audit_solution, export_mps


@dataclass(frozen=True)
class MilpSolution:
    status: str  # optimal | infeasible | time_limit | error
    objective: float | None
    x: np.ndarray | None
    wall_s: float
    message: str = ""


class ScipyMilpBackend:
    """In-process mixed-integer solve via scipy.optimize.milp."""

    def run(self, model: MilpModel, time_limit: float | None = None) -> MilpSolution:
        t0 = time.perf_counter()
        c = model.objective_vector()
        constraints = []
        if model.n_constr:
            a, lo, hi = model.constraint_matrix()
            constraints.append(LinearConstraint(a, lo, hi))
        options = {}
        if time_limit is not None:
            options["time_limit"] = float(time_limit)
        res = scipy_milp(
            c=c, constraints=constraints,
            integrality=np.array(model.integer, dtype=int),
            bounds=Bounds(np.array(model.lb), np.array(model.ub)),
            options=options,
        )
        wall = time.perf_counter() - t0
        status = {0: "optimal", 1: "time_limit", 2: "infeasible",
                  3: "error", 4: "error"}.get(res.status, "error")
        if status == "optimal":
            return MilpSolution("optimal", float(res.fun), np.asarray(res.x),
                                wall, res.message)
        return MilpSolution(status, None, None, wall, res.message)


class SubprocessMpsBackend:
    """Export to MPS, run an external command, parse its solution file.

    The command is a template with ``{mps}`` and ``{sol}`` placeholders,
    e.g. ``python3 scripts/mps_solve.py {mps} {sol}``.
    """

    def __init__(self, command: str):
        self.command = command

    def run(self, model: MilpModel, time_limit: float | None = None) -> MilpSolution:
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory(prefix="milp_") as tmp:
            mps = Path(tmp) / f"{model.name.lower()}.mps"
            sol = Path(tmp) / f"{model.name.lower()}.sol"
            export_mps(model, mps)
            cmd = shlex.split(self.command.format(mps=mps, sol=sol))
            if time_limit is not None:
                cmd += ["--time-limit", str(float(time_limit))]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            wall = time.perf_counter() - t0
            if proc.returncode == 2:
                return MilpSolution("infeasible", None, None, wall, proc.stderr.strip())
            if proc.returncode != 0:
                return MilpSolution("error", None, None, wall,
                                    proc.stderr.strip() or f"exit {proc.returncode}")
            values: dict[str, float] = {}
            for line in sol.read_text().splitlines():
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, val = line.split()
                values[name] = float(val)
            x = np.array([values.get(n, 0.0) for n in model.var_names])
            return MilpSolution("optimal", model.objective_value(x), x, wall)


def lp_bound(model: MilpModel, time_limit: float | None = None) -> float | None:
    """Objective of the continuous relaxation: a valid lower bound on the
    mixed-integer optimum (minimization), or None if the relaxation is not
    solved to optimality."""
    c = model.objective_vector()
    constraints = []
    if model.n_constr:
        a, lo, hi = model.constraint_matrix()
        constraints.append(LinearConstraint(a, lo, hi))
    options = {}
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    res = scipy_milp(c=c, constraints=constraints,
                     integrality=np.zeros(model.n_var, dtype=int),
                     bounds=Bounds(np.array(model.lb), np.array(model.ub)),
                     options=options)
    return float(res.fun) if res.status == 0 else None


def solve(model: MilpModel, backend=None, time_limit: float | None = None,
          audit_tol: float = 1e-6) -> MilpSolution:
    """Solve and, on success, independently re-check feasibility of the
    returned assignment against every row of the model."""
    backend = backend or ScipyMilpBackend()
    result = backend.run(model, time_limit=time_limit)
    if result.status == "optimal":
        bad = audit_solution(model, result.x, tol=audit_tol)
        if bad:
            head = "; ".join(bad[:5])
            raise RuntimeError(
                f"solver returned an infeasible assignment ({len(bad)} rows): {head}")
    return result
