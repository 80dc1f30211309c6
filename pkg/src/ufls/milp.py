"""Mixed-integer linear program container, MPS export, feasibility audit.

The model is built incrementally (variables, then rows), kept sparse, and is
solver-agnostic: backends consume either the in-memory arrays or the exported
fixed-format MPS file.  Minimization is implied.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SENSES = ("<=", ">=", "==")


@dataclass
class MilpModel:
    name: str = "MODEL"
    var_names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    integer: list[bool] = field(default_factory=list)
    obj: dict[int, float] = field(default_factory=dict)
    rows: list[tuple[np.ndarray, np.ndarray, str, float, str]] = field(default_factory=list)
    _by_name: dict[str, int] = field(default_factory=dict)

    # -- construction -------------------------------------------------------
    def add_var(self, name: str, lb: float = 0.0, ub: float = np.inf,
                integer: bool = False, obj: float = 0.0) -> int:
        if name in self._by_name:
            raise ValueError(f"duplicate variable {name!r}")
        idx = len(self.var_names)
        self.var_names.append(name)
        self._by_name[name] = idx
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.integer.append(bool(integer))
        if obj:
            self.obj[idx] = float(obj)
        return idx

    def add_binary(self, name: str) -> int:
        return self.add_var(name, 0.0, 1.0, integer=True)

    def add_constr(self, coeffs: dict[int, float], sense: str, rhs: float,
                   name: str | None = None) -> int:
        if sense not in SENSES:
            raise ValueError(f"sense must be one of {SENSES}")
        n = len(self.var_names)
        idx = np.fromiter(coeffs.keys(), dtype=np.int64, count=len(coeffs))
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("constraint references undeclared variable")
        val = np.fromiter(coeffs.values(), dtype=float, count=len(coeffs))
        keep = val != 0.0
        row_id = len(self.rows)
        self.rows.append((idx[keep], val[keep], sense, float(rhs),
                          name or f"c{row_id:06d}"))
        return row_id

    def set_objective(self, coeffs: dict[int, float]) -> None:
        self.obj = {int(k): float(v) for k, v in coeffs.items() if v != 0.0}

    # -- views --------------------------------------------------------------
    @property
    def n_var(self) -> int:
        return len(self.var_names)

    @property
    def n_constr(self) -> int:
        return len(self.rows)

    def index_of(self, name: str) -> int:
        return self._by_name[name]

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_var)
        for i, v in self.obj.items():
            c[i] = v
        return c

    def constraint_matrix(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        """A, and per-row (lower, upper) bounds expressing the senses."""
        data, rows_i, cols_i = [], [], []
        lo = np.empty(self.n_constr)
        hi = np.empty(self.n_constr)
        for r, (idx, val, sense, rhs, _) in enumerate(self.rows):
            rows_i.extend([r] * idx.size)
            cols_i.extend(idx.tolist())
            data.extend(val.tolist())
            if sense == "<=":
                lo[r], hi[r] = -np.inf, rhs
            elif sense == ">=":
                lo[r], hi[r] = rhs, np.inf
            else:
                lo[r] = hi[r] = rhs
        a = sp.csr_matrix((data, (rows_i, cols_i)),
                          shape=(self.n_constr, self.n_var))
        return a, lo, hi

    def objective_value(self, x: np.ndarray) -> float:
        return float(sum(v * x[i] for i, v in self.obj.items()))


def audit_solution(model: MilpModel, x: np.ndarray, tol: float = 1e-6) -> list[str]:
    """Re-evaluate every bound, integrality requirement, and constraint row;
    return human-readable violation messages (empty means feasible)."""
    bad: list[str] = []
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_var,):
        return [f"assignment has shape {x.shape}, expected ({model.n_var},)"]
    for i, name in enumerate(model.var_names):
        if x[i] < model.lb[i] - tol or x[i] > model.ub[i] + tol:
            bad.append(f"{name}={x[i]:.9g} outside [{model.lb[i]:g}, {model.ub[i]:g}]")
        if model.integer[i] and abs(x[i] - round(x[i])) > tol:
            bad.append(f"{name}={x[i]:.9g} not integral")
    for idx, val, sense, rhs, name in model.rows:
        lhs = float(val @ x[idx])
        ok = {"<=": lhs <= rhs + tol, ">=": lhs >= rhs - tol,
              "==": abs(lhs - rhs) <= tol}[sense]
        if not ok:
            bad.append(f"{name}: {lhs:.9g} {sense} {rhs:.9g} violated")
    return bad


# ---------------------------------------------------------------------------
# MPS export (fixed field layout, minimization, explicit bounds for all vars)

def _num(v: float) -> str:
    return f"{v:.17G}"


def export_mps(model: MilpModel, path: str | Path) -> None:
    """Write the model as a fixed-format MPS file.

    Every variable gets explicit BOUNDS records (integer variables use BV for
    unit boxes, LI/UI otherwise) so no reader-side defaults are relied on.
    Values carry 17 significant digits, enough to round-trip float64 exactly.
    """
    out: list[str] = [f"NAME          {model.name}", "ROWS", " N  COST"]
    sense_tag = {"<=": "L", ">=": "G", "==": "E"}
    for _, _, sense, _, name in model.rows:
        out.append(f" {sense_tag[sense]}  {name}")

    # entries grouped per column as the format requires
    col_entries: list[list[tuple[str, float]]] = [[] for _ in range(model.n_var)]
    for i, v in model.obj.items():
        col_entries[i].append(("COST", v))
    for idx, val, _, _, name in model.rows:
        for i, v in zip(idx.tolist(), val.tolist()):
            col_entries[i].append((name, v))

    out.append("COLUMNS")
    in_int = False
    marker = 0
    for i, name in enumerate(model.var_names):
        if model.integer[i] != in_int:
            tag = "'INTORG'" if model.integer[i] else "'INTEND'"
            out.append(f"    MARKER{marker:04d}  'MARKER'                 {tag}")
            marker += 1
            in_int = model.integer[i]
        entries = col_entries[i] or [("COST", 0.0)]  # declare isolated columns
        for row_name, v in entries:
            out.append(f"    {name:<10}{row_name:<10}{_num(v)}")
    if in_int:
        out.append(f"    MARKER{marker:04d}  'MARKER'                 'INTEND'")

    out.append("RHS")
    for _, _, _, rhs, name in model.rows:
        if rhs != 0.0:
            out.append(f"    RHS       {name:<10}{_num(rhs)}")

    out.append("BOUNDS")
    for i, name in enumerate(model.var_names):
        lb, ub = model.lb[i], model.ub[i]
        if model.integer[i] and lb == 0.0 and ub == 1.0:
            out.append(f" BV BND       {name}")
            continue
        if lb == ub:
            out.append(f" FX BND       {name:<10}{_num(lb)}")
            continue
        if np.isneginf(lb):
            out.append(f" MI BND       {name}")
        else:
            tag = "LI" if model.integer[i] else "LO"
            out.append(f" {tag} BND       {name:<10}{_num(lb)}")
        if np.isposinf(ub):
            out.append(f" PL BND       {name}")
        else:
            tag = "UI" if model.integer[i] else "UP"
            out.append(f" {tag} BND       {name:<10}{_num(ub)}")
    out.append("ENDATA")
    Path(path).write_text("\n".join(out) + "\n")
