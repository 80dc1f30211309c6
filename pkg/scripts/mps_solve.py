#!/usr/bin/env python3
"""Standalone MPS solver shim.

Reads a (fixed- or free-format) MPS file, solves the mixed-integer program
with scipy's HiGHS interface, and writes one ``<variable> <value>`` line per
column.  Exit codes: 0 solved to optimality, 2 proven infeasible, 1 anything
else.  Deliberately self-contained: it shares no code with the package's MPS
writer, so a round trip through this parser is an independent check of the
export path.
"""
import argparse
import sys

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, milp


class MpsProblem:
    def __init__(self):
        self.row_sense = {}      # name -> N/L/G/E
        self.row_order = []
        self.obj_row = None
        self.col_order = []
        self.col_int = {}        # name -> bool
        self.entries = []        # (col, row, value)
        self.rhs = {}            # row -> value
        self.lb = {}
        self.ub = {}


def parse_mps(path):
    prob = MpsProblem()
    section = None
    in_integer = False
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("*"):
                continue
            if not line[0].isspace():  # section header
                tok = line.split()
                section = tok[0]
                if section == "ENDATA":
                    break
                if section == "RANGES":
                    raise ValueError("RANGES section not supported")
                continue
            tok = line.split()
            if section == "ROWS":
                sense, name = tok
                prob.row_sense[name] = sense
                if sense == "N":
                    if prob.obj_row is None:
                        prob.obj_row = name
                else:
                    prob.row_order.append(name)
            elif section == "COLUMNS":
                if len(tok) >= 3 and tok[1] == "'MARKER'":
                    in_integer = tok[-1] == "'INTORG'"
                    continue
                col = tok[0]
                if col not in prob.col_int:
                    prob.col_int[col] = in_integer
                    prob.col_order.append(col)
                for j in range(1, len(tok) - 1, 2):
                    prob.entries.append((col, tok[j], float(tok[j + 1])))
            elif section == "RHS":
                for j in range(1, len(tok) - 1, 2):
                    prob.rhs[tok[j]] = float(tok[j + 1])
            elif section == "BOUNDS":
                tag, col = tok[0], tok[2]
                if col not in prob.col_int:
                    prob.col_int[col] = False
                    prob.col_order.append(col)
                val = float(tok[3]) if len(tok) > 3 else None
                if tag in ("UP", "UI"):
                    prob.ub[col] = val
                elif tag in ("LO", "LI"):
                    prob.lb[col] = val
                elif tag == "FX":
                    prob.lb[col] = val
                    prob.ub[col] = val
                elif tag == "MI":
                    prob.lb[col] = -np.inf
                elif tag == "PL":
                    prob.ub[col] = np.inf
                elif tag == "BV":
                    prob.lb[col], prob.ub[col] = 0.0, 1.0
                else:
                    raise ValueError(f"unsupported bound tag {tag}")
            elif section == "NAME" or section is None:
                continue
    return prob


def to_arrays(prob):
    ncol = len(prob.col_order)
    nrow = len(prob.row_order)
    cidx = {c: i for i, c in enumerate(prob.col_order)}
    ridx = {r: i for i, r in enumerate(prob.row_order)}
    c = np.zeros(ncol)
    data, ri, ci = [], [], []
    for col, row, val in prob.entries:
        if row == prob.obj_row:
            c[cidx[col]] += val
        elif row in ridx:
            data.append(val)
            ri.append(ridx[row])
            ci.append(cidx[col])
        else:
            raise ValueError(f"entry references unknown row {row}")
    a = sp.csr_matrix((data, (ri, ci)), shape=(nrow, ncol))
    lo = np.full(nrow, -np.inf)
    hi = np.full(nrow, np.inf)
    for name, i in ridx.items():
        rhs = prob.rhs.get(name, 0.0)
        sense = prob.row_sense[name]
        if sense == "L":
            hi[i] = rhs
        elif sense == "G":
            lo[i] = rhs
        elif sense == "E":
            lo[i] = hi[i] = rhs
    lb = np.array([prob.lb.get(col, 0.0) for col in prob.col_order])
    ub = np.array([prob.ub.get(col, np.inf) for col in prob.col_order])
    integrality = np.array([int(prob.col_int[col]) for col in prob.col_order])
    return c, a, lo, hi, lb, ub, integrality


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("mps")
    ap.add_argument("solution")
    ap.add_argument("--time-limit", type=float, default=None)
    args = ap.parse_args(argv)

    prob = parse_mps(args.mps)
    c, a, lo, hi, lb, ub, integrality = to_arrays(prob)
    constraints = [LinearConstraint(a, lo, hi)] if a.shape[0] else []
    options = {}
    if args.time_limit is not None:
        options["time_limit"] = args.time_limit
    res = milp(c=c, constraints=constraints, integrality=integrality,
               bounds=Bounds(lb, ub), options=options)
    if res.status == 2:
        print("infeasible", file=sys.stderr)
        return 2
    if res.status != 0:
        print(f"solver status {res.status}: {res.message}", file=sys.stderr)
        return 1
    with open(args.solution, "w") as fh:
        fh.write(f"# objective {res.fun:.17G}\n")
        for name, val in zip(prob.col_order, res.x):
            fh.write(f"{name} {val:.17G}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
