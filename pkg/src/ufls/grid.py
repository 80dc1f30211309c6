"""Network model, admittance matrix, AC power flow, and machine initialization.

Everything is per-unit on a single system MVA base.  Frequencies are handled
by the dynamic modules; this module is purely static: it loads a network
description, solves the AC power flow with Newton-Raphson, anchors the ZIP
load model at the solved voltages, and back-computes the classical-machine
internal EMFs so that a dynamic simulation started from the solution is at
equilibrium.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

BUS_KINDS = ("slack", "pv", "pq")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    zip_a: float = 0.0  # constant-current fraction of the load
    zip_b: float = 0.0  # constant-impedance fraction of the load
    v_nominal: float = 1.0
    theta_init: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0  # total line-charging susceptance (split half per end)


@dataclass(frozen=True)
class GovernorParams:
    r: float  # droop: p.u. frequency deviation per p.u. power
    t: float  # first-order time constant, s
    p_m_min: float
    p_m_max: float


@dataclass(frozen=True)
class GeneratorParams:
    bus: int
    m: float  # inertia constant (2H) in s on the system base
    d: float  # damping, p.u. power per p.u. frequency deviation
    xdp: float  # transient reactance, p.u.
    p_dispatch: float
    q_dispatch: float
    governor: GovernorParams


@dataclass(frozen=True)
class Network:
    base_mva: float
    nominal_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[GeneratorParams, ...]

    def __post_init__(self):
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def omega0(self) -> float:
        """Nominal angular frequency, rad/s."""
        return 2.0 * math.pi * self.nominal_hz

    def bus_index(self, bus_id: int) -> int:
        return _index_map(self)[bus_id]

    @property
    def gen_bus_idx(self) -> np.ndarray:
        """Bus position (not id) of each generator."""
        return np.array([self.bus_index(g.bus) for g in self.generators])

    @property
    def total_load(self) -> float:
        return float(sum(b.p_load for b in self.buses))


def _index_map(net: Network) -> dict[int, int]:
    return {b.id: i for i, b in enumerate(net.buses)}


def _validate(net: Network) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate bus ids")
    if not net.buses:
        raise ValueError("network has no buses")
    kinds = [b.kind for b in net.buses]
    if any(k not in BUS_KINDS for k in kinds):
        raise ValueError(f"bus kind must be one of {BUS_KINDS}")
    if kinds.count("slack") != 1:
        raise ValueError("exactly one slack bus required")
    idset = set(ids)
    for b in net.buses:
        if b.zip_a < 0 or b.zip_b < 0 or b.zip_a + b.zip_b > 1 + 1e-12:
            raise ValueError(f"bus {b.id}: zip fractions must be >= 0 and sum to <= 1")
        if b.v_nominal <= 0:
            raise ValueError(f"bus {b.id}: v_nominal must be positive")
    for br in net.branches:
        if br.from_bus not in idset or br.to_bus not in idset:
            raise ValueError(f"branch {br.from_bus}-{br.to_bus}: unknown endpoint")
        if br.from_bus == br.to_bus:
            raise ValueError("branch endpoints must differ")
        if br.r == 0 and br.x == 0:
            raise ValueError(f"branch {br.from_bus}-{br.to_bus}: zero impedance")
    if not net.generators:
        raise ValueError("network has no generators")
    for g in net.generators:
        if g.bus not in idset:
            raise ValueError(f"generator at unknown bus {g.bus}")
        if g.m <= 0 or g.xdp <= 0:
            raise ValueError(f"generator at bus {g.bus}: m and xdp must be positive")
        if g.d < 0:
            raise ValueError(f"generator at bus {g.bus}: negative damping")
        gov = g.governor
        if gov.r <= 0 or gov.t <= 0:
            raise ValueError(f"generator at bus {g.bus}: governor r and t must be positive")
        if gov.p_m_min > gov.p_m_max:
            raise ValueError(f"generator at bus {g.bus}: p_m_min > p_m_max")
    # connectivity (relay placement and the power flow both assume one island)
    adj: dict[int, set[int]] = {i: set() for i in ids}
    for br in net.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(ids):
        raise ValueError("network is not connected")


# ---------------------------------------------------------------------------
# JSON loading

_TOP_KEYS = {"base_mva", "nominal_hz", "buses", "branches", "generators"}
_BUS_KEYS = {"id", "kind", "p_load", "q_load", "zip_a", "zip_b"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b_shunt"}
_GEN_KEYS = {"bus", "m", "d", "xdp", "p_dispatch", "q_dispatch", "governor"}
_GOV_KEYS = {"r", "t", "pmin", "pmax"}


def _check_keys(obj: dict, allowed: set, what: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise ValueError(f"unknown keys in {what}: {sorted(extra)}")


def load_network(path: str | Path) -> Network:
    """Load a network from its JSON description.  Unknown keys are rejected."""
    raw = json.loads(Path(path).read_text())
    _check_keys(raw, _TOP_KEYS, "network")
    buses = []
    for b in raw.get("buses", []):
        _check_keys(b, _BUS_KEYS, f"bus {b.get('id')}")
        buses.append(Bus(
            id=int(b["id"]), kind=str(b["kind"]),
            p_load=float(b.get("p_load", 0.0)), q_load=float(b.get("q_load", 0.0)),
            zip_a=float(b.get("zip_a", 0.0)), zip_b=float(b.get("zip_b", 0.0)),
        ))
    branches = []
    for br in raw.get("branches", []):
        _check_keys(br, _BRANCH_KEYS, f"branch {br.get('from')}-{br.get('to')}")
        branches.append(Branch(
            from_bus=int(br["from"]), to_bus=int(br["to"]),
            r=float(br.get("r", 0.0)), x=float(br["x"]),
            b_shunt=float(br.get("b_shunt", 0.0)),
        ))
    gens = []
    for g in raw.get("generators", []):
        _check_keys(g, _GEN_KEYS, f"generator at bus {g.get('bus')}")
        gov = g["governor"]
        _check_keys(gov, _GOV_KEYS, f"governor at bus {g.get('bus')}")
        gens.append(GeneratorParams(
            bus=int(g["bus"]), m=float(g["m"]), d=float(g["d"]), xdp=float(g["xdp"]),
            p_dispatch=float(g["p_dispatch"]), q_dispatch=float(g.get("q_dispatch", 0.0)),
            governor=GovernorParams(
                r=float(gov["r"]), t=float(gov["t"]),
                p_m_min=float(gov["pmin"]), p_m_max=float(gov["pmax"]),
            ),
        ))
    return Network(
        base_mva=float(raw["base_mva"]), nominal_hz=float(raw["nominal_hz"]),
        buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
    )


# ---------------------------------------------------------------------------
# Admittance matrix

def build_admittance(net: Network) -> sp.csr_matrix:
    """Bus admittance matrix (complex, sparse, symmetric).

    Pi-model branches: series admittance 1/(r+jx) plus half the line-charging
    susceptance on the diagonal at each end.
    """
    n = net.n_bus
    idx = _index_map(net)
    rows, cols, vals = [], [], []
    for br in net.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        y = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [y + ysh, y + ysh, -y, -y]
    y_bus = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    return y_bus.tocsr()


# ---------------------------------------------------------------------------
# Power flow

@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray       # per-bus voltage magnitude, p.u.
    theta: np.ndarray   # per-bus angle, rad
    p_injection: np.ndarray  # net active injection per bus (gen - load)
    q_injection: np.ndarray
    iterations: int
    converged: bool


def _bus_dispatch(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus generator dispatch sums from the input file."""
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    idx = _index_map(net)
    for g in net.generators:
        p[idx[g.bus]] += g.p_dispatch
        q[idx[g.bus]] += g.q_dispatch
    return p, q


def solve_power_flow(net: Network, tol: float = 1e-8, max_iter: int = 50) -> PowerFlowSolution:
    """Newton-Raphson AC power flow in polar mismatch form, flat start.

    Loads are held at their specified constant-power values here; the ZIP
    parameterization is anchored at the solution afterwards (see
    derive_zip_params), so the two agree at the solved voltages.
    """
    n = net.n_bus
    y_bus = build_admittance(net).toarray()
    kinds = np.array([b.kind for b in net.buses])
    pv = np.flatnonzero(kinds == "pv")
    pq = np.flatnonzero(kinds == "pq")
    pvpq = np.concatenate([pv, pq])

    p_gen, q_gen = _bus_dispatch(net)
    p_load = np.array([b.p_load for b in net.buses])
    q_load = np.array([b.q_load for b in net.buses])
    p_spec = p_gen - p_load
    q_spec = q_gen - q_load

    vm = np.array([b.v_nominal for b in net.buses], dtype=float)
    va = np.array([b.theta_init for b in net.buses], dtype=float)

    iterations = 0
    converged = False
    for _ in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(y_bus @ v)
        mis_p = p_spec[pvpq] - s_calc.real[pvpq]
        mis_q = q_spec[pq] - s_calc.imag[pq]
        f = np.concatenate([mis_p, mis_q])
        iterations += 1
        if f.size == 0 or np.max(np.abs(f)) < tol:
            converged = True
            break
        if iterations > max_iter:
            break
        i_bus = y_bus @ v
        dv_a = 1j * np.diag(v) @ np.conj(np.diag(i_bus) - y_bus @ np.diag(v))
        vnorm = v / vm
        dv_m = np.diag(v) @ np.conj(y_bus @ np.diag(vnorm)) + np.conj(np.diag(i_bus)) @ np.diag(vnorm)
        j11 = dv_a.real[np.ix_(pvpq, pvpq)]
        j12 = dv_m.real[np.ix_(pvpq, pq)]
        j21 = dv_a.imag[np.ix_(pq, pvpq)]
        j22 = dv_m.imag[np.ix_(pq, pq)]
        jac = np.block([[j11, j12], [j21, j22]])
        dx = np.linalg.solve(jac, f)
        va[pvpq] += dx[: pvpq.size]
        vm[pq] += dx[pvpq.size:]

    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(y_bus @ v)
    return PowerFlowSolution(
        v=vm, theta=va, p_injection=s_calc.real.copy(), q_injection=s_calc.imag.copy(),
        iterations=iterations, converged=converged,
    )


# ---------------------------------------------------------------------------
# ZIP loads anchored at the power-flow solution

@dataclass(frozen=True)
class ZipLoad:
    """One bus's load split into constant-power / current / impedance parts.

    P(V) = p_const + i_p * V + y_p * V**2 (reactive analogous); at the anchor
    voltage the total equals the specified load.
    """
    p_const: float
    i_p: float
    y_p: float
    q_const: float
    i_q: float
    y_q: float
    v_anchor: float

    def eval(self, v: float) -> tuple[float, float]:
        return (self.p_const + self.i_p * v + self.y_p * v * v,
                self.q_const + self.i_q * v + self.y_q * v * v)


def derive_zip_params(net: Network, sol: PowerFlowSolution) -> tuple[ZipLoad, ...]:
    out = []
    for i, b in enumerate(net.buses):
        v0 = float(sol.v[i])
        a, bb = b.zip_a, b.zip_b
        out.append(ZipLoad(
            p_const=(1 - a - bb) * b.p_load, i_p=a * b.p_load / v0, y_p=bb * b.p_load / v0**2,
            q_const=(1 - a - bb) * b.q_load, i_q=a * b.q_load / v0, y_q=bb * b.q_load / v0**2,
            v_anchor=v0,
        ))
    return tuple(out)


# ---------------------------------------------------------------------------
# Machine initialization

@dataclass(frozen=True)
class MachineInit:
    """Classical-machine equilibrium: internal EMF and allocated dispatch.

    p_gen doubles as the initial mechanical power and the governor reference,
    so the loaded network plus this initialization is an exact equilibrium of
    the dynamic model.
    """
    e: np.ndarray       # internal EMF magnitude per generator
    delta: np.ndarray   # internal angle per generator, rad
    p_gen: np.ndarray   # allocated active power per generator
    q_gen: np.ndarray


def allocate_dispatch(net: Network, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Assign solved bus injections back to individual generators.

    Slack-bus active power and slack/PV reactive power are solved quantities;
    they are split among the bus's generators proportionally to the filed
    p_dispatch (equally if the bus dispatch is all-zero).
    """
    idx = _index_map(net)
    p_out = np.array([g.p_dispatch for g in net.generators], dtype=float)
    q_out = np.array([g.q_dispatch for g in net.generators], dtype=float)
    by_bus: dict[int, list[int]] = {}
    for k, g in enumerate(net.generators):
        by_bus.setdefault(g.bus, []).append(k)
    for bus_id, members in by_bus.items():
        i = idx[bus_id]
        bus = net.buses[i]
        weights = np.array([max(net.generators[k].p_dispatch, 0.0) for k in members])
        if weights.sum() <= 0:
            weights = np.ones(len(members))
        weights = weights / weights.sum()
        if bus.kind == "slack":
            p_total = sol.p_injection[i] + bus.p_load
            for w, k in zip(weights, members):
                p_out[k] = w * p_total
        if bus.kind in ("slack", "pv"):
            q_total = sol.q_injection[i] + bus.q_load
            for w, k in zip(weights, members):
                q_out[k] = w * q_total
    return p_out, q_out


def compute_internal_emf(net: Network, sol: PowerFlowSolution) -> MachineInit:
    """Initialize E and delta per machine from terminal conditions.

    E*exp(j*delta) = V + j*xdp*I with I the machine current from its
    allocated (P, Q).  Raises if a governor cannot hold its share at
    equilibrium (reference outside the limits).
    """
    p_gen, q_gen = allocate_dispatch(net, sol)
    e = np.empty(net.n_gen)
    delta = np.empty(net.n_gen)
    for k, g in enumerate(net.generators):
        i = net.bus_index(g.bus)
        v_term = sol.v[i] * np.exp(1j * sol.theta[i])
        current = np.conj(complex(p_gen[k], q_gen[k]) / v_term)
        emf = v_term + 1j * g.xdp * current
        e[k] = abs(emf)
        delta[k] = np.angle(emf)
        gov = g.governor
        if not (gov.p_m_min - 1e-9 <= p_gen[k] <= gov.p_m_max + 1e-9):
            raise ValueError(
                f"generator {k} at bus {g.bus}: equilibrium mechanical power "
                f"{p_gen[k]:.4f} outside governor limits [{gov.p_m_min}, {gov.p_m_max}]")
    return MachineInit(e=e, delta=delta, p_gen=p_gen, q_gen=q_gen)
