"""Reduced-order frequency models built from the network DAE.

The full DAE is linearized at the power-flow equilibrium, machine states are
projected onto the inertia-weighted average (the slow, coherent mode) while
inter-machine difference coordinates are dropped, governors are merged into
one equivalent droop/first-order block, and the network algebra is eliminated
exactly.  The result is a 3-state model (average angle, average speed
deviation in p.u., aggregate mechanical power deviation) driven by per-bus
active/reactive injection changes, suitable for embedding in an optimizer
after trapezoidal discretization.

A frequency-response baseline with the same interface but no network
sensitivity (every bus injection hits the swing equation directly) is
provided for comparison.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Network
from .simulate import DaeSystem, Scenario


@dataclass(frozen=True)
class LinearizedDae:
    """Jacobian blocks of the machine/network DAE at the operating point.

    States x = [delta; omega; p_m] over active machines, algebraic
    y = [theta; v] over buses.  Algebraic rows are in mismatch form
    (flow minus injection), so a perturbing injection u enters as
    k_x dx + k_y dy = u and a generation loss is a negative u entry.
    """
    a_x: np.ndarray
    a_y: np.ndarray
    k_x: np.ndarray
    k_y: np.ndarray
    m: np.ndarray
    d: np.ndarray
    rdroop: np.ndarray
    tgov: np.ndarray
    dp_min: np.ndarray  # per-machine governor headroom below the reference
    dp_max: np.ndarray
    w0: float
    n_bus: int


def linearize(net: Network, gen_scale: np.ndarray | None = None) -> LinearizedDae:
    """Analytic Jacobians at the solved equilibrium.

    gen_scale optionally keeps only a fraction of each machine (0 drops it
    entirely), modeling the post-trip system linearized at the pre-trip
    operating point: surviving units keep their state, the lost injection is
    applied through the input channel.
    """
    dae = DaeSystem(net)
    if gen_scale is not None:
        for k, s in enumerate(np.asarray(gen_scale, dtype=float)):
            if s < 1.0:
                dae.apply_trip(k, 1.0 - s)
    act = np.flatnonzero(dae.active)
    na = act.size
    if na == 0:
        raise ValueError("no active machines to linearize")
    n = dae.n
    theta0, v0 = dae.sol.theta, dae.sol.v
    delta0 = dae.delta0

    gb = dae.gb[act]
    vg = v0[gb]
    ang = delta0[act] - theta0[gb]
    e, xdp = dae.e[act], dae.xdp[act]
    m, d = dae.m[act], dae.d[act]
    rg, tg = dae.rdroop[act], dae.tgov[act]
    ke = vg * e * np.cos(ang) / xdp
    se = e * np.sin(ang) / xdp

    ia = np.arange(na)
    a_x = np.zeros((3 * na, 3 * na))
    a_x[ia, na + ia] = dae.w0
    a_x[na + ia, ia] = -ke / m
    a_x[na + ia, na + ia] = -d / m
    a_x[na + ia, 2 * na + ia] = 1.0 / m
    a_x[2 * na + ia, na + ia] = -1.0 / (rg * tg)
    a_x[2 * na + ia, 2 * na + ia] = -1.0 / tg

    a_y = np.zeros((3 * na, 2 * n))
    a_y[na + ia, gb] = ke / m
    a_y[na + ia, n + gb] = -se / m

    # mismatch rows: negate the injection-form network Jacobian
    k_y = -dae.alg_jacobian(delta0, theta0, v0)
    k_x = np.zeros((2 * n, 3 * na))
    k_x[gb, ia] = -ke          # dP rows wrt machine angle
    k_x[n + gb, ia] = vg * se  # dQ rows wrt machine angle

    return LinearizedDae(
        a_x=a_x, a_y=a_y, k_x=k_x, k_y=k_y,
        m=m.copy(), d=d.copy(), rdroop=rg.copy(), tgov=tg.copy(),
        dp_min=(dae.pmin - dae.pref)[act], dp_max=(dae.pmax - dae.pref)[act],
        w0=dae.w0, n_bus=n,
    )


def build_transform(m: np.ndarray, ref: int) -> tuple[np.ndarray, np.ndarray]:
    """Average/difference coordinates over the machine angles.

    Returns (c, g): c is the inertia-weighted averaging row (sums to one);
    g maps angles to differences against the reference machine, one row per
    non-reference machine.
    """
    m = np.asarray(m, dtype=float)
    ng = m.size
    c = (m / m.sum()).reshape(1, ng)
    g = np.zeros((ng - 1, ng))
    row = 0
    for i in range(ng):
        if i == ref:
            continue
        g[row, i] = 1.0
        g[row, ref] = -1.0
        row += 1
    return c, g


@dataclass(frozen=True)
class SafrModel:
    """Aggregate 3-state frequency model with network sensitivities."""
    a_r: np.ndarray  # (3, 3)
    b_r: np.ndarray  # (3, 2*n_bus); columns are [dP per bus, dQ per bus]
    m_a: float
    d_a: float
    r_agg: float
    t_gov: float
    dp_min: float
    dp_max: float
    w0: float

    @property
    def n_bus(self) -> int:
        return self.b_r.shape[1] // 2


def aggregate(lin: LinearizedDae, ref: int | None = None) -> SafrModel:
    """Project the linear DAE onto the coherent average and eliminate algebra.

    Difference coordinates between machines are dropped (coherency), all
    governors are summed into one equivalent droop (this requires equal time
    constants), and the algebraic network variables are eliminated through
    k_y, which transfers per-bus injection changes into the input matrix.
    """
    na = lin.m.size
    if not np.allclose(lin.tgov, lin.tgov[0], rtol=0, atol=1e-12):
        raise ValueError("governor aggregation requires equal time constants")
    if ref is None:
        ref = int(np.argmax(lin.m))
    c, _ = build_transform(lin.m, ref)
    ones = np.ones((1, na))
    rho = (1.0 / lin.rdroop) / (1.0 / lin.rdroop).sum()

    proj = np.zeros((3, 3 * na))   # states -> aggregate states
    proj[0, :na] = c
    proj[1, na:2 * na] = c
    proj[2, 2 * na:] = ones
    lift = np.zeros((3 * na, 3))   # aggregate states -> coherent expansion
    lift[:na, 0] = 1.0
    lift[na:2 * na, 1] = 1.0
    lift[2 * na:, 2] = rho

    a_rx = proj @ lin.a_x @ lift
    a_ry = proj @ lin.a_y
    k_rx = lin.k_x @ lift

    rcond = 1.0 / np.linalg.cond(lin.k_y, 1)
    if not np.isfinite(rcond) or rcond < 1e-12:
        raise ValueError(f"algebraic block is numerically singular (rcond={rcond:.2e})")
    ky_inv = np.linalg.inv(lin.k_y)
    a_r = a_rx - a_ry @ ky_inv @ k_rx
    b_r = a_ry @ ky_inv
    return SafrModel(
        a_r=a_r, b_r=b_r, m_a=float(lin.m.sum()), d_a=float(lin.d.sum()),
        r_agg=float(1.0 / (1.0 / lin.rdroop).sum()), t_gov=float(lin.tgov[0]),
        dp_min=float(lin.dp_min.sum()), dp_max=float(lin.dp_max.sum()), w0=lin.w0,
    )


@dataclass(frozen=True)
class SfrModel:
    """Aggregate frequency response without network sensitivity: every bus's
    active-power change hits the swing equation directly; voltages and
    reactive power are invisible."""
    m_sfr: float
    d_sfr: float
    r_agg: float
    t_gov: float
    dp_min: float
    dp_max: float
    w0: float
    n_buses: int

    @property
    def a_r(self) -> np.ndarray:
        return np.array([
            [0.0, self.w0, 0.0],
            [0.0, -self.d_sfr / self.m_sfr, 1.0 / self.m_sfr],
            [0.0, -1.0 / (self.r_agg * self.t_gov), -1.0 / self.t_gov],
        ])

    @property
    def b_r(self) -> np.ndarray:
        b = np.zeros((3, 2 * self.n_buses))
        b[1, : self.n_buses] = 1.0 / self.m_sfr
        return b

    @property
    def n_bus(self) -> int:
        return self.n_buses


def build_sfr(lin: LinearizedDae) -> SfrModel:
    if not np.allclose(lin.tgov, lin.tgov[0], rtol=0, atol=1e-12):
        raise ValueError("governor aggregation requires equal time constants")
    return SfrModel(
        m_sfr=float(lin.m.sum()), d_sfr=float(lin.d.sum()),
        r_agg=float(1.0 / (1.0 / lin.rdroop).sum()), t_gov=float(lin.tgov[0]),
        dp_min=float(lin.dp_min.sum()), dp_max=float(lin.dp_max.sum()),
        w0=lin.w0, n_buses=lin.n_bus,
    )


@dataclass(frozen=True)
class DiscreteSafr:
    a_d: np.ndarray
    b_d: np.ndarray
    dt: float
    dp_min: float
    dp_max: float

    @property
    def n_bus(self) -> int:
        return self.b_d.shape[1] // 2


def discretize(model: SafrModel | SfrModel, dt: float) -> DiscreteSafr:
    """Trapezoidal (bilinear) discretization with zero-order-hold input."""
    a_r, b_r = model.a_r, model.b_r
    eye = np.eye(a_r.shape[0])
    lhs = eye - dt / 2 * a_r
    a_d = np.linalg.solve(lhs, eye + dt / 2 * a_r)
    b_d = np.linalg.solve(lhs, dt * b_r)
    return DiscreteSafr(a_d=a_d, b_d=b_d, dt=dt,
                        dp_min=model.dp_min, dp_max=model.dp_max)


def simulate_reduced(disc: DiscreteSafr, u: np.ndarray, x0: np.ndarray | None = None,
                     clamp: bool = True) -> np.ndarray:
    """Propagate x[k+1] = a_d x^[k] + b_d u[k] and return (K+1, 3) states.

    x^ is the state with the governor channel saturated at the aggregate
    limits before it enters the recursion (the saturated value also feeds the
    governor's own update), matching the optimizer's constraint structure.
    """
    u = np.atleast_2d(u)
    k_steps = u.shape[0]
    x = np.zeros((k_steps + 1, 3))
    if x0 is not None:
        x[0] = x0
    a_d, b_d = disc.a_d, disc.b_d
    lo, hi = disc.dp_min, disc.dp_max
    cur = x[0].copy()
    for k in range(k_steps):
        fed = cur.copy()
        if clamp:
            fed[2] = min(max(fed[2], lo), hi)
        cur = a_d @ fed + b_d @ u[k]
        x[k + 1] = cur
    return x


def simulate_linear_dae(lin: LinearizedDae, u: np.ndarray, dt: float,
                        clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Reference response of the full linearized DAE under piecewise-constant
    per-bus injection changes.

    Exact zero-order-hold stepping via the matrix exponential; per-machine
    governor states are clamped to their headroom after each step.  Returns
    (states (K+1, 3G), inertia-weighted speed deviation (K+1,))."""
    na = lin.m.size
    ky_inv = np.linalg.inv(lin.k_y)
    a = lin.a_x - lin.a_y @ ky_inv @ lin.k_x
    b = lin.a_y @ ky_inv
    from scipy.linalg import expm
    nx = a.shape[0]
    nu = b.shape[1]
    aug = np.zeros((nx + nu, nx + nu))
    aug[:nx, :nx] = a * dt
    aug[:nx, nx:] = b * dt
    big = expm(aug)
    e_d, g_d = big[:nx, :nx], big[:nx, nx:]
    u = np.atleast_2d(u)
    k_steps = u.shape[0]
    x = np.zeros((k_steps + 1, nx))
    for k in range(k_steps):
        nxt = e_d @ x[k] + g_d @ u[k]
        if clamp:
            nxt[2 * na:] = np.clip(nxt[2 * na:], lin.dp_min, lin.dp_max)
        x[k + 1] = nxt
    weights = lin.m / lin.m.sum()
    coi = x[:, na:2 * na] @ weights
    return x, coi


def disturbance_from_scenario(net: Network, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Reduce a scenario's events to (per-machine keep fractions, per-bus
    injection step u of length 2N).

    Trips remove their solved dispatch at the machine's bus; injections add
    directly; load scalings subtract the added load.  Event times are ignored
    (the reduced model sees one composite step at k = 0)."""
    dae = DaeSystem(net)
    keep = np.ones(net.n_gen)
    u = np.zeros(2 * net.n_bus)
    n = net.n_bus
    for ev in scenario.events:
        if ev.kind == "trip_generator":
            frac = min(ev.fraction, 1.0)
            keep[ev.gen] *= 1.0 - frac
            i = net.bus_index(net.generators[ev.gen].bus)
            u[i] -= frac * dae.p_gen0[ev.gen]
            u[n + i] -= frac * dae.q_gen0[ev.gen]
        elif ev.kind == "scale_load":
            i = net.bus_index(ev.bus)
            bus = net.buses[i]
            u[i] -= (ev.factor - 1.0) * bus.p_load
            u[n + i] -= (ev.factor - 1.0) * bus.q_load
        else:
            for bus_id, val in ev.dp.items():
                u[net.bus_index(bus_id)] += val
            for bus_id, val in ev.dq.items():
                u[n + net.bus_index(bus_id)] += val
    return keep, u


def save_model(safr: SafrModel, disc: DiscreteSafr, path: str | Path) -> None:
    obj = {
        "dt": disc.dt,
        "a_r": safr.a_r.tolist(), "b_r": safr.b_r.tolist(),
        "a_d": disc.a_d.tolist(), "b_d": disc.b_d.tolist(),
        "m_a": safr.m_a, "d_a": safr.d_a, "r_agg": safr.r_agg, "t_gov": safr.t_gov,
        "dp_min": safr.dp_min, "dp_max": safr.dp_max, "w0": safr.w0,
    }
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_model(path: str | Path) -> tuple[SafrModel, DiscreteSafr]:
    raw = json.loads(Path(path).read_text())
    safr = SafrModel(a_r=np.array(raw["a_r"]), b_r=np.array(raw["b_r"]),
                     m_a=raw["m_a"], d_a=raw["d_a"], r_agg=raw["r_agg"],
                     t_gov=raw["t_gov"], dp_min=raw["dp_min"], dp_max=raw["dp_max"],
                     w0=raw["w0"])
    disc = DiscreteSafr(a_d=np.array(raw["a_d"]), b_d=np.array(raw["b_d"]),
                        dt=raw["dt"], dp_min=raw["dp_min"], dp_max=raw["dp_max"])
    return safr, disc
