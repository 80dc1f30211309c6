"""Nonlinear time-domain simulation with staged under-frequency relays.

Machine model: classical EMF behind transient reactance, first-order governor
with saturation.  States per machine are (rotor angle rad, speed deviation in
p.u. of nominal, mechanical power p.u.); network variables are per-bus
(angle, voltage).  Integration is partitioned-implicit trapezoidal: each step
alternates an implicit trapezoidal update of the machine states with a Newton
re-solve of the algebraic network until joint convergence.

Relays are grouped into stages (one threshold, per-bus shed fractions); each
(stage, bus) relay runs its own deadband counter on its local frequency
signal, latches on trip, and applies its shed after a fixed delay.  Shedding
scales all three ZIP components of the bus load.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import Network, compute_internal_emf, derive_zip_params, solve_power_flow, build_admittance

EVENT_KINDS = ("trip_generator", "scale_load", "inject")
FREQ_SOURCES = ("local_bus", "coi")


# ---------------------------------------------------------------------------
# scenario description

@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    gen: int | None = None
    fraction: float = 1.0
    bus: int | None = None
    factor: float | None = None
    dp: dict[int, float] = field(default_factory=dict)
    dq: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class RelaySettings:
    deadband_s: float = 0.2
    delay_s: float = 0.1
    frequency_source: str = "local_bus"
    netgen_blocking: bool = True


@dataclass(frozen=True)
class Scenario:
    horizon_s: float
    dt: float = 0.01
    events: tuple[Event, ...] = ()
    relay: RelaySettings = field(default_factory=RelaySettings)


_SCEN_KEYS = {"dt", "horizon_s", "events", "relay"}
_RELAY_KEYS = {"deadband_s", "delay_s", "frequency_source", "netgen_blocking"}
_EVENT_KEYS = {
    "trip_generator": {"t", "kind", "gen", "fraction"},
    "scale_load": {"t", "kind", "bus", "factor"},
    "inject": {"t", "kind", "dp", "dq"},
}


def load_scenario(path: str | Path) -> Scenario:
    raw = json.loads(Path(path).read_text())
    extra = set(raw) - _SCEN_KEYS
    if extra:
        raise ValueError(f"unknown keys in scenario: {sorted(extra)}")
    events = []
    for ev in raw.get("events", []):
        kind = ev.get("kind")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        extra = set(ev) - _EVENT_KEYS[kind]
        if extra:
            raise ValueError(f"unknown keys in {kind} event: {sorted(extra)}")
        if kind == "trip_generator":
            events.append(Event(t=float(ev["t"]), kind=kind, gen=int(ev["gen"]),
                                fraction=float(ev.get("fraction", 1.0))))
        elif kind == "scale_load":
            events.append(Event(t=float(ev["t"]), kind=kind, bus=int(ev["bus"]),
                                factor=float(ev["factor"])))
        else:
            events.append(Event(t=float(ev["t"]), kind=kind,
                                dp={int(k): float(v) for k, v in ev.get("dp", {}).items()},
                                dq={int(k): float(v) for k, v in ev.get("dq", {}).items()}))
    relay = RelaySettings()
    if "relay" in raw:
        r = raw["relay"]
        extra = set(r) - _RELAY_KEYS
        if extra:
            raise ValueError(f"unknown keys in relay settings: {sorted(extra)}")
        relay = RelaySettings(
            deadband_s=float(r.get("deadband_s", 0.2)), delay_s=float(r.get("delay_s", 0.1)),
            frequency_source=str(r.get("frequency_source", "local_bus")),
            netgen_blocking=bool(r.get("netgen_blocking", True)))
    if relay.frequency_source not in FREQ_SOURCES:
        raise ValueError(f"frequency_source must be one of {FREQ_SOURCES}")
    return Scenario(horizon_s=float(raw["horizon_s"]), dt=float(raw.get("dt", 0.01)),
                    events=tuple(sorted(events, key=lambda e: e.t)), relay=relay)


def save_scenario(scen: Scenario, path: str | Path) -> None:
    evs = []
    for e in scen.events:
        if e.kind == "trip_generator":
            evs.append({"t": e.t, "kind": e.kind, "gen": e.gen, "fraction": e.fraction})
        elif e.kind == "scale_load":
            evs.append({"t": e.t, "kind": e.kind, "bus": e.bus, "factor": e.factor})
        else:
            evs.append({"t": e.t, "kind": e.kind,
                        "dp": {str(k): v for k, v in e.dp.items()},
                        "dq": {str(k): v for k, v in e.dq.items()}})
    obj = {"dt": scen.dt, "horizon_s": scen.horizon_s, "events": evs,
           "relay": {"deadband_s": scen.relay.deadband_s, "delay_s": scen.relay.delay_s,
                     "frequency_source": scen.relay.frequency_source,
                     "netgen_blocking": scen.relay.netgen_blocking}}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


# ---------------------------------------------------------------------------
# shedding plans

@dataclass(frozen=True)
class PlanStage:
    threshold_hz: float
    fractions: dict[int, float]  # bus id -> fraction of that bus's load


@dataclass(frozen=True)
class UflsPlan:
    stages: tuple[PlanStage, ...]


def save_plan(plan: UflsPlan, path: str | Path) -> None:
    obj = {"stages": [{"threshold_hz": s.threshold_hz,
                       "fractions": {str(k): v for k, v in sorted(s.fractions.items())}}
                      for s in plan.stages]}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_plan(path: str | Path) -> UflsPlan:
    raw = json.loads(Path(path).read_text())
    extra = set(raw) - {"stages"}
    if extra:
        raise ValueError(f"unknown keys in plan: {sorted(extra)}")
    stages = []
    for s in raw["stages"]:
        extra = set(s) - {"threshold_hz", "fractions"}
        if extra:
            raise ValueError(f"unknown keys in plan stage: {sorted(extra)}")
        stages.append(PlanStage(threshold_hz=float(s["threshold_hz"]),
                                fractions={int(k): float(v) for k, v in s["fractions"].items()}))
    return UflsPlan(stages=tuple(stages))


def validate_plan(plan: UflsPlan, net: Network, stage_cap: float | None = None,
                  min_sep_hz: float = 0.0, tol: float = 1e-6) -> None:
    """Check plan invariants; raises ValueError on violation.

    Thresholds strictly decreasing (gap >= min_sep_hz), fractions in [0, 1],
    per-bus totals <= 1, and optionally each stage's demand-weighted shed at
    or under stage_cap (as a fraction of total load).
    """
    prev = None
    totals: dict[int, float] = {}
    total_load = net.total_load
    bus_ids = {b.id for b in net.buses}
    for s in plan.stages:
        if prev is not None and s.threshold_hz > prev - max(min_sep_hz, 0.0) + tol:
            raise ValueError("stage thresholds must decrease by at least the separation")
        prev = s.threshold_hz
        stage_power = 0.0
        for bus_id, frac in s.fractions.items():
            if bus_id not in bus_ids:
                raise ValueError(f"plan references unknown bus {bus_id}")
            if frac < -tol or frac > 1 + tol:
                raise ValueError("shed fractions must lie in [0, 1]")
            totals[bus_id] = totals.get(bus_id, 0.0) + frac
            bus = net.buses[net.bus_index(bus_id)]
            stage_power += frac * bus.p_load
        if stage_cap is not None and stage_power > stage_cap * total_load + tol:
            raise ValueError(f"stage sheds {stage_power:.4f} > cap {stage_cap * total_load:.4f}")
    for bus_id, tot in totals.items():
        if tot > 1 + tol:
            raise ValueError(f"bus {bus_id}: total shed fraction {tot:.4f} > 1")


def make_static_plan(net: Network, n_stages: int = 4, start_hz: float = 59.5,
                     step_hz: float = 0.2, total_fraction: float = 0.25) -> UflsPlan:
    """Conventional fixed plan: uniform per-stage fractions at every load bus.

    Stage thresholds start at start_hz and descend in step_hz steps; the
    uniform per-stage fraction is sized so the designed total shed is at
    least total_fraction of system load.
    """
    frac = total_fraction / n_stages
    load_buses = [b.id for b in net.buses if b.p_load > 0]
    if not load_buses:
        raise ValueError("network has no shedable load")
    stages = tuple(PlanStage(threshold_hz=start_hz - i * step_hz,
                             fractions={bid: frac for bid in load_buses})
                   for i in range(n_stages))
    plan = UflsPlan(stages=stages)
    validate_plan(plan, net)
    return plan


# ---------------------------------------------------------------------------
# the DAE right-hand side shared by the simulator and the linearizer

class DaeSystem:
    """Arrays and residuals of the machine/network DAE at and around a solved
    operating point.  Mutable: events (trips, load scaling, injections) edit
    the parameter arrays in place."""

    def __init__(self, net: Network):
        sol = solve_power_flow(net)
        if not sol.converged:
            raise ValueError("power flow did not converge")
        self.net = net
        self.sol = sol
        self.n = net.n_bus
        self.ng = net.n_gen
        self.w0 = net.omega0
        self.ybus = build_admittance(net).toarray()
        self.gb = net.gen_bus_idx
        init = compute_internal_emf(net, sol)
        self.e = init.e.copy()
        self.delta0 = init.delta.copy()
        self.p_gen0 = init.p_gen.copy()
        self.q_gen0 = init.q_gen.copy()
        self.m = np.array([g.m for g in net.generators], dtype=float)
        self.d = np.array([g.d for g in net.generators], dtype=float)
        self.xdp = np.array([g.xdp for g in net.generators], dtype=float)
        self.rdroop = np.array([g.governor.r for g in net.generators], dtype=float)
        self.tgov = np.array([g.governor.t for g in net.generators], dtype=float)
        self.pmin = np.array([g.governor.p_m_min for g in net.generators], dtype=float)
        self.pmax = np.array([g.governor.p_m_max for g in net.generators], dtype=float)
        self.pref = init.p_gen.copy()
        self.active = np.ones(self.ng, dtype=bool)
        zp = derive_zip_params(net, sol)
        self.zp = np.array([[z.p_const, z.i_p, z.y_p, z.q_const, z.i_q, z.y_q] for z in zp])
        self.shed_mult = np.ones(self.n)
        self.p_extra = np.zeros(self.n)
        self.q_extra = np.zeros(self.n)

    # -- loads ------------------------------------------------------------
    def zip_power(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unshed ZIP load at voltage v (per bus)."""
        z = self.zp
        return (z[:, 0] + z[:, 1] * v + z[:, 2] * v * v,
                z[:, 3] + z[:, 4] * v + z[:, 5] * v * v)

    def zip_dv(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.zp
        return z[:, 1] + 2 * z[:, 2] * v, z[:, 4] + 2 * z[:, 5] * v

    # -- machine electrical output ----------------------------------------
    def machine_power(self, delta, theta, v):
        """P_e, Q_e for each (active-indexed) machine."""
        vg = v[self.gb]
        ang = delta - theta[self.gb]
        pe = vg * self.e * np.sin(ang) / self.xdp
        qe = vg * self.e * np.cos(ang) / self.xdp - vg * vg / self.xdp
        return pe, qe

    # -- DAE residuals -----------------------------------------------------
    def f(self, delta, omega, pm, theta, v):
        """ODE right-hand side over all machines (inactive rows are zero)."""
        pe, _ = self.machine_power(delta, theta, v)
        act = self.active
        ddelta = np.where(act, self.w0 * omega, 0.0)
        domega = np.where(act, (-self.d * omega + pm - pe) / self.m, 0.0)
        dpm = np.where(act, (-omega / self.rdroop - pm + self.pref) / self.tgov, 0.0)
        return ddelta, domega, dpm

    def alg_residual(self, delta, theta, v):
        """Per-bus active/reactive balance: injections minus network flow."""
        vc = v * np.exp(1j * theta)
        s_flow = vc * np.conj(self.ybus @ vc)
        pe, qe = self.machine_power(delta, theta, v)
        gen_p = np.zeros(self.n)
        gen_q = np.zeros(self.n)
        act = self.active
        np.add.at(gen_p, self.gb[act], pe[act])
        np.add.at(gen_q, self.gb[act], qe[act])
        p_load, q_load = self.zip_power(v)
        fp = gen_p - p_load * self.shed_mult + self.p_extra - s_flow.real
        fq = gen_q - q_load * self.shed_mult + self.q_extra - s_flow.imag
        return fp, fq

    def injections(self, delta, theta, v) -> np.ndarray:
        """Net active injection per bus (generation minus load)."""
        pe, _ = self.machine_power(delta, theta, v)
        gen_p = np.zeros(self.n)
        np.add.at(gen_p, self.gb[self.active], pe[self.active])
        p_load, _ = self.zip_power(v)
        return gen_p - p_load * self.shed_mult + self.p_extra

    def alg_jacobian(self, delta, theta, v):
        """d(alg_residual)/d(theta, v), dense (2N x 2N)."""
        n = self.n
        vc = v * np.exp(1j * theta)
        ibus = self.ybus @ vc
        diag_v = np.diag(vc)
        ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - self.ybus @ diag_v)
        vnorm = vc / v
        ds_dvm = diag_v @ np.conj(self.ybus @ np.diag(vnorm)) + np.conj(np.diag(ibus)) @ np.diag(vnorm)
        jac = np.zeros((2 * n, 2 * n))
        jac[:n, :n] = -ds_dva.real
        jac[:n, n:] = -ds_dvm.real
        jac[n:, :n] = -ds_dva.imag
        jac[n:, n:] = -ds_dvm.imag
        # machine terms
        act = self.active
        gb = self.gb[act]
        vg = v[gb]
        ang = delta[act] - theta[gb]
        e, xdp = self.e[act], self.xdp[act]
        ke = vg * e * np.cos(ang) / xdp
        se = e * np.sin(ang) / xdp
        np.add.at(jac, (gb, gb), -ke)                    # dP/dtheta
        np.add.at(jac, (gb, n + gb), se)                 # dP/dV
        np.add.at(jac, (n + gb, gb), vg * se)            # dQ/dtheta
        np.add.at(jac, (n + gb, n + gb), e * np.cos(ang) / xdp - 2 * vg / xdp)  # dQ/dV
        # voltage-dependent loads
        dp_dv, dq_dv = self.zip_dv(v)
        idx = np.arange(n)
        jac[idx, n + idx] -= dp_dv * self.shed_mult
        jac[n + idx, n + idx] -= dq_dv * self.shed_mult
        return jac

    # -- events -------------------------------------------------------------
    def apply_trip(self, gen: int, fraction: float) -> None:
        if not self.active[gen]:
            return
        if fraction >= 1.0 - 1e-12:
            self.active[gen] = False
            return
        keep = 1.0 - fraction
        self.m[gen] *= keep
        self.d[gen] *= keep
        self.xdp[gen] /= keep
        self.rdroop[gen] /= keep
        self.pref[gen] *= keep
        self.pmin[gen] *= keep
        self.pmax[gen] *= keep

    def apply_scale_load(self, bus_idx: int, factor: float) -> None:
        self.zp[bus_idx, :] *= factor

    def apply_inject(self, dp: dict[int, float], dq: dict[int, float], net: Network) -> None:
        for bus_id, val in dp.items():
            self.p_extra[net.bus_index(bus_id)] += val
        for bus_id, val in dq.items():
            self.q_extra[net.bus_index(bus_id)] += val


def coi_frequency(omega_pu: np.ndarray, m: np.ndarray, nominal_hz: float = 60.0) -> float:
    """Inertia-weighted average frequency in Hz."""
    return nominal_hz * (1.0 + float(np.dot(m, omega_pu) / m.sum()))


def nearest_generator_map(net: Network, active: np.ndarray) -> np.ndarray:
    """For each bus, the index of the electrically nearest active generator
    (graph hops; ties broken by generator order)."""
    adj: dict[int, list[int]] = {i: [] for i in range(net.n_bus)}
    for br in net.branches:
        f, t = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        adj[f].append(t)
        adj[t].append(f)
    gens_at: dict[int, list[int]] = {}
    for k in np.flatnonzero(active):
        gens_at.setdefault(int(net.gen_bus_idx[k]), []).append(int(k))
    out = np.full(net.n_bus, -1, dtype=int)
    for start in range(net.n_bus):
        seen = {start}
        frontier = [start]
        while frontier:
            hits = [g for b in frontier if b in gens_at for g in gens_at[b]]
            if hits:
                out[start] = min(hits)
                break
            nxt = []
            for b in frontier:
                for nb in adj[b]:
                    if nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            frontier = sorted(nxt)
    if np.any(out < 0):
        raise ValueError("no active generator reachable from some bus")
    return out


# ---------------------------------------------------------------------------
# trajectory and metrics

@dataclass
class Trajectory:
    dt: float
    t: np.ndarray
    coi_hz: np.ndarray
    shed_pu: np.ndarray
    v: np.ndarray          # (steps, n_bus)
    theta: np.ndarray
    freq_hz: np.ndarray    # (steps, n_gen), NaN after a full trip
    omega: np.ndarray      # p.u. deviations
    delta: np.ndarray
    pm: np.ndarray
    shed_frac: np.ndarray  # (steps, n_stages, n_bus) applied fractions
    bus_ids: tuple[int, ...]
    gen_ids: tuple[int, ...]
    demand0: float
    aborted: bool = False
    abort_reason: str = ""

    def to_csv(self, path: str | Path) -> None:
        cols = ["t", "coi_hz", "shed_pu"]
        cols += [f"v_{b}" for b in self.bus_ids]
        cols += [f"f_{g}" for g in self.gen_ids]
        data = np.column_stack([self.t, self.coi_hz, self.shed_pu, self.v, self.freq_hz])
        lines = [",".join(cols)]
        for row in data:
            lines.append(",".join(f"{x:.10g}" for x in row))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class SimMetrics:
    nadir_hz: float
    settling_hz: float
    shed_pct: float
    rocof_hz_s: float
    criteria_met: bool
    stabilized: bool


def metrics(traj: Trajectory, f_min: float = 58.0, f_ss_lo: float = 59.5,
            f_ss_hi: float = 60.7) -> SimMetrics:
    """Design-criteria summary of a run.

    Settling frequency is the mean of the inertia-weighted frequency over the
    final second; shed is the final shed power relative to pre-event demand;
    RoCoF is the steepest 100 ms average slope.
    """
    nadir = float(np.min(traj.coi_hz))
    n_settle = max(2, int(round(1.0 / traj.dt)) + 1)
    settling = float(np.mean(traj.coi_hz[-n_settle:]))
    shed_pct = 100.0 * float(traj.shed_pu[-1]) / traj.demand0 if traj.demand0 > 0 else 0.0
    w = max(1, int(round(0.1 / traj.dt)))
    if len(traj.coi_hz) > w:
        slopes = (traj.coi_hz[w:] - traj.coi_hz[:-w]) / (w * traj.dt)
        rocof = float(np.max(np.abs(slopes)))
    else:
        rocof = 0.0
    stabilized = (not traj.aborted) and settling >= f_min
    met = stabilized and nadir >= f_min and f_ss_lo <= settling <= f_ss_hi
    return SimMetrics(nadir_hz=nadir, settling_hz=settling, shed_pct=shed_pct,
                      rocof_hz_s=rocof, criteria_met=bool(met), stabilized=bool(stabilized))


# ---------------------------------------------------------------------------
# relay bank

class RelayBank:
    """Per-stage, per-bus deadband/delay/latch state for a shedding plan."""

    def __init__(self, plan: UflsPlan, net: Network, settings: RelaySettings, dt: float):
        self.settings = settings
        self.thresholds = np.array([s.threshold_hz for s in plan.stages])
        self.n_stages = len(plan.stages)
        n = net.n_bus
        self.fractions = np.zeros((self.n_stages, n))
        for si, s in enumerate(plan.stages):
            for bus_id, frac in s.fractions.items():
                self.fractions[si, net.bus_index(bus_id)] = frac
        self.deadband_steps = max(1, int(round(settings.deadband_s / dt)))
        self.delay_steps = int(round(settings.delay_s / dt))
        self.counter = np.zeros((self.n_stages, n), dtype=int)
        self.latched = np.zeros((self.n_stages, n), dtype=bool)
        self.blocked = np.zeros((self.n_stages, n), dtype=bool)
        self.applied = np.zeros((self.n_stages, n))
        self.pending: list[tuple[int, int, int]] = []  # (activation step, stage, bus)

    def step(self, k: int, bus_freq_hz: np.ndarray, bus_injection: np.ndarray) -> bool:
        """Advance relay logic using the frequency snapshot at step k.

        Returns True when the set of applied shed fractions changed (pending
        delays that expire at this step are folded in).
        """
        relevant = self.fractions > 0
        below = (bus_freq_hz[None, :] < self.thresholds[:, None]) & relevant & ~self.latched
        self.counter[below] += 1
        self.counter[~below] = 0
        tripping = self.counter >= self.deadband_steps
        changed = False
        for si, bi in zip(*np.nonzero(tripping)):
            self.latched[si, bi] = True
            self.counter[si, bi] = 0
            if self.settings.netgen_blocking and bus_injection[bi] >= 0:
                self.blocked[si, bi] = True
                continue
            self.pending.append((k + self.delay_steps, si, bi))
        still = []
        for act_step, si, bi in self.pending:
            if act_step <= k:
                self.applied[si, bi] = self.fractions[si, bi]
                changed = True
            else:
                still.append((act_step, si, bi))
        self.pending = still
        return changed

    @property
    def shed_multiplier(self) -> np.ndarray:
        return np.clip(1.0 - self.applied.sum(axis=0), 0.0, 1.0)


# ---------------------------------------------------------------------------
# the integrator

class _Stepper:
    def __init__(self, dae: DaeSystem, dt: float, tol: float = 1e-8, max_inner: int = 20):
        self.dae = dae
        self.dt = dt
        self.tol = tol
        self.max_inner = max_inner

    def solve_algebraic(self, delta, theta, v, tol=None):
        dae = self.dae
        tol = tol or self.tol
        y = np.concatenate([theta, v])
        n = dae.n
        for _ in range(40):
            fp, fq = dae.alg_residual(delta, y[:n], y[n:])
            res = np.concatenate([fp, fq])
            norm = np.max(np.abs(res))
            if norm < tol:
                return y[:n], y[n:], True
            jac = dae.alg_jacobian(delta, y[:n], y[n:])
            try:
                step = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                return y[:n], y[n:], False
            # damped update: keep the residual decreasing
            scale = 1.0
            for _ in range(5):
                y_try = y + scale * step
                fp2, fq2 = dae.alg_residual(delta, y_try[:n], y_try[n:])
                if np.max(np.abs(np.concatenate([fp2, fq2]))) < norm:
                    break
                scale *= 0.5
            y = y + scale * step
        return y[:n], y[n:], False

    def machine_substep(self, x0, f0, y_next):
        """Implicit trapezoidal update of machine states with frozen network."""
        dae = self.dae
        act = np.flatnonzero(dae.active)
        h = self.dt
        theta, v = y_next
        delta0, omega0, pm0 = x0
        f0d, f0w, f0p = f0
        delta, omega, pm = delta0.copy(), omega0.copy(), pm0.copy()
        na = act.size
        m, d, xdp = dae.m[act], dae.d[act], dae.xdp[act]
        rg, tg = dae.rdroop[act], dae.tgov[act]
        e = dae.e[act]
        vg = v[dae.gb[act]]
        thg = theta[dae.gb[act]]
        for _ in range(12):
            fd, fw, fp = dae.f(delta, omega, pm, theta, v)
            r1 = delta[act] - delta0[act] - h / 2 * (f0d[act] + fd[act])
            r2 = omega[act] - omega0[act] - h / 2 * (f0w[act] + fw[act])
            r3 = pm[act] - pm0[act] - h / 2 * (f0p[act] + fp[act])
            res = max(np.max(np.abs(r1), initial=0), np.max(np.abs(r2), initial=0),
                      np.max(np.abs(r3), initial=0))
            if res < 1e-12:
                break
            ke = vg * e * np.cos(delta[act] - thg) / xdp
            jac = np.zeros((na, 3, 3))
            jac[:, 0, 0] = 1.0
            jac[:, 0, 1] = -h / 2 * dae.w0
            jac[:, 1, 0] = h / 2 * ke / m
            jac[:, 1, 1] = 1.0 + h / 2 * d / m
            jac[:, 1, 2] = -h / 2 / m
            jac[:, 2, 1] = h / 2 / (rg * tg)
            jac[:, 2, 2] = 1.0 + h / 2 / tg
            rhs = np.stack([r1, r2, r3], axis=1)[:, :, None]
            upd = np.linalg.solve(jac, rhs)[:, :, 0]
            delta[act] -= upd[:, 0]
            omega[act] -= upd[:, 1]
            pm[act] -= upd[:, 2]
        return delta, omega, pm

    def step(self, delta, omega, pm, theta, v):
        """One trapezoidal step; returns new (delta, omega, pm, theta, v, ok)."""
        dae = self.dae
        f0 = dae.f(delta, omega, pm, theta, v)
        x0 = (delta, omega, pm)
        th_n, v_n = theta.copy(), v.copy()
        d_n, w_n, p_n = delta, omega, pm
        ok = False
        prev = None
        for _ in range(self.max_inner):
            d_n, w_n, p_n = self.machine_substep(x0, f0, (th_n, v_n))
            th_n, v_n, alg_ok = self.solve_algebraic(d_n, th_n, v_n)
            if not alg_ok:
                return d_n, w_n, p_n, th_n, v_n, False
            cur = np.concatenate([d_n, w_n, p_n])
            if prev is not None and np.max(np.abs(cur - prev)) < self.tol:
                ok = True
                break
            prev = cur
        # anti-windup clamp on the governor state
        p_n = np.clip(p_n, dae.pmin, dae.pmax)
        return d_n, w_n, p_n, th_n, v_n, ok


def simulate(net: Network, scenario: Scenario, plan: UflsPlan | None = None) -> Trajectory:
    """Run a scenario (optionally with a shedding plan) and record the trajectory."""
    if plan is not None:
        validate_plan(plan, net)
    dae = DaeSystem(net)
    dt = scenario.dt
    n_steps = int(round(scenario.horizon_s / dt))
    stepper = _Stepper(dae, dt)

    delta = dae.delta0.copy()
    omega = np.zeros(dae.ng)
    pm = dae.p_gen0.copy()
    theta = dae.sol.theta.copy()
    v = dae.sol.v.copy()

    bank = RelayBank(plan, net, scenario.relay, dt) if plan is not None else None
    n_stages = bank.n_stages if bank is not None else 0
    gen_map = nearest_generator_map(net, dae.active)

    shape = (n_steps + 1,)
    traj = Trajectory(
        dt=dt, t=np.arange(n_steps + 1) * dt,
        coi_hz=np.zeros(shape), shed_pu=np.zeros(shape),
        v=np.zeros((n_steps + 1, dae.n)), theta=np.zeros((n_steps + 1, dae.n)),
        freq_hz=np.full((n_steps + 1, dae.ng), np.nan),
        omega=np.zeros((n_steps + 1, dae.ng)), delta=np.zeros((n_steps + 1, dae.ng)),
        pm=np.zeros((n_steps + 1, dae.ng)),
        shed_frac=np.zeros((n_steps + 1, n_stages, dae.n)),
        bus_ids=tuple(b.id for b in net.buses),
        gen_ids=tuple(range(dae.ng)),
        demand0=net.total_load,
    )

    def record(k):
        act = dae.active
        traj.coi_hz[k] = coi_frequency(omega[act], dae.m[act], net.nominal_hz)
        p_load, _ = dae.zip_power(v)
        traj.shed_pu[k] = float(np.dot(1.0 - dae.shed_mult, p_load))
        traj.v[k] = v
        traj.theta[k] = theta
        traj.freq_hz[k, act] = net.nominal_hz * (1.0 + omega[act])
        traj.omega[k] = omega
        traj.delta[k] = delta
        traj.pm[k] = pm
        if bank is not None:
            traj.shed_frac[k] = bank.applied

    record(0)
    ev_queue = list(scenario.events)
    for k in range(n_steps):
        t_now = k * dt
        # events due by the start of this step
        dirty = False
        while ev_queue and ev_queue[0].t <= t_now + dt / 2:
            ev = ev_queue.pop(0)
            if ev.kind == "trip_generator":
                dae.apply_trip(ev.gen, ev.fraction)
                pm[ev.gen] *= max(0.0, 1.0 - ev.fraction)  # surviving units keep their own P_m
                gen_map = nearest_generator_map(net, dae.active)
            elif ev.kind == "scale_load":
                dae.apply_scale_load(net.bus_index(ev.bus), ev.factor)
            else:
                dae.apply_inject(ev.dp, ev.dq, net)
            dirty = True
        # relay logic on the snapshot at k
        if bank is not None:
            if scenario.relay.frequency_source == "coi":
                bus_freq = np.full(dae.n, traj.coi_hz[k])
            else:
                bus_freq = net.nominal_hz * (1.0 + omega[gen_map])
            inj = dae.injections(delta, theta, v)
            if bank.step(k, bus_freq, inj):
                dae.shed_mult = bank.shed_multiplier
                dirty = True
        if dirty:
            # network jumps discontinuously at an event; re-anchor y at step k
            theta, v, ok = stepper.solve_algebraic(delta, theta, v)
            if not ok:
                return _abort(traj, k, "algebraic solve failed after event")
        delta, omega, pm, theta, v, ok = stepper.step(delta, omega, pm, theta, v)
        if not ok:
            return _abort(traj, k, "integration step failed to converge")
        record(k + 1)
    return traj


def _abort(traj: Trajectory, k: int, reason: str) -> Trajectory:
    for name in ("t", "coi_hz", "shed_pu", "v", "theta", "freq_hz", "omega",
                 "delta", "pm", "shed_frac"):
        setattr(traj, name, getattr(traj, name)[: k + 1])
    traj.aborted = True
    traj.abort_reason = reason
    return traj
