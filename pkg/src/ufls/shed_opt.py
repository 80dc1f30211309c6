"""Optimization of staged under-frequency load-shedding setpoints.

A mixed-integer linear program is assembled over the discretized aggregate
frequency model: two trajectory envelopes (shed power evaluated at the upper
and lower voltage bound) are propagated through the model dynamics with the
governor channel clamped exactly via binary indicator chains; per-stage
frequency thresholds and per-bus shed fractions are decision variables tied
together by relay trigger logic (deadband counting and actuation delay
mirrored from the time-domain relay model, one time step more conservative);
frequency floor and settling-band limits apply to both envelopes.  The
objective minimizes the final shed demand.

Variable names in the exported model are canonical (``x%06d``); the
`UflsMilp` wrapper keeps the semantic index maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .milp import MilpModel, audit_solution
from .reduction import DiscreteSafr, aggregate, build_sfr, discretize, disturbance_from_scenario, linearize
from .simulate import DaeSystem, PlanStage, Scenario, UflsPlan
from .grid import Network
from .solvers import MilpSolution, ScipyMilpBackend, lp_bound, solve


@dataclass(frozen=True)
class UflsOptConfig:
    """Limits, discretization, and relay timing for the setpoint optimizer.

    Frequencies are configured in Hz and converted to per-unit deviations
    internally (the implicit unit big-M in the trigger rows is valid only in
    per-unit, where |deviation| < 0.04)."""
    n_stages: int = 4
    dt_opt: float = 0.05
    horizon_s: float = 15.0
    v_min: float = 0.9
    v_max: float = 1.1
    f_min_hz: float = 58.0
    f_ss_min_hz: float = 59.5
    f_ss_max_hz: float = 60.7
    g_bar: float = 0.075
    f_sep_hz: float = 0.2
    f_shed_max_hz: float = 59.5
    f_cap_hz: float = 61.2  # transient over-frequency allowance
    big_m: float = 500.0
    deadband_s: float = 0.2
    delay_s: float = 0.1
    nominal_hz: float = 60.0

    def __post_init__(self):
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.f_ss_min_hz >= self.f_ss_max_hz:
            raise ValueError("settling band is empty")
        if self.dt_opt <= 0 or self.horizon_s <= 0:
            raise ValueError("time steps must be positive")
        if self.n_stages < 1:
            raise ValueError("need at least one stage")

    @property
    def k_steps(self) -> int:
        return int(math.floor(self.horizon_s / self.dt_opt))

    @property
    def deadband_steps(self) -> int:
        return max(1, int(round(self.deadband_s / self.dt_opt)))

    @property
    def delay_steps(self) -> int:
        return int(round(self.delay_s / self.dt_opt))

    def hz_to_pu(self, f_hz: float) -> float:
        return (f_hz - self.nominal_hz) / self.nominal_hz

    def pu_to_hz(self, dev_pu: float) -> float:
        return self.nominal_hz * (1.0 + dev_pu)


@dataclass(frozen=True)
class ShedEnvelopes:
    """Per shed-bus bounds on the power released by shedding a unit fraction,
    over the configured voltage interval.  Components with negative ZIP
    coefficients have the voltage roles swapped so hi >= lo pointwise."""
    p_hi: np.ndarray
    p_lo: np.ndarray
    q_hi: np.ndarray
    q_lo: np.ndarray


def _component_env(const, lin, quad, v_lo, v_hi):
    hi = const + lin * np.where(lin >= 0, v_hi, v_lo) \
         + quad * np.where(quad >= 0, v_hi ** 2, v_lo ** 2)
    lo = const + lin * np.where(lin >= 0, v_lo, v_hi) \
         + quad * np.where(quad >= 0, v_lo ** 2, v_hi ** 2)
    return hi, lo


def build_shed_envelopes(zp: np.ndarray, shed_buses: np.ndarray,
                         cfg: UflsOptConfig, v0: np.ndarray | None = None) -> ShedEnvelopes:
    """Envelope the ZIP shed power over v in [v_min, v_max].

    With v0 given, the envelopes collapse to the shed power evaluated at the
    pre-event voltage (used by the baseline model that carries no voltage
    information)."""
    z = zp[shed_buses]
    if v0 is not None:
        v = v0[shed_buses]
        p = z[:, 0] + z[:, 1] * v + z[:, 2] * v * v
        q = z[:, 3] + z[:, 4] * v + z[:, 5] * v * v
        return ShedEnvelopes(p.copy(), p.copy(), q.copy(), q.copy())
    p_hi, p_lo = _component_env(z[:, 0], z[:, 1], z[:, 2], cfg.v_min, cfg.v_max)
    q_hi, q_lo = _component_env(z[:, 3], z[:, 4], z[:, 5], cfg.v_min, cfg.v_max)
    return ShedEnvelopes(p_hi, p_lo, q_hi, q_lo)


@dataclass
class UflsMilp:
    """Assembled optimization model plus the semantic variable index maps."""
    model: MilpModel
    cfg: UflsOptConfig
    disc: DiscreteSafr
    shed_buses: np.ndarray          # bus positions carrying shedable demand
    p_d0: np.ndarray                # pre-event demand, all buses
    env: ShedEnvelopes
    u_dist: np.ndarray
    tau: np.ndarray                 # (S,) threshold variable indices
    x: np.ndarray                   # (2, K+1, 3) state variable indices
    t_lo: np.ndarray                # (2, K)
    t_hi: np.ndarray
    gam_lo: np.ndarray
    gam_hi: np.ndarray
    g: np.ndarray                   # (S, L, K+1)
    alpha: np.ndarray               # (S, K)
    s_eff: float = 500.0            # ceiling of the clamp-row constants
    p_bounds: tuple[float, float] = (-np.inf, np.inf)
    tau_bounds: tuple[np.ndarray, np.ndarray] | None = None
    state_boxes: np.ndarray | None = None   # (K+1, 3, 2) per-step state hulls
    shed_bus_ids: list[int] = field(default_factory=list)
    shed_gain: np.ndarray = field(default=None)  # (2, 3, L) state gain per unit fraction

    @property
    def n_stages(self) -> int:
        return self.tau.size

    def p_tilde(self, xv: np.ndarray, e: int, k: int) -> float:
        """Clamped governor power fed into the dynamics at step k."""
        return xv[self.t_hi[e, k]] + (1.0 - xv[self.gam_hi[e, k]]) * self.disc.dp_max


def _state_boxes(disc: DiscreteSafr, gain: np.ndarray, u_dist: np.ndarray,
                 cfg: UflsOptConfig) -> np.ndarray:
    """Per-step rigorous intervals for (angle, speed, raw governor state).

    Interval propagation of x[k+1] = a_d xhat[k] + u[k]: the speed component
    is intersected with the box its variable bounds enforce (settling band at
    the final step), the clamped component of xhat is the clip of the raw
    interval, and the input interval combines the fixed disturbance with shed
    fractions anywhere inside the per-bus cumulative caps.  The result, an
    (k_steps + 1, 3, 2) array of [lo, hi], contains every trajectory of
    either envelope that satisfies the model's rows and bounds with integral
    clamp indicators, so it is safe to impose as variable bounds; a crossed
    interval means the instance is provably infeasible and is kept as-is for
    the solver to report."""
    k_steps = cfg.k_steps
    w_box = (cfg.hz_to_pu(cfg.f_min_hz), cfg.hz_to_pu(cfg.f_cap_hz))
    w_ss = (cfg.hz_to_pu(cfg.f_ss_min_hz), cfg.hz_to_pu(cfg.f_ss_max_hz))
    w_dist = disc.b_d @ u_dist
    u_lo = w_dist + np.minimum(0.0, gain).sum(axis=2).min(axis=0)
    u_hi = w_dist + np.maximum(0.0, gain).sum(axis=2).max(axis=0)
    ap, an = np.maximum(disc.a_d, 0.0), np.minimum(disc.a_d, 0.0)
    boxes = np.zeros((k_steps + 1, 3, 2))
    lo = np.zeros(3)
    hi = np.zeros(3)
    for k in range(1, k_steps + 1):
        eff_lo, eff_hi = lo.copy(), hi.copy()
        eff_lo[2] = min(max(eff_lo[2], disc.dp_min), disc.dp_max)
        eff_hi[2] = min(max(eff_hi[2], disc.dp_min), disc.dp_max)
        nlo = ap @ eff_lo + an @ eff_hi + u_lo
        nhi = ap @ eff_hi + an @ eff_lo + u_hi
        # outward float pad keeps the enclosures honest
        pad = 1e-9 * np.maximum(1.0, np.maximum(np.abs(nlo), np.abs(nhi)))
        lo, hi = nlo - pad, nhi + pad
        w_lo, w_hi = w_ss if k == k_steps else w_box
        lo[1] = max(lo[1], w_lo)
        hi[1] = min(hi[1], w_hi)
        boxes[k, :, 0] = lo
        boxes[k, :, 1] = hi
    return boxes


# HiGHS deletes matrix entries at or below 1e-9 on load; every emitted
# indicator coefficient must stay above that or the escape term silently
# vanishes and the row turns hard.
_COEF_FLOOR = 1e-6


def assemble(disc: DiscreteSafr, zp: np.ndarray, v0: np.ndarray,
             u_dist: np.ndarray, cfg: UflsOptConfig,
             voltage_envelopes: bool = True, tighten: bool = True,
             name: str = "UFLS") -> UflsMilp:
    """Build the full MILP.  Deterministic: identical inputs produce a
    byte-identical export.

    With tighten on (the default), every state variable gets rigorous
    per-step bounds from interval propagation of the discrete recursion (see
    _state_boxes); clamp indicators whose side the intervals prove
    unreachable at a step are fixed, and every indicator row carries the
    smallest constant valid on the interval instead of one global big-M.
    None of this excludes an integer-feasible point, but it collapses the
    easy part of the horizon at presolve and keeps the relaxation close to
    the convex hull, which is what makes the branch-and-bound tractable.
    With tighten off the model keeps one global big-M and free state
    variables; both variants describe the same feasible plans."""
    n = zp.shape[0]
    if u_dist.shape != (2 * n,):
        raise ValueError(f"disturbance must have length {2 * n}")
    if disc.n_bus != n:
        raise ValueError("model/network bus count mismatch")
    if not (disc.dp_min <= 0.0 <= disc.dp_max):
        raise ValueError("governor band must bracket zero")
    k_steps = cfg.k_steps
    k_db, d = cfg.deadband_steps, cfg.delay_steps
    s_stages = cfg.n_stages

    p_d0 = zp[:, 0] + zp[:, 1] * v0 + zp[:, 2] * v0 * v0
    shed_buses = np.flatnonzero(p_d0 > 1e-12)
    ls = shed_buses.size
    if ls == 0:
        raise ValueError("no shedable demand")
    env = build_shed_envelopes(zp, shed_buses, cfg,
                               v0=None if voltage_envelopes else v0)
    # per-state gain of one unit of shed fraction at each shed bus
    gain = np.zeros((2, 3, ls))
    for e, (pe, qe) in enumerate(((env.p_hi, env.q_hi), (env.p_lo, env.q_lo))):
        gain[e] = disc.b_d[:, shed_buses] * pe + disc.b_d[:, n + shed_buses] * qe

    m = MilpModel(name)
    nv = 0

    def var(lb, ub, integer=False):
        nonlocal nv
        i = m.add_var(f"x{nv:06d}", lb, ub, integer=integer)
        nv += 1
        return i

    inf = np.inf
    w_min = cfg.hz_to_pu(cfg.f_min_hz)
    w_ss = (cfg.hz_to_pu(cfg.f_ss_min_hz), cfg.hz_to_pu(cfg.f_ss_max_hz))
    w_cap = cfg.hz_to_pu(cfg.f_cap_hz)

    if tighten:
        boxes = _state_boxes(disc, gain, u_dist, cfg)
        p_lb = float(min(boxes[:, 2, 0].min(), 0.0))
        p_ub = float(max(boxes[:, 2, 1].max(), 0.0))
        s_need = max(p_ub - disc.dp_min, disc.dp_min - p_lb,
                     disc.dp_max - p_lb, p_ub - disc.dp_max,
                     abs(p_lb), abs(p_ub), disc.dp_max - disc.dp_min,
                     abs(disc.dp_min), abs(disc.dp_max))
        s_eff = min(cfg.big_m, 1.2 * max(s_need, 1e-6))
    else:
        boxes = None
        p_lb, p_ub = -inf, inf
        s_eff = cfg.big_m

    sep = cfg.f_sep_hz / cfg.nominal_hz
    tau_ub = np.array([cfg.hz_to_pu(cfg.f_shed_max_hz) - i * sep
                       for i in range(s_stages)])
    # room below the floor so trailing stages can park without ever firing
    tau_lb = np.array([w_min - (s_stages - i) * sep for i in range(s_stages)])
    if np.any(tau_ub <= tau_lb) or np.any(tau_ub <= w_min):
        raise ValueError("threshold window collapsed; loosen f_shed_max_hz, "
                         "f_sep_hz or n_stages")
    tau = np.array([var(tau_lb[i], tau_ub[i]) for i in range(s_stages)])

    x = np.zeros((2, k_steps + 1, 3), dtype=int)
    for e in range(2):
        for k in range(k_steps + 1):
            if k == 0:
                x[e, k] = [var(0.0, 0.0), var(0.0, 0.0), var(0.0, 0.0)]
            elif boxes is not None:
                x[e, k] = [var(*boxes[k, 0]), var(*boxes[k, 1]),
                           var(*boxes[k, 2])]
            else:
                lo, hi = (w_ss if k == k_steps else (w_min, w_cap))
                x[e, k] = [var(-inf, inf), var(lo, hi), var(p_lb, p_ub)]

    pmin, pmax = disc.dp_min, disc.dp_max
    t_lo = np.zeros((2, k_steps), dtype=int)
    t_hi = np.zeros((2, k_steps), dtype=int)
    for e in range(2):
        for k in range(k_steps):
            if boxes is not None:
                pl, pu = boxes[k, 2]    # clamp acts on the step-k state
                y1l, y1u = max(pl, pmin), max(pu, pmin)
                t_lo[e, k] = var(min(pl, 0.0), max(pu, 0.0))
                t_hi[e, k] = var(min(y1l, 0.0), max(y1u, 0.0))
            else:
                t_lo[e, k] = var(-inf, inf)
                t_hi[e, k] = var(-inf, inf)

    g = np.zeros((s_stages, ls, k_steps + 1), dtype=int)
    for i in range(s_stages):
        for b in range(ls):
            for k in range(k_steps + 1):
                g[i, b, k] = var(0.0, 0.0 if k == 0 else 1.0)

    alpha = np.zeros((s_stages, k_steps), dtype=int)
    for i in range(s_stages):
        for k in range(k_steps):
            # the trigger cannot be on while the speed provably sits above
            # the stage's highest admissible threshold
            if boxes is not None and boxes[k, 1, 0] > tau_ub[i]:
                alpha[i, k] = var(0, 0, integer=True)
            else:
                alpha[i, k] = var(0, 1, integer=True)
    gam_lo = np.zeros((2, k_steps), dtype=int)
    gam_hi = np.zeros((2, k_steps), dtype=int)
    for e in range(2):
        for k in range(k_steps):
            if boxes is not None:
                pl, pu = boxes[k, 2]
                y1l, y1u = max(pl, pmin), max(pu, pmin)
                bl = (1, 1) if pl >= pmin else (0, 0) if pu <= pmin else (0, 1)
                bh = (1, 1) if y1u <= pmax else (0, 0) if y1l >= pmax \
                    else (0, 1)
            else:
                bl = bh = (0, 1)
            gam_lo[e, k] = var(*bl, integer=True)
            gam_hi[e, k] = var(*bh, integer=True)

    idx = UflsMilp(model=m, cfg=cfg, disc=disc, shed_buses=shed_buses,
                   p_d0=p_d0, env=env, u_dist=u_dist.copy(),
                   tau=tau, x=x, t_lo=t_lo, t_hi=t_hi, gam_lo=gam_lo,
                   gam_hi=gam_hi, g=g, alpha=alpha, s_eff=s_eff,
                   p_bounds=(p_lb, p_ub))
    idx.shed_gain = gain
    idx.tau_bounds = (tau_lb, tau_ub)
    idx.state_boxes = boxes

    build_governor_saturation(idx)
    build_dynamics(idx)
    build_threshold_logic(idx)
    build_frequency_limits(idx)
    build_overshed_and_separation(idx)

    m.set_objective({int(g[i, b, k_steps]): float(p_d0[shed_buses[b]])
                     for i in range(s_stages) for b in range(ls)})
    return idx


def build_governor_saturation(idx: UflsMilp) -> None:
    """Exact clamp of the governor state to [dp_min, dp_max] via two chained
    binary indicators per envelope and step.

    gam_lo = 1 iff the raw state is above dp_min; t_lo carries gam_lo * raw.
    The lower-clamped value y1 = t_lo + (1 - gam_lo) dp_min then passes the
    mirrored upper clamp (gam_hi, t_hi); the fully clamped value is
    t_hi + (1 - gam_hi) dp_max, inlined into the dynamics rows.

    When per-step state intervals are available the emission is structural:
    a step whose interval proves one clamp side unreachable gets the
    substituted equality (or fixed bounds) instead of indicator rows, and a
    row whose escape term the interval proves unnecessary is written hard,
    without the binary.  Remaining big-M constants are the smallest valid on
    the interval.  Without intervals every step gets the twelve generic rows
    under the global ceiling.  Both emissions admit exactly the same
    integer-feasible plans."""
    m = idx.model
    pmin, pmax = idx.disc.dp_min, idx.disc.dp_max

    def big(v: float) -> float:
        return max(float(v), _COEF_FLOOR)

    for e in range(2):
        for k in range(idx.cfg.k_steps):
            p = int(idx.x[e, k, 2])
            tl, th = int(idx.t_lo[e, k]), int(idx.t_hi[e, k])
            gl, gh = int(idx.gam_lo[e, k]), int(idx.gam_hi[e, k])
            if idx.state_boxes is None:
                s = idx.s_eff
                # indicator: gam_lo forced by the sign of (raw - dp_min)
                m.add_constr({gl: s, p: -1.0}, ">=", -pmin)
                m.add_constr({gl: s, p: -1.0}, "<=", s - pmin)
                # t_lo = gam_lo * raw
                m.add_constr({tl: 1.0, p: -1.0, gl: s}, "<=", s)
                m.add_constr({tl: 1.0, p: -1.0, gl: -s}, ">=", -s)
                m.add_constr({tl: 1.0, gl: -s}, "<=", 0.0)
                m.add_constr({tl: 1.0, gl: s}, ">=", 0.0)
                # indicator: gam_hi forced by the sign of (dp_max - y1)
                m.add_constr({gh: s, tl: 1.0, gl: -pmin}, ">=", pmax - pmin)
                m.add_constr({gh: s, tl: 1.0, gl: -pmin}, "<=",
                             s + pmax - pmin)
                # t_hi = gam_hi * y1; the first row uses that gam_hi = 0
                # forces y1 >= dp_max, pinning the clamp output to
                # min(y1, dp_max) even for fractional indicators
                m.add_constr({th: 1.0, tl: -1.0, gl: pmin,
                              gh: -pmax if pmax > 0.0 else s},
                             "<=", pmin - pmax if pmax > 0.0 else s + pmin)
                m.add_constr({th: 1.0, tl: -1.0, gl: pmin, gh: -s}, ">=",
                             pmin - s)
                m.add_constr({th: 1.0, gh: -s}, "<=", 0.0)
                m.add_constr({th: 1.0, gh: s}, ">=", 0.0)
                continue

            pl, pu = idx.state_boxes[k, 2]
            # ---- lower clamp -------------------------------------------
            if pl >= pmin:          # never active: t_lo == raw
                m.add_constr({tl: 1.0, p: -1.0}, "==", 0.0)
                y1t: dict[int, float] = {tl: 1.0}
                y1c = 0.0
                y1l, y1u = pl, pu
            elif pu <= pmin:        # always active: t_lo == 0, y1 == dp_min
                m.lb[tl] = m.ub[tl] = 0.0
                y1t, y1c = {}, pmin
                y1l = y1u = pmin
            else:
                # free indicator; rows 1-2 force gam_lo = [raw >= dp_min],
                # so gam_lo = 0 implies raw <= dp_min and gam_lo = 1 implies
                # raw >= dp_min, which the product rows below exploit.
                m.add_constr({gl: big(pu - pmin), p: -1.0}, ">=", -pmin)
                m2 = big(pmin - pl)
                m.add_constr({gl: m2, p: -1.0}, "<=", m2 - pmin)
                m3 = big(-pl)
                m.add_constr({tl: 1.0, p: -1.0, gl: m3}, "<=", m3)
                # raw <= dp_min <= 0 whenever gam_lo = 0, so no escape term
                m.add_constr({tl: 1.0, p: -1.0}, ">=", 0.0)
                if pu > 0.0:
                    m.add_constr({tl: 1.0, gl: -big(pu)}, "<=", 0.0)
                if pmin < 0.0:
                    m.add_constr({tl: 1.0, gl: big(-pmin)}, ">=", 0.0)
                else:
                    m.add_constr({tl: 1.0}, ">=", 0.0)
                y1t, y1c = {tl: 1.0, gl: -pmin}, pmin
                y1l, y1u = pmin, pu

            def with_y1(extra: dict[int, float], scale: float = 1.0
                        ) -> dict[int, float]:
                out = dict(extra)
                for col, v in y1t.items():
                    out[col] = out.get(col, 0.0) + scale * v
                return out

            # ---- upper clamp on y1 -------------------------------------
            if y1u <= pmax:         # never active: t_hi == y1
                if y1t:
                    m.add_constr(with_y1({th: 1.0}, scale=-1.0), "==", y1c)
                else:
                    m.lb[th] = m.ub[th] = y1c
            elif y1l >= pmax:       # always active: t_hi == 0
                m.lb[th] = m.ub[th] = 0.0
            else:
                m.add_constr(with_y1({gh: big(pmax - y1l)}), ">=",
                             pmax - y1c)
                m8 = big(y1u - pmax)
                m.add_constr(with_y1({gh: m8}), "<=", m8 + pmax - y1c)
                # gam_hi = 0 forces y1 >= dp_max, so t_hi + (1 - gam_hi)
                # dp_max <= y1 holds at every integral point; it keeps the
                # relaxed clamp output at min(y1, dp_max) instead of letting
                # a fractional indicator inflate the governor contribution
                if pmax > 0.0:
                    m.add_constr(with_y1({th: 1.0, gh: -pmax}, scale=-1.0),
                                 "<=", y1c - pmax)
                else:
                    m.add_constr(with_y1({th: 1.0}, scale=-1.0), "<=", y1c)
                m10 = big(y1u)
                m.add_constr(with_y1({th: 1.0, gh: -m10}, scale=-1.0),
                             ">=", y1c - m10)
                if pmax > 0.0:
                    m.add_constr({th: 1.0, gh: -big(min(y1u, pmax))},
                                 "<=", 0.0)
                else:
                    m.add_constr({th: 1.0}, "<=", 0.0)
                if y1l < 0.0:
                    m.add_constr({th: 1.0, gh: big(-y1l)}, ">=", 0.0)
                else:
                    m.add_constr({th: 1.0}, ">=", 0.0)


def build_dynamics(idx: UflsMilp) -> None:
    """Equality rows x[k+1] = a_d (delta, omega, clamped P)[k] + b_d u[k] for
    both envelopes; u combines the fixed disturbance with the stage sheds
    delayed by delay_steps, valued at the matching voltage envelope."""
    m, cfg, disc = idx.model, idx.cfg, idx.disc
    a_d = disc.a_d
    sb = idx.shed_buses
    w_dist = disc.b_d @ idx.u_dist
    gain = idx.shed_gain
    d = cfg.delay_steps
    pmax = disc.dp_max
    # Drop couplings at or below HiGHS's matrix tolerance (it deletes such
    # entries on load anyway); doing it here keeps the audited model and the
    # solved model identical.  The angle column of a_d is ~1e-17.
    tiny = 1e-9
    for e in range(2):
        for k in range(cfg.k_steps):
            for r in range(3):
                a2 = a_d[r, 2] if abs(a_d[r, 2]) > tiny else 0.0
                coeffs = {int(idx.x[e, k + 1, r]): 1.0}
                if abs(a_d[r, 0]) > tiny:
                    coeffs[int(idx.x[e, k, 0])] = -a_d[r, 0]
                if abs(a_d[r, 1]) > tiny:
                    coeffs[int(idx.x[e, k, 1])] = -a_d[r, 1]
                if a2:
                    coeffs[int(idx.t_hi[e, k])] = -a2
                    coeffs[int(idx.gam_hi[e, k])] = a2 * pmax
                if k - d >= 0:
                    for i in range(idx.n_stages):
                        for b in range(sb.size):
                            if abs(gain[e, r, b]) <= tiny:
                                continue
                            gi = int(idx.g[i, b, k - d])
                            coeffs[gi] = coeffs.get(gi, 0.0) - gain[e, r, b]
                m.add_constr(coeffs, "==", w_dist[r] + a2 * pmax)


def build_threshold_logic(idx: UflsMilp) -> None:
    """Deadband trigger rows on the upper-envelope frequency.

    alpha_i[k] must be 0 while the frequency is above the stage threshold;
    it is forced on at the first sample below; the per-stage budget of
    deadband_steps total firings means a stage can only trip if the first
    crossing stays below the threshold for deadband_steps consecutive
    samples.  A shed step additionally requires the whole alpha window, so
    each per-bus fraction rises at most once, deadband_steps samples after
    the crossing, and enters the dynamics delay_steps later still.

    The indicator rows relate a binary to tau - omega, whose range the
    threshold and speed variable bounds pin down, so the big-M is the range
    width at that step rather than a global constant; the integer semantics
    are identical and the relaxation is far tighter."""
    m, cfg = idx.model, idx.cfg
    k_steps, k_db = cfg.k_steps, cfg.deadband_steps
    w_min = cfg.hz_to_pu(cfg.f_min_hz)
    w_cap = cfg.hz_to_pu(cfg.f_cap_hz)
    if idx.tau_bounds is not None:
        tau_lb, tau_ub = idx.tau_bounds
    else:
        tau_lb = np.array([m.lb[t] for t in idx.tau])
        tau_ub = np.array([m.ub[t] for t in idx.tau])

    def band(rng):
        if not np.isfinite(rng) or rng <= 0.0:
            return 1.0              # vacuous side; any positive constant works
        return max(float(rng), 1e-3)

    for i in range(idx.n_stages):
        t = int(idx.tau[i])
        for k in range(k_steps):
            a = int(idx.alpha[i, k])
            w = int(idx.x[0, k, 1])
            if idx.state_boxes is not None:
                w_lb, w_ub = idx.state_boxes[k, 1]
            else:
                w_lb, w_ub = w_min, w_cap
            m_off = band(w_ub - tau_lb[i])  # range of omega - tau while above
            m_on = band(tau_ub[i] - w_lb)   # range of tau - omega while below
            m.add_constr({a: m_off, t: -1.0, w: 1.0}, "<=", m_off)
            lhs = {a: m_on, t: -1.0, w: 1.0}
            for kk in range(k):
                lhs[int(idx.alpha[i, kk])] = m_on
            m.add_constr(lhs, ">=", 0.0)
        m.add_constr({int(idx.alpha[i, k]): 1.0 for k in range(k_steps)},
                     "<=", float(k_db))
        for b in range(idx.shed_buses.size):
            for k in range(1, k_steps + 1):
                step = {int(idx.g[i, b, k]): 1.0, int(idx.g[i, b, k - 1]): -1.0}
                m.add_constr(dict(step), ">=", 0.0)  # fractions never decrease
                if k - 1 - (k_db - 1) < 0:
                    m.add_constr(step, "<=", 0.0)
                    continue
                for z in range(k_db):
                    row = dict(step)
                    row[int(idx.alpha[i, k - 1 - z])] = -1.0
                    m.add_constr(row, "<=", 0.0)


def build_frequency_limits(idx: UflsMilp) -> None:
    """Frequency floor at every step and settling band at the horizon end are
    carried as variable bounds on the speed states of both envelopes (set in
    assemble); this hook documents and verifies them."""
    cfg, m = idx.cfg, idx.model
    w_min = cfg.hz_to_pu(cfg.f_min_hz)
    for e in range(2):
        for k in range(1, cfg.k_steps + 1):
            iw = int(idx.x[e, k, 1])
            if m.lb[iw] < w_min - 1e-15:
                raise AssertionError("frequency floor bound missing")
    for e in range(2):
        iw = int(idx.x[e, cfg.k_steps, 1])
        if m.lb[iw] < cfg.hz_to_pu(cfg.f_ss_min_hz) - 1e-15 or \
                m.ub[iw] > cfg.hz_to_pu(cfg.f_ss_max_hz) + 1e-15:
            raise AssertionError("settling band bounds missing")


def build_overshed_and_separation(idx: UflsMilp) -> None:
    m, cfg = idx.model, idx.cfg
    k = cfg.k_steps
    total = float(idx.p_d0.sum())
    for i in range(idx.n_stages):
        m.add_constr({int(idx.g[i, b, k]): float(idx.p_d0[idx.shed_buses[b]])
                      for b in range(idx.shed_buses.size)},
                     "<=", cfg.g_bar * total)
    sep = cfg.f_sep_hz / cfg.nominal_hz
    for i in range(idx.n_stages - 1):
        m.add_constr({int(idx.tau[i + 1]): 1.0, int(idx.tau[i]): -1.0},
                     "<=", -sep)
    for b in range(idx.shed_buses.size):
        m.add_constr({int(idx.g[i, b, k]): 1.0 for i in range(idx.n_stages)},
                     "<=", 1.0)


def expected_counts(cfg: UflsOptConfig, n_shed_buses: int) -> dict[str, int]:
    """Closed-form variable/constraint counts of the assembled model with
    tighten off.  The tightened build declares exactly the same variables;
    its saturation block is smaller because interval-decided steps collapse
    to substituted equalities or fixed bounds."""
    k, s, l = cfg.k_steps, cfg.n_stages, n_shed_buses
    k_db = cfg.deadband_steps
    n_cont = s + 6 * (k + 1) + 4 * k + s * l * (k + 1)
    n_bin = s * k + 4 * k
    pre_window = min(k, k_db - 1)   # steps whose trigger window is cut off
    step_rows = k + pre_window + k_db * (k - pre_window)
    n_rows = (24 * k                     # saturation chains
              + 6 * k                    # dynamics
              + s * (2 * k + 1)          # trigger logic and budget
              + s * l * step_rows        # monotone + windowed step rows
              + s                        # per-stage shed caps
              + (s - 1)                  # threshold separation
              + l)                       # per-bus cumulative caps
    return {"variables": n_cont + n_bin, "binaries": n_bin, "constraints": n_rows}


# ---------------------------------------------------------------------------
# solution handling

def extract_plan(idx: UflsMilp, sol: MilpSolution,
                 bus_ids: list[int]) -> UflsPlan:
    """Read thresholds and final shed fractions out of an optimal solution."""
    if sol.status != "optimal":
        raise ValueError(f"cannot extract a plan from status {sol.status!r}")
    xv = sol.x
    k = idx.cfg.k_steps
    stages = []
    for i in range(idx.n_stages):
        thr = idx.cfg.pu_to_hz(xv[idx.tau[i]])
        fr = {}
        for b, pos in enumerate(idx.shed_buses):
            val = float(xv[idx.g[i, b, k]])
            if val > 1e-9:
                fr[bus_ids[pos]] = min(val, 1.0)
        stages.append(PlanStage(threshold_hz=float(thr), fractions=fr))
    return UflsPlan(stages=tuple(stages))


def pin_plan(idx: UflsMilp, thresholds_pu: np.ndarray,
             fractions: np.ndarray) -> None:
    """Fix the decision variables to a given plan (thresholds per stage,
    armed fractions per stage x shed bus) by collapsing their bounds; used to
    check externally produced plans for model feasibility.

    The final cumulative shed is pinned to the replayed outcome rather than
    the armed setpoint: a stage whose threshold is never crossed releases
    nothing, and the trigger rows force its shed path to zero regardless of
    what was armed."""
    m, k = idx.model, idx.cfg.k_steps
    if idx.tau_bounds is not None:
        tau_lb, tau_ub = idx.tau_bounds
        if np.any(thresholds_pu < tau_lb - 1e-9) or \
           np.any(thresholds_pu > tau_ub + 1e-9):
            raise ValueError("pinned thresholds fall outside the variable "
                             "bounds the indicator rows were scaled for")
    rep = replay_plan_reduced(idx, thresholds_pu, fractions)
    for i in range(idx.n_stages):
        m.lb[idx.tau[i]] = m.ub[idx.tau[i]] = float(thresholds_pu[i])
        for b in range(idx.shed_buses.size):
            v = float(rep.applied[i, b])
            m.lb[idx.g[i, b, k]] = m.ub[idx.g[i, b, k]] = v


def post_solve_audits(idx: UflsMilp, sol: MilpSolution) -> list[str]:
    """Structural checks on an optimal solution that go beyond row
    feasibility; returns violation messages (empty means clean)."""
    bad: list[str] = []
    xv = sol.x
    cfg, disc = idx.cfg, idx.disc
    k_steps, k_db = cfg.k_steps, cfg.deadband_steps

    p_lb, p_ub = idx.p_bounds
    for e in range(2):
        raw = xv[idx.x[e, :, 2]]
        for k in range(k_steps):
            clamped = min(max(raw[k], disc.dp_min), disc.dp_max)
            tilde = idx.p_tilde(xv, e, k)
            if abs(tilde - clamped) > 1e-6:
                bad.append(f"saturation not exact at env {e} k {k}: "
                           f"{tilde:.9f} vs {clamped:.9f}")
            if abs(disc.dp_max - raw[k]) > idx.s_eff or \
               abs(disc.dp_min - raw[k]) > idx.s_eff:
                bad.append(f"big-M too small at env {e} k {k}")
        if np.isfinite(p_ub) and (raw.max() > p_ub + 1e-7
                                  or raw.min() < p_lb - 1e-7):
            bad.append(f"governor state escapes its derived bounds on env {e}")
    w_hi = xv[idx.x[0, :, 1]]
    w_lo = xv[idx.x[1, :, 1]]
    if np.any(w_lo > w_hi + 1e-9):
        worst = float(np.max(w_lo - w_hi))
        bad.append(f"envelope dominance violated by {worst:.3e} pu")

    for i in range(idx.n_stages):
        tau = xv[idx.tau[i]]
        below = w_hi[:k_steps] <= tau + 1e-6   # row scaling allows equality
        for b in range(idx.shed_buses.size):
            series = xv[idx.g[i, b, :]]
            steps = np.flatnonzero(np.diff(series) > 1e-9)
            if steps.size > 1:
                bad.append(f"stage {i} bus {b} shed steps more than once")
            for kk in steps:
                first = kk + 1 - k_db  # alpha window start
                if first < 0 or not below[first:first + k_db].all():
                    bad.append(f"stage {i} bus {b} stepped at {kk + 1} without "
                               f"{k_db} consecutive below-threshold samples")
    return bad


# ---------------------------------------------------------------------------
# deterministic replay of the optimizer's timing semantics

@dataclass(frozen=True)
class ReducedReplay:
    feasible: bool
    reasons: tuple[str, ...]
    objective: float
    x_hi: np.ndarray
    x_lo: np.ndarray
    fired: np.ndarray          # per stage: step index where shed enters u, or -1
    applied: np.ndarray        # per stage x shed bus, fractions actually shed


def replay_plan_reduced(idx: UflsMilp, thresholds_pu: np.ndarray,
                        fractions: np.ndarray) -> ReducedReplay:
    """Simulate both envelopes under the model's own trigger timing for a
    fixed plan.

    A stage can fire only if the first below-threshold sample of the upper
    envelope starts a run of deadband_steps consecutive below samples (the
    trigger budget is spent at the first crossing); the shed enters the input
    deadband_steps + delay_steps samples after that crossing.  Feasibility
    mirrors the optimizer: frequency floor everywhere, settling band at the
    horizon, stage caps, separation, per-bus totals."""
    cfg, disc = idx.cfg, idx.disc
    k_steps, k_db, d = cfg.k_steps, cfg.deadband_steps, cfg.delay_steps
    s_stages, ls = idx.n_stages, idx.shed_buses.size
    a_d, b_d = disc.a_d, disc.b_d
    w_dist = b_d @ idx.u_dist
    gain = idx.shed_gain
    reasons: list[str] = []

    sep = cfg.f_sep_hz / cfg.nominal_hz
    for i in range(s_stages - 1):
        if thresholds_pu[i + 1] > thresholds_pu[i] - sep + 1e-12:
            reasons.append(f"separation violated between stages {i} and {i + 1}")
    if np.any(thresholds_pu > cfg.hz_to_pu(cfg.f_shed_max_hz) + 1e-12):
        reasons.append("threshold above the allowed maximum")
    if idx.tau_bounds is not None and \
            np.any(thresholds_pu < idx.tau_bounds[0] - 1e-12):
        reasons.append("threshold below the stage's variable lower bound")
    stage_shed = fractions @ idx.p_d0[idx.shed_buses]
    total = idx.p_d0.sum()
    if np.any(stage_shed > cfg.g_bar * total + 1e-12):
        reasons.append("per-stage shed cap exceeded")
    if np.any(fractions.sum(axis=0) > 1.0 + 1e-12):
        reasons.append("per-bus fractions sum above one")

    x_hi = np.zeros((k_steps + 1, 3))
    x_lo = np.zeros((k_steps + 1, 3))
    run = np.zeros(s_stages, dtype=int)        # consecutive below samples
    dead = np.zeros(s_stages, dtype=bool)      # budget wasted, cannot fire
    fire_at = np.full(s_stages, -1, dtype=int)  # index where shed enters u
    w_min = cfg.hz_to_pu(cfg.f_min_hz)
    for k in range(k_steps):
        w = x_hi[k, 1]
        for i in range(s_stages):
            if fire_at[i] >= 0 or dead[i]:
                continue
            if w < thresholds_pu[i] + 1e-12:
                run[i] += 1
                if run[i] == k_db:
                    fire_at[i] = k + 1 + d  # step lands one sample after the window
            elif run[i] > 0:
                dead[i] = True  # first crossing did not stay below long enough
        u_extra = np.zeros((2, 3))
        for i in range(s_stages):
            if 0 <= fire_at[i] <= k:
                u_extra[0] += gain[0] @ fractions[i]
                u_extra[1] += gain[1] @ fractions[i]
        for traj, e in ((x_hi, 0), (x_lo, 1)):
            fed = traj[k].copy()
            fed[2] = min(max(fed[2], disc.dp_min), disc.dp_max)
            traj[k + 1] = a_d @ fed + w_dist + u_extra[e]

    applied = np.where(fire_at[:, None] >= 0, fractions, 0.0)
    for traj, tag in ((x_hi, "upper"), (x_lo, "lower")):
        if traj[1:, 1].min() < w_min - 1e-9:
            reasons.append(f"{tag} envelope breaches the frequency floor")
        if not (cfg.hz_to_pu(cfg.f_ss_min_hz) - 1e-9 <= traj[-1, 1]
                <= cfg.hz_to_pu(cfg.f_ss_max_hz) + 1e-9):
            reasons.append(f"{tag} envelope settles outside the band")
    objective = float((applied @ idx.p_d0[idx.shed_buses]).sum())
    return ReducedReplay(feasible=not reasons, reasons=tuple(reasons),
                         objective=objective, x_hi=x_hi, x_lo=x_lo,
                         fired=fire_at, applied=applied)


def stamp_solution(idx: UflsMilp, thresholds_pu: np.ndarray,
                   fractions: np.ndarray,
                   rep: ReducedReplay | None = None) -> np.ndarray:
    """Expand a plan into a complete variable assignment of the model.

    The trajectories come from the deterministic replay; clamp indicators,
    trigger binaries, and shed paths are reconstructed from them with the
    exact semantics the rows encode.  The result is meant for
    `milp.audit_solution`: a clean audit is a machine-checked proof that the
    plan is feasible for the assembled model, independent of any solver."""
    m, cfg, disc = idx.model, idx.cfg, idx.disc
    k_steps, k_db, d = cfg.k_steps, cfg.deadband_steps, cfg.delay_steps
    pmin, pmax = disc.dp_min, disc.dp_max
    if rep is None:
        rep = replay_plan_reduced(idx, thresholds_pu, fractions)
    xv = np.zeros(m.n_var)
    for i in range(idx.n_stages):
        xv[idx.tau[i]] = thresholds_pu[i]
    for e, traj in ((0, rep.x_hi), (1, rep.x_lo)):
        for k in range(k_steps + 1):
            xv[idx.x[e, k]] = traj[k]
        for k in range(k_steps):
            p = traj[k, 2]
            gl = 1.0 if p >= pmin else 0.0
            tl = gl * p
            y1 = tl + (1.0 - gl) * pmin
            gh = 1.0 if y1 <= pmax else 0.0
            xv[idx.gam_lo[e, k]] = gl
            xv[idx.t_lo[e, k]] = tl
            xv[idx.gam_hi[e, k]] = gh
            xv[idx.t_hi[e, k]] = gh * y1
    w = rep.x_hi[:k_steps, 1]
    for i in range(idx.n_stages):
        below = w < thresholds_pu[i] + 1e-12
        for k in range(k_steps):
            if below[k]:
                j, run = k, 0
                while j < k_steps and below[j] and run < k_db:
                    xv[idx.alpha[i, j]] = 1.0
                    run += 1
                    j += 1
                break
        if rep.fired[i] >= 0:
            for b in range(idx.shed_buses.size):
                for k in range(rep.fired[i] - d, k_steps + 1):
                    xv[idx.g[i, b, k]] = fractions[i, b]
    return xv


def certify_plan(idx: UflsMilp, thresholds_pu: np.ndarray,
                 fractions: np.ndarray
                 ) -> tuple[ReducedReplay, list[str]]:
    """Replay a plan and audit its stamped assignment against every model row
    and bound.  Returns the replay plus violation messages (empty = the plan
    is proven feasible for the model)."""
    rep = replay_plan_reduced(idx, thresholds_pu, fractions)
    if not rep.feasible:
        return rep, [f"replay: {r}" for r in rep.reasons]
    xv = stamp_solution(idx, thresholds_pu, fractions, rep)
    return rep, audit_solution(idx.model, xv)


def _trajectory_violation(idx: UflsMilp, rep: ReducedReplay) -> float:
    """Total distance (pu speed) of a replay from the floor and settling-band
    constraints; zero exactly when those constraints hold."""
    cfg = idx.cfg
    w_min = cfg.hz_to_pu(cfg.f_min_hz)
    ss_lo, ss_hi = cfg.hz_to_pu(cfg.f_ss_min_hz), cfg.hz_to_pu(cfg.f_ss_max_hz)
    v = 0.0
    for traj in (rep.x_hi, rep.x_lo):
        v += max(0.0, w_min - float(traj[1:, 1].min()))
        v += max(0.0, ss_lo - float(traj[-1, 1]))
        v += max(0.0, float(traj[-1, 1]) - ss_hi)
    return v


def search_plan_reduced(idx: UflsMilp,
                        top_step_hz: float = 0.1,
                        n_spacings: int = 4,
                        n_refine: int = 8
                        ) -> tuple[np.ndarray, np.ndarray, ReducedReplay] | None:
    """Deterministic ladder search for a feasible plan in the reduced model.

    Thresholds are laddered from a top value with a uniform spacing; per-bus
    fractions are uniform within a stage at the stage cap.  A global scale is
    scanned first (firing patterns move discretely with the amount, so
    feasibility in the scale is not monotone and bisection would miss it);
    the least-violating ladders are then refined by coordinate descent on
    per-stage scales, which crosses the knife edges where an envelope misses
    the settling band by millihertz while a uniform change would instead
    re-time a stage.  Returns (thresholds_pu, fractions, replay) of the best
    plan found, or None.  Pure grid arithmetic: no randomness, so rebuilds
    are identical."""
    cfg = idx.cfg
    s, ls = idx.n_stages, idx.shed_buses.size
    p_b = idx.p_d0[idx.shed_buses]
    total = float(idx.p_d0.sum())
    sep = cfg.f_sep_hz
    # largest uniform fraction a stage may carry without breaking its cap
    f_cap = min(1.0, cfg.g_bar * total / float(p_b.sum()))
    if idx.tau_bounds is not None:
        lb_hz = np.array([cfg.pu_to_hz(v) for v in idx.tau_bounds[0]])
    else:
        lb_hz = np.full(s, cfg.f_min_hz - s * sep)

    tops = np.arange(cfg.f_shed_max_hz, cfg.f_min_hz + 0.2, -top_step_hz)
    spacings = [sep + j * top_step_hz for j in range(n_spacings)]

    def attempt(taus_pu: np.ndarray, scales: np.ndarray):
        fr = scales[:, None] * f_cap * np.ones((1, ls))
        rep = replay_plan_reduced(idx, taus_pu, fr)
        viol = 0.0 if rep.feasible else _trajectory_violation(idx, rep)
        return rep, fr, (viol, rep.objective)

    def better(kt: tuple[float, float], kc: tuple[float, float]) -> bool:
        if kt[0] < kc[0] - 1e-12:
            return True
        if kt[0] > kc[0] + 1e-12:
            return False
        return kt[1] < kc[1] - 1e-12

    coarse = np.linspace(0.1, 1.0, 19)
    cands: list[tuple[float, float, np.ndarray, np.ndarray]] = []
    for top in tops:
        for sp in spacings:
            thr_hz = np.array([top - i * sp for i in range(s)])
            if np.any(thr_hz < lb_hz):
                continue
            taus = np.array([cfg.hz_to_pu(f) for f in thr_hz])
            hit: tuple[float, float, float] | None = None
            for sc in coarse:
                _, _, key = attempt(taus, np.full(s, float(sc)))
                if hit is None or better(key, (hit[0], hit[1])):
                    hit = (key[0], key[1], float(sc))
            if hit is not None:
                cands.append((hit[0], hit[1], taus, np.full(s, hit[2])))
    if not cands:
        return None
    cands.sort(key=lambda c: (c[0], c[1]))

    grid = np.linspace(0.0, 1.0, 21)
    best: tuple[np.ndarray, np.ndarray, ReducedReplay] | None = None
    for viol0, obj0, taus, sc0 in cands[:n_refine]:
        sc = sc0.copy()
        rep_cur, fr_cur, key_cur = attempt(taus, sc)
        for _ in range(3):
            moved = False
            for i in range(s):
                for v in grid:
                    if abs(v - sc[i]) < 1e-12:
                        continue
                    trial = sc.copy()
                    trial[i] = float(v)
                    rep_t, fr_t, key_t = attempt(taus, trial)
                    if better(key_t, key_cur):
                        sc, rep_cur, fr_cur, key_cur = trial, rep_t, fr_t, key_t
                        moved = True
            if not moved:
                break
        if rep_cur.feasible and (best is None
                                 or rep_cur.objective < best[2].objective - 1e-12):
            best = (taus, fr_cur, rep_cur)
    return best


def pin_patterns(idx: UflsMilp, xv: np.ndarray) -> None:
    """Collapse every binary's bounds to its value in the given assignment,
    leaving thresholds, shed paths, and states free: the model becomes the
    exact linear program over all plans sharing that trigger/saturation
    pattern."""
    m = idx.model
    for col in range(m.n_var):
        if m.integer[col]:
            v = float(round(xv[col]))
            m.lb[col] = m.ub[col] = v


def brute_force_oracle(idx: UflsMilp, threshold_grid_hz: np.ndarray,
                       fraction_grid: np.ndarray) -> tuple[float, ReducedReplay | None, tuple]:
    """Grid enumeration over stage thresholds and a uniform per-stage shed
    fraction, evaluated with replay_plan_reduced.

    Searches a strict subset of the optimizer's space (per-bus fractions are
    tied within a stage), so a correct optimizer can never do worse.  Returns
    (best objective, its replay, (thresholds_hz, fraction per stage)); the
    objective is inf when no grid point is feasible."""
    import itertools
    cfg = idx.cfg
    s = idx.n_stages
    ls = idx.shed_buses.size
    if s > 2 or ls > 3:
        raise ValueError("enumeration is intended for tiny instances")
    thr_pu = np.array([cfg.hz_to_pu(f) for f in threshold_grid_hz])
    best = (np.inf, None, ())
    for combo in itertools.combinations(range(len(thr_pu)), s):
        taus = thr_pu[list(combo)]  # grids are descending-ordered by caller
        for fracs in itertools.product(fraction_grid, repeat=s):
            fr = np.tile(np.asarray(fracs)[:, None], (1, ls))
            rep = replay_plan_reduced(idx, taus, fr)
            if rep.feasible and rep.objective < best[0] - 1e-12:
                best = (rep.objective,) + (rep, (threshold_grid_hz[list(combo)],
                                                 np.asarray(fracs)))
    return best


# ---------------------------------------------------------------------------
# scenario-facing convenience

def assemble_for_scenario(net: Network, scenario: Scenario, cfg: UflsOptConfig,
                          frequency_model: str = "safr") -> tuple[UflsMilp, list[int]]:
    """Linearize around the post-event machine set, reduce with the chosen
    frequency model, and assemble the optimization over the scenario's
    composite disturbance.  Returns the model plus the bus-id list used to
    key extracted plans."""
    keep, u_dist = disturbance_from_scenario(net, scenario)
    lin = linearize(net, gen_scale=keep)
    if frequency_model == "safr":
        red = aggregate(lin)
        voltage_envelopes = True
    elif frequency_model == "sfr":
        red = build_sfr(lin)
        voltage_envelopes = False
    else:
        raise ValueError(f"unknown frequency model {frequency_model!r}")
    disc = discretize(red, cfg.dt_opt)
    dae = DaeSystem(net)
    idx = assemble(disc, dae.zp, dae.sol.v, u_dist, cfg,
                   voltage_envelopes=voltage_envelopes,
                   name=f"UFLS{frequency_model.upper()}")
    bus_ids = [b.id for b in net.buses]
    idx.shed_bus_ids = [bus_ids[p] for p in idx.shed_buses]
    return idx, bus_ids


# ---------------------------------------------------------------------------
# optimization driver

@dataclass(frozen=True)
class UflsOptResult:
    """Outcome of the setpoint optimization.

    status is "optimal" only with a proof: either branch-and-bound closed,
    or no solution better than the returned one exists within `certified_to`
    (shown by infeasibility of the model under an objective cutoff).
    "feasible" carries the best plan found with the tightest proven lower
    bound; gap = (objective - bound) / objective."""
    status: str                     # optimal | feasible | infeasible | no_plan
    plan: UflsPlan | None
    objective: float | None         # shed demand at the horizon, pu
    bound: float | None             # proven lower bound on the optimum
    gap: float | None
    wall_s: float
    certified_to: float | None = None
    detail: str = ""


def _extract_fractions(idx: UflsMilp, xv: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    k = idx.cfg.k_steps
    taus = np.array([float(xv[idx.tau[i]]) for i in range(idx.n_stages)])
    fr = np.array([[float(xv[idx.g[i, b, k]])
                    for b in range(idx.shed_buses.size)]
                   for i in range(idx.n_stages)])
    return taus, np.clip(fr, 0.0, 1.0)


def _plan_from(idx: UflsMilp, taus: np.ndarray, fractions: np.ndarray,
               bus_ids: list[int]) -> UflsPlan:
    stages = []
    for i in range(idx.n_stages):
        fr = {}
        for b, pos in enumerate(idx.shed_buses):
            if fractions[i, b] > 1e-9:
                fr[bus_ids[pos]] = float(min(fractions[i, b], 1.0))
        stages.append(PlanStage(threshold_hz=float(idx.cfg.pu_to_hz(taus[i])),
                                fractions=fr))
    return UflsPlan(stages=tuple(stages))


def optimize_ufls(net: Network, scenario: Scenario, cfg: UflsOptConfig,
                  frequency_model: str = "safr",
                  time_limit: float = 280.0,
                  attempt_share: float = 0.3,
                  certify_rel: float = 1e-3,
                  backend=None) -> tuple[UflsOptResult, list[int]]:
    """Optimize shedding setpoints with a layered exact strategy.

    1. Branch-and-bound on the full model with a share of the budget; a
       closed solve is returned as optimal outright.
    2. Otherwise a deterministic reduced-model search produces a feasible
       plan, which an exact restriction (all trigger/saturation binaries
       pinned to the plan's own pattern, everything else free) then polishes;
       iterating while the pattern keeps changing and the objective improves.
    3. The remaining budget goes to certification: branch-and-bound on the
       full model under an objective cutoff just below the incumbent.  A
       proven-empty cutoff model makes the incumbent optimal to within
       certify_rel; otherwise the result reports the tightest known bound.

    Every returned plan is proven feasible for the assembled model by a
    row-by-row audit of its stamped assignment (no trust in solver output),
    and feasible in the reduced replay by construction."""
    import time as _time
    t0 = _time.perf_counter()
    backend = backend or ScipyMilpBackend()

    def left() -> float:
        return time_limit - (_time.perf_counter() - t0)

    def fresh() -> tuple[UflsMilp, list[int]]:
        return assemble_for_scenario(net, scenario, cfg,
                                     frequency_model=frequency_model)

    idx, bus_ids = fresh()
    bound: float | None = None
    detail: list[str] = []

    # -- 1. direct attempt ---------------------------------------------------
    budget = max(5.0, attempt_share * time_limit)
    sol = solve(idx.model, backend, time_limit=min(budget, left()))
    if sol.status == "optimal":
        taus, fr = _extract_fractions(idx, sol.x)
        plan = _plan_from(idx, taus, fr, bus_ids)
        return (UflsOptResult("optimal", plan, sol.objective, sol.objective,
                              0.0, _time.perf_counter() - t0,
                              detail="closed by branch and bound"),
                bus_ids)
    solver_infeasible = sol.status == "infeasible"
    detail.append(f"direct solve: {sol.status} in {sol.wall_s:.0f}s")

    # -- 2. reduced-model search + exact pattern polish -----------------------
    found = search_plan_reduced(idx)
    if found is None:
        wall = _time.perf_counter() - t0
        if solver_infeasible:
            return (UflsOptResult("infeasible", None, None, None, None, wall,
                                  detail="; ".join(detail)), bus_ids)
        return (UflsOptResult("no_plan", None, None, None, None, wall,
                              detail="; ".join(detail) +
                              "; ladder search found no feasible plan"),
                bus_ids)
    taus, fr, rep = found
    for _ in range(3):
        if left() < 30.0:
            break
        pidx, _ = fresh()
        pin_patterns(pidx, stamp_solution(pidx, taus, fr))
        psol = solve(pidx.model, backend, time_limit=min(60.0, left()))
        if psol.status != "optimal":
            break
        new_taus, new_fr = _extract_fractions(pidx, psol.x)
        new_rep = replay_plan_reduced(idx, new_taus, new_fr)
        if not new_rep.feasible or new_rep.objective > rep.objective - 1e-9:
            break
        taus, fr, rep = new_taus, new_fr, new_rep
    detail.append(f"incumbent {rep.objective:.6f} from pattern polish")

    # belt: machine-check the incumbent against every row of a fresh model
    cidx, _ = fresh()
    _, bad = certify_plan(cidx, taus, fr)
    if bad:
        raise RuntimeError("incumbent failed the model audit: " +
                           "; ".join(bad[:5]))

    # -- 3. optimality certification under a cutoff ---------------------------
    status = "feasible"
    certified_to = None
    delta = max(1e-6, certify_rel * rep.objective)
    if left() > 15.0:
        kidx, _ = fresh()
        km = kidx.model
        km.add_constr(dict(km.obj), "<=", rep.objective - delta)
        ksol = solve(km, backend, time_limit=left() - 5.0)
        if ksol.status == "infeasible":
            status = "optimal"
            certified_to = delta
            bound = rep.objective - delta
            detail.append(f"no plan better than {rep.objective - delta:.6f} "
                          "exists (cutoff model proven empty)")
        elif ksol.status == "optimal":
            # the cutoff search found something strictly better; adopt it
            ktaus, kfr = _extract_fractions(kidx, ksol.x)
            krep = replay_plan_reduced(idx, ktaus, kfr)
            if krep.feasible and krep.objective < rep.objective - 1e-9:
                taus, fr, rep = ktaus, kfr, krep
                detail.append(f"cutoff search improved to {rep.objective:.6f}")
        else:
            detail.append("cutoff model not closed in time")
    if bound is None and left() > 5.0:
        bound = lp_bound(idx.model, time_limit=left())
        if bound is not None:
            detail.append(f"continuous-relaxation bound {bound:.6f}")

    plan = _plan_from(idx, taus, fr, bus_ids)
    gap = None
    if bound is not None:
        gap = max(0.0, (rep.objective - bound) / max(rep.objective, 1e-12))
    return (UflsOptResult(status, plan, rep.objective, bound, gap,
                          _time.perf_counter() - t0, certified_to,
                          "; ".join(detail)), bus_ids)
