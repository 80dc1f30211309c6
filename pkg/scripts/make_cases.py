#!/usr/bin/env python3
"""Regenerate the bundled network cases and scenarios deterministically.

Run from the repo root:  python3 scripts/make_cases.py

Governor ceilings are sized at 15% spinning reserve above the solved
dispatch, and the design scenario trips a fraction of the largest remote
unit sized to remove exactly 25% of total generation.
"""
from __future__ import annotations

import json
from pathlib import Path

from ufls.grid import Network, Bus, Branch, GeneratorParams, GovernorParams
from ufls.grid import solve_power_flow, allocate_dispatch

CASES = Path(__file__).resolve().parent.parent / "src" / "ufls" / "cases"

RESERVE = 0.15  # governor headroom as a fraction of dispatch
GOV = {"r": 0.05, "t": 0.1}


def write(name: str, obj: dict) -> None:
    CASES.mkdir(parents=True, exist_ok=True)
    path = CASES / name
    path.write_text(json.dumps(obj, indent=1) + "\n")
    print("wrote", path)


def finalized_governors(case: dict) -> dict:
    """Solve the case and pin pmax at dispatch * (1 + RESERVE)."""
    net = _net_from_dict(case)
    sol = solve_power_flow(net)
    assert sol.converged, "case power flow must converge"
    p_gen, _ = allocate_dispatch(net, sol)
    for g, p in zip(case["generators"], p_gen):
        g["governor"]["pmax"] = round(float(p) * (1 + RESERVE), 4)
    return case


def _net_from_dict(case: dict) -> Network:
    buses = tuple(Bus(id=b["id"], kind=b["kind"], p_load=b.get("p_load", 0.0),
                      q_load=b.get("q_load", 0.0), zip_a=b.get("zip_a", 0.0),
                      zip_b=b.get("zip_b", 0.0)) for b in case["buses"])
    branches = tuple(Branch(from_bus=b["from"], to_bus=b["to"], r=b.get("r", 0.0),
                            x=b["x"], b_shunt=b.get("b_shunt", 0.0))
                     for b in case["branches"])
    gens = tuple(GeneratorParams(bus=g["bus"], m=g["m"], d=g["d"], xdp=g["xdp"],
                                 p_dispatch=g["p_dispatch"], q_dispatch=g.get("q_dispatch", 0.0),
                                 governor=GovernorParams(r=g["governor"]["r"], t=g["governor"]["t"],
                                                         p_m_min=g["governor"]["pmin"],
                                                         p_m_max=g["governor"]["pmax"]))
                 for g in case["generators"])
    return Network(base_mva=case["base_mva"], nominal_hz=case["nominal_hz"],
                   buses=buses, branches=branches, generators=gens)


def gov(pmax: float, pmin: float = 0.0) -> dict:
    return {"r": GOV["r"], "t": GOV["t"], "pmin": pmin, "pmax": pmax}


def case2() -> dict:
    return {
        "base_mva": 100.0,
        "nominal_hz": 60.0,
        "buses": [
            {"id": 1, "kind": "slack"},
            {"id": 2, "kind": "pq", "p_load": 1.0, "q_load": 0.3, "zip_a": 0.3, "zip_b": 0.3},
        ],
        "branches": [
            {"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b_shunt": 0.02},
        ],
        "generators": [
            {"bus": 1, "m": 10.0, "d": 1.0, "xdp": 0.15, "p_dispatch": 1.0,
             "q_dispatch": 0.3, "governor": gov(1.2)},
        ],
    }


def case3() -> dict:
    return {
        "base_mva": 100.0,
        "nominal_hz": 60.0,
        "buses": [
            {"id": 1, "kind": "slack"},
            {"id": 2, "kind": "pq", "p_load": 0.6, "q_load": 0.2, "zip_a": 0.3, "zip_b": 0.3},
            {"id": 3, "kind": "pq", "p_load": 0.5, "q_load": 0.15, "zip_a": 0.3, "zip_b": 0.3},
        ],
        "branches": [
            {"from": 1, "to": 2, "r": 0.008, "x": 0.08, "b_shunt": 0.01},
            {"from": 2, "to": 3, "r": 0.010, "x": 0.10, "b_shunt": 0.01},
            {"from": 1, "to": 3, "r": 0.012, "x": 0.12, "b_shunt": 0.01},
        ],
        "generators": [
            {"bus": 1, "m": 8.0, "d": 0.8, "xdp": 0.15, "p_dispatch": 1.1,
             "q_dispatch": 0.35, "governor": gov(1.3)},
        ],
    }


def case9() -> dict:
    """Three-machine nine-bus system (classic western-system parameters)."""
    return {
        "base_mva": 100.0,
        "nominal_hz": 60.0,
        "buses": [
            {"id": 1, "kind": "slack"},
            {"id": 2, "kind": "pv"},
            {"id": 3, "kind": "pv"},
            {"id": 4, "kind": "pq"},
            {"id": 5, "kind": "pq", "p_load": 1.25, "q_load": 0.50, "zip_a": 0.3, "zip_b": 0.3},
            {"id": 6, "kind": "pq", "p_load": 0.90, "q_load": 0.30, "zip_a": 0.3, "zip_b": 0.3},
            {"id": 7, "kind": "pq"},
            {"id": 8, "kind": "pq", "p_load": 1.00, "q_load": 0.35, "zip_a": 0.3, "zip_b": 0.3},
            {"id": 9, "kind": "pq"},
        ],
        "branches": [
            {"from": 1, "to": 4, "r": 0.0, "x": 0.0576, "b_shunt": 0.0},
            {"from": 2, "to": 7, "r": 0.0, "x": 0.0625, "b_shunt": 0.0},
            {"from": 3, "to": 9, "r": 0.0, "x": 0.0586, "b_shunt": 0.0},
            {"from": 4, "to": 5, "r": 0.010, "x": 0.085, "b_shunt": 0.176},
            {"from": 4, "to": 6, "r": 0.017, "x": 0.092, "b_shunt": 0.158},
            {"from": 5, "to": 7, "r": 0.032, "x": 0.161, "b_shunt": 0.306},
            {"from": 6, "to": 9, "r": 0.039, "x": 0.170, "b_shunt": 0.358},
            {"from": 7, "to": 8, "r": 0.0085, "x": 0.072, "b_shunt": 0.149},
            {"from": 8, "to": 9, "r": 0.0119, "x": 0.1008, "b_shunt": 0.209},
        ],
        "generators": [
            {"bus": 1, "m": 23.64, "d": 1.0, "xdp": 0.0608, "p_dispatch": 0.72,
             "q_dispatch": 0.27, "governor": gov(0.9)},
            {"bus": 2, "m": 12.80, "d": 0.8, "xdp": 0.1198, "p_dispatch": 1.63,
             "q_dispatch": 0.07, "governor": gov(1.9)},
            {"bus": 3, "m": 6.02, "d": 0.6, "xdp": 0.1813, "p_dispatch": 0.85,
             "q_dispatch": -0.11, "governor": gov(1.0)},
        ],
    }


RELAY = {"deadband_s": 0.2, "delay_s": 0.1, "frequency_source": "local_bus",
         "netgen_blocking": True}


def trip_scenario(case: dict, gen: int, imbalance: float, horizon_s: float = 16.0) -> dict:
    """Trip scenario removing `imbalance` (fraction of total generation) from one unit."""
    net = _net_from_dict(case)
    sol = solve_power_flow(net)
    p_gen, _ = allocate_dispatch(net, sol)
    frac = imbalance * float(p_gen.sum()) / float(p_gen[gen])
    assert 0 < frac <= 1, frac
    return {
        "dt": 0.01,
        "horizon_s": horizon_s,
        "events": [{"t": 1.0, "kind": "trip_generator", "gen": gen,
                    "fraction": round(frac, 12)}],
        "relay": dict(RELAY),
    }


def main() -> None:
    c2 = finalized_governors(case2())
    c3 = finalized_governors(case3())
    c9 = finalized_governors(case9())
    write("case2.json", c2)
    write("case3.json", c3)
    write("case9.json", c9)
    write("scen9_trip25.json", trip_scenario(c9, gen=2, imbalance=0.25))
    write("scen9_trip10.json", trip_scenario(c9, gen=2, imbalance=0.10))
    write("scen2_trip20.json", trip_scenario(c2, gen=0, imbalance=0.20))
    write("scen3_trip25.json", trip_scenario(c3, gen=0, imbalance=0.25))


if __name__ == "__main__":
    main()
