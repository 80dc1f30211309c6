"""Static network layer: admittance stamping, power flow, ZIP anchoring, EMF init."""
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ufls.grid import (
    Branch,
    Bus,
    GeneratorParams,
    GovernorParams,
    Network,
    ZipLoad,
    allocate_dispatch,
    build_admittance,
    compute_internal_emf,
    derive_zip_params,
    load_network,
    solve_power_flow,
)

CASES = Path(__file__).resolve().parent.parent / "src" / "ufls" / "cases"


def case(name):
    return load_network(CASES / f"{name}.json")


def gov(pmax=2.0, pmin=0.0, r=0.05, t=0.1):
    return GovernorParams(r=r, t=t, p_m_min=pmin, p_m_max=pmax)


def two_bus(p_load=1.0, q_load=0.3):
    return Network(
        base_mva=100.0, nominal_hz=60.0,
        buses=(Bus(1, "slack"), Bus(2, "pq", p_load=p_load, q_load=q_load)),
        branches=(Branch(1, 2, r=0.01, x=0.1, b_shunt=0.02),),
        generators=(GeneratorParams(bus=1, m=10.0, d=1.0, xdp=0.15,
                                    p_dispatch=p_load, q_dispatch=q_load,
                                    governor=gov()),),
    )


# ---------------------------------------------------------------------------
# admittance

def test_admittance_two_bus_hand_stamp():
    # independent stamp: series y = 1/(r+jx), half charging per end
    net = two_bus()
    y = 1.0 / (0.01 + 0.1j)
    expected = np.array([[y + 0.01j, -y], [-y, y + 0.01j]])
    got = build_admittance(net).toarray()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_admittance_symmetry_and_row_sums(name):
    net = case(name)
    y = build_admittance(net).toarray()
    np.testing.assert_allclose(y, y.T, rtol=0, atol=0)
    # diagonal = -(off-diagonal row sum) + shunt stamped at the bus
    shunt = np.zeros(net.n_bus, dtype=complex)
    for br in net.branches:
        shunt[net.bus_index(br.from_bus)] += 0.5j * br.b_shunt
        shunt[net.bus_index(br.to_bus)] += 0.5j * br.b_shunt
    offdiag = y.sum(axis=1) - np.diag(y)
    np.testing.assert_allclose(np.diag(y), -offdiag + shunt, atol=1e-12)


@given(n=st.integers(2, 8), seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_admittance_symmetric_on_random_trees(n, seed):
    rng = np.random.default_rng(seed)
    buses = [Bus(1, "slack")] + [Bus(i + 1, "pq") for i in range(1, n)]
    branches = []
    for i in range(2, n + 1):
        parent = int(rng.integers(1, i))
        branches.append(Branch(parent, i, r=float(rng.uniform(0, 0.05)),
                               x=float(rng.uniform(0.01, 0.3)),
                               b_shunt=float(rng.uniform(0, 0.3))))
    net = Network(base_mva=100.0, nominal_hz=60.0, buses=tuple(buses),
                  branches=tuple(branches),
                  generators=(GeneratorParams(1, 5.0, 1.0, 0.2, 0.0, 0.0, gov()),))
    y = build_admittance(net).toarray()
    np.testing.assert_allclose(y, y.T, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# power flow

def test_flat_network_converges_immediately():
    net = two_bus(p_load=0.0, q_load=0.0)
    net = Network(net.base_mva, net.nominal_hz, net.buses,
                  (Branch(1, 2, r=0.01, x=0.1, b_shunt=0.0),),
                  (GeneratorParams(1, 10.0, 1.0, 0.15, 0.0, 0.0, gov()),))
    sol = solve_power_flow(net)
    assert sol.converged
    assert sol.iterations == 1
    np.testing.assert_allclose(sol.v, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.theta, 0.0, atol=1e-12)


def gauss_seidel_two_bus(net, iters=20000):
    """Independent fixed-point solution for the 2-bus case."""
    y = build_admittance(net).toarray()
    v1 = 1.0 + 0j
    v2 = 1.0 + 0j
    s2 = -(net.buses[1].p_load + 1j * net.buses[1].q_load)
    for _ in range(iters):
        v2_new = (np.conj(s2 / v2) - y[1, 0] * v1) / y[1, 1]
        if abs(v2_new - v2) < 1e-14:
            v2 = v2_new
            break
        v2 = v2_new
    return v2


def test_two_bus_against_gauss_seidel():
    net = two_bus()
    sol = solve_power_flow(net)
    assert sol.converged
    v2 = gauss_seidel_two_bus(net)
    assert abs(sol.v[1] - abs(v2)) < 1e-8
    assert abs(sol.theta[1] - np.angle(v2)) < 1e-8


@pytest.mark.parametrize("name,max_iter", [("case2", 8), ("case3", 8), ("case9", 10)])
def test_bundled_cases_converge(name, max_iter):
    net = case(name)
    sol = solve_power_flow(net)
    assert sol.converged
    assert sol.iterations <= max_iter
    assert np.all(sol.v > 0.9) and np.all(sol.v < 1.1)
    # recompute mismatch from scratch: spec power at every non-slack bus
    y = build_admittance(net).toarray()
    v = sol.v * np.exp(1j * sol.theta)
    s = v * np.conj(y @ v)
    p_spec = np.zeros(net.n_bus)
    q_spec = np.zeros(net.n_bus)
    for g in net.generators:
        p_spec[net.bus_index(g.bus)] += g.p_dispatch
        q_spec[net.bus_index(g.bus)] += g.q_dispatch
    for i, b in enumerate(net.buses):
        p_spec[i] -= b.p_load
        q_spec[i] -= b.q_load
        if b.kind == "pq":
            assert abs(s.imag[i] - q_spec[i]) < 1e-8
        if b.kind != "slack":
            assert abs(s.real[i] - p_spec[i]) < 1e-8


def test_pv_bus_magnitudes_held():
    sol = solve_power_flow(case("case9"))
    np.testing.assert_allclose(sol.v[:3], 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# ZIP loads

@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_zip_reconstructs_load_at_anchor(name):
    net = case(name)
    sol = solve_power_flow(net)
    for b, z in zip(net.buses, derive_zip_params(net, sol)):
        p, q = z.eval(z.v_anchor)
        assert abs(p - b.p_load) < 1e-12
        assert abs(q - b.q_load) < 1e-12


@given(a=st.floats(0, 1), b=st.floats(0, 1), p=st.floats(0, 5),
       v0=st.floats(0.9, 1.1), v=st.floats(0.8, 1.2))
@settings(max_examples=200)
def test_zip_matches_direct_formula(a, b, p, v0, v):
    if a + b > 1:
        a, b = a / (a + b), b / (a + b)
    z = ZipLoad(p_const=(1 - a - b) * p, i_p=a * p / v0, y_p=b * p / v0**2,
                q_const=0.0, i_q=0.0, y_q=0.0, v_anchor=v0)
    expected = p * ((1 - a - b) + a * v / v0 + b * (v / v0) ** 2)
    got, _ = z.eval(v)
    assert abs(got - expected) < 1e-9 * max(1.0, p)


# ---------------------------------------------------------------------------
# machine initialization

@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_emf_back_substitution(name):
    # E and delta must reproduce the allocated dispatch through the
    # classical-machine power equations
    net = case(name)
    sol = solve_power_flow(net)
    init = compute_internal_emf(net, sol)
    for k, g in enumerate(net.generators):
        i = net.bus_index(g.bus)
        v, th = sol.v[i], sol.theta[i]
        p_e = v * init.e[k] * np.sin(init.delta[k] - th) / g.xdp
        q_e = v * init.e[k] * np.cos(init.delta[k] - th) / g.xdp - v * v / g.xdp
        assert abs(p_e - init.p_gen[k]) < 1e-10
        assert abs(q_e - init.q_gen[k]) < 1e-10


def test_allocation_covers_losses():
    net = case("case9")
    sol = solve_power_flow(net)
    p_gen, q_gen = allocate_dispatch(net, sol)
    # slack unit absorbs the solved injection at its bus
    assert abs(p_gen[0] - (sol.p_injection[0] + net.buses[0].p_load)) < 1e-12
    assert p_gen.sum() > net.total_load  # losses are positive here


def test_identical_machines_split_evenly():
    base = two_bus()
    g = base.generators[0]
    half = GeneratorParams(bus=1, m=5.0, d=0.5, xdp=0.3, p_dispatch=0.5,
                           q_dispatch=0.15, governor=gov(pmax=1.0))
    net = Network(base.base_mva, base.nominal_hz, base.buses, base.branches, (half, half))
    sol = solve_power_flow(net)
    init = compute_internal_emf(net, sol)
    assert abs(init.p_gen[0] - init.p_gen[1]) < 1e-12
    assert abs(init.q_gen[0] - init.q_gen[1]) < 1e-12
    assert abs(init.e[0] - init.e[1]) < 1e-12


# ---------------------------------------------------------------------------
# loader validation

def write_case(tmp_path, obj):
    p = tmp_path / "net.json"
    p.write_text(json.dumps(obj))
    return p


def minimal_case():
    return {
        "base_mva": 100.0, "nominal_hz": 60.0,
        "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "pq", "p_load": 0.5}],
        "branches": [{"from": 1, "to": 2, "x": 0.1}],
        "generators": [{"bus": 1, "m": 5.0, "d": 1.0, "xdp": 0.2, "p_dispatch": 0.5,
                        "governor": {"r": 0.05, "t": 0.1, "pmin": 0.0, "pmax": 1.0}}],
    }


def test_loader_roundtrip(tmp_path):
    net = load_network(write_case(tmp_path, minimal_case()))
    assert net.n_bus == 2 and net.n_gen == 1
    assert net.generators[0].q_dispatch == 0.0


def test_loader_rejects_unknown_keys(tmp_path):
    bad = minimal_case()
    bad["buses"][0]["voltage"] = 1.02
    with pytest.raises(ValueError, match="unknown keys"):
        load_network(write_case(tmp_path, bad))


def test_loader_rejects_two_slacks(tmp_path):
    bad = minimal_case()
    bad["buses"][1]["kind"] = "slack"
    with pytest.raises(ValueError, match="slack"):
        load_network(write_case(tmp_path, bad))


def test_loader_rejects_dangling_branch(tmp_path):
    bad = minimal_case()
    bad["branches"][0]["to"] = 7
    with pytest.raises(ValueError):
        load_network(write_case(tmp_path, bad))


def test_loader_rejects_disconnected(tmp_path):
    bad = minimal_case()
    bad["buses"].append({"id": 3, "kind": "pq"})
    with pytest.raises(ValueError, match="connected"):
        load_network(write_case(tmp_path, bad))


def test_loader_rejects_bad_zip(tmp_path):
    bad = minimal_case()
    bad["buses"][1]["zip_a"] = 0.8
    bad["buses"][1]["zip_b"] = 0.4
    with pytest.raises(ValueError, match="zip"):
        load_network(write_case(tmp_path, bad))


def test_equilibrium_outside_governor_limits_rejected():
    net = two_bus()
    g = net.generators[0]
    tight = GeneratorParams(g.bus, g.m, g.d, g.xdp, g.p_dispatch, g.q_dispatch,
                            governor=gov(pmax=0.9))
    net = Network(net.base_mva, net.nominal_hz, net.buses, net.branches, (tight,))
    sol = solve_power_flow(net)
    with pytest.raises(ValueError, match="limits"):
        compute_internal_emf(net, sol)
