import math

import numpy as np
import pytest

from besselgas.bridge import (
    DroppedMassError,
    HusimiSampler,
    coherent_amplitudes,
    convergence_report,
    definetti_moment,
    definetti_norm_moments,
    definetti_norm_moments_via_reduced,
    hs_distance,
    husimi_moment_functionals,
    rescaled_reduced,
)
from besselgas.fock import BlockOperator, build_basis, build_full_hamiltonian, build_kinetic
from besselgas.lattice import KernelParams, mode_set
from besselgas.qgibbs import gibbs

P2 = KernelParams(2.0)


def vacuum_state(basis, lam=1.0):
    e = np.full(basis.dim, 200.0)
    e[basis.index_of({})] = 0.0
    return gibbs(BlockOperator.from_diagonal(basis, e), lam=lam)


def test_coherent_vacuum():
    b = build_basis(mode_set(2.0), 4)
    amps, dropped = coherent_amplitudes(np.zeros(5, dtype=complex), b)
    assert amps[b.index_of({})] == 1.0
    assert np.sum(np.abs(amps)) == 1.0
    assert dropped == 0.0


def test_coherent_single_mode_poisson():
    b = build_basis(mode_set(1.0), 20)
    amps, dropped = coherent_amplitudes(np.array([1.0 + 0j]), b)
    n = b.n_tot
    expect = np.exp(-0.5) / np.sqrt([math.factorial(int(x)) for x in n])
    assert np.allclose(np.abs(amps), expect, rtol=1e-12)
    assert dropped < 1e-18


def test_coherent_norm_subunit():
    b = build_basis(mode_set(2.0), 6)
    rng = np.random.default_rng(4)
    for _ in range(5):
        c = rng.normal(size=5) * 0.8 + 1j * rng.normal(size=5) * 0.8
        amps, dropped = coherent_amplitudes(c, b)
        total = float(np.sum(np.abs(amps) ** 2))
        assert total <= 1.0 + 1e-12
        assert total + dropped == pytest.approx(1.0, abs=1e-12)


def test_definetti_vacuum_moment():
    b = build_basis(mode_set(2.0), 4)
    st = vacuum_state(b, lam=0.7)
    phi = np.array([1.0, 0.5, 0.0, 0.25j, 0.0])
    got = definetti_moment(st, phi, 1)
    assert got == pytest.approx(0.7 * float(np.vdot(phi, phi).real), rel=1e-10)
    got4 = definetti_moment(st, phi, 2)
    assert got4 == pytest.approx(2 * 0.7**2 * float(np.vdot(phi, phi).real) ** 2, rel=1e-9)


def test_definetti_norm_identities_exact():
    # the ||u||^2 and ||u||^4 identities as exact linear algebra, both from
    # number moments and from the reduced density matrices
    b = build_basis(mode_set(2.0), 6)
    lam = 0.9
    st = gibbs(build_full_hamiltonian(b, P2, lam), lam=lam)
    m2a, m4a = definetti_norm_moments(st)
    m2b, m4b = definetti_norm_moments_via_reduced(st)
    assert m2a == pytest.approx(m2b, abs=1e-10)
    assert m4a == pytest.approx(m4b, abs=1e-10)


def test_hs_distance_basics():
    a = np.zeros((3, 3))
    d = np.diag([1.0, 2.0, 2.0])
    assert hs_distance(a, a) == 0.0
    assert hs_distance(a, d) == pytest.approx(3.0)
    assert hs_distance(d, a) == hs_distance(a, d)
    with pytest.raises(ValueError):
        hs_distance(np.zeros((2, 2)), np.zeros((3, 3)))


def test_husimi_density_vacuum_at_zero():
    b = build_basis(mode_set(2.0), 6)
    lam = 1.3
    st = vacuum_state(b, lam=lam)
    hs = HusimiSampler(st, lam, dropped_mass_tol=1e-6)
    val = hs.husimi_density(np.zeros(5, dtype=complex))
    assert val == pytest.approx((lam * math.pi) ** (-5), rel=1e-12)


def test_husimi_density_nonnegative():
    b = build_basis(mode_set(2.0), 8)
    lam = 1.0
    st = gibbs(build_kinetic(b) * lam, lam=lam)
    hs = HusimiSampler(st, lam, dropped_mass_tol=0.5)
    rng = np.random.default_rng(6)
    for _ in range(50):
        u = (rng.normal(size=5) + 1j * rng.normal(size=5)) * 0.4
        assert hs.husimi_density(u) >= 0.0


def test_husimi_dropped_mass_guard():
    b = build_basis(mode_set(2.0), 3)
    st = vacuum_state(b)
    hs = HusimiSampler(st, 1.0, dropped_mass_tol=1e-10)
    big = np.full(5, 2.0 + 0j)  # |u|^2/lam = 20 >> cap 3
    with pytest.raises(DroppedMassError):
        hs.husimi_density(big)


def test_husimi_mc_matches_definetti_single_mode_strict():
    # K = 1 with a generous cap: the spec-default dropped-mass tolerance
    # holds for every sample, and MC moments match the exact identity
    b = build_basis(mode_set(1.0), 45)
    lam = 1.0
    st = gibbs(build_full_hamiltonian(b, P2, lam), lam=lam)
    hs = HusimiSampler(st, lam, dropped_mass_tol=1e-8, seed=17)
    phi = np.array([1.0 + 0j])
    res = hs.mc_moments(husimi_moment_functionals(phi), samples=3000)
    assert res["max_dropped_mass"] <= 1e-8
    m2, m4 = definetti_norm_moments(st)
    for name, exact in (
        ("norm", 1.0),
        ("u2", m2),
        ("u4", m4),
        ("phi2", definetti_moment(st, phi, 1)),
        ("phi4", definetti_moment(st, phi, 2)),
    ):
        mean, se = res[name]
        assert mean == pytest.approx(exact, abs=3 * se + 1e-12), name


def test_husimi_mc_multimode_three_states():
    # vacuum, free, interacting on the 5-mode set; oracle is exact for the
    # capped state at any cap, so only the MC error enters
    b = build_basis(mode_set(2.0), 16)
    lam = 2.0
    phi = np.zeros(5, dtype=complex)
    phi[0] = 1.0
    phi[1] = 0.5
    states = {
        "vacuum": vacuum_state(b, lam=lam),
        "free": gibbs(build_kinetic(b) * lam, lam=lam),
        "interacting": gibbs(build_full_hamiltonian(b, P2, lam), lam=lam),
    }
    for name, st in states.items():
        hs = HusimiSampler(st, lam, dropped_mass_tol=0.25, seed=23)
        res = hs.mc_moments(husimi_moment_functionals(phi), samples=1024)
        m2, m4 = definetti_norm_moments(st)
        mean, se = res["norm"]
        assert mean == pytest.approx(1.0, abs=3.5 * se + 1e-10), name
        mean, se = res["u2"]
        assert mean == pytest.approx(m2, abs=3.5 * se + 1e-10), name
        mean, se = res["phi2"]
        assert mean == pytest.approx(definetti_moment(st, phi, 1), abs=3.5 * se + 1e-10), name


def test_husimi_mc_deterministic():
    b = build_basis(mode_set(2.0), 10)
    lam = 2.0
    st = gibbs(build_kinetic(b) * lam, lam=lam)
    hs1 = HusimiSampler(st, lam, dropped_mass_tol=1.0, seed=5)
    hs2 = HusimiSampler(st, lam, dropped_mass_tol=1.0, seed=5)
    fns = husimi_moment_functionals()
    a = hs1.mc_moments(fns, samples=400)
    bb = hs2.mc_moments(fns, samples=400)
    assert a["u2"] == bb["u2"]


def test_rescaled_reduced_trace():
    b = build_basis(mode_set(2.0), 6)
    lam = 0.8
    st = gibbs(build_full_hamiltonian(b, P2, lam), lam=lam)
    g1s, g2s = rescaled_reduced(st)
    n1, n2 = st.number_moments()
    assert np.trace(g1s).real == pytest.approx(lam * n1, abs=1e-10)
    assert np.trace(g2s).real == pytest.approx(lam**2 * n2, abs=1e-10)


def test_convergence_report_smoke():
    rows = convergence_report(
        mode_set(2.0), cap=8, params=P2, lambda_list=[0.5, 0.3],
        mc_samples=4000, seed=3, vstar=4.3e-3,
    )
    assert len(rows) == 2
    for row in rows:
        assert row["gap"] >= 0.0
        assert row["hs_k1"] >= 0.0
        assert math.isfinite(row["F"])
        assert row["cap_certified"] is False  # desk-scale caps cannot certify
    assert rows[0]["lambda"] == 0.5
