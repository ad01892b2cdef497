import math

import numpy as np
import pytest

from besselgas.freegas import (
    CapCertificationError,
    Region,
    cap_defect,
    capped_free_partition,
    capped_free_sector_weights,
    certify_cap,
    free_log_partition,
    free_number,
    free_number_cumulants,
    occupation,
    renorm_constants,
)
from besselgas.lattice import KernelParams, mode_set

P2 = KernelParams(2.0)


def test_occupation_closed_form():
    assert occupation(1.0, (0, 0)) == pytest.approx(1.0 / math.expm1(1.0), rel=1e-14)
    assert occupation(1.0, (0, 0)) == pytest.approx(0.5819767068693265, rel=1e-12)


def test_occupation_large_lambda_expansion():
    n = occupation(100.0, (0, 0))
    assert 0.0 < n <= math.exp(-100.0) * (1.0 + 2.0 * math.exp(-100.0))


def test_occupation_monotone_in_h():
    assert occupation(0.7, (0, 0)) > occupation(0.7, (1, 0))
    assert occupation(0.7, (1, 0)) > occupation(0.7, (1, 1))


def test_occupation_bound():
    # lam * n_p <= 1/h(p)
    for lam in (0.01, 0.3, 2.0):
        for p in [(0, 0), (1, 0), (3, 2)]:
            h = p[0] ** 2 + p[1] ** 2 + 1
            assert lam * occupation(lam, p) <= 1.0 / h + 1e-15


def test_free_number_single_mode_region():
    cv = free_number(1.0, Region.below(1.0))
    assert cv.value == pytest.approx(1.0 / math.expm1(1.0), rel=1e-14)
    assert cv.tail_bound == 0.0


def test_free_number_log_scaling():
    lam = 1e-3
    cv = free_number(lam, Region.all())
    ratio = lam * cv.value / abs(math.log(lam))
    assert 0.8 * math.pi <= ratio <= 1.2 * math.pi
    # integral-comparison oracle (pi/lam)(-log(1-e^-lam))
    oracle = math.pi / lam * (-math.log(-math.expm1(-lam)))
    assert cv.value == pytest.approx(oracle, rel=0.05)


def test_free_number_region_additivity():
    lam = 0.2
    below = free_number(lam, Region.below(9.0))
    mid = free_number(lam, Region.between(9.0, 30.0))
    above = free_number(lam, Region.above(30.0))
    total = free_number(lam, Region.all())
    lhs = below.value + mid.value + above.value
    assert abs(lhs - total.value) <= above.tail_bound + total.tail_bound + 1e-12


def test_free_tail_exponentially_small():
    # lam * N_{0,Q1} once lam * Lambda1^2 >= 25
    lam = 0.01
    lam1_sq = 25.0 / lam
    cv = free_number(lam, Region.above(lam1_sq))
    assert lam * (cv.value + cv.tail_bound) < 1e-6


def test_free_tail_functional_form():
    # lam N_{0,Q1} <= C e^{-c lam Lam1^2}: fit c,C at moderate x and check decay
    lam = 0.02
    xs = np.array([10.0, 15.0, 20.0, 25.0])
    vals = np.array([lam * free_number(lam, Region.above(x / lam)).value for x in xs])
    slope = np.polyfit(xs, np.log(vals), 1)[0]
    assert slope < -0.8  # exponential in lam*Lam1^2 with rate near 1


def test_free_log_partition_single_mode():
    cv = free_log_partition(1.0, Region.below(1.0))
    assert cv.value == pytest.approx(-math.log(-math.expm1(-1.0)), rel=1e-14)
    assert cv.value == pytest.approx(0.45867514538708193, rel=1e-12)


def test_free_log_partition_additivity():
    lam = 0.15
    below = free_log_partition(lam, Region.below(50.0))
    above = free_log_partition(lam, Region.above(50.0))
    total = free_log_partition(lam, Region.all())
    assert abs(below.value + above.value - total.value) <= (
        above.tail_bound + total.tail_bound + 1e-12
    )


def test_log_partition_derivative_is_energy():
    # d/dlam of Phi(lam) = -sum h(p) n_p, by central finite difference
    lam = 0.3
    eps = 1e-6
    up = free_log_partition(lam + eps, Region.below(80.0)).value
    dn = free_log_partition(lam - eps, Region.below(80.0)).value
    deriv = (up - dn) / (2 * eps)
    ms = mode_set(80.0)
    energy = -sum(h * occupation(lam, tuple(p)) for h, p in zip(ms.h, ms.parr))
    assert deriv == pytest.approx(energy, rel=1e-6)


def test_cumulants_single_mode_geometric():
    lam = 0.8
    k1, k2, k3, k4 = free_number_cumulants(lam, Region.below(1.0))
    n = 1.0 / math.expm1(lam)
    q = math.exp(-lam)
    assert k1 == pytest.approx(n, rel=1e-13)
    assert k2 == pytest.approx(n * (1 + n), rel=1e-13)
    # geometric-distribution oracle in terms of q
    assert k2 == pytest.approx(q / (1 - q) ** 2, rel=1e-12)
    assert k3 == pytest.approx(q * (1 + q) / (1 - q) ** 3, rel=1e-12)
    assert k4 == pytest.approx(q * (1 + 4 * q + q * q) / (1 - q) ** 4, rel=1e-12)


def test_cumulants_ordering_and_scaling():
    for lam in (1.0, 0.3, 0.1, 0.03, 0.01):
        k1, k2, _, _ = free_number_cumulants(lam)
        assert k2 >= k1
    # lam^2 Var(N) stays bounded as lam -> 0 (approaches Tr h^-2)
    vals = [lam**2 * free_number_cumulants(lam)[1] for lam in (0.1, 0.01, 0.001)]
    assert max(vals) / min(vals) < 1.2


def test_log_moment_bound():
    # lam^q (q-th central-ish moment) <= C_q (1+|log lam|)^q for q=1,2
    lams = [1.0, 0.3, 0.1, 0.03, 0.01]
    for q, pick in ((1, 0), (2, 1)):
        ratios = []
        for lam in lams:
            m = free_number_cumulants(lam)[pick]
            ratios.append(lam**q * m / (1.0 + abs(math.log(lam))) ** q)
        assert max(ratios) < 2.0 * ratios[0] + 2.0


def test_capped_free_partition_small_cases():
    m1 = mode_set(1.0)
    assert capped_free_partition(m1, 0, 1.0) == 1.0
    assert capped_free_partition(m1, 1, 1.0) == pytest.approx(1.0 + math.exp(-1.0), rel=1e-14)


def test_capped_free_partition_converges_to_product():
    m5 = mode_set(2.0)
    lam = 1.0
    capped = capped_free_partition(m5, 30, lam)
    product = float(np.prod(1.0 / (-np.expm1(-lam * m5.h))))
    assert capped == pytest.approx(product, abs=1e-10)


def test_sector_weights_match_direct_enumeration():
    # 2-mode toy set: z_n by explicit enumeration of occupation pairs
    m1 = mode_set(1.0)
    lam = 0.7
    z = capped_free_sector_weights(m1, 4, lam)
    expect = np.exp(-lam * np.arange(5))
    assert np.allclose(z, expect, rtol=1e-14)

    m5 = mode_set(2.0)
    z5 = capped_free_sector_weights(m5, 3, lam)
    h = m5.h
    brute = np.zeros(4)
    for occ in np.ndindex(*(4,) * 5):
        n = sum(occ)
        if n <= 3:
            brute[n] += math.exp(-lam * float(np.dot(occ, h)))
    assert np.allclose(z5, brute, rtol=1e-12)


def test_renorm_constants():
    m5 = mode_set(2.0)
    lam = 1.0
    n0p, c_lam, cc_lam = renorm_constants(m5, lam)
    n_expect = 1.0 / math.expm1(1.0) + 4.0 / math.expm1(2.0)
    assert n0p == pytest.approx(n_expect, rel=1e-13)
    two_pi_sq = (2 * math.pi) ** 2
    assert c_lam == pytest.approx((1 - 2 * n_expect) / (2 * two_pi_sq), rel=1e-13)
    assert cc_lam == pytest.approx(n_expect**2 / (2 * two_pi_sq), rel=1e-13)


def test_cap_defect_gaussian_tail():
    # large lam, huge cap: quadratic confinement wins and the bound collapses
    m5 = mode_set(2.0)
    vstar = 4.3e-3
    lam = 2.0
    cap = 4000
    assert lam**2 * vstar * cap**2 / 4.0 > 100.0
    assert cap_defect(m5, cap, lam, P2, vstar) < 1e-40


def test_cap_defect_dominates_first_sector():
    m5 = mode_set(2.0)
    vstar = 4.3e-3
    lam = 1.0
    defect0 = cap_defect(m5, 0, lam, P2, vstar)
    # weight of the n=1 sector alone is sum_p e^{-lam h - W(1)}; W(1) >= c + C
    z1 = float(np.sum(np.exp(-lam * m5.h)))
    assert defect0 >= z1 * 0.9


def test_cap_defect_monotone_in_cap():
    m5 = mode_set(2.0)
    vstar = 4.3e-3
    d = [cap_defect(m5, c, 1.5, P2, vstar) for c in (0, 5, 10, 20, 40)]
    assert all(a >= b for a, b in zip(d, d[1:]))


def test_certify_cap_feasible_at_large_lambda():
    m5 = mode_set(2.0)
    vstar = 4.3e-3
    cap, defect = certify_cap(m5, 2.0, P2, vstar)
    assert cap <= 60
    _, _, cc = renorm_constants(m5, 2.0)
    assert defect <= 1e-8 * math.exp(-cc)
    # one below the certified cap must fail
    if cap > 0:
        assert cap_defect(m5, cap - 1, 2.0, P2, vstar) > 1e-8 * math.exp(-cc)


def test_certified_caps_exceed_buildable_bases_at_small_lambda():
    # The coercive bound certifies a cap at every lam, but for lam <= 0.5 the
    # certified cap is far beyond any buildable occupation basis (the Gaussian
    # rate lam^2 vstar/4 must beat log A ~ 1 per particle).  This is the
    # documented reason the convergence sweep pins explicit budget caps.
    m5 = mode_set(2.0)
    cap_half, _ = certify_cap(m5, 0.5, P2, 4.3e-3)
    assert cap_half > 1000  # dim C(cap+5,5) > 1e13, orders beyond the limit
    cap_tenth, _ = certify_cap(m5, 0.1, P2, 4.3e-3)
    assert cap_tenth > 100_000
    with pytest.raises(CapCertificationError):
        certify_cap(m5, 0.1, P2, 4.3e-3, cap_max=50_000)


def test_region_validation():
    with pytest.raises(ValueError):
        Region("nonsense")
    with pytest.raises(ValueError):
        Region.between(10.0, 2.0)
    with pytest.raises(ValueError):
        Region.below(0.5)
