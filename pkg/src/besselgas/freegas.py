"""Exact quantities of the non-interacting Bose gas on the momentum lattice.

Occupation numbers, particle counts over spectral regions, log-partition
functions, number cumulants, the capped free partition function used as the
reference in free-energy differences, and the coercive cap-defect bound that
certifies a total-particle truncation.

Infinite sums over all of Z^2 are certified with geometric/Gaussian
dominating tails; finite spectral regions are summed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, logsumexp

from .lattice import CertifiedValue, KernelParams, Mode, ModeSet, mode_set

TWO_PI_SQ = (2.0 * math.pi) ** 2

_EXP_SWITCH = 40.0  # below this use expm1, above the two-term expansion


@dataclass(frozen=True)
class Region:
    """A spectral window in h: all of Z^2, or below/between/above cutoffs."""

    kind: str
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("all", "below", "between", "above"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind == "below" and not (self.lo and self.lo >= 1.0):
            raise ValueError("below(threshold) needs threshold >= 1")
        if self.kind == "above" and not (self.lo and self.lo >= 1.0):
            raise ValueError("above(threshold) needs threshold >= 1")
        if self.kind == "between":
            if not (self.lo and self.hi and 1.0 <= self.lo <= self.hi):
                raise ValueError("between(lo, hi) needs 1 <= lo <= hi")

    @staticmethod
    def all() -> "Region":
        return Region("all")

    @staticmethod
    def below(cut_sq: float) -> "Region":
        return Region("below", lo=float(cut_sq))

    @staticmethod
    def between(cut_sq: float, cut1_sq: float) -> "Region":
        return Region("between", lo=float(cut_sq), hi=float(cut1_sq))

    @staticmethod
    def above(cut_sq: float) -> "Region":
        return Region("above", lo=float(cut_sq))

    def contains_h(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "all":
            return np.ones_like(h, dtype=bool)
        if self.kind == "below":
            return h <= self.lo
        if self.kind == "between":
            return (h > self.lo) & (h <= self.hi)
        return h > self.lo


def occupation(lam: float, p: Mode) -> float:
    """Bose occupation 1/(e^(lam h(p)) - 1) of a single mode."""
    if lam <= 0.0:
        raise ValueError("lam must be > 0")
    x = lam * float(p[0] * p[0] + p[1] * p[1] + 1)
    if x > _EXP_SWITCH:
        e = math.exp(-x)
        return e * (1.0 + e)  # two-term geometric expansion, error < e^-3x
    return 1.0 / math.expm1(x)


def _occ_array(lam: float, h: np.ndarray) -> np.ndarray:
    x = lam * h
    out = np.empty_like(x)
    small = x <= _EXP_SWITCH
    out[small] = 1.0 / np.expm1(x[small])
    e = np.exp(-x[~small])
    out[~small] = e * (1.0 + e)
    return out


def _gaussian_lattice_tail(lam: float, radius: float) -> float:
    """Upper bound on sum_{|p| > radius} e^(-lam |p|^2), integral comparison."""
    b = radius - math.sqrt(2.0)
    if b <= 0.0:
        raise ValueError("radius too small for a certified tail")
    lead = math.exp(-lam * b * b) / (2.0 * lam)
    sub = math.sqrt(2.0) * math.sqrt(math.pi / lam) * 0.5 * erfc(math.sqrt(lam) * b)
    return 2.0 * math.pi * (lead + sub)


def _tail_radius(lam: float, log_target: float = 46.0) -> float:
    # lam * (r - sqrt2)^2 >= log_target keeps tails near double precision floor
    return math.sqrt(log_target / lam) + 2.0


def _region_modes(region: Region, lam: float) -> tuple[np.ndarray, float, float]:
    """h-values of the finite part plus (tail_start_h, tail_radius).

    For 'all'/'above' the finite part runs up to an adaptive radius; the
    returned tail parameters certify what is left out (empty for finite
    regions).
    """
    if region.kind in ("below", "between"):
        hi = region.lo if region.kind == "below" else region.hi
        ms = mode_set(hi)
        mask = region.contains_h(ms.h)
        return ms.h[mask], math.inf, 0.0
    r = _tail_radius(lam)
    hi = r * r + 1.0
    ms = mode_set(hi)
    mask = region.contains_h(ms.h)
    return ms.h[mask], hi, r


def free_number(lam: float, region: Region = Region.all()) -> CertifiedValue:
    """Certified particle count sum_{p in region} n_p of the free gas.

    The infinite tail is dominated by the geometric bound
    n_p <= e^(-lam h(p)) / (1 - e^(-lam h_tail)).
    """
    if lam <= 0.0:
        raise ValueError("lam must be > 0")
    h, tail_h, tail_r = _region_modes(region, lam)
    value = float(np.sum(_occ_array(lam, h)))
    if tail_r == 0.0:
        return CertifiedValue(value, 0.0)
    geo = 1.0 / (-math.expm1(-lam * tail_h))
    tail = geo * math.exp(-lam) * _gaussian_lattice_tail(lam, tail_r)
    return CertifiedValue(value, tail)


def free_log_partition(lam: float, region: Region = Region.all()) -> CertifiedValue:
    """Certified -sum_{p in region} log(1 - e^(-lam h(p)))."""
    if lam <= 0.0:
        raise ValueError("lam must be > 0")
    h, tail_h, tail_r = _region_modes(region, lam)
    value = float(-np.sum(np.log(-np.expm1(-lam * h))))
    if tail_r == 0.0:
        return CertifiedValue(value, 0.0)
    # -log(1-y) <= y/(1-y) with y = e^(-lam h) <= e^(-lam tail_h)
    geo = 1.0 / (-math.expm1(-lam * tail_h))
    tail = geo * math.exp(-lam) * _gaussian_lattice_tail(lam, tail_r)
    return CertifiedValue(value, tail)


def free_number_cumulants(lam: float, region: Region = Region.all()) -> tuple[float, float, float, float]:
    """First four cumulants of the particle count over the region.

    Modes are independent geometric variables, so the cumulants are mode
    sums of n, n(1+n), n(1+n)(1+2n), n(1+n)(1+6n+6n^2).  Tails of the
    infinite sums sit below the double-precision floor of the finite part.
    """
    if lam <= 0.0:
        raise ValueError("lam must be > 0")
    h, _, _ = _region_modes(region, lam)
    n = _occ_array(lam, h)
    k1 = float(np.sum(n))
    k2 = float(np.sum(n * (1.0 + n)))
    k3 = float(np.sum(n * (1.0 + n) * (1.0 + 2.0 * n)))
    k4 = float(np.sum(n * (1.0 + n) * (1.0 + 6.0 * n + 6.0 * n * n)))
    return (k1, k2, k3, k4)


@dataclass(frozen=True)
class FreeGasReport:
    lam: float
    n0: CertifiedValue
    log_z: CertifiedValue
    variance: float
    cumulants: tuple[float, float, float, float]

    @staticmethod
    def compute(lam: float, region: Region = Region.all()) -> "FreeGasReport":
        cum = free_number_cumulants(lam, region)
        return FreeGasReport(
            lam=lam,
            n0=free_number(lam, region),
            log_z=free_log_partition(lam, region),
            variance=cum[1],
            cumulants=cum,
        )


# ---------------------------------------------------------------------------
# capped reference partition function and the coercive cap defect
# ---------------------------------------------------------------------------

def capped_free_sector_weights(modes: ModeSet, cap: int, lam: float) -> np.ndarray:
    """z_n = free partition function of the exact-n sector, n = 0..cap.

    Dynamic programming: convolve the per-mode truncated geometric series
    over the total count.
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    z = np.zeros(cap + 1)
    z[0] = 1.0
    j = np.arange(cap + 1)
    for h in modes.h:
        g = np.exp(-lam * h * j)
        z = np.convolve(z, g)[: cap + 1]
    return z


def capped_free_partition(modes: ModeSet, cap: int, lam: float) -> float:
    """Free partition function truncated to total particle number <= cap."""
    return float(np.sum(capped_free_sector_weights(modes, cap, lam)))


def renorm_constants(modes: ModeSet, lam: float) -> tuple[float, float, float]:
    """(n0p, c_lam, C_lam): set-restricted free count and the counterterms.

    c_lam = lam^2 (1 - 2 n0p) / (2 (2pi)^2),  C_lam = lam^2 n0p^2 / (2 (2pi)^2),
    so that the centered interaction equals the bare quartic plus
    c_lam * N + C_lam.
    """
    n0p = float(np.sum(_occ_array(lam, modes.h)))
    c_lam = lam * lam * (1.0 - 2.0 * n0p) / (2.0 * TWO_PI_SQ)
    cc_lam = lam * lam * n0p * n0p / (2.0 * TWO_PI_SQ)
    return n0p, c_lam, cc_lam


def cap_defect(modes: ModeSet, cap: int, lam: float, params: KernelParams, vstar: float) -> float:
    """Coercive upper bound on the unnormalized Gibbs weight of sectors n > cap.

    Sector-wise, the centered interaction dominates
    lam^2 vstar n(n-1)/2 + c_lam n + C_lam, and the kinetic trace is bounded
    by A^n with A = sum_p e^(-lam h(p)), giving

        Tr_n e^(-H_n) <= e^(C') e^(-lam^2 vstar n^2 / 4) A^n,
        C' = (c_lam - a)^2/(lam^2 vstar) + |C_lam|,  a = lam^2 vstar / 2.

    Returns the sum of the bound over n > cap (inf if it overflows; the
    Gaussian factor always makes the series convergent, but for small lam
    the bound is astronomically larger than the true weight).
    """
    if vstar <= 0.0:
        raise ValueError("vstar must be > 0")
    if cap < 0:
        raise ValueError("cap must be >= 0")
    _, c_lam, cc_lam = renorm_constants(modes, lam)
    a_half = lam * lam * vstar / 4.0  # quadratic rate in the exponent
    a = 2.0 * a_half
    log_A = float(logsumexp(-lam * modes.h))
    c_prime = (c_lam - a) ** 2 / (lam * lam * vstar) + abs(cc_lam)

    # exponent(n) = c_prime - a_half n^2 + n log A, peaked at n* = logA/(2 a_half)
    n_peak = max(log_A, 0.0) / (2.0 * a_half)
    n_lo = cap + 1
    n_hi = int(max(n_peak, n_lo) + 12.0 / math.sqrt(a_half) + 10)
    if n_hi - n_lo > 2_000_000:
        # closed-form bound: sum_n e^(-a_half n^2 + n logA) <= e^(logA^2/(4 a_half)) (1 + sqrt(pi/a_half))
        log_defect = c_prime + log_A**2 / (4.0 * a_half) + math.log1p(math.sqrt(math.pi / a_half))
    else:
        n = np.arange(n_lo, n_hi + 1, dtype=float)
        log_defect = c_prime + float(logsumexp(-a_half * n * n + n * log_A))
    if log_defect > 700.0:
        return math.inf
    return math.exp(log_defect)


class CapCertificationError(RuntimeError):
    """Raised when no cap within reach has a certifiable defect."""


def certify_cap(
    modes: ModeSet,
    lam: float,
    params: KernelParams,
    vstar: float,
    rel_tol: float = 1e-8,
    cap_max: int = 10_000_000,
) -> tuple[int, float]:
    """Smallest cap whose coercive defect is below rel_tol * (vacuum weight).

    The partition function is bounded below by the vacuum contribution
    e^(-C_lam), which makes the relative criterion rigorous.  Raises
    CapCertificationError when even cap_max fails.
    """
    _, _, cc_lam = renorm_constants(modes, lam)
    z_lower = math.exp(-cc_lam)
    target = rel_tol * z_lower

    if cap_defect(modes, cap_max, lam, params, vstar) > target:
        raise CapCertificationError(
            f"no cap <= {cap_max} certifies defect < {rel_tol:g} (lam={lam}); "
            f"the coercive bound needs lam^2*vstar*n^2/4 to dominate n*log(A)"
        )
    lo, hi = 0, cap_max
    while lo < hi:
        mid = (lo + hi) // 2
        if cap_defect(modes, mid, lam, params, vstar) <= target:
            hi = mid
        else:
            lo = mid + 1
    return lo, cap_defect(modes, lo, lam, params, vstar)
