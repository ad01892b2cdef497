"""Classical side: Gaussian free field on the cutoff space and reweighted
Monte-Carlo estimators for the interacting classical measure.

Fields are sampled coefficient-wise from independent complex Gaussians with
E|alpha_p|^2 = 1/h(p).  The interacting measure is reached by importance
reweighting with exp(-D_P(u)); the Hartree functional D_P is nonnegative,
so the weights live in (0, 1] and every estimator has finite variance.

Reproducibility: one Philox counter stream per lattice mode, keyed by
(seed, mode), with sample i consuming draws 2i and 2i+1 of its stream.
Identical (seed, parameters) give bit-identical estimates for any batching
or worker count, and streams shared across nested cutoffs give common
random numbers for cutoff-stability differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .freegas import TWO_PI_SQ
from .lattice import KernelParams, Mode, ModeSet, kernel_coeff

BATCH = 1 << 16  # even, so per-mode draw offsets stay on the 4-draw counter grid


@dataclass(frozen=True)
class Field:
    """A classical field over a mode set: u = sum_p alpha_p e_p."""

    coeffs: np.ndarray
    modes: ModeSet

    def __post_init__(self):
        if len(self.coeffs) != len(self.modes):
            raise ValueError("coefficient count must match the mode set")

    @property
    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.coeffs) ** 2))


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int
    seed: int
    stderr_jack: float | None = None

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be >= 0")


def _mode_code(p: Mode) -> int:
    return ((p[0] + (1 << 15)) << 16) | (p[1] + (1 << 15))


class GaussianFieldSampler:
    """Counter-based sampler of the free Gaussian field on a mode set.

    Mode p gets its own Philox stream keyed by (seed, p); the stream is
    independent of which cutoff set the mode belongs to, which couples
    nested cutoffs through common random numbers.
    """

    def __init__(self, modes: ModeSet, seed: int):
        self.modes = modes
        self.seed = int(seed)
        self._scale = 1.0 / np.sqrt(2.0 * modes.h)

    def sample_block(self, i0: int, i1: int) -> np.ndarray:
        """Fields for sample indices [i0, i1) as a (i1-i0, K) complex array."""
        if i0 % 2 != 0:
            raise ValueError("block starts must be even (counter alignment)")
        b = i1 - i0
        out = np.empty((b, len(self.modes)), dtype=complex)
        for j, p in enumerate(self.modes.modes):
            key = np.array([self.seed, _mode_code(p)], dtype=np.uint64)
            bg = np.random.Philox(key=key)
            if i0:
                bg.advance(i0 // 2)  # one advance unit = 4 raw draws = 2 samples
            u = np.random.Generator(bg).random(2 * b)
            u = np.maximum(u, 1e-300)  # ndtri(0) guard, probability 2^-53
            out[:, j] = (ndtri(u[0::2]) + 1j * ndtri(u[1::2])) * self._scale[j]
        return out


def sample_gaussian(modes: ModeSet, seed: int, index: int = 0) -> Field:
    """A single free-field draw (sample `index` of the seeded stream)."""
    i0 = index - (index % 2)
    block = GaussianFieldSampler(modes, seed).sample_block(i0, i0 + 2)
    return Field(coeffs=block[index % 2], modes=modes)


# ---------------------------------------------------------------------------
# pair densities and the Hartree functional
# ---------------------------------------------------------------------------

def pair_density(u: Field, k: Mode) -> complex:
    """<u, e_{k,P} u> = (2pi)^-1 sum_{p: p, p+k in set} conj(alpha_{p+k}) alpha_p."""
    a = u.coeffs
    total = 0.0 + 0.0j
    for ip, ipk in u.modes.transfer_pairs(k):
        total += np.conj(a[ipk]) * a[ip]
    return complex(total / (2.0 * math.pi))


class HartreeEvaluator:
    """Vectorized D_P over sample blocks for a fixed (modes, beta)."""

    def __init__(self, modes: ModeSet, params: KernelParams):
        self.modes = modes
        self.params = params
        self.rho0_scaled = float(np.sum(1.0 / modes.h))  # (2pi)^2 rho_{0,P}
        ks = modes.differences(nonzero=True)
        half = [k for k in ks if (k[0], k[1]) > (-k[0], -k[1])]
        self._terms = []
        for k in half:
            pairs = modes.transfer_pairs(k)
            src = np.array([ip for ip, _ in pairs])
            dst = np.array([ipk for _, ipk in pairs])
            self._terms.append((kernel_coeff(k, self.params), src, dst))

    def rho_k_block(self, block: np.ndarray, k: Mode) -> np.ndarray:
        pairs = self.modes.transfer_pairs(k)
        src = np.array([ip for ip, _ in pairs])
        dst = np.array([ipk for _, ipk in pairs])
        return np.sum(np.conj(block[:, dst]) * block[:, src], axis=1) / (2.0 * math.pi)

    def __call__(self, block: np.ndarray) -> np.ndarray:
        """D_P(u) for each row of a (B, K) coefficient block; always >= 0."""
        out = np.zeros(block.shape[0])
        for vk, src, dst in self._terms:
            rho = np.sum(np.conj(block[:, dst]) * block[:, src], axis=1) / (2.0 * math.pi)
            out += vk * np.abs(rho) ** 2  # counts k and -k together
        norm_sq = np.sum(np.abs(block) ** 2, axis=1)
        out += (norm_sq - self.rho0_scaled) ** 2 / (2.0 * TWO_PI_SQ)
        return out


def hartree_DP(u: Field, params: KernelParams, modes: ModeSet | None = None) -> float:
    """D_P(u) = (1/2) sum_{k!=0} vhat(k) |<u, e_k u>|^2
    + (||u||^2 - Tr(P h^-1))^2 / (2 (2pi)^2); nonnegative by construction."""
    ms = modes if modes is not None else u.modes
    return float(HartreeEvaluator(ms, params)(u.coeffs[None, :])[0])


# ---------------------------------------------------------------------------
# streaming reweighted estimators
# ---------------------------------------------------------------------------

class _RatioAccumulator:
    """Streaming moments for ratio estimators sum(f w)/sum(w).

    Tracks per-component sums of c = f*w (complex) with the second moments
    needed for delta-method errors, plus per-block partials for jackknife.
    """

    def __init__(self, ncomp: int):
        self.n = 0
        self.s_w = 0.0
        self.s_w2 = 0.0
        self.s_c = np.zeros(ncomp, dtype=complex)
        self.s_cr2 = np.zeros(ncomp)
        self.s_ci2 = np.zeros(ncomp)
        self.s_crw = np.zeros(ncomp)
        self.s_ciw = np.zeros(ncomp)
        self.block_w: list[float] = []
        self.block_c: list[np.ndarray] = []

    def add(self, f: np.ndarray, w: np.ndarray):
        c = f * w[:, None] if f.ndim == 2 else (f * w)[:, None]
        self.n += len(w)
        self.s_w += float(np.sum(w))
        self.s_w2 += float(np.sum(w * w))
        self.s_c += np.sum(c, axis=0)
        self.s_cr2 += np.sum(c.real**2, axis=0)
        self.s_ci2 += np.sum(c.imag**2, axis=0)
        self.s_crw += np.sum(c.real * w[:, None], axis=0)
        self.s_ciw += np.sum(c.imag * w[:, None], axis=0)
        self.block_w.append(float(np.sum(w)))
        self.block_c.append(np.sum(c, axis=0))

    def ratio(self) -> np.ndarray:
        return self.s_c / self.s_w

    def _part_stderr(self, s2, sw, rr) -> np.ndarray:
        n = self.n
        wbar = self.s_w / n
        var_w = max(self.s_w2 / n - wbar * wbar, 0.0)
        cbar = rr * wbar
        var_c = np.maximum(s2 / n - cbar * cbar, 0.0)
        cov = sw / n - cbar * wbar
        var_ratio = (var_c - 2.0 * rr * cov + rr * rr * var_w) / (wbar * wbar)
        return np.sqrt(np.maximum(var_ratio, 0.0) / n)

    def ratio_stderr(self) -> np.ndarray:
        """Delta-method standard error; Re/Im parts combined in quadrature."""
        r = self.ratio()
        se_re = self._part_stderr(self.s_cr2, self.s_crw, r.real)
        se_im = self._part_stderr(self.s_ci2, self.s_ciw, r.imag)
        return np.sqrt(se_re**2 + se_im**2)

    def ratio_stderr_jackknife(self) -> np.ndarray:
        """Leave-one-block-out jackknife error of the (real-part) ratio."""
        bw = np.array(self.block_w)
        bc = np.stack(self.block_c, axis=0)
        nb = len(bw)
        if nb < 2:
            return np.full(bc.shape[1], math.nan)
        loo = (self.s_c[None, :] - bc) / (self.s_w - bw)[:, None]
        mean = np.mean(loo, axis=0)
        dev2 = np.abs(loo - mean[None, :]) ** 2
        return np.sqrt((nb - 1) / nb * np.sum(dev2, axis=0))


def _chunk_edges(n: int) -> list[int]:
    """Near-equal even-start chunk boundaries, fixed by n alone.

    Chunk count targets ~32 (for jackknife blocks) while holding each chunk
    below the memory batch; every boundary is even so the per-mode counter
    streams stay aligned.
    """
    nb = max(2, min(32, n // 1000))
    while (n + nb - 1) // nb > BATCH:
        nb *= 2
    edges = [2 * ((i * n // nb) // 2) for i in range(nb)] + [n]
    return sorted(set(edges))


def _stream(modes, params, n, seed, consume, interacting=True):
    """Drive `consume(block, weights)` over deterministic sample chunks.

    interacting=False forces D_P to zero (unit weights): the plain Gaussian
    ensemble used as the Wick oracle for the reweighted estimators.
    """
    sampler = GaussianFieldSampler(modes, seed)
    dp = HartreeEvaluator(modes, params) if interacting else None
    edges = _chunk_edges(n)
    for i, j in zip(edges[:-1], edges[1:]):
        block = sampler.sample_block(i, j)
        w = np.exp(-dp(block)) if interacting else np.ones(j - i)
        consume(block, w)


def mc_partition(modes: ModeSet, params: KernelParams, n: int, seed: int,
                 interacting: bool = True) -> McEstimate:
    """Monte-Carlo estimate of z_P = E_mu0[exp(-D_P(u))]; always in (0, 1]."""
    if n < 1000:
        raise ValueError("need at least 10^3 samples")
    acc = {"s": 0.0, "s2": 0.0}

    def consume(block, w):
        acc["s"] += float(np.sum(w))
        acc["s2"] += float(np.sum(w * w))

    _stream(modes, params, n, seed, consume, interacting=interacting)
    mean = acc["s"] / n
    var = max(acc["s2"] / n - mean * mean, 0.0)
    return McEstimate(mean=mean, stderr=math.sqrt(var / n), n_samples=n, seed=seed)


def mc_moment(
    modes: ModeSet,
    params: KernelParams,
    phi: np.ndarray,
    order: int,
    samples: int,
    seed: int,
    interacting: bool = True,
) -> McEstimate:
    """Reweighted moment int |<phi, u>|^(2 order) dnu_P, ratio estimator.

    Errors by the delta method with a leave-one-block-out jackknife
    cross-check in stderr_jack.
    """
    if samples < 1000:
        raise ValueError("need at least 10^3 samples")
    phi = np.asarray(phi, dtype=complex)
    acc = _RatioAccumulator(1)

    def consume(block, w):
        ip = block @ phi.conj()
        f = np.abs(ip) ** (2 * order)
        acc.add(f.astype(complex), w)

    _stream(modes, params, samples, seed, consume, interacting=interacting)
    return McEstimate(
        mean=float(acc.ratio()[0].real),
        stderr=float(acc.ratio_stderr()[0]),
        n_samples=samples,
        seed=seed,
        stderr_jack=float(acc.ratio_stderr_jackknife()[0]),
    )


@dataclass(frozen=True)
class CorrelationEstimate:
    """Reweighted k-point correlation matrix with entrywise standard errors."""

    order: int
    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int
    seed: int
    pair_index: list | None = None


def mc_correlation(
    modes: ModeSet,
    params: KernelParams,
    k: int,
    samples: int,
    seed: int,
    interacting: bool = True,
) -> CorrelationEstimate:
    """gamma^(k) of the reweighted measure over the (symmetrized) mode basis.

    k = 1: entries E_nu[alpha_p conj(alpha_q)].
    k = 2: entries E_nu[y_pq conj(y_rs)] with y_pq the symmetrized pair
    coordinates (sqrt(2) alpha_p alpha_q for p < q, alpha_p^2 on the
    diagonal), matching the quantum reduced-density basis.  Hermitian by
    construction.
    """
    if k not in (1, 2):
        raise ValueError("only k in {1, 2}")
    if samples < 1000:
        raise ValueError("need at least 10^3 samples")
    K = len(modes)
    if k == 1:
        idx = [(i, j) for i in range(K) for j in range(K)]
        pair_index = None
        ncomp = K * K

        def components(block):
            return np.einsum("bi,bj->bij", block, block.conj()).reshape(len(block), -1)

    else:
        from .qgibbs import pair_basis

        pairs = pair_basis(K)
        pair_index = pairs
        P = len(pairs)
        ncomp = P * P
        ii = np.array([p for p, _ in pairs])
        jj = np.array([q for _, q in pairs])
        gf = np.where(ii == jj, 1.0, math.sqrt(2.0))

        def components(block):
            y = gf[None, :] * block[:, ii] * block[:, jj]
            return np.einsum("ba,bc->bac", y, y.conj()).reshape(len(block), -1)

    acc = _RatioAccumulator(ncomp)

    def consume(block, w):
        acc.add(components(block), w)

    _stream(modes, params, samples, seed, consume, interacting=interacting)
    side = K if k == 1 else len(pair_index)
    mean = acc.ratio().reshape(side, side)
    mean = 0.5 * (mean + mean.conj().T)  # symmetrized accumulation
    err = acc.ratio_stderr().reshape(side, side)
    return CorrelationEstimate(
        order=k, mean=mean, stderr=err, n_samples=samples, seed=seed,
        pair_index=pair_index,
    )


def cutoff_stability(
    params: KernelParams,
    cutoffs: list[float],
    samples: int,
    seed: int,
) -> list[dict]:
    """z_P estimates over ascending cutoffs with common random numbers.

    The per-mode streams make larger sets extend smaller ones sample by
    sample, so successive |dz| differences are variance-reduced.
    """
    from .lattice import mode_set

    if list(cutoffs) != sorted(cutoffs):
        raise ValueError("cutoffs must be ascending")
    rows = []
    prev = None
    for c in cutoffs:
        est = mc_partition(mode_set(c), params, samples, seed)
        row = {
            "cutoff_sq": c,
            "n_modes": len(mode_set(c)),
            "z": est.mean,
            "stderr": est.stderr,
            "delta_z": None if prev is None else est.mean - prev,
        }
        prev = est.mean
        rows.append(row)
    return rows
