"""Quantum-classical comparison: coherent states, Husimi lower symbols,
de Finetti moment identities, and Hilbert-Schmidt distances.

The lower symbol of a state at scale lam is
mu(du) = (lam pi)^-K <W(u/sqrt(lam)), Gamma W(u/sqrt(lam))> du over the
cutoff space, with W the coherent state and du Lebesgue measure on the
mode coefficients.  Its polynomial moments are computed two independent
ways: exactly from the reduced density matrices through the de Finetti
expansion, and by importance-sampled Monte Carlo over a Gaussian envelope.
The capped basis leaves both routes consistent for the truncated state
itself; the per-sample dropped coherent mass only measures how faithfully
the capped state represents the uncapped model, and is enforced against
a configurable tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtri

from .cgibbs import Field, _mode_code
from .fock import FockBasis
from .lattice import ModeSet
from .qgibbs import GibbsState, ReducedDensity, pair_basis, reduced_density


class DroppedMassError(RuntimeError):
    pass


def coherent_amplitudes(u, basis: FockBasis) -> tuple[np.ndarray, float]:
    """Occupation-basis amplitudes of the coherent vector of u, plus the
    weight dropped beyond the particle cap.

    Amplitude on (n_p) is exp(-|u|^2/2) prod_p u_p^{n_p} / sqrt(n_p!);
    the truncated vector is subnormalized, with
    dropped = 1 - sum |amp|^2 the (nonnegative) tail weight.
    """
    coeffs = u.coeffs if isinstance(u, Field) else np.asarray(u, dtype=complex)
    if len(coeffs) != basis.K:
        raise ValueError("coefficient count must match the basis mode set")
    cap = basis.cap
    # tables[j][c] = coeffs[j]^c / sqrt(c!), built in log space for stability
    powers = np.arange(cap + 1)
    logfact = 0.5 * gammaln(powers + 1.0)
    tables = np.empty((basis.K, cap + 1), dtype=complex)
    for j in range(basis.K):
        if coeffs[j] == 0:
            tables[j] = 0.0
            tables[j][0] = 1.0
            continue
        log_mag = powers * math.log(abs(coeffs[j])) - logfact
        tables[j] = np.exp(log_mag + 1j * np.angle(coeffs[j]) * powers)
    amps = np.ones(basis.dim, dtype=complex)
    for j in range(basis.K):
        amps *= tables[j][basis.states[:, j]]
    norm_sq = float(np.vdot(coeffs, coeffs).real)
    amps *= math.exp(-0.5 * norm_sq)
    dropped = max(0.0, 1.0 - float(np.sum(np.abs(amps) ** 2)))
    return amps, dropped


def _log_fact_states(basis: FockBasis) -> np.ndarray:
    cached = getattr(basis, "_logfact_cache", None)
    if cached is None:
        cached = 0.5 * np.sum(gammaln(basis.states.astype(float) + 1.0), axis=1)
        basis._logfact_cache = cached
    return cached


def coherent_amplitudes_block(block: np.ndarray, basis: FockBasis) -> tuple[np.ndarray, np.ndarray]:
    """Batched coherent amplitudes: (B, dim) matrix and per-sample dropped mass.

    log amp[b, s] = sum_j n_j(s) log(alpha_bj) - (1/2) sum_j log n_j(s)!
    - |alpha_b|^2 / 2, evaluated as one complex GEMM against the occupation
    table.  Zero coefficients get log-magnitude -746, which underflows to an
    exact zero for any positive occupation.
    """
    block = np.asarray(block, dtype=complex)
    with np.errstate(divide="ignore"):
        log_alpha = np.where(block == 0.0, -746.0 + 0.0j, np.log(block + 0j))
    norm_sq = np.sum(np.abs(block) ** 2, axis=1)
    log_amp = log_alpha @ basis.states.astype(float).T
    log_amp -= _log_fact_states(basis)[None, :]
    log_amp -= 0.5 * norm_sq[:, None]
    amps = np.exp(log_amp)
    dropped = np.maximum(0.0, 1.0 - np.sum(np.abs(amps) ** 2, axis=1))
    return amps, dropped


def hs_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius (Hilbert-Schmidt) distance."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------------------
# exact lower-symbol moments through the de Finetti expansion
# ---------------------------------------------------------------------------

def definetti_moment(state: GibbsState, phi: np.ndarray, n: int,
                     gammas: tuple | None = None) -> float:
    """Exact int |<phi, u>|^(2n) dmu from the reduced density matrices.

    n = 1: lam (<phi, G1 phi> + |phi|^2);
    n = 2: 2 lam^2 [<phi x phi, G2 phi x phi> + 2 |phi|^2 <phi, G1 phi>
           + |phi|^4].
    """
    if n not in (1, 2):
        raise ValueError("only n in {1, 2}")
    lam = state.lam
    if lam is None:
        raise ValueError("state carries no lambda scale")
    phi = np.asarray(phi, dtype=complex)
    if gammas is None:
        g1 = reduced_density(state, 1)
        g2 = reduced_density(state, 2) if n == 2 else None
    else:
        g1, g2 = gammas
    phi_g1_phi = float(np.real(phi.conj() @ g1.matrix @ phi))
    nphi2 = float(np.vdot(phi, phi).real)
    if n == 1:
        return lam * (phi_g1_phi + nphi2)
    pairs = g2.pair_index
    y = np.array(
        [
            (1.0 if p == q else math.sqrt(2.0)) * phi[p] * phi[q]
            for p, q in pairs
        ]
    )
    quad = float(np.real(y.conj() @ g2.matrix @ y))
    return 2.0 * lam * lam * (quad + 2.0 * nphi2 * phi_g1_phi + nphi2**2)


def definetti_norm_moments(state: GibbsState) -> tuple[float, float]:
    """Exact int ||u||^2 dmu and int ||u||^4 dmu from number moments.

    m2 = lam (<N> + K);
    m4 = lam^2 (<N(N-1)> + 2 (K+1) <N> + K (K+1)).
    """
    lam = state.lam
    if lam is None:
        raise ValueError("state carries no lambda scale")
    K = state.basis.K
    n1, n2 = state.number_moments()
    m2 = lam * (n1 + K)
    m4 = lam * lam * (n2 + 2.0 * (K + 1) * n1 + K * (K + 1))
    return m2, m4


def definetti_norm_moments_via_reduced(state: GibbsState) -> tuple[float, float]:
    """Same moments assembled from Tr Gamma^(1), Tr Gamma^(2) (duality check)."""
    lam = state.lam
    K = state.basis.K
    t1 = reduced_density(state, 1).trace
    t2 = reduced_density(state, 2).trace
    m2 = lam * (t1 + K)
    m4 = lam * lam * (2.0 * t2 + 2.0 * (K + 1) * t1 + K * (K + 1))
    return m2, m4


# ---------------------------------------------------------------------------
# Husimi Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class HusimiSampler:
    """Importance-sampled lower symbol of a Gibbs state at scale lam.

    The envelope is a complex Gaussian with per-mode variance
    max(lam (nbar_p + 1), lam), which dominates the Husimi tails; weights
    stay bounded because every coherent overlap carries exp(-|u|^2/lam).
    Coherent vectors whose weight beyond the cap exceeds dropped_mass_tol
    raise DroppedMassError.
    """

    state: GibbsState
    lam: float
    dropped_mass_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        basis = self.state.basis
        g1_diag = np.zeros(basis.K)
        probs = self.state.state_probabilities()
        for j in range(basis.K):
            g1_diag[j] = float(np.dot(probs, basis.states[:, j]))
        self.envelope_var = np.maximum(self.lam * (g1_diag + 1.0), self.lam)
        # per-sector eigenvector stacks scaled by sqrt(weights)
        self._stacks = []
        if self.state.mode == "diag":
            for (lo, hi) in basis.sector_slices:
                w = self.state.weights_diag[lo:hi]
                self._stacks.append(((lo, hi), np.diag(np.sqrt(w))))
        else:
            for (lo, hi), V, w in zip(
                self.state._slices(), self.state.eigvecs, self.state.sector_weights
            ):
                keep = w > 1e-300
                self._stacks.append(((lo, hi), V[:, keep] * np.sqrt(w[keep])[None, :]))

    def husimi_density(self, u) -> float:
        """(lam pi)^-K <W(u/sqrt lam), Gamma W(u/sqrt lam)>; nonnegative."""
        coeffs = u.coeffs if isinstance(u, Field) else np.asarray(u, dtype=complex)
        basis = self.state.basis
        amps, dropped = coherent_amplitudes(coeffs / math.sqrt(self.lam), basis)
        if dropped > self.dropped_mass_tol:
            raise DroppedMassError(
                f"coherent weight {dropped:.3e} beyond the cap exceeds "
                f"{self.dropped_mass_tol:g}; increase the cap or reduce |u|^2/lam"
            )
        total = 0.0
        for (lo, hi), vw in self._stacks:
            c = vw.conj().T @ amps[lo:hi]
            total += float(np.vdot(c, c).real)
        return total / (self.lam * math.pi) ** basis.K

    def _envelope_block(self, i0: int, i1: int) -> np.ndarray:
        basis = self.state.basis
        out = np.empty((i1 - i0, basis.K), dtype=complex)
        scale = np.sqrt(self.envelope_var / 2.0)
        for j, p in enumerate(basis.modes.modes):
            key = np.array([self.seed, _mode_code(p) + (1 << 33)], dtype=np.uint64)
            bg = np.random.Philox(key=key)
            if i0:
                bg.advance(i0 // 2)
            uu = np.random.Generator(bg).random(2 * (i1 - i0))
            uu = np.maximum(uu, 1e-300)
            out[:, j] = (ndtri(uu[0::2]) + 1j * ndtri(uu[1::2])) * scale[j]
        return out

    def _log_envelope_pdf(self, block: np.ndarray) -> np.ndarray:
        v = self.envelope_var
        return -np.sum(np.abs(block) ** 2 / v[None, :], axis=1) - float(
            np.sum(np.log(math.pi * v))
        )

    def mc_moments(self, functionals: dict, samples: int, batch: int = 256) -> dict:
        """Raw importance-sampled estimates of int f dmu for named f(u-block).

        functionals maps name -> callable taking a (B, K) coefficient block
        and returning a (B,) array.  The estimate of the constant 1 checks
        the normalization int husimi du = 1.  Returns per-name
        (mean, stderr) plus the max dropped coherent mass encountered.
        """
        basis = self.state.basis
        names = list(functionals)
        sums = {m: 0.0 for m in names}
        sums2 = {m: 0.0 for m in names}
        max_dropped = 0.0
        i = 0
        while i < samples:
            j = min(i + batch, samples)
            if (j - i) % 2 and j < samples:
                j += 1
            block = self._envelope_block(i, j)
            b = j - i
            amp_mat, dropped = coherent_amplitudes_block(
                block / math.sqrt(self.lam), basis
            )
            worst = float(np.max(dropped))
            max_dropped = max(max_dropped, worst)
            if worst > self.dropped_mass_tol:
                r = int(np.argmax(dropped))
                raise DroppedMassError(
                    f"sample {i + r}: dropped mass {worst:.3e} exceeds "
                    f"{self.dropped_mass_tol:g}"
                )
            dens = np.zeros(b)
            for (lo, hi), vw in self._stacks:
                c = amp_mat[:, lo:hi] @ vw
                dens += np.sum(np.abs(c) ** 2, axis=1)
            dens /= (self.lam * math.pi) ** basis.K
            logw = np.log(np.maximum(dens, 1e-300)) - self._log_envelope_pdf(block)
            w = np.exp(logw)
            for name in names:
                fv = functionals[name](block) * w
                sums[name] += float(np.sum(fv))
                sums2[name] += float(np.sum(fv * fv))
            i = j
        out = {}
        for name in names:
            mean = sums[name] / samples
            var = max(sums2[name] / samples - mean * mean, 0.0)
            out[name] = (mean, math.sqrt(var / samples))
        out["max_dropped_mass"] = max_dropped
        return out


def husimi_moment_functionals(phi: np.ndarray | None = None) -> dict:
    """Standard functional set: normalization, |<phi,u>|^2, |<phi,u>|^4,
    ||u||^2, ||u||^4."""
    fns = {
        "norm": lambda b: np.ones(len(b)),
        "u2": lambda b: np.sum(np.abs(b) ** 2, axis=1),
        "u4": lambda b: np.sum(np.abs(b) ** 2, axis=1) ** 2,
    }
    if phi is not None:
        phi = np.asarray(phi, dtype=complex)
        fns["phi2"] = lambda b: np.abs(b @ phi.conj()) ** 2
        fns["phi4"] = lambda b: np.abs(b @ phi.conj()) ** 4
    return fns


# ---------------------------------------------------------------------------
# rescaled density-matrix comparison and the convergence report
# ---------------------------------------------------------------------------

def rescaled_reduced(state: GibbsState) -> tuple[np.ndarray, np.ndarray]:
    """(1! lam Gamma^(1), 2! lam^2 Gamma^(2)) as plain matrices."""
    lam = state.lam
    g1 = reduced_density(state, 1)
    g2 = reduced_density(state, 2)
    return lam * g1.matrix, 2.0 * lam * lam * g2.matrix


def convergence_report(
    modes: ModeSet,
    cap: int,
    params,
    lambda_list,
    mc_samples: int,
    seed: int,
    inner_cutoff_sq: float = 1.5,
    dim_limit: int = 2_000_000,
    vstar: float | None = None,
) -> list[dict]:
    """Quantum-vs-classical sweep: free energies, HS distances, diagnostics.

    One row per lambda: F, -log z_P with MC error, their gap, the k = 1, 2
    Hilbert-Schmidt distances between rescaled quantum reduced densities
    and classical correlations (with aggregated MC errors), hf0, and the
    centered number fluctuation.  The relative coercive cap defect is
    reported per row when vstar is supplied; it certifies the cap only
    where it is < 1e-8.
    """
    from .cgibbs import mc_correlation, mc_partition
    from .fock import build_basis
    from .freegas import Region, cap_defect, renorm_constants
    from .qgibbs import fluctuation, free_energy_diff, hf_diagnostics

    basis = build_basis(modes, cap, dim_limit=dim_limit)
    z_est = mc_partition(modes, params, mc_samples, seed)
    c1 = mc_correlation(modes, params, 1, mc_samples, seed)
    c2 = mc_correlation(modes, params, 2, mc_samples, seed)
    minus_log_z = -math.log(z_est.mean)
    log_z_se = z_est.stderr / z_est.mean
    hs1_se = float(np.sqrt(np.sum(c1.stderr**2)))
    hs2_se = float(np.sqrt(np.sum(c2.stderr**2)))

    rows = []
    for lam in lambda_list:
        n0p = renorm_constants(modes, lam)[0]
        res = free_energy_diff(basis, params, lam, n0p=n0p)
        state = res["state"]
        g1s, g2s = rescaled_reduced(state)
        hs1 = hs_distance(g1s, c1.mean)
        hs2 = hs_distance(g2s, c2.mean)
        g2 = reduced_density(state, 2)
        diag = hf_diagnostics(state, lam, params, inner_cutoff_sq, gamma2=g2)
        fluct = fluctuation(state, lam, Region.all(), n0p)
        row = {
            "lambda": lam,
            "cap": cap,
            "F": res["F"],
            "minus_log_z": minus_log_z,
            "z_stderr": z_est.stderr,
            "log_z_stderr": log_z_se,
            "gap": abs(res["F"] - minus_log_z),
            "hs_k1": hs1,
            "hs_k1_stderr": hs1_se,
            "hs_k2": hs2,
            "hs_k2_stderr": hs2_se,
            "hf0": diag["hf0"],
            "hf_neq0": diag["hf_neq0"],
            "fluct": fluct,
            "log_z_re": res["log_z_re"],
            "log_z_free": res["log_z_free"],
        }
        if vstar is not None:
            from .freegas import TWO_PI_SQ as _t

            defect = cap_defect(modes, cap, lam, params, vstar)
            cc = lam * lam * n0p * n0p / (2.0 * _t)
            row["cap_defect_rel"] = defect / math.exp(-cc)
            row["cap_certified"] = row["cap_defect_rel"] < 1e-8
        rows.append(row)
    return rows
