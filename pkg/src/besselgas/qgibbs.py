"""Gibbs states of block Hamiltonians and their observables.

Per-sector eigendecomposition with a global energy shift, partition
functions, expectations, reduced one- and two-body density matrices on the
symmetrized mode basis, free-energy differences against the capped free
reference, and the fluctuation / high-frequency diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .fock import BlockOperator, FockBasis, build_kinetic, build_number, build_quartic
from .freegas import (
    Region,
    TWO_PI_SQ,
    capped_free_partition,
    occupation,
    renorm_constants,
)
from .lattice import KernelParams, Mode, ModeSet


class EigensolverError(RuntimeError):
    pass


@dataclass
class GibbsState:
    """Normalized Gibbs state exp(-H)/Z of a block Hamiltonian.

    mode is 'diag' (H diagonal: weights per basis state, no rotation),
    'nm' (per (n,m)-sector eigenpairs) or 'n' (momentum-merged blocks).
    weights sum to 1; log_Z is consistent with eigenvalues and shift.
    """

    basis: FockBasis
    mode: str
    energy_shift: float
    log_Z: float
    lam: float | None = None
    weights_diag: np.ndarray | None = None
    eigvals: list[np.ndarray] | None = None
    eigvecs: list[np.ndarray] | None = None
    sector_weights: list[np.ndarray] | None = None
    _occ_cache: dict = field(default_factory=dict, repr=False)

    def _slices(self):
        return (
            self.basis.sector_slices if self.mode == "nm" else self.basis.coarse_slices
        )

    def state_probabilities(self) -> np.ndarray:
        """Diagonal of the state in the occupation basis."""
        if self.mode == "diag":
            return self.weights_diag
        out = np.zeros(self.basis.dim)
        for (lo, hi), V, w in zip(self._slices(), self.eigvecs, self.sector_weights):
            out[lo:hi] = (np.abs(V) ** 2) @ w
        return out

    def diag_expectation(self, diag: np.ndarray) -> float:
        """<A> for an operator diagonal in the occupation basis."""
        return float(np.dot(self.state_probabilities(), diag))

    def number_moments(self) -> tuple[float, float]:
        """(<N>, <N(N-1)>)."""
        n = self.basis.n_tot.astype(float)
        p = self.state_probabilities()
        return float(np.dot(p, n)), float(np.dot(p, n * (n - 1.0)))


def gibbs(h_op: BlockOperator, lam: float | None = None) -> GibbsState:
    """Eigendecompose per sector and normalize Boltzmann weights.

    The global minimum eigenvalue is subtracted before exponentiation, so
    the construction is overflow-safe uniformly in the temperature.
    """
    basis = h_op.basis
    if h_op.mshift != (0, 0):
        raise ValueError("Hamiltonian must be sector-conserving")

    if h_op.is_diagonal:
        e = h_op.diag
        shift = float(np.min(e))
        w = np.exp(-(e - shift))
        total = float(np.sum(w))
        return GibbsState(
            basis=basis,
            mode="diag",
            energy_shift=shift,
            log_Z=math.log(total) - shift,
            lam=lam,
            weights_diag=w / total,
        )

    mode = "n" if h_op.coarse else "nm"
    slices = basis.coarse_slices if h_op.coarse else basis.sector_slices
    keys = basis.coarse_keys if h_op.coarse else basis.sector_keys
    evals, evecs = [], []
    for sec, (lo, hi) in enumerate(slices):
        blk = h_op.coarse_block(sec) if h_op.coarse else h_op.block(sec)
        if np.iscomplexobj(blk) and np.max(np.abs(blk.imag)) < 1e-14:
            blk = blk.real
        try:
            e, v = np.linalg.eigh(blk)
        except np.linalg.LinAlgError as exc:
            raise EigensolverError(f"eigensolver failed in sector {keys[sec]}") from exc
        evals.append(e)
        evecs.append(v)
    shift = min(float(e[0]) for e in evals)
    logs = [logsumexp(-(e - shift)) for e in evals]
    log_total = float(logsumexp(np.array(logs)))
    sec_w = [np.exp(-(e - shift) - log_total) for e in evals]
    return GibbsState(
        basis=basis,
        mode=mode,
        energy_shift=shift,
        log_Z=log_total - shift,
        lam=lam,
        eigvals=evals,
        eigvecs=evecs,
        sector_weights=sec_w,
    )


def expectation(state: GibbsState, op: BlockOperator) -> complex:
    """Tr(A Gamma) in the eigenbasis of the state."""
    if op.basis is not state.basis:
        raise ValueError("operator and state live on different bases")
    if op.mshift != (0, 0):
        return 0.0 + 0.0j  # momentum-shifting observables are traceless here
    if op.is_diagonal:
        return complex(state.diag_expectation(op.diag))
    if state.mode == "diag":
        p = state.weights_diag
        total = 0.0 + 0.0j
        slices = state.basis.coarse_slices if op.coarse else state.basis.sector_slices
        for sec, (lo, hi) in enumerate(slices):
            blk = op.coarse_block(sec) if op.coarse else op.block(sec)
            total += complex(np.dot(p[lo:hi], np.diag(blk)))
        return total
    if op.coarse and state.mode == "nm":
        raise ValueError("coarse operator against a momentum-resolved state")
    total = 0.0 + 0.0j
    for sec, (lo, hi) in enumerate(state._slices()):
        if state.mode == "nm" and not op.coarse:
            blk = op.block(sec)
        elif state.mode == "n":
            blk = op.coarse_block(sec)
        V = state.eigvecs[sec]
        w = state.sector_weights[sec]
        keep = w > 1e-18
        if not np.any(keep):
            continue
        Vk = V[:, keep]
        total += complex(np.einsum("ij,ij,j->", Vk.conj(), blk @ Vk, w[keep]))
    return total


# ---------------------------------------------------------------------------
# reduced density matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedDensity:
    order: int
    matrix: np.ndarray
    trace: float
    pair_index: list | None = None  # mode-index pairs for order 2


def pair_basis(K: int) -> list[tuple[int, int]]:
    """Ordered index pairs (i <= j) of the symmetrized two-mode basis."""
    return [(i, j) for i in range(K) for j in range(i, K)]


def _ann_maps(basis: FockBasis):
    """Per mode: (tgt, amp) arrays over all states; tgt = -1 where n_p = 0.

    tgt[i] is the global index of the state reached by one annihilation in
    that mode, amp[i] the sqrt(n_p) ladder factor.  Cached on the basis.
    """
    cached = getattr(basis, "_ann_maps_cache", None)
    if cached is not None:
        return cached
    span = int(basis.radix[-1]) * (basis.cap + 1)
    maps = []
    for ip in range(basis.K):
        p = basis.modes.modes[ip]
        n1 = basis.states[:, ip].astype(float)
        tgt = np.full(basis.dim, -1, dtype=np.int64)
        valid = n1 >= 1.0
        src = np.flatnonzero(valid)
        tgt_rank = np.full(len(basis.sector_keys), -1, dtype=np.int64)
        for sec, (n, m1, m2) in enumerate(basis.sector_keys):
            key = (n - 1, m1 - p[0], m2 - p[1])
            if key in basis.sector_index:
                tgt_rank[sec] = basis.sector_index[key]
        ranks = tgt_rank[basis._sec_of_state[src]]
        tgt_skey = ranks * span + basis.codes[src] - basis.radix[ip]
        tgt[src] = np.searchsorted(basis.skey, tgt_skey)
        maps.append((tgt, np.sqrt(np.maximum(n1, 0.0))))
    basis._ann_maps_cache = maps
    return maps


def _slice_lookup(slices):
    starts = np.array([lo for lo, _ in slices])
    stops = np.array([hi for _, hi in slices])

    def find(idx: int):
        j = int(np.searchsorted(starts, idx, side="right")) - 1
        return int(starts[j]), int(stops[j])

    return find


def _apply_annihilations(basis: FockBasis, mode_ids, vecs_by_slice, slices):
    """Apply a product of annihilations to per-slice vector stacks.

    Returns, per source slice, None or (target slice start, stack over the
    full target slice).  Each monomial maps a slice into a single target
    slice, so stacks from different operators align whenever their target
    slices coincide (and are orthogonal otherwise).
    """
    maps = _ann_maps(basis)
    find = _slice_lookup(slices)
    out = []
    for (lo, hi), V in zip(slices, vecs_by_slice):
        if V is None:
            out.append(None)
            continue
        ids = np.arange(lo, hi)
        amp = np.ones(hi - lo)
        ok = np.ones(hi - lo, dtype=bool)
        for ip in mode_ids:
            tgt, av = maps[ip]
            a = av[ids]
            t = tgt[ids]
            ok &= t >= 0
            ids = np.where(ok, t, 0)
            amp = amp * np.where(ok, a, 0.0)
        if not np.any(ok):
            out.append(None)
            continue
        tlo, thi = find(int(ids[np.argmax(ok)]))
        res = np.zeros((thi - tlo, V.shape[1]), dtype=V.dtype)
        res[ids[ok] - tlo] = amp[ok, None] * V[ok]
        out.append((tlo, res))
    return out


def _state_vec_stacks(state: GibbsState):
    """Eigenvector stacks and weights per slice (identity for diag states)."""
    basis = state.basis
    if state.mode == "diag":
        slices = basis.sector_slices
        vecs = [np.eye(hi - lo) for lo, hi in slices]
        ws = [state.weights_diag[lo:hi] for lo, hi in slices]
        return slices, vecs, ws
    return state._slices(), state.eigvecs, state.sector_weights


def density_blocks(state: GibbsState) -> np.ndarray:
    """Sector-diagonal density matrix of an 'nm' state in flat-block layout.

    Entry Gamma[i, j] for i, j in sector sec sits at
    block_offsets[sec] + local(i) * d + local(j), matching the operator
    assembler's position arithmetic.
    """
    basis = state.basis
    if state.mode != "nm":
        raise ValueError("density blocks require a momentum-resolved state")
    flat = np.zeros(basis.total_block_size)
    for sec, (lo, hi) in enumerate(basis.sector_slices):
        d = hi - lo
        V = state.eigvecs[sec]
        w = state.sector_weights[sec]
        rho = (V * w[None, :]) @ V.conj().T
        off = basis.block_offsets[sec]
        flat[off : off + d * d] = rho.real.ravel()
    return flat


def monomial_expectation(basis: FockBasis, rho_flat: np.ndarray,
                         ip: int, iq: int, ipk: int, iqk: int) -> float:
    """<a*_modes[ipk] a*_modes[iqk] a_modes[iq] a_modes[ip]> against flat
    density blocks; zero unless the monomial conserves (n, m)."""
    st = basis.states
    n1 = st[:, ip].astype(float)
    n2 = st[:, iq].astype(float) - (1.0 if iq == ip else 0.0)
    n3 = st[:, iqk].astype(float) - (1.0 if iqk == ip else 0.0) - (
        1.0 if iqk == iq else 0.0
    ) + 1.0
    n4 = st[:, ipk].astype(float) - (1.0 if ipk == ip else 0.0) - (
        1.0 if ipk == iq else 0.0
    ) + (1.0 if ipk == iqk else 0.0) + 1.0
    valid = (n1 >= 1.0) & (n2 >= 1.0)
    if not np.any(valid):
        return 0.0
    src = np.flatnonzero(valid)
    dcode = int(basis.radix[ipk] + basis.radix[iqk] - basis.radix[ip] - basis.radix[iq])
    # momentum conservation: the target must stay in the source sector
    p, q = basis.modes.parr[ip], basis.modes.parr[iq]
    pk, qk = basis.modes.parr[ipk], basis.modes.parr[iqk]
    if tuple(pk + qk) != tuple(p + q):
        return 0.0
    amp = np.sqrt(n1[valid] * n2[valid] * n3[valid] * n4[valid])
    tgt = np.searchsorted(basis.skey, basis.skey[src] + dcode)
    lsrc = src - basis._sec_start[src]
    ltgt = tgt - basis._sec_start[src]
    pos = basis._sec_offset[src] + lsrc * basis._sec_dim[src] + ltgt
    return float(np.dot(amp, rho_flat[pos]))


def _reduced_density_nm_fast(state: GibbsState, k: int) -> ReducedDensity:
    """Monomial-gather route for momentum-resolved states (any basis size)."""
    basis = state.basis
    K = basis.K
    marr = basis.modes.parr
    if k == 1:
        # momentum conservation leaves only the diagonal <n_p>
        probs = state.state_probabilities()
        diag = np.array(
            [float(np.dot(probs, basis.states[:, j])) for j in range(K)]
        )
        mat = np.diag(diag).astype(complex)
        return ReducedDensity(order=1, matrix=mat, trace=float(diag.sum()))
    rho = density_blocks(state)
    pairs = pair_basis(K)
    P = len(pairs)
    out = np.zeros((P, P), dtype=complex)
    for a, (p, q) in enumerate(pairs):
        ga = 1.0 if p == q else math.sqrt(2.0)
        for b in range(a, P):
            r, s = pairs[b]
            if tuple(marr[p] + marr[q]) != tuple(marr[r] + marr[s]):
                continue
            gb = 1.0 if r == s else math.sqrt(2.0)
            val = monomial_expectation(basis, rho, p, q, r, s)
            out[a, b] = 0.5 * ga * gb * val
            out[b, a] = np.conj(out[a, b])
    return ReducedDensity(
        order=2, matrix=out, trace=float(np.real(np.trace(out))), pair_index=pairs
    )


def reduced_density(state: GibbsState, k: int) -> ReducedDensity:
    """Reduced k-body density matrix over the mode basis, k in {1, 2}.

    Entries follow the duality Tr(A_k Gamma^(k)) = Tr(lift(A_k) Gamma):
    Gamma^(1)(p,q) = <a*_q a_p>, and for k = 2, on the orthonormal
    symmetrized pair basis,
    Gamma^(2)[(pq),(rs)] = g_pq g_rs <a*_r a*_s a_q a_p> / 2 with
    g = sqrt(2) for distinct pairs and 1 on the diagonal.
    Trace identity: Tr Gamma^(k) = <binom(N, k)>.
    """
    if k not in (1, 2):
        raise ValueError("only k in {1, 2} is supported")
    basis = state.basis
    K = basis.K
    if state.mode == "nm":
        return _reduced_density_nm_fast(state, k)
    slices, vecs, ws = _state_vec_stacks(state)
    sqw = [np.sqrt(w) for w in ws]
    weighted = [V * s[None, :] for V, s in zip(vecs, sqw)]

    if k == 1:
        mats = [_apply_annihilations(basis, [ip], weighted, slices) for ip in range(K)]
        out = np.zeros((K, K), dtype=complex)
        for p in range(K):
            for q in range(p, K):
                acc = 0.0 + 0.0j
                for Ap, Aq in zip(mats[p], mats[q]):
                    if Ap is None or Aq is None or Ap[0] != Aq[0]:
                        continue  # distinct target sectors are orthogonal
                    acc += np.vdot(Aq[1], Ap[1])
                out[p, q] = acc
                out[q, p] = np.conj(acc)
        tr = float(np.real(np.trace(out)))
        return ReducedDensity(order=1, matrix=out, trace=tr)

    pairs = pair_basis(K)
    P = len(pairs)
    mats = {}
    for pq in pairs:
        res = _apply_annihilations(basis, list(pq), weighted, slices)
        scale = (1.0 if pq[0] == pq[1] else math.sqrt(2.0)) / math.sqrt(2.0)
        mats[pq] = [None if r is None else (r[0], scale * r[1]) for r in res]
    out = np.zeros((P, P), dtype=complex)
    for a in range(P):
        for b in range(a, P):
            acc = 0.0 + 0.0j
            for Ma, Mb in zip(mats[pairs[a]], mats[pairs[b]]):
                if Ma is None or Mb is None or Ma[0] != Mb[0]:
                    continue
                acc += np.vdot(Mb[1], Ma[1])
            out[a, b] = acc
            out[b, a] = np.conj(acc)
    tr = float(np.real(np.trace(out)))
    return ReducedDensity(order=2, matrix=out, trace=tr, pair_index=pairs)


# ---------------------------------------------------------------------------
# two-body kernels on the symmetrized pair basis
# ---------------------------------------------------------------------------

def pair_kernel_sym(modes: ModeSet, params: KernelParams,
                    restrict_cutoff_sq: float | None = None) -> np.ndarray:
    """Matrix of the k != 0 two-body kernel on the symmetrized pair basis.

    V = sum_{k!=0} vhat(k) M_k (x) M_-k with matrix elements
    <p q| V |r s> = (2pi)^-2 vhat(p-r) [p != r] delta_{p+q, r+s}.
    With restrict_cutoff_sq, all four modes are required to lie below it
    (the inner compression P^(x)2 V P^(x)2).
    """
    K = len(modes)
    pairs = pair_basis(K)
    marr = modes.parr

    def allowed(i):
        if restrict_cutoff_sq is None:
            return True
        return modes.h[i] <= restrict_cutoff_sq

    def velem(pi, qi, ri, si):
        if not (allowed(pi) and allowed(qi) and allowed(ri) and allowed(si)):
            return 0.0
        if pi == ri:
            return 0.0
        if tuple(marr[pi] + marr[qi]) != tuple(marr[ri] + marr[si]):
            return 0.0
        k = tuple(marr[pi] - marr[ri])
        return float((1.0 + k[0] ** 2 + k[1] ** 2) ** (-params.beta / 2)) / TWO_PI_SQ

    out = np.zeros((len(pairs), len(pairs)))
    for a, (p, q) in enumerate(pairs):
        na = math.sqrt(2.0 if p != q else 4.0)
        for b, (r, s) in enumerate(pairs):
            nb = math.sqrt(2.0 if r != s else 4.0)
            tot = (
                velem(p, q, r, s)
                + velem(p, q, s, r)
                + velem(q, p, r, s)
                + velem(q, p, s, r)
            )
            out[a, b] = tot / (na * nb)
    return out


# ---------------------------------------------------------------------------
# free-energy difference and diagnostics
# ---------------------------------------------------------------------------

class CapDefectError(RuntimeError):
    pass


def free_energy_diff(
    basis: FockBasis,
    params: KernelParams,
    lam: float,
    n0p: float | None = None,
    defect_rel: float | None = None,
    defect_tol: float = 1e-8,
) -> dict:
    """F = -(log Z_re - log Z_free) on the capped truncated space.

    The free reference is the capped free partition function, cross-checked
    against the Gibbs construction of the free Hamiltonian to 1e-10.
    When defect_rel (a precomputed relative cap defect) is given it is
    enforced against defect_tol; pass None to skip the gate and record the
    defect elsewhere.
    """
    from .fock import build_full_hamiltonian

    if defect_rel is not None and defect_rel > defect_tol:
        raise CapDefectError(
            f"relative cap defect {defect_rel:.3e} exceeds {defect_tol:g}; "
            "increase the particle cap"
        )
    if n0p is None:
        n0p = renorm_constants(basis.modes, lam)[0]
    h_full = build_full_hamiltonian(basis, params, lam, n0p)
    st = gibbs(h_full, lam=lam)
    log_z_re = st.log_Z
    log_z_free = math.log(capped_free_partition(basis.modes, basis.cap, lam))
    free_state = gibbs(build_kinetic(basis) * lam, lam=lam)
    if abs(free_state.log_Z - log_z_free) > 1e-10 * max(1.0, abs(log_z_free)):
        raise RuntimeError("capped free partition cross-check failed")
    return {
        "F": -(log_z_re - log_z_free),
        "log_z_re": log_z_re,
        "log_z_free": log_z_free,
        "state": st,
    }


def fluctuation(state: GibbsState, lam: float, region: Region, center: float) -> float:
    """lam^2 <(N_region - center)^2>."""
    n_reg = build_number(state.basis, region).diag
    return lam * lam * state.diag_expectation((n_reg - center) ** 2)


def hf_diagnostics(
    state: GibbsState,
    lam: float,
    params: KernelParams,
    inner_cutoff_sq: float,
    centers: tuple[float, float] | None = None,
    gamma2: ReducedDensity | None = None,
) -> dict:
    """Zero-mode and nonzero-mode high-frequency remainders at an inner cutoff.

    hf0 = lam^2/(2(2pi)^2) <2 (N_P - cP)(N_Q - cQ) + (N_Q - cQ)^2> with P/Q
    the basis modes below/above inner_cutoff_sq and centers defaulting to
    the untruncated free-gas counts over those mode regions.
    hf_neq0 = lam^2 Tr[(V_neq0 - V_neq0,P) Gamma^(2)], normalized so that
    the exact localization identity holds:
    <W_re> = <W_re,P>_localized + hf0 + hf_neq0 when the centers are the
    region-restricted free counts used in both interactions.
    """
    basis = state.basis
    if not (1.0 <= inner_cutoff_sq <= basis.modes.cutoff_sq):
        raise ValueError("inner cutoff must satisfy 1 <= inner <= basis cutoff")
    if centers is None:
        below = [p for p, h in zip(basis.modes.modes, basis.modes.h) if h <= inner_cutoff_sq]
        above = [p for p, h in zip(basis.modes.modes, basis.modes.h) if h > inner_cutoff_sq]
        centers = (
            sum(occupation(lam, p) for p in below),
            sum(occupation(lam, p) for p in above),
        )
    c_p, c_q = centers
    n_p = build_number(basis, Region.below(inner_cutoff_sq)).diag
    n_q = build_number(basis, Region.above(inner_cutoff_sq)).diag
    pref = lam * lam / (2.0 * TWO_PI_SQ)
    cross = 2.0 * pref * state.diag_expectation((n_p - c_p) * (n_q - c_q))
    quad = pref * state.diag_expectation((n_q - c_q) ** 2)

    if gamma2 is None:
        gamma2 = reduced_density(state, 2)
    v_full = pair_kernel_sym(basis.modes, params)
    v_inner = pair_kernel_sym(basis.modes, params, restrict_cutoff_sq=inner_cutoff_sq)
    hf_neq0 = lam * lam * float(
        np.real(np.trace((v_full - v_inner) @ gamma2.matrix))
    )
    return {"hf0": cross + quad, "cross": cross, "q_fluct": quad, "hf_neq0": hf_neq0}


def product_trial_state(
    basis: FockBasis,
    params: KernelParams,
    lam: float,
    inner_cutoff_sq: float,
    cap_inner: int,
) -> GibbsState:
    """Diagonal product state: centered-interacting below the inner cutoff,
    free above, on the box n_inner <= cap_inner, n_outer <= cap - cap_inner.

    The box truncation keeps the two factors statistically independent, so
    the mixed number-fluctuation term vanishes exactly when the outer center
    is the state's own outer mean.
    """
    modes = basis.modes
    inner_mask = modes.h <= inner_cutoff_sq
    n_in = basis.states[:, inner_mask].astype(float).sum(axis=1)
    n_out = basis.states[:, ~inner_mask].astype(float).sum(axis=1)
    cap_out = basis.cap - cap_inner
    if cap_out < 0:
        raise ValueError("cap_inner exceeds the total cap")
    n0_in = sum(
        occupation(lam, p) for p, keep in zip(modes.modes, inner_mask) if keep
    )
    e_kin = basis.states.astype(float) @ (modes.h * lam)
    energy = e_kin + lam * lam / (2.0 * TWO_PI_SQ) * (n_in - n0_in) ** 2
    outside = (n_in > cap_inner) | (n_out > cap_out)
    energy = np.where(outside, np.inf, energy)
    w = np.exp(-(energy - np.min(energy)))
    total = float(np.sum(w))
    return GibbsState(
        basis=basis,
        mode="diag",
        energy_shift=float(np.min(energy)),
        log_Z=math.log(total) - float(np.min(energy)),
        lam=lam,
        weights_diag=w / total,
    )


# ---------------------------------------------------------------------------
# Wick-formula check for perturbed quasi-free states
# ---------------------------------------------------------------------------

def wick_check(
    basis: FockBasis,
    params: KernelParams,
    lam: float,
    t: float,
    f: np.ndarray,
) -> dict:
    """Both sides of the quasi-free pairing formula for the k != 0 quartic.

    direct: <W_neq0> in the capped Gibbs state of lam * dGamma(h - t f / 2).
    wick:   lam^2/2 sum_{k!=0} vhat(k) (|Tr(gamma e_k)|^2
            + Tr(gamma e_k gamma e_-k)) from the exact (uncapped) one-body
            density matrix gamma = (e^{lam(h - tf/2)} - 1)^{-1} on the set.
    The two agree up to the capped state's lost mass, returned as
    lost_mass_rel.
    """
    from .fock import build_dgamma

    if abs(t) > 1.0:
        raise ValueError("|t| must be <= 1")
    modes = basis.modes
    K = len(modes)
    f = np.asarray(f, dtype=complex)
    h_t = np.diag(modes.h).astype(complex) - 0.5 * t * f

    h_op = build_dgamma(basis, h_t)
    state = gibbs(h_op * lam, lam=lam)
    w_neq0 = build_quartic(basis, params, lam, nonzero_only=True)
    direct = float(np.real(expectation(state, w_neq0)))

    evals, U = np.linalg.eigh(h_t)
    if np.min(evals.real) <= 0:
        raise ValueError("perturbed one-body operator must stay positive")
    gamma = (U * (1.0 / np.expm1(lam * evals.real))) @ U.conj().T

    two_pi = 2.0 * math.pi
    wick = 0.0
    for k in modes.differences(nonzero=True):
        ek = np.zeros((K, K), dtype=complex)
        for ip, ipk in modes.transfer_pairs(k):
            ek[ipk, ip] = 1.0 / two_pi
        emk = ek.conj().T
        direct_term = abs(np.trace(gamma @ ek)) ** 2
        exch = np.trace(gamma @ ek @ gamma @ emk)
        wick += kernel_coeff_times(params, k) * float(np.real(direct_term + exch))
    wick *= lam * lam / 2.0

    log_z_unc = float(np.sum(-np.log(-np.expm1(-lam * evals.real))))
    lost = 1.0 - math.exp(state.log_Z - log_z_unc)
    return {"direct": direct, "wick": wick, "lost_mass_rel": max(lost, 0.0)}


def kernel_coeff_times(params: KernelParams, k) -> float:
    return float((1.0 + k[0] ** 2 + k[1] ** 2) ** (-params.beta / 2))


# ---------------------------------------------------------------------------
# variational sanity bound
# ---------------------------------------------------------------------------

def variational_upper_bound(basis: FockBasis, params: KernelParams, lam: float,
                            n0p: float | None = None) -> dict:
    """F and its Gibbs-variational bound <W_re> under the capped free state."""
    from .fock import build_Wre

    if n0p is None:
        n0p = renorm_constants(basis.modes, lam)[0]
    res = free_energy_diff(basis, params, lam, n0p=n0p)
    free_state = gibbs(build_kinetic(basis) * lam, lam=lam)
    w_re = build_Wre(basis, params, lam, n0p)
    bound = float(np.real(expectation(free_state, w_re)))
    return {"F": res["F"], "bound": bound}
