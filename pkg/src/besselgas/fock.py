"""Truncated bosonic Fock space and its second-quantized block operators.

The basis is every occupation vector over a ModeSet with total particle
number <= cap, partitioned into sectors of fixed (total count n, total
momentum m).  All operators built here conserve (n, m) except the density
modes rho_k, which shift m by k and carry that shift explicitly.

Matrix elements use the bosonic ladder conventions a|n> = sqrt(n)|n-1>,
a*|n> = sqrt(n+1)|n+1>.  The quartic interaction keeps only monomials
a*_{p+k} a*_{q-k} a_q a_p with all four momenta inside the mode set; it
conserves total count, so the cap introduces no truncation inside a sector.
"""

from __future__ import annotations

import json
import math
from functools import lru_cache

import numpy as np

from .freegas import TWO_PI_SQ
from .lattice import KernelParams, Mode, ModeSet, dispersion, kernel_coeff

DEFAULT_DIM_LIMIT = 200_000


@lru_cache(maxsize=None)
def _compositions(k: int, cap: int) -> np.ndarray:
    """All occupation vectors of k modes with total <= cap, as (N, k) int16."""
    if k == 1:
        return np.arange(cap + 1, dtype=np.int16).reshape(-1, 1)
    parts = []
    for j in range(cap + 1):
        sub = _compositions(k - 1, cap - j)
        first = np.full((len(sub), 1), j, dtype=np.int16)
        parts.append(np.hstack([first, sub]))
    return np.vstack(parts)


class FockBasis:
    """Occupation basis over a ModeSet with a total-particle cap.

    States are stored sorted by (n, m1, m2, code) where code is the
    mixed-radix encoding of the occupation vector, so each (n, m) sector is
    a contiguous, code-sorted slice.  A coarse partition by n alone is also
    exposed for observables that do not conserve momentum.
    """

    def __init__(self, modes: ModeSet, cap: int, dim_limit: int = DEFAULT_DIM_LIMIT):
        if cap < 0:
            raise ValueError("cap must be >= 0")
        K = len(modes)
        dim = math.comb(cap + K, K)
        if dim > dim_limit:
            raise ValueError(
                f"basis too large: dim {dim} exceeds limit {dim_limit} "
                f"({K} modes, cap {cap})"
            )
        self.modes = modes
        self.cap = int(cap)
        self.dim = dim

        states = _compositions(K, cap).copy()
        radix = (cap + 1) ** np.arange(K, dtype=np.int64)
        codes = states.astype(np.int64) @ radix
        n = states.sum(axis=1).astype(np.int64)
        m = states.astype(np.int64) @ modes.parr  # (dim, 2)

        order = np.lexsort((codes, m[:, 1], m[:, 0], n))
        self.states = states[order]
        self.codes = codes[order]
        self.n_tot = n[order]
        self.m_tot = m[order]
        self.radix = radix

        comp = np.stack([self.n_tot, self.m_tot[:, 0], self.m_tot[:, 1]], axis=1)
        change = np.any(comp[1:] != comp[:-1], axis=1)
        starts = np.concatenate([[0], np.flatnonzero(change) + 1])
        stops = np.concatenate([starts[1:], [dim]])
        self.sector_keys = [tuple(map(int, comp[s])) for s in starts]
        self.sector_slices = list(zip(starts.tolist(), stops.tolist()))
        self.sector_index = {k: i for i, k in enumerate(self.sector_keys)}

        dims = stops - starts
        self.block_offsets = np.concatenate([[0], np.cumsum(dims * dims)])[:-1]
        self.total_block_size = int(np.sum(dims * dims))

        sector_of = np.repeat(np.arange(len(starts)), dims)
        self._sec_of_state = sector_of
        self._sec_start = starts[sector_of]
        self._sec_dim = dims[sector_of]
        self._sec_offset = self.block_offsets[sector_of]
        # composite sorted key: sector rank then code (codes < (cap+1)^K)
        span = int(radix[-1]) * (cap + 1)
        self.skey = sector_of.astype(np.int64) * span + self.codes

        cn_change = self.n_tot[1:] != self.n_tot[:-1]
        cstarts = np.concatenate([[0], np.flatnonzero(cn_change) + 1])
        cstops = np.concatenate([cstarts[1:], [dim]])
        self.coarse_keys = [int(self.n_tot[s]) for s in cstarts]
        self.coarse_slices = list(zip(cstarts.tolist(), cstops.tolist()))
        self.coarse_index = {k: i for i, k in enumerate(self.coarse_keys)}

    @property
    def K(self) -> int:
        return len(self.modes)

    def index_of(self, occupation: dict[Mode, int]) -> int:
        """Global index of the basis state with the given occupations."""
        vec = np.zeros(self.K, dtype=np.int64)
        for p, c in occupation.items():
            if p not in self.modes.index:
                raise KeyError(f"mode {p} not in the mode set")
            vec[self.modes.index[p]] = c
        if vec.sum() > self.cap:
            raise ValueError("total occupation exceeds cap")
        code = int(vec @ self.radix)
        n = int(vec.sum())
        m = tuple(int(x) for x in vec @ self.modes.parr)
        sec = self.sector_index[(n, m[0], m[1])]
        lo, hi = self.sector_slices[sec]
        j = int(np.searchsorted(self.codes[lo:hi], code))
        if j >= hi - lo or self.codes[lo + j] != code:
            raise KeyError("state not found")
        return lo + j

    def sector_of(self, occupation: dict[Mode, int]) -> tuple[int, int, int]:
        i = self.index_of(occupation)
        return self.sector_keys[self._sec_of_state[i]]


def build_basis(modes: ModeSet, cap: int, dim_limit: int = DEFAULT_DIM_LIMIT) -> FockBasis:
    return FockBasis(modes, cap, dim_limit)


# ---------------------------------------------------------------------------
# block operators
# ---------------------------------------------------------------------------

class BlockOperator:
    """Sector-block operator: a global diagonal, dense blocks, or both.

    mshift is the total-momentum transfer; (0,0) means sector-conserving.
    Dense conserving blocks live in one flat buffer indexed by the basis
    block offsets; shifting operators store per-source-sector matrices.
    """

    def __init__(self, basis: FockBasis, *, diag=None, flat=None, shift_blocks=None,
                 mshift: Mode = (0, 0), coarse: bool = False, coarse_blocks=None):
        self.basis = basis
        self.diag = diag
        self.flat = flat
        self.shift_blocks = shift_blocks  # dict: sector idx -> matrix to target sector
        self.mshift = tuple(mshift)
        self.coarse = coarse
        self.coarse_blocks = coarse_blocks  # dict: coarse idx -> dense matrix

    # -- constructors ------------------------------------------------------

    @staticmethod
    def from_diagonal(basis: FockBasis, diag: np.ndarray) -> "BlockOperator":
        return BlockOperator(basis, diag=np.asarray(diag, dtype=float))

    @staticmethod
    def zero_flat(basis: FockBasis, dtype=np.float64) -> "BlockOperator":
        return BlockOperator(basis, flat=np.zeros(basis.total_block_size, dtype=dtype))

    # -- structure queries ---------------------------------------------------

    @property
    def is_diagonal(self) -> bool:
        return self.flat is None and self.shift_blocks is None and not self.coarse

    def block(self, sec: int) -> np.ndarray:
        """Dense conserving block of sector sec (materializes diagonals)."""
        if self.mshift != (0, 0):
            raise ValueError("shifting operator has no conserving blocks")
        lo, hi = self.basis.sector_slices[sec]
        d = hi - lo
        if self.flat is not None:
            off = self.basis.block_offsets[sec]
            out = self.flat[off : off + d * d].reshape(d, d)
            if self.diag is not None:
                out = out.copy()
                out[np.arange(d), np.arange(d)] += self.diag[lo:hi]
            return out
        out = np.zeros((d, d))
        if self.diag is not None:
            out[np.arange(d), np.arange(d)] = self.diag[lo:hi]
        return out

    def coarse_block(self, ci: int) -> np.ndarray:
        """Dense block over the n-partition (momentum sectors merged)."""
        lo, hi = self.basis.coarse_slices[ci]
        d = hi - lo
        if self.coarse:
            out = np.array(self.coarse_blocks[ci])
            if self.diag is not None:
                out[np.arange(d), np.arange(d)] += self.diag[lo:hi]
            return out
        if self.mshift != (0, 0):
            raise ValueError("shifting operator has no coarse blocks")
        dt = self.flat.dtype if self.flat is not None else np.float64
        out = np.zeros((d, d), dtype=dt)
        for sec, (slo, shi) in enumerate(self.basis.sector_slices):
            if slo >= lo and shi <= hi:
                out[slo - lo : shi - lo, slo - lo : shi - lo] = self.block(sec)
        return out

    # -- algebra -------------------------------------------------------------

    def __mul__(self, c):
        return BlockOperator(
            self.basis,
            diag=None if self.diag is None else c * self.diag,
            flat=None if self.flat is None else c * self.flat,
            shift_blocks=None if self.shift_blocks is None
            else {k: c * v for k, v in self.shift_blocks.items()},
            mshift=self.mshift,
            coarse=self.coarse,
            coarse_blocks=None if self.coarse_blocks is None
            else {k: c * v for k, v in self.coarse_blocks.items()},
        )

    __rmul__ = __mul__

    def __add__(self, other: "BlockOperator"):
        if self.basis is not other.basis:
            raise ValueError("operands live on different bases")
        if self.mshift != other.mshift:
            raise ValueError("cannot add operators with different momentum shifts")
        if self.shift_blocks is not None or other.shift_blocks is not None:
            blocks = {}
            for src in set((self.shift_blocks or {})) | set((other.shift_blocks or {})):
                a = (self.shift_blocks or {}).get(src)
                b = (other.shift_blocks or {}).get(src)
                blocks[src] = (a if b is None else b if a is None else a + b)
            return BlockOperator(self.basis, shift_blocks=blocks, mshift=self.mshift)
        if self.coarse or other.coarse:
            a, b = (x if x.coarse else x.to_coarse() for x in (self, other))
            blocks = {k: a.coarse_blocks[k] + b.coarse_blocks[k] for k in a.coarse_blocks}
            diag = _add_opt(a.diag, b.diag)
            return BlockOperator(self.basis, diag=diag, coarse=True, coarse_blocks=blocks)
        return BlockOperator(
            self.basis,
            diag=_add_opt(self.diag, other.diag),
            flat=_add_opt(self.flat, other.flat),
        )

    def __sub__(self, other):
        return self + (other * (-1.0))

    def to_coarse(self) -> "BlockOperator":
        blocks = {ci: self.coarse_block(ci) for ci in range(len(self.basis.coarse_keys))}
        return BlockOperator(self.basis, coarse=True, coarse_blocks=blocks)

    def dagger(self) -> "BlockOperator":
        if self.shift_blocks is not None:
            out = {}
            for src, mat in self.shift_blocks.items():
                tgt = self._target_sector(src)
                out[tgt] = mat.conj().T
            return BlockOperator(
                self.basis, shift_blocks=out, mshift=(-self.mshift[0], -self.mshift[1])
            )
        if self.coarse:
            return BlockOperator(
                self.basis,
                diag=None if self.diag is None else self.diag.conj(),
                coarse=True,
                coarse_blocks={k: v.conj().T for k, v in self.coarse_blocks.items()},
            )
        flat = None
        if self.flat is not None:
            flat = np.empty_like(self.flat)
            for sec, (lo, hi) in enumerate(self.basis.sector_slices):
                d = hi - lo
                off = self.basis.block_offsets[sec]
                flat[off : off + d * d] = (
                    self.flat[off : off + d * d].reshape(d, d).conj().T.ravel()
                )
        diag = None if self.diag is None else self.diag.conj()
        return BlockOperator(self.basis, diag=diag, flat=flat)

    def _target_sector(self, src: int) -> int:
        n, m1, m2 = self.basis.sector_keys[src]
        key = (n, m1 + self.mshift[0], m2 + self.mshift[1])
        if key not in self.basis.sector_index:
            raise KeyError(f"target sector {key} absent")
        return self.basis.sector_index[key]

    def __matmul__(self, other: "BlockOperator"):
        if self.basis is not other.basis:
            raise ValueError("operands live on different bases")
        basis = self.basis
        net = (self.mshift[0] + other.mshift[0], self.mshift[1] + other.mshift[1])
        if self.coarse or other.coarse:
            a, b = self.to_coarse() if not self.coarse else self, other
            if not other.coarse:
                b = other.to_coarse()
            blocks = {k: a.coarse_block(k) @ b.coarse_block(k) for k in range(len(basis.coarse_keys))}
            return BlockOperator(basis, coarse=True, coarse_blocks=blocks)
        out: dict[int, np.ndarray] = {}
        for src in range(len(basis.sector_keys)):
            bblk = _any_block(other, src)
            if bblk is None:
                continue
            try:
                mid = _shift_target(basis, src, other.mshift)
            except KeyError:
                continue
            ablk = _any_block(self, mid)
            if ablk is None:
                continue
            out[src] = ablk @ bblk
        if net == (0, 0):
            op = BlockOperator.zero_flat(basis, dtype=_result_dtype(self, other))
            for src, mat in out.items():
                lo, hi = basis.sector_slices[src]
                d = hi - lo
                off = basis.block_offsets[src]
                op.flat[off : off + d * d] = mat.astype(op.flat.dtype).ravel()
            return op
        return BlockOperator(basis, shift_blocks=out, mshift=net)

    def hermiticity_residual(self) -> float:
        res = 0.0
        for sec in range(len(self.basis.sector_keys)):
            b = self.block(sec)
            if b.size:
                res = max(res, float(np.max(np.abs(b - b.conj().T))))
        return res

    def min_eigenvalue(self) -> float:
        out = math.inf
        for sec in range(len(self.basis.sector_keys)):
            b = self.block(sec)
            if b.size:
                out = min(out, float(np.linalg.eigvalsh(b)[0]))
        return out


def _add_opt(a, b):
    if a is None:
        return None if b is None else b.copy()
    if b is None:
        return a.copy()
    return a + b


def _result_dtype(a: BlockOperator, b: BlockOperator):
    dts = []
    for op in (a, b):
        if op.flat is not None:
            dts.append(op.flat.dtype)
        if op.shift_blocks:
            dts.append(next(iter(op.shift_blocks.values())).dtype)
    return np.result_type(*dts) if dts else np.float64


def _shift_target(basis: FockBasis, src: int, mshift) -> int:
    if mshift == (0, 0):
        return src
    n, m1, m2 = basis.sector_keys[src]
    key = (n, m1 + mshift[0], m2 + mshift[1])
    if key not in basis.sector_index:
        raise KeyError
    return basis.sector_index[key]


def _any_block(op: BlockOperator, src: int):
    """Block with source sector src, or None if structurally zero."""
    if op.shift_blocks is not None:
        return op.shift_blocks.get(src)
    return op.block(src)


# ---------------------------------------------------------------------------
# operator builders
# ---------------------------------------------------------------------------

def build_number(basis: FockBasis, region=None) -> BlockOperator:
    """dGamma of the indicator of a spectral region (all modes if None)."""
    if region is None:
        mask = np.ones(basis.K, dtype=bool)
    else:
        mask = region.contains_h(basis.modes.h)
    diag = basis.states[:, mask].astype(float).sum(axis=1)
    return BlockOperator.from_diagonal(basis, diag)


def build_kinetic(basis: FockBasis) -> BlockOperator:
    """dGamma(h) = sum_p h(p) a*_p a_p, diagonal in the occupation basis."""
    diag = basis.states.astype(float) @ basis.modes.h
    return BlockOperator.from_diagonal(basis, diag)


def _quartic_monomials(modes: ModeSet, nonzero_only: bool):
    """(ip, iq, ipk, iqk, k) for every in-set monomial a*_{p+k}a*_{q-k}a_q a_p."""
    out = []
    ks = modes.differences()
    for k in ks:
        if nonzero_only and k == (0, 0):
            continue
        mk = (-k[0], -k[1])
        ppairs = modes.transfer_pairs(k)       # (i_p, i_{p+k})
        qpairs = modes.transfer_pairs(mk)      # (i_q, i_{q-k})
        for ip, ipk in ppairs:
            for iq, iqk in qpairs:
                out.append((ip, iq, ipk, iqk, k))
    return out


def assemble_quartic(basis: FockBasis, coeff_fn, nonzero_only: bool = False) -> BlockOperator:
    """Generic quartic assembler: sum of coeff_fn(p,q,k) * a*_{p+k}a*_{q-k}a_q a_p.

    coeff_fn receives modes (tuples) and must return a real coefficient.
    Assembly is vectorized over all basis states per monomial; each monomial
    conserves (n, m), so targets stay inside the source sector.
    """
    modes = basis.modes
    st = basis.states.astype(np.float64)
    codes = basis.codes
    radix = basis.radix
    op = BlockOperator.zero_flat(basis)
    flat = op.flat
    sec_start = basis._sec_start
    sec_dim = basis._sec_dim
    sec_off = basis._sec_offset
    skey = basis.skey
    idx = np.arange(basis.dim)

    for ip, iq, ipk, iqk, k in _quartic_monomials(modes, nonzero_only):
        p = modes.modes[ip]
        q = modes.modes[iq]
        c = float(coeff_fn(p, q, k))
        if c == 0.0:
            continue
        n1 = st[:, ip]
        n2 = st[:, iq] - (1.0 if iq == ip else 0.0)
        n3 = st[:, iqk] - (1.0 if iqk == ip else 0.0) - (1.0 if iqk == iq else 0.0) + 1.0
        n4 = (
            st[:, ipk]
            - (1.0 if ipk == ip else 0.0)
            - (1.0 if ipk == iq else 0.0)
            + (1.0 if ipk == iqk else 0.0)
            + 1.0
        )
        valid = (n1 >= 1.0) & (n2 >= 1.0)
        if not np.any(valid):
            continue
        amp = c * np.sqrt(n1[valid] * n2[valid] * n3[valid] * n4[valid])
        src = idx[valid]
        dcode = int(radix[ipk] + radix[iqk] - radix[ip] - radix[iq])
        tgt = np.searchsorted(skey, skey[src] + dcode)
        pos = sec_off[src] + (tgt - sec_start[src]) * sec_dim[src] + (src - sec_start[src])
        np.add.at(flat, pos, amp)
    return op


def build_quartic(basis: FockBasis, params: KernelParams, lam: float,
                  nonzero_only: bool = False) -> BlockOperator:
    """Second-quantized pair interaction restricted to the mode set.

    lam^2 / (2 (2pi)^2) * sum_k vhat(k) sum_{p,q} a*_{p+k} a*_{q-k} a_q a_p,
    with every momentum required to lie in the set.  nonzero_only drops the
    k = 0 term (which equals N(N-1) times the prefactor).
    """
    pref = lam * lam / (2.0 * TWO_PI_SQ)

    def coeff(p, q, k):
        return pref * kernel_coeff(k, params)

    return assemble_quartic(basis, coeff, nonzero_only=nonzero_only)


def build_Wre(basis: FockBasis, params: KernelParams, lam: float, n0p: float) -> BlockOperator:
    """Centered interaction: k!=0 quartic plus the number-fluctuation square.

    Equals lam^2 W(V_{k!=0}) + lam^2/(2(2pi)^2) (N - n0p)^2 with n0p the
    set-restricted free particle count supplied by the caller.
    """
    if n0p < 0:
        raise ValueError("n0p must be >= 0")
    op = build_quartic(basis, params, lam, nonzero_only=True)
    n = basis.n_tot.astype(float)
    op.diag = lam * lam / (2.0 * TWO_PI_SQ) * (n - n0p) ** 2
    return op


def build_Wre_via_counterterms(basis: FockBasis, params: KernelParams, lam: float,
                               n0p: float) -> BlockOperator:
    """Same operator assembled as full quartic + c_lam N + C_lam (cross-check)."""
    op = build_quartic(basis, params, lam, nonzero_only=False)
    c_lam = lam * lam * (1.0 - 2.0 * n0p) / (2.0 * TWO_PI_SQ)
    cc_lam = lam * lam * n0p * n0p / (2.0 * TWO_PI_SQ)
    n = basis.n_tot.astype(float)
    op.diag = c_lam * n + cc_lam
    return op


def build_full_hamiltonian(basis: FockBasis, params: KernelParams, lam: float,
                           n0p: float | None = None) -> BlockOperator:
    """lam dGamma(h) + centered interaction on the truncated space."""
    if n0p is None:
        from .freegas import renorm_constants

        n0p = renorm_constants(basis.modes, lam)[0]
    op = build_Wre(basis, params, lam, n0p)
    op.diag = op.diag + lam * (basis.states.astype(float) @ basis.modes.h)
    return op


def ladder_monomial(basis: FockBasis, p: Mode, q: Mode, k: Mode) -> BlockOperator:
    """Single monomial a*_{p+k} a*_{q-k} a_q a_p as a block operator."""
    modes = basis.modes
    pk = (p[0] + k[0], p[1] + k[1])
    qk = (q[0] - k[0], q[1] - k[1])
    for mom in (p, q, pk, qk):
        if mom not in modes.index:
            raise KeyError(f"momentum {mom} outside the mode set")

    def coeff(pp, qq, kk):
        return 1.0 if (pp == p and qq == q and kk == k) else 0.0

    return assemble_quartic(basis, coeff)


def build_rho(basis: FockBasis, k: Mode) -> BlockOperator:
    """Density mode rho_k = dGamma(e_{k,P}) = (2pi)^-1 sum_p a*_{p+k} a_p.

    Shifts total momentum by k; for k = 0 this is N / (2pi).
    """
    modes = basis.modes
    pref = 1.0 / (2.0 * math.pi)
    if k == (0, 0):
        return BlockOperator.from_diagonal(
            basis, pref * basis.n_tot.astype(float)
        )
    pairs = modes.transfer_pairs(k)
    if not pairs:
        raise KeyError(f"momentum transfer {k} not realizable in the set")
    st = basis.states.astype(np.float64)
    blocks: dict[int, np.ndarray] = {}
    for sec, (lo, hi) in enumerate(basis.sector_slices):
        n, m1, m2 = basis.sector_keys[sec]
        tkey = (n, m1 + k[0], m2 + k[1])
        if tkey not in basis.sector_index:
            continue
        tsec = basis.sector_index[tkey]
        tlo, thi = basis.sector_slices[tsec]
        mat = np.zeros((thi - tlo, hi - lo), dtype=complex)
        for ip, ipk in pairs:
            n1 = st[lo:hi, ip]
            n2 = st[lo:hi, ipk] + 1.0
            valid = n1 >= 1.0
            if not np.any(valid):
                continue
            src_local = np.flatnonzero(valid)
            dcode = int(basis.radix[ipk] - basis.radix[ip])
            tcode = basis.codes[lo + src_local] + dcode
            tgt_local = np.searchsorted(basis.codes[tlo:thi], tcode)
            amp = pref * np.sqrt(n1[valid] * n2[valid])
            np.add.at(mat, (tgt_local, src_local), amp)
        blocks[sec] = mat
    return BlockOperator(basis, shift_blocks=blocks, mshift=k)


def build_dgamma(basis: FockBasis, f: np.ndarray) -> BlockOperator:
    """dGamma(f) for a one-body matrix f over the mode set.

    Diagonal f yields a sector-conserving diagonal operator; otherwise the
    result lives on the coarse (fixed-n) partition, since momentum is not
    conserved.
    """
    f = np.asarray(f)
    if f.shape != (basis.K, basis.K):
        raise ValueError("one-body matrix must be K x K over the mode set")
    if np.max(np.abs(f - f.conj().T)) > 1e-12:
        raise ValueError("one-body matrix must be Hermitian")
    diag = basis.states.astype(float) @ np.real(np.diag(f))
    off = f - np.diag(np.diag(f))
    if np.max(np.abs(off)) == 0.0:
        return BlockOperator.from_diagonal(basis, diag)

    st = basis.states.astype(np.float64)
    blocks: dict[int, np.ndarray] = {}
    for ci, (lo, hi) in enumerate(basis.coarse_slices):
        d = hi - lo
        mat = np.zeros((d, d), dtype=complex)
        order = np.argsort(basis.codes[lo:hi], kind="stable")
        sorted_codes = basis.codes[lo:hi][order]
        for r in range(basis.K):
            for s in range(basis.K):
                if r == s or off[r, s] == 0.0:
                    continue
                n1 = st[lo:hi, s]
                n2 = st[lo:hi, r] + 1.0
                valid = n1 >= 1.0
                if not np.any(valid):
                    continue
                src_local = np.flatnonzero(valid)
                dcode = int(basis.radix[r] - basis.radix[s])
                tcode = basis.codes[lo + src_local] + dcode
                pos = np.searchsorted(sorted_codes, tcode)
                tgt_local = order[pos]
                amp = off[r, s] * np.sqrt(n1[valid] * n2[valid])
                np.add.at(mat, (tgt_local, src_local), amp)
        mat[np.arange(d), np.arange(d)] += diag[lo:hi]
        blocks[ci] = mat
    return BlockOperator(basis, coarse=True, coarse_blocks=blocks)


def commutator(a: BlockOperator, b: BlockOperator) -> BlockOperator:
    return a @ b - b @ a


def double_commutator(a: BlockOperator, h: BlockOperator) -> BlockOperator:
    """[a, [h, a]]."""
    inner = commutator(h, a)
    return commutator(a, inner)


# ---------------------------------------------------------------------------
# cutoff-crossing bookkeeping for the double-commutator identity
# ---------------------------------------------------------------------------

_BLOCK_TABLE = {
    ("PP", "PP"): "A1", ("PP", "PQ"): "A2", ("PP", "QP"): "A3", ("PP", "QQ"): "A4",
    ("PQ", "PP"): "A5", ("QP", "PP"): "A6", ("QQ", "PP"): "A7",
    ("PQ", "PQ"): "B1", ("PQ", "QP"): "B2", ("PQ", "QQ"): "B3",
    ("QP", "PQ"): "B4", ("QP", "QP"): "B5", ("QP", "QQ"): "B6",
    ("QQ", "PQ"): "B7", ("QQ", "QP"): "B8", ("QQ", "QQ"): "B9",
}

_BLOCK_DELTA = {
    "A1": 0, "A4": 0, "A7": 0, "B2": 0, "B4": 0, "B9": 0,
    "A2": 1, "A3": 1, "A5": 1, "A6": 1, "B3": 1, "B6": 1, "B7": 1, "B8": 1,
    "B1": 2, "B5": 2,
}


def _leg(a: Mode, b: Mode, cutoff_sq: float) -> str:
    qa = "Q" if dispersion(a) > cutoff_sq else "P"
    qb = "Q" if dispersion(b) > cutoff_sq else "P"
    return qa + qb


def classify_block(p: Mode, q: Mode, k: Mode, cutoff_sq: float) -> str:
    """A1..B9 label of the monomial from how each leg crosses the cutoff."""
    pk = (p[0] + k[0], p[1] + k[1])
    qk = (q[0] - k[0], q[1] - k[1])
    return _BLOCK_TABLE[(_leg(p, pk, cutoff_sq), _leg(q, qk, cutoff_sq))]


def delta_pqk(p: Mode, q: Mode, k: Mode, cutoff_sq: float) -> int:
    """Q_{p+k} + Q_{q-k} - Q_q - Q_p with Q_r = 1{h(r) > cutoff_sq}."""

    def qq(r):
        return 1 if dispersion(r) > cutoff_sq else 0

    pk = (p[0] + k[0], p[1] + k[1])
    qk = (q[0] - k[0], q[1] - k[1])
    return qq(pk) + qq(qk) - qq(q) - qq(p)


def expected_abs_delta(block_label: str) -> int:
    return _BLOCK_DELTA[block_label]


def build_double_commutator_rhs(basis: FockBasis, params: KernelParams, lam: float,
                                inner_cutoff_sq: float) -> BlockOperator:
    """-(lam^2/(2(2pi)^2)) sum_{k!=0} vhat(k) sum_{p,q} Delta^2 M_{p,q,k}.

    Independent assembly of the double-commutator block formula for
    [N_Q, [W_re, N_Q]] with Q the modes above inner_cutoff_sq.
    """
    pref = -lam * lam / (2.0 * TWO_PI_SQ)

    def coeff(p, q, k):
        if k == (0, 0):
            return 0.0
        d = delta_pqk(p, q, k, inner_cutoff_sq)
        return pref * kernel_coeff(k, params) * d * d

    return assemble_quartic(basis, coeff, nonzero_only=True)


def number_correction_for_ccr(basis: FockBasis, k: Mode) -> BlockOperator:
    """dGamma of the indicator of modes r with both r and r-k in the set.

    On the truncated set the CCR rewiring reads
    sum_{p,q} M_{p,q,k} = (2pi)^2 rho_k rho_{-k} - dGamma(1_{K cap (K+k)});
    for k = 0 the correction is the full number operator.
    """
    sel = np.zeros(basis.K)
    for r in basis.modes.modes:
        rk = (r[0] - k[0], r[1] - k[1])
        if rk in basis.modes.index:
            sel[basis.modes.index[r]] = 1.0
    diag = basis.states.astype(float) @ sel
    return BlockOperator.from_diagonal(basis, diag)


def operator_to_json(op: BlockOperator, path) -> None:
    """Dump a conserving operator as the documented JSON matrix schema."""
    if op.mshift != (0, 0) or op.coarse:
        raise ValueError("JSON dump supports sector-conserving operators only")
    sectors = []
    for sec, key in enumerate(op.basis.sector_keys):
        b = np.asarray(op.block(sec), dtype=complex)
        entries = np.stack([b.real.ravel(), b.imag.ravel()], axis=1).ravel().tolist()
        sectors.append(
            {"n": key[0], "m": [key[1], key[2]], "dim": b.shape[0], "entries": entries}
        )
    doc = {
        "schema": "besselgas.block_operator.v1",
        "cap": op.basis.cap,
        "cutoff_sq": op.basis.modes.cutoff_sq,
        "layout": "row-major [re, im] pairs per sector",
        "sectors": sectors,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
