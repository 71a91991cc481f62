"""Matrix product states and operators for vectorized density operators.

Site tensors of an :class:`Mps` have legs ``(left, phys, right)``; site tensors
of an :class:`Mpo` have legs ``(left, out, in, right)``. Boundary bonds have
extent 1.

When an MPS holds a vectorized operator ``rho`` with local dimension ``d``,
the physical index of each site is the fused ket/bra pair with the ket varying
fastest::

    p = ket + d * bra

so a site tensor reshaped to ``(left, d, d, right)`` has axes
``(left, bra, ket, right)``. Everything in the package (including the dense
oracle) uses this layout.

Global scale is kept out of the tensors: an MPS represents
``exp(log_norm) * contraction(sites)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import svd_truncate


def _check_chain(sites: Sequence[np.ndarray], rank: int, kind: str) -> None:
    if not sites:
        raise DimensionError(f"{kind} needs at least one site")
    for i, t in enumerate(sites):
        if t.ndim != rank:
            raise DimensionError(f"{kind} site {i} has rank {t.ndim}, expected {rank}")
        if min(t.shape) < 1:
            raise DimensionError(f"{kind} site {i} has an empty leg: {t.shape}")
    if sites[0].shape[0] != 1 or sites[-1].shape[-1] != 1:
        raise DimensionError(f"{kind} boundary bonds must have extent 1")
    for i in range(len(sites) - 1):
        if sites[i].shape[-1] != sites[i + 1].shape[0]:
            raise DimensionError(
                f"{kind} bond {i}: {sites[i].shape[-1]} != {sites[i + 1].shape[0]}"
            )


@dataclass(frozen=True)
class Mps:
    sites: tuple[np.ndarray, ...]
    log_norm: float = 0.0
    center: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(np.asarray(t) for t in self.sites))
        _check_chain(self.sites, 3, "Mps")
        if self.center is not None and not 0 <= self.center < len(self.sites):
            raise DimensionError(f"center {self.center} outside chain")

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def phys_dims(self) -> list[int]:
        return [t.shape[1] for t in self.sites]

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[-1] for t in self.sites[:-1]]

    def scaled(self, log_factor: float) -> Mps:
        """Multiply the represented vector by ``exp(log_factor)``."""
        return Mps(self.sites, self.log_norm + float(log_factor), self.center)

    def to_dense(self) -> np.ndarray:
        out = np.ones((1, 1), dtype=complex)
        for t in self.sites:
            out = np.tensordot(out, t, axes=(1, 0)).reshape(-1, t.shape[-1])
        return out[:, 0] * np.exp(self.log_norm)

    @classmethod
    def from_dense(cls, vec: np.ndarray, phys_dims: Sequence[int]) -> Mps:
        """Exact (untruncated) MPS of a dense vector, right-canonical."""
        vec = np.asarray(vec, dtype=complex).reshape(-1)
        if int(np.prod(phys_dims)) != vec.size:
            raise DimensionError(f"vector of size {vec.size} does not match {phys_dims}")
        nrm = np.linalg.norm(vec)
        if nrm == 0:
            raise NumericError("cannot build an MPS of the zero vector")
        sites = []
        rest = (vec / nrm).reshape(1, -1)
        for d in reversed(list(phys_dims)[1:]):
            rest = rest.reshape(-1, d * (sites[0].shape[0] if sites else 1))
            split = svd_truncate(rest, rest.shape[0] * rest.shape[1], 0.0)
            sites.insert(0, split.right_factor.reshape(split.rank, d, -1))
            rest = split.left_isometry * split.singular_values
        sites.insert(0, rest.reshape(1, phys_dims[0], -1))
        return cls(tuple(sites), float(np.log(nrm)), 0)

    @classmethod
    def product(cls, vectors: Iterable[np.ndarray]) -> Mps:
        return cls(tuple(np.asarray(v, dtype=complex).reshape(1, -1, 1) for v in vectors))


@dataclass(frozen=True)
class Mpo:
    sites: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(np.asarray(t) for t in self.sites))
        _check_chain(self.sites, 4, "Mpo")

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def bond_dims(self) -> list[int]:
        return [t.shape[-1] for t in self.sites[:-1]]

    def dagger(self) -> Mpo:
        return Mpo(tuple(t.conj().transpose(0, 2, 1, 3) for t in self.sites))

    def to_dense(self) -> np.ndarray:
        out = np.ones((1, 1, 1), dtype=complex)
        for t in self.sites:
            x, y, _ = out.shape
            out = np.einsum("xya,aoic->xoyic", out, t)
            out = out.reshape(x * t.shape[1], y * t.shape[2], t.shape[3])
        return out[:, :, 0]

    @classmethod
    def product(cls, matrices: Iterable[np.ndarray]) -> Mpo:
        return cls(tuple(np.asarray(m, dtype=complex)[None, :, :, None] for m in matrices))


def vectorize(op: np.ndarray) -> np.ndarray:
    """Single-site operator to a vector in the ket-fastest layout."""
    return np.asarray(op).T.reshape(-1)


def unvectorize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec)
    d = int(round(np.sqrt(vec.size)))
    return vec.reshape(d, d).T


def product_operator(ops: Iterable[np.ndarray]) -> Mps:
    """Vectorized tensor product of single-site operators (bond dimension 1)."""
    return Mps.product(vectorize(o) for o in ops)


def maximally_mixed(n_sites: int, d: int = 2) -> Mps:
    return product_operator([np.eye(d) / d] * n_sites)


def identity_operator(n_sites: int, d: int = 2) -> Mps:
    return product_operator([np.eye(d)] * n_sites)


def apply_mpo(op: Mpo, state: Mps) -> Mps:
    """Exact MPO-MPS product; bond dimensions multiply."""
    if len(op) != len(state):
        raise DimensionError(f"Mpo has {len(op)} sites, Mps has {len(state)}")
    sites = []
    for i, (w, a) in enumerate(zip(op.sites, state.sites)):
        if w.shape[2] != a.shape[1]:
            raise DimensionError(f"site {i}: operator input {w.shape[2]} vs state {a.shape[1]}")
        t = np.einsum("woic,lir->lworc", w, a)
        sites.append(t.reshape(a.shape[0] * w.shape[0], w.shape[1], a.shape[2] * w.shape[3]))
    return Mps(tuple(sites), state.log_norm, None)


def compress(state: Mps, d_max: int, cutoff: float = 1e-14) -> tuple[Mps, float]:
    """Canonicalize then truncate every bond by SVD.

    A left-to-right QR sweep orthogonalizes the chain; a right-to-left SVD
    sweep truncates each bond to at most ``d_max`` values ``>= cutoff``
    (singular values are measured on the unit-normalized state). The result is
    right-canonical with center 0, its center tensor has unit Frobenius norm
    and the 2-norm of the input is moved into ``log_norm``.

    Returns the compressed state and the summed discarded weight.
    """
    sites = [t for t in state.sites]
    n = len(sites)
    log_norm = state.log_norm
    for i in range(n - 1):
        l, d, r = sites[i].shape
        q, rr = np.linalg.qr(sites[i].reshape(l * d, r))
        sites[i] = q.reshape(l, d, -1)
        sites[i + 1] = np.tensordot(rr, sites[i + 1], axes=(1, 0))
    nrm = np.linalg.norm(sites[-1])
    if not np.isfinite(nrm):
        raise NumericError("non-finite norm during compression")
    if nrm == 0:
        raise NumericError("state vanished during compression")
    sites[-1] = sites[-1] / nrm
    log_norm += float(np.log(nrm))

    error = 0.0
    for i in range(n - 1, 0, -1):
        l, d, r = sites[i].shape
        split = svd_truncate(sites[i].reshape(l, d * r), d_max, cutoff)
        error += split.discarded_weight
        sites[i] = split.right_factor.reshape(split.rank, d, r)
        us = split.left_isometry * split.singular_values
        sites[i - 1] = np.tensordot(sites[i - 1], us, axes=(2, 0))
    nrm = np.linalg.norm(sites[0])
    if nrm == 0:
        raise NumericError("state vanished during truncation")
    sites[0] = sites[0] / nrm
    return Mps(tuple(sites), log_norm, 0), error


def inner(a: Mps, b: Mps) -> complex:
    """``<a|b>``, conjugating ``a``."""
    if a.phys_dims != b.phys_dims:
        raise DimensionError(f"physical dims differ: {a.phys_dims} vs {b.phys_dims}")
    env = np.ones((1, 1), dtype=complex)
    for x, y in zip(a.sites, b.sites):
        env = np.einsum("ab,apc,bpd->cd", env, x.conj(), y)
    return complex(env[0, 0] * np.exp(a.log_norm + b.log_norm))


def _local_dim(p: int) -> int:
    d = int(round(np.sqrt(p)))
    if d * d != p:
        raise DimensionError(f"physical dimension {p} is not a perfect square")
    return d


def _trace_vectors(state: Mps, site_ops=None) -> list[np.ndarray]:
    vecs = []
    for i, p in enumerate(state.phys_dims):
        d = _local_dim(p)
        op = np.eye(d) if site_ops is None or site_ops[i] is None else np.asarray(site_ops[i])
        if op.shape != (d, d):
            raise DimensionError(f"site {i}: operator shape {op.shape}, expected {(d, d)}")
        # Tr[O rho] = sum_{k,b} O[b,k] rho[k,b]; rho[k,b] sits at p = k + d*b
        vecs.append(op.reshape(-1))
    return vecs


def trace_vectorized(state: Mps, site_ops: Sequence[np.ndarray | None] | None = None) -> complex:
    """``Tr[(O_1 x ... x O_L) rho]`` for the operator ``rho`` vectorized in ``state``."""
    if site_ops is not None and len(site_ops) != len(state):
        raise DimensionError("need one operator (or None) per site")
    env = np.ones(1, dtype=complex)
    for t, v in zip(state.sites, _trace_vectors(state, site_ops)):
        env = env @ np.tensordot(t, v, axes=(1, 0))
    return complex(env[0] * np.exp(state.log_norm))


def local_expectations(state: Mps, op: np.ndarray) -> np.ndarray:
    """``Tr[op_i rho] / Tr[rho]`` for every site ``i``, using cached environments."""
    traced = [np.tensordot(t, v, axes=(1, 0)) for t, v in zip(state.sites, _trace_vectors(state))]
    marked = [np.tensordot(t, np.asarray(op).reshape(-1), axes=(1, 0)) for t in state.sites]
    n = len(state)
    right = [np.ones(1, dtype=complex)] * (n + 1)
    for i in range(n - 1, -1, -1):
        right[i] = traced[i] @ right[i + 1]
    total = right[0][0]
    if total == 0:
        raise NumericError("state has zero trace")
    out = np.empty(n, dtype=complex)
    left = np.ones(1, dtype=complex)
    for i in range(n):
        out[i] = left @ marked[i] @ right[i + 1]
        left = left @ traced[i]
    return out / total
