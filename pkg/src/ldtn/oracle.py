"""Dense reference implementation for small chains (L <= 4).

Used as ground truth by the tests and the ``validate`` command. Nothing here
goes through the MPS machinery: Kraus operators come from dense matrix
exponentials, either exact or Trotterized by plain Kronecker products.

Vectorized operators follow the package layout (per site ``p = ket + 2*bra``,
site 1 most significant), see :func:`vectorize_density`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .collision import (
    ID2,
    MAX_DENSE_L,
    N_OP,
    SIGMA_X,
    ModelParams,
    exact_kraus_set,
    exact_step_unitary,
    kraus_from_unitary,
)
from .errors import ModelViolationError, ValidationError

MAX_ENUMERATION = 2**12


def _kron_all(ops):
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out


def _expm_h(h: np.ndarray, scale: complex) -> np.ndarray:
    w, v = np.linalg.eigh(h)
    return (v * np.exp(scale * w)) @ v.conj().T


def trotter_step_unitary(p: ModelParams) -> np.ndarray:
    """Dense ``(U_I U_e U_o)^N`` with qubits ordered ``(S_1..S_L, A_1..A_L)``."""
    if p.L > MAX_DENSE_L:
        raise ValidationError(f"dense evaluation limited to L <= {MAX_DENSE_L}")
    tau = p.trotter_dt
    L = p.L
    eye_a = np.eye(2**L)
    half_rot = _kron_all([_expm_h(SIGMA_X, -0.5j * p.omega * tau)] * L)

    def bond_phase(parity):
        diag = np.ones(2**L, dtype=complex)
        for idx in range(2**L):
            bits = [(idx >> (L - 1 - j)) & 1 for j in range(L)]
            pairs = sum(bits[i] * bits[i + 1] for i in range(parity, L - 1, 2))
            diag[idx] = np.exp(-1j * p.v * tau * pairs)
        return np.diag(diag)

    u_even = np.kron(half_rot @ bond_phase(0), eye_a)
    u_odd = np.kron(half_rot @ bond_phase(1), eye_a)
    h_int = sum(
        np.kron(
            _kron_all([ID2 - N_OP if j == i else ID2 for j in range(L)]),
            _kron_all([SIGMA_X if j == i else ID2 for j in range(L)]),
        )
        for i in range(L)
    )
    u_int = _expm_h(h_int, -1j * p.coupling * tau)
    step = u_int @ u_even @ u_odd
    return np.linalg.matrix_power(step, p.n_trotter)


def trotter_kraus_set(p: ModelParams) -> list[np.ndarray]:
    return kraus_from_unitary(trotter_step_unitary(p), p.L)


def kraus_set(p: ModelParams, trotterized: bool = False) -> list[np.ndarray]:
    return trotter_kraus_set(p) if trotterized else exact_kraus_set(p)


def trotter_defect(p: ModelParams) -> float:
    """Operator-norm distance between the Trotterized and exact step unitaries."""
    return float(np.linalg.norm(trotter_step_unitary(p) - exact_step_unitary(p), 2))


def popcount(k: int) -> int:
    return bin(k).count("1")


def bits_of(k: int, n: int) -> tuple[int, ...]:
    return tuple((k >> (n - 1 - j)) & 1 for j in range(n))


# ------------------------------------------------------------- vectorization


def vectorize_density(rho: np.ndarray, n_sites: int) -> np.ndarray:
    """Dense operator to a vector in the per-site ket-fastest layout."""
    t = np.asarray(rho).reshape([2] * (2 * n_sites))  # (k_1..k_L, b_1..b_L)
    order = []
    for i in range(n_sites):
        order += [n_sites + i, i]  # (b_i, k_i): p_i = 2 b_i + k_i
    return t.transpose(order).reshape(-1)


def devectorize_density(vec: np.ndarray, n_sites: int) -> np.ndarray:
    t = np.asarray(vec).reshape([2] * (2 * n_sites))  # (b_1,k_1,b_2,k_2,...)
    kets = [2 * i + 1 for i in range(n_sites)]
    bras = [2 * i for i in range(n_sites)]
    dim = 2**n_sites
    return t.transpose(kets + bras).reshape(dim, dim)


def _row_major_to_package(n_sites: int) -> np.ndarray:
    """Permutation ``perm`` with ``vec_pkg = vec_rowmajor[perm]``."""
    dim = 4**n_sites
    idx = np.arange(dim).reshape(2**n_sites, 2**n_sites)
    return vectorize_density(idx, n_sites)


@dataclass(frozen=True)
class DenseSuperoperator:
    dim: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != (self.dim, self.dim):
            raise ValidationError("matrix shape does not match dim")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("non-finite superoperator entries")


def superoperator_from_kraus(kraus, weights) -> DenseSuperoperator:
    dim = kraus[0].shape[0]
    n_sites = int(round(np.log2(dim)))
    m = np.zeros((dim * dim, dim * dim), dtype=complex)
    for w, k in zip(weights, kraus):
        if w != 0:
            # row-major vec(K rho K^dag) = (K x conj K) vec(rho)
            m += w * np.kron(k, k.conj())
    perm = _row_major_to_package(n_sites)
    return DenseSuperoperator(dim * dim, m[np.ix_(perm, perm)])


def dense_tilted_superoperator(
    p: ModelParams, s: float, trotterized: bool = False, derivative: bool = False
) -> DenseSuperoperator:
    """``sum_k e^{-s|k|} K_k . K_k^dag`` (or its ``s``-derivative) as a matrix."""
    if p.L > MAX_DENSE_L:
        raise ValidationError(f"dense evaluation limited to L <= {MAX_DENSE_L}")
    kraus = kraus_set(p, trotterized)
    counts = np.array([popcount(k) for k in range(len(kraus))], dtype=float)
    weights = np.exp(-s * counts)
    if derivative:
        weights = -counts * weights
    return superoperator_from_kraus(kraus, weights)


def dense_dominant_eig(m: DenseSuperoperator, imag_tol: float = 1e-10):
    """Dominant eigenvalue with right (``rho``) and left (``omega``) eigenvectors.

    ``rho`` is returned as a unit-trace Hermitian matrix, ``omega`` as a
    Hermitian matrix with ``Tr[omega rho] = 1``.
    """
    n_sites = int(round(np.log(m.dim) / np.log(4)))
    w, vr = np.linalg.eig(m.matrix)
    mags = np.abs(w)
    top = np.flatnonzero(mags >= mags.max() * (1 - 1e-12))
    i = top[np.argmin(np.abs(w[top].imag))]
    lam = w[i]
    if abs(lam.imag) > imag_tol * max(1.0, abs(lam)):
        raise ModelViolationError(f"dominant eigenvalue {lam} is not real")

    wl, vl = np.linalg.eig(m.matrix.conj().T)
    j = int(np.argmin(np.abs(wl - np.conj(lam))))

    rho = devectorize_density(vr[:, i], n_sites)
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + rho.conj().T)
    omega = devectorize_density(vl[:, j], n_sites)
    omega = omega / np.trace(omega)
    omega = 0.5 * (omega + omega.conj().T)
    omega = omega / np.trace(omega @ rho).real
    return float(lam.real), rho, omega


def apply_superoperator(m: DenseSuperoperator, rho: np.ndarray) -> np.ndarray:
    n_sites = int(round(np.log(m.dim) / np.log(4)))
    return devectorize_density(m.matrix @ vectorize_density(rho, n_sites), n_sites)


def enumerate_trajectory_probs(
    p: ModelParams, rho0: np.ndarray, T: int, trotterized: bool = False
) -> list[tuple[np.ndarray, float]]:
    """Every ``T x L`` outcome record with its probability."""
    if 2 ** (p.L * T) > MAX_ENUMERATION:
        raise ValidationError(f"2^(L*T) = {2 ** (p.L * T)} records is too many to enumerate")
    kraus = kraus_set(p, trotterized)
    out = []
    for ks in itertools.product(range(len(kraus)), repeat=T):
        rho = np.asarray(rho0, dtype=complex)
        for k in ks:
            rho = kraus[k] @ rho @ kraus[k].conj().T
        record = np.array([bits_of(k, p.L) for k in ks], dtype=np.int8)
        out.append((record, float(np.trace(rho).real)))
    return out


def conditioned_occupations(
    p: ModelParams, rho0: np.ndarray, record: np.ndarray, trotterized: bool = False
) -> np.ndarray:
    """Occupations ``<n_i>`` of the conditioned state after each step of ``record``."""
    kraus = kraus_set(p, trotterized)
    rho = np.asarray(rho0, dtype=complex)
    occ = np.zeros(record.shape, dtype=float)
    weights = 2 ** np.arange(p.L - 1, -1, -1)
    n_ops = [_kron_all([N_OP if j == i else ID2 for j in range(p.L)]) for i in range(p.L)]
    for t, bits in enumerate(record):
        k = int(np.dot(bits, weights))
        rho = kraus[k] @ rho @ kraus[k].conj().T
        rho = rho / np.trace(rho)
        occ[t] = [np.trace(n @ rho).real for n in n_ops]
    return occ
