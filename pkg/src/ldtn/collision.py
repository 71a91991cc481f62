"""Trotterized collision step of the monitored Rydberg-type chain.

Each system qubit ``i`` couples to its own ancilla qubit for one collision of
duration ``dt`` under

    H = Omega sum_i X_i + V sum_i n_i n_{i+1} + g sum_i (1 - n_i) tau^x_i,
    g = sqrt(gamma / dt),

after which the ancillas are measured in the computational basis and reset.

During a step the ancilla of site ``i`` is fused into the physical index of
system site ``i``. The joint ket index is ``2 * sys + anc`` and a vectorized
joint site has physical extent 16, laid out ``(bra_sys, bra_anc, ket_sys,
ket_anc)`` in row-major order (ket fastest, as everywhere in the package).

One collision step is ``N`` repetitions of ``odd -> even -> interaction``
layers, i.e. the unitary ``(U_I U_e U_o)^N``. The even/odd layers hold
``exp(-i V n n dt/N)`` on their bonds followed by a half rotation
``exp(-i Omega X dt/(2N))`` on every site, so each is an MPO of bond
dimension at most 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
import scipy.linalg

from .errors import DimensionError, ValidationError
from .mps import Mpo, Mps, compress, trace_vectorized
from .tensor import exp_hermitian

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
N_OP = np.array([[0, 0], [0, 1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
K_HAT = N_OP  # ancilla projector |1><1|

DEFAULT_CUTOFF = 1e-14


@dataclass(frozen=True)
class ModelParams:
    L: int
    omega: float = 1.0
    v: float = 0.0
    gamma: float = 3.0
    dt: float = 1.25
    n_trotter: int = 10

    def __post_init__(self):
        if self.L < 1:
            raise ValidationError(f"L must be >= 1, got {self.L}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.n_trotter < 1:
            raise ValidationError(f"n_trotter must be >= 1, got {self.n_trotter}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def coupling(self) -> float:
        return math.sqrt(self.gamma / self.dt)

    @property
    def trotter_dt(self) -> float:
        return self.dt / self.n_trotter


@dataclass(frozen=True)
class Tilt:
    """Weight each outcome string by ``exp(-s * activity)``."""

    s: float


@dataclass(frozen=True)
class TiltDerivative:
    """Derivative of :class:`Tilt` in ``s``: the bias ``-A exp(-s A)``."""

    s: float


@dataclass(frozen=True)
class Project:
    """Condition on one outcome string."""

    outcomes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(int(k) for k in self.outcomes))
        if any(k not in (0, 1) for k in self.outcomes):
            raise ValidationError("outcomes must be 0 or 1")


@dataclass(frozen=True)
class PartialSample:
    """Leave ancilla legs open; closed later by the trajectory sampler."""


AncillaClosure = Union[Tilt, TiltDerivative, Project, PartialSample]


@dataclass(frozen=True)
class TrotterLayers:
    even: Mpo
    odd: Mpo
    interaction: Mpo

    def forward(self) -> list[Mpo]:
        """Layers of one Trotter step in application order."""
        return [self.odd, self.even, self.interaction]

    def adjoint(self) -> list[Mpo]:
        return [self.interaction.dagger(), self.even.dagger(), self.odd.dagger()]


def _hs_layer(p: ModelParams, parity: int) -> Mpo:
    tau = p.trotter_dt
    rot = np.kron(exp_hermitian(SIGMA_X, -0.5j * p.omega * tau), ID2)
    n_sys = np.kron(N_OP, ID2)
    id4 = np.eye(4, dtype=complex)
    phase = np.exp(-1j * p.v * tau) - 1.0
    sites = [rot[None, :, :, None] for _ in range(p.L)]
    if phase != 0:
        for i in range(parity, p.L - 1, 2):
            # exp(-i V tau n n) = 1 + (e^{-i V tau} - 1) n x n, split over two sites
            left = np.stack([id4, n_sys], axis=-1)[None]
            right = np.stack([id4, phase * n_sys], axis=0)[..., None]
            sites[i] = np.einsum("xy,ayzb->axzb", rot, left)
            sites[i + 1] = np.einsum("xy,ayzb->axzb", rot, right)
    return Mpo(tuple(sites))


@lru_cache(maxsize=64)
def build_trotter_layers(p: ModelParams) -> TrotterLayers:
    """MPOs for one Trotter step on fused system+ancilla sites (ket side)."""
    h_int = np.kron(ID2 - N_OP, SIGMA_X)
    gate = exp_hermitian(h_int, -1j * p.coupling * p.trotter_dt)
    interaction = Mpo.product([gate] * p.L)
    return TrotterLayers(even=_hs_layer(p, 0), odd=_hs_layer(p, 1), interaction=interaction)


def step_unitary_dense(p: ModelParams) -> np.ndarray:
    """Dense Trotterized step unitary from the layer MPOs.

    Qubit order of the result is ``(S_1..S_L, A_1..A_L)``; meant for small L.
    """
    layers = build_trotter_layers(p)
    one = np.eye(4**p.L, dtype=complex)
    for mpo in layers.forward():
        one = mpo.to_dense() @ one
    u = np.linalg.matrix_power(one, p.n_trotter)
    # fused site order is (S_1 A_1 S_2 A_2 ...); regroup systems first
    perm = [2 * i for i in range(p.L)] + [2 * i + 1 for i in range(p.L)]
    shape = [2] * (2 * p.L)
    u = u.reshape(shape + shape)
    u = u.transpose(perm + [2 * p.L + q for q in perm])
    return u.reshape(4**p.L, 4**p.L)


# ---------------------------------------------------------------- joint sites


def _split_joint(t: np.ndarray) -> np.ndarray:
    """View a joint site ``(l, 16, r)`` as ``(l, sb, ab, sk, ak, r)``."""
    return t.reshape(t.shape[0], 2, 2, 2, 2, t.shape[-1])


def attach_ancillas(state: Mps, ancilla_ops: Sequence[np.ndarray]) -> Mps:
    """Tensor each system site with an ancilla operator (``X[ket, bra]``)."""
    sites = []
    for t, x in zip(state.sites, ancilla_ops):
        l, _, r = t.shape
        sys = t.reshape(l, 2, 2, r)  # (l, sb, sk, r)
        joint = np.einsum("lbkr,xy->lbykxr", sys, np.asarray(x))
        sites.append(joint.reshape(l, 16, r))
    return Mps(tuple(sites), state.log_norm, state.center)


def _apply_ket(state: Mps, op: Mpo) -> Mps:
    sites = []
    for t, w in zip(state.sites, op.sites):
        l, _, r = t.shape
        a, o, _, c = w.shape
        new = np.einsum("aoic,lbir->laborc", w, t.reshape(l, 4, 4, r))
        sites.append(new.reshape(l * a, 16, r * c))
    return Mps(tuple(sites), state.log_norm, None)


def _apply_bra(state: Mps, op: Mpo) -> Mps:
    sites = []
    for t, w in zip(state.sites, op.sites):
        l, _, r = t.shape
        a, o, _, c = w.shape
        new = np.einsum("aoic,likr->laokrc", w.conj(), t.reshape(l, 4, 4, r))
        sites.append(new.reshape(l * a, 16, r * c))
    return Mps(tuple(sites), state.log_norm, None)


def evolve_joint(
    joint: Mps, layers: Sequence[Mpo], n_steps: int, d_max: int, cutoff: float
) -> tuple[Mps, float]:
    """Apply ``n_steps`` Trotter steps ``U . U^dagger`` to a joint vectorized state.

    Ket and bra halves of a layer are applied one after the other, with a
    compression after each half whenever the layer has a nontrivial bond.
    """
    error = 0.0
    for _ in range(n_steps):
        for mpo in layers:
            grows = any(b > 1 for b in mpo.bond_dims)
            joint = _apply_ket(joint, mpo)
            if grows:
                joint, e = compress(joint, d_max, cutoff)
                error += e
            joint = _apply_bra(joint, mpo)
            if grows:
                joint, e = compress(joint, d_max, cutoff)
                error += e
    return joint, error


def closure_mpo(closure: AncillaClosure, n_sites: int) -> list[np.ndarray]:
    """Per-site tensors ``C[left, anc_ket, anc_bra, right]`` closing the ancillas."""
    if isinstance(closure, Tilt):
        w = np.diag([1.0, math.exp(-closure.s)]).astype(complex)
        return [w[None, :, :, None]] * n_sites
    if isinstance(closure, Project):
        if len(closure.outcomes) != n_sites:
            raise ValidationError(
                f"{len(closure.outcomes)} outcomes given for {n_sites} sites"
            )
        out = []
        for k in closure.outcomes:
            e = np.zeros((2, 2), dtype=complex)
            e[k, k] = 1.0
            out.append(e[None, :, :, None])
        return out
    if isinstance(closure, TiltDerivative):
        w = np.diag([1.0, math.exp(-closure.s)]).astype(complex)
        dw = -K_HAT @ w
        if n_sites == 1:
            return [dw[None, :, :, None]]
        bulk = np.zeros((2, 2, 2, 2), dtype=complex)
        bulk[0, :, :, 0] = w
        bulk[0, :, :, 1] = dw
        bulk[1, :, :, 1] = w
        return [bulk[:1]] + [bulk] * (n_sites - 2) + [bulk[:, :, :, 1:]]
    raise ValidationError(f"closure {closure!r} cannot be contracted here")


def close_ancillas(joint: Mps, closure: AncillaClosure) -> Mps:
    """Contract the ancilla ket/bra legs of every joint site with ``closure``."""
    sites = []
    for t, c in zip(joint.sites, closure_mpo(closure, len(joint))):
        v = _split_joint(t)  # (l, sb, ab, sk, ak, r)
        new = np.einsum("axyc,lbykxr->labkrc", c, v)
        l, a = new.shape[:2]
        sites.append(new.reshape(l * a, 4, -1))
    return Mps(tuple(sites), joint.log_norm, None)


def _check_system_state(state: Mps, p: ModelParams) -> None:
    if len(state) != p.L:
        raise DimensionError(f"state has {len(state)} sites, model has L={p.L}")
    if any(d != 4 for d in state.phys_dims):
        raise DimensionError(f"expected vectorized qubits (dim 4), got {state.phys_dims}")


def _log_abs(x: complex) -> float:
    return math.log(abs(x)) if x != 0 else -math.inf


def evolve_with_fresh_ancillas(
    state: Mps, p: ModelParams, d_max: int, cutoff: float = DEFAULT_CUTOFF
) -> tuple[Mps, float]:
    """Attach ``|0><0|`` ancillas and run the N Trotter layers; ancillas stay open."""
    _check_system_state(state, p)
    zero = np.diag([1.0, 0.0]).astype(complex)
    joint = attach_ancillas(state, [zero] * p.L)
    return evolve_joint(joint, build_trotter_layers(p).forward(), p.n_trotter, d_max, cutoff)


def apply_collision_step(
    state: Mps,
    p: ModelParams,
    closure: AncillaClosure,
    d_max: int,
    cutoff: float = DEFAULT_CUTOFF,
) -> tuple[Mps, float, float]:
    """One collision step on a vectorized system state.

    Returns ``(out, step_log_weight, truncation_error)`` where ``out`` represents
    the closed map applied to ``state`` (scale included) and
    ``step_log_weight = ln|Tr out| - ln|Tr state|``.
    """
    if isinstance(closure, PartialSample):
        raise ValidationError("PartialSample closures are handled by the trajectory sampler")
    _check_system_state(state, p)
    tr_in = trace_vectorized(state)
    joint, error = evolve_with_fresh_ancillas(state, p, d_max, cutoff)
    out, e = compress(close_ancillas(joint, closure), d_max, cutoff)
    tr_out = trace_vectorized(out)
    return out, _log_abs(tr_out) - _log_abs(tr_in), error + e


def apply_adjoint_step(
    state: Mps, p: ModelParams, s: float, d_max: int, cutoff: float = DEFAULT_CUTOFF
) -> tuple[Mps, float, float]:
    """Adjoint tilted step ``X -> sum_k e^{-s|k|} K_k^dagger X K_k``.

    The bias is placed on fresh ancillas, the daggered layers run in reverse
    order and the ancillas are closed on ``<0|.|0>``.
    """
    _check_system_state(state, p)
    tr_in = trace_vectorized(state)
    bias = np.diag([1.0, math.exp(-s)]).astype(complex)
    joint = attach_ancillas(state, [bias] * p.L)
    joint, error = evolve_joint(
        joint, build_trotter_layers(p).adjoint(), p.n_trotter, d_max, cutoff
    )
    out, e = compress(close_ancillas(joint, Project((0,) * p.L)), d_max, cutoff)
    tr_out = trace_vectorized(out)
    return out, _log_abs(tr_out) - _log_abs(tr_in), error + e


# ---------------------------------------------------------------- dense model

MAX_DENSE_L = 4


def _site_op(op: np.ndarray, i: int, n: int) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for j in range(n):
        out = np.kron(out, op if j == i else ID2)
    return out


def dense_collision_hamiltonian(p: ModelParams) -> np.ndarray:
    """``H_CM`` on ``2L`` qubits ordered ``(S_1..S_L, A_1..A_L)``."""
    n = 2 * p.L
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i in range(p.L):
        h += p.omega * _site_op(SIGMA_X, i, n)
        h += p.coupling * _site_op(ID2 - N_OP, i, n) @ _site_op(SIGMA_X, p.L + i, n)
    for i in range(p.L - 1):
        h += p.v * _site_op(N_OP, i, n) @ _site_op(N_OP, i + 1, n)
    return h


def exact_step_unitary(p: ModelParams) -> np.ndarray:
    if p.L > MAX_DENSE_L:
        raise ValidationError(f"dense evaluation limited to L <= {MAX_DENSE_L}")
    return scipy.linalg.expm(-1j * p.dt * dense_collision_hamiltonian(p))


def kraus_from_unitary(u: np.ndarray, n_sites: int) -> list[np.ndarray]:
    """``K_k = <k|U|0>`` on the ancillas, ``k`` ordered as binary integers."""
    dim = 2**n_sites
    t = u.reshape(dim, dim, dim, dim)  # (S', A', S, A)
    return [t[:, k, :, 0].copy() for k in range(dim)]


def exact_kraus_set(p: ModelParams) -> list[np.ndarray]:
    """Kraus operators of the untrotterized step, indexed by outcome bitstring.

    ``k`` is read with site 1 as the most significant bit.
    """
    return kraus_from_unitary(exact_step_unitary(p), p.L)
