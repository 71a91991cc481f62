"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects (row-major). This module adds the
three operations everything else is built on: leg contraction with explicit
extent checks, SVD with a reproducible truncation rule, and exponentials of
small Hermitian matrices used as Trotter gates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

HERMITIAN_TOL = 1e-12


def contract(
    a: np.ndarray, legs_a: Sequence[int], b: np.ndarray, legs_b: Sequence[int]
) -> np.ndarray:
    """Sum over paired legs of ``a`` and ``b``.

    The result carries the unpaired legs of ``a`` followed by the unpaired legs
    of ``b``, each group in its original order.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    legs_a = [int(x) % a.ndim for x in legs_a] if a.ndim else []
    legs_b = [int(x) % b.ndim for x in legs_b] if b.ndim else []
    if len(legs_a) != len(legs_b):
        raise DimensionError(f"got {len(legs_a)} legs on a but {len(legs_b)} on b")
    if len(set(legs_a)) != len(legs_a) or len(set(legs_b)) != len(legs_b):
        raise DimensionError("a leg may be paired only once")
    for la, lb in zip(legs_a, legs_b):
        if a.shape[la] != b.shape[lb]:
            raise DimensionError(
                f"leg {la} of a has extent {a.shape[la]}, "
                f"leg {lb} of b has extent {b.shape[lb]}"
            )
    return np.tensordot(a, b, axes=(legs_a, legs_b))


@dataclass(frozen=True)
class SvdSplit:
    """Truncated factorization ``m ~ left_isometry @ diag(singular_values) @ right_factor``."""

    left_isometry: np.ndarray
    singular_values: np.ndarray
    right_factor: np.ndarray
    discarded_weight: float

    @property
    def rank(self) -> int:
        return int(self.singular_values.size)


def _svd(m: np.ndarray):
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but robust
        import scipy.linalg

        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def svd_truncate(m: np.ndarray, d_max: int, cutoff: float = 0.0) -> SvdSplit:
    """SVD of a matrix keeping at most ``d_max`` singular values ``>= cutoff``.

    At least one value is always kept. ``discarded_weight`` is the squared norm
    of the dropped singular values relative to the total.
    """
    if d_max < 1:
        raise ValidationError(f"d_max must be >= 1, got {d_max}")
    if cutoff < 0:
        raise ValidationError(f"cutoff must be >= 0, got {cutoff}")
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got rank {m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericError("non-finite entries in matrix passed to svd_truncate")

    u, s, vh = _svd(m)
    keep = int(np.count_nonzero(s >= cutoff))
    keep = max(1, min(keep, d_max))
    total = float(np.sum(s**2))
    dropped = float(np.sum(s[keep:] ** 2))
    weight = dropped / total if total > 0 else 0.0
    return SvdSplit(u[:, :keep], s[:keep], vh[:keep, :], weight)


def exp_hermitian(h: np.ndarray, scale: complex) -> np.ndarray:
    """Return ``expm(scale * h)`` for a Hermitian matrix ``h``.

    Round-off asymmetry below ``1e-12`` (relative to the largest entry) is
    symmetrized away; anything larger is rejected.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {h.shape}")
    size = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    if np.max(np.abs(h - h.conj().T), initial=0.0) > HERMITIAN_TOL * size:
        raise ValidationError("matrix is not Hermitian")
    h = 0.5 * (h + h.conj().T)
    w, v = np.linalg.eigh(h)
    return (v * np.exp(scale * w)) @ v.conj().T
