"""Sampling measurement records and conditioned observables.

A record is drawn step by step: the system state plus fresh ancillas is
evolved through the Trotter layers, then the ancilla outcomes are drawn site
by site from their exact conditional marginals (perfect ancestral sampling),
and the system is left in the state conditioned on those outcomes.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .collision import (
    DEFAULT_CUTOFF,
    N_OP,
    ModelParams,
    Project,
    _split_joint,
    close_ancillas,
    evolve_with_fresh_ancillas,
)
from .errors import NumericError, ValidationError
from .large_deviations import normalize_trace
from .mps import Mps, compress, local_expectations, maximally_mixed

NEGATIVE_TOL = 1e-10


@dataclass(frozen=True)
class TrajectoryRecord:
    outcomes: np.ndarray
    log_prob: float
    occupations: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.outcomes.shape != self.occupations.shape:
            raise ValidationError("outcomes and occupations must both be T x L")
        if self.log_prob > 1e-9:
            raise ValidationError(f"log_prob {self.log_prob} > 0")

    @property
    def T(self) -> int:
        return self.outcomes.shape[0]

    @property
    def L(self) -> int:
        return self.outcomes.shape[1]

    @property
    def activity(self) -> float:
        return float(self.outcomes.sum()) / self.outcomes.size


@dataclass(frozen=True)
class SampleEnsemble:
    records: tuple[TrajectoryRecord, ...]
    params: ModelParams
    seed: int

    def __post_init__(self):
        shapes = {r.outcomes.shape for r in self.records}
        if len(shapes) > 1:
            raise ValidationError(f"records have different shapes: {shapes}")

    @property
    def activities(self) -> np.ndarray:
        return np.array([r.activity for r in self.records])


def _site_transfers(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrices for a joint site with the system traced and the ancilla
    traced, projected on 0, or projected on 1."""
    v = _split_joint(t)  # (l, sb, ab, sk, ak, r)
    p0 = np.einsum("lsxsxr->lr", v[:, :, :1, :, :1, :])
    p1 = np.einsum("lsxsxr->lr", v[:, :, 1:, :, 1:, :])
    return p0 + p1, p0, p1


def sample_step_outcomes(
    joint: Mps,
    rng: np.random.Generator | None,
    forced: Sequence[int] | None = None,
    d_max: int = 96,
    cutoff: float = DEFAULT_CUTOFF,
    condition: bool = True,
):
    """Draw one step's outcomes from a joint state with open ancilla legs.

    Site ``i`` is drawn from ``P(k_i | k_<i)``: sites already drawn enter with
    their projectors, later ancillas and all system legs are traced. Right
    environments are computed once, the left one is carried along, so a step
    costs O(L) contractions. With ``forced`` the given outcomes are used
    instead of random draws and their log-probability is returned.

    Returns ``(outcomes, conditioned_state, log_weight)`` with the state
    normalized to unit trace, or ``(outcomes, log_weight)`` when
    ``condition`` is false.
    """
    n = len(joint)
    mats = [_site_transfers(t) for t in joint.sites]
    right = [np.ones(1, dtype=complex)] * (n + 1)
    for i in range(n - 1, -1, -1):
        right[i] = mats[i][0] @ right[i + 1]
    left = np.ones(1, dtype=complex)
    bits = []
    log_weight = 0.0
    for i in range(n):
        _, m0, m1 = mats[i]
        w0 = (left @ m0 @ right[i + 1]).real
        w1 = (left @ m1 @ right[i + 1]).real
        total = w0 + w1
        if not total > 0:
            raise NumericError(f"non-positive marginal normalization at site {i}")
        probs = []
        for w in (w0, w1):
            if w < -NEGATIVE_TOL * total:
                raise NumericError(f"negative marginal {w / total} at site {i}")
            probs.append(max(w, 0.0) / total)
        if forced is not None:
            k = int(forced[i])
        else:
            k = int(rng.random() < probs[1])
        if probs[k] == 0:
            bits = tuple(bits) + (k,) + tuple(int(x) for x in forced[i + 1 :])
            return (bits, None, -math.inf) if condition else (bits, -math.inf)
        log_weight += math.log(probs[k])
        bits.append(k)
        left = left @ (m1 if k else m0)
        left = left / np.max(np.abs(left))
    if not condition:
        return tuple(bits), log_weight
    state = close_ancillas(joint, Project(tuple(bits)))
    state, _ = compress(state, d_max, cutoff)
    return tuple(bits), normalize_trace(state), log_weight


class _JointCache:
    """Bounded map from an outcome history to the next pre-measurement state.

    The conditioned state is a deterministic function of the history, so
    trajectories sharing a prefix can reuse the layer evolution.
    """

    def __init__(self, max_entries: int = 4096):
        self.max_entries = max_entries
        self._data: OrderedDict = OrderedDict()

    def get(self, key):
        if key in self._data:
            self._data.move_to_end(key)
            return self._data[key]
        return None

    def put(self, key, value):
        if self.max_entries <= 0:
            return
        self._data[key] = value
        if len(self._data) > self.max_entries:
            self._data.popitem(last=False)


def run_trajectory(
    p: ModelParams,
    rho0: Mps | None,
    T: int,
    seed: int | None = None,
    d_max: int = 96,
    cutoff: float = DEFAULT_CUTOFF,
    forced: np.ndarray | None = None,
    cache: _JointCache | None = None,
) -> TrajectoryRecord:
    """Sample (or replay, with ``forced``) a ``T``-step record.

    ``occupations[m, i]`` is ``<n_i>`` in the state conditioned on the
    outcomes of steps ``1..m+1``.
    """
    if T < 1:
        raise ValidationError("T must be >= 1")
    if forced is not None and np.shape(forced) != (T, p.L):
        raise ValidationError(f"forced outcomes must have shape {(T, p.L)}")
    rng = np.random.default_rng(seed)
    state = normalize_trace(rho0 if rho0 is not None else maximally_mixed(p.L))
    outcomes = np.zeros((T, p.L), dtype=np.int8)
    occupations = np.zeros((T, p.L))
    log_prob = 0.0
    history: tuple = ()
    for t in range(T):
        joint = cache.get(history) if cache is not None else None
        if joint is None:
            joint, _ = evolve_with_fresh_ancillas(state, p, d_max, cutoff)
            if cache is not None:
                cache.put(history, joint)
        bits, lw = sample_step_outcomes(
            joint, rng, None if forced is None else forced[t], d_max, cutoff, condition=False
        )
        outcomes[t] = bits
        log_prob += lw
        if lw == -math.inf:
            # replayed record of probability zero
            return TrajectoryRecord(outcomes, -math.inf, occupations, seed)
        history = history + (bits,)
        hit = cache.get(history + ("state",)) if cache is not None else None
        if hit is None:
            state = normalize_trace(compress(close_ancillas(joint, Project(bits)), d_max, cutoff)[0])
            occ = local_expectations(state, N_OP).real
            if np.any(occ < -1e-8) or np.any(occ > 1 + 1e-8):
                raise NumericError(f"occupation outside [0, 1]: {occ}")
            occ = np.clip(occ, 0.0, 1.0)
            if cache is not None:
                cache.put(history + ("state",), (state, occ))
        else:
            state, occ = hit
        occupations[t] = occ
    return TrajectoryRecord(outcomes, log_prob, occupations, seed)


def record_seeds(seed: int, n: int) -> list[int]:
    """Per-record seeds, fully determined by the ensemble seed."""
    return [int(x) for x in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def sample_records(
    p: ModelParams,
    rho0: Mps | None,
    T: int,
    seeds: Sequence[int],
    d_max: int = 96,
    cutoff: float = DEFAULT_CUTOFF,
    cache_entries: int = 4096,
) -> list[TrajectoryRecord]:
    """One record per seed, sharing a cache of already-evolved histories."""
    cache = _JointCache(cache_entries)
    return [run_trajectory(p, rho0, T, rs, d_max, cutoff, cache=cache) for rs in seeds]


def sample_ensemble(
    p: ModelParams,
    rho0: Mps | None,
    T: int,
    n_samples: int,
    seed: int,
    d_max: int = 96,
    cutoff: float = DEFAULT_CUTOFF,
    cache_entries: int = 4096,
) -> SampleEnsemble:
    """``n_samples`` independent records from the unbiased dynamics.

    Record ``j`` depends only on ``(seed, j)``, so ensembles of different
    sizes with the same seed share their leading records.
    """
    seeds = record_seeds(seed, n_samples)
    records = sample_records(p, rho0, T, seeds, d_max, cutoff, cache_entries)
    return SampleEnsemble(tuple(records), p, seed)


@dataclass(frozen=True)
class StringCorrelator:
    lengths: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    central_values: np.ndarray
    central_stderr: np.ndarray


def _string_products(occ: np.ndarray, site: int, max_len: int) -> np.ndarray:
    """``prod_{m<=l} occ[m, site]`` for l = 1..max_len, one row per record."""
    return np.cumprod(occ[:, :max_len, site], axis=1)


def central_sites(L: int) -> tuple[int, int]:
    return (L - 1) // 2, L // 2


def string_correlator(ensemble: SampleEnsemble, site: int, max_len: int) -> StringCorrelator:
    """Monte Carlo estimate of ``C_l`` at ``site`` and averaged over the two central sites."""
    if not ensemble.records:
        raise ValidationError("empty ensemble")
    T, L = ensemble.records[0].outcomes.shape
    if not 1 <= max_len <= T:
        raise ValidationError(f"max_len must be in [1, {T}]")
    if not 0 <= site < L:
        raise ValidationError(f"site must be in [0, {L})")
    occ = np.stack([r.occupations for r in ensemble.records])
    n = occ.shape[0]

    def summarize(prods):
        mean = prods.mean(axis=0)
        err = prods.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        return mean, err

    values, stderr = summarize(_string_products(occ, site, max_len))
    c1, c2 = central_sites(L)
    central = 0.5 * (_string_products(occ, c1, max_len) + _string_products(occ, c2, max_len))
    cvals, cerr = summarize(central)
    return StringCorrelator(np.arange(1, max_len + 1), values, stderr, cvals, cerr)


def activity_histogram(ensemble: SampleEnsemble, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized density of per-record mean activity on ``[0, 1]``."""
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    if not ensemble.records:
        raise ValidationError("empty ensemble")
    dens, edges = np.histogram(ensemble.activities, bins=bins, range=(0.0, 1.0), density=True)
    return 0.5 * (edges[:-1] + edges[1:]), dens


# ----------------------------------------------------------------------- files


def format_record(record: TrajectoryRecord, seed: int | None = None) -> str:
    seed = record.seed if seed is None else seed
    lines = [f"{record.L} {record.T} {seed} {record.log_prob!r}"]
    lines += [" ".join(str(int(b)) for b in row) for row in record.outcomes]
    lines += [" ".join(repr(float(x)) for x in row) for row in record.occupations]
    return "\n".join(lines) + "\n"


def parse_record(text: str) -> TrajectoryRecord:
    rows = [ln.split() for ln in text.strip().splitlines()]
    L, T, seed, log_prob = int(rows[0][0]), int(rows[0][1]), rows[0][2], float(rows[0][3])
    outcomes = np.array(rows[1 : 1 + T], dtype=np.int8).reshape(T, L)
    occ = np.array(rows[1 + T : 1 + 2 * T], dtype=float).reshape(T, L)
    return TrajectoryRecord(outcomes, log_prob, occ, None if seed == "None" else int(seed))


def write_ensemble(ensemble: SampleEnsemble, directory: Path, extra: dict | None = None) -> Path:
    """One text file per record plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rec in enumerate(ensemble.records):
        name = f"traj_{i:06d}.txt"
        (directory / name).write_text(format_record(rec))
        names.append(name)
    manifest = {
        "seed": ensemble.seed,
        "params": ensemble.params.__dict__,
        "records": names,
        **(extra or {}),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_ensemble(directory: Path) -> SampleEnsemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    records = tuple(parse_record((directory / n).read_text()) for n in manifest["records"])
    return SampleEnsemble(records, ModelParams(**manifest["params"]), manifest["seed"])
