"""Dense-oracle checks of the tensor-network pipeline on small chains."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import oracle
from .collision import ModelParams, Tilt, apply_collision_step
from .errors import ValidationError
from .large_deviations import (
    SolverSettings,
    activity_hellmann_feynman,
    left_fixed_point,
    power_iterate_scgf,
)
from .mps import Mps
from .trajectories import run_trajectory

MAX_VALIDATE_L = 3


@dataclass(frozen=True)
class CheckResult:
    name: str
    deviation: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{flag}  {self.name:<28} max_dev={self.deviation:.3e}  tol={self.tolerance:.1e}{extra}"


def lossless(L: int, tol: float = 1e-12) -> SolverSettings:
    return SolverSettings(d_max=4**L, cutoff=0.0, tol=tol, max_iter=5000)


def random_density(L: int, rng: np.random.Generator) -> np.ndarray:
    dim = 2**L
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def density_mps(rho: np.ndarray, L: int) -> Mps:
    return Mps.from_dense(oracle.vectorize_density(rho, L), [4] * L)


def check_kraus_completeness(base: ModelParams, Ls: Sequence[int]) -> CheckResult:
    dev = 0.0
    for L, trot in itertools.product(Ls, (False, True)):
        ks = oracle.kraus_set(replace(base, L=L), trot)
        total = sum(k.conj().T @ k for k in ks)
        dev = max(dev, float(np.abs(total - np.eye(2**L)).max()))
    return CheckResult("kraus_completeness", dev, 1e-10)


def check_trace_preservation(base: ModelParams, Ls: Sequence[int], seed: int = 7) -> CheckResult:
    """``Tr E_0(rho) = Tr rho`` for random states, through the MPS step."""
    rng = np.random.default_rng(seed)
    dev = 0.0
    for L in Ls:
        p = replace(base, L=L)
        for _ in range(3):
            state = density_mps(random_density(L, rng), L)
            _, log_weight, _ = apply_collision_step(state, p, Tilt(0.0), 4**L, 0.0)
            dev = max(dev, abs(log_weight))
    return CheckResult("trace_preservation", dev, 1e-10)


def check_step_vs_dense(
    base: ModelParams, Ls: Sequence[int], s_values: Sequence[float], seed: int = 11
) -> CheckResult:
    """One tilted MPS step against the densified Trotterized superoperator."""
    rng = np.random.default_rng(seed)
    dev = 0.0
    for L in Ls:
        p = replace(base, L=L)
        rho = random_density(L, rng)
        state = density_mps(rho, L)
        for s in s_values:
            out, _, _ = apply_collision_step(state, p, Tilt(s), 4**L, 0.0)
            m = oracle.dense_tilted_superoperator(p, s, trotterized=True)
            ref = m.matrix @ oracle.vectorize_density(rho, L)
            dev = max(dev, float(np.abs(out.to_dense() - ref).max()))
    return CheckResult("step_vs_dense", dev, 1e-10)


def check_scgf_vs_dense(
    base: ModelParams, Ls: Sequence[int], s_values: Sequence[float]
) -> CheckResult:
    dev = 0.0
    worst = ""
    for L in Ls:
        p = replace(base, L=L)
        rho = None
        for s in sorted(s_values, key=abs):
            point, rho = power_iterate_scgf(p, s, lossless(L), rho)
            lam, _, _ = oracle.dense_dominant_eig(
                oracle.dense_tilted_superoperator(p, s, trotterized=True)
            )
            d = abs(point.theta - math.log(lam) / L)
            if d >= dev:
                dev, worst = d, f"worst at L={L}, s={s:g}"
    return CheckResult("scgf_vs_dense", dev, 1e-8, worst)


def check_hellmann_feynman(
    base: ModelParams, s_values: Sequence[float], L: int = 2, h: float = 1e-3
) -> CheckResult:
    """Eigenvector activity against centered differences of theta, relative."""
    p = replace(base, L=L)
    settings = lossless(L, 1e-13)
    dev = 0.0
    for s in s_values:
        point, rho = power_iterate_scgf(p, s, settings)
        _, omega = left_fixed_point(p, s, settings, rho)
        a_hf = activity_hellmann_feynman(p, s, rho, omega, point.theta, 4**L, 0.0)
        up, _ = power_iterate_scgf(p, s + h, settings, rho)
        down, _ = power_iterate_scgf(p, s - h, settings, rho)
        a_fd = -(up.theta - down.theta) / (2 * h)
        dev = max(dev, abs(a_hf - a_fd) / max(abs(a_fd), 1e-300))
    return CheckResult("hellmann_feynman_vs_fd", dev, 1e-4, f"L={L}, h={h:g}")


def check_trotter_scaling(base: ModelParams, ns: Sequence[int] = (5, 10, 20)) -> CheckResult:
    defects = [oracle.trotter_defect(replace(base, L=2, n_trotter=n)) for n in ns]
    ratios = [a / b for a, b in zip(defects, defects[1:])]
    dev = max(abs(r - 2.0) for r in ratios)
    detail = "defects " + ", ".join(f"{d:.4g}" for d in defects)
    return CheckResult("trotter_scaling", dev, 0.3, detail)


def check_sampling_chain_rule(base: ModelParams, L: int = 2, T: int = 2) -> CheckResult:
    """Replayed record probabilities against exhaustive enumeration."""
    p = replace(base, L=L)
    rho0 = np.eye(2**L) / 2**L
    dev = 0.0
    total = 0.0
    for record, prob in oracle.enumerate_trajectory_probs(p, rho0, T, trotterized=True):
        rec = run_trajectory(p, None, T, forced=record, d_max=4**L, cutoff=0.0)
        q = math.exp(rec.log_prob)
        total += q
        dev = max(dev, abs(q - prob))
    dev = max(dev, abs(total - 1.0))
    return CheckResult("sampling_chain_rule", dev, 1e-9, f"L={L}, T={T}")


def run_validation(
    base: ModelParams,
    Ls: Sequence[int] = (2, 3),
    s_values: Sequence[float] = (-0.05, -0.01, 0.0, 0.01, 0.05, 0.2),
    report: Callable[[CheckResult], None] | None = None,
) -> list[CheckResult]:
    """Run every check, calling ``report`` as each one finishes."""
    Ls = [L for L in Ls if L <= MAX_VALIDATE_L]
    if not Ls:
        raise ValidationError(f"validation needs at least one L <= {MAX_VALIDATE_L}")
    checks = [
        ("kraus_completeness", lambda: check_kraus_completeness(base, Ls)),
        ("trace_preservation", lambda: check_trace_preservation(base, Ls)),
        ("step_vs_dense", lambda: check_step_vs_dense(base, Ls, (0.0, 0.3, -0.2))),
        ("scgf_vs_dense", lambda: check_scgf_vs_dense(base, Ls, s_values)),
        ("hellmann_feynman", lambda: check_hellmann_feynman(base, s_values, L=min(Ls))),
        ("trotter_scaling", lambda: check_trotter_scaling(base)),
        ("sampling_chain_rule", lambda: check_sampling_chain_rule(base)),
    ]
    results = []
    for name, check in checks:
        try:
            result = check()
        except (ArithmeticError, ValueError) as exc:
            # a check that cannot even complete counts as failed
            result = CheckResult(name, math.inf, 0.0, f"{type(exc).__name__}: {exc}")
        results.append(result)
        if report is not None:
            report(result)
    return results
