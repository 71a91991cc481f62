"""SCGF, activity, rate function and critical bias from the tilted step.

The SCGF per site and step is ``theta(s) = ln Lambda(s) / L`` with
``Lambda(s)`` the dominant eigenvalue of the tilted channel. It is obtained by
power iteration on a vectorized-density MPS, estimating ``Lambda`` each step
as the ratio of traces after and before the step.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .collision import (
    DEFAULT_CUTOFF,
    ModelParams,
    Tilt,
    TiltDerivative,
    apply_adjoint_step,
    apply_collision_step,
)
from .errors import DegenerateEigenvectorError, NumericError, ValidationError
from .mps import Mps, identity_operator, inner, maximally_mixed, trace_vectorized

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverSettings:
    d_max: int = 96
    cutoff: float = DEFAULT_CUTOFF
    tol: float = 1e-10
    max_iter: int = 2000
    patience: int = 3
    d_max_ref: int | None = None


@dataclass(frozen=True)
class ScgfPoint:
    s: float
    theta: float
    activity: float | None = None
    d_max: int = 0
    iterations: int = 1
    final_step_residual: float = 0.0
    truncation_error_last_step: float = 0.0
    error_bar: float | None = None
    converged: bool = True

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise NumericError(f"theta is not finite at s={self.s}")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.error_bar is not None and self.error_bar < 0:
            raise ValidationError("error_bar must be >= 0")


@dataclass(frozen=True)
class ScgfCurve:
    params: ModelParams
    points: tuple[ScgfPoint, ...]
    a0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(sorted(self.points, key=lambda q: q.s)))
        s = [q.s for q in self.points]
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValidationError("s values of a curve must be distinct")

    @property
    def s(self) -> np.ndarray:
        return np.array([q.s for q in self.points])

    @property
    def theta(self) -> np.ndarray:
        return np.array([q.theta for q in self.points])

    @property
    def activity(self) -> np.ndarray:
        return np.array([np.nan if q.activity is None else q.activity for q in self.points])


@dataclass(frozen=True)
class RateFunctionCurve:
    """Rate function samples.

    ``samples`` holds the parametric pairs ``(a(s), -s a(s) - theta(s))``;
    ``grid`` holds ``(a, sup_s[-s a - theta(s)])`` on a uniform grid in
    ``[0, 1]`` with ``None`` where the supremum is not attained on the curve.
    """

    samples: tuple[tuple[float, float], ...]
    grid: tuple[tuple[float, float | None], ...] = ()

    def __post_init__(self):
        for a, phi in self.samples:
            if not -1e-10 <= a <= 1 + 1e-10:
                raise ValidationError(f"activity {a} outside [0, 1]")
            if phi < -1e-10:
                raise ValidationError(f"negative rate function value {phi} at a={a}")


@dataclass(frozen=True)
class SStarEstimate:
    per_L: tuple[tuple[int, float], ...]
    s_star: float | None
    uncertainty: float | None
    diagnostics: tuple[str, ...] = ()


# ----------------------------------------------------------------- power method


# Truncation does not preserve hermiticity exactly, so the trace picks up a
# small phase each step. It is tolerated and removed, otherwise it would
# accumulate over many steps.
TRACE_IMAG_TOL = 0.1


def normalize_trace(state: Mps) -> Mps:
    tr = trace_vectorized(state)
    if not tr.real > 0 or abs(tr.imag) > TRACE_IMAG_TOL * tr.real:
        raise NumericError(f"trace {tr} is not positive")
    sites = list(state.sites)
    sites[0] = sites[0] * (abs(tr) / tr)
    return Mps(tuple(sites), state.log_norm - math.log(abs(tr)), state.center)


def _iterate(step, state, n_sites, s, settings):
    theta_prev = None
    streak = 0
    residual = math.inf
    theta = math.nan
    err = 0.0
    it = 0
    for it in range(1, settings.max_iter + 1):
        out, log_weight, err = step(state)
        if not math.isfinite(log_weight):
            raise NumericError(f"trace collapsed to zero at s={s}")
        theta = log_weight / n_sites
        log.debug("s=%g it=%d theta=%.15g trunc=%.3e", s, it, theta, err)
        state = normalize_trace(out)
        if theta_prev is not None:
            residual = abs(theta - theta_prev)
            streak = streak + 1 if residual < settings.tol else 0
            if streak >= settings.patience:
                return theta, state, it, residual, err, True
        theta_prev = theta
    log.warning("power iteration at s=%g did not converge in %d steps", s, it)
    return theta, state, it, residual, err, False


def power_iterate_scgf(
    p: ModelParams,
    s: float,
    settings: SolverSettings = SolverSettings(),
    rho_init: Mps | None = None,
) -> tuple[ScgfPoint, Mps]:
    """Dominant eigenvalue and right eigenvector of the tilted step.

    Starts from ``rho_init`` (default: the maximally mixed state) and stops
    once successive estimates of theta differ by less than ``tol`` for
    ``patience`` consecutive steps. Non-convergence is reported through
    ``ScgfPoint.converged``.
    """
    if settings.tol <= 0:
        raise ValidationError("tol must be positive")
    rho = normalize_trace(rho_init if rho_init is not None else maximally_mixed(p.L))
    closure = Tilt(s)

    def step(state):
        return apply_collision_step(state, p, closure, settings.d_max, settings.cutoff)

    theta, rho, it, res, err, ok = _iterate(step, rho, p.L, s, settings)
    point = ScgfPoint(s, theta, None, settings.d_max, it, res, err, None, ok)
    return point, rho


def left_fixed_point(
    p: ModelParams,
    s: float,
    settings: SolverSettings = SolverSettings(),
    rho: Mps | None = None,
    omega_init: Mps | None = None,
) -> tuple[ScgfPoint, Mps]:
    """Dominant left eigenvector of the tilted step, by power iteration on the adjoint.

    If ``rho`` is given the result is scaled so that ``<omega|rho> = 1``,
    otherwise to unit trace.
    """
    omega = normalize_trace(omega_init if omega_init is not None else identity_operator(p.L))

    def step(state):
        return apply_adjoint_step(state, p, s, settings.d_max, settings.cutoff)

    theta, omega, it, res, err, ok = _iterate(step, omega, p.L, s, settings)
    if rho is not None:
        overlap = inner(omega, rho)
        if abs(overlap) < 1e-12:
            raise DegenerateEigenvectorError("left and right eigenvectors are orthogonal")
        omega = omega.scaled(-math.log(abs(overlap)))
    point = ScgfPoint(s, theta, None, settings.d_max, it, res, err, None, ok)
    return point, omega


def activity_hellmann_feynman(
    p: ModelParams,
    s: float,
    rho_s: Mps,
    omega_s: Mps | None,
    theta: float,
    d_max: int = 96,
    cutoff: float = DEFAULT_CUTOFF,
) -> float:
    """``a(s) = -<omega|E'_s|rho> / (L Lambda <omega|rho>)``.

    With ``omega_s=None`` the identity is used, which is the exact left
    eigenvector at ``s = 0``.
    """
    if omega_s is None:
        omega_s = identity_operator(p.L)
    norm = inner(omega_s, rho_s)
    if abs(norm) < 1e-12 * math.exp(omega_s.log_norm + rho_s.log_norm):
        raise DegenerateEigenvectorError("<omega|rho> vanishes")
    drho, _, _ = apply_collision_step(rho_s, p, TiltDerivative(s), d_max, cutoff)
    value = inner(omega_s, drho) / norm
    a = -value / (p.L * math.exp(p.L * theta))
    if abs(a.imag) > 1e-8 * max(1.0, abs(a.real)):
        raise NumericError(f"activity has imaginary part {a.imag}")
    return float(a.real)


def stationary_activity(p: ModelParams, d_max: int = 96, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Mean activity of the unbiased dynamics, from its exact fixed point.

    The channel is unital, so ``I / 2^L`` is stationary and the identity is
    the left eigenvector; no power iteration is needed.
    """
    return activity_hellmann_feynman(p, 0.0, maximally_mixed(p.L), None, 0.0, d_max, cutoff)


# ------------------------------------------------------------ curve analysis


def activity_finite_difference(curve: ScgfCurve, overwrite: bool = False) -> ScgfCurve:
    """Fill activities with ``-dtheta/ds`` from second-order differences.

    Interior points use centered differences on the (possibly non-uniform)
    grid, the two end points one-sided ones. Existing activities are kept
    unless ``overwrite`` is set.
    """
    if len(curve.points) < 3:
        raise ValidationError("need at least 3 points for finite differences")
    a = -np.gradient(curve.theta, curve.s, edge_order=1)
    points = tuple(
        q if (q.activity is not None and not overwrite) else replace(q, activity=float(ai))
        for q, ai in zip(curve.points, a)
    )
    return replace(curve, points=points)


def legendre_sup(curve: ScgfCurve, a_values) -> np.ndarray:
    """``max_j [-s_j a - theta_j]`` over the computed points, for each ``a``."""
    a_values = np.atleast_1d(np.asarray(a_values, dtype=float))
    return np.max(-np.outer(a_values, curve.s) - curve.theta[None, :], axis=1)


def rate_function_legendre(curve: ScgfCurve, n_grid: int = 101) -> RateFunctionCurve:
    """Rate function by parametric evaluation and by a grid supremum."""
    if not curve.points:
        raise ValidationError("empty curve")
    act = curve.activity
    if np.any(np.isnan(act)):
        raise ValidationError("curve activities must be filled first")
    phi = -curve.s * act - curve.theta
    samples = tuple((float(a), float(f)) for a, f in zip(act, phi))

    lo, hi = float(act.min()), float(act.max())
    grid_a = np.linspace(0.0, 1.0, n_grid)
    sup = legendre_sup(curve, grid_a)
    eps = 1e-12
    grid = tuple(
        (float(a), float(f) if lo - eps <= a <= hi + eps else None)
        for a, f in zip(grid_a, sup)
    )
    return RateFunctionCurve(samples, grid)


def _crossing(curve: ScgfCurve, eps: float) -> tuple[float | None, str | None]:
    if curve.a0 is None:
        return None, f"L={curve.params.L}: a0 missing"
    a0 = curve.a0
    cand = [
        (q.theta + a0 * q.s, q.s, q.theta)
        for q in curve.points
        if q.s > 0 and q.theta + a0 * q.s > eps
    ]
    if len(cand) < 2:
        return None, f"L={curve.params.L}: fewer than two points above the bound"
    cand.sort()
    (_, s1, t1), (_, s2, t2) = cand[:2]
    slope = (t2 - t1) / (s2 - s1)
    if slope + a0 == 0:
        return None, f"L={curve.params.L}: extrapolated branch parallel to the bound"
    return (slope * s1 - t1) / (slope + a0), None


def estimate_s_star(curves: Sequence[ScgfCurve], eps: float = 0.0) -> SStarEstimate:
    """Critical bias from the crossing of the inactive branch with ``-a0 s``.

    Per system size, the two ``s > 0`` points lying strictly above the bound
    and closest to it define a line; its intersection with the bound is the
    finite-size crossing. Crossings are then fitted linearly in ``1/L`` and
    extrapolated to ``1/L = 0``; the uncertainty is the standard error of that
    intercept (``None`` with only two sizes).
    """
    per_L, notes = [], []
    for curve in sorted(curves, key=lambda c: c.params.L):
        s_cross, note = _crossing(curve, eps)
        if note:
            notes.append(note)
        else:
            per_L.append((curve.params.L, float(s_cross)))
    if len(per_L) < 2:
        notes.append("extrapolation needs at least two system sizes")
        return SStarEstimate(tuple(per_L), None, None, tuple(notes))

    x = np.array([1.0 / L for L, _ in per_L])
    y = np.array([sc for _, sc in per_L])
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    n = len(x)
    uncertainty = None
    if n > 2:
        resid = y - design @ coef
        sigma2 = float(resid @ resid) / (n - 2)
        cov = sigma2 * np.linalg.inv(design.T @ design)
        uncertainty = float(math.sqrt(cov[0, 0]))
    return SStarEstimate(tuple(per_L), float(coef[0]), uncertainty, tuple(notes))


def synthetic_curve(
    p: ModelParams, s_grid: Sequence[float], a0: float, c: float, d: float
) -> ScgfCurve:
    """Two-branch test curve ``theta = max(-a0 s, -c) + (d / L) s``.

    The bound is ``-a0 s`` with the given ``a0``, so the exact finite-size
    crossing is ``c / (a0 + d / L)``. For ``d < 0`` every point above the
    bound lies on the inactive branch and the crossing estimator recovers it
    exactly.
    """
    points = []
    for s in sorted(s_grid):
        active = -a0 * s >= -c
        theta = (-a0 * s if active else -c) + d * s / p.L
        act = (a0 if active else 0.0) - d / p.L
        points.append(ScgfPoint(float(s), float(theta), float(act), d_max=0))
    return ScgfCurve(p, tuple(points), a0)


# ------------------------------------------------------------------- scanning


def _warm_start_order(s_grid: Sequence[float]) -> tuple[list[float], list[float]]:
    pos = sorted(x for x in s_grid if x >= 0)
    neg = sorted((x for x in s_grid if x < 0), reverse=True)
    return pos, neg


def _curve_point(p, s, settings, rho, rho_ref, a0, hellmann_feynman):
    point, rho = power_iterate_scgf(p, s, settings, rho)
    if settings.d_max_ref is not None:
        ref_settings = replace(settings, d_max=settings.d_max_ref)
        try:
            ref, rho_ref = power_iterate_scgf(p, s, ref_settings, rho_ref)
            point = replace(point, error_bar=abs(point.theta - ref.theta))
        except NumericError as exc:
            log.warning("reference run at s=%g, d_max=%d failed: %s", s, settings.d_max_ref, exc)
            rho_ref = maximally_mixed(p.L)
    if s == 0:
        point = replace(point, activity=a0)
    elif hellmann_feynman:
        _, omega = left_fixed_point(p, s, settings, rho)
        act = activity_hellmann_feynman(
            p, s, rho, omega, point.theta, settings.d_max, settings.cutoff
        )
        point = replace(point, activity=act)
    return point, rho, rho_ref


def compute_curve(
    p: ModelParams,
    s_grid: Sequence[float],
    settings: SolverSettings = SolverSettings(),
    hellmann_feynman: bool = False,
    skip_failures: bool = False,
) -> ScgfCurve:
    """Power-iterate every ``s`` in the grid, warm-starting along ``|s|``.

    The stationary activity ``a0`` comes from the exact fixed point at s=0.
    With ``hellmann_feynman`` every activity is computed from left and right
    eigenvectors; otherwise only at ``s = 0`` and the rest are left to
    :func:`activity_finite_difference`. With ``settings.d_max_ref`` set, each
    point gets ``error_bar = |theta(d_max) - theta(d_max_ref)|``. With
    ``skip_failures`` a point raising a numeric error is logged and left out.
    """
    if len(s_grid) == 0:
        raise ValidationError("empty s grid")
    a0 = stationary_activity(p, settings.d_max, settings.cutoff)
    points = []
    for chain in _warm_start_order(s_grid):
        rho = maximally_mixed(p.L)
        rho_ref = rho
        for s in chain:
            try:
                point, rho, rho_ref = _curve_point(
                    p, s, settings, rho, rho_ref, a0, hellmann_feynman
                )
            except NumericError as exc:
                if not skip_failures:
                    raise
                log.error("point s=%g (L=%d, V=%g) failed: %s", s, p.L, p.v, exc)
                continue
            points.append(point)
    return ScgfCurve(p, tuple(points), a0)


def bond_dimension_ladder(
    p: ModelParams,
    s: float,
    d_values: Sequence[int],
    settings: SolverSettings = SolverSettings(),
) -> list[ScgfPoint]:
    """Theta at one ``s`` for increasing ``d_max``.

    Rungs are warm-started from the previous fixed point. Every rung after
    the first carries ``error_bar = |theta(d) - theta(previous rung)|``.
    """
    d_values = sorted(int(d) for d in d_values)
    if not d_values or d_values[0] < 1:
        raise ValidationError("d_values must be positive and non-empty")
    points: list[ScgfPoint] = []
    rho = None
    for d in d_values:
        point, rho = power_iterate_scgf(p, s, replace(settings, d_max=d, d_max_ref=None), rho)
        if points:
            point = replace(point, error_bar=abs(point.theta - points[-1].theta))
        log.info("ladder s=%g d_max=%d theta=%.12g (%d it)", s, d, point.theta, point.iterations)
        points.append(point)
    return points


@dataclass(frozen=True)
class PhaseDiagram:
    curves: dict[tuple[int, float], ScgfCurve]
    s_star: dict[float, SStarEstimate]
    failures: dict[tuple[int, float], str] = field(default_factory=dict)

    def activity_table(self) -> list[tuple[int, float, float, float, float]]:
        """Rows ``(L, V/Omega, s, theta, activity)`` sorted by grid index."""
        rows = []
        for (L, ratio), curve in sorted(self.curves.items()):
            for q in curve.points:
                act = math.nan if q.activity is None else q.activity
                rows.append((L, ratio, q.s, q.theta, act))
        return rows


def _default_curve(p, s_grid, settings):
    curve = compute_curve(p, s_grid, settings, skip_failures=True)
    if len(curve.points) >= 3:
        curve = activity_finite_difference(curve)
    return curve


def _curve_job(args, curve_fn=_default_curve):
    try:
        return curve_fn(*args), None
    except (NumericError, ValidationError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def scan_phase_diagram(
    base: ModelParams,
    v_over_omega: Sequence[float],
    s_grid: Sequence[float],
    L_list: Sequence[int],
    settings: SolverSettings = SolverSettings(),
    jobs: int = 1,
    curve_fn: Callable | None = None,
) -> PhaseDiagram:
    """Activity over the ``(V/Omega, s)`` plane and ``s*`` for every ``V/Omega``.

    Each ``(L, V/Omega)`` pair is an independent job; failed jobs are recorded
    in ``failures`` and the scan continues. ``curve_fn(params, s_grid,
    settings)`` may replace the solver, e.g. with synthetic curves.
    """
    if len(v_over_omega) == 0 or len(s_grid) == 0 or len(L_list) == 0:
        raise ValidationError("phase diagram grids must be non-empty")
    keys = [(L, float(r)) for r in v_over_omega for L in L_list]
    tasks = [
        (replace(base, L=L, v=ratio * base.omega), list(s_grid), settings) for L, ratio in keys
    ]
    if curve_fn is not None:
        results = [_curve_job(t, curve_fn) for t in tasks]
    elif jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_curve_job, tasks))
    else:
        results = [_curve_job(t) for t in tasks]

    curves, failures = {}, {}
    for key, (curve, err) in zip(keys, results):
        if curve is None:
            failures[key] = err
            log.error("curve L=%d V/Omega=%g failed: %s", key[0], key[1], err)
        else:
            curves[key] = curve
    s_star = {}
    for ratio in dict.fromkeys(r for _, r in keys):
        group = [c for (L, r), c in curves.items() if r == ratio]
        s_star[ratio] = estimate_s_star(group)
    return PhaseDiagram(curves, s_star, failures)
