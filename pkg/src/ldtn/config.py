"""Run configuration: a flat ``section.key = value`` text file.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Unknown keys are rejected so that typos do not silently fall back to
defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

from .collision import ModelParams
from .errors import ValidationError
from .large_deviations import SolverSettings


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "model.L": (int, 2),
    "model.omega": (float, 1.0),
    "model.v": (float, 2.0),
    "model.gamma": (float, 3.0),
    "model.dt": (float, 1.25),
    "model.n_trotter": (int, 10),
    "solver.d_max": (int, 96),
    "solver.d_max_ref": (_optional_int, 64),
    "solver.cutoff": (float, 1e-14),
    "solver.tol": (float, 1e-10),
    "solver.max_iter": (int, 2000),
    "solver.patience": (int, 3),
    "solver.hellmann_feynman": (_bool, False),
    "grids.s": (_floats, (-0.05, -0.01, 0.0, 0.01, 0.05, 0.2)),
    "grids.v_over_omega": (_floats, ()),
    "grids.L": (_ints, ()),
    "sampling.T": (int, 20),
    "sampling.n_samples": (int, 1000),
    "sampling.seed": (int, 0),
    "sampling.sites": (_ints, ()),
    "sampling.max_len": (_optional_int, None),
    "sampling.bins": (int, 20),
    "output.directory": (str, "out"),
    "synthetic.enabled": (_bool, False),
    "synthetic.a0": (float, 0.5),
    "synthetic.c": (float, 0.01),
    "synthetic.d": (float, -0.05),
    "validate.L": (_ints, (2, 3)),
    "validate.s": (_floats, (-0.05, -0.01, 0.0, 0.01, 0.05, 0.2)),
}


def _canonical(key: str, value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value)


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, updates: dict) -> RunConfig:
        values = dict(self.values)
        for key, v in updates.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = v
        out = replace(self, values=values)
        out.check()
        return out

    def model(self, L: int | None = None, v: float | None = None) -> ModelParams:
        try:
            return ModelParams(
                L=self["model.L"] if L is None else L,
                omega=self["model.omega"],
                v=self["model.v"] if v is None else v,
                gamma=self["model.gamma"],
                dt=self["model.dt"],
                n_trotter=self["model.n_trotter"],
            )
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def solver(self, error_bars: bool = True) -> SolverSettings:
        return SolverSettings(
            d_max=self["solver.d_max"],
            cutoff=self["solver.cutoff"],
            tol=self["solver.tol"],
            max_iter=self["solver.max_iter"],
            patience=self["solver.patience"],
            d_max_ref=self["solver.d_max_ref"] if error_bars else None,
        )

    @property
    def L_list(self) -> tuple[int, ...]:
        return self["grids.L"] or (self["model.L"],)

    @property
    def v_list(self) -> tuple[float, ...]:
        """Interaction strengths V; falls back to the single ``model.v``."""
        omega = self["model.omega"]
        return tuple(r * omega for r in self["grids.v_over_omega"]) or (self["model.v"],)

    def check(self) -> None:
        if self["model.gamma"] < 0:
            raise ConfigError("model.gamma must be >= 0")
        if self["model.omega"] == 0 and self["grids.v_over_omega"]:
            raise ConfigError("grids.v_over_omega needs model.omega != 0")
        if self["solver.d_max"] < 1:
            raise ConfigError("solver.d_max must be >= 1")
        ref = self["solver.d_max_ref"]
        if ref is not None and not 1 <= ref < self["solver.d_max"]:
            raise ConfigError("solver.d_max_ref must lie in [1, solver.d_max)")
        if self["solver.tol"] <= 0 or self["solver.max_iter"] < 1 or self["solver.patience"] < 1:
            raise ConfigError("solver.tol, solver.max_iter and solver.patience must be positive")
        if self["sampling.T"] < 1 or self["sampling.n_samples"] < 1 or self["sampling.bins"] < 1:
            raise ConfigError("sampling.T, sampling.n_samples and sampling.bins must be >= 1")
        if not 0 <= self["sampling.seed"] < 2**64:
            raise ConfigError("sampling.seed must be an unsigned 64-bit integer")
        if any(L < 1 for L in self.L_list):
            raise ConfigError("system sizes must be >= 1")
        self.model()

    def canonical_text(self) -> str:
        """Resolved configuration, one sorted ``key = value`` line each."""
        return "".join(f"{k} = {_canonical(k, self.values[k])}\n" for k in sorted(self.values))

    def hash(self) -> str:
        """Short digest of every setting except the output location."""
        text = "".join(
            ln for ln in self.canonical_text().splitlines(True) if not ln.startswith("output.")
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    cfg = RunConfig(values)
    cfg.check()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.check()
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
