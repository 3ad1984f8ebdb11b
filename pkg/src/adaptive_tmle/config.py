"""Run configuration: a key=value file, flag overrides, and validation.

Precedence, highest first: command-line flags, config-file entries, the
APS_SEED environment variable (seed only), built-in defaults. Every
validation error names the offending field.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from adaptive_tmle.errors import ConfigError

COMMANDS = ("analyze", "simulate", "permute")
PRESET_TOKENS = ("unadjusted", "static", "small-aps", "large-aps")
SCALES = ("auto", "difference", "ratio")
TARGETS = ("sample", "population", "conditional")

_SCENARIO_ALIASES = {
    "linear": "linear",
    "interactive": "interactive",
    "polynomial": "polynomial",
    "treatmentonly": "treatment_only",
    "treatment_only": "treatment_only",
    "treatment-only": "treatment_only",
}


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one CLI run."""

    command: str
    data: str | None = None
    outcome_col: str | None = None
    treatment_col: str | None = None
    covariate_cols: tuple[str, ...] | None = None
    strata_col: str | None = None
    outcome_type: str = "auto"
    allocation: float | None = None
    subgroups: tuple[str, ...] = ()
    outcome_kind: tuple[str, ...] = ("binary",)
    scenario: tuple[str, ...] = ("linear",)
    n: tuple[int, ...] = (500,)
    design: tuple[str, ...] = ("simple",)
    null_effect: bool = False
    replicates: int = 200
    estimators: tuple[str, ...] = PRESET_TOKENS
    static_covariate: str | None = None
    scale: str = "auto"
    target: str = "sample"
    v: int | None = None
    seed: int = 0
    b: int = 200
    workers: int = 1
    outdir: str = "out"

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        if not self.estimators:
            raise ConfigError("estimators must list at least one preset")
        for token in self.estimators:
            if token not in PRESET_TOKENS:
                raise ConfigError(f"estimators: unknown preset {token!r} (choose from {PRESET_TOKENS})")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.outcome_type not in ("auto", "binary", "continuous"):
            raise ConfigError(f"outcome_type must be auto, binary, or continuous, got {self.outcome_type!r}")
        if self.v is not None and self.v < 2:
            raise ConfigError(f"v must be at least 2, got {self.v}")
        if self.replicates < 1:
            raise ConfigError(f"replicates must be positive, got {self.replicates}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")
        if self.allocation is not None and not 0.0 < self.allocation < 1.0:
            raise ConfigError(f"allocation must lie in (0, 1), got {self.allocation}")
        for kind in self.outcome_kind:
            if kind not in ("binary", "continuous"):
                raise ConfigError(f"outcome_kind: unknown value {kind!r}")
        for scen in self.scenario:
            if scen not in _SCENARIO_ALIASES.values():
                raise ConfigError(f"scenario: unknown value {scen!r}")
        for dgn in self.design:
            if dgn not in ("simple", "stratified"):
                raise ConfigError(f"design: unknown value {dgn!r}")
        for count in self.n:
            if count < 10:
                raise ConfigError(f"n must be at least 10, got {count}")
        if self.command in ("analyze", "permute"):
            if self.data is None:
                raise ConfigError("data: a CSV path is required for analyze and permute")
            if self.outcome_col is None or self.treatment_col is None:
                raise ConfigError("outcome and treatment column names are required with a data file")
        if self.command == "permute" and self.b < 100:
            raise ConfigError(f"b must be at least 100 permutations, got {self.b}")


def _split(value: str) -> list[str]:
    return [tok.strip() for tok in value.split(",") if tok.strip()]


def _to_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


def _to_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}") from None


def _to_bool(value: str, key: str) -> bool:
    token = value.strip().lower()
    if token in ("true", "yes", "1", "on"):
        return True
    if token in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key} must be true or false, got {value!r}")


def _norm_scenarios(value: str) -> tuple[str, ...]:
    out = []
    for tok in _split(value):
        key = tok.strip().lower()
        if key not in _SCENARIO_ALIASES:
            raise ConfigError(f"scenario: unknown value {tok!r}")
        out.append(_SCENARIO_ALIASES[key])
    return tuple(out)


def _norm_presets(value: str) -> tuple[str, ...]:
    out = []
    for tok in _split(value):
        canon = tok.strip().lower().replace("_", "-")
        if canon not in PRESET_TOKENS:
            raise ConfigError(f"estimators: unknown preset {tok!r} (choose from {PRESET_TOKENS})")
        out.append(canon)
    return tuple(out)


_COERCERS = {
    "command": lambda v: v.strip().lower(),
    "data": lambda v: v.strip(),
    "outcome": lambda v: v.strip(),
    "treatment": lambda v: v.strip(),
    "covariates": lambda v: tuple(_split(v)),
    "strata": lambda v: v.strip(),
    "outcome_type": lambda v: v.strip().lower(),
    "allocation": lambda v: _to_float(v, "allocation"),
    "subgroup": lambda v: tuple(tok.strip() for tok in v.split(";") if tok.strip()),
    "outcome_kind": lambda v: tuple(tok.lower() for tok in _split(v)),
    "scenario": _norm_scenarios,
    "n": lambda v: tuple(_to_int(tok, "n") for tok in _split(v)),
    "design": lambda v: tuple(tok.lower() for tok in _split(v)),
    "null": lambda v: _to_bool(v, "null"),
    "replicates": lambda v: _to_int(v, "replicates"),
    "estimators": _norm_presets,
    "static_covariate": lambda v: v.strip(),
    "scale": lambda v: v.strip().lower(),
    "target": lambda v: v.strip().lower(),
    "v": lambda v: _to_int(v, "v"),
    "seed": lambda v: _to_int(v, "seed"),
    "b": lambda v: _to_int(v, "b"),
    "workers": lambda v: _to_int(v, "workers"),
    "outdir": lambda v: v.strip(),
}

_FIELD_NAMES = {
    "outcome": "outcome_col",
    "treatment": "treatment_col",
    "covariates": "covariate_cols",
    "strata": "strata_col",
    "subgroup": "subgroups",
    "null": "null_effect",
}


def read_config_file(path: str) -> dict[str, str]:
    """Raw key=value pairs from a config file; later duplicates win."""
    try:
        with open(path) as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    entries: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {text!r}")
        key, _, value = text.partition("=")
        entries[key.strip().lower()] = value.strip()
    return entries


def parse_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge file, flag, and environment settings into a validated RunConfig."""
    raw = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    if "seed" not in raw and os.environ.get("APS_SEED"):
        raw["seed"] = os.environ["APS_SEED"]
    fields: dict[str, object] = {}
    for key, value in raw.items():
        if key not in _COERCERS:
            raise ConfigError(f"unknown config key {key!r}")
        fields[_FIELD_NAMES.get(key, key)] = _COERCERS[key](value)
    if "command" not in fields:
        raise ConfigError("command is required (analyze, simulate, or permute)")
    return RunConfig(**fields)


def resolve_scale(scale: str, outcome_type: str) -> str:
    """auto: risk ratios for binary outcomes, differences otherwise."""
    if scale != "auto":
        return scale
    return "ratio" if outcome_type == "binary" else "difference"
