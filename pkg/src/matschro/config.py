"""Run configuration: JSON schema, defaults and loading."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .model import SystemSpec

MODEL_CHECKS = (
    "ellipticity", "dissipativity", "gradient_condition", "grad_ratio", "okazawa",
    "sectoriality", "offdiagonal_sign", "coercivity", "little_o",
)
SPECTRAL_CHECKS = ("eigen", "weyl", "trace")
EVOLVE_CHECKS = (
    "contraction", "ultracontractivity", "trotter_kato", "kernel", "gaussian_fit",
    "offdiag_vs_diag", "positivity", "lower_bound", "decay", "maximal_inequality",
)
ALL_CHECKS = MODEL_CHECKS + SPECTRAL_CHECKS + EVOLVE_CHECKS

_expr = {"type": ["string", "number"]}
_matrix = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": _expr}}
_times = {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["system"],
    "additionalProperties": False,
    "properties": {
        "system": {
            "type": "object",
            "required": ["d", "V"],
            "additionalProperties": False,
            "properties": {
                "d": {"type": "integer", "minimum": 1, "maximum": 3},
                "m": {"type": "integer", "minimum": 1},
                "Q": _matrix,
                "V": _matrix,
                "v": _expr,
                "alpha": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "R": {"type": "number", "exclusiveMinimum": 0},
                "N": {"type": "integer", "minimum": 3},
            },
        },
        "spectral": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "t_trace": _times,
            },
        },
        "evolve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_grid": _times,
                "t_kernel": _times,
                "t_decay": {"type": "number", "exclusiveMinimum": 0},
                "sources": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                "trials": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "p": {"type": ["number", "string"]},
            },
        },
        "checks": {"type": "array", "items": {"enum": list(ALL_CHECKS)}, "uniqueItems": True},
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "grid": {"R": 8.0, "N": 401},
    "spectral": {"k": 40, "t_trace": [0.5]},
    "evolve": {
        "t_grid": [0.01, 0.03, 0.1, 0.3, 1.0],
        "t_kernel": [0.1, 0.5, 1.0],
        "t_decay": 0.5,
        "sources": None,
        "trials": 8,
        "seed": 0,
        "p": 2,
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    system: SystemSpec
    grid: dict
    spectral: dict
    evolve: dict
    checks: list[str] | None
    output_dir: Path
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.evolve["seed"])

    @property
    def p(self) -> float:
        p = self.evolve["p"]
        return float("inf") if str(p).lower() in ("inf", "infinity") else float(p)


def load_config(source: str | Path | dict, out: str | Path | None = None, seed: int | None = None) -> RunConfig:
    """Validate a JSON config (path or already-parsed dict) and fill in defaults."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    try:
        system = SystemSpec.from_dict(raw["system"])
    except ValueError as exc:  # includes expression syntax errors
        raise ConfigError(f"system: {exc}") from exc
    sections = {name: {**DEFAULTS[name], **raw.get(name, {})} for name in DEFAULTS}
    if seed is not None:
        sections["evolve"]["seed"] = int(seed)
    N = sections["grid"]["N"]
    if N % 2 == 0:
        raise ConfigError(f"grid/N must be odd so that the origin is a node, got {N}")
    return RunConfig(
        system=system,
        grid=sections["grid"],
        spectral=sections["spectral"],
        evolve=sections["evolve"],
        checks=raw.get("checks"),
        output_dir=Path(out or raw.get("output_dir", "out")),
        raw=raw,
    )
