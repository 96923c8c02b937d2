"""Declarative run configuration for the CLI.

A run config is a JSON object with one section per stage. Unknown keys
anywhere are rejected. Resolution precedence: command-line flag
overrides beat config-file values, which beat built-in defaults. The
global seed fills any section that does not pin its own.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cascade import CascadeConfig
from .dataset_io import BenchConfig
from .enhancer import ProjectionConfig
from .errors import DataError
from .eval_bench import EvalConfig
from .gan_core import GanTrainConfig
from .ssd_detector import DetectorConfig

_SECTION_TYPES = {
    "gan": GanTrainConfig,
    "detector": DetectorConfig,
    "projection": ProjectionConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}
# Cascade thresholds live in their own section; the shared projection
# section is injected when the CascadeConfig is built.
_CASCADE_KEYS = ("t_high", "t_low", "small_max_area", "t_rescore", "nms_iou", "nms_top_k")
_TOP_KEYS = ("seed", "workers", "data_dir", "out_dir", "cascade") + tuple(_SECTION_TYPES)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    data_dir: str = "data"
    out_dir: str = "runs"
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "workers": self.workers,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
        }
        for name in _SECTION_TYPES:
            section = dataclasses.asdict(getattr(self, name))
            out[name] = section
        cascade = dataclasses.asdict(self.cascade)
        cascade.pop("projection")
        out["cascade"] = cascade
        return out


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise DataError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _coerce(value, target_type):
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    return value


def _build_section(cls, raw: dict, name: str, default_seed: int):
    allowed = {f.name for f in fields(cls)}
    _reject_unknown(f"section '{name}'", raw, allowed)
    kwargs = {k: _coerce(v, None) for k, v in raw.items()}
    seed_field = "base_seed" if cls is BenchConfig else "seed"
    if seed_field in allowed and seed_field not in kwargs:
        kwargs[seed_field] = default_seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid section '{name}': {exc}") from exc


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_run_config(raw: dict) -> RunConfig:
    _reject_unknown("run config", raw, _TOP_KEYS)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise DataError(f"seed must be an integer, got {seed!r}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sections[name] = _build_section(cls, raw.get(name, {}), name, seed)
    cascade_raw = dict(raw.get("cascade", {}))
    _reject_unknown("section 'cascade'", cascade_raw, _CASCADE_KEYS)
    try:
        cascade = CascadeConfig(projection=sections["projection"], **cascade_raw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid section 'cascade': {exc}") from exc
    return RunConfig(
        seed=seed,
        workers=raw.get("workers", 1),
        data_dir=raw.get("data_dir", "data"),
        out_dir=raw.get("out_dir", "runs"),
        cascade=cascade,
        **sections,
    )


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Config file (optional) plus nested flag overrides -> RunConfig."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise DataError(f"config file {path} must hold a JSON object")
    if overrides:
        raw = _deep_merge(raw, overrides)
    return build_run_config(raw)
