"""Run configuration: flat JSON keys, command-line flags override the file."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path

from .binning import DEFAULT_K
from .metrics import KEY_MODES, TARGETS

SCOPES = ("per_kernel", "whole_dataset")
CAUSAL_RECORDS = ("top_k", "all")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    inputs: list = field(default_factory=list)  # [(path, format)]
    time_unit: str = "ns"
    bin_width_ms: float = 10.0
    k: int = DEFAULT_K
    target: str = "perf_variation"
    scope: str = "per_kernel"
    world_size: int = 1
    worker_count: int = 1
    alpha: float = 0.05
    max_cond: int = 3
    output_dir: str = "out"
    seed: int = 0
    key_mode: str = "name_only"
    transport: str = "process"
    causal_records: str = "top_k"
    match_window_ms: float = 1.0
    bin_metric: str = "target"

    @property
    def bin_width_ns(self) -> int:
        return _ms_to_ns(self.bin_width_ms, "bin_width_ms")

    @property
    def match_window_ns(self) -> int:
        return _ms_to_ns(self.match_window_ms, "match_window_ms")

    def validate(self) -> None:
        if not self.inputs:
            raise ConfigError("no inputs given")
        for path, fmt in self.inputs:
            if fmt not in ("csv", "jsonl"):
                raise ConfigError(f"unknown format {fmt!r} for {path}")
            if not Path(path).is_file():
                raise ConfigError(f"input not found: {path}")
        checks = [
            ("time_unit", self.time_unit in ("ns", "ms")),
            ("target", self.target in TARGETS),
            ("scope", self.scope in SCOPES),
            ("key_mode", self.key_mode in KEY_MODES),
            ("transport", self.transport in ("inproc", "process")),
            ("causal_records", self.causal_records in CAUSAL_RECORDS),
            ("bin_metric", self.bin_metric in ("target", "duration")),
            ("k", isinstance(self.k, int) and self.k >= 1),
            ("world_size", isinstance(self.world_size, int) and self.world_size >= 1),
            ("worker_count", isinstance(self.worker_count, int) and self.worker_count >= 1),
            ("max_cond", isinstance(self.max_cond, int) and self.max_cond >= 0),
            ("alpha", 0 < self.alpha < 1),
            ("bin_width_ms", self.bin_width_ms > 0),
            ("match_window_ms", self.match_window_ms >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}")
        self.bin_width_ns
        self.match_window_ns

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = [{"path": str(p), "format": f} for p, f in self.inputs]
        return d


def _ms_to_ns(ms, name: str) -> int:
    ns = Decimal(str(ms)) * 1_000_000
    if ns != ns.to_integral_value():
        raise ConfigError(f"{name}={ms} is not a whole number of nanoseconds")
    return int(ns)


def _input_entry(item) -> tuple[str, str]:
    if isinstance(item, dict):
        path = str(item["path"])
        fmt = item.get("format")
    else:
        path, fmt = str(item), None
    if fmt is None:
        fmt = "jsonl" if path.endswith((".jsonl", ".ndjson")) else "csv"
    return path, fmt


def resolve_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then non-None overrides."""
    values: dict = {}
    if file_path is not None:
        try:
            values = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "inputs" in values:
        values["inputs"] = [_input_entry(x) for x in values["inputs"]]
    return RunConfig(**values)
