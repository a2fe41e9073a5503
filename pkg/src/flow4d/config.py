"""Pipeline configuration: defaults, JSON round-trip, CLI overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .reconstruction import ReconstructionParams
from .segmentation import SegmentationParams
from .synth import SweepConfig


class ConfigError(ValueError):
    """Invalid or missing configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a batch run needs besides input/output paths.

    Defaults are the published operating point: Sauvola k = 0.2, R = 0.5,
    window 11; unwrap ridge alpha = 0.01; outlier test tau = 2, eps = 1e-3.
    """

    segmentation: SegmentationParams = dataclasses.field(default_factory=SegmentationParams)
    reconstruction: ReconstructionParams = dataclasses.field(default_factory=ReconstructionParams)
    sweep: SweepConfig | None = None
    threads: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        env = os.environ.get("FLOW4D_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError as exc:
                raise ConfigError(f"FLOW4D_THREADS must be an integer, got {env!r}") from exc
            if value < 1:
                raise ConfigError("FLOW4D_THREADS must be >= 1")
            return value
        return os.cpu_count() or 1

    def to_dict(self) -> dict:
        out = {
            "segmentation": dataclasses.asdict(self.segmentation),
            "reconstruction": dataclasses.asdict(self.reconstruction),
            "threads": self.threads,
            "seed": self.seed,
        }
        if self.sweep is not None:
            out["sweep"] = self.sweep.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        try:
            seg = SegmentationParams(**_tupled(data.get("segmentation", {}), ("ranks",)))
            recon = ReconstructionParams(**data.get("reconstruction", {}))
            sweep = SweepConfig.from_dict(data["sweep"]) if data.get("sweep") else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cls(segmentation=seg, reconstruction=recon, sweep=sweep,
                   threads=data.get("threads"), seed=data.get("seed"))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tupled(data: dict, keys) -> dict:
    data = dict(data)
    for key in keys:
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    return data


def apply_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    """Return a copy of ``config`` with non-None keyword overrides applied
    to the matching parameter blocks."""
    seg_fields = {f.name for f in dataclasses.fields(SegmentationParams)}
    recon_fields = {f.name for f in dataclasses.fields(ReconstructionParams)}
    seg_updates = {}
    recon_updates = {}
    top_updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in seg_fields:
            seg_updates[key] = value
        elif key in recon_fields:
            recon_updates[key] = value
        elif key in ("threads", "seed"):
            top_updates[key] = value
        else:
            raise ConfigError(f"unknown override {key!r}")
    try:
        seg = dataclasses.replace(config.segmentation, **seg_updates) \
            if seg_updates else config.segmentation
        recon = dataclasses.replace(config.reconstruction, **recon_updates) \
            if recon_updates else config.reconstruction
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(config, segmentation=seg, reconstruction=recon,
                               **top_updates)
