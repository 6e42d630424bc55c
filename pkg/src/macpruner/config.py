"""Run configuration: one JSON document drives a full search."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .harness import DatasetParams, InlineConfig
from .macprof import ToleranceBand
from .oracle import LLMEndpointConfig

ORACLE_KINDS = ("heuristic", "llm", "replay")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model_spec: str
    target_macs: float
    band: ToleranceBand
    r_max: int = 50
    oracle: str = "heuristic"
    dataset: DatasetParams = field(default_factory=DatasetParams)
    inline: InlineConfig = field(default_factory=InlineConfig)
    calibration_batches: int = 8
    calibration_batch_size: int = 32
    weights_seed: int = 11
    seed: int = 0
    output_dir: str = "runs/search"
    deterministic_timing: bool = False
    llm: LLMEndpointConfig | None = None
    replay_history: str | None = None

    def validate(self) -> None:
        if self.oracle not in ORACLE_KINDS:
            raise ConfigError(f"oracle must be one of {ORACLE_KINDS}")
        if self.target_macs <= 0:
            raise ConfigError("target_macs must be positive")
        if self.r_max < 1:
            raise ConfigError("r_max must be at least 1")
        if self.oracle == "llm" and self.llm is None:
            raise ConfigError("llm oracle requires an 'llm' endpoint section")
        if self.oracle == "replay" and not self.replay_history:
            raise ConfigError("replay oracle requires 'replay_history'")
        self.dataset.validate()


def _build_dataclass(cls, doc: dict):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**doc)


def load_config(path: str) -> RunConfig:
    """Read and validate a run-config JSON file; relative paths resolve
    against the config file's directory."""
    with open(path, "r") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str | None) -> str | None:
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        band = doc["band"]
        band = ToleranceBand.parse(band) if isinstance(band, str) else ToleranceBand(
            overshoot_pct=float(band["overshoot_pct"]),
            undershoot_pct=float(band["undershoot_pct"]))
        config = RunConfig(
            model_spec=resolve(doc["model_spec"]),
            target_macs=float(doc["target_macs"]),
            band=band,
            r_max=int(doc.get("r_max", 50)),
            oracle=doc.get("oracle", "heuristic"),
            dataset=_build_dataclass(DatasetParams, doc.get("dataset", {})),
            inline=_build_dataclass(InlineConfig, doc.get("inline", {})),
            calibration_batches=int(doc.get("calibration", {}).get("batches", 8)),
            calibration_batch_size=int(doc.get("calibration", {}).get("batch_size", 32)),
            weights_seed=int(doc.get("weights_seed", 11)),
            seed=int(doc.get("seed", 0)),
            output_dir=resolve(doc.get("output_dir", "runs/search")),
            deterministic_timing=bool(doc.get("deterministic_timing", False)),
            llm=_build_dataclass(LLMEndpointConfig, doc["llm"]) if "llm" in doc else None,
            replay_history=resolve(doc.get("replay_history")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required config field {exc.args[0]!r}") from exc
    config.validate()
    return config
