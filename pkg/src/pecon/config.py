"""JSON run configuration.

A config file is one JSON object::

    {
      "output_dir": "runs/demo",
      "data": {... SyntheticConfig fields ..., "manifest": null},
      "model": {"visual_hidden": [512, 256], "ehr_hidden": [128], "embedding_dim": 128},
      "pretrain": {... TrainConfig fields ...},
      "finetune_visual": {...},
      "finetune_ehr": {...},
      "eval": {"lambda": 0.375, "grid": [...], "include_subsegmental": [true, false], "threshold": 0.5}
    }

Every section and key is optional; unknown keys are rejected. Relative paths
resolve against the config file's directory. ``PECON_SEED`` in the
environment replaces every seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .datamodel import SyntheticConfig
from .errors import ConfigError
from .evaluation import DEFAULT_GRID, DEFAULT_LAMBDA
from .training import TrainConfig


@dataclass
class ModelConfig:
    visual_hidden: tuple[int, ...] = (512, 256)
    ehr_hidden: tuple[int, ...] = (128,)
    embedding_dim: int = 128

    def __post_init__(self):
        self.visual_hidden = tuple(int(v) for v in self.visual_hidden)
        self.ehr_hidden = tuple(int(v) for v in self.ehr_hidden)
        if self.embedding_dim < 1 or any(v < 1 for v in self.visual_hidden + self.ehr_hidden):
            raise ValueError("layer widths must be positive")

    def visual_dims(self, d):
        return (d, *self.visual_hidden, self.embedding_dim)

    def ehr_dims(self, D_e):
        return (D_e, *self.ehr_hidden, self.embedding_dim)


@dataclass
class EvalConfig:
    lam: float | None = DEFAULT_LAMBDA  # None: pick the best weight on validation
    grid: tuple[float, ...] = DEFAULT_GRID
    include_subsegmental: tuple[bool, ...] = (True, False)
    threshold: float = 0.5

    def __post_init__(self):
        self.grid = tuple(float(v) for v in self.grid)
        self.include_subsegmental = tuple(bool(v) for v in self.include_subsegmental)
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1] or be null")
        if not self.grid or any(not 0 <= v <= 1 for v in self.grid):
            raise ValueError("grid must be a non-empty list of values in [0, 1]")


@dataclass
class RunConfig:
    output_dir: Path = Path("pecon-run")
    manifest: Path | None = None
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig.pretrain)
    finetune_visual: TrainConfig = field(default_factory=TrainConfig.finetune_visual)
    finetune_ehr: TrainConfig = field(default_factory=TrainConfig.finetune_ehr)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def manifest_path(self):
        return self.manifest if self.manifest is not None else self.output_dir / "data" / "manifest.csv"

    def stage_dir(self, name):
        return self.output_dir / name

    def with_seed(self, seed):
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=seed),
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            finetune_visual=dataclasses.replace(self.finetune_visual, seed=seed),
            finetune_ehr=dataclasses.replace(self.finetune_ehr, seed=seed),
        )


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"stage"}
_EVAL_RENAMES = {"lambda": "lam"}


def _build(cls, section, values, allowed, source, renames=None, **fixed):
    if not isinstance(values, dict):
        raise ConfigError(f"{source}: section '{section}' must be an object")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"{source}: unknown key '{section}.{unknown[0]}'")
    kwargs = {(renames or {}).get(k, k): v for k, v in values.items()}
    try:
        return cls(**kwargs, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: invalid section '{section}': {exc}") from None


def parse_config(doc, base_dir=Path("."), source="<config>"):
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    top = {"output_dir", "data", "model", "pretrain", "finetune_visual", "finetune_ehr", "eval"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"{source}: unknown key '{unknown[0]}'")
    base_dir = Path(base_dir)

    data = dict(doc.get("data", {}))
    manifest = data.pop("manifest", None)
    synth_keys = {f.name for f in dataclasses.fields(SyntheticConfig)}
    cfg = RunConfig(
        output_dir=base_dir / doc.get("output_dir", "pecon-run"),
        manifest=None if manifest is None else base_dir / manifest,
        data=_build(SyntheticConfig, "data", data, synth_keys, source),
        model=_build(ModelConfig, "model", doc.get("model", {}), {f.name for f in dataclasses.fields(ModelConfig)}, source),
        pretrain=_build(TrainConfig.pretrain, "pretrain", doc.get("pretrain", {}), _TRAIN_KEYS, source),
        finetune_visual=_build(
            TrainConfig.finetune_visual, "finetune_visual", doc.get("finetune_visual", {}), _TRAIN_KEYS, source
        ),
        finetune_ehr=_build(TrainConfig.finetune_ehr, "finetune_ehr", doc.get("finetune_ehr", {}), _TRAIN_KEYS, source),
        eval=_build(
            EvalConfig, "eval", doc.get("eval", {}), {"lambda", "grid", "include_subsegmental", "threshold"},
            source, _EVAL_RENAMES,
        ),
    )
    seed = os.environ.get("PECON_SEED")
    if seed is not None:
        try:
            cfg = cfg.with_seed(int(seed))
        except ValueError:
            raise ConfigError(f"PECON_SEED must be a non-negative integer, got {seed!r}") from None
    return cfg


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc, path.parent, str(path))
