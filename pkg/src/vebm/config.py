"""Run configuration: JSON schema, named presets and validation.

A run config is a JSON object::

    {
      "mode": "train" | "recover" | "superres" | "multigrid" | "coop",
      "architecture": "<descriptor preset>" | [layer, ...] | [per-grid ...],
      "generator": "<generator preset>" | null,
      "ref_std": 0.5,
      "data": {"source": "procedural" | "boxes" | "<dataset dir>", "categories": [...],
               "count": 20, "resolution": 16, "seed": 0, "test_count": 10,
               "convention": "mean-subtracted" | "signed-unit"},
      "train": {TrainConfig fields, with "langevin": {step_size, steps, noise, seed}},
      "sample": {"steps": K, "step_size": Δτ, "noise": bool}  (optional sampling overrides)
    }

Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import CATEGORIES
from .energy import ARCHITECTURES
from .generator import GENERATORS
from .langevin import LangevinConfig
from .layers import LayerSpec
from .training import TrainConfig

MODES = ("train", "recover", "superres", "multigrid", "coop")


class ConfigError(ValueError):
    pass


def _reject_unknown(d, cls, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")


@dataclass
class DataConfig:
    source: str = "procedural"
    categories: list[str] = field(default_factory=lambda: list(CATEGORIES))
    count: int = 20
    resolution: int = 16
    seed: int = 0
    test_count: int = 10
    convention: str = "mean-subtracted"

    def validate(self):
        if self.source in ("procedural", "boxes"):
            if self.resolution < 8 and self.source == "procedural":
                raise ConfigError("data.resolution must be >= 8 for procedural shapes")
            for c in self.categories if self.source == "procedural" else []:
                if c not in CATEGORIES:
                    raise ConfigError(f"data.categories: unknown category {c!r}")
        if self.count < 1 or self.test_count < 0:
            raise ConfigError("data.count must be >= 1 and data.test_count >= 0")
        if self.convention not in ("mean-subtracted", "signed-unit"):
            raise ConfigError(f"data.convention: unknown value {self.convention!r}")


@dataclass
class SampleConfig:
    steps: int | None = None
    step_size: float | None = None
    noise: bool | None = None

    def validate(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("sample.step_size must be > 0")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("sample.steps must be >= 0")


@dataclass
class RunConfig:
    mode: str = "train"
    architecture: object = "desk-synthesis-16"
    generator: str | None = None
    ref_std: float = 0.5
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self):
        d = {
            "mode": self.mode,
            "architecture": copy.deepcopy(self.architecture),
            "generator": self.generator,
            "ref_std": self.ref_std,
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "sample": asdict(self.sample),
        }
        return d

    def sampling_langevin(self):
        lc = self.train.langevin
        return LangevinConfig(
            step_size=self.sample.step_size or lc.step_size,
            steps=lc.steps if self.sample.steps is None else self.sample.steps,
            noise=lc.noise if self.sample.noise is None else self.sample.noise,
            seed=self.train.seed,
        )

    def layer_lists(self):
        """Descriptor layer lists: one for single-grid modes, one per grid for multigrid."""
        arch = self.architecture
        if self.mode == "multigrid":
            if not isinstance(arch, list) or len(arch) != len(self.train.factors):
                raise ConfigError("multigrid architecture must list one descriptor per grid above 1³")
            return [_layers(a, f"architecture[{i}]") for i, a in enumerate(arch)]
        return [_layers(arch, "architecture")]


def _layers(arch, where):
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise ConfigError(f"{where}: unknown architecture preset {arch!r}")
        return [LayerSpec(**vars(l)) for l in ARCHITECTURES[arch][1]]
    if isinstance(arch, list) and arch and all(isinstance(l, dict) for l in arch):
        try:
            return [LayerSpec.from_dict(l) for l in arch]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: expected a preset name or a list of layer objects")


def from_dict(d):
    """Build and validate a :class:`RunConfig`; raises :class:`ConfigError`."""
    _reject_unknown(d, RunConfig, "config")
    d = copy.deepcopy(d)
    try:
        data = d.pop("data", {})
        _reject_unknown(data, DataConfig, "data")
        train = d.pop("train", {})
        _reject_unknown(train, TrainConfig, "train")
        lang = train.pop("langevin", {})
        _reject_unknown(lang, LangevinConfig, "train.langevin")
        sample = d.pop("sample", {}) or {}
        _reject_unknown(sample, SampleConfig, "sample")
        cfg = RunConfig(
            data=DataConfig(**data),
            train=TrainConfig(langevin=LangevinConfig(**lang), **train),
            sample=SampleConfig(**sample),
            **d,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: unknown value {cfg.mode!r}; choose from {MODES}")
    if not cfg.ref_std > 0:
        raise ConfigError("ref_std must be > 0")
    cfg.data.validate()
    cfg.sample.validate()
    cfg.layer_lists()
    if cfg.mode == "coop":
        if cfg.generator not in GENERATORS:
            raise ConfigError(f"generator: unknown preset {cfg.generator!r}")
    return cfg


def load_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(d)


def _lang(k, dt, noise=True):
    return {"steps": k, "step_size": dt, "noise": noise}


PRESETS: dict[str, dict] = {
    "paper-synthesis-32": {
        "mode": "train",
        "architecture": "paper-synthesis-32",
        "data": {"resolution": 32},
        "train": {"iterations": 3000, "lr": 0.001, "beta1": 0.5, "batch_size": 20, "chains": 25, "langevin": _lang(20, 0.01), "noise_off_after": 100},
    },
    "paper-recovery": {
        "mode": "recover",
        "architecture": "paper-recovery-2layer",
        "data": {"resolution": 32},
        "train": {"iterations": 1000, "batch_size": 50, "chains": 50, "langevin": _lang(90, 0.0049), "corruption": 0.7},
    },
    "paper-superres": {
        "mode": "superres",
        "architecture": "paper-superres-64",
        "data": {"resolution": 64},
        "train": {"iterations": 1000, "batch_size": 20, "chains": 20, "langevin": _lang(90, 0.0001), "scale_factor": 4},
    },
    "paper-coop": {
        "mode": "coop",
        "architecture": "paper-coop-32",
        "generator": "paper-32",
        "data": {"resolution": 32, "convention": "signed-unit"},
        "train": {
            "iterations": 3000,
            "lr": 0.001,
            "beta1": 0.4,
            "gen_lr": 0.0003,
            "gen_beta1": 0.6,
            "batch_size": 50,
            "chains": 50,
            "langevin": _lang(20, 0.09),
        },
    },
    "paper-multigrid-128": {
        "mode": "multigrid",
        "architecture": ["paper-grid1-4", "paper-grid2-16", "paper-grid3-32", "paper-grid4-64", "paper-grid5-128"],
        "data": {"resolution": 128},
        "train": {"iterations": 3000, "batch_size": 40, "chains": 40, "langevin": _lang(20, 0.01), "factors": [4, 4, 2, 2, 2]},
    },
    # desk-scale variants: 16³ grids, small nets, minutes on one core
    "desk-synthesis": {
        "mode": "train",
        "architecture": "desk-synthesis-16",
        "train": {"iterations": 300, "lr": 0.0003, "batch_size": 8, "chains": 8, "langevin": _lang(20, 0.01), "noise_off_after": None},
    },
    "desk-recovery": {
        "mode": "recover",
        "architecture": "desk-recovery-16",
        "train": {"iterations": 150, "lr": 0.001, "batch_size": 8, "chains": 8, "langevin": _lang(30, 0.03), "noise_off_after": 0, "corruption": 0.7},
        "sample": {"noise": False},
    },
    "desk-superres": {
        "mode": "superres",
        "architecture": "desk-superres-16",
        "data": {"source": "boxes", "categories": [], "count": 40},
        "train": {"iterations": 100, "lr": 0.001, "batch_size": 8, "chains": 8, "langevin": _lang(30, 0.03), "noise_off_after": 0, "scale_factor": 2},
        "sample": {"noise": False},
    },
    "desk-coop": {
        "mode": "coop",
        "architecture": "desk-coop-16",
        "generator": "desk-16",
        "data": {"categories": ["block-table"], "count": 1, "test_count": 0, "convention": "signed-unit"},
        "train": {
            "iterations": 200,
            "lr": 0.001,
            "beta1": 0.4,
            "gen_lr": 0.0003,
            "gen_beta1": 0.6,
            "batch_size": 8,
            "chains": 8,
            "langevin": _lang(20, 0.09),
        },
    },
    "desk-multigrid": {
        "mode": "multigrid",
        "architecture": ["desk-grid1-4", "desk-grid2-8", "desk-grid3-16"],
        "train": {"iterations": 200, "lr": 0.0003, "batch_size": 8, "chains": 8, "langevin": _lang(20, 0.01), "noise_off_after": None, "factors": [4, 2, 2]},
    },
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    for key, val in overrides.items():
        if isinstance(val, dict):
            d.setdefault(key, {}).update(val)
        else:
            d[key] = val
    return from_dict(d)
