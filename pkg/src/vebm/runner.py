"""Experiment orchestration shared by the CLI and the acceptance suite:
datasets and models from a :class:`RunConfig`, trainer construction,
checkpoint round trips and sampling from a checkpoint."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, from_dict
from .data import Dataset, gen_boxes, gen_procedural, load_dataset, preprocess, to_binary, to_signed_unit
from .energy import DescriptorModel
from .generator import GeneratorModel, generate, generator_preset, sample_prior
from .gridops import GridScaler, HistogramModel, ladder_sizes, sample_histogram
from .langevin import chain_rngs, run_chain
from .layers import init_params
from .training import (
    TAG_LANGEVIN,
    CoopTrainer,
    MLETrainer,
    MultiGridTrainer,
    RecoveryTrainer,
    SuperResTrainer,
    sample_descriptor,
    sample_multigrid,
)

TRAINER_KIND = {"train": "mle", "recover": "recovery", "superres": "superres", "multigrid": "multigrid", "coop": "coop"}
TEST_SEED_OFFSET = 1000


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Prepared:
    train: Dataset  # model space
    test: Dataset | None  # model space, train mean
    raw_train: Dataset  # binary01


def _model_space(ds: Dataset, convention, mean=None):
    if convention == "signed-unit":
        return to_signed_unit(ds)
    return preprocess(ds, mean)


def load_data(cfg: RunConfig) -> Prepared:
    d = cfg.data
    if d.source == "procedural":
        raw = gen_procedural(d.categories, d.count, d.resolution, d.seed)
        raw_test = gen_procedural(d.categories, d.test_count, d.resolution, d.seed + TEST_SEED_OFFSET) if d.test_count else None
    elif d.source == "boxes":
        raw = gen_boxes(d.count, d.resolution, d.seed)
        raw_test = gen_boxes(d.test_count, d.resolution, d.seed + TEST_SEED_OFFSET) if d.test_count else None
    else:
        path = Path(d.source)
        if not (path / "labels.json").exists():
            raise FileNotFoundError(f"dataset directory {path} has no labels.json")
        full = load_dataset(path)
        if full.convention != "binary01":
            raise ConfigError(f"{path}: expected binary01 data, found {full.convention}")
        raw, raw_test = full, None
        if d.test_count:
            frac = d.test_count / (d.test_count + d.count)
            raw, raw_test = full.split(frac, d.seed)
    if len(raw) == 0:
        raise ConfigError("dataset is empty")
    train = _model_space(raw, d.convention)
    test = _model_space(raw_test, d.convention, train.mean) if raw_test is not None and len(raw_test) else None
    return Prepared(train, test, raw)


def build_descriptors(cfg: RunConfig, seed=None):
    """Freshly initialised descriptor(s) for the config's mode."""
    seed = cfg.train.seed if seed is None else seed
    lists = cfg.layer_lists()
    if cfg.mode == "multigrid":
        sizes = ladder_sizes(cfg.train.factors)[1:]
        if sizes[-1] != cfg.data.resolution:
            raise ConfigError(f"grid ladder ends at {sizes[-1]}³ but data.resolution is {cfg.data.resolution}")
        grids = [(s, s, s) for s in sizes]
    else:
        grids = [(cfg.data.resolution,) * 3]
    models = []
    for i, (layers, g) in enumerate(zip(lists, grids)):
        try:
            m = DescriptorModel(layers, g, cfg.ref_std)
        except ValueError as e:
            raise ConfigError(f"architecture does not fit a {g} grid: {e}") from None
        m.params = init_params(m.net, np.random.default_rng([seed, 0, i]))
        models.append(m)
    return models


def build_generator(cfg: RunConfig, seed=None):
    seed = cfg.train.seed if seed is None else seed
    d, size, layers = generator_preset(cfg.generator)
    if size != cfg.data.resolution:
        raise ConfigError(f"generator {cfg.generator} outputs {size}³ grids, data.resolution is {cfg.data.resolution}")
    g = GeneratorModel(layers, d, (size,) * 3)
    g.params = init_params(g.net, np.random.default_rng([seed, 0, 99]))
    return g


def build_trainer(cfg: RunConfig, data: Prepared, log=None):
    models = build_descriptors(cfg)
    if cfg.mode == "train":
        return MLETrainer(data.train, models[0], cfg.train, log)
    if cfg.mode == "recover":
        return RecoveryTrainer(data.train, models[0], cfg.train, log)
    if cfg.mode == "superres":
        return SuperResTrainer(data.train, models[0], cfg.train, log)
    if cfg.mode == "multigrid":
        return MultiGridTrainer(data.train, models, cfg.train, log)
    if cfg.mode == "coop":
        return CoopTrainer(data.train, models[0], build_generator(cfg), cfg.train, log)
    raise ConfigError(f"unknown mode {cfg.mode!r}")


def save_run(path, cfg: RunConfig, trainer, data: Prepared):
    state = trainer.state_dict()
    state["dataset_mean"] = float(data.train.mean)
    state["convention"] = data.train.convention
    ckpt.save_checkpoint(path, cfg.to_dict(), state)


def load_run(path):
    """``(config, state)`` from a checkpoint, with the config re-validated."""
    cfg_dict, state = ckpt.load_checkpoint(path)
    return from_dict(cfg_dict), state


def resume(trainer, state, cfg: RunConfig):
    if state.get("kind") != TRAINER_KIND[cfg.mode]:
        raise CheckpointMismatch(f"checkpoint holds a {state.get('kind')} run, command expects {TRAINER_KIND[cfg.mode]}")
    trainer.load_state_dict(state)


def _restore_descriptors(cfg, state):
    models = build_descriptors(cfg)
    if state["kind"] == "multigrid":
        for m, g in zip(models, state["grids"]):
            m.params = g["params"]
    else:
        models[0].params = state["params"]
    return models


def sample_from_checkpoint(cfg: RunConfig, state, count, seed):
    """``count`` synthesized grids in model space plus the binary versions."""
    lc = cfg.sampling_langevin()
    mean, conv = state["dataset_mean"], state["convention"]
    if count == 0:
        n = cfg.data.resolution
        empty = np.zeros((0, n, n, n), np.float32)
        return empty, empty
    kind = state["kind"]
    models = _restore_descriptors(cfg, state)
    if kind == "multigrid":
        hist = HistogramModel(state["histogram"]["edges"], state["histogram"]["probs"])
        Y = sample_multigrid(models, hist, cfg.train.factors, lc, n=count, seed=seed)[-1]
    elif kind == "coop":
        g = build_generator(cfg)
        g.params, g.buffers = state["gen_params"], state["gen_buffers"]
        Z = sample_prior(g.latent_dim, np.random.default_rng([seed, 4]), count)
        Y = run_chain(models[0], generate(g, Z), lc, chain_rngs(seed, count, TAG_LANGEVIN))
    else:
        Y = sample_descriptor(models[0], count, lc, seed=seed)
    return Y, to_binary(Y, conv, mean)
