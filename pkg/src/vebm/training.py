"""Analysis-by-synthesis trainers for the descriptor and its extensions.

Every trainer alternates a sampling phase (Langevin chains against the
current θ) with a learning phase (Adam ascent on the log-likelihood
gradient). Randomness is derived statelessly from ``(seed, stream,
iteration, ...)`` so a run resumed from a checkpoint replays exactly.

Random stream tags used with ``np.random.default_rng([seed, tag, ...])``:
1 batch order, 2 corruption masks, 4 latent draws, 5 chain init, 6 init
noise, 10 + grid index for Langevin noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, corrupt
from .energy import DescriptorModel, score_param_grad
from .generator import GeneratorModel, refresh_buffers, regression_grad, sample_prior
from .gridops import DESK_LADDER, GridScaler, HistogramModel, build_pyramid, downscale, fit_histogram, ladder_sizes, sample_histogram, upscale
from .langevin import LangevinConfig, chain_rngs, run_chain
from .optim import AdamState, adam_step

CHAIN_INITS = ("persistent-noise-init", "data-init", "generator-init", "coarser-grid-init")

TAG_BATCH, TAG_MASK, TAG_LATENT, TAG_CHAIN_INIT, TAG_INIT_NOISE, TAG_LANGEVIN = 1, 2, 4, 5, 6, 10


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    chains: int = 8
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    noise_off_after: int | None = 100
    chain_init: str = "persistent-noise-init"
    seed: int = 0
    # conditional recovery
    corruption: float = 0.7
    refresh_masks: bool = True
    # super-resolution
    scale_factor: int = 2
    # multi-grid
    factors: tuple[int, ...] = DESK_LADDER
    histogram_bins: int = 32
    # cooperative
    gen_lr: float = 0.0003
    gen_beta1: float = 0.6
    gen_init_noise: bool = True

    def __post_init__(self):
        if isinstance(self.langevin, dict):
            self.langevin = LangevinConfig(**self.langevin)
        self.factors = tuple(int(f) for f in self.factors)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.chains < 1 or self.batch_size < 1:
            raise ValueError("chain count and batch size must be >= 1")
        if self.chain_init not in CHAIN_INITS:
            raise ValueError(f"unknown chain init policy {self.chain_init!r}; choose from {CHAIN_INITS}")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption fraction must lie in [0, 1]")
        if self.scale_factor < 1 or any(f < 1 for f in self.factors):
            raise ValueError("scale factors must be >= 1")
        if self.lr < 0 or self.gen_lr < 0:
            raise ValueError("learning rates must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["factors"] = list(self.factors)
        return d


def mle_grad(model: DescriptorModel, observed, synthesized):
    """(1/n)Σ∂f(Y_i)/∂θ − (1/ñ)Σ∂f(Ỹ_i)/∂θ, plus mean energies of both sets.

    Two separate passes keep the computation of each term identical, so
    equal batches cancel exactly.
    """
    observed = np.asarray(observed, np.float32)
    synthesized = np.asarray(synthesized, np.float32)
    if len(observed) == 0 or len(synthesized) == 0:
        raise ValueError("mle_grad needs non-empty observed and synthesized batches")
    if observed.shape[1:] != synthesized.shape[1:]:
        raise ValueError(f"observed {observed.shape[1:]} and synthesized {synthesized.shape[1:]} grids differ")
    g_obs, s_obs, q_obs = score_param_grad(model, observed)
    g_syn, s_syn, q_syn = score_param_grad(model, synthesized)
    grads = {k: g_obs[k] - g_syn[k] for k in g_obs}
    c = 1.0 / (2 * model.ref_std**2)
    e_obs = float(np.mean(c * q_obs.astype(np.float64) - s_obs))
    e_syn = float(np.mean(c * q_syn.astype(np.float64) - s_syn))
    return grads, {"energy_obs": e_obs, "energy_syn": e_syn}


def _grad_norm(grads):
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def _copy_arrays(d):
    return {k: np.array(v) for k, v in d.items()}


class Trainer:
    """Shared mini-batching, scheduling, logging and state handling."""

    kind = "mle"

    def __init__(self, dataset: Dataset, model: DescriptorModel, cfg: TrainConfig, log=None, lr_schedule=None):
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.data = dataset
        self.model = model
        self.cfg = cfg
        self.log = log
        self.lr_schedule = lr_schedule
        self.iteration = 0
        self.opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        self.history: list[dict] = []

    # --- helpers
    def lr_at(self, t, base=None):
        base = self.cfg.lr if base is None else base
        return base if self.lr_schedule is None else float(self.lr_schedule(t, base))

    def noise_on(self, t):
        off = self.cfg.noise_off_after
        return self.cfg.langevin.noise and (off is None or t < off)

    def batch_indices(self, t):
        """Indices of the mini-batch for iteration ``t`` (per-epoch shuffles)."""
        n = len(self.data)
        bs = min(self.cfg.batch_size, n)
        per_epoch = n // bs
        epoch, b = divmod(t, per_epoch)
        perm = np.random.default_rng([self.cfg.seed, TAG_BATCH, epoch]).permutation(n)
        return perm[b * bs : (b + 1) * bs], epoch

    def langevin_rngs(self, t, n, grid=0):
        return chain_rngs(self.cfg.seed, n, TAG_LANGEVIN + grid, t)

    def emit(self, record):
        record = {"mode": self.kind, "iteration": self.iteration, **record}
        self.history.append(record)
        if self.log is not None:
            self.log.write(json.dumps(record) + "\n")
        return record

    def _update(self, model, grads, opt, t):
        params, opt = adam_step(model.params, grads, opt, maximize=True, lr=self.lr_at(t))
        model.params = params
        return opt

    def _diag(self, stats, grads):
        return {
            "value": stats["energy_syn"] - stats["energy_obs"],
            "energy_obs": stats["energy_obs"],
            "energy_syn": stats["energy_syn"],
            "grad_norm": _grad_norm(grads),
        }

    def run(self, iterations=None):
        n = self.cfg.iterations - self.iteration if iterations is None else iterations
        for _ in range(max(0, n)):
            self.step()
        return self.model

    def step(self):
        raise NotImplementedError

    # --- persistence
    def state_dict(self):
        return {
            "kind": self.kind,
            "iteration": self.iteration,
            "params": _copy_arrays(self.model.params),
            "adam": _adam_state(self.opt),
        }

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ValueError(f"checkpoint holds a {state['kind']} run, trainer is {self.kind}")
        self.iteration = int(state["iteration"])
        self.model.params = _copy_arrays(state["params"])
        self.opt = _load_adam(state["adam"])


def _adam_state(opt: AdamState):
    return {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "m": _copy_arrays(opt.m), "v": _copy_arrays(opt.v)}


def _load_adam(d):
    return AdamState(d["lr"], d["beta1"], d["beta2"], d["eps"], int(d["t"]), _copy_arrays(d["m"]), _copy_arrays(d["v"]))


class MLETrainer(Trainer):
    """Persistent chains started from N(0, s²), or restarted from data (CD)."""

    kind = "mle"

    def __init__(self, dataset, model, cfg, log=None, lr_schedule=None):
        super().__init__(dataset, model, cfg, log, lr_schedule)
        if cfg.chain_init not in ("persistent-noise-init", "data-init"):
            raise ValueError(f"MLE training supports persistent-noise-init or data-init, not {cfg.chain_init}")
        rng = np.random.default_rng([cfg.seed, TAG_CHAIN_INIT])
        shape = (cfg.chains,) + model.grid_shape
        self.chains = (model.ref_std * rng.standard_normal(shape)).astype(np.float32)

    def step(self):
        t = self.iteration
        idx, _ = self.batch_indices(t)
        obs = self.data.grids[idx]
        if self.cfg.chain_init == "data-init":
            start = obs[np.arange(self.cfg.chains) % len(obs)]
        else:
            start = self.chains
        lcfg = self.cfg.langevin
        syn = run_chain(self.model, start, lcfg, self.langevin_rngs(t, len(start)), noise=self.noise_on(t))
        self.chains = syn
        grads, stats = mle_grad(self.model, obs, syn)
        self.opt = self._update(self.model, grads, self.opt, t)
        self.iteration += 1
        return self.emit(self._diag(stats, grads))

    def state_dict(self):
        s = super().state_dict()
        s["chains"] = np.array(self.chains)
        return s

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.chains = np.array(state["chains"], dtype=np.float32)


def mask_for(cfg: TrainConfig, epoch, index, grid, ref_std):
    """Corruption of dataset item ``index``; one draw per epoch when refreshing."""
    e = epoch if cfg.refresh_masks else 0
    rng = np.random.default_rng([cfg.seed, TAG_MASK, e, int(index)])
    return corrupt(grid, cfg.corruption, rng, ref_std)


class RecoveryTrainer(Trainer):
    """Conditional learning: chains start at the corrupted data with the
    observed voxels clamped."""

    kind = "recovery"

    def step(self):
        t = self.iteration
        idx, epoch = self.batch_indices(t)
        obs = self.data.grids[idx]
        pairs = [mask_for(self.cfg, epoch, i, self.data.grids[i], self.model.ref_std) for i in idx]
        start = np.stack([p[0] for p in pairs])
        mask = np.stack([p[1] for p in pairs])
        syn = run_chain(self.model, start, self.cfg.langevin, self.langevin_rngs(t, len(idx)), noise=self.noise_on(t), mask=mask)
        grads, stats = mle_grad(self.model, obs, syn)
        self.opt = self._update(self.model, grads, self.opt, t)
        self.iteration += 1
        return self.emit(self._diag(stats, grads))


class SuperResTrainer(Trainer):
    """Chains start at C⁻C·Y and move only within the null space of C."""

    kind = "superres"

    def __init__(self, dataset, model, cfg, log=None, lr_schedule=None):
        super().__init__(dataset, model, cfg, log, lr_schedule)
        self.scaler = GridScaler(cfg.scale_factor)
        if any(n % cfg.scale_factor for n in dataset.shape):
            raise ValueError(f"grid {dataset.shape} not divisible by factor {cfg.scale_factor}")

    def step(self):
        t = self.iteration
        idx, _ = self.batch_indices(t)
        obs = self.data.grids[idx]
        start = self.scaler.up(self.scaler.down(obs))
        syn = run_chain(self.model, start, self.cfg.langevin, self.langevin_rngs(t, len(idx)), noise=self.noise_on(t), scaler=self.scaler)
        grads, stats = mle_grad(self.model, obs, syn)
        self.opt = self._update(self.model, grads, self.opt, t)
        self.iteration += 1
        return self.emit(self._diag(stats, grads))


class MultiGridTrainer(Trainer):
    """One descriptor per grid above 1³; each chain starts from the
    up-scaled synthesis of the next coarser grid."""

    kind = "multigrid"

    def __init__(self, dataset, models, cfg, log=None, lr_schedule=None):
        models = list(models)
        sizes = ladder_sizes(cfg.factors)
        if len(models) != len(cfg.factors):
            raise ValueError(f"{len(cfg.factors)} grids above 1³ need as many models, got {len(models)}")
        for m, s in zip(models, sizes[1:]):
            if m.grid_shape != (s, s, s):
                raise ValueError(f"model for grid {s}³ expects {m.grid_shape}")
        super().__init__(dataset, models[-1], cfg, log, lr_schedule)
        self.models = models
        self.opts = [AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2) for _ in models]
        self.pyramid = build_pyramid(dataset.grids, cfg.factors)
        self.histogram = fit_histogram(self.pyramid[0], cfg.histogram_bins)

    def step(self):
        t = self.iteration
        idx, _ = self.batch_indices(t)
        prev = self.pyramid[0][idx]  # grid 0 passes the observed 1³ versions through
        record = {"grids": []}
        for s, (model, f) in enumerate(zip(self.models, self.cfg.factors), start=1):
            obs = self.pyramid[s][idx]
            start = upscale(prev, f)
            syn = run_chain(model, start, self.cfg.langevin, self.langevin_rngs(t, len(idx), grid=s), noise=self.noise_on(t))
            grads, stats = mle_grad(model, obs, syn)
            self.opts[s - 1] = self._update(model, grads, self.opts[s - 1], t)
            record["grids"].append({"size": obs.shape[-1], **self._diag(stats, grads)})
            prev = syn
        self.iteration += 1
        fine = record["grids"][-1]
        return self.emit({**{k: fine[k] for k in ("value", "energy_obs", "energy_syn", "grad_norm")}, **record})

    def state_dict(self):
        return {
            "kind": self.kind,
            "iteration": self.iteration,
            "grids": [{"params": _copy_arrays(m.params), "adam": _adam_state(o)} for m, o in zip(self.models, self.opts)],
            "histogram": {"edges": self.histogram.edges.copy(), "probs": self.histogram.probs.copy()},
        }

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ValueError(f"checkpoint holds a {state['kind']} run, trainer is {self.kind}")
        if len(state["grids"]) != len(self.models):
            raise ValueError("checkpoint grid count does not match the ladder")
        self.iteration = int(state["iteration"])
        for m, g in zip(self.models, state["grids"]):
            m.params = _copy_arrays(g["params"])
        self.opts = [_load_adam(g["adam"]) for g in state["grids"]]
        self.histogram = HistogramModel(state["histogram"]["edges"], state["histogram"]["probs"])


class CoopTrainer(Trainer):
    """MCMC teaching: the generator seeds the chains and regresses onto
    the revised samples with its own latents."""

    kind = "coop"

    def __init__(self, dataset, model, generator: GeneratorModel, cfg, log=None, lr_schedule=None):
        super().__init__(dataset, model, cfg, log, lr_schedule)
        if generator.grid_shape != model.grid_shape:
            raise ValueError(f"generator output {generator.grid_shape} != descriptor input {model.grid_shape}")
        self.generator = generator
        self.gen_opt = AdamState(lr=cfg.gen_lr, beta1=cfg.gen_beta1, beta2=cfg.beta2)

    def step(self):
        t = self.iteration
        cfg = self.cfg
        idx, _ = self.batch_indices(t)
        obs = self.data.grids[idx]
        Z = sample_prior(self.generator.latent_dim, np.random.default_rng([cfg.seed, TAG_LATENT, t]), cfg.chains)
        gvals = self.generator.forward_train(Z)
        gen_out = gvals[self.generator.net.output_id][:, 0]
        start = gen_out
        if cfg.gen_init_noise:
            eps = np.random.default_rng([cfg.seed, TAG_INIT_NOISE, t]).standard_normal(gen_out.shape, dtype=np.float32)
            start = gen_out + np.float32(self.generator.noise_std) * eps
        syn = run_chain(self.model, start, cfg.langevin, self.langevin_rngs(t, len(start)), noise=self.noise_on(t))
        grads, stats = mle_grad(self.model, obs, syn)
        self.opt = self._update(self.model, grads, self.opt, t)
        ggrads, loss, _ = regression_grad(self.generator, Z, syn, values=gvals)
        gen_lr = self.lr_at(t, cfg.gen_lr)
        self.generator.params, self.gen_opt = adam_step(self.generator.params, ggrads, self.gen_opt, lr=gen_lr)
        self.generator.buffers = refresh_buffers(self.generator, gvals)
        self.iteration += 1
        return self.emit({**self._diag(stats, grads), "gen_loss": loss, "gen_grad_norm": _grad_norm(ggrads)})

    def state_dict(self):
        s = super().state_dict()
        s["gen_params"] = _copy_arrays(self.generator.params)
        s["gen_buffers"] = _copy_arrays(self.generator.buffers)
        s["gen_adam"] = _adam_state(self.gen_opt)
        return s

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.generator.params = _copy_arrays(state["gen_params"])
        self.generator.buffers = _copy_arrays(state["gen_buffers"])
        self.gen_opt = _load_adam(state["gen_adam"])


# ---------------------------------------------------------------- entry points


def train_mle(dataset, model, cfg, log=None, lr_schedule=None):
    tr = MLETrainer(dataset, model, cfg, log, lr_schedule)
    tr.run()
    return tr.model, tr.history


def train_recovery(dataset, model, cfg, log=None, lr_schedule=None):
    tr = RecoveryTrainer(dataset, model, cfg, log, lr_schedule)
    tr.run()
    return tr.model, tr.history


def train_superres(dataset, model, cfg, log=None, lr_schedule=None):
    tr = SuperResTrainer(dataset, model, cfg, log, lr_schedule)
    tr.run()
    return tr.model, tr.history


def train_multigrid(dataset, models, cfg, log=None, lr_schedule=None):
    tr = MultiGridTrainer(dataset, models, cfg, log, lr_schedule)
    tr.run()
    return tr.models, tr.histogram, tr.history


def train_cooperative(dataset, model, generator, cfg, log=None, lr_schedule=None):
    tr = CoopTrainer(dataset, model, generator, cfg, log, lr_schedule)
    tr.run()
    return tr.model, tr.generator, tr.history


def recover(model, Y_corrupted, mask, cfg: LangevinConfig, rng=None):
    """Conditional chain from the corrupted grids; unmasked voxels are kept."""
    Y = np.asarray(Y_corrupted, np.float32)
    single = Y.ndim == 3
    Y = Y[None] if single else Y
    mask = np.asarray(mask, bool)
    mask = mask[None] if mask.ndim == 3 else mask
    out = run_chain(model, Y, cfg, rng, mask=np.broadcast_to(mask, Y.shape))
    return out[0] if single else out


def superres(model, Y_low, scaler: GridScaler, cfg: LangevinConfig, rng=None):
    """Projected chain from C⁻·Y_low; the block means stay equal to Y_low."""
    Y_low = np.asarray(Y_low, np.float32)
    single = Y_low.ndim == 3
    start = scaler.up(Y_low[None] if single else Y_low)
    if scaler.factor == 1:
        return start[0] if single else start
    out = run_chain(model, start, cfg, rng, scaler=scaler)
    return out[0] if single else out


def sample_multigrid(models, histogram: HistogramModel, factors, cfg: LangevinConfig, n=1, seed=0):
    """Pyramid of ``n`` syntheses from 1³ up to the finest grid."""
    factors = tuple(int(f) for f in factors)
    if len(models) != len(factors):
        raise ValueError("one model per grid above 1³ required")
    rng = np.random.default_rng([int(seed), TAG_CHAIN_INIT])
    levels = [sample_histogram(histogram, rng, n)]
    for s, (model, f) in enumerate(zip(models, factors), start=1):
        start = upscale(levels[-1], f)
        levels.append(run_chain(model, start, cfg, chain_rngs(seed, n, TAG_LANGEVIN + s)))
    return levels


def sample_descriptor(model, n, cfg: LangevinConfig, seed=0, start=None):
    """Fresh chains from N(0, s²) (or ``start``), K Langevin steps."""
    if start is None:
        rng = np.random.default_rng([int(seed), TAG_CHAIN_INIT])
        start = (model.ref_std * rng.standard_normal((n,) + model.grid_shape)).astype(np.float32)
    return run_chain(model, start, cfg, chain_rngs(seed, len(start), TAG_LANGEVIN))


def with_iterations(cfg: TrainConfig, iterations):
    return replace(cfg, iterations=iterations)
