"""``vebm`` command line.

Exit codes: 0 success, 2 usage, 3 invalid config, 4 IO or file format,
5 numerical divergence, 6 checkpoint does not fit the command, 7 output
directory locked by another command.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import runner
from .checkpoint import CheckpointError
from .config import PRESETS, ConfigError, load_config, preset
from .data import (
    CATEGORIES,
    GridFormatError,
    corrupt,
    export_obj,
    gen_procedural,
    load_dataset,
    load_grid,
    normalize_mesh,
    read_obj,
    save_dataset,
    save_grid,
    to_binary,
    voxelize_mesh,
)
from .evaluation import (
    REPORT_KEYS,
    ReferenceClassifier,
    classification_error,
    extract_features,
    fid,
    inception_score,
    metrics_report,
    recovery_error,
    softmax_class_prob,
    train_classifier,
)
from .gridops import GridScaler
from .langevin import LangevinDivergence, chain_rngs
from .tensor import NonFiniteError
from .training import TAG_LANGEVIN, recover, superres

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_LOCKED = 0, 2, 3, 4, 5, 6, 7
TRAIN_COMMANDS = ("train", "recover", "superres", "multigrid", "coop")
LOCK_NAME = ".vebm.lock"


class LockBusy(RuntimeError):
    pass


@contextlib.contextmanager
def output_lock(directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockBusy(f"{d} is in use by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield d
    finally:
        lock.unlink(missing_ok=True)


@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        env = os.environ.get("VEBM_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _resolve_config(arg):
    if arg is None:
        raise ConfigError("--config is required (a JSON file or a preset name)")
    if Path(arg).is_file():
        return load_config(arg)
    if arg in PRESETS:
        return preset(arg)
    raise ConfigError(f"--config {arg!r} is neither a file nor a preset ({', '.join(sorted(PRESETS))})")


def _write_grids(directory, grids, prefix, obj=False):
    directory.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(grids):
        save_grid(directory / f"{prefix}_{i:04d}.vgrid", g)
        if obj:
            (directory / f"{prefix}_{i:04d}.obj").write_text(export_obj(g))


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _resolve_config(args.config)
    if cfg.mode != args.command:
        raise ConfigError(f"config mode {cfg.mode!r} does not match command {args.command!r}")
    if args.seed is not None:
        cfg.train.seed = args.seed
    data = runner.load_data(cfg)
    with output_lock(args.out) as out:
        with open(out / "train.jsonl", "a" if args.checkpoint else "w") as log:
            tr = runner.build_trainer(cfg, data, log)
            if args.checkpoint:
                ck_cfg, state = runner.load_run(args.checkpoint)
                runner.resume(tr, state, cfg)
            n = args.iterations if args.iterations is not None else cfg.train.iterations - tr.iteration
            tr.run(n)
        runner.save_run(out / "checkpoint.vebm", cfg, tr, data)
        written = _mode_outputs(cfg, tr, data, out, args.count)
    print(f"{args.command}: {tr.iteration} iterations done, checkpoint {out / 'checkpoint.vebm'}, {written} grids written")
    return EXIT_OK


def _mode_outputs(cfg, tr, data, out, count):
    """Per-mode artifacts: recovered / super-resolved test shapes, or samples."""
    lc = cfg.sampling_langevin()
    mean, conv = data.train.mean, data.train.convention
    if cfg.mode in ("recover", "superres") and data.test is not None:
        grids = data.test.grids[: count if count is not None else len(data.test)]
        if cfg.mode == "recover":
            rng = np.random.default_rng([cfg.train.seed, 77])
            pairs = [corrupt(g, cfg.train.corruption, rng, cfg.ref_std) for g in grids]
            outs, errs = [], []
            for (c, m), g in zip(pairs, grids):
                r = recover(tr.model, c, m, lc, rng=chain_rngs(cfg.train.seed, 1, TAG_LANGEVIN))
                outs.append(to_binary(r, conv, mean))
                if m.any():
                    errs.append(recovery_error(to_binary(g, conv, mean), outs[-1], m))
            if errs:
                print(f"recover: held-out recovery error {np.mean(errs):.4f}")
        else:
            sc = GridScaler(cfg.train.scale_factor)
            res = superres(tr.model, sc.down(grids), sc, lc, rng=chain_rngs(cfg.train.seed, len(grids), TAG_LANGEVIN))
            outs = list(to_binary(res, conv, mean))
        _write_grids(out / "outputs", outs, "output")
        return len(outs)
    cfg_state = tr.state_dict()
    cfg_state.update(dataset_mean=mean, convention=conv)
    n = 4 if count is None else count
    _, binary = runner.sample_from_checkpoint(cfg, cfg_state, n, cfg.train.seed)
    _write_grids(out / "samples", binary, "sample")
    return len(binary)


def cmd_sample(args):
    if not args.checkpoint:
        raise ConfigError("sample needs --checkpoint")
    cfg, state = runner.load_run(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    count = 1 if args.count is None else args.count
    with output_lock(args.out) as out:
        _, binary = runner.sample_from_checkpoint(cfg, state, count, seed)
        _write_grids(out, binary, "sample", obj=args.obj)
    print(f"sample: wrote {len(binary)} grids to {out}")
    return EXIT_OK


def _load_grid_dir(path):
    p = Path(path)
    if (p / "labels.json").exists():
        return load_dataset(p).grids
    files = sorted(p.glob("*.vgrid"))
    if not files:
        raise FileNotFoundError(f"no .vgrid files in {p}")
    return np.stack([load_grid(f) for f in files])


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    cfg, state = runner.load_run(args.checkpoint)
    keys = [k.strip() for k in args.metrics.split(",")] if args.metrics else list(REPORT_KEYS)
    unknown = set(keys) - set(REPORT_KEYS)
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}")
    seed = 0 if args.seed is None else args.seed
    mean, conv = state["dataset_mean"], state["convention"]
    data = runner.load_data(cfg)
    if args.dataset:
        real_bin = _load_grid_dir(args.dataset)
    else:
        real_bin = to_binary((data.test or data.train).grids, conv, mean)
    desc = runner._restore_descriptors(cfg, state)[-1]

    def model_space(binary):
        b = np.asarray(binary, np.float32)
        return 2 * b - 1 if conv == "signed-unit" else b - np.float32(mean)

    if args.synthetic:
        syn_bin = _load_grid_dir(args.synthetic)
    else:
        _, syn_bin = runner.sample_from_checkpoint(cfg, state, 8 if args.count is None else args.count, seed)
    values = {}
    need_cls = {"inception_score", "softmax_prob", "classification_error"} & set(keys)
    if need_cls:
        labels = data.train.labels
        if len(set(labels)) < 2:
            raise ConfigError("classifier metrics need a labelled dataset with at least two categories")
        clf = ReferenceClassifier(desc, train_classifier(extract_features(desc, data.train.grids), labels))
        probs = clf.predict_proba(model_space(syn_bin))
        values["inception_score"] = inception_score(probs)
        values["softmax_prob"] = softmax_class_prob(clf, model_space(syn_bin), args.target)
        values["classification_error"] = classification_error(clf, model_space(syn_bin), args.target)
    if "fid" in keys:
        values["fid"] = fid(extract_features(desc, model_space(real_bin)), extract_features(desc, model_space(syn_bin)))
    if "recovery_error" in keys:
        rng = np.random.default_rng([seed, 77])
        lc = cfg.sampling_langevin()
        errs = []
        for g in real_bin:
            c, m = corrupt(model_space(g), cfg.train.corruption, rng, cfg.ref_std)
            if not m.any():
                continue
            r = recover(desc, c, m, lc, rng=chain_rngs(seed, 1, TAG_LANGEVIN))
            errs.append(recovery_error(g, to_binary(r, conv, mean), m))
        values["recovery_error"] = float(np.mean(errs)) if errs else 0.0
    report = metrics_report(values, keys)
    with output_lock(args.out) as out:
        (out / "metrics.json").write_text(report + "\n")
    print(report)
    return EXIT_OK


def cmd_dataset(args):
    cats = [c.strip() for c in args.categories.split(",")] if args.categories else list(CATEGORIES)
    count = 10 if args.count is None else args.count
    ds = gen_procedural(cats, count, args.resolution, 0 if args.seed is None else args.seed)
    with output_lock(args.out) as out:
        save_dataset(out, ds)
    print(f"dataset: {len(ds)} shapes in {args.out}")
    return EXIT_OK


def cmd_voxelize(args):
    tris = read_obj(Path(args.mesh).read_text())
    if args.normalize:
        tris = normalize_mesh(tris)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        grid = voxelize_mesh(tris, args.resolution)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out) if args.out else Path(args.mesh).with_suffix(".vgrid")
    save_grid(out, grid)
    print(f"voxelize: {int(grid.sum())} occupied voxels -> {out}")
    return EXIT_OK


def cmd_export(args):
    grid = load_grid(args.grid)
    text = export_obj(grid, args.threshold, dedup_faces=args.dedup_faces)
    out = Path(args.out) if args.out else Path(args.grid).with_suffix(".obj")
    out.write_text(text)
    print(f"export: {text.count(chr(10) + 'f ')} faces -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


TRAIN_HELP = {
    "train": "maximum-likelihood synthesis training",
    "recover": "conditional training for shape recovery",
    "superres": "projected training for super-resolution",
    "multigrid": "coarse-to-fine training over a grid ladder",
    "coop": "cooperative descriptor and generator training",
}


def build_parser():
    p = argparse.ArgumentParser(prog="vebm", description="Energy-based voxel shape models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="BLAS thread cap (default: $VEBM_THREADS)")
        sp.add_argument("--out", required=out_required, help="output directory")

    for name in TRAIN_COMMANDS:
        sp = sub.add_parser(name, help=TRAIN_HELP[name])
        sp.add_argument("--config", help="JSON config file or preset name")
        sp.add_argument("--checkpoint", help="resume from this checkpoint")
        sp.add_argument("--iterations", type=int, help="iterations to run now (default: until the configured total)")
        sp.add_argument("--count", type=int, help="number of output grids")
        common(sp)

    sp = sub.add_parser("sample", help="synthesize shapes from a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--count", type=int)
    sp.add_argument("--obj", action="store_true", help="also write OBJ meshes")
    common(sp)

    sp = sub.add_parser("eval", help="metrics report for a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--metrics", help=f"comma list from {','.join(REPORT_KEYS)}")
    sp.add_argument("--dataset", help="directory of real grids (default: the config's test set)")
    sp.add_argument("--synthetic", help="directory of synthesized grids (default: sample --count)")
    sp.add_argument("--count", type=int)
    sp.add_argument("--target", type=int, default=0, help="target class for softmax_prob / classification_error")
    common(sp)

    sp = sub.add_parser("dataset", help="write a procedural dataset directory")
    sp.add_argument("--categories", help=f"comma list from {','.join(CATEGORIES)}")
    sp.add_argument("--count", type=int, help="shapes per category")
    sp.add_argument("--resolution", type=int, default=16)
    common(sp)

    sp = sub.add_parser("voxelize", help="voxelize an OBJ mesh")
    sp.add_argument("mesh")
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--normalize", action="store_true", help="fit the mesh into the unit cube first")
    sp.add_argument("--out", help="output .vgrid path")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("export", help="export a grid as an OBJ of voxel cubes")
    sp.add_argument("grid")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--dedup-faces", action="store_true")
    sp.add_argument("--out", help="output .obj path")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--seed", type=int)
    return p


COMMANDS = {name: cmd_train for name in TRAIN_COMMANDS}
COMMANDS.update(sample=cmd_sample, eval=cmd_eval, dataset=cmd_dataset, voxelize=cmd_voxelize, export=cmd_export)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if getattr(args, "count", None) is not None and args.count < 0:
        print("error: --count must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        with thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LockBusy as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LOCKED
    except runner.CheckpointMismatch as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (LangevinDivergence, NonFiniteError) as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, GridFormatError, CheckpointError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
