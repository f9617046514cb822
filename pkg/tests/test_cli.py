import json

import numpy as np
import pytest

from vebm import runner
from vebm.checkpoint import load_checkpoint
from vebm.cli import LOCK_NAME, main
from vebm.config import from_dict
from vebm.data import box_mesh, load_grid, save_grid

ARCH = [
    {"kind": "conv3d", "out_channels": 4, "kernel": 3, "stride": 2},
    {"kind": "relu"},
    {"kind": "conv3d", "out_channels": 2, "kernel": 2, "stride": 1},
    {"kind": "relu"},
    {"kind": "fully_connected", "out_channels": 1, "bias": False},
]


def _doc(mode="train", **train):
    t = {"iterations": 4, "batch_size": 3, "chains": 3, "langevin": {"steps": 3, "step_size": 0.01}, "noise_off_after": None}
    t.update(train)
    return {
        "mode": mode,
        "architecture": ARCH,
        "data": {"categories": ["block-table", "block-chair"], "count": 3, "resolution": 8, "test_count": 2},
        "train": t,
    }


@pytest.fixture
def config(tmp_path):
    def write(mode="train", name="cfg.json", **train):
        p = tmp_path / name
        p.write_text(json.dumps(_doc(mode, **train)))
        return str(p)

    return write


def _train(cfg_path, out, *extra):
    return main(["train", "--config", cfg_path, "--out", str(out), *extra])


# ---------------------------------------------------------------- training commands


def test_train_zero_iterations_is_initialization(config, tmp_path):
    assert _train(config(iterations=0), tmp_path / "r", "--count", "0") == 0
    _, state = load_checkpoint(tmp_path / "r" / "checkpoint.vebm")
    init = runner.build_descriptors(from_dict(_doc(iterations=0)))[0]
    assert state["iteration"] == 0
    for k, v in init.params.items():
        np.testing.assert_array_equal(state["params"][k], v)


def test_train_writes_log_checkpoint_and_samples(config, tmp_path, capsys):
    assert _train(config(), tmp_path / "r", "--count", "2") == 0
    out = tmp_path / "r"
    lines = (out / "train.jsonl").read_text().splitlines()
    assert [json.loads(l)["iteration"] for l in lines] == [1, 2, 3, 4]
    samples = sorted((out / "samples").glob("*.vgrid"))
    assert len(samples) == 2
    assert set(np.unique(load_grid(samples[0]))) <= {0.0, 1.0}
    assert not (out / LOCK_NAME).exists()
    assert "4 iterations" in capsys.readouterr().out


def test_rerun_is_byte_identical(config, tmp_path):
    cfg = config()
    for name in ("a", "b"):
        assert _train(cfg, tmp_path / name, "--count", "2") == 0
    for rel in ("checkpoint.vebm", "train.jsonl", "samples/sample_0000.vgrid", "samples/sample_0001.vgrid"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("mode", ["train", "recover"])
def test_resume_matches_uninterrupted(config, tmp_path, mode):
    cfg = config(mode)
    cmd = mode
    assert main([cmd, "--config", cfg, "--out", str(tmp_path / "full"), "--count", "0"]) == 0
    assert main([cmd, "--config", cfg, "--out", str(tmp_path / "half"), "--iterations", "2", "--count", "0"]) == 0
    half_ck = str(tmp_path / "half" / "checkpoint.vebm")
    assert main([cmd, "--config", cfg, "--out", str(tmp_path / "rest"), "--checkpoint", half_ck, "--count", "0"]) == 0
    assert (tmp_path / "full" / "checkpoint.vebm").read_bytes() == (tmp_path / "rest" / "checkpoint.vebm").read_bytes()


def test_seed_flag_overrides_config(config, tmp_path):
    cfg = config()
    _train(cfg, tmp_path / "a", "--count", "0")
    _train(cfg, tmp_path / "b", "--count", "0", "--seed", "9")
    assert (tmp_path / "a" / "checkpoint.vebm").read_bytes() != (tmp_path / "b" / "checkpoint.vebm").read_bytes()


def test_recover_writes_outputs_and_reports_error(config, tmp_path, capsys):
    assert main(["recover", "--config", config("recover"), "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r" / "outputs").glob("*.vgrid"))) == 4  # two categories × two test shapes
    assert "held-out recovery error" in capsys.readouterr().out


# ---------------------------------------------------------------- error categories


def test_malformed_key_names_the_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**_doc(), "bogus_key": 1}))
    assert _train(str(p), tmp_path / "r") == 3
    assert "bogus_key" in capsys.readouterr().err


def test_invalid_json_and_missing_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    assert _train(str(p), tmp_path / "r") == 3
    assert main(["train", "--out", str(tmp_path / "r")]) == 3
    assert _train("no-such-preset", tmp_path / "r") == 3


def test_mode_mismatch(config, tmp_path):
    assert main(["recover", "--config", config("train"), "--out", str(tmp_path / "r")]) == 3


def test_checkpoint_kind_mismatch(config, tmp_path):
    _train(config(), tmp_path / "r", "--count", "0")
    ck = str(tmp_path / "r" / "checkpoint.vebm")
    assert main(["recover", "--config", config("recover", name="rec.json"), "--checkpoint", ck, "--out", str(tmp_path / "s")]) == 6


def test_lock_busy(config, tmp_path):
    out = tmp_path / "r"
    out.mkdir()
    (out / LOCK_NAME).write_text("123")
    assert _train(config(), out) == 7
    assert (out / LOCK_NAME).exists()


def test_divergence_exit_code(config, tmp_path):
    assert _train(config(langevin={"steps": 10, "step_size": 10.0}), tmp_path / "r") == 5


def test_io_and_usage_errors(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.vebm"), "--out", str(tmp_path / "s")]) == 4
    (tmp_path / "junk.vebm").write_bytes(b"nope")
    assert main(["sample", "--checkpoint", str(tmp_path / "junk.vebm"), "--out", str(tmp_path / "s")]) == 4
    assert main(["sample", "--count", "-1", "--out", str(tmp_path / "s")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--threads", "0", "--config", "desk-synthesis", "--out", str(tmp_path / "t")]) == 3


# ---------------------------------------------------------------- sample and eval


@pytest.fixture
def trained(config, tmp_path):
    _train(config(), tmp_path / "run", "--count", "0")
    return str(tmp_path / "run" / "checkpoint.vebm")


def test_sample_count_zero(trained, tmp_path):
    assert main(["sample", "--checkpoint", trained, "--count", "0", "--out", str(tmp_path / "s")]) == 0
    assert not list((tmp_path / "s").glob("*.vgrid"))


def test_sample_same_seed_identical_and_binary(trained, tmp_path):
    for name in ("a", "b"):
        assert main(["sample", "--checkpoint", trained, "--count", "3", "--seed", "5", "--obj", "--out", str(tmp_path / name)]) == 0
    files = sorted((tmp_path / "a").glob("*.vgrid"))
    assert len(files) == 3 and len(list((tmp_path / "a").glob("*.obj"))) == 3
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        assert set(np.unique(load_grid(f))) <= {0.0, 1.0}


def test_eval_identical_sets_and_exact_keys(trained, tmp_path, capsys):
    ds = tmp_path / "ds"
    assert main(["dataset", "--categories", "block-table,block-chair", "--count", "3", "--resolution", "8", "--out", str(ds)]) == 0
    args = ["eval", "--checkpoint", trained, "--dataset", str(ds), "--synthetic", str(ds), "--metrics", "fid,inception_score"]
    assert main([*args, "--out", str(tmp_path / "e1")]) == 0
    report = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    assert list(report) == ["fid", "inception_score"]
    assert abs(report["fid"]) < 1e-6
    assert main([*args, "--out", str(tmp_path / "e2")]) == 0
    assert (tmp_path / "e1" / "metrics.json").read_bytes() == (tmp_path / "e2" / "metrics.json").read_bytes()


def test_eval_full_report_deterministic(trained, tmp_path):
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", trained, "--count", "3", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "metrics.json").read_text()
    assert a == (tmp_path / "b" / "metrics.json").read_text()
    assert set(json.loads(a)) == {"inception_score", "fid", "recovery_error", "softmax_prob", "classification_error"}


def test_eval_unknown_metric(trained, tmp_path):
    assert main(["eval", "--checkpoint", trained, "--metrics", "accuracy", "--out", str(tmp_path / "e")]) == 3


# ---------------------------------------------------------------- data commands


def test_dataset_of_ten(tmp_path):
    out = tmp_path / "ds"
    assert main(["dataset", "--categories", "block-sofa", "--count", "10", "--resolution", "8", "--out", str(out)]) == 0
    assert len(list(out.glob("*.vgrid"))) == 10
    assert len(json.loads((out / "labels.json").read_text())["entries"]) == 10


def _write_obj(path, tris):
    verts = tris.reshape(-1, 3)
    lines = [f"v {x} {y} {z}" for x, y, z in verts]
    lines += [f"f {3 * i + 1} {3 * i + 2} {3 * i + 3}" for i in range(len(tris))]
    path.write_text("\n".join(lines) + "\n")


def test_voxelize_central_cube(tmp_path):
    mesh = tmp_path / "cube.obj"
    _write_obj(mesh, box_mesh((0.25,) * 3, (0.75,) * 3))
    assert main(["voxelize", str(mesh), "--resolution", "8"]) == 0
    g = load_grid(tmp_path / "cube.vgrid")
    expect = np.zeros((8, 8, 8), np.float32)
    expect[2:6, 2:6, 2:6] = 1
    np.testing.assert_array_equal(g, expect)


def test_export_empty_grid(tmp_path):
    p = tmp_path / "empty.vgrid"
    save_grid(p, np.zeros((4, 4, 4), np.float32))
    assert main(["export", str(p), "--out", str(tmp_path / "e.obj")]) == 0
    assert "\nf " not in (tmp_path / "e.obj").read_text()
