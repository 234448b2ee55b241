import json
from pathlib import Path

import numpy as np
import pytest

from hclsm import cli, worldgen
from hclsm.model.evaluate import read_pgm
from hclsm.tensor import io as hct
from hclsm.tensor.core import record
from hclsm.tensor.gradcheck import REGISTRY

MICRO_CFG = """# a very small model for command-line tests
d_model = 8
d_world = 8
d_slot = 8
d_inner = 8
d_state = 2
heads = 2
sbd_hidden = 8
n_max = 3
slot_iters = 1
n_summary = 2
patch = 4
image_size = 16
clip_len = 4
batch = 2
total_steps = 50
warmup = 2
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def manifest(out: Path) -> dict:
    return json.loads((out / "run_manifest.json").read_text())


@pytest.fixture(scope="module")
def micro_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "micro.cfg"
    p.write_text(MICRO_CFG)
    return p


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert cli.main(["gen-data", "--out", str(root), "--episodes", "5", "--size", "16", "--frames", "6"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, micro_cfg, dataset):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(micro_cfg), "--dataset", str(dataset), "--out", str(out),
                     "--steps", "3"]) == 0
    return out


# ------------------------------------------------------------ gen-data


def test_gen_data_writes_split_and_manifest(dataset):
    idx = worldgen.dataset_index(dataset)
    assert len(idx["train"]) == 4 and len(idx["eval"]) == 1
    m = manifest(dataset)
    assert m["status"] == "ok" and m["exit_code"] == 0 and m["command"] == "gen-data"


def test_gen_data_object_count_and_first_seed(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path, "--episodes", "3", "--size", "32", "--frames", "2",
                     "--objects", "3", "--seed0", "40")
    assert code == 0
    eps = worldgen.load_split(tmp_path, "train") + worldgen.load_split(tmp_path, "eval")
    assert [e.seed for e in eps] == [40, 41, 42]
    assert all(e.meta["n_objects"] == 3 for e in eps)


@pytest.mark.parametrize("bad", ["x", "3-2", "0"])
def test_gen_data_bad_object_spec_is_usage_error(tmp_path, capsys, bad):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--episodes", "1", "--objects", bad)
    assert code == 2 and "usage error" in err
    assert manifest(tmp_path)["status"] == "usage_error"


# ------------------------------------------------------------ train


def test_train_writes_metrics_checkpoint_and_manifest(checkpoint):
    m = manifest(checkpoint)
    assert m["status"] == "ok" and m["exit_code"] == 0 and m["ended"] >= m["started"]
    assert m["config"]["total_steps"] == 3 and m["git"]
    assert Path(m["outputs"]["metrics"]).exists() and Path(m["outputs"]["checkpoint"]).exists()


def test_steps_flag_wins_over_file(checkpoint):
    lines = (checkpoint / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 3  # the file says 50


def test_unknown_config_key_exits_2_with_line(tmp_path, capsys, dataset):
    bad = tmp_path / "bad.cfg"
    bad.write_text(MICRO_CFG + "learning_rate_typo = 3\n")
    code, _, err = run(capsys, "train", "--config", bad, "--dataset", dataset, "--out", tmp_path / "o")
    assert code == 2 and "learning_rate_typo = 3" in err
    m = manifest(tmp_path / "o")
    assert m["status"] == "config_error" and "learning_rate_typo" in m["error"]


def test_unknown_set_override_exits_2(tmp_path, capsys, micro_cfg, dataset):
    code, _, _ = run(capsys, "train", "--config", micro_cfg, "--dataset", dataset, "--out", tmp_path,
                     "--set", "nope=1")
    assert code == 2


def test_missing_dataset_exits_2_and_manifest_says_so(tmp_path, capsys, micro_cfg):
    code, _, _ = run(capsys, "train", "--config", micro_cfg, "--dataset", tmp_path / "absent", "--out", tmp_path)
    assert code == 2 and manifest(tmp_path)["status"] == "usage_error"


def test_argument_error_exits_2(capsys):
    assert cli.main(["train"]) == 2
    assert cli.main(["no-such-command"]) == 2


def test_bad_thread_cap_exits_2(tmp_path, capsys, micro_cfg, dataset, monkeypatch):
    monkeypatch.setenv("HCLSM_THREADS", "many")
    code, _, _ = run(capsys, "train", "--config", micro_cfg, "--dataset", dataset, "--out", tmp_path)
    assert code == 2


def test_non_finite_data_exits_3_with_dump(tmp_path, capsys, micro_cfg):
    ds = worldgen.write_dataset(tmp_path / "nan", 3, worldgen.WorldConfig(size=16, T=6), 0)
    for name in worldgen.dataset_index(ds)["train"]:
        f = hct.load(ds / name / "frames.hct")
        hct.save(ds / name / "frames.hct", np.full_like(f, np.nan))
    out = tmp_path / "o"
    code, _, err = run(capsys, "train", "--config", micro_cfg, "--dataset", ds, "--out", out, "--steps", "2")
    assert code == 3 and "nan_dump_step0.json" in err
    m = manifest(out)
    assert m["status"] == "numerical_abort" and Path(m["outputs"]["diagnostics"]).exists()


def test_seed_flag_overrides_config(tmp_path, capsys, micro_cfg, dataset):
    code, _, _ = run(capsys, "train", "--config", micro_cfg, "--dataset", dataset, "--out", tmp_path,
                     "--steps", "1", "--seed", "9")
    assert code == 0 and manifest(tmp_path)["config"]["seed"] == 9 and manifest(tmp_path)["seed"] == 9


# ------------------------------------------------------------ eval


def test_eval_json_schema_and_determinism(tmp_path, capsys, checkpoint, dataset):
    outs = []
    for k in range(2):
        out = tmp_path / f"e{k}"
        code, stdout, _ = run(capsys, "eval", "--checkpoint", checkpoint, "--dataset", dataset, "--out", out)
        assert code == 0
        assert set(json.loads(stdout)) == {"ari_fg", "event_f1", "pca_evr"}
        outs.append(out)
    data = json.loads((outs[0] / "eval.json").read_text())
    assert {"ari_fg", "event_f1", "pca_evr", "event_precision", "event_recall"} <= set(data)
    for name in ("eval.json", "pca.csv", "edge_weights.csv", "causal_adjacency.csv", "event_scores/episode_000.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_architecture_mismatch_exits_2(tmp_path, capsys, checkpoint, dataset):
    code, _, _ = run(capsys, "eval", "--checkpoint", checkpoint, "--dataset", dataset, "--out", tmp_path,
                     "--set", "d_state=3")
    assert code == 2


def test_eval_image_size_mismatch_exits_2(tmp_path, capsys, checkpoint):
    big = worldgen.write_dataset(tmp_path / "big", 2, worldgen.WorldConfig(size=32, T=4), 0)
    code, _, _ = run(capsys, "eval", "--checkpoint", checkpoint, "--dataset", big, "--out", tmp_path / "o")
    assert code == 2


# ------------------------------------------------------------ inspect


def test_inspect_file_count_dims_and_rerun(tmp_path, capsys, checkpoint, dataset):
    ep = dataset / worldgen.dataset_index(dataset)["eval"][0]
    dumps = []
    for k in range(2):
        out = tmp_path / f"i{k}"
        assert run(capsys, "inspect", "--checkpoint", checkpoint, "--episode", ep, "--out", out)[0] == 0
        dumps.append(out / "inspect")
    files = sorted(p.name for p in dumps[0].iterdir())
    assert len(files) == 3 + 3  # n_max alpha maps + segmentation + two CSVs
    for name in files:
        assert (dumps[0] / name).read_bytes() == (dumps[1] / name).read_bytes()
    for name in files:
        if name.endswith(".pgm"):
            assert read_pgm(dumps[0] / name).shape == (4, 4)


def test_inspect_frame_out_of_range_exits_2(tmp_path, capsys, checkpoint, dataset):
    ep = dataset / worldgen.dataset_index(dataset)["eval"][0]
    code, _, _ = run(capsys, "inspect", "--checkpoint", checkpoint, "--episode", ep, "--out", tmp_path,
                     "--frame", "99")
    assert code == 2


# ------------------------------------------------------------ gradcheck and bench


def test_gradcheck_tensor_scope_lists_at_least_15(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "tensor", "--skip-model", "--out", tmp_path)
    assert code == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()[1:]
    assert len(rows) >= 15 and all(r.endswith(",1") for r in rows)
    assert "FAIL" not in out


def _broken_square(x):
    # forward x^2 with a backward rule that forgets the factor 2
    return record(x.data ** 2, (x,), lambda g: (g * x.data,))


def test_gradcheck_catches_corrupted_backward(tmp_path, capsys, monkeypatch):
    monkeypatch.setitem(REGISTRY, "corrupted_square", lambda rng: (_broken_square, [rng.uniform(0.5, 1.0, 4)]))
    code, out, _ = run(capsys, "gradcheck", "--skip-model", "--out", tmp_path)
    assert code == 1
    assert any(line.startswith("corrupted_square") and line.endswith("FAIL") for line in out.splitlines())
    assert manifest(tmp_path)["status"] == "failed"


def test_bench_scan_custom_row_csv(tmp_path, capsys):
    code, _, _ = run(capsys, "bench-scan", "--bn", "4", "--t", "32", "--dinner", "4", "--dstate", "2",
                     "--repeats", "1", "--workers", "2", "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "bench_scan.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("Custom")


def test_bench_scan_half_custom_row_is_usage_error(tmp_path, capsys):
    assert run(capsys, "bench-scan", "--bn", "4", "--out", tmp_path)[0] == 2
