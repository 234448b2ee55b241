import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _fresh_tape():
    from hclsm.tensor.core import reset_tape, set_default_dtype

    set_default_dtype(np.float64)
    reset_tape()
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ shared smoke training runs

SMOKE_SEEDS = (0, 1, 2)
SMOKE_PROTOCOLS = ("two_stage", "joint")
SMOKE_EVAL_EPISODES = 20


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """Three seeds of the smoke config under each protocol, trained once per session.

    Returns ``{(protocol, seed): record}`` where a record holds the metrics
    columns, the wall time of the training call and the evaluation on held-out
    episodes. Setting ``HCLSM_SMOKE_DIR`` keeps the runs in that directory and
    reuses finished ones, so a rerun only trains what is missing.
    """
    import json
    import time
    from pathlib import Path

    from hclsm import worldgen
    from hclsm.model import load_checkpoint, load_config, read_metrics, train
    from hclsm.model.evaluate import collision_score_gap, evaluate

    keep = os.environ.get("HCLSM_SMOKE_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("smoke")
    data = root / "data"
    if not (data / "dataset.json").exists():
        worldgen.write_dataset(data, 256, worldgen.WorldConfig(size=32, T=16), 0)
    held_out = worldgen.load_split(data, "eval")[:SMOKE_EVAL_EPISODES]
    base = load_config(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")

    runs = {}
    for seed in SMOKE_SEEDS:
        for protocol in SMOKE_PROTOCOLS:
            cfg = base.replace(seed=seed, protocol=protocol)
            out = root / f"{protocol}_seed{seed}"
            record_path = out / "record.json"
            if record_path.exists() and json.loads(record_path.read_text())["config_hash"] == cfg.hash():
                record = json.loads(record_path.read_text())
            else:
                t0 = time.perf_counter()
                result = train(cfg, data, out, resume=False)
                seconds = time.perf_counter() - t0
                _, model, ema, _, _, _ = load_checkpoint(result.checkpoint)
                ev = evaluate(model, ema, cfg, held_out)
                reports = ev.pop("_reports")
                record = {"config_hash": cfg.hash(), "seconds": seconds, "eval": ev,
                          "gaps": [collision_score_gap(r) for r in reports]}
                record_path.write_text(json.dumps(record))
            record["metrics"] = read_metrics(out / "metrics.csv")
            record["cfg"] = cfg
            runs[(protocol, seed)] = record
    return runs


# ------------------------------------------------------------ acceptance report

ACCEPTANCE_CRITERIA = range(1, 11)
_acceptance: dict[int, tuple[bool, str]] = {}
_acceptance_seen = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints and records the PASS/FAIL line of acceptance criterion ``n``."""
    _acceptance_seen.append(True)

    def report(n: int, ok: bool, detail: str) -> bool:
        _acceptance[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_seen:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        ok, detail = _acceptance.get(n, (False, "no result (not selected, or stopped before reporting)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
