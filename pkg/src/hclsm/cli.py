"""Command-line entry point: ``hclsm <subcommand>``.

Every subcommand writes ``run_manifest.json`` into ``--out`` before doing any
work and finalises it (status, end time, exit code) on the way out, whatever
happens in between. Exit codes: 0 success, 1 failed checks, 2 usage or
config errors, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------ run manifest


def git_describe() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int
    out_dir: str
    config: dict | None = None
    started: float = field(default_factory=time.time)
    ended: float | None = None
    git: str = field(default_factory=git_describe)
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None
    threads: str | None = field(default_factory=lambda: os.environ.get("HCLSM_THREADS"))

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / "run_manifest.json"

    def write(self) -> None:
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    def finish(self, status: str, code: int, error: str | None = None) -> None:
        self.status, self.exit_code, self.error, self.ended = status, code, error, time.time()
        self.write()


def thread_cap() -> int | None:
    raw = os.environ.get("HCLSM_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"HCLSM_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("HCLSM_THREADS must be at least 1")
    return n


def _capped(workers: int) -> int:
    cap = thread_cap()
    return workers if cap is None else max(1, min(workers, cap))


# ------------------------------------------------------------ config plumbing


def _config(args, base: dict | None = None):
    from .model.config import ModelConfig, parse_config_text, parse_overrides

    values = dict(base or {})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    values.update(parse_overrides(list(getattr(args, "set", None) or [])))
    if getattr(args, "steps", None) is not None:
        values["total_steps"] = args.steps
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = ModelConfig(**values)
    return cfg.replace(workers=_capped(cfg.workers))


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args, manifest: RunManifest) -> int:
    from . import worldgen

    lo, hi = args.min_objects, args.max_objects
    if args.objects is not None:
        try:
            parts = [int(x) for x in args.objects.split("-")]
        except ValueError:
            raise UsageError(f"--objects expects N or LO-HI, got {args.objects!r}") from None
        lo, hi = parts[0], parts[-1]
    if not 1 <= lo <= hi:
        raise UsageError(f"object range {lo}-{hi} is empty or below 1")
    wc = worldgen.WorldConfig(size=args.size, T=args.frames, n_objects=(lo, hi))
    seed0 = args.seed0 if args.seed0 is not None else (args.seed if args.seed is not None else 0)
    root = worldgen.write_dataset(args.out, args.episodes, wc, seed0, args.train_fraction)
    manifest.outputs["dataset"] = str(root / "dataset.json")
    print(f"wrote {args.episodes} episodes to {root}")
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    from .model.train import train

    cfg = _config(args)
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    manifest.write()
    if not Path(args.dataset, "dataset.json").exists():
        raise UsageError(f"no dataset.json under {args.dataset}")

    def log(row):
        if args.verbose and (row["step"] % args.log_every == 0 or row["step"] == cfg.total_steps - 1):
            print(f"step {row['step']:6d} stage {row['stage']} total {row['total']:.6f} sbd {row['sbd']:.6f} "
                  f"alive {row['alive']:.2f} events {row['events']:.2f}", flush=True)

    result = train(cfg, args.dataset, args.out, resume=not args.fresh, log=log)
    manifest.outputs.update(metrics=str(result.metrics_path), checkpoint=str(result.checkpoint))
    print(f"trained {result.steps_run} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def _eval_episodes(args, cfg):
    from . import worldgen

    episodes = worldgen.load_split(args.dataset, args.split)[: args.episodes]
    if not episodes:
        raise UsageError(f"split {args.split!r} of {args.dataset} is empty")
    size = episodes[0].frames.shape[-1]
    if size != cfg.image_size:
        from .model.config import ConfigError

        raise ConfigError(f"dataset frames are {size}px but the checkpoint expects {cfg.image_size}px")
    return episodes


def _load(args):
    from .model.train import load_checkpoint, read_manifest

    saved = read_manifest(args.checkpoint)["config"]
    cfg = _config(args, base=saved) if (args.config or args.set) else None
    return load_checkpoint(args.checkpoint, cfg)


def cmd_eval(args, manifest: RunManifest) -> int:
    from . import rng as seeds
    from .model import evaluate as ev
    from .structure import gumbel_edge_sample
    from .tensor.core import default_dtype, no_grad

    cfg, model, ema, _, causal, step = _load(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    manifest.write()
    episodes = _eval_episodes(args, cfg)
    result = ev.evaluate(model, ema, cfg, episodes)
    reports = result.pop("_reports")
    out = Path(args.out)
    score_dir = out / "event_scores"
    score_dir.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(reports):
        ev.write_event_csv(score_dir / f"episode_{i:03d}.csv", r)
    ev.write_pca_csv(out / "pca.csv", reports[0])
    ev.write_matrix_csv(out / "edge_weights.csv", np.mean([r.edge_weights for r in reports], axis=0))
    with default_dtype(cfg.dtype), no_grad():
        graph = causal.graph(model.causal_logits, 0.1)
        A = gumbel_edge_sample(graph, seeds.split(cfg.seed, "eval", 0), hard=True).data
    ev.write_matrix_csv(out / "causal_adjacency.csv", A)
    result["checkpoint_step"] = step
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    manifest.outputs.update(metrics=str(out / "eval.json"), event_scores=str(score_dir),
                            pca=str(out / "pca.csv"), edge_weights=str(out / "edge_weights.csv"),
                            adjacency=str(out / "causal_adjacency.csv"))
    print(json.dumps({k: result[k] for k in ("ari_fg", "event_f1", "pca_evr")}))
    return EXIT_OK


def _parse_row(text: str) -> tuple[str, int, int]:
    try:
        name, bn, t = text.split(":")
        return name, int(bn), int(t)
    except ValueError as exc:
        raise UsageError(f"--row expects NAME:BxN:T, got {text!r}") from exc


def cmd_bench_scan(args, manifest: RunManifest) -> int:
    from .scan import TABLE_ROWS, bench_scan, write_bench_csv

    if (args.bn is None) != (args.t is None):
        raise UsageError("--bn and --t go together")
    rows = [_parse_row(r) for r in args.row or []]
    if args.bn is not None:
        rows.append(("Custom", args.bn, args.t))
    report = bench_scan(tuple(rows) or TABLE_ROWS, d_inner=args.dinner, d_state=args.dstate,
                        workers=_capped(args.workers), chunk=args.chunk, repeats=args.repeats,
                        dtype=np.dtype(args.dtype), seed=args.seed if args.seed is not None else 0)
    path = Path(args.out) / args.csv
    path.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(report, path)
    manifest.outputs["csv"] = str(path)
    print(path.read_text(), end="")
    return EXIT_OK


def gradcheck_registry():
    """Importing the modules registers their checks."""
    from . import hierarchy, sbd, scan, slots, structure  # noqa: F401
    from .tensor.gradcheck import REGISTRY

    return REGISTRY


def _scope_of(builder) -> str:
    mod = builder.__module__.split(".")
    return "tensor" if "tensor" in mod else mod[-1]


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    from .tensor.gradcheck import run_registered

    registry = gradcheck_registry()
    names = [n for n, b in sorted(registry.items()) if args.scope in ("all", _scope_of(b))]
    if args.scope not in ("all", "model") and not names:
        raise UsageError(f"no checks registered under scope {args.scope!r}")
    seeds = tuple(range(args.seeds)) if args.seed is None else (args.seed,)
    results = run_registered(args.tol, seeds, names, registry)
    rows = [(r.name, _scope_of(registry[r.name]), r.max_rel_err, r.passed) for r in results]
    if args.scope in ("all", "model") and not args.skip_model:
        from .model.config import ModelConfig
        from .model.spotcheck import model_spot_check

        spot = model_spot_check(ModelConfig(batch=2), n_params=20, seed=seeds[0])
        rows.append(("model_spot_check[20]", "model", spot.max_rel_err, spot.max_rel_err <= args.model_tol))
    path = Path(args.out) / "gradcheck.csv"
    with open(path, "w") as f:
        f.write("op,scope,max_rel_err,passed\n")
        for name, scope, err, ok in rows:
            f.write(f"{name},{scope},{err!r},{int(ok)}\n")
    width = max(len(r[0]) for r in rows)
    for name, scope, err, ok in rows:
        print(f"{name:<{width}}  {scope:<10} {err:.3e}  {'PASS' if ok else 'FAIL'}")
    failed = [r[0] for r in rows if not r[3]]
    print(f"{len(rows)} checks, {len(failed)} failed")
    manifest.outputs["report"] = str(path)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_inspect(args, manifest: RunManifest) -> int:
    from . import worldgen
    from .model import evaluate as ev

    cfg, model, ema, _, _, _ = _load(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    manifest.write()
    episode = worldgen.load_episode(args.episode)
    if episode.frames.shape[-1] != cfg.image_size:
        from .model.config import ConfigError

        raise ConfigError(f"episode frames are {episode.frames.shape[-1]}px, model expects {cfg.image_size}px")
    report = ev.episode_report(model, ema, cfg, episode)
    if not 0 <= args.frame < report.alpha.shape[0]:
        raise UsageError(f"--frame must be in [0, {report.alpha.shape[0] - 1}]")
    files = ev.inspect_dump(report, Path(args.out) / "inspect", args.frame)
    manifest.outputs["inspect"] = str(Path(args.out) / "inspect")
    for p in files:
        print(p)
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides the config file)")
    common.add_argument("--out", default="hclsm_out", help="output directory (all outputs land under it)")

    p = argparse.ArgumentParser(prog="hclsm", description="Desk-scale hierarchical causal latent state world model")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic pushing dataset")
    g.add_argument("--episodes", type=int, default=256)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--objects", default=None, metavar="N|LO-HI",
                   help="objects per episode, a count or an inclusive range (default 2-4)")
    g.add_argument("--min-objects", type=int, default=2)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--seed0", type=int, default=None, help="seed of the first episode (default: --seed, else 0)")
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.set_defaults(fn=cmd_gen_data)

    def config_flags(q):
        q.add_argument("--config", help="flat key = value config file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")

    t = sub.add_parser("train", parents=[common], help="train on a generated dataset")
    config_flags(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--steps", type=int, default=None, help="total steps (wins over the file)")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints in --out")
    t.add_argument("--verbose", action="store_true")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="segmentation, event and PCA metrics")
    config_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--episodes", type=int, default=20)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench-scan", parents=[common], help="sequential vs chunked scan timing")
    b.add_argument("--row", action="append", metavar="NAME:BxN:T", help="benchmark row (repeatable)")
    b.add_argument("--bn", type=int, default=None, help="tracks (B*N) of a single custom row")
    b.add_argument("--t", type=int, default=None, help="sequence length of the custom row")
    b.add_argument("--dinner", type=int, default=64)
    b.add_argument("--dstate", type=int, default=8)
    b.add_argument("--csv", default="bench_scan.csv", help="CSV path under --out")
    b.add_argument("--workers", type=int, default=8)
    b.add_argument("--chunk", type=int, default=None)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--dtype", default="float64", choices=["float32", "float64"])
    b.set_defaults(fn=cmd_bench_scan)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every registered op")
    c.add_argument("--scope", default="all",
                   choices=["all", "tensor", "scan", "slots", "sbd", "hierarchy", "structure", "model"])
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--model-tol", type=float, default=1e-3)
    c.add_argument("--seeds", type=int, default=1, help="number of seeds when --seed is not given")
    c.add_argument("--skip-model", action="store_true", help="leave out the whole-model spot check")
    c.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("inspect", parents=[common], help="alpha heatmaps, segmentation and traces for one episode")
    config_flags(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--episode", required=True, help="episode directory")
    i.add_argument("--frame", type=int, default=0)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    from .model.config import ConfigError
    from .model.train import NumericalAbort

    manifest = RunManifest(args.command, argv, args.seed if args.seed is not None else 0, str(args.out))
    manifest.write()
    try:
        code = args.fn(args, manifest)
    except ConfigError as exc:
        where = f"\n  offending line: {exc.line}" if exc.line is not None else ""
        print(f"config error: {exc}{where}", file=sys.stderr)
        manifest.finish("config_error", EXIT_USAGE, f"{exc}{where}")
        return EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        manifest.finish("usage_error", EXIT_USAGE, str(exc))
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; diagnostics in {exc.dump_path}", file=sys.stderr)
        manifest.outputs["diagnostics"] = str(exc.dump_path)
        manifest.finish("numerical_abort", EXIT_NUMERICAL, str(exc))
        return EXIT_NUMERICAL
    except BaseException as exc:
        manifest.finish("error", EXIT_FAILED, "".join(traceback.format_exception_only(type(exc), exc)).strip())
        raise
    manifest.finish("ok" if code == EXIT_OK else "failed", code)
    return code


if __name__ == "__main__":
    sys.exit(main())
