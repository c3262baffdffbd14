"""Command-line entry point.

Exit codes: 0 success, 1 a verify suite failed, 2 usage or input error
(including a space over the enumeration cap and a degenerate search).
Set NTKNAS_SEED to override the seed of every seeded subcommand.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .archspace import ArchId, EnumerationTooLarge, enumerate_space
from .data import GENERATORS, gen_dataset, load_dataset, save_dataset
from .harness import SCORERS, ScoringSetup, TrainConfig, correlation, score_arch, train_all
from .io import (
    BenchmarkCache,
    RunRecord,
    default_space,
    load_space,
    read_jsonl,
    selection_dict,
    space_to_dict,
    write_json,
)
from .ntk import approx_trace, trace_norm_exact
from .search import DegenerateSearch, PenaltyConfig, nasi_search
from .tensor import ContractError
from .verify import SUITES, run_suite

log = logging.getLogger("ntknas")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _seed(args_seed: int) -> int:
    env = os.environ.get("NTKNAS_SEED")
    return int(env) if env not in (None, "") else args_seed


def _space(path):
    return default_space() if path is None else load_space(path)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _parse_param(text: str):
    key, _, raw = text.partition("=")
    if not _:
        raise ContractError(f"--param expects key=value, got {text!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    params = dict(_parse_param(p) for p in args.param)
    bundle = gen_dataset(args.kind, args.m, seed=_seed(args.seed), normalize=not args.no_normalize, **params)
    save_dataset(bundle, args.out)
    print(f"wrote {bundle.m} samples to {args.out}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    space = _space(args.space)
    archs = enumerate_space(space, args.cap)
    print(len(archs))
    if not args.count_only:
        for i, a in enumerate(archs):
            print(f"{i}\t{a.key()}\t{a.describe(space)}")
    return EXIT_OK


def cmd_score(args) -> int:
    from .archspace import instantiate

    space = _space(args.space)
    arch = ArchId.parse(args.arch).validate(space)
    data = load_dataset(args.data)
    seed = _seed(args.seed)
    net = instantiate(space, arch, seed)
    rec = {"arch": arch.key(), "method": args.method, "seed": seed, "m": data.m}
    if args.method == "exact":
        rec["trace"] = trace_norm_exact(net, data.X)
    else:
        rec.update(batch_size=args.batch_size, loss=args.loss)
        rec["trace"] = approx_trace(net, data.X, data.Y, args.loss, args.batch_size, seed)
    _print_json(rec)
    return EXIT_OK


def search_config(args) -> PenaltyConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = PenaltyConfig.from_dict(base)
    env = os.environ.get("NTKNAS_SEED")
    if env not in (None, ""):
        cfg = PenaltyConfig.from_dict({**cfg.to_dict(), "seed": int(env)})
    return cfg


def run_search(space, data_dir, cfg: PenaltyConfig, label_free: bool = False) -> RunRecord:
    data = load_dataset(data_dir)
    t0 = time.perf_counter()
    res = nasi_search(space, data.X, None if label_free else data.Y, cfg)
    config = {
        "space": space_to_dict(space),
        "data": str(data_dir),
        "label_free": label_free,
        "search": cfg.to_dict(),
    }
    selection = {**selection_dict(space, res.arch), "nu0": res.nu0, "mu": res.mu, "labels": res.labels}
    return RunRecord("search", config, res.log, selection, time.perf_counter() - t0, cfg.seed)


def replay(record: RunRecord) -> RunRecord:
    """Rerun a search from the configuration echoed in its record."""
    from .io import space_from_dict

    c = record.config
    return run_search(space_from_dict(c["space"]), c["data"], PenaltyConfig.from_dict(c["search"]), c["label_free"])


def cmd_search(args) -> int:
    space = _space(args.space)
    rec = run_search(space, args.data, search_config(args), args.label_free)
    out = Path(args.out)
    rec.save(out / "run.jsonl")
    write_json(out / "selected.json", {k: rec.selection[k] for k in ("arch", "describe", "space")})
    print(f"{rec.selection['arch']}\t{rec.selection['describe']}")
    return EXIT_OK


def cmd_rank(args) -> int:
    space = _space(args.space)
    data = load_dataset(args.data)
    seed = _seed(args.seed)
    setup = ScoringSetup(data, weight_seed=seed, batch_size=args.batch_size, batch_seed=seed, loss_kind=args.loss)
    header = {
        "kind": "scores",
        "space": space_to_dict(space),
        "data": data.meta,
        "scorers": sorted(args.scorers),
        "setup": {"weight_seed": seed, "batch_size": args.batch_size, "batch_seed": seed, "loss": args.loss},
    }
    cache = BenchmarkCache(args.out, header)
    archs = enumerate_space(space, args.cap)
    for i, a in enumerate(archs):
        rec = score_arch(space, a, setup, args.scorers)
        cache.add(rec)
        if (i + 1) % 16 == 0 or i + 1 == len(archs):
            log.info("scored %d/%d", i + 1, len(archs))
    print(f"{len(cache)} records in {args.out}")
    return EXIT_OK


def cmd_train_all(args) -> int:
    space = _space(args.space)
    data = load_dataset(args.data)
    n_train = args.train_size if args.train_size else (2 * data.m) // 3
    train, test = data.split(n_train)
    cfg = TrainConfig(args.epochs, args.lr, args.batch_size, _seed(args.seed))
    header = {"kind": "ground_truth", "space": space_to_dict(space), "data": data.meta, "train_size": n_train, "train": cfg.to_dict()}
    cache = BenchmarkCache(args.out, header)
    known = len(cache)
    rows = train_all(space, train, test, cfg, cache, progress=lambda i, n: log.info("trained %d/%d", i, n) if i % 8 == 0 else None)
    if args.verify and known:
        rng = np.random.default_rng(0)
        for key in rng.choice([r["arch"] for r in rows], size=min(args.verify, len(rows)), replace=False):
            a = ArchId.parse(str(key))
            fresh = train_all(space, train, test, cfg, None, [a])[0]
            cache.check(fresh)
        print(f"verified {min(args.verify, len(rows))} cached records")
    print(f"{len(cache)} records in {args.out}")
    return EXIT_OK


def _column(spec: str) -> dict[str, float]:
    path, _, key = spec.rpartition(":")
    if not path:
        raise ContractError(f"expected PATH:COLUMN, got {spec!r}")
    out = {}
    for rec in read_jsonl(path):
        if rec.get("type") == "header":
            continue
        if key not in rec:
            raise ContractError(f"{path}: record {rec.get('arch')} has no column {key!r}")
        out[rec["arch"]] = float(rec[key])
    return out


def cmd_correlate(args) -> int:
    a, b = _column(args.a), _column(args.b)
    keys = sorted(set(a) & set(b))
    if len(keys) < 2:
        raise ContractError("fewer than two architectures in common")
    rep = correlation([a[k] for k in keys], [b[k] for k in keys], (args.a, args.b))
    _print_json(rep.to_dict())
    return EXIT_OK


def cmd_verify(args) -> int:
    res = run_suite(args.suite, quick=not args.full)
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {res.suite}/{c.name}: {c.detail}")
    bad = res.first_failure
    if bad is not None:
        print(f"first failure: {res.suite}/{bad.name}: {bad.detail}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntknas", description="Training-free architecture search with NTK trace scores.")
    p.add_argument("--threads", type=int, default=1, help="upper bound on worker processes (sweeps run serially)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--kind", required=True, choices=GENERATORS)
    g.add_argument("--out", required=True)
    g.add_argument("--m", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", default=[], help="generator parameter key=value (repeatable)")
    g.add_argument("--no-normalize", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("enumerate", help="count and list a space")
    e.add_argument("--space")
    e.add_argument("--cap", type=int, default=100_000)
    e.add_argument("--count-only", action="store_true")
    e.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("score", help="trace score of one architecture")
    s.add_argument("--space")
    s.add_argument("--arch", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=("exact", "approx"), default="approx")
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--loss", choices=("mse", "ce"), default="mse")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("search", help="run the one-step search")
    r.add_argument("--space")
    r.add_argument("--data", required=True)
    r.add_argument("--config", help="JSON file with search settings")
    r.add_argument("--label-free", action="store_true", help="ignore dataset labels, use uniform random targets")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_search)

    k = sub.add_parser("rank", help="score every architecture into a cache")
    k.add_argument("--space")
    k.add_argument("--data", required=True)
    k.add_argument("--scorers", nargs="+", choices=SCORERS, default=["exact", "approx"])
    k.add_argument("--batch-size", type=int, default=64)
    k.add_argument("--loss", choices=("mse", "ce"), default="mse")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--cap", type=int, default=100_000)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_rank)

    t = sub.add_parser("train-all", help="train every architecture for ground-truth test error")
    t.add_argument("--space")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--train-size", type=int, help="leading samples used for training (default 2/3)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verify", type=int, default=0, help="retrain this many cached architectures and compare")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_all)

    c = sub.add_parser("correlate", help="correlate two score columns")
    c.add_argument("--a", required=True, help="PATH:COLUMN of a JSON-lines cache")
    c.add_argument("--b", required=True)
    c.set_defaults(func=cmd_correlate)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--full", action="store_true", help="acceptance-size run")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (ContractError, FileNotFoundError, EnumerationTooLarge, DegenerateSearch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
