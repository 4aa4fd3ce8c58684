"""Command-line entry point: ``painvrl {synth,train,evaluate,pareto-demo,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, evaluation, gradcheck, maskgen, pareto, pipeline
from .config import ConfigError, read_config, require
from .dataset import FeatureTable, InteractionSet, SyntheticSpec

log = logging.getLogger("painvrl")


def synthetic_spec(values: dict) -> SyntheticSpec:
    names = ("num_users", "num_items", "d_inv", "d_spu", "num_envs_true", "flip_strength", "density",
             "inv_scale", "spu_scale", "noise", "shared_spurious")
    return SyntheticSpec(**{n: values[n] for n in names}, seed=pipeline.sub_seed(values["seed"], "dataset"))


def parse_modalities(text: str | None) -> dict[str, int] | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        name, _, dim = part.partition(":")
        if not name.strip() or not dim.strip().isdigit():
            raise ConfigError(f"bad modality entry {part!r}; expected name:dim")
        out[name.strip()] = int(dim)
    return out


def load_inputs(values: dict) -> tuple[InteractionSet, FeatureTable]:
    """Interactions and item features named by the config (or the synthetic corpus)."""
    if values["synthetic"]:
        data, features, _ = dataset.make_synthetic(synthetic_spec(values))
        return data, features
    base = Path(values["data_dir"]) if values["data_dir"] else None
    inter = values["interactions"] or (base / "interactions.tsv" if base else None)
    feats = values["features"] or (base / "features.tsv" if base else None)
    if inter is None or feats is None:
        raise ConfigError("missing required key 'data_dir' (or 'interactions' and 'features')")
    for p in (inter, feats):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")
    data = dataset.load_interactions(inter)
    features = dataset.load_features(feats, data.item_ids, data.num_items, parse_modalities(values["modalities"]))
    return data, features


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    values = read_config(args.config)
    require(values, "data_dir")
    spec = synthetic_spec(values)
    data, features, env = dataset.make_synthetic(spec)
    out = Path(values["data_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset.save_interactions(data, out / "interactions.tsv")
    dataset.save_features(features, out / "features.tsv")
    with open(out / "environments.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, i, e in zip(data.pos_users.tolist(), data.pos_items.tolist(), env.tolist()):
            fh.write(f"{u}\t{i}\t{e}\n")
    print(f"wrote {data.num_positives} interactions and {features.num_items} feature vectors to {out}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        cfg_path = Path(args.config) if args.config else run_dir / "config"
        values = read_config(cfg_path)
        values["run_dir"] = str(run_dir)
    else:
        if not args.config:
            raise ConfigError("train needs a config file (or --resume)")
        values = read_config(args.config)
        require(values, "run_dir")
    data, features = load_inputs(values)
    cfg = pipeline.RunConfig.from_values(values)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("painvrl").addHandler(handler)
    try:
        art = pipeline.run(cfg, data, features, values=values, resume=bool(args.resume))
    finally:
        logging.getLogger("painvrl").removeHandler(handler)
        handler.close()
    for split in ("iid", "ood"):
        row = art.metrics[split]
        print(f"{split}\tP@{cfg.K}={row['precision']:.4f}\tR@{cfg.K}={row['recall']:.4f}\tN@{cfg.K}={row['ndcg']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    values = read_config(args.config if args.config else run_dir / "config")
    params, m, split = pipeline.load_run(run_dir)
    _, features = load_inputs(values)
    K = args.k if args.k is not None else values["K"]
    phi = maskgen.to_invariant(m, features.vectors)
    table = evaluation.evaluate((params, phi), split, K)
    out = Path(args.out) if args.out else run_dir / "metrics.tsv"
    evaluation.write_metrics(table, K, out)
    print(out.read_text(encoding="utf-8"), end="")
    return 0


def cmd_pareto_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n in range(args.pairs):
        d = int(rng.integers(2, args.max_dim + 1))
        g1, g2 = rng.uniform(-10, 10, d), rng.uniform(-10, 10, d)
        w = pareto.solve_weights(g1, g2)
        chk = pareto.check_descent(g1, g2, w)
        oracle = pareto.oracle_min_norm(g1, g2, args.grid)
        worst = max(worst, abs(w.w_erm - oracle))
        if n < args.show:
            print(f"d={d:2d} w_erm={w.w_erm:.6f} oracle={oracle:.6f} "
                  f"g1.dm={chk.dot_erm:.4f} g2.dm={chk.dot_irm:.4f} -|dm|^2={-chk.sq_norm:.4f}")
    print(f"{args.pairs} pairs, max |w - oracle| = {worst:.2e}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(args.instances, args.seed, args.tol, args.h, args.inject_bug)
    failed = [(name, n, r) for name, n, r in reports if not r.passed]
    worst = max(reports, key=lambda x: x[2].max_rel_diff)
    print(f"{len(reports)} checks on {args.instances} instances, max relative error "
          f"{worst[2].max_rel_diff:.3e} ({worst[0]}, instance {worst[1]})")
    for name, n, r in failed:
        print(f"FAIL {name} instance {n}: rel {r.max_rel_diff:.3e} at index {r.worst_index}")
    print("PASS" if not failed else "FAIL")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="painvrl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted synthetic corpus")
    p.add_argument("config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the full pipeline")
    p.add_argument("config", nargs="?")
    p.add_argument("--resume", metavar="RUN_DIR", help="continue from the newest checkpoint in RUN_DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a finished run")
    p.add_argument("run_dir")
    p.add_argument("--config", help="config file (default: the run's resolved config)")
    p.add_argument("--k", type=int, help="cutoff K (default: config value)")
    p.add_argument("--out", help="output file (default: RUN_DIR/metrics.tsv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pareto-demo", help="min-norm weights on random gradient pairs")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--max-dim", type=int, default=64)
    p.add_argument("--grid", type=int, default=100_000)
    p.add_argument("--show", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pareto_demo)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, dataset.DataError, FileNotFoundError, pipeline.RunLockedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
